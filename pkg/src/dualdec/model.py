"""Attentional encoder-decoder with one shared encoder and two
direction-specific attention+decoder stacks.

The encoder is a stack of bidirectional LSTM layers, each followed by a
linear projection.  Attention combines content scoring with location
features: the previous attention weights are convolved and folded into the
score, which keeps alignments drifting monotonically.  Each decoder is a
single LSTM cell fed the previous token's embedding and the attention
context; the generator projects (state ++ context) to vocabulary logits.

All state vectors are rows (1, n); per-utterance tensors are (T, n).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .tokenizer import L2R, R2L, TokenSeq

CHECKPOINT_MAGIC = b"DDCK"
CHECKPOINT_VERSION = 1

GROUPS = ("encoder", "fwd", "bwd")


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class LstmParams:
    w_ih: Tensor  # (4H, in)
    w_hh: Tensor  # (4H, H)
    b: Tensor  # (1, 4H)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]


@dataclass
class BiLstmLayer:
    fwd: LstmParams
    bwd: LstmParams
    proj: Tensor  # (P, 2H)


@dataclass
class EncoderParams:
    layers: list[BiLstmLayer]
    subsample: int = 1

    @property
    def out_dim(self) -> int:
        return self.layers[-1].proj.shape[0]


@dataclass
class AttentionParams:
    w_dec: Tensor  # (A, dec_units)
    v_enc: Tensor  # (A, enc_out)
    u_loc: Tensor  # (A, C)
    conv: Tensor  # (C, width), width odd
    score_w: Tensor  # (A, 1)
    score_b: Tensor  # (1, A)


@dataclass
class DecoderParams:
    embed: Tensor  # (V, Em)
    cell: LstmParams
    out_w: Tensor  # (V, H + enc_out)
    out_b: Tensor  # (1, V)

    @property
    def vocab_size(self) -> int:
        return self.out_w.shape[0]


@dataclass
class DecoderStack:
    att: AttentionParams
    dec: DecoderParams


class DualModel:
    """Shared encoder plus forward (L2R) and backward (R2L) stacks, with a
    per-group freeze mask honored by the optimizer."""

    def __init__(self, encoder: EncoderParams, fwd: DecoderStack, bwd: DecoderStack):
        self.encoder = encoder
        self.fwd = fwd
        self.bwd = bwd
        self.frozen: set[str] = set()

    # -- parameter registry -------------------------------------------------

    def named_params(self):
        """(group, name, tensor) triples in a fixed, stable order."""
        for i, layer in enumerate(self.encoder.layers):
            for d, cell in (("f", layer.fwd), ("b", layer.bwd)):
                yield "encoder", f"enc.l{i}.{d}.w_ih", cell.w_ih
                yield "encoder", f"enc.l{i}.{d}.w_hh", cell.w_hh
                yield "encoder", f"enc.l{i}.{d}.b", cell.b
            yield "encoder", f"enc.l{i}.proj", layer.proj
        for group, stack in (("fwd", self.fwd), ("bwd", self.bwd)):
            a, d = stack.att, stack.dec
            yield group, f"{group}.att.w_dec", a.w_dec
            yield group, f"{group}.att.v_enc", a.v_enc
            yield group, f"{group}.att.u_loc", a.u_loc
            yield group, f"{group}.att.conv", a.conv
            yield group, f"{group}.att.score_w", a.score_w
            yield group, f"{group}.att.score_b", a.score_b
            yield group, f"{group}.dec.embed", d.embed
            yield group, f"{group}.dec.cell.w_ih", d.cell.w_ih
            yield group, f"{group}.dec.cell.w_hh", d.cell.w_hh
            yield group, f"{group}.dec.cell.b", d.cell.b
            yield group, f"{group}.dec.out_w", d.out_w
            yield group, f"{group}.dec.out_b", d.out_b

    def trainable_params(self):
        for group, name, t in self.named_params():
            if group not in self.frozen:
                yield name, t

    def zero_grad(self):
        for _, _, t in self.named_params():
            t.grad = None

    def stack(self, direction: str) -> DecoderStack:
        return self.fwd if direction == L2R else self.bwd

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for _, name, t in self.named_params()}


# ---------------------------------------------------------------------------
# Initialization


def _uniform(rng, *shape, scale):
    return Tensor(rng.uniform(-scale, scale, size=shape))


def _init_lstm(rng, in_dim, hidden, scale) -> LstmParams:
    return LstmParams(
        w_ih=_uniform(rng, 4 * hidden, in_dim, scale=scale),
        w_hh=_uniform(rng, 4 * hidden, hidden, scale=scale),
        b=Tensor(np.zeros((1, 4 * hidden))),
    )


def _init_stack(rng, cfg: TrainConfig, enc_out: int, vocab_size: int) -> DecoderStack:
    s = cfg.init_scale
    att = AttentionParams(
        w_dec=_uniform(rng, cfg.att_dim, cfg.dec_units, scale=s),
        v_enc=_uniform(rng, cfg.att_dim, enc_out, scale=s),
        u_loc=_uniform(rng, cfg.att_dim, cfg.att_conv_channels, scale=s),
        conv=_uniform(rng, cfg.att_conv_channels, cfg.att_conv_width, scale=s),
        score_w=_uniform(rng, cfg.att_dim, 1, scale=s),
        score_b=Tensor(np.zeros((1, cfg.att_dim))),
    )
    dec = DecoderParams(
        embed=_uniform(rng, vocab_size, cfg.embed_dim, scale=s),
        cell=_init_lstm(rng, cfg.embed_dim + enc_out, cfg.dec_units, s),
        out_w=_uniform(rng, vocab_size, cfg.dec_units + enc_out, scale=s),
        out_b=Tensor(np.zeros((1, vocab_size))),
    )
    return DecoderStack(att, dec)


def build_model(cfg: TrainConfig, fwd_vocab_size: int, bwd_vocab_size: int, seed: int) -> DualModel:
    """Fresh parameters, uniform in [-init_scale, init_scale], seed-controlled."""
    rng = np.random.default_rng(seed)
    layers = []
    in_dim = cfg.feat_dim
    for _ in range(cfg.enc_layers):
        layers.append(
            BiLstmLayer(
                fwd=_init_lstm(rng, in_dim, cfg.enc_units, cfg.init_scale),
                bwd=_init_lstm(rng, in_dim, cfg.enc_units, cfg.init_scale),
                proj=_uniform(rng, cfg.enc_proj, 2 * cfg.enc_units, scale=cfg.init_scale),
            )
        )
        in_dim = cfg.enc_proj
    encoder = EncoderParams(layers, subsample=cfg.enc_subsample)
    fwd = _init_stack(rng, cfg, encoder.out_dim, fwd_vocab_size)
    bwd = _init_stack(rng, cfg, encoder.out_dim, bwd_vocab_size)
    return DualModel(encoder, fwd, bwd)


# ---------------------------------------------------------------------------
# Forward computation


def _sigmoid(x):
    with np.errstate(over="ignore"):  # exp overflow saturates to the correct 0/1
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def lstm_cell(cell: LstmParams, x_pre: Tensor, state: Tensor) -> Tensor:
    """Fused LSTM cell update as a single tape operation.

    x_pre is the precomputed x @ w_ih^T + b row for this step; state packs
    [h, c] as one (1, 2H) row and the packed successor is returned.  Gate
    order in the 4H preactivation: input, forget, cell, output.
    """
    H = cell.hidden
    h_prev = state.data[:, :H]
    c_prev = state.data[:, H:]
    z = x_pre.data + h_prev @ cell.w_hh.data.T
    zs = _sigmoid(z)
    i, f, o = zs[:, :H], zs[:, H : 2 * H], zs[:, 3 * H :]
    g = np.tanh(z[:, 2 * H : 3 * H])
    c_new = f * c_prev + i * g
    tanc = np.tanh(c_new)
    out = Tensor(np.concatenate([o * tanc, c_new], axis=1))

    def bwd(gout, acc):
        dh = gout[:, :H]
        dc = gout[:, H:] + dh * o * (1.0 - tanc * tanc)
        dz = np.empty_like(z)
        dz[:, :H] = (dc * g) * i * (1.0 - i)  # input gate
        dz[:, H : 2 * H] = (dc * c_prev) * f * (1.0 - f)  # forget gate
        dz[:, 2 * H : 3 * H] = (dc * i) * (1.0 - g * g)  # candidate
        dz[:, 3 * H :] = (dh * tanc) * o * (1.0 - o)  # output gate
        acc(x_pre, dz)
        acc(cell.w_hh, dz.T @ h_prev)
        acc(state, np.concatenate([dz @ cell.w_hh.data, dc * f], axis=1))

    return ad._record(out, (x_pre, state, cell.w_hh), bwd)


def lstm_step(cell: LstmParams, x: Tensor, h: Tensor, c: Tensor):
    """Convenience single-step form over separate h and c rows."""
    x_pre = ad.add(ad.matmul(x, cell.w_ih, transpose_b=True), cell.b)
    packed = lstm_cell(cell, x_pre, ad.concat([h, c], axis=1))
    H = cell.hidden
    return ad.narrow(packed, 1, 0, H), ad.narrow(packed, 1, H, H)


def _run_lstm(cell: LstmParams, xs: Tensor, reverse: bool) -> list[Tensor]:
    """Unidirectional pass over the rows of xs; returns per-step h rows in
    input order (reverse runs the recurrence backward but reports forward)."""
    T = xs.shape[0]
    H = cell.hidden
    pre = ad.add(ad.matmul(xs, cell.w_ih, transpose_b=True), cell.b)  # (T, 4H)
    state = Tensor(np.zeros((1, 2 * H)))
    order = range(T - 1, -1, -1) if reverse else range(T)
    out: list[Tensor | None] = [None] * T
    for t in order:
        state = lstm_cell(cell, ad.narrow(pre, 0, t, 1), state)
        out[t] = ad.narrow(state, 1, 0, H)
    return out


def encode(features: Tensor, encoder: EncoderParams) -> Tensor:
    """Per-time-step hidden states (T', E); T' = T unless subsampling."""
    if features.shape[1] != encoder.layers[0].fwd.w_ih.shape[1]:
        raise ad.ShapeError(
            f"feature dim {features.shape[1]} does not match encoder input "
            f"dim {encoder.layers[0].fwd.w_ih.shape[1]}"
        )
    xs = features
    for layer in encoder.layers:
        fwd_states = ad.concat(_run_lstm(layer.fwd, xs, reverse=False), axis=0)
        bwd_states = ad.concat(_run_lstm(layer.bwd, xs, reverse=True), axis=0)
        states = ad.concat([fwd_states, bwd_states], axis=1)  # (T, 2H)
        xs = ad.matmul(states, layer.proj, transpose_b=True)  # (T, P)
        if encoder.subsample > 1 and xs.shape[0] > encoder.subsample:
            kept = [ad.narrow(xs, 0, t, 1) for t in range(0, xs.shape[0], encoder.subsample)]
            xs = ad.concat(kept, axis=0)
    return xs


def uniform_attention(T: int) -> Tensor:
    return Tensor(np.full((T, 1), 1.0 / T))


def attend(
    att: AttentionParams,
    h_dec: Tensor,
    h_enc: Tensor,
    alpha_prev: Tensor,
    mask: Tensor | None = None,
    enc_proj: Tensor | None = None,
):
    """Location-aware scoring and context pooling.

    score_t = w^T tanh(W h_dec + V h_t + U (conv * alpha_prev)_t + b); the
    weights are the softmax over t and the context is their average of the
    encoder rows.  mask, when given, is a (T, 1) tensor of 0 / -inf added to
    the scores so padded frames get exactly zero weight.  enc_proj caches
    h_enc @ V^T across decode steps.
    """
    T = h_enc.shape[0]
    if alpha_prev.shape != (T, 1):
        raise ad.ShapeError(
            f"attention weights shape {alpha_prev.shape} does not match {T} encoder frames"
        )
    if enc_proj is None:
        enc_proj = ad.matmul(h_enc, att.v_enc, transpose_b=True)  # (T, A)
    loc = ad.conv1d_same(alpha_prev, att.conv)  # (T, C)
    pre = ad.add(enc_proj, ad.matmul(loc, att.u_loc, transpose_b=True))
    pre = ad.add(pre, ad.matmul(h_dec, att.w_dec, transpose_b=True))  # row broadcast
    pre = ad.add(pre, att.score_b)
    scores = ad.matmul(ad.tanh(pre), att.score_w)  # (T, 1)
    if mask is not None:
        scores = ad.add(scores, mask)
    alpha = ad.softmax(scores, axis=0)
    context = ad.matmul(alpha, h_enc, transpose_a=True)  # (1, E)
    return alpha, context


@dataclass
class DecState:
    h: Tensor
    c: Tensor
    alpha: Tensor


def init_dec_state(stack: DecoderStack, T: int) -> DecState:
    H = stack.dec.cell.hidden
    return DecState(Tensor(np.zeros((1, H))), Tensor(np.zeros((1, H))), uniform_attention(T))


def decode_step(
    stack: DecoderStack,
    y_prev: int,
    state: DecState,
    h_enc: Tensor,
    mask: Tensor | None = None,
    enc_proj: Tensor | None = None,
    generate_from_prev_state: bool = False,
):
    """One teacher-forced or search step: attend, update the LSTM, project
    (state ++ context) to logits.  Returns (logits, new state, context)."""
    if not 0 <= y_prev < stack.dec.embed.shape[0]:
        raise ValueError(f"token id {y_prev} out of range for vocab {stack.dec.embed.shape[0]}")
    alpha, context = attend(stack.att, state.h, h_enc, state.alpha, mask=mask, enc_proj=enc_proj)
    emb = ad.embedding(stack.dec.embed, y_prev)
    x = ad.concat([emb, context], axis=1)
    h_new, c_new = lstm_step(stack.dec.cell, x, state.h, state.c)
    gen_state = state.h if generate_from_prev_state else h_new
    gen_in = ad.concat([gen_state, context], axis=1)
    logits = ad.add(ad.matmul(gen_in, stack.dec.out_w, transpose_b=True), stack.dec.out_b)
    return logits, DecState(h_new, c_new, alpha), context


def teacher_forced_logits(
    model: DualModel,
    h_enc: Tensor,
    target: TokenSeq,
    direction: str,
    cfg: TrainConfig | None = None,
) -> list[Tensor]:
    """Distributions over len(target)+1 steps (end-of-sequence included);
    step k consumes gold token k-1, step 1 the start symbol."""
    if target.direction != direction:
        raise ValueError(f"target direction {target.direction} does not match requested {direction}")
    stack = model.stack(direction)
    gen_prev = bool(cfg and cfg.generate_from_prev_state)
    enc_proj = ad.matmul(h_enc, stack.att.v_enc, transpose_b=True)
    state = init_dec_state(stack, h_enc.shape[0])
    inputs = [target.vocab.sos] + list(target.ids)
    logits = []
    for y_prev in inputs:
        step_logits, state, _ = decode_step(
            stack, y_prev, state, h_enc, enc_proj=enc_proj, generate_from_prev_state=gen_prev
        )
        logits.append(step_logits)
    return logits


def forward_pass(
    features: Tensor,
    target: TokenSeq,
    model: DualModel,
    direction: str,
    cfg: TrainConfig | None = None,
) -> list[Tensor]:
    """Encode then teacher-force one decoder; returns per-step logits."""
    h_enc = encode(features, model.encoder)
    return teacher_forced_logits(model, h_enc, target, direction, cfg)


def forward_both(
    features: Tensor,
    target_fwd: TokenSeq,
    target_bwd: TokenSeq,
    model: DualModel,
    cfg: TrainConfig | None = None,
):
    """Teacher-force both decoders over one shared encoder pass."""
    h_enc = encode(features, model.encoder)
    return (
        teacher_forced_logits(model, h_enc, target_fwd, L2R, cfg),
        teacher_forced_logits(model, h_enc, target_bwd, R2L, cfg),
        h_enc,
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: DualModel, path: str | Path):
    """Binary parameter dump; freeze masks are training-session state and
    are not persisted.  Written atomically (temp file then rename)."""
    path = Path(path)
    entries = list(model.named_params())
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for _, name, t in entries:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", t.data.ndim)
        for extent in t.data.shape:
            blob += struct.pack("<I", extent)
        blob += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_checkpoint_arrays(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        params[name] = data.astype(np.float64)
    return params


def load_checkpoint(model: DualModel, path: str | Path, groups: tuple[str, ...] = GROUPS):
    """Copy stored parameters into the model, restricted to the given groups."""
    stored = load_checkpoint_arrays(path)
    for group, name, t in model.named_params():
        if group not in groups:
            continue
        if name not in stored:
            raise ValueError(f"{path}: checkpoint is missing parameter {name}")
        if stored[name].shape != t.data.shape:
            raise ValueError(
                f"{path}: parameter {name} has shape {stored[name].shape}, expected {t.data.shape}"
            )
        t.data = stored[name].copy()
