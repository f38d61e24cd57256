"""Three-stage optimization: forward decoder first, then the backward decoder
against a frozen copy of the forward encoder, then both decoders jointly with
the agreement penalty.

Adadelta with an aggressively decaying epsilon drives every stage: each epoch
without a validation-accuracy improvement multiplies epsilon by 0.01 and
bumps a patience counter; training stops once the counter exceeds its limit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, model as M, search
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .errors import NumericError, UsageError
from .tokenizer import L2R, R2L, VocabPair

log = logging.getLogger(__name__)

# principal decoder per stage: drives validation and greedy dev decoding
STAGE_DIRECTION = {
    "forward": L2R,
    "backward": R2L,
    "backward_fixed": R2L,
    "joint": L2R,
    "joint_reg": L2R,
}


# ---------------------------------------------------------------------------
# Adadelta


class Adadelta:
    """Standard accumulator form; parameters listed as frozen never move."""

    def __init__(self, params: list[tuple[str, Tensor]], rho: float, eps: float):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.sq_grad = {name: np.zeros_like(t.data) for name, t in params}
        self.sq_delta = {name: np.zeros_like(t.data) for name, t in params}

    def step(self):
        rho = self.rho
        for name, t in self.params:
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            eg = self.sq_grad[name]
            ed = self.sq_delta[name]
            eg *= rho
            eg += (1.0 - rho) * g * g
            delta = -(np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps)) * g
            ed *= rho
            ed += (1.0 - rho) * delta * delta
            t.data += delta

    def decay_eps(self, factor: float):
        self.eps *= factor


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Global-norm clipping over the given parameters; returns the norm."""
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        coef = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad *= coef
    return norm


# ---------------------------------------------------------------------------
# Early stopping


@dataclass
class PatienceTracker:
    limit: int
    best: float = -np.inf
    counter: int = 0


@dataclass
class EpochDecision:
    improved: bool
    stop: bool
    eps: float
    counter: int


def epoch_end(val_accuracy: float, tracker: PatienceTracker, optimizer: Adadelta,
              decay_factor: float) -> EpochDecision:
    """Strict-improvement check: a better accuracy keeps epsilon and the
    counter as they are; anything else decays epsilon and bumps the counter.
    Stop once the counter exceeds the limit."""
    improved = val_accuracy > tracker.best
    if improved:
        tracker.best = val_accuracy
    else:
        optimizer.decay_eps(decay_factor)
        tracker.counter += 1
    return EpochDecision(improved, tracker.counter > tracker.limit, optimizer.eps, tracker.counter)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    utts: list  # of (utterance, fwd TokenSeq, bwd TokenSeq)
    lengths: list[int]

    def padded_features(self):
        """(B, Tmax, D) zero-padded array plus a (B, Tmax) mask of 0 / -inf
        marking padded frames; padded frames never reach a loss and any
        attention over the padded array masks their scores to -inf."""
        tmax = max(self.lengths)
        dim = self.utts[0][0].features.shape[1]
        feats = np.zeros((len(self.utts), tmax, dim))
        mask = np.zeros((len(self.utts), tmax))
        for i, (utt, _, _) in enumerate(self.utts):
            t = utt.features.shape[0]
            feats[i, :t] = utt.features
            mask[i, t:] = -np.inf
        return feats, mask


def make_batches(encoded_data: list, batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """Sort by frame count, group, then shuffle group order."""
    if not encoded_data:
        raise UsageError("empty dataset")
    ordered = sorted(encoded_data, key=lambda rec: (rec[0].features.shape[0], rec[0].id))
    groups = [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]
    order = rng.permutation(len(groups))
    return [Batch(groups[i], [r[0].features.shape[0] for r in groups[i]]) for i in order]


def encode_dataset(data: list, vocab_pair: VocabPair) -> list:
    """(utterance, L2R targets, R2L targets) triples, encoded once."""
    return [(utt, *vocab_pair.encode_both(utt.transcript)) for utt in data]


# ---------------------------------------------------------------------------
# Loss assembly


def _step_outputs(logit_steps, token_count: int, compare: str):
    """Per-token output rows for the agreement penalty (end step excluded)."""
    steps = logit_steps[:token_count]
    if compare == "probs":
        steps = [ad.softmax(s, axis=1) for s in steps]
    return steps


def _zero():
    return Tensor(np.zeros((1, 1)))


def batch_loss(batch: Batch, model: M.DualModel, cfg: TrainConfig, stage: str,
               omega_maps=None) -> losses.LossBundle:
    """Mean per-utterance addends over the batch, combined per the stage:
    single-decoder stages reduce to one cross-entropy; joint stages weight
    the two cross-entropies by alpha and add lambda times the agreement
    penalty (zero for the unregularized joint stage)."""
    need_fwd = stage in ("forward", "joint", "joint_reg")
    need_bwd = stage in ("backward", "backward_fixed", "joint", "joint_reg")
    ce_f_parts, ce_b_parts, omega_parts = [], [], []
    for utt, tgt_fwd, tgt_bwd in batch.utts:
        feats = Tensor(utt.features)
        if need_fwd and need_bwd:
            logits_f, logits_b, _ = M.forward_both(feats, tgt_fwd, tgt_bwd, model, cfg)
        elif need_fwd:
            logits_f = M.forward_pass(feats, tgt_fwd, model, L2R, cfg)
            logits_b = None
        else:
            logits_b = M.forward_pass(feats, tgt_bwd, model, R2L, cfg)
            logits_f = None
        if logits_f is not None:
            ce_f_parts.append(losses.cross_entropy(logits_f, list(tgt_fwd.ids) + [tgt_fwd.vocab.eos]))
        if logits_b is not None:
            ce_b_parts.append(losses.cross_entropy(logits_b, list(tgt_bwd.ids) + [tgt_bwd.vocab.eos]))
        if stage == "joint_reg":
            omega_parts.append(
                agreement_penalty(logits_f, logits_b, len(tgt_fwd), len(tgt_bwd), cfg, omega_maps)
            )

    mean = lambda parts: ad.mean_all(ad.concat(parts, axis=1)) if parts else _zero()
    ce_f = mean(ce_f_parts)
    ce_b = mean(ce_b_parts)
    omega = mean(omega_parts)
    if stage == "forward":
        alpha, lam = 1.0, 0.0
    elif stage in ("backward", "backward_fixed"):
        alpha, lam = 0.0, 0.0
    elif stage == "joint":
        alpha, lam = cfg.alpha, 0.0
    else:
        alpha, lam = cfg.alpha, cfg.lam
    return losses.combine_losses(ce_f, ce_b, omega, alpha=alpha, lam=lam, gamma=cfg.gamma)


def agreement_penalty(logits_f, logits_b, k: int, l: int, cfg: TrainConfig, omega_maps=None):
    """Penalty between the two decoders' per-step outputs for one utterance.

    The backward list is index-reversed so both run in surface order.  Char
    targets (k == l over one vocabulary) take the mean L2 distance; subword
    targets take soft-DTW over union-vocabulary squared Euclidean costs.
    """
    steps_f = _step_outputs(logits_f, k, cfg.omega_compare)
    steps_b = _step_outputs(logits_b, l, cfg.omega_compare)[::-1]
    if cfg.omega_stop_grad == "l2r":
        steps_f = [s.detach() for s in steps_f]
    elif cfg.omega_stop_grad == "r2l":
        steps_b = [s.detach() for s in steps_b]
    if cfg.target_kind == "char":
        return losses.l2_agreement(steps_f, steps_b)
    fwd_map, bwd_map = omega_maps if omega_maps else (None, None)
    return losses.softdtw_agreement(steps_f, steps_b, cfg.gamma, fwd_map=fwd_map, bwd_map=bwd_map)


# ---------------------------------------------------------------------------
# Validation


def teacher_forced_accuracy(model: M.DualModel, encoded_data: list, direction: str,
                            cfg: TrainConfig) -> float:
    """Fraction of teacher-forced steps whose argmax equals the gold token."""
    hits = total = 0
    for utt, tgt_fwd, tgt_bwd in encoded_data:
        tgt = tgt_fwd if direction == L2R else tgt_bwd
        logits = M.forward_pass(Tensor(utt.features), tgt, model, direction, cfg)
        golds = list(tgt.ids) + [tgt.vocab.eos]
        for step, gold in zip(logits, golds):
            hits += int(np.argmax(step.data[0]) == gold)
            total += 1
    return hits / max(1, total)


def greedy_dev_wer(model: M.DualModel, encoded_data: list, vocab_pair: VocabPair,
                   direction: str, cfg: TrainConfig) -> float:
    vocab = vocab_pair.fwd if direction == L2R else vocab_pair.bwd
    pairs = []
    for utt, _, _ in encoded_data:
        hyp = search.beam_search(Tensor(utt.features), model, vocab, beam=1,
                                 direction=direction, cfg=cfg)
        pairs.append((utt.transcript, search.decode_to_text(hyp, vocab, direction)))
    return search.corpus_wer(pairs).wer


# ---------------------------------------------------------------------------
# Train log


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    ce_f: float
    ce_b: float
    omega: float
    total: float
    val_acc: float
    val_wer: float
    eps: float
    patience: int
    seconds: float

    def line(self) -> str:
        return "\t".join([
            self.stage, str(self.epoch),
            f"{self.ce_f:.17g}", f"{self.ce_b:.17g}", f"{self.omega:.17g}", f"{self.total:.17g}",
            f"{self.val_acc:.17g}", f"{self.val_wer:.17g}",
            f"{self.eps:.17g}", str(self.patience), f"{self.seconds:.3f}",
        ])


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def save(self, path):
        Path(path).write_text("\n".join(r.line() for r in self.records) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Stages


def _resolve_model(stage: str, vocab_pair: VocabPair, cfg: TrainConfig, work_dir: Path,
                   seed: int, init_model: M.DualModel | None) -> M.DualModel:
    if init_model is not None:
        model = init_model
    elif stage in ("forward", "backward"):
        model = M.build_model(cfg, len(vocab_pair.fwd), len(vocab_pair.bwd), seed)
    elif stage == "backward_fixed":
        fwd_ckpt = work_dir / "forward.best.ddck"
        if not fwd_ckpt.exists():
            raise UsageError(f"backward_fixed needs the forward-stage checkpoint {fwd_ckpt}")
        model = M.build_model(cfg, len(vocab_pair.fwd), len(vocab_pair.bwd), seed)
        M.load_checkpoint(model, fwd_ckpt, groups=("encoder", "fwd"))
    elif stage in ("joint", "joint_reg"):
        fwd_ckpt = work_dir / "forward.best.ddck"
        bwd_ckpt = work_dir / "backward_fixed.best.ddck"
        for ckpt in (fwd_ckpt, bwd_ckpt):
            if not ckpt.exists():
                raise UsageError(f"{stage} needs the prerequisite checkpoint {ckpt}")
        model = M.build_model(cfg, len(vocab_pair.fwd), len(vocab_pair.bwd), seed)
        M.load_checkpoint(model, fwd_ckpt, groups=("encoder", "fwd"))
        M.load_checkpoint(model, bwd_ckpt, groups=("bwd",))
    else:
        raise UsageError(f"unknown stage {stage!r}")

    model.frozen = {
        "forward": {"bwd"},
        "backward": {"fwd"},
        "backward_fixed": {"encoder", "fwd"},
        "joint": set(),
        "joint_reg": set(),
    }[stage]
    return model


def run_stage(
    stage: str,
    train_data: list,
    dev_data: list,
    vocab_pair: VocabPair,
    cfg: TrainConfig,
    work_dir: str | Path,
    init_model: M.DualModel | None = None,
    seed: int | None = None,
) -> tuple[M.DualModel, TrainLog]:
    """Train one stage to early stopping or the epoch cap.

    Optimizer state is rebuilt per stage.  Every epoch writes
    `<stage>.ep<N>.ddck`; validation improvements refresh
    `<stage>.best.ddck`.  The returned model carries the best-epoch weights.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    model = _resolve_model(stage, vocab_pair, cfg, work_dir, seed, init_model)
    direction = STAGE_DIRECTION[stage]

    train_enc = encode_dataset(train_data, vocab_pair)
    dev_enc = encode_dataset(dev_data, vocab_pair)
    omega_maps = None
    if stage == "joint_reg" and cfg.target_kind == "bpe":
        omega_maps = losses.union_vocab_maps(vocab_pair.fwd.units, vocab_pair.bwd.units)

    optimizer = Adadelta(list(model.trainable_params()), rho=cfg.rho, eps=cfg.eps)
    tracker = PatienceTracker(limit=cfg.patience)
    batch_rng = np.random.default_rng(seed + 1)
    train_log = TrainLog()
    best_path = work_dir / f"{stage}.best.ddck"

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.monotonic()
        sums = np.zeros(4)
        count = 0
        for batch in make_batches(train_enc, cfg.batch_size, batch_rng):
            model.zero_grad()
            with Tape() as tape:
                bundle = batch_loss(batch, model, cfg, stage, omega_maps)
                addends = np.array(bundle.addends())
                if not np.all(np.isfinite(addends)):
                    raise NumericError(f"non-finite loss in stage {stage} epoch {epoch}: {addends}")
                tape.backward(bundle.total)
            clip_gradients(optimizer.params, cfg.grad_clip)
            optimizer.step()
            sums += addends * len(batch.utts)
            count += len(batch.utts)

        val_acc = teacher_forced_accuracy(model, dev_enc, direction, cfg)
        val_wer = greedy_dev_wer(model, dev_enc, vocab_pair, direction, cfg)
        M.save_checkpoint(model, work_dir / f"{stage}.ep{epoch}.ddck")
        decision = epoch_end(val_acc, tracker, optimizer, cfg.eps_decay)
        if decision.improved or not best_path.exists():
            M.save_checkpoint(model, best_path)
        ce_f, ce_b, omega, total = sums / max(1, count)
        train_log.records.append(EpochRecord(
            stage, epoch, ce_f, ce_b, omega, total, val_acc, val_wer,
            decision.eps, decision.counter, time.monotonic() - t0,
        ))
        log.info(
            "%s epoch %d: loss %.4f acc %.3f wer %.2f eps %.2e patience %d",
            stage, epoch, total, val_acc, val_wer, decision.eps, decision.counter,
        )
        if decision.stop:
            break

    train_log.save(work_dir / f"{stage}.log")
    M.load_checkpoint(model, best_path)
    return model, train_log
