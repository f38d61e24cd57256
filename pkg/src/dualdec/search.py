"""Decoding and scoring: length-bounded beam search over one decoder stack,
word error rate with explicit substitution/insertion/deletion counts, and the
per-utterance agreement diagnostic between the two decoders' posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .config import TrainConfig
from .tokenizer import L2R, TokenSeq


# ---------------------------------------------------------------------------
# Beam search


@dataclass
class Hypothesis:
    ids: list[int] = field(default_factory=list)
    logprob: float = 0.0
    state: M.DecState | None = None
    finished: bool = False

    @property
    def normalized(self) -> float:
        return self.logprob / max(1, len(self.ids))

    def sort_key(self):
        # higher score first; ties broken by token-id order
        return (-self.normalized, tuple(self.ids))


def beam_search_steps(step_fn, init_state, sos: int, eos: int, beam: int, max_len: int) -> Hypothesis:
    """Core search over an arbitrary step function.

    step_fn(y_prev, state) -> (log-prob vector over the vocabulary, new state).
    At every step all live hypotheses expand over the full vocabulary; the
    top `beam` extensions survive, those ending in eos moving to a finished
    pool.  The best finished hypothesis under length normalization wins; if
    nothing finished within max_len, the best live one is returned flagged
    unfinished.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    live = [Hypothesis(state=init_state)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            y_prev = hyp.ids[-1] if hyp.ids else sos
            logp, new_state = step_fn(y_prev, hyp.state)
            for v in range(len(logp)):
                candidates.append(
                    Hypothesis(hyp.ids + [v], hyp.logprob + float(logp[v]), new_state)
                )
        candidates.sort(key=lambda h: (-h.logprob, tuple(h.ids)))
        live = []
        for cand in candidates[:beam]:
            if cand.ids[-1] == eos:
                cand.finished = True
                finished.append(cand)
            else:
                live.append(cand)
        if not live:
            break
    pool = finished if finished else live
    return min(pool, key=Hypothesis.sort_key)


def beam_search(
    features: Tensor,
    model: M.DualModel,
    vocab,
    beam: int,
    max_len: int | None = None,
    direction: str = L2R,
    cfg: TrainConfig | None = None,
) -> Hypothesis:
    """Forward-only beam search by default; the opposite stack is never
    consulted.  Backward-model benchmarking passes direction explicitly."""
    cfg = cfg or TrainConfig()
    h_enc = M.encode(features, model.encoder)
    if max_len is None:
        max_len = max(2, int(cfg.max_len_ratio * h_enc.shape[0]))
    stack = model.stack(direction)
    enc_proj = ad.matmul(h_enc, stack.att.v_enc, transpose_b=True)

    def step_fn(y_prev, state):
        if state is None:
            state = M.init_dec_state(stack, h_enc.shape[0])
        logits, new_state, _ = M.decode_step(
            stack, y_prev, state, h_enc, enc_proj=enc_proj,
            generate_from_prev_state=cfg.generate_from_prev_state,
        )
        row = logits.data[0]
        shifted = row - row.max()
        logp = shifted - np.log(np.exp(shifted).sum())
        return logp, new_state

    return beam_search_steps(step_fn, None, vocab.sos, vocab.eos, beam, max_len)


def decode_to_text(hyp: Hypothesis, vocab, direction: str) -> str:
    from . import tokenizer as tok

    ids = [i for i in hyp.ids if i not in (vocab.sos, vocab.eos)]
    return tok.decode(TokenSeq(ids, direction, vocab))


# ---------------------------------------------------------------------------
# Word error rate


@dataclass
class WerReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words


def word_error_rate(reference: str, hypothesis: str) -> WerReport:
    """Minimal word-level edit distance with unit costs.

    Among minimal alignments the one with the most diagonal steps is chosen,
    which makes the (S, I, D) split unique and symmetric under swapping
    reference and hypothesis (S unchanged, I and D exchanged).
    """
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref:
        raise ValueError("reference transcript is empty")
    n, m = len(ref), len(hyp)
    # dp[i][j] = (edit cost, -diagonal steps); lexicographic minimization
    dp = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = (i, 0)
    for j in range(1, m + 1):
        dp[0][j] = (j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dc, dd = dp[i - 1][j - 1]
            diag = (dc + (0 if ref[i - 1] == hyp[j - 1] else 1), dd - 1)
            up = (dp[i - 1][j][0] + 1, dp[i - 1][j][1])
            left = (dp[i][j - 1][0] + 1, dp[i][j - 1][1])
            dp[i][j] = min(diag, up, left)
    cost, neg_diag = dp[n][m]
    diag_steps = -neg_diag
    insertions = m - diag_steps
    deletions = n - diag_steps
    substitutions = cost - insertions - deletions
    return WerReport(substitutions, insertions, deletions, n)


def corpus_wer(pairs: list[tuple[str, str]]) -> WerReport:
    """Aggregate error counts over (reference, hypothesis) pairs."""
    total = WerReport(0, 0, 0, 0)
    for ref, hyp in pairs:
        r = word_error_rate(ref, hyp)
        total.substitutions += r.substitutions
        total.insertions += r.insertions
        total.deletions += r.deletions
        total.ref_words += r.ref_words
    return total


# ---------------------------------------------------------------------------
# Posterior agreement diagnostic


@dataclass
class AgreementRecord:
    utt_id: str
    logp_fwd: float
    logp_bwd: float

    @property
    def gap(self) -> float:
        return abs(self.logp_fwd - self.logp_bwd)


def sequence_log_likelihood(
    model: M.DualModel, features: Tensor, target: TokenSeq, direction: str,
    cfg: TrainConfig | None = None,
) -> float:
    """Teacher-forced log p of the full token sequence plus end symbol."""
    logits = M.forward_pass(features, target, model, direction, cfg)
    golds = list(target.ids) + [target.vocab.eos]
    total = 0.0
    for step, gold in zip(logits, golds):
        row = step.data[0]
        shifted = row - row.max()
        total += float(shifted[gold] - np.log(np.exp(shifted).sum()))
    return total


def posterior_agreement(model, encoded_data, cfg: TrainConfig | None = None):
    """Per-utterance sequence log-likelihood under each decoder and the
    absolute gap; both arms see the same gold transcript (time-reversed for
    the backward decoder).  Returns (records, mean gap)."""
    records = []
    for utt, tgt_fwd, tgt_bwd in encoded_data:
        feats = Tensor(utt.features)
        lf = sequence_log_likelihood(model, feats, tgt_fwd, L2R, cfg)
        lb = sequence_log_likelihood(model, feats, tgt_bwd, "R2L", cfg)
        records.append(AgreementRecord(utt.id, lf, lb))
    mean_gap = float(np.mean([r.gap for r in records])) if records else 0.0
    return records, mean_gap
