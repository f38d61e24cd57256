"""Training losses: cross-entropy, the two decoder-agreement penalties, and
the weighted combination that ties the forward and backward decoders together.

The equal-length penalty is the mean L2 distance between per-step outputs.
The unequal-length penalty is soft-DTW: a soft minimum, over every monotone
alignment between the two output sequences, of the summed pairwise distances
along the alignment.  Both are differentiable and pull the two decoders'
predictions toward each other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

LOG_PROB_FLOOR = np.log(1e-300)


# ---------------------------------------------------------------------------
# Soft minimum and the soft-DTW dynamic program (plain numpy; the tape op
# wrapping them is soft_dtw below)


def softmin(values, gamma: float) -> float:
    """Soft minimum: exact min at gamma=0, else -gamma*log(sum(exp(-a/gamma))).

    Computed with a min-shift so large magnitudes cannot overflow.  +inf
    entries drop out naturally (exp(-inf) = 0); an all-infinite input stays
    +inf.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("softmin of empty list")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    m = a.min()
    if gamma == 0.0 or not np.isfinite(m):
        return float(m)
    with np.errstate(over="ignore"):  # (a-m)/gamma may hit inf for tiny gamma
        return float(m - gamma * np.log(np.exp(-(a - m) / gamma).sum()))


def _softdtw_table(delta: np.ndarray, gamma: float) -> np.ndarray:
    """Accumulated-cost table r with r[i,j] = cost of best (soft) monotone
    path ending at cell (i,j); 1-based over a (K+1, L+1) array."""
    K, L = delta.shape
    r = np.full((K + 1, L + 1), np.inf)
    r[0, 0] = 0.0
    for i in range(1, K + 1):
        for j in range(1, L + 1):
            r[i, j] = delta[i - 1, j - 1] + softmin(
                (r[i - 1, j], r[i, j - 1], r[i - 1, j - 1]), gamma
            )
    return r


def softdtw_value(delta: np.ndarray, gamma: float) -> float:
    """Soft-DTW over a (K, L) cost matrix via the forward DP recurrence."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2 or delta.size == 0:
        raise ValueError(f"cost matrix must be 2-D and non-empty, got shape {delta.shape}")
    if not np.all(np.isfinite(delta)):
        raise ValueError("cost matrix contains non-finite entries")
    return float(_softdtw_table(delta, gamma)[-1, -1])


def softdtw_grad(delta: np.ndarray, gamma: float) -> np.ndarray:
    """d(soft-DTW)/d(delta): the expected-alignment matrix, by the reverse DP.

    For gamma=0 the value is piecewise linear; the returned matrix marks one
    minimum-cost path (diagonal preferred on ties), a valid subgradient.
    """
    delta = np.asarray(delta, dtype=np.float64)
    K, L = delta.shape
    r = _softdtw_table(delta, gamma)

    e = np.zeros((K + 2, L + 2))
    if gamma == 0.0:
        i, j = K, L
        e[i, j] = 1.0
        while (i, j) != (1, 1):
            moves = [
                (r[i - 1, j - 1], i - 1, j - 1),
                (r[i - 1, j], i - 1, j),
                (r[i, j - 1], i, j - 1),
            ]
            _, i, j = min(moves, key=lambda m: m[0])
            e[i, j] = 1.0
        return e[1 : K + 1, 1 : L + 1]

    # Padded arrays per the reverse recurrence: R[K+1,L+1] ties the terminal
    # cell in with coefficient exactly 1.
    R = np.full((K + 2, L + 2), -np.inf)
    R[: K + 1, : L + 1] = r
    R[K + 1, L + 1] = r[K, L]
    d = np.zeros((K + 2, L + 2))
    d[1 : K + 1, 1 : L + 1] = delta
    e[K + 1, L + 1] = 1.0
    for i in range(K, 0, -1):
        for j in range(L, 0, -1):
            down = np.exp((R[i + 1, j] - R[i, j] - d[i + 1, j]) / gamma)
            right = np.exp((R[i, j + 1] - R[i, j] - d[i, j + 1]) / gamma)
            diag = np.exp((R[i + 1, j + 1] - R[i, j] - d[i + 1, j + 1]) / gamma)
            e[i, j] = down * e[i + 1, j] + right * e[i, j + 1] + diag * e[i + 1, j + 1]
    return e[1 : K + 1, 1 : L + 1]


def soft_dtw(delta: Tensor, gamma: float) -> Tensor:
    """Tape operation: soft-DTW of a cost-matrix tensor, scalar output."""
    value = softdtw_value(delta.data, gamma)
    out = Tensor(np.array([[value]]))

    def bwd(g, acc):
        acc(delta, g[0, 0] * softdtw_grad(delta.data, gamma))

    return ad._record(out, (delta,), bwd)


# ---------------------------------------------------------------------------
# Exhaustive alignment enumeration (verification oracle)

_ENUM_LIMIT = 7


def enumerate_alignments(k: int, l: int) -> list[np.ndarray]:
    """All binary k x l matrices tracing a monotone path from (1,1) to (k,l)
    with down, right, and diagonal moves.  Enumeration only; bounded to 7x7.
    The count is the Delannoy number D(k-1, l-1)."""
    if k < 1 or l < 1:
        raise ValueError(f"path grid must be at least 1x1, got {k}x{l}")
    if k > _ENUM_LIMIT or l > _ENUM_LIMIT:
        raise ValueError(f"enumeration bounded to {_ENUM_LIMIT}x{_ENUM_LIMIT}, got {k}x{l}")
    paths = []
    grid = np.zeros((k, l))

    def walk(i, j):
        grid[i, j] = 1.0
        if (i, j) == (k - 1, l - 1):
            paths.append(grid.copy())
        else:
            if i + 1 < k:
                walk(i + 1, j)
            if j + 1 < l:
                walk(i, j + 1)
            if i + 1 < k and j + 1 < l:
                walk(i + 1, j + 1)
        grid[i, j] = 0.0

    walk(0, 0)
    return paths


def delannoy(m: int, n: int) -> int:
    """Delannoy number D(m, n): monotone paths on an (m+1) x (n+1) grid."""
    table = np.zeros((m + 1, n + 1), dtype=object)
    table[0, :] = 1
    table[:, 0] = 1
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            table[i, j] = table[i - 1, j] + table[i, j - 1] + table[i - 1, j - 1]
    return int(table[m, n])


def softdtw_by_enumeration(delta: np.ndarray, gamma: float) -> float:
    """Independent oracle: soft-min over the costs of every explicit path."""
    delta = np.asarray(delta, dtype=np.float64)
    k, l = delta.shape
    costs = [float((p * delta).sum()) for p in enumerate_alignments(k, l)]
    return softmin(costs, gamma)


# ---------------------------------------------------------------------------
# Cross-entropy


def cross_entropy(step_logits: list[Tensor], target_ids: list[int]) -> Tensor:
    """Mean over steps of -log p(gold token) from per-step logit rows.

    step_logits must cover the target plus its end-of-sequence step.  Gold
    log-probabilities are floored at log(1e-300); hitting the floor is logged.
    """
    if len(step_logits) != len(target_ids):
        raise ValueError(
            f"{len(step_logits)} distribution steps for {len(target_ids)} targets"
        )
    picks = []
    clamped = 0
    for logits, gold in zip(step_logits, target_ids):
        lp = ad.log_softmax(logits, axis=1)
        if lp.data[0, gold] < LOG_PROB_FLOOR:
            clamped += 1
        picks.append(ad.narrow(lp, 1, gold, 1))
    if clamped:
        log.warning("cross_entropy clamped %d gold log-probabilities at 1e-300", clamped)
    stacked = ad.clamp_min(ad.concat(picks, axis=1), LOG_PROB_FLOOR)
    return ad.scale(ad.mean_all(stacked), -1.0)


# ---------------------------------------------------------------------------
# Agreement penalties


def l2_agreement(fwd_steps: list[Tensor], bwd_steps: list[Tensor]) -> Tensor:
    """Mean Euclidean distance between aligned per-step output rows.

    Callers must present the backward sequence already index-reversed so step
    k of both lists predicts the same surface position.  Step counts must be
    equal; unequal-length targets take softdtw_agreement instead.
    """
    if len(fwd_steps) != len(bwd_steps):
        raise ValueError(
            f"equal-length penalty needs matching step counts, got {len(fwd_steps)} vs {len(bwd_steps)}"
        )
    if not fwd_steps:
        raise ValueError("empty step sequences")
    norms = []
    for f, b in zip(fwd_steps, bwd_steps):
        if f.shape != b.shape:
            raise ValueError(f"step shape mismatch: {f.shape} vs {b.shape}")
        diff = ad.sub(f, b)
        norms.append(ad.sqrt(ad.sum_all(ad.mul(diff, diff))))
    return ad.mean_all(ad.concat(norms, axis=1))


def pairwise_sq_euclid(a: Tensor, b: Tensor) -> Tensor:
    """(K, L) matrix of squared Euclidean distances between row sets.

    Fused tape operation.  Computed from explicit row differences so that
    identical rows yield exact zeros (the matmul expansion does not).
    """
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"row width mismatch: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]  # (K, L, V)
    out = Tensor((diff * diff).sum(axis=2))

    def bwd(g, acc):
        rows = g.sum(axis=1, keepdims=True)  # (K, 1)
        cols = g.sum(axis=0, keepdims=True)  # (1, L)
        acc(a, 2.0 * (rows * a.data - g @ b.data))
        acc(b, 2.0 * (cols.T * b.data - g.T @ a.data))

    return ad._record(out, (a, b), bwd)


def softdtw_agreement(
    fwd_steps: list[Tensor],
    bwd_steps: list[Tensor],
    gamma: float,
    fwd_map: np.ndarray | None = None,
    bwd_map: np.ndarray | None = None,
) -> Tensor:
    """Soft-DTW between the two decoders' per-step output rows.

    fwd_map / bwd_map, when given, are fixed 0/1 matrices scattering each
    decoder's rows into a shared (union) vocabulary so squared Euclidean
    distances are well-typed across differing vocabularies.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if not fwd_steps or not bwd_steps:
        raise ValueError("empty step sequences")
    yf = ad.concat(fwd_steps, axis=0)
    yb = ad.concat(bwd_steps, axis=0)
    if fwd_map is not None:
        yf = ad.matmul(yf, Tensor(fwd_map))
    if bwd_map is not None:
        yb = ad.matmul(yb, Tensor(bwd_map))
    return soft_dtw(pairwise_sq_euclid(yf, yb), gamma)


def union_vocab_maps(fwd_units: list[str], bwd_units: list[str]):
    """0/1 scatter matrices embedding two unit inventories into their union,
    keyed on unit strings; shared units land on the same column."""
    union = sorted(set(fwd_units) | set(bwd_units))
    col = {u: i for i, u in enumerate(union)}
    fwd_map = np.zeros((len(fwd_units), len(union)))
    bwd_map = np.zeros((len(bwd_units), len(union)))
    for i, u in enumerate(fwd_units):
        fwd_map[i, col[u]] = 1.0
    for i, u in enumerate(bwd_units):
        bwd_map[i, col[u]] = 1.0
    return fwd_map, bwd_map


# ---------------------------------------------------------------------------
# Global loss


@dataclass
class LossBundle:
    """Weighted combination of the two cross-entropies and the agreement
    penalty, with the addends kept separate for logging."""

    ce_forward: Tensor
    ce_backward: Tensor
    omega: Tensor
    total: Tensor
    alpha: float
    lam: float
    gamma: float

    def addends(self):
        return (
            self.ce_forward.item(),
            self.ce_backward.item(),
            self.omega.item(),
            self.total.item(),
        )


def combine_losses(
    ce_forward: Tensor,
    ce_backward: Tensor,
    omega: Tensor,
    alpha: float,
    lam: float,
    gamma: float = 0.0,
) -> LossBundle:
    """total = alpha*ce_forward + (1-alpha)*ce_backward + lam*omega."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    total = ad.add(
        ad.add(ad.scale(ce_forward, alpha), ad.scale(ce_backward, 1.0 - alpha)),
        ad.scale(omega, lam),
    )
    return LossBundle(ce_forward, ce_backward, omega, total, alpha, lam, gamma)
