"""Training objectives and the pair sampler for the relational contrastive term."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .exceptions import PreconditionError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

KD_WEIGHT = 0.25
RCD_WEIGHT = 4.0
DEFAULT_TAU = 0.4
DEFAULT_KD_TEMPERATURE = 4.0
Q_CLAMP = 1.0 - 1e-12
# -log(1 - Q_CLAMP): ceiling on a single negative-pair term
_NEG_TERM_CEILING = -math.log1p(-Q_CLAMP)

#: counts events such as clamped negative-pair probabilities
warning_counter: Counter = Counter()

Scalar = Union[Tensor, float]


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return T.sum(x)
    if reduction == "mean":
        return T.mean(x)
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def gen_loss(student_feats: Tensor, teacher_feats: Tensor, reduction: str = "sum") -> Tensor:
    """Feature regression: sum over rows of ||student - teacher||^2."""
    if student_feats.shape != teacher_feats.shape:
        raise ShapeError("gen_loss", student_feats.shape, teacher_feats.shape)
    target = teacher_feats.detach() if isinstance(teacher_feats, Tensor) else Tensor(teacher_feats)
    return _reduce(T.sq_norm(T.sub(student_feats, target), axis=1), reduction)


def rcd_from_scores(
    scores: Tensor,
    b,
    tau: float = DEFAULT_TAU,
    n: Optional[int] = None,
    m: Optional[int] = None,
    reduction: str = "sum",
    counter: Optional[Counter] = None,
) -> Tensor:
    """Contrastive loss from critic scores ``s`` and pair labels ``b``.

    With q = e^{s/tau} / (e^{s/tau} + n/m), positives contribute -log q and
    negatives -log(1 - q). Both are evaluated as softplus terms so the
    exponential never overflows; a negative term whose q rounds to 1 is
    clamped at 1 - 1e-12 and counted.
    """
    b = np.asarray(b)
    if tau <= 0:
        raise PreconditionError(f"temperature must be positive, got {tau}")
    if scores.ndim != 1 or b.shape != scores.shape:
        raise ShapeError("rcd_loss", scores.shape, b.shape)
    m = int(b.size if m is None else m)
    n = int((b == 0).sum() if n is None else n)
    if m == 0:
        raise PreconditionError("rcd_loss needs at least one pair (m = 0)")
    if n < 1:
        raise PreconditionError("rcd_loss needs n >= 1 negative pairs")
    log_ratio = math.log(n / m)
    z = T.scale(scores, 1.0 / tau)
    pos = b == 1
    total = None
    if pos.any():
        zp = T.take(z, np.flatnonzero(pos))
        # -log q = softplus(log(n/m) - z)
        term = T.softplus(T.add(T.neg(zp), log_ratio))
        total = _reduce(term, "sum")
    if (~pos).any():
        zn = T.take(z, np.flatnonzero(~pos))
        # -log(1 - q) = softplus(z - log(n/m))
        term = T.softplus(T.sub(zn, log_ratio))
        clamped = int((term.data > _NEG_TERM_CEILING).sum())
        if clamped:
            ctr = warning_counter if counter is None else counter
            ctr["rcd_q_clamped"] += clamped
            logger.warning("rcd_loss: clamped %d negative-pair probabilities at 1-1e-12", clamped)
            term = T.clamp_max(term, _NEG_TERM_CEILING)
        neg = _reduce(term, "sum")
        total = neg if total is None else T.add(total, neg)
    if reduction == "mean":
        total = T.scale(total, 1.0 / m)
    elif reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return total


def rcd_loss(
    v_t: Tensor,
    v_ts: Tensor,
    b,
    tau: float = DEFAULT_TAU,
    n: Optional[int] = None,
    m: Optional[int] = None,
    h1=None,
    h2=None,
    reduction: str = "sum",
    counter: Optional[Counter] = None,
) -> Tensor:
    """Relational contrastive loss over teacher-space and cross-resolution relation vectors.

    ``h1``/``h2`` are the projections applied before the critic dot product;
    when omitted the relation vectors are compared directly.
    """
    if v_t.shape != v_ts.shape or v_t.ndim != 2:
        raise ShapeError("rcd_loss", v_t.shape, v_ts.shape)
    a = h1(v_t) if h1 is not None else v_t
    c = h2(v_ts) if h2 is not None else v_ts
    return rcd_from_scores(T.rowdot(a, c), b, tau=tau, n=n, m=m, reduction=reduction, counter=counter)


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float = DEFAULT_KD_TEMPERATURE) -> Tensor:
    """Batch mean of T^2 * KL(softmax(teacher/T) || softmax(student/T))."""
    if temperature <= 0:
        raise PreconditionError(f"KD temperature must be positive, got {temperature}")
    tl = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if student_logits.shape != tl.shape:
        raise ShapeError("kd_loss", student_logits.shape, tl.shape)
    t_scaled = tl.astype(np.float64) / temperature
    t_shift = t_scaled - t_scaled.max(axis=1, keepdims=True)
    log_pt = t_shift - np.log(np.exp(t_shift).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt).astype(student_logits.dtype)
    log_pt = log_pt.astype(student_logits.dtype)
    log_ps = T.log_softmax(T.scale(student_logits, 1.0 / temperature), axis=1)
    # sum_c p_t (log p_t - log p_s); the entropy part is constant
    cross = T.sum(T.mul(Tensor(pt, dtype=pt.dtype), log_ps), axis=1)
    entropy = (pt * log_pt).sum(axis=1)
    kl = T.sub(Tensor(entropy, dtype=entropy.dtype), cross)
    return T.scale(T.mean(kl), temperature * temperature)


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("ce_loss", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise PreconditionError(f"labels must lie in [0, {logits.shape[1]})")
    return T.neg(T.mean(T.pick(T.log_softmax(logits, axis=1), labels)))


def dis_loss(l_cls: Scalar, l_kd: Scalar, l_rcd: Scalar) -> Scalar:
    """l_cls + 0.25 l_kd + 4.0 l_rcd; works on floats or tensors."""
    if any(isinstance(v, Tensor) for v in (l_cls, l_kd, l_rcd)):
        total = None
        for value, w in ((l_cls, 1.0), (l_kd, KD_WEIGHT), (l_rcd, RCD_WEIGHT)):
            if not isinstance(value, Tensor):
                value = Tensor(value)
            piece = value if w == 1.0 else T.scale(value, w)
            total = piece if total is None else T.add(total, piece)
        return total
    return l_cls + KD_WEIGHT * l_kd + RCD_WEIGHT * l_rcd


@dataclass
class LossReport:
    l_gen: float = 0.0
    l_rcd: float = 0.0
    l_kd: float = 0.0
    l_cls: float = 0.0
    l_dis: float = 0.0
    weights: dict = field(default_factory=lambda: {"cls": 1.0, "kd": KD_WEIGHT, "rcd": RCD_WEIGHT})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- pair sampling


@dataclass
class PairBatch:
    """Ordered (i, j, b) triples: i indexes a teacher sample, j a student sample."""

    i: np.ndarray
    j: np.ndarray
    b: np.ndarray

    @property
    def n_pos(self) -> int:
        return int((self.b == 1).sum())

    @property
    def n_neg(self) -> int:
        return int((self.b == 0).sum())

    @property
    def m(self) -> int:
        return int(self.b.size)

    @property
    def n(self) -> int:
        return self.n_neg

    def pairs(self):
        return list(zip(self.i.tolist(), self.j.tolist(), self.b.tolist()))


def sample_pairs(labels: Sequence[int], rng: np.random.Generator, pairs_per_batch: int = 48) -> PairBatch:
    """Draw equal numbers of same-label and different-label ordered pairs.

    Candidates are all ordered pairs (i, j) with i != j. ``k`` pairs of each
    kind are drawn without replacement, k = min(#positive, #negative,
    pairs_per_batch). Positives come first in the returned batch.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("sample_pairs", labels.shape, (-1,))
    if pairs_per_batch < 1:
        raise PreconditionError("pairs_per_batch must be >= 1")
    ii, jj = np.nonzero(~np.eye(labels.size, dtype=bool))
    same = labels[ii] == labels[jj]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    if pos.size == 0:
        raise PreconditionError(
            "no positive pair in batch: every label is unique; use class-balanced batching"
        )
    if neg.size == 0:
        raise PreconditionError("no negative pair in batch: all samples share one label")
    k = min(pos.size, neg.size, int(pairs_per_batch))
    chosen_pos = rng.choice(pos, size=k, replace=False)
    chosen_neg = rng.choice(neg, size=k, replace=False)
    idx = np.concatenate([chosen_pos, chosen_neg])
    b = np.concatenate([np.ones(k, dtype=np.int8), np.zeros(k, dtype=np.int8)])
    return PairBatch(i=ii[idx], j=jj[idx], b=b)
