"""Verification, 1:N retrieval and identification protocols over student embeddings."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses as L
from . import tensor as T
from .data.manifest import ImageSet
from .exceptions import MissingRecordError, PreconditionError
from .model import Linear, StudentModel
from .tensor import Tensor
from .train import SGD, batch_iterator, compute_features


@dataclass
class Embeddings:
    ids: List[str]
    matrix: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self._index = {i: k for k, i in enumerate(self.ids)}

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._index[i] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise MissingRecordError(f"no embedding for id {exc.args[0]!r}") from None

    def __getitem__(self, key: str) -> np.ndarray:
        return self.matrix[self.rows([key])[0]]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MetricsReport:
    protocol: str
    accuracy: float
    threshold: Optional[float] = None
    rank_accuracy: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        t = d["threshold"]
        if t is not None and math.isinf(t):
            d["threshold"] = "+inf" if t > 0 else "-inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def embed_all(model: StudentModel, data: ImageSet, batch_size: int = 256) -> Embeddings:
    """Head embeddings of every (already degraded) image, in dataset order."""
    feats = compute_features(model, data.images, batch_size)
    out = []
    with T.no_grad():
        for k in range(0, feats.shape[0], batch_size):
            out.append(model.head.embed(Tensor(feats[k : k + batch_size])).data)
    matrix = np.concatenate(out) if out else np.zeros((0, model.config.embed_dim), np.float32)
    return Embeddings(list(data.ids), matrix, np.asarray(data.labels))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise PreconditionError("zero-norm embedding: cosine similarity undefined")
    return x / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit_rows(a) @ _unit_rows(b).T


def pair_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of row k of ``a`` with row k of ``b``."""
    return (_unit_rows(a) * _unit_rows(b)).sum(axis=1)


# ---------------------------------------------------------------- verification


@dataclass
class VerificationSet:
    pairs: List[Tuple[str, str, bool]]

    @property
    def n_pos(self) -> int:
        return sum(1 for p in self.pairs if p[2])

    @property
    def n_neg(self) -> int:
        return len(self.pairs) - self.n_pos

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_json(self) -> str:
        rows = [{"a": a, "b": b, "same": bool(s)} for a, b, s in self.pairs]
        return json.dumps(rows, indent=0) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "VerificationSet":
        with open(path, encoding="utf-8") as fh:
            rows = json.load(fh)
        if not isinstance(rows, list):
            raise PreconditionError("pair file must be a JSON array")
        pairs = []
        for row in rows:
            if not isinstance(row, dict) or set(row) != {"a", "b", "same"} or not isinstance(row["same"], bool):
                raise PreconditionError(f"bad pair record: {row!r}")
            pairs.append((str(row["a"]), str(row["b"]), row["same"]))
        return cls(pairs)


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints of adjacent distinct sorted scores, +inf."""
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def verify_scores(scores, same) -> Tuple[float, float]:
    """Best accuracy of the rule ``same iff score >= t`` and the lowest t reaching it."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.size == 0 or scores.shape != same.shape:
        raise PreconditionError("verify needs a non-empty score list matching the labels")
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], same[order]
    cands = threshold_candidates(s)
    below = np.searchsorted(s, cands, side="left")
    pos_below = np.concatenate([[0], np.cumsum(y)])[below]
    correct = (y.sum() - pos_below) + (below - pos_below)
    best = int(np.argmax(correct))
    return float(correct[best]) / s.size, float(cands[best])


def verify(embeddings: Embeddings, pairs: VerificationSet) -> MetricsReport:
    if not pairs.pairs:
        raise PreconditionError("verification set is empty")
    a = embeddings.matrix[embeddings.rows([p[0] for p in pairs.pairs])]
    b = embeddings.matrix[embeddings.rows([p[1] for p in pairs.pairs])]
    sims = pair_cosine(a, b)
    acc, thr = verify_scores(sims, [p[2] for p in pairs.pairs])
    return MetricsReport("verification", acc, threshold=thr,
                         counts={"pairs": len(pairs.pairs), "positive": pairs.n_pos, "negative": pairs.n_neg})


def _pair_index(n: int, rng: np.random.Generator, k: int, accept) -> List[Tuple[int, int]]:
    chosen, seen = [], set()
    while len(chosen) < k:
        a, b = rng.integers(0, n, size=2)
        a, b = int(min(a, b)), int(max(a, b))
        if a == b or (a, b) in seen or not accept(a, b):
            continue
        seen.add((a, b))
        chosen.append((a, b))
    return chosen


def build_pairs(ids: Sequence[str], labels: Sequence[int], n_pos: int, n_neg: int, seed: int = 7,
                enumerate_limit: int = 2_000_000) -> VerificationSet:
    """Seeded same-identity and cross-identity unordered pairs, no self or duplicate pairs."""
    labels = np.asarray(labels)
    n = labels.size
    pos_max = int(sum(c * (c - 1) // 2 for c in np.bincount(np.unique(labels, return_inverse=True)[1]))) if n else 0
    neg_max = n * (n - 1) // 2 - pos_max
    if n_pos > pos_max or n_neg > neg_max:
        raise PreconditionError(
            f"insufficient pairs: requested {n_pos} positive / {n_neg} negative, "
            f"achievable maxima are {pos_max} / {neg_max}")
    rng = np.random.default_rng(seed)
    pos = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        aa, bb = np.triu_indices(members.size, k=1)
        pos.extend(zip(members[aa].tolist(), members[bb].tolist()))
    pos = [pos[k] for k in rng.choice(len(pos), size=n_pos, replace=False)] if n_pos else []
    if n * (n - 1) // 2 <= enumerate_limit or n_neg > neg_max // 2:
        aa, bb = np.triu_indices(n, k=1)
        keep = labels[aa] != labels[bb]
        aa, bb = aa[keep], bb[keep]
        pick = rng.choice(aa.size, size=n_neg, replace=False) if n_neg else np.zeros(0, np.intp)
        neg = list(zip(aa[pick].tolist(), bb[pick].tolist()))
    else:
        neg = _pair_index(n, rng, n_neg, lambda a, b: labels[a] != labels[b])
    pairs = [(ids[a], ids[b], True) for a, b in pos] + [(ids[a], ids[b], False) for a, b in neg]
    return VerificationSet(pairs)


# ---------------------------------------------------------------- retrieval


def retrieve_scores(sims: np.ndarray, gallery_labels, probe_labels, ranks: Sequence[int] = (1, 5, 10)) -> Dict[str, float]:
    """Rank-k hit rates from a (probes, gallery) similarity matrix.

    Gallery entries are ordered by descending similarity with ties broken by
    ascending gallery index.
    """
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    if gallery_labels.size == 0:
        raise PreconditionError("gallery is empty")
    for k in ranks:
        if k < 1 or k > gallery_labels.size:
            raise PreconditionError(f"rank {k} exceeds gallery size {gallery_labels.size}")
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = gallery_labels[order] == probe_labels[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), gallery_labels.size)
    return {str(k): float((first < k).mean()) if first.size else 0.0 for k in ranks}


def retrieve(gallery: Embeddings, probes: Embeddings, ranks: Sequence[int] = (1, 5, 10)) -> MetricsReport:
    sims = cosine_matrix(probes.matrix, gallery.matrix)
    rates = retrieve_scores(sims, gallery.labels, probes.labels, ranks)
    return MetricsReport("retrieval", rates[str(ranks[0])], rank_accuracy=rates,
                         counts={"gallery": len(gallery), "probes": len(probes)})


# ---------------------------------------------------------------- identification


@dataclass
class FinetuneConfig:
    epochs: int = 60
    lr: float = 0.5
    momentum: float = 0.9
    batch_size: int = 96
    seed: int = 7


def identify_finetune(model: StudentModel, train: ImageSet, test: ImageSet,
                      config: Optional[FinetuneConfig] = None) -> MetricsReport:
    """Train a fresh softmax layer on frozen, l2-normalized embeddings; report test top-1.

    The student itself is never modified.
    """
    config = config or FinetuneConfig()
    train_classes = np.unique(train.labels)
    unseen = sorted(set(np.unique(test.labels).tolist()) - set(train_classes.tolist()))
    if unseen:
        raise PreconditionError(f"test classes absent from the finetuning set: {unseen[:10]}")
    remap = {int(c): k for k, c in enumerate(train_classes)}
    y_train = np.array([remap[int(c)] for c in train.labels], dtype=np.intp)
    y_test = np.array([remap[int(c)] for c in test.labels], dtype=np.intp)
    e_train = _unit_rows(embed_all(model, train).matrix).astype(np.float32)
    e_test = _unit_rows(embed_all(model, test).matrix).astype(np.float32)

    k = train_classes.size
    rng = np.random.Generator(np.random.PCG64(config.seed))
    layer = Linear(e_train.shape[1], k, rng, dtype=np.float32)
    params = {"weight": layer.weight, "bias": layer.bias}
    opt = SGD(config.momentum)
    bs = min(config.batch_size, len(train))
    for epoch in range(config.epochs):
        lr = config.lr * (0.1 if epoch >= int(0.75 * config.epochs) else 1.0)
        for idx in batch_iterator(y_train, bs, config.seed, epoch):
            loss = L.ce_loss(layer(Tensor(e_train[idx])), y_train[idx])
            T.zero_grad(params.values())
            T.backward(loss)
            opt.step(params, lr)
    with T.no_grad():
        pred = np.argmax(layer(Tensor(e_test)).data, axis=1)
    acc = float((pred == y_test).mean()) if y_test.size else 0.0
    return MetricsReport("identification", acc, counts={"classes": int(k), "train": len(train), "test": len(test)})
