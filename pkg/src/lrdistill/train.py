"""SGD, the step learning-rate schedule, and the two training stages.

Stage 1 regresses backbone features onto the generative teacher (labels are
not used). Stage 2 freezes the backbone and trains the head, both relation
modules and both projections on the weighted discriminative objective.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .data.formats import Checkpoint, TeacherStore, checkpoint_save, encode_checkpoint, decode_checkpoint
from .data.manifest import ImageSet
from .exceptions import BackboneDriftError, ConfigMismatchError, NumericalError, PreconditionError
from .model import StudentModel
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("cls", "kd", "rcd")


@dataclass
class OptimConfig:
    lr: float = 0.05
    anneal: float = 0.1
    milestones: tuple = (0.5, 0.75)
    momentum: float = 0.9
    batch_size: int = 96
    epochs_backbone: int = 30
    epochs_head: int = 30
    seed: int = 7
    pairs_per_batch: int = 48
    tau: float = L.DEFAULT_TAU
    kd_temperature: float = L.DEFAULT_KD_TEMPERATURE
    gen_reduction: str = "mean"
    rcd_reduction: str = "mean"

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.lr <= 0:
            raise PreconditionError("lr must be positive")
        if not 0 < self.anneal <= 1:
            raise PreconditionError("anneal must lie in (0, 1]")
        if self.batch_size < 2:
            raise PreconditionError("batch_size must be >= 2")
        if self.momentum < 0 or self.momentum >= 1:
            raise PreconditionError("momentum must lie in [0, 1)")
        for red in (self.gen_reduction, self.rcd_reduction):
            if red not in ("sum", "mean"):
                raise PreconditionError(f"reduction must be 'sum' or 'mean', got {red!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def milestone_epochs(total_epochs: int, config: OptimConfig) -> List[int]:
    return [int(frac * total_epochs) for frac in config.milestones]


def lr_at(epoch: int, config: OptimConfig, total_epochs: int) -> float:
    """Initial rate times ``anneal`` for every milestone already reached."""
    passed = sum(1 for m in milestone_epochs(total_epochs, config) if epoch >= m)
    return config.lr * config.anneal ** passed


def sgd_step(p: np.ndarray, g: np.ndarray, lr: float, momentum: float, v: Optional[np.ndarray]):
    """One heavy-ball update: v <- momentum * v + g; p <- p - lr * v."""
    v = g.copy() if v is None else momentum * v + g
    return p - lr * v, v


class SGD:
    """Momentum SGD keyed by parameter name. Frozen or gradient-free parameters are skipped."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], lr: float) -> None:
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            new, self.velocity[name] = sgd_step(p.data, p.grad, lr, self.momentum, self.velocity.get(name))
            p.data = new.astype(p.dtype, copy=False)


# ---------------------------------------------------------------- batching


def _chunks_for_balance(labels: np.ndarray, rng: np.random.Generator) -> List[np.ndarray]:
    chunks = []
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        if members.size < 2:
            chunks.append(members)
            continue
        cut = [members[k : k + 2] for k in range(0, members.size - members.size % 2, 2)]
        if members.size % 2:
            cut[-1] = np.concatenate([cut[-1], members[-1:]])
        chunks.extend(cut)
    order = rng.permutation(len(chunks))
    return [chunks[k] for k in order]


def batch_iterator(labels: Sequence[int], batch_size: int, seed: int, epoch: int = 0,
                   balanced: bool = False) -> List[np.ndarray]:
    """Index batches for one epoch, shuffled by a generator seeded with (seed, epoch).

    In balanced mode samples are grouped into same-label chunks of 2 (or 3)
    that are never split, so every batch holds at least one positive pair;
    a trailing batch with a single label is merged into its predecessor.
    """
    labels = np.asarray(labels)
    n = labels.size
    if batch_size < 1 or batch_size > n:
        raise PreconditionError(f"batch_size must lie in [1, {n}], got {batch_size}")
    rng = np.random.default_rng([int(seed), int(epoch)])
    if not balanced:
        order = rng.permutation(n)
        return [order[k : k + batch_size] for k in range(0, n, batch_size)]

    counts = np.bincount(np.unique(labels, return_inverse=True)[1])
    if counts.max() < 2:
        raise PreconditionError("class-balanced batching impossible: every class is a singleton")
    chunks = [c for c in _chunks_for_balance(labels, rng) if c.size >= 2]
    # reorder so adjacent chunks differ in label whenever possible
    ordered, pending = [], list(chunks)
    while pending:
        prev = labels[ordered[-1][0]] if ordered else None
        pick = next((k for k, c in enumerate(pending) if labels[c[0]] != prev), 0)
        ordered.append(pending.pop(pick))
    batches, current = [], []
    size = 0
    for c in ordered:
        if current and size + c.size > batch_size:
            batches.append(np.concatenate(current))
            current, size = [], 0
        current.append(c)
        size += c.size
    if current:
        batches.append(np.concatenate(current))
    merged = []
    for b in batches:
        if merged and np.unique(labels[b]).size < 2:
            merged[-1] = np.concatenate([merged[-1], b])
        else:
            merged.append(b)
    if len(merged) > 1 and np.unique(labels[merged[0]]).size < 2:
        merged[1] = np.concatenate([merged[0], merged[1]])
        merged = merged[1:]
    return merged


# ---------------------------------------------------------------- logging


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    def append(self, stage: int, epoch: int, step: int, lr: float, report: L.LossReport) -> None:
        row = {"stage": stage, "epoch": epoch, "step": step, "lr": lr}
        row.update({k: v for k, v in report.to_dict().items() if k != "weights"})
        self.rows.append(row)

    def epoch_means(self, stage: int, key: str) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for r in self.rows:
            if r["stage"] == stage:
                by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


# ---------------------------------------------------------------- stages


def _checkpoint(model: StudentModel, meta: dict, path: Optional[str]) -> Checkpoint:
    meta = dict(meta)
    meta.setdefault("config_hash", model.config.digest())
    meta.setdefault("model_config", model.config.to_dict())
    meta.setdefault("num_classes", model.num_classes)
    if path is not None:
        return checkpoint_save(model, meta, path)
    return decode_checkpoint(encode_checkpoint(model.state_dict(), meta))


def restore(model: StudentModel, ckpt: Checkpoint) -> None:
    if ckpt.meta.get("config_hash") != model.config.digest():
        raise ConfigMismatchError("checkpoint/config mismatch")
    model.load_state_dict(ckpt.tensors)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}: {value}")


def train_stage1(model: StudentModel, data: ImageSet, gen_store: TeacherStore, config: OptimConfig,
                 log: Optional[TrainLog] = None, checkpoint_path: Optional[str] = None) -> Checkpoint:
    """Fit the backbone to the generative teacher's features (identities unused)."""
    targets = gen_store.features_for(data.ids)
    if targets.shape[1] != model.config.gen_feature_dim:
        raise PreconditionError(
            f"generative teacher dim {targets.shape[1]} != backbone feature dim {model.config.gen_feature_dim}")
    log = log if log is not None else TrainLog()
    if not model.backbone.normalizer_fitted:
        model.backbone.fit_normalizer(data.images)
    model.unfreeze(model.group("backbone"))
    model.freeze([g for g in ("head", "rel_t", "rel_ts", "proj1", "proj2")])
    params = model.trainable()
    opt = SGD(config.momentum)
    epochs = config.epochs_backbone
    step = 0
    for epoch in range(epochs):
        lr = lr_at(epoch, config, epochs)
        for idx in batch_iterator(data.labels, min(config.batch_size, len(data)), config.seed * 2 + 1, epoch):
            x = Tensor(data.images[idx])
            f = model.backbone(x)
            loss = L.gen_loss(f, Tensor(targets[idx]), reduction=config.gen_reduction)
            value = loss.item()
            _check_finite(value, "generative loss")
            T.zero_grad(params.values())
            T.backward(loss)
            opt.step(params, lr)
            log.append(1, epoch, step, lr, L.LossReport(l_gen=value))
            step += 1
    model.unfreeze([g for g in ("head", "rel_t", "rel_ts", "proj1", "proj2")])
    meta = {"stage": 1, "epoch": epochs, "seed": config.seed, "optim": config.to_dict()}
    ckpt = _checkpoint(model, meta, checkpoint_path)
    log.checkpoint_path = checkpoint_path
    return ckpt


def _switches(enabled: Iterable[str]) -> tuple:
    enabled = tuple(sorted(set(enabled)))
    unknown = set(enabled) - set(LOSS_COMPONENTS)
    if unknown or not enabled:
        raise PreconditionError(f"loss switches must be a non-empty subset of {LOSS_COMPONENTS}, got {enabled}")
    return enabled


def compute_features(model: StudentModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Backbone features for a stack of images, without recording a tape."""
    out = []
    with T.no_grad():
        for k in range(0, images.shape[0], batch_size):
            out.append(model.backbone(Tensor(images[k : k + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.gen_feature_dim), np.float32)


def stage2_loss(model: StudentModel, f: Tensor, labels: np.ndarray, t_feats: np.ndarray,
                t_logits: np.ndarray, switches: tuple, config: OptimConfig,
                pair_rng: Optional[np.random.Generator] = None):
    """Weighted discriminative objective on one batch; returns (loss tensor, LossReport)."""
    e, z = model.head(f)
    zero = 0.0
    l_cls = L.ce_loss(z, labels) if "cls" in switches else zero
    l_kd = L.kd_loss(z, t_logits, config.kd_temperature) if "kd" in switches else zero
    l_rcd = zero
    if "rcd" in switches:
        pairs = L.sample_pairs(labels, pair_rng, config.pairs_per_batch)
        ti = Tensor(t_feats[pairs.i], dtype=f.dtype)
        tj = Tensor(t_feats[pairs.j], dtype=f.dtype)
        scores = model.critic_scores(ti, tj, T.take(e, pairs.j))
        l_rcd = L.rcd_from_scores(scores, pairs.b, tau=config.tau, n=pairs.n, m=pairs.m,
                                   reduction=config.rcd_reduction)
    total = L.dis_loss(l_cls, l_kd, l_rcd)
    val = lambda v: v.item() if isinstance(v, Tensor) else float(v)  # noqa: E731
    report = L.LossReport(l_cls=val(l_cls), l_kd=val(l_kd), l_rcd=val(l_rcd), l_dis=val(total))
    return total, report


def train_stage2(model: StudentModel, stage1: Optional[Checkpoint], data: ImageSet, disc_store: TeacherStore,
                 config: OptimConfig, switches: Iterable[str] = LOSS_COMPONENTS,
                 log: Optional[TrainLog] = None, checkpoint_path: Optional[str] = None,
                 arm: Optional[str] = None) -> Checkpoint:
    """Freeze the backbone and fit head, relation modules and projections.

    ``stage1`` is the backbone checkpoint; pass ``None`` to keep the seeded
    initialization (the discriminative-only and no-distillation arms).
    """
    switches = _switches(switches)
    if stage1 is not None:
        if stage1.stage != 1:
            raise PreconditionError(f"expected a stage-1 checkpoint, got stage {stage1.stage}")
        restore(model, stage1)
    t_feats = disc_store.features_for(data.ids)
    t_logits = disc_store.logits_for(data.ids) if "kd" in switches else None
    if t_logits is not None and t_logits.shape[1] != model.num_classes:
        raise PreconditionError(f"teacher logits have {t_logits.shape[1]} classes, model has {model.num_classes}")
    if data.labels.size and data.labels.max() >= model.num_classes:
        raise PreconditionError("dataset labels exceed the model's class count")
    log = log if log is not None else TrainLog()

    if not model.backbone.normalizer_fitted:
        model.backbone.fit_normalizer(data.images)
    model.freeze(model.group("backbone"))
    frozen_before = {n: model.param_dict()[n].data.tobytes() for n in model.group("backbone")}
    feats = compute_features(model, data.images)
    params = model.trainable()
    opt = SGD(config.momentum)
    epochs = config.epochs_head
    balanced = "rcd" in switches
    step = 0
    for epoch in range(epochs):
        lr = lr_at(epoch, config, epochs)
        pair_rng = np.random.default_rng([int(config.seed), 2, epoch])
        batches = batch_iterator(data.labels, min(config.batch_size, len(data)), config.seed * 2 + 2, epoch,
                                 balanced=balanced)
        for idx in batches:
            loss, report = stage2_loss(
                model, Tensor(feats[idx]), data.labels[idx], t_feats[idx],
                None if t_logits is None else t_logits[idx], switches, config, pair_rng)
            _check_finite(report.l_dis, "discriminative loss")
            T.zero_grad(params.values())
            T.backward(loss)
            opt.step(params, lr)
            log.append(2, epoch, step, lr, report)
            step += 1

    table = model.param_dict()
    drifted = [n for n, raw in frozen_before.items() if table[n].data.tobytes() != raw]
    if drifted:
        raise BackboneDriftError(f"frozen backbone parameters changed during stage 2: {drifted[:5]}")
    meta = {
        "stage": 2,
        "epoch": epochs,
        "seed": config.seed,
        "optim": config.to_dict(),
        "switches": list(switches),
        "backbone_source": "stage1" if stage1 is not None else "seed",
        "frozen": model.group("backbone"),
    }
    if arm is not None:
        meta["arm"] = arm
    ckpt = _checkpoint(model, meta, checkpoint_path)
    log.checkpoint_path = checkpoint_path
    return ckpt
