"""Student network and the relation/projection modules used by the contrastive term.

The student splits into a backbone (low-resolution image -> intermediate
feature) and a head (feature -> 512-d embedding and class logits). Two
relation modules map ordered pairs of vectors to unit relation vectors and two
projections map those into a shared critic space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import PreconditionError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 16
    input_channels: int = 1
    conv_channels: Tuple[int, ...] = (128, 256, 512)
    gen_feature_dim: int = 512
    head_hidden: int = 512
    embed_dim: int = 512
    teacher_dim: int = 512
    relation_hidden: int = 256
    relation_dim: int = 128
    proj_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise PreconditionError("conv_channels must be a non-empty list of positive widths")
        if self.input_side < 8:
            raise PreconditionError(f"input_side must be >= 8, got {self.input_side}")
        for name in ("input_channels", "gen_feature_dim", "head_hidden", "embed_dim", "teacher_dim",
                     "relation_hidden", "relation_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    def digest(self) -> str:
        """Stable hash of the architecture, stored in checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of named parameters and child modules, kept in insertion order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        dtype = dtype or T.get_dtype()
        self.weight = self.add_param("weight", glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, pad: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.stride, self.pad = stride, pad
        dtype = dtype or T.get_dtype()
        w = glorot_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k)
        self.weight = self.add_param("weight", w.astype(dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class StudentBackbone(Module):
    """Strided 3x3 conv + relu blocks, global average pool, linear to the feature dim.

    Inputs are first standardized as ``(x - input_mean) / input_std``. The two
    buffers start as the identity transform and are set once from training
    images by :meth:`fit_normalizer`; they are never optimized.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        dtype = T.get_dtype()
        shape = (config.input_channels, config.input_side, config.input_side)
        self.input_mean = np.zeros(shape, dtype=dtype)
        self.input_std = np.ones((), dtype=dtype)
        self.convs: List[Conv2d] = []
        in_ch = config.input_channels
        for idx, width in enumerate(config.conv_channels):
            conv = Conv2d(in_ch, width, 3, 2, 1, rng)
            self.add_module(f"conv{idx}", conv)
            self.convs.append(conv)
            in_ch = width
        self.fc = self.add_module("fc", Linear(in_ch, config.gen_feature_dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        c = self.config
        expected = (c.input_channels, c.input_side, c.input_side)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError("backbone_forward", x.shape, (-1,) + expected,
                             detail=f"config input_channels={c.input_channels}, input_side={c.input_side}")
        h = x
        if self.normalizer_fitted:
            h = T.scale(T.sub(x, Tensor(self.input_mean, dtype=x.dtype)), 1.0 / float(self.input_std))
        for conv in self.convs:
            h = T.relu(conv(h))
        return self.fc(T.mean(h, axis=(2, 3)))

    @property
    def normalizer_fitted(self) -> bool:
        return bool(self.input_mean.any() or self.input_std != 1)

    def fit_normalizer(self, images: np.ndarray) -> None:
        """Per-pixel mean image and one global std of the centred pixels."""
        images = np.asarray(images, dtype=np.float64)
        mean = images.mean(axis=0)
        std = (images - mean).std()
        self.input_mean = mean.astype(self.input_mean.dtype)
        self.input_std = np.asarray(std if std > 0 else 1.0, dtype=self.input_std.dtype)


class StudentHead(Module):
    """feature -> relu MLP -> embedding; embedding -> logits."""

    def __init__(self, config: ModelConfig, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.fc1 = self.add_module("fc1", Linear(config.gen_feature_dim, config.head_hidden, rng))
        self.fc2 = self.add_module("fc2", Linear(config.head_hidden, config.embed_dim, rng))
        self.classifier = self.add_module("classifier", Linear(config.embed_dim, num_classes, rng))

    def embed(self, f: Tensor) -> Tensor:
        if f.ndim != 2 or f.shape[1] != self.config.gen_feature_dim:
            raise ShapeError("head_forward", f.shape, (-1, self.config.gen_feature_dim))
        return self.fc2(T.relu(self.fc1(f)))

    def __call__(self, f: Tensor) -> Tuple[Tensor, Tensor]:
        e = self.embed(f)
        return e, self.classifier(e)


class RelationModule(Module):
    """Ordered pair (a, b) -> unit relation vector via concat -> MLP -> l2-normalize."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = self.add_module("fc1", Linear(2 * in_dim, hidden, rng))
        self.fc2 = self.add_module("fc2", Linear(hidden, out_dim, rng))

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return relation_forward(self, a, b)


class Projection(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.fc = self.add_module("fc", Linear(in_dim, out_dim, rng))

    def __call__(self, v: Tensor) -> Tensor:
        return project(self, v)


def _as_rows(v: Tensor) -> Tuple[Tensor, bool]:
    if v.ndim == 1:
        return T.reshape(v, (1, v.shape[0])), True
    return v, False


def relation_forward(module: RelationModule, a: Tensor, b: Tensor) -> Tensor:
    a2, single = _as_rows(a)
    b2, _ = _as_rows(b)
    if a2.shape != b2.shape or a2.shape[1] != module.in_dim:
        raise ShapeError("relation_forward", a.shape, b.shape, detail=f"both must have dim {module.in_dim}")
    h = T.relu(module.fc1(T.concat([a2, b2], axis=1)))
    v = T.l2_normalize(module.fc2(h), axis=1)
    return T.reshape(v, (v.shape[1],)) if single else v


def project(h: Projection, v: Tensor) -> Tensor:
    v2, single = _as_rows(v)
    if v2.shape[1] != h.in_dim:
        raise ShapeError("project", v.shape, (h.in_dim,))
    out = T.l2_normalize(h.fc(v2), axis=1)
    return T.reshape(out, (out.shape[1],)) if single else out


GROUPS = ("backbone", "head", "rel_t", "rel_ts", "proj1", "proj2")


class StudentModel(Module):
    """Backbone, head, both relation modules and both projections.

    Initialization is a pure function of ``(config, num_classes, seed)``: all
    weights are drawn from one PCG64 stream in registration order (backbone
    convs, backbone fc, head, rel_t, rel_ts, proj1, proj2).
    """

    def __init__(self, config: Optional[ModelConfig] = None, num_classes: int = 2, seed: int = 7):
        super().__init__()
        if num_classes < 1:
            raise PreconditionError("num_classes must be >= 1")
        self.config = config or ModelConfig()
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        c = self.config
        rng = np.random.Generator(np.random.PCG64(seed))
        self.backbone = self.add_module("backbone", StudentBackbone(c, rng))
        self.head = self.add_module("head", StudentHead(c, num_classes, rng))
        self.rel_t = self.add_module("rel_t", RelationModule(c.teacher_dim, c.relation_hidden, c.relation_dim, rng))
        self.rel_ts = self.add_module("rel_ts", RelationModule(c.teacher_dim, c.relation_hidden, c.relation_dim, rng))
        self.proj1 = self.add_module("proj1", Projection(c.relation_dim, c.proj_dim, rng))
        self.proj2 = self.add_module("proj2", Projection(c.relation_dim, c.proj_dim, rng))
        if c.embed_dim != c.teacher_dim:
            raise PreconditionError("embed_dim must equal teacher_dim: the cross-resolution relation pairs them")

    # -- parameter bookkeeping

    def param_dict(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def group(self, name: str) -> List[str]:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}; choose from {GROUPS}")
        return [n for n in self.param_dict() if n.startswith(name + ".")]

    def _resolve(self, params: Iterable[str]) -> List[Tensor]:
        table = self.param_dict()
        names = [params] if isinstance(params, str) else list(params)
        out = []
        for n in names:
            if n in GROUPS:
                out.extend(table[m] for m in self.group(n))
            elif n in table:
                out.append(table[n])
            else:
                raise KeyError(f"unknown parameter name {n!r}")
        return out

    def freeze(self, params: Iterable[str]) -> None:
        """Stop tracking gradients for the named parameters (or whole groups)."""
        for p in self._resolve(params):
            p.requires_grad = False
            p.grad = None

    def unfreeze(self, params: Iterable[str]) -> None:
        for p in self._resolve(params):
            p.requires_grad = True

    def frozen_names(self) -> List[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]

    def trainable(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    BUFFERS = ("backbone.input_mean", "backbone.input_std")

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters plus the normalizer buffers, as copies."""
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state["backbone.input_mean"] = self.backbone.input_mean.copy()
        state["backbone.input_std"] = self.backbone.input_std.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        table = self.param_dict()
        expected = set(table) | set(self.BUFFERS)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, p in table.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ShapeError("load_state_dict", p.shape, arr.shape, detail=n)
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
        mean = np.asarray(state["backbone.input_mean"])
        if mean.shape != self.backbone.input_mean.shape:
            raise ShapeError("load_state_dict", self.backbone.input_mean.shape, mean.shape, detail="input_mean")
        self.backbone.input_mean = mean.astype(self.backbone.input_mean.dtype)
        self.backbone.input_std = np.asarray(state["backbone.input_std"], dtype=self.backbone.input_std.dtype).reshape(())

    # -- forward passes

    def backbone_forward(self, x: Tensor) -> Tensor:
        return self.backbone(x)

    def head_forward(self, f: Tensor) -> Tuple[Tensor, Tensor]:
        return self.head(f)

    def critic_scores(self, t_i: Tensor, t_j: Tensor, e_j: Tensor) -> Tensor:
        """h1(F^t(t_i, t_j)) . h2(F^ts(t_i, e_j)) per row."""
        v_t = relation_forward(self.rel_t, t_i, t_j)
        v_ts = relation_forward(self.rel_ts, t_i, e_j)
        return T.rowdot(project(self.proj1, v_t), project(self.proj2, v_ts))
