"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, no_grad, precision, zero_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    passed: bool
    checked: int
    skipped: int = 0
    inputs: tuple = ()

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name:<28s} max_rel_err={self.max_rel_err:.3e} coords={self.checked}"
        if self.inputs:
            text += " via " + ",".join(self.inputs)
        return text


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    kinks: Optional[Callable[[Tensor], np.ndarray]] = None,
    name: str = "",
    input_names: Sequence[str] = (),
) -> GradCheckReport:
    """Compare backward() gradients of scalar ``f`` against central differences.

    ``x`` may be one tensor or a list; ``f`` receives them positionally. All
    inputs must be float64. ``kinks`` optionally maps an input tensor to a
    boolean mask of coordinates to exclude (points within ``eps`` of a
    non-differentiable point).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require grad")

    with precision(64):
        zero_grad(xs)
        out = f(*xs)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got {getattr(out, 'shape', out)}")
        backward(out)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
        zero_grad(xs)

        worst = 0.0
        checked = skipped = 0
        with no_grad():
            for t, grad in zip(xs, analytic):
                mask = np.zeros(t.shape, dtype=bool) if kinks is None else np.asarray(kinks(t), dtype=bool)
                flat = t.data.reshape(-1)
                for k in range(flat.size):
                    if mask.reshape(-1)[k]:
                        skipped += 1
                        continue
                    orig = flat[k]
                    flat[k] = orig + eps
                    fp = f(*xs).item()
                    flat[k] = orig - eps
                    fm = f(*xs).item()
                    flat[k] = orig
                    numeric = (fp - fm) / (2.0 * eps)
                    err = float(rel_err(np.float64(grad.reshape(-1)[k]), np.float64(numeric)))
                    worst = max(worst, err)
                    checked += 1
    return GradCheckReport(name=name, max_rel_err=worst, passed=worst <= tol, checked=checked, skipped=skipped,
                           inputs=tuple(input_names))


# ---------------------------------------------------------------- suite
#
# One case per primitive and per loss composition. Model-backed cases use a
# narrow configuration: the ops are dimension-generic, so small widths keep
# the full sweep fast without losing coverage.


@dataclass
class Case:
    fn: Callable[..., Tensor]
    inputs: list
    names: tuple = ()
    kinks: Optional[Callable[[Tensor], np.ndarray]] = None


CASES: Dict[str, Callable[[np.random.Generator], Case]] = {}
NEGATIVE_CONTROL = "negative_control"


def _case(name: str):
    def register(builder):
        CASES[name] = builder
        return builder

    return register


def _var(rng, *shape, low=None, high=None) -> Tensor:
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _probe(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Weighted sum with fixed random weights, so every output coordinate gets a distinct upstream grad."""
    w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return lambda y: T.sum(T.mul(y, w))


def _simple(op, *vars, **kw) -> Case:
    rng = kw.pop("rng")
    kinks = kw.pop("kinks", None)
    with precision(64), no_grad():
        weigh = _probe(op(*vars), rng)
    return Case(lambda *xs: weigh(op(*xs)), list(vars), kinks=kinks)


def _near(limit: float, eps: float = 1e-4):
    return lambda t: np.abs(t.data - limit) < eps


@_case("add")
def _c_add(rng):
    return _simple(T.add, _var(rng, 3, 4), _var(rng, 4), rng=rng)


@_case("sub")
def _c_sub(rng):
    return _simple(T.sub, _var(rng, 3, 4), _var(rng, 3, 1), rng=rng)


@_case("scale")
def _c_scale(rng):
    c = float(rng.uniform(-2, 2))
    return _simple(lambda x: T.scale(x, c), _var(rng, 5), rng=rng)


@_case("mul")
def _c_mul(rng):
    return _simple(T.mul, _var(rng, 2, 3), _var(rng, 2, 3), rng=rng)


@_case("neg")
def _c_neg(rng):
    return _simple(T.neg, _var(rng, 4), rng=rng)


@_case("relu")
def _c_relu(rng):
    return _simple(T.relu, _var(rng, 6, 3), rng=rng, kinks=_near(0.0))


@_case("exp")
def _c_exp(rng):
    return _simple(T.exp, _var(rng, 5), rng=rng)


@_case("log")
def _c_log(rng):
    return _simple(T.log, _var(rng, 5, low=0.5, high=3.0), rng=rng)


@_case("softplus")
def _c_softplus(rng):
    return _simple(T.softplus, _var(rng, 7), rng=rng)


@_case("clamp_max")
def _c_clamp(rng):
    return _simple(lambda x: T.clamp_max(x, 0.3), _var(rng, 8), rng=rng, kinks=_near(0.3))


@_case("matmul")
def _c_matmul(rng):
    return _simple(T.matmul, _var(rng, 3, 4), _var(rng, 4, 2), rng=rng)


@_case("linear")
def _c_linear(rng):
    return _simple(T.linear, _var(rng, 3, 4), _var(rng, 5, 4), _var(rng, 5), rng=rng)


@_case("conv2d")
def _c_conv(rng):
    return _simple(lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=0),
                   _var(rng, 2, 2, 5, 5), _var(rng, 3, 2, 3, 3), _var(rng, 3), rng=rng)


@_case("conv2d_strided")
def _c_conv_strided(rng):
    return _simple(lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1),
                   _var(rng, 2, 1, 6, 6), _var(rng, 2, 1, 3, 3), _var(rng, 2), rng=rng)


@_case("concat")
def _c_concat(rng):
    return _simple(lambda a, b: T.concat([a, b], axis=1), _var(rng, 3, 2), _var(rng, 3, 4), rng=rng)


@_case("reshape")
def _c_reshape(rng):
    return _simple(lambda x: T.reshape(x, (3, 4)), _var(rng, 2, 6), rng=rng)


@_case("take")
def _c_take(rng):
    idx = np.array([2, 0, 2, 1])
    return _simple(lambda x: T.take(x, idx), _var(rng, 3, 2), rng=rng)


@_case("pick")
def _c_pick(rng):
    idx = rng.integers(0, 4, size=5)
    return _simple(lambda x: T.pick(x, idx), _var(rng, 5, 4), rng=rng)


@_case("sum")
def _c_sum(rng):
    return _simple(lambda x: T.sum(x, axis=0), _var(rng, 3, 4), rng=rng)


@_case("mean")
def _c_mean(rng):
    return _simple(lambda x: T.mean(x, axis=(1, 2)), _var(rng, 2, 3, 4), rng=rng)


@_case("sq_norm")
def _c_sq_norm(rng):
    return _simple(lambda x: T.sq_norm(x, axis=1), _var(rng, 3, 4), rng=rng)


@_case("rowdot")
def _c_rowdot(rng):
    return _simple(T.rowdot, _var(rng, 3, 4), _var(rng, 3, 4), rng=rng)


@_case("l2_normalize")
def _c_l2(rng):
    return _simple(lambda x: T.l2_normalize(x, axis=1), _var(rng, 3, 4), rng=rng)


@_case("softmax")
def _c_softmax(rng):
    return _simple(lambda x: T.softmax(x, axis=1), _var(rng, 3, 5), rng=rng)


@_case("log_softmax")
def _c_log_softmax(rng):
    return _simple(lambda x: T.log_softmax(x, axis=0), _var(rng, 4, 3), rng=rng)


def small_config():
    from .model import ModelConfig

    return ModelConfig(input_side=8, conv_channels=(2, 3), gen_feature_dim=4, head_hidden=8, embed_dim=4,
                       teacher_dim=4, relation_hidden=8, relation_dim=3, proj_dim=3)


def _small_model(rng, num_classes: int = 3):
    from .model import StudentModel

    with precision(64):
        model = StudentModel(small_config(), num_classes, seed=int(rng.integers(0, 2**31)))
    # zero biases make degenerate points likely at these widths (all-dead
    # hidden rows, scale-invariant single units); seeded positive biases avoid them
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = rng.uniform(0.05, 0.3, size=p.shape)
    return model


def _group_params(model, groups) -> Tuple[list, tuple]:
    table = model.param_dict()
    names = [n for g in groups for n in model.group(g)]
    return [table[n] for n in names], tuple(groups)


def _unit_rows(rng, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@_case("gen_loss")
def _c_gen(rng):
    from . import losses as L

    target = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    return Case(lambda s: L.gen_loss(s, target), [_var(rng, 3, 4)], ("student_feats",))


@_case("gen_loss_backbone")
def _c_gen_backbone(rng):
    from . import losses as L

    model = _small_model(rng)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 8, 8)), dtype=np.float64)
    target = Tensor(_unit_rows(rng, 2, 4), dtype=np.float64)
    params, names = _group_params(model, ("backbone",))
    return Case(lambda *_: L.gen_loss(model.backbone(x), target), params, names)


@_case("critic_score")
def _c_critic(rng):
    model = _small_model(rng)
    ti, tj = (Tensor(_unit_rows(rng, 3, 4), dtype=np.float64) for _ in range(2))
    ej = _var(rng, 3, 4)
    params, names = _group_params(model, ("rel_t", "rel_ts", "proj1", "proj2"))
    return Case(lambda *xs: T.sum(model.critic_scores(ti, tj, xs[-1])), params + [ej], names + ("e_j",))


@_case("rcd_loss")
def _c_rcd(rng):
    from . import losses as L
    from .model import relation_forward

    model = _small_model(rng)
    m = 6
    ti, tj = (Tensor(_unit_rows(rng, m, 4), dtype=np.float64) for _ in range(2))
    b = np.array([1, 1, 1, 0, 0, 0])
    ej = _var(rng, m, 4)
    params, names = _group_params(model, ("rel_t", "rel_ts", "proj1", "proj2"))

    def f(*xs):
        v_t = relation_forward(model.rel_t, ti, tj)
        v_ts = relation_forward(model.rel_ts, ti, xs[-1])
        return L.rcd_loss(v_t, v_ts, b, tau=L.DEFAULT_TAU, n=3, m=m, h1=model.proj1, h2=model.proj2)

    return Case(f, params + [ej], names + ("e_j",))


@_case("kd_loss")
def _c_kd(rng):
    from . import losses as L

    teacher = rng.standard_normal((3, 4)) * 3
    return Case(lambda z: L.kd_loss(z, teacher, temperature=L.DEFAULT_KD_TEMPERATURE), [_var(rng, 3, 4)],
                ("student_logits",))


@_case("ce_loss")
def _c_ce(rng):
    from . import losses as L

    labels = rng.integers(0, 4, size=5)
    return Case(lambda z: L.ce_loss(z, labels), [_var(rng, 5, 4)], ("logits",))


@_case("dis_loss")
def _c_dis(rng):
    from .train import OptimConfig, stage2_loss

    model = _small_model(rng, num_classes=3)
    labels = np.array([0, 0, 1, 1, 2, 2])
    f_in = Tensor(rng.standard_normal((6, 4)), dtype=np.float64)
    t_feats = _unit_rows(rng, 6, 4)
    t_logits = rng.standard_normal((6, 3)) * 3
    cfg = OptimConfig()
    params, names = _group_params(model, ("head", "rel_t", "rel_ts", "proj1", "proj2"))

    def f(*_):
        loss, _report = stage2_loss(model, f_in, labels, t_feats, t_logits, ("cls", "kd", "rcd"), cfg,
                                    np.random.default_rng(0))
        return loss

    return Case(f, params, names)


def _broken_square(x: Tensor) -> Tensor:
    # forward x^2, backward deliberately wrong (3x instead of 2x)
    return T._record("broken_square", np.square(x.data), (x,), lambda g: (3.0 * g * x.data,))


def _c_negative(rng):
    return Case(lambda x: T.sum(_broken_square(x)), [_var(rng, 4)], ("broken_square",))


def run_suite(names: Optional[Sequence[str]] = None, seeds: Sequence[int] = (7,), eps: float = 1e-5,
              tol: float = 1e-4, negative_control: bool = False) -> List[GradCheckReport]:
    """Run the named cases (all when ``names`` is None), one report per case across all seeds."""
    selected = list(CASES) if names is None else list(names)
    order = list(CASES)
    for n in selected:
        if n not in CASES:
            raise KeyError(f"unknown gradcheck case {n!r}; choose from {', '.join(order)}")
    builders = [(n, CASES[n]) for n in selected]
    if negative_control:
        builders.append((NEGATIVE_CONTROL, _c_negative))
    reports = []
    for name, build in builders:
        key = order.index(name) if name in CASES else len(order)
        worst, checked, skipped, case = 0.0, 0, 0, None
        for seed in seeds:
            case = build(np.random.default_rng([int(seed), key]))
            r = grad_check(case.fn, case.inputs, eps=eps, tol=tol, kinks=case.kinks, name=name)
            worst = max(worst, r.max_rel_err)
            checked += r.checked
            skipped += r.skipped
        reports.append(GradCheckReport(name, worst, worst <= tol, checked, skipped, inputs=case.names))
    return reports
