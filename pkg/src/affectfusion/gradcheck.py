"""Central finite-difference verification of recorded gradients.

``gradcheck`` perturbs every parameter coordinate by +/- step, compares the
resulting central difference against the gradient produced by ``backward()``,
and reports the worst relative error per parameter.  The suite in
``run_suite`` applies this to every differentiable primitive and to the full
fusion-model loss of each task, over many random seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    NonFiniteError,
    Tensor,
    concat,
    gather_rows,
    layernorm,
    narrow,
    softmax,
)

__all__ = [
    "GradcheckError",
    "GradcheckReport",
    "gradcheck",
    "PRIMITIVE_OPS",
    "END_TO_END_OPS",
    "run_suite",
    "SuiteResult",
]


class GradcheckError(RuntimeError):
    """The objective was not evaluable (non-finite value at the base point)."""


@dataclass
class ParamResult:
    name: str
    rel_error: float
    max_abs_diff: float
    n_coords: int


@dataclass
class GradcheckReport:
    step: float
    results: list[ParamResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.results), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol

    def lines(self) -> list[str]:
        return [f"{r.name}: rel_error={r.rel_error:.3e} (|diff|={r.max_abs_diff:.3e}, "
                f"{r.n_coords} coords)" for r in self.results]


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    num = float(np.abs(analytic - numeric).max()) if analytic.size else 0.0
    den = float(max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0)))
    if den < 1e-12:
        return (0.0 if num < 1e-9 else np.inf), num
    return num / den, num


def gradcheck(fn, params: dict[str, Tensor], step: float = 1e-5,
              sample: int | None = None, rng: np.random.Generator | None = None,
              ) -> GradcheckReport:
    """Compare recorded gradients of the scalar ``fn()`` against central differences.

    ``fn`` must be a deterministic closure over ``params`` (no internal RNG).
    ``sample`` limits the check to that many random coordinates per parameter;
    ``None`` sweeps every coordinate.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step {step} outside the supported range [1e-6, 1e-3]")
    if sample is not None and rng is None:
        rng = np.random.default_rng(0)

    for p in params.values():
        p.grad = None
    try:
        out = fn()
    except NonFiniteError as exc:
        raise GradcheckError(f"objective is non-finite at the base point: {exc}") from exc
    value = out.item()
    if not np.isfinite(value):
        raise GradcheckError(f"objective evaluated to {value}")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = GradcheckReport(step=step)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if sample is None or sample >= size:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=sample, replace=False))
        a = analytic[name].reshape(-1)[coords]
        n = np.empty_like(a)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            f_plus = fn().item()
            flat[c] = orig - step
            f_minus = fn().item()
            flat[c] = orig
            n[j] = (f_plus - f_minus) / (2.0 * step)
        rel, diff = _rel_error(a, n)
        report.results.append(ParamResult(name, rel, diff, len(coords)))
    return report


# ---------------------------------------------------------------------------
# Case builders for the verification suite.
# ---------------------------------------------------------------------------

def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from(x: np.ndarray, points, margin: float = 0.05) -> np.ndarray:
    # Nudge samples off kinks / clamp boundaries so central differences are valid.
    for p in points:
        close = np.abs(x - p) < margin
        x = x + np.where(close, 2.0 * margin, 0.0)
    return x


def _scalarize(rng, shape):
    return rng.normal(size=shape)


def _case_add(rng):
    a, b = _param(rng, 2, 3), _param(rng, 3)
    r = _scalarize(rng, (2, 3))
    return (lambda: ((a + b) * r).sum()), {"a": a, "b": b}


def _case_sub(rng):
    a, b = _param(rng, 2, 3), Tensor(rng.normal(), requires_grad=True)
    r = _scalarize(rng, (2, 3))
    return (lambda: ((a - b + (-a) * 0.5) * r).sum()), {"a": a, "b": b}


def _case_mul(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    r = _scalarize(rng, (2, 3))
    return (lambda: ((a * b) * r).sum()), {"a": a, "b": b}


def _case_div(rng):
    a = _param(rng, 2, 3)
    b = Tensor(np.sign(rng.normal(size=(2, 3))) * rng.uniform(0.3, 2.0, (2, 3)),
               requires_grad=True)
    r = _scalarize(rng, (2, 3))
    return (lambda: ((a / b) * r).sum()), {"a": a, "b": b}


def _case_pow(rng):
    x = Tensor(rng.uniform(0.3, 2.0, (2, 3)), requires_grad=True)
    r = _scalarize(rng, (2, 3))
    return (lambda: ((x ** 1.7) * r).sum()), {"x": x}


def _case_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    r = _scalarize(rng, (3, 2))
    return (lambda: ((a @ b) * r).sum()), {"a": a, "b": b}


def _case_transpose(rng):
    a = _param(rng, 3, 4)
    r = _scalarize(rng, (4, 3))
    return (lambda: (a.t() * r).sum()), {"a": a}


def _case_tanh(rng):
    x = _param(rng, 2, 4)
    r = _scalarize(rng, (2, 4))
    return (lambda: (x.tanh() * r).sum()), {"x": x}


def _case_sigmoid(rng):
    x = _param(rng, 2, 4)
    r = _scalarize(rng, (2, 4))
    return (lambda: (x.sigmoid() * r).sum()), {"x": x}


def _case_relu(rng):
    x = Tensor(_away_from(rng.uniform(-2, 2, (2, 4)), [0.0]), requires_grad=True)
    r = _scalarize(rng, (2, 4))
    return (lambda: (x.relu() * r).sum()), {"x": x}


def _case_exp(rng):
    x = Tensor(rng.uniform(-2, 2, (2, 4)), requires_grad=True)
    r = _scalarize(rng, (2, 4))
    return (lambda: (x.exp() * r).sum()), {"x": x}


def _case_log(rng):
    x = Tensor(rng.uniform(0.2, 2.2, (2, 4)), requires_grad=True)
    r = _scalarize(rng, (2, 4))
    return (lambda: (x.log() * r).sum()), {"x": x}


def _case_clip(rng):
    x = Tensor(_away_from(rng.uniform(-2, 2, (2, 4)), [-0.5, 0.5]), requires_grad=True)
    r = _scalarize(rng, (2, 4))
    return (lambda: (x.clip(-0.5, 0.5) * r).sum()), {"x": x}


def _case_sum(rng):
    x = _param(rng, 2, 3, 2)
    r = _scalarize(rng, (2, 2))
    r3 = _scalarize(rng, (2, 3, 1))
    return (lambda: (x.sum(axis=1) * r).sum() * 0.7
            + (x.sum(axis=-1, keepdims=True) * r3).sum() * 0.3
            + x.sum() * 0.1), {"x": x}


def _case_mean(rng):
    x = _param(rng, 2, 3)
    r = _scalarize(rng, (3,))
    return (lambda: (x.mean(axis=0) * r).sum() + x.mean() * 0.5), {"x": x}


def _case_softmax(rng):
    x = _param(rng, 2, 5)
    r = _scalarize(rng, (2, 5))
    return (lambda: (softmax(x, axis=1) * r).sum()), {"x": x}


def _case_layernorm(rng):
    x, g, b = _param(rng, 2, 8), _param(rng, 8), _param(rng, 8)
    r = _scalarize(rng, (2, 8))
    return (lambda: (layernorm(x, g, b) * r).sum()), {"x": x, "gain": g, "bias": b}


def _case_concat(rng):
    parts = [_param(rng, 2, 2), _param(rng, 2, 3), _param(rng, 2, 1)]
    r = _scalarize(rng, (2, 6))
    return (lambda: (concat(parts, axis=1) * r).sum()), {
        "p0": parts[0], "p1": parts[1], "p2": parts[2]}


def _case_narrow(rng):
    x = _param(rng, 3, 5)
    r = _scalarize(rng, (3, 3))
    return (lambda: (narrow(x, 1, 1, 3) * r).sum()), {"x": x}


def _case_gather_rows(rng):
    x = _param(rng, 5, 3)
    idx = np.array([4, 0, 2, 2])  # repeated index exercises scatter-add
    r = _scalarize(rng, (4, 3))
    return (lambda: (gather_rows(x, idx) * r).sum()), {"x": x}


_PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "pow": _case_pow,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "tanh": _case_tanh,
    "sigmoid": _case_sigmoid,
    "relu": _case_relu,
    "exp": _case_exp,
    "log": _case_log,
    "clip": _case_clip,
    "sum": _case_sum,
    "mean": _case_mean,
    "softmax": _case_softmax,
    "layernorm": _case_layernorm,
    "concat": _case_concat,
    "narrow": _case_narrow,
    "gather_rows": _case_gather_rows,
}

PRIMITIVE_OPS = tuple(sorted(_PRIMITIVE_CASES))
END_TO_END_OPS = ("loss_va", "loss_expr", "loss_au")


def primitive_case(name: str, rng: np.random.Generator):
    return _PRIMITIVE_CASES[name](rng)


def end_to_end_case(task: str, rng: np.random.Generator):
    """Full fusion-model loss on a tiny two-frame, two-stream batch."""
    from . import objectives
    from .model import FusionModel, ModelConfig

    cfg = ModelConfig(streams=(("a", 3), ("b", 4)), d_model=8, n_heads=2,
                      n_layers=1, d_ff=8, dropout=0.0, t_max=2)
    model = FusionModel(cfg, seed=int(rng.integers(2 ** 31)))
    feats = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 4))}
    mask1 = np.ones(2, dtype=bool)
    mask2 = np.ones((2, 2), dtype=bool)
    mask12 = np.ones((2, 12), dtype=bool)
    va = rng.uniform(-0.9, 0.9, (2, 2))
    expr = rng.integers(0, 8, 2)
    au = rng.integers(0, 2, (2, 12)).astype(float)
    weights = rng.uniform(0.5, 1.5, 12)

    def fn():
        out = model.forward(feats)
        if task == "va":
            return objectives.va_loss(out["va"], va, mask2)
        if task == "expr":
            return objectives.ce_loss(out["expr"], expr, mask1)
        if task == "au":
            return objectives.au_loss(out["au"], au, mask12, weights)
        raise ValueError(f"unknown task {task!r}")

    return fn, model.params


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    n_seeds: int
    failures: int

    def line(self, tol: float) -> str:
        status = "PASS" if self.failures == 0 else "FAIL"
        return (f"{self.name:<12s} max_rel_error={self.max_rel_error:.3e} "
                f"seeds={self.n_seeds} {status}")


@dataclass
class SuiteResult:
    tol: float
    ops: list[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(op.failures == 0 for op in self.ops)

    def lines(self) -> list[str]:
        return [op.line(self.tol) for op in self.ops]


def run_suite(ops: list[str] | None = None, seeds: int = 20, step: float = 1e-5,
              tol: float = 1e-4, e2e_sample: int = 4) -> SuiteResult:
    """Run the gradient suite over ``seeds`` seeded random cases per op.

    End-to-end losses check ``e2e_sample`` random coordinates per parameter;
    primitives sweep every coordinate.
    """
    names = list(ops) if ops is not None else list(PRIMITIVE_OPS) + list(END_TO_END_OPS)
    unknown = [n for n in names if n not in _PRIMITIVE_CASES and n not in END_TO_END_OPS]
    if unknown:
        raise ValueError(f"unknown ops: {', '.join(unknown)}; "
                         f"choose from {', '.join(PRIMITIVE_OPS + END_TO_END_OPS)}")
    result = SuiteResult(tol=tol)
    for name in names:
        worst = 0.0
        failures = 0
        for seed in range(seeds):
            rng = np.random.default_rng(10_000 + seed)
            if name in _PRIMITIVE_CASES:
                fn, params = primitive_case(name, rng)
                report = gradcheck(fn, params, step=step)
            else:
                fn, params = end_to_end_case(name.removeprefix("loss_"), rng)
                report = gradcheck(fn, params, step=step, sample=e2e_sample,
                                   rng=np.random.default_rng(20_000 + seed))
            worst = max(worst, report.max_rel_error)
            if not report.passed(tol):
                failures += 1
        result.ops.append(OpResult(name, worst, seeds, failures))
    return result
