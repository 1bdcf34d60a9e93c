"""Exact half-quadratic-splitting solver for the alignment/fusion energy.

Everything here works in image space with diagonal (per-pixel gain)
degradations and quadratic correspondence priors, so each sub-problem has a
closed form. The network in :mod:`afunet.model` mirrors one outer iteration
of :func:`solve` per stage.

Energy minimised by the split formulation::

    E(x, u, v, a1, a3) = 1/2 |y2 - D2 x|^2
                       + lam1 * 1/2 |D1 u - a1|^2 + lam3 * 1/2 |D3 v - a3|^2
                       + beta1/2 |u - x|^2 + beta3/2 |v - x|^2
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

__all__ = [
    "OracleError",
    "ShapeError",
    "DivergenceError",
    "DegradationOp",
    "QuadraticPrior",
    "OracleProblem",
    "SolverState",
    "SolveConfig",
    "energy",
    "align_step",
    "prox_update_u",
    "prox_update_v",
    "data_consistency",
    "initial_state",
    "solve",
]


class OracleError(ValueError):
    """Base class for invalid oracle inputs."""


class ShapeError(OracleError):
    def __init__(self, field_name: str, expected, got):
        self.field = field_name
        super().__init__(f"{field_name}: expected shape {tuple(expected)}, got {tuple(got)}")


class DivergenceError(RuntimeError):
    """Energy went up in exact-align mode; always an implementation bug."""


@dataclass(frozen=True)
class DegradationOp:
    """Diagonal degradation ``D x = gains * x``. Self-adjoint."""

    gains: np.ndarray
    kind: Literal["diagonal"] = "diagonal"

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        if self.kind != "diagonal":
            raise OracleError(f"unsupported degradation kind {self.kind!r}")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise OracleError("degradation gains must be finite and strictly positive")
        object.__setattr__(self, "gains", g)

    @classmethod
    def identity(cls, shape) -> "DegradationOp":
        return cls(np.ones(shape))

    @property
    def shape(self):
        return self.gains.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.gains * x

    def transpose(self, y: np.ndarray) -> np.ndarray:
        return self.gains * y

    def gram(self) -> np.ndarray:
        """Diagonal of D^T D."""
        return self.gains * self.gains


@dataclass(frozen=True)
class QuadraticPrior:
    """``p(a, alpha) = 1/2 |a - alpha|^2`` weighted by ``weight``."""

    weight: float = 1.0
    target_slot: Literal["alpha1", "alpha3"] = "alpha1"

    def __post_init__(self):
        if not self.weight >= 0:
            raise OracleError(f"prior weight must be >= 0, got {self.weight}")

    @staticmethod
    def value(a: np.ndarray, alpha: np.ndarray) -> float:
        r = a - alpha
        return 0.5 * float(np.sum(r * r))

    @staticmethod
    def grad_alpha(a: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        return alpha - a


@dataclass(frozen=True)
class OracleProblem:
    y1: np.ndarray
    y2: np.ndarray
    y3: np.ndarray
    d1: DegradationOp
    d2: DegradationOp
    d3: DegradationOp
    prior1: QuadraticPrior = field(default_factory=lambda: QuadraticPrior(1.0, "alpha1"))
    prior3: QuadraticPrior = field(default_factory=lambda: QuadraticPrior(1.0, "alpha3"))
    step1: float = 1.0
    step3: float = 1.0

    def __post_init__(self):
        for name in ("y1", "y2", "y3"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shape = self.y2.shape
        for name in ("y1", "y3"):
            if getattr(self, name).shape != shape:
                raise ShapeError(name, shape, getattr(self, name).shape)
        for name in ("d1", "d2", "d3"):
            if getattr(self, name).shape != shape:
                raise ShapeError(name, shape, getattr(self, name).shape)
        for name in ("step1", "step3"):
            if not getattr(self, name) > 0:
                raise OracleError(f"{name} must be > 0, got {getattr(self, name)}")

    @property
    def shape(self):
        return self.y2.shape

    @property
    def lam1(self) -> float:
        return self.prior1.weight

    @property
    def lam3(self) -> float:
        return self.prior3.weight


@dataclass(frozen=True)
class SolverState:
    x: np.ndarray
    alpha1: np.ndarray
    alpha3: np.ndarray
    u: np.ndarray
    v: np.ndarray
    beta1: float = 1.0
    beta3: float = 1.0
    energy_trace: tuple[float, ...] = ()

    def __post_init__(self):
        if not (self.beta1 > 0 and self.beta3 > 0):
            raise OracleError(f"penalties must be positive, got beta1={self.beta1}, beta3={self.beta3}")

    def kappa(self, problem: OracleProblem) -> tuple[float, float]:
        """Prox parameters lam_i / beta_i, reported for reference only."""
        return problem.lam1 / self.beta1, problem.lam3 / self.beta3


@dataclass(frozen=True)
class SolveConfig:
    max_iters: int = 200
    tol: float = 1e-10
    exact_align: bool = False
    order: Literal["AF", "FA"] = "AF"
    beta1: float = 1.0
    beta3: float = 1.0
    slack: float = 1e-9


def _check_state(problem: OracleProblem, state: SolverState) -> None:
    shape = problem.shape
    for name in ("x", "alpha1", "alpha3", "u", "v"):
        arr = getattr(state, name)
        if np.shape(arr) != shape:
            raise ShapeError(name, shape, np.shape(arr))


def energy(problem: OracleProblem, state: SolverState) -> float:
    _check_state(problem, state)
    x, u, v = state.x, state.u, state.v
    r = problem.y2 - problem.d2.apply(x)
    value = 0.5 * float(np.sum(r * r))
    value += problem.lam1 * QuadraticPrior.value(problem.d1.apply(u), state.alpha1)
    value += problem.lam3 * QuadraticPrior.value(problem.d3.apply(v), state.alpha3)
    value += 0.5 * state.beta1 * float(np.sum((u - x) ** 2))
    value += 0.5 * state.beta3 * float(np.sum((v - x) ** 2))
    return value


def align_step(problem: OracleProblem, state: SolverState, exact: bool = False) -> SolverState:
    """Gradient step on each correspondence prior w.r.t. its aligned variable.

    ``exact=True`` jumps straight to the minimiser ``alpha_i = D_i x``.
    """
    _check_state(problem, state)
    target1 = problem.d1.apply(state.x)
    target3 = problem.d3.apply(state.x)
    if exact:
        return replace(state, alpha1=target1, alpha3=target3)
    a1 = state.alpha1 - problem.step1 * QuadraticPrior.grad_alpha(target1, state.alpha1)
    a3 = state.alpha3 - problem.step3 * QuadraticPrior.grad_alpha(target3, state.alpha3)
    return replace(state, alpha1=a1, alpha3=a3)


def _prox(x, alpha, op: DegradationOp, lam: float, beta: float) -> np.ndarray:
    # argmin_w beta/2 |w - x|^2 + lam/2 |D w - alpha|^2, elementwise for diagonal D
    return (beta * x + lam * op.transpose(alpha)) / (beta + lam * op.gram())


def prox_update_u(problem: OracleProblem, state: SolverState) -> SolverState:
    _check_state(problem, state)
    u = _prox(state.x, state.alpha1, problem.d1, problem.lam1, state.beta1)
    return replace(state, u=u)


def prox_update_v(problem: OracleProblem, state: SolverState) -> SolverState:
    _check_state(problem, state)
    v = _prox(state.x, state.alpha3, problem.d3, problem.lam3, state.beta3)
    return replace(state, v=v)


def data_consistency(problem: OracleProblem, state: SolverState) -> SolverState:
    """Closed-form x-update: (D2^T D2 + (b1 + b3) I)^-1 (D2^T y2 + b1 u + b3 v)."""
    _check_state(problem, state)
    b1, b3 = state.beta1, state.beta3
    rhs = problem.d2.transpose(problem.y2) + b1 * state.u + b3 * state.v
    x = rhs / (problem.d2.gram() + (b1 + b3))
    return replace(state, x=x)


def initial_state(problem: OracleProblem, beta1: float = 1.0, beta3: float = 1.0) -> SolverState:
    """Start from the reference observation; aligned variables start at the raw non-references."""
    x0 = problem.y2.copy()
    return SolverState(
        x=x0,
        alpha1=problem.y1.copy(),
        alpha3=problem.y3.copy(),
        u=x0.copy(),
        v=x0.copy(),
        beta1=beta1,
        beta3=beta3,
    )


def _outer_iteration(problem, state, config: SolveConfig) -> SolverState:
    def align(s):
        return align_step(problem, s, exact=config.exact_align)

    def fuse(s):
        s = prox_update_u(problem, s)
        s = prox_update_v(problem, s)
        return data_consistency(problem, s)

    if config.order == "AF":
        return fuse(align(state))
    if config.order == "FA":
        return align(fuse(state))
    raise OracleError(f"unknown order {config.order!r}")


def solve(problem: OracleProblem, config: SolveConfig | None = None,
          state: SolverState | None = None) -> SolverState:
    """Alternate alignment and fusion until the energy stalls or ``max_iters`` is hit.

    ``energy_trace`` holds one value per completed outer iteration.
    """
    config = config or SolveConfig()
    if config.max_iters < 1:
        raise OracleError(f"max_iters must be >= 1, got {config.max_iters}")
    if state is None:
        state = initial_state(problem, config.beta1, config.beta3)
    trace: list[float] = []
    prev = None
    for _ in range(config.max_iters):
        state = _outer_iteration(problem, state, config)
        e = energy(problem, state)
        trace.append(e)
        if prev is not None:
            if config.exact_align and e > prev + config.slack:
                raise DivergenceError(f"energy increased from {prev!r} to {e!r} at iteration {len(trace)}")
            if prev - e < config.tol:
                break
        prev = e
    return replace(state, energy_trace=tuple(trace))
