"""Iterative shrinkage-thresholding for l1-regularised least squares.

Solves

    min_x  0.5 * ||D x - y||^2 + lam * ||x||_1

with the fixed-step iteration

    x_{k+1} = T_{lam*alpha}(x_k - alpha * D^T (D x_k - y))

where T is the soft threshold.  D^T y does not depend on the iterate, so
:func:`solve` computes it once up front.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import soft_threshold


@dataclass
class IstaProblem:
    D: np.ndarray
    y: np.ndarray
    lam: float

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.lam = float(self.lam)
        if self.D.shape[0] != self.y.size:
            raise ValueError(f"D has {self.D.shape[0]} rows but y has length {self.y.size}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not (np.isfinite(self.D).all() and np.isfinite(self.y).all() and np.isfinite(self.lam)):
            raise ValueError("problem data must be finite")

    @property
    def n(self) -> int:
        return self.D.shape[1]

    @classmethod
    def from_text(cls, text: str) -> "IstaProblem":
        """Parse ``m n`` / m rows of D / y / lambda, whitespace separated."""
        lines = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines or len(lines[0]) != 2:
            raise ValueError("first line must hold 'm n'")
        m, n = (int(v) for v in lines[0])
        if m < 1 or n < 1 or len(lines) != m + 3:
            raise ValueError(f"expected {m + 3} non-empty lines, got {len(lines)}")
        D = np.array([[float(v) for v in row] for row in lines[1:m + 1]])
        if D.shape != (m, n):
            raise ValueError(f"D rows must have {n} entries")
        y = np.array([float(v) for v in lines[m + 1]])
        if y.size != m:
            raise ValueError(f"y must have {m} entries")
        if len(lines[m + 2]) != 1:
            raise ValueError("last line must hold lambda")
        return cls(D, y, float(lines[m + 2][0]))

    @classmethod
    def load(cls, path) -> "IstaProblem":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class IstaSolverConfig:
    alpha: float | None = None  # None: 0.99 / L with L from power iteration
    max_iters: int = 10_000
    tol: float = 1e-10
    power_iters: int = 50

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclass
class IstaTrace:
    iterates: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    alpha: float = 0.0
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.iterates) - 1

    @property
    def converged_iter(self) -> int:
        """Index of the first iterate identical to the final one."""
        last = self.iterates[-1]
        k = len(self.iterates) - 1
        while k > 0 and np.array_equal(self.iterates[k - 1], last):
            k -= 1
        return k

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "residual"])
            for k, (f, r) in enumerate(zip(self.objectives, self.residuals)):
                w.writerow([k, repr(f), repr(r)])


def objective(problem: IstaProblem, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.n,):
        raise ValueError(f"x must have length {problem.n}")
    r = problem.D @ x - problem.y
    return float(0.5 * (r @ r) + problem.lam * np.abs(x).sum())


def lipschitz(D: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    """Largest eigenvalue of D^T D by power iteration."""
    v = np.random.default_rng(seed).standard_normal(D.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = D.T @ (D @ v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return float(v @ (D.T @ (D @ v)))


def default_alpha(problem: IstaProblem, power_iters: int = 50) -> float:
    L = lipschitz(problem.D, power_iters)
    return 0.99 / L if L > 0 else 1.0


def ista_step(problem: IstaProblem, x, alpha: float) -> np.ndarray:
    """One shrinkage step T_{lam*alpha}(x - alpha * D^T (D x - y))."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.n,):
        raise ValueError(f"x must have length {problem.n}")
    D = problem.D
    return soft_threshold(x - alpha * (D.T @ (D @ x - problem.y)), problem.lam * alpha)


def ista_step_rewrite(problem: IstaProblem, x, alpha: float) -> np.ndarray:
    """The same step written as T((E - alpha D^T D) x + alpha D^T y).

    ``x`` may also be a stack of iterates, one per row.
    """
    D = problem.D
    A = np.eye(problem.n) - alpha * (D.T @ D)
    return soft_threshold(np.asarray(x, dtype=np.float64) @ A.T + alpha * (D.T @ problem.y),
                          problem.lam * alpha)


def solve(problem: IstaProblem, config: IstaSolverConfig | None = None, x0=None,
          precompute: bool = True) -> tuple[np.ndarray, IstaTrace]:
    """Run ISTA from ``x0`` (default zero).

    Stops after ``max_iters`` steps or once the relative objective decrease
    drops below ``tol``.  Running out of iterations is not an error; check
    ``trace.converged``.
    """
    config = config or IstaSolverConfig()
    alpha = config.alpha if config.alpha is not None else default_alpha(problem, config.power_iters)
    D, y, thr = problem.D, problem.y, problem.lam * alpha
    dty = D.T @ y

    x = np.zeros(problem.n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    trace = IstaTrace(alpha=alpha)

    def record(v):
        r = D @ v - y
        trace.iterates.append(v)
        trace.residuals.append(float(np.sqrt(r @ r)))
        trace.objectives.append(float(0.5 * (r @ r) + problem.lam * np.abs(v).sum()))

    record(x)
    for _ in range(config.max_iters):
        b = dty if precompute else D.T @ y
        x = soft_threshold(x - alpha * (D.T @ (D @ x)) + alpha * b, thr)
        record(x)
        prev, cur = trace.objectives[-2], trace.objectives[-1]
        if prev - cur <= config.tol * max(abs(prev), np.finfo(float).tiny):
            trace.converged = True
            break
    return x, trace


def check_fixed_point(problem: IstaProblem, x, alpha: float, atol: float = 1e-8) -> bool:
    """True when x is (numerically) a fixed point of the shrinkage step.

    Fixed points of the step are exactly the minimisers of the objective.
    """
    x = np.asarray(x, dtype=np.float64)
    return bool(np.max(np.abs(ista_step(problem, x, alpha) - x)) < atol)
