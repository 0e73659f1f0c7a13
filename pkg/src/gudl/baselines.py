"""Classical sparse-recovery baselines: OMP, ISTA and AMP.

All solvers work on the whitened system ``C^{-1/2} y = C^{-1/2} A h + w`` so a
non-identity ``C`` is handled uniformly. Batched problems are solved row by row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import StandardProblem, ValidationError


@dataclass(frozen=True)
class BaselineConfig:
    algorithm: str = "omp"
    max_iter: int = 500
    tol: float = 1e-8
    k_target: int = 6
    lam: float = 0.01
    damping: float = 0.7
    threshold_scale: float = 1.5

    def __post_init__(self):
        if self.algorithm not in ("omp", "ista", "amp"):
            raise ValidationError(f"unknown baseline {self.algorithm!r}")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be positive")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if not 0 < self.damping <= 1:
            raise ValidationError("damping must lie in (0, 1]")


@dataclass
class BaselineResult:
    h: np.ndarray
    iterations: int
    diverged: bool = False
    history: list | None = None


def _whitened(problem: StandardProblem, y):
    w = 1.0 / np.sqrt(problem.c_diag)
    return problem.A * w[:, None], np.asarray(y, dtype=float) * w


def _measurement(problem):
    if problem.y is not None:
        return problem.y
    # u = A^T C^{-1} y and A A^T = I recover y exactly
    return (problem.u @ problem.A.T) * problem.c_diag


def _rows(problem):
    y = _measurement(problem)
    return np.atleast_2d(y), y.ndim == 1


def soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def omp_single(A, y, k_target, tol=1e-8):
    """Greedy selection by largest ``|A^T r|`` (lowest index on ties) with least-squares refits."""
    n = A.shape[1]
    h = np.zeros(n)
    r = y.copy()
    support: list[int] = []
    norms = [float(np.linalg.norm(r))]
    for _ in range(k_target):
        if norms[-1] <= tol:
            break
        corr = np.abs(A.T @ r)
        corr[support] = -1.0
        j = int(np.argmax(corr))  # argmax returns the first maximum
        support.append(j)
        coef, *_ = np.linalg.lstsq(A[:, support], y, rcond=None)
        r = y - A[:, support] @ coef
        norms.append(float(np.linalg.norm(r)))
    if support:
        h[support] = coef
    return BaselineResult(h, len(support), history=norms)


def omp(problem: StandardProblem, k_target: int, tol: float = 1e-8):
    if k_target < 0:
        raise ValidationError("k_target must be non-negative")
    if k_target > problem.A.shape[0]:
        raise ValidationError(f"k_target = {k_target} exceeds 2M = {problem.A.shape[0]}")
    Y, single = _rows(problem)
    out = []
    for y in Y:
        Aw, yw = _whitened(problem, y)
        out.append(omp_single(Aw, yw, k_target, tol).h)
    out = np.array(out)
    return out[0] if single else out


def lasso_objective(A, y, h, lam):
    return 0.5 * float(np.sum((y - A @ h) ** 2)) + lam * float(np.sum(np.abs(h)))


def ista_single(A, y, lam, max_iter=500, tol=1e-8, eta=1.0, record=False):
    h = np.zeros(A.shape[1])
    hist = [lasso_objective(A, y, h, lam)] if record else None
    it = 0
    for it in range(1, max_iter + 1):
        new = soft(h + eta * (A.T @ (y - A @ h)), eta * lam)
        step = np.linalg.norm(new - h)
        h = new
        if record:
            hist.append(lasso_objective(A, y, h, lam))
        if step <= tol * max(np.linalg.norm(h), 1.0):
            break
    return BaselineResult(h, it, history=hist)


def ista(problem: StandardProblem, lam: float, max_iter: int = 500, tol: float = 1e-8):
    """Proximal gradient with unit step and soft threshold ``lam``."""
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    eta = 1.0 / float(np.max(1.0 / problem.c_diag))
    Y, single = _rows(problem)
    out = []
    for y in Y:
        Aw, yw = _whitened(problem, y)
        out.append(ista_single(Aw, yw, lam, max_iter, tol, eta).h)
    out = np.array(out)
    return out[0] if single else out


def amp_single(A, y, max_iter=100, damping=0.7, threshold_scale=1.5, tol=1e-10):
    """Soft-threshold AMP with Onsager term and residual-based noise level."""
    m, n = A.shape
    h = np.zeros(n)
    z = y.copy()
    diverged = False
    it = 0
    for it in range(1, max_iter + 1):
        tau = np.linalg.norm(z) / np.sqrt(m)
        pseudo = h + A.T @ z
        new = soft(pseudo, threshold_scale * tau)
        new = damping * new + (1 - damping) * h
        onsager = z * (np.count_nonzero(np.abs(pseudo) > threshold_scale * tau) / m)
        z_new = y - A @ new + onsager
        z = damping * z_new + (1 - damping) * z
        step = np.linalg.norm(new - h)
        h = new
        if not np.all(np.isfinite(h)) or np.linalg.norm(h) > 1e6:
            diverged = True
            break
        if step <= tol * max(np.linalg.norm(h), 1e-30) or tau == 0:
            break
    return BaselineResult(h, it, diverged)


def amp(problem: StandardProblem, max_iter: int = 100, damping: float = 0.7, threshold_scale: float = 1.5,
        *, return_flags=False):
    Y, single = _rows(problem)
    out, flags = [], []
    for y in Y:
        Aw, yw = _whitened(problem, y)
        r = amp_single(Aw, yw, max_iter, damping, threshold_scale)
        out.append(r.h)
        flags.append(r.diverged)
    out = np.array(out)
    flags = np.array(flags)
    if single:
        out, flags = out[0], bool(flags[0])
    return (out, flags) if return_flags else out
