"""Deep-equilibrium solver: linear step, Picard forward pass, Jacobian-free backward pass.

One DEQ layer is ``f(h) = R(h + eta * (u - A^T C^{-1} A h))``. Any model
exposing ``forward(x)`` and ``vjp(x, cotangent, with_input=...)`` on batches
of rows can be used as ``R``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import StandardProblem, ValidationError


@dataclass(frozen=True)
class DeqConfig:
    eta: float = 1.0
    tol: float = 1e-4
    max_iter: int = 100
    lip_target: float = 0.9

    def __post_init__(self):
        if self.eta <= 0:
            raise ValidationError("eta must be positive")
        if not 0 < self.lip_target < 1:
            raise ValidationError("lip_target must lie in (0, 1)")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValidationError("need tol > 0 and max_iter >= 1")

    @property
    def gamma(self) -> float:
        """``eta L / (1 - L)`` with a non-expansive linear step."""
        return self.eta * self.lip_target / (1 - self.lip_target)


@dataclass
class FixedPointResult:
    h_star: np.ndarray
    iterations: np.ndarray | int
    final_residual: np.ndarray | float
    converged: np.ndarray | bool
    step_norms: np.ndarray | None = None

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def le_lipschitz(problem: StandardProblem, eta: float) -> float:
    """Operator norm of ``I - eta A^T C^{-1} A`` (the linear step's Lipschitz constant)."""
    gains = np.abs(1.0 - eta / problem.c_diag)
    return float(max(gains.max(), 1.0 if problem.m_half < problem.n_half else 0.0))


def le_step(problem: StandardProblem, cfg: DeqConfig, h) -> np.ndarray:
    """``h + eta (u - A^T C^{-1} A h)`` for a vector or a batch of rows."""
    if problem.u is None:
        raise ValidationError("problem has no sufficient statistic")
    h = np.asarray(h, dtype=float)
    return h + cfg.eta * (problem.u - h @ problem.data_gram)


def _rel_residual(delta, h):
    dn = np.linalg.norm(delta, axis=-1)
    hn = np.linalg.norm(h, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(hn > 0, dn / np.where(hn > 0, hn, 1.0), np.where(dn > 0, np.inf, 0.0))
    return r, dn


def forward_fixed_point(model, problem: StandardProblem, cfg: DeqConfig, h0=None, *, record=False):
    """Picard iteration ``h <- R(LE(h))`` to relative tolerance.

    Works on a single problem or a batch; in the batched case each row stops
    independently once its relative step falls below ``cfg.tol``.
    Non-convergence is reported through ``converged`` rather than raised.
    """
    u = problem.u
    if u is None:
        raise ValidationError("problem has no sufficient statistic")
    single = u.ndim == 1
    ub = np.atleast_2d(u)
    B = ub.shape[0]
    h = np.zeros_like(ub) if h0 is None else np.array(np.broadcast_to(h0, ub.shape), dtype=float)
    gram = problem.data_gram
    iters = np.zeros(B, dtype=int)
    resid = np.full(B, np.inf)
    done = np.zeros(B, dtype=bool)
    steps = np.full((cfg.max_iter, B), np.nan) if record else None
    for k in range(cfg.max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        ha = h[act]
        x = ha + cfg.eta * (ub[act] - ha @ gram)
        new = np.asarray(model.forward(x), dtype=float).reshape(ha.shape)
        r, dn = _rel_residual(new - ha, new)
        h[act] = new
        iters[act] = k + 1
        resid[act] = r
        if record:
            steps[k, act] = dn
        done[act] = r <= cfg.tol
    if single:
        return FixedPointResult(
            h[0], int(iters[0]), float(resid[0]), bool(done[0]),
            None if steps is None else steps[:, 0],
        )
    return FixedPointResult(h, iters, resid, done, steps)


def jfb_gradient(model, problem: StandardProblem, cfg: DeqConfig, h_star, cotangent, *, converged=True):
    """Jacobian-free parameter gradient: one VJP of the layer at ``h_star``.

    Batches are summed. ``converged`` may be a flag or per-row mask; an
    unconverged input raises a ``RuntimeWarning`` but is still used.
    """
    if not np.all(converged):
        warnings.warn("JFB gradient evaluated at an unconverged iterate", RuntimeWarning, stacklevel=2)
    x = le_step(problem, cfg, h_star)
    grads, _ = model.vjp(x, np.asarray(cotangent, dtype=float), with_input=False)
    return grads


def layer_jacobian(model, problem: StandardProblem, cfg: DeqConfig, h) -> np.ndarray:
    """Dense ``df/dh`` at a single point (reference use, small sizes)."""
    h = np.asarray(h, dtype=float)
    n2 = h.size
    x = le_step(problem, cfg, h)
    eye = np.eye(n2)
    J_R = np.stack([model.jvp(x, e) for e in eye], axis=1)
    return J_R @ (eye - cfg.eta * problem.data_gram)


def implicit_gradient_dense(model, problem: StandardProblem, cfg: DeqConfig, h_star, cotangent):
    """Exact implicit-function gradient through the fixed point by a dense solve.

    Solves ``(I - df/dh)^T w = cotangent`` and returns the parameter VJP with
    ``w``. Intended as a reference at ``2N <= 64``.
    """
    h_star = np.asarray(h_star, dtype=float)
    if h_star.ndim != 1 or h_star.size > 64:
        raise ValidationError("dense implicit gradient is limited to single vectors with 2N <= 64")
    J = layer_jacobian(model, problem, cfg, h_star)
    w = np.linalg.solve((np.eye(h_star.size) - J).T, np.asarray(cotangent, dtype=float))
    return jfb_gradient(model, problem, cfg, h_star, w)


def output_norm_certificate(model, problem: StandardProblem, cfg: DeqConfig, u=None, lip=None):
    """Solve from zero and return ``(gamma * ||u||, ||h*||)`` per row.

    ``lip`` defaults to ``cfg.lip_target``; the linear step's own Lipschitz
    constant is folded in when ``C`` makes it expansive.
    """
    if u is not None:
        problem = problem.with_statistic(u)
    lip2 = cfg.lip_target if lip is None else float(lip)
    L = le_lipschitz(problem, cfg.eta) * lip2
    if L >= 1:
        raise ValidationError(f"layer is not a contraction (L = {L:.4g})")
    gamma = cfg.eta * lip2 / (1 - L)
    res = forward_fixed_point(model, problem, cfg)
    bound = gamma * np.linalg.norm(problem.u, axis=-1)
    actual = np.linalg.norm(res.h_star, axis=-1)
    return bound, actual
