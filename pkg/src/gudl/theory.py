"""Computable quantities behind the oracle inequality.

Covers the l1/l2 sparsity measure, the sparse growth function (numeric bound,
closed form and a structured brute-force oracle), exact small-instance RIP
constants, the sparsity bounds for the two estimators, the oracle-gap bound
and the MSE sandwich check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import comb

from .core import StandardProblem, ValidationError

_X_OFFSET = 1e-9


def l_half(alpha) -> float:
    """``||alpha||_1 / ||alpha||_2``."""
    a = np.asarray(alpha, dtype=float)
    n2 = np.linalg.norm(a)
    if n2 == 0:
        raise ValidationError("l1/l2 ratio of the zero vector is undefined")
    return float(np.sum(np.abs(a)) / n2)


def best_k_support(alpha, kappa: int) -> np.ndarray:
    """Indices of the ``kappa`` largest magnitudes, ties to the lowest index."""
    a = np.abs(np.asarray(alpha, dtype=float))
    order = np.argsort(-a, kind="stable")
    return order[: max(int(kappa), 0)]


def sparse_residual_ratio(alpha, kappa: int) -> float:
    """Energy fraction outside the best ``kappa``-term approximation."""
    a = np.asarray(alpha, dtype=float)
    total = float(np.sum(a**2))
    if total == 0:
        raise ValidationError("residual ratio of the zero vector is undefined")
    keep = best_k_support(a, kappa)
    return float((total - np.sum(a[keep] ** 2)) / total)


# --- sparse growth function -----------------------------------------------


@dataclass(frozen=True)
class SgfEvaluation:
    kappa: int
    n2: int
    x_opt: float
    rho_tilde: float
    t_kappa: float
    g_numeric: float
    g_closed: float


def _check_kappa(kappa, n2):
    if not (1 <= kappa <= n2):
        raise ValidationError(f"need 1 <= kappa <= 2N, got kappa={kappa}, 2N={n2}")


def rho_tilde(kappa, x):
    """Optimal tail level for a tail of (continuous) length ``x``."""
    x = np.asarray(x, dtype=float)
    x = np.where(np.abs(x - 1) < _X_OFFSET, 1 + _X_OFFSET, x)
    return (np.sqrt(x * kappa / (x + kappa - 1)) - 1) / (x - 1)


def sgf_objective(kappa, x):
    r2 = rho_tilde(kappa, x) ** 2
    return np.asarray(x) * r2 / (1 + (np.asarray(x) + kappa - 1) * r2)


def _sgf_search(kappa, n2, grid):
    hi = n2 - kappa
    xs = np.geomspace(_X_OFFSET, hi, grid)
    vals = sgf_objective(kappa, xs)
    i = int(np.argmax(vals))
    lo_b, hi_b = xs[max(i - 1, 0)], xs[min(i + 1, grid - 1)]
    best_x, best = xs[i], float(vals[i])
    if hi_b > lo_b:
        r = minimize_scalar(lambda x: -float(sgf_objective(kappa, x)), bounds=(lo_b, hi_b),
                            method="bounded", options={"xatol": 1e-12})
        if -r.fun > best:
            best_x, best = float(r.x), float(-r.fun)
    return best_x, best


def sgf_bound_numeric(kappa: int, n2: int, grid: int = 10_000) -> float:
    """Supremum of the tail-energy bound over tail lengths ``x in (0, 2N - kappa)``.

    Log-spaced grid search followed by bounded golden-section refinement; the
    upper end of the open interval is included as a limit point.
    """
    _check_kappa(kappa, n2)
    if kappa == 1 or kappa == n2:
        return 0.0
    return _sgf_search(kappa, n2, grid)[1]


def cubic_root_t(kappa: float) -> float:
    """Unclipped trigonometric root ``t`` (reciprocal of the cubic's largest root)."""
    if kappa < 2:
        raise ValidationError("the cubic root is defined for kappa >= 2")
    return math.sqrt(6) / (4 * math.cos(math.acos(3 * math.sqrt(6) / (8 * math.sqrt(kappa))) / 3))


def cubic_residual(kappa: float) -> float:
    """Residual of ``s^3 - 2 s - 1/sqrt(kappa) = 0`` at ``s = 1 / t``."""
    s = 1.0 / cubic_root_t(kappa)
    return float(s**3 - 2 * s - 1 / math.sqrt(kappa))


def sgf_closed_form(kappa: int, n2: int) -> float:
    _check_kappa(kappa, n2)
    if kappa == 1:
        return 0.0
    t = min(cubic_root_t(kappa), math.sqrt((n2 - kappa) / (n2 - 1)))
    return (kappa - 1) * t**2 * (1 - t**2) / (math.sqrt(kappa) + t) ** 2


def sgf_evaluate(kappa: int, n2: int, grid: int = 10_000) -> SgfEvaluation:
    _check_kappa(kappa, n2)
    if kappa == 1 or kappa == n2:
        t = cubic_root_t(kappa) if kappa >= 2 else float("nan")
        return SgfEvaluation(kappa, n2, float("nan"), 0.0, t, 0.0, sgf_closed_form(kappa, n2))
    x, g = _sgf_search(kappa, n2, grid)
    return SgfEvaluation(kappa, n2, x, float(rho_tilde(kappa, x)), cubic_root_t(kappa), g,
                         sgf_closed_form(kappa, n2))


def sgf_brute_force(kappa: int, n2: int, n_rho: int = 512, n_lambda: int = 64) -> float:
    """Largest residual ratio over the structured extremal family.

    The family is ``(1, rho, ..., rho | rho x p, lam * rho, 0, ...)`` with
    ``kappa - 1`` head entries at level ``rho``; only members whose l1/l2 ratio
    is at most ``sqrt(kappa)`` count. Every member is a real vector, so the
    result never exceeds the true supremum.
    """
    _check_kappa(kappa, n2)
    if kappa == 1 or kappa == n2:
        return 0.0
    rho = np.geomspace(1e-4, 1.0, n_rho)[:, None, None]
    lam = np.linspace(0.0, 1.0, n_lambda)[None, :, None]
    p = np.arange(0, n2 - kappa)[None, None, :]
    head = 1 + (kappa - 1) * rho**2
    tail = (p + lam**2) * rho**2
    l1 = 1 + (kappa - 1 + p + lam) * rho
    feasible = l1 <= math.sqrt(kappa) * np.sqrt(head + tail) * (1 + 1e-12)
    ratio = np.where(feasible, tail / (head + tail), 0.0)
    return float(ratio.max())


# --- restricted isometry --------------------------------------------------


def rip_constant_bruteforce(A_scaled, k: int, max_supports: int = 1_000_000) -> float:
    """Exact order-``k`` restricted isometry constant by enumerating supports."""
    A = np.asarray(A_scaled, dtype=float)
    n = A.shape[1]
    if k <= 0:
        return 0.0
    if k > n:
        raise ValidationError("order exceeds the number of columns")
    if comb(n, k, exact=True) > max_supports:
        raise ValidationError(
            f"C({n}, {k}) supports exceed {max_supports}; supply the constant instead"
        )
    G = A.T @ A
    worst = 0.0
    chunk = []
    eye = np.eye(k)

    def flush():
        nonlocal worst
        idx = np.array(chunk)
        sub = G[idx[:, :, None], idx[:, None, :]]
        ev = np.linalg.eigvalsh(sub - eye)
        worst = max(worst, float(np.max(np.abs(ev))))
        chunk.clear()

    for S in combinations(range(n), k):
        chunk.append(S)
        if len(chunk) == 4096:
            flush()
    if chunk:
        flush()
    return worst


# --- bound-level quantities -----------------------------------------------


@dataclass
class SparsityBounds:
    s_G: float
    s_ora: float
    s: int
    vacuous: bool
    notes: list[str] = field(default_factory=list)


def sparsity_bounds(beta, omega, xi, gamma, delta_2k, delta_2, k, n_half, c_inv_norm=1.0,
                    *, variant="split", delta=None) -> SparsityBounds:
    """l1/l2 bounds ``s_G`` (unsupervised fixed point) and ``s_ora`` (supervised).

    ``variant="split"`` uses separate ``delta_2k`` and ``delta_2`` in the
    bracket; ``variant="simplified"`` uses a single ``delta`` for both
    (``delta`` defaults to ``delta_2k``).
    """
    n2, k2 = 2 * n_half, 2 * k
    notes = []
    vac = False
    if not (0 <= beta < 1 and 0 <= omega < 1 and 0 <= delta_2k < 1):
        raise ValidationError("need beta, omega, delta_2k in [0, 1)")
    if variant == "split":
        bracket = math.sqrt(k2) * delta_2k + (n2 - k2) * k2 * delta_2
    elif variant == "simplified":
        d = delta_2k if delta is None else delta
        bracket = (math.sqrt(k2) + (n2 - k2) * k2) * d
    else:
        raise ValidationError(f"unknown variant {variant!r}")
    first = (1 + bracket) / ((1 - beta) * (1 - delta_2k)) * math.sqrt(k2)
    denom = (gamma * c_inv_norm * (beta + xi)) ** 2
    arg = 1 - (1 - beta) ** 2 / denom if denom > 0 else -math.inf
    if not 0 <= arg <= 1:
        notes.append(f"square-root argument {arg:.4g} outside [0, 1]")
        vac = True
        arg = min(max(arg, 0.0), 1.0)
    s_G = first + math.sqrt(n2) * (beta / (1 - beta) + math.sqrt(arg))
    s_ora = math.sqrt(k2) / (1 - omega) + math.sqrt(n2 - k2) * omega / (1 - omega)
    s = max(math.ceil(s_G), math.ceil(s_ora))
    if s > n2:
        notes.append(f"s = {s} exceeds 2N = {n2}; clipped")
        vac = True
        s = n2
    return SparsityBounds(min(s_G, n2), min(s_ora, n2), s, vac, notes)


@dataclass
class TheoryReport:
    beta: float
    omega: float
    xi: float
    gamma: float
    delta: float
    delta_2k: float
    delta_2: float
    k: int
    n_half: int
    m_half: int
    c_inv_norm: float = 1.0
    zeta: float = float("nan")
    delta_2T: float = float("nan")
    variant: str = "split"
    s_G: float = float("nan")
    s_ora: float = float("nan")
    s: int = 0
    T: int = 0
    rho: float = float("nan")
    eta_samp: float = float("nan")
    epsilon: float = float("nan")
    epsilon_1: float = float("nan")
    epsilon_2: float = float("nan")
    g_s: float = float("nan")
    gap_bound: float = float("nan")
    valid: bool = True
    notes: list[str] = field(default_factory=list)

    def as_text(self) -> str:
        """Flat ``key=value`` lines."""
        lines = []
        for key, val in asdict(self).items():
            if key == "notes":
                val = "; ".join(val)
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"


def oracle_gap_bound(report: TheoryReport) -> TheoryReport:
    """Fill in sparsity levels, constants and the gap ``(e1 b^2 + e2 g^2 g(s)) d (1 + d)``.

    Out-of-regime inputs set ``valid = False`` with a note instead of raising.
    """
    r = report
    sb = sparsity_bounds(r.beta, r.omega, r.xi, r.gamma, r.delta_2k, r.delta_2, r.k, r.n_half,
                         r.c_inv_norm, variant=r.variant, delta=r.delta)
    n2 = 2 * r.n_half
    r.notes = list(sb.notes)
    r.valid = not sb.vacuous
    r.s_G, r.s_ora, r.s = sb.s_G, sb.s_ora, sb.s
    r.T = r.s + 2 * r.k
    if r.T > n2:
        r.notes.append(f"T = {r.T} exceeds 2N")
        r.valid = False
    r.rho = r.T / n2
    r.eta_samp = r.m_half / r.n_half
    r.epsilon = r.delta * (1 + math.sqrt(n2 / r.T))
    a = 1 + 1 / math.sqrt(r.rho)
    denom = 1 - a**2 * r.delta**2
    if denom <= 0:
        r.notes.append("delta (1 + 1/sqrt(rho)) >= 1: constants undefined")
        r.valid = False
        r.epsilon_1 = r.epsilon_2 = r.gap_bound = float("inf")
        return r
    r.epsilon_1 = 2 * a / denom
    r.epsilon_2 = 4 * r.eta_samp * (1 - r.rho) / r.rho * (1 + r.xi**2) / denom
    r.g_s = sgf_bound_numeric(min(r.s, n2), n2) if r.s >= 1 else 0.0
    r.gap_bound = (r.epsilon_1 * r.beta**2 + r.epsilon_2 * r.gamma**2 * r.g_s) * r.delta * (1 + r.delta)
    return r


def estimate_assumption_constants(h_star_G, h_star_ora, h, problem: StandardProblem, noise=None,
                                  percentile: float = 99.0):
    """Empirical ``(beta, omega, xi)`` over a batch.

    ``beta`` and ``omega`` are batch means of the per-instance relative errors
    (projected for the unsupervised estimate); ``xi`` is a high percentile of
    ``||n|| / ||A h||``. ``noise`` defaults to ``y - A h``.
    """
    H = np.atleast_2d(np.asarray(h, dtype=float))
    G = np.atleast_2d(np.asarray(h_star_G, dtype=float))
    O = np.atleast_2d(np.asarray(h_star_ora, dtype=float))
    A = problem.A
    Ph = (H @ A.T) @ A
    PG = (G @ A.T) @ A
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.linalg.norm(PG - Ph, axis=1) / np.linalg.norm(Ph, axis=1)
        omega = np.linalg.norm(O - H, axis=1) / np.linalg.norm(H, axis=1)
    if noise is None:
        if problem.y is None:
            raise ValidationError("need noise draws or measurements to estimate xi")
        noise = np.atleast_2d(problem.y) - H @ A.T
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.linalg.norm(noise, axis=1) / np.linalg.norm(H @ A.T, axis=1)
    return float(np.nanmean(beta)), float(np.nanmean(omega)), float(np.nanpercentile(ratio, percentile))


def mse_sandwich_check(h_star, h, problem: StandardProblem, delta: float, T: int):
    """Evaluate ``(1 - eps) mse <= (N/M) pmse + delta (2N - T)/T ||h*_{T^c}||^2``.

    The kept set is ``supp(h)`` together with the ``T - |supp(h)|`` largest
    entries of ``h*`` outside it. Works per row; returns ``(lhs, rhs, holds)``.
    """
    Hs = np.atleast_2d(np.asarray(h_star, dtype=float))
    H = np.atleast_2d(np.asarray(h, dtype=float))
    n2 = H.shape[1]
    if not 1 <= T <= n2:
        raise ValidationError("need 1 <= T <= 2N")
    eps = delta * (1 + math.sqrt(n2 / T))
    e = Hs - H
    mse = np.sum(e**2, axis=1)
    pmse = np.sum(((e @ problem.A.T) @ problem.A) ** 2, axis=1)
    tail = np.empty(len(H))
    for i, (hs, hv) in enumerate(zip(Hs, H)):
        supp = np.flatnonzero(hv)
        if supp.size > T:
            raise ValidationError("T is smaller than the support of h")
        mags = np.abs(hs).copy()
        mags[supp] = np.inf
        keep = np.argsort(-mags, kind="stable")[:T]
        rest = np.ones(n2, dtype=bool)
        rest[keep] = False
        tail[i] = np.sum(hs[rest] ** 2)
    ratio = problem.n_half / problem.m_half
    lhs = (1 - eps) * mse
    rhs = ratio * pmse + delta * (n2 - T) / T * tail
    holds = lhs <= rhs * (1 + 1e-12) + 1e-15
    if np.ndim(h) == 1:
        return float(lhs[0]), float(rhs[0]), bool(holds[0])
    return lhs, rhs, holds
