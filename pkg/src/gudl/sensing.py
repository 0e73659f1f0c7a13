"""Partial-orthogonal measurement matrices and noisy measurements."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .core import StandardProblem, ValidationError


class Construction(str, enum.Enum):
    SUBSAMPLED_DCT_SIGNS = "subsampled_dct_signs"
    ROW_SUBSAMPLED_ORTHONORMAL = "row_subsampled_orthonormal"
    ROW_SUBSAMPLED_IDENTITY = "row_subsampled_identity"


@dataclass(frozen=True)
class SensingConfig:
    m_half: int
    n_half: int
    construction: Construction = Construction.SUBSAMPLED_DCT_SIGNS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "construction", Construction(self.construction))
        if not 0 < self.m_half <= self.n_half:
            raise ValidationError(f"need 0 < M <= N, got M={self.m_half}, N={self.n_half}")


def incoherence(A) -> float:
    """``zeta = sqrt(2N) * max |A_ij|``."""
    A = np.asarray(A)
    return float(np.sqrt(A.shape[1]) * np.max(np.abs(A)))


def build_measurement(cfg: SensingConfig, rng=None):
    """Return ``(A, zeta)`` with ``A A^T = I_{2M}``.

    The default construction multiplies a random sign diagonal by the
    orthonormal DCT-II and keeps a uniform random subset of rows.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    m2, n2 = 2 * cfg.m_half, 2 * cfg.n_half
    rows = np.sort(rng.choice(n2, size=m2, replace=False))
    if cfg.construction is Construction.SUBSAMPLED_DCT_SIGNS:
        signs = rng.choice([-1.0, 1.0], size=n2)
        basis = dct(np.eye(n2), norm="ortho", axis=0) * signs
    elif cfg.construction is Construction.ROW_SUBSAMPLED_ORTHONORMAL:
        q, r = np.linalg.qr(rng.standard_normal((n2, n2)))
        basis = q * np.sign(np.diag(r))
    else:
        basis = np.eye(n2)
    A = np.ascontiguousarray(basis[rows])
    return A, incoherence(A)


def _c_diag(C, m2):
    if C is None:
        return np.ones(m2)
    C = np.asarray(C, dtype=float)
    if C.ndim == 2:
        C = np.diag(C)
    if C.shape != (m2,):
        raise ValidationError("C must be diagonal of size 2M")
    return C


def measure(A, C, sigma2, h, rng) -> np.ndarray:
    """``y = A h + n`` with ``n ~ N(0, sigma2/2 * C)``; ``h`` may be a batch of rows."""
    A = np.asarray(A, dtype=float)
    h = np.asarray(h, dtype=float)
    c = _c_diag(C, A.shape[0])
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 < 0):
        raise ValidationError("sigma2 must be non-negative")
    clean = h @ A.T
    std = np.sqrt(sigma2 / 2)
    if std.ndim == 1:
        std = std[:, None]
    noise = rng.standard_normal(clean.shape) * np.sqrt(c) * std
    return clean + noise


def sufficient_statistic(A, C, y) -> np.ndarray:
    """``u = A^T C^{-1} y``."""
    A = np.asarray(A, dtype=float)
    c = _c_diag(C, A.shape[0])
    if np.any(c == 0):
        raise ValidationError("C is singular")
    return (np.asarray(y, dtype=float) / c) @ A


def sigma2_for_snr(A, h, snr_db, C=None) -> np.ndarray:
    """Noise scale giving ``||A h||^2 / E||n||^2 = 10^(snr_db/10)`` per row."""
    A = np.asarray(A, dtype=float)
    c = _c_diag(C, A.shape[0])
    signal = np.sum((np.asarray(h, dtype=float) @ A.T) ** 2, axis=-1)
    return 2.0 * signal / (np.sum(c) * 10.0 ** (snr_db / 10.0))


def simulate(A, H, snr_db, rng, C=None) -> StandardProblem:
    """Batched problem for ground-truth rows ``H`` at a fixed per-instance SNR."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    sigma2 = sigma2_for_snr(A, H, snr_db, C)
    y = measure(A, C, sigma2, H, rng)
    return StandardProblem(A, C, sigma2, y=y, validate=False)
