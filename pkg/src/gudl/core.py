"""Standard real-valued measurement model and shared data types.

The measurement model is ``y = A h + n`` with ``A`` a wide partial-orthogonal
matrix (``A A^T = I``) and ``n ~ N(0, sigma2/2 * C)`` for a diagonal ``C``.
Complex systems are mapped to this form by stacking real and imaginary parts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._config import TOL


class ValidationError(ValueError):
    """Raised when an input violates a model invariant."""


class Source(str, enum.Enum):
    SYNTHETIC = "synthetic"
    FAR_FIELD = "far_field"
    NEAR_FIELD = "near_field"
    FILE = "file"


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StandardProblem:
    """Real measurement system ``(A, C, sigma2, y, u)``.

    ``y`` may be a single measurement of length ``2M`` or a batch of shape
    ``(B, 2M)``; ``sigma2`` is then a scalar or a length-``B`` array. ``u`` is
    filled in from ``y`` when not given.
    """

    A: np.ndarray
    c_diag: np.ndarray | None = None
    sigma2: float | np.ndarray = 0.0
    y: np.ndarray | None = None
    u: np.ndarray | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        A = _readonly(self.A)
        if A.ndim != 2:
            raise ValidationError("A must be a matrix")
        m2, n2 = A.shape
        if m2 % 2 or n2 % 2:
            raise ValidationError(f"A must have even dimensions, got {A.shape}")
        if m2 >= n2:
            raise ValidationError(f"need 2M < 2N, got A of shape {A.shape}")
        c = np.ones(m2) if self.c_diag is None else np.asarray(self.c_diag, float)
        if c.ndim == 2:
            if np.any(c - np.diag(np.diag(c))):
                raise ValidationError("C must be diagonal")
            c = np.diag(c)
        if c.shape != (m2,):
            raise ValidationError(f"C diagonal must have length {m2}")
        if np.any(c <= 0):
            raise ValidationError("C must have strictly positive diagonal")
        sigma2 = np.asarray(self.sigma2, dtype=float)
        if np.any(sigma2 < 0):
            raise ValidationError("sigma2 must be non-negative")
        if self.validate:
            gram = A @ A.T
            if np.max(np.abs(gram - np.eye(m2))) > TOL.orthogonality:
                raise ValidationError("A is not partial orthogonal (A A^T != I)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c_diag", _readonly(c))
        object.__setattr__(self, "sigma2", float(sigma2) if sigma2.ndim == 0 else _readonly(sigma2))
        y, u = self.y, self.u
        if y is not None:
            y = _readonly(y)
            if y.shape[-1] != m2:
                raise ValidationError(f"y must have trailing length {m2}")
            if u is None:
                u = (y / c) @ A
        if u is not None:
            u = _readonly(u)
            if u.shape[-1] != n2:
                raise ValidationError(f"u must have trailing length {n2}")
            if y is not None and u.shape[:-1] != y.shape[:-1]:
                raise ValidationError("u and y batch shapes differ")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)

    @property
    def m_half(self) -> int:
        return self.A.shape[0] // 2

    @property
    def n_half(self) -> int:
        return self.A.shape[1] // 2

    @property
    def C(self) -> np.ndarray:
        return np.diag(self.c_diag)

    @property
    def batched(self) -> bool:
        return self.u is not None and self.u.ndim == 2

    @cached_property
    def P(self) -> np.ndarray:
        """Orthogonal projector ``A^T A`` onto the row space of ``A``."""
        P = self.A.T @ self.A
        P.setflags(write=False)
        return P

    @cached_property
    def data_gram(self) -> np.ndarray:
        """``A^T C^{-1} A``."""
        G = (self.A.T / self.c_diag) @ self.A
        G.setflags(write=False)
        return G

    @cached_property
    def unit_c(self) -> bool:
        return bool(np.all(self.c_diag == 1.0))

    def with_measurement(self, y, sigma2=None) -> "StandardProblem":
        """Same system with a new measurement (``A`` is not re-validated)."""
        return StandardProblem(
            self.A,
            self.c_diag,
            self.sigma2 if sigma2 is None else sigma2,
            y=y,
            validate=False,
        )

    def with_statistic(self, u, sigma2=None) -> "StandardProblem":
        return StandardProblem(
            self.A,
            self.c_diag,
            self.sigma2 if sigma2 is None else sigma2,
            u=u,
            validate=False,
        )

    def subset(self, idx) -> "StandardProblem":
        """Select samples from a batched problem."""
        if not self.batched:
            raise ValidationError("subset requires a batched problem")
        s2 = self.sigma2 if np.ndim(self.sigma2) == 0 else self.sigma2[idx]
        return StandardProblem(
            self.A,
            self.c_diag,
            s2,
            y=None if self.y is None else self.y[idx],
            u=self.u[idx],
            validate=False,
        )


@dataclass(frozen=True, eq=False)
class ChannelInstance:
    """Ground-truth real channel ``h`` of length ``2N``, at most ``2k``-sparse."""

    h: np.ndarray
    k: int
    source: Source = Source.SYNTHETIC
    seed: int | None = None

    def __post_init__(self):
        h = _readonly(self.h)
        if h.ndim != 1:
            raise ValidationError("h must be a vector")
        if self.k < 0:
            raise ValidationError("k must be non-negative")
        if np.count_nonzero(h) > 2 * self.k:
            raise ValidationError(
                f"h has {np.count_nonzero(h)} nonzeros, more than 2k = {2 * self.k}"
            )
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True, eq=False)
class ComplexSystem:
    A_c: np.ndarray
    y_c: np.ndarray
    sigma2: float = 0.0


def embed_matrix(A_c) -> np.ndarray:
    A_c = np.asarray(A_c)
    re, im = A_c.real, A_c.imag
    return np.block([[re, -im], [im, re]])


def embed_vector(v_c) -> np.ndarray:
    """Stack ``[Re(v); Im(v)]`` along the last axis."""
    v_c = np.asarray(v_c)
    return np.concatenate([v_c.real, v_c.imag], axis=-1).astype(float)


def unembed_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    half = v.shape[-1] // 2
    return v[..., :half] + 1j * v[..., half:]


def embed_complex(sys: ComplexSystem) -> StandardProblem:
    """Real embedding of a complex partial-unitary system (``C = I``)."""
    A_c = np.atleast_2d(np.asarray(sys.A_c, dtype=complex))
    m = A_c.shape[0]
    err = np.max(np.abs(A_c @ A_c.conj().T - np.eye(m)))
    if err > TOL.unitary_input:
        raise ValidationError(f"A_c is not partial unitary (max deviation {err:.3g})")
    y = embed_vector(np.atleast_1d(np.asarray(sys.y_c, dtype=complex)))
    return StandardProblem(embed_matrix(A_c), None, sys.sigma2, y=y)


def project(problem: StandardProblem, v) -> np.ndarray:
    """Apply the projector ``P = A^T A``; works on a vector or a batch of rows."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != problem.A.shape[1]:
        raise ValidationError(
            f"vector length {v.shape[-1]} does not match 2N = {problem.A.shape[1]}"
        )
    return (v @ problem.A.T) @ problem.A


def _check_pair(h_hat, h):
    h_hat = np.asarray(h_hat, dtype=float)
    h = np.asarray(h, dtype=float)
    if h_hat.shape != h.shape:
        raise ValidationError(f"shape mismatch {h_hat.shape} vs {h.shape}")
    return h_hat, h


def mse(h_hat, h) -> np.ndarray:
    """Squared error ``||h_hat - h||^2`` (per row for batches)."""
    h_hat, h = _check_pair(h_hat, h)
    return np.sum((h_hat - h) ** 2, axis=-1)


def pmse(h_hat, h, problem: StandardProblem) -> np.ndarray:
    """Squared error inside the row space, ``||P (h_hat - h)||^2``."""
    h_hat, h = _check_pair(h_hat, h)
    return np.sum(project(problem, h_hat - h) ** 2, axis=-1)


def rmse(h_hat, h, problem: StandardProblem) -> np.ndarray:
    h_hat, h = _check_pair(h_hat, h)
    e = h_hat - h
    return np.sum((e - project(problem, e)) ** 2, axis=-1)


def nmse(h_hat, h) -> float:
    """``E||h_hat - h||^2 / E||h||^2`` over all rows."""
    h_hat, h = _check_pair(h_hat, h)
    energy = float(np.sum(h**2))
    if energy <= 0:
        raise ValidationError("nmse is undefined for an all-zero ground truth")
    return float(np.sum((h_hat - h) ** 2)) / energy


def to_db(x) -> float:
    return float(10.0 * np.log10(x))


def nmse_db(h_hat, h) -> float:
    return to_db(nmse(h_hat, h))
