"""Ground-truth channel generators and the binary dataset format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ChannelInstance, Source, ValidationError

SPEED_OF_LIGHT = 299_792_458.0


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


def gen_sparse(n2: int, k: int, amp_dist: str = "gaussian", rng=None) -> ChannelInstance:
    """Unit-norm vector of length ``n2`` with exactly ``2k`` nonzeros.

    Positions are uniform without replacement. ``amp_dist`` is ``"gaussian"``
    (standard normal amplitudes) or ``"unit"`` (random signs).
    """
    rng, seed = _as_rng(rng)
    if k < 0 or 2 * k > n2:
        raise ValidationError(f"need 0 <= 2k <= 2N, got k={k}, 2N={n2}")
    h = np.zeros(n2)
    if k == 0:
        return ChannelInstance(h, 0, Source.SYNTHETIC, seed)
    support = rng.choice(n2, size=2 * k, replace=False)
    if amp_dist == "gaussian":
        amps = rng.standard_normal(2 * k)
        while np.any(amps == 0):
            amps = rng.standard_normal(2 * k)
    elif amp_dist == "unit":
        amps = rng.choice([-1.0, 1.0], size=2 * k)
    elif amp_dist == "laplace":
        amps = rng.laplace(size=2 * k)
    else:
        raise ValidationError(f"unknown amplitude distribution {amp_dist!r}")
    h[support] = amps
    h /= np.linalg.norm(h)
    return ChannelInstance(h, k, Source.SYNTHETIC, seed)


# --- near field ---------------------------------------------------------


@dataclass(frozen=True)
class NearFieldParams:
    """Uniform linear array and polar-grid configuration.

    ``d`` defaults to half a wavelength. Distances are in meters.
    """

    N: int = 256
    L: int = 3
    lambda_c: float = SPEED_OF_LIGHT / 28e9
    d: float | None = None
    R: int = 4
    r_min: float = 0.01
    r_max: float = 100.0

    def __post_init__(self):
        if self.d is None:
            object.__setattr__(self, "d", self.lambda_c / 2)
        if self.N < 1 or self.R < 1:
            raise ValidationError("N and R must be positive")
        if self.L < 1:
            raise ValidationError("L must be at least 1")
        if not (0 < self.r_min < self.r_max or 0 < self.r_min == self.r_max):
            raise ValidationError("need 0 < r_min <= r_max")
        if self.lambda_c <= 0 or self.d <= 0:
            raise ValidationError("wavelength and spacing must be positive")

    def cosine_grid(self) -> np.ndarray:
        n = np.arange(self.N)
        return (2 * n - self.N + 1) / self.N

    def distance_grid(self) -> np.ndarray:
        s = np.arange(1, self.R + 1)
        r = self.N**2 * self.d**2 / (2 * self.lambda_c * s)
        return np.clip(r, self.r_min, self.r_max)


def _steering_from_cos(cos_theta, r, p: NearFieldParams) -> np.ndarray:
    offs = np.arange(p.N) * p.d
    r_n = np.sqrt(r**2 + offs**2 - 2 * r * offs * cos_theta)
    # r_n - r computed in a cancellation-free form for large r
    delta = (offs**2 - 2 * r * offs * cos_theta) / (r_n + r)
    return np.exp(-2j * np.pi / p.lambda_c * delta) / np.sqrt(p.N)


def nearfield_steering(theta: float, r: float, p: NearFieldParams) -> np.ndarray:
    """Spherical-wave array response for a source at angle ``theta``, distance ``r``."""
    if r <= 0:
        raise ValidationError("distance must be positive")
    return _steering_from_cos(np.cos(theta), r, p)


def farfield_steering(cos_theta: float, p: NearFieldParams) -> np.ndarray:
    """Planar-wave limit of :func:`nearfield_steering`."""
    n = np.arange(p.N)
    return np.exp(2j * np.pi / p.lambda_c * n * p.d * cos_theta) / np.sqrt(p.N)


def build_polar_dictionary(p: NearFieldParams) -> np.ndarray:
    """``N x (N R)`` polar-domain dictionary, columns ordered angle-major."""
    cols = [
        _steering_from_cos(c, r, p)
        for c in p.cosine_grid()
        for r in p.distance_grid()
    ]
    return np.stack(cols, axis=1)


def gen_nearfield_channel(p: NearFieldParams, rng=None, *, gains=None, on_grid=True):
    """Spherical-wave channel with ``L`` on-grid paths.

    Returns ``(h_complex, h_polar)`` with ``A_nf @ h_polar == h_complex`` and
    ``||h_complex|| = 1``.
    """
    if not on_grid:
        raise ValidationError("off-grid path generation is not supported")
    rng, _ = _as_rng(rng)
    n_atoms = p.N * p.R
    if p.L > n_atoms:
        raise ValidationError("more paths than dictionary atoms")
    idx = rng.choice(n_atoms, size=p.L, replace=False)
    if gains is None:
        gains = (rng.standard_normal(p.L) + 1j * rng.standard_normal(p.L)) / np.sqrt(2)
    gains = np.asarray(gains, dtype=complex)
    if gains.shape != (p.L,):
        raise ValidationError(f"expected {p.L} gains")
    cos_grid, r_grid = p.cosine_grid(), p.distance_grid()
    h = np.zeros(p.N, dtype=complex)
    for a, j in zip(gains, idx):
        h += a * _steering_from_cos(cos_grid[j // p.R], r_grid[j % p.R], p)
    scale = np.linalg.norm(h)
    if scale == 0:
        raise ValidationError("paths cancelled to a zero channel")
    sparse = np.zeros(n_atoms, dtype=complex)
    np.add.at(sparse, idx, gains / scale)
    return h / scale, sparse


def dft_matrix(N: int) -> np.ndarray:
    """Unitary DFT matrix whose columns are far-field steering vectors."""
    n = np.arange(N)
    return np.exp(2j * np.pi * np.outer(n, n) / N) / np.sqrt(N)


def gen_farfield_channel(N: int, L: int, rng=None):
    """Angular-sparse far-field channel ``h = F s``; returns ``(h, s)``."""
    rng, _ = _as_rng(rng)
    if L > N or L < 1:
        raise ValidationError(f"need 1 <= L <= N, got L={L}, N={N}")
    s = np.zeros(N, dtype=complex)
    idx = rng.choice(N, size=L, replace=False)
    s[idx] = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / np.sqrt(2)
    s /= np.linalg.norm(s)
    return dft_matrix(N) @ s, s


# --- datasets -----------------------------------------------------------

MAGIC = b"GUDL"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class DatasetFormatError(ValidationError):
    """Malformed dataset file."""


@dataclass
class Dataset:
    samples: list[ChannelInstance]
    n_half: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if s.h.shape != (2 * self.n_half,):
                raise ValidationError("all samples must have length 2N")

    def __len__(self):
        return len(self.samples)

    def matrix(self) -> np.ndarray:
        """Samples stacked as rows, shape ``(count, 2N)``."""
        if not self.samples:
            return np.zeros((0, 2 * self.n_half))
        return np.stack([s.h for s in self.samples])


def generate_dataset(count: int, n2: int, k: int, seed: int, amp_dist="gaussian") -> Dataset:
    samples = []
    for i in range(count):
        inst = gen_sparse(n2, k, amp_dist, sample_rng(seed, i))
        samples.append(ChannelInstance(inst.h, k, Source.SYNTHETIC, seed))
    meta = {"count": count, "n2": n2, "k": k, "seed": seed, "amp_dist": amp_dist}
    return Dataset(samples, n2 // 2, meta)


def save_dataset(path, ds: Dataset) -> None:
    n2 = 2 * ds.n_half
    values = ds.matrix().astype("<f8", copy=False)
    ks = np.array([s.k for s in ds.samples], dtype="<u4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(ds), n2))
        f.write(values.tobytes())
        f.write(ks.tobytes())


def load_dataset(path, expected_n2: int | None = None) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetFormatError("file too short for header")
    magic, version, count, n2 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    if n2 == 0 or n2 % 2:
        raise DatasetFormatError(f"invalid vector length {n2}")
    if expected_n2 is not None and n2 != expected_n2:
        raise DatasetFormatError(f"vector length {n2} != expected {expected_n2}")
    need = _HEADER.size + count * n2 * 8 + count * 4
    if len(data) != need:
        raise DatasetFormatError(f"expected {need} bytes, file has {len(data)}")
    off = _HEADER.size
    values = np.frombuffer(data, dtype="<f8", count=count * n2, offset=off).reshape(count, n2)
    ks = np.frombuffer(data, dtype="<u4", count=count, offset=off + count * n2 * 8)
    try:
        samples = [
            ChannelInstance(values[i].astype(float), int(ks[i]), Source.FILE)
            for i in range(count)
        ]
    except ValidationError as exc:
        raise DatasetFormatError(str(exc)) from exc
    return Dataset(samples, n2 // 2, {"path": str(path)})
