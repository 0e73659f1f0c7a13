"""Numerical tolerances shared across the package."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    orthogonality: float = 1e-10
    unitary_input: float = 1e-8
    statistic: float = 1e-12
    zero_norm: float = 1e-300


TOL = Tolerances()
