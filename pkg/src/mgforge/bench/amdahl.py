"""Least-squares fit of the serial/parallel time model ``t = s + p / n``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateFit


@dataclass(frozen=True)
class AmdahlFit:
    s: float
    p: float
    residual: float
    points: tuple

    def predict(self, n):
        return self.s + self.p / np.asarray(n, dtype=float)

    @property
    def parallel_fraction(self):
        return self.p / (self.s + self.p)


def fit_amdahl(points) -> AmdahlFit:
    """Fit ``(n, t)`` pairs in the basis ``{1, 1/n}``."""
    pts = tuple((float(n), float(t)) for n, t in points)
    n = np.array([q[0] for q in pts])
    t = np.array([q[1] for q in pts])
    if len(np.unique(n)) < 2:
        raise DegenerateFit(f"need at least two distinct rank counts, got {sorted(set(n.tolist()))}")
    if np.any(n <= 0):
        raise DegenerateFit("rank counts must be positive")
    B = np.stack([np.ones_like(n), 1.0 / n], axis=1)
    (s, p), *_ = np.linalg.lstsq(B, t, rcond=None)
    res = float(np.linalg.norm(t - B @ np.array([s, p])))
    return AmdahlFit(float(s), float(p), res, pts)
