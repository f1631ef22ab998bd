"""Evaluation: analytic oracle labels, non-sensitive rate, sliced Wasserstein distance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pudm.data import NORMAL, Geometry, Kind, membership


def oracle_label(points, kind, geometry: Geometry | None = None) -> np.ndarray:
    """Exact normal (0) / sensitive (1) label from the dataset's region rule."""
    try:
        kind = Kind(kind)
    except ValueError:
        raise ValueError(f"unknown dataset kind {kind!r}") from None
    return membership(points, kind, geometry or Geometry())


def non_sensitive_rate(samples, kind, geometry: Geometry | None = None) -> float:
    """Fraction of samples the oracle labels normal."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValueError("no samples to evaluate")
    return float(np.mean(oracle_label(samples, kind, geometry) == NORMAL))


def wasserstein2_1d(a, b) -> float:
    """Exact 2-Wasserstein distance between two 1-D empirical distributions.

    Integrates the squared difference of the two quantile functions over the
    merged breakpoints ``i/n`` and ``j/m``, so unequal sizes need no resampling.
    """
    a, b = np.sort(np.ravel(a)), np.sort(np.ravel(b))
    n, m = a.size, b.size
    if n == m:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    u = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(u, prepend=0.0)
    mid = u - widths / 2
    ia = np.minimum((mid * n).astype(np.int64), n - 1)
    ib = np.minimum((mid * m).astype(np.int64), m - 1)
    return float(np.sqrt(np.sum(widths * (a[ia] - b[ib]) ** 2)))


def projection_directions(dim: int, n_proj: int, seed: int) -> np.ndarray:
    g = np.random.default_rng(seed).standard_normal((n_proj, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sliced_wasserstein(A, B, n_proj: int = 128, seed: int = 0) -> float:
    """Mean over random unit directions of the 1-D W2 between projected sets."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("both point sets must be non-empty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if n_proj < 1:
        raise ValueError("need at least one projection")
    dirs = projection_directions(A.shape[1], n_proj, seed)
    pa, pb = A @ dirs.T, B @ dirs.T
    return float(np.mean([wasserstein2_1d(pa[:, i], pb[:, i]) for i in range(n_proj)]))


@dataclass
class EvalReport:
    non_sensitive_rate: float
    sw_distance: float
    n_samples: int
    kind: str
    meta: dict = field(default_factory=dict)

    CSV_FIELDS = ("non_sensitive_rate", "sw_distance", "n_samples", "kind")

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS + tuple(sorted(self.meta)))

    def csv_row(self) -> str:
        values = [repr(self.non_sensitive_rate), repr(self.sw_distance), str(self.n_samples), self.kind]
        values += [str(self.meta[k]) for k in sorted(self.meta)]
        return ",".join(values)

    def text(self) -> str:
        lines = [
            f"dataset kind        : {self.kind}",
            f"samples evaluated   : {self.n_samples}",
            f"non-sensitive rate  : {self.non_sensitive_rate:.4f}",
            f"sliced W2 to test   : {self.sw_distance:.4f}",
        ]
        lines += [f"{k:<20}: {self.meta[k]}" for k in sorted(self.meta)]
        return "\n".join(lines) + "\n"


def evaluate(samples, test_normal, kind, geometry: Geometry | None = None, n_proj: int = 128,
             seed: int = 0, meta: dict | None = None) -> EvalReport:
    """Score samples against the held-out normal set.

    The larger of the two sets is subsampled (fixed seed) so that both
    metrics see equally many generated and test points.
    """
    samples = np.asarray(samples, dtype=np.float64)
    test_normal = np.asarray(test_normal, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = min(len(samples), len(test_normal))
    if len(samples) > n:
        samples = samples[np.sort(rng.choice(len(samples), n, replace=False))]
    if len(test_normal) > n:
        test_normal = test_normal[np.sort(rng.choice(len(test_normal), n, replace=False))]
    return EvalReport(
        non_sensitive_rate(samples, kind, geometry),
        sliced_wasserstein(samples, test_normal, n_proj, seed),
        n,
        Kind(kind).value,
        dict(meta or {}),
    )
