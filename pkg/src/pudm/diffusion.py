"""Forward diffusion, the per-example noise-prediction loss and its BCE wrappers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pudm.errors import NumericError
from pudm.tensor_nn import DenoiserParams, ForwardCache, mlp_backward, mlp_forward

# Floor for the loss inside the sensitive-label log, and cap on |d bce / d loss|.
ELL_MIN = 1e-9
MULT_CLAMP = 1e4


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients; ``alphas[t - 1]`` is alpha_t for ``t`` in ``1..T``."""

    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_alphas(cls, alphas) -> "NoiseSchedule":
        a = np.asarray(alphas, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("alphas must be a non-empty vector")
        if np.any((a <= 0) | (a >= 1)):
            raise ValueError("every alpha_t must lie in (0, 1)")
        return cls(a, np.cumprod(a))

    @property
    def T(self) -> int:
        return self.alphas.size

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def check_steps(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any((t < 1) | (t > self.T)):
            raise ValueError(f"diffusion step outside [1, {self.T}]")
        return t


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """DDPM linear schedule: beta_t rises linearly, alpha_t = 1 - beta_t."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_alphas(1.0 - np.linspace(beta_start, beta_end, T))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form draw of ``x_t`` given ``x_0``: sqrt(abar) x0 + sqrt(1 - abar) eps."""
    t = sched.check_steps(t)
    abar = sched.alpha_bars[t - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if abar.ndim and x0.ndim > 1:
        abar = abar[..., None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=np.float64)


@dataclass
class LossSample:
    """Monte-Carlo estimate of the noise-prediction loss for a batch.

    ``ell_hat[i]`` averages ``K`` draws of the mean-over-dimensions squared
    error; ``t`` has shape ``(n, K)`` and ``eps``/``eps_hat`` ``(n, K, d)``.
    """

    ell_hat: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    eps_hat: np.ndarray
    cache: ForwardCache


def draw_noise(rng: np.random.Generator, n: int, d: int, T: int, k: int = 1):
    """One ``(t, eps)`` pair per example and draw; the order is fixed for replay."""
    t = rng.integers(1, T + 1, size=(n, k))
    eps = rng.standard_normal((n, k, d))
    return t, eps


COND_DROPOUT = 0.1


def drop_condition(cond, n_classes: int, rng: np.random.Generator, p: float = COND_DROPOUT) -> np.ndarray:
    """Replace each class id by the null id ``n_classes`` with probability ``p``.

    Training a conditional model on these ids also trains its unconditional
    branch, which classifier-free guidance needs at sampling time.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    cond = np.asarray(cond, dtype=np.int64)
    return np.where(rng.random(cond.shape) < p, n_classes, cond)


def loss_ell(
    params: DenoiserParams,
    x0,
    rng: np.random.Generator | None,
    sched: NoiseSchedule,
    cond=None,
    k: int = 1,
    t=None,
    eps=None,
) -> LossSample:
    """Estimate the loss for every row of ``x0``.

    Draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` from ``rng`` unless frozen
    draws ``t`` (shape ``(n, K)``) and ``eps`` (``(n, K, d)``) are given.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not np.all(np.isfinite(x0)):
        raise NumericError("non-finite training point")
    n, d = x0.shape
    if t is None:
        if k < 1:
            raise ValueError("need at least one Monte-Carlo draw")
        t, eps = draw_noise(rng, n, d, sched.T, k)
    t = np.asarray(t).reshape(n, -1)
    k = t.shape[1]
    eps = np.asarray(eps, dtype=np.float64).reshape(n, k, d)

    x_t = q_sample(np.repeat(x0, k, axis=0), t.ravel(), eps.reshape(n * k, d), sched)
    rows_cond = None if cond is None else np.repeat(np.broadcast_to(cond, (n,)), k)
    eps_hat, cache = mlp_forward(params, x_t, t.ravel(), rows_cond)
    eps_hat = eps_hat.reshape(n, k, d)
    ell = np.mean((eps - eps_hat) ** 2, axis=(1, 2))
    if not np.all(np.isfinite(ell)):
        raise NumericError("non-finite loss")
    return LossSample(ell, t, eps, eps_hat, cache)


def ell_backward(params: DenoiserParams, sample: LossSample, dloss_dell) -> DenoiserParams:
    """Gradient of ``sum_i dloss_dell[i] * ell_hat[i]`` through the network."""
    n, k, d = sample.eps.shape
    coef = np.broadcast_to(np.asarray(dloss_dell, dtype=np.float64), (n,))
    g = (-2.0 / (k * d)) * coef[:, None, None] * (sample.eps - sample.eps_hat)
    return mlp_backward(params, sample.cache, g.reshape(n * k, d))


def bce_loss(ell, y):
    """Cross-entropy of the label under p(y=0|x) = exp(-ell).

    ``y=0`` gives ``ell``; ``y=1`` gives ``-log(1 - exp(-ell))`` with ell
    floored at ``ELL_MIN``.
    """
    ell = np.asarray(ell, dtype=np.float64)
    if np.any(ell < 0):
        raise ValueError("loss values must be non-negative")
    y = np.asarray(y)
    pos = -np.log(-np.expm1(-np.maximum(ell, ELL_MIN)))
    out = np.where(y == 1, pos, ell)
    return out if out.ndim else float(out)


def bce_grad(ell, y):
    """d bce / d ell: 1 for y=0, ``-1/expm1(ell)`` (magnitude capped) for y=1."""
    ell = np.asarray(ell, dtype=np.float64)
    y = np.asarray(y)
    pos = np.maximum(-1.0 / np.expm1(np.maximum(ell, ELL_MIN)), -MULT_CLAMP)
    out = np.where(y == 1, pos, 1.0)
    return out if out.ndim else float(out)


def bce_backward(params: DenoiserParams, sample: LossSample, y, weights=None) -> DenoiserParams:
    """Gradient of ``sum_i weights[i] * bce(ell_hat[i], y[i])`` (weights default 1)."""
    mult = bce_grad(sample.ell_hat, y)
    if weights is not None:
        mult = mult * weights
    return ell_backward(params, sample, mult)
