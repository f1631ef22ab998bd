"""Ancestral DDPM and deterministic DDIM sampling, with classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from pudm.diffusion import NoiseSchedule
from pudm.errors import NumericError
from pudm.tensor_nn import DenoiserParams, mlp_forward

EpsFn = Callable[[np.ndarray, int], np.ndarray]


class Scheduler(str, Enum):
    DDPM = "ddpm"
    DDIM = "ddim"


@dataclass(frozen=True)
class SampleRunSpec:
    n_samples: int
    scheduler: Scheduler = Scheduler.DDPM
    ddim_steps: int = 50
    guidance_weight: float = 0.0
    seed: int = 0
    cond: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "scheduler", Scheduler(self.scheduler))
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be at least 1")
        if self.guidance_weight < 0:
            raise ValueError("guidance weight must be non-negative")


def guided_predict(params: DenoiserParams, x_t, t, cond, w: float) -> np.ndarray:
    """``(1 + w) * eps(x, t, c) - w * eps(x, t, null)``."""
    if params.cond_table is None:
        raise ValueError("guidance needs a conditional model")
    if cond is None:
        raise ValueError("guidance needs a condition")
    eps_c, _ = mlp_forward(params, x_t, t, cond)
    if w == 0:
        return eps_c
    eps_u, _ = mlp_forward(params, x_t, t, None)
    return (1.0 + w) * eps_c - w * eps_u


def as_eps_fn(model, cond: int | None = None, w: float = 0.0) -> tuple[EpsFn, int | None]:
    """Wrap parameters (or pass through a callable) as ``eps(x_t, t)``.

    Returns the function and the data dimension if it is known.
    """
    if not isinstance(model, DenoiserParams):
        return model, getattr(model, "data_dim", None)
    if model.cond_table is not None and cond is not None:
        return (lambda x, t: guided_predict(model, x, t, cond, w)), model.data_dim
    if cond is not None:
        raise ValueError("condition given to an unconditional model")
    return (lambda x, t: mlp_forward(model, x, t)[0]), model.data_dim


def _start(model, spec: SampleRunSpec, rng, dim):
    eps_fn, d = as_eps_fn(model, spec.cond, spec.guidance_weight)
    d = d if dim is None else dim
    if d is None:
        raise ValueError("data dimension unknown; pass dim=")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    return eps_fn, rng, rng.standard_normal((spec.n_samples, d))


def _check(x, t):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite sample state at t={t}", t)


def ddpm_sample(model, sched: NoiseSchedule, spec: SampleRunSpec, rng=None, dim=None) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) with reverse variance beta_t."""
    eps_fn, rng, x = _start(model, spec, rng, dim)
    for t in range(sched.T, 0, -1):
        a, abar = sched.alphas[t - 1], sched.alpha_bars[t - 1]
        eps = eps_fn(x, t)
        x = (x - (1.0 - a) / np.sqrt(1.0 - abar) * eps) / np.sqrt(a)
        if t > 1:
            x = x + np.sqrt(1.0 - a) * rng.standard_normal(x.shape)
        _check(x, t)
    return x


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly strided steps from T down to 1, both endpoints included."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"ddim steps must lie in [1, {T}], got {n_steps}")
    return np.unique(np.round(np.linspace(T, 1, n_steps)).astype(np.int64))[::-1]


def predict_x0(x_t, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward marginal: the clean point implied by a noise estimate."""
    abar = sched.alpha_bars[t - 1]
    return (np.asarray(x_t) - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def ddim_sample(model, sched: NoiseSchedule, spec: SampleRunSpec, rng=None, dim=None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over a strided subset of steps."""
    eps_fn, _, x = _start(model, spec, rng, dim)
    steps = ddim_timesteps(sched.T, spec.ddim_steps)
    for i, t in enumerate(steps):
        abar_next = sched.alpha_bars[steps[i + 1] - 1] if i + 1 < len(steps) else 1.0
        eps = eps_fn(x, int(t))
        x0_hat = predict_x0(x, int(t), eps, sched)
        x = np.sqrt(abar_next) * x0_hat + np.sqrt(1.0 - abar_next) * eps
        _check(x, int(t))
    return x


def sample(model, sched: NoiseSchedule, spec: SampleRunSpec, rng=None, dim=None) -> np.ndarray:
    if spec.scheduler is Scheduler.DDPM:
        return ddpm_sample(model, sched, spec, rng, dim)
    return ddim_sample(model, sched, spec, rng, dim)
