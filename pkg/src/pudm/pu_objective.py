"""Training objectives: unsupervised, supervised, PN and non-negative PU.

Every objective returns an :class:`ObjectiveResult` holding the scalar value
and the exact parameter gradient of the quantity that is actually optimized.
Noise draws come from ``rng``, either a single generator (unlabeled batch is
drawn first) or a pair ``(rng_u, rng_s)`` so that the unlabeled stream does not
depend on whether a sensitive batch is present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from pudm.diffusion import LossSample, NoiseSchedule, bce_grad, bce_loss, ell_backward, loss_ell
from pudm.errors import NumericError
from pudm.tensor_nn import AdamWState, DenoiserParams, adamw_step


class Correction(str, Enum):
    MAX = "max"
    ABS = "abs"


@dataclass(frozen=True)
class PuConfig:
    beta: float = 0.1
    correction: Correction = Correction.MAX
    batch_u: int = 128
    batch_s: int = 32
    mc_draws: int = 1

    def __post_init__(self):
        object.__setattr__(self, "correction", Correction(self.correction))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.batch_u <= 0 or self.batch_s <= 0:
            raise ValueError("batch sizes must be positive")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be at least 1")


@dataclass
class PuTerms:
    L_S_plus: float
    L_U_minus: float
    L_S_minus: float
    u: LossSample
    s: LossSample

    def deficit(self, beta: float) -> float:
        return self.L_U_minus - beta * self.L_S_minus


@dataclass
class ObjectiveResult:
    value: float
    grads: DenoiserParams
    terms: dict = field(default_factory=dict)
    branch: str = ""


def _split(rng):
    if isinstance(rng, tuple):
        return rng
    return rng, rng


def _require(batch, name):
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError(f"{name} batch is empty")
    return batch


def _add(a: DenoiserParams, b: DenoiserParams) -> DenoiserParams:
    out = a.copy()
    for x, y in zip(out.arrays(), b.arrays()):
        x += y
    return out


def unsupervised_objective(batch_u, params, rng, sched: NoiseSchedule, k: int = 1, cond=None, draws=None):
    """Mean noise-prediction loss over the unlabeled batch."""
    batch_u = _require(batch_u, "unlabeled")
    rng_u, _ = _split(rng) if rng is not None else (None, None)
    t, eps = draws if draws is not None else (None, None)
    u = loss_ell(params, batch_u, rng_u, sched, cond, k, t, eps)
    n = batch_u.shape[0]
    value = float(np.mean(u.ell_hat))
    grads = ell_backward(params, u, np.full(n, 1.0 / n))
    return ObjectiveResult(value, grads, {"L_U_minus": value})


def supervised_objective(batch_u, batch_s, params, rng, sched: NoiseSchedule, k: int = 1,
                         cond_u=None, cond_s=None, draws=None):
    """Treat all of U as normal and all of S as sensitive."""
    batch_u, batch_s = _require(batch_u, "unlabeled"), _require(batch_s, "sensitive")
    u, s = _samples(batch_u, batch_s, params, rng, sched, k, cond_u, cond_s, draws)
    n, m = batch_u.shape[0], batch_s.shape[0]
    l_u = float(np.mean(u.ell_hat))
    l_s_plus = float(np.mean(bce_loss(s.ell_hat, 1)))
    grads = _add(
        ell_backward(params, u, np.full(n, 1.0 / n)),
        ell_backward(params, s, bce_grad(s.ell_hat, 1) / m),
    )
    return ObjectiveResult(l_u + l_s_plus, grads, {"L_U_minus": l_u, "L_S_plus": l_s_plus})


def pn_loss(batch_s, batch_n, params, rng, beta: float, sched: NoiseSchedule, k: int = 1, draws=None):
    """Fully supervised objective using true normal data (only possible on synthetic data).

    ``rng`` / ``draws`` follow the (sensitive, normal) order of the arguments.
    """
    batch_s, batch_n = _require(batch_s, "sensitive"), _require(batch_n, "normal")
    s, nrm = _samples(batch_s, batch_n, params, rng, sched, k, None, None, draws)
    m, n = batch_s.shape[0], batch_n.shape[0]
    l_s_plus = float(np.mean(bce_loss(s.ell_hat, 1)))
    l_n = float(np.mean(nrm.ell_hat))
    value = beta * l_s_plus + (1.0 - beta) * l_n
    grads = _add(
        ell_backward(params, s, beta * bce_grad(s.ell_hat, 1) / m),
        ell_backward(params, nrm, np.full(n, (1.0 - beta) / n)),
    )
    return ObjectiveResult(value, grads, {"L_S_plus": l_s_plus, "L_N_minus": l_n})


def _samples(batch_a, batch_b, params, rng, sched, k, cond_a, cond_b, draws):
    if draws is not None:
        (ta, ea), (tb, eb) = draws
        a = loss_ell(params, batch_a, None, sched, cond_a, k, ta, ea)
        b = loss_ell(params, batch_b, None, sched, cond_b, k, tb, eb)
    else:
        rng_a, rng_b = _split(rng)
        a = loss_ell(params, batch_a, rng_a, sched, cond_a, k)
        b = loss_ell(params, batch_b, rng_b, sched, cond_b, k)
    return a, b


def pu_terms(batch_u, batch_s, params, rng, cfg: PuConfig, sched: NoiseSchedule,
             cond_u=None, cond_s=None, draws=None) -> PuTerms:
    """The three empirical averages of the PU estimator.

    Each sensitive example uses one ``(t, eps)`` draw for both its y=1 and
    y=0 terms, so both are functions of the same loss estimate.
    """
    batch_u, batch_s = _require(batch_u, "unlabeled"), _require(batch_s, "sensitive")
    u, s = _samples(batch_u, batch_s, params, rng, sched, cfg.mc_draws, cond_u, cond_s, draws)
    return PuTerms(
        L_S_plus=float(np.mean(bce_loss(s.ell_hat, 1))),
        L_U_minus=float(np.mean(u.ell_hat)),
        L_S_minus=float(np.mean(s.ell_hat)),
        u=u,
        s=s,
    )


def pu_loss(terms: PuTerms, cfg: PuConfig) -> float:
    """Non-negative PU risk: beta*L_S+ plus the corrected normal-risk estimate."""
    d = terms.deficit(cfg.beta)
    corrected = max(0.0, d) if cfg.correction is Correction.MAX else abs(d)
    return cfg.beta * terms.L_S_plus + corrected


def branch_objective(terms: PuTerms, cfg: PuConfig) -> float:
    """The scalar whose gradient a PU step follows on the current batch."""
    d = terms.deficit(cfg.beta)
    if d >= 0:
        return cfg.beta * terms.L_S_plus + d
    if cfg.correction is Correction.MAX:
        return -d
    return cfg.beta * terms.L_S_plus - d


def pu_gradient(terms: PuTerms, params: DenoiserParams, cfg: PuConfig) -> ObjectiveResult:
    """Gradient of the branch objective selected by the sign of the deficit.

    With ``max`` correction a negative deficit drops the sensitive-label term
    and ascends the deficit alone; with ``abs`` it keeps that term and
    descends ``|deficit|``.
    """
    beta = cfg.beta
    n, m = terms.u.ell_hat.size, terms.s.ell_hat.size
    d = terms.deficit(beta)
    g_plus = bce_grad(terms.s.ell_hat, 1)
    if d >= 0:
        branch = "pos"
        mult_u = np.full(n, 1.0 / n)
        mult_s = beta * (g_plus - 1.0) / m
    else:
        branch = "neg"
        mult_u = np.full(n, -1.0 / n)
        if cfg.correction is Correction.MAX:
            mult_s = np.full(m, beta / m)
        else:
            mult_s = beta * (g_plus + 1.0) / m
    grads = _add(ell_backward(params, terms.u, mult_u), ell_backward(params, terms.s, mult_s))
    info = {"L_S_plus": terms.L_S_plus, "L_U_minus": terms.L_U_minus, "L_S_minus": terms.L_S_minus}
    return ObjectiveResult(pu_loss(terms, cfg), grads, info, branch)


def pu_objective(batch_u, batch_s, params, rng, cfg: PuConfig, sched: NoiseSchedule,
                 cond_u=None, cond_s=None, draws=None) -> ObjectiveResult:
    terms = pu_terms(batch_u, batch_s, params, rng, cfg, sched, cond_u, cond_s, draws)
    return pu_gradient(terms, params, cfg)


@dataclass
class StepDiagnostics:
    step: int
    lr: float
    L_S_plus: float
    L_U_minus: float
    L_S_minus: float
    branch: str
    objective: float


def check_finite(result: ObjectiveResult, step: int) -> None:
    if not math.isfinite(result.value):
        raise NumericError("non-finite objective", step)
    for a in result.grads.arrays():
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite gradient", step)


def pu_gradient_step(batch_u, batch_s, params: DenoiserParams, opt_state: AdamWState, lr: float,
                     cfg: PuConfig, rng, sched: NoiseSchedule, step: int = 0,
                     cond_u=None, cond_s=None) -> tuple[DenoiserParams, AdamWState, StepDiagnostics]:
    """One stochastic update of the PU objective (in place on ``params``)."""
    result = pu_objective(batch_u, batch_s, params, rng, cfg, sched, cond_u, cond_s)
    check_finite(result, step)
    adamw_step(params, result.grads, opt_state, lr)
    t = result.terms
    diag = StepDiagnostics(step, lr, t["L_S_plus"], t["L_U_minus"], t["L_S_minus"], result.branch, result.value)
    return params, opt_state, diag
