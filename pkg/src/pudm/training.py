"""Mini-batch training loop shared by every objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from pudm.data import NORMAL, PuDataset
from pudm.diffusion import NoiseSchedule, make_schedule
from pudm.errors import NumericError
from pudm.pu_objective import (
    ObjectiveResult,
    PuConfig,
    StepDiagnostics,
    check_finite,
    pn_loss,
    pu_objective,
    supervised_objective,
    unsupervised_objective,
)
from pudm.tensor_nn import AdamWState, DenoiserParams, LrSchedule, adamw_step, init_params, lr_at

log = logging.getLogger(__name__)


class Method(str, Enum):
    UNSUPERVISED = "unsupervised"
    SUPERVISED = "supervised"
    PN = "pn"
    PU = "pu"


@dataclass(frozen=True)
class TrainSpec:
    method: Method = Method.PU
    pu: PuConfig = field(default_factory=PuConfig)
    epochs: int = 200
    base_lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01
    hidden: tuple[int, ...] = (128, 128, 128)
    time_dim: int = 32
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


LOG_FIELDS = ("step", "lr", "L_S_plus", "L_U_minus", "L_S_minus", "branch", "objective")


@dataclass
class TrainResult:
    params: DenoiserParams
    state: AdamWState
    best_params: DenoiserParams
    rows: list[StepDiagnostics]
    diverged: NumericError | None = None


class _Cycler:
    """Endless stream of index batches, reshuffled at every pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            j = min(k, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + j])
            self.pos += j
            k -= j
        return np.concatenate(out)


def steps_per_epoch(n_u: int, batch_u: int) -> int:
    return math.ceil(n_u / batch_u)


def train(data: PuDataset, spec: TrainSpec, on_step=None) -> TrainResult:
    """Run ``spec.epochs`` passes over U with the configured objective.

    ``on_step(diag)`` is called after every update. A :class:`NumericError`
    stops training; the parameters from before the failing step are
    returned in ``best_params``/``params`` and the error in ``diverged``.
    """
    init_ss, u_ss, s_ss, noise_u_ss, noise_s_ss = np.random.SeedSequence(spec.seed).spawn(5)
    sched = spec.schedule()
    params = init_params(data.U.shape[1], spec.hidden, spec.time_dim, np.random.default_rng(init_ss))
    state = AdamWState.zeros(params, weight_decay=spec.weight_decay)
    cfg = spec.pu
    n_u = len(data.U)
    per_epoch = steps_per_epoch(n_u, cfg.batch_u)
    lr_sched = LrSchedule(spec.base_lr, spec.warmup_steps, max(spec.epochs * per_epoch, spec.warmup_steps + 1))

    rng_u = np.random.default_rng(u_ss)
    noise = (np.random.default_rng(noise_u_ss), np.random.default_rng(noise_s_ss))
    # PN draws its "normal" batch from the truly-normal part of U
    normal_pool = data.U[data.u_hidden_labels == NORMAL] if spec.method is Method.PN else None
    s_pool = data.S
    s_stream = _Cycler(len(s_pool), np.random.default_rng(s_ss)) if len(s_pool) else None
    needs_s = spec.method is not Method.UNSUPERVISED
    if needs_s and s_stream is None:
        raise ValueError(f"method {spec.method.value} needs a non-empty sensitive set")
    n_stream = _Cycler(len(normal_pool), rng_u) if normal_pool is not None else None

    rows: list[StepDiagnostics] = []
    best, best_epoch_loss = params.copy(), math.inf
    step = 0
    for epoch in range(spec.epochs):
        order = rng_u.permutation(n_u)
        epoch_loss = 0.0
        for b in range(per_epoch):
            step += 1
            batch_u = data.U[order[b * cfg.batch_u : (b + 1) * cfg.batch_u]]
            batch_s = s_pool[s_stream.take(cfg.batch_s)] if needs_s else None
            lr = lr_at(lr_sched, step)
            try:
                res = _objective(spec, cfg, params, batch_u, batch_s, n_stream, normal_pool, noise, sched)
                check_finite(res, step)
            except NumericError as exc:
                exc.step = step
                log.error("diverged at step %d: %s", step, exc)
                return TrainResult(params, state, best, rows, exc)
            adamw_step(params, res.grads, state, lr)
            t = res.terms
            diag = StepDiagnostics(step, lr, t.get("L_S_plus", math.nan), t.get("L_U_minus", math.nan),
                                   t.get("L_S_minus", math.nan), res.branch, res.value)
            rows.append(diag)
            epoch_loss += res.value
            if on_step is not None:
                on_step(diag)
        epoch_loss /= per_epoch
        if epoch_loss < best_epoch_loss:
            best, best_epoch_loss = params.copy(), epoch_loss
        log.debug("epoch %d mean objective %.5f", epoch, epoch_loss)
    return TrainResult(params, state, best, rows)


def _objective(spec, cfg, params, batch_u, batch_s, n_stream, normal_pool, noise, sched) -> ObjectiveResult:
    k = cfg.mc_draws
    if spec.method is Method.UNSUPERVISED:
        return unsupervised_objective(batch_u, params, noise, sched, k)
    if spec.method is Method.SUPERVISED:
        return supervised_objective(batch_u, batch_s, params, noise, sched, k)
    if spec.method is Method.PN:
        batch_n = normal_pool[n_stream.take(len(batch_u))]
        return pn_loss(batch_s, batch_n, params, (noise[1], noise[0]), cfg.beta, sched, k)
    return pu_objective(batch_u, batch_s, params, noise, cfg, sched)
