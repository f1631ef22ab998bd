"""Run configuration: an INI file with fixed sections and keys.

Grammar (``configparser`` syntax, ``#`` comments)::

    [section]
    key = value

Every section and key is optional and falls back to the defaults in
``DEFAULTS``; unknown sections or keys are errors. Lists are comma
separated. Only ``PUDM_OUT`` (output directory) and ``PUDM_THREADS`` (BLAS
thread count) are read from the environment.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, replace
from pathlib import Path

from pudm.data import Geometry, Kind
from pudm.pu_objective import Correction, PuConfig
from pudm.samplers import SampleRunSpec, Scheduler
from pudm.training import Method, TrainSpec

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "kind": "two_gaussians",
        "seed": "0",
        "pool_size": "8000",
        "n_u_normal": "2000",
        "n_u_sensitive": "200",
        "n_s": "200",
        "n_test": "2000",
        "separation": "2.0",
        "std": "0.5",
        "moon_noise": "0.05",
        "cell": "1.0",
        "board": "4",
    },
    "model": {"hidden": "128,128,128", "time_dim": "32"},
    "schedule": {"timesteps": "1000", "beta_start": "1e-4", "beta_end": "0.02"},
    "optim": {
        "base_lr": "1e-4",
        "warmup_steps": "500",
        "epochs": "200",
        "weight_decay": "0.01",
        "batch_u": "128",
        "batch_s": "32",
    },
    "objective": {"method": "pu", "beta": "0.1", "correction": "max", "mc_draws": "1"},
    "sampler": {"scheduler": "ddpm", "n_samples": "2000", "ddim_steps": "50"},
    "eval": {"n_proj": "128"},
    "run": {"seed": "0", "out": "runs", "replicates": "3", "betas": "0.05,0.091,0.15,0.2"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    kind: Kind
    seed: int
    pool_size: int
    n_u_normal: int
    n_u_sensitive: int
    n_s: int
    n_test: int
    geometry: Geometry


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec
    train: TrainSpec
    sampler: SampleRunSpec
    n_proj: int
    seed: int
    out: Path
    replicates: int
    betas: tuple[float, ...]

    def with_overrides(self, seed=None, out=None, method=None, beta=None, correction=None) -> "RunConfig":
        cfg = self
        try:
            if seed is not None:
                cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed),
                              sampler=replace(cfg.sampler, seed=seed))
            if out is not None:
                cfg = replace(cfg, out=Path(out))
            if method is not None:
                cfg = replace(cfg, train=replace(cfg.train, method=Method(method)))
            if beta is not None or correction is not None:
                pu = cfg.train.pu
                pu = replace(pu, beta=pu.beta if beta is None else beta,
                             correction=pu.correction if correction is None else Correction(correction))
                cfg = replace(cfg, train=replace(cfg.train, pu=pu))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @property
    def data_dir(self) -> Path:
        return self.out / f"data_{self.data.kind.value}_s{self.data.seed}"

    def run_name(self) -> str:
        t = self.train
        name = f"{t.method.value}_s{t.seed}"
        if t.method in (Method.PU, Method.PN):
            name = f"{t.method.value}_b{t.pu.beta:g}_s{t.seed}"
            if t.method is Method.PU and t.pu.correction is Correction.ABS:
                name = name.replace("pu_", "puabs_", 1)
        return name

    @property
    def run_dir(self) -> Path:
        return self.out / "runs" / self.run_name()

    def to_ini(self) -> str:
        """Canonical text of this configuration (round-trips through ``parse``)."""
        d, t, s = self.data, self.train, self.sampler
        g = d.geometry
        sections = {
            "data": {"kind": d.kind.value, "seed": d.seed, "pool_size": d.pool_size, "n_u_normal": d.n_u_normal,
                     "n_u_sensitive": d.n_u_sensitive, "n_s": d.n_s, "n_test": d.n_test,
                     "separation": repr(g.separation), "std": repr(g.std), "moon_noise": repr(g.moon_noise),
                     "cell": repr(g.cell), "board": g.board},
            "model": {"hidden": ",".join(map(str, t.hidden)), "time_dim": t.time_dim},
            "schedule": {"timesteps": t.T, "beta_start": repr(t.beta_start), "beta_end": repr(t.beta_end)},
            "optim": {"base_lr": repr(t.base_lr), "warmup_steps": t.warmup_steps, "epochs": t.epochs,
                      "weight_decay": repr(t.weight_decay), "batch_u": t.pu.batch_u, "batch_s": t.pu.batch_s},
            "objective": {"method": t.method.value, "beta": repr(t.pu.beta),
                          "correction": t.pu.correction.value, "mc_draws": t.pu.mc_draws},
            "sampler": {"scheduler": s.scheduler.value, "n_samples": s.n_samples, "ddim_steps": s.ddim_steps},
            "eval": {"n_proj": self.n_proj},
            "run": {"seed": self.seed, "out": str(self.out), "replicates": self.replicates,
                    "betas": ",".join(repr(b) for b in self.betas)},
        }
        buf = io.StringIO()
        for name, values in sections.items():
            buf.write(f"[{name}]\n")
            for k, v in values.items():
                buf.write(f"{k} = {v}\n")
            buf.write("\n")
        return buf.getvalue()


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    p.optionxform = str
    return p


def parse(text: str = "", env: dict | None = None) -> RunConfig:
    """Parse and fully validate a configuration text."""
    p = _parser()
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in p.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key in p[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
    raw = {sec: {**vals, **(dict(p[sec]) if p.has_section(sec) else {})} for sec, vals in DEFAULTS.items()}
    env = os.environ if env is None else env
    if env.get("PUDM_OUT"):
        raw["run"]["out"] = env["PUDM_OUT"]
    try:
        return _build(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _build(raw) -> RunConfig:
    d, m, sc, o, ob, sa, ev, r = (raw[k] for k in ("data", "model", "schedule", "optim", "objective",
                                                   "sampler", "eval", "run"))
    geometry = Geometry(float(d["separation"]), float(d["std"]), float(d["moon_noise"]),
                        float(d["cell"]), int(d["board"]))
    geometry.validate()
    data = DataSpec(Kind(d["kind"]), int(d["seed"]), int(d["pool_size"]), int(d["n_u_normal"]), int(d["n_u_sensitive"]),
                    int(d["n_s"]), int(d["n_test"]), geometry)
    if data.pool_size < 2 or min(data.n_u_normal, data.n_u_sensitive, data.n_s, data.n_test) < 0:
        raise ValueError("dataset counts must be non-negative and pool_size >= 2")
    if data.n_u_normal + data.n_u_sensitive == 0:
        raise ValueError("U would be empty")
    seed = int(r["seed"])
    pu = PuConfig(float(ob["beta"]), Correction(ob["correction"]), int(o["batch_u"]), int(o["batch_s"]),
                  int(ob["mc_draws"]))
    hidden = _ints(m["hidden"])
    if not hidden or min(hidden) < 1:
        raise ValueError("hidden widths must be positive")
    time_dim = int(m["time_dim"])
    if time_dim < 2 or time_dim % 2:
        raise ValueError("time_dim must be an even integer >= 2")
    train = TrainSpec(Method(ob["method"]), pu, int(o["epochs"]), float(o["base_lr"]), int(o["warmup_steps"]),
                      float(o["weight_decay"]), hidden, time_dim, int(sc["timesteps"]),
                      float(sc["beta_start"]), float(sc["beta_end"]), seed)
    train.schedule()  # validates the noise schedule
    if train.base_lr <= 0 or train.warmup_steps < 0 or train.weight_decay < 0:
        raise ValueError("optimizer settings out of range")
    sampler = SampleRunSpec(int(sa["n_samples"]), Scheduler(sa["scheduler"]), int(sa["ddim_steps"]), 0.0, seed)
    if sampler.ddim_steps > train.T:
        raise ValueError(f"ddim_steps {sampler.ddim_steps} exceeds timesteps {train.T}")
    n_proj = int(ev["n_proj"])
    replicates = int(r["replicates"])
    betas = _floats(r["betas"])
    if n_proj < 1 or replicates < 1:
        raise ValueError("n_proj and replicates must be positive")
    if not betas or any(not 0 <= b <= 1 for b in betas):
        raise ValueError("betas must be a non-empty list in [0, 1]")
    return RunConfig(data, train, sampler, n_proj, seed, Path(r["out"]), replicates, betas)


def apply_thread_limit(env: dict | None = None):
    """Honor PUDM_THREADS by capping BLAS threads; returns the limiter (or None)."""
    env = os.environ if env is None else env
    value = env.get("PUDM_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))
