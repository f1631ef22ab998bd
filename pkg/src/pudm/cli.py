"""Command-line entry point: ``pudm {gen-data,train,sample,eval,sweep-beta,report}``.

Output layout under the run's ``out`` directory::

    data_<kind>_s<seed>/   U.csv S.csv test.csv manifest.json
    runs/<run-name>/       config.ini train_log.csv checkpoint_{final,best}.pudm
                           samples_<scheduler>.csv eval_<scheduler>.{csv,txt}
    sweep_beta.csv
    summary.csv summary.txt
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from pudm import config as config_mod
from pudm.config import ConfigError, RunConfig
from pudm.data import Kind, generate, load_csv, load_pu_split, make_pu_split, save_pu_split
from pudm.errors import NumericError
from pudm.metrics import EvalReport, evaluate
from pudm.samplers import Scheduler, sample
from pudm.tensor_nn import init_params, load_checkpoint, save_checkpoint
from pudm.training import LOG_FIELDS, Method, train

log = logging.getLogger("pudm")


# -- pipeline steps ---------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> Path:
    d = cfg.data
    ds = generate(d.kind, d.pool_size, d.seed, d.geometry)
    pu = make_pu_split(ds, d.n_u_normal, d.n_u_sensitive, d.n_s, d.n_test, d.seed)
    try:
        save_pu_split(pu, cfg.data_dir)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {cfg.data_dir}: {exc}") from exc
    log.info("wrote PU split to %s (|U|=%d, |S|=%d, |test|=%d)", cfg.data_dir, len(pu.U), len(pu.S),
             len(pu.test_normal))
    return cfg.data_dir


def _ensure_data(cfg: RunConfig):
    if not (cfg.data_dir / "manifest.json").exists():
        cmd_gen_data(cfg)
    return load_pu_split(cfg.data_dir)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def cmd_train(cfg: RunConfig) -> Path:
    """Train one model; writes checkpoints and the per-step log into the run directory."""
    data = _ensure_data(cfg)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    log.info("training %s for %d epochs -> %s", cfg.train.method.value, cfg.train.epochs, run_dir)
    result = train(data, cfg.train)
    with open(run_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in result.rows:
            w.writerow([_fmt(getattr(r, f)) for f in LOG_FIELDS])
    if result.diverged is not None:
        save_checkpoint(run_dir / "checkpoint_last_good.pudm", result.params)
        raise NumericError(f"training diverged; last good parameters kept in "
                           f"{run_dir / 'checkpoint_last_good.pudm'}: {result.diverged}", result.diverged.step)
    save_checkpoint(run_dir / "checkpoint_final.pudm", result.params, result.state)
    save_checkpoint(run_dir / "checkpoint_best.pudm", result.best_params)
    return run_dir


def _check_shapes(cfg: RunConfig, params) -> None:
    t = cfg.train
    expected = init_params(2, t.hidden, t.time_dim)
    if not expected.same_shape(params):
        raise ConfigError(f"checkpoint shapes [{params.shape_summary()}] differ from the configured model "
                          f"[{expected.shape_summary()}]")


def cmd_sample(cfg: RunConfig, checkpoint=None) -> Path:
    checkpoint = Path(checkpoint) if checkpoint else cfg.run_dir / "checkpoint_final.pudm"
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {checkpoint} not found (run `pudm train` first)")
    params, _ = load_checkpoint(checkpoint)
    _check_shapes(cfg, params)
    spec = cfg.sampler
    x = sample(params, cfg.train.schedule(), spec)
    steps = cfg.train.T if spec.scheduler is Scheduler.DDPM else spec.ddim_steps
    out = checkpoint.parent / f"samples_{spec.scheduler.value}.csv"
    lines = [f"# kind={cfg.data.kind.value}, seed={spec.seed}, scheduler={spec.scheduler.value}, "
             f"steps={steps}, n={spec.n_samples}, checkpoint={checkpoint.name}"]
    lines.append(",".join(f"x{i}" for i in range(x.shape[1])))
    lines += [",".join(repr(v) for v in row) for row in x.tolist()]
    out.write_text("\n".join(lines) + "\n")
    log.info("wrote %d samples to %s", spec.n_samples, out)
    return out


def read_samples(path) -> tuple[np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}:1: missing metadata header")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split(", "))
    rows = []
    for i, line in enumerate(lines[2:], start=3):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from None
    return np.asarray(rows, dtype=np.float64), meta


def cmd_eval(cfg: RunConfig, samples_path=None) -> EvalReport:
    samples_path = Path(samples_path) if samples_path else cfg.run_dir / f"samples_{cfg.sampler.scheduler.value}.csv"
    if not samples_path.exists():
        raise FileNotFoundError(f"samples file {samples_path} not found")
    x, meta = read_samples(samples_path)
    data = load_pu_split(cfg.data_dir)
    kind = data.provenance["kind"]
    if meta.get("kind", kind) != kind:
        raise ValueError(f"samples were drawn for kind {meta['kind']!r} but the dataset is {kind!r}")
    run_meta = {"method": cfg.train.method.value, "beta": repr(cfg.train.pu.beta),
                "correction": cfg.train.pu.correction.value, "seed": cfg.seed,
                "scheduler": meta.get("scheduler", "")}
    report = evaluate(x, data.test_normal, Kind(kind), cfg.data.geometry, cfg.n_proj, cfg.seed, run_meta)
    stem = samples_path.parent / samples_path.name.replace("samples_", "eval_").replace(".csv", "")
    Path(f"{stem}.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    Path(f"{stem}.txt").write_text(report.text())
    log.info("non-sensitive rate %.4f, sliced W2 %.4f", report.non_sensitive_rate, report.sw_distance)
    return report


def run_pipeline(cfg: RunConfig) -> EvalReport:
    """train -> sample -> eval for one configuration."""
    cmd_train(cfg)
    path = cmd_sample(cfg)
    return cmd_eval(cfg, path)


SWEEP_FIELDS = ("beta", "seed", "status", "non_sensitive_rate", "sw_distance")


def cmd_sweep_beta(cfg: RunConfig, betas=None) -> Path:
    """PU runs for every beta x replicate seed, aggregated into one table."""
    betas = tuple(cfg.betas if betas is None else betas)
    if not betas or any(not 0 <= b <= 1 for b in betas):
        raise ConfigError("betas must be a non-empty list in [0, 1]")
    _ensure_data(cfg)
    rows = []
    for beta in betas:
        for r in range(cfg.replicates):
            run_cfg = cfg.with_overrides(seed=cfg.seed + r, method=Method.PU.value, beta=beta)
            try:
                rep = run_pipeline(run_cfg)
                rows.append((repr(beta), run_cfg.seed, "ok", repr(rep.non_sensitive_rate), repr(rep.sw_distance)))
            except (NumericError, ValueError, OSError) as exc:
                log.error("beta=%g seed=%d failed: %s", beta, run_cfg.seed, exc)
                rows.append((repr(beta), run_cfg.seed, "failed", "", ""))
    out = cfg.out / "sweep_beta.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        w.writerows(rows)
    return out


def cmd_report(cfg: RunConfig) -> Path:
    """Method x metric table (mean and std over seeds) from every eval file under ``out/runs``."""
    groups: dict[tuple, list[tuple[float, float]]] = {}
    for path in sorted((cfg.out / "runs").glob("*/eval_*.csv")):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                label = row["method"]
                if label in ("pu", "pn"):
                    label += f"(beta={float(row['beta']):g}" + (",abs)" if row["correction"] == "abs" and
                                                                   label == "pu" else ")")
                key = (label, row["scheduler"])
                groups.setdefault(key, []).append((float(row["non_sensitive_rate"]), float(row["sw_distance"])))
    if not groups:
        raise FileNotFoundError(f"no eval files under {cfg.out / 'runs'}")
    out = cfg.out / "summary.csv"
    lines = ["method,scheduler,n_seeds,rate_mean,rate_std,sw_mean,sw_std"]
    text = [f"{'method':<24}{'sampler':<8}{'seeds':>6}  {'non-sensitive rate':<20}{'sliced W2':<20}"]
    for (label, sched), vals in sorted(groups.items()):
        a = np.asarray(vals)
        mean, std = a.mean(axis=0), a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(2)
        lines.append(f"{label},{sched},{len(a)},{mean[0]!r},{std[0]!r},{mean[1]!r},{std[1]!r}")
        text.append(f"{label:<24}{sched:<8}{len(a):>6}  {mean[0]:.3f}±{std[0]:.3f}{'':<9}"
                    f"{mean[1]:.3f}±{std[1]:.3f}")
    out.write_text("\n".join(lines) + "\n")
    (cfg.out / "summary.txt").write_text("\n".join(text) + "\n")
    return out


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, help="run seed (training, sampling, evaluation)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--method", choices=[m.value for m in Method])
    common.add_argument("--beta", type=float, help="class prior of sensitive data in U")
    common.add_argument("--correction", choices=["max", "abs"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pudm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the PU dataset split")
    sub.add_parser("train", parents=[common], help="train one model")
    sp = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--n", type=int, help="number of samples")
    sp.add_argument("--scheduler", choices=[s.value for s in Scheduler])
    sp.add_argument("--steps", type=int, help="DDIM step count")
    ep = sub.add_parser("eval", parents=[common], help="score a samples file")
    ep.add_argument("--samples", type=Path)
    ep.add_argument("--scheduler", choices=[s.value for s in Scheduler])
    wp = sub.add_parser("sweep-beta", parents=[common], help="train/sample/eval PU models over a beta list")
    wp.add_argument("--betas", help="comma-separated list (default from config)")
    sub.add_parser("report", parents=[common], help="summarize all evaluated runs")
    return p


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.parse("")
    cfg = cfg.with_overrides(args.seed, args.out, args.method, args.beta, args.correction)
    sampler = cfg.sampler
    try:
        if getattr(args, "n", None) is not None:
            sampler = replace(sampler, n_samples=args.n)
        if getattr(args, "scheduler", None):
            sampler = replace(sampler, scheduler=Scheduler(args.scheduler))
        if getattr(args, "steps", None) is not None:
            sampler = replace(sampler, ddim_steps=args.steps)
            if not 1 <= args.steps <= cfg.train.T:
                raise ValueError(f"--steps must lie in [1, {cfg.train.T}]")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return replace(cfg, sampler=sampler)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        limiter = config_mod.apply_thread_limit()
        if args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "sample":
            print(cmd_sample(cfg, args.checkpoint))
        elif args.command == "eval":
            print(cmd_eval(cfg, args.samples).text(), end="")
        elif args.command == "sweep-beta":
            betas = config_mod._floats(args.betas) if args.betas else None
            print(cmd_sweep_beta(cfg, betas))
        elif args.command == "report":
            out = cmd_report(cfg)
            print((out.parent / "summary.txt").read_text(), end="")
        if limiter is not None:
            limiter.unregister()
    except (ConfigError, NumericError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
