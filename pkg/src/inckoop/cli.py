"""Command-line driver.

Every command reads a JSON run configuration (defaults when omitted), applies
``--set section.key=value`` overrides and writes its artifacts to the output
directory. Numeric CSV fields use 17 significant digits so reruns are
byte-identical; wall-clock timings go to separate ``*_timing.json`` files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import koopman as kp
from .config import RunConfig, load_config
from .errors import InckoopError, IoError
from .incremental import incremental_run
from .metrics import METRIC_NAMES, prediction_curve, tracking_metrics
from .mpc import track_many
from .theory import SyntheticSpectrumSystem, projection_error_experiment, sampling_error_experiment

EXIT_OK, EXIT_ERROR, EXIT_TOLERANCE = 0, 1, 2
KS = (1, 3, 6, 9, 12, 15)


def fmt(x) -> str:
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Path) -> Path:
    if not path.is_file():
        raise IoError(f"required file not found: {path}")
    return path


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(cfg: RunConfig, args) -> int:
    spec = cfg.plant.build()
    data = cfg.data.build()
    H = cfg.mpc.H
    out = _out(cfg)
    d = ds.collect_initial_dataset(spec, None, data.n_traj, data.l_init, H, data.data_seed)
    repo = ds.make_reference_repo(spec, data.repo_size, data.repo_length, data.noise_halfwidth,
                                  data.repo_seed)
    eval_repo = ds.make_reference_repo(spec, cfg.incremental.eval_repo_size, data.repo_length,
                                       data.noise_halfwidth, data.eval_seed)
    ds.save_dataset(d, out / "dataset.ikds")
    ds.save_repo(repo, out / "repo.ikrr")
    ds.save_repo(eval_repo, out / "eval_repo.ikrr")
    print(f"wrote {len(d)} segments and {len(repo)}+{len(eval_repo)} references to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    path = _require(Path(args.dataset) if args.dataset else out / "dataset.ikds")
    d = ds.load_dataset(path, expected_length=cfg.mpc.H)
    model = kp.train_koopman(cfg.train.latent_dim, d, cfg.train.build())
    kp.save_model(model, out / "model.ikpm")
    write_csv(out / "train_loss.csv", ["epoch", "loss"], list(enumerate(model.history)))
    print(f"trained n={cfg.train.latent_dim}, final loss {model.history[-1]:.6g}")
    return EXIT_OK


def cmd_predict_eval(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    model = kp.load_model(_require(Path(args.model) if args.model else out / "model.ikpm"))
    d = ds.load_dataset(_require(Path(args.dataset) if args.dataset else out / "dataset.ikds"))
    curve = prediction_curve(model, d, [k for k in KS if k <= d.length])
    write_csv(out / "prediction_curve.csv", ["k", "E_pre"], zip(curve.ks, curve.errors))
    print("E_pre:", " ".join(f"{k}:{e:.4g}" for k, e in zip(curve.ks, curve.errors)))
    return EXIT_OK


def cmd_track(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    spec = cfg.plant.build()
    mpc = cfg.mpc.build(spec)
    model = kp.load_model(_require(Path(args.model) if args.model else out / "model.ikpm"))
    repo = ds.load_repo(_require(Path(args.repo) if args.repo else out / "eval_repo.ikrr"))
    results = track_many(spec, model, repo.plant_units(), mpc, cfg.mpc.eps_fail, cfg.mpc.T_max)
    mets = [tracking_metrics(r.trajectory, r.reference, spec, cfg.mpc.eps_fail, cfg.mpc.T_max)
            for r in results]
    rows = [[i, m.T_sur] + [getattr(m, k) for k in METRIC_NAMES] for i, m in enumerate(mets)]
    write_csv(out / "tracking.csv", ["reference", "T_sur", *METRIC_NAMES], rows)
    T = np.array([m.T_sur for m in mets], dtype=float)
    summary = {"mean_T_sur": float(T.mean()),
               "fraction_full": float(np.mean(T >= cfg.mpc.T_max)),
               "count": len(mets)}
    write_json(out / "tracking_summary.json", summary)
    print(f"mean T_sur {summary['mean_T_sur']:.2f}, full-length {summary['fraction_full']:.2%}")
    return EXIT_OK


def cmd_incremental_run(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    spec = cfg.plant.build()
    mpc = cfg.mpc.build(spec)
    inc = cfg.incremental.build(cfg.mpc)
    timing = []

    def on_iteration(j, model, rec):
        kp.save_model(model, out / f"model_iter_{j}.ikpm")
        timing.append({"j": j, "wall_time": rec.wall_time})
        print(f"iter {j}: n={rec.n} |D|={rec.dataset_size} epochs={rec.epochs} "
              f"T_sur={rec.T_sur:.2f}")

    res = incremental_run(spec, inc, cfg.train.build(), mpc, cfg.data.build(),
                          on_iteration=on_iteration)
    kp.save_model(res.model, out / "best_model.ikpm")
    # output_dir is left out so the log does not depend on where it was written
    config = cfg.to_dict()
    config.pop("output_dir")
    log = {"best_index": res.best_index,
           "records": [r.as_dict(with_time=False) for r in res.records],
           "config": config}
    write_json(out / "incremental_log.json", log)
    write_json(out / "incremental_timing.json", timing)
    return EXIT_OK


def cmd_theory_validate(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    th = cfg.theory
    system = SyntheticSpectrumSystem(th.N, th.C, th.alpha, th.basis_seed)
    samp = sampling_error_experiment(system, th.n, th.m_grid, th.trials, th.seed, th.delta,
                                     th.quad_nodes)
    proj = projection_error_experiment(system, th.n_grid, th.quad_nodes)
    rows = [(m, t, e) for m, errs in zip(samp.axis, samp.trial_errors)
            for t, e in enumerate(errs)]
    write_csv(out / "theory_sampling.csv", ["axis_value", "trial", "error"], rows)
    write_csv(out / "theory_projection.csv", ["axis_value", "trial", "error"],
              [(n, 0, e) for n, e in zip(proj.axis, proj.errors)])
    lo_s, hi_s = th.sampling_slope_band
    lo_p, hi_p = th.projection_slope_band
    monotone = all(b <= a for a, b in zip(proj.errors, proj.errors[1:]))
    verdicts = {
        "sampling_slope_in_band": lo_s <= samp.slope <= hi_s,
        "projection_slope_in_band": lo_p <= proj.slope <= hi_p,
        "projection_non_increasing": monotone,
    }
    write_json(out / "theory.json", {"sampling": samp.as_dict(), "projection": proj.as_dict(),
                                     "verdicts": verdicts})
    print(f"sampling slope {samp.slope:.4f}, projection slope {proj.slope:.4f}")
    if not all(verdicts.values()):
        failed = [k for k, v in verdicts.items() if not v]
        print("tolerance check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "predict-eval": cmd_predict_eval,
    "track": cmd_track,
    "incremental-run": cmd_incremental_run,
    "theory-validate": cmd_theory_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inckoop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a configuration value")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        if name in ("train", "predict-eval"):
            p.add_argument("--dataset", help="IKDS dataset path")
        if name in ("predict-eval", "track"):
            p.add_argument("--model", help="IKPM checkpoint path")
        if name == "track":
            p.add_argument("--repo", help="reference repository path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        run = COMMANDS[args.command]
        if args.threads is not None:
            if args.threads < 1:
                raise InckoopError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return run(cfg, args)
        return run(cfg, args)
    except (InckoopError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
