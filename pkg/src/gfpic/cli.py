"""Command-line entry points: train, calibrate, eval, sweep, baseline, plot.

Results CSV schema (fixed, header always present, one row per evaluation):

    framework,kind,eps,rho_dbm,tau_coh,L,T,J,tau_thr,seed,n_samples,
    p_fa,p_md,p_err,nmse_db,ber,wall_time_s

``framework`` is the receiver variant (pilot-only, data-aided, non-coherent,
fcnn, lasso, amp, nc-lasso, nc-amp); ``kind`` is the family (pic, fcnn,
lasso, amp). All commands are deterministic given ``--seed``: wall time is
reported as 0.0 unless ``--timing`` is passed, keeping output bytes
reproducible (for baselines the tau_thr column carries the calibrated
magnitude threshold).
"""

from __future__ import annotations

import argparse
import csv as csvmod
import sys
from dataclasses import replace

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, \
    with_threshold
from .config import CONSTELLATIONS, ConfigError, SystemConfig, TrainConfig, \
    parse_config
from .evalkit import BASELINE_METHODS, EvalTarget, calibrate_baseline, \
    evaluate_baseline, evaluate_model, make_row, sweep
from .picnet import DATA_AIDED, NONCOHERENT_PIC, PILOT_ONLY
from .sysmodel import generate_codebook
from .trainer import FCNN, TrainingDivergedError, calibrate_threshold, train

CSV_COLUMNS = ("framework", "kind", "eps", "rho_dbm", "tau_coh", "L", "T", "J",
               "tau_thr", "seed", "n_samples", "p_fa", "p_md", "p_err",
               "nmse_db", "ber", "wall_time_s")

_KIND_ALIASES = {
    "pilot": PILOT_ONLY, "pilot-only": PILOT_ONLY,
    "data-aided": DATA_AIDED, "non-coherent": NONCOHERENT_PIC, "fcnn": FCNN,
}


def _fmt_cell(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row[c]) for c in CSV_COLUMNS) + "\n")


def _load_configs(path: str | None) -> tuple[SystemConfig, TrainConfig]:
    if path is None:
        return parse_config_text_default()
    return parse_config(path)


def parse_config_text_default() -> tuple[SystemConfig, TrainConfig]:
    from .config import parse_config_text

    return parse_config_text("")


def _config_for_model(model, file_cfg: SystemConfig) -> SystemConfig:
    """Eval scenario: file/CLI physical constants, checkpoint-enforced shapes."""
    echo = model.config
    return replace(file_cfg,
                   n_devices=echo.n_devices, seq_len=echo.seq_len,
                   coherence_len=echo.coherence_len, n_bits=echo.n_bits,
                   n_symbols=echo.n_symbols, scheme=echo.scheme,
                   n_stages=echo.n_stages, hidden_sizes=echo.hidden_sizes,
                   fcnn_hidden_sizes=echo.fcnn_hidden_sizes,
                   constellation=echo.constellation)


def _apply_overrides(cfg: SystemConfig, args) -> SystemConfig:
    if getattr(args, "eps", None) is not None:
        cfg = replace(cfg, activity_prob=args.eps)
    if getattr(args, "rho", None) is not None:
        cfg = replace(cfg, tx_power_dbm=args.rho)
    return cfg


def _framework_label(model) -> str:
    return model.kind


def _family(model) -> str:
    return "fcnn" if model.kind == FCNN else "pic"


# --- subcommands -------------------------------------------------------------


def _cmd_train(args) -> int:
    sys_cfg, train_cfg = _load_configs(args.config)
    train_cfg = replace(train_cfg, seed=args.seed if args.seed is not None
                        else train_cfg.seed)
    kind = _KIND_ALIASES[args.kind]
    model = train(kind, sys_cfg, train_cfg, log_path=args.log,
                  tie_devices=args.tie_devices)
    save_checkpoint(model, args.out)
    print(f"trained {kind} receiver -> {args.out} (seed {train_cfg.seed})")
    return 0


def _cmd_calibrate(args) -> int:
    model = load_checkpoint(args.ckpt)
    sys_cfg, train_cfg = _load_configs(args.config)
    cfg = _apply_overrides(_config_for_model(model, sys_cfg), args)
    seed = args.seed if args.seed is not None else model.seed
    n = args.samples if args.samples is not None else train_cfg.n_val_samples
    cal = calibrate_threshold(model, cfg, n, seed)
    model = with_threshold(model, cal.tau_thr)
    out = args.out or args.ckpt
    save_checkpoint(model, out)
    print(f"tau_thr={cal.tau_thr!r} p_fa={cal.p_fa!r} p_md={cal.p_md!r} "
          f"(n={cal.n_scores}) -> {out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    sys_cfg, train_cfg = _load_configs(args.config)
    cfg = _apply_overrides(_config_for_model(model, sys_cfg), args)
    seed = args.seed if args.seed is not None else model.seed
    report = evaluate_model(model, cfg, args.samples, seed,
                            threads=args.threads, timing=args.timing)
    row = make_row(_framework_label(model), _family(model), cfg,
                   model.tau_thr, seed, report)
    write_csv(args.out, [row])
    print(f"p_err={report.p_err!r} nmse_db={report.nmse_db!r} "
          f"ber={report.ber!r} -> {args.out}")
    return 0


def _cmd_baseline(args) -> int:
    sys_cfg, train_cfg = _load_configs(args.config)
    cfg = _apply_overrides(sys_cfg, args)
    seed = args.seed if args.seed is not None else train_cfg.seed
    n_val = args.val_samples if args.val_samples is not None \
        else train_cfg.n_val_samples
    codebook = generate_codebook(cfg, seed)
    bm = calibrate_baseline(args.method, cfg, codebook, n_val, seed,
                            nu=args.nu, n_iters=args.iters, pooled=args.pooled)
    report = evaluate_baseline(bm, cfg, args.samples, seed,
                               threads=args.threads, timing=args.timing)
    family = "lasso" if "lasso" in args.method else "amp"
    row = make_row(args.method, family, cfg, bm.threshold, seed, report)
    write_csv(args.out, [row])
    print(f"{args.method}: p_err={report.p_err!r} ber={report.ber!r} "
          f"threshold={bm.threshold!r} -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    sys_cfg, train_cfg = _load_configs(args.config)
    seed = args.seed if args.seed is not None else train_cfg.seed
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    if not grid:
        raise ConfigError("empty sweep grid")

    targets: list[EvalTarget] = []
    models = [load_checkpoint(p) for p in args.ckpt or []]
    if args.axis in ("tau_coh", "J"):
        return _sweep_matched(args, sys_cfg, seed, grid, models)
    for model in models:
        targets.append(EvalTarget(framework=_framework_label(model), model=model))
    for method in args.baseline or []:
        cfg_b = _baseline_config(sys_cfg, method)
        cb = _matching_codebook(models, cfg_b) or generate_codebook(cfg_b, seed)
        targets.append(EvalTarget(framework=method, method=method,
                                  config=cfg_b, codebook=cb))
    if not targets:
        raise ConfigError("sweep needs at least one --ckpt or --baseline")
    rows = sweep(args.axis, grid, targets, args.samples, seed,
                 threads=args.threads, timing=args.timing,
                 calibrate_each=args.calibrate_each,
                 n_cal_samples=args.cal_samples)
    write_csv(args.out, rows)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def _baseline_config(sys_cfg: SystemConfig, method: str) -> SystemConfig:
    if method.startswith("nc-"):
        if sys_cfg.scheme != "non-coherent":
            return replace(sys_cfg, scheme="non-coherent",
                           seq_len=sys_cfg.coherence_len)
    return sys_cfg


def _matching_codebook(models, cfg: SystemConfig):
    for m in models:
        cb = m.codebook
        if (cb.scheme == cfg.scheme and cb.seq_len == cfg.seq_len
                and cb.n_columns == cfg.n_columns):
            return cb
    return None


def _sweep_matched(args, sys_cfg: SystemConfig, seed: int, grid: list[float],
                   models) -> int:
    """tau_coh / J sweeps: each grid point reuses the provided checkpoint whose
    scenario echo matches that point (training happens outside the sweep)."""
    rows = []
    for value in grid:
        v = int(value)
        point_models = [m for m in models
                        if (args.axis == "tau_coh" and m.config.coherence_len == v)
                        or (args.axis == "J" and m.config.n_bits == v)]
        if not point_models:
            raise ConfigError(
                f"incompatible model/config pairing: no checkpoint matches "
                f"{args.axis}={v}")
        for model in point_models:
            cfg = _apply_overrides(_config_for_model(model, sys_cfg), args)
            report = evaluate_model(model, cfg, args.samples, seed,
                                    threads=args.threads, timing=args.timing)
            rows.append(make_row(_framework_label(model), _family(model), cfg,
                                 model.tau_thr, seed, report))
        for method in args.baseline or []:
            base = point_models[0].config
            cfg_b = _apply_overrides(_baseline_config(
                replace(sys_cfg, coherence_len=base.coherence_len,
                        seq_len=base.seq_len, n_bits=base.n_bits,
                        n_symbols=base.n_symbols), method), args)
            cb = _matching_codebook(point_models, cfg_b) \
                or generate_codebook(cfg_b, seed)
            bm = calibrate_baseline(method, cfg_b, cb, args.cal_samples, seed)
            rep = evaluate_baseline(bm, cfg_b, args.samples, seed,
                                    threads=args.threads, timing=args.timing)
            family = "lasso" if "lasso" in method else "amp"
            rows.append(make_row(method, family, cfg_b, bm.threshold, seed, rep))
    write_csv(args.out, rows)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def _cmd_plot(args) -> int:
    from .svgplot import render_line_chart

    with open(args.infile, "r", encoding="utf-8") as fh:
        rows = list(csvmod.DictReader(fh))
    if not rows:
        raise ConfigError(f"no data rows in {args.infile}")
    svg = render_line_chart(rows, args.x, args.y, group_key=args.group,
                            title=args.title)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return 0


# --- argument parsing ----------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="root seed (default: config file / checkpoint seed)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for evaluation sharding")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfpic",
        description="Grant-free NOMA link-level simulator and receiver toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a receiver end to end")
    p.add_argument("--config", default=None)
    p.add_argument("--kind", required=True, choices=sorted(_KIND_ALIASES))
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.add_argument("--tie-devices", action="store_true",
                   help="share module parameters across devices")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", help="recalibrate the decision threshold")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--out", default=None, help="output checkpoint (default: in place)")
    _add_common(p)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--timing", action="store_true",
                   help="record wall time (breaks byte determinism)")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="evaluate over a parameter grid")
    p.add_argument("--axis", required=True,
                   choices=("eps", "tau_coh", "rho", "tau_thr", "J"))
    p.add_argument("--grid", required=True)
    p.add_argument("--ckpt", action="append", default=[])
    p.add_argument("--baseline", action="append", default=[],
                   choices=BASELINE_METHODS)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--cal-samples", type=int, default=20000)
    p.add_argument("--calibrate-each", action="store_true",
                   help="recalibrate thresholds at every grid point")
    p.add_argument("--config", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("baseline", help="calibrate and evaluate a classical baseline")
    p.add_argument("--method", required=True, choices=BASELINE_METHODS)
    p.add_argument("--config", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--val-samples", type=int, default=None)
    p.add_argument("--nu", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--pooled", action="store_true",
                   help="use the pooled (mismatched) channel-variance prior")
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("plot", help="render a results CSV as a static SVG chart")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group", default="framework")
    p.add_argument("--title", default="")
    _add_common(p)
    p.set_defaults(func=_cmd_plot)
    return parser


def run_command(argv) -> int:
    """Parse and execute one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports its own message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, TrainingDivergedError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
