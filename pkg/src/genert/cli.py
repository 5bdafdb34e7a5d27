"""``genert`` command-line tool.

Exit codes: 0 success, 1 scene validation found issues, 2 usage error,
3 configuration error, 4 error raised by a pipeline module.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import plotting
from .config import RunConfig, load_config
from .errors import ConfigError, GenertError
from .metrics import evaluate_cirs, write_report
from .physics import Cir, FresnelOracle, read_cir_dir, render_cir, write_cir
from .predictor import NeuralInteractionModel, build_network, load_checkpoint, save_checkpoint
from .scene import Humidity, load_environment, validate_file
from .training import (
    TRAINABLE_PRESETS, build_e2e_dataset, build_polarized_datasets, pretrain, train_end_to_end,
)
from .tracer import trace_multi

log = logging.getLogger("genert")

EXIT_ISSUES, EXIT_USAGE, EXIT_CONFIG, EXIT_MODULE = 1, 2, 3, 4


def _dump(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _curve_rows(curves: dict):
    n = max((len(v) for v in curves.values()), default=0)
    names = sorted(curves)
    rows = [[e + 1] + [repr(curves[k][e]) if e < len(curves[k]) else "" for k in names] for e in range(n)]
    return ["epoch"] + names, rows


def _polarized_doc(s) -> dict:
    return {"polarization": s.polarization.value,
            **{k: getattr(s, k).tolist() for k in ("zeta", "alpha", "beta", "gamma", "psi", "tx", "rx", "point")}}


def _pretrained(cfg: RunConfig, env):
    s_perp, s_par = build_polarized_datasets(env, budget=cfg.pretrain_budget, seed=cfg.seeds.data,
                                             frequency_hz=cfg.frequency_hz)
    net = build_network(cfg.predictor_config(env.vocab_size), cfg.seeds.init)
    return pretrain(net, s_par, s_perp, cfg.pretrain_schedule())


# ----------------------------------------------------------------------------- commands


def cmd_validate(args, cfg: RunConfig) -> int:
    issues = validate_file(args.scene)
    for item in issues:
        print(json.dumps(item, sort_keys=True))
    print(f"validate: {args.scene}: {len(issues)} issue(s)")
    return EXIT_ISSUES if issues else 0


def cmd_gen_data(args, cfg: RunConfig) -> int:
    env = load_environment(cfg.scene_path)
    out = cfg.out_dir() / "data"
    if args.mode == "polarized":
        s_perp, s_par = build_polarized_datasets(env, budget=cfg.pretrain_budget, seed=cfg.seeds.data,
                                                 humidity=cfg.humidity, frequency_hz=cfg.frequency_hz)
        _dump(out / "polarized_perp.json", _polarized_doc(s_perp))
        _dump(out / "polarized_par.json", _polarized_doc(s_par))
        print(f"gen-data: {len(s_perp)} perpendicular and {len(s_par)} parallel samples -> {out}")
        return 0
    txs, rxs = cfg.tx_configs(), cfg.rx_configs()
    ds = build_e2e_dataset(env, txs, rxs, cfg.humidity, cfg.seeds.split, cfg.limits, cfg.angular_spacing,
                           cfg.frequency_hz, cfg.capture_factor)
    for s in ds.samples:
        write_cir(Cir(s.tx_id, s.rx_id, s.labels, s.tx.frequency_hz), out / "labels")
    manifest = {"scene": str(cfg.scene_path), "humidity": Humidity.parse(cfg.humidity).value,
                "seed": cfg.seeds.split, "txs": [t.position.tolist() for t in txs],
                "rxs": [r.position.tolist() for r in rxs], "split": ds.split}
    _dump(out / "manifest.json", manifest)
    n_paths = sum(len(s.labels) for s in ds.samples)
    print(f"gen-data: {len(ds.samples)} Tx-Rx pairs, {n_paths} labelled paths -> {out}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    env = load_environment(cfg.scene_path)
    net, res = _pretrained(cfg, env)
    out = cfg.out_dir()
    save_checkpoint(net, out / "pretrained.json")
    curves = {f"{stage}_{part}": v for stage, c in res.curves.items() for part, v in c.items()}
    _dump(out / "pretrain_report.json", {"val_nmse_par": res.val_nmse_par, "val_nmse_perp": res.val_nmse_perp,
                                         "val_angle_loss": res.val_angle_loss,
                                         "val_beta_mae_deg": res.val_beta_mae_deg, "curves": curves})
    _write_csv(out / "pretrain_curves.csv", *_curve_rows(curves))
    plotting.plot_curves(curves, out / "pretrain_curves.png", "pre-training", "loss")
    db = lambda x: 10.0 * np.log10(x)  # noqa: E731
    print(f"pretrain: NMSE par {db(res.val_nmse_par):.2f} dB, perp {db(res.val_nmse_perp):.2f} dB, "
          f"angle loss {res.val_angle_loss:.3e} -> {out / 'pretrained.json'}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    env = load_environment(cfg.scene_path)
    out = cfg.out_dir()
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "pretrained.json"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt} (run `genert pretrain` first)")
    net = load_checkpoint(ckpt)
    ds = build_e2e_dataset(env, cfg.tx_configs(), cfg.rx_configs(), cfg.humidity, cfg.seeds.split, cfg.limits,
                           cfg.angular_spacing, cfg.frequency_hz, cfg.capture_factor)
    net, res = train_end_to_end(net, ds.part("train"), cfg.train_schedule(), TRAINABLE_PRESETS[args.trainable],
                                ds.part("val"), cfg.limits, cfg.angular_spacing, cfg.capture_factor)
    save_checkpoint(net, out / "trained.json")
    _write_csv(out / "train_history.csv", *_curve_rows(res.history))
    plotting.plot_curves(res.history, out / "train_history.png", "end-to-end training", "|a| NMSE")
    if not res.val_label_cirs:
        print(f"train: {len(ds.part('train'))} training pairs, no validation pairs -> {out / 'trained.json'}")
        return 0
    report = evaluate_cirs(res.val_pred_cirs, res.val_label_cirs, cfg.include_aod)
    write_report(report, out, "val_metrics")
    plotting.plot_delay_scatter(report, out / "val_avg_delay.png")
    print(f"train: val loss {res.baseline_val_loss:.4g} -> {res.final_val_loss:.4g}, "
          f"RCM {report.rcm_error_db:.2f} dB, avg delay {report.avg_delay_error_ns:.3f} ns -> {out / 'trained.json'}")
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    env = load_environment(cfg.scene_path)
    txs, rxs = cfg.tx_configs(), cfg.rx_configs()
    if args.model == "oracle":
        model, refine = FresnelOracle(env, cfg.humidity, cfg.frequency_hz), True
    else:
        model, refine = NeuralInteractionModel(load_checkpoint(args.model)), False
    res = trace_multi(env, txs, rxs, model, cfg.limits, cfg.angular_spacing, refine, cfg.capture_factor)
    out = cfg.out_dir() / "cir"
    n_paths = 0
    for (ti, rj), paths in sorted(res.items()):
        cir = render_cir(paths, txs[ti], rxs[rj], ti, rj)
        write_cir(cir, out)
        n_paths += len(cir.mpcs)
    digest = None if args.model == "oracle" else hashlib.sha256(Path(args.model).read_bytes()).hexdigest()
    _dump(out / "manifest.json", {"scene": str(cfg.scene_path), "model": args.model, "model_sha256": digest,
                                  "humidity": Humidity.parse(cfg.humidity).value,
                                  "txs": [t.position.tolist() for t in txs], "rxs": [r.position.tolist() for r in rxs]})
    print(f"simulate: {len(res)} Tx-Rx pairs, {n_paths} paths -> {out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    pred, label = read_cir_dir(args.pred), read_cir_dir(args.label)
    if not label:
        raise ConfigError(f"no CIR files in {args.label}")
    report = evaluate_cirs(pred, label, cfg.include_aod)
    out = cfg.out_dir()
    write_report(report, out)
    plotting.plot_delay_scatter(report, out / "avg_delay.png")
    first = sorted(label)[0]
    plotting.plot_pdp(pred.get(first), label[first], out / "pdp_example.png", f"Tx {first[0]} Rx {first[1]}")
    print(f"evaluate: overall {report.overall_error_db:.2f} dB, RCM {report.rcm_error_db:.2f} dB, "
          f"avg delay {report.avg_delay_error_ns:.3f} ns, matched {report.matched_fraction:.3f}")
    return 0


def bench_layouts(cfg: RunConfig):
    """Equal pair counts: one Tx against ``n`` shifted Rx grids, and ``n`` Tx against one grid."""
    n = cfg.bench_grids
    rxs = cfg.rx_configs()
    base_tx = cfg.tx_configs()[0]
    grid = np.array([r.position for r in rxs])
    span = np.ptp(grid[:, 0]) if len(grid) > 1 else 1.0
    shifts = [np.array([0.0, 0.0, 0.5 * i]) for i in range(n)]
    many_rx = [replace(r, position=r.position + s) for s in shifts for r in rxs]
    offsets = np.linspace(-0.25 * span, 0.25 * span, n) if n > 1 else np.zeros(1)
    many_tx = [replace(base_tx, position=base_tx.position + np.array([dx, 0.0, 0.0])) for dx in offsets]
    return ([base_tx], many_rx), (many_tx, rxs)


def cmd_bench(args, cfg: RunConfig) -> int:
    env = load_environment(cfg.scene_path)
    model = FresnelOracle(env, cfg.humidity, cfg.frequency_hz)
    (tx_a, rx_a), (tx_b, rx_b) = bench_layouts(cfg)
    rows = []
    for name, txs, rxs in ((f"1 Tx x {cfg.bench_grids} grids", tx_a, rx_a), (f"{cfg.bench_grids} Tx x 1 grid", tx_b, rx_b)):
        t0 = time.perf_counter()
        res = trace_multi(env, txs, rxs, model, cfg.limits, cfg.angular_spacing, False, cfg.capture_factor)
        seconds = time.perf_counter() - t0
        rows.append({"layout": name, "n_tx": len(txs), "n_rx": len(rxs), "pairs": len(txs) * len(rxs),
                     "paths": sum(len(v) for v in res.values()), "seconds": seconds})
    ratio = rows[1]["seconds"] / rows[0]["seconds"]
    out = cfg.out_dir()
    _dump(out / "bench.json", {"rows": rows, "ratio_multi_tx_over_multi_rx": ratio})
    _write_csv(out / "bench.csv", ["layout", "n_tx", "n_rx", "pairs", "paths", "seconds"],
               [[r["layout"], r["n_tx"], r["n_rx"], r["pairs"], r["paths"], f"{r['seconds']:.4f}"] for r in rows])
    plotting.plot_bench(rows, out / "bench.png")
    print(f"bench: {rows[0]['layout']} {rows[0]['seconds']:.3f} s, {rows[1]['layout']} {rows[1]['seconds']:.3f} s, "
          f"ratio {ratio:.2f}")
    return 0


COMMANDS = {"validate": cmd_validate, "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
            "simulate": cmd_simulate, "evaluate": cmd_evaluate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit (1 = reproducible)")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--out", default=None, help="output directory (overrides GENERT_OUT and the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="genert", description="Neural ray-tracing toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    v = sub.add_parser("validate", parents=[common], help="check a scene file")
    v.add_argument("scene", help="scene JSON path or bundled scene name")
    g = sub.add_parser("gen-data", parents=[common], help="generate pre-training or end-to-end datasets")
    g.add_argument("--mode", choices=["polarized", "e2e"], required=True)
    sub.add_parser("pretrain", parents=[common], help="layer-wise pre-training on oracle data")
    t = sub.add_parser("train", parents=[common], help="end-to-end training from receiver-side CIRs")
    t.add_argument("--trainable", choices=sorted(TRAINABLE_PRESETS), default="fusion")
    t.add_argument("--checkpoint", default=None, help="starting checkpoint (default <out>/pretrained.json)")
    s = sub.add_parser("simulate", parents=[common], help="trace CIRs with the oracle or a checkpoint")
    s.add_argument("--model", default="oracle", help="'oracle' or a checkpoint path")
    e = sub.add_parser("evaluate", parents=[common], help="metrics between two CIR directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--label", required=True)
    sub.add_parser("bench", parents=[common], help="time multi-Tx against multi-Rx layouts")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        for name in vars(cfg.seeds):
            setattr(cfg.seeds, name, args.seed)
    if args.out is not None:
        cfg.out_override = args.out
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"genert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.threads is not None:
            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](args, cfg)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"genert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenertError, OSError) as exc:
        print(f"genert: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODULE


if __name__ == "__main__":
    sys.exit(main())
