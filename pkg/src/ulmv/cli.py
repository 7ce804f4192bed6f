"""Command line entry point: ``ulmv <command> ...``.

Exit codes: 0 success, 1 internal failure, 2 user or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as D
from .arch import TARGET_PARAM_COUNT, ModelConfig, calibrate, count_parameters, init_params
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, read_config, resolve
from .evaluation import evaluate_split
from .ssm import ScanInputs, selective_scan_parallel, selective_scan_sequential
from .train import ArrayDataset, predict, train_loop, write_run_config

log = logging.getLogger("ulmv")


class UsageError(Exception):
    pass


def cmd_preprocess(args) -> int:
    white, sat, tissue = args.white, args.min_saturation, args.min_tissue
    if args.roi_thresholds:
        try:
            white, sat, tissue = (float(v) for v in args.roi_thresholds.split(","))
        except ValueError:
            raise UsageError("--roi-thresholds expects WHITE,SATURATION,TISSUE") from None
    res = D.preprocess_directory(args.input, args.out, args.tile, args.resize, white, sat, tissue,
                                 args.seed, args.grouping)
    counts = {s: len(res.manifest.split(s)) for s in D.SPLITS}
    print(f"kept={res.kept} discarded={res.discarded} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"manifest: {Path(args.out) / 'manifest.csv'}")
    return 0


def _dataset(manifest, root, split, mean, std):
    records = manifest.split(split)
    if not records:
        return None
    return ArrayDataset(D.load_images(records, root, mean, std), [r.label for r in records])


def cmd_train(args) -> int:
    raw = read_config(args.config) if args.config else {}
    cfg, tcfg, paths = resolve(raw, args.preset)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    manifest_path = Path(args.manifest or paths["manifest"] or "")
    if not manifest_path.is_file():
        raise UsageError(f"manifest not found: {manifest_path}")
    out_dir = Path(args.out or paths["out_dir"] or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    root = manifest_path.parent
    norm = Path(paths["normalization"] or root / "normalization.txt")
    if not norm.is_file():
        raise UsageError(f"normalisation sidecar not found: {norm}")
    mean, std = D.read_normalization(norm)
    manifest = D.read_manifest(manifest_path)
    train = _dataset(manifest, root, "train", mean, std)
    if train is None:
        raise UsageError("manifest has no training records")
    val = _dataset(manifest, root, "val", mean, std)
    if train.images.shape[2:] != (cfg.input_size, cfg.input_size):
        raise UsageError(f"tiles are {train.images.shape[2:]}, model expects {cfg.input_size}")

    init = args.init_checkpoint or paths["init_checkpoint"]
    if init:
        ck_cfg, store = load_checkpoint(init)
        if ck_cfg != cfg:
            raise UsageError("initial checkpoint was built with a different model configuration")
    else:
        store = init_params(cfg, tcfg.seed)
    write_run_config(out_dir / "run_config.txt", model=cfg, train=tcfg,
                     paths=dict(manifest=str(manifest_path), out_dir=str(out_dir),
                                normalization=str(norm), init_checkpoint=init or ""))
    result = train_loop(store, cfg, tcfg, train, val, out_dir)
    final = result.swa_store or result.store
    probs = predict(final, cfg, train.images, tcfg.batch_size)
    acc = float(np.mean((probs >= 0.5) == (train.labels == 1)))
    summary = dict(epochs=len(result.history), final_train_loss=result.history[-1]["train_loss"],
                   final_val_acc=result.history[-1]["val_acc"], train_acc=acc,
                   final_checkpoint=str(out_dir / ("swa.ulmv" if result.swa_store else "last.ulmv")))
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    try:
        cfg, store = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        raise UsageError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    mean, std = D.read_normalization(args.normalization or root / "normalization.txt")
    report = evaluate_split(store, cfg, D.read_manifest(manifest_path), root, args.split,
                            mean, std, args.threshold, args.out)
    print(report.to_json())
    return 0


def cmd_count_params(args) -> int:
    cfg = resolve(read_config(args.config))[0] if args.config else ModelConfig()
    if args.calibrate:
        res = calibrate(cfg)
        print(f"calibrated: {res.config}")
        print(f"exact matches: {len(res.exact_matches)}")
        cfg = res.config
    total, breakdown = count_parameters(init_params(cfg))
    if args.breakdown:
        width = max(len(k) for k in breakdown)
        for module, n in breakdown.items():
            print(f"{module:<{width}}  {n:>8d}")
        print("-" * (width + 10))
    print(f"total={total}")
    delta = total - TARGET_PARAM_COUNT
    print(f"target={TARGET_PARAM_COUNT} delta={delta:+d}" + (" (exact)" if delta == 0 else ""))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import GradCheckResult, check_model_gradient, run_op_checks
    from .tensor import perturb_backward

    def run():
        res = run_op_checks(args.seed)
        if not args.skip_model:
            res.append(GradCheckResult("model_end_to_end", check_model_gradient(args.seed), 1e-4))
        return res

    if args.perturb:
        with perturb_backward(args.perturb, 1.01):
            results = run()
    else:
        results = run()
    for r in results:
        print(f"{r.name:<28s} rel_err={r.rel_error:.3e} tol={r.tolerance:.0e} "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def scan_bench(lengths, d_inner=16, d_state=8, batch=1, repeats=3, seed=0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        inp = ScanInputs(rng.standard_normal((batch, length, d_inner)),
                         rng.uniform(1e-3, 0.1, (batch, length, d_inner)),
                         rng.standard_normal((batch, length, d_state)),
                         rng.standard_normal((batch, length, d_state)))
        A = -np.exp(rng.standard_normal((d_inner, d_state)))
        Dskip = rng.standard_normal(d_inner)
        timings = {}
        outputs = {}
        for name, fn in (("sequential", selective_scan_sequential), ("parallel", selective_scan_parallel)):
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                outputs[name] = fn(inp, A, Dskip)
                best = min(best, time.perf_counter() - t0)
            timings[name] = best
        diff = float(np.max(np.abs(outputs["sequential"] - outputs["parallel"])))
        rows.append(dict(length=length, sequential_ms=1e3 * timings["sequential"],
                         parallel_ms=1e3 * timings["parallel"], max_abs_diff=diff,
                         parallel_tokens_per_s=batch * length / timings["parallel"]))
    return rows


def cmd_scan_bench(args) -> int:
    try:
        lengths = [int(v) for v in args.lengths.split(",")]
    except ValueError:
        raise UsageError("--lengths expects comma-separated integers") from None
    if any(n < 1 for n in lengths):
        raise UsageError("lengths must be positive")
    rows = scan_bench(lengths, args.d_inner, args.d_state, args.batch, args.repeats, args.seed)
    print(f"{'L':>6} {'seq_ms':>10} {'par_ms':>10} {'par_tok/s':>12} {'max_abs_diff':>13}")
    for r in rows:
        print(f"{r['length']:>6d} {r['sequential_ms']:>10.3f} {r['parallel_ms']:>10.3f} "
              f"{r['parallel_tokens_per_s']:>12.0f} {r['max_abs_diff']:>13.3e}")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2) + "\n")
    return 0 if all(r["max_abs_diff"] < 1e-10 for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ulmv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="tile, filter and split PNG rasters")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=int, default=1024)
    s.add_argument("--resize", type=int, default=224)
    s.add_argument("--roi-thresholds", help="WHITE,SATURATION,TISSUE")
    s.add_argument("--white", type=float, default=220)
    s.add_argument("--min-saturation", type=float, default=0.04)
    s.add_argument("--min-tissue", type=float, default=0.25)
    s.add_argument("--grouping", choices=("source", "tile"), default="source")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train the classifier")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("baseline100", "finetune300", "smoke"), default="baseline100")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--init-checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=D.SPLITS)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--normalization")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count-params", help="parameter audit")
    s.add_argument("--config")
    s.add_argument("--breakdown", action="store_true")
    s.add_argument("--calibrate", action="store_true", help="search the calibration grid first")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("gradcheck", help="finite-difference audit of every op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--skip-model", action="store_true")
    s.add_argument("--perturb", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("scan-bench", help="sequential vs parallel selective scan")
    s.add_argument("--lengths", default="64,256,1024,4096")
    s.add_argument("--d-inner", type=int, default=16)
    s.add_argument("--d-state", type=int, default=8)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json")
    s.set_defaults(func=cmd_scan_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
