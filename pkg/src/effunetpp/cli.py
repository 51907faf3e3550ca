"""
Command-line entry point: ``effunetpp {train,eval,sweep,pareto,synth,describe}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Pretrained encoder weights are cached under ``$TORCH_HOME``.
"""

from __future__ import annotations

import argparse
import csv
import glob
import itertools
import json
import logging
import os
import platform
import subprocess
import sys
import time
import traceback
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .analysis import SUMMARY_FIELDS, count_flops, decoder_cost, emit_report, pareto_frontier, points_from_rows, read_summary
from .architecture import ModelSpec, build_decoder_graph, build_model
from .config import ExperimentConfig, apply_overrides, load_config, load_raw, overrides_from_argv
from .data import generate_dataset, read_dataset, write_dataset
from .exceptions import ConfigError, ContractError, DataError, NumericError
from .training import _atomic_json, evaluate, load_checkpoint, run_triplicate, train

log = logging.getLogger("effunetpp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# --------------------------------------------------------------------------
# run-directory bookkeeping


def _git_revision() -> Optional[str]:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def environment_manifest(seeds: Sequence[int] = ()) -> Dict:
    return {
        "package_version": __version__,
        "git_revision": _git_revision(),
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "cuda_available": torch.cuda.is_available(),
        "num_threads": torch.get_num_threads(),
        "deterministic_algorithms": torch.are_deterministic_algorithms_enabled(),
        "torch_home": os.environ.get("TORCH_HOME"),
        "seeds": list(seeds),
        "argv": sys.argv,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def write_run_state(run_dir, cfg: ExperimentConfig, seeds: Sequence[int]):
    os.makedirs(run_dir, exist_ok=True)
    cfg.dump(os.path.join(run_dir, "config.yaml"))
    _atomic_json(os.path.join(run_dir, "environment.json"), environment_manifest(seeds))


def _load_split(cfg: ExperimentConfig, split: str):
    if not cfg.data.dir:
        raise ConfigError("data.dir is required")
    if not os.path.isdir(cfg.data.dir):
        raise DataError(f"data directory not found: {cfg.data.dir}")
    samples = read_dataset(cfg.data.dir, split)
    if not samples:
        raise DataError(f"no images with split {split!r} in {cfg.data.dir}")
    return samples


def _resolve(args, extra) -> ExperimentConfig:
    overrides = overrides_from_argv(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"output_dir={args.out}")
    if getattr(args, "device", None):
        overrides.append(f"train.device={args.device}")
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args, extra) -> int:
    cfg = _resolve(args, extra)
    train_set = _load_split(cfg, cfg.data.split)
    test_set = read_dataset(cfg.data.dir, cfg.data.test_split) if cfg.data.test_split else []
    run_dir = cfg.output_dir
    write_run_state(run_dir, cfg, [cfg.seed])
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model)
    record = train(model, train_set, cfg.train, cfg.loss, cfg.data.policy, cfg.seed, run_dir, test_set=test_set or None)
    print(f"best val gds {record.best_val_gds:.4f} at epoch {record.best_epoch}; checkpoint {record.checkpoint}")
    if record.test:
        print(f"test gds {record.test['gds']:.4f}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
    spec = None
    if args.config:
        spec = load_config(args.config).model
    if not os.path.isfile(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint, spec)
    if not os.path.isdir(args.data):
        raise DataError(f"data directory not found: {args.data}")
    split = None if args.split == "all" else args.split
    samples = read_dataset(args.data, split)
    if not samples:
        raise DataError(f"no images with split {args.split!r} in {args.data}")
    records, mean = evaluate(model, samples, args.device or "cpu")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    os.makedirs(out, exist_ok=True)
    fieldnames = ["stem"] + list(records[0])
    tmp = os.path.join(out, f"per_image.csv.tmp{os.getpid()}")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for s, r in zip(samples, records):
            w.writerow({"stem": s.meta.get("stem", ""), **r})
    os.replace(tmp, os.path.join(out, "per_image.csv"))
    _atomic_json(os.path.join(out, "aggregate.json"), {"n_images": len(records), **mean})
    print(json.dumps({"n_images": len(records), **{k: round(v, 4) for k, v in mean.items()}}))
    return EXIT_OK


def _expand_grid(base_raw: Dict, grid: Sequence[str], out_dir: str) -> str:
    """Write one config per grid combination; returns the directory holding them."""
    axes = []
    for g in grid:
        if "=" not in g:
            raise ConfigError(f"grid axis {g!r} is not of the form key.path=v1,v2")
        key, values = g.split("=", 1)
        axes.append([f"{key}={v}" for v in values.split(",") if v != ""])
    cfg_dir = os.path.join(out_dir, "configs")
    os.makedirs(cfg_dir, exist_ok=True)
    for combo in itertools.product(*axes):
        raw = apply_overrides(base_raw, combo)
        ExperimentConfig.from_dict(raw)  # validate before anything runs
        label = "__".join(c.split("=", 1)[1].replace("/", "-") for c in combo) or "base"
        with open(os.path.join(cfg_dir, f"{label}.yaml"), "w") as fh:
            yaml.safe_dump(raw, fh, sort_keys=False)
    return cfg_dir


def _cell_row(label: str, cfg: ExperimentConfig, status: str, summary=None, n_runs=0, error="") -> Dict:
    row = {
        "label": label,
        "encoder": cfg.model.encoder_id,
        "decoder": cfg.model.decoder_family,
        "attention": cfg.model.attention,
        "runs": n_runs,
        "status": status,
        "error": error,
    }
    if summary:
        for k, (m, s) in summary.items():
            if k == "gds":
                row["gds_mean"], row["gds_std"] = m, s
            else:
                row[f"{k}_mean"], row[f"{k}_std"] = m, s
    return row


def _collect_cells(out_dir) -> List[Dict]:
    rows = []
    for path in sorted(glob.glob(os.path.join(out_dir, "cells", "*", "cell.json"))):
        with open(path) as fh:
            rows.append(json.load(fh))
    return rows


def _write_sweep_summary(out_dir):
    rows = _collect_cells(out_dir)
    emit_report(rows, out_dir)
    return rows


def _cell_cost(cfg: ExperimentConfig, size) -> Dict:
    model = build_model(ModelSpec.from_dict({**cfg.model.to_dict(), "pretrained": False}))
    report = count_flops(model, size)
    dparams, dflops = decoder_cost(model, size)
    return {"params": report.params, "flops": report.flops, "decoder_params": dparams, "decoder_flops": dflops}


def cmd_sweep(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    cfg_dir = args.configs
    if args.base:
        cfg_dir = _expand_grid(load_raw(args.base), args.grid or [], out_dir)
    if not cfg_dir or not os.path.isdir(cfg_dir):
        raise ConfigError("sweep needs --configs DIR or --base FILE")
    paths = sorted(glob.glob(os.path.join(cfg_dir, "*.yaml")) + glob.glob(os.path.join(cfg_dir, "*.yml")))
    if not paths:
        raise ConfigError(f"no configs in {cfg_dir}")
    # validate every cell before any training
    cells = []
    for p in paths:
        overrides = [f"train.device={args.device}"] if args.device else []
        cells.append((os.path.splitext(os.path.basename(p))[0], load_config(p, overrides)))
    n_failed = 0
    for label, cfg in cells:
        cell_dir = os.path.join(out_dir, "cells", label)
        state_path = os.path.join(cell_dir, "cell.json")
        if os.path.isfile(state_path):
            with open(state_path) as fh:
                prev = json.load(fh)
            if prev.get("status") == "ok" and not args.force:
                log.info("skipping completed cell %s", label)
                continue
            if prev.get("status") == "running":
                # left behind by a killed process
                log.warning("cell %s was interrupted; rerunning", label)
                _atomic_json(state_path, {**prev, "status": "failed", "error": "interrupted"})
        write_run_state(cell_dir, cfg, cfg.train.seeds)
        _atomic_json(state_path, _cell_row(label, cfg, "running"))
        try:
            train_set = _load_split(cfg, cfg.data.split)
            test_set = _load_split(cfg, cfg.data.test_split)
            size = tuple(train_set[0].image.shape)
            summary, records = run_triplicate(cfg.model, train_set, test_set, cfg.train, cfg.loss, cfg.data.policy, cell_dir)
            row = _cell_row(label, cfg, "ok", summary, len(records))
            row.update(_cell_cost(cfg, size))
        except KeyboardInterrupt:
            _atomic_json(state_path, _cell_row(label, cfg, "failed", error="interrupted"))
            _write_sweep_summary(out_dir)
            raise
        except Exception as exc:  # a failed cell must not stop the sweep
            n_failed += 1
            log.error("cell %s failed: %s", label, exc)
            row = _cell_row(label, cfg, "failed", error=f"{type(exc).__name__}: {exc}")
            with open(os.path.join(cell_dir, "error.txt"), "w") as fh:
                fh.write(traceback.format_exc())
        _atomic_json(state_path, row)
        _write_sweep_summary(out_dir)
    rows = _write_sweep_summary(out_dir)
    print(f"{len(rows)} cells, {n_failed} failed; summary at {os.path.join(out_dir, 'summary.csv')}")
    return EXIT_OK


def cmd_pareto(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
    if not os.path.isfile(args.summary):
        raise DataError(f"summary not found: {args.summary}")
    rows = read_summary(args.summary)
    missing = [c for c in SUMMARY_FIELDS if rows and c not in rows[0]]
    if missing:
        raise DataError(f"{args.summary} lacks column(s): {', '.join(missing)}")
    points = points_from_rows(rows)
    if not points:
        raise DataError(f"{args.summary} has no completed rows")
    emit_report(rows, args.out or os.path.dirname(os.path.abspath(args.summary)))
    for p in pareto_frontier(points, args.cost):
        print(f"{p.label}\tgds={p.gds:.4f}\t{args.cost}={getattr(p, args.cost):.4g}")
    return EXIT_OK


def cmd_synth(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
    if args.count <= 0:
        raise ConfigError("--count must be positive")
    samples = generate_dataset(args.count, args.size, args.seed, args.mm_per_px, args.test_fraction)
    write_dataset(samples, args.out)
    n_test = sum(s.meta["split"] == "test" for s in samples)
    print(f"wrote {len(samples)} phantoms ({n_test} test) to {args.out}")
    return EXIT_OK


def cmd_describe(args, extra) -> int:
    cfg = _resolve(args, extra)
    spec = ModelSpec.from_dict({**cfg.model.to_dict(), "pretrained": False})
    model = build_model(spec)
    graph = build_decoder_graph(spec, model.encoder.out_channels)
    print(f"encoder {spec.encoder_id}: stages {model.encoder.out_channels}")
    print(f"decoder {spec.decoder_family} (attention {spec.attention}), widths {list(spec.decoder_widths)}")
    print(graph.describe())
    report = count_flops(model, args.size)
    dparams, dflops = decoder_cost(model, args.size)
    print(f"params total {report.params:,} (decoder+head {dparams:,})")
    print(f"FLOPs at {args.size}x{args.size}: total {report.flops:,} (decoder+head {dflops:,})")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effunetpp", description="Nested-decoder segmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--device")

    p = sub.add_parser("train", help="train one config; extra --section.key VALUE pairs override the config")
    common(p, config_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", help="split name, or 'all'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run every config in a directory in triplicate")
    p.add_argument("--configs", help="directory of cell configs")
    p.add_argument("--base", help="base config expanded with --grid")
    p.add_argument("--grid", action="append", help="key.path=v1,v2 (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--device")
    p.add_argument("--force", action="store_true", help="rerun completed cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pareto", help="frontier and plots from a sweep summary")
    p.add_argument("--summary", required=True)
    p.add_argument("--out")
    p.add_argument("--cost", choices=("flops", "params"), default="flops")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mm-per-px", type=float, default=None)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("describe", help="print the decoder graph and cost of a model")
    common(p)
    p.add_argument("--size", type=int, default=512)
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
