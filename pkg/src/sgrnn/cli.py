"""Command-line experiment runner.

Subcommands:
  run       train/evaluate per the config file and/or flags
  generate  write a synthetic dynamic graph to a snapshot file
  info      print dataset statistics for a snapshot file

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .data import DatasetMeta, load_snapshots, save_snapshots, synthetic_dynamic_graph
from .experiment import (
    ExperimentConfig,
    load_experiment_config,
    resolve_out_dir,
    run_experiment,
)

__all__ = ["main", "build_parser", "parse_synthetic_spec"]

_SYNTH_FIELDS = {
    "n_nodes": int,
    "n_snapshots": int,
    "n_blocks": int,
    "p_in": float,
    "p_out": float,
    "drift_prob": float,
    "seed": int,
}


def parse_synthetic_spec(spec: str) -> dict:
    """Parse 'n_nodes=60,n_snapshots=8,...' into generator keyword arguments."""
    out = {}
    for item in spec.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ValueError(f"bad synthetic field {item!r}; expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in _SYNTH_FIELDS:
            raise ValueError(
                f"unknown synthetic field {key!r}; valid: {sorted(_SYNTH_FIELDS)}"
            )
        out[key] = _SYNTH_FIELDS[key](value)
    required = {"n_nodes", "n_snapshots", "n_blocks", "p_in", "p_out", "drift_prob"}
    missing = required - set(out)
    if missing:
        raise ValueError(f"synthetic spec missing fields: {sorted(missing)}")
    out.setdefault("seed", 0)
    return out


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgrnn", description="dynamic-graph link detection and prediction"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", help="TOML experiment file")
    run.add_argument("--name", help="experiment name (result file stem)")
    run.add_argument("--task", choices=["detection", "prediction", "new_prediction"])
    run.add_argument("--dataset", help="snapshot file path")
    run.add_argument("--synthetic", help="synthetic spec: n_nodes=60,n_snapshots=8,...")
    run.add_argument("--gnn", choices=["gcn", "sage", "gin"])
    run.add_argument("--variant", choices=["plain", "fixed_bn", "res", "no_std"])
    run.add_argument("--gamma", type=float)
    run.add_argument("--sivi", action="store_true", default=None)
    run.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    run.add_argument("--epochs", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--patience", type=int)
    run.add_argument("--n-test-snapshots", type=int, dest="n_test_snapshots")
    run.add_argument("--sweep", choices=["gamma", "variant"])
    run.add_argument("--out", help="output directory (SGRNN_OUT_DIR also honored)")
    run.add_argument("--quiet", action="store_true")

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--synthetic", required=True)
    gen.add_argument("--out", required=True, help="snapshot file to write")

    info = sub.add_parser("info", help="print dataset statistics")
    info.add_argument("--dataset", required=True)
    return parser


def _merge_run_config(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for key in ("name", "task", "dataset", "gnn", "variant", "gamma", "sivi",
                "epochs", "lr", "patience", "n_test_snapshots", "sweep"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.synthetic is not None:
        overrides["synthetic"] = parse_synthetic_spec(args.synthetic)
        overrides.setdefault("dataset", None)
    if args.seeds is not None:
        overrides["seeds"] = _parse_seeds(args.seeds)
    cfg = replace(cfg, **overrides)
    cfg = replace(cfg, out=resolve_out_dir(args.out, cfg.out))
    cfg.validate()
    if cfg.dataset is not None and not Path(cfg.dataset).exists():
        raise ValueError(f"dataset file not found: {cfg.dataset}")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; those are configuration errors here
        return 0 if exc.code == 0 else 1

    try:
        if args.command == "run":
            cfg = _merge_run_config(args)
        elif args.command == "generate":
            spec = parse_synthetic_spec(args.synthetic)
        # config validated; failures past this point are runtime errors
    except (ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "run":
            results, paths = run_experiment(cfg, verbose=not args.quiet)
            print(f"wrote {paths['csv']} and {paths['json']}")
            return 0
        if args.command == "generate":
            seq = synthetic_dynamic_graph(**spec)
            save_snapshots(seq, args.out)
            meta = DatasetMeta.from_sequence("synthetic", seq)
            print(
                f"wrote {args.out}: T={meta.T} nodes={meta.node_counts[0]} "
                f"edges={min(meta.edge_counts)}-{max(meta.edge_counts)} "
                f"density={meta.density:.5f}"
            )
            return 0
        if args.command == "info":
            seq = load_snapshots(args.dataset)
            meta = seq.meta(name=args.dataset)
            print(f"dataset: {meta.name}")
            print(f"snapshots: {meta.T}")
            print(f"nodes: {min(meta.node_counts)}-{max(meta.node_counts)}")
            print(f"edges: {min(meta.edge_counts)}-{max(meta.edge_counts)}")
            print(f"average density: {meta.density:.5f}")
            return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
