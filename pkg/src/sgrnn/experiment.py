"""Experiment pipeline: config handling, multi-seed runs, sweeps, result files."""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    SnapshotSequence,
    build_prediction_targets,
    load_snapshots,
    split_edges_detection,
    synthetic_dynamic_graph,
)
from .metrics import estimate_nll, evaluate_auc_ap, mean_std
from .model import SgrnnConfig, rollout_predict
from .training import TrainConfig, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "load_experiment_config",
    "run_experiment",
    "run_single",
    "emit_results",
    "load_results",
    "CSV_COLUMNS",
]

CSV_COLUMNS = [
    "dataset",
    "task",
    "variant",
    "gnn_type",
    "gamma",
    "seed",
    "auc",
    "ap",
    "nll",
    "best_epoch",
    "wall_seconds",
]

GAMMA_GRID_DEFAULT = [0.6, 0.7, 0.8, 0.9, 1.0]
VARIANT_GRID_DEFAULT = ["fixed_bn", "res", "no_std"]


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: str | None = None
    synthetic: dict | None = None
    task: str = "detection"
    gnn: str = "gcn"
    variant: str = "fixed_bn"
    gamma: float = 0.8
    sivi: bool = False
    hidden_dim: int = 32
    latent_dim: int = 20
    epochs: int = 1500
    lr: float = 0.01
    patience: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    val_frac: float = 0.05
    test_frac: float = 0.10
    n_test_snapshots: int = 3
    nll_samples: int = 16
    out: str = "results"
    sweep: str | None = None
    gamma_grid: list[float] = field(default_factory=lambda: list(GAMMA_GRID_DEFAULT))
    variant_grid: list[str] = field(default_factory=lambda: list(VARIANT_GRID_DEFAULT))

    def validate(self) -> None:
        if self.task not in ("detection", "prediction", "new_prediction"):
            raise ValueError(f"unknown task {self.task!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.dataset is None and self.synthetic is None:
            raise ValueError("either a dataset path or a synthetic spec is required")
        if self.sweep not in (None, "gamma", "variant"):
            raise ValueError("sweep must be 'gamma' or 'variant'")

    def load_sequence(self) -> SnapshotSequence:
        if self.dataset is not None:
            return load_snapshots(self.dataset)
        return synthetic_dynamic_graph(**self.synthetic)

    def dataset_name(self) -> str:
        if self.dataset is not None:
            return Path(self.dataset).stem
        return "synthetic"


def load_experiment_config(path) -> ExperimentConfig:
    """Read a TOML experiment file; unknown keys are rejected."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw)


@dataclass
class RunResult:
    dataset: str
    task: str
    variant: str
    gnn_type: str
    gamma: float
    sivi: bool
    seed: int
    auc: float
    ap: float
    nll: float
    best_epoch: int
    wall_seconds: float
    auc_per_snapshot: dict = field(default_factory=dict)
    ap_per_snapshot: dict = field(default_factory=dict)
    loss_per_epoch: list = field(default_factory=list)
    kl_per_epoch: list = field(default_factory=list)
    val_auc_per_epoch: list = field(default_factory=list)


def run_single(sequence: SnapshotSequence, cfg: ExperimentConfig, seed: int) -> RunResult:
    """Split, train, and evaluate one seed of the configured experiment."""
    model_cfg = SgrnnConfig(
        hidden_dim=cfg.hidden_dim,
        latent_dim=cfg.latent_dim,
        gnn_type=cfg.gnn,
        posterior_variant=cfg.variant,
        gamma=cfg.gamma,
        task=cfg.task,
        sivi=cfg.sivi,
    )
    train_cfg = TrainConfig(
        learning_rate=cfg.lr,
        epochs=cfg.epochs,
        patience=cfg.patience,
        seed=seed,
        n_test_snapshots=cfg.n_test_snapshots,
    )
    if cfg.task == "detection":
        eval_sets = split_edges_detection(sequence, cfg.val_frac, cfg.test_frac, seed=seed)
        test_indices = list(range(sequence.T - cfg.n_test_snapshots, sequence.T))
    else:
        eval_sets = build_prediction_targets(
            sequence, new_only=(cfg.task == "new_prediction"), seed=seed
        )
        total_steps = sequence.T - 1
        test_indices = list(range(total_steps - cfg.n_test_snapshots, total_steps))

    t0 = time.perf_counter()
    params, record = train(sequence, eval_sets, model_cfg, train_cfg)
    scores = rollout_predict(sequence, eval_sets, params, model_cfg, test_indices)
    auc_per, ap_per = {}, {}
    for t, (pos, neg) in scores.items():
        auc_per[t], ap_per[t] = evaluate_auc_ap(pos, neg)
    nll_per, nll_sum = estimate_nll(
        sequence, eval_sets, params, model_cfg,
        [t for t in test_indices if t in scores],
        n_samples=cfg.nll_samples, seed=seed,
    )
    wall = time.perf_counter() - t0

    return RunResult(
        dataset=cfg.dataset_name(),
        task=cfg.task,
        variant=cfg.variant,
        gnn_type=cfg.gnn,
        gamma=cfg.gamma,
        sivi=cfg.sivi,
        seed=seed,
        auc=float(np.mean(list(auc_per.values()))),
        ap=float(np.mean(list(ap_per.values()))),
        nll=nll_sum,
        best_epoch=record.best_epoch,
        wall_seconds=wall,
        auc_per_snapshot={int(k): v for k, v in auc_per.items()},
        ap_per_snapshot={int(k): v for k, v in ap_per.items()},
        loss_per_epoch=record.loss_per_epoch,
        kl_per_epoch=record.kl_per_epoch,
        val_auc_per_epoch=record.val_auc_per_epoch,
    )


def _sweep_configs(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    if cfg.sweep is None:
        return [cfg]
    if cfg.sweep == "gamma":
        return [replace(cfg, sweep=None, gamma=g) for g in cfg.gamma_grid]
    return [replace(cfg, sweep=None, variant=v) for v in cfg.variant_grid]


def run_experiment(cfg: ExperimentConfig, verbose: bool = True) -> tuple[list[RunResult], dict]:
    """Run every (config point, seed) pair and write the result files."""
    cfg.validate()
    sequence = cfg.load_sequence()
    results: list[RunResult] = []
    for point in _sweep_configs(cfg):
        for seed in cfg.seeds:
            res = run_single(sequence, point, seed)
            results.append(res)
            if verbose:
                print(
                    f"[{res.dataset}/{res.task}] variant={res.variant} gnn={res.gnn_type} "
                    f"gamma={res.gamma} seed={res.seed}: "
                    f"AUC={100*res.auc:.2f} AP={100*res.ap:.2f} NLL={res.nll:.4f} "
                    f"best_epoch={res.best_epoch} ({res.wall_seconds:.1f}s)"
                )
    paths = emit_results(results, cfg.out, cfg.name)
    return results, paths


def _group_key(r: RunResult):
    return (r.dataset, r.task, r.variant, r.gnn_type, r.gamma, r.sivi)


def _csv_row(r: RunResult) -> list[str]:
    return [
        r.dataset,
        r.task,
        r.variant,
        r.gnn_type,
        repr(float(r.gamma)),
        str(r.seed),
        repr(100.0 * r.auc),
        repr(100.0 * r.ap),
        repr(float(r.nll)),
        str(r.best_epoch),
        repr(float(r.wall_seconds)),
    ]


def emit_results(results: list[RunResult], out_dir, name: str) -> dict:
    """Write per-seed and aggregated rows as CSV, and full trajectories as JSON.

    Aggregate rows use the 'mean±std' two-decimal style (AUC/AP in percent)
    and carry 'agg' in the seed column.
    """
    if not results:
        raise ValueError("no results to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    json_path = out / f"{name}.json"

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow(_csv_row(r))
        groups: dict = {}
        for r in results:
            groups.setdefault(_group_key(r), []).append(r)
        for key, rows in groups.items():
            auc_m, auc_s = mean_std([100.0 * r.auc for r in rows])
            ap_m, ap_s = mean_std([100.0 * r.ap for r in rows])
            nll_m, nll_s = mean_std([r.nll for r in rows])
            epoch_m, _ = mean_std([r.best_epoch for r in rows])
            wall_m, _ = mean_std([r.wall_seconds for r in rows])
            writer.writerow(
                [
                    key[0],
                    key[1],
                    key[2],
                    key[3],
                    repr(float(key[4])),
                    "agg",
                    f"{auc_m:.2f}±{auc_s:.2f}",
                    f"{ap_m:.2f}±{ap_s:.2f}",
                    f"{nll_m:.4f}±{nll_s:.4f}",
                    f"{epoch_m:.1f}",
                    f"{wall_m:.1f}",
                ]
            )

    payload = {"name": name, "results": [asdict(r) for r in results]}
    json_path.write_text(json.dumps(payload), encoding="utf-8")
    return {"csv": csv_path, "json": json_path}


def load_results(json_path) -> dict:
    return json.loads(Path(json_path).read_text(encoding="utf-8"))


def resolve_out_dir(flag_value: str | None, config_value: str | None) -> str:
    """Output directory precedence: CLI flag, then SGRNN_OUT_DIR, then config."""
    if flag_value:
        return flag_value
    env = os.environ.get("SGRNN_OUT_DIR")
    if env:
        return env
    return config_value or "results"
