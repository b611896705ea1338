"""Optimization loop: Adam updates, early stopping, and run bookkeeping."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from .data import EdgeSplit, PredictionTargets
from .metrics import roc_auc
from .model import (
    ElboTerms,
    ParameterStore,
    PreparedSequence,
    SgrnnConfig,
    elbo_loss,
    init_parameters,
    posterior_mean_chain,
    prepare_steps,
    window_prior_stats,
)

__all__ = [
    "TrainConfig",
    "AdamState",
    "RunRecord",
    "TrainingDivergedError",
    "adam_step",
    "early_stopping_check",
    "train",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 1500
    patience: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_test_snapshots: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, store: ParameterStore) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in store.items()},
            v={k: np.zeros_like(v) for k, v in store.items()},
        )


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[ParameterStore, AdamState]:
    """Standard bias-corrected adaptive-moment update, applied in place."""
    if set(grads.keys()) != set(store.keys()):
        missing = set(store.keys()) ^ set(grads.keys())
        raise ValueError(f"gradient keys do not match parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for key in store.keys():
        g = grads[key]
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = state.m[key] / (1 - b1**t)
        v_hat = state.v[key] / (1 - b2**t)
        store[key] = store[key] - config.learning_rate * m_hat / (
            np.sqrt(v_hat) + config.eps
        )
    return store, state


def early_stopping_check(history, patience: int) -> tuple[bool, int]:
    """Decide whether to continue from a validation-metric history.

    Epochs are 1-based. Ties do not count as improvement. Returns
    (continue, best_epoch); training stops once at least max(1, patience)
    epochs have passed since the best epoch, so patience 0 stops exactly one
    epoch after the best.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    best_epoch = 1 + int(np.argmax(history))  # argmax takes the first maximum
    since_best = len(history) - best_epoch
    return since_best < max(1, patience), best_epoch


@dataclass
class RunRecord:
    """Per-epoch trajectory and outcome of one training run."""

    model_config: dict
    train_config: dict
    loss_per_epoch: list[float] = field(default_factory=list)
    recon_per_epoch: list[float] = field(default_factory=list)
    kl_per_epoch: list[float] = field(default_factory=list)
    val_auc_per_epoch: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    epochs_run: int = 0
    wall_seconds: float = 0.0

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self)), encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _detection_val_sets(split: EdgeSplit, snapshots) -> tuple[list, list]:
    pos, neg = [], []
    for t in snapshots:
        pos.extend(split[t].val_pos)
        neg.extend(split[t].val_neg)
    return pos, neg


def _pooled_scores(chain, split, snapshots, latent_dim) -> tuple[np.ndarray, np.ndarray]:
    from .model import EdgeScores

    pos_scores, neg_scores = [], []
    for t in snapshots:
        z = chain[t].mu_q
        scores = EdgeScores(z)
        if split[t].val_pos:
            pos_scores.append(scores.score_pairs(split[t].val_pos))
        if split[t].val_neg:
            neg_scores.append(scores.score_pairs(split[t].val_neg))
    pos = np.concatenate(pos_scores) if pos_scores else np.zeros(0)
    neg = np.concatenate(neg_scores) if neg_scores else np.zeros(0)
    return pos, neg


def train(
    sequence,
    eval_sets,
    model_config: SgrnnConfig,
    train_config: TrainConfig,
) -> tuple[ParameterStore, RunRecord]:
    """Full-sequence gradient training with validation-based early stopping.

    detection is transductive: every snapshot's train-edge graph enters the
    bound, the 5% val edges drive early stopping, and the 10% test edges
    stay unseen until final scoring (the test snapshots only select where
    metrics are reported). prediction modes use a strict temporal split: the
    step just before the test range is reserved for validation and excluded
    from the bound.

    Returns the parameters from the best validation epoch.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(train_config.seed)
    n_test = train_config.n_test_snapshots

    if model_config.task == "detection":
        if not isinstance(eval_sets, EdgeSplit):
            raise ValueError("detection training needs an EdgeSplit")
        if sequence.T - n_test < 1:
            raise ValueError(
                f"sequence too short: {sequence.T} snapshots with {n_test} for test"
            )
        prep = prepare_steps(sequence, model_config, split=eval_sets)
        train_snapshots = list(range(sequence.T))
        val_pos, val_neg = _detection_val_sets(eval_sets, train_snapshots)
        if not val_pos or not val_neg:
            raise ValueError("validation sets are empty")
    else:
        if not isinstance(eval_sets, PredictionTargets):
            raise ValueError("prediction training needs PredictionTargets")
        total_steps = sequence.T - 1
        val_step = total_steps - n_test - 1
        if val_step < 1:
            raise ValueError(
                f"sequence too short for prediction: {sequence.T} snapshots"
            )
        prep = prepare_steps(sequence, model_config, upto=val_step)
        val_prep = prepare_steps(
            sequence, model_config, upto=val_step + 1, with_labels=False
        )
        val_targets = eval_sets[val_step]
        if val_targets.skipped:
            raise ValueError("validation transition has no target edges")

    input_dim = max(sequence.input_dims())
    store = init_parameters(model_config, input_dim, rng)
    state = AdamState.fresh(store)
    record = RunRecord(
        model_config=asdict(model_config), train_config=asdict(train_config)
    )
    best_store = store.copy()
    best_auc = -np.inf

    for epoch in range(1, train_config.epochs + 1):
        tape = Tape()
        tp = store.watch(tape)
        terms = elbo_loss(prep, tp, model_config, rng)
        loss_val = float(terms.loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(epoch)
        grads_map = backward(tape, terms.loss)
        grads = {k: grads_map.wrt(t) for k, t in tp.items()}
        adam_step(store, grads, state, train_config)

        if model_config.task == "detection":
            chain = posterior_mean_chain(prep, store, model_config)
            pos, neg = _pooled_scores(
                chain, eval_sets, train_snapshots, model_config.latent_dim
            )
            val_auc = roc_auc(pos, neg)
        else:
            from .model import _pair_scores

            mu_p, _ = window_prior_stats(val_prep, store, model_config)
            target_n = sequence[val_step + 1].n_nodes
            pos = _pair_scores(mu_p, val_targets.positives, target_n)
            neg = _pair_scores(mu_p, val_targets.negatives, target_n)
            val_auc = roc_auc(pos, neg)

        record.loss_per_epoch.append(loss_val)
        record.recon_per_epoch.append(float(sum(terms.recon_ll)))
        record.kl_per_epoch.append(float(sum(terms.kl)))
        record.val_auc_per_epoch.append(float(val_auc))
        if val_auc > best_auc:
            best_auc = float(val_auc)
            best_store = store.copy()
        keep_going, best_epoch = early_stopping_check(
            record.val_auc_per_epoch, train_config.patience
        )
        record.best_epoch = best_epoch
        record.best_val_auc = best_auc
        record.epochs_run = epoch
        if not keep_going:
            break

    record.wall_seconds = time.perf_counter() - t_start
    return best_store, record
