"""Evaluation metrics: ranking scores for link sets and predictive likelihood."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ParameterStore,
    SgrnnConfig,
    posterior_mean_chain,
    prepare_steps,
    transition_prior_stats,
)

__all__ = [
    "roc_auc",
    "average_precision",
    "evaluate_auc_ap",
    "estimate_nll",
    "pair_log_likelihood",
    "MetricsReport",
    "mean_std",
]


def _check_scores(pos_scores, neg_scores) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    return pos, neg


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(pos_scores, neg_scores) -> float:
    """Rank-statistic AUC; tied positive/negative pairs count one half."""
    pos, neg = _check_scores(pos_scores, neg_scores)
    ranks = _average_ranks(np.concatenate([pos, neg]))
    p = len(pos)
    u = ranks[:p].sum() - p * (p + 1) / 2.0
    return float(u / (p * len(neg)))


def average_precision(pos_scores, neg_scores) -> float:
    """Precision-weighted recall increments over the descending ranking.

    Tied scores are handled as one threshold group, so the value does not
    depend on any arbitrary ordering within ties.
    """
    pos, neg = _check_scores(pos_scores, neg_scores)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    y_sorted = labels[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)
    # last index of each distinct threshold
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.concatenate([ends, [len(s_sorted) - 1]])
    precision = tp[ends] / (tp[ends] + fp[ends])
    recall = tp[ends] / len(pos)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def evaluate_auc_ap(pos_scores, neg_scores) -> tuple[float, float]:
    return roc_auc(pos_scores, neg_scores), average_precision(pos_scores, neg_scores)


# -- predictive negative log-likelihood ---------------------------------------------


def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _log_sum_exp(values: np.ndarray) -> float:
    m = values.max()
    return float(m + np.log(np.sum(np.exp(values - m))))


def pair_log_likelihood(z: np.ndarray, pairs: np.ndarray, labels: np.ndarray) -> float:
    """Sum of Bernoulli log-likelihoods of labeled pairs under one latent draw."""
    logits = np.einsum("ij,ij->i", z[pairs[:, 0]], z[pairs[:, 1]])
    # log sigmoid(x) = -softplus(-x)
    ll = -np.where(labels > 0.5, _np_softplus(-logits), _np_softplus(logits))
    return float(ll.sum())


def _nll_from_prior(mu_p, sigma_p, pairs, labels, n_samples, rng, target_n) -> float:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if mu_p.shape[0] < target_n:
        pad = np.zeros((target_n - mu_p.shape[0], mu_p.shape[1]))
        mu_p = np.vstack([mu_p, pad])
        sigma_p = np.vstack([sigma_p, np.ones_like(pad)])
    log_liks = np.empty(n_samples)
    for k in range(n_samples):
        z = mu_p + sigma_p * rng.standard_normal(mu_p.shape)
        log_liks[k] = pair_log_likelihood(z, pairs, labels)
    # -log( (1/K) sum_k p(A|Z_k) ), reported per evaluated pair
    return -(_log_sum_exp(log_liks) - np.log(n_samples)) / len(pairs)


def estimate_nll(
    sequence,
    eval_sets,
    store: ParameterStore,
    config: SgrnnConfig,
    indices,
    n_samples: int = 16,
    seed: int = 0,
) -> tuple[dict[int, float], float]:
    """Monte-Carlo predictive NLL at the requested evaluation points.

    Latents are drawn from the per-step prior (conditioned on the posterior
    mean chain up to the previous step); the per-snapshot value is the
    log-mean-exp estimate over draws, normalized by the number of evaluated
    pairs, and the second return value is the sum across snapshots.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    per: dict[int, float] = {}
    if config.task == "detection":
        prep = prepare_steps(sequence, config, split=eval_sets, with_labels=False)
        chain = posterior_mean_chain(prep, store, config)
        for t in indices:
            part = eval_sets[t]
            pairs = np.asarray(list(part.test_pos) + list(part.test_neg), dtype=np.int64)
            labels = np.concatenate(
                [np.ones(len(part.test_pos)), np.zeros(len(part.test_neg))]
            )
            per[t] = _nll_from_prior(
                chain[t].mu_p, chain[t].sigma_p, pairs, labels, n_samples, rng,
                prep.steps[t].target_n,
            )
    else:
        for s in indices:
            tr = eval_sets[s]
            if tr.skipped:
                continue
            mu_p, sigma_p = transition_prior_stats(sequence, store, config, s)
            pairs = np.asarray(list(tr.positives) + list(tr.negatives), dtype=np.int64)
            labels = np.concatenate(
                [np.ones(len(tr.positives)), np.zeros(len(tr.negatives))]
            )
            per[s] = _nll_from_prior(
                mu_p, sigma_p, pairs, labels, n_samples, rng,
                sequence[s + 1].n_nodes,
            )
    return per, float(sum(per.values()))


# -- aggregation -----------------------------------------------------------------


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class MetricsReport:
    """Evaluation summary for one trained run."""

    auc_per_snapshot: dict[int, float]
    ap_per_snapshot: dict[int, float]
    nll_per_snapshot: dict[int, float] = field(default_factory=dict)
    kl_per_epoch: list[float] = field(default_factory=list)

    @property
    def auc(self) -> float:
        return float(np.mean(list(self.auc_per_snapshot.values())))

    @property
    def ap(self) -> float:
        return float(np.mean(list(self.ap_per_snapshot.values())))

    @property
    def nll(self) -> float:
        return float(sum(self.nll_per_snapshot.values()))
