"""Stochastic graph-recurrent model: prior, decoder, inference, and the ELBO.

The generative side keeps a deterministic recurrent state h_t (driven by a
graph layer over the task input u_t) separate from the stochastic latent
Z_t, which follows a learned diagonal-Gaussian transition. Inference runs a
reverse-time recurrence a_t so the posterior at step t conditions on the
present and future, and the posterior mean can be built in four ways:

  plain     mu_q = NN(Z_prev, a_t)
  fixed_bn  mu_q = mu_p + sigma_p * FixedBN(NN(Z_prev, a_t))
  res       mu_q = mu_p + NN(Z_prev, a_t)
  no_std    mu_q = mu_p + FixedBN(NN(Z_prev, a_t))

fixed_bn pins the batch statistic of (mu_q - mu_p) / sigma_p, which keeps
the per-step KL away from zero (floor sum_i (gamma^2 + beta_i^2) / 2).

Step conventions by task:
  detection:     step t consumes snapshot t (train edges) and reconstructs it;
                 inference transforms may read A_t.
  (new_)prediction: step s consumes snapshot s and reconstructs snapshot s+1;
                 inference transforms are fully connected so no graph mixing
                 ever touches a target-time adjacency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import FixedBNConfig, Tape, Tensor, fixed_batch_norm
from .data import EdgeSplit, PredictionTargets, SnapshotSequence
from .layers import (
    gcn_forward,
    gin_forward,
    normalize_adjacency,
    sage_forward,
)
from .sparse import CsrMatrix

__all__ = [
    "SgrnnConfig",
    "ParameterStore",
    "GaussianParams",
    "ElboTerms",
    "EdgeScores",
    "PreparedStep",
    "PreparedSequence",
    "init_parameters",
    "prepare_steps",
    "deterministic_states",
    "backward_inference_states",
    "prior_params",
    "posterior_params",
    "reparameterize",
    "decode",
    "pair_logits",
    "kl_diag_gaussian",
    "kl_floor",
    "elbo_loss",
    "sequence_elbo",
    "posterior_mean_chain",
    "rollout_predict",
    "window_prior_stats",
    "transition_prior_stats",
    "predict_transition_scores",
    "fixed_bn_statistic",
]

GNN_TYPES = ("gcn", "sage", "gin")
POSTERIOR_VARIANTS = ("plain", "fixed_bn", "res", "no_std")
TASKS = ("detection", "prediction", "new_prediction")


@dataclass
class SgrnnConfig:
    """Model hyperparameters; defaults follow the reference experimental setup."""

    hidden_dim: int = 32
    latent_dim: int = 20
    head_hidden: int = 32
    gnn_type: str = "gcn"
    posterior_variant: str = "fixed_bn"
    gamma: float = 0.8
    task: str = "detection"
    recurrent_cell: str = "gru"  # "gru" or "mlp"
    bn_epsilon: float = 1e-8
    sivi: bool = False
    sivi_layers: int = 1
    sivi_width: int = 32
    sivi_noise_dim: int = 20
    sivi_bn_mu: bool = False
    dense_recon_max_nodes: int = 1000

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.latent_dim <= 0 or self.head_hidden <= 0:
            raise ValueError("dimensions must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.gnn_type not in GNN_TYPES:
            raise ValueError(f"gnn_type must be one of {GNN_TYPES}")
        if self.posterior_variant not in POSTERIOR_VARIANTS:
            raise ValueError(f"posterior_variant must be one of {POSTERIOR_VARIANTS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.recurrent_cell not in ("gru", "mlp"):
            raise ValueError("recurrent_cell must be 'gru' or 'mlp'")
        if self.sivi_layers < 1 or self.sivi_width < 1 or self.sivi_noise_dim < 0:
            raise ValueError("sivi layer count and width must be positive")

    @property
    def graph_inference(self) -> bool:
        """Inference-side transforms read the step adjacency only in detection."""
        return self.task == "detection"

    @property
    def uses_fixed_bn(self) -> bool:
        if self.sivi:
            return self.sivi_bn_mu
        return self.posterior_variant in ("fixed_bn", "no_std")


@dataclass
class GaussianParams:
    """Per-node diagonal Gaussian (mu, sigma), sigma strictly positive."""

    mu: Tensor
    sigma: Tensor


@dataclass
class ElboTerms:
    """Per-step reconstruction and KL values plus the total bound."""

    recon_ll: list[float]
    kl: list[float]
    total: float
    loss: Tensor | None = None  # -total, still attached to the tape

    def __post_init__(self):
        expect = sum(r - k for r, k in zip(self.recon_ll, self.kl))
        if abs(expect - self.total) > 1e-9 * max(1.0, abs(self.total)):
            raise ValueError("total must equal sum(recon_ll - kl)")


# -- parameters -----------------------------------------------------------------


class ParameterStore:
    """Named float64 arrays for every learnable weight.

    The frozen batch-norm scale gamma is deliberately absent: it lives in
    the config and can never be updated.
    """

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        if key not in self._arrays:
            raise KeyError(f"unknown parameter {key!r}")
        self._arrays[key] = np.asarray(value, dtype=np.float64)

    def __contains__(self, key: str) -> bool:
        return key in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._arrays.items()})

    def watch(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.watch(v) for k, v in self._arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._arrays.items()}

    def n_values(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def save(self, path) -> None:
        payload = {
            "format_version": 1,
            "params": {
                k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                for k, v in self._arrays.items()
            },
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ParameterStore":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format_version") != 1:
            raise ValueError("unsupported checkpoint format version")
        arrays = {
            k: np.array(spec["values"], dtype=np.float64).reshape(spec["shape"])
            for k, spec in payload["params"].items()
        }
        return cls(arrays)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def _graph_layer_shapes(prefix: str, in_dim: int, out_dim: int, gnn_type: str):
    if gnn_type == "gcn":
        return [(f"{prefix}.w", (in_dim, out_dim))]
    if gnn_type == "sage":
        return [
            (f"{prefix}.w_self", (in_dim, out_dim)),
            (f"{prefix}.w_neigh", (in_dim, out_dim)),
        ]
    return [
        (f"{prefix}.w1", (in_dim, out_dim)),
        (f"{prefix}.w2", (out_dim, out_dim)),
        (f"{prefix}.eps", ()),
    ]


def _fc_shapes(prefix: str, in_dim: int, out_dim: int):
    return [(f"{prefix}.w", (in_dim, out_dim)), (f"{prefix}.b", (out_dim,))]


def _mlp2_shapes(prefix: str, in_dim: int, hidden: int, out_dim: int):
    return [
        (f"{prefix}.w1", (in_dim, hidden)),
        (f"{prefix}.b1", (hidden,)),
        (f"{prefix}.w2", (hidden, out_dim)),
        (f"{prefix}.b2", (out_dim,)),
    ]


def _gru_shapes(prefix: str, x_dim: int, h_dim: int):
    shapes = []
    for gate in ("r", "z", "h"):
        shapes += [
            (f"{prefix}.w{gate}", (x_dim, h_dim)),
            (f"{prefix}.u{gate}", (h_dim, h_dim)),
            (f"{prefix}.b{gate}", (h_dim,)),
        ]
    return shapes


def parameter_shapes(config: SgrnnConfig, input_dim: int) -> list[tuple[str, tuple]]:
    """Every learnable array, in a fixed order (drives deterministic init)."""
    h, d, hh = config.hidden_dim, config.latent_dim, config.head_hidden
    shapes: list[tuple[str, tuple]] = []
    shapes += _graph_layer_shapes("det_in", input_dim, h, config.gnn_type)
    if config.recurrent_cell == "gru":
        shapes += _gru_shapes("det_cell", h, h)
    else:
        shapes += _fc_shapes("det_cell", 2 * h, h)
    if config.graph_inference:
        shapes += _graph_layer_shapes("bwd_in", h + input_dim, h, config.gnn_type)
    else:
        shapes += _fc_shapes("bwd_in", h + input_dim, h)
    shapes += _gru_shapes("bwd_cell", h, h)
    shapes += _mlp2_shapes("prior_mu", d + h, hh, d)
    shapes += _mlp2_shapes("prior_sigma", d + h, hh, d)
    if config.sivi:
        width, noise = config.sivi_width, config.sivi_noise_dim
        for j in range(config.sivi_layers):
            in_dim = d + (h if j == 0 else width) + noise
            if config.graph_inference:
                shapes += _graph_layer_shapes(f"sivi.layer{j}", in_dim, width, config.gnn_type)
            else:
                shapes += _fc_shapes(f"sivi.layer{j}", in_dim, width)
        for head in ("sivi.mu", "sivi.sigma"):
            if config.graph_inference:
                shapes += _graph_layer_shapes(head, width, d, config.gnn_type)
            else:
                shapes += _fc_shapes(head, width, d)
    else:
        for head in ("post_mu", "post_sigma"):
            if config.graph_inference:
                shapes += _graph_layer_shapes(f"{head}.l1", d + h, hh, config.gnn_type)
                shapes += _graph_layer_shapes(f"{head}.l2", hh, d, config.gnn_type)
            else:
                shapes += _mlp2_shapes(head, d + h, hh, d)
    if config.uses_fixed_bn:
        shapes.append(("post_bn.beta", (d,)))
    return shapes


def init_parameters(
    config: SgrnnConfig, input_dim: int, rng: np.random.Generator
) -> ParameterStore:
    """Uniform fan-in init for weights; biases, shifts and GIN eps start at zero."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config, input_dim):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf == "eps" or leaf == "beta" or shape == ():
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = _uniform_init(rng, shape)
    return ParameterStore(arrays)


# -- prepared inputs -------------------------------------------------------------


@dataclass
class AdjacencyPack:
    raw: CsrMatrix
    norm: CsrMatrix

    @classmethod
    def from_edges(cls, n: int, edges) -> "AdjacencyPack":
        raw = CsrMatrix.from_edges(n, list(edges))
        return cls(raw=raw, norm=normalize_adjacency(raw))


@dataclass
class PreparedStep:
    index: int
    n: int
    feat: Tensor
    feat_dim: int
    u_adj: AdjacencyPack
    inf_adj: AdjacencyPack | None
    target_n: int | None = None
    labels: Tensor | None = None
    weights: Tensor | None = None
    norm_factor: float | None = None
    recon_pairs: tuple | None = None  # (pos_pairs, pos_weight) for the sparse path


@dataclass
class PreparedSequence:
    task: str
    steps: list[PreparedStep]

    def __len__(self) -> int:
        return len(self.steps)


def _features_of(snap) -> np.ndarray:
    if snap.attributes is not None:
        return np.asarray(snap.attributes, dtype=np.float64)
    return np.eye(snap.n_nodes, dtype=np.float64)


def _recon_targets(n: int, edges) -> tuple[Tensor, Tensor, float]:
    e = len(edges)
    if e == 0:
        raise ValueError("reconstruction target has no edges")
    labels = np.zeros((n, n))
    idx = np.asarray(list(edges), dtype=np.int64)
    labels[idx[:, 0], idx[:, 1]] = 1.0
    labels[idx[:, 1], idx[:, 0]] = 1.0
    n_pos = 2.0 * e
    pos_weight = (n * n - n_pos) / n_pos
    norm_factor = n * n / (2.0 * (n * n - n_pos))
    weights = 1.0 + labels * (pos_weight - 1.0)
    return Tensor(labels), Tensor(weights), norm_factor


def prepare_steps(
    sequence,
    config: SgrnnConfig,
    split: EdgeSplit | None = None,
    upto: int | None = None,
    with_labels: bool = True,
) -> PreparedSequence:
    """Build the per-step model inputs for the first `upto` steps.

    detection: one step per snapshot; the input (and reconstruction target)
    adjacency is the train-edge graph from `split`.
    prediction: step s reads snapshot s and targets snapshot s+1; there are
    T-1 steps in total and target adjacencies are only touched when labels
    are requested.
    """
    steps: list[PreparedStep] = []
    if config.task == "detection":
        total = sequence.T if upto is None else upto
        for t in range(total):
            snap = sequence[t]
            edges = split[t].train_edges if split is not None else snap.edges
            adj = AdjacencyPack.from_edges(snap.n_nodes, edges)
            feat = _features_of(snap)
            step = PreparedStep(
                index=t,
                n=snap.n_nodes,
                feat=Tensor(feat),
                feat_dim=feat.shape[1],
                u_adj=adj,
                inf_adj=adj,
                target_n=snap.n_nodes,
            )
            if with_labels:
                step.labels, step.weights, step.norm_factor = _recon_targets(
                    snap.n_nodes, edges
                )
                step.recon_pairs = tuple(edges)
            steps.append(step)
    else:
        total = sequence.T - 1 if upto is None else upto
        for s in range(total):
            snap = sequence[s]
            adj = AdjacencyPack.from_edges(snap.n_nodes, snap.edges)
            feat = _features_of(snap)
            step = PreparedStep(
                index=s,
                n=snap.n_nodes,
                feat=Tensor(feat),
                feat_dim=feat.shape[1],
                u_adj=adj,
                inf_adj=None,
                target_n=sequence[s + 1].n_nodes,
            )
            if with_labels:
                target = sequence[s + 1]
                step.labels, step.weights, step.norm_factor = _recon_targets(
                    target.n_nodes, target.edges
                )
                step.recon_pairs = tuple(target.edges)
            steps.append(step)
    return PreparedSequence(task=config.task, steps=steps)


# -- forward building blocks -------------------------------------------------------


def _sliced(w: Tensor, in_dim: int) -> Tensor:
    if w.shape[0] == in_dim:
        return w
    return ad.slice_rows(w, 0, in_dim)


def _graph_layer(
    tp: dict[str, Tensor],
    prefix: str,
    gnn_type: str,
    adj: AdjacencyPack,
    x: Tensor,
    activation: str,
) -> Tensor:
    d = x.shape[1]
    if gnn_type == "gcn":
        return gcn_forward(adj.norm, x, _sliced(tp[f"{prefix}.w"], d), activation)
    if gnn_type == "sage":
        return sage_forward(
            adj.raw,
            x,
            _sliced(tp[f"{prefix}.w_self"], d),
            _sliced(tp[f"{prefix}.w_neigh"], d),
            activation,
        )
    return gin_forward(
        adj.raw,
        x,
        _sliced(tp[f"{prefix}.w1"], d),
        tp[f"{prefix}.w2"],
        tp[f"{prefix}.eps"],
        activation,
    )


def _fc_layer(tp, prefix: str, x: Tensor, activation: str = "linear") -> Tensor:
    out = ad.matmul(x, _sliced(tp[f"{prefix}.w"], x.shape[1])) + tp[f"{prefix}.b"]
    if activation == "relu":
        return ad.relu(out)
    if activation == "tanh":
        return ad.tanh(out)
    return out


def _mlp2(tp, prefix: str, x: Tensor) -> Tensor:
    hid = ad.relu(ad.matmul(x, tp[f"{prefix}.w1"]) + tp[f"{prefix}.b1"])
    return ad.matmul(hid, tp[f"{prefix}.w2"]) + tp[f"{prefix}.b2"]


def _gru_cell(tp, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    r = ad.sigmoid(ad.matmul(x, tp[f"{prefix}.wr"]) + ad.matmul(h, tp[f"{prefix}.ur"]) + tp[f"{prefix}.br"])
    z = ad.sigmoid(ad.matmul(x, tp[f"{prefix}.wz"]) + ad.matmul(h, tp[f"{prefix}.uz"]) + tp[f"{prefix}.bz"])
    cand = ad.tanh(
        ad.matmul(x, tp[f"{prefix}.wh"]) + ad.matmul(ad.mul(r, h), tp[f"{prefix}.uh"]) + tp[f"{prefix}.bh"]
    )
    return ad.mul(1.0 - z, h) + ad.mul(z, cand)


def _fit_rows(t: Tensor, n: int) -> Tensor:
    """Align a per-node state to n rows: pad new ids with zeros, drop extras."""
    rows = t.shape[0]
    if rows == n:
        return t
    if rows > n:
        return ad.slice_rows(t, 0, n)
    return ad.concat([t, Tensor(np.zeros((n - rows, t.shape[1])))], axis=0)


def _zeros(n: int, d: int) -> Tensor:
    return Tensor(np.zeros((n, d)))


def deterministic_states(
    prep: PreparedSequence, tp: dict[str, Tensor], config: SgrnnConfig
) -> list[Tensor]:
    """Forward recurrence h_t driven by a graph layer over the step input."""
    out: list[Tensor] = []
    h: Tensor | None = None
    for step in prep.steps:
        x = _graph_layer(tp, "det_in", config.gnn_type, step.u_adj, step.feat, "relu")
        h_prev = _zeros(step.n, config.hidden_dim) if h is None else _fit_rows(h, step.n)
        if config.recurrent_cell == "gru":
            h = _gru_cell(tp, "det_cell", x, h_prev)
        else:
            h = _fc_layer(tp, "det_cell", ad.concat([x, h_prev], axis=1), "tanh")
        out.append(h)
    return out


def backward_inference_states(
    prep: PreparedSequence,
    h_list: Sequence[Tensor],
    tp: dict[str, Tensor],
    config: SgrnnConfig,
) -> list[Tensor]:
    """Reverse recurrence a_t = g(a_{t+1}, h_t, ...) with a zero boundary.

    The cell input mixes h_t with the step features through a graph layer in
    detection mode and through a per-node fully-connected transform in the
    prediction modes (no neighbor mixing, hence no structural leakage).
    """
    if len(h_list) != len(prep.steps):
        raise ValueError("one hidden state required per prepared step")
    out: list[Tensor | None] = [None] * len(prep.steps)
    a: Tensor | None = None
    for k in range(len(prep.steps) - 1, -1, -1):
        step = prep.steps[k]
        inp = ad.concat([h_list[k], step.feat], axis=1)
        if config.graph_inference:
            x = _graph_layer(tp, "bwd_in", config.gnn_type, step.inf_adj, inp, "relu")
        else:
            x = _fc_layer(tp, "bwd_in", inp, "relu")
        a_prev = _zeros(step.n, config.hidden_dim) if a is None else _fit_rows(a, step.n)
        a = _gru_cell(tp, "bwd_cell", x, a_prev)
        out[k] = a
    return out


def prior_params(z_prev: Tensor, h_t: Tensor, tp: dict[str, Tensor]) -> GaussianParams:
    x = ad.concat([z_prev, h_t], axis=1)
    return GaussianParams(
        mu=_mlp2(tp, "prior_mu", x),
        sigma=ad.softplus(_mlp2(tp, "prior_sigma", x)),
    )


def posterior_params(
    z_prev: Tensor,
    a_t: Tensor,
    prior: GaussianParams,
    tp: dict[str, Tensor],
    config: SgrnnConfig,
    inf_adj: AdjacencyPack | None = None,
) -> GaussianParams:
    """Posterior (mu_q, sigma_q) under the configured variant."""
    x = ad.concat([z_prev, a_t], axis=1)
    if config.graph_inference:
        if inf_adj is None:
            raise ValueError("detection-mode posterior heads need the step adjacency")
        raw_mu = _graph_layer(
            tp, "post_mu.l2", config.gnn_type, inf_adj,
            _graph_layer(tp, "post_mu.l1", config.gnn_type, inf_adj, x, "relu"),
            "linear",
        )
        raw_sigma = _graph_layer(
            tp, "post_sigma.l2", config.gnn_type, inf_adj,
            _graph_layer(tp, "post_sigma.l1", config.gnn_type, inf_adj, x, "relu"),
            "linear",
        )
    else:
        raw_mu = _mlp2(tp, "post_mu", x)
        raw_sigma = _mlp2(tp, "post_sigma", x)

    sigma_q = ad.softplus(raw_sigma)
    variant = config.posterior_variant
    if variant == "plain":
        mu_q = raw_mu
    elif variant == "res":
        mu_q = prior.mu + raw_mu
    else:
        bn = fixed_batch_norm(
            raw_mu,
            FixedBNConfig(
                gamma=config.gamma, beta=tp["post_bn.beta"], epsilon=config.bn_epsilon
            ),
        )
        if variant == "fixed_bn":
            mu_q = prior.mu + ad.mul(prior.sigma, bn)
        else:  # no_std
            mu_q = prior.mu + bn
    return GaussianParams(mu=mu_q, sigma=sigma_q)


def reparameterize(params: GaussianParams, noise) -> Tensor:
    noise_t = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise_t.shape != params.mu.shape:
        raise ad.ShapeError(
            f"noise shape {noise_t.shape} must match mu shape {params.mu.shape}"
        )
    return params.mu + ad.mul(params.sigma, noise_t)


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Row-averaged KL between diagonal Gaussians: (1/2b) sum over rows, dims."""
    if q.mu.shape != p.mu.shape:
        raise ad.ShapeError(f"KL shapes differ: {q.mu.shape} vs {p.mu.shape}")
    b = q.mu.shape[0]
    ratio = ad.div(q.sigma, p.sigma)
    ratio2 = ad.square(ratio)
    mahal = ad.square(ad.div(p.mu - q.mu, p.sigma))
    inner = ratio2 + mahal - 2.0 * ad.log(ratio) - 1.0
    return ad.reduce_sum(inner) * (1.0 / (2.0 * b))


def kl_floor(gamma: float, beta, d: int | None = None) -> float:
    """Lower bound on the expected KL induced by the fixed batch norm."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    if d is not None and beta.size == 1:
        beta = np.full(d, beta[0])
    return float(np.sum(gamma**2 + beta**2) / 2.0)


# -- decoding ---------------------------------------------------------------------


class EdgeScores:
    """Inner-product edge probability accessor for a fixed latent matrix."""

    def __init__(self, z: np.ndarray, dense_limit: int = 2000):
        self.z = np.asarray(z, dtype=np.float64)
        self.dense_limit = dense_limit

    def score(self, i: int, j: int) -> float:
        n = self.z.shape[0]
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"node pair ({i},{j}) out of range for {n} nodes")
        return float(ad.sigmoid(Tensor(self.z[i] @ self.z[j])).data)

    def score_pairs(self, pairs) -> np.ndarray:
        pairs = np.asarray(list(pairs), dtype=np.int64)
        if pairs.size == 0:
            return np.zeros(0)
        n = self.z.shape[0]
        if pairs.min() < 0 or pairs.max() >= n:
            raise IndexError("node pair out of range")
        logits = np.einsum("ij,ij->i", self.z[pairs[:, 0]], self.z[pairs[:, 1]])
        return ad.sigmoid(Tensor(logits)).data

    def probability_matrix(self) -> np.ndarray:
        n = self.z.shape[0]
        if n > self.dense_limit:
            raise ValueError(
                f"refusing to materialize {n}x{n} score matrix (limit {self.dense_limit})"
            )
        return ad.sigmoid(Tensor(self.z @ self.z.T)).data


def decode(z) -> EdgeScores:
    data = z.data if isinstance(z, Tensor) else z
    return EdgeScores(data)


def pair_logits(z: Tensor, pairs) -> Tensor:
    """Differentiable z_i . z_j for an explicit pair list."""
    pairs = np.asarray(list(pairs), dtype=np.int64)
    zi = ad.take_rows(z, pairs[:, 0])
    zj = ad.take_rows(z, pairs[:, 1])
    return ad.reduce_sum(ad.mul(zi, zj), axis=1)


def _recon_log_likelihood(z: Tensor, step: PreparedStep, rng) -> Tensor:
    """Weighted Bernoulli log-likelihood of the step's target adjacency.

    Dense full-pair form up to the configured node limit; beyond it, edges
    plus an equal number of freshly sampled non-edge pairs.
    """
    z_dec = _fit_rows(z, step.target_n)
    n = step.target_n
    if step.labels is not None:
        logits = ad.matmul(z_dec, ad.transpose(z_dec))
        bce = ad.mul(step.labels, ad.softplus(ad.neg(logits))) + ad.mul(
            1.0 - step.labels, ad.softplus(logits)
        )
        total = ad.reduce_sum(ad.mul(step.weights, bce))
        return ad.neg(total) * (step.norm_factor / (n * n))
    # sparse fallback: positive pairs plus sampled negatives
    pos = np.asarray(step.recon_pairs, dtype=np.int64)
    neg = np.column_stack(
        [rng.integers(n, size=len(pos)), rng.integers(n, size=len(pos))]
    )
    pos_logits = pair_logits(z_dec, pos)
    neg_logits = pair_logits(z_dec, neg)
    ll_pos = ad.neg(ad.reduce_sum(ad.softplus(ad.neg(pos_logits))))
    ll_neg = ad.neg(ad.reduce_sum(ad.softplus(neg_logits)))
    return (ll_pos + ll_neg) * (1.0 / (2.0 * len(pos)))


def _default_posterior(z_prev, a_t, prior, tp, config, step, rng):
    return posterior_params(z_prev, a_t, prior, tp, config, step.inf_adj)


def sequence_elbo(
    prep: PreparedSequence,
    tp: dict[str, Tensor],
    config: SgrnnConfig,
    rng: np.random.Generator,
    posterior_fn: Callable = _default_posterior,
) -> ElboTerms:
    """Single-sample ELBO over the prepared steps; loss is the negated total."""
    if not prep.steps:
        raise ValueError("cannot evaluate the bound on an empty step list")
    h_list = deterministic_states(prep, tp, config)
    a_list = backward_inference_states(prep, h_list, tp, config)
    z_prev = _zeros(prep.steps[0].n, config.latent_dim)
    recon_vals: list[float] = []
    kl_vals: list[float] = []
    total: Tensor | None = None
    for step, h_t, a_t in zip(prep.steps, h_list, a_list):
        z_prev_fit = _fit_rows(z_prev, step.n)
        prior = prior_params(z_prev_fit, h_t, tp)
        q = posterior_fn(z_prev_fit, a_t, prior, tp, config, step, rng)
        noise = rng.standard_normal(q.mu.shape)
        z = reparameterize(q, noise)
        kl_t = kl_diag_gaussian(q, prior)
        recon_t = _recon_log_likelihood(z, step, rng)
        term = recon_t - kl_t
        total = term if total is None else total + term
        recon_vals.append(float(recon_t.data))
        kl_vals.append(float(kl_t.data))
        z_prev = z
    return ElboTerms(
        recon_ll=recon_vals,
        kl=kl_vals,
        total=float(total.data),
        loss=ad.neg(total),
    )


def elbo_loss(
    prep: PreparedSequence,
    tp: dict[str, Tensor],
    config: SgrnnConfig,
    rng: np.random.Generator,
) -> ElboTerms:
    if config.sivi:
        from .sivi import sivi_posterior_builder

        return sequence_elbo(prep, tp, config, rng, sivi_posterior_builder)
    return sequence_elbo(prep, tp, config, rng)


# -- evaluation-time chains ----------------------------------------------------------


@dataclass
class ChainState:
    """Deterministic per-step summaries used for scoring and diagnostics."""

    mu_q: np.ndarray
    sigma_q: np.ndarray
    mu_p: np.ndarray
    sigma_p: np.ndarray
    h: np.ndarray
    a: np.ndarray


def posterior_mean_chain(
    prep: PreparedSequence,
    store: ParameterStore,
    config: SgrnnConfig,
    rng: np.random.Generator | None = None,
) -> list[ChainState]:
    """Run the inference recurrences with Z fixed at the posterior mean.

    SIVI posteriors draw their mixing noise from `rng` (zeros when no rng is
    given, which makes repeated evaluation deterministic).
    """
    tp = store.constants()
    h_list = deterministic_states(prep, tp, config)
    a_list = backward_inference_states(prep, h_list, tp, config)
    states: list[ChainState] = []
    z_prev = _zeros(prep.steps[0].n, config.latent_dim)
    for step, h_t, a_t in zip(prep.steps, h_list, a_list):
        z_prev_fit = _fit_rows(z_prev, step.n)
        prior = prior_params(z_prev_fit, h_t, tp)
        if config.sivi:
            from .sivi import sivi_posterior_params

            if rng is None:
                noise = np.zeros((step.n, config.sivi_noise_dim))
            else:
                noise = rng.standard_normal((step.n, config.sivi_noise_dim))
            q, _ = sivi_posterior_params(
                z_prev_fit, a_t, step.inf_adj, tp, config, noise
            )
        else:
            q = posterior_params(z_prev_fit, a_t, prior, tp, config, step.inf_adj)
        states.append(
            ChainState(
                mu_q=q.mu.data,
                sigma_q=q.sigma.data,
                mu_p=prior.mu.data,
                sigma_p=prior.sigma.data,
                h=h_t.data,
                a=a_t.data,
            )
        )
        z_prev = Tensor(q.mu.data)
    return states


def _pair_scores(z: np.ndarray, pairs, target_n: int) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros(0)
    if z.shape[0] < target_n:
        z = np.vstack([z, np.zeros((target_n - z.shape[0], z.shape[1]))])
    return EdgeScores(z).score_pairs(pairs)


def window_prior_stats(
    prep: PreparedSequence, store: ParameterStore, config: SgrnnConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Prior (mu_p, sigma_p) at the last step of a prepared window.

    Z before the last step follows the posterior mean chain over the earlier
    steps, whose backward recurrence is anchored at the window edge; nothing
    beyond the window is consumed.
    """
    tp = store.constants()
    h_list = deterministic_states(prep, tp, config)
    last = len(prep.steps) - 1
    step = prep.steps[last]
    if last == 0:
        z_prev = _zeros(step.n, config.latent_dim)
    else:
        sub = PreparedSequence(task=prep.task, steps=prep.steps[:last])
        a_list = backward_inference_states(sub, h_list[:last], tp, config)
        z_prev = _zeros(sub.steps[0].n, config.latent_dim)
        for sub_step, h_t, a_t in zip(sub.steps, h_list[:last], a_list):
            z_fit = _fit_rows(z_prev, sub_step.n)
            prior = prior_params(z_fit, h_t, tp)
            if config.sivi:
                from .sivi import sivi_posterior_params

                q, _ = sivi_posterior_params(
                    z_fit, a_t, sub_step.inf_adj, tp, config,
                    np.zeros((sub_step.n, config.sivi_noise_dim)),
                )
            else:
                q = posterior_params(z_fit, a_t, prior, tp, config, sub_step.inf_adj)
            z_prev = Tensor(q.mu.data)
    z_fit = _fit_rows(z_prev, step.n)
    prior = prior_params(z_fit, h_list[last], tp)
    return prior.mu.data, prior.sigma.data


def transition_prior_stats(
    sequence, store: ParameterStore, config: SgrnnConfig, step_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Prior stats for transition step s using only snapshots 0..s."""
    prep = prepare_steps(sequence, config, upto=step_index + 1, with_labels=False)
    return window_prior_stats(prep, store, config)


def predict_transition_scores(
    sequence,
    store: ParameterStore,
    config: SgrnnConfig,
    step_index: int,
    pairs,
    target_n: int,
) -> np.ndarray:
    """Scores for transition step s; the target-time adjacency is never read."""
    mu_p, _ = transition_prior_stats(sequence, store, config, step_index)
    return _pair_scores(mu_p, pairs, target_n)


def rollout_predict(
    sequence,
    eval_sets,
    store: ParameterStore,
    config: SgrnnConfig,
    indices: Sequence[int],
    which: str = "test",
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Score the requested evaluation sets with the trained parameters.

    detection: indices are snapshot ids; pairs are scored with the posterior
    mean at that snapshot. prediction modes: indices are transition ids
    (t -> t+1 is step t) and pairs are scored with the prior mean, without
    any access to the target-time adjacency.
    """
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if config.task == "detection":
        if not isinstance(eval_sets, EdgeSplit):
            raise ValueError("detection scoring needs an EdgeSplit")
        prep = prepare_steps(sequence, config, split=eval_sets, with_labels=False)
        chain = posterior_mean_chain(prep, store, config)
        for t in indices:
            part = eval_sets[t]
            pos = part.val_pos if which == "val" else part.test_pos
            neg = part.val_neg if which == "val" else part.test_neg
            z = chain[t].mu_q
            out[t] = (
                _pair_scores(z, pos, prep.steps[t].target_n),
                _pair_scores(z, neg, prep.steps[t].target_n),
            )
        return out
    if not isinstance(eval_sets, PredictionTargets):
        raise ValueError("prediction scoring needs PredictionTargets")
    for s in indices:
        tr = eval_sets[s]
        if tr.skipped:
            continue
        target_n = sequence[s + 1].n_nodes
        pos = predict_transition_scores(sequence, store, config, s, tr.positives, target_n)
        neg = predict_transition_scores(sequence, store, config, s, tr.negatives, target_n)
        out[s] = (pos, neg)
    return out


def fixed_bn_statistic(chain: Sequence[ChainState]) -> list[float]:
    """Per-step batch statistic (1/2b) sum(((mu_q - mu_p)/sigma_p)^2)."""
    stats = []
    for state in chain:
        l = (state.mu_q - state.mu_p) / state.sigma_p
        stats.append(float(np.sum(l * l) / (2.0 * l.shape[0])))
    return stats
