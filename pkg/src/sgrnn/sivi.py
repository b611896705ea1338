"""Semi-implicit posterior: noise-driven stochastic layers over the inference states.

The explicit conditional stays diagonal Gaussian, but its parameters are
produced from fresh standard-normal noise mixed into the inference features,
so the marginal posterior is an implicit mixture. Training maximizes the
Jensen lower bound: the closed-form KL of the sampled conditional against
the unchanged Gaussian prior, averaged over noise draws (one per step).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FixedBNConfig, Tensor, fixed_batch_norm
from .model import (
    ElboTerms,
    GaussianParams,
    PreparedSequence,
    SgrnnConfig,
    sequence_elbo,
)

__all__ = ["SiviState", "sivi_posterior_params", "sivi_loss", "sivi_posterior_builder"]


@dataclass
class SiviState:
    """Intermediate activations of one semi-implicit posterior construction."""

    epsilon: np.ndarray
    layer_outputs: list[np.ndarray]


def _sivi_layer(tp, prefix, config: SgrnnConfig, adj, x: Tensor, activation: str) -> Tensor:
    from .model import _fc_layer, _graph_layer

    if config.graph_inference:
        return _graph_layer(tp, prefix, config.gnn_type, adj, x, activation)
    return _fc_layer(tp, prefix, x, activation)


def sivi_posterior_params(
    z_prev: Tensor,
    a_t: Tensor,
    adj,
    tp: dict[str, Tensor],
    config: SgrnnConfig,
    noise,
) -> tuple[GaussianParams, SiviState]:
    """Posterior parameters from one mixing-noise draw.

    r0 = a_t; each stochastic layer reads concat(Z_prev, r_prev, eps); the
    mu/sigma heads read the last layer output. In detection mode every
    transform is a graph layer over the step adjacency, otherwise fully
    connected.
    """
    eps_arr = np.asarray(noise, dtype=np.float64)
    if eps_arr.shape != (a_t.shape[0], config.sivi_noise_dim):
        raise ad.ShapeError(
            f"noise shape {eps_arr.shape} must be "
            f"({a_t.shape[0]}, {config.sivi_noise_dim})"
        )
    eps = Tensor(eps_arr)
    r = a_t
    outputs = []
    for j in range(config.sivi_layers):
        parts = [z_prev, r, eps] if config.sivi_noise_dim > 0 else [z_prev, r]
        x = ad.concat(parts, axis=1)
        r = _sivi_layer(tp, f"sivi.layer{j}", config, adj, x, "relu")
        outputs.append(r.data)
    raw_mu = _sivi_layer(tp, "sivi.mu", config, adj, r, "linear")
    raw_sigma = _sivi_layer(tp, "sivi.sigma", config, adj, r, "linear")
    sigma = ad.softplus(raw_sigma)
    mu = raw_mu
    state = SiviState(epsilon=eps_arr, layer_outputs=outputs)
    return GaussianParams(mu=mu, sigma=sigma), state


def sivi_posterior_builder(z_prev, a_t, prior, tp, config, step, rng):
    """Posterior hook for the shared sequence bound; draws fresh noise per step."""
    noise = rng.standard_normal((a_t.shape[0], config.sivi_noise_dim))
    q, _ = sivi_posterior_params(z_prev, a_t, step.inf_adj, tp, config, noise)
    if config.sivi_bn_mu:
        bn = fixed_batch_norm(
            q.mu,
            FixedBNConfig(
                gamma=config.gamma, beta=tp["post_bn.beta"], epsilon=config.bn_epsilon
            ),
        )
        q = GaussianParams(mu=prior.mu + ad.mul(prior.sigma, bn), sigma=q.sigma)
    return q


def sivi_loss(
    prep: PreparedSequence,
    tp: dict[str, Tensor],
    config: SgrnnConfig,
    rng: np.random.Generator,
) -> ElboTerms:
    """Single noise-draw estimate of the Jensen lower bound."""
    return sequence_elbo(prep, tp, config, rng, sivi_posterior_builder)
