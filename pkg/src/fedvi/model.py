"""The personalized federated network and its per-minibatch objective.

Forward path: an MLP embedding produces a representation per example; the
batch is split into a support half and a query half, the representation is
split into global and local features, the support set's global features are
fed through the posterior constructor to rebuild a per-client diagonal
Gaussian over the local classifier weights, one weight sample classifies
the query half, and the loss is query NLL plus a (tau / batch) weighted KL
between the rebuilt posterior and its prior.

The support half is label-free by construction: only query labels are ever
read, which is what lets an unseen client personalize from unlabeled data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .distributions import DiagGaussian, glorot_scale, kl_diag, sample_reparam, standard_prior
from .nn import ParamBlock, Tensor

POSTERIOR_HEAD_INIT_SHRINK = 100.0


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters; embed_widths ends in the representation size."""

    input_dim: int
    embed_widths: tuple[int, ...]
    local_dim: int
    global_dim: int
    num_classes: int
    posterior_widths: tuple[int, ...] = (256, 256)
    support_fraction: float = 0.5
    mean_damp: float = 0.1
    logscale_damp: float = 0.01
    scale_floor: float = 1e-5
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.num_classes < 2 or not self.embed_widths:
            raise ValueError("input_dim >= 1, num_classes >= 2 and a nonempty embedding required")
        if self.local_dim < 1 or self.global_dim < 1:
            raise ValueError("local_dim and global_dim must each be >= 1")
        if self.local_dim + self.global_dim != self.embed_widths[-1]:
            raise ValueError(
                f"local_dim {self.local_dim} + global_dim {self.global_dim} "
                f"!= representation size {self.embed_widths[-1]}"
            )
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError(f"support_fraction must be in (0,1), got {self.support_fraction}")
        if self.scale_floor <= 0.0:
            raise ValueError("scale_floor must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")

    @property
    def rep_dim(self) -> int:
        return self.embed_widths[-1]

    @property
    def beta_dim(self) -> int:
        return self.local_dim * self.num_classes

    @property
    def posterior_out_dim(self) -> int:
        return (2 * self.local_dim + 1) * self.num_classes

    @property
    def prior_scale(self) -> float:
        return glorot_scale(self.local_dim, self.num_classes)


@dataclass
class FedVIParams:
    """All server-side parameters: embedding, posterior constructor, classifier."""

    theta_embed: list[ParamBlock]
    theta_post: list[ParamBlock]
    theta_cls: list[ParamBlock]
    arch: ArchConfig

    def all_blocks(self) -> list[ParamBlock]:
        return [*self.theta_embed, *self.theta_post, *self.theta_cls]

    def clone(self) -> "FedVIParams":
        return FedVIParams(
            [b.clone() for b in self.theta_embed],
            [b.clone() for b in self.theta_post],
            [b.clone() for b in self.theta_cls],
            self.arch,
        )

    def block(self, name: str) -> ParamBlock:
        for b in self.all_blocks():
            if b.name == name:
                return b
        raise KeyError(name)


def _mlp_blocks(
    prefix: str,
    dims: list[int],
    rng: np.random.Generator,
    last_layer_shrink: float = 1.0,
) -> list[ParamBlock]:
    blocks = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = glorot_scale(fan_in, fan_out)
        if i == len(dims) - 2:
            std /= last_layer_shrink
        blocks.append(ParamBlock(f"{prefix}.{i}.W", std * rng.standard_normal((fan_in, fan_out))))
        blocks.append(ParamBlock(f"{prefix}.{i}.b", np.zeros(fan_out)))
    return blocks


def init_params(arch: ArchConfig, rng: np.random.Generator) -> FedVIParams:
    """Glorot-normal weights, zero biases.

    The posterior constructor's output layer is shrunk so the rebuilt
    posterior starts out indistinguishable from its prior.
    """
    embed = _mlp_blocks("embed", [arch.input_dim, *arch.embed_widths], rng)
    post = _mlp_blocks(
        "post",
        [arch.global_dim, *arch.posterior_widths, arch.posterior_out_dim],
        rng,
        last_layer_shrink=POSTERIOR_HEAD_INIT_SHRINK,
    )
    g = glorot_scale(arch.global_dim, arch.num_classes)
    cls = [
        ParamBlock("cls.W", g * rng.standard_normal((arch.global_dim, arch.num_classes))),
        ParamBlock("cls.b", np.zeros(arch.num_classes)),
    ]
    params = FedVIParams(embed, post, cls, arch)
    nn.check_unique_names(params.all_blocks())
    return params


def _mlp_forward(
    blocks: list[ParamBlock],
    x: Tensor,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    n_layers = len(blocks) // 2
    h = x
    for i in range(n_layers):
        h = nn.dense_forward(h, blocks[2 * i].value, blocks[2 * i + 1].value)
        if i < n_layers - 1:
            h = nn.relu(h)
        if dropout_rate > 0.0 and training:
            h = nn.dropout(h, dropout_rate, rng, training)
    return h


def embed(
    params: FedVIParams,
    x,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Map raw inputs [B x input_dim] to representations [B x rep_dim]."""
    xt = x if isinstance(x, Tensor) else Tensor.const(x)
    if xt.array.ndim != 2 or xt.array.shape[1] != params.arch.input_dim:
        raise nn.ShapeMismatchError(
            f"embed expects [B x {params.arch.input_dim}], got {xt.array.shape}"
        )
    return _mlp_forward(params.theta_embed, xt, params.arch.dropout_rate, training, rng)


def split_support_query(batch_size: int, support_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """First floor(fraction * B) indices are support, the rest query."""
    support = int(support_fraction * batch_size)
    if support < 1 or batch_size - support < 1:
        raise ValueError(
            f"batch of {batch_size} cannot give nonempty support and query halves"
        )
    idx = np.arange(batch_size)
    return idx[:support], idx[support:]


def split_features(arch: ArchConfig, rep: Tensor) -> tuple[Tensor, Tensor]:
    """Columns [0, G) are global features, [G, G+L) local features."""
    if rep.array.shape[-1] != arch.rep_dim:
        raise nn.ShapeMismatchError(
            f"representation width {rep.array.shape[-1]} != {arch.rep_dim}"
        )
    return nn.narrow(rep, 0, arch.global_dim), nn.narrow(rep, arch.global_dim, arch.rep_dim)


@dataclass
class PosteriorStats:
    """Rebuilt local posterior plus the per-class logit bias it carries."""

    q: DiagGaussian
    b_beta: Tensor


def construct_posterior(params: FedVIParams, support_global: Tensor) -> PosteriorStats:
    """Aggregate support rows into a diagonal Gaussian over local weights.

    g = row-mean of the constructor MLP output; the first L*K entries give
    the (damped) mean, the next L*K the log-scale perturbation around the
    prior scale, the last K the logit bias. The scale never drops below
    scale_floor.
    """
    arch = params.arch
    if support_global.array.ndim != 2 or support_global.array.shape[0] < 1:
        raise nn.ShapeMismatchError(
            f"support features must be [S x {arch.global_dim}] with S >= 1, "
            f"got {support_global.array.shape}"
        )
    out = _mlp_forward(params.theta_post, support_global)
    g = nn.mean_rows(out)
    m = arch.beta_dim
    mu = arch.mean_damp * nn.narrow(g, 0, m)
    sigma = arch.scale_floor + arch.prior_scale * nn.exp(
        arch.logscale_damp * nn.narrow(g, m, 2 * m)
    )
    b_beta = nn.narrow(g, 2 * m, 2 * m + arch.num_classes)
    return PosteriorStats(q=DiagGaussian(mu, sigma), b_beta=b_beta)


def predict_logits(
    params: FedVIParams,
    beta: Tensor,
    b_beta: Tensor,
    query_global: Tensor,
    query_local: Tensor,
) -> Tensor:
    """Local branch reshape(beta, [K, L]) . local + global classifier + biases."""
    arch = params.arch
    if beta.array.shape != (arch.beta_dim,):
        raise nn.ShapeMismatchError(
            f"beta must be a vector of length {arch.beta_dim}, got {beta.array.shape}"
        )
    weights = nn.reshape(beta, (arch.num_classes, arch.local_dim))
    local_logits = nn.matmul(query_local, nn.transpose(weights))
    global_logits = nn.dense_forward(
        query_global, params.theta_cls[0].value, params.theta_cls[1].value
    )
    return local_logits + global_logits + b_beta


def global_branch_logits(params: FedVIParams, x, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Global classifier on global features only (the non-personalized path)."""
    rep = embed(params, x, training, rng)
    feats_global, _ = split_features(params.arch, rep)
    return nn.dense_forward(feats_global, params.theta_cls[0].value, params.theta_cls[1].value)


@dataclass
class LossParts:
    nll: float
    kl: float
    kl_weight: float

    @property
    def loss(self) -> float:
        return self.nll + self.kl_weight * self.kl


@dataclass
class BatchForward:
    """Reusable pieces of one personalized forward pass."""

    params: FedVIParams
    stats: PosteriorStats
    query_global: Tensor
    query_local: Tensor
    support_size: int

    def logits_for(self, beta: Tensor) -> Tensor:
        return predict_logits(
            self.params, beta, self.stats.b_beta, self.query_global, self.query_local
        )


def forward_batch(
    params: FedVIParams,
    x,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> BatchForward:
    """Embed, split support/query and features, rebuild the posterior."""
    xt = x if isinstance(x, Tensor) else Tensor.const(x)
    batch = xt.array.shape[0]
    support_idx, query_idx = split_support_query(batch, params.arch.support_fraction)
    rep = embed(params, xt, training, rng)
    rep_support = nn.row_slice(rep, 0, support_idx.size)
    rep_query = nn.row_slice(rep, support_idx.size, batch)
    support_global, _ = split_features(params.arch, rep_support)
    query_global, query_local = split_features(params.arch, rep_query)
    stats = construct_posterior(params, support_global)
    return BatchForward(params, stats, query_global, query_local, support_idx.size)


def minibatch_loss(
    params: FedVIParams,
    x,
    y: np.ndarray,
    tau: float,
    noise: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LossParts]:
    """Query NLL plus (tau / batch) * KL(q, prior), with the parts reported.

    ``noise`` is the frozen standard-normal vector for the reparameterized
    local-weight sample, so the loss is a deterministic function of
    (params, batch, tau, noise). Support labels are never read.
    """
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    arch = params.arch
    batch = np.asarray(x).shape[0]
    fwd = forward_batch(params, x, training, rng)
    beta = sample_reparam(fwd.stats.q, noise)
    logits = fwd.logits_for(beta)
    y = np.asarray(y)
    nll = nn.softmax_nll(logits, y[fwd.support_size :])
    prior = standard_prior(arch.beta_dim, arch.prior_scale)
    kl = kl_diag(fwd.stats.q, prior)
    weight = tau / batch
    loss = nll if weight == 0.0 else nll + weight * kl
    loss.assert_finite("minibatch loss")
    return loss, LossParts(nll=nll.item(), kl=kl.item(), kl_weight=weight)
