"""Diagonal Gaussians: closed-form KL, reparameterized sampling, priors.

Scales are standard deviations, not variances. ``mc_kl_estimate`` is the
independent Monte-Carlo oracle for ``kl_diag`` and deliberately uses plain
numpy log-densities instead of the graph ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """Mean/scale vectors of an axis-aligned Gaussian.

    Both fields are graph tensors so that a posterior produced inside a
    forward pass stays differentiable; wrap plain arrays with
    :meth:`from_arrays` for non-graph uses.
    """

    mean: Tensor
    scale: Tensor

    def __post_init__(self) -> None:
        m, s = self.mean.array, self.scale.array
        if m.ndim != 1 or s.ndim != 1 or m.shape != s.shape:
            raise nn.ShapeMismatchError(
                f"DiagGaussian mean {m.shape} and scale {s.shape} must be equal-length vectors"
            )
        nn.assert_all_finite(m, "DiagGaussian mean")
        nn.assert_all_finite(s, "DiagGaussian scale")
        if np.any(s <= 0.0):
            raise ValueError("DiagGaussian scale must be strictly positive")

    @staticmethod
    def from_arrays(mean, scale) -> "DiagGaussian":
        return DiagGaussian(Tensor.const(mean), Tensor.const(scale))

    @property
    def dim(self) -> int:
        return self.mean.array.shape[0]

    def mean_array(self) -> np.ndarray:
        return self.mean.array

    def scale_array(self) -> np.ndarray:
        return self.scale.array


def standard_prior(dim: int, scale: float) -> DiagGaussian:
    """N(0, scale^2 I) as a constant (non-graph) distribution."""
    return DiagGaussian.from_arrays(np.zeros(dim), np.full(dim, float(scale)))


def _check_dims(q: DiagGaussian, p: DiagGaussian) -> None:
    if q.dim != p.dim:
        raise nn.ShapeMismatchError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form KL(q || p), differentiable through q.mean and q.scale.

    Per coordinate: log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2.
    """
    _check_dims(q, p)
    inv_two_var_p = 1.0 / (2.0 * p.scale.array**2)
    log_sp = np.log(p.scale.array)
    dmean = q.mean - p.mean.array
    per_coord = (
        (log_sp - nn.log(q.scale))
        + (q.scale * q.scale + dmean * dmean) * inv_two_var_p
        - 0.5
    )
    return nn.total(per_coord)


def sample_reparam(q: DiagGaussian, noise) -> Tensor:
    """mean + scale * noise; gradients flow through mean and scale.

    ``noise`` must be drawn externally from a standard normal so runs stay
    reproducible.
    """
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != (q.dim,):
        raise nn.ShapeMismatchError(
            f"noise shape {eps.shape} does not match distribution dim {q.dim}"
        )
    return q.mean + q.scale * eps


def glorot_scale(fan_in: int, fan_out: int) -> float:
    """sqrt(2 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got ({fan_in}, {fan_out})")
    return math.sqrt(2.0 / (fan_in + fan_out))


def _log_density(x: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    z = (x - mean) / scale
    return -0.5 * (z * z + 2.0 * np.log(scale) + _LOG_2PI).sum(axis=-1)


def mc_kl_estimate(
    q: DiagGaussian, p: DiagGaussian, n: int, rng: np.random.Generator
) -> float:
    """Monte-Carlo KL oracle: mean of log q(x) - log p(x) over n q-samples."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    _check_dims(q, p)
    mq, sq = q.mean_array(), q.scale_array()
    mp, sp = p.mean_array(), p.scale_array()
    acc = 0.0
    chunk = 200_000
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = mq + sq * rng.standard_normal((m, q.dim))
        acc += float((_log_density(x, mq, sq) - _log_density(x, mp, sp)).sum())
        done += m
    return acc / n
