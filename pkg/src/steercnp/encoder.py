"""Kernel embedding ``E(Z) = sum_i K(., x_i) (1, y_i)`` sampled on a grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend as B
from .field import ContextSet, FeatureField, GridGeometry, transform_context, transform_field
from .groups import ConfigError, Representation, direct_sum, trivial
from .kernels import MatrixKernel, check_angular_constraint

EPS_NORM = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    embedding_kernel: MatrixKernel
    grid: GridGeometry
    normalize: bool = True


def embedding_rep(rep: Representation) -> Representation:
    return direct_sum(trivial(rep.group), rep)


def embedding_sum(kernel: MatrixKernel, grid_points, points, values, mask=None, lengthscale=None):
    """Raw embedding at ``grid_points`` (..., G, 2) from a (batched) context set.

    ``points`` (..., N, 2), ``values`` (..., N, d), optional ``mask`` (..., N) of 0/1.
    Returns (..., G, d + 1). Works for numpy and torch inputs.
    """
    tau = grid_points[..., :, None, :] - points[..., None, :, :]
    phi = B.concat([B.ones(values.shape[:-1] + (1,), like=values), values], axis=-1)
    if mask is not None:
        phi = phi * mask[..., None]
    scales = kernel.diagonal_scales()
    shared = lengthscale is not None or len({p.lengthscale for p in kernel.parts}) <= 1
    if scales is not None and shared:
        # diagonal RBF blocks with one lengthscale: a single scalar kernel matrix suffices
        ls = lengthscale if lengthscale is not None else (kernel.parts or (kernel,))[0].lengthscale
        k = B.xp(tau).exp(-0.5 * (tau ** 2).sum(-1) / ls ** 2)  # (..., G, N)
        return B.xp(k).einsum("...gn,...nb->...gb", k, phi) * B.as_like(scales, phi)
    K = kernel.blocks(tau, lengthscale)  # (..., G, N, D, D)
    return B.xp(K).einsum("...gnab,...nb->...ga", K, phi)


def normalize_density(E, eps: float = EPS_NORM):
    """Divide the data channels by the density channel clamped below at ``eps``."""
    dens = E[..., :1]
    if B.is_torch(E):
        denom = dens.clamp(min=eps)
    else:
        denom = np.maximum(dens, eps)
    return B.concat([dens, E[..., 1:] / denom], axis=-1)


def embed(Z: ContextSet, cfg: EncoderConfig, normalize: bool | None = None) -> FeatureField:
    """Grid sampling of the embedding of ``Z``; points are summed in canonical (x, y) order."""
    rep_E = embedding_rep(Z.rep)
    if cfg.embedding_kernel.dim != rep_E.dimension:
        raise ConfigError(f"embedding kernel has dimension {cfg.embedding_kernel.dim}, "
                          f"expected {rep_E.dimension}")
    n = cfg.grid.resolution
    if len(Z) == 0:
        return FeatureField(cfg.grid, np.zeros((n, n, rep_E.dimension)), rep_E)
    order = Z.canonical_order()
    E = embedding_sum(cfg.embedding_kernel, cfg.grid.points(), Z.points[order], Z.values[order])
    if cfg.normalize if normalize is None else normalize:
        E = normalize_density(E)
    return FeatureField(cfg.grid, E.reshape(n, n, -1), rep_E)


def check_encoder_equivariance(Z: ContextSet, g, cfg: EncoderConfig, interior: bool = True) -> float:
    """``max |embed(g.Z) - g.embed(Z)|`` over grid points not zero-filled by the transform."""
    lhs = embed(transform_context(Z, g), cfg)
    moved = transform_field(embed(Z, cfg), g)
    diff = np.abs(lhs.values - moved.field.values)
    if interior:
        diff = diff[~moved.filled]
    return float(diff.max()) if diff.size else 0.0


def check_embedding_kernel(cfg: EncoderConfig, rep_E: Representation, n: int = 100, seed=0) -> float:
    rng = np.random.default_rng(seed)
    els = rep_E.group.elements
    samples = [(rng.normal(size=2) * 3, rng.normal(size=2) * 3, els[rng.integers(len(els))])
               for _ in range(n)]
    return check_angular_constraint(cfg.embedding_kernel, rep_E, samples)
