"""Stationary matrix-valued kernels on the plane.

All kernels are functions of the offset ``tau = x - x'``. ``blocks`` works on numpy
arrays and torch tensors alike so the encoder can differentiate through the lengthscale.

The curl- and divergence-free kernels keep the ``1/l^2`` prefactor of Macedo & Castro
(2010); ``variance`` multiplies the whole expression.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import _backend as B
from .field import MultiplicityError
from .groups import ConfigError

_KINDS = ("rbf_diagonal", "curl_free", "div_free", "direct_sum")


@dataclass(frozen=True)
class MatrixKernel:
    kind: str
    lengthscale: float = 1.0
    variance: float = 1.0
    dim: int = 2
    parts: tuple = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "direct_sum":
            if not self.parts:
                raise ConfigError("direct_sum kernel needs parts")
            object.__setattr__(self, "dim", sum(p.dim for p in self.parts))
            return
        if self.lengthscale <= 0 or self.variance <= 0:
            raise ConfigError("lengthscale and variance must be positive")
        if self.kind in ("curl_free", "div_free") and self.dim != 2:
            raise ConfigError("curl/div-free kernels are defined here for the plane only (d=2)")

    def blocks(self, tau, lengthscale=None):
        """Kernel matrices ``K_hat(tau)`` for offsets ``tau`` (..., 2) -> (..., d, d).

        ``lengthscale`` overrides the stored value (may be a torch scalar); for direct sums
        the override is shared by every part.
        """
        if self.kind == "direct_sum":
            mats = [p.blocks(tau, lengthscale) for p in self.parts]
            out = B.zeros(tau.shape[:-1] + (self.dim, self.dim), like=tau)
            if B.is_torch(tau):
                rows = []
                for i, m in enumerate(mats):
                    left = sum(p.dim for p in self.parts[:i])
                    right = self.dim - left - m.shape[-1]
                    pad = [B.zeros(tau.shape[:-1] + (m.shape[-1], left), like=tau), m,
                           B.zeros(tau.shape[:-1] + (m.shape[-1], right), like=tau)]
                    rows.append(B.concat(pad, axis=-1))
                return B.concat(rows, axis=-2)
            i = 0
            for m in mats:
                j = i + m.shape[-1]
                out[..., i:j, i:j] = m
                i = j
            return out
        ls = self.lengthscale if lengthscale is None else lengthscale
        sq = (tau ** 2).sum(-1) / ls ** 2
        k0 = B.xp(tau).exp(-0.5 * sq)[..., None, None]
        I = B.eye(self.dim, like=tau)
        if self.kind == "rbf_diagonal":
            return self.variance * k0 * I
        outer = tau[..., :, None] * tau[..., None, :] / ls ** 2
        if self.kind == "curl_free":
            return self.variance / ls ** 2 * k0 * (I - outer)
        # div_free, n = 2
        return self.variance / ls ** 2 * k0 * (outer + (1.0 - sq)[..., None, None] * I)

    def diagonal_scales(self):
        """Per-channel variances if this is a direct sum of diagonal RBFs, else None."""
        if self.kind == "rbf_diagonal":
            return [self.variance] * self.dim
        if self.kind == "direct_sum" and all(p.kind == "rbf_diagonal" for p in self.parts):
            return [v for p in self.parts for v in [p.variance] * p.dim]
        return None

    def __call__(self, x, xp):
        return eval_kernel(self, x, xp)

    def to_json(self) -> dict:
        if self.kind == "direct_sum":
            return {"kind": "direct_sum", "parts": [p.to_json() for p in self.parts]}
        d = {"kind": self.kind, "lengthscale": self.lengthscale, "variance": self.variance}
        if self.kind == "rbf_diagonal":
            d["dim"] = self.dim
        return d

    @classmethod
    def from_json(cls, d) -> "MatrixKernel":
        if isinstance(d, str):
            d = json.loads(d)
        kind = d.get("kind")
        if kind == "direct_sum":
            return cls("direct_sum", parts=tuple(cls.from_json(p) for p in d["parts"]))
        try:
            return cls(kind, float(d.get("lengthscale", 1.0)), float(d.get("variance", 1.0)),
                       int(d.get("dim", 2)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad kernel config {d!r}: {exc}") from exc


def rbf_diagonal(dim=2, lengthscale=1.0, variance=1.0):
    return MatrixKernel("rbf_diagonal", lengthscale, variance, dim)


def curl_free(lengthscale=1.0, variance=1.0):
    return MatrixKernel("curl_free", lengthscale, variance)


def div_free(lengthscale=1.0, variance=1.0):
    return MatrixKernel("div_free", lengthscale, variance)


def kernel_sum(*parts: MatrixKernel) -> MatrixKernel:
    return MatrixKernel("direct_sum", parts=tuple(parts))


def embedding_kernel(K0: MatrixKernel, k: MatrixKernel | None = None) -> MatrixKernel:
    """Block kernel ``k (+) K0``: a scalar RBF on the density channel, ``K0`` on the data."""
    if k is None:
        k = rbf_diagonal(1, K0.lengthscale if K0.kind != "direct_sum" else 1.0)
    if k.kind != "rbf_diagonal" or k.dim != 1:
        raise ConfigError("the density block must be a scalar RBF kernel")
    return kernel_sum(k, K0)


def eval_kernel(K: MatrixKernel, x, xp) -> np.ndarray:
    tau = np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)
    return K.blocks(tau)


def check_angular_constraint(K: MatrixKernel, rep, samples: Iterable) -> float:
    """Max residual of ``K(hx, hx') = rho(h) K(x, x') rho(h)^T`` over ``(x, x', h)`` samples.

    ``h`` may be a :class:`GroupElement` or a 2x2 orthogonal matrix; ``rep`` is a
    :class:`Representation` or a callable ``h -> rho(h)``.
    """
    from .groups import GroupElement, element_matrix

    rho_of = rep if callable(rep) and not hasattr(rep, "matrix") else rep.matrix
    worst = 0.0
    for x, xp, h in samples:
        M = element_matrix(h) if isinstance(h, GroupElement) else np.asarray(h, dtype=float)
        rho = rho_of(h)
        lhs = eval_kernel(K, M @ np.asarray(x), M @ np.asarray(xp))
        rhs = rho @ eval_kernel(K, x, xp) @ rho.T
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def gram(K: MatrixKernel, points, points2=None) -> np.ndarray:
    """Block Gram matrix ``[K(x_i, x'_j)]`` of shape ``(m d, n d)``.

    With a single point set the points must be pairwise distinct.
    """
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    if points2 is None:
        if len(np.unique(X, axis=0)) != len(X):
            raise MultiplicityError("Gram matrix requested on repeated points")
        Y = X
    else:
        Y = np.asarray(points2, dtype=float).reshape(-1, 2)
    blocks = K.blocks(X[:, None, :] - Y[None, :, :])  # (m, n, d, d)
    m, n, d, _ = blocks.shape
    G = blocks.transpose(0, 2, 1, 3).reshape(m * d, n * d)
    if points2 is None:
        G = 0.5 * (G + G.T)
    return G
