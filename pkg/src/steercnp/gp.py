"""Exact vector-valued GP sampling and conditioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .field import ContextSet, FeatureField, GridGeometry, interpolation_weights
from .groups import ConfigError, Representation, rotation_matrix, tensor_square
from .kernels import MatrixKernel, gram


class NumericalError(ArithmeticError):
    pass


JITTER_START = 1e-10
JITTER_MAX = 1e-4
LIKELIHOOD_FLOOR = 1e-6


def jittered_cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + jitter I``; jitter escalates x10 from 1e-10 to 1e-4 of mean(diag)."""
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    scale = scale if scale > 0 else 1.0
    jitter = JITTER_START * scale
    tried = []
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(A + jitter * np.eye(len(A))), jitter
        except np.linalg.LinAlgError:
            tried.append(jitter)
            jitter *= 10
    eig = np.linalg.eigvalsh(0.5 * (A + A.T))
    raise NumericalError(f"Cholesky failed for {len(A)}x{len(A)} matrix after jitters {tried}; "
                         f"eigenvalue range [{eig.min():.3e}, {eig.max():.3e}]")


@dataclass(frozen=True)
class GPModel:
    kernel: MatrixKernel
    rep: Representation
    noise: float = 0.0
    mean: tuple | None = None

    def __post_init__(self):
        d = self.rep.dimension
        if self.kernel.dim != d:
            raise ConfigError(f"kernel dimension {self.kernel.dim} != representation dimension {d}")
        if self.noise < 0:
            raise ConfigError("noise variance must be nonnegative")
        m = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=float).reshape(d)
        object.__setattr__(self, "mean", tuple(m))
        # rho(h) m = m for the whole group and, for O(2)-capable reps, a generic rotation
        probes = list(self.rep.group.elements)
        try:
            probes += [rotation_matrix(1.0), np.diag([1.0, -1.0])]
            for h in probes[-2:]:
                self.rep.matrix(h)
        except ConfigError:
            probes = probes[:-2]
        for h in probes:
            if np.max(np.abs(self.rep.matrix(h) @ m - m)) > 1e-12:
                raise ConfigError("GP mean must be invariant under the fiber representation")

    @property
    def mean_vector(self) -> np.ndarray:
        return np.asarray(self.mean)


@dataclass(frozen=True)
class GaussianPrediction:
    """Per-point Gaussian marginals ``N(mean[i], cov[i])`` at ``points``."""

    points: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    rep: Representation
    geometry: GridGeometry | None = None

    def __post_init__(self):
        cov = 0.5 * (self.cov + np.swapaxes(self.cov, -1, -2))
        object.__setattr__(self, "cov", cov)

    @property
    def mean_field(self) -> FeatureField:
        n = self._grid_n()
        return FeatureField(self.geometry, self.mean.reshape(n, n, -1), self.rep)

    @property
    def cov_field(self) -> FeatureField:
        n = self._grid_n()
        d = self.rep.dimension
        return FeatureField(self.geometry, self.cov.reshape(n, n, d * d), tensor_square(self.rep))

    def _grid_n(self) -> int:
        if self.geometry is None:
            raise ValueError("prediction is not on a grid")
        return self.geometry.resolution

    def at(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Marginal mean/cov at points ``x``: exact lookup, else bilinear on the grid."""
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        if len(x) == len(self.points) and np.array_equal(x, self.points):
            return self.mean, self.cov
        lookup = {p.tobytes(): i for i, p in enumerate(self.points)}
        idx = [lookup.get(p.tobytes()) for p in x]
        if all(i is not None for i in idx):
            return self.mean[idx], self.cov[idx]
        if self.geometry is None:
            raise ValueError("target points not found in an off-grid prediction")
        n, d = self.geometry.resolution, self.rep.dimension
        corner, w, inside = interpolation_weights(self.geometry, x)
        if not np.all(inside):
            raise ValueError("target points outside the prediction grid")
        M = self.mean.reshape(n, n, d)[corner[..., 0], corner[..., 1]]
        C = self.cov.reshape(n, n, d, d)[corner[..., 0], corner[..., 1]]
        return np.einsum("mc,mcd->md", w, M), np.einsum("mc,mcde->mde", w, C)


def sample_prior(model: GPModel, points, seed=None, n_samples: int | None = None):
    """Draw ``F(points)`` from GP(m, K). Returns (m, d), or (n_samples, m, d)."""
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    d = model.rep.dimension
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    G = gram(model.kernel, X)
    L, _ = jittered_cholesky(G)
    k = 1 if n_samples is None else n_samples
    eps = rng.standard_normal((k, len(X) * d))
    out = (eps @ L.T).reshape(k, len(X), d) + model.mean_vector
    return out[0] if n_samples is None else out


def posterior(model: GPModel, Z: ContextSet, targets, predictive: bool = False,
              geometry: GridGeometry | None = None) -> GaussianPrediction:
    """Posterior marginals at ``targets``; ``predictive`` adds the observation noise."""
    T = np.asarray(targets, dtype=float).reshape(-1, 2)
    d = model.rep.dimension
    m = model.mean_vector
    Kss = model.kernel.blocks(np.zeros((len(T), 2)))  # (T, d, d), stationary
    if len(Z) == 0:
        mean = np.broadcast_to(m, (len(T), d)).copy()
        cov = Kss.copy()
    else:
        Kzz = gram(model.kernel, Z.points) + model.noise * np.eye(len(Z) * d)
        L, _ = jittered_cholesky(Kzz)
        Kzs = gram(model.kernel, Z.points, T)  # (n d, T d)
        resid = (Z.values - m).reshape(-1)
        alpha = cho_solve((L, True), resid)
        mean = m + (Kzs.T @ alpha).reshape(len(T), d)
        V = solve_triangular(L, Kzs, lower=True).reshape(-1, len(T), d)
        cov = Kss - np.einsum("ntd,nte->tde", V, V)
    if predictive:
        cov = cov + model.noise * np.eye(d)
    return GaussianPrediction(T, mean, cov, model.rep, geometry)


def gaussian_logpdf(y, mean, cov) -> np.ndarray:
    """Row-wise log N(y; mean, cov) for batches of d-dim Gaussians."""
    y, mean, cov = np.asarray(y, float), np.asarray(mean, float), np.asarray(cov, float)
    d = y.shape[-1]
    L = np.linalg.cholesky(cov)
    r = (y - mean)[..., None]
    z = np.linalg.solve(L, r)[..., 0]
    logdet = 2 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (np.sum(z ** 2, axis=-1) + logdet + d * np.log(2 * np.pi))


def log_likelihood(pred: GaussianPrediction, targets: ContextSet, floor: float = LIKELIHOOD_FLOOR) -> float:
    """Mean log-density of the target values under the per-point marginals (cov + floor I)."""
    if len(targets) == 0:
        raise ValueError("empty target set")
    mean, cov = pred.at(targets.points)
    d = mean.shape[-1]
    cov = cov + floor * np.eye(d)
    try:
        lp = gaussian_logpdf(targets.values, mean, cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("predictive covariance not positive definite after flooring") from exc
    return float(np.mean(lp))
