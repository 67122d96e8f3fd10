"""Grid-sampled feature fields, context sets and the action of T(2) x| H on both.

Field values are stored as ``values[i, j, :]`` at the point ``(xs[i], ys[j])``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .groups import (ConfigError, GroupElement, Representation, element_matrix, rep_from_json,
                     rep_matrix, rep_to_json)


class MultiplicityError(ValueError):
    """A context set contains repeated input points."""


class ExtrapolationError(ValueError):
    """A point lies outside the grid extent."""


@dataclass(frozen=True)
class GridGeometry:
    """Square, axis-aligned grid ``offset + [-half_width, half_width]^2``."""

    half_width: float
    resolution: int
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.resolution < 2 or self.half_width <= 0:
            raise ConfigError("grid needs resolution >= 2 and positive extent")
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))

    @classmethod
    def covering(cls, radius: float, resolution: int = 32, margin: float = 0.1, offset=(0.0, 0.0)):
        """Grid over ``[-radius, radius]^2`` widened by a relative margin."""
        return cls(radius * (1 + margin), resolution, offset)

    @property
    def spacing(self) -> float:
        return 2 * self.half_width / (self.resolution - 1)

    @property
    def extent(self):
        ox, oy = self.offset
        return ((ox - self.half_width, ox + self.half_width), (oy - self.half_width, oy + self.half_width))

    @property
    def axis(self) -> np.ndarray:
        """Centered 1-d coordinates, symmetric about zero."""
        n = self.resolution
        return (np.arange(n) - (n - 1) / 2) * self.spacing

    @property
    def xs(self) -> np.ndarray:
        return self.axis + self.offset[0]

    @property
    def ys(self) -> np.ndarray:
        return self.axis + self.offset[1]

    def points(self) -> np.ndarray:
        """All grid points, shape ``(resolution**2, 2)``, row-major in (i, j)."""
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    def fractional_index(self, x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Continuous grid indices of points ``x`` (..., 2), snapped to integers within ``tol``."""
        u = (np.asarray(x, dtype=float) - np.asarray(self.offset)) / self.spacing + (self.resolution - 1) / 2
        r = np.round(u)
        return np.where(np.abs(u - r) < tol, r, u)

    def to_json(self) -> dict:
        return {"half_width": self.half_width, "resolution": self.resolution, "offset": list(self.offset)}

    @classmethod
    def from_json(cls, d: dict) -> "GridGeometry":
        return cls(float(d["half_width"]), int(d["resolution"]), tuple(d.get("offset", (0.0, 0.0))))


@dataclass(frozen=True)
class FeatureField:
    geometry: GridGeometry
    values: np.ndarray
    rep: Representation

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = self.geometry.resolution
        if v.shape != (n, n, self.rep.dimension):
            raise ConfigError(f"field values have shape {v.shape}, expected {(n, n, self.rep.dimension)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature field values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def dimension(self) -> int:
        return self.rep.dimension


@dataclass(frozen=True)
class ContextSet:
    """Finite set of pairs ``(x_i, y_i)`` with fiber representation ``rep``."""

    points: np.ndarray
    values: np.ndarray
    rep: Representation

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 2)
        v = np.asarray(self.values, dtype=float)
        if v.size != len(p) * self.rep.dimension:
            raise ConfigError("number of values does not match number of points and rep dimension")
        v = v.reshape(len(p), self.rep.dimension)
        if len(np.unique(p, axis=0)) != len(p):
            raise MultiplicityError("context set points must be pairwise distinct")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "ContextSet":
        idx = np.asarray(idx, dtype=int)
        return ContextSet(self.points[idx], self.values[idx], self.rep)

    def canonical_order(self) -> np.ndarray:
        """Indices sorting points by (x, y)."""
        return np.lexsort((self.points[:, 1], self.points[:, 0]))


@dataclass(frozen=True)
class Transform:
    """Element ``g = t_x h`` of T(2) x| H acting by ``x -> h x + t``."""

    h: GroupElement
    translation: tuple = (0.0, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        return element_matrix(self.h)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T + np.asarray(self.translation, dtype=float)

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.translation, dtype=float)) @ self.matrix

    def __mul__(self, other: "Transform") -> "Transform":
        t = np.asarray(self.translation) + self.matrix @ np.asarray(other.translation)
        return Transform(self.h * other.h, tuple(t))

    def inverse(self) -> "Transform":
        hi = self.h.inverse()
        return Transform(hi, tuple(-(element_matrix(hi) @ np.asarray(self.translation))))


def _as_transform(g) -> Transform:
    return g if isinstance(g, Transform) else Transform(g)


def interpolation_weights(geometry: GridGeometry, x: np.ndarray):
    """Bilinear corner indices and weights for points ``x`` (m, 2).

    Returns ``(idx, w, inside)`` with ``idx`` (m, 4, 2) integer corners, ``w`` (m, 4) and a
    boolean mask of points inside the extent. Outside points get zero weights.
    """
    n = geometry.resolution
    u = geometry.fractional_index(x)
    inside = np.all((u >= 0) & (u <= n - 1), axis=-1)
    i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
    f = np.clip(u - i0, 0.0, 1.0)
    corners = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    idx = i0[:, None, :] + corners[None]
    wx = np.where(corners[None, :, 0] == 1, f[:, None, 0], 1 - f[:, None, 0])
    wy = np.where(corners[None, :, 1] == 1, f[:, None, 1], 1 - f[:, None, 1])
    w = wx * wy * inside[:, None]
    return idx, w, inside


def _bilinear(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    corner_vals = values[idx[..., 0], idx[..., 1]]  # (m, 4, d)
    out = np.einsum("mc,mcd->md", w, corner_vals)
    # exact pass-through on grid nodes, so identity transforms are bit-exact
    on_node = np.max(w, axis=1) == 1.0
    if np.any(on_node):
        k = np.argmax(w[on_node], axis=1)
        out[on_node] = corner_vals[on_node][np.arange(k.size), k]
    return out


def eval_field(F: FeatureField, x) -> np.ndarray:
    """Bilinear interpolation of ``F`` at ``x`` (2,) or (m, 2)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(-1, 2)
    idx, w, inside = interpolation_weights(F.geometry, pts)
    if not np.all(inside):
        raise ExtrapolationError(f"{np.sum(~inside)} point(s) outside the grid extent")
    out = _bilinear(F.values, idx, w)
    return out[0] if single else out


@dataclass(frozen=True)
class TransformedField:
    field: FeatureField
    fill_fraction: float
    filled: np.ndarray  # (n, n) mask of zero-filled grid points


def transform_field(F: FeatureField, g) -> TransformedField:
    """``(g.F)(x) = rho(h) F(g^-1 x)`` on the same grid; pulls from outside are zero-filled."""
    g = _as_transform(g)
    geom = F.geometry
    pts = geom.points()
    src = g.apply_inverse(pts)
    idx, w, inside = interpolation_weights(geom, src)
    pulled = _bilinear(F.values, idx, w)
    rho = rep_matrix(F.rep, g.h)
    vals = pulled @ rho.T
    n = geom.resolution
    filled = ~inside.reshape(n, n)
    return TransformedField(FeatureField(geom, vals.reshape(n, n, -1), F.rep), float(filled.mean()), filled)


def transform_context(Z: ContextSet, g) -> ContextSet:
    """``g.Z = {(g x_i, rho(h) y_i)}``, exact."""
    g = _as_transform(g)
    if len(Z) == 0:
        return Z
    return ContextSet(g.apply(Z.points), Z.values @ rep_matrix(Z.rep, g.h).T, Z.rep)


# --- serialization -------------------------------------------------------------------

def write_context_csv(Z: ContextSet, path) -> None:
    path = Path(path)
    d = Z.rep.dimension
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"v{k + 1}" for k in range(d)])
        for p, v in zip(Z.points, Z.values):
            w.writerow([repr(float(c)) for c in (*p, *v)])


class IngestionError(ValueError):
    pass


def read_context_csv(path, rep: Representation) -> ContextSet:
    path = Path(path)
    d = rep.dimension
    pts, vals = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["x", "y"] + [f"v{k + 1}" for k in range(d)]
        if header is None or [h.strip() for h in header] != expected:
            raise IngestionError(f"{path}: header {header} does not match {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise IngestionError(f"{path}:{lineno}: expected {d + 2} columns, got {len(row)}")
            try:
                nums = [float(c) for c in row]
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
            if not np.all(np.isfinite(nums)):
                raise IngestionError(f"{path}:{lineno}: non-finite value")
            pts.append(nums[:2])
            vals.append(nums[2:])
    points = np.array(pts, dtype=float).reshape(-1, 2)
    uniq, counts = np.unique(points, axis=0, return_counts=True)
    if np.any(counts > 1):
        dup = uniq[counts > 1][0]
        rows = [i + 2 for i, p in enumerate(points) if np.array_equal(p, dup)]
        raise MultiplicityError(f"{path}: duplicate point {tuple(dup)} on lines {rows}")
    return ContextSet(points, np.array(vals, dtype=float).reshape(-1, d), rep)


def write_field(F: FeatureField, path) -> None:
    """Little-endian f64 row-major blob at ``path`` plus ``path.json`` sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(F.values, dtype="<f8").tobytes())
    meta = {"geometry": F.geometry.to_json(), "rep": json.loads(rep_to_json(F.rep)),
            "shape": list(F.values.shape), "dtype": "<f8", "order": "C"}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_field(path) -> FeatureField:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    vals = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["shape"])
    return FeatureField(GridGeometry.from_json(meta["geometry"]), vals.copy(), rep_from_json(meta["rep"]))
