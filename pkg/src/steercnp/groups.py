"""Finite fiber groups C_N and D_N acting on the plane, and their orthogonal representations.

Dihedral elements are written ``r^k f^s`` where ``r`` rotates by ``2*pi/N`` and ``f``
reflects about the x-axis, so ``element_matrix`` is ``R(2*pi*k/N) @ diag(1, -1)**s``.
Regular-representation bases enumerate elements rotation-major, flip-minor.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from . import _backend as B


class ConfigError(ValueError):
    """Invalid or mismatched group / representation configuration."""


@dataclass(frozen=True)
class FiberGroup:
    kind: str
    N: int

    def __post_init__(self):
        if self.kind not in ("cyclic", "dihedral"):
            raise ConfigError(f"unknown group kind {self.kind!r}")
        if not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ConfigError(f"group order must be a positive integer, got {self.N!r}")

    @property
    def order(self) -> int:
        return self.N if self.kind == "cyclic" else 2 * self.N

    def __len__(self):
        return self.order

    @cached_property
    def elements(self) -> tuple:
        flips = (False,) if self.kind == "cyclic" else (False, True)
        return tuple(GroupElement(self, k, s) for k in range(self.N) for s in flips)

    @property
    def identity(self) -> "GroupElement":
        return GroupElement(self, 0, False)

    def element(self, rotation: int, flip: bool = False) -> "GroupElement":
        return GroupElement(self, rotation % self.N, bool(flip))

    @property
    def name(self) -> str:
        return f"{'C' if self.kind == 'cyclic' else 'D'}{self.N}"

    def __repr__(self):
        return self.name


def parse_group(name: str) -> FiberGroup:
    """``"C8"`` -> cyclic(8), ``"D4"`` -> dihedral(4); ``"trivial"`` is C1."""
    if name in ("trivial", "e"):
        return FiberGroup("cyclic", 1)
    m = re.fullmatch(r"([CD])(\d+)", name.strip())
    if m is None:
        raise ConfigError(f"cannot parse group {name!r}")
    return FiberGroup("cyclic" if m.group(1) == "C" else "dihedral", int(m.group(2)))


@dataclass(frozen=True)
class GroupElement:
    group: FiberGroup = field(repr=False)
    rotation: int
    flip: bool = False

    def __post_init__(self):
        if not 0 <= self.rotation < self.group.N:
            raise ConfigError(f"rotation index {self.rotation} outside [0, {self.group.N})")
        if self.flip and self.group.kind == "cyclic":
            raise ConfigError("cyclic groups have no reflections")

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        if other.group != self.group:
            raise ConfigError("cannot compose elements of different groups")
        sign = -1 if self.flip else 1
        return GroupElement(self.group, (self.rotation + sign * other.rotation) % self.group.N,
                            self.flip != other.flip)

    def inverse(self) -> "GroupElement":
        if self.flip:
            return self  # reflections are involutions
        return GroupElement(self.group, (-self.rotation) % self.group.N, False)

    @property
    def index(self) -> int:
        if self.group.kind == "cyclic":
            return self.rotation
        return 2 * self.rotation + int(self.flip)

    @property
    def angle(self) -> float:
        return 2 * np.pi * self.rotation / self.group.N

    def matrix(self) -> np.ndarray:
        return element_matrix(self)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


_QUARTER = {0: ((1, 0), (0, 1)), 1: ((0, -1), (1, 0)), 2: ((-1, 0), (0, -1)), 3: ((0, 1), (-1, 0))}


def element_matrix(h: GroupElement) -> np.ndarray:
    """2x2 orthogonal matrix of ``h`` acting on the plane."""
    num = 4 * h.rotation
    if num % h.group.N == 0:
        # exact integer matrices for multiples of 90 degrees
        rot = np.array(_QUARTER[(num // h.group.N) % 4], dtype=float)
    else:
        rot = rotation_matrix(h.angle)
    if h.flip:
        rot = rot @ np.diag([1.0, -1.0])
    return rot


O2 = Union[GroupElement, np.ndarray]


@dataclass(frozen=True)
class Representation:
    """Orthogonal representation of a fiber group.

    ``trivial``, ``standard`` and any ``direct_sum``/``tensor_square`` built from them
    also accept a raw 2x2 orthogonal matrix in :meth:`matrix`, which is how continuous
    rotations are spot-checked.
    """

    kind: str
    group: FiberGroup = field(repr=False)
    summands: tuple = ()
    base: "Representation | None" = None

    def __post_init__(self):
        if self.kind not in ("trivial", "standard", "regular", "direct_sum", "tensor_square"):
            raise ConfigError(f"unknown representation kind {self.kind!r}")
        if self.kind == "direct_sum":
            if not self.summands:
                raise ConfigError("direct sum needs at least one summand")
            for r in self.summands:
                if r.group != self.group:
                    raise ConfigError("direct sum of representations of different groups")
        if self.kind == "tensor_square" and (self.base is None or self.base.group != self.group):
            raise ConfigError("tensor_square needs a base representation of the same group")

    @cached_property
    def dimension(self) -> int:
        if self.kind == "trivial":
            return 1
        if self.kind == "standard":
            return 2
        if self.kind == "regular":
            return self.group.order
        if self.kind == "direct_sum":
            return sum(r.dimension for r in self.summands)
        return self.base.dimension ** 2

    @property
    def blocks(self) -> list:
        """Flattened irreducible-ish fiber blocks (top-level direct-sum summands)."""
        if self.kind == "direct_sum":
            out = []
            for r in self.summands:
                out.extend(r.blocks)
            return out
        return [self]

    def matrix(self, h: O2) -> np.ndarray:
        return rep_matrix(self, h)

    @cached_property
    def _table(self) -> np.ndarray:
        return np.stack([rep_matrix(self, h) for h in self.group.elements])

    def __add__(self, other: "Representation") -> "Representation":
        return direct_sum(self, other)

    def __repr__(self):
        return f"{self.group.name}:{describe(self)}"


def trivial(group: FiberGroup) -> Representation:
    return Representation("trivial", group)


def standard(group: FiberGroup) -> Representation:
    return Representation("standard", group)


def regular(group: FiberGroup) -> Representation:
    return Representation("regular", group)


def direct_sum(*reps: Representation) -> Representation:
    flat = []
    for r in reps:
        flat.extend(r.summands if r.kind == "direct_sum" else (r,))
    if not flat:
        raise ConfigError("empty direct sum")
    return Representation("direct_sum", flat[0].group, tuple(flat))


def multiple(rep: Representation, n: int) -> Representation:
    return direct_sum(*([rep] * n))


def tensor_square(rep: Representation) -> Representation:
    return Representation("tensor_square", rep.group, base=rep)


def _o2_matrix(h: O2) -> np.ndarray:
    if isinstance(h, GroupElement):
        return element_matrix(h)
    m = np.asarray(h, dtype=float)
    if m.shape != (2, 2):
        raise ConfigError(f"expected a 2x2 matrix, got shape {m.shape}")
    return m


def rep_matrix(rep: Representation, h: O2) -> np.ndarray:
    """Matrix of ``rep`` at ``h``."""
    if isinstance(h, GroupElement) and h.group != rep.group:
        raise ConfigError(f"element of {h.group} used with representation of {rep.group}")
    if rep.kind == "trivial":
        return np.ones((1, 1))
    if rep.kind == "standard":
        return _o2_matrix(h)
    if rep.kind == "regular":
        if not isinstance(h, GroupElement):
            raise ConfigError("regular representation needs a group element")
        n = rep.group.order
        out = np.zeros((n, n))
        for g in rep.group.elements:
            out[(h * g).index, g.index] = 1.0
        return out
    if rep.kind == "direct_sum":
        mats = [rep_matrix(r, h) for r in rep.summands]
        out = np.zeros((rep.dimension, rep.dimension))
        i = 0
        for m in mats:
            j = i + m.shape[0]
            out[i:j, i:j] = m
            i = j
        return out
    m = rep_matrix(rep.base, h)
    # vec(M A M^T) = (M kron M) vec(A) for row-major vec as well as column-major
    return np.kron(m, m)


def describe(rep: Representation):
    """JSON-able descriptor of a representation (without the group)."""
    if rep.kind in ("trivial", "standard", "regular"):
        return rep.kind
    if rep.kind == "direct_sum":
        return {"direct_sum": [describe(r) for r in rep.summands]}
    return {"tensor_square": describe(rep.base)}


def build_rep(desc, group: FiberGroup) -> Representation:
    if isinstance(desc, str):
        if desc in ("trivial", "standard", "regular"):
            return Representation(desc, group)
        raise ConfigError(f"unknown representation {desc!r}")
    if isinstance(desc, dict) and len(desc) == 1:
        (key, val), = desc.items()
        if key == "direct_sum":
            return direct_sum(*[build_rep(d, group) for d in val])
        if key == "tensor_square":
            return tensor_square(build_rep(val, group))
    raise ConfigError(f"cannot build representation from {desc!r}")


def rep_to_json(rep: Representation) -> str:
    return json.dumps({"group": rep.group.name, "rep": describe(rep)}, sort_keys=True)


def rep_from_json(text: str | dict) -> Representation:
    d = json.loads(text) if isinstance(text, str) else text
    try:
        return build_rep(d["rep"], parse_group(d["group"]))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc} in representation config") from exc


# --- equivariant kernel projection -------------------------------------------------

def _tap_transform(M: np.ndarray, k: int, tol: float = 1e-9) -> np.ndarray:
    """Linear map T with (T kappa)[t] = kappa(M tau_t), bilinear between taps, zero outside.

    Taps are indexed ``t = a*k + b`` with offset ``tau = (a - c, b - c)``, ``c = k // 2``.
    """
    c = k // 2
    T = np.zeros((k * k, k * k))
    for a in range(k):
        for b in range(k):
            u = M @ np.array([a - c, b - c], dtype=float) + c
            r = np.round(u)
            u = np.where(np.abs(u - r) < tol, r, u)
            i0, j0 = np.floor(u).astype(int)
            fi, fj = u[0] - i0, u[1] - j0
            for di, wi in ((0, 1 - fi), (1, fi)):
                for dj, wj in ((0, 1 - fj), (1, fj)):
                    w = wi * wj
                    ii, jj = i0 + di, j0 + dj
                    if w != 0 and 0 <= ii < k and 0 <= jj < k:
                        T[a * k + b, ii * k + jj] += w
    return T


class KernelProjector:
    """Group-average projection of raw convolution kernels onto the steerable subspace.

    Kernels are arrays of shape ``(c_out, c_in, k, k)`` (numpy or torch); the output
    satisfies ``kappa(h tau) = rho_out(h) kappa(tau) rho_in(h)^-1`` on every tap, exactly
    when the group maps the tap grid onto itself (N in {1, 2, 4}).
    """

    def __init__(self, rep_in: Representation, rep_out: Representation, kernel_size: int):
        if rep_in.group != rep_out.group:
            raise ConfigError("input and output representations belong to different groups")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        self.group = rep_in.group
        self.rep_in, self.rep_out, self.kernel_size = rep_in, rep_out, kernel_size
        els = self.group.elements
        self.tap_maps = np.stack([_tap_transform(element_matrix(h), kernel_size) for h in els])
        self.rho_in = rep_in._table
        self.rho_out = rep_out._table

    @property
    def exact(self) -> bool:
        return bool(np.all((self.tap_maps == 0) | (self.tap_maps == 1))
                    and np.all(self.tap_maps.sum(-1) == 1))

    def transformed(self, kernel, tap_maps=None):
        """kappa(h tau) for every h: shape (|H|, c_out, c_in, k, k)."""
        T = self.tap_maps if tap_maps is None else tap_maps
        T = B.as_like(T, kernel) if not B.is_torch(T) else T
        k = self.kernel_size
        flat = kernel.reshape(kernel.shape[0], kernel.shape[1], k * k)
        out = B.xp(kernel).einsum("hts,ois->hoit", T, flat)
        return out.reshape(out.shape[0], kernel.shape[0], kernel.shape[1], k, k)

    def __call__(self, kernel, tap_maps=None, rho_in=None, rho_out=None):
        rin = B.as_like(self.rho_in, kernel) if rho_in is None else rho_in
        rout = B.as_like(self.rho_out, kernel) if rho_out is None else rho_out
        kh = self.transformed(kernel, tap_maps)
        # rho_out(h)^T kappa(h tau) rho_in(h), averaged over h
        out = B.xp(kernel).einsum("hop,hoixy,hiq->pqxy", rout, kh, rin)
        return out / self.group.order

    def project_bias(self, bias, rho_out=None):
        """Average of rho_out(h) b: the closest invariant bias."""
        rout = B.as_like(self.rho_out, bias) if rho_out is None else rho_out
        return B.xp(bias).einsum("hpo,o->p", rout, bias) / self.group.order

    def constraint_residual(self, kernel) -> float:
        """max over h, taps of |kappa(h tau) - rho_out(h) kappa(tau) rho_in(h)^T|."""
        kernel = np.asarray(kernel, dtype=float)
        kh = self.transformed(kernel)
        rhs = np.einsum("hpo,oixy,hqi->hpqxy", self.rho_out, kernel, self.rho_in)
        return float(np.max(np.abs(kh - rhs)))


def project_group_average(rep_in: Representation, rep_out: Representation, kernel):
    """Project raw kernel samples ``(c_out, c_in, k, k)`` onto the equivariant subspace."""
    return KernelProjector(rep_in, rep_out, kernel.shape[-1])(kernel)
