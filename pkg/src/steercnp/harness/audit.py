"""Numerical equivariance audits for kernels, GP posteriors, the encoder and SteerCNP models."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..encoder import EncoderConfig, check_encoder_equivariance
from ..field import ContextSet, GridGeometry, Transform, transform_context, transform_field
from ..gp import GPModel, posterior
from ..groups import (FiberGroup, GroupElement, Representation, build_rep, describe, element_matrix,
                      parse_group, rotation_matrix)
from ..kernels import MatrixKernel, check_angular_constraint

KERNEL_TOL = 1e-10
GP_TOL = 1e-8
ENCODER_TOL = 1e-10
MODEL_TOL = 1e-6


@dataclass
class AuditEntry:
    name: str
    distribution: str
    max_residual: float
    mean_residual: float
    tolerance: float | None
    passed: bool | None  # None: reported only

    def __post_init__(self):
        if self.max_residual < 0 or self.mean_residual < 0:
            raise ValueError("residuals are nonnegative")


@dataclass
class AuditReport:
    entries: list = field(default_factory=list)

    def add(self, name, distribution, residuals, tol):
        r = np.asarray(residuals, dtype=float)
        passed = None if tol is None else bool(r.max() < tol)
        self.entries.append(AuditEntry(name, distribution, float(r.max()), float(r.mean()), tol, passed))

    @property
    def passed(self) -> bool:
        return all(e.passed is not False for e in self.entries)

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "entries": [asdict(e) for e in self.entries]},
                          indent=2, sort_keys=True)

    def lines(self):
        for e in self.entries:
            status = "REPORT" if e.passed is None else ("PASS" if e.passed else "FAIL")
            tol = "" if e.tolerance is None else f" < {e.tolerance:g}"
            yield f"[{status}] {e.name} ({e.distribution}): max {e.max_residual:.3e}{tol}"


@dataclass
class GroupSampleSpec:
    group: str = "C4"
    n_angles: int = 64
    n_contexts: int = 5
    context_size: int = 10
    seed: int = 0

    @property
    def fiber_group(self) -> FiberGroup:
        return parse_group(self.group)


def _is_grid_exact(h: GroupElement) -> bool:
    return bool(np.all(element_matrix(h) == np.round(element_matrix(h))))


def audit_kernel(K: MatrixKernel, rep: Representation, spec: GroupSampleSpec, report=None) -> AuditReport:
    report = report or AuditReport()
    rng = np.random.default_rng(spec.seed)
    pts = lambda: rng.normal(scale=2 * K.lengthscale if K.kind != "direct_sum" else 3.0, size=2)
    finite = [(pts(), pts(), h) for h in spec.fiber_group.elements for _ in range(8)]
    report.add(f"kernel/{K.kind}/angular", f"all h in {spec.group}",
               [check_angular_constraint(K, rep, [s]) for s in finite], KERNEL_TOL)
    try:
        rep.matrix(rotation_matrix(0.3))
        continuous = True
    except Exception:
        continuous = False
    if continuous:
        angles = np.linspace(0, 2 * np.pi, spec.n_angles, endpoint=False)
        samples = [(pts(), pts(), rotation_matrix(a) @ (np.diag([1.0, -1.0]) if k % 2 else np.eye(2)))
                   for k, a in enumerate(angles)]
        report.add(f"kernel/{K.kind}/angular", f"{spec.n_angles} uniform angles in O(2)",
                   [check_angular_constraint(K, rep, [s]) for s in samples], KERNEL_TOL)
    shifts = []
    for _ in range(20):
        x, xp, dlt = pts(), pts(), rng.normal(scale=10, size=2)
        shifts.append(np.max(np.abs(K.blocks(x + dlt - (xp + dlt)) - K.blocks(x - xp))))
    report.add(f"kernel/{K.kind}/stationarity", "random shifts", shifts, KERNEL_TOL)
    return report


def random_context(rng, rep: Representation, n: int, radius: float = 6.0) -> ContextSet:
    return ContextSet(rng.uniform(-radius, radius, (n, 2)), rng.normal(size=(n, rep.dimension)), rep)


def audit_gp(model: GPModel, spec: GroupSampleSpec, report=None) -> AuditReport:
    """Posterior equivariance: prediction at g x from g.Z equals rho(h) * prediction at x."""
    report = report or AuditReport()
    rng = np.random.default_rng(spec.seed)
    group = spec.fiber_group
    rep = build_rep(describe(model.rep), group)
    mres, cres = [], []
    for _ in range(spec.n_contexts):
        Z = random_context(rng, rep, spec.context_size)
        targets = rng.uniform(-6, 6, (15, 2))
        base = posterior(model, Z, targets)
        for h in group.elements:
            g = Transform(h, tuple(rng.normal(scale=3, size=2)))
            moved = posterior(model, transform_context(Z, g), g.apply(targets))
            R = rep.matrix(h)
            mres.append(np.max(np.abs(moved.mean - base.mean @ R.T)))
            cres.append(np.max(np.abs(moved.cov - R @ base.cov @ R.T)))
    report.add(f"gp/{model.kernel.kind}/posterior_mean", f"SE(2) with h in {spec.group}", mres, GP_TOL)
    report.add(f"gp/{model.kernel.kind}/posterior_cov", f"SE(2) with h in {spec.group}", cres, GP_TOL)
    return report


def audit_encoder(cfg: EncoderConfig, rep: Representation, spec: GroupSampleSpec, report=None) -> AuditReport:
    report = report or AuditReport()
    rng = np.random.default_rng(spec.seed)
    exact, approx = [], []
    r = 0.6 * cfg.grid.half_width
    for _ in range(spec.n_contexts):
        Z = random_context(rng, rep, spec.context_size, r)
        for h in rep.group.elements:
            res = check_encoder_equivariance(Z, h, cfg)
            (exact if _is_grid_exact(h) else approx).append(res)
    report.add("encoder/equivariance", "grid-exact h", exact, ENCODER_TOL)
    if approx:
        report.add("encoder/equivariance", "interpolated h", approx, None)
    return report


def model_equivariance_residuals(model, Z: ContextSet, h: GroupElement):
    """(mean, cov) residuals of the grid prediction of ``model`` under ``h``."""
    base = model.predict_grid(Z)
    moved = model.predict_grid(transform_context(Z, h))
    tm = transform_field(base.mean_field, h)
    tc = transform_field(base.cov_field, h)
    keep = ~tm.filled
    mres = np.abs(moved.mean_field.values - tm.field.values)[keep]
    cres = np.abs(moved.cov_field.values - tc.field.values)[keep]
    return float(mres.max()), float(cres.max())


def audit_model(model, spec: GroupSampleSpec, report=None, tol: float = MODEL_TOL, label="steercnp") -> AuditReport:
    """End-to-end grid equivariance of a SteerCNP under its own fiber group."""
    import torch

    report = report or AuditReport()
    rng = np.random.default_rng(spec.seed)
    orig_dtype = model.dtype
    model.double()
    try:
        mres, cres, approx = [], [], []
        r = 0.6 * model.geometry.half_width
        for _ in range(spec.n_contexts):
            Z = random_context(rng, model.rep_in, spec.context_size, r)
            for h in model.rep_in.group.elements:
                m, c = model_equivariance_residuals(model, Z, h)
                if _is_grid_exact(h):
                    mres.append(m)
                    cres.append(c)
                else:
                    approx.append(max(m, c))
        grp = model.rep_in.group.name
        report.add(f"{label}/mean", f"grid-exact h in {grp}", mres, tol)
        report.add(f"{label}/cov", f"grid-exact h in {grp}", cres, tol)
        if approx:
            report.add(f"{label}/interpolated", f"other h in {grp}", approx, None)
        layer = model.constraint_residuals()
        report.add(f"{label}/layer_constraints", "every tap, every h", layer,
                   1e-12 if model.config.project and _all_exact(model) else None)
    finally:
        model.to(orig_dtype)
    return report


def _all_exact(model) -> bool:
    return all(c.projector.exact for c in model.decoder.convs)


def audit_equivariance(target, spec: GroupSampleSpec | None = None, **kw) -> AuditReport:
    """Dispatch on the audited object: MatrixKernel (needs ``rep=``), GPModel, EncoderConfig
    (needs ``rep=``) or a SteerCNP model."""
    from ..steer_net import SteerCNP

    spec = spec or GroupSampleSpec()
    if isinstance(target, MatrixKernel):
        return audit_kernel(target, kw["rep"], spec)
    if isinstance(target, GPModel):
        rep = target.rep
        report = audit_kernel(target.kernel, rep, spec)
        return audit_gp(target, spec, report)
    if isinstance(target, EncoderConfig):
        return audit_encoder(target, kw["rep"], spec)
    if isinstance(target, SteerCNP):
        return audit_model(target, spec, **kw)
    raise TypeError(f"cannot audit {type(target).__name__}")
