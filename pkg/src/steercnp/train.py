"""Training objective, context/target splitting and the Adam loop.

Reverse-mode gradients come from torch autograd; :func:`backward` wraps it with the
zero-gradient-and-warn behaviour for parameters that do not reach the loss.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .field import ContextSet
from .groups import ConfigError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 20
    max_context: int = 50
    min_context: int = 3
    seed: int = 0
    dtype: str = "float32"
    divergence_threshold: float = 1e6
    schedule: str = "cosine"  # per-step cosine decay to zero, or "constant"

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.max_context < 1:
            raise ConfigError("invalid training configuration")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam parameters")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown learning-rate schedule {self.schedule!r}")


def split_context_target(sample: ContextSet, rng: np.random.Generator, max_context: int = 50,
                         mode: str = "train", min_context: int = 3):
    """Random context/target split.

    Context size is uniform on ``{min_context, ..., max_context}`` (clipped to the sample).
    In ``train`` mode the target is the whole sample, in ``eval`` mode the complement.
    """
    n = len(sample)
    if n < 2:
        raise ValueError("need at least two points to split")
    hi = min(max_context, n if mode == "train" else n - 1)
    lo = min(min_context, hi)
    size = int(rng.integers(lo, hi + 1))
    perm = rng.permutation(n)
    ctx = np.sort(perm[:size])
    if mode == "train":
        return sample.subset(ctx), sample
    if mode != "eval":
        raise ValueError(f"unknown split mode {mode!r}")
    return sample.subset(ctx), sample.subset(np.sort(perm[size:]))


@dataclass
class Batch:
    ctx_x: torch.Tensor
    ctx_y: torch.Tensor
    ctx_mask: torch.Tensor
    tgt_x: torch.Tensor
    tgt_y: torch.Tensor
    tgt_mask: torch.Tensor

    def to(self, dtype) -> "Batch":
        return Batch(*(getattr(self, f).to(dtype) for f in self.__dataclass_fields__))


def collate(pairs: Sequence[tuple[ContextSet, ContextSet]], output_channels=None,
            dtype=torch.float64) -> Batch:
    """Pad a list of (context, target) pairs; contexts are put in canonical point order."""
    nc = max(1, max(len(c) for c, _ in pairs))
    nt = max(len(t) for _, t in pairs)
    b = len(pairs)
    d_in = pairs[0][0].rep.dimension
    oc = slice(None) if output_channels is None else list(output_channels)
    d_out = pairs[0][1].values[:, oc].shape[1]
    cx, cy, cm = np.zeros((b, nc, 2)), np.zeros((b, nc, d_in)), np.zeros((b, nc))
    tx, ty, tm = np.zeros((b, nt, 2)), np.zeros((b, nt, d_out)), np.zeros((b, nt))
    for k, (c, t) in enumerate(pairs):
        o = c.canonical_order()
        cx[k, :len(c)], cy[k, :len(c)], cm[k, :len(c)] = c.points[o], c.values[o], 1.0
        tx[k, :len(t)], ty[k, :len(t)], tm[k, :len(t)] = t.points, t.values[:, oc], 1.0
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    return Batch(as_t(cx), as_t(cy), as_t(cm), as_t(tx), as_t(ty), as_t(tm))


def gaussian_log_density(y, mean, cov):
    """log N(y; mean, cov) over the last axis, batched, differentiable."""
    d = y.shape[-1]
    L = torch.linalg.cholesky(cov)
    z = torch.linalg.solve_triangular(L, (y - mean)[..., None], upper=False)[..., 0]
    logdet = 2 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    return -0.5 * ((z ** 2).sum(-1) + logdet + d * math.log(2 * math.pi))


def per_sample_log_likelihood(mean, cov, batch: Batch) -> torch.Tensor:
    """Mean target log-likelihood for every batch element, (B,)."""
    lp = gaussian_log_density(batch.tgt_y, mean, cov) * batch.tgt_mask
    return lp.sum(-1) / batch.tgt_mask.sum(-1)


def batch_loss(model, batch: Batch) -> torch.Tensor:
    mean, cov = model(batch.ctx_x, batch.ctx_y, batch.ctx_mask, batch.tgt_x)
    return -per_sample_log_likelihood(mean, cov, batch).mean()


def loss(model, Z_C: ContextSet, Z_T: ContextSet) -> torch.Tensor:
    """Negative mean target log-likelihood for a single context/target pair."""
    oc = model.config.output_channels if hasattr(model, "config") else None
    batch = collate([(Z_C, Z_T)], oc, dtype=model.dtype)
    value = batch_loss(model, batch)
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss {value.item()} for context of size {len(Z_C)}")
    return value


_warned_detached: set = set()


def backward(loss_value: torch.Tensor, params: dict[str, torch.nn.Parameter]) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_value`` for every named parameter; unreachable ones get zeros."""
    names = list(params)
    grads = torch.autograd.grad(loss_value, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        if g is None:
            if n not in _warned_detached:
                warnings.warn(f"parameter {n!r} has no path to the loss; gradient set to zero")
                _warned_detached.add(n)
            g = torch.zeros_like(params[n])
        out[n] = g
    return out


# --- training loop --------------------------------------------------------------------

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def make_eval_splits(dataset: Sequence[ContextSet], seed: int, max_context: int, min_context: int = 3):
    rng = np.random.default_rng(seed)
    return [split_context_target(z, rng, max_context, "eval", min_context) for z in dataset]


@torch.no_grad()
def evaluate_splits(model, splits, batch_size: int = 32) -> np.ndarray:
    """Per-sample mean target log-likelihood of ``model`` on fixed (context, target) pairs."""
    oc = model.config.output_channels
    out = []
    for i in range(0, len(splits), batch_size):
        batch = collate(splits[i:i + batch_size], oc, dtype=model.dtype)
        mean, cov = model(batch.ctx_x, batch.ctx_y, batch.ctx_mask, batch.tgt_x)
        out.append(per_sample_log_likelihood(mean, cov, batch).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ll: float
    seconds: float
    oracle_gap: float | None = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    initial_val_ll: float | None = None
    best_epoch: int | None = None
    best_val_ll: float | None = None
    aborted: str | None = None

    def to_json_lines(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.epochs)


def fit(model, train_data: Sequence[ContextSet], val_data: Sequence[ContextSet], cfg: TrainConfig,
        oracle_ll: float | None = None, out_dir=None, log_every: int = 0,
        callback: Callable | None = None) -> TrainReport:
    """Adam on the negative mean target log-likelihood; keeps the best-validation weights.

    Returns the report; the model is left holding the best-validation parameters.
    """
    if not train_data:
        raise ValueError("empty training set")
    dtype = _DTYPES[cfg.dtype]
    model.to(dtype)
    rng = np.random.default_rng(cfg.seed)
    val_splits = make_eval_splits(val_data, cfg.seed + 1, cfg.max_context, cfg.min_context)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    sched = None
    if cfg.schedule == "cosine":
        total = cfg.epochs * math.ceil(len(train_data) / cfg.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total))
    oc = model.config.output_channels
    report = TrainReport()
    val_ll = float(np.mean(evaluate_splits(model, val_splits))) if val_splits else float("nan")
    report.initial_val_ll = val_ll
    best_state, report.best_val_ll, report.best_epoch = copy.deepcopy(model.state_dict()), val_ll, 0
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_report.jsonl").write_text("")
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_data))
        losses = []
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            pairs = [split_context_target(train_data[j], rng, cfg.max_context, "train", cfg.min_context)
                     for j in order[i:i + cfg.batch_size]]
            batch = collate(pairs, oc, dtype=dtype)
            opt.zero_grad()
            value = batch_loss(model, batch)
            if not torch.isfinite(value) or value.item() > cfg.divergence_threshold:
                report.aborted = f"divergence at epoch {epoch} step {step}: loss={value.item()}"
                if out_dir:
                    np.savez(out_dir / "offending_batch.npz",
                             **{k: getattr(batch, k).numpy() for k in batch.__dataclass_fields__})
                raise TrainingError(report.aborted, report)
            value.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(value.item())
            if log_every and step % log_every == 0:
                log.info("epoch %d step %d loss %.4f", epoch, step, value.item())
        val_ll = float(np.mean(evaluate_splits(model, val_splits))) if val_splits else float("nan")
        rec = EpochRecord(epoch, float(np.mean(losses)), val_ll, time.perf_counter() - t0,
                          None if oracle_ll is None else oracle_ll - val_ll)
        report.epochs.append(rec)
        log.info("epoch %d train_loss %.4f val_ll %.4f (%.1fs)", epoch, rec.train_loss, val_ll, rec.seconds)
        if val_ll > report.best_val_ll:
            report.best_val_ll, report.best_epoch = val_ll, epoch
            best_state = copy.deepcopy(model.state_dict())
        if out_dir:
            with (out_dir / "train_report.jsonl").open("a") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        if callback:
            callback(model, rec)
    model.load_state_dict(best_state)
    return report
