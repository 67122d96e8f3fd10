"""Held-out mean log-likelihood for SteerCNP models and the exact GP oracle."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..gp import GPModel, log_likelihood, posterior
from ..kernels import MatrixKernel
from ..train import evaluate_splits, make_eval_splits

METRICS_SCHEMA = {
    "type": "object",
    "required": ["n_samples", "seeds", "max_context", "models"],
    "properties": {
        "n_samples": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "max_context": {"type": "integer", "minimum": 1},
        "models": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["mean_ll", "std_ll", "per_seed"],
                "properties": {
                    "mean_ll": {"type": "number"},
                    "std_ll": {"type": "number", "minimum": 0},
                    "per_seed": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
    },
}


@dataclass
class EvalConfig:
    seeds: list = field(default_factory=lambda: [0])
    max_context: int = 50
    min_context: int = 3
    batch_size: int = 32


def oracle_from_manifest(manifest: dict, rep) -> GPModel:
    return GPModel(MatrixKernel.from_json(manifest["kernel"]), rep, noise=float(manifest["noise_variance"]))


def oracle_lls(oracle: GPModel, splits) -> np.ndarray:
    """Per-sample mean target LL of the exact predictive posterior."""
    return np.array([log_likelihood(posterior(oracle, c, t.points, predictive=True), t) for c, t in splits])


def model_lls(model, splits, batch_size: int = 32) -> np.ndarray:
    return evaluate_splits(model, splits, batch_size)


def _summary(per_seed: list) -> dict:
    a = np.asarray(per_seed, dtype=float)
    return {"mean_ll": float(a.mean()), "std_ll": float(a.std()), "per_seed": [float(v) for v in a]}


def evaluate(models: dict, samples, cfg: EvalConfig, oracles: dict | None = None) -> dict:
    """Metrics dict for named models (and GP oracles) on eval-mode splits, one split draw per seed."""
    per_seed = {name: [] for name in list(models) + list(oracles or {})}
    for seed in cfg.seeds:
        splits = make_eval_splits(samples, seed, cfg.max_context, cfg.min_context)
        for name, m in models.items():
            per_seed[name].append(float(np.mean(model_lls(m, splits, cfg.batch_size))))
        for name, o in (oracles or {}).items():
            per_seed[name].append(float(np.mean(oracle_lls(o, splits))))
    return {
        "n_samples": len(samples),
        "seeds": [int(s) for s in cfg.seeds],
        "max_context": cfg.max_context,
        "models": {name: _summary(v) for name, v in per_seed.items()},
    }


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"


def validate_metrics(metrics: dict) -> None:
    import jsonschema

    jsonschema.validate(metrics, METRICS_SCHEMA)
