"""Command line entry point: ``steercnp <command> --config cfg.json --out-dir DIR``.

Exit codes: 0 ok, 2 configuration error, 3 numerical error, 4 audit failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_AUDIT = 0, 2, 3, 4

log = logging.getLogger("steercnp")


class CLIConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CLIConfigError(f"cannot read config {path}: {exc}") from exc


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise CLIConfigError(f"config is missing {key!r}")
    return cfg[key]


def _resolve(base: Path | None, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() or base is None else base / p


def cmd_generate(cfg, args, out: Path) -> int:
    from .datasets import DatasetSpec, generate, save_dataset

    spec_d = dict(cfg.get("dataset", cfg))
    if args.seed is not None:
        spec_d["seed"] = args.seed
    spec = DatasetSpec(**spec_d)
    ds = generate(spec)
    save_dataset(ds, out)
    print(f"wrote {sum(len(v) for v in ds.splits.values())} samples to {out}")
    return EXIT_OK


def _dataset(cfg, base):
    from .datasets import load_dataset

    return load_dataset(_resolve(base, _require(cfg, "dataset")))


def cmd_train(cfg, args, out: Path) -> int:
    import torch

    from ..steer_net import ModelConfig, SteerCNP, save_checkpoint
    from ..train import TrainConfig, fit

    base = args.config_dir
    ds = _dataset(cfg, base)
    tcfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg["seed"] = args.seed
    tc = TrainConfig(**tcfg)
    mcfg = dict(cfg.get("model", {}))
    mcfg.setdefault("group", ds.manifest.get("group", "C4"))
    from ..groups import describe

    mcfg.setdefault("rep_in", describe(ds.rep_in))
    if ds.rep_out is not None:
        mcfg.setdefault("rep_out", describe(ds.rep_out))
        mcfg.setdefault("output_channels", ds.output_channels)
    model = SteerCNP(ModelConfig(**mcfg))
    report = fit(model, ds[cfg.get("train_split", "train")], ds[cfg.get("val_split", "val")], tc, out_dir=out)
    save_checkpoint(model, out / "checkpoint", extra={"best_epoch": report.best_epoch})
    summary = {"initial_val_ll": report.initial_val_ll, "best_val_ll": report.best_val_ll,
               "best_epoch": report.best_epoch}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(cfg, args, out: Path) -> int:
    from ..steer_net import load_checkpoint
    from .evaluate import EvalConfig, dumps_metrics, evaluate, oracle_from_manifest, validate_metrics

    base = args.config_dir
    ds = _dataset(cfg, base)
    samples = ds[cfg.get("split", "val")]
    ecfg = dict(cfg.get("eval", {}))
    if args.seed is not None:
        ecfg["seeds"] = [args.seed]
    models = {name: load_checkpoint(_resolve(base, p)) for name, p in cfg.get("checkpoints", {}).items()}
    oracles = {}
    if cfg.get("oracle", True) and "kernel" in ds.manifest:
        oracles["gp_oracle"] = oracle_from_manifest(ds.manifest, ds.rep_in)
    metrics = evaluate(models, samples, EvalConfig(**ecfg), oracles)
    validate_metrics(metrics)
    (out / "metrics.json").write_text(dumps_metrics(metrics))
    print(dumps_metrics(metrics), end="")
    return EXIT_OK


def _rep(cfg):
    from ..groups import build_rep, parse_group

    return build_rep(cfg.get("rep", "standard"), parse_group(cfg.get("group", "C4")))


def cmd_gp_oracle(cfg, args, out: Path) -> int:
    from ..field import GridGeometry, read_context_csv, write_field
    from ..gp import GPModel, log_likelihood, posterior
    from ..kernels import MatrixKernel

    base = args.config_dir
    rep = _rep(cfg)
    Z = read_context_csv(_resolve(base, _require(cfg, "context")), rep)
    model = GPModel(MatrixKernel.from_json(_require(cfg, "kernel")), rep, noise=float(cfg.get("noise", 0.0)))
    grid = cfg.get("grid")
    geom = GridGeometry.from_json(grid) if grid else GridGeometry.covering(
        float(np.max(np.abs(Z.points))) if len(Z) else 1.0, 32)
    pred = posterior(model, Z, geom.points(), predictive=bool(cfg.get("predictive", False)), geometry=geom)
    write_field(pred.mean_field, out / "mean.f64")
    write_field(pred.cov_field, out / "cov.f64")
    metrics = {}
    if "targets" in cfg:
        T = read_context_csv(_resolve(base, cfg["targets"]), rep)
        metrics["mean_ll"] = log_likelihood(posterior(model, Z, T.points, predictive=True), T)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_audit(cfg, args, out: Path) -> int:
    from ..encoder import EncoderConfig, embedding_rep
    from ..field import GridGeometry
    from ..gp import GPModel
    from ..kernels import MatrixKernel, embedding_kernel
    from ..steer_net import load_checkpoint
    from .audit import GroupSampleSpec, audit_equivariance

    spec_d = dict(cfg.get("spec", {}))
    if args.seed is not None:
        spec_d["seed"] = args.seed
    spec = GroupSampleSpec(**spec_d)
    target = cfg.get("target", "kernel")
    if target == "kernel":
        report = audit_equivariance(MatrixKernel.from_json(_require(cfg, "kernel")), spec, rep=_rep(cfg))
    elif target == "gp":
        report = audit_equivariance(GPModel(MatrixKernel.from_json(_require(cfg, "kernel")), _rep(cfg),
                                            noise=float(cfg.get("noise", 0.0))), spec)
    elif target == "encoder":
        rep = _rep(cfg)
        K = MatrixKernel.from_json(cfg["kernel"]) if "kernel" in cfg else None
        from ..kernels import rbf_diagonal

        ek = embedding_kernel(K or rbf_diagonal(rep.dimension))
        enc = EncoderConfig(ek, GridGeometry.from_json(cfg.get("grid", {"half_width": 11.0, "resolution": 32})))
        report = audit_equivariance(enc, spec, rep=rep)
    elif target == "checkpoint":
        model = load_checkpoint(_resolve(args.config_dir, _require(cfg, "checkpoint")))
        report = audit_equivariance(model, spec)
    else:
        raise CLIConfigError(f"unknown audit target {target!r}")
    (out / "audit.json").write_text(report.to_json() + "\n")
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_inspect(cfg, args, out: Path) -> int:
    import csv

    from ..field import read_context_csv
    from ..steer_net import load_checkpoint

    base = args.config_dir
    model = load_checkpoint(_resolve(base, _require(cfg, "checkpoint")))
    Z = read_context_csv(_resolve(base, _require(cfg, "context")), model.rep_in)
    pred = model.double().predict_grid(Z)
    d = model.rep_mean.dimension
    path = out / "prediction_grid.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"m{i + 1}" for i in range(d)] +
                   [f"c{i + 1}{j + 1}" for i in range(d) for j in range(d)])
        for p, m, c in zip(pred.points, pred.mean, pred.cov):
            w.writerow([repr(float(v)) for v in (*p, *m, *c.ravel())])
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gp-oracle": cmd_gp_oracle,
    "audit": cmd_audit,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steercnp", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default=".")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    from ..gp import NumericalError
    from ..groups import ConfigError
    from ..train import TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    import torch

    torch.set_num_threads(max(1, args.threads))
    args.config_dir = Path(args.config).parent if args.config else None
    out = Path(args.out_dir)
    try:
        cfg = _load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except (CLIConfigError, ConfigError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
