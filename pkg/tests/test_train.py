import json
import math

import numpy as np
import pytest
import torch

from steercnp.field import ContextSet
from steercnp.groups import ConfigError, parse_group, standard
from steercnp.harness.datasets import DatasetSpec, generate
from steercnp.harness.evaluate import (EvalConfig, evaluate, oracle_from_manifest, oracle_lls, validate_metrics)
from steercnp.steer_net import ModelConfig, SteerCNP
from steercnp.train import (TrainConfig, TrainingError, backward, collate, fit, gaussian_log_density, loss,
                            make_eval_splits, split_context_target)

SMALL = dict(hidden_multiplicity=2, grid_half_width=8.0, grid_resolution=16, n_layers=3)


@pytest.fixture(scope="module")
def tiny():
    return generate(DatasetSpec(samples={"train": 24, "val": 8}, grid_size=6, extent=6.0, seed=2))


def test_split_modes(rng):
    Z = ContextSet(rng.normal(size=(20, 2)), rng.normal(size=(20, 2)), standard(parse_group("C4")))
    for _ in range(20):
        c, t = split_context_target(Z, rng, 10, "train")
        assert 3 <= len(c) <= 10 and t is Z
        c, t = split_context_target(Z, rng, 50, "eval")
        assert len(c) + len(t) == 20 and len(t) >= 1
        assert not set(map(tuple, c.points)) & set(map(tuple, t.points))
    with pytest.raises(ValueError):
        split_context_target(Z, rng, 5, "test")


def test_perfect_prediction_loss_is_analytic():
    sigma2 = 0.05 ** 2
    y = torch.randn(7, 2, dtype=torch.float64)
    cov = sigma2 * torch.eye(2, dtype=torch.float64).expand(7, 2, 2)
    nll = -gaussian_log_density(y, y, cov)
    assert torch.allclose(nll, torch.full((7,), math.log(2 * math.pi * sigma2), dtype=torch.float64),
                          rtol=0, atol=1e-12)


def test_collate_pads_and_masks(rng):
    rep = standard(parse_group("C4"))
    a = ContextSet(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rep)
    b = ContextSet(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rep)
    batch = collate([(a, b), (b, a)])
    assert batch.ctx_x.shape == (2, 5, 2) and batch.tgt_y.shape == (2, 5, 2)
    assert batch.ctx_mask.sum().item() == 8 and batch.tgt_mask.sum().item() == 8
    # contexts are canonically ordered
    assert torch.equal(batch.ctx_x[0, :3], torch.as_tensor(a.points[a.canonical_order()]))


def test_backward_zero_fills_unused_parameters(rng):
    torch.set_default_dtype(torch.float64)
    try:
        model = SteerCNP(ModelConfig(**SMALL))
    finally:
        torch.set_default_dtype(torch.float32)
    rep = model.rep_in
    Z = ContextSet(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rep)
    extra = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
    params = dict(model.named_parameters(), extra=extra)
    with pytest.warns(UserWarning, match="extra"):
        grads = backward(loss(model, Z, Z), params)
    assert torch.all(grads["extra"] == 0)
    assert set(grads) == set(params)


def test_gradients_match_finite_differences(rng):
    torch.set_default_dtype(torch.float64)
    try:
        model = SteerCNP(ModelConfig(group="D4", grid_resolution=8, grid_half_width=3.5, hidden_multiplicity=1,
                                     n_layers=3))
    finally:
        torch.set_default_dtype(torch.float32)
    rep = model.rep_in
    Zc = ContextSet(rng.uniform(-2, 2, (3, 2)), rng.normal(size=(3, 2)), rep)
    Zt = ContextSet(rng.uniform(-3, 3, (5, 2)), rng.normal(size=(5, 2)), rep)
    params = dict(model.named_parameters())
    grads = backward(loss(model, Zc, Zt), params)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = flat[i].item()
            flat[i] = old + 1e-4
            up = loss(model, Zc, Zt).item()
            flat[i] = old - 1e-4
            down = loss(model, Zc, Zt).item()
            flat[i] = old
            fd = (up - down) / 2e-4
            g = grads[name].reshape(-1)[i].item()
            assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g), 1e-3), name


def test_fit_improves_and_reports(tiny, tmp_path):
    model = SteerCNP(ModelConfig(**SMALL))
    rep = fit(model, tiny["train"], tiny["val"], TrainConfig(epochs=3, batch_size=8, lr=3e-3), out_dir=tmp_path)
    assert rep.best_val_ll > rep.initial_val_ll
    lines = (tmp_path / "train_report.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]


def test_fit_is_reproducible(tiny):
    def run():
        model = SteerCNP(ModelConfig(**SMALL))
        fit(model, tiny["train"], tiny["val"], TrainConfig(epochs=1, batch_size=8, seed=4))
        return torch.cat([p.detach().reshape(-1) for p in model.parameters()])
    assert torch.equal(run(), run())


def test_divergence_aborts_with_report(tiny, tmp_path):
    model = SteerCNP(ModelConfig(**SMALL))
    with pytest.raises(TrainingError) as info:
        fit(model, tiny["train"], tiny["val"], TrainConfig(epochs=1, divergence_threshold=-1e9), out_dir=tmp_path)
    assert info.value.report.aborted.startswith("divergence")
    assert (tmp_path / "offending_batch.npz").exists()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(schedule="step")


def test_cosine_schedule_decays_to_zero(tiny, monkeypatch):
    model = SteerCNP(ModelConfig(**SMALL))
    seen = []
    orig = torch.optim.Adam.step

    def spy(self, *a, **k):
        seen.append(self.param_groups[0]["lr"])
        return orig(self, *a, **k)

    monkeypatch.setattr(torch.optim.Adam, "step", spy)
    fit(model, tiny["train"], tiny["val"], TrainConfig(epochs=2, batch_size=8, lr=1e-3, schedule="cosine"))
    assert seen[0] == pytest.approx(1e-3) and all(a >= b for a, b in zip(seen, seen[1:]))
    assert seen[-1] < 1e-3 * 0.1


def test_oracle_beats_untrained_model_and_metrics_validate(tiny):
    oracle = oracle_from_manifest(tiny.manifest, tiny.rep_in)
    model = SteerCNP(ModelConfig(**SMALL))
    m = evaluate({"steer": model}, tiny["val"], EvalConfig(seeds=[0, 1]), {"oracle": oracle})
    validate_metrics(m)
    assert m["models"]["oracle"]["mean_ll"] > m["models"]["steer"]["mean_ll"]
    assert len(m["models"]["steer"]["per_seed"]) == 2


def test_oracle_ll_matches_noise_floor_scale(tiny):
    # with dense contexts the oracle approaches the noise-only likelihood
    oracle = oracle_from_manifest(tiny.manifest, tiny.rep_in)
    splits = make_eval_splits(tiny["val"], 0, 35, min_context=35)
    ll = oracle_lls(oracle, splits).mean()
    assert ll < -math.log(2 * math.pi * 0.0025) + 0.5


def _double_model(**kw):
    torch.set_default_dtype(torch.float64)
    try:
        return SteerCNP(ModelConfig(**dict(SMALL, **kw)))
    finally:
        torch.set_default_dtype(torch.float32)


def test_loss_is_invariant_to_target_order_and_rotations(rng):
    from steercnp.field import transform_context

    model = _double_model(group="D4")
    rep = model.rep_in
    Zc = ContextSet(rng.uniform(-3, 3, (5, 2)), rng.normal(size=(5, 2)), rep)
    Zt = ContextSet(rng.uniform(-3, 3, (9, 2)), rng.normal(size=(9, 2)), rep)
    base = loss(model, Zc, Zt).item()
    assert loss(model, Zc, Zt.subset(rng.permutation(9))).item() == pytest.approx(base, abs=1e-12)
    for h in rep.group.elements:
        assert abs(loss(model, transform_context(Zc, h), transform_context(Zt, h)).item() - base) < 1e-6


def test_quadratic_toy_gradient():
    w = torch.nn.Parameter(torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64))
    assert torch.equal(backward((w ** 2).sum(), {"w": w})["w"], 2 * w.detach())


def test_split_contracts(rng):
    rep = standard(parse_group("C4"))
    Z = ContextSet(rng.normal(size=(15, 2)), rng.normal(size=(15, 2)), rep)
    for _ in range(10):
        c, t = split_context_target(Z, rng, 3)
        assert len(c) == 3
        assert set(map(tuple, c.points)) <= set(map(tuple, t.points))
    a = split_context_target(Z, np.random.default_rng(9), 10)[0]
    b = split_context_target(Z, np.random.default_rng(9), 10)[0]
    assert np.array_equal(a.points, b.points)


def test_zero_learning_rate_freezes_parameters(tiny):
    model = SteerCNP(ModelConfig(**SMALL))
    before = [p.detach().clone() for p in model.parameters()]
    rep = fit(model, tiny["train"], tiny["val"], TrainConfig(epochs=2, batch_size=8, lr=0.0))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert rep.epochs[0].val_ll == rep.epochs[1].val_ll == rep.initial_val_ll


def test_tiny_task_learns_towards_the_oracle():
    ds = generate(DatasetSpec(samples={"train": 64, "val": 32}, grid_size=8, extent=6.0, seed=8))
    oracle = oracle_from_manifest(ds.manifest, ds.rep_in)
    val = make_eval_splits(ds["val"], 9, 50)  # the split fit uses for validation (seed + 1)
    oracle_ll = float(oracle_lls(oracle, val).mean())
    model = SteerCNP(ModelConfig(**SMALL))
    rep = fit(model, ds["train"], ds["val"], TrainConfig(epochs=20, batch_size=8, lr=1e-3, seed=8,
                                                         schedule="constant"),
              oracle_ll=oracle_ll)
    assert rep.best_val_ll > rep.initial_val_ll
    gaps = [oracle_ll - rep.initial_val_ll] + [r.oracle_gap for r in rep.epochs]
    checkpoints = gaps[::5]  # every fifth epoch
    increases = sum(b > a for a, b in zip(checkpoints, checkpoints[1:]))
    assert increases <= 1, checkpoints
