import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from steercnp.field import ContextSet, FeatureField, GridGeometry, transform_field
from steercnp.groups import (ConfigError, direct_sum, multiple, parse_group, regular, standard,
                             tensor_square, trivial)
from steercnp.harness.audit import model_equivariance_residuals
from steercnp.steer_net import (EPS_COV, MIN_SCALAR_VARIANCE, ModelConfig, NormReLU, SteerableConv, SteerCNP,
                                conv_forward, covariance_head, decoder_forward, kernel_smooth, load_checkpoint,
                                normrelu_forward, quadratic_covariance, save_checkpoint, smooth_on_grid,
                                smoothing_weights)

SMALL = dict(hidden_multiplicity=2, grid_half_width=6.0, grid_resolution=16, n_layers=3)


@pytest.fixture(autouse=True)
def double_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def rand_field(rng, rep, n=10):
    return FeatureField(GridGeometry(3.0, n), rng.normal(size=(n, n, rep.dimension)), rep)


def context(rng, rep, n=7, r=3.0):
    return ContextSet(rng.uniform(-r, r, (n, 2)), rng.normal(size=(n, rep.dimension)), rep)


def field_equivariance(fn, F, h, rep_out):
    lhs = fn(transform_field(F, h).field)
    rhs = transform_field(fn(F), h)
    assert rhs.field.rep == rep_out
    return np.abs(lhs.values - rhs.field.values).max()


@pytest.mark.parametrize("name", ["C4", "D4"])
@pytest.mark.parametrize("pair", [("standard", "regular"), ("regular", "regular"), ("regular", "standard"),
                                  ("trivial", "regular")])
def test_conv_layer_is_equivariant(name, pair, rng):
    G = parse_group(name)
    rin, rout = (standard(G) if p == "standard" else regular(G) if p == "regular" else trivial(G) for p in pair)
    layer = SteerableConv(rin, rout, 5, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        layer.bias.normal_()
    F = rand_field(rng, rin)
    for h in G.elements:
        # zero padding: the grid is closed under the group, so equivariance holds everywhere
        assert field_equivariance(lambda f: conv_forward(layer, f), F, h, rout) < 1e-12


def test_unprojected_conv_breaks_equivariance(rng):
    G = parse_group("C4")
    layer = SteerableConv(standard(G), regular(G), 5, project=False, generator=torch.Generator().manual_seed(0))
    F = rand_field(rng, standard(G))
    assert field_equivariance(lambda f: conv_forward(layer, f), F, G.element(1), regular(G)) > 1e-2


@pytest.mark.parametrize("rep_fn", [lambda G: multiple(regular(G), 2),
                                    lambda G: direct_sum(trivial(G), standard(G), regular(G))])
def test_normrelu_is_equivariant(rep_fn, rng):
    G = parse_group("D4")
    rep = rep_fn(G)
    layer = NormReLU(rep, 0.3)
    F = rand_field(rng, rep)
    for h in G.elements:
        assert field_equivariance(lambda f: normrelu_forward(layer, f), F, h, rep) < 1e-14


def test_normrelu_gate_values():
    rep = standard(parse_group("C4"))
    layer = NormReLU(rep, 1.0)
    x = torch.tensor([[3.0, 4.0], [0.3, 0.4]]).reshape(2, 2, 1, 1)
    out = layer(x).reshape(2, 2)
    assert torch.allclose(out[0], torch.tensor([3.0, 4.0]) * 4 / 5)
    assert torch.all(out[1] == 0)
    assert torch.all(layer(torch.zeros(1, 2, 1, 1)) == 0)


@given(st.integers(0, 10_000))
def test_quadratic_covariance_is_psd(seed):
    a = torch.as_tensor(np.random.default_rng(seed).normal(size=(50, 4)))
    cov = quadratic_covariance(a, 2, eps=0.0)
    assert torch.linalg.eigvalsh(cov).min() >= 0
    assert torch.equal(cov, cov.transpose(-1, -2))


def test_covariance_head_column_stacking_and_floor():
    a = np.array([1.0, 2.0, 3.0, 4.0])  # columns (1, 2), (3, 4)
    A = np.array([[1.0, 3.0], [2.0, 4.0]])
    assert np.allclose(covariance_head(a, 2), A @ A.T + EPS_COV * np.eye(2))
    assert covariance_head(np.array([[-50.0]]), 1, "softplus").item() == pytest.approx(MIN_SCALAR_VARIANCE)


@pytest.mark.parametrize("name", ["C8", "D4"])
def test_covariance_head_is_equivariant(name, rng):
    G = parse_group(name)
    rep_eta = multiple(standard(G), 2)
    for h in G.elements:
        a = rng.normal(size=4)
        R = standard(G).matrix(h)
        lhs = covariance_head(rep_eta.matrix(h) @ a, 2)
        assert np.abs(lhs - R @ covariance_head(a, 2) @ R.T).max() < 1e-12


def test_separable_smoothing_matches_dense_softmax(rng):
    geom = GridGeometry(2.0, 6)
    vals = torch.as_tensor(rng.normal(size=(1, 6, 6, 3)))
    T = torch.as_tensor(rng.uniform(-2.5, 2.5, (1, 9, 2)))
    ls = torch.tensor(0.8)
    W = smoothing_weights(T, torch.as_tensor(geom.points()), ls)
    dense = W @ vals.reshape(1, 36, 3)
    fast = smooth_on_grid(vals, T, torch.as_tensor(geom.xs), torch.as_tensor(geom.ys), ls)
    assert torch.allclose(fast, dense, atol=1e-12)


def test_kernel_smooth_of_constant_is_constant(rng):
    geom = GridGeometry(2.0, 6)
    F = FeatureField(geom, np.full((6, 6, 2), 3.5), standard(parse_group("C4")))
    assert np.allclose(kernel_smooth(F, rng.uniform(-4, 4, (10, 2)), 0.5), 3.5)


@pytest.mark.parametrize("name", ["C4", "D4"])
def test_model_is_equivariant_end_to_end(name, rng):
    model = SteerCNP(ModelConfig(group=name, **SMALL))
    Z = context(rng, model.rep_in)
    for h in model.rep_in.group.elements:
        m, c = model_equivariance_residuals(model, Z, h)
        assert m < 1e-10 and c < 1e-10


def test_unprojected_model_is_not_equivariant(rng):
    model = SteerCNP(ModelConfig(group="C4", project=False, **SMALL))
    Z = context(rng, model.rep_in)
    m, c = model_equivariance_residuals(model, Z, parse_group("C4").element(1))
    assert max(m, c) > 1e-2


def test_forward_shapes_and_masking(rng):
    model = SteerCNP(ModelConfig(**SMALL))
    Z = context(rng, model.rep_in, 5)
    x, y, m = model._context_tensors(Z)
    pad_x = torch.cat([x, torch.zeros(1, 3, 2)], 1)
    pad_y = torch.cat([y, torch.ones(1, 3, 2)], 1)
    pad_m = torch.cat([m, torch.zeros(1, 3)], 1)
    T = torch.as_tensor(rng.uniform(-3, 3, (1, 4, 2)))
    mean, cov = model(x, y, m, T)
    assert mean.shape == (1, 4, 2) and cov.shape == (1, 4, 2, 2)
    mean2, cov2 = model(pad_x, pad_y, pad_m, T)
    assert torch.allclose(mean, mean2) and torch.allclose(cov, cov2)


def test_decoder_forward_matches_predict_grid(rng):
    from steercnp.encoder import EncoderConfig, embed

    model = SteerCNP(ModelConfig(**SMALL))
    Z = context(rng, model.rep_in)
    E = embed(Z, EncoderConfig(model.embedding_kernel, model.geometry))
    a = decoder_forward(model, E)
    b = model.predict_grid(Z)
    assert np.allclose(a.mean, b.mean) and np.allclose(a.cov, b.cov)


def test_scalar_model_with_softplus_head(rng):
    model = SteerCNP(ModelConfig(rep_in="trivial", head="softplus_scalar", mean_sigmoid=True, **SMALL))
    Z = ContextSet(rng.uniform(-3, 3, (6, 2)), rng.uniform(size=6), model.rep_in)
    pred = model.predict(Z, rng.uniform(-3, 3, (5, 2)))
    assert pred.cov.shape == (5, 1, 1) and np.all(pred.cov >= MIN_SCALAR_VARIANCE - 1e-12)
    assert np.all((pred.mean > 0) & (pred.mean < 1))


def test_output_channel_subset_model(rng):
    cfg = ModelConfig(rep_in={"direct_sum": ["trivial", "standard"]}, rep_out="standard",
                      output_channels=[1, 2], **SMALL)
    model = SteerCNP(cfg)
    assert model.rep_E.dimension == 4 and model.rep_mean.dimension == 2
    with pytest.raises(ConfigError):
        SteerCNP(ModelConfig(rep_in="standard", output_channels=[0], **SMALL))


@pytest.mark.parametrize("kw", [dict(n_layers=2), dict(n_layers=10), dict(head="beta")])
def test_model_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_layer_constraints_hold_after_parameter_updates():
    model = SteerCNP(ModelConfig(group="D4", **SMALL))
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p))
    assert max(model.constraint_residuals()) < 1e-12


def test_checkpoint_round_trip(tmp_path, rng):
    model = SteerCNP(ModelConfig(group="D4", init_seed=3, **SMALL))
    with torch.no_grad():
        model.log_smoothing_lengthscale.fill_(-0.2)
    save_checkpoint(model, tmp_path / "ck", extra={"note": 1})
    back = load_checkpoint(tmp_path / "ck")
    Z = context(rng, model.rep_in)
    T = rng.uniform(-3, 3, (4, 2))
    assert np.array_equal(model.predict(Z, T).mean, back.predict(Z, T).mean)
    assert back.config == model.config


def test_delta_and_averaging_kernels(rng):
    G = parse_group("C4")
    layer = SteerableConv(trivial(G), trivial(G), 3, bias=False)
    F = rand_field(rng, trivial(G), 6)
    with torch.no_grad():
        layer.weight.zero_()
        layer.weight[0, 0, 1, 1] = 1.0
    assert np.allclose(conv_forward(layer, F).values, F.values)
    with torch.no_grad():
        layer.weight.fill_(1 / 9)
    const = FeatureField(F.geometry, np.full((6, 6, 1), 2.5), trivial(G))
    assert np.allclose(conv_forward(layer, const).values[1:-1, 1:-1], 2.5)


def test_normrelu_zero_bias_is_identity(rng):
    rep = multiple(standard(parse_group("C4")), 3)
    x = torch.as_tensor(rng.normal(size=(2, 6, 4, 4)))
    assert torch.allclose(NormReLU(rep, 0.0)(x), x)


@given(st.integers(0, 10_000))
def test_normrelu_commutes_with_random_orthogonal_blocks(seed):
    r = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(r.normal(size=(4, 4)))
    rep = regular(parse_group("C4"))
    layer = NormReLU(rep, float(r.uniform(0, 2)))
    v = torch.as_tensor(r.normal(size=(1, 4, 1, 1)))
    Qt = torch.as_tensor(Q)
    lhs = layer(torch.einsum("ij,bjxy->bixy", Qt, v))
    rhs = torch.einsum("ij,bjxy->bixy", Qt, layer(v))
    assert torch.allclose(lhs, rhs, atol=1e-14)


def test_quadratic_head_named_values():
    I = torch.eye(2, dtype=torch.float64).reshape(4)
    assert torch.allclose(quadratic_covariance(I, 2), (1 + EPS_COV) * torch.eye(2, dtype=torch.float64))
    assert torch.allclose(quadratic_covariance(torch.zeros(4, dtype=torch.float64), 2),
                          EPS_COV * torch.eye(2, dtype=torch.float64))


def test_smoothing_limits_and_psd(rng):
    geom = GridGeometry(2.0, 5)
    F = FeatureField(geom, rng.normal(size=(5, 5, 3)), direct_sum(trivial(parse_group("C4")), standard(parse_group("C4"))))
    node = geom.points()[[6, 18]]
    assert np.allclose(kernel_smooth(F, node, 1e-3), F.values.reshape(-1, 3)[[6, 18]])
    for _ in range(50):
        A = torch.as_tensor(rng.normal(size=(1, 5, 5, 4)))
        covs = quadratic_covariance(A, 2, eps=0.0).reshape(1, 5, 5, 4)
        out = smooth_on_grid(covs, torch.as_tensor(rng.uniform(-3, 3, (1, 6, 2))), torch.as_tensor(geom.xs),
                             torch.as_tensor(geom.ys), torch.tensor(rng.uniform(0.2, 2.0)))
        assert torch.linalg.eigvalsh(out.reshape(-1, 2, 2)).min() >= -1e-12


def test_zero_input_gives_interior_constant_output():
    model = SteerCNP(ModelConfig(**SMALL))
    with torch.no_grad():
        for c in model.decoder.convs:
            c.bias.normal_()
        out = model.decoder(torch.zeros(1, model.rep_E.dimension, 16, 16))
    inner = out[0, :, 6:10, 6:10]  # farther than the receptive radius from the boundary
    assert torch.allclose(inner, inner[:, :1, :1].expand_as(inner))


def test_wider_margin_leaves_interior_unchanged(rng):
    base = dict(hidden_multiplicity=2, n_layers=3, init_seed=7)
    a = SteerCNP(ModelConfig(grid_half_width=6.0, grid_resolution=25, **base))
    b = SteerCNP(ModelConfig(grid_half_width=12.0, grid_resolution=49, **base))
    Z = context(rng, a.rep_in, 6, r=1.5)
    pa, pb = a.predict_grid(Z), b.predict_grid(Z)
    ma = pa.mean.reshape(25, 25, 2)
    mb = pb.mean.reshape(49, 49, 2)[12:37, 12:37]
    # receptive radius: 3 layers x 2 taps
    assert np.abs(ma[6:19, 6:19] - mb[6:19, 6:19]).max() < 1e-8
