"""Steerable decoder: projected convolutions, NormReLU, covariance heads and kernel smoothing.

Feature maps inside the network are torch tensors ``(batch, channels, n, n)`` with
``[..., i, j]`` at grid point ``(xs[i], ys[j])``, matching :class:`FeatureField`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import groups as G
from .encoder import EncoderConfig, embedding_rep, embedding_sum, normalize_density
from .field import ContextSet, FeatureField, GridGeometry
from .gp import GaussianPrediction
from .groups import ConfigError, KernelProjector, Representation
from .kernels import MatrixKernel, embedding_kernel, rbf_diagonal

EPS_COV = 1e-4
MIN_SCALAR_VARIANCE = 0.01
CHECKPOINT_VERSION = 1


class SteerableConv(nn.Module):
    """Convolution whose kernel is the group-average projection of free weights.

    With ``project=False`` the raw weights are used as-is (a non-equivariant control).
    """

    def __init__(self, rep_in: Representation, rep_out: Representation, kernel_size: int = 5,
                 bias: bool = True, project: bool = True, gain: float = 1.0, generator=None):
        super().__init__()
        self.rep_in, self.rep_out = rep_in, rep_out
        self.kernel_size = kernel_size
        self.project = project
        self.projector = KernelProjector(rep_in, rep_out, kernel_size)
        dt = torch.get_default_dtype()
        self.register_buffer("tap_maps", torch.as_tensor(self.projector.tap_maps, dtype=dt))
        self.register_buffer("rho_in", torch.as_tensor(self.projector.rho_in, dtype=dt))
        self.register_buffer("rho_out", torch.as_tensor(self.projector.rho_out, dtype=dt))
        c_in, c_out = rep_in.dimension, rep_out.dimension
        # projection averages ~|H| raw entries per free direction
        std = gain * math.sqrt(rep_in.group.order / (c_in * kernel_size ** 2))
        w = torch.randn(c_out, c_in, kernel_size, kernel_size, generator=generator, dtype=dt) * std
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dt)) if bias else None

    def effective_kernel(self) -> torch.Tensor:
        if not self.project:
            return self.weight
        return self.projector(self.weight, self.tap_maps, self.rho_in, self.rho_out)

    def effective_bias(self):
        if self.bias is None or not self.project:
            return self.bias
        return self.projector.project_bias(self.bias, self.rho_out)

    def constraint_residual(self) -> float:
        with torch.no_grad():
            return self.projector.constraint_residual(self.effective_kernel().double().cpu().numpy())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.rep_in.dimension:
            raise ConfigError(f"conv expects {self.rep_in.dimension} channels, got {x.shape[1]}")
        return F.conv2d(x, self.effective_kernel(), self.effective_bias(), padding=self.kernel_size // 2)


class NormReLU(nn.Module):
    """Per fiber block ``v -> v * relu(|v| - b) / |v|`` with a trainable scalar ``b`` per block."""

    def __init__(self, rep: Representation, bias_init: float = 0.0):
        super().__init__()
        self.rep = rep
        blocks = rep.blocks
        dt = torch.get_default_dtype()
        member = torch.zeros(len(blocks), rep.dimension, dtype=dt)
        i = 0
        for k, b in enumerate(blocks):
            member[k, i:i + b.dimension] = 1.0
            i += b.dimension
        self.register_buffer("membership", member)
        self.bias = nn.Parameter(torch.full((len(blocks),), float(bias_init), dtype=dt))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # channel axis is 1
        sizes = {b.dimension for b in self.rep.blocks}
        if len(sizes) == 1:
            k = sizes.pop()
            v = x.reshape((x.shape[0], -1, k) + x.shape[2:])
            norm = torch.sqrt((v * v).sum(2, keepdim=True).clamp_min(1e-30))
            shape = (1, -1, 1) + (1,) * (x.dim() - 2)
            gate = torch.relu(norm - self.bias.view(shape)) / norm
            return (v * gate).reshape(x.shape)
        sq = torch.einsum("bc...,kc->bk...", x * x, self.membership)
        norm = torch.sqrt(sq.clamp_min(1e-30))
        shape = (1, -1) + (1,) * (x.dim() - 2)
        gate = torch.relu(norm - self.bias.view(shape)) / norm
        return x * torch.einsum("bk...,kc->bc...", gate, self.membership)


def quadratic_covariance(a: torch.Tensor, d: int, eps: float = EPS_COV) -> torch.Tensor:
    """``A A^T + eps I`` where ``a`` (..., d*d) stacks the columns of ``A``."""
    A = a.reshape(a.shape[:-1] + (d, d)).transpose(-1, -2)
    return A @ A.transpose(-1, -2) + eps * torch.eye(d, dtype=a.dtype, device=a.device)


def softplus_variance(a: torch.Tensor, floor: float = MIN_SCALAR_VARIANCE) -> torch.Tensor:
    return (floor + F.softplus(a))[..., None]


def smoothing_weights(targets: torch.Tensor, grid_points: torch.Tensor, lengthscale) -> torch.Tensor:
    """Normalized RBF weights (..., T, G) for arbitrary grid point sets."""
    sq = ((targets[..., :, None, :] - grid_points) ** 2).sum(-1)
    return torch.softmax(-0.5 * sq / lengthscale ** 2, dim=-1)


def smooth_on_grid(values: torch.Tensor, targets: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor,
                   lengthscale) -> torch.Tensor:
    """Nadaraya-Watson RBF smoothing from a tensor-product grid.

    ``values`` (B, n, n, F) at ``(xs[i], ys[j])``, ``targets`` (B, T, 2) -> (B, T, F). The
    isotropic RBF weight factorizes over the two axes, so each axis is normalized separately.
    """
    a = torch.softmax(-0.5 * (targets[..., 0:1] - xs) ** 2 / lengthscale ** 2, dim=-1)  # (B, T, n)
    b = torch.softmax(-0.5 * (targets[..., 1:2] - ys) ** 2 / lengthscale ** 2, dim=-1)
    n, f = values.shape[2], values.shape[3]
    ax = torch.bmm(a, values.reshape(values.shape[0], values.shape[1], n * f))  # (B, T, n*f)
    return torch.einsum("btj,btjf->btf", b, ax.reshape(ax.shape[0], ax.shape[1], n, f))


@dataclass
class ModelConfig:
    group: str = "C4"
    rep_in: object = "standard"
    rep_out: object | None = None
    output_channels: list | None = None
    head: str = "quadratic"
    n_layers: int = 5
    kernel_size: int = 5
    hidden_multiplicity: int = 8
    grid_half_width: float = 11.0
    grid_resolution: int = 32
    encoder_lengthscale: float = 1.5
    smoothing_lengthscale: float = 0.7
    normalize: bool = True
    project: bool = True
    mean_sigmoid: bool = False
    normrelu_bias: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if not 3 <= self.n_layers <= 9:
            raise ConfigError("decoder depth must lie in [3, 9]")
        if self.head not in ("quadratic", "softplus_scalar"):
            raise ConfigError(f"unknown covariance head {self.head!r}")

    @property
    def fiber_group(self) -> G.FiberGroup:
        return G.parse_group(self.group)

    @property
    def input_rep(self) -> Representation:
        return G.build_rep(self.rep_in, self.fiber_group)

    @property
    def output_rep(self) -> Representation:
        return G.build_rep(self.rep_out if self.rep_out is not None else self.rep_in, self.fiber_group)

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.grid_half_width, self.grid_resolution)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DecoderStack(nn.Module):
    """Alternating SteerableConv / NormReLU layers from ``rep_E`` to ``rep_mean (+) rep_eta``."""

    def __init__(self, rep_E: Representation, rep_hidden: Representation, rep_final: Representation,
                 n_layers: int = 5, kernel_size: int = 5, project: bool = True,
                 normrelu_bias: float = 0.1, generator=None):
        super().__init__()
        reps = [rep_E] + [rep_hidden] * (n_layers - 1) + [rep_final]
        layers = []
        for i in range(n_layers):
            layers.append(SteerableConv(reps[i], reps[i + 1], kernel_size, project=project,
                                        generator=generator))
            if i < n_layers - 1:
                layers.append(NormReLU(reps[i + 1], normrelu_bias))
        self.layers = nn.ModuleList(layers)
        self.rep_in, self.rep_out = rep_E, rep_final

    @property
    def convs(self):
        return [l for l in self.layers if isinstance(l, SteerableConv)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class SteerCNP(nn.Module):
    """Encoder -> steerable CNN on the grid -> covariance head -> kernel smoothing."""

    def __init__(self, config: ModelConfig | None = None, **overrides):
        super().__init__()
        cfg = config or ModelConfig(**overrides)
        self.config = cfg
        group = cfg.fiber_group
        self.rep_in = cfg.input_rep
        self.rep_mean = cfg.output_rep
        d_in, d = self.rep_in.dimension, self.rep_mean.dimension
        if cfg.output_channels is not None and len(cfg.output_channels) != d:
            raise ConfigError("output_channels must select as many channels as the output rep has")
        if cfg.head == "quadratic":
            self.rep_eta = G.multiple(self.rep_mean, d)
        else:
            if d != 1:
                raise ConfigError("softplus_scalar head needs a one-dimensional output")
            self.rep_eta = G.trivial(group)
        self.rep_E = embedding_rep(self.rep_in)
        self.embedding_kernel = embedding_kernel(rbf_diagonal(d_in, cfg.encoder_lengthscale))
        gen = torch.Generator().manual_seed(cfg.init_seed)
        hidden = G.multiple(G.regular(group), cfg.hidden_multiplicity)
        self.decoder = DecoderStack(self.rep_E, hidden, G.direct_sum(self.rep_mean, self.rep_eta),
                                    cfg.n_layers, cfg.kernel_size, cfg.project, cfg.normrelu_bias, gen)
        dt = torch.get_default_dtype()
        self.log_encoder_lengthscale = nn.Parameter(torch.tensor(math.log(cfg.encoder_lengthscale), dtype=dt))
        self.log_smoothing_lengthscale = nn.Parameter(torch.tensor(math.log(cfg.smoothing_lengthscale), dtype=dt))
        self.register_buffer("grid_points", torch.as_tensor(cfg.geometry.points(), dtype=dt))
        self.register_buffer("grid_axis", torch.as_tensor(cfg.geometry.axis, dtype=dt))

    @property
    def geometry(self) -> GridGeometry:
        return self.config.geometry

    @property
    def dtype(self):
        return self.grid_points.dtype

    def encode(self, ctx_x, ctx_y, ctx_mask=None):
        """Grid embedding as a (B, d+1, n, n) tensor."""
        ls = self.log_encoder_lengthscale.exp()
        E = embedding_sum(self.embedding_kernel, self.grid_points, ctx_x, ctx_y, ctx_mask, ls)
        if self.config.normalize:
            E = normalize_density(E)
        n = self.config.grid_resolution
        return E.reshape(E.shape[0], n, n, -1).permute(0, 3, 1, 2)

    def heads(self, out: torch.Tensor):
        """Split decoder output (B, C, n, n) into grid mean (B, G, d) and covariance (B, G, d, d)."""
        d = self.rep_mean.dimension
        flat = out.permute(0, 2, 3, 1).reshape(out.shape[0], -1, out.shape[1])
        mean = flat[..., :d]
        if self.config.mean_sigmoid:
            mean = torch.sigmoid(mean)
        if self.config.head == "quadratic":
            cov = quadratic_covariance(flat[..., d:], d)
        else:
            cov = softplus_variance(flat[..., d])[..., None]
        return mean, cov

    def grid_forward(self, ctx_x, ctx_y, ctx_mask=None):
        return self.heads(self.decoder(self.encode(ctx_x, ctx_y, ctx_mask)))

    def forward(self, ctx_x, ctx_y, ctx_mask, tgt_x):
        mean_g, cov_g = self.grid_forward(ctx_x, ctx_y, ctx_mask)
        d = mean_g.shape[-1]
        n = self.config.grid_resolution
        both = torch.cat([mean_g, cov_g.flatten(-2)], dim=-1).reshape(mean_g.shape[0], n, n, -1)
        out = smooth_on_grid(both, tgt_x, self.grid_axis, self.grid_axis,
                             self.log_smoothing_lengthscale.exp())
        return out[..., :d], out[..., d:].reshape(out.shape[:-1] + (d, d))

    # --- numpy-facing helpers -------------------------------------------------------

    def _context_tensors(self, Z: ContextSet):
        y = Z.values
        order = Z.canonical_order()
        x = torch.as_tensor(Z.points[order], dtype=self.dtype)[None]
        y = torch.as_tensor(y[order], dtype=self.dtype)[None]
        return x, y, torch.ones(x.shape[:2], dtype=self.dtype)

    @torch.no_grad()
    def predict(self, Z: ContextSet, targets) -> GaussianPrediction:
        T = np.asarray(targets, dtype=float).reshape(-1, 2)
        x, y, m = self._context_tensors(Z)
        mean, cov = self(x, y, m, torch.as_tensor(T, dtype=self.dtype)[None])
        return GaussianPrediction(T, mean[0].double().numpy(), cov[0].double().numpy(), self.rep_mean)

    @torch.no_grad()
    def predict_grid(self, Z: ContextSet) -> GaussianPrediction:
        x, y, m = self._context_tensors(Z)
        mean, cov = self.grid_forward(x, y, m)
        return GaussianPrediction(self.geometry.points(), mean[0].double().numpy(),
                                  cov[0].double().numpy(), self.rep_mean, self.geometry)

    def constraint_residuals(self) -> list[float]:
        return [c.constraint_residual() for c in self.decoder.convs]


# --- functional wrappers on FeatureFields ---------------------------------------------

def _field_tensor(Fd: FeatureField, dtype=torch.float64):
    return torch.as_tensor(Fd.values, dtype=dtype).permute(2, 0, 1)[None]


def _tensor_field(t: torch.Tensor, geometry: GridGeometry, rep: Representation) -> FeatureField:
    return FeatureField(geometry, t[0].permute(1, 2, 0).detach().double().numpy(), rep)


@torch.no_grad()
def conv_forward(layer: SteerableConv, Fd: FeatureField) -> FeatureField:
    if Fd.rep != layer.rep_in:
        raise ConfigError("field representation does not match the layer input representation")
    out = layer(_field_tensor(Fd, layer.weight.dtype))
    return _tensor_field(out, Fd.geometry, layer.rep_out)


@torch.no_grad()
def normrelu_forward(layer: NormReLU, Fd: FeatureField) -> FeatureField:
    if Fd.rep != layer.rep:
        raise ConfigError("field representation does not match the NormReLU representation")
    return _tensor_field(layer(_field_tensor(Fd, layer.bias.dtype)), Fd.geometry, Fd.rep)


def covariance_head(values, d: int, mode: str = "quadratic") -> np.ndarray:
    """Per-point covariances from (..., d*d) quadratic inputs or (..., 1) softplus inputs."""
    t = torch.as_tensor(np.asarray(values, dtype=float))
    if mode == "quadratic":
        return quadratic_covariance(t, d).numpy()
    return softplus_variance(t[..., 0])[..., None].numpy()


def kernel_smooth(grid_pred: FeatureField, targets, lengthscale: float) -> np.ndarray:
    """Nadaraya-Watson smoothing of grid values onto ``targets`` (m, 2) -> (m, d)."""
    geom = grid_pred.geometry
    T = torch.as_tensor(np.asarray(targets, dtype=float).reshape(1, -1, 2))
    vals = torch.as_tensor(grid_pred.values)[None]
    out = smooth_on_grid(vals, T, torch.as_tensor(geom.xs), torch.as_tensor(geom.ys),
                         torch.tensor(float(lengthscale), dtype=torch.float64))
    return out[0].numpy()


@torch.no_grad()
def decoder_forward(model: SteerCNP, E_field: FeatureField) -> GaussianPrediction:
    if E_field.rep != model.rep_E:
        raise ConfigError("embedding field representation does not match the decoder input")
    mean, cov = model.heads(model.decoder(_field_tensor(E_field, model.dtype)))
    return GaussianPrediction(E_field.geometry.points(), mean[0].double().numpy(),
                              cov[0].double().numpy(), model.rep_mean, E_field.geometry)


# --- checkpoints ----------------------------------------------------------------------

def save_checkpoint(model: SteerCNP, path, extra: dict | None = None) -> None:
    """``path.json`` manifest + ``path.bin`` little-endian f64 parameter blob."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = p.detach().double().cpu().numpy().astype("<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "version": CHECKPOINT_VERSION,
        "architecture": "SteerCNP",
        "config": model.config.to_json(),
        "group": model.config.group,
        "reps": {"in": G.describe(model.rep_in), "mean": G.describe(model.rep_mean),
                 "embedding": G.describe(model.rep_E)},
        "parameters": entries,
        "dtype": "<f8",
    }
    if extra:
        manifest["extra"] = extra
    Path(str(path) + ".bin").write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> SteerCNP:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('version')}")
    model = SteerCNP(ModelConfig.from_json(manifest["config"]))
    blob = np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f8").copy()
    params = dict(model.named_parameters())
    with torch.no_grad():
        for e in manifest["parameters"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            vals = blob[e["offset"]:e["offset"] + n].reshape(e["shape"])
            p = params[e["name"]]
            p.copy_(torch.as_tensor(vals, dtype=p.dtype))
    return model
