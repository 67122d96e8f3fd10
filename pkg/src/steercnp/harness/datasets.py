"""Synthetic datasets (GP vector fields, scalar glyph inpainting) and CSV ingestion."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..field import ContextSet, IngestionError, read_context_csv, write_context_csv
from ..gp import GPModel, sample_prior
from ..groups import ConfigError, Representation, build_rep, describe, parse_group, rotation_matrix
from ..kernels import MatrixKernel

GP_TASKS = {"gp_rbf": "rbf_diagonal", "gp_curl": "curl_free", "gp_div": "div_free"}
TASKS = tuple(GP_TASKS) + ("scalar_inpaint", "csv_ingest")


@dataclass
class DatasetSpec:
    task: str = "gp_rbf"
    lengthscale: float = 5.0
    kernel_variance: float = 1.0
    noise: float = 0.05
    extent: float = 10.0
    grid_size: int = 15
    max_context: int = 50
    samples: dict = field(default_factory=lambda: {"train": 100, "val": 20})
    seed: int = 0
    group: str = "C4"
    image_size: int = 16
    blank_fraction: float = 0.1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.noise < 0 or self.extent <= 0 or self.lengthscale <= 0 or self.kernel_variance <= 0:
            raise ConfigError("noise must be >= 0; extent, lengthscale and variance > 0")
        if any(int(n) < 0 for n in self.samples.values()):
            raise ConfigError("sample counts must be nonnegative")

    @property
    def kernel(self) -> MatrixKernel:
        return MatrixKernel(GP_TASKS[self.task], self.lengthscale, self.kernel_variance)

    def rep(self) -> Representation:
        g = parse_group(self.group)
        return build_rep("trivial" if self.task == "scalar_inpaint" else "standard", g)


@dataclass
class Dataset:
    splits: dict
    manifest: dict
    rep_in: Representation
    rep_out: Representation | None = None
    output_channels: list | None = None

    def __getitem__(self, split) -> list:
        return self.splits[split]


def _split_streams(seed: int, spec_samples: dict):
    """Independent per-sample generators: SeedSequence(seed) -> split -> sample counter."""
    root = np.random.SeedSequence(seed)
    names = sorted(spec_samples)
    for name, ss in zip(names, root.spawn(len(names))):
        yield name, [np.random.default_rng(s) for s in ss.spawn(int(spec_samples[name]))]


def rotated_grid(size: int, radius: float, angle: float) -> np.ndarray:
    """``size x size`` square grid inscribed in the disc of ``radius``, rotated by ``angle``."""
    half = radius / np.sqrt(2)
    ax = np.linspace(-half, half, size)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], -1)
    return pts @ rotation_matrix(angle).T


def gp_sample(spec: DatasetSpec, rng: np.random.Generator, model: GPModel) -> ContextSet:
    pts = rotated_grid(spec.grid_size, spec.extent, rng.uniform(0, 2 * np.pi))
    F = sample_prior(model, pts, rng)
    y = F + spec.noise * rng.standard_normal(F.shape)
    return ContextSet(pts, y, model.rep)


def manifest_for(spec: DatasetSpec) -> dict:
    m = {"spec": asdict(spec), "format": "context-csv", "rep": describe(spec.rep()), "group": spec.group}
    if spec.task in GP_TASKS:
        m["kernel"] = spec.kernel.to_json()
        m["noise_variance"] = spec.noise ** 2
    return m


def generate_gp_dataset(spec: DatasetSpec) -> Dataset:
    if spec.task not in GP_TASKS:
        raise ConfigError(f"{spec.task} is not a GP task")
    model = GPModel(spec.kernel, spec.rep())
    splits = {name: [gp_sample(spec, r, model) for r in rngs]
              for name, rngs in _split_streams(spec.seed, spec.samples)}
    return Dataset(splits, manifest_for(spec), spec.rep())


# --- scalar glyphs ---------------------------------------------------------------------

_QUARTER_TURN = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class GlyphSpec:
    """A bar (segment) or arc stroke, in pixel coordinates centred on the image."""

    kind: str  # "bar" | "arc" | "blank"
    center: tuple = (0.0, 0.0)
    direction: tuple = (1.0, 0.0)  # bar axis, or arc mid-direction
    length: float = 0.0  # bar half-length, or arc radius
    width: float = 1.0
    cos_half_span: float = -1.0  # arcs only

    def rotate_quarter(self, k: int = 1) -> "GlyphSpec":
        """Rotate the glyph by ``k`` quarter turns about the image centre, exactly."""
        c, u = np.asarray(self.center), np.asarray(self.direction)
        for _ in range(k % 4):
            c, u = _QUARTER_TURN @ c, _QUARTER_TURN @ u
        return GlyphSpec(self.kind, tuple(c), tuple(u), self.length, self.width, self.cos_half_span)


def pixel_coordinates(size: int) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([X, Y], -1)


def render_glyph(g: GlyphSpec, size: int = 16) -> np.ndarray:
    """Intensity image in [0, 1]; ``img[i, j]`` sits at pixel coordinate ``(ax[i], ax[j])``."""
    P = pixel_coordinates(size)
    if g.kind == "blank":
        return np.zeros((size, size))
    rel = P - np.asarray(g.center)
    u = np.asarray(g.direction)
    if g.kind == "bar":
        t = np.clip(rel[..., 0] * u[0] + rel[..., 1] * u[1], -g.length, g.length)
        d = np.hypot(rel[..., 0] - t * u[0], rel[..., 1] - t * u[1])
        img = 1.0 - d / g.width
    elif g.kind == "arc":
        r = np.hypot(rel[..., 0], rel[..., 1])
        img = 1.0 - np.abs(r - g.length) / g.width
        along = rel[..., 0] * u[0] + rel[..., 1] * u[1]
        img = np.where(along >= g.cos_half_span * r, img, 0.0)
    else:
        raise ConfigError(f"unknown glyph kind {g.kind!r}")
    return np.clip(img, 0.0, 1.0)


def random_glyph(rng: np.random.Generator, size: int = 16, blank_fraction: float = 0.1) -> GlyphSpec:
    if rng.uniform() < blank_fraction:
        return GlyphSpec("blank")
    half = (size - 1) / 2
    theta = rng.uniform(0, 2 * np.pi)
    u = (np.cos(theta), np.sin(theta))
    c = tuple(rng.uniform(-0.3 * half, 0.3 * half, 2))
    width = rng.uniform(1.0, 2.0)
    if rng.uniform() < 0.5:
        return GlyphSpec("bar", c, u, rng.uniform(0.3 * half, 0.8 * half), width)
    return GlyphSpec("arc", c, u, rng.uniform(0.3 * half, 0.6 * half), width,
                     float(np.cos(rng.uniform(0.4 * np.pi, np.pi))))


def glyph_context(img: np.ndarray, rep: Representation) -> ContextSet:
    P = pixel_coordinates(img.shape[0])
    return ContextSet(P.reshape(-1, 2), img.reshape(-1, 1), rep)


def generate_scalar_inpaint_dataset(spec: DatasetSpec) -> Dataset:
    rep = spec.rep()
    splits = {}
    for name, rngs in _split_streams(spec.seed, spec.samples):
        splits[name] = [glyph_context(render_glyph(random_glyph(r, spec.image_size, spec.blank_fraction),
                                                   spec.image_size), rep) for r in rngs]
    return Dataset(splits, manifest_for(spec), rep)


def generate(spec: DatasetSpec) -> Dataset:
    if spec.task in GP_TASKS:
        return generate_gp_dataset(spec)
    if spec.task == "scalar_inpaint":
        return generate_scalar_inpaint_dataset(spec)
    raise ConfigError("csv_ingest datasets are read with ingest_csv, not generated")


# --- serialization and ingestion -------------------------------------------------------

def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, samples in ds.splits.items():
        (out / name).mkdir(exist_ok=True)
        files[name] = []
        for k, z in enumerate(samples):
            rel = f"{name}/{k:06d}.csv"
            write_context_csv(z, out / rel)
            files[name].append(rel)
    manifest = dict(ds.manifest, files=files)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    group = parse_group(manifest.get("group", "C4"))
    if "channels" in manifest:
        return ingest_csv(path, manifest)
    rep = build_rep(manifest["rep"], group)
    splits = {name: [read_context_csv(path / f, rep) for f in files]
              for name, files in manifest["files"].items()}
    return Dataset(splits, manifest, rep)


def ingest_csv(path, manifest=None) -> Dataset:
    """Read ContextSet CSVs with per-channel representations.

    ``manifest`` (dict, or path to JSON; default ``<dir>/manifest.json``) names
    ``channels`` (one descriptor per fiber block, e.g. ``["trivial", "trivial", "standard"]``),
    an optional ``output_channels`` list of value columns the model predicts, an optional
    ``group`` and optional ``files`` mapping split names to CSV paths. A single CSV path
    becomes the ``all`` split.
    """
    path = Path(path)
    if manifest is None:
        manifest = path / "manifest.json" if path.is_dir() else path.with_suffix(".json")
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    try:
        group = parse_group(manifest.get("group", "C4"))
        blocks = [build_rep(c, group) for c in manifest["channels"]]
    except KeyError as exc:
        raise IngestionError(f"manifest is missing {exc}") from exc
    from ..groups import direct_sum

    rep_in = direct_sum(*blocks) if len(blocks) > 1 else blocks[0]
    out_idx = manifest.get("output_channels")
    rep_out = None
    if out_idx is not None:
        out_idx = [int(i) for i in out_idx]
        # output channels must be a union of whole fiber blocks
        starts = np.cumsum([0] + [b.dimension for b in blocks])
        chosen = []
        for b, s in zip(blocks, starts):
            span = list(range(s, s + b.dimension))
            if set(span) <= set(out_idx):
                chosen.append(b)
            elif set(span) & set(out_idx):
                raise IngestionError("output_channels split a fiber block")
        rep_out = direct_sum(*chosen) if len(chosen) > 1 else chosen[0]
    if path.is_dir():
        files = manifest.get("files") or {"all": sorted(str(p.relative_to(path)) for p in path.rglob("*.csv"))}
        splits = {name: [read_context_csv(path / f, rep_in) for f in fs] for name, fs in files.items()}
    else:
        splits = {"all": [read_context_csv(path, rep_in)]}
    return Dataset(splits, dict(manifest), rep_in, rep_out, out_idx)
