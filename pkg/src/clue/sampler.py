"""DDIM generation from prompt + prior-sampled style latents.

Each image is fully determined by ``(seed, class, index)``: a dedicated
generator draws the initial noise and then a unit style direction ``z``, and
the style latent is ``sigma_style * z``. Runs at different ``sigma_style``
with the same seed therefore share their initial noise and style
directions, differing only in how far the style is pushed from the origin.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import schedule as sch
from .dataprep import CLASS_NAMES, ImageSet, read_png, standardize, to_uint8, write_png
from .errors import ConditioningError, ConfigurationError
from .model import ClueModel
from .seeding import derive_seed
from .stylecodec import prior_sample

DEFAULT_SIGMAS = (0.0, 0.1, 0.3, 0.5)


@dataclass
class GenerationSpec:
    n_per_class: int = 90
    sigma_style: float = 0.5
    inference_steps: int = 50
    seed: int = 0
    classes: tuple[int, ...] = (0, 1, 2)

    def validate(self, T: int) -> None:
        if self.n_per_class < 1:
            raise ConfigurationError("sample.n_per_class", "must be >= 1")
        if self.sigma_style < 0:
            raise ConfigurationError("sample.sigma_style", "must be >= 0")
        if not 1 <= self.inference_steps <= T:
            raise ConfigurationError("sample.inference_steps", f"must lie in [1, {T}]")


@dataclass
class SynthManifest:
    spec: GenerationSpec
    records: list[dict] = field(default_factory=list)

    @property
    def totals(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            out[r["class"]] = out.get(r["class"], 0) + 1
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path, spec: GenerationSpec | None = None) -> "SynthManifest":
        recs = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
        if spec is None and recs:
            first = recs[0]
            spec = GenerationSpec(
                n_per_class=max(r["index"] for r in recs) + 1,
                sigma_style=first["sigma_style"],
                inference_steps=first.get("inference_steps", 50),
                seed=first["run_seed"],
                classes=tuple(sorted({r["class"] for r in recs})),
            )
        return cls(spec or GenerationSpec(), recs)


@dataclass
class Generated:
    images: ImageSet  # standardized
    raw: np.ndarray  # uint8 straight off the sampler
    manifest: SynthManifest


def image_seed(seed: int, class_label: int, index: int) -> int:
    return derive_seed(seed, "image", class_label, index)


def initial_draws(seed: int, class_label: int, index: int, shape, d_style: int):
    """Initial noise x_T and unit style direction for one image."""
    g = torch.Generator().manual_seed(image_seed(seed, class_label, index))
    x_T = torch.randn(shape, generator=g)
    z = prior_sample(1.0, d_style, g)
    return x_T, z


@torch.no_grad()
def ddim_sample(
    model: ClueModel,
    sched: sch.DiffusionSchedule,
    x_T: torch.Tensor,
    prompt_ids: torch.Tensor,
    s: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """Run the deterministic chain on a batch and clamp to [-1, 1]."""
    c = model.prompt(prompt_ids)
    grid = sch.ddim_timesteps(sched.T, steps)
    x = x_T
    for t, t_prev in zip(grid[:-1], grid[1:]):
        v = model.predict_v(x, t, c, s)
        x = sch.ddim_step(x, v, t, t_prev, sched)
    return x.clamp(-1.0, 1.0)


def _style_hash(s: torch.Tensor) -> str:
    return hashlib.sha256(s.numpy().astype("<f4").tobytes()).hexdigest()


def generate(
    spec: GenerationSpec,
    model: ClueModel,
    sched: sch.DiffusionSchedule,
    out_dir=None,
    batch_size: int = 90,
    target: int | None = None,
) -> Generated:
    """Generate ``n_per_class`` images for each class.

    Images pass through the same aperture standardization as real data. With
    ``out_dir`` the standardized PNGs and ``manifest.jsonl`` are written.
    """
    spec.validate(sched.T)
    cfg = model.cfg
    for k in spec.classes:
        if not 0 <= k < len(model.registry):
            raise ConditioningError(f"no prompt registered for class {k}")
    target = target or cfg.resolution
    shape = (cfg.in_channels, cfg.resolution, cfg.resolution)

    jobs = [(k, i) for k in spec.classes for i in range(spec.n_per_class)]
    raws, styles = [], []
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        draws = [initial_draws(spec.seed, k, i, shape, cfg.d_style) for k, i in chunk]
        x_T = torch.stack([d[0] for d in draws])
        s = torch.stack([d[1] for d in draws])
        s = torch.zeros_like(s) if spec.sigma_style == 0 else s * float(spec.sigma_style)
        ids = torch.tensor([k for k, _ in chunk], dtype=torch.long)
        raws.append(to_uint8(ddim_sample(model, sched, x_T, ids, s, spec.inference_steps)))
        styles.extend(s)
    raw = np.concatenate(raws)

    std_images, records, ids = [], [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    for (k, i), im, s in zip(jobs, raw, styles):
        std, ok = standardize(im, target)
        std_images.append(std)
        ident = f"{CLASS_NAMES[k]}_{i:05d}"
        ids.append(ident)
        rel = f"images/{ident}.png"
        if out_dir is not None:
            write_png(out_dir / rel, std)
        records.append({
            "path": rel,
            "class": k,
            "index": i,
            "seed": image_seed(spec.seed, k, i),
            "run_seed": spec.seed,
            "sigma_style": float(spec.sigma_style),
            "inference_steps": spec.inference_steps,
            "style_sha256": _style_hash(s),
            "standardized": ok,
        })
    manifest = SynthManifest(spec, records)
    if out_dir is not None:
        manifest.write(out_dir / "manifest.jsonl")
        (out_dir / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1))
    labels = np.array([k for k, _ in jobs], dtype=np.int64)
    return Generated(ImageSet(np.stack(std_images), labels, ids), raw, manifest)


def load_generated(manifest_path) -> ImageSet:
    path = Path(manifest_path)
    recs = [json.loads(x) for x in path.read_text().splitlines() if x.strip()]
    images = np.stack([read_png(path.parent / r["path"]) for r in recs])
    return ImageSet(images, np.array([r["class"] for r in recs]), [Path(r["path"]).stem for r in recs])


@torch.no_grad()
def style_sweep(
    model: ClueModel,
    sched: sch.DiffusionSchedule,
    prompt_id: int,
    fixed_noise_seed: int,
    dims: tuple[int, int],
    grid: Sequence[float],
    inference_steps: int = 50,
    index: int = 0,
) -> np.ndarray:
    """Vary style coordinates ``dims`` over ``grid`` x ``grid`` at fixed x_T.

    Returns uint8 images shaped (m, m, H, W, 3); entry [a, b] sets
    s[dims[0]] = grid[a], s[dims[1]] = grid[b], all other coordinates 0.
    The initial noise is that of image ``index`` of the class in
    :func:`generate` with the same seed.
    """
    i, j = dims
    d = model.cfg.d_style
    if i == j or not (0 <= i < d and 0 <= j < d):
        raise ConfigurationError("dims", f"need two distinct indices in [0, {d}), got {dims}")
    grid = [float(g) for g in grid]
    m = len(grid)
    if m < 1:
        raise ConfigurationError("grid", "needs at least one value")
    shape = (model.cfg.in_channels, model.cfg.resolution, model.cfg.resolution)
    x_T, _ = initial_draws(fixed_noise_seed, prompt_id, index, shape, d)
    s = torch.zeros(m * m, d)
    for a, ga in enumerate(grid):
        for b, gb in enumerate(grid):
            s[a * m + b, i] = ga
            s[a * m + b, j] = gb
    ids = torch.full((m * m,), prompt_id, dtype=torch.long)
    x = ddim_sample(model, sched, x_T.expand(m * m, *shape).contiguous(), ids, s, inference_steps)
    return to_uint8(x).reshape(m, m, *x.shape[2:], x.shape[1])


def replicate_protocol(
    n_runs: int,
    base: GenerationSpec,
    model: ClueModel,
    sched: sch.DiffusionSchedule,
    out_dir=None,
    **kwargs,
) -> list[Generated]:
    """Independent generation runs with seeds derived from ``base.seed``."""
    if n_runs < 1:
        raise ConfigurationError("n_runs", "must be >= 1")
    runs = []
    for r in range(n_runs):
        spec = GenerationSpec(base.n_per_class, base.sigma_style, base.inference_steps,
                              run_seed(base.seed, r), base.classes)
        sub = Path(out_dir) / f"run{r}" if out_dir is not None else None
        runs.append(generate(spec, model, sched, sub, **kwargs))
    return runs


def run_seed(seed: int, run: int) -> int:
    return derive_seed(seed, "run", run)
