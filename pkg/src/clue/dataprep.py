"""Aperture isolation and the procedural toy dataset.

The toy renderer draws an otoscope-like frame: a bright circular aperture
on a black surround, a striped membrane inside it, a small light reflex and
a class-specific lesion:

* class 0 (normal): no lesion
* class 1 (effusion): amber blob with a vertical brightness gradient
* class 2 (perforation): dark ellipse

Hidden style factors (membrane hue, stripe phase, lesion and aperture
offsets) never change the class geometry.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ApertureNotFound, ConfigurationError

THRESHOLD = 26
LUMA = (0.299, 0.587, 0.114)
CLASS_NAMES = ("class0", "class1", "class2")
SPLIT_RATIO = (3, 1, 1)
SPLIT_NAMES = ("dataset1A", "dataset1B", "dataset2")

# Perforation ellipse semi-axes as fractions of the aperture radius.
HOLE_AXES = (0.42, 0.30)
HOLE_RGB = (58, 40, 38)
AMBER_RGB = (235, 150, 30)
DARK_LUMA = 70


@dataclass(frozen=True)
class ApertureResult:
    center: tuple[float, float]  # (x, y)
    radius: float
    mask: np.ndarray  # bool, original frame size
    cropped: np.ndarray  # uint8 RGB, target x target
    cropped_mask: np.ndarray  # bool, target x target


def to_gray(image: np.ndarray) -> np.ndarray:
    """8-bit luma, rounded to the nearest integer."""
    rgb = image[..., :3].astype(np.float64)
    gray = LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    return np.rint(gray).astype(np.int32)


def binarize(image: np.ndarray, threshold: int = THRESHOLD) -> np.ndarray:
    return to_gray(image) >= threshold


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected foreground component (ties: lowest label)."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        raise ApertureNotFound()
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def disc_mask(shape, center, radius) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    cx, cy = center
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def isolate_aperture(image: np.ndarray, target: int = 32, threshold: int = THRESHOLD) -> ApertureResult:
    """Find the maximal inscribed circle of the bright aperture and crop to it.

    grayscale -> binarize (gray >= threshold) -> largest 8-connected
    component -> exact Euclidean distance transform -> argmax is the
    center, max distance the radius -> mask, crop to the disc's bounding
    box, resize (bilinear image, nearest mask).

    The radius is the raw distance-transform maximum. Subtracting half a
    pixel looks natural but biases the estimate low for off-grid centres,
    where the argmax pixel already sits up to ~0.7 px from the true centre.
    """
    if image.size == 0:
        raise ApertureNotFound()
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    comp = largest_component(binarize(image, threshold))
    if comp.sum() <= 1:
        raise ApertureNotFound()
    dist = ndimage.distance_transform_edt(comp)
    peak = dist.max()
    ys, xs = np.nonzero(dist == peak)
    cx, cy = float(xs.mean()), float(ys.mean())
    if not comp[int(round(cy)), int(round(cx))]:
        cx, cy = float(xs[0]), float(ys[0])
    radius = float(peak)

    h, w = comp.shape
    mask = disc_mask(comp.shape, (cx, cy), radius)
    masked = np.where(mask[..., None], image[..., :3], 0).astype(np.uint8)
    x0, x1 = max(int(math.floor(cx - radius)), 0), min(int(math.ceil(cx + radius)), w - 1)
    y0, y1 = max(int(math.floor(cy - radius)), 0), min(int(math.ceil(cy + radius)), h - 1)
    crop = masked[y0 : y1 + 1, x0 : x1 + 1]
    crop_mask = mask[y0 : y1 + 1, x0 : x1 + 1].astype(np.uint8)
    cropped = cv2.resize(crop, (target, target), interpolation=cv2.INTER_LINEAR)
    cropped_mask = cv2.resize(crop_mask, (target, target), interpolation=cv2.INTER_NEAREST) > 0
    cropped = np.where(cropped_mask[..., None], cropped, 0).astype(np.uint8)
    return ApertureResult((cx, cy), radius, mask, cropped, cropped_mask)


# --------------------------------------------------------------------------
# toy renderer


@dataclass(frozen=True)
class Nuisance:
    """Hidden style factors. Ranges are enforced by ``validate``."""

    hue: float = 0.0  # [0, 1)
    texture_phase: float = 0.0  # [0, 2*pi)
    lesion_dx: float = 0.0  # [-0.3, 0.3], fraction of aperture radius
    lesion_dy: float = 0.0
    aperture_dx: float = 0.0  # [-0.1, 0.1], fraction of frame side
    aperture_dy: float = 0.0

    RANGES = {
        "hue": (0.0, 1.0),
        "texture_phase": (0.0, 2 * math.pi),
        "lesion_dx": (-0.3, 0.3),
        "lesion_dy": (-0.3, 0.3),
        "aperture_dx": (-0.1, 0.1),
        "aperture_dy": (-0.1, 0.1),
    }

    def validate(self) -> None:
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            upper_ok = v < hi if name in ("hue", "texture_phase") else v <= hi
            if not (lo <= v and upper_ok and math.isfinite(v)):
                raise ConfigurationError(f"nuisance.{name}", f"{v} outside [{lo}, {hi}]")

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "Nuisance":
        r = cls.RANGES
        return cls(
            hue=float(rng.uniform(0.0, 1.0)),
            texture_phase=float(rng.uniform(0.0, 2 * math.pi)),
            lesion_dx=float(rng.uniform(*r["lesion_dx"])),
            lesion_dy=float(rng.uniform(*r["lesion_dy"])),
            aperture_dx=float(rng.uniform(*r["aperture_dx"])),
            aperture_dy=float(rng.uniform(*r["aperture_dy"])),
        )


@dataclass(frozen=True)
class ToySample:
    image: np.ndarray
    class_label: int
    nuisance: Nuisance


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h, s, v)) * 255.0


def aperture_geometry(resolution: int, nuisance: Nuisance):
    """Aperture centre (x, y) and radius in pixels for a raw frame."""
    cx = (resolution - 1) / 2 + nuisance.aperture_dx * resolution
    cy = (resolution - 1) / 2 + nuisance.aperture_dy * resolution
    return cx, cy, 0.36 * resolution


def hole_area_bounds(resolution: int) -> tuple[float, float]:
    """Documented pixel-area bounds of the class-2 dark region."""
    r = 0.36 * resolution
    area = math.pi * HOLE_AXES[0] * r * HOLE_AXES[1] * r
    return 0.75 * area, 1.25 * area


def render_toy(class_label: int, nuisance: Nuisance, resolution: int = 40) -> ToySample:
    if class_label not in (0, 1, 2):
        raise ConfigurationError("class_label", f"unknown class {class_label!r}")
    if resolution < 16:
        raise ConfigurationError("resolution", "must be at least 16")
    nuisance.validate()
    res = resolution
    cx, cy, R = aperture_geometry(res, nuisance)
    yy, xx = np.mgrid[:res, :res].astype(np.float64)
    u, v = (xx - cx) / R, (yy - cy) / R
    inside = u**2 + v**2 <= 1.0

    base = _hsv_to_rgb(nuisance.hue, 0.45, 0.78).astype(np.float64)
    stripes = 1.0 + 0.14 * np.sin(2 * math.pi * 1.6 * (0.8 * u + 0.6 * v) + nuisance.texture_phase)
    vignette = 1.0 - 0.25 * (u**2 + v**2)
    img = base[None, None, :] * (stripes * vignette)[..., None]

    lx, ly = nuisance.lesion_dx, nuisance.lesion_dy
    if class_label == 1:
        d2 = (u - lx) ** 2 + (v - ly) ** 2
        alpha = np.exp(-d2 / (2 * 0.30**2))
        grad = 0.75 + 0.25 * np.clip((v - ly) / 0.45, -1, 1)
        amber = np.array(AMBER_RGB, dtype=np.float64)[None, None, :] * grad[..., None]
        img = img * (1 - alpha[..., None]) + amber * alpha[..., None]
    elif class_label == 2:
        e = ((u - lx) / HOLE_AXES[0]) ** 2 + ((v - ly) / HOLE_AXES[1]) ** 2
        img = np.where((e <= 1.0)[..., None], np.array(HOLE_RGB, dtype=np.float64), img)

    # light reflex opposite the lesion, present in every class
    rx, ry = -0.55 - 0.3 * lx, 0.45 - 0.3 * ly
    reflex = np.exp(-((u - rx) ** 2 + (v - ry) ** 2) / (2 * 0.07**2))
    img = img + 90.0 * reflex[..., None]

    img = np.where(inside[..., None], np.clip(img, 30, 255), 0.0)
    return ToySample(np.rint(img).astype(np.uint8), class_label, nuisance)


def dark_region_area(image: np.ndarray, dark_luma: int = DARK_LUMA) -> int:
    """Area of the largest connected region with luma in [THRESHOLD, dark_luma)."""
    g = to_gray(image)
    dark = (g >= THRESHOLD) & (g < dark_luma)
    labels, n = ndimage.label(dark, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


# --------------------------------------------------------------------------
# image sets and splits


@dataclass
class ImageSet:
    """A labelled stack of uint8 RGB images, shape (N, H, W, 3)."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [f"img{i:06d}" for i in range(len(self.labels))]
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], [self.ids[i] for i in idx])

    def of_class(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def class_counts(self, n_classes: int = 3) -> list[int]:
        return np.bincount(self.labels, minlength=n_classes).tolist()

    def hashes(self) -> list[str]:
        return [hashlib.sha256(im.tobytes()).hexdigest() for im in self.images]

    def to_tensor(self):
        import torch

        x = torch.from_numpy(self.images).permute(0, 3, 1, 2).float()
        return x / 127.5 - 1.0

    @staticmethod
    def concat(parts: list["ImageSet"]) -> "ImageSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return ImageSet(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [i for p in parts for i in p.ids],
        )


def to_uint8(x) -> np.ndarray:
    """[-1, 1] float tensor/array (N, C, H, W) -> uint8 (N, H, W, C)."""
    arr = np.asarray(x.detach().cpu() if hasattr(x, "detach") else x, dtype=np.float64)
    arr = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def standardize(image: np.ndarray, target: int) -> tuple[np.ndarray, bool]:
    """Run aperture isolation; fall back to a plain resize if none is found."""
    try:
        return isolate_aperture(image, target).cropped, True
    except ApertureNotFound:
        if image.shape[:2] != (target, target):
            image = cv2.resize(image, (target, target), interpolation=cv2.INTER_LINEAR)
        return image, False


def build_splits(
    n_per_class: int,
    seed: int,
    raw_resolution: int = 40,
    target: int = 32,
) -> dict[str, ImageSet]:
    """Render, standardize and split the toy dataset 3:1:1 per class."""
    unit = sum(SPLIT_RATIO)
    if n_per_class < unit or n_per_class % unit:
        raise ConfigurationError("data.n_per_class", f"{n_per_class} not divisible into 3:1:1")
    rng = np.random.default_rng(seed)
    sizes = [n_per_class * r // unit for r in SPLIT_RATIO]
    buckets = {name: ([], [], []) for name in SPLIT_NAMES}
    for k in range(len(CLASS_NAMES)):
        order = rng.permutation(n_per_class)
        bounds = np.cumsum([0, *sizes])
        for j in range(n_per_class):
            nz = Nuisance.draw(rng)
            img, _ = standardize(render_toy(k, nz, raw_resolution).image, target)
            split = SPLIT_NAMES[int(np.searchsorted(bounds, order[j], side="right")) - 1]
            ims, labels, ids = buckets[split]
            ims.append(img)
            labels.append(k)
            ids.append(f"{CLASS_NAMES[k]}_{j:05d}")
    return {
        name: ImageSet(np.stack(ims), np.array(labels), ids)
        for name, (ims, labels, ids) in buckets.items()
    }


# --------------------------------------------------------------------------
# raster + manifest I/O


def write_png(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_split(root, split: str, images: ImageSet) -> Path:
    """Write one split's PNGs and its JSON-lines manifest; return the manifest path."""
    root = Path(root)
    lines = []
    for im, label, ident in zip(images.images, images.labels, images.ids):
        rel = Path(split) / f"{ident}.png"
        write_png(root / rel, im)
        lines.append(json.dumps({"path": rel.as_posix(), "class": int(label), "split": split}))
    manifest = root / f"{split}.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> ImageSet:
    path = Path(path)
    ims, labels, ids = [], [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        ims.append(read_png(path.parent / rec["path"]))
        labels.append(int(rec["class"]))
        ids.append(Path(rec["path"]).stem)
    return ImageSet(np.stack(ims), np.array(labels), ids)


def nuisance_dict(n: Nuisance) -> dict:
    return asdict(n)
