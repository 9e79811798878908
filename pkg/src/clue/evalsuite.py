"""Feature-space metrics for generated images: FID, k-NN recall, PCA."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, NumericError

TauPolicy = Literal["median_real_to_real", "median_pooled"]
METRIC_COLUMNS = ("model_variant", "sigma", "split", "class", "metric", "value")


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise DimensionError("need a (n >= 2, d) feature matrix")
        cov = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), 0.5 * (cov + cov.T))


@torch.no_grad()
def extract_features(images, extractor, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer features, one float64 row per image.

    ``images`` is an ImageSet or a float tensor (N, C, H, W) in [-1, 1];
    ``extractor`` is a trained classifier exposing ``features`` and
    ``resolution``.
    """
    x = images.to_tensor() if hasattr(images, "to_tensor") else torch.as_tensor(images)
    res = extractor.resolution
    if x.ndim != 4 or x.shape[-1] != res or x.shape[-2] != res:
        raise DimensionError(f"extractor expects {res}x{res} images, got {tuple(x.shape)}")
    was_training = extractor.training
    extractor.eval()
    out = [extractor.features(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    extractor.train(was_training)
    if not out:
        return np.zeros((0, extractor.feature_dim))
    return torch.cat(out).double().numpy()


def _sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.linalg.eigh(0.5 * (m + m.T))


def _check_psd(w: np.ndarray, rtol: float, what: str) -> None:
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if w.size and w.min() < -rtol * top:
        raise NumericError(f"{what} not PSD (min eigenvalue {w.min():.3e})")


def _psd_sqrt(m: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    w, v = _sym_eig(m)
    _check_psd(w, rtol, "covariance")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray, rtol: float = 1e-8) -> float:
    """Tr((A B)^{1/2}) for symmetric PSD A, B.

    A B is similar to the symmetric A^{1/2} B A^{1/2}, whose eigenvalues are
    those of A B. Eigenvalues below ``-rtol * max`` are rejected, smaller
    negative ones clamped to zero.
    """
    _check_psd(_sym_eig(b)[0], rtol, "covariance")
    ra = _psd_sqrt(a, rtol)
    w, _ = _sym_eig(ra @ b @ ra)
    _check_psd(w, rtol, "covariance product")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def fid(stats_r: FeatureStats, stats_g: FeatureStats) -> float:
    if stats_r.mu.shape != stats_g.mu.shape:
        raise DimensionError(f"feature dims differ: {stats_r.mu.shape} vs {stats_g.mu.shape}")
    diff = stats_r.mu - stats_g.mu
    tr = np.trace(stats_r.cov) + np.trace(stats_g.cov) - 2.0 * trace_sqrt_product(stats_r.cov, stats_g.cov)
    return float(diff @ diff + tr)


def fid_from_features(real: np.ndarray, gen: np.ndarray) -> float:
    return fid(FeatureStats.from_features(real), FeatureStats.from_features(gen))


@dataclass(frozen=True)
class RecallConfig:
    k: int = 10
    tau_policy: TauPolicy = "median_real_to_real"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("eval.k", "must be >= 1")
        if self.tau_policy not in ("median_real_to_real", "median_pooled"):
            raise ConfigurationError("eval.tau_policy", f"unknown policy {self.tau_policy!r}")


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances by explicit differences (no expansion trick)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for i in range(0, len(a), 256):
        d = a[i : i + 256, None, :] - b[None, :, :]
        out[i : i + 256] = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return out


def kth_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """k-th smallest value (1-based) along the last axis."""
    return np.partition(d, k - 1, axis=-1)[..., k - 1]


def recall_threshold(real: np.ndarray, gen_kth: np.ndarray, cfg: RecallConfig) -> float:
    if cfg.tau_policy == "median_pooled":
        return float(np.median(gen_kth))
    if len(real) <= cfg.k:
        raise ConfigurationError("eval.k", f"need more than k={cfg.k} real samples for the real-to-real radius")
    rr = pairwise_distances(real, real)
    np.fill_diagonal(rr, np.inf)
    return float(np.median(kth_smallest(rr, cfg.k)))


def knn_recall(real: np.ndarray, gen: np.ndarray, cfg: RecallConfig = RecallConfig()) -> float:
    """Fraction of real points whose k-th nearest generated point lies within tau."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if len(gen) <= cfg.k:
        raise ConfigurationError("eval.k", f"|G|={len(gen)} must exceed k={cfg.k}")
    if len(real) < 2:
        raise ConfigurationError("eval", "need at least two real samples")
    if real.shape[1] != gen.shape[1]:
        raise DimensionError("real and generated features differ in dimension")
    gen_kth = kth_smallest(pairwise_distances(real, gen), cfg.k)
    tau = recall_threshold(real, gen_kth, cfg)
    return float(np.mean(gen_kth <= tau))


@dataclass(frozen=True)
class PCAResult:
    coords: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray  # (n_components, d)
    mean: np.ndarray

    def transform(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.mean) @ self.components.T


def pca_project(features: np.ndarray, n_components: int = 2) -> PCAResult:
    """Project onto the top principal axes.

    Each component is signed so that its first nonzero loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_components:
        raise DimensionError(f"need at least {n_components} rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    w, v = _sym_eig(cov)
    order = np.argsort(w)[::-1]
    w, v = np.clip(w[order], 0.0, None), v[:, order]
    total = w.sum()
    if total <= 0:
        raise NumericError("degenerate input: features have zero variance")
    comps = v[:, :n_components].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return PCAResult(xc @ comps.T, w[:n_components], w[:n_components] / total, comps, mean)


def write_metric_rows(path, rows: list[dict], append: bool = True) -> None:
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in METRIC_COLUMNS})


def write_pca_csv(path, coords: np.ndarray, labels, sources) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "class", "pc1", "pc2"])
        for (a, b), k, src in zip(coords[:, :2], labels, sources):
            w.writerow([src, int(k), f"{a:.6f}", f"{b:.6f}"])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
