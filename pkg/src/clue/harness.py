"""Downstream classifier experiments on real, synthetic and mixed training sets.

All experiments validate on real Dataset 1B and test on real Dataset 2.
Selections are seeded per run; within a run, synthetic images are always
taken as prefixes of one per-class permutation, so larger training sets
contain the smaller ones.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix, f1_score, roc_auc_score, roc_curve

from .dataprep import ImageSet
from .errors import ConfigurationError
from .seeding import derive_seed

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass
class ClassifierConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64)
    resolution: int = 32
    batch_size: int = 32
    lr: float = 1e-3
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    max_epochs: int = 40
    early_stop_patience: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise ConfigurationError("harness.patience", "must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("harness.plateau_factor", "must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("harness", "max_epochs, batch_size and lr must be positive")
        if self.resolution % 2 ** len(self.widths):
            raise ConfigurationError("harness.resolution", "must be divisible by 2**len(widths)")


class SmallCNN(nn.Module):
    """conv-BN-ReLU-maxpool blocks, global average pool, linear head."""

    def __init__(self, cfg: ClassifierConfig, n_classes: int = N_CLASSES):
        super().__init__()
        self.resolution = cfg.resolution
        layers, prev = [], 3
        for w in cfg.widths:
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(2)]
            prev = w
        self.body = nn.Sequential(*layers)
        self.feature_dim = prev
        self.head = nn.Linear(prev, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainedClassifier:
    model: SmallCNN
    history: list[EpochLog]
    best_epoch: int


def _check_classes(split: ImageSet, name: str) -> None:
    missing = sorted(set(range(N_CLASSES)) - set(split.labels.tolist()))
    if missing:
        raise ConfigurationError(name, f"classes {missing} missing")


def check_disjoint(**splits: ImageSet) -> None:
    """Raise if any image (by content hash) appears in more than one split."""
    seen: dict[str, str] = {}
    for name, s in splits.items():
        for h in set(s.hashes()):
            if h in seen and seen[h] != name:
                raise ConfigurationError("splits", f"image shared by {seen[h]} and {name}")
            seen[h] = name


@torch.no_grad()
def _mean_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, bs: int = 256) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(x), bs):
        total += F.cross_entropy(model(x[i : i + bs]), y[i : i + bs], reduction="sum").item()
    return total / len(x)


def train_classifier(
    train_split: ImageSet,
    val_split: ImageSet,
    cfg: ClassifierConfig | None = None,
    seed: int = 0,
    check_hygiene: bool = True,
) -> TrainedClassifier:
    """Adam + ReduceLROnPlateau on validation loss, with early stopping.

    The weights with the best validation loss are restored at the end.
    """
    cfg = cfg or ClassifierConfig()
    _check_classes(train_split, "train")
    if check_hygiene:
        check_disjoint(train=train_split, val=val_split)
    torch.manual_seed(derive_seed(seed, "classifier", "init"))
    model = SmallCNN(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    g = torch.Generator().manual_seed(derive_seed(seed, "classifier", "shuffle"))
    x, y = train_split.to_tensor(), torch.from_numpy(train_split.labels)
    xv, yv = val_split.to_tensor(), torch.from_numpy(val_split.labels)

    best, best_state, best_epoch, stale = math.inf, None, 0, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = torch.randperm(len(x), generator=g)
        running = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if len(idx) < 2:  # BatchNorm needs more than one sample
                continue
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        val_loss = _mean_loss(model, xv, yv)
        history.append(EpochLog(epoch, running / len(x), val_loss, opt.param_groups[0]["lr"]))
        plateau.step(val_loss)
        if val_loss < best:
            best, best_state, best_epoch, stale = val_loss, copy.deepcopy(model.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainedClassifier(model, history, best_epoch)


@dataclass
class Evaluation:
    f1_macro: float
    auc_macro: float
    confusion: np.ndarray
    roc: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def macro_f1(y_true, y_pred, n_classes: int = N_CLASSES) -> float:
    return float(f1_score(y_true, y_pred, labels=list(range(n_classes)), average="macro", zero_division=0))


def macro_auc(y_true, scores: np.ndarray) -> float:
    """One-vs-rest AUC per class, averaged."""
    y_true = np.asarray(y_true)
    if len(np.unique(y_true)) < 2:
        raise ConfigurationError("test", "AUC undefined on a single-class test set")
    return float(roc_auc_score(y_true, scores, multi_class="ovr", average="macro",
                               labels=list(range(scores.shape[1]))))


@torch.no_grad()
def predict_proba(model: SmallCNN, images: ImageSet, bs: int = 256) -> np.ndarray:
    model.eval()
    x = images.to_tensor()
    out = [torch.softmax(model(x[i : i + bs]), dim=1) for i in range(0, len(x), bs)]
    return torch.cat(out).double().numpy()


def evaluate(model: SmallCNN, test_split: ImageSet) -> Evaluation:
    y = test_split.labels
    if len(np.unique(y)) < 2:
        raise ConfigurationError("test", "AUC undefined on a single-class test set")
    probs = predict_proba(model, test_split)
    pred = probs.argmax(axis=1)
    roc = {}
    for k in range(probs.shape[1]):
        fpr, tpr, _ = roc_curve(y == k, probs[:, k])
        roc[k] = (fpr, tpr)
    return Evaluation(
        macro_f1(y, pred, probs.shape[1]),
        macro_auc(y, probs),
        confusion_matrix(y, pred, labels=list(range(probs.shape[1]))),
        roc,
    )


# --------------------------------------------------------------------------
# experiment bookkeeping


@dataclass
class ReportRow:
    experiment: str
    variant: str
    sigma: float | None
    ratio_or_scale: str
    run_seed: int
    f1_macro: float
    auc_macro: float
    confusion: list[list[int]]
    run: int = 0

    def key(self) -> tuple:
        return (self.experiment, self.variant, self.sigma, self.ratio_or_scale)


ROW_COLUMNS = ("experiment", "variant", "sigma", "ratio_or_scale", "run", "run_seed",
               "f1_macro", "auc_macro", "confusion")
AGG_COLUMNS = ("experiment", "variant", "sigma", "ratio_or_scale", "n_runs",
               "f1_mean", "f1_std", "auc_mean", "auc_std")


def _sigma_str(s) -> str:
    return "" if s is None else f"{s:.2f}"


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    roc_points: list[dict] = field(default_factory=list)

    def extend(self, other: "ExperimentReport") -> None:
        self.rows.extend(other.rows)
        self.roc_points.extend(other.roc_points)

    def cell(self, experiment, variant, sigma, ratio) -> list[ReportRow]:
        return [r for r in self.rows if r.key() == (experiment, variant, sigma, str(ratio))]

    def aggregate(self) -> list[dict]:
        """Mean and sample standard deviation per cell, in first-seen order."""
        cells: dict[tuple, list[ReportRow]] = {}
        for r in self.rows:
            cells.setdefault(r.key(), []).append(r)
        out = []
        for (exp, var, sig, ratio), rows in cells.items():
            f1 = np.array([r.f1_macro for r in rows])
            auc = np.array([r.auc_macro for r in rows])
            ddof = 1 if len(rows) > 1 else 0
            out.append({
                "experiment": exp, "variant": var, "sigma": sig, "ratio_or_scale": ratio,
                "n_runs": len(rows),
                "f1_mean": float(f1.mean()), "f1_std": float(f1.std(ddof=ddof)),
                "auc_mean": float(auc.mean()), "auc_std": float(auc.std(ddof=ddof)),
            })
        return out

    def write_rows(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROW_COLUMNS)
            for r in self.rows:
                w.writerow([r.experiment, r.variant, _sigma_str(r.sigma), r.ratio_or_scale, r.run,
                            r.run_seed, f"{r.f1_macro:.6f}", f"{r.auc_macro:.6f}",
                            json.dumps(r.confusion)])

    def write_aggregate(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AGG_COLUMNS)
            for a in self.aggregate():
                w.writerow([a["experiment"], a["variant"], _sigma_str(a["sigma"]), a["ratio_or_scale"],
                            a["n_runs"], f"{a['f1_mean']:.6f}", f"{a['f1_std']:.6f}",
                            f"{a['auc_mean']:.6f}", f"{a['auc_std']:.6f}"])

    def write_roc(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["experiment", "variant", "sigma", "ratio_or_scale", "run", "class", "fpr", "tpr"])
            for p in self.roc_points:
                for f, t in zip(p["fpr"], p["tpr"]):
                    w.writerow([p["experiment"], p["variant"], _sigma_str(p["sigma"]),
                                p["ratio_or_scale"], p["run"], p["class"], f"{f:.6f}", f"{t:.6f}"])

    @classmethod
    def read_rows(cls, path) -> "ExperimentReport":
        rep = cls()
        with open(path) as fh:
            for r in csv.DictReader(fh):
                rep.rows.append(ReportRow(
                    r["experiment"], r["variant"], float(r["sigma"]) if r["sigma"] else None,
                    r["ratio_or_scale"], int(r["run_seed"]), float(r["f1_macro"]),
                    float(r["auc_macro"]), json.loads(r["confusion"]), int(r["run"]),
                ))
        return rep


def pooled_std(*groups: Sequence[float]) -> float:
    """sqrt of the mean of the groups' sample variances."""
    vars_ = [np.var(g, ddof=1) if len(g) > 1 else 0.0 for g in groups]
    return float(np.sqrt(np.mean(vars_)))


def _record(report: ExperimentReport, experiment, variant, sigma, ratio, run, seed, ev: Evaluation):
    report.rows.append(ReportRow(experiment, variant, sigma, str(ratio), seed, ev.f1_macro,
                                 ev.auc_macro, ev.confusion.tolist(), run))
    for k, (fpr, tpr) in ev.roc.items():
        report.roc_points.append({"experiment": experiment, "variant": variant, "sigma": sigma,
                                  "ratio_or_scale": str(ratio), "run": run, "class": k,
                                  "fpr": fpr.tolist(), "tpr": tpr.tolist()})


def _fit_and_score(train_set, val, test, cfg, seed) -> Evaluation:
    check_disjoint(train=train_set, val=val, test=test)
    clf = train_classifier(train_set, val, cfg, seed, check_hygiene=False)
    return evaluate(clf.model, test)


def _class_perm(n: int, seed: int, *path) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, *path)).permutation(n)


def mix_training_set(real: ImageSet, synth: ImageSet, ratio: int, seed: int) -> ImageSet:
    """Replace ``ratio`` percent of each class's real images with synthetic ones."""
    if not 0 <= ratio <= 100:
        raise ConfigurationError("ratio", f"{ratio} outside [0, 100]")
    keep, parts = [], []
    for k in range(N_CLASSES):
        ridx, sidx = real.of_class(k), synth.of_class(k)
        n = len(ridx)
        n_syn = int(round(n * ratio / 100))
        if n_syn > len(sidx):
            raise ConfigurationError("synthetic pool", f"class {k}: need {n_syn}, have {len(sidx)}")
        keep.append(ridx[_class_perm(n, seed, "mix-real", k)[: n - n_syn]])
        parts.append(synth.subset(sidx[_class_perm(len(sidx), seed, "synth", k)[:n_syn]]))
    # real images keep their original order, so ratio 0 returns the real set unchanged
    return ImageSet.concat([real.subset(np.sort(np.concatenate(keep))), *parts])


def scaled_synthetic_set(real: ImageSet, synth: ImageSet, scale: int, seed: int) -> ImageSet:
    """``scale`` percent of each class's real count, drawn from the synthetic pool."""
    parts = []
    for k in range(N_CLASSES):
        n = int(round(len(real.of_class(k)) * scale / 100))
        sidx = synth.of_class(k)
        if n > len(sidx):
            raise ConfigurationError("synthetic pool", f"class {k}: need {n}, have {len(sidx)}")
        parts.append(synth.subset(sidx[_class_perm(len(sidx), seed, "synth", k)[:n]]))
    return ImageSet.concat(parts)


def real_baseline(real_train, val, test, n_runs: int, cfg=None, seed: int = 0) -> ExperimentReport:
    report = ExperimentReport()
    for run in range(n_runs):
        rs = derive_seed(seed, "baseline", run)
        _record(report, "baseline", "real", None, "0", run, rs, _fit_and_score(real_train, val, test, cfg, rs))
    return report


def mixed_experiment(
    real_train: ImageSet,
    synth_runs: Sequence[ImageSet],
    val: ImageSet,
    test: ImageSet,
    ratios: Sequence[int] = tuple(range(0, 101, 10)),
    plus_real: bool = True,
    n_runs: int | None = None,
    cfg: ClassifierConfig | None = None,
    seed: int = 0,
    variant: str = "clue",
    sigma: float | None = None,
) -> ExperimentReport:
    """Replace growing fractions of the real training set with synthetic images.

    Run ``r`` draws from ``synth_runs[r]``. With ``plus_real`` a final row
    trains on 100% synthetic plus the full real set.
    """
    n_runs = n_runs or len(synth_runs)
    if n_runs > len(synth_runs):
        raise ConfigurationError("n_runs", f"{n_runs} runs but {len(synth_runs)} synthetic pools")
    report = ExperimentReport()
    for run in range(n_runs):
        rs = derive_seed(seed, "mixed", variant, sigma, run)
        for ratio in ratios:
            train_set = mix_training_set(real_train, synth_runs[run], ratio, rs)
            ev = _fit_and_score(train_set, val, test, cfg, rs)
            _record(report, "mixed", variant, sigma, ratio, run, rs, ev)
        if plus_real:
            synth = mix_training_set(real_train, synth_runs[run], 100, rs)
            ev = _fit_and_score(ImageSet.concat([synth, real_train]), val, test, cfg, rs)
            _record(report, "mixed", variant, sigma, "100+real", run, rs, ev)
    return report


def scaling_experiment(
    real_train: ImageSet,
    synth_runs: Sequence[ImageSet],
    val: ImageSet,
    test: ImageSet,
    scales: Sequence[int] = (100, 200, 500, 1000),
    plus_real: bool = True,
    n_runs: int | None = None,
    cfg: ClassifierConfig | None = None,
    seed: int = 0,
    variant: str = "clue",
    sigma: float | None = None,
) -> ExperimentReport:
    """Synthetic-only training at multiples of the real set size."""
    n_runs = n_runs or len(synth_runs)
    if n_runs > len(synth_runs):
        raise ConfigurationError("n_runs", f"{n_runs} runs but {len(synth_runs)} synthetic pools")
    report = ExperimentReport()
    for run in range(n_runs):
        rs = derive_seed(seed, "scaling", variant, sigma, run)
        for scale in scales:
            train_set = scaled_synthetic_set(real_train, synth_runs[run], scale, rs)
            _record(report, "scaling", variant, sigma, scale, run, rs,
                    _fit_and_score(train_set, val, test, cfg, rs))
        if plus_real:
            top = max(scales)
            train_set = ImageSet.concat([scaled_synthetic_set(real_train, synth_runs[run], top, rs), real_train])
            _record(report, "scaling", variant, sigma, f"{top}+real", run, rs,
                    _fit_and_score(train_set, val, test, cfg, rs))
    return report
