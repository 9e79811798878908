"""Pipeline commands. Each reads declared inputs and writes only its own directory.

Layout under the output root::

    prepare/    dataset1A.jsonl dataset1B.jsonl dataset2.jsonl + PNGs
    train-gen/  model.ckpt curve.csv
    generate/   sigma0.50/run0/manifest.jsonl + PNGs ...
    eval-gen/   extractor.ckpt metrics.csv pca.csv
    classify/   rows.csv aggregate.csv roc.csv
    report/     fid.csv recall.csv mixed_f1.csv
                mixed_auc.csv scaling_f1.csv scaling_auc.csv

Every command also writes ``run_manifest.json`` (config hash, seed,
version, produced files with digests).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_archive
from .config import RunConfig, config_hash, dump
from .dataprep import SPLIT_NAMES, ImageSet, build_splits, read_manifest, write_split
from .evalsuite import (
    FeatureStats,
    extract_features,
    fid,
    knn_recall,
    pairwise_distances,
    pca_project,
    write_metric_rows,
    write_pca_csv,
)
from .harness import (
    ExperimentReport,
    mixed_experiment,
    real_baseline,
    scaling_experiment,
    train_classifier,
)
from .sampler import GenerationSpec, generate, load_generated, run_seed
from .seeding import derive_seed
from .trainer import load_model, train

log = logging.getLogger(__name__)

COMMANDS = ("prepare", "train-gen", "generate", "eval-gen", "classify", "report")
N_CLASSES = 3
EVAL_SPLITS = ("dataset1+2", "dataset1", "dataset2")


def sigma_dir(sigma: float) -> str:
    return f"sigma{sigma:.2f}"


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, command: str, cfg: RunConfig) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    doc = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "master_seed": cfg.master_seed,
        "version": version_string(),
        "files": [{"path": p.relative_to(out).as_posix(), "sha256": _digest(p)} for p in files],
    }
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input {path} ({what}); run the producing command first")
    return path


def load_splits(root: Path) -> dict[str, ImageSet]:
    return {s: read_manifest(_require(root / "prepare" / f"{s}.jsonl", "prepare")) for s in SPLIT_NAMES}


def pool_per_class(cfg: RunConfig, n_train_per_class: int) -> int:
    return int(math.ceil(n_train_per_class * cfg.sample.pool_percent / 100))


def load_pools(root: Path, cfg: RunConfig) -> dict[float, list[ImageSet]]:
    pools = {}
    for sigma in cfg.sample.sigmas:
        base = root / "generate" / sigma_dir(sigma)
        pools[sigma] = [
            load_generated(_require(base / f"run{r}" / "manifest.jsonl", "generate"))
            for r in range(cfg.sample.n_runs)
        ]
    return pools


# --------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig, root: Path, out: Path) -> None:
    splits = build_splits(cfg.data.n_per_class, derive_seed(cfg.master_seed, "data"),
                          cfg.data.raw_resolution, cfg.data.target)
    for name, images in splits.items():
        write_split(out, name, images)


def cmd_train_gen(cfg: RunConfig, root: Path, out: Path) -> None:
    splits = load_splits(root)
    dataset1 = ImageSet.concat([splits["dataset1A"], splits["dataset1B"]])
    train(dataset1, cfg.train, cfg.model, derive_seed(cfg.master_seed, "train-gen"), out_dir=out)


def cmd_generate(cfg: RunConfig, root: Path, out: Path) -> None:
    model, _ = load_model(_require(root / "train-gen" / "model.ckpt", "train-gen"))
    sched = cfg.train.schedule()
    n_train = max(read_manifest(root / "prepare" / "dataset1A.jsonl").class_counts())
    n = pool_per_class(cfg, n_train)
    base_seed = derive_seed(cfg.master_seed, "generate")
    for sigma in cfg.sample.sigmas:
        for r in range(cfg.sample.n_runs):
            # runs share seeds across sigma, so sigma variants are coupled
            spec = GenerationSpec(n, sigma, cfg.sample.inference_steps, run_seed(base_seed, r))
            generate(spec, model, sched, out / sigma_dir(sigma) / f"run{r}",
                     batch_size=cfg.sample.batch_size, target=cfg.data.target)


def mean_pairwise_distance(feats: np.ndarray) -> float:
    if len(feats) < 2:
        return 0.0
    d = pairwise_distances(feats, feats)
    n = len(feats)
    return float(d.sum() / (n * (n - 1)))


def diversity(feats: np.ndarray, labels: np.ndarray) -> float:
    """Within-class mean pairwise feature distance, averaged over classes."""
    return float(np.mean([mean_pairwise_distance(feats[labels == k]) for k in range(N_CLASSES)]))


def cmd_eval_gen(cfg: RunConfig, root: Path, out: Path) -> None:
    splits = load_splits(root)
    pools = load_pools(root, cfg)
    clf = train_classifier(splits["dataset1A"], splits["dataset1B"], cfg.harness.classifier,
                           derive_seed(cfg.master_seed, "extractor"))
    extractor = clf.model
    save_archive(out / "extractor.ckpt", extractor.state_dict(), {"best_epoch": clf.best_epoch})

    feats = {s: extract_features(splits[s], extractor) for s in SPLIT_NAMES}
    labels = {s: splits[s].labels for s in SPLIT_NAMES}
    real = {
        "dataset1": (np.concatenate([feats["dataset1A"], feats["dataset1B"]]),
                     np.concatenate([labels["dataset1A"], labels["dataset1B"]])),
        "dataset2": (feats["dataset2"], labels["dataset2"]),
    }
    real["dataset1+2"] = (np.concatenate([real["dataset1"][0], real["dataset2"][0]]),
                          np.concatenate([real["dataset1"][1], real["dataset2"][1]]))
    rcfg = cfg.eval.recall()

    rows = []
    pca_feats, pca_labels, pca_src = [feats[s] for s in SPLIT_NAMES], [labels[s] for s in SPLIT_NAMES], []
    for s in SPLIT_NAMES:
        pca_src += [s] * len(feats[s])
    for sigma in cfg.sample.sigmas:
        per_run = {}
        for r, pool in enumerate(pools[sigma]):
            g_feats = extract_features(pool, extractor)
            if r == 0:
                pca_feats.append(g_feats)
                pca_labels.append(pool.labels)
                pca_src += [f"clue_{sigma_dir(sigma)}"] * len(g_feats)
            for split in EVAL_SPLITS:
                rf, rl = real[split]
                for cls in (*range(N_CLASSES), "all"):
                    rsel = rf if cls == "all" else rf[rl == cls]
                    gsel = g_feats if cls == "all" else g_feats[pool.labels == cls]
                    per_run.setdefault(("fid", split, cls), []).append(
                        fid(FeatureStats.from_features(rsel), FeatureStats.from_features(gsel)))
                    per_run.setdefault(("recall", split, cls), []).append(knn_recall(rsel, gsel, rcfg))
            for cls in range(N_CLASSES):
                per_run.setdefault(("diversity", "generated", cls), []).append(
                    mean_pairwise_distance(g_feats[pool.labels == cls]))
            per_run.setdefault(("diversity", "generated", "all"), []).append(diversity(g_feats, pool.labels))
        for (metric, split, cls), vals in per_run.items():
            base = {"model_variant": "clue", "sigma": float(sigma), "split": split, "class": cls}
            rows.append({**base, "metric": metric, "value": float(np.mean(vals))})
            rows.append({**base, "metric": f"{metric}_std",
                         "value": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0})
    write_metric_rows(out / "metrics.csv", rows, append=False)

    allf = np.concatenate(pca_feats)
    pca = pca_project(allf, cfg.eval.pca_components)
    write_pca_csv(out / "pca.csv", pca.coords, np.concatenate(pca_labels), pca_src)


def cmd_classify(cfg: RunConfig, root: Path, out: Path) -> None:
    splits = load_splits(root)
    pools = load_pools(root, cfg)
    h = cfg.harness
    seed = derive_seed(cfg.master_seed, "classify")
    real_train, val, test = splits["dataset1A"], splits["dataset1B"], splits["dataset2"]
    report = real_baseline(real_train, val, test, h.n_runs, h.classifier, seed)
    for sigma in cfg.sample.sigmas:
        runs = pools[sigma][: h.n_runs]
        if h.ratios:
            report.extend(mixed_experiment(real_train, runs, val, test, h.ratios, h.plus_real,
                                           h.n_runs, h.classifier, seed, "clue", float(sigma)))
        if h.scales:
            report.extend(scaling_experiment(real_train, runs, val, test, h.scales, h.plus_real,
                                             h.n_runs, h.classifier, seed, "clue", float(sigma)))
    report.write_rows(out / "rows.csv")
    report.write_aggregate(out / "aggregate.csv")
    report.write_roc(out / "roc.csv")


def _pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} (±{100 * std:.2f})"


def _metric_table(metrics: list[dict], metric: str, path: Path, scale: float) -> None:
    sigmas = sorted({float(r["sigma"]) for r in metrics})
    cols = [(split, cls) for split in EVAL_SPLITS for cls in ("0", "1", "2", "all")]
    lookup = {(float(r["sigma"]), r["split"], r["class"], r["metric"]): float(r["value"]) for r in metrics}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *[f"{split}/{cls}" for split, cls in cols]])
        for s in sigmas:
            cells = []
            for split, cls in cols:
                v = lookup.get((s, split, cls, metric))
                cells.append("" if v is None else f"{scale * v:.2f}")
            w.writerow([f"clue sigma={s:.2f}", *cells])


def _experiment_table(agg: list[dict], experiment: str, key: str, path: Path, baseline) -> None:
    rows = [a for a in agg if a["experiment"] == experiment]
    sigmas = sorted({a["sigma"] for a in rows})
    levels = list(dict.fromkeys(a["ratio_or_scale"] for a in rows))
    cell = {(a["ratio_or_scale"], a["sigma"]): a for a in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ratio_or_scale", *[f"clue sigma={s:.2f}" for s in sigmas]])
        if baseline is not None:
            w.writerow(["real only", *[_pct(baseline[f"{key}_mean"], baseline[f"{key}_std"])] * len(sigmas)])
        for lv in levels:
            out = []
            for s in sigmas:
                a = cell.get((lv, s))
                out.append("" if a is None else _pct(a[f"{key}_mean"], a[f"{key}_std"]))
            w.writerow([f"{lv} %" if lv.isdigit() else lv.replace("+real", " % + Dataset 1A"), *out])


def cmd_report(cfg: RunConfig, root: Path, out: Path) -> None:
    with open(_require(root / "eval-gen" / "metrics.csv", "eval-gen")) as fh:
        metrics = list(csv.DictReader(fh))
    _metric_table(metrics, "fid", out / "fid.csv", 1.0)
    _metric_table(metrics, "recall", out / "recall.csv", 100.0)

    report = ExperimentReport.read_rows(_require(root / "classify" / "rows.csv", "classify"))
    agg = report.aggregate()
    base = next((a for a in agg if a["experiment"] == "baseline"), None)
    _experiment_table(agg, "mixed", "f1", out / "mixed_f1.csv", base)
    _experiment_table(agg, "mixed", "auc", out / "mixed_auc.csv", base)
    _experiment_table(agg, "scaling", "f1", out / "scaling_f1.csv", None)
    _experiment_table(agg, "scaling", "auc", out / "scaling_auc.csv", None)
    (out / "config.yaml").write_text(dump(cfg))


HANDLERS = {
    "prepare": cmd_prepare,
    "train-gen": cmd_train_gen,
    "generate": cmd_generate,
    "eval-gen": cmd_eval_gen,
    "classify": cmd_classify,
    "report": cmd_report,
}

REPORT_FILES = ("fid.csv", "recall.csv", "mixed_f1.csv",
                "mixed_auc.csv", "scaling_f1.csv", "scaling_auc.csv")
