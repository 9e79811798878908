"""Joint optimisation of the denoiser, style encoder and prompt registry.

The objective is velocity MSE plus a weighted KL term pulling the style
posterior to the standard normal. The style encoder only receives gradient
through the reparameterized latent it hands the denoiser.
"""

from __future__ import annotations

import base64
import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch

from . import schedule as sch
from .checkpoint import load_archive, save_archive
from .dataprep import ImageSet
from .denoiser import DenoiserConfig
from .errors import ConfigurationError, NumericError
from .model import ClueModel
from .seeding import derive_seed
from .stylecodec import kl_to_standard_normal, sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_kl: float = 1e-3
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    max_steps: int = 2000
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"
    snapshot_every: int = 100

    def __post_init__(self):
        if self.lambda_kl < 0:
            raise ConfigurationError("train.lambda_kl", "must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("train.lr", "must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size", "must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("train.max_steps", "must be >= 0")

    def schedule(self) -> sch.DiffusionSchedule:
        return sch.make_schedule(self.T, self.beta_start, self.beta_end, self.schedule_kind)


@dataclass
class TrainRecord:
    step: int
    loss_total: float
    loss_denoise: float
    loss_kl: float


@dataclass
class LossTerms:
    total: torch.Tensor
    denoise: torch.Tensor
    kl: torch.Tensor


Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def compute_loss(
    model: ClueModel,
    x0: torch.Tensor,
    prompt_ids: torch.Tensor,
    sched: sch.DiffusionSchedule,
    lambda_kl: float,
    generator: torch.Generator | None = None,
    predictor: Optional[Predictor] = None,
) -> LossTerms:
    """One stochastic evaluation of the objective on a batch.

    ``predictor`` replaces the model's velocity head, e.g. with an oracle.
    """
    if x0.shape[0] == 0:
        raise ConfigurationError("batch", "empty batch")
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    eps_s = torch.randn((b, model.cfg.d_style), generator=generator)

    x_t = sch.q_sample(x0, t, eps, sched)
    v_t = sch.v_target(x0, eps, t, sched)
    c = model.prompt(prompt_ids)
    post = model.encode(x0, c)
    s = sample(post, eps_s)
    v_hat = (predictor or model.predict_v)(x_t, t, c, s)

    denoise = torch.mean((v_hat - v_t) ** 2)
    kl = kl_to_standard_normal(post).mean()
    total = denoise + lambda_kl * kl
    for name, term in (("denoise", denoise), ("kl", kl), ("total", total)):
        if not torch.isfinite(term):
            raise NumericError(f"non-finite {name} loss")
    return LossTerms(total, denoise, kl)


def _rng_state(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode()


def save_model(path, model: ClueModel, train_cfg: TrainConfig | None, step: int,
               generator: torch.Generator | None = None, extra: dict | None = None) -> str:
    meta = {
        "model": _model_cfg_dict(model.cfg),
        "train": asdict(train_cfg) if train_cfg else None,
        "step": step,
        "rng_state": _rng_state(generator) if generator is not None else None,
    }
    if extra:
        meta.update(extra)
    return save_archive(path, model.state_dict(), meta)


def _model_cfg_dict(cfg: DenoiserConfig) -> dict:
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    d["prompts"] = list(cfg.prompts)
    return d


def load_model(path) -> tuple[ClueModel, dict]:
    tensors, meta = load_archive(path)
    cfg = DenoiserConfig(**meta["model"])
    model = ClueModel(cfg)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


@dataclass
class TrainResult:
    model: ClueModel
    curve: list[TrainRecord] = field(default_factory=list)
    checkpoint: Path | None = None
    digest: str | None = None


def train(
    dataset: ImageSet,
    train_cfg: TrainConfig | None = None,
    model_cfg: DenoiserConfig | None = None,
    seed: int = 0,
    out_dir=None,
    progress: Callable[[TrainRecord], None] | None = None,
) -> TrainResult:
    """Fit a fresh model on ``dataset`` (uint8 images, class labels as prompt ids).

    Writes ``model.ckpt`` and ``curve.csv`` under ``out_dir`` when given.
    """
    cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or DenoiserConfig()
    present = set(dataset.labels.tolist())
    if len(dataset) == 0 or present != set(range(len(model_cfg.prompts))):
        raise ConfigurationError("data", f"training set must contain every class, got {sorted(present)}")
    sched = cfg.schedule()

    torch.manual_seed(derive_seed(seed, "trainer", "init"))
    model = ClueModel(model_cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(derive_seed(seed, "trainer", "stream"))

    x_all = dataset.to_tensor()
    y_all = torch.from_numpy(dataset.labels)
    curve: list[TrainRecord] = []
    snapshot = (0, copy.deepcopy(model.state_dict()))
    out_dir = Path(out_dir) if out_dir is not None else None

    for step in range(1, cfg.max_steps + 1):
        idx = torch.randint(0, len(dataset), (cfg.batch_size,), generator=g)
        try:
            terms = compute_loss(model, x_all[idx], y_all[idx], sched, cfg.lambda_kl, g)
        except NumericError:
            if out_dir is not None:
                model.load_state_dict(snapshot[1])
                save_model(out_dir / "last_good.ckpt", model, cfg, snapshot[0])
            log.error("non-finite loss at step %d; last good step %d", step, snapshot[0])
            raise
        opt.zero_grad(set_to_none=True)
        terms.total.backward()
        opt.step()
        rec = TrainRecord(step, terms.total.item(), terms.denoise.item(), terms.kl.item())
        curve.append(rec)
        if progress:
            progress(rec)
        if step % cfg.snapshot_every == 0:
            snapshot = (step, copy.deepcopy(model.state_dict()))

    model.eval()
    result = TrainResult(model, curve)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out_dir / "model.ckpt"
        result.digest = save_model(result.checkpoint, model, cfg, cfg.max_steps, g)
        write_curve(out_dir / "curve.csv", curve)
    return result


def write_curve(path, curve: list[TrainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "denoise", "kl"])
        for r in curve:
            w.writerow([r.step, repr(r.loss_total), repr(r.loss_denoise), repr(r.loss_kl)])


def read_curve(path) -> list[TrainRecord]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [
        TrainRecord(int(r["step"]), float(r["total"]), float(r["denoise"]), float(r["kl"]))
        for r in rows
    ]


def smoothed(values: list[float], window: int) -> float:
    """Mean of the last ``window`` values (the whole list if shorter)."""
    tail = values[-window:] if window < len(values) else values
    return math.fsum(tail) / len(tail)
