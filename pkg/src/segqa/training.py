"""Losses, the AdamW training loop with warmup + step decay, and split evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import ScoreTable
from .dataset import DatasetError, DatasetManifest, MissingLabelsError
from .metrics import MetricBundle, metric_bundle
from .model import FeatureStore, QualityModel, record_features

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass
class LossConfig:
    alpha: float = 0.5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: Optional[int] = None  # default 5% of max_steps
    decay_step_size: Optional[int] = None  # default 40% of max_steps
    decay_gamma: float = 0.5
    batch_size: int = 16
    max_steps: int = 2000
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the KL term needs a batch distribution)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    @property
    def warmup(self) -> int:
        return int(round(0.05 * self.max_steps)) if self.warmup_steps is None else int(self.warmup_steps)

    @property
    def decay_every(self) -> int:
        if self.decay_step_size is None:
            return max(1, int(round(0.4 * self.max_steps)))
        return max(1, int(self.decay_step_size))


# -- losses -----------------------------------------------------------------

def _as_tensors(S, Q):
    plain = not (isinstance(S, torch.Tensor) or isinstance(Q, torch.Tensor))
    if not isinstance(S, torch.Tensor):
        S = torch.tensor(np.asarray(S, dtype=np.float64))
    if not isinstance(Q, torch.Tensor):
        Q = torch.tensor(np.asarray(Q, dtype=np.float64), dtype=S.dtype)
    S = S.reshape(-1)
    Q = Q.reshape(-1)
    if S.shape != Q.shape:
        raise ValueError(f"length mismatch: {S.numel()} vs {Q.numel()}")
    if S.numel() == 0:
        raise ValueError("empty batch")
    return S, Q, plain


def _out(t: torch.Tensor, plain: bool):
    return float(t) if plain else t


def mse_loss(S, Q):
    """Mean squared error. Tensors in -> tensor out; arrays in -> float."""
    S, Q, plain = _as_tensors(S, Q)
    return _out(torch.mean((S - Q) ** 2), plain)


def kl_loss(S, Q, cfg: LossConfig = LossConfig()):
    """KL(P || Q') between epsilon-smoothed, batch-normalised score distributions."""
    S, Q, plain = _as_tensors(S, Q)
    if S.numel() < 2:
        raise ValueError("KL requires a batch")
    if bool((S < 0).any()) or bool((Q < 0).any()):
        raise ValueError("KL inputs must be non-negative")
    p = (S + cfg.epsilon) / (S + cfg.epsilon).sum()
    q = (Q + cfg.epsilon) / (Q + cfg.epsilon).sum()
    return _out(torch.sum(p * (torch.log(p) - torch.log(q))), plain)


def total_loss(S, Q, cfg: LossConfig = LossConfig()):
    S, Q, plain = _as_tensors(S, Q)
    mse = mse_loss(S, Q)
    if cfg.alpha == 0:
        return _out(mse, plain)
    return _out(mse + cfg.alpha * kl_loss(S, Q, cfg), plain)


# -- schedule -----------------------------------------------------------------

def lr_factor(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to 1, then multiply by gamma every decay_every steps."""
    w = cfg.warmup
    if step < w:
        return (step + 1) / (w + 1)
    return cfg.decay_gamma ** ((step - w) // cfg.decay_every)


def make_optimizer(model: QualityModel, cfg: TrainConfig):
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, cfg))
    return opt, sched


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    model: QualityModel
    curve: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.curve[-1]["total"] if self.curve else float("nan")


def _labels_for(records, method_id: str) -> np.ndarray:
    missing = [(r.patch_id, method_id) for r in records if method_id not in r.labels]
    if missing:
        raise MissingLabelsError(missing)
    return np.array([r.labels[method_id] for r in records], dtype=np.float64)


def gather_inputs(model: QualityModel, records, method_id: str, store: Optional[FeatureStore],
                  images: Optional[Mapping[str, np.ndarray]] = None):
    """Float32 (semantic, segmentation) tensors for records.

    With ``images`` and an attached encoder, semantic features come from the
    frozen encoder instead of feature files.
    """
    cfg = model.cfg
    use_encoder = images is not None and model.encoder is not None and cfg.use_semantic
    if use_encoder:
        sub = replace(cfg, use_semantic=False)
        _, seg = record_features(store, records, method_id, sub) if cfg.use_segmentation else (None, None)
        imgs = torch.as_tensor(np.stack([images[r.patch_id] for r in records]), dtype=torch.float32)
        sem_t = model.encode(imgs).float()
    else:
        if store is None:
            raise ValueError("a FeatureStore is required when no images/encoder are given")
        sem, seg = record_features(store, records, method_id, cfg)
        sem_t = torch.as_tensor(sem, dtype=torch.float32) if sem is not None else None
    seg_t = torch.as_tensor(seg, dtype=torch.float32) if seg is not None else None
    return sem_t, seg_t


def _index(t: Optional[torch.Tensor], idx):
    return None if t is None else t[idx]


def train(model: QualityModel, manifest: DatasetManifest, method_id: str,
          train_cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
          store: Optional[FeatureStore] = None, images: Optional[Mapping[str, np.ndarray]] = None,
          log_every: int = 0) -> TrainResult:
    """Mini-batch training on the manifest's train split for one method's OA labels."""
    records = manifest.split("train")
    if not records:
        raise DatasetError("train split is empty")
    y_all = torch.as_tensor(_labels_for(records, method_id), dtype=torch.float32)
    sem_all, seg_all = gather_inputs(model, records, method_id, store, images)

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    opt, sched = make_optimizer(model, train_cfg)
    n = len(records)
    bs = min(train_cfg.batch_size, n)
    if bs < 2:
        raise DatasetError("need at least 2 training records for a batch")

    model.train()
    curve: List[Dict[str, float]] = []
    order = rng.permutation(n)
    pos = 0
    for step in range(train_cfg.max_steps):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = torch.as_tensor(order[pos:pos + bs])
        pos += bs

        lr = opt.param_groups[0]["lr"]
        pred = model(_index(sem_all, idx), _index(seg_all, idx))
        target = y_all[idx]
        mse = mse_loss(target, pred)
        kl = kl_loss(target, pred, loss_cfg)
        loss = mse + loss_cfg.alpha * kl if loss_cfg.alpha else mse
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if train_cfg.grad_clip and train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), train_cfg.grad_clip)
        opt.step()
        sched.step()
        curve.append({"step": step, "lr": lr, "mse": mse.item(), "kl": kl.item(), "total": loss.item()})
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g loss %.5f", step, lr, float(loss))
    model.eval()
    return TrainResult(model, curve)


def write_loss_curve(curve: Sequence[Mapping[str, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "mse", "kl", "total"])
        for row in curve:
            w.writerow([row["step"], repr(row["lr"]), repr(row["mse"]), repr(row["kl"]), repr(row["total"])])


# -- evaluation --------------------------------------------------------------

@torch.no_grad()
def predict(model: QualityModel, records, method_id: str, store: Optional[FeatureStore] = None,
            images=None, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        sem, seg = gather_inputs(model, chunk, method_id, store, images)
        out.append(model(sem, seg).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_split(model: QualityModel, manifest: DatasetManifest, method_id: str, split: str,
                   store: Optional[FeatureStore] = None, images=None) -> Tuple[ScoreTable, MetricBundle]:
    """Eval-mode predictions for one split plus PLCC/SROCC/KROCC/RMSE against labels."""
    records = manifest.split(split)
    if not records:
        raise DatasetError(f"{split} split is empty")
    labels = _labels_for(records, method_id)
    pred = predict(model, records, method_id, store, images)
    table = ScoreTable([r.patch_id for r in records], [method_id], pred.reshape(-1, 1))
    return table, metric_bundle(pred, labels)
