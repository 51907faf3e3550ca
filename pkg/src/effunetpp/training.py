"""
Optimization protocol: decoder initialization, Adam with a step learning
rate schedule, frozen-encoder training, checkpointing and repeated runs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .architecture import ModelSpec, SegmentationModel, build_model
from .data import AnnotatedImage, AugmentationPolicy, epoch_stream
from .encoders import weight_checksum
from .exceptions import ConfigError, ContractError, NumericError
from .losses import LossConfig, combined_loss
from .metrics import evaluate_image, mean_record, one_hot

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 8
    lr: float = 1e-3
    lr_drops: Sequence[int] = (50, 100)
    lr_factor: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seeds: Sequence[int] = (0, 1, 2)
    device: str = "cpu"
    val_fraction: float = 0.1
    val_every: int = 1
    deterministic: bool = True
    early_stop_patience: Optional[int] = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("train.epochs and train.batch_size must be positive")
        self.lr_drops = [int(e) for e in self.lr_drops]
        if any(not 1 <= e <= self.epochs for e in self.lr_drops):
            raise ConfigError(f"train.lr_drops must lie within [1, {self.epochs}], got {self.lr_drops}")
        self.betas = tuple(float(b) for b in self.betas)
        self.seeds = [int(s) for s in self.seeds]
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        if not (self.lr > 0 and 0 < self.lr_factor <= 1):
            raise ConfigError("train.lr must be positive and train.lr_factor in (0, 1]")
        if self.val_every <= 0:
            raise ConfigError("train.val_every must be positive")
        if self.early_stop_patience is not None and self.early_stop_patience <= 0:
            raise ConfigError("train.early_stop_patience must be positive")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-indexed epoch; each drop takes effect at the start of its epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    n_drops = sum(1 for d in cfg.lr_drops if epoch >= d)
    return cfg.lr * cfg.lr_factor**n_drops


def init_decoder_weights(model: SegmentationModel, seed: int = 0):
    """Kaiming-normal hidden layers, Xavier-uniform head, BN scale 1 / shift 0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.decoder.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
        head = model.head
        fan_in = head.weight[0].numel()
        fan_out = head.weight.shape[0] * head.weight[0, 0].numel()
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        head.weight.copy_(torch.rand(head.weight.shape, generator=gen) * 2 * bound - bound)
        if head.bias is not None:
            head.bias.zero_()
    return model


def seed_everything(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def to_batch(images: np.ndarray, masks: Optional[np.ndarray], num_classes: int, device="cpu"):
    x = torch.from_numpy(np.ascontiguousarray(images)).float().div_(255.0).unsqueeze(1).to(device)
    if masks is None:
        return x, None
    g = one_hot(torch.from_numpy(masks.astype(np.int64)), num_classes).float().to(device)
    return x, g


@torch.no_grad()
def evaluate(model: SegmentationModel, samples: Sequence[AnnotatedImage], device="cpu", batch_size: int = 8):
    """Per-image metric records and their unweighted mean."""
    if not samples:
        raise ContractError("cannot evaluate an empty sample set")
    was_training = model.training
    model.eval()
    records = []
    n_classes = model.spec.num_classes
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x, g = to_batch(np.stack([s.image for s in chunk]), np.stack([s.mask for s in chunk]), n_classes, device)
        p = model.predict_proba(x).double()
        for b in range(len(chunk)):
            records.append(evaluate_image(g[b : b + 1].double(), p[b : b + 1]).as_record())
    model.train(was_training)
    return records, mean_record(records)


@dataclass
class RunRecord:
    seed: int
    train_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    val: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_gds: float = float("nan")
    test: Optional[Dict[str, float]] = None
    wall_time: float = 0.0
    encoder_checksum_before: str = ""
    encoder_checksum_after: str = ""
    epochs_run: int = 0
    early_stopped: bool = False
    checkpoint: Optional[str] = None

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        val_keys = list(self.val[0]) if self.val else []
        tmp = os.path.join(out_dir, f"epochs.csv.tmp{os.getpid()}")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss"] + [f"val_{k}" for k in val_keys])
            for e in range(self.epochs_run):
                val = self.val[e] if e < len(self.val) else {}
                w.writerow([e + 1, self.lr[e], self.train_loss[e]] + [val.get(k, "") for k in val_keys])
        os.replace(tmp, os.path.join(out_dir, "epochs.csv"))
        summary = {k: v for k, v in asdict(self).items() if k not in ("train_loss", "lr", "val")}
        _atomic_json(os.path.join(out_dir, "summary.json"), summary)


def _atomic_json(path, obj):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, default=float)
    os.replace(tmp, path)


def save_checkpoint(path, model: SegmentationModel, train_cfg: TrainConfig, loss_cfg: LossConfig, epoch: int, metrics: Dict):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_dict(),
        "train_config": train_cfg.to_dict(),
        "loss_config": loss_cfg.to_dict(),
        "epoch": epoch,
        "metrics": dict(metrics),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    tmp = f"{path}.tmp{os.getpid()}"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, spec: Optional[ModelSpec] = None):
    """Rebuild the model stored at ``path``; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    stored = ModelSpec.from_dict(payload["model_spec"])
    if spec is not None and spec.to_dict() != stored.to_dict():
        raise ContractError(f"{path}: checkpoint model spec does not match the requested spec")
    stored.pretrained = False  # weights come from the checkpoint
    model = build_model(stored)
    model.load_state_dict(payload["state_dict"])
    model.spec.pretrained = payload["model_spec"].get("pretrained", False)
    return model, payload


def split_validation(samples: Sequence[AnnotatedImage], fraction: float, seed: int):
    """Carve ``fraction`` of the samples for checkpoint selection.

    Returns ``(train, val)``. When the fraction rounds to zero images, the
    training set doubles as the validation set.
    """
    n_val = int(round(len(samples) * fraction))
    if n_val == 0 or n_val >= len(samples):
        return list(samples), list(samples)
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(samples))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def train(
    model: SegmentationModel,
    dataset: Sequence[AnnotatedImage],
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    policy: Optional[AugmentationPolicy] = None,
    seed: int = 0,
    out_dir: Optional[str] = None,
    val_set: Optional[Sequence[AnnotatedImage]] = None,
    test_set: Optional[Sequence[AnnotatedImage]] = None,
    init: bool = True,
) -> RunRecord:
    """Optimize ``combined_loss`` and keep the best-validation-GDS weights.

    The model is left holding the best checkpoint's weights. When
    ``out_dir`` is given, ``best.pt``, ``epochs.csv`` and ``summary.json``
    are written there.
    """
    loss_cfg = loss_cfg or LossConfig()
    policy = policy if policy is not None else AugmentationPolicy()
    device = torch.device(train_cfg.device)
    seed_everything(seed, train_cfg.deterministic)
    if init:
        init_decoder_weights(model, seed)
    model.to(device)
    if val_set is None:
        train_set, val_set = split_validation(dataset, train_cfg.val_fraction, seed)
    else:
        train_set = list(dataset)
    if not train_set:
        raise ContractError("training set is empty")

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=train_cfg.lr, betas=train_cfg.betas, weight_decay=train_cfg.weight_decay)
    record = RunRecord(seed=seed, encoder_checksum_before=weight_checksum(model.encoder))
    best_state = None
    since_best = 0
    t0 = time.time()
    n_classes = model.spec.num_classes
    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_at(epoch, train_cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        losses = []
        for images, masks in epoch_stream(train_set, policy, epoch, train_cfg.batch_size, global_seed=seed):
            x, g = to_batch(images, masks, n_classes, device)
            p = torch.softmax(model(x), dim=1)
            loss = combined_loss(g, p, loss_cfg)
            if not torch.isfinite(loss):
                bad = float(loss.detach())
                _dump_bad_batch(out_dir, epoch, images, masks, bad)
                raise NumericError(f"non-finite loss {bad} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        record.train_loss.append(float(np.mean(losses)))
        record.lr.append(lr)
        record.epochs_run = epoch
        if epoch % train_cfg.val_every == 0 or epoch == train_cfg.epochs:
            _, val = evaluate(model, val_set, device, train_cfg.batch_size)
            record.val.append(val)
            if best_state is None or val["gds"] > record.best_val_gds:
                record.best_val_gds = val["gds"]
                record.best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                since_best = 0
            else:
                since_best += 1
        else:
            record.val.append({})
        log.info("epoch %d lr %.1e loss %.4f val gds %s", epoch, lr, record.train_loss[-1], record.val[-1].get("gds"))
        if train_cfg.early_stop_patience and since_best >= train_cfg.early_stop_patience:
            record.early_stopped = True
            break
    model.load_state_dict(best_state)
    record.wall_time = time.time() - t0
    record.encoder_checksum_after = weight_checksum(model.encoder)
    if test_set:
        _, record.test = evaluate(model, test_set, device, train_cfg.batch_size)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "best.pt")
        save_checkpoint(ckpt, model, train_cfg, loss_cfg, record.best_epoch, {"val_gds": record.best_val_gds})
        record.checkpoint = ckpt
        record.write(out_dir)
    return record


def _dump_bad_batch(out_dir, epoch, images, masks, loss):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    np.savez_compressed(os.path.join(out_dir, f"nonfinite_epoch{epoch}.npz"), images=images, masks=masks, loss=loss)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation; a single value has std 0 (with a warning)."""
    values = [float(v) for v in values]
    if not values:
        raise ContractError("no values to summarize")
    if len(values) == 1:
        warnings.warn("single run: standard deviation reported as 0", RuntimeWarning, stacklevel=2)
    return float(np.mean(values)), float(np.std(values))


def aggregate_runs(records: Sequence[Dict[str, float]]) -> Dict[str, Tuple[float, float]]:
    """Per-metric ``(mean, std)`` over run-level metric dictionaries."""
    if not records:
        raise ContractError("no runs to aggregate")
    out = {}
    with warnings.catch_warnings():
        if len(records) == 1:
            warnings.warn("single run: standard deviation reported as 0", RuntimeWarning, stacklevel=2)
        warnings.simplefilter("ignore")
        for k in records[0]:
            out[k] = mean_std([r[k] for r in records])
    return out


def run_triplicate(
    spec: ModelSpec,
    dataset: Sequence[AnnotatedImage],
    test_set: Sequence[AnnotatedImage],
    train_cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    policy: Optional[AugmentationPolicy] = None,
    out_dir: Optional[str] = None,
):
    """Train and test once per seed in ``train_cfg.seeds``.

    Returns ``(summary, records)`` where ``summary`` maps each test metric
    to ``(mean, std)``.
    """
    if len(train_cfg.seeds) < 2:
        warnings.warn("fewer than two seeds; spread across runs is undefined", RuntimeWarning, stacklevel=2)
    records = []
    for seed in train_cfg.seeds:
        torch.manual_seed(seed)
        model = build_model(spec)
        run_dir = os.path.join(out_dir, f"seed{seed}") if out_dir else None
        records.append(train(model, dataset, train_cfg, loss_cfg, policy, seed, run_dir, test_set=test_set))
    return aggregate_runs([r.test for r in records]), records
