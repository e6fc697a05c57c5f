"""Training and fine-tuning of the sign classifier.

The regime: a residual convolutional backbone (depth-50 by default) with a
linear head, optimized with AdamW for 30 epochs at batch size 64, learning
rate 1e-3 decayed by a closed-form cosine schedule to 1e-5, weight decay
1e-5, geometric augmentations on. The fine-tune stage continues training
with augmentation disabled and the learning rate decaying 5e-4 -> 1e-7.

Backbone weights start from general-image pretrained parameters when they can
be obtained, random initialization otherwise; the report records which path
ran.
"""

from __future__ import annotations

import copy
import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torchvision
from torch import nn


from .augment import DEFAULT_MEAN, DEFAULT_STD, AugmentPolicy, disabled_policy, prepare_eval, prepare_train
from .corpus import CorpusManifest, DatasetSplit
from .dataset import CropSample, load_crops

CHECKPOINT_FORMAT_VERSION = 1

# backbone tag -> (constructor, pretrained weights enum, penultimate feature dim)
BACKBONES = {
    "resnet50": (torchvision.models.resnet50, "ResNet50_Weights", 2048),
    "resnet18": (torchvision.models.resnet18, "ResNet18_Weights", 512),
    "resnext50": (torchvision.models.resnext50_32x4d, "ResNeXt50_32X4D_Weights", 2048),
}


class TrainerError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-5
    backbone: str = "resnet50"
    pretrained: str = "auto"  # auto | always | never
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    norm_mean: tuple[float, float, float] = DEFAULT_MEAN
    norm_std: tuple[float, float, float] = DEFAULT_STD
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.lr_min <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive and weight_decay non-negative")
        if self.lr_min > self.lr:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr {self.lr}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone '{self.backbone}' (supported: {', '.join(BACKBONES)})")
        if self.pretrained not in ("auto", "always", "never"):
            raise ValueError(f"pretrained must be auto/always/never, got '{self.pretrained}'")
        self.augment.validate()

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_min": self.lr_min,
            "weight_decay": self.weight_decay,
            "backbone": self.backbone,
            "pretrained": self.pretrained,
            "augment": self.augment.to_dict(),
            "norm_mean": list(self.norm_mean),
            "norm_std": list(self.norm_std),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        cfg = cls(
            epochs=int(raw.get("epochs", 30)),
            batch_size=int(raw.get("batch_size", 64)),
            lr=float(raw.get("lr", 1e-3)),
            lr_min=float(raw.get("lr_min", 1e-5)),
            weight_decay=float(raw.get("weight_decay", 1e-5)),
            backbone=str(raw.get("backbone", "resnet50")),
            pretrained=str(raw.get("pretrained", "auto")),
            augment=AugmentPolicy.from_dict(raw.get("augment", {})),
            norm_mean=tuple(raw.get("norm_mean", DEFAULT_MEAN)),
            norm_std=tuple(raw.get("norm_std", DEFAULT_STD)),
            seed=int(raw.get("seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass
class FineTuneConfig:
    lr_start: float = 5e-4
    lr_end: float = 1e-7
    epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_end >= self.lr_start:
            raise ValueError(f"lr_end {self.lr_end} must be below lr_start {self.lr_start}")

    def to_dict(self) -> dict:
        return {
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FineTuneConfig":
        cfg = cls(
            lr_start=float(raw.get("lr_start", 5e-4)),
            lr_end=float(raw.get("lr_end", 1e-7)),
            epochs=int(raw.get("epochs", 10)),
            batch_size=int(raw.get("batch_size", 64)),
            weight_decay=float(raw.get("weight_decay", 1e-5)),
            seed=int(raw.get("seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float  # running top-1 over the epoch's (augmented) batches


@dataclass
class TrainReport:
    stage: str  # "train" or "fine_tune"
    config: dict
    seed: int
    pretrained: bool
    visualization: str
    n_train: int
    n_test: int
    epoch_stats: list[EpochStats]
    lr_trace: list[float]
    final_train_top1: float  # eval-mode accuracy on the train crops
    final_test_top1: float
    final_test_top5: float
    wall_seconds: float
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "config": self.config,
            "seed": self.seed,
            "pretrained": self.pretrained,
            "visualization": self.visualization,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "epochs": [
                {"epoch": e.epoch, "lr": e.lr, "loss": e.loss, "accuracy": e.accuracy}
                for e in self.epoch_stats
            ],
            "lr_trace": self.lr_trace,
            "final_train_top1": self.final_train_top1,
            "final_test_top1": self.final_test_top1,
            "final_test_top5": self.final_test_top5,
            "wall_seconds": self.wall_seconds,
            "checkpoint_path": self.checkpoint_path,
        }


def vocabulary_fingerprint(classes: Sequence[str]) -> str:
    digest = hashlib.sha256("\n".join(classes).encode("utf-8"))
    return digest.hexdigest()


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Closed-form cosine decay hitting lr_max at epoch 0 and lr_min at the
    final epoch."""
    if total_epochs <= 1:
        return lr_max
    t = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class ModelHandle:
    """A trained (or loadable) classifier bound to a class vocabulary."""

    def __init__(
        self,
        network: nn.Module,
        backbone: str,
        classes: Sequence[str],
        pretrained: bool,
        norm_mean=DEFAULT_MEAN,
        norm_std=DEFAULT_STD,
        train_meta: dict | None = None,
    ) -> None:
        self.network = network
        self.backbone = backbone
        self.classes = tuple(classes)
        self.pretrained = pretrained
        self.feature_dim = BACKBONES[backbone][2]
        self.fingerprint = vocabulary_fingerprint(self.classes)
        self.norm_mean = tuple(norm_mean)
        self.norm_std = tuple(norm_std)
        self.train_meta = dict(train_meta or {})

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def _as_batch(self, batch) -> torch.Tensor:
        if isinstance(batch, np.ndarray):
            batch = torch.from_numpy(batch)
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected Bx3xHxW batch, got shape {tuple(batch.shape)}")
        return batch.float()

    @torch.no_grad()
    def predict_logits(self, batch) -> np.ndarray:
        self.network.eval()
        return self.network(self._as_batch(batch)).numpy()

    @torch.no_grad()
    def predict_proba(self, batch) -> np.ndarray:
        return softmax(self.predict_logits(batch))

    @torch.no_grad()
    def extract_features(self, batch) -> np.ndarray:
        self.network.eval()
        return _backbone_features(self.network, self._as_batch(batch)).numpy()

    def prepare(self, pixels: np.ndarray) -> torch.Tensor:
        """Eval-time preparation with this model's normalization statistics."""
        return prepare_eval(pixels, self.norm_mean, self.norm_std)


def _backbone_features(network: nn.Module, x: torch.Tensor) -> torch.Tensor:
    # torchvision residual nets share this layout; everything up to the head.
    x = network.conv1(x)
    x = network.bn1(x)
    x = network.relu(x)
    x = network.maxpool(x)
    x = network.layer1(x)
    x = network.layer2(x)
    x = network.layer3(x)
    x = network.layer4(x)
    x = network.avgpool(x)
    return torch.flatten(x, 1)


def build_model(
    backbone: str,
    classes: Sequence[str],
    pretrained: str = "auto",
    seed: int = 0,
    norm_mean=DEFAULT_MEAN,
    norm_std=DEFAULT_STD,
) -> ModelHandle:
    if backbone not in BACKBONES:
        raise TrainerError(f"unknown backbone '{backbone}'")
    ctor, weights_name, _ = BACKBONES[backbone]
    torch.manual_seed(seed)
    used_pretrained = False
    network = None
    if pretrained in ("auto", "always"):
        try:
            weights = getattr(torchvision.models, weights_name).DEFAULT
            network = ctor(weights=weights)
            used_pretrained = True
        except Exception as exc:
            if pretrained == "always":
                raise TrainerError(f"pretrained weights for {backbone} unavailable: {exc}") from exc
            network = None
    if network is None:
        network = ctor(weights=None)
    in_features = network.fc.in_features
    network.fc = nn.Linear(in_features, len(classes))
    return ModelHandle(
        network,
        backbone=backbone,
        classes=classes,
        pretrained=used_pretrained,
        norm_mean=norm_mean,
        norm_std=norm_std,
    )


def _restrict_ids(manifest: CorpusManifest, ids: Sequence[str]) -> list[str]:
    known = {a.id for a in manifest.annotations}
    return [i for i in ids if i in known]


def _batches(n: int, batch_size: int) -> list[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _run_epochs(
    model: ModelHandle,
    crops: list[CropSample],
    policy: AugmentPolicy,
    epochs: int,
    batch_size: int,
    weight_decay: float,
    lr_for_epoch: Callable[[int], float],
    seed: int,
    log: Callable[[str], None] | None = None,
) -> tuple[list[EpochStats], list[float]]:
    network = model.network
    network.train()
    optimizer = torch.optim.AdamW(network.parameters(), lr=lr_for_epoch(0), weight_decay=weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    labels = torch.tensor([c.label for c in crops], dtype=torch.long)

    stats: list[EpochStats] = []
    lr_trace: list[float] = []
    for epoch in range(epochs):
        lr = lr_for_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        lr_trace.append(optimizer.param_groups[0]["lr"])

        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(crops))
        total_loss = 0.0
        total_correct = 0
        for batch in _batches(len(crops), batch_size):
            idx = order[batch]
            tensors = [
                prepare_train(
                    crops[i].pixels,
                    policy,
                    np.random.default_rng(np.random.SeedSequence([seed, epoch, int(i)])),
                    model.norm_mean,
                    model.norm_std,
                )
                for i in idx
            ]
            inputs = torch.stack(tensors)
            targets = labels[idx]
            optimizer.zero_grad()
            logits = network(inputs)
            loss = loss_fn(logits, targets)
            loss.backward()
            optimizer.step()
            total_loss += float(loss.item()) * len(idx)
            total_correct += int((logits.argmax(dim=1) == targets).sum().item())
        epoch_loss = total_loss / len(crops)
        epoch_acc = total_correct / len(crops)
        stats.append(EpochStats(epoch=epoch, lr=lr, loss=epoch_loss, accuracy=epoch_acc))
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.3e}  loss {epoch_loss:.4f}  acc {epoch_acc:.3f}")
    network.eval()
    return stats, lr_trace


@torch.no_grad()
def _eval_accuracy(model: ModelHandle, crops: list[CropSample], batch_size: int) -> tuple[float, float]:
    """Eval-mode (top1, top5) over crops; top5 capped at n_classes."""
    from .evaluator import top_k_hits  # local import keeps evaluator free to stay torch-agnostic

    if not crops:
        return float("nan"), float("nan")
    hits1 = 0
    hits5 = 0
    k5 = min(5, model.n_classes)
    for batch in _batches(len(crops), batch_size):
        chunk = crops[batch]
        inputs = torch.stack([model.prepare(c.pixels) for c in chunk])
        logits = model.predict_logits(inputs)
        for row, crop in zip(logits, chunk):
            hits1 += top_k_hits(row, crop.label, 1)
            hits5 += top_k_hits(row, crop.label, k5)
    return hits1 / len(crops), hits5 / len(crops)


def train(
    manifest: CorpusManifest,
    split: DatasetSplit,
    visualization: str,
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[ModelHandle, TrainReport]:
    """Train a classifier on the split's train set with augmentation."""
    config.validate()
    start = time.time()
    train_ids = _restrict_ids(manifest, split.train_ids)
    test_ids = _restrict_ids(manifest, split.test_ids)
    if not train_ids:
        raise TrainerError("empty train set")

    train_crops = load_crops(manifest, train_ids, visualization)
    test_crops = load_crops(manifest, test_ids, visualization)

    model = build_model(
        config.backbone,
        manifest.classes,
        pretrained=config.pretrained,
        seed=config.seed,
        norm_mean=config.norm_mean,
        norm_std=config.norm_std,
    )
    torch.manual_seed(config.seed)
    stats, lr_trace = _run_epochs(
        model,
        train_crops,
        policy=config.augment,
        epochs=config.epochs,
        batch_size=config.batch_size,
        weight_decay=config.weight_decay,
        lr_for_epoch=lambda e: cosine_lr(e, config.epochs, config.lr, config.lr_min),
        seed=config.seed,
        log=log,
    )
    train_top1, _ = _eval_accuracy(model, train_crops, config.batch_size)
    test_top1, test_top5 = _eval_accuracy(model, test_crops, config.batch_size)

    proveniences = sorted({c.provenience for c in train_crops})
    model.train_meta = {
        "visualization": visualization,
        "proveniences": proveniences,
        "stage": "train",
        "config": config.to_dict(),
    }
    report = TrainReport(
        stage="train",
        config=config.to_dict(),
        seed=config.seed,
        pretrained=model.pretrained,
        visualization=visualization,
        n_train=len(train_crops),
        n_test=len(test_crops),
        epoch_stats=stats,
        lr_trace=lr_trace,
        final_train_top1=train_top1,
        final_test_top1=test_top1,
        final_test_top5=test_top5,
        wall_seconds=time.time() - start,
    )
    return model, report


def fine_tune(
    model: ModelHandle,
    manifest: CorpusManifest,
    split: DatasetSplit,
    visualization: str,
    config: FineTuneConfig,
    proveniences: Sequence[str] | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[ModelHandle, TrainReport]:
    """Continue training with augmentation off and a lower, decaying rate.

    Restricting to a provenience subset aligns the training distribution with
    that subset's test data; the base model is left untouched.
    """
    config.validate()
    if tuple(manifest.classes) != model.classes:
        raise TrainerError(
            "vocabulary mismatch: the manifest's class list differs from the model's "
            f"({len(manifest.classes)} vs {model.n_classes} classes)"
        )
    start = time.time()

    view = manifest
    if proveniences is not None:
        from .corpus import filter_manifest

        view = filter_manifest(manifest, proveniences=proveniences, visualization=visualization)
    train_ids = _restrict_ids(view, split.train_ids)
    test_ids = _restrict_ids(view, split.test_ids)
    if not train_ids:
        raise TrainerError("empty fine-tune train set")

    train_crops = load_crops(view, train_ids, visualization)
    test_crops = load_crops(view, test_ids, visualization)

    tuned = ModelHandle(
        copy.deepcopy(model.network),
        backbone=model.backbone,
        classes=model.classes,
        pretrained=model.pretrained,
        norm_mean=model.norm_mean,
        norm_std=model.norm_std,
        train_meta=dict(model.train_meta),
    )
    torch.manual_seed(config.seed)
    stats, lr_trace = _run_epochs(
        tuned,
        train_crops,
        policy=disabled_policy(),
        epochs=config.epochs,
        batch_size=config.batch_size,
        weight_decay=config.weight_decay,
        lr_for_epoch=lambda e: cosine_lr(e, config.epochs, config.lr_start, config.lr_end),
        seed=config.seed,
        log=log,
    )
    train_top1, _ = _eval_accuracy(tuned, train_crops, config.batch_size)
    test_top1, test_top5 = _eval_accuracy(tuned, test_crops, config.batch_size)

    tuned.train_meta.update(
        {
            "stage": "fine_tune",
            "fine_tune_config": config.to_dict(),
            "fine_tune_proveniences": sorted(proveniences) if proveniences is not None else None,
        }
    )
    report = TrainReport(
        stage="fine_tune",
        config=config.to_dict(),
        seed=config.seed,
        pretrained=tuned.pretrained,
        visualization=visualization,
        n_train=len(train_crops),
        n_test=len(test_crops),
        epoch_stats=stats,
        lr_trace=lr_trace,
        final_train_top1=train_top1,
        final_test_top1=test_top1,
        final_test_top5=test_top5,
        wall_seconds=time.time() - start,
    )
    return tuned, report


def save_checkpoint(model: ModelHandle, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": model.backbone,
        "classes": list(model.classes),
        "fingerprint": model.fingerprint,
        "pretrained": model.pretrained,
        "norm_mean": list(model.norm_mean),
        "norm_std": list(model.norm_std),
        "train_meta": model.train_meta,
        "state_dict": model.network.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_classes: Sequence[str] | None = None) -> ModelHandle:
    """Load a checkpoint, verifying format and vocabulary fingerprint."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    for key in ("format_version", "backbone", "classes", "fingerprint", "state_dict"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing '{key}'")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {payload['format_version']}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    classes = tuple(payload["classes"])
    if vocabulary_fingerprint(classes) != payload["fingerprint"]:
        raise CheckpointError(f"checkpoint {path} fingerprint does not match its class list")
    if expected_classes is not None and vocabulary_fingerprint(tuple(expected_classes)) != payload["fingerprint"]:
        raise CheckpointError(
            "vocabulary fingerprint mismatch: checkpoint was trained against a different class list"
        )
    backbone = payload["backbone"]
    if backbone not in BACKBONES:
        raise CheckpointError(f"checkpoint {path} uses unknown backbone '{backbone}'")
    ctor, _, _ = BACKBONES[backbone]
    network = ctor(weights=None)
    network.fc = nn.Linear(network.fc.in_features, len(classes))
    try:
        network.load_state_dict(payload["state_dict"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} state dict does not fit {backbone}: {exc}") from exc
    network.eval()
    return ModelHandle(
        network,
        backbone=backbone,
        classes=classes,
        pretrained=bool(payload.get("pretrained", False)),
        norm_mean=tuple(payload.get("norm_mean", DEFAULT_MEAN)),
        norm_std=tuple(payload.get("norm_std", DEFAULT_STD)),
        train_meta=dict(payload.get("train_meta", {})),
    )
