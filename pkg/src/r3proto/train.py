"""Base training loop: cross-entropy + cluster/separation terms + head sparsity.

Staging: warm-up epochs update prototypes and head only, joint epochs update
everything, prototypes are projected onto training patches every push period
(and at the end), and each push is followed by a head-only refit. The reported
model is the best test-accuracy checkpoint among push points, so returned
prototypes always correspond to real patches.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import ProtoPNet, batch_tensors, push_prototypes
from .data import DatasetManifest
from .errors import ConfigurationError, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    warmup_epochs: int = 6
    lr_backbone: float = 3e-4
    lr_prototypes: float = 3e-3
    lr_head: float = 1e-3
    cluster_weight: float = 0.8
    separation_weight: float = 0.08
    l1_weight: float = 1e-4
    push_period: int = 10
    refit_epochs: int = 8
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.push_period < 1:
            raise ConfigurationError("push_period must be >= 1")
        for name in ("lr_backbone", "lr_prototypes", "lr_head", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class TrainResult:
    model: ProtoPNet
    log: list[dict] = field(default_factory=list)


def _off_class_mask(model: ProtoPNet) -> torch.Tensor:
    """(K, m) boolean mask of head weights connecting prototypes to other classes."""
    K, m = model.head.weight.shape
    mask = torch.ones(K, m, dtype=torch.bool)
    mask[model.proto_class, torch.arange(m)] = False
    return mask


def training_loss(
    model: ProtoPNet,
    x: torch.Tensor,
    y: torch.Tensor,
    cluster_weight: float,
    separation_weight: float,
    l1_weight: float,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total loss and its parts for one batch.

    total = CE + w_clst * mean_i min_{same-class p} min_patch d^2
               - w_sep  * mean_i min_{other-class p} min_patch d^2
               + w_l1   * |off-class head weights|_1
    """
    if x.shape[0] == 0:
        raise ConfigurationError("empty batch")
    latents = model.backbone(x)
    d2 = model.squared_distances(latents)  # (B, m, H, W)
    d2_min = d2.amin(dim=(2, 3))  # (B, m)
    sims = model.similarity_from_d2(d2).amax(dim=(2, 3))
    logits = model.head(sims)
    ce = F.cross_entropy(logits, y)

    same = model.proto_class[None, :] == y[:, None]  # (B, m)
    big = torch.tensor(float("inf"))
    cluster = torch.where(same, d2_min, big).amin(dim=1).mean()
    separation = torch.where(~same, d2_min, big).amin(dim=1).mean()
    l1 = model.head.weight[_off_class_mask(model)].abs().sum()

    total = (
        ce
        + cluster_weight * cluster
        - separation_weight * separation
        + l1_weight * l1
    )
    parts = {
        "ce": float(ce.detach()),
        "cluster": float(cluster.detach()),
        "separation": float(separation.detach()),
        "l1": float(l1.detach()),
    }
    return total, parts


def evaluate_accuracy(model: ProtoPNet, dataset: DatasetManifest, split: str) -> float:
    images = dataset.train_images() if split == "train" else dataset.test_images()
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), 128):
            x, y = batch_tensors(images[i : i + 128])
            logits, _ = model(x)
            # ties broken toward the lowest class id
            pred = np.argmax(logits.numpy(), axis=1)
            correct += int((pred == y.numpy()).sum())
    return correct / len(images)


def _head_refit(model: ProtoPNet, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig) -> None:
    """Convex last-layer refit with the L1 term, everything else frozen."""
    model.eval()
    with torch.no_grad():
        latents = model.backbone(x)
        sims = model.similarity_from_d2(model.squared_distances(latents)).amax(dim=(2, 3))
    opt = torch.optim.Adam([model.head.weight], lr=cfg.lr_head)
    off = _off_class_mask(model)
    for _ in range(cfg.refit_epochs):
        perm = torch.randperm(sims.shape[0])
        for i in range(0, sims.shape[0], cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            logits = model.head(sims[idx])
            loss = F.cross_entropy(logits, y[idx]) + cfg.l1_weight * model.head.weight[off].abs().sum()
            opt.zero_grad()
            loss.backward()
            opt.step()


def train(model: ProtoPNet, dataset: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    """Staged training; deterministic given cfg.seed. Returns the best push-point
    checkpoint and a per-epoch metric log."""
    cfg.validate()
    torch.manual_seed(cfg.seed)

    metrics: list[dict] = []
    if cfg.epochs == 0:
        push_prototypes(model, dataset)
        return TrainResult(model, metrics)

    train_images = dataset.train_images()
    x_all, y_all = batch_tensors(train_images)
    order_rng = np.random.default_rng(cfg.seed)

    param_groups = [
        {"params": model.backbone.parameters(), "lr": cfg.lr_backbone},
        {"params": [model.prototypes], "lr": cfg.lr_prototypes},
        {"params": [model.head.weight], "lr": cfg.lr_head},
    ]
    opt = torch.optim.Adam(param_groups)

    best_state: dict | None = None
    best_sources: list | None = None
    best_acc = -1.0

    for epoch in range(1, cfg.epochs + 1):
        warmup = epoch <= cfg.warmup_epochs
        for p in model.backbone.parameters():
            p.requires_grad_(not warmup)
        model.train()

        perm = order_rng.permutation(len(train_images))
        sums = {"total": 0.0, "ce": 0.0, "cluster": 0.0, "separation": 0.0, "l1": 0.0}
        n_batches = 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[i : i + cfg.batch_size].copy())
            total, parts = training_loss(
                model,
                x_all[idx],
                y_all[idx],
                cfg.cluster_weight,
                cfg.separation_weight,
                cfg.l1_weight,
            )
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (parts: {parts})"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            with torch.no_grad():
                model.prototypes.clamp_(0.0, 1.0)
            sums["total"] += float(total.detach())
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
        # prototype vectors moved this epoch, so any projection is stale
        model.sources = [None] * model.num_prototypes

        entry = {
            "epoch": epoch,
            "stage": "warmup" if warmup else "joint",
            **{k: round(v / n_batches, 6) for k, v in sums.items()},
        }

        if epoch % cfg.push_period == 0 or epoch == cfg.epochs:
            push_prototypes(model, dataset)
            _head_refit(model, x_all, y_all, cfg)
            entry["stage"] = "push"
            test_acc = evaluate_accuracy(model, dataset, "test")
            train_acc = evaluate_accuracy(model, dataset, "train")
            entry["train_acc"] = round(train_acc, 6)
            entry["test_acc"] = round(test_acc, 6)
            if test_acc > best_acc:
                best_acc = test_acc
                best_state = copy.deepcopy(model.state_dict())
                best_sources = list(model.sources)
        metrics.append(entry)

    assert best_state is not None
    model.load_state_dict(best_state)
    model.sources = list(best_sources or [])
    log.info("training done: best push-point test accuracy %.4f", best_acc)
    return TrainResult(model, metrics)


def write_metrics(metrics: list[dict], path) -> None:
    """Line-delimited JSON metric log."""
    with open(path, "w") as f:
        for entry in metrics:
            f.write(json.dumps(entry) + "\n")
