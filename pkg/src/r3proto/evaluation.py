"""Evaluation metrics: test accuracy, mean reward + histogram, class mismatch,
ensembles, and persisted stage reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import ProtoPNet, activation_map, batch_tensors, nearest_image_distances
from .data import TEST, DatasetManifest, LabeledImage
from .errors import ContractError
from .reward import PrototypeRewardScorer, RewardNet

HISTOGRAM_BINS = 20
STAGES = ("base", "r2", "r3")


@dataclass
class EvalReport:
    model_id: str
    stage: str
    test_accuracy: float
    mean_reward: float
    mismatch_top5: float
    mismatch_top10: float
    reward_histogram: list[int]  # 20 equal bins over [0, 1]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "stage": self.stage,
            "test_accuracy": self.test_accuracy,
            "mean_reward": self.mean_reward,
            "mismatch": {"top5": self.mismatch_top5, "top10": self.mismatch_top10},
            "reward_histogram": self.reward_histogram,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            d["model_id"],
            d["stage"],
            d["test_accuracy"],
            d["mean_reward"],
            d["mismatch"]["top5"],
            d["mismatch"]["top10"],
            list(d["reward_histogram"]),
        )


def test_accuracy(model: ProtoPNet, dataset: DatasetManifest) -> float:
    """Fraction of argmax-correct test predictions; ties go to the lowest class id."""
    images = dataset.test_images()
    if not images:
        raise ContractError("empty test set")
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), 128):
            x, y = batch_tensors(images[i : i + 128])
            logits, _ = model(x)
            pred = np.argmax(logits.numpy(), axis=1)
            correct += int((pred == y.numpy()).sum())
    return correct / len(images)


def mean_test_reward(
    model: ProtoPNet, net: RewardNet, dataset: DatasetManifest
) -> tuple[float, list[int]]:
    """Mean reward over all class-matched (test image, prototype) pairs, plus a
    20-bin histogram of the same scores."""
    scorer = PrototypeRewardScorer(net, model, dataset, split=TEST)
    scores: list[float] = []
    for j in range(model.num_prototypes):
        scores.extend(scorer.rewards(j).tolist())
    counts, _ = np.histogram(scores, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return float(np.mean(scores)), counts.tolist()


def class_mismatch(model: ProtoPNet, dataset: DatasetManifest, L: int) -> float:
    """Mean over prototypes of other-class images among the L nearest training
    images (one nearest patch per image)."""
    if L < 1:
        raise ContractError(f"L must be >= 1, got {L}")
    train = dataset.train_images()
    if len(train) < L:
        raise ContractError(f"need at least {L} training images, have {len(train)}")
    dists, classes = nearest_image_distances(model, dataset)
    classes_t = torch.tensor(classes)
    counts = []
    for j in range(model.num_prototypes):
        order = torch.argsort(dists[j])[:L]
        counts.append(int((classes_t[order] != int(model.proto_class[j])).sum()))
    return float(np.mean(counts))


def prototype_peak_in_mask(model: ProtoPNet, dataset: DatasetManifest) -> float:
    """Fraction of prototypes whose peak activation pixel, on their own source
    image, falls inside the object mask. A direct spuriousness measure for
    synthetic datasets with ground-truth masks."""
    if not dataset.masks:
        raise ContractError("peak-in-mask needs a dataset with object masks")
    inside = 0
    for j in range(model.num_prototypes):
        src = model.sources[j]
        if src is None:
            raise ContractError(f"prototype {j} has no source; push before measuring")
        image_id = src[0]
        amap = activation_map(model, j, dataset.image(image_id))
        pr, pc = np.unravel_index(int(np.argmax(amap.upsampled)), amap.upsampled.shape)
        inside += bool(dataset.masks[image_id][pr, pc])
    return inside / model.num_prototypes


def ensemble_predict(models: list[ProtoPNet], image: LabeledImage) -> np.ndarray:
    """Unweighted mean of per-model logits."""
    if not models:
        raise ContractError("ensemble needs at least one model")
    K = models[0].num_classes
    if any(m.num_classes != K for m in models):
        raise ContractError("ensemble members disagree on the number of classes")
    x = batch_tensors([image])[0]
    logits = []
    with torch.no_grad():
        for m in models:
            m.eval()
            logits.append(m(x)[0][0].numpy())
    return np.mean(logits, axis=0)


def ensemble_accuracy(models: list[ProtoPNet], dataset: DatasetManifest) -> float:
    images = dataset.test_images()
    if not images:
        raise ContractError("empty test set")
    correct = 0
    for im in images:
        pred = int(np.argmax(ensemble_predict(models, im)))
        correct += pred == im.class_id
    return correct / len(images)


def report(
    model: ProtoPNet,
    stage: str,
    net: RewardNet,
    dataset: DatasetManifest,
    out_dir: Path | str,
    model_id: str,
) -> EvalReport:
    """Compute all metrics and persist the JSON report plus a histogram plot."""
    if stage not in STAGES:
        raise ContractError(f"stage must be one of {STAGES}, got {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acc = test_accuracy(model, dataset)
    mean_r, hist = mean_test_reward(model, net, dataset)
    rep = EvalReport(
        model_id=model_id,
        stage=stage,
        test_accuracy=acc,
        mean_reward=mean_r,
        mismatch_top5=class_mismatch(model, dataset, 5),
        mismatch_top10=class_mismatch(model, dataset, 10),
        reward_histogram=hist,
    )
    (out_dir / f"eval_{stage}.json").write_text(json.dumps(rep.to_dict(), indent=2))

    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(edges[:-1], hist, width=1.0 / HISTOGRAM_BINS, align="edge", edgecolor="black")
    ax.set_xlabel("reward")
    ax.set_ylabel("pairs")
    ax.set_title(f"{stage}: mean reward {mean_r:.3f}")
    fig.tight_layout()
    fig.savefig(out_dir / f"reward_hist_{stage}.png", dpi=120)
    plt.close(fig)
    return rep


def write_stage_table(reports: list[EvalReport], path: Path | str) -> None:
    """Stage-comparison CSV: one row per stage."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "test_accuracy", "mean_reward", "mismatch_top5", "mismatch_top10"])
        for rep in reports:
            writer.writerow(
                [rep.stage, rep.test_accuracy, rep.mean_reward, rep.mismatch_top5, rep.mismatch_top10]
            )
