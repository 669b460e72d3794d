"""Two-tower reward model over (image, heatmap) pairs, trained on comparisons.

Each tower is a small conv stack; pooled features are concatenated into one
linear unit with a sigmoid, so scores live strictly inside (0, 1). Pairwise
preferences are fit with the Bradley-Terry link P(a > b) = e^ra/(e^ra + e^rb).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    ActivationMap,
    ProtoPNet,
    compute_all_latents,
    display_normalize,
    image_tensor,
)
from .data import TRAIN, DatasetManifest, LabeledImage
from .errors import ConfigurationError, ContractError, TrainingDiverged
from .feedback import ComparisonRecord, ItemKey

REWARD_CHECKPOINT_VERSION = 1
_SCORE_MARGIN = 1e-6  # keeps sigmoid output strictly inside (0, 1)


class _Tower(nn.Module):
    # GELU keeps the loss surface smooth so gradient checks against central
    # finite differences hold; ReLU kinks break them at FD step size
    def __init__(self, in_channels: int):
        super().__init__()
        self.stages = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.stages(x)).flatten(1)


class RewardNet(nn.Module):
    """Image tower + heatmap tower -> concatenated features -> linear -> sigmoid."""

    def __init__(self, image_size: int = 64):
        super().__init__()
        self.image_size = image_size
        self.image_tower = _Tower(3)
        self.map_tower = _Tower(1)
        self.fusion = nn.Linear(2 * 32 * 16, 1)

    def forward(self, images: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
        """(B,3,S,S) images and (B,1,S,S) display heatmaps -> scores (B,) in (0,1)."""
        if images.shape[-1] != self.image_size or maps.shape[-1] != self.image_size:
            raise ContractError(
                f"reward towers expect {self.image_size}x{self.image_size} inputs, "
                f"got image {tuple(images.shape[-2:])} map {tuple(maps.shape[-2:])}"
            )
        feats = torch.cat([self.image_tower(images), self.map_tower(maps)], dim=1)
        raw = torch.sigmoid(self.fusion(feats).squeeze(-1))
        return raw.clamp(_SCORE_MARGIN, 1.0 - _SCORE_MARGIN)


def new_reward_net(image_size: int = 64, seed: int = 0) -> RewardNet:
    torch.manual_seed(seed)
    return RewardNet(image_size)


def reward_forward(net: RewardNet, image: LabeledImage | np.ndarray, amap: ActivationMap) -> float:
    """Score one (image, heatmap) pair; deterministic, strictly inside (0,1)."""
    x = image_tensor(image).unsqueeze(0)
    m = torch.from_numpy(amap.display).float()[None, None]
    with torch.no_grad():
        return float(net(x, m)[0])


def pair_probability(r_left: float, r_right: float) -> float:
    """Bradley-Terry preference probability P(left > right)."""
    return 1.0 / (1.0 + math.exp(float(r_right) - float(r_left)))


def bt_loss_from_scores(
    s_left: torch.Tensor, s_right: torch.Tensor, c: torch.Tensor
) -> torch.Tensor:
    """Mean -log P(winner > loser); c=-1 means the left item won."""
    # -log sigmoid(s_winner - s_loser) == softplus(c * (s_left - s_right))
    return F.softplus(c.to(s_left.dtype) * (s_left - s_right)).mean()


def bt_loss(
    net: RewardNet,
    images_left: torch.Tensor,
    maps_left: torch.Tensor,
    images_right: torch.Tensor,
    maps_right: torch.Tensor,
    c: torch.Tensor,
) -> torch.Tensor:
    if not torch.all((c == -1) | (c == 1)):
        raise ContractError("comparison labels must be -1 or +1")
    return bt_loss_from_scores(net(images_left, maps_left), net(images_right, maps_right), c)


class ItemBank:
    """Stacked (image, display heatmap) tensors for a set of rated items."""

    def __init__(self, keys: list[ItemKey], images: torch.Tensor, maps: torch.Tensor):
        self.keys = keys
        self.index = {k: i for i, k in enumerate(keys)}
        self.images = images
        self.maps = maps

    @staticmethod
    def from_model(model: ProtoPNet, dataset: DatasetManifest, keys: list[ItemKey]) -> "ItemBank":
        keys = sorted(set(keys))
        image_ids = sorted({k[0] for k in keys})
        imgs = [dataset.image(i) for i in image_ids]
        latents = compute_all_latents(model, imgs)
        latent_of = {im.image_id: latents[n] for n, im in enumerate(imgs)}
        tensor_of = {im.image_id: image_tensor(im) for im in imgs}

        S = model.image_size
        images = torch.empty(len(keys), 3, S, S)
        maps = torch.empty(len(keys), 1, S, S)
        with torch.no_grad():
            for i, (image_id, proto_id) in enumerate(keys):
                lat = latent_of[image_id]  # (D, H, W)
                D, H, W = lat.shape
                flat = lat.permute(1, 2, 0).reshape(H * W, D)
                d2 = ((flat - model.prototypes[proto_id][None, :]) ** 2).sum(dim=1)
                raw = torch.log((d2 + 1.0) / (d2 + model.eps)).reshape(1, 1, H, W)
                up = F.interpolate(raw, size=(S, S), mode="bilinear", align_corners=True)
                images[i] = tensor_of[image_id]
                maps[i, 0] = torch.from_numpy(display_normalize(up[0, 0].numpy()))
        return ItemBank(keys, images, maps)

    def pair_indices(self, pairs: list[ComparisonRecord]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        li = torch.tensor([self.index[p.left] for p in pairs], dtype=torch.long)
        ri = torch.tensor([self.index[p.right] for p in pairs], dtype=torch.long)
        c = torch.tensor([p.c for p in pairs], dtype=torch.long)
        return li, ri, c

    def __len__(self) -> int:
        return len(self.keys)


@dataclass
class RewardTrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    batch_pairs: int = 4096
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr <= 0 or self.batch_pairs < 1:
            raise ConfigurationError("lr and batch_pairs must be positive")


def all_scores(net: RewardNet, bank: ItemBank, batch_size: int = 256) -> torch.Tensor:
    """Scores for every bank item, without gradients. Safe to call concurrently."""
    net.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(bank), batch_size):
            outs.append(net(bank.images[i : i + batch_size], bank.maps[i : i + batch_size]))
    return torch.cat(outs)


def ranking_accuracy(net: RewardNet, pairs: list[ComparisonRecord], bank: ItemBank) -> float:
    """Fraction of comparisons the scorer ranks the same way; P = 0.5 counts wrong."""
    if not pairs:
        raise ContractError("ranking_accuracy needs at least one comparison")
    s = all_scores(net, bank).double()
    li, ri, c = bank.pair_indices(pairs)
    p = torch.sigmoid(s[li] - s[ri])
    correct = ((p > 0.5) & (c == -1)) | ((p < 0.5) & (c == 1))
    return float(correct.double().mean())


def train_reward(
    train_pairs: list[ComparisonRecord],
    test_pairs: list[ComparisonRecord],
    bank: ItemBank,
    cfg: RewardTrainConfig,
) -> tuple[RewardNet, list[dict]]:
    """Minibatch Bradley-Terry training; per-epoch held-out ranking accuracy curve.

    Each step forwards only the unique items present in the pair minibatch.
    Deterministic given cfg.seed.
    """
    cfg.validate()
    if not train_pairs:
        raise ConfigurationError("no training comparisons")
    net = new_reward_net(bank.images.shape[-1], seed=cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    li_all, ri_all, c_all = bank.pair_indices(train_pairs)
    curve: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        perm = rng.permutation(len(train_pairs))
        total, n_batches = 0.0, 0
        for i in range(0, len(perm), cfg.batch_pairs):
            sel = torch.from_numpy(perm[i : i + cfg.batch_pairs].copy())
            li, ri, c = li_all[sel], ri_all[sel], c_all[sel]
            uniq, inverse = torch.unique(torch.cat([li, ri]), return_inverse=True)
            scores = net(bank.images[uniq], bank.maps[uniq])
            s_left = scores[inverse[: len(li)]]
            s_right = scores[inverse[len(li) :]]
            loss = bt_loss_from_scores(s_left, s_right, c)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite reward loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            n_batches += 1
        entry = {"epoch": epoch, "train_loss": round(total / n_batches, 6)}
        if test_pairs:
            entry["test_accuracy"] = round(ranking_accuracy(net, test_pairs, bank), 6)
        curve.append(entry)
    return net, curve


class PrototypeRewardScorer:
    """Cached scorer for r(image, prototype heatmap) over class-matched images.

    Backbone latents and image tensors are computed once; prototype vectors can
    vary per call, so candidate patches can be scored without touching the
    model. Scoring is read-only and safe for concurrent callers.
    """

    def __init__(self, net: RewardNet, model: ProtoPNet, dataset: DatasetManifest, split: str = TRAIN):
        self.net = net
        self.model = model
        self.eps = model.eps
        self.image_size = model.image_size
        images = dataset.train_images() if split == TRAIN else dataset.test_images()
        self.images = images
        self.latents = compute_all_latents(model, images)  # (N, D, H, W)
        self.tensors = torch.stack([image_tensor(im) for im in images])
        self.by_class: dict[int, list[int]] = {}
        for n, im in enumerate(images):
            self.by_class.setdefault(im.class_id, []).append(n)

    def class_indices(self, class_id: int) -> list[int]:
        idx = self.by_class.get(class_id, [])
        if not idx:
            raise ContractError(f"no images of class {class_id} to score against")
        return idx

    def display_maps(self, vector: torch.Tensor, image_indices: list[int]) -> torch.Tensor:
        """(n, 1, S, S) display-normalized heatmaps of one prototype vector."""
        lat = self.latents[image_indices]  # (n, D, H, W)
        n, D, H, W = lat.shape
        flat = lat.permute(0, 2, 3, 1).reshape(n, H * W, D)
        d2 = ((flat - vector[None, None, :]) ** 2).sum(dim=2)
        raw = torch.log((d2 + 1.0) / (d2 + self.eps)).reshape(n, 1, H, W)
        up = F.interpolate(raw, size=(self.image_size, self.image_size), mode="bilinear", align_corners=True)
        lo = up.amin(dim=(2, 3), keepdim=True)
        hi = up.amax(dim=(2, 3), keepdim=True)
        # flat maps (up to interpolation round-off) normalize to all-zeros
        nonflat = (hi - lo) > 1e-6 * hi.abs().clamp_min(1.0)
        disp = torch.where(nonflat, (up - lo) / (hi - lo).clamp_min(1e-12), torch.zeros_like(up))
        return disp

    def rewards(self, proto_index: int, vector: torch.Tensor | None = None) -> torch.Tensor:
        """Scores of one prototype (or candidate vector) on its class images."""
        class_id = int(self.model.proto_class[proto_index])
        idx = self.class_indices(class_id)
        if vector is None:
            vector = self.model.prototypes[proto_index].detach()
        with torch.no_grad():
            maps = self.display_maps(vector, idx)
            return self.net(self.tensors[idx], maps)

    def mean_reward(self, proto_index: int, vector: torch.Tensor | None = None) -> float:
        return float(self.rewards(proto_index, vector).mean())

    def all_mean_rewards(self) -> np.ndarray:
        return np.array([self.mean_reward(j) for j in range(self.model.num_prototypes)])


def prototype_mean_reward(
    net: RewardNet, model: ProtoPNet, dataset: DatasetManifest, proto_index: int, split: str = TRAIN
) -> float:
    """Mean reward of one prototype's heatmaps over its class-matched images."""
    return PrototypeRewardScorer(net, model, dataset, split).mean_reward(proto_index)


def save_reward_checkpoint(net: RewardNet, path, hparams: dict | None = None) -> None:
    torch.save(
        {
            "format_version": REWARD_CHECKPOINT_VERSION,
            "kind": "reward",
            "image_size": net.image_size,
            "state": net.state_dict(),
            "hparams": dict(hparams or {}),
        },
        path,
    )


def load_reward_checkpoint(path) -> RewardNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != REWARD_CHECKPOINT_VERSION or payload.get("kind") != "reward":
        raise ContractError(f"not a compatible reward checkpoint: {path}")
    net = RewardNet(payload["image_size"])
    net.load_state_dict(payload["state"])
    return net


def write_curve(curve: list[dict], path) -> None:
    with open(path, "w") as f:
        for entry in curve:
            f.write(json.dumps(entry) + "\n")
