"""Prototype-network forward path: backbone, similarity layer, head, push, maps.

The similarity between a latent patch z and a prototype p is
log((||z-p||^2 + 1) / (||z-p||^2 + eps)), strictly decreasing in the squared
distance and positive for eps < 1. Scores per prototype are max-pooled over
all spatial patches; a linear head maps scores to class logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, LabeledImage
from .errors import ConfigurationError, ContractError

CHECKPOINT_VERSION = 1


@dataclass
class Prototype:
    """Class-assigned latent vector; source is (image_id, row, col) once pushed."""

    prototype_id: int
    class_id: int
    vector: np.ndarray
    source: tuple[str, int, int] | None = None


@dataclass
class ActivationMap:
    """Similarity heatmap of one (image, prototype) pair.

    raw is on the latent grid; upsampled is bilinear at image resolution;
    display is upsampled min-max normalized to [0, 1] (all zeros when flat).
    """

    raw: np.ndarray
    upsampled: np.ndarray
    display: np.ndarray


class ConvBackbone(nn.Module):
    """Small convolutional feature extractor; final sigmoid keeps latents in (0,1).

    Three stride-2 stages and a 3x3 head conv: an SxS input yields an
    (S/8) x (S/8) x depth latent grid (8x8 for S=64).
    """

    def __init__(self, depth: int = 64):
        super().__init__()
        if depth < 8:
            raise ConfigurationError(f"backbone depth must be >= 8, got {depth}")
        self.depth = depth
        self.stages = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, depth, 3, stride=1, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class ProtoPNet(nn.Module):
    """Backbone + prototype similarity layer + linear head."""

    def __init__(
        self,
        num_classes: int,
        protos_per_class: int,
        depth: int = 64,
        image_size: int = 64,
        eps: float = 1e-4,
    ):
        super().__init__()
        if not 0.0 < eps < 1.0:
            raise ConfigurationError(f"eps must be in (0,1), got {eps}")
        # corner-aligned upsampling must sample every latent node exactly so
        # heatmap peaks stay in the peak latent cell: (S-1) % (S/8 - 1) == 0
        if image_size % 8 != 0 or (image_size - 1) % (image_size // 8 - 1) != 0:
            raise ConfigurationError(
                f"image_size {image_size} is incompatible with exact heatmap "
                "upsampling; use 64 (or 16)"
            )
        self.num_classes = num_classes
        self.protos_per_class = protos_per_class
        self.image_size = image_size
        self.eps = eps
        m = num_classes * protos_per_class
        self.backbone = ConvBackbone(depth)
        self.prototypes = nn.Parameter(torch.rand(m, depth))
        self.register_buffer(
            "proto_class",
            torch.arange(num_classes).repeat_interleave(protos_per_class),
        )
        self.head = nn.Linear(m, num_classes, bias=False)
        # class-connection init: +1 to the prototype's own class, -0.5 elsewhere
        with torch.no_grad():
            w = torch.full((num_classes, m), -0.5)
            w[self.proto_class, torch.arange(m)] = 1.0
            self.head.weight.copy_(w)
        # (image_id, row, col) per prototype once projected
        self.sources: list[tuple[str, int, int] | None] = [None] * m

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    def latent_size(self) -> int:
        return self.image_size // 8

    def squared_distances(self, latents: torch.Tensor) -> torch.Tensor:
        """||z - p||^2 for every patch and prototype.

        latents: (B, D, H, W) -> distances (B, m, H, W), clamped at 0 to
        absorb rounding noise.
        """
        B, D, H, W = latents.shape
        flat = latents.permute(0, 2, 3, 1).reshape(B, H * W, D)
        z2 = (flat**2).sum(dim=2, keepdim=True)  # (B, HW, 1)
        p2 = (self.prototypes**2).sum(dim=1)  # (m,)
        cross = flat @ self.prototypes.t()  # (B, HW, m)
        d2 = z2 + p2[None, None, :] - 2.0 * cross
        return d2.clamp_min(0.0).permute(0, 2, 1).reshape(B, -1, H, W)

    def similarity_from_d2(self, d2: torch.Tensor) -> torch.Tensor:
        return torch.log((d2 + 1.0) / (d2 + self.eps))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Images (B, 3, S, S) -> (logits (B, K), similarity scores (B, m))."""
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ContractError(
                f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}"
            )
        latents = self.backbone(x)
        d2 = self.squared_distances(latents)
        sims = self.similarity_from_d2(d2).amax(dim=(2, 3))
        logits = self.head(sims)
        return logits, sims

    def prototype_views(self) -> list[Prototype]:
        vecs = self.prototypes.detach().cpu().numpy()
        return [
            Prototype(j, int(self.proto_class[j]), vecs[j].copy(), self.sources[j])
            for j in range(self.num_prototypes)
        ]

    def clone(self) -> "ProtoPNet":
        return copy.deepcopy(self)


def new_model(
    num_classes: int,
    protos_per_class: int,
    depth: int = 64,
    image_size: int = 64,
    eps: float = 1e-4,
    seed: int = 0,
) -> ProtoPNet:
    """Seeded construction; uniform [0,1] prototype init, default conv init."""
    torch.manual_seed(seed)
    return ProtoPNet(num_classes, protos_per_class, depth, image_size, eps)


def image_tensor(image: LabeledImage | np.ndarray) -> torch.Tensor:
    """HWC float image -> contiguous (3, S, S) float32 tensor.

    Contiguity matters: non-contiguous inputs can take different kernels and
    round differently, breaking bit-identity between single and batched paths.
    """
    pixels = image.pixels if isinstance(image, LabeledImage) else image
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float().contiguous()


def batch_tensors(images: list[LabeledImage]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.stack([image_tensor(im) for im in images])
    y = torch.tensor([im.class_id for im in images], dtype=torch.long)
    return x, y


def similarity(patch: np.ndarray | torch.Tensor, vector: np.ndarray | torch.Tensor, eps: float) -> float:
    """log((d^2+1)/(d^2+eps)) for one patch/prototype pair."""
    if not 0.0 < eps < 1.0:
        raise ContractError(f"eps must be in (0,1), got {eps}")
    p = np.asarray(patch, dtype=np.float64).ravel()
    v = np.asarray(vector, dtype=np.float64).ravel()
    if not (np.isfinite(p).all() and np.isfinite(v).all()):
        raise ContractError("non-finite values in similarity inputs")
    if p.shape != v.shape:
        raise ContractError(f"patch/prototype length mismatch: {p.shape} vs {v.shape}")
    d2 = float(((p - v) ** 2).sum())
    return float(np.log((d2 + 1.0) / (d2 + eps)))


def backbone_forward(model: ProtoPNet, image: LabeledImage) -> torch.Tensor:
    """Latent grid (H, W, D) for one image; differentiable."""
    x = image_tensor(image)
    if x.shape[-1] != model.image_size or x.shape[-2] != model.image_size:
        raise ContractError(
            f"expected {model.image_size}x{model.image_size} image, got {tuple(x.shape[-2:])}"
        )
    latents = model.backbone(x.unsqueeze(0))[0]
    return latents.permute(1, 2, 0)


def prototype_layer_forward(
    grid: torch.Tensor, protos: list[Prototype], eps: float
) -> np.ndarray:
    """Max over patches of similarity, per prototype. grid: (H, W, D)."""
    if not 0.0 < eps < 1.0:
        raise ContractError(f"eps must be in (0,1), got {eps}")
    H, W, D = grid.shape
    flat = grid.detach().reshape(H * W, D).double()
    out = np.empty(len(protos))
    vecs = torch.stack([torch.as_tensor(p.vector, dtype=torch.float64) for p in protos])
    if vecs.shape[1] != D:
        raise ContractError(f"prototype length {vecs.shape[1]} does not match depth {D}")
    d2 = torch.cdist(flat, vecs) ** 2
    sims = torch.log((d2 + 1.0) / (d2 + eps))
    out[:] = sims.amax(dim=0).numpy()
    return out


def model_forward(model: ProtoPNet, image: LabeledImage) -> tuple[np.ndarray, np.ndarray]:
    """(logits, similarity scores) for one image."""
    with torch.no_grad():
        logits, sims = model(image_tensor(image).unsqueeze(0))
    return logits[0].numpy(), sims[0].numpy()


def upsample_bilinear(raw: np.ndarray | torch.Tensor, size: int) -> np.ndarray:
    """Bilinear upsampling with exact corner alignment."""
    t = torch.as_tensor(raw, dtype=torch.float32)[None, None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)
    return up[0, 0].numpy()


def display_normalize(upsampled: np.ndarray) -> np.ndarray:
    lo, hi = float(upsampled.min()), float(upsampled.max())
    # flat maps (up to interpolation round-off) normalize to all-zeros
    if hi - lo <= 1e-6 * max(1.0, abs(hi)):
        return np.zeros_like(upsampled)
    return (upsampled - lo) / (hi - lo)


def map_from_latents(
    latents: torch.Tensor, vector: torch.Tensor, eps: float, image_size: int
) -> ActivationMap:
    """Activation map from a precomputed latent grid. latents: (D, H, W)."""
    D, H, W = latents.shape
    flat = latents.permute(1, 2, 0).reshape(H * W, D)
    d2 = ((flat - vector[None, :]) ** 2).sum(dim=1)
    raw = torch.log((d2 + 1.0) / (d2 + eps)).reshape(H, W)
    raw_np = raw.detach().numpy().astype(np.float32)
    up = upsample_bilinear(raw_np, image_size)
    return ActivationMap(raw_np, up, display_normalize(up))


def activation_map(model: ProtoPNet, proto_index: int, image: LabeledImage) -> ActivationMap:
    """Raw latent-grid heatmap, bilinear upsample, and display-normalized form."""
    with torch.no_grad():
        latents = model.backbone(image_tensor(image).unsqueeze(0))[0]
        return map_from_latents(
            latents, model.prototypes[proto_index].detach(), model.eps, model.image_size
        )


def raw_cell_of_pixel(pixel: tuple[int, int], latent_size: int, image_size: int) -> tuple[int, int]:
    """Nearest latent cell for an upsampled-pixel position under corner-aligned scaling."""
    scale = (latent_size - 1) / (image_size - 1)
    return (int(round(pixel[0] * scale)), int(round(pixel[1] * scale)))


def compute_all_latents(
    model: ProtoPNet, images: list[LabeledImage], batch_size: int = 64
) -> torch.Tensor:
    """Latent grids (N, D, H, W) for a list of images, without gradients."""
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.stack([image_tensor(im) for im in images[i : i + batch_size]])
            outs.append(model.backbone(x))
    return torch.cat(outs) if outs else torch.empty(0)


def push_prototypes(model: ProtoPNet, dataset: DatasetManifest) -> list[Prototype]:
    """Project each prototype onto its nearest same-class training patch.

    Mutates the model in place (vectors become exact patch copies, sources are
    set) and returns the updated prototype views.
    """
    train = dataset.train_images()
    by_class: dict[int, list[LabeledImage]] = {}
    for im in train:
        by_class.setdefault(im.class_id, []).append(im)
    for k in range(model.num_classes):
        if not by_class.get(k):
            raise ContractError(f"class {k} has no training images to push onto")

    with torch.no_grad():
        for k, imgs in sorted(by_class.items()):
            latents = compute_all_latents(model, imgs)  # (N, D, H, W)
            N, D, H, W = latents.shape
            patches = latents.permute(0, 2, 3, 1).reshape(N * H * W, D)
            proto_idx = [
                j for j in range(model.num_prototypes) if int(model.proto_class[j]) == k
            ]
            vecs = model.prototypes[proto_idx]  # (mk, D)
            d2 = torch.cdist(vecs.double(), patches.double()) ** 2
            nearest = d2.argmin(dim=1)
            for row, j in enumerate(proto_idx):
                flat_idx = int(nearest[row])
                n, rem = divmod(flat_idx, H * W)
                r, c = divmod(rem, W)
                model.prototypes.data[j] = patches[flat_idx]
                model.sources[j] = (imgs[n].image_id, r, c)
    return model.prototype_views()


def nearest_image_distances(
    model: ProtoPNet, dataset: DatasetManifest
) -> tuple[torch.Tensor, list[int]]:
    """Per-(prototype, training image) minimum patch distance.

    Returns (distances (m, N), image class ids). The per-image minimum is the
    provenance unit for mismatch counting and pruning.
    """
    train = dataset.train_images()
    latents = compute_all_latents(model, train)
    N, D, H, W = latents.shape
    patches = latents.permute(0, 2, 3, 1).reshape(N, H * W, D).double()
    vecs = model.prototypes.detach().double()
    with torch.no_grad():
        d2 = torch.cdist(patches, vecs.unsqueeze(0).expand(N, -1, -1)) ** 2
        per_image = d2.amin(dim=1)  # (N, m)
    return per_image.t().contiguous(), [im.class_id for im in train]


def prune_prototypes(
    model: ProtoPNet, dataset: DatasetManifest, L: int, threshold: int
) -> list[Prototype]:
    """Baseline pruning: drop prototypes whose Top-L nearest training images
    include more than `threshold` images from other classes."""
    if L < 1:
        raise ConfigurationError(f"L must be >= 1, got {L}")
    dists, classes = nearest_image_distances(model, dataset)
    classes_t = torch.tensor(classes)
    survivors = []
    for proto in model.prototype_views():
        order = torch.argsort(dists[proto.prototype_id])[:L]
        mismatches = int((classes_t[order] != proto.class_id).sum())
        if mismatches <= threshold:
            survivors.append(proto)
    return survivors


def save_checkpoint(model: ProtoPNet, path, model_id: str, hparams: dict | None = None) -> None:
    """Single binary file with a versioned header; round-trips bit-exactly."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "protopnet",
        "model_id": model_id,
        "arch": {
            "num_classes": model.num_classes,
            "protos_per_class": model.protos_per_class,
            "depth": model.backbone.depth,
            "image_size": model.image_size,
            "eps": model.eps,
        },
        "state": model.state_dict(),
        "sources": model.sources,
        "hparams": dict(hparams or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ProtoPNet, dict]:
    """Load a checkpoint; returns (model, metadata with model_id/hparams)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "protopnet":
        raise ContractError(f"not a compatible model checkpoint: {path}")
    arch = payload["arch"]
    model = ProtoPNet(
        arch["num_classes"],
        arch["protos_per_class"],
        arch["depth"],
        arch["image_size"],
        arch["eps"],
    )
    model.load_state_dict(payload["state"])
    model.sources = list(payload["sources"])
    meta = {"model_id": payload["model_id"], "hparams": payload["hparams"]}
    return model, meta
