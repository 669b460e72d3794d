"""Synthetic shapes dataset, folder ingestion, and affine train-split augmentation.

Every class is a distinct (shape, color) signature rendered on randomized
textured backgrounds that are shared across classes, so background patches are
learnable but carry no label information. Ground-truth object masks ride along
with every synthetic image so automated raters can judge heatmaps.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, IngestionError

TRAIN = "train"
TEST = "test"

# shape kinds cycled over class ids
_SHAPES = ("circle", "square", "triangle", "diamond", "cross")

# mask area must stay inside this fraction band of the image area
_MIN_MASK_FRAC = 0.05
_MAX_MASK_FRAC = 0.60


@dataclass(frozen=True)
class LabeledImage:
    """One image with its class label and split assignment.

    pixels: (S, S, 3) float32 in [0, 1].
    """

    image_id: str
    pixels: np.ndarray
    class_id: int
    split: str


@dataclass(frozen=True)
class SyntheticSample:
    """A synthetic image paired with its ground-truth object mask."""

    base: LabeledImage
    object_mask: np.ndarray  # (S, S) bool, True on the foreground shape


@dataclass(frozen=True)
class Perturbation:
    """One augmentation descriptor: rotate (degrees), shear/skew (factor), flip."""

    kind: str
    amount: float = 0.0


# defaults per the fixed augmentation magnitudes: rotations +-15 deg,
# shear +-0.2, skew +-0.2 (flip available but not part of the default set)
DEFAULT_AUGMENTATION = (
    Perturbation("rotate", 15.0),
    Perturbation("rotate", -15.0),
    Perturbation("shear", 0.2),
    Perturbation("shear", -0.2),
    Perturbation("skew", 0.2),
    Perturbation("skew", -0.2),
)


@dataclass
class DatasetManifest:
    """Full dataset: images, class count, augmentation spec, optional masks."""

    num_classes: int
    images: list[LabeledImage]
    augmentation_spec: list[Perturbation] = field(default_factory=list)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def train_images(self) -> list[LabeledImage]:
        return [im for im in self.images if im.split == TRAIN]

    def test_images(self) -> list[LabeledImage]:
        return [im for im in self.images if im.split == TEST]

    def image(self, image_id: str) -> LabeledImage:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    def sample(self, image_id: str) -> SyntheticSample:
        """Image + mask view; only available for synthetic datasets."""
        if image_id not in self.masks:
            raise KeyError(f"no object mask stored for {image_id}")
        return SyntheticSample(self.image(image_id), self.masks[image_id])

    def image_size(self) -> int:
        return self.images[0].pixels.shape[0]


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check manifest invariants; raises ConfigurationError on violation."""
    seen: set[str] = set()
    per_class: dict[int, set[str]] = {}
    for im in manifest.images:
        if im.image_id in seen:
            raise ConfigurationError(f"duplicate image_id {im.image_id!r}")
        seen.add(im.image_id)
        if not 0 <= im.class_id < manifest.num_classes:
            raise ConfigurationError(
                f"class_id {im.class_id} out of range for K={manifest.num_classes}"
            )
        if im.split not in (TRAIN, TEST):
            raise ConfigurationError(f"unknown split {im.split!r}")
        if im.pixels.min() < 0.0 or im.pixels.max() > 1.0:
            raise ConfigurationError(f"pixels outside [0,1] in {im.image_id}")
        per_class.setdefault(im.class_id, set()).add(im.split)
    for k in range(manifest.num_classes):
        if per_class.get(k, set()) != {TRAIN, TEST}:
            raise ConfigurationError(f"class {k} lacks a train or test image")


def _shape_mask(kind: str, S: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.9 * r
    if kind == "triangle":
        # isoceles, apex up
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.62 * (dy + r))
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.25 * r
    if kind == "cross":
        arm = 0.42 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    """Distinct hue per class, fixed saturation/value."""
    hue = (class_id + 0.5) / num_classes
    return np.array(colorsys.hsv_to_rgb(hue, 0.95, 0.85), dtype=np.float64)


def _background(rng: np.random.Generator, S: int, palette: np.ndarray) -> np.ndarray:
    """Smooth gray noise, muted rectangles, and washed-out off-class color blobs.

    The same recipe serves every class, so background patches carry no label
    information; the colored blobs make backgrounds attractive to prototypes
    and genuinely confusable at classification time.
    """
    noise = rng.uniform(0.0, 1.0, size=(S, S))
    smooth = ndimage.gaussian_filter(noise, sigma=S / 16.0)
    lo, hi = smooth.min(), smooth.max()
    base = 0.30 + 0.35 * (smooth - lo) / max(hi - lo, 1e-12)
    img = np.repeat(base[:, :, None], 3, axis=2)
    for _ in range(int(rng.integers(2, 5))):
        h = int(rng.integers(S // 8, S // 3))
        w = int(rng.integers(S // 8, S // 3))
        top = int(rng.integers(0, S - h))
        left = int(rng.integers(0, S - w))
        tint = rng.uniform(0.35, 0.75) * np.ones(3)
        tint += rng.uniform(-0.05, 0.05, size=3)
        img[top : top + h, left : left + w] = 0.5 * img[top : top + h, left : left + w] + 0.5 * tint
    # distractor blobs drawn under the object: one gray, and with high
    # probability one washed-out blob in a random class hue
    if rng.uniform() < 0.5:
        blob = _shape_mask(
            "circle",
            S,
            rng.uniform(0.2 * S, 0.8 * S),
            rng.uniform(0.2 * S, 0.8 * S),
            S * rng.uniform(0.10, 0.16),
        )
        img[blob] = 0.82
    if rng.uniform() < 0.7:
        color = palette[int(rng.integers(len(palette)))]
        washed = 0.55 * color + 0.45 * 0.6  # desaturated off-class hue
        blob = _shape_mask(
            "circle",
            S,
            rng.uniform(0.15 * S, 0.85 * S),
            rng.uniform(0.15 * S, 0.85 * S),
            S * rng.uniform(0.08, 0.14),
        )
        img[blob] = washed
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(K: int, per_class: int, S: int, seed: int) -> DatasetManifest:
    """Render K shape/color classes on shared textured backgrounds.

    Deterministic in (K, per_class, S, seed). Every image gets an object mask
    covering exactly the rendered shape.
    """
    if K < 2:
        raise ConfigurationError(f"need K >= 2 classes, got {K}")
    if per_class < 2:
        raise ConfigurationError(f"need per_class >= 2, got {per_class}")
    if S < 32:
        raise ConfigurationError(f"need S >= 32, got {S}")

    rng = np.random.default_rng(seed)
    n_test = max(1, per_class // 5)
    n_train = per_class - n_test
    # distractor-blob hues sit halfway between adjacent class hues: confusable
    # with their neighbors but never equal to any class color
    palette = np.stack(
        [
            np.array(colorsys.hsv_to_rgb((k + 1.0) / K, 0.95, 0.85))
            for k in range(K)
        ]
    )

    images: list[LabeledImage] = []
    masks: dict[str, np.ndarray] = {}
    for k in range(K):
        kind = _SHAPES[k % len(_SHAPES)]
        for i in range(per_class):
            img = _background(rng, S, palette)
            r = S * rng.uniform(0.17, 0.26)
            cx = S / 2 + rng.uniform(-0.12, 0.12) * S
            cy = S / 2 + rng.uniform(-0.12, 0.12) * S
            mask = _shape_mask(kind, S, cx, cy, r)
            frac = mask.mean()
            if not (_MIN_MASK_FRAC <= frac <= _MAX_MASK_FRAC):
                raise ConfigurationError(
                    f"mask area fraction {frac:.3f} outside "
                    f"[{_MIN_MASK_FRAC}, {_MAX_MASK_FRAC}] for S={S}"
                )
            hue_jitter = rng.uniform(-0.02, 0.02)
            color = class_color((k + hue_jitter * K) % K, K)
            shade = 1.0 + rng.uniform(-0.12, 0.12, size=(S, S, 1))
            img[mask] = np.clip(color[None, :] * shade[mask], 0.0, 1.0)
            img *= rng.uniform(0.82, 1.08)
            img += rng.normal(0.0, 0.02, size=img.shape)
            img = np.clip(img, 0.0, 1.0)

            image_id = f"syn-{k:03d}-{i:03d}"
            split = TRAIN if i < n_train else TEST
            images.append(
                LabeledImage(image_id, img.astype(np.float32), k, split)
            )
            masks[image_id] = mask

    manifest = DatasetManifest(K, images, list(DEFAULT_AUGMENTATION), masks)
    validate_manifest(manifest)
    return manifest


def _affine_matrix(p: Perturbation, S: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-map matrix/offset for scipy affine_transform, centered on the image."""
    c = np.array([(S - 1) / 2.0, (S - 1) / 2.0])
    if p.kind == "rotate":
        t = math.radians(p.amount)
        fwd = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    elif p.kind == "shear":
        # shift columns proportionally to row index
        fwd = np.array([[1.0, 0.0], [p.amount, 1.0]])
    elif p.kind == "skew":
        # shift rows proportionally to column index
        fwd = np.array([[1.0, p.amount], [0.0, 1.0]])
    elif p.kind == "flip":
        fwd = np.array([[1.0, 0.0], [0.0, -1.0]])
    else:
        raise ConfigurationError(f"unknown perturbation kind {p.kind!r}")
    inv = np.linalg.inv(fwd)
    offset = c - inv @ c
    return inv, offset


def apply_perturbation(
    pixels: np.ndarray, mask: np.ndarray | None, p: Perturbation
) -> tuple[np.ndarray, np.ndarray | None]:
    """Warp image (bilinear, reflected borders) and mask (nearest) identically."""
    S = pixels.shape[0]
    matrix, offset = _affine_matrix(p, S)
    out = np.empty_like(pixels)
    for ch in range(pixels.shape[2]):
        out[:, :, ch] = ndimage.affine_transform(
            pixels[:, :, ch], matrix, offset=offset, order=1, mode="reflect"
        )
    out = np.clip(out, 0.0, 1.0)
    new_mask = None
    if mask is not None:
        warped = ndimage.affine_transform(
            mask.astype(np.float32), matrix, offset=offset, order=0, mode="constant", cval=0.0
        )
        new_mask = warped > 0.5
    return out.astype(np.float32), new_mask


def augment(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Enlarge the train split by one warped copy per perturbation descriptor.

    The test split and all labels are untouched. The seed is accepted for
    interface stability; the default descriptors are fixed-magnitude, so the
    result is already a pure function of the manifest.
    """
    del seed
    validate_manifest(manifest)
    new_images = list(manifest.images)
    new_masks = dict(manifest.masks)
    for im in manifest.images:
        if im.split != TRAIN:
            continue
        mask = manifest.masks.get(im.image_id)
        for idx, p in enumerate(manifest.augmentation_spec):
            pixels, warped_mask = apply_perturbation(im.pixels, mask, p)
            new_id = f"{im.image_id}+aug{idx}"
            new_images.append(LabeledImage(new_id, pixels, im.class_id, TRAIN))
            if warped_mask is not None:
                new_masks[new_id] = warped_mask
    return DatasetManifest(
        manifest.num_classes, new_images, list(manifest.augmentation_spec), new_masks
    )


def load_folder_dataset(root: Path | str, size: int = 64) -> DatasetManifest:
    """Ingest a folder-per-class image directory into a manifest.

    Class ids follow sorted folder names; within a class, files are sorted by
    name and the last max(1, n//5) become the test split.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root does not exist: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class folders under {root}")

    images: list[LabeledImage] = []
    for class_id, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.is_file())
        if not files:
            raise IngestionError(f"empty class folder: {d}")
        if len(files) < 2:
            raise IngestionError(f"class folder {d} needs >= 2 images for a train/test split")
        n_test = max(1, len(files) // 5)
        for i, f in enumerate(files):
            try:
                with Image.open(f) as img:
                    rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
            except Exception as exc:
                raise IngestionError(f"unreadable image file: {f}") from exc
            pixels = np.asarray(rgb, dtype=np.float32) / 255.0
            split = TEST if i >= len(files) - n_test else TRAIN
            images.append(LabeledImage(f"{d.name}/{f.name}", pixels, class_id, split))

    manifest = DatasetManifest(len(class_dirs), images)
    validate_manifest(manifest)
    return manifest


def save_dataset(manifest: DatasetManifest, out_dir: Path | str) -> Path:
    """Persist images/masks as PNGs plus a single JSON manifest document."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if manifest.masks:
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for im in manifest.images:
        safe = im.image_id.replace("/", "__")
        img_rel = f"images/{safe}.png"
        Image.fromarray(
            np.clip(np.round(im.pixels * 255.0), 0, 255).astype(np.uint8)
        ).save(out_dir / img_rel)
        entry = {
            "image_id": im.image_id,
            "path": img_rel,
            "class_id": im.class_id,
            "split": im.split,
        }
        mask = manifest.masks.get(im.image_id)
        if mask is not None:
            mask_rel = f"masks/{safe}.png"
            Image.fromarray((mask.astype(np.uint8) * 255)).save(out_dir / mask_rel)
            entry["mask_path"] = mask_rel
        entries.append(entry)
    doc = {
        "format_version": 1,
        "num_classes": manifest.num_classes,
        "augmentation_spec": [
            {"kind": p.kind, "amount": p.amount} for p in manifest.augmentation_spec
        ],
        "images": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_dataset(manifest_path: Path | str) -> DatasetManifest:
    """Load a dataset previously written by save_dataset."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    images: list[LabeledImage] = []
    masks: dict[str, np.ndarray] = {}
    for entry in doc["images"]:
        f = base / entry["path"]
        try:
            with Image.open(f) as img:
                pixels = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise IngestionError(f"unreadable image file: {f}") from exc
        images.append(
            LabeledImage(entry["image_id"], pixels, entry["class_id"], entry["split"])
        )
        if "mask_path" in entry:
            with Image.open(base / entry["mask_path"]) as m:
                masks[entry["image_id"]] = np.asarray(m.convert("L")) > 127
    spec = [Perturbation(d["kind"], d["amount"]) for d in doc.get("augmentation_spec", [])]
    manifest = DatasetManifest(doc["num_classes"], images, spec, masks)
    validate_manifest(manifest)
    return manifest
