"""Rating persistence, task queueing, induced pairwise comparisons, oracle rater.

Ratings are 1-5 judgments of one prototype's activation heatmap on one image.
Unequal-rating pairs of rated items form the comparison dataset used to train
the reward model; ties are never stored.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ActivationMap
from .data import SyntheticSample
from .errors import ContractError, DuplicateRatingError, ServiceError, ValidationError

ItemKey = tuple[str, int]  # (image_id, prototype_id)

# five-level rubric shown to raters; wording owned here so UIs stay in sync
RUBRIC: dict[int, str] = {
    5: "Activation sits almost entirely on the object and highlights one clear part.",
    4: "Activation is mostly on the object, with minor spill onto the background.",
    3: "Unclear: activation straddles the object and background with no dominant side.",
    2: "Activation is mostly on the background, with minor overlap of the object.",
    1: "Activation is almost entirely on the background or scattered over irrelevant regions.",
}


@dataclass(frozen=True)
class RatingRecord:
    rating_id: str
    image_id: str
    prototype_id: int
    model_id: str
    rating: int
    rater_id: str
    timestamp: float

    def key(self) -> tuple[str, int, str, str]:
        return (self.image_id, self.prototype_id, self.model_id, self.rater_id)


@dataclass(frozen=True)
class ComparisonRecord:
    """Pairwise preference between two rated items; c=-1 iff left rated higher."""

    left: ItemKey
    right: ItemKey
    c: int


@dataclass(frozen=True)
class RatingTask:
    task_id: str
    image_id: str
    prototype_id: int
    heatmap_ref: str
    rubric: dict[int, str]


def validate_rating(record: RatingRecord) -> None:
    if record.rating not in (1, 2, 3, 4, 5):
        raise ValidationError(f"rating must be an integer 1-5, got {record.rating!r}")
    if not record.image_id or not record.rater_id:
        raise ValidationError("image_id and rater_id must be non-empty")


class RatingStore:
    """Append-only line-delimited JSON store with a uniqueness check.

    add() is atomic: the duplicate check and the durable append happen inside
    one lock, and every accepted record is flushed and fsynced before the ack.
    """

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: list[RatingRecord] = []
        self._keys: set[tuple] = set()
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = RatingRecord(**json.loads(line))
                self._records.append(rec)
                self._keys.add(rec.key())

    def add(self, record: RatingRecord) -> None:
        validate_rating(record)
        with self._lock:
            if record.key() in self._keys:
                raise DuplicateRatingError(
                    f"already rated: image={record.image_id} prototype={record.prototype_id} "
                    f"model={record.model_id} rater={record.rater_id}"
                )
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as f:
                f.write(json.dumps(asdict(record)) + "\n")
                f.flush()
                os.fsync(f.fileno())
            self._records.append(record)
            self._keys.add(record.key())

    def all(self) -> list[RatingRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


class TaskPool:
    """Queue of (image, prototype) pairs awaiting ratings.

    next_task returns an unrated-by-this-rater task with the fewest ratings so
    far, breaking ties by stable task id order; None once the rater has seen
    everything.
    """

    def __init__(self, items: list[ItemKey], model_id: str):
        if not items:
            raise ServiceError("task pool initialized with no items")
        self.model_id = model_id
        self.items = sorted(items, key=lambda it: (it[1], it[0]))
        self.task_ids = {it: f"t{n:06d}" for n, it in enumerate(self.items)}

    def next_task(self, rater_id: str, store: RatingStore) -> RatingTask | None:
        counts: dict[ItemKey, int] = {it: 0 for it in self.items}
        rated_by_me: set[ItemKey] = set()
        for rec in store.all():
            if rec.model_id != self.model_id:
                continue
            it = (rec.image_id, rec.prototype_id)
            if it in counts:
                counts[it] += 1
                if rec.rater_id == rater_id:
                    rated_by_me.add(it)
        candidates = [it for it in self.items if it not in rated_by_me]
        if not candidates:
            return None
        best = min(candidates, key=lambda it: (counts[it], self.task_ids[it]))
        return RatingTask(
            task_id=self.task_ids[best],
            image_id=best[0],
            prototype_id=best[1],
            heatmap_ref=f"/api/heatmaps/{best[0]}/{best[1]}",
            rubric=RUBRIC,
        )


def pool_from_model(model, dataset) -> list[ItemKey]:
    """Class-matched (train image, prototype) pairs: the items the reward loop scores."""
    items: list[ItemKey] = []
    by_class: dict[int, list[str]] = {}
    for im in dataset.train_images():
        by_class.setdefault(im.class_id, []).append(im.image_id)
    for proto in model.prototype_views():
        for image_id in by_class.get(proto.class_id, []):
            items.append((image_id, proto.prototype_id))
    return items


def build_comparisons(
    ratings: list[RatingRecord], split_seed: int, test_fraction: float
) -> tuple[list[ComparisonRecord], list[ComparisonRecord]]:
    """Split rated items into disjoint train/test sets, then pair within each side.

    Items with several ratings enter with their mean rating. Pairs are emitted
    in sorted item order (left = lower key); equal-rating pairs are dropped.
    """
    if len(ratings) < 2:
        raise ValidationError("need at least 2 ratings to build comparisons")
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in [0,1), got {test_fraction}")

    by_item: dict[ItemKey, list[int]] = {}
    for rec in ratings:
        validate_rating(rec)
        by_item.setdefault((rec.image_id, rec.prototype_id), []).append(rec.rating)
    item_rating = {it: float(np.mean(rs)) for it, rs in sorted(by_item.items())}

    items = sorted(item_rating)
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(len(items))
    n_test = int(round(test_fraction * len(items)))
    test_items = {items[i] for i in perm[:n_test]}

    def pair_side(side_items: list[ItemKey]) -> list[ComparisonRecord]:
        out = []
        for a_idx in range(len(side_items)):
            for b_idx in range(a_idx + 1, len(side_items)):
                left, right = side_items[a_idx], side_items[b_idx]
                ra, rb = item_rating[left], item_rating[right]
                if ra == rb:
                    continue
                out.append(ComparisonRecord(left, right, -1 if ra > rb else 1))
        return out

    train_side = [it for it in items if it not in test_items]
    test_side = [it for it in items if it in test_items]
    return pair_side(train_side), pair_side(test_side)


def flip(record: ComparisonRecord) -> ComparisonRecord:
    """Swap left/right; the comparison sign flips with it."""
    return ComparisonRecord(record.right, record.left, -record.c)


def oracle_rate(sample: SyntheticSample, amap: ActivationMap) -> int:
    """Rate a heatmap 1-5 from the overlap of its hottest pixels with the object.

    rho = fraction of the top-5% display pixels inside the object mask;
    5 if rho>=0.9, 4 if >=0.7, 3 if >=0.5, 2 if >=0.25, else 1.
    """
    mask = sample.object_mask
    display = amap.display
    if mask.shape != display.shape:
        raise ContractError(
            f"mask {mask.shape} and heatmap {display.shape} sizes differ"
        )
    n_top = max(1, int(round(0.05 * display.size)))
    order = np.argsort(-display.ravel(), kind="stable")[:n_top]
    rho = float(mask.ravel()[order].mean())
    if rho >= 0.9:
        return 5
    if rho >= 0.7:
        return 4
    if rho >= 0.5:
        return 3
    if rho >= 0.25:
        return 2
    return 1


def save_comparisons(records: list[ComparisonRecord], path: Path | str) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({"left": list(r.left), "right": list(r.right), "c": r.c}) + "\n")


def load_comparisons(path: Path | str) -> list[ComparisonRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(
            ComparisonRecord((d["left"][0], d["left"][1]), (d["right"][0], d["right"][1]), d["c"])
        )
    return out
