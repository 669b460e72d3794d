"""Reward-guided prototype fine-tuning: reweigh, reselect, retrain.

Reweighing runs gradient ascent on the reward-weighted inverse-distance
objective for prototypes whose mean reward sits below the gate; reselection
replaces prototypes below the trigger with random same-class patches that
clear the acceptance threshold. R2 = reweigh + reselect; R3 = R2 + retraining
with the base objective. Both reward steps touch prototype vectors only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .core import ProtoPNet
from .data import DatasetManifest
from .errors import ConfigurationError
from .reward import PrototypeRewardScorer, RewardNet
from .train import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class R3Config:
    reweigh_gate: float = 0.45  # mean reward below this gets reweighed
    reselect_trigger: float = 0.15  # mean reward below this gets reselected
    accept_threshold: float = 0.50  # candidate patches must score above this
    distance_scale: float = 100.0
    reweigh_steps: int = 50
    reweigh_step_size: float = 0.05
    max_candidates: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.reselect_trigger < self.accept_threshold <= 1.0:
            raise ConfigurationError(
                "need 0 < reselect_trigger < accept_threshold <= 1, got "
                f"{self.reselect_trigger} / {self.accept_threshold}"
            )
        if not self.reselect_trigger < self.reweigh_gate < 1.0:
            raise ConfigurationError(
                f"reweigh_gate must lie in ({self.reselect_trigger}, 1), got {self.reweigh_gate}"
            )
        if self.distance_scale <= 0:
            raise ConfigurationError("distance_scale must be positive")
        if self.reweigh_steps < 0 or self.max_candidates < 1:
            raise ConfigurationError("reweigh_steps must be >= 0, max_candidates >= 1")


@dataclass
class PrototypeChange:
    """One line of the per-prototype change report."""

    prototype_id: int
    action: str  # kept | reweighed | reselected | reselected_fallback
    mean_reward_before: float
    mean_reward_after: float
    source_before: tuple[str, int, int] | None
    source_after: tuple[str, int, int] | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "prototype_id": self.prototype_id,
                "action": self.action,
                "mean_reward_before": round(self.mean_reward_before, 6),
                "mean_reward_after": round(self.mean_reward_after, 6),
                "source_before": list(self.source_before) if self.source_before else None,
                "source_after": list(self.source_after) if self.source_after else None,
            }
        )


def reweigh_objective(
    vector: torch.Tensor,
    latents: torch.Tensor,
    rewards: torch.Tensor,
    distance_scale: float,
) -> torch.Tensor:
    """sum_i r_i / (scale * min_patch ||z - p||^2 + 1); rewards enter as constants.

    latents: (n, D, H, W) grids of the prototype's class images;
    rewards: (n,) scores treated as constants (no gradient through them).
    """
    n, D, H, W = latents.shape
    flat = latents.permute(0, 2, 3, 1).reshape(n, H * W, D)
    d2 = ((flat - vector[None, None, :]) ** 2).sum(dim=2)
    d2_star = d2.amin(dim=1)  # nearest-patch distance per image
    return (rewards.detach() / (distance_scale * d2_star + 1.0)).sum()


def _ascend_prototype(
    j: int,
    scorer: PrototypeRewardScorer,
    cfg: R3Config,
) -> tuple[torch.Tensor, list[tuple[float, float]]]:
    """Gradient ascent on the reweigh objective for one prototype.

    Fixed step size, halved whenever a trial step would lower the objective
    (with rewards frozen for that step); rewards and nearest patches are
    recomputed between steps. Returns the new vector and per-step
    (before, after) objective values under the step's frozen rewards.
    """
    model = scorer.model
    class_id = int(model.proto_class[j])
    idx = scorer.class_indices(class_id)
    latents = scorer.latents[idx]
    p = model.prototypes[j].detach().clone()
    lr = cfg.reweigh_step_size
    trace: list[tuple[float, float]] = []

    for _ in range(cfg.reweigh_steps):
        rewards = scorer.rewards(j, vector=p)  # frozen for this step
        p_var = p.clone().requires_grad_(True)
        obj = reweigh_objective(p_var, latents, rewards, cfg.distance_scale)
        if not torch.isfinite(obj):
            log.warning("non-finite reweigh objective for prototype %d; reverting", j)
            return model.prototypes[j].detach().clone(), trace
        (grad,) = torch.autograd.grad(obj, p_var)
        before = float(obj.detach())
        accepted = False
        while lr > 1e-8:
            cand = p + lr * grad
            with torch.no_grad():
                cand_obj = float(
                    reweigh_objective(cand, latents, rewards, cfg.distance_scale)
                )
            if cand_obj >= before:
                p = cand
                trace.append((before, cand_obj))
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
    return p, trace


def reweigh_update(
    model: ProtoPNet,
    net: RewardNet,
    dataset: DatasetManifest,
    cfg: R3Config,
) -> tuple[ProtoPNet, list[PrototypeChange]]:
    """Move low-reward prototypes toward nearby high-reward patches.

    Only prototypes with mean train reward below the gate are touched, and only
    their vectors change; every other parameter is returned bit-identical.
    """
    cfg.validate()
    out = model.clone()
    scorer = PrototypeRewardScorer(net, out, dataset)
    changes: list[PrototypeChange] = []
    for j in range(out.num_prototypes):
        before = scorer.mean_reward(j)
        src_before = out.sources[j]
        if before >= cfg.reweigh_gate:
            changes.append(
                PrototypeChange(j, "kept", before, before, src_before, src_before)
            )
            continue
        new_vec, trace = _ascend_prototype(j, scorer, cfg)
        moved = bool(trace) and not torch.equal(new_vec, out.prototypes.data[j])
        out.prototypes.data[j] = new_vec
        if moved:
            out.sources[j] = None  # vector left its projected patch
        after = scorer.mean_reward(j)
        changes.append(
            PrototypeChange(
                j,
                "reweighed" if moved else "kept",
                before,
                after,
                src_before,
                out.sources[j],
            )
        )
    return out, changes


def reselect(
    model: ProtoPNet,
    net: RewardNet,
    dataset: DatasetManifest,
    cfg: R3Config,
) -> tuple[ProtoPNet, list[PrototypeChange]]:
    """Replace very-low-reward prototypes with random same-class patches.

    A candidate patch is accepted when its mean reward clears the acceptance
    threshold and no existing prototype equals it exactly. If the candidate
    budget runs out, the best candidate still above the trigger is kept as a
    loudly-logged fallback; otherwise the prototype stays.
    """
    cfg.validate()
    out = model.clone()
    scorer = PrototypeRewardScorer(net, out, dataset)
    changes: list[PrototypeChange] = []
    for j in range(out.num_prototypes):
        before = scorer.mean_reward(j)
        src_before = out.sources[j]
        if before >= cfg.reselect_trigger:
            changes.append(PrototypeChange(j, "kept", before, before, src_before, src_before))
            continue
        class_id = int(out.proto_class[j])
        idx = scorer.class_indices(class_id)
        rng = np.random.default_rng((cfg.seed, j))
        H = W = out.latent_size()
        best_vec: torch.Tensor | None = None
        best_reward = -1.0
        best_src: tuple[str, int, int] | None = None
        accepted = False
        for _ in range(cfg.max_candidates):
            pick = idx[int(rng.integers(len(idx)))]
            r = int(rng.integers(H))
            c = int(rng.integers(W))
            cand = scorer.latents[pick, :, r, c].clone()
            duplicate = any(
                k != j and torch.equal(out.prototypes.data[k], cand)
                for k in range(out.num_prototypes)
            )
            if duplicate:
                continue
            cand_reward = float(scorer.rewards(j, vector=cand).mean())
            if cand_reward > best_reward:
                best_vec, best_reward = cand, cand_reward
                best_src = (scorer.images[pick].image_id, r, c)
            if cand_reward > cfg.accept_threshold:
                out.prototypes.data[j] = cand
                out.sources[j] = best_src = (scorer.images[pick].image_id, r, c)
                changes.append(
                    PrototypeChange(j, "reselected", before, cand_reward, src_before, best_src)
                )
                accepted = True
                break
        if accepted:
            continue
        if best_vec is not None and best_reward > cfg.reselect_trigger:
            log.warning(
                "prototype %d: candidate budget exhausted; keeping best-seen patch "
                "with mean reward %.3f (below acceptance %.2f)",
                j,
                best_reward,
                cfg.accept_threshold,
            )
            out.prototypes.data[j] = best_vec
            out.sources[j] = best_src
            changes.append(
                PrototypeChange(j, "reselected_fallback", before, best_reward, src_before, best_src)
            )
        else:
            log.warning(
                "prototype %d: no candidate above trigger after %d draws; left unchanged",
                j,
                cfg.max_candidates,
            )
            changes.append(PrototypeChange(j, "kept", before, before, src_before, src_before))
    return out, changes


def _merge_changes(
    first: list[PrototypeChange], second: list[PrototypeChange]
) -> list[PrototypeChange]:
    merged = []
    for a, b in zip(first, second):
        action = b.action if b.action != "kept" else a.action
        merged.append(
            PrototypeChange(
                a.prototype_id,
                action,
                a.mean_reward_before,
                b.mean_reward_after,
                a.source_before,
                b.source_after,
            )
        )
    return merged


def r2_update(
    model: ProtoPNet,
    net: RewardNet,
    dataset: DatasetManifest,
    cfg: R3Config,
) -> tuple[ProtoPNet, list[PrototypeChange]]:
    """Reweigh, then reselect whatever still sits below the trigger."""
    reweighed, changes_w = reweigh_update(model, net, dataset, cfg)
    reselected, changes_s = reselect(reweighed, net, dataset, cfg)
    return reselected, _merge_changes(changes_w, changes_s)


def r3_update(
    model: ProtoPNet,
    net: RewardNet,
    dataset: DatasetManifest,
    train_cfg: TrainConfig,
    cfg: R3Config,
) -> tuple[ProtoPNet, list[PrototypeChange], TrainResult]:
    """R2 update followed by retraining with the base objective (push included)."""
    updated, changes = r2_update(model, net, dataset, cfg)
    result = train(updated, dataset, train_cfg)
    return result.model, changes, result


def write_change_report(changes: list[PrototypeChange], path) -> None:
    with open(path, "w") as f:
        for ch in changes:
            f.write(ch.to_json() + "\n")
