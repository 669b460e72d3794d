"""Acceptance gate: property suite, reward-model quality, trend reproduction on
the synthetic dataset with the oracle rater, isolation audits, and determinism.

The expensive artifacts (trained base model, oracle ratings, reward model, R2
and R3 models) are built once per session by the `pipeline` fixture with fixed
seeds; each criterion reads from it.
"""

import json
import math

import numpy as np
import pytest
import torch

from r3proto import cli, core, data, evaluation, feedback, r3, reward, train
from r3proto.feedback import ComparisonRecord

pytestmark = pytest.mark.acceptance

DATASET_SEED = 7
MODEL_SEED = 0
SPLIT_SEED = 13
N_RATINGS = 400


class Pipeline:
    def __init__(self, tmp_dir):
        self.dataset = data.generate_synthetic(K=10, per_class=30, S=64, seed=DATASET_SEED)

        model = core.new_model(10, 5, depth=64, image_size=64, seed=MODEL_SEED)
        self.base = train.train(model, self.dataset, train.TrainConfig(seed=0)).model

        store = feedback.RatingStore(tmp_dir / "ratings.jsonl")
        pool = feedback.TaskPool(feedback.pool_from_model(self.base, self.dataset), "base")
        for n in range(N_RATINGS):
            task = pool.next_task("oracle", store)
            if task is None:
                break
            amap = core.activation_map(self.base, task.prototype_id, self.dataset.image(task.image_id))
            rating = feedback.oracle_rate(self.dataset.sample(task.image_id), amap)
            store.add(
                feedback.RatingRecord(
                    f"r{n}", task.image_id, task.prototype_id, "base", rating, "oracle", 0.0
                )
            )
        self.ratings = store.all()

        self.train_pairs, self.test_pairs = feedback.build_comparisons(
            self.ratings, split_seed=SPLIT_SEED, test_fraction=0.2
        )
        keys = sorted(
            {p.left for p in self.train_pairs + self.test_pairs}
            | {p.right for p in self.train_pairs + self.test_pairs}
        )
        self.bank = reward.ItemBank.from_model(self.base, self.dataset, keys)
        self.reward_net, self.reward_curve = reward.train_reward(
            self.train_pairs, self.test_pairs, self.bank, reward.RewardTrainConfig(seed=0)
        )

        self.r3_config = r3.R3Config(seed=0)
        self.r2_model, self.changes = r3.r2_update(
            self.base, self.reward_net, self.dataset, self.r3_config
        )
        self.r3_model, _, _ = r3.r3_update(
            self.base, self.reward_net, self.dataset, train.TrainConfig(seed=1), self.r3_config
        )

        self.acc = {
            "base": evaluation.test_accuracy(self.base, self.dataset),
            "r2": evaluation.test_accuracy(self.r2_model, self.dataset),
            "r3": evaluation.test_accuracy(self.r3_model, self.dataset),
        }
        self.mean_reward = {
            "base": evaluation.mean_test_reward(self.base, self.reward_net, self.dataset)[0],
            "r2": evaluation.mean_test_reward(self.r2_model, self.reward_net, self.dataset)[0],
            "r3": evaluation.mean_test_reward(self.r3_model, self.reward_net, self.dataset)[0],
        }


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return Pipeline(tmp_path_factory.mktemp("acceptance"))


# ---------------------------------------------------------- property suite


def test_similarity_monotonicity_10k_pairs():
    rng = np.random.default_rng(0)
    d2 = rng.uniform(0.0, 100.0, size=10_000)
    gap = rng.uniform(0.01, 10.0, size=10_000)
    eps = 1e-4
    f = lambda x: np.log((x + 1.0) / (x + eps))
    assert np.all(f(d2) > f(d2 + gap))


def test_max_pool_dominance_and_bruteforce_on_small_grids():
    rng = np.random.default_rng(1)
    for H in (1, 2, 3, 4):
        for W in (1, 2, 4):
            grid = torch.tensor(rng.uniform(size=(H, W, 8)), dtype=torch.float32)
            protos = [core.Prototype(j, 0, rng.uniform(size=8)) for j in range(3)]
            scores = core.prototype_layer_forward(grid, protos, eps=1e-4)
            for j, p in enumerate(protos):
                per_patch = [
                    core.similarity(grid[r, c].numpy(), p.vector, 1e-4)
                    for r in range(H)
                    for c in range(W)
                ]
                assert scores[j] >= max(per_patch) - 1e-12
                assert scores[j] == pytest.approx(max(per_patch), rel=1e-9)


def test_push_projection_exactness(pipeline):
    dists, _ = core.nearest_image_distances(pipeline.base, pipeline.dataset)
    per_proto_min = dists.amin(dim=1)
    assert float(per_proto_min.max()) <= 1e-6


def test_reweigh_objective_gradient_check():
    rng = np.random.default_rng(2)
    for _ in range(5):
        D = 8
        latents = torch.tensor(rng.uniform(size=(4, D, 2, 2)))
        rewards = torch.tensor(rng.uniform(0.1, 0.9, size=4))
        vec = torch.tensor(rng.uniform(size=D), requires_grad=True)
        obj = r3.reweigh_objective(vec, latents, rewards, 100.0)
        obj.backward()
        h = 1e-4
        for i in range(D):
            up, down = vec.detach().clone(), vec.detach().clone()
            up[i] += h
            down[i] -= h
            numeric = (
                float(r3.reweigh_objective(up, latents, rewards, 100.0))
                - float(r3.reweigh_objective(down, latents, rewards, 100.0))
            ) / (2 * h)
            rel = abs(float(vec.grad[i]) - numeric) / max(abs(numeric), 1e-8)
            assert rel <= 1e-3


def test_bt_loss_gradient_check():
    torch.manual_seed(3)
    net = reward.RewardNet(image_size=16).double()
    rng = np.random.default_rng(4)
    images = torch.tensor(rng.uniform(size=(6, 3, 16, 16)))
    maps = torch.tensor(rng.uniform(size=(6, 1, 16, 16)))
    c = torch.tensor([-1, 1, -1])

    def value():
        return reward.bt_loss(net, images[:3], maps[:3], images[3:], maps[3:], c)

    value().backward()
    h = 1e-4
    rng2 = np.random.default_rng(5)
    checked = 0
    for _, p in net.named_parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in rng2.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            orig = float(flat[i])
            flat[i] = orig + h
            with torch.no_grad():
                up = float(value())
            flat[i] = orig - h
            with torch.no_grad():
                down = float(value())
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            if abs(numeric) < 1e-10 and abs(float(grad[i])) < 1e-10:
                continue
            assert abs(float(grad[i]) - numeric) / max(abs(numeric), 1e-8) <= 1e-3
            checked += 1
    assert checked > 10


def test_pair_probability_symmetry_10k():
    rng = np.random.default_rng(6)
    a = rng.uniform(1e-6, 1 - 1e-6, size=10_000)
    b = rng.uniform(1e-6, 1 - 1e-6, size=10_000)
    for x, y in zip(a[:10_000], b[:10_000]):
        s = reward.pair_probability(x, y) + reward.pair_probability(y, x)
        assert abs(s - 1.0) <= 1e-12


def test_comparison_count_identity_and_antisymmetry():
    rng = np.random.default_rng(7)
    ratings = [
        feedback.RatingRecord(f"r{n}", f"i{n:03d}", 0, "m", int(rng.integers(1, 6)), "o", 0.0)
        for n in range(40)
    ]
    train_pairs, test_pairs = feedback.build_comparisons(ratings, split_seed=0, test_fraction=0.0)
    assert test_pairs == []
    by_key = {(r.image_id, r.prototype_id): r.rating for r in ratings}
    n = len(ratings)
    t = sum(
        1
        for i in range(n)
        for j in range(i + 1, n)
        if ratings[i].rating == ratings[j].rating
    )
    assert len(train_pairs) == n * (n - 1) // 2 - t
    for rec in train_pairs:
        assert rec.c in (-1, 1)
        assert rec.c == (-1 if by_key[rec.left] > by_key[rec.right] else 1)
        assert feedback.flip(rec).c == -rec.c


# ------------------------------------------------------------- reward model


def test_reward_model_holdout_accuracy(pipeline):
    assert len(pipeline.ratings) >= 300
    acc = reward.ranking_accuracy(pipeline.reward_net, pipeline.test_pairs, pipeline.bank)
    print(f"\n  reward held-out ranking accuracy: {acc:.4f}")
    assert acc >= 0.85


def test_reward_model_label_shuffle_control(pipeline):
    rng = np.random.default_rng(99)
    shuffle = lambda pairs: [
        ComparisonRecord(p.left, p.right, int(rng.choice([-1, 1]))) for p in pairs
    ]
    strain, stest = shuffle(pipeline.train_pairs), shuffle(pipeline.test_pairs)
    net, _ = reward.train_reward(strain, stest, pipeline.bank, reward.RewardTrainConfig(seed=0))
    acc = reward.ranking_accuracy(net, stest, pipeline.bank)
    print(f"\n  label-shuffled control accuracy: {acc:.4f}")
    assert 0.45 <= acc <= 0.55


# ---------------------------------------------------------------- trends


def test_trend_a_base_accuracy(pipeline):
    print(f"\n  base test accuracy: {pipeline.acc['base']:.4f}")
    assert pipeline.acc["base"] >= 0.90


def test_trend_b_mean_reward_direction(pipeline):
    mr = pipeline.mean_reward
    print(f"\n  mean reward base {mr['base']:.3f} -> r2 {mr['r2']:.3f} -> r3 {mr['r3']:.3f}")
    assert mr["r2"] - mr["base"] >= 0.05
    assert mr["r3"] - mr["r2"] >= -0.02


def test_trend_c_accuracy_dip_and_recovery(pipeline):
    acc = pipeline.acc
    print(f"\n  accuracy base {acc['base']:.4f} -> r2 {acc['r2']:.4f} -> r3 {acc['r3']:.4f}")
    assert acc["r2"] < acc["base"]
    assert acc["r3"] >= acc["base"] - 0.02


def test_trend_d_peak_activation_moves_onto_object(pipeline):
    before = evaluation.prototype_peak_in_mask(pipeline.base, pipeline.dataset)
    after = evaluation.prototype_peak_in_mask(pipeline.r3_model, pipeline.dataset)
    print(f"\n  peak-in-mask fraction: base {before:.2f} -> r3 {after:.2f}")
    assert after - before >= 0.20


def test_trend_e_top5_mismatch_does_not_increase(pipeline):
    before = evaluation.class_mismatch(pipeline.base, pipeline.dataset, 5)
    after = evaluation.class_mismatch(pipeline.r3_model, pipeline.dataset, 5)
    print(f"\n  top-5 mismatch: base {before:.2f} -> r3 {after:.2f}")
    assert after <= before


# ----------------------------------------------------------------- audits


def test_parameter_isolation_audit(pipeline):
    base_state = pipeline.base.state_dict()
    r2_state = pipeline.r2_model.state_dict()
    assert sorted(base_state) == sorted(r2_state)
    for name in base_state:
        if name == "prototypes":
            continue
        assert torch.equal(base_state[name], r2_state[name]), name
    # and the reward steps really did move prototypes
    assert not torch.equal(base_state["prototypes"], r2_state["prototypes"])


def test_reselection_contract_on_planted_spurious_prototype(pipeline):
    model = pipeline.base.clone()
    cfg = pipeline.r3_config
    # plant: a background corner patch from an own-class training image
    j = 0
    class_id = int(model.proto_class[j])
    im = next(i for i in pipeline.dataset.train_images() if i.class_id == class_id)
    grid = core.backbone_forward(model, im).detach()
    with torch.no_grad():
        model.prototypes.data[j] = grid[0, 0]
    model.sources[j] = (im.image_id, 0, 0)

    scorer = reward.PrototypeRewardScorer(pipeline.reward_net, model, pipeline.dataset)
    planted_reward = scorer.mean_reward(j)
    print(f"\n  planted prototype mean reward: {planted_reward:.4f}")
    assert planted_reward < cfg.reselect_trigger

    out, changes = r3.reselect(model, pipeline.reward_net, pipeline.dataset, cfg)
    ch = changes[j]
    assert ch.action == "reselected"
    assert ch.mean_reward_after > cfg.accept_threshold
    vecs = out.prototypes.detach()
    for a in range(len(vecs)):
        for b in range(a + 1, len(vecs)):
            assert not torch.equal(vecs[a], vecs[b])


def test_untrained_model_scores_chance(pipeline):
    model = core.new_model(10, 5, depth=64, image_size=64, seed=123)
    result = train.train(model, pipeline.dataset, train.TrainConfig(epochs=0, seed=0))
    acc = evaluation.test_accuracy(result.model, pipeline.dataset)
    assert 0.03 <= acc <= 0.25  # chance is 0.10 for K=10


# ------------------------------------------------------------ determinism


DETERMINISM_CONFIG = """
[dataset]
classes = 3
per_class = 6
size = 64
seed = 11

[model]
protos_per_class = 2
depth = 16
seed = 2

[train]
epochs = 4
warmup_epochs = 1
push_period = 2
refit_epochs = 2
batch_size = 8
seed = 4

[reward]
epochs = 2
batch_pairs = 1024
seed = 6

[r3]
reweigh_steps = 10
max_candidates = 50
seed = 8
"""

METRIC_LOGS = (
    "model_base_train_log.jsonl",
    "reward_curve.jsonl",
    "change_report_r2.jsonl",
    "change_report_r3.jsonl",
    "model_r3_train_log.jsonl",
    "reports/eval_base.json",
    "reports/eval_r2.json",
    "reports/eval_r3.json",
    "reports/stage_comparison.csv",
)


def _run_small_pipeline(out):
    cfg = out / "config.toml"
    cfg.write_text(DETERMINISM_CONFIG)
    base = ["--config", str(cfg), "--out", str(out)]
    assert cli.main(base + ["synth-gen"]) == 0
    assert cli.main(base + ["train"]) == 0
    assert cli.main(base + ["oracle-rate", "--n", "36"]) == 0
    assert cli.main(base + ["build-comparisons", "--test-fraction", "0.25", "--seed", "5"]) == 0
    assert cli.main(base + ["train-reward"]) == 0
    assert cli.main(base + ["r2"]) == 0
    assert cli.main(base + ["r3"]) == 0
    for stage in ("base", "r2", "r3"):
        assert cli.main(base + ["eval", "--stage", stage]) == 0


def test_full_pipeline_determinism(tmp_path):
    a, b = tmp_path / "run-a", tmp_path / "run-b"
    a.mkdir()
    b.mkdir()
    _run_small_pipeline(a)
    _run_small_pipeline(b)
    for rel in METRIC_LOGS:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
