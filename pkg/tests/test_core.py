import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from r3proto import core, data
from r3proto.errors import ConfigurationError, ContractError


def brute_force_similarity(patch, vec, eps):
    d2 = float(np.sum((np.asarray(patch, dtype=np.float64) - np.asarray(vec, dtype=np.float64)) ** 2))
    return math.log((d2 + 1.0) / (d2 + eps))


class TestSimilarity:
    def test_zero_distance(self):
        v = np.ones(8)
        assert core.similarity(v, v, 1e-4) == pytest.approx(math.log(1e4), rel=1e-12)

    def test_unit_distance_frozen_value(self):
        # d^2 = 1, eps = 1e-4 -> log(2 / 1.0001) = 0.69304718...
        a = np.zeros(4)
        b = np.array([0.5, 0.5, 0.5, 0.5])
        expected = math.log(2.0 / 1.0001)
        assert core.similarity(a, b, 1e-4) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.6930, abs=5e-5)

    def test_large_distance_goes_to_zero(self):
        a = np.zeros(4)
        b = np.full(4, 1e4)
        val = core.similarity(a, b, 1e-4)
        assert 0.0 < val < 1e-6

    def test_rejects_bad_eps_and_nonfinite(self):
        v = np.ones(3)
        with pytest.raises(ContractError):
            core.similarity(v, v, 1.5)
        with pytest.raises(ContractError):
            core.similarity(np.array([np.nan, 0, 0]), v, 1e-4)

    @given(
        d2a=st.floats(min_value=0.0, max_value=1e6),
        gap_factor=st.floats(min_value=1e-4, max_value=1e4),
        eps=st.floats(min_value=1e-6, max_value=0.99),
    )
    @settings(max_examples=300)
    def test_monotone_decreasing_in_d2(self, d2a, gap_factor, eps):
        # gap scales with d2 so the decrease stays representable in doubles
        d2b = d2a + gap_factor * (1.0 + d2a)
        f = lambda d2: math.log((d2 + 1.0) / (d2 + eps))
        assert f(d2a) > f(d2b)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            patch = torch.tensor(rng.normal(size=6), dtype=torch.float64)
            vec = torch.tensor(rng.normal(size=6), dtype=torch.float64, requires_grad=True)
            eps = 1e-4
            d2 = ((patch - vec) ** 2).sum()
            sim = torch.log((d2 + 1.0) / (d2 + eps))
            sim.backward()
            analytic = vec.grad.numpy()
            h = 1e-4
            numeric = np.empty(6)
            for i in range(6):
                vp, vm = vec.detach().numpy().copy(), vec.detach().numpy().copy()
                vp[i] += h
                vm[i] -= h
                numeric[i] = (
                    brute_force_similarity(patch.numpy(), vp, eps)
                    - brute_force_similarity(patch.numpy(), vm, eps)
                ) / (2 * h)
            denom = np.maximum(np.abs(numeric), 1e-8)
            assert np.max(np.abs(analytic - numeric) / denom) < 1e-3


class TestPrototypeLayer:
    def _random_grid(self, H, W, D, seed):
        rng = np.random.default_rng(seed)
        return torch.tensor(rng.uniform(size=(H, W, D)), dtype=torch.float32)

    def test_exact_match_hits_ln_inv_eps(self):
        grid = self._random_grid(3, 3, 8, 0)
        proto = core.Prototype(0, 0, grid[1, 2].numpy().copy())
        scores = core.prototype_layer_forward(grid, [proto], eps=1e-4)
        assert scores[0] == pytest.approx(math.log(1e4), rel=1e-6)

    def test_single_patch_grid_identity(self):
        grid = self._random_grid(1, 1, 8, 1)
        proto = core.Prototype(0, 0, np.zeros(8))
        scores = core.prototype_layer_forward(grid, [proto], eps=1e-2)
        expected = brute_force_similarity(grid[0, 0].numpy(), proto.vector, 1e-2)
        assert scores[0] == pytest.approx(expected, rel=1e-9)

    def test_matches_brute_force_over_patches(self):
        grid = self._random_grid(3, 3, 8, 2)
        protos = [core.Prototype(j, 0, np.random.default_rng(j).uniform(size=8)) for j in range(4)]
        scores = core.prototype_layer_forward(grid, protos, eps=1e-4)
        for j, p in enumerate(protos):
            best = max(
                brute_force_similarity(grid[r, c].numpy(), p.vector, 1e-4)
                for r in range(3)
                for c in range(3)
            )
            assert scores[j] == pytest.approx(best, rel=1e-9)

    def test_max_pool_dominates_every_patch(self):
        grid = self._random_grid(4, 4, 8, 3)
        protos = [core.Prototype(0, 0, np.random.default_rng(9).uniform(size=8))]
        scores = core.prototype_layer_forward(grid, protos, eps=1e-3)
        for r in range(4):
            for c in range(4):
                assert scores[0] >= brute_force_similarity(grid[r, c].numpy(), protos[0].vector, 1e-3) - 1e-12


class TestModelForward:
    def test_zero_image_is_finite(self, tiny_model):
        img = data.LabeledImage("z", np.zeros((64, 64, 3), dtype=np.float32), 0, "train")
        grid = core.backbone_forward(tiny_model, img)
        assert torch.isfinite(grid).all()

    def test_deterministic(self, tiny_model, tiny_dataset):
        im = tiny_dataset.images[0]
        a = core.backbone_forward(tiny_model, im)
        b = core.backbone_forward(tiny_model, im)
        assert torch.equal(a, b)

    def test_wrong_shape_rejected(self, tiny_model):
        img = data.LabeledImage("w", np.zeros((32, 32, 3), dtype=np.float32), 0, "train")
        with pytest.raises(ContractError):
            core.backbone_forward(tiny_model, img)

    def test_zero_head_gives_zero_logits(self, tiny_model, tiny_dataset):
        model = tiny_model.clone()
        with torch.no_grad():
            model.head.weight.zero_()
        logits, _ = core.model_forward(model, tiny_dataset.images[0])
        assert np.allclose(logits, 0.0)

    def test_identity_head_returns_sims(self, tiny_dataset):
        model = core.new_model(6, 1, depth=16, image_size=64, seed=0)
        with torch.no_grad():
            model.head.weight.copy_(torch.eye(6))
        logits, sims = core.model_forward(model, tiny_dataset.images[0])
        assert np.allclose(logits, sims, atol=1e-6)

    def test_forward_composes_the_three_ops(self, tiny_model, tiny_dataset):
        im = tiny_dataset.images[1]
        logits, sims = core.model_forward(tiny_model, im)
        grid = core.backbone_forward(tiny_model, im).detach()
        protos = tiny_model.prototype_views()
        sims_oracle = core.prototype_layer_forward(grid, protos, tiny_model.eps)
        logits_oracle = tiny_model.head.weight.detach().numpy() @ sims_oracle
        assert np.allclose(sims, sims_oracle, atol=1e-5)
        assert np.allclose(logits, logits_oracle, atol=1e-4)


class TestActivationMap:
    def test_constant_grid_display_zeros(self):
        up = core.upsample_bilinear(np.full((2, 2), 3.5, dtype=np.float32), 8)
        disp = core.display_normalize(up)
        assert np.all(disp == 0.0)

    def test_bilinear_2x2_to_4x4_hand_values(self):
        # corner-aligned: value(f, g) = a + (c-a)*f/3 + (b-a)*g/3 + mix, with
        # a=1 b=2 c=3 d=4 collapsing to 1 + 2f/3 + g/3
        raw = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        up = core.upsample_bilinear(raw, 4)
        expected = np.array(
            [[1 + 2 * f / 3 + g / 3 for g in range(4)] for f in range(4)]
        )
        assert np.allclose(up, expected, atol=1e-6)

    def test_argmax_locality_top_left(self):
        rng = np.random.default_rng(4)
        raw = rng.uniform(0, 0.5, size=(8, 8)).astype(np.float32)
        raw[0, 0] = 1.0
        up = core.upsample_bilinear(raw, 64)
        pr, pc = np.unravel_index(np.argmax(up), up.shape)
        assert pr < 64 // 8 and pc < 64 // 8

    def test_argmax_correspondence_random_maps(self, tiny_model, tiny_dataset):
        for im in tiny_dataset.images[:6]:
            for j in range(tiny_model.num_prototypes):
                amap = core.activation_map(tiny_model, j, im)
                pr, pc = np.unravel_index(np.argmax(amap.upsampled), amap.upsampled.shape)
                cell = core.raw_cell_of_pixel((int(pr), int(pc)), amap.raw.shape[0], 64)
                ar, ac = np.unravel_index(np.argmax(amap.raw), amap.raw.shape)
                assert cell == (ar, ac)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=200, deadline=None)
    def test_argmax_correspondence_property(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.uniform(size=(8, 8)).astype(np.float32)
        up = core.upsample_bilinear(raw, 64)
        pr, pc = np.unravel_index(np.argmax(up), up.shape)
        assert core.raw_cell_of_pixel((int(pr), int(pc)), 8, 64) == tuple(
            np.unravel_index(np.argmax(raw), raw.shape)
        )

    def test_display_normalization_range(self, tiny_model, tiny_dataset):
        amap = core.activation_map(tiny_model, 1, tiny_dataset.images[2])
        assert amap.display.min() == 0.0
        assert amap.display.max() == pytest.approx(1.0)
        assert amap.upsampled.shape == (64, 64)


class TestPush:
    def test_push_sets_sources_and_projects_exactly(self, tiny_dataset):
        model = core.new_model(3, 2, depth=16, image_size=64, seed=5)
        protos = core.push_prototypes(model, tiny_dataset)
        assert all(p.source is not None for p in protos)
        # distance to the source patch is exactly zero
        for p in protos:
            image_id, r, c = p.source
            grid = core.backbone_forward(model, tiny_dataset.image(image_id)).detach()
            d2 = float(((grid[r, c].numpy() - p.vector) ** 2).sum())
            assert d2 <= 1e-6

    def test_push_is_brute_force_nearest(self, tiny_dataset):
        model = core.new_model(3, 2, depth=16, image_size=64, seed=6)
        before = model.prototypes.detach().clone().numpy()
        core.push_prototypes(model, tiny_dataset)
        train = tiny_dataset.train_images()
        for j in range(model.num_prototypes):
            k = int(model.proto_class[j])
            best_d2, best_vec = None, None
            for im in train:
                if im.class_id != k:
                    continue
                grid = core.backbone_forward(model, im).detach().numpy()
                for r in range(grid.shape[0]):
                    for c in range(grid.shape[1]):
                        d2 = float(((grid[r, c] - before[j]) ** 2).sum())
                        if best_d2 is None or d2 < best_d2:
                            best_d2, best_vec = d2, grid[r, c]
            assert np.allclose(model.prototypes.detach().numpy()[j], best_vec, atol=1e-6)

    def test_push_fixed_point(self, tiny_dataset):
        model = core.new_model(3, 1, depth=16, image_size=64, seed=7)
        core.push_prototypes(model, tiny_dataset)
        vecs = model.prototypes.detach().clone()
        core.push_prototypes(model, tiny_dataset)
        assert torch.equal(vecs, model.prototypes.detach())

    def test_push_missing_class_errors(self):
        m = data.generate_synthetic(K=2, per_class=3, S=64, seed=0)
        only_one = data.DatasetManifest(
            2,
            [im for im in m.images if im.class_id == 0 or im.split == data.TEST],
            [],
            m.masks,
        )
        model = core.new_model(2, 1, depth=16, image_size=64, seed=0)
        with pytest.raises(ContractError):
            core.push_prototypes(model, only_one)


class TestPrune:
    def test_pure_prototypes_survive(self, tiny_dataset):
        model = core.new_model(3, 2, depth=16, image_size=64, seed=8)
        core.push_prototypes(model, tiny_dataset)
        n_train = len(tiny_dataset.train_images())
        # threshold = L can never be exceeded
        survivors = core.prune_prototypes(model, tiny_dataset, L=3, threshold=3)
        assert len(survivors) == model.num_prototypes
        assert n_train >= 3

    def test_shared_background_prototype_removed(self, tiny_dataset):
        model = core.new_model(3, 2, depth=16, image_size=64, seed=9)
        core.push_prototypes(model, tiny_dataset)
        # plant a prototype exactly on a patch of another class's image: its
        # nearest image (distance 0) is then guaranteed off-class
        other = next(im for im in tiny_dataset.train_images() if im.class_id != 0)
        grid = core.backbone_forward(model, other).detach()
        with torch.no_grad():
            model.prototypes.data[0] = grid[0, 0]
        survivors = core.prune_prototypes(model, tiny_dataset, L=1, threshold=0)
        assert 0 not in [p.prototype_id for p in survivors]

    def test_mismatch_counts_against_exhaustive_search(self, tiny_dataset):
        model = core.new_model(3, 2, depth=16, image_size=64, seed=10)
        core.push_prototypes(model, tiny_dataset)
        dists, classes = core.nearest_image_distances(model, tiny_dataset)
        train = tiny_dataset.train_images()
        for j in [0, 3, 5]:
            per_image = []
            for im in train:
                grid = core.backbone_forward(model, im).detach().numpy()
                vec = model.prototypes.detach().numpy()[j]
                d2 = ((grid.reshape(-1, grid.shape[2]) - vec) ** 2).sum(axis=1).min()
                per_image.append(d2)
            assert np.allclose(dists[j].numpy(), per_image, rtol=1e-4, atol=1e-5)
        assert classes == [im.class_id for im in train]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_dataset, tmp_path):
        model = core.new_model(3, 2, depth=16, image_size=64, seed=12)
        core.push_prototypes(model, tiny_dataset)
        path = tmp_path / "model.pt"
        core.save_checkpoint(model, path, model_id="m0", hparams={"epochs": 4})
        loaded, meta = core.load_checkpoint(path)
        assert meta["model_id"] == "m0"
        assert meta["hparams"] == {"epochs": 4}
        assert loaded.sources == model.sources
        for (na, a), (nb, b) in zip(
            sorted(model.state_dict().items()), sorted(loaded.state_dict().items())
        ):
            assert na == nb
            assert torch.equal(a, b)

    def test_rejects_foreign_payload(self, tmp_path):
        torch.save({"format_version": 99}, tmp_path / "bad.pt")
        with pytest.raises(ContractError):
            core.load_checkpoint(tmp_path / "bad.pt")

    def test_unsupported_image_size_rejected(self):
        with pytest.raises(ConfigurationError):
            core.new_model(2, 1, depth=16, image_size=32)
