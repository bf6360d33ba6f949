import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_corpus
from roadfusion.adaptation import Discriminator, FeatureAdaptor, ModelState, init_model
from roadfusion.dataset import load_manifest, split_manifest
from roadfusion.features import BackboneSpec, FeatureExtractor
from roadfusion.synthesis import generate_pool
from roadfusion.training import (
    LossConfig,
    TrainConfig,
    TrainingAborted,
    cross_entropy_loss,
    downsample_mask,
    train,
    truncated_l1_loss,
)

MINI_SPEC = BackboneSpec(architecture="tiny", levels=(2, 3), weights_id="untrained:0")


def scalar_truncated_l1(sn, sa, tau_plus, tau_minus, down_mask=None):
    """Independent per-location re-implementation of the paired hinge."""
    total = 0.0
    count = 0
    for i in range(sn.shape[0]):
        for j in range(sn.shape[1]):
            term = max(0.0, tau_plus - sn[i, j])
            if down_mask is None or down_mask[i, j] == 1:
                term += max(0.0, sa[i, j] - tau_minus)
            else:
                term += max(0.0, tau_plus - sa[i, j])
            total += term
            count += 1
    return total / count


class TestTruncatedL1:
    def test_inactive_hinges_give_zero(self):
        cfg = LossConfig()
        sn = torch.full((4, 4), 0.9)
        sa = torch.full((4, 4), -0.8)
        dm = torch.ones(4, 4)
        assert float(truncated_l1_loss(sn, sa, cfg, dm)) == 0.0

    def test_single_location_value(self):
        cfg = LossConfig()
        sn = torch.tensor([[0.2]])
        sa = torch.tensor([[0.1]])
        loss = truncated_l1_loss(sn, sa, cfg, torch.ones(1, 1))
        assert float(loss) == pytest.approx(0.9, abs=1e-7)

    def test_saturation_far_beyond_thresholds(self):
        cfg = LossConfig()
        sn = torch.full((3, 3), 1e6)
        sa = torch.full((3, 3), -1e6)
        assert float(truncated_l1_loss(sn, sa, cfg, torch.ones(3, 3))) == 0.0

    def test_mask_only_outside_cells_hinge_at_tau_plus(self):
        cfg = LossConfig(anomalous_masking="mask_only")
        sn = torch.full((1, 2), 0.9)  # saturated normal term
        sa = torch.tensor([[0.9, 0.2]])
        dm = torch.tensor([[0, 0]])
        # both anomalous locations treated as normal: 0 + (0.5 - 0.2)
        loss = truncated_l1_loss(sn, sa, cfg, dm)
        assert float(loss) == pytest.approx(0.3 / 2, abs=1e-7)

    def test_all_locations_ignores_mask(self):
        cfg = LossConfig(anomalous_masking="all_locations")
        sn = torch.full((2, 2), 0.9)
        sa = torch.full((2, 2), 0.2)
        loss = truncated_l1_loss(sn, sa, cfg)
        assert float(loss) == pytest.approx(0.7, abs=1e-6)

    def test_mask_required_for_mask_only(self):
        cfg = LossConfig(anomalous_masking="mask_only")
        with pytest.raises(ValueError, match="down_mask"):
            truncated_l1_loss(torch.zeros(2, 2), torch.zeros(2, 2), cfg)

    def test_shape_mismatch_rejected(self):
        cfg = LossConfig(anomalous_masking="all_locations")
        with pytest.raises(ValueError, match="mismatch"):
            truncated_l1_loss(torch.zeros(2, 2), torch.zeros(3, 3), cfg)

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        h=st.integers(1, 6),
        w=st.integers(1, 6),
        masked=st.booleans(),
    )
    def test_matches_scalar_reimplementation(self, seed, h, w, masked):
        rng = np.random.default_rng(seed)
        sn = rng.normal(0, 1.5, (h, w))
        sa = rng.normal(0, 1.5, (h, w))
        dm = rng.integers(0, 2, (h, w)) if masked else np.ones((h, w), dtype=int)
        cfg = LossConfig(anomalous_masking="mask_only")
        expected = scalar_truncated_l1(sn, sa, 0.5, -0.5, dm)
        got = truncated_l1_loss(
            torch.from_numpy(sn),
            torch.from_numpy(sa),
            cfg,
            torch.from_numpy(np.asarray(dm, dtype=np.float64)),
        )
        assert float(got) == pytest.approx(expected, abs=1e-6)

    def test_hinge_gradient_by_finite_differences(self):
        cfg = LossConfig(anomalous_masking="all_locations")
        sa = torch.tensor([[-0.9]])  # saturated anomalous term
        eps = 1e-4

        def loss_at(x):
            return float(
                truncated_l1_loss(torch.tensor([[x]], dtype=torch.float64), sa.double(), cfg)
            )

        below = (loss_at(0.2 + eps) - loss_at(0.2 - eps)) / (2 * eps)
        above = (loss_at(0.9 + eps) - loss_at(0.9 - eps)) / (2 * eps)
        assert below == pytest.approx(-1.0, abs=1e-6)
        assert above == pytest.approx(0.0, abs=1e-12)


class TestCrossEntropy:
    def test_saturated_scores_near_zero_loss(self):
        sn = torch.full((3, 3), 20.0)
        sa = torch.full((3, 3), -20.0)
        cfg = LossConfig(kind="cross_entropy", anomalous_masking="all_locations")
        assert float(cross_entropy_loss(sn, sa, cfg)) < 1e-8

    def test_zero_scores_give_ln2_per_location(self):
        sn = torch.zeros(4, 4)
        sa = torch.zeros(4, 4)
        cfg = LossConfig(kind="cross_entropy", anomalous_masking="all_locations")
        assert float(cross_entropy_loss(sn, sa, cfg)) == pytest.approx(
            math.log(2.0), abs=1e-6
        )

    def test_single_normal_location_hand_value(self):
        # oracle: -ln(sigmoid(1.0)) = ln(1 + e^-1)
        expected = math.log(1.0 + math.exp(-1.0))
        loss = cross_entropy_loss(torch.tensor([[1.0]]), None)
        assert float(loss) == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(0.3133, abs=1e-4)

    def test_mask_only_targets_flip_outside(self):
        cfg = LossConfig(kind="cross_entropy", anomalous_masking="mask_only")
        sn = torch.full((1, 2), 20.0)
        sa = torch.tensor([[20.0, 20.0]])
        inside = torch.tensor([[1.0, 0.0]])
        loss = cross_entropy_loss(sn, sa, cfg, inside)
        # inside-mask location with score +20 is a confident mistake
        assert float(loss) == pytest.approx(20.0 / 4, rel=1e-3)


class TestDownsampleMask:
    def test_all_ones(self):
        assert downsample_mask(np.ones((32, 32)), (8, 8)).all()

    def test_single_pixel_sets_exactly_one_cell(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[17, 5] = 1
        grid = downsample_mask(mask, (8, 8))
        assert grid.sum() == 1
        assert grid[17 * 8 // 32, 5 * 8 // 32] == 1

    def test_all_zeros(self):
        assert downsample_mask(np.zeros((16, 16)), (4, 4)).sum() == 0

    def test_non_divisible_sizes_partition(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[9, 9] = 1
        grid = downsample_mask(mask, (3, 3))
        assert grid.sum() == 1
        assert grid[2, 2] == 1

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_cell_set_iff_region_contains_defect(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(4, 24, 2)
        th, tw = rng.integers(1, 5, 2)
        mask = (rng.random((h, w)) < 0.1).astype(np.uint8)
        grid = downsample_mask(mask, (int(th), int(tw)))
        expected = np.zeros((th, tw), dtype=np.uint8)
        for y in range(h):
            for x in range(w):
                if mask[y, x]:
                    expected[y * th // h, x * tw // w] = 1
        assert np.array_equal(grid, expected)


@pytest.fixture(scope="module")
def mini_setup(tmp_path_factory):
    """Six-image corpus + pool + extractor for direct train() tests."""
    root = tmp_path_factory.mktemp("mini")
    make_corpus(root, n_normal=6, n_anomalous=0, size=32)
    manifest = split_manifest(load_manifest(root), (1.0, 0.0, 0.0), seed=0)
    pool = generate_pool(manifest, root / "pool", count_per_image=1, base_seed=0)
    extractor = FeatureExtractor(MINI_SPEC, input_size=32, patchsize=3)
    return manifest, pool, extractor


class TestTrainLoop:
    def test_single_batch_gives_one_step_per_epoch(self, mini_setup):
        manifest, pool, extractor = mini_setup
        model = init_model(MINI_SPEC, seed=0)
        _, stats = train(
            manifest, pool, model,
            TrainConfig(batch_size=16, epochs=2, seed=0),
            LossConfig(), extractor,
        )
        assert [s.n_steps for s in stats] == [1, 1]

    def test_determinism_same_seed_same_loss_curve(self, mini_setup):
        manifest, pool, extractor = mini_setup
        curves = []
        digests = []
        for _ in range(2):
            model = init_model(MINI_SPEC, seed=7)
            model, stats = train(
                manifest, pool, model,
                TrainConfig(batch_size=4, epochs=2, seed=7),
                LossConfig(), extractor,
            )
            curves.append([s.mean_loss for s in stats])
            digests.append(model.digest())
        assert curves[0] == pytest.approx(curves[1], abs=1e-6)
        assert digests[0] == digests[1]

    def test_backbone_untouched_by_training(self, mini_setup):
        manifest, pool, extractor = mini_setup
        before = extractor.checksum()
        model = init_model(MINI_SPEC, seed=1)
        train(
            manifest, pool, model,
            TrainConfig(batch_size=4, epochs=1, seed=1),
            LossConfig(), extractor,
        )
        assert extractor.checksum() == before

    def test_empty_pool_is_fatal(self, mini_setup):
        manifest, pool, extractor = mini_setup
        empty = type(pool)(entries=[], root=pool.root)
        with pytest.raises(TrainingAborted, match="pool"):
            train(
                manifest, empty, init_model(MINI_SPEC, seed=0),
                TrainConfig(epochs=1), LossConfig(), extractor,
            )

    def test_partial_pool_coverage_is_fatal(self, mini_setup):
        manifest, pool, extractor = mini_setup
        partial = type(pool)(entries=pool.entries[:2], root=pool.root)
        with pytest.raises(TrainingAborted, match="cover"):
            train(
                manifest, partial, init_model(MINI_SPEC, seed=0),
                TrainConfig(epochs=1), LossConfig(), extractor,
            )

    def test_non_finite_loss_aborts_with_diagnostics(self, mini_setup):
        manifest, pool, extractor = mini_setup
        model = init_model(MINI_SPEC, seed=0)
        with torch.no_grad():
            model.adaptor_a.weight.fill_(float("nan"))
        with pytest.raises(TrainingAborted, match="non-finite"):
            train(
                manifest, pool, model,
                TrainConfig(batch_size=4, epochs=1, seed=0),
                LossConfig(), extractor,
            )

    def test_training_log_records_steps(self, mini_setup, tmp_path):
        manifest, pool, extractor = mini_setup
        log_path = tmp_path / "log.jsonl"
        model = init_model(MINI_SPEC, seed=0)
        train(
            manifest, pool, model,
            TrainConfig(batch_size=4, epochs=2, seed=0),
            LossConfig(), extractor, log_path=log_path,
        )
        records = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert len(records) == 2 * 2  # ceil(6/4) steps x 2 epochs
        assert {"epoch", "step", "loss", "lr_adaptors", "lr_discriminator",
                "wall_time"} <= set(records[0])

    def test_zero_loss_changes_parameters_only_via_weight_decay(self, mini_setup):
        manifest, pool, extractor = mini_setup
        dim = extractor.feature_dim
        # rigged state that genuinely separates: A = +I, B = -I, and a
        # width-1 discriminator scoring the (signed) feature sum
        g = torch.Generator().manual_seed(0)
        model = ModelState(
            adaptor_a=FeatureAdaptor(dim, "A", g, init_std=0.0),
            adaptor_b=FeatureAdaptor(dim, "B", g, init_std=0.0),
            discriminator=Discriminator(dim, hidden=1),
            backbone_spec=MINI_SPEC,
        )
        with torch.no_grad():
            model.adaptor_b.linear.weight.copy_(-torch.eye(dim))
            model.discriminator.layer1.weight.fill_(1.0 / dim)
            model.discriminator.layer2.weight.fill_(100.0)
            model.discriminator.layer2.bias.zero_()
        before = {
            k: v.detach().clone() for k, v in model.parameter_arrays().items()
        }
        cfg = TrainConfig(batch_size=16, epochs=1, seed=0)
        _, stats = train(
            manifest, pool, model, cfg,
            LossConfig(anomalous_masking="all_locations"), extractor,
        )
        assert stats[0].mean_loss == 0.0
        decay = {"a.weight": 1 - cfg.lr_adaptors * cfg.weight_decay,
                 "b.weight": 1 - cfg.lr_adaptors * cfg.weight_decay}
        after = model.parameter_arrays()
        for name, old in before.items():
            if name.startswith(("d.norm.running", "d.norm.num_batches")):
                continue  # batch-norm buffers legitimately track statistics
            factor = decay.get(name, 1 - cfg.lr_discriminator * cfg.weight_decay)
            assert torch.allclose(after[name], old * factor, rtol=1e-7, atol=0.0), name


def test_val_split_drives_best_checkpoint(tmp_path):
    make_corpus(tmp_path / "corpus", n_normal=6, n_anomalous=2, size=32)
    manifest = split_manifest(
        load_manifest(tmp_path / "corpus"), (0.5, 0.25, 0.25), seed=0
    )
    val = manifest.split("val")
    assert {e.label for e in val} == {"normal", "anomalous"}
    pool = generate_pool(manifest, tmp_path / "pool", count_per_image=1, base_seed=0)
    extractor = FeatureExtractor(MINI_SPEC, input_size=32, patchsize=3)
    model = init_model(MINI_SPEC, seed=0)
    ckpt_dir = tmp_path / "ckpt"
    _, stats = train(
        manifest, pool, model,
        TrainConfig(batch_size=4, epochs=2, seed=0),
        LossConfig(), extractor, checkpoint_dir=ckpt_dir,
    )
    assert all(s.val_i_auroc is not None for s in stats)
    assert (ckpt_dir / "last.ckpt").exists()
    assert (ckpt_dir / "best.ckpt").exists()
    best = ModelState.load(ckpt_dir / "best.ckpt")
    assert best.backbone_spec == MINI_SPEC


def test_toy_loss_decreases_epoch5_below_epoch1(toy_run):
    records = [
        json.loads(l)
        for l in (toy_run.run_dir / "training_log.jsonl").read_text().splitlines()
    ]
    by_epoch = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r["loss"])
    assert np.mean(by_epoch[5]) < np.mean(by_epoch[1])
