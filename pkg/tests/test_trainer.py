import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from helpers import BOX_TRAIN, SMOKE_TRAIN
from vfnerf import autodiff as ad
from vfnerf.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from vfnerf.dataset import ConfigError
from vfnerf.mlp import Model
from vfnerf.oracle_check import gradient_check
from vfnerf.trainer import (
    CHECKPOINT,
    CSV_HEADER,
    METRICS,
    RESOLVED_CONFIG,
    LossWeights,
    PretrainError,
    RayTable,
    TrainConfig,
    TrainingError,
    batch_rng,
    center_targets,
    combine,
    compute_losses,
    load_train_config,
    pretrain_to_center,
    radial_field,
    read_metrics,
    sample_ball,
    sample_pixel_batch,
    sample_shell,
    train,
)

SMALL_NET = dict(hidden_width=32, vf_layers=4, color_layers=1, feature_dim=4, vf_skip=(1,), pe_x=2, pe_d=1)


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def loss_inputs(rng, n=16, s=5, center=np.zeros(3)):
    ext = sample_shell(rng, 20, center, 2.0, 4.0)
    cen = sample_ball(rng, 20, center, 0.2)
    return dict(
        C=rng.uniform(size=(n, 3)),
        D=rng.uniform(1, 3, size=n),
        vf=unit(rng, n * s).reshape(n, s, 3),
        ext=ext,
        cen=cen,
        center=center,
    )


class TestLosses:
    def test_perfect_prediction(self, rng):
        x = loss_inputs(rng)
        ext_v = radial_field(x["ext"], x["center"], inward=True)
        cen_v = radial_field(x["cen"], x["center"], inward=False)
        losses, total = compute_losses(x["C"], x["D"], x["C"], x["D"], x["vf"], x["ext"], ext_v, x["cen"], cen_v, x["center"], LossWeights())
        assert losses.L_c == 0.0 and losses.L_depth == 0.0
        assert losses.L_norm == pytest.approx(0.0, abs=1e-28)
        assert losses.L_ext == pytest.approx(0.0, abs=1e-15) and losses.L_cen == pytest.approx(0.0, abs=1e-15)
        assert total == pytest.approx(0.0, abs=1e-14)

    def test_outward_field_everywhere(self, rng):
        x = loss_inputs(rng)
        out_ext = radial_field(x["ext"], x["center"], inward=False)
        out_cen = radial_field(x["cen"], x["center"], inward=False)
        losses, _ = compute_losses(x["C"], x["D"], x["C"], x["D"], x["vf"], x["ext"], out_ext, x["cen"], out_cen, x["center"], LossWeights())
        assert losses.L_cen == pytest.approx(0.0, abs=1e-15)
        # antipodal unit vectors are distance 2 apart
        assert losses.L_ext == pytest.approx(2.0, abs=1e-15)

    def test_l1_values_and_norm(self):
        C = np.zeros((2, 3))
        ref = np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.4]])
        vf = np.array([[[2.0, 0, 0]], [[0, 0, 1.0]]])
        pts = np.array([[3.0, 0, 0]])
        inward = -np.array([[1.0, 0, 0]])
        losses, _ = compute_losses(C, np.array([1.0, 2.0]), ref, np.array([1.5, 1.0]), vf, pts, inward, pts, -inward, np.zeros(3), LossWeights())
        assert losses.L_c == pytest.approx(0.5)  # mean of channel-summed L1: (0.6 + 0.4) / 2
        assert losses.L_depth == pytest.approx(0.75)
        assert losses.L_norm == pytest.approx(0.5)  # ((2-1)^2 + 0) / 2

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), w=st.tuples(*[st.floats(0, 5)] * 5))
    def test_total_is_exact_weighted_sum(self, seed, w):
        rng = np.random.default_rng(seed)
        x = loss_inputs(rng)
        weights = LossWeights(*w)
        ext_v, cen_v = unit(rng, 20), unit(rng, 20)
        ref_c, ref_d = rng.uniform(size=(16, 3)), rng.uniform(1, 3, size=16)
        losses, total = compute_losses(x["C"], x["D"], ref_c, ref_d, 1.3 * x["vf"], x["ext"], ext_v, x["cen"], cen_v, x["center"], weights)
        assert float(total) == losses.total == losses.weighted_total(weights)
        expect = combine(weights, losses.L_c, losses.L_norm, losses.L_ext, losses.L_depth, losses.L_cen)
        assert losses.total == expect

    def test_depth_misses_excluded(self, rng):
        x = loss_inputs(rng, n=4)
        ref_d = np.array([1.0, 2.0, 99.0, 3.0])
        valid = ref_d < 50
        D = np.array([1.5, 2.0, 0.0, 3.5])
        losses, _ = compute_losses(x["C"], D, x["C"], ref_d, x["vf"], x["ext"], unit(rng, 20), x["cen"], unit(rng, 20), x["center"], LossWeights(), valid)
        assert losses.depth_excluded == 1
        assert losses.L_depth == pytest.approx(1.0 / 3.0)
        none, _ = compute_losses(x["C"], D, x["C"], ref_d, x["vf"], x["ext"], unit(rng, 20), x["cen"], unit(rng, 20), x["center"], LossWeights(), np.zeros(4, bool))
        assert none.L_depth == 0.0 and none.depth_excluded == 4

    def test_traced_gradient_of_color_term(self, rng):
        tape = ad.Tape()
        C = tape.watch(rng.uniform(size=(3, 3)))
        ref = rng.uniform(size=(3, 3))
        x = loss_inputs(rng, n=3)
        _, total = compute_losses(C, x["D"], ref, x["D"], x["vf"], x["ext"], unit(rng, 20), x["cen"], unit(rng, 20), x["center"], LossWeights(w_c=2.0))
        grads = tape.backward(total)
        npt.assert_allclose(grads[C.index], 2.0 * np.sign(ad.value(C) - ref) / 3)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(w_ext=-1.0)


class TestPointSamplers:
    def test_shell_radii(self, rng):
        c = np.array([1.0, -2.0, 0.5])
        r = np.linalg.norm(sample_shell(rng, 5000, c, 1.1, 2.0) - c, axis=1)
        assert r.min() >= 1.1 and r.max() <= 2.0
        # uniform in volume: median radius solves r^3 = (r0^3 + r1^3) / 2
        assert np.median(r) == pytest.approx(((1.1**3 + 2.0**3) / 2) ** (1 / 3), rel=0.02)

    def test_ball_excludes_center(self, rng):
        pts = sample_ball(rng, 1000, np.zeros(3), 0.1)
        r = np.linalg.norm(pts, axis=1)
        assert r.max() <= 0.1 and r.min() > 0

    def test_radial_field(self):
        npt.assert_allclose(radial_field(np.array([[3.0, 0, 0]]), np.array([1.0, 0, 0]), inward=True), [[-1, 0, 0]])


class TestPixelBatch:
    def test_full_count_is_permutation(self, tiny_dataset):
        table = RayTable(tiny_dataset.train, tiny_dataset.depth_sentinel)
        b = sample_pixel_batch(table, len(table), batch_rng(0, 0, 0))
        npt.assert_array_equal(np.sort(b.index), np.arange(len(table)))
        npt.assert_array_equal(b.rgb, table.rgb[b.index])

    def test_seeds_differ_and_repeat(self, box_cameras, box_scene, tmp_path):
        from vfnerf.dataset import generate_dataset, load_dataset

        generate_dataset(box_scene, type(box_cameras)(box_cameras.train[:1], ()), tmp_path, seed=0)
        table = RayTable(load_dataset(tmp_path).train, box_scene.far)
        assert len(table) == 64 * 64
        a = sample_pixel_batch(table, 256, batch_rng(0, 3, 1)).index
        npt.assert_array_equal(a, sample_pixel_batch(table, 256, batch_rng(0, 3, 1)).index)
        for other in (batch_rng(1, 3, 1), batch_rng(0, 4, 1), batch_rng(0, 3, 2)):
            assert not np.array_equal(a, sample_pixel_batch(table, 256, other).index)
        assert len(np.unique(a)) == 256

    def test_unit_directions(self, tiny_dataset):
        table = RayTable(tiny_dataset.train, tiny_dataset.depth_sentinel)
        b = sample_pixel_batch(table, 50, batch_rng(2, 0, 0))
        npt.assert_allclose(np.linalg.norm(b.dirs, axis=1), 1.0, atol=1e-14)

    def test_count_too_large(self, tiny_dataset):
        table = RayTable(tiny_dataset.train, tiny_dataset.depth_sentinel)
        with pytest.raises(ValueError, match="exceeds"):
            sample_pixel_batch(table, len(table) + 1, batch_rng(0, 0, 0))


@pytest.fixture(scope="module")
def pretrained(box_scene):
    model = Model(TrainConfig(**SMALL_NET).model_config(box_scene)).init(0)
    report = pretrain_to_center(model, box_scene, steps=1000, seed=0, batch=256, lr=0.002)
    return model, report


class TestPretrain:
    def test_target_field(self):
        c = np.array([0.5, -1.0, 2.0])
        npt.assert_array_equal(center_targets(c[None] + [1.0, 0, 0], c), [[-1.0, 0, 0]])

    def test_held_out_and_corners(self, pretrained, box_scene):
        model, report = pretrained
        assert report.heldout_cosine >= 0.99
        lo, hi = box_scene.lo, box_scene.hi
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        v = model.vf(corners).v
        cos = (v * center_targets(corners, box_scene.c_scene)).sum(1) / np.linalg.norm(v, axis=1)
        assert cos.min() >= 0.99

    def test_deterministic(self, pretrained, box_scene):
        model, _ = pretrained
        again = Model(TrainConfig(**SMALL_NET).model_config(box_scene)).init(0)
        pretrain_to_center(again, box_scene, steps=1000, seed=0, batch=256, lr=0.002)
        npt.assert_array_equal(again.params.data, model.params.data)

    def test_non_convergence_reported(self, box_scene):
        model = Model(TrainConfig(**SMALL_NET).model_config(box_scene)).init(0)
        with pytest.raises(PretrainError, match="held-out cosine"):
            pretrain_to_center(model, box_scene, steps=1, seed=0, batch=8, lr=1e-6, min_cosine=0.999)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.epochs == 300 and (cfg.anneal_start, cfg.anneal_end) == (70, 140)
        assert cfg.loss_weights() == LossWeights(1.0, 0.05, 0.5, 0.25, 0.5)
        assert (cfg.alpha0, cfg.mu0, cfg.beta0, cfg.xi) == (100.0, 0.7, 0.5, -0.5)

    def test_shipped_configs_load(self):
        assert load_train_config(BOX_TRAIN).epochs == 300
        assert load_train_config(SMOKE_TRAIN).epochs == 2

    def test_unknown_and_bad_keys_all_reported(self, tmp_path):
        (tmp_path / "t.yaml").write_text("epochs: 10\nlearning_rate: 0.1\nw_c: fast\nvf_skip: [1.5]\n")
        with pytest.raises(ConfigError) as err:
            load_train_config(tmp_path / "t.yaml")
        probs = err.value.problems
        assert len(probs) == 3
        assert probs[0].startswith("line 2:") and "learning_rate" in probs[0]

    def test_cross_field_problems(self):
        with pytest.raises(ConfigError, match="anneal"):
            TrainConfig.from_mapping({"anneal_start": 200, "anneal_end": 100})
        with pytest.raises(ValueError):
            TrainConfig(window_size=5)

    def test_overrides_last_wins(self):
        cfg = TrainConfig().with_overrides(["w_depth=0", "lr=1e-3", "lr=2e-3", "vf_skip=[2, 3]"])
        assert cfg.w_depth == 0.0 and cfg.lr == 2e-3 and cfg.vf_skip == (2, 3)
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(["nonsense"])
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig().with_overrides(["bogus=1"])

    def test_with_epochs_scales_annealing(self):
        short = TrainConfig().with_epochs(30)
        assert (short.epochs, short.anneal_start, short.anneal_end) == (30, 7, 14)
        one = TrainConfig().with_epochs(1)
        assert (one.anneal_start, one.anneal_end) == (0, 1)
        with pytest.raises(ConfigError):
            TrainConfig().with_epochs(0)

    def test_describe_covers_every_key(self):
        names = [k for k, _, _ in TrainConfig.describe()]
        assert names == TrainConfig.keys()
        assert all(h for _, _, h in TrainConfig.describe())

    def test_window_schedule(self):
        cfg = TrainConfig()
        npt.assert_allclose(cfg.window(0).w, np.full(6, 1 / 6))
        npt.assert_array_equal(cfg.window(140).w, [0, 0, 0, 1, 0, 0])
        npt.assert_array_equal(cfg.window(299).w, [0, 0, 0, 1, 0, 0])


def smoke_cfg(**kw) -> TrainConfig:
    return load_train_config(SMOKE_TRAIN).with_overrides([f"{k}={v}" for k, v in kw.items()])


class TestTrainLoop:
    def test_one_epoch_one_batch(self, tiny_dataset, tmp_path):
        cfg = smoke_cfg().with_epochs(1)
        assert cfg.batches_per_epoch == 1
        res = train(tiny_dataset, cfg, tmp_path)
        lines = (tmp_path / METRICS).read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 2
        ck = load_checkpoint(tmp_path / CHECKPOINT)
        assert ck.epoch == 1
        npt.assert_array_equal(ck.model.params.data, res.model.params.data)
        assert json.loads((tmp_path / RESOLVED_CONFIG).read_text()) == cfg.to_dict()
        row = read_metrics(tmp_path / METRICS)[0]
        assert row["epoch"] == 0 and math.isfinite(row["psnr_holdout"])
        assert row["total"] == pytest.approx(
            combine(cfg.loss_weights(), row["L_c"], row["L_norm"], row["L_ext"], row["L_depth"], row["L_cen"]), rel=1e-12
        )

    def test_resume_is_bit_exact(self, tiny_dataset, tmp_path):
        cfg = smoke_cfg(epochs=4, anneal_end=3)
        full = train(tiny_dataset, cfg, tmp_path / "full")
        train(tiny_dataset, cfg, tmp_path / "part", stop_after=2)
        assert len(read_metrics(tmp_path / "part" / METRICS)) == 2
        resumed = train(tiny_dataset, cfg, tmp_path / "part", resume=True)
        npt.assert_array_equal(resumed.model.params.data, full.model.params.data)
        for name in (METRICS, CHECKPOINT):
            assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()

    def test_resume_rejects_other_config(self, tiny_dataset, tmp_path):
        train(tiny_dataset, smoke_cfg().with_epochs(1), tmp_path)
        with pytest.raises(TrainingError, match="different training configuration"):
            train(tiny_dataset, smoke_cfg(lr=0.1).with_epochs(1), tmp_path, resume=True)

    def test_same_seed_same_bytes(self, tiny_dataset, tmp_path):
        cfg = smoke_cfg()
        for name in "ab":
            train(tiny_dataset, cfg, tmp_path / name)
        for f in (METRICS, CHECKPOINT):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        train(tiny_dataset, smoke_cfg(seed=1), tmp_path / "c")
        assert (tmp_path / "c" / CHECKPOINT).read_bytes() != (tmp_path / "a" / CHECKPOINT).read_bytes()

    def test_non_finite_loss_keeps_checkpoint(self, tiny_dataset, tmp_path, monkeypatch):
        import vfnerf.trainer as tr

        cfg = smoke_cfg(epochs=3, anneal_end=3)
        train(tiny_dataset, cfg, tmp_path, stop_after=1)
        before = (tmp_path / CHECKPOINT).read_bytes()
        real = tr.compute_losses

        def poisoned(*args, **kw):
            losses, total = real(*args, **kw)
            return type(losses)(math.nan, *losses.row()[1:], losses.depth_excluded), total

        monkeypatch.setattr(tr, "compute_losses", poisoned)
        with pytest.raises(TrainingError, match="last good checkpoint"):
            train(tiny_dataset, cfg, tmp_path, resume=True)
        assert (tmp_path / CHECKPOINT).read_bytes() == before


class TestCheckpoint:
    def _model(self, box_scene):
        cfg = TrainConfig(**SMALL_NET)
        from vfnerf.optim import OptimizerState

        model = Model(cfg.model_config(box_scene)).init(3)
        opt = OptimizerState(len(model.params), 1e-3, 0.1, 10)
        opt.m[:] = np.arange(len(model.params)) * 1e-3
        opt.step = 7
        return model, opt

    def test_round_trip_bit_exact(self, box_scene, tmp_path):
        model, opt = self._model(box_scene)
        save_checkpoint(tmp_path / "a.ckpt", model, opt, 5, {"note": 1})
        ck = load_checkpoint(tmp_path / "a.ckpt")
        npt.assert_array_equal(ck.model.params.data, model.params.data)
        npt.assert_array_equal(ck.optimizer.m, opt.m)
        assert ck.optimizer.step == 7 and ck.epoch == 5 and ck.header["note"] == 1
        assert ck.model.config == model.config
        save_checkpoint(tmp_path / "b.ckpt", ck.model, ck.optimizer, 5, {"note": 1})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corruption_detected(self, box_scene, tmp_path):
        model, opt = self._model(box_scene)
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, model, opt, 1)
        good = path.read_bytes()
        for bad in (good[:10], b"XXXXXXXX" + good[8:], good[:-3], good + bytes(8), good[:20] + b"\xff" + good[21:]):
            path.write_bytes(bad)
            with pytest.raises(CheckpointError):
                load_checkpoint(path)
        assert MAGIC == good[:8]


class TestGradientCheck:
    def test_full_pipeline_matches_finite_differences(self, box_scene):
        worst, probed, active = gradient_check(box_scene, seed=0)
        assert worst < 1e-4
        assert len(probed) == 20 and len(set(probed)) == 20
        assert active > 0
