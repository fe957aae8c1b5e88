import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from conftest import make_slide
from hdseg import training, vit
from hdseg.errors import EmptyTrainingSet, InvalidConfig, ShapeMismatch
from hdseg.pipeline import run_cross_validation
from hdseg.tiling import Tile
from hdseg.training import (
    AugmentFlags,
    OptimizerState,
    TrainConfig,
    adamw_step,
    apply_geometry,
    augment_batch,
    augment_tile,
    lr_at,
    train_fold,
    warp_batch,
)
from hdseg.types import PipelineConfig, make_fold_plan


def scalar_state(m=0.0, v=0.0, step=0):
    return OptimizerState(step, {"w": np.array(m)}, {"w": np.array(v)})


class TestSchedule:
    cfg = TrainConfig(epochs=50, warmup_epochs=5)
    spe = 375

    def test_end_of_warmup_hits_base(self):
        assert abs(lr_at(5 * 375 - 1, self.spe, self.cfg) - 5e-4) <= 1e-12

    def test_first_step_is_small(self):
        assert lr_at(0, self.spe, self.cfg) == pytest.approx(5e-4 / (5 * 375))

    def test_final_step_is_zero(self):
        assert abs(lr_at(50 * 375 - 1, self.spe, self.cfg)) <= 1e-12

    def test_cosine_midpoint(self):
        # 7 decay steps after a 1-step warmup: t = 3/6 lands on step 4
        cfg = TrainConfig(epochs=8, warmup_epochs=1)
        assert abs(lr_at(4, 1, cfg) - 2.5e-4) <= 1e-12

    def test_monotone_decay(self):
        lrs = [lr_at(s, 10, TrainConfig(epochs=6, warmup_epochs=1)) for s in range(60)]
        assert all(a <= b for a, b in zip(lrs[:10], lrs[1:10]))
        assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))

    def test_bad_steps(self):
        with pytest.raises(InvalidConfig):
            lr_at(0, 0, self.cfg)

    def test_pool_arithmetic_24_slides(self):
        pool = 24 * 1000
        assert pool == 24000 and math.ceil(pool / 64) == 375


class TestAdamW:
    def test_zero_gradient_keeps_param(self):
        cfg = TrainConfig(weight_decay=0.0)
        p, s = adamw_step({"w": np.array(1.0)}, {"w": np.array(0.0)}, scalar_state(), 0.1, cfg)
        assert p["w"] == 1.0 and s.m["w"] == 0.0 and s.v["w"] == 0.0 and s.step == 1

    def test_first_step_unit_gradient(self):
        cfg = TrainConfig(weight_decay=0.0)
        p, _ = adamw_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, scalar_state(), 0.1, cfg)
        assert abs(p["w"] - (-0.1 / (1.0 + 1e-8))) <= 1e-12

    def test_decoupled_decay(self):
        cfg = TrainConfig(weight_decay=0.1)
        p, _ = adamw_step({"w": np.array(1.0)}, {"w": np.array(0.0)}, scalar_state(), 0.1, cfg)
        assert abs(p["w"] - 0.99) <= 1e-12

    def test_exempt_tensors_not_decayed(self):
        cfg = TrainConfig(weight_decay=0.5)
        zero = OptimizerState(0, {"pos_embed": np.array(0.0)}, {"pos_embed": np.array(0.0)})
        p, _ = adamw_step({"pos_embed": np.array(1.0)}, {"pos_embed": np.array(0.0)}, zero, 0.1, cfg)
        assert p["pos_embed"] == 1.0

    def test_second_step_by_hand(self):
        cfg = TrainConfig(weight_decay=0.0)
        p, s = adamw_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, scalar_state(), 0.1, cfg)
        p, s = adamw_step(p, {"w": np.array(-2.0)}, s, 0.1, cfg)
        m = 0.9 * 0.1 + 0.1 * -2.0
        v = 0.999 * 0.001 + 0.001 * 4.0
        mh, vh = m / (1 - 0.81), v / (1 - 0.999 ** 2)
        want = -0.1 / (1 + 1e-8) - 0.1 * mh / (math.sqrt(vh) + 1e-8)
        assert abs(p["w"] - want) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(theta=st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3), steps=st.integers(1, 20))
    def test_decay_alone_shrinks_magnitude(self, theta, steps):
        cfg = TrainConfig(weight_decay=0.1)
        p, s = {"w": np.array(theta)}, scalar_state()
        prev = abs(theta)
        for _ in range(steps):
            p, s = adamw_step(p, {"w": np.array(0.0)}, s, 0.1, cfg)
            assert abs(p["w"]) < prev
            prev = abs(p["w"])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)},
                       OptimizerState(0, {"w": np.zeros(2)}, {"w": np.zeros(2)}), 0.1, TrainConfig())


def _tile(seed=0, t=16):
    rng = np.random.default_rng(seed)
    return Tile((0, 0), rng.integers(0, 256, (t, t, 3)).astype(np.uint8), rng.random((t, t)) < 0.5)


class TestAugment:
    def test_disabled_is_identity(self):
        t = _tile()
        out = augment_tile(t, AugmentFlags.none(), np.random.default_rng(0))
        assert np.array_equal(out.pixels, t.pixels) and np.array_equal(out.label, t.label)

    def test_half_turn_twice_restores(self):
        t = _tile()
        once = apply_geometry(t.pixels, t.label, rot90=2)
        twice = apply_geometry(*once, rot90=2)
        assert np.array_equal(twice[0], t.pixels) and np.array_equal(twice[1], t.label)

    def test_horizontal_flip(self):
        t = _tile()
        img, lab = apply_geometry(t.pixels, t.label, flip_h=True)
        assert np.array_equal(img, t.pixels[:, ::-1]) and np.array_equal(lab, t.label[:, ::-1])
        back = apply_geometry(img, lab, flip_h=True)
        assert np.array_equal(back[0], t.pixels)

    def test_label_follows_image(self):
        # encode the label in the image so any misalignment shows up
        rng = np.random.default_rng(3)
        label = rng.random((16, 16)) < 0.5
        pixels = np.where(label[..., None], 250, 5).astype(np.uint8).repeat(3, axis=2)
        flags = AugmentFlags(scale_range=None)
        for _ in range(20):
            out = augment_tile(Tile((0, 0), pixels, label), flags, rng)
            assert np.array_equal(out.pixels[..., 0] > 128, out.label)

    @pytest.mark.parametrize("scale,angle", [(1.2, 0.0), (0.8, 0.0), (1.0, 0.7), (0.9, -2.0)])
    def test_warp_matches_scipy(self, scale, angle):
        t = _tile(5, 24)
        out, _ = warp_batch(t.pixels[None], None, [scale], [angle])
        c = (24 - 1) / 2.0
        ca, sa = math.cos(angle), math.sin(angle)
        m = np.array([[ca, sa], [-sa, ca]]) / scale
        offset = np.array([c, c]) - m @ np.array([c, c])
        ref = np.stack([
            ndimage.affine_transform(t.pixels[..., ch].astype(float), m, offset, order=1, mode="mirror")
            for ch in range(3)], axis=-1)
        assert np.max(np.abs(out[0].astype(float) - ref)) <= 0.5 + 1e-3

    def test_batch_matches_per_tile(self):
        tiles = [_tile(s) for s in range(6)]
        xb = np.stack([t.pixels for t in tiles])
        yb = np.stack([t.label for t in tiles])
        flags = AugmentFlags()
        bx, by = augment_batch(xb, yb, flags, np.random.default_rng(9))
        rng = np.random.default_rng(9)
        for i, t in enumerate(tiles):
            one = augment_tile(t, flags, rng)
            assert np.array_equal(one.pixels, bx[i]) and np.array_equal(one.label, by[i])


@pytest.fixture
def small_pipeline():
    return PipelineConfig(tile_size=8, stride=4, patch_size=4, embed_dim=8, depth=1, heads=2,
                          tiles_per_slide=10)


class TestTrainFold:
    def test_step_count(self, small_pipeline, monkeypatch):
        calls = []
        real = training.adamw_step
        monkeypatch.setattr(training, "adamw_step", lambda *a: calls.append(a[3]) or real(*a))
        cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4)
        epochs = []
        train_fold([make_slide(size=(20, 20))], cfg, small_pipeline,
                   callback=lambda e, loss, lr: epochs.append(e))
        assert len(calls) == 6 and epochs == [0, 1]
        assert calls[-1] == 0.0

    def test_empty(self, small_pipeline):
        with pytest.raises(EmptyTrainingSet):
            train_fold([], TrainConfig(epochs=2, warmup_epochs=1), small_pipeline)

    def test_loss_decreases(self, small_pipeline):
        slide = make_slide(size=(24, 24))
        image = np.where(slide.muscularis_gt[..., None], 60, 220).astype(np.uint8).repeat(3, axis=2)
        slide = slide.with_image(image)
        losses = []
        cfg = TrainConfig(epochs=20, warmup_epochs=2, batch_size=10, base_lr=5e-3,
                          augment=AugmentFlags.none())
        train_fold([slide], cfg, replace(small_pipeline, tiles_per_slide=40),
                   callback=lambda e, loss, lr: losses.append(loss))
        assert losses[-1] < 0.5 * losses[0]

    def test_deterministic_on_desk_geometry(self):
        pipe = PipelineConfig(tiles_per_slide=16)
        cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=8)
        slide = make_slide(size=(96, 96))
        a = train_fold([slide], cfg, pipe)
        b = train_fold([slide], cfg, pipe)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert all(v.dtype == np.float32 for v in a.values())


class TestCrossValidation:
    def test_minimal_two_fold(self, small_pipeline):
        slides = [make_slide("a", "pa", (24, 24), 0), make_slide("b", "pb", (24, 24), 1)]
        plan = make_fold_plan(slides, 2, seed=0)
        res = run_cross_validation(slides, plan, small_pipeline,
                                   TrainConfig(epochs=2, warmup_epochs=1, batch_size=4), [0.01, 0.5])
        assert len(res.folds) == 2
        assert sorted(r.slide_id for r in res.reports) == ["a", "b"]
        assert all(len(f.reports) == 1 for f in res.folds)
        assert not all(np.array_equal(res.folds[0].params[k], res.folds[1].params[k])
                       for k in res.folds[0].params)

    def test_plan_must_cover_slides(self, small_pipeline):
        slides = [make_slide(c, c, (24, 24)) for c in "abc"]
        plan = make_fold_plan(slides[:2], 2, seed=0)
        with pytest.raises(InvalidConfig):
            run_cross_validation(slides, plan, small_pipeline, TrainConfig(epochs=2, warmup_epochs=1),
                                 [0.5])
