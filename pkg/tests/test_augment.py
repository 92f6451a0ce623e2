import numpy as np
import pytest

from pvit.augment import (
    CropParams,
    multi_crop_views,
    random_erase,
    resize_bilinear,
    resize_keep_aspect,
    sample_crop_geometry,
)
from pvit.errors import ConfigError

TABLE_BEST = CropParams(
    global_size=(256, 128),
    local_size=(96, 64),
    local_rate=(0.1, 0.8),
    global_rate=(0.4, 1.0),
    aspect_range=(3.0 / 8.0, 2.0 / 3.0),
    n_local=6,
)


def rand_img(rng, h=64, w=32):
    return rng.random((h, w, 3)).astype(np.float32)


class TestResize:
    def test_same_size_is_exact_copy(self):
        rng = np.random.default_rng(0)
        img = rand_img(rng)
        out = resize_bilinear(img, 64, 32)
        np.testing.assert_array_equal(out, img)

    def test_constant_image_stays_constant(self):
        img = np.full((10, 6, 3), 0.37, dtype=np.float32)
        out = resize_bilinear(img, 7, 9)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_output_dims(self):
        rng = np.random.default_rng(1)
        out = resize_bilinear(rand_img(rng, 33, 17), 96, 64)
        assert out.shape == (96, 64, 3)

    def test_keep_aspect_pads_evenly(self):
        img = np.ones((10, 10, 3), dtype=np.float32)
        out = resize_keep_aspect(img, 20, 10)
        assert out.shape == (20, 10, 3)
        assert out[:5].sum() == 0 and out[15:].sum() == 0
        np.testing.assert_allclose(out[5:15], 1.0, atol=1e-6)


class TestCropGeometry:
    def test_identity_crop_equals_resized_full_image(self):
        rng = np.random.default_rng(2)
        img = rand_img(rng, 64, 32)
        p = CropParams(
            global_size=(32, 16),
            local_size=(16, 8),
            local_rate=(1.0, 1.0),
            global_rate=(1.0, 1.0),
            aspect_range=(0.5, 0.5),  # matches the 32/64 image aspect
            n_local=1,
            flip_prob=0.0,
            jitter_strength=0.0,
            grayscale_prob=0.0,
        )
        views = multi_crop_views(img, p, np.random.default_rng(0))
        expected = resize_bilinear(img, 32, 16)
        for v in views.teacher_globals + views.student_globals:
            np.testing.assert_allclose(v, expected, atol=1e-6)
        assert views.global_geoms[0].crop_h == 64 and views.global_geoms[0].crop_w == 32

    def test_table_best_row_geometry(self):
        rng = np.random.default_rng(3)
        img = rand_img(rng, 256, 128)
        views = multi_crop_views(img, TABLE_BEST, np.random.default_rng(1))
        assert len(views.teacher_globals) == 2 and len(views.student_globals) == 2
        assert len(views.student_locals) == 6
        for v in views.teacher_globals + views.student_globals:
            assert v.shape == (256, 128, 3)
        for v in views.student_locals:
            assert v.shape == (96, 64, 3)
        for geom in views.global_geoms + views.local_geoms:
            assert 0 <= geom.top and geom.top + geom.crop_h <= 256
            assert 0 <= geom.left and geom.left + geom.crop_w <= 128

    def test_sampled_rects_always_in_bounds_10k(self):
        rng = np.random.default_rng(4)
        h, w = 64, 32
        for _ in range(10_000):
            g = sample_crop_geometry(h, w, (0.1, 0.8), (3 / 8, 2 / 3), (32, 16), 0.5, rng)
            assert 0 <= g.top and g.top + g.crop_h <= h
            assert 0 <= g.left and g.left + g.crop_w <= w
            assert g.crop_h >= 1 and g.crop_w >= 1

    def test_geometry_shared_between_teacher_and_student(self):
        rng = np.random.default_rng(5)
        img = rand_img(rng, 64, 32)
        p = CropParams(jitter_strength=0.0, grayscale_prob=0.0, n_local=0)
        views = multi_crop_views(img, p, np.random.default_rng(9))
        for t, s in zip(views.teacher_globals, views.student_globals):
            np.testing.assert_array_equal(t, s)  # pixel-identical without jitter

    def test_every_view_has_configured_dims(self):
        rng = np.random.default_rng(6)
        img = rand_img(rng, 50, 30)
        p = CropParams(global_size=(48, 24), local_size=(24, 16), n_local=3)
        for seed in range(20):
            views = multi_crop_views(img, p, np.random.default_rng(seed))
            assert all(v.shape == (48, 24, 3) for v in views.teacher_globals + views.student_globals)
            assert all(v.shape == (24, 16, 3) for v in views.student_locals)

    def test_invalid_params_rejected(self):
        with pytest.raises(ConfigError):
            CropParams(local_rate=(0.0, 0.5))
        with pytest.raises(ConfigError):
            CropParams(global_rate=(0.8, 0.4))
        with pytest.raises(ConfigError):
            CropParams(aspect_range=(-1.0, 0.5))
        with pytest.raises(ConfigError):
            CropParams(n_local=-1)


class TestPhotometric:
    def test_jitter_outputs_stay_in_range(self):
        rng = np.random.default_rng(7)
        img = rand_img(rng)
        p = CropParams(n_local=2)
        for seed in range(10):
            views = multi_crop_views(img, p, np.random.default_rng(seed))
            for v in views.teacher_globals + views.student_globals + views.student_locals:
                assert v.min() >= 0.0 and v.max() <= 1.0

    def test_random_erase_changes_a_region_only(self):
        rng = np.random.default_rng(8)
        img = rand_img(rng)
        out = random_erase(img, np.random.default_rng(3), prob=1.0)
        diff = np.abs(out - img).sum(axis=-1) > 0
        assert 0 < diff.sum() < img.shape[0] * img.shape[1]
        rows = np.flatnonzero(diff.any(axis=1))
        cols = np.flatnonzero(diff.any(axis=0))
        assert diff[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].all()  # a solid rectangle

    def test_random_erase_prob_zero_is_identity(self):
        rng = np.random.default_rng(9)
        img = rand_img(rng)
        np.testing.assert_array_equal(random_erase(img, np.random.default_rng(0), prob=0.0), img)
