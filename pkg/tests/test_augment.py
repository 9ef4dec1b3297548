import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsrace import augment as A
from capsrace.augment import PerturbationConfig

CFG = PerturbationConfig()

images = st.integers(2, 12).flatmap(
    lambda h: st.integers(2, 12).flatmap(
        lambda w: st.sampled_from([3, 6]).flatmap(
            lambda c: arrays(np.uint8, (h, w, c)))))

IDENTITY = {
    "brightness": {"factor": 1.0},
    "contrast": {"factor": 1.0},
    "rotation": {"angle_deg": 0.0},
    "salt_pepper": {"prob": 0.0, "seed": 5},
    "gaussian_blur": {"sigma": 0.0},
    "cutoff": {"area": 0.0, "top": 1, "left": 1},
    "reflection": {"intensity": 0.0, "center": 0.3},
}


@settings(max_examples=60, deadline=None)
@given(img=images, kind=st.sampled_from(sorted(IDENTITY)))
def test_identity_parameters_exact(img, kind):
    out = A.apply(kind, IDENTITY[kind], img, CFG)
    assert np.array_equal(out, img) and out is not img


@settings(max_examples=60, deadline=None)
@given(img=images)
def test_hsv_zero_shift_within_one(img):
    out = A.apply("hsv_shift", {"hue_deg": 0.0, "sat": 1.0, "val": 1.0}, img, CFG)
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 1


@settings(max_examples=80, deadline=None)
@given(img=images, kind=st.sampled_from(A.KINDS), seed=st.integers(0, 2**32 - 1))
def test_outputs_in_range_same_shape_and_pure(img, kind, seed):
    before = img.copy()
    rng = np.random.default_rng(seed)
    params = A.sample_params(kind, CFG, rng, img.shape)
    out = A.apply(kind, params, img, CFG)
    assert out.dtype == np.uint8 and out.shape == img.shape
    assert np.array_equal(img, before)
    assert np.array_equal(out, A.apply(kind, params, img, CFG))  # deterministic given params


def test_salt_only_full_probability_saturates(rng):
    img = rng.integers(0, 256, (8, 9, 6), dtype=np.uint8)
    out = A.apply("salt_pepper", {"prob": 1.0, "salt_ratio": 1.0, "seed": 1}, img)
    assert np.all(out == 255)


def test_out_of_range_parameter_rejected():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(A.ParameterRangeError):
        A.apply("brightness", {"factor": 3.0}, img, CFG)
    with pytest.raises(A.ParameterRangeError):
        A.apply("cutoff", {"area": 0.5}, img, CFG)


def test_rotation_fills_corners_black():
    img = np.full((21, 21, 3), 200, np.uint8)
    out = A.rotation(img, 30.0)
    assert out[0, 0].tolist() == [0, 0, 0]
    assert out[10, 10].tolist() == [200, 200, 200]


def test_blur_keeps_constant_image_constant():
    img = np.full((10, 12, 6), 77, np.uint8)
    assert np.array_equal(A.gaussian_blur(img, 1.3), img)


def test_blur_kernel_radius_and_normalisation():
    k = A.gaussian_kernel(1.5)
    assert len(k) == 2 * 5 + 1 and k.sum() == pytest.approx(1.0)


def test_cutoff_area_bounded():
    img = np.full((40, 56, 3), 255, np.uint8)
    out = A.cutoff(img, 0.1, top=10, left=10)
    black = np.all(out == 0, axis=-1).sum()
    assert 0 < black <= 0.1 * 40 * 56


def test_brightness_scales_and_clamps():
    img = np.array([[[100, 200, 10]]], np.uint8)
    assert A.brightness(img, 1.4).tolist() == [[[140, 255, 14]]]


def test_degenerate_rotation_phi_is_identity(rng):
    cfg = PerturbationConfig(phi_enabled=["rotation"], rotation_deg=(0.0, 0.0))
    img = rng.integers(0, 256, (8, 8, 6), dtype=np.uint8)
    assert np.array_equal(A.sample_phi(cfg, img, rng), img)


def test_sample_phi_seeded_determinism():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 6), dtype=np.uint8)
    a = [A.sample_phi(CFG, img, np.random.default_rng(42)) for _ in range(2)]
    assert np.array_equal(*a)


def test_sample_phi_uniform_kind_selection():
    rng = np.random.default_rng(7)
    img = np.zeros((4, 4, 3), np.uint8)
    counts = dict.fromkeys(A.PHI_KINDS, 0)
    n = 10_000
    for _ in range(n):
        counts[A.sample_phi(CFG, img, rng, return_kind=True)[1]] += 1
    for c in counts.values():
        assert abs(c / n - 1 / 6) <= 0.02


def test_empty_phi_set_is_config_error():
    with pytest.raises(A.AugmentConfigError):
        A.sample_phi(PerturbationConfig(phi_enabled=[]), np.zeros((4, 4, 3), np.uint8), np.random.default_rng())


def test_phi_compose_option_applies_all(rng):
    cfg = PerturbationConfig(phi_compose=True, phi_enabled=["brightness", "contrast"],
                             brightness=(2.0, 2.0), contrast=(1.0, 1.0))
    img = np.full((4, 4, 3), 50, np.uint8)
    out, kind = A.sample_phi(cfg, img, rng, return_kind=True)
    assert kind == "compose" and np.all(out == 100)


def test_sim2real_disabled_is_identity(rng):
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = A.sim2real_pipeline(PerturbationConfig(sim2real_enabled=[]), img, rng)
    assert np.array_equal(out, img) and out is not img


def test_sim2real_zero_hsv_and_zero_reflection(rng):
    cfg = PerturbationConfig(sim2real_enabled=["hsv_shift", "reflection"], hue_shift_deg=(0, 0),
                             saturation_scale=(1, 1), value_scale=(1, 1), reflection_intensity=(0, 0))
    img = rng.integers(0, 256, (8, 8, 6), dtype=np.uint8)
    out = A.sim2real_pipeline(cfg, img, rng)
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 1


def test_sim2real_order_is_fixed():
    # salt comes last, so with full salt the result is white regardless of earlier steps
    cfg = PerturbationConfig(sim2real_enabled=["salt_pepper", "hsv_shift"], salt_pepper=(1.0, 1.0), salt_ratio=1.0)
    out = A.sim2real_pipeline(cfg, np.zeros((5, 5, 3), np.uint8), np.random.default_rng(0))
    assert np.all(out == 255)


def test_sim2real_rejects_phi_only_kind():
    with pytest.raises(ValueError):
        PerturbationConfig(sim2real_enabled=["rotation"])


def test_config_rejects_reversed_range():
    with pytest.raises(ValueError):
        PerturbationConfig(brightness=(1.2, 0.8))


@settings(max_examples=30, deadline=None)
@given(img=images)
def test_translate_default_identity_and_invert_involution(img):
    assert np.array_equal(A.translate(img), img)
    inv = A.translate(img, "invert")
    assert np.array_equal(inv, 255 - img)
    assert np.array_equal(A.translate(inv, "invert"), img)


def test_unknown_translator():
    with pytest.raises(A.AugmentConfigError):
        A.get_translator("cyclegan")


def test_contact_sheet_shape(rng):
    img = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    sheet = A.contact_sheet(img, CFG, rng, samples_per_kind=3)
    assert sheet.shape == (len(A.KINDS) * 12, 4 * 14, 3)
