import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slicenet import tps_augment as A
from slicenet.image import Image2D
from oracles import bilinear_sample as scalar_bilinear


def test_kernel_values():
    assert A.tps_kernel(1.0) == 0.0
    assert A.tps_kernel(0.0) == 0.0
    assert A.tps_kernel(math.e) == pytest.approx(math.e**2, rel=1e-15)
    assert A.tps_kernel(math.e) == pytest.approx(7.389056, abs=1e-6)
    np.testing.assert_allclose(A.tps_kernel(np.array([0.0, 2.0])), [0.0, 4 * math.log(2)])
    with pytest.raises(ValueError):
        A.tps_kernel(-1.0)


def test_control_grid_spans_image():
    pts = A.ControlGrid(5, 5, 64, 64).points
    assert pts.shape == (25, 2)
    assert pts.min() == 0.0 and pts.max() == 63.0


def _random_fit(seed, grid=(5, 5), size=64, jitter=4.0):
    rng = np.random.default_rng(seed)
    cg = A.ControlGrid(grid[0], grid[1], size, size)
    disp = rng.uniform(-jitter, jitter, size=(len(cg), 2))
    return cg, disp, A.fit_tps(cg, disp)


def test_zero_displacement_fit_is_identity():
    cg = A.ControlGrid(5, 5, 64, 64)
    w = A.fit_tps(cg, np.zeros((25, 2)))
    assert not w.coefficients.any()
    np.testing.assert_array_equal(w.affine, np.eye(2))
    assert not w.translation.any()
    assert w.is_identity()


def test_pure_translation_absorbed_by_affine():
    cg = A.ControlGrid(5, 5, 64, 64)
    w = A.fit_tps(cg, np.tile([3.0, -2.0], (25, 1)))
    assert np.abs(w.coefficients).max() < 1e-12
    np.testing.assert_allclose(w.translation, [3.0, -2.0], atol=1e-10)
    np.testing.assert_allclose(w.affine, np.eye(2), atol=1e-12)


def test_fit_interpolates_control_points():
    cg, disp, w = _random_fit(0)
    assert np.abs(w.displacement(cg.points) - disp).max() < 1e-8
    np.testing.assert_allclose(w(cg.points), cg.points + disp, atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_side_conditions(seed):
    cg, _, w = _random_fit(seed, grid=(4, 6), size=256, jitter=8.0)
    assert np.abs(w.coefficients.sum(axis=0)).max() < 1e-9
    assert np.abs(cg.points.T @ w.coefficients).max() < 1e-9


def test_degenerate_grid_rejected():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    with pytest.raises(A.TpsFitError, match="condition"):
        A.fit_tps(pts, np.zeros((5, 2)))
    with pytest.raises(A.TpsFitError):
        A.fit_tps(np.zeros((3, 2)), np.zeros((3, 2)))


# -- sampling & warps --------------------------------------------------------


def test_bilinear_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(9, 7))
    ys = rng.uniform(-1, 9, 200)
    xs = rng.uniform(-1, 7, 200)
    got = A.bilinear_sample(img, ys, xs, fill=-5.0)
    ref = [scalar_bilinear(img, y, x, -5.0) for y, x in zip(ys, xs)]
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_identity_warp_is_bitwise():
    img = Image2D(np.random.default_rng(2).normal(size=(32, 40)))
    w = A.fit_tps(A.ControlGrid(5, 5, 32, 40), np.zeros((25, 2)))
    assert A.warp_image(img, w).pixels.tobytes() == img.pixels.tobytes()


def test_translation_moves_bright_pixel():
    px = np.zeros((20, 30))
    px[7, 5] = 100.0
    img = Image2D(px)
    w = A.fit_tps(A.ControlGrid(4, 4, 20, 30), np.tile([10.0, 0.0], (16, 1)))
    out = A.warp_image(img, w, fill=-1.0).pixels
    assert np.unravel_index(out.argmax(), out.shape) == (7, 15)
    assert out[7, 15] == pytest.approx(100.0, abs=1e-9)
    assert np.all(out[:, :10] == -1.0)  # vacated border


def smooth_image(size=64, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    img = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 2.0, 2)
        img += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return img


def test_warp_unwarp_round_trip():
    # interior pixels only: near the border the forward warp exposes fill that no inverse can recover
    for seed in range(3):
        cg, disp, w = _random_fit(seed, jitter=4.0)
        inv = A.fit_tps(cg, -disp)
        img = Image2D(smooth_image(seed=seed))
        back = A.warp_image(A.warp_image(img, w), inv).pixels
        rng_ = img.pixels.max() - img.pixels.min()
        m = 8
        mae = np.abs(back - img.pixels)[m:-m, m:-m].mean()
        assert mae < 0.02 * rng_


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_warp_preserves_intensity_range(seed, fill):
    rng = np.random.default_rng(seed)
    img = Image2D(rng.normal(size=(24, 24)))
    cg = A.ControlGrid(3, 3, 24, 24)
    out = A.warp_image(img, A.fit_tps(cg, rng.uniform(-6, 6, (9, 2))), fill=fill).pixels
    lo, hi = min(img.pixels.min(), fill), max(img.pixels.max(), fill)
    assert out.min() >= lo - 1e-12 and out.max() <= hi + 1e-12


def test_random_rigid_zero_bounds_identity():
    img = Image2D(np.random.default_rng(3).normal(size=(16, 16)))
    out = A.random_rigid(img, 0.0, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_full_rotation_is_identity():
    img = Image2D(smooth_image(32))
    out = A.rigid_transform(img, 0.0, 0.0, 360.0)
    assert np.abs(out.pixels - img.pixels).max() < 1e-9


def test_rotation_quarter_turn():
    px = np.arange(25.0).reshape(5, 5)
    out = A.rigid_transform(Image2D(px), 0.0, 0.0, 90.0).pixels
    # +90 deg in (x right, y down) coordinates maps content at (x, y) to (c - (y - c), c + (x - c))
    np.testing.assert_allclose(out, np.rot90(px, k=-1), atol=1e-12)


def test_random_rigid_deterministic_and_bounds():
    img = Image2D(np.random.default_rng(4).normal(size=(16, 16)))
    a = A.random_rigid(img, 5, 10, np.random.default_rng(7))
    b = A.random_rigid(img, 5, 10, np.random.default_rng(7))
    assert a.pixels.tobytes() == b.pixels.tobytes()
    with pytest.raises(ValueError):
        A.random_rigid(img, -1, 0, np.random.default_rng(0))


# -- class augmentation ------------------------------------------------------


def thumbs(n, size=8, seed=0, prefix="img"):
    rng = np.random.default_rng(seed)
    return [Image2D(rng.normal(size=(size, size)), id=f"{prefix}{i}") for i in range(n)]


def test_augment_counts_cartesian_product():
    out = A.augment_class(thumbs(3), (2, 3, 4), A.Bounds(2.0, 5.0, 1.0, (3, 3)), seed=1)
    assert len(out) == 3 * 2 * 3 * 4
    provs = [p for _, p in out]
    assert len({(p.source_id, p.variant) for p in provs}) == len(out)
    first = [p for p in provs if p.source_id == "img0"]
    assert len({(p.tx, p.ty) for p in first}) == 2
    assert len({p.angle for p in first}) == 3
    assert len({p.grid_seed for p in first}) == 4


def test_augment_single_variant_zero_bounds_reproduces_original():
    img = thumbs(1, size=16)[0]
    (out, prov), = A.augment_class([img], (1, 1, 1), A.Bounds(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(out.pixels, img.pixels)
    assert prov.tx == 0.0 and prov.angle == 0.0


def test_augment_deterministic_and_order_independent():
    imgs = thumbs(4)
    b = A.Bounds(2.0, 5.0, 1.0, (3, 3))
    a = A.augment_class(imgs, (2, 1, 2), b, seed=3)
    again = A.augment_class(imgs, (2, 1, 2), b, seed=3)
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for (x, _), (y, _) in zip(a, again))
    # streams are keyed by source id, so one image alone gets the same variants
    solo = A.augment_class(imgs[2:3], (2, 1, 2), b, seed=3)
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for (x, _), (y, _) in zip(solo, a[8:12]))


def test_clinical_liver_and_leg_rows():
    plan = A.AugmentationPlan()
    assert plan.expected_count("liver", 2684) == 32208
    assert plan.expected_count("legs", 477) == 24804
    assert 24804 / 477 == 52 == 2 * 2 * 13


def test_clinical_ratios_reconstruct_preset():
    for name, n in A.CLINICAL_COUNTS.items():
        assert A.CLINICAL_AUGMENTED[name] % n == 0
        ratio = A.CLINICAL_AUGMENTED[name] // n
        assert ratio == 4 * A.CLINICAL_PRESET[name][2]
    assert {k: A.CLINICAL_AUGMENTED[k] // A.CLINICAL_COUNTS[k] for k in A.CLINICAL_COUNTS} == {
        "legs": 52, "pelvis": 212, "liver": 12, "lungs": 44, "neck": 52}
    assert sum(A.CLINICAL_AUGMENTED.values()) == 128056
    assert sum(A.CLINICAL_COUNTS.values()) == 4298


@pytest.mark.parametrize("counts", [(1, 1, 1), (2, 2, 3), (1, 3, 2), (3, 1, 1)])
def test_augment_count_property(counts):
    assert len(A.augment_class(thumbs(5, size=6), counts, A.Bounds(1.0, 2.0, 0.5, (2, 2)))) == 5 * math.prod(counts)


def test_plan_validation():
    with pytest.raises(ValueError):
        A.AugmentationPlan(counts={"liver": (0, 1, 1)})
    with pytest.raises(ValueError):
        A.AugmentationPlan(max_rotation=-1)
