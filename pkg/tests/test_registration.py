import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from virtualstain.core import ChannelImage, RGBImage, RegistrationGateError
from virtualstain.metrics import lab_ssim, rgb_to_lab
from virtualstain.phantom import PhantomSpec, random_field, render_phantom, warp_with_field
from virtualstain.registration import (ControlPointSet, apply_transform, check_gate,
                                       fit_nonrigid, leave_one_out_report, match_fov,
                                       read_control_points, registration_report,
                                       write_control_points)


def scattered(n, seed, size=500.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(10, size - 10, (n, 2))


@given(st.integers(0, 10_000))
def test_affine_points_reproduced(seed):
    rng = np.random.default_rng(seed)
    ref = scattered(30, seed)
    A = np.eye(2) + rng.normal(0, 0.05, (2, 2))
    t = rng.normal(0, 20, 2)
    mov = ref @ A.T + t
    tr = fit_nonrigid(ControlPointSet(ref, mov))
    assert np.max(np.abs(tr(ref) - mov)) < 1e-4
    # and anywhere inside the hull
    q = rng.uniform(100, 400, (50, 2))
    assert np.max(np.abs(tr(q) - (q @ A.T + t))) < 1e-4


def test_quadratic_field_reproduced():
    ref = scattered(40, 1)
    u, v = ref[:, 0] / 500, ref[:, 1] / 500
    mov = ref + np.column_stack([3 * u * u - 2 * u * v, 4 * v * v + u])
    tr = fit_nonrigid(ControlPointSet(ref, mov))
    assert np.max(np.abs(tr(ref) - mov)) < 1e-6


def test_interpolates_nonpolynomial_points():
    ref = scattered(30, 2)
    mov = ref + 5 * np.sin(ref / 50)
    tr = fit_nonrigid(ControlPointSet(ref, mov))
    assert np.max(np.abs(tr(ref) - mov)) < 1e-6


def test_too_few_or_degenerate_points():
    ref = scattered(11, 0)
    with pytest.raises(ValueError):
        fit_nonrigid(ControlPointSet(ref, ref))
    line = np.column_stack([np.arange(20.0), 2 * np.arange(20.0)])
    with pytest.raises(ValueError):
        fit_nonrigid(ControlPointSet(line, line))
    with pytest.raises(ValueError):
        ControlPointSet(np.zeros((12, 2)), np.zeros((12, 2)))


def test_extrapolation_flagged():
    ref = scattered(20, 3)
    tr = fit_nonrigid(ControlPointSet(ref, ref + 1.0))
    flags = tr.extrapolated(np.array([[250.0, 250.0], [-500.0, -500.0]]))
    assert list(flags) == [False, True]
    assert np.allclose(tr(np.array([[-500.0, -500.0]])), [[-499.0, -499.0]])


def test_csv_roundtrip(tmp_path):
    pts = ControlPointSet(scattered(15, 4), scattered(15, 5))
    write_control_points(pts, tmp_path / "p.csv")
    back = read_control_points(tmp_path / "p.csv")
    assert np.array_equal(back.ref, pts.ref) and np.array_equal(back.mov, pts.mov)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_control_points(tmp_path / "bad.csv")


def test_match_fov_rescales():
    ref = ChannelImage(np.zeros((100, 100)), pitch_nm=250)
    mov = RGBImage(np.ones((50, 50, 3)), pitch_nm=500)
    out = match_fov(ref, mov)
    assert out.shape == (100, 100) and out.pitch_nm == 250
    with pytest.raises(ValueError):
        match_fov(ref, RGBImage(np.ones((5, 5, 3))))


def test_gate():
    ref = scattered(30, 6)
    rng = np.random.default_rng(0)
    good = leave_one_out_report(ControlPointSet(ref, ref + 2.0), gate_px=2.0)
    assert good.passed
    check_gate(good)
    bad = leave_one_out_report(ControlPointSet(ref, ref + rng.normal(0, 8, ref.shape)), gate_px=2.0)
    assert not bad.passed
    with pytest.raises(RegistrationGateError) as err:
        check_gate(bad)
    assert err.value.report is bad


def test_recovers_phantom_warp():
    ph = render_phantom(PhantomSpec(384, 384), 3)
    field = random_field(ph.he.shape, 10.0, seed=3)
    warped, pts = warp_with_field(ph.he, field, n_points=30, seed=3)
    _, hold = warp_with_field(ph.he, field, n_points=30, seed=103)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tr = fit_nonrigid(pts)
    rep = registration_report(tr, hold)
    assert rep.mean_residual_px <= 1.0
    reg = apply_transform(tr, warped, ph.he.shape)
    lo = np.floor(pts.ref.min(axis=0)).astype(int)
    hi = np.ceil(pts.ref.max(axis=0)).astype(int)
    sl = np.s_[lo[1]:hi[1], lo[0]:hi[0]]
    assert lab_ssim(rgb_to_lab(reg.pixels[sl]), rgb_to_lab(ph.he.pixels[sl])) >= 0.95


def test_identity_pairs_map_dense_grid_to_itself():
    ref = scattered(12, 7)
    tr = fit_nonrigid(ControlPointSet(ref, ref))
    yy, xx = np.mgrid[0:500:7, 0:500:7]
    q = np.column_stack([xx.ravel(), yy.ravel()]).astype(float)
    assert np.max(np.abs(tr(q) - q)) < 1e-6


def test_holdout_equal_to_fit_points():
    ref = scattered(25, 8)
    pts = ControlPointSet(ref, ref + 4 * np.cos(ref / 40))
    rep = registration_report(fit_nonrigid(pts), pts)
    assert rep.mean_residual_px <= 1e-6 and rep.passed


def test_mismatched_points_trip_gate_at_scatter_scale():
    rng = np.random.default_rng(1)
    ref = scattered(30, 9)
    scatter = 15.0
    pts = ControlPointSet(ref, ref + rng.normal(0, scatter, ref.shape))
    rep = leave_one_out_report(pts, gate_px=2.0)
    assert not rep.passed
    assert 0.3 * scatter < rep.mean_residual_px < 5 * scatter


def test_field_samples_recovered():
    ph = render_phantom(PhantomSpec(512, 512), 0)
    field = random_field(ph.he.shape, 10.0, seed=0)
    _, pts = warp_with_field(ph.he, field, n_points=30, seed=0)
    tr = fit_nonrigid(pts)
    rng = np.random.default_rng(2)
    lo, hi = pts.ref.min(axis=0), pts.ref.max(axis=0)
    q = rng.uniform(lo, hi, (100, 2))
    err = np.hypot(*(tr(q) - (q + field(q))).T)
    assert err.mean() <= 1.0


def test_apply_identity_and_translation():
    img = np.ones((40, 50, 3))
    img[20, 30] = [0.0, 0.0, 0.0]
    moving = RGBImage(img)
    ref = scattered(12, 10, size=40.0)
    ident = fit_nonrigid(ControlPointSet(ref, ref))
    assert np.allclose(apply_transform(ident, moving, (40, 50)).pixels, img, atol=1e-9)
    shifted = fit_nonrigid(ControlPointSet(ref, ref + [5.0, 3.0]))
    out = apply_transform(shifted, moving, (40, 50)).pixels
    expected = np.ones_like(img)
    expected[17, 25] = 0.0
    assert np.allclose(out, expected, atol=1e-6)


def test_match_fov_scale_and_smooth_roundtrip():
    ref = ChannelImage(np.zeros((64, 64)), pitch_nm=250)
    yy, xx = np.mgrid[0:128, 0:128] / 128.0
    smooth = 0.5 + 0.25 * np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy)
    img = RGBImage(np.repeat(smooth[..., None], 3, axis=-1), pitch_nm=250)
    small = match_fov(ChannelImage(np.zeros((4, 4)), pitch_nm=500), img)
    assert small.shape == (64, 64)
    big = match_fov(ChannelImage(np.zeros((4, 4)), pitch_nm=250), small)
    assert big.shape == (128, 128)
    inner = np.s_[4:-4, 4:-4]
    mse = np.mean((big.pixels[inner] - img.pixels[inner]) ** 2)
    assert 10 * np.log10(1.0 / mse) >= 40.0
    same = match_fov(ref, img)
    assert np.array_equal(same.pixels, img.pixels)
