import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from virtualstain.core import MultiChannelImage
from virtualstain.phantom import (PULSE_RATE_HZ, DisplacementField, GridSpec, PhantomSpec,
                                  ScanRecords, compress_event, generate_phantom, random_field,
                                  read_scan_records, reconstruct_grid, render_phantom,
                                  simulate_scan, warp_with_field, write_scan_records)

SMALL = PhantomSpec(height=128, width=160)


def test_phantom_deterministic():
    a = generate_phantom(SMALL, 5)
    b = generate_phantom(SMALL, 5)
    c = generate_phantom(SMALL, 6)
    assert a[0] == b[0] and a[1] == b[1]
    assert a[1] != c[1]


def test_nucleus_count_and_components():
    ph = render_phantom(PhantomSpec(256, 256), 0)
    expected = round(5.0 * 256 * 256 / 1e4)
    assert ph.n_nuclei == expected
    _, n = ndimage.label(ph.nuclei_mask)
    assert n == expected


def test_channel_contrast_follows_structures():
    ph = render_phantom(PhantomSpec(256, 256), 1)
    nr, rad, sc = (c.pixels for c in ph.channels.channels)
    nuc, extra = ph.nuclei_mask, ph.extranuclear_mask
    assert nr[nuc].mean() > nr[extra].mean()
    assert rad[extra].mean() > rad[nuc].mean()
    # nuclei look purple-blue (hematoxylin), background near white
    he = ph.he.pixels
    assert he[nuc, 2].mean() > he[nuc, 1].mean()


def test_phantom_size_validation():
    with pytest.raises(ValueError):
        PhantomSpec(height=32, width=128)


def test_scan_identity_zero_jitter():
    truth, _ = generate_phantom(SMALL, 2)
    grid = GridSpec(*truth.shape, truth.pitch_nm)
    recs = simulate_scan(truth, grid)
    assert len(recs) == truth.shape[0] * truth.shape[1]
    assert reconstruct_grid(recs, grid) == truth
    t = recs.timestamps_s
    assert np.all(np.diff(t) > 0)
    assert np.allclose(np.diff(t), 1.0 / PULSE_RATE_HZ)


def test_scan_jitter_keeps_records_near_nodes():
    truth, _ = generate_phantom(SMALL, 2)
    grid = GridSpec(64, 64, truth.pitch_nm, origin_nm=(1000.0, 1000.0))
    recs = simulate_scan(truth, grid, jitter_nm=50.0, seed=1)
    nx, ny = grid.node_positions()
    assert np.max(np.abs(recs.x_nm - nx)) <= 50 and np.max(np.abs(recs.y_nm - ny)) <= 50
    out = reconstruct_grid(recs, grid)
    ref = reconstruct_grid(simulate_scan(truth, grid), grid)
    assert np.mean(np.abs(out.to_array() - ref.to_array())) < 0.05


def test_scan_grid_outside_truth_raises():
    truth, _ = generate_phantom(SMALL, 2)
    with pytest.raises(ValueError):
        simulate_scan(truth, GridSpec(200, 200, truth.pitch_nm))


def test_reconstruct_fills_gaps():
    grid = GridSpec(3, 3, 1.0)
    x, y = grid.node_positions()
    keep = np.ones(9, bool)
    keep[4] = False  # drop the centre
    feats = np.tile([[0.2, 0.4, 0.6]], (9, 1))
    feats[1] = [0.6, 0.4, 0.2]
    recs = ScanRecords(np.arange(8), x[keep], y[keep], feats[keep])
    out = reconstruct_grid(recs, grid).to_array()
    # centre = mean of its four assigned neighbours
    assert np.allclose(out[1, 1], (feats[1] + feats[3] + feats[5] + feats[7]) / 4)


def test_records_roundtrip(tmp_path):
    truth, _ = generate_phantom(SMALL, 0)
    recs = simulate_scan(truth, GridSpec(8, 8, truth.pitch_nm), jitter_nm=20, seed=3)
    write_scan_records(recs, tmp_path / "r.csv")
    back = read_scan_records(tmp_path / "r.csv")
    assert np.array_equal(back.pulse_index, recs.pulse_index)
    assert np.array_equal(back.features, recs.features)
    assert np.array_equal(back.x_nm, recs.x_nm)
    assert back[3] == recs[3]


@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=40))
def test_compress_event(trace):
    v = compress_event(trace)
    assert 0.0 <= v <= 1.0
    assert v == min(1.0, max(abs(t) for t in trace))


def test_random_field_amplitude():
    f = random_field((200, 300), 10.0, seed=4)
    assert f.max_magnitude((200, 300)) == pytest.approx(10.0)


def test_warp_control_points_are_exact():
    _, he = generate_phantom(PhantomSpec(128, 128), 0)
    f = DisplacementField.translation(5.0, -3.0)
    warped, pts = warp_with_field(he, f, n_points=16, seed=0)
    assert np.allclose(pts.mov - pts.ref, [5.0, -3.0])
    # content moved by exactly the translation
    assert np.allclose(warped.pixels[20:100, 25:105], he.pixels[23:103, 20:100])


def test_multichannel_from_array_order(rng):
    arr = rng.random((4, 4, 3))
    img = MultiChannelImage.from_array(arr)
    assert np.array_equal(img.radiative.pixels, arr[..., 1])


def test_no_nuclei_leaves_only_noise():
    spec = PhantomSpec(128, 128, nuclei_density=0.0)
    nr = generate_phantom(spec, 0)[0].non_radiative.pixels
    assert nr.max() <= 3 * spec.noise_sigma + 1e-12


def test_nucleus_count_on_large_phantom():
    ph = render_phantom(PhantomSpec(1024, 1024), 0)
    _, n = ndimage.label(ph.nuclei_mask)
    expected = 5.0 * 1024 * 1024 / 1e4
    assert abs(n - expected) <= 0.1 * expected


def test_nuclear_and_extranuclear_contrast_are_complementary():
    ph = render_phantom(PhantomSpec(), 0)
    nr, rad, _ = (c.pixels for c in ph.channels.channels)
    assert (ph.nuclei_mask & ph.extranuclear_mask).mean() < 0.05
    hot_nr, hot_rad = nr > 0.5 * nr.max(), rad > 0.5 * rad.max()
    assert (hot_nr & hot_rad).mean() < 0.05


def test_two_by_two_scan():
    truth = MultiChannelImage.from_array(np.random.default_rng(0).random((2, 2, 3)))
    recs = simulate_scan(truth, GridSpec(2, 2, truth.pitch_nm))
    assert len(recs) == 4
    assert np.array_equal(recs.features, truth.to_array().reshape(4, 3))


def test_jittered_scan_close_to_direct_interpolation():
    spec = PhantomSpec(128, 128, noise_sigma=0.0)
    truth = MultiChannelImage.from_array(
        ndimage.gaussian_filter(generate_phantom(spec, 0)[0].to_array(), (2, 2, 0)))
    grid = GridSpec(120, 120, truth.pitch_nm)
    jitter = 50.0
    recs = simulate_scan(truth, grid, jitter_nm=jitter, seed=5)
    out = reconstruct_grid(recs, grid).to_array()
    ref = truth.to_array()[:120, :120]
    # local Lipschitz bound: |grad| * max displacement (in pixels), along each axis
    gy, gx = np.gradient(truth.to_array(), axis=(0, 1))
    lip = (np.abs(gx) + np.abs(gy))[:120, :120] * jitter / truth.pitch_nm
    err = np.abs(out - ref)
    assert err.mean() <= 2 * lip.mean() + 1e-9
    assert np.all(err <= 2 * ndimage.maximum_filter(lip, size=(3, 3, 1)) + 1e-6)


def test_compress_examples_and_scaling():
    assert compress_event([0, 0.4, -0.7, 0.1]) == 0.7
    assert compress_event(np.zeros(16)) == 0.0
    trace = np.random.default_rng(0).normal(0, 0.2, 64)
    assert compress_event(trace) == sorted(np.abs(trace))[-1]
    for c in (0.25, 0.5, 1.0):
        assert compress_event(c * trace) == pytest.approx(c * compress_event(trace))


def test_zero_warp_is_identity():
    _, he = generate_phantom(PhantomSpec(96, 96), 0)
    warped, pts = warp_with_field(he, random_field(he.shape, 0.0, 1), n_points=12)
    assert warped == he
    assert np.array_equal(pts.ref, pts.mov)


def test_translation_points_differ_exactly():
    _, he = generate_phantom(PhantomSpec(96, 96), 0)
    _, pts = warp_with_field(he, DisplacementField.translation(5.0, 3.0), n_points=20)
    assert np.array_equal(pts.mov, pts.ref + [5.0, 3.0])


def test_field_amplitude_on_dense_grid():
    f = random_field((256, 256), 10.0, seed=9)
    yy, xx = np.mgrid[0:256:0.5, 0:256:0.5]
    d = f(np.stack([xx, yy], axis=-1))
    peak = np.hypot(d[..., 0], d[..., 1]).max()
    assert 9.0 <= peak <= 10.0 + 1e-2
