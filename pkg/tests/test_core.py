import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from virtualstain.core import (ChannelImage, MultiChannelImage, RGBImage, RunManifest,
                               config_digest, load_image, quantize, read_manifest, save_image,
                               write_manifest)
from virtualstain.sampling import bilinear_sample, resize_bilinear


def test_images_are_immutable(rng):
    c = ChannelImage(rng.random((4, 4)))
    with pytest.raises(ValueError):
        c.pixels[0, 0] = 1.0


def test_range_and_shape_validation():
    with pytest.raises(ValueError):
        ChannelImage(np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        ChannelImage(np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        RGBImage(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ChannelImage(np.zeros((3, 3)), pitch_nm=0)
    with pytest.raises(ValueError):
        MultiChannelImage(ChannelImage(np.zeros((3, 3))), ChannelImage(np.zeros((3, 3))),
                          ChannelImage(np.zeros((3, 4))))


@given(arrays(np.float64, (7,), elements=st.floats(0, 1)))
def test_quantize_round_half_up(x):
    q = quantize(x, 8)
    assert np.all(np.abs(q / 255.0 - x) <= 0.5 / 255 + 1e-12)
    assert quantize(np.array([0.5 / 255]), 8)[0] == 1


@pytest.mark.parametrize("suffix", [".png", ".tif"])
def test_channel_roundtrip_16bit(tmp_path, rng, suffix):
    c = ChannelImage(rng.random((13, 9)), pitch_nm=312.5)
    save_image(c, tmp_path / f"c{suffix}")
    back = load_image(tmp_path / f"c{suffix}", "channel")
    assert back.pitch_nm == 312.5
    assert np.max(np.abs(back.pixels - c.pixels)) <= 0.5 / 65535 + 1e-12
    save_image(back, tmp_path / f"d{suffix}")
    assert load_image(tmp_path / f"d{suffix}", "channel") == back


@pytest.mark.parametrize("suffix", [".png", ".tif"])
def test_rgb_roundtrip(tmp_path, rng, suffix):
    img = RGBImage(rng.random((6, 5, 3)), pitch_nm=500)
    save_image(img, tmp_path / f"x{suffix}")
    back = load_image(tmp_path / f"x{suffix}", "rgb")
    assert back.pitch_nm == 500
    assert np.array_equal(np.round(back.pixels * 255), quantize(img.pixels, 8))


def test_load_errors(tmp_path, rng):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "none.png", "channel")
    save_image(RGBImage(rng.random((4, 4, 3))), tmp_path / "rgb.png")
    with pytest.raises(ValueError, match="1 channel"):
        load_image(tmp_path / "rgb.png", "channel")
    save_image(ChannelImage(rng.random((4, 4))), tmp_path / "g.png")
    with pytest.raises(ValueError, match="3 color"):
        load_image(tmp_path / "g.png", "rgb")
    with pytest.raises(ValueError):
        save_image(ChannelImage(rng.random((4, 4))), tmp_path / "x.jpg")


def test_missing_pitch_defaults(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "plain.png")
    assert load_image(tmp_path / "plain.png", "channel").pitch_nm == 250.0
    assert load_image(tmp_path / "plain.png", "channel", pitch_nm=100).pitch_nm == 100


def test_manifest_roundtrip(tmp_path):
    m = RunManifest(seed=3, config_digest=config_digest({"a": 1}),
                    inputs={"x": "y"}, reports={"r": {"v": 1.5}})
    write_manifest(m, tmp_path / "m.json")
    back = read_manifest(tmp_path / "m.json")
    assert back == m and back.tool_version


def test_manifest_rejects_malformed(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.json")
    (tmp_path / "extra.json").write_text(json.dumps({"seed": 1, "config_digest": "x", "zzz": 1}))
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "extra.json")


def test_config_digest_is_order_independent():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_bilinear_exact_on_nodes_and_affine(rng):
    img = rng.random((6, 7))
    yy, xx = np.mgrid[0:6, 0:7]
    assert np.array_equal(bilinear_sample(img, xx.ravel(), yy.ravel()), img.ravel())
    plane = 0.3 * xx + 0.2 * yy
    x, y = rng.uniform(0, 6, 50), rng.uniform(0, 5, 50)
    assert np.allclose(bilinear_sample(plane, x, y), 0.3 * x + 0.2 * y)


def test_resize_identity(rng):
    img = rng.random((9, 11, 3))
    assert np.allclose(resize_bilinear(img, (9, 11)), img)
