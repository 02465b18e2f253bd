import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from istar.data import (PatchSampler, bicubic_resize, bicubic_upscale, crop_to_multiple, degrade,
                        load_dataset, load_png, make_corpus, make_pair, quantize, sample_batch,
                        save_png, to_uint8, write_corpus, write_lr_cache)
from oracles import resize_loops


def test_png_byte_audit(tmp_path):
    raw = np.array([[[0, 0, 0], [128, 128, 128]], [[255, 255, 255], [64, 64, 64]]], np.uint8)
    path = tmp_path / "k.png"
    Image.fromarray(raw, mode="RGB").save(path)
    img = load_png(path)
    assert img.shape == (3, 2, 2) and img.dtype == np.float32
    np.testing.assert_array_equal(img[0], np.array([[0, 128], [255, 64]], np.float32) / np.float32(255))
    out = tmp_path / "again.png"
    save_png(img, out)
    assert out.read_bytes() and np.array_equal(np.asarray(Image.open(out)), raw)


def test_all_black_png(tmp_path):
    path = tmp_path / "black.png"
    Image.new("RGB", (5, 4)).save(path)
    assert not load_png(path).any()


def test_save_load_quantization_bound(tmp_path):
    img = np.random.default_rng(0).uniform(-0.2, 1.2, (3, 7, 9))
    path = tmp_path / "q.png"
    save_png(img, path)
    back = load_png(path)
    assert np.max(np.abs(back - np.clip(img, 0, 1))) <= 1 / 510 + 1e-7
    np.testing.assert_array_equal(back, quantize(img))


def test_rounding_is_half_away_from_zero():
    assert to_uint8(np.array([0.5 / 255, 1.5 / 255, 2.5 / 255]) + 1e-12).tolist() == [1, 2, 3]
    assert to_uint8(np.array([-1.0, 2.0])).tolist() == [0, 255]


def test_load_png_rejects_other_inputs(tmp_path):
    grey = tmp_path / "grey.png"
    Image.new("L", (4, 4)).save(grey)
    with pytest.raises(ValueError):
        load_png(grey)
    jpg = tmp_path / "x.jpg"
    Image.new("RGB", (4, 4)).save(jpg, format="JPEG")
    with pytest.raises(ValueError):
        load_png(jpg)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image")
    with pytest.raises(Exception):
        load_png(junk)


def test_bicubic_constant_is_preserved():
    img = np.full((3, 9, 7), 0.37)
    for h, w in [(18, 14), (4, 4), (27, 21), (5, 6)]:
        np.testing.assert_allclose(bicubic_resize(img, h, w), 0.37, atol=1e-12)


def test_bicubic_reproduces_linear_ramp():
    h, w, r = 10, 12, 2
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    ramp = (0.1 + 0.02 * yy + 0.03 * xx)[None]
    up = bicubic_resize(ramp, r * h, r * w)[0]
    # output pixel i sits at input coordinate (i + 0.5) / r - 0.5
    u = (np.arange(r * h) + 0.5) / r - 0.5
    v = (np.arange(r * w) + 0.5) / r - 0.5
    expected = 0.1 + 0.02 * u[:, None] + 0.03 * v[None, :]
    np.testing.assert_allclose(up[4:-4, 4:-4], expected[4:-4, 4:-4], atol=1e-12)


@pytest.mark.parametrize("size,out", [((8, 8), (4, 4)), ((7, 9), (14, 18)), ((12, 10), (4, 5)),
                                      ((6, 6), (18, 18))])
def test_bicubic_matches_double_loop_oracle(size, out):
    img = np.random.default_rng(1).uniform(0, 1, size)
    np.testing.assert_allclose(bicubic_resize(img[None], *out)[0], resize_loops(img, *out),
                               rtol=0, atol=1e-12)


def test_bicubic_rejects_degenerate_extents():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((3, 4, 4)), 0, 4)


def test_crop_to_multiple_odd_sizes():
    hr = np.random.default_rng(2).uniform(0, 1, (3, 401, 403)).astype(np.float32)
    pair = make_pair(hr, 2)
    assert pair.hr.shape == (3, 400, 402) and pair.lr.shape == (3, 200, 201)
    np.testing.assert_array_equal(pair.hr, hr[:, 0:400, 0:402])
    assert crop_to_multiple(hr, 4).shape == (3, 400, 400)
    np.testing.assert_array_equal(crop_to_multiple(hr, 4), hr[:, 0:400, 1:401])
    assert crop_to_multiple(hr, 3).shape == (3, 399, 402)


def test_pipeline_outputs_in_unit_range():
    hr = np.random.default_rng(3).choice([0.0, 1.0], (3, 32, 32)).astype(np.float32)
    lr = degrade(hr, 2)
    assert lr.min() >= 0 and lr.max() <= 1
    up = bicubic_upscale(lr, 2)
    assert up.min() >= 0 and up.max() <= 1


def small_pairs(n=4, size=40, r=2):
    return [make_pair(im, r, f"s{i}") for i, im in enumerate(make_corpus(n, size, seed=5))]


def test_sampler_determinism():
    pairs = small_pairs()
    a = [sample_batch(PatchSampler(8, seed=3), pairs, 4) for _ in range(1)]
    s1, s2 = PatchSampler(8, seed=3), PatchSampler(8, seed=3)
    for _ in range(5):
        (l1, h1), (l2, h2) = sample_batch(s1, pairs, 4), sample_batch(s2, pairs, 4)
        assert np.array_equal(l1, l2) and np.array_equal(h1, h2)
    assert a[0][0].shape == (4, 3, 8, 8) and a[0][1].shape == (4, 3, 16, 16)
    other = sample_batch(PatchSampler(8, seed=4), pairs, 4)
    assert not np.array_equal(other[0], a[0][0])


def test_sampler_step_is_random_access():
    pairs = small_pairs()
    seq = PatchSampler(8, seed=1)
    for _ in range(3):
        sample_batch(seq, pairs, 3)
    direct = sample_batch(PatchSampler(8, seed=1, step=3), pairs, 3)
    np.testing.assert_array_equal(sample_batch(seq, pairs, 3)[0], direct[0])


@pytest.mark.parametrize("augment", [False, True])
def test_patch_alignment_by_redegradation(augment):
    pairs = small_pairs(size=64)
    sampler = PatchSampler(16, seed=7, augment=augment)
    for _ in range(3):
        lr, hr = sample_batch(sampler, pairs, 4)
        for a, b in zip(lr, hr):
            again = degrade(b, 2)
            np.testing.assert_allclose(again[:, 4:-4, 4:-4], a[:, 4:-4, 4:-4], atol=1e-6)


def test_sampler_rejects_small_images():
    with pytest.raises(ValueError):
        sample_batch(PatchSampler(48), small_pairs(size=40), 1)
    with pytest.raises(ValueError):
        sample_batch(PatchSampler(8), [], 1)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6))
def test_degradation_commutes_with_cropping(i, j):
    hr = make_corpus(1, 64, seed=9)[0]
    lr = degrade(hr, 2)
    crop = hr[:, 2 * i:2 * i + 48, 2 * j:2 * j + 40]
    lr_crop = degrade(crop, 2)
    np.testing.assert_allclose(lr_crop[:, 4:-4, 4:-4], lr[:, i + 4:i + 20, j + 4:j + 16], atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 6, 6), elements=st.floats(-2, 2)))
def test_quantize_lands_on_grid(img):
    q = quantize(img)
    assert np.all((q >= 0) & (q <= 1))
    np.testing.assert_array_equal(np.round(q * 255), q * np.float32(255))


def test_corpus_and_dataset_roundtrip(tmp_path):
    a, b = make_corpus(6, 48, seed=0), make_corpus(6, 48, seed=0)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(im.shape == (3, 48, 48) for im in a)
    write_corpus(tmp_path, count=3, size=48, seed=0)
    pairs = load_dataset(tmp_path, 2)
    assert [p.source for p in pairs] == ["img_000", "img_001", "img_002"]
    np.testing.assert_array_equal(pairs[0].hr, a[0])
    assert write_lr_cache(tmp_path, 2) == 3
    cached = load_dataset(tmp_path, 2)
    np.testing.assert_array_equal(cached[1].lr, quantize(pairs[1].lr))
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nothing", 2)
