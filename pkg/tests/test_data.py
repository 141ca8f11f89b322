import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusnet import data as D
from focusnet.exceptions import DataError, PairingError, ParameterError
from focusnet.pnm import write_pnm


def sample(image, mask=None, ident="s"):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if mask is None:
        mask = (image[:1] > 0.5).astype(np.float32)
    return D.SegmentationSample(image, np.asarray(mask, dtype=np.float32), ident)


def make_layout(root, stems, size=(3, 4), rgb=False):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    r = np.random.default_rng(0)
    for stem in stems:
        img = r.integers(0, 256, (*size, 3) if rgb else size, dtype=np.uint8)
        write_pnm(root / "images" / f"{stem}.{'ppm' if rgb else 'pgm'}", img)
        mask = np.zeros(size, dtype=np.uint8)
        mask[0, 0], mask[1, 1], mask[2, 2] = 255, 128, 127
        write_pnm(root / "masks" / f"{stem}.pgm", mask)


# loading ------------------------------------------------------------------------------


def test_load_sorted_pairs(tmp_path):
    make_layout(tmp_path, ["b", "a"])
    m = D.load_dataset(tmp_path)
    assert [s.identifier for s in m] == ["a", "b"]
    s = m[0]
    assert s.image.shape == (1, 3, 4) and s.mask.shape == (1, 3, 4)
    assert s.mask[0, 0, 0] == 1.0 and s.mask[0, 1, 1] == 1.0 and s.mask[0, 2, 2] == 0.0
    assert s.mask[0, 0, 1] == 0.0
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_load_rgb(tmp_path):
    make_layout(tmp_path, ["x"], rgb=True)
    m = D.load_dataset(tmp_path)
    assert m.channels == 3 and m[0].image.shape == (3, 3, 4)


def test_load_pixel_scaling(tmp_path):
    make_layout(tmp_path, ["x"])
    write_pnm(tmp_path / "images" / "x.pgm", np.array([[0, 255, 51, 102]] * 3, dtype=np.uint8))
    img = D.load_dataset(tmp_path)[0].image[0, 0]
    assert img.tolist() == [0.0, 1.0, np.float32(0.2), np.float32(0.4)]


def test_pairing_errors(tmp_path):
    make_layout(tmp_path, ["a", "b"])
    (tmp_path / "masks" / "b.pgm").unlink()
    with pytest.raises(PairingError, match="b"):
        D.load_dataset(tmp_path)


def test_orphan_mask_is_pairing_error(tmp_path):
    make_layout(tmp_path, ["a"])
    write_pnm(tmp_path / "masks" / "zz.pgm", np.zeros((3, 4), np.uint8))
    with pytest.raises(PairingError, match="zz"):
        D.load_dataset(tmp_path)


def test_missing_directory_and_bad_file(tmp_path):
    with pytest.raises(DataError):
        D.load_dataset(tmp_path)
    make_layout(tmp_path / "d", ["a"])
    (tmp_path / "d" / "images" / "a.pgm").write_bytes(b"P5 9 9 255\n")
    with pytest.raises(DataError, match="a.pgm"):
        D.load_dataset(tmp_path / "d")


def test_write_then_load_round_trip(tmp_path):
    m = D.synth_generate(3, 16, rng=4, channels=3)
    D.write_dataset(m, tmp_path)
    back = D.load_dataset(tmp_path)
    for a, b in zip(m, back):
        assert a.identifier == b.identifier
        assert np.array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-7


# resize ---------------------------------------------------------------------------


def test_resize_examples():
    s = sample([[0, 0], [2, 2]], mask=np.zeros((1, 2, 2)))
    assert D.resize(s, 1).image[0, 0, 0] == 1.0
    const = sample(np.full((5, 7), 0.3), mask=np.zeros((1, 5, 7)))
    out = D.resize(const, 4)
    assert out.image.shape == (1, 4, 4) and np.allclose(out.image, 0.3, atol=1e-7)
    s2 = sample(np.random.default_rng(0).random((6, 6)))
    same = D.resize(s2, 6)
    assert np.array_equal(same.image, s2.image) and same.image is not s2.image


def test_resize_half_pixel_upsample():
    s = sample([[0.0, 1.0]], mask=np.zeros((1, 1, 2)))
    row = D.resize(s, 4).image[0, 0]
    assert np.allclose(row, [0.0, 0.25, 0.75, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40))
def test_resize_keeps_mask_binary(seed, size):
    r = np.random.default_rng(seed)
    s = sample(r.random((9, 13)), (r.random((1, 9, 13)) > 0.5))
    out = D.resize(s, size)
    assert out.image.shape[1:] == out.mask.shape[1:] == (size, size)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}


# normalisation ----------------------------------------------------------------------


def test_normalize_example():
    stats = D.NormalizationStats(np.array([0.4]), np.array([0.2]))
    assert np.isclose(D.normalize(sample([[0.6]], np.zeros((1, 1, 1))), stats).image[0, 0, 0], 1.0)


def test_normalization_self_consistency():
    m = D.synth_generate(6, 24, rng=1, channels=3)
    stats = D.compute_stats(m)
    normed = D.normalize_manifest(m, stats)
    again = D.compute_stats(normed)
    assert np.all(np.abs(again.mean) < 1e-5)
    assert np.all(np.abs(again.std - 1) < 1e-5)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(m, normed))


def test_constant_channel_is_clamped(caplog):
    m = D.DatasetManifest([sample(np.full((4, 4), 0.7), np.zeros((1, 4, 4)), "c")], 1)
    stats = D.compute_stats(m)
    assert stats.clamped == (0,) and stats.std[0] == 1e-6
    assert "clamped" in caplog.text
    assert np.allclose(D.normalize(m[0], stats).image, 0.0, atol=1e-3)


def test_stats_text_round_trip(tmp_path):
    stats = D.NormalizationStats(np.array([0.1234567890123, 0.5, 0.75]), np.array([0.2, 0.3, 1e-6]))
    stats.save(tmp_path / "stats.txt")
    back = D.NormalizationStats.load(tmp_path / "stats.txt")
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)
    assert (tmp_path / "stats.txt").read_text().splitlines()[0].startswith("0: ")


# augmentation -------------------------------------------------------------------------


def test_double_flips_are_identity():
    s = D.synth_generate(1, 16, rng=3, channels=3)[0]
    for flip in (D.hflip, D.vflip):
        twice = flip(flip(s))
        assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)
    once = D.hflip(s)
    assert np.array_equal(once.image[:, :, 0], s.image[:, :, -1])
    assert np.array_equal(once.mask[:, :, 0], s.mask[:, :, -1])


def test_identity_augmentation():
    s = D.synth_generate(1, 16, rng=3, channels=3)[0]
    for seed in range(5):
        out = D.augment(s, D.AugmentationConfig.identity(), seed)
        assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)
    z = D.zoom(s, 1.0)
    assert np.array_equal(z.image, s.image)


def test_zoom_geometry():
    s = D.synth_generate(1, 20, rng=5)[0]
    for f in (0.8, 1.2, 0.5, 2.0):
        out = D.zoom(s, f)
        assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape
    # zooming in on a centred square makes it bigger, zooming out smaller
    img = np.zeros((1, 20, 20), np.float32)
    img[:, 7:13, 7:13] = 1
    sq = sample(img[0], img)
    assert D.zoom(sq, 1.5).mask.sum() > sq.mask.sum() > D.zoom(sq, 0.8).mask.sum()


def test_zoom_out_reflects_not_black():
    img = np.full((1, 10, 10), 0.8, np.float32)
    out = D.zoom(sample(img[0], np.zeros((1, 10, 10))), 0.5)
    assert np.allclose(out.image, 0.8, atol=1e-6)


def test_mask_binary_over_1000_draws():
    base = D.synth_generate(4, 16, rng=9, channels=3)
    cfg = D.AugmentationConfig(channel_shift_fraction=0.5)
    r = np.random.default_rng(0)
    for i in range(1000):
        s = base[i % 4]
        out = D.augment(s, cfg, r)
        assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_channel_shift_only_touches_image():
    s = D.synth_generate(1, 16, rng=2, channels=3)[0]
    cfg = D.AugmentationConfig(hflip_prob=0, vflip_prob=0, zoom_range=(1, 1), channel_shift=0.1,
                               channel_shift_fraction=1.0)
    out = D.augment(s, cfg, 1)
    assert np.array_equal(out.mask, s.mask)
    diff = (out.image - s.image).reshape(3, -1)
    unclipped = (s.image.reshape(3, -1) > 0.11) & (s.image.reshape(3, -1) < 0.89)
    for c in range(3):
        d = diff[c][unclipped[c]]
        assert np.allclose(d, d[0], atol=1e-6) and abs(d[0]) <= 0.1 + 1e-6


def test_augmentation_config_validation():
    with pytest.raises(ParameterError):
        D.AugmentationConfig(zoom_range=(1.1, 1.2)).validate()
    with pytest.raises(ParameterError):
        D.AugmentationConfig(hflip_prob=1.5).validate()


def test_expand_to_1700():
    base = D.synth_generate(267, 16, rng=0)
    out = D.expand_dataset(base, D.AugmentationConfig(), 1700, 7)
    assert len(out) == 1700
    assert [s.identifier for s in out.samples[:267]] == [s.identifier for s in base]
    assert len({s.identifier for s in out}) == 1700
    again = D.expand_dataset(base, D.AugmentationConfig(), 1700, 7)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(out.samples[-20:], again.samples[-20:]))


def test_expand_edge_cases():
    base = D.synth_generate(3, 16, rng=0)
    assert len(D.expand_dataset(base, D.AugmentationConfig(), 3, 0)) == 3
    with pytest.raises(ParameterError):
        D.expand_dataset(base, D.AugmentationConfig(), 2, 0)


# split ---------------------------------------------------------------------------------


@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_disjoint_and_exhaustive(n, fraction, seed):
    m = D.DatasetManifest([sample(np.zeros((2, 2)), np.zeros((1, 2, 2)), f"s{i}") for i in range(n)], 1)
    tr, va = D.split(m, fraction, seed)
    a, b = {s.identifier for s in tr}, {s.identifier for s in va}
    assert not a & b and a | b == {s.identifier for s in m}
    assert len(tr) >= 1 and len(va) >= 1
    tr2, _ = D.split(m, fraction, seed)
    assert [s.identifier for s in tr2] == [s.identifier for s in tr]


def test_split_examples():
    m = D.DatasetManifest([sample(np.zeros((2, 2)), np.zeros((1, 2, 2)), f"s{i}") for i in range(10)], 1)
    tr, va = D.split(m, 0.8, 0)
    assert (len(tr), len(va)) == (8, 2)
    for bad in (0.0, 1.0, 1.2):
        with pytest.raises(ParameterError):
            D.split(m, bad, 0)


# synthetic data ---------------------------------------------------------------------------


def predicate(row, col, cy, cx, a, b, theta):
    y, x = row + 0.5, col + 0.5
    u = (x - cx) * math.cos(theta) + (y - cy) * math.sin(theta)
    v = -(x - cx) * math.sin(theta) + (y - cy) * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def test_synth_mask_matches_predicate():
    m = D.synth_generate(4, 24, rng=12)
    assert len(m) == 4
    for s in m:
        ellipses = s.meta["ellipses"]
        assert 1 <= len(ellipses) <= 3
        assert s.mask.sum() > 0
        for row in range(24):
            for col in range(24):
                inside = any(predicate(row, col, *e) for e in ellipses)
                assert s.mask[0, row, col] == float(inside)


def test_synth_determinism_and_errors():
    a, b = D.synth_generate(3, 16, rng=5, channels=3), D.synth_generate(3, 16, rng=5, channels=3)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    assert a.channels == 3
    with pytest.raises(ParameterError):
        D.synth_generate(0, 16)
    with pytest.raises(ParameterError):
        D.synth_generate(2, 8)


def test_pipeline_is_deterministic(tmp_path):
    D.write_dataset(D.synth_generate(3, 20, rng=1), tmp_path)
    stats = D.compute_stats(D.load_dataset(tmp_path))

    def run():
        m = D.load_dataset(tmp_path)
        return D.normalize_manifest(D.DatasetManifest([D.resize(s, 16) for s in m], 1), stats)

    assert all(np.array_equal(x.image, y.image) for x, y in zip(run(), run()))


def test_sample_invariants():
    with pytest.raises(Exception):
        sample(np.zeros((3, 3)), np.zeros((1, 2, 3)))
    s = sample(np.zeros((3, 3)), np.zeros((1, 3, 3)))
    assert replace(s, identifier="t").identifier == "t"
