import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bits.data import (
    AugmentPolicy,
    ImageDataset,
    InconsistentLengthError,
    MagicMismatchError,
    SyntheticFactorSpec,
    TruncatedFileError,
    batch_views,
    generate_synthetic,
    make_views,
    read_dataset,
    sample_rng,
    write_dataset,
)


def random_dataset(n=5, shape=(6, 7, 3), labels=True, factors=True, seed=0):
    rng = np.random.default_rng(seed)
    return ImageDataset(
        rng.integers(0, 256, size=(n, *shape), dtype=np.uint8),
        rng.integers(0, 60000, size=n) if labels else None,
        rng.integers(0, 9, size=(n, 3)) if factors else None,
    )


@pytest.mark.parametrize("labels, factors", [(True, True), (True, False), (False, True), (False, False)])
def test_round_trip_is_bitwise(tmp_path, labels, factors):
    ds = random_dataset(labels=labels, factors=factors)
    write_dataset(ds, tmp_path / "d.bin")
    back = read_dataset(tmp_path / "d.bin")
    assert back.pixels.tobytes() == ds.pixels.tobytes()
    for a, b in ((ds.labels, back.labels), (ds.factors, back.factors)):
        assert (a is None) == (b is None)
        if a is not None:
            assert np.array_equal(a, b)


def test_file_size_arithmetic(tmp_path):
    # magic 8, four u32 16, two u8 flags 2, u16 factor_dim 2, pixels 2*4*4*1, labels 2*u16
    ds = ImageDataset(np.zeros((2, 4, 4, 1), np.uint8), np.array([1, 2]))
    write_dataset(ds, tmp_path / "d.bin")
    assert (tmp_path / "d.bin").stat().st_size == 8 + 16 + 2 + 2 + 32 + 4 == 64


def test_header_layout(tmp_path):
    ds = ImageDataset(np.zeros((3, 2, 5, 1), np.uint8), None, np.zeros((3, 4)))
    write_dataset(ds, tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:8] == b"BITSDS1\0"
    assert np.frombuffer(raw[8:24], "<u4").tolist() == [3, 2, 5, 1]
    assert raw[24:26] == b"\x00\x01"
    assert np.frombuffer(raw[26:28], "<u2").tolist() == [4]


def test_distinct_error_codes(tmp_path):
    p = tmp_path / "d.bin"
    write_dataset(random_dataset(), p)
    raw = p.read_bytes()

    (tmp_path / "magic.bin").write_bytes(b"NOTADS1\0" + raw[8:])
    with pytest.raises(MagicMismatchError):
        read_dataset(tmp_path / "magic.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-1])
    with pytest.raises(TruncatedFileError):
        read_dataset(tmp_path / "short.bin")
    (tmp_path / "header.bin").write_bytes(raw[:12])
    with pytest.raises(TruncatedFileError):
        read_dataset(tmp_path / "header.bin")
    (tmp_path / "long.bin").write_bytes(raw + b"\0")
    with pytest.raises(InconsistentLengthError):
        read_dataset(tmp_path / "long.bin")
    assert len({MagicMismatchError.code, TruncatedFileError.code, InconsistentLengthError.code}) == 3


def test_label_length_must_match():
    with pytest.raises(InconsistentLengthError):
        ImageDataset(np.zeros((3, 2, 2, 1), np.uint8), np.array([1, 2]))


def test_synthetic_count_and_determinism():
    spec = SyntheticFactorSpec(samples_per_combination=1, image_size=16)
    assert SyntheticFactorSpec().n_samples == 2560
    a, b = generate_synthetic(spec, seed=3), generate_synthetic(spec, seed=3)
    assert a.n == 4 * 8 * 4 * 2
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert not np.array_equal(a.pixels, generate_synthetic(spec, seed=4).pixels)


def test_synthetic_factor_histogram_is_uniform():
    spec = SyntheticFactorSpec(samples_per_combination=2, image_size=16)
    ds = generate_synthetic(spec)
    for axis, card in enumerate((4, 8, 4, 2)):
        counts = np.bincount(ds.factors[:, axis], minlength=card)
        assert counts.tolist() == [ds.n // card] * card
    combos = {tuple(f) for f in ds.factors.tolist()}
    assert len(combos) == 4 * 8 * 4 * 2
    assert np.array_equal(ds.labels, ds.factors[:, 0] * 8 + ds.factors[:, 1])


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(global_crop=(0.5, 0.4))
    with pytest.raises(ValueError):
        AugmentPolicy(local_crop=(0.0, 0.4))


def test_identity_policy_returns_source():
    img = random_dataset(n=1, shape=(9, 9, 3)).pixels[0]
    views = make_views(img, AugmentPolicy.identity(), np.random.default_rng(0))
    assert len(views.global_views) == 2
    for v in views.global_views:
        assert np.array_equal(v, img.astype(np.float32))


def test_same_seed_same_views():
    img = random_dataset(n=1, shape=(12, 12, 3)).pixels[0]
    pol = AugmentPolicy(n_local=2)
    a = make_views(img, pol, sample_rng(1, 2, 3))
    b = make_views(img, pol, sample_rng(1, 2, 3))
    for u, v in zip(a.all_views, b.all_views):
        assert np.array_equal(u, v)
    assert a.local_views[0].shape == (6, 6, 3)
    assert a.global_views[0].shape == (12, 12, 3)


def test_crop_area_within_scale_range():
    img = np.zeros((32, 32, 3), np.uint8)
    pol = AugmentPolicy(n_local=1)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        boxes = make_views(img, pol, rng).boxes
        for (_, _, h, w), (lo, hi) in zip(boxes, [pol.global_crop] * 2 + [pol.local_crop]):
            frac = h * w / (32 * 32)
            assert lo - 1e-9 <= frac <= hi + 1e-9
        for y0, x0, h, w in boxes:
            assert y0 >= 0 and x0 >= 0 and y0 + h <= 32 + 1e-9 and x0 + w <= 32 + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 3), st.floats(0, 3), st.floats(0, 1))
def test_views_stay_in_pixel_range(seed, brightness, contrast, noise):
    img = np.random.default_rng(seed).integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    pol = AugmentPolicy(brightness=min(brightness, 0.99), contrast=contrast, noise_std=noise, n_local=1)
    for v in make_views(img, pol, np.random.default_rng(seed)).all_views:
        assert v.min() >= 0 and v.max() <= 255


def test_batch_views_is_order_and_worker_independent():
    ds = random_dataset(n=6, shape=(8, 8, 3))
    pol = AugmentPolicy(n_local=1)
    a = batch_views(ds, [0, 3, 5], pol, seed=7, epoch=2)
    b = batch_views(ds, [5, 3, 0], pol, seed=7, epoch=2, workers=2)
    assert len(a) == 3
    for u, v in zip(a, b):
        assert np.array_equal(u, v[::-1])
    c = batch_views(ds, [0, 3, 5], pol, seed=7, epoch=3)
    assert not np.array_equal(a[0], c[0])
