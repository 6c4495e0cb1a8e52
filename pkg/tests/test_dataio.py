import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from scaf.dataio import (AUTHENTIC_SCRIBBLE, IDENTITY, MANIPULATED_SCRIBBLE, UNLABELED,
                         AugmentationSpec, DatasetError, Sample, TriStateMask, apply_transform,
                         decode_scribble, encode_scribble, invert_transform, load_dataset,
                         sample_augmentation, save_sample, scaled_size, synthesize_scribble)


def _write_toy(root, n=3, size=32):
    rng = np.random.default_rng(0)
    for k in reversed(range(n)):  # written out of order on purpose
        mask = np.zeros((size, size), bool)
        mask[8:20, 8:20] = True
        s = Sample(rng.random((size, size, 3)).astype(np.float32),
                   synthesize_scribble(mask, 0.1, k), f"s{k}", mask)
        save_sample(root, "train", s)


def test_load_dataset_sorted(tmp_path):
    _write_toy(tmp_path)
    samples = load_dataset(tmp_path, "train")
    assert [s.id for s in samples] == ["s0", "s1", "s2"]
    assert all(s.dense_mask is not None for s in samples)


def test_load_dataset_missing_scribble(tmp_path):
    _write_toy(tmp_path)
    (tmp_path / "train" / "scribbles" / "s1.png").unlink()
    with pytest.raises(DatasetError, match="s1"):
        load_dataset(tmp_path, "train")


def test_load_dataset_bad_label(tmp_path):
    _write_toy(tmp_path)
    arr = np.full((32, 32), UNLABELED, np.uint8)
    arr[3, 4] = 7
    Image.fromarray(arr, mode="L").save(tmp_path / "train" / "scribbles" / "s2.png")
    with pytest.raises(DatasetError, match="value 7"):
        load_dataset(tmp_path, "train")


def test_scribble_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    labels = rng.choice([AUTHENTIC_SCRIBBLE, MANIPULATED_SCRIBBLE, UNLABELED], size=(17, 23))
    encode_scribble(tmp_path / "x.png", TriStateMask(labels))
    back = decode_scribble(tmp_path / "x.png")
    assert back.labels.dtype == np.uint8
    np.testing.assert_array_equal(back.labels, labels)


def test_tristate_partition():
    m = TriStateMask(np.array([[0, 1], [255, 255]]))
    assert not (m.labeled & m.unlabeled).any()
    assert (m.labeled | m.unlabeled).all()


def test_sample_shape_mismatch():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4, 3), np.float32), TriStateMask.unlabeled_like((4, 5)), "x")


def test_full_coverage_full_mask():
    m = synthesize_scribble(np.ones((12, 12), bool), 1.0, 3)
    assert (m.labels == MANIPULATED_SCRIBBLE).all()


def test_scribble_deterministic():
    mask = np.zeros((40, 40), bool)
    mask[5:30, 10:35] = True
    a = synthesize_scribble(mask, 0.1, 42)
    b = synthesize_scribble(mask, 0.1, 42)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_centered_square_count_and_containment():
    mask = np.zeros((64, 64), bool)
    mask[24:40, 24:40] = True
    m = synthesize_scribble(mask, 0.1, 0)
    n = 0
    for y in range(64):
        for x in range(64):
            if m.labels[y, x] == MANIPULATED_SCRIBBLE:
                n += 1
                assert 24 <= y < 40 and 24 <= x < 40
    assert 25 <= n <= 26


def test_scribble_errors():
    with pytest.raises(ValueError):
        synthesize_scribble(np.zeros((8, 8), bool), 0.1, 0)
    mask = np.ones((8, 8), bool)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            synthesize_scribble(mask, bad, 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cov=st.floats(0.01, 1.0), h=st.integers(4, 32), w=st.integers(4, 32))
def test_scribble_properties(seed, cov, h, w):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) < rng.uniform(0.1, 0.9)
    if not mask.any():
        mask[0, 0] = True
    m = synthesize_scribble(mask, cov, seed)
    assert not (m.manipulated & ~mask).any()
    assert not (m.authentic & mask).any()
    assert abs(int(m.manipulated.sum()) - round(cov * mask.sum())) <= 1
    if (~mask).any():
        assert abs(int(m.authentic.sum()) - round(cov * (~mask).sum())) <= 1


def test_rotation_180_involution():
    x = torch.arange(12.0).reshape(3, 4)
    spec = AugmentationSpec("rotation", 180)
    assert torch.equal(apply_transform(apply_transform(x, spec), spec), x)


def test_flip_hand_case():
    out = apply_transform(np.array([[1.0, 0.0], [0.0, 0.0]]), AugmentationSpec("horizontal-flip"))
    np.testing.assert_array_equal(out, [[0.0, 1.0], [0.0, 0.0]])


def test_scale_half_then_nearest_up():
    x = torch.full((1, 1, 128, 128), 0.37)
    down = apply_transform(x, AugmentationSpec("scaling", 0.5))
    assert down.shape[-2:] == (64, 64)
    up = torch.nn.functional.interpolate(down, scale_factor=2, mode="nearest")
    assert torch.equal(up, x)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_transform_inverse(seed):
    rng = np.random.default_rng(seed)
    spec = sample_augmentation(rng, seed)
    x = torch.from_numpy(rng.random((2, 64, 64)))
    y = apply_transform(x, spec)
    assert torch.equal(apply_transform(x, spec), y)  # deterministic
    if spec.kind != "scaling":
        assert torch.equal(invert_transform(y, spec), x)
    else:
        assert y.shape[-1] == scaled_size(64, spec.parameter) and y.shape[-1] % 32 == 0
        assert y.shape[-1] >= 64
        assert invert_transform(y, spec, size=(64, 64)).shape == x.shape


def test_identity_and_bad_specs():
    x = torch.rand(3, 5)
    assert apply_transform(x, IDENTITY) is x
    with pytest.raises(ValueError):
        AugmentationSpec("shear")
    with pytest.raises(ValueError):
        AugmentationSpec("rotation", 45)
    with pytest.raises(ValueError):
        AugmentationSpec("scaling", 2.0)
