import struct

import numpy as np
import pytest

from dynat.data import (BatchStream, CUE_ROWS, Dataset, IDX_IMAGES_MAGIC,
                        IDX_LABELS_MAGIC, load_idx, split, synthetic_blobs, write_idx)
from dynat.errors import (IdxCountError, IdxFormatError, IdxTruncatedError,
                          ValidationError)


# ---------------------------------------------------------------------------
# dataset container

def test_dataset_validation():
    good = Dataset(np.zeros((2, 1, 4, 4)), np.eye(2), "d", 2)
    assert len(good) == 2
    with pytest.raises(ValidationError):
        Dataset(np.full((2, 1, 4, 4), 1.5), np.eye(2), "d", 2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1, 4, 4)), np.full((2, 2), 0.5), "d", 2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 4, 4)), np.eye(2), "d", 2)


def test_dataset_take():
    ds = synthetic_blobs(5, 4, 12, 0.1, seed=0)
    sub = ds.take(7)
    assert len(sub) == 7
    assert np.array_equal(sub.images, ds.images[:7])


# ---------------------------------------------------------------------------
# synthetic blobs

def test_blobs_shapes_and_range():
    ds = synthetic_blobs(10, 10, 28, 0.3, seed=1)
    assert ds.images.shape == (100, 1, 28, 28)
    assert ds.labels.shape == (100, 10)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.array_equal(ds.labels.sum(axis=1), np.ones(100))


def test_blobs_deterministic_and_seed_sensitive():
    a = synthetic_blobs(5, 4, 12, 0.2, seed=3)
    b = synthetic_blobs(5, 4, 12, 0.2, seed=3)
    c = synthetic_blobs(5, 4, 12, 0.2, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.tobytes() != c.images.tobytes()


def test_blobs_low_noise_linearly_separable():
    # least-squares linear probe on raw pixels
    ds = synthetic_blobs(30, 6, 18, 0.05, seed=5)
    flat = ds.images.reshape(len(ds), -1)
    aug = np.hstack([flat, np.ones((len(ds), 1))])
    w, *_ = np.linalg.lstsq(aug, ds.labels, rcond=None)
    acc = ((aug @ w).argmax(axis=1) == ds.labels.argmax(axis=1)).mean()
    assert acc >= 0.99


def test_blobs_classes_have_distinct_marks():
    ds = synthetic_blobs(1, 9, 18, 0.0, seed=0)
    flats = ds.images.reshape(9, -1)
    for i in range(9):
        for j in range(i + 1, 9):
            assert not np.array_equal(flats[i], flats[j])


def test_blobs_argument_validation():
    with pytest.raises(ValidationError):
        synthetic_blobs(5, 1, 12, 0.1, seed=0)
    with pytest.raises(ValidationError):
        synthetic_blobs(0, 4, 12, 0.1, seed=0)
    with pytest.raises(ValidationError):
        synthetic_blobs(5, 4, 12, -0.1, seed=0)
    with pytest.raises(ValidationError):
        synthetic_blobs(5, 100, 8, 0.1, seed=0)  # grid cells too small
    with pytest.raises(ValidationError):
        synthetic_blobs(5, 4, 12, 0.1, seed=0, background=0.2, cue_amplitude=0.3)
    with pytest.raises(ValidationError):
        synthetic_blobs(5, 4, 12, 0.1, seed=0, patch_reliability=0.0)


def test_blobs_cue_strip():
    ds = synthetic_blobs(6, 4, 12, 0.3, seed=5, background=0.2, cue_amplitude=0.1)
    strips = ds.images[:, 0, -CUE_ROWS:, :]
    # noise-free: identical strip for every example of a class
    cls = ds.labels.argmax(1)
    for c in range(4):
        sel = strips[cls == c]
        assert np.all(sel == sel[0])
        assert np.all(np.isclose(sel, 0.1) | np.isclose(sel, 0.3))
    # distinct across classes, and sub-amplitude pairwise distance
    reps = np.stack([strips[cls == c][0] for c in range(4)])
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(reps[i] - reps[j]).max() == pytest.approx(0.2)  # two amplitudes apart


def test_blobs_cue_leaves_body_statistics_alone():
    plain = synthetic_blobs(6, 4, 12, 0.0, seed=5)
    cued = synthetic_blobs(6, 4, 12, 0.0, seed=5, cue_amplitude=0.1)
    # above the strip both carry one bright patch per image
    assert (cued.images[:, :, :-CUE_ROWS, :] > 0.5).sum(axis=(1, 2, 3)).min() > 0
    assert plain.images.shape == cued.images.shape


def test_blobs_patch_reliability_scatters_roughly_that_fraction():
    ds = synthetic_blobs(200, 4, 12, 0.0, seed=5, patch_reliability=0.8)
    grid, cell = 2, 6
    cls = ds.labels.argmax(1)
    at_home = 0
    for k in range(len(ds)):
        row, col = divmod(int(cls[k]), grid)
        top, left = row * cell + 1, col * cell + 1  # patch 3 centred in cell 6
        patch = ds.images[k, 0, top:top + 3, left:left + 3]
        at_home += bool(np.all(patch >= 0.75))
    frac = at_home / len(ds)
    assert 0.76 <= frac <= 0.92  # 0.8 plus the 1-in-4 scatter that lands home


def test_blobs_full_reliability_keeps_patches_home():
    ds = synthetic_blobs(20, 4, 12, 0.0, seed=5, patch_reliability=1.0)
    baseline = synthetic_blobs(20, 4, 12, 0.0, seed=5)
    assert np.array_equal(ds.images, baseline.images)


# ---------------------------------------------------------------------------
# split

def test_split_partitions_without_loss():
    ds = synthetic_blobs(10, 4, 12, 0.2, seed=6)
    tr, te = split(ds, 0.75, seed=0)
    assert len(tr) == 30 and len(te) == 10
    whole = np.sort(ds.images.sum(axis=(1, 2, 3)))
    parts = np.sort(np.concatenate([tr.images.sum(axis=(1, 2, 3)), te.images.sum(axis=(1, 2, 3))]))
    assert np.allclose(whole, parts)


def test_split_deterministic():
    ds = synthetic_blobs(10, 4, 12, 0.2, seed=6)
    a1, b1 = split(ds, 0.5, seed=1)
    a2, b2 = split(ds, 0.5, seed=1)
    a3, _ = split(ds, 0.5, seed=2)
    assert a1.images.tobytes() == a2.images.tobytes()
    assert b1.images.tobytes() == b2.images.tobytes()
    assert a1.images.tobytes() != a3.images.tobytes()


def test_split_rejects_empty_side():
    ds = synthetic_blobs(2, 2, 8, 0.1, seed=0)
    with pytest.raises(ValidationError):
        split(ds, 0.0, seed=0)
    with pytest.raises(ValidationError):
        split(ds, 1.0, seed=0)


# ---------------------------------------------------------------------------
# batch stream

def test_batches_cover_dataset_once():
    ds = synthetic_blobs(5, 4, 8, 0.1, seed=7)
    stream = BatchStream(ds, batch_size=8, seed=0)
    seen = []
    for x, y in stream.batches(epoch=0):
        assert x.data.shape[1:] == (1, 8, 8)
        assert x.data.shape[0] == y.data.shape[0]
        seen.extend(x.data.sum(axis=(1, 2, 3)).tolist())
    assert len(seen) == 20  # 2 full batches + last short batch of 4
    assert np.allclose(np.sort(seen), np.sort(ds.images.sum(axis=(1, 2, 3))))


def test_batches_epoch_keyed_shuffles():
    ds = synthetic_blobs(8, 4, 8, 0.1, seed=8)
    stream = BatchStream(ds, batch_size=32, seed=5)
    first_a = next(iter(stream.batches(epoch=0)))[0].data
    first_b = next(iter(stream.batches(epoch=0)))[0].data
    other = next(iter(stream.batches(epoch=1)))[0].data
    assert np.array_equal(first_a, first_b)
    assert not np.array_equal(first_a, other)


def test_batch_sizes():
    ds = synthetic_blobs(3, 2, 8, 0.1, seed=9)
    sizes = [x.data.shape[0] for x, _ in BatchStream(ds, 4, seed=0).batches(0)]
    assert sizes == [4, 2]


# ---------------------------------------------------------------------------
# idx files

def test_idx_round_trip(tmp_path):
    ds = synthetic_blobs(6, 3, 10, 0.25, seed=10)
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    write_idx(ds, ip, lp)
    back = load_idx(ip, lp, class_count=3)
    # equality after u8 quantisation
    assert np.array_equal(back.images, np.rint(ds.images * 255) / 255.0)
    assert np.array_equal(back.labels, ds.labels)
    # a second write of the loaded data is byte-identical
    ip2, lp2 = tmp_path / "im2.idx", tmp_path / "lb2.idx"
    write_idx(back, ip2, lp2)
    assert ip.read_bytes() == ip2.read_bytes()
    assert lp.read_bytes() == lp2.read_bytes()


def test_idx_header_layout(tmp_path):
    ds = synthetic_blobs(2, 2, 8, 0.1, seed=11)
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    write_idx(ds, ip, lp)
    magic, n, h, w = struct.unpack(">4l", ip.read_bytes()[:16])
    assert (magic, n, h, w) == (IDX_IMAGES_MAGIC, 4, 8, 8)
    magic, n = struct.unpack(">2l", lp.read_bytes()[:8])
    assert (magic, n) == (IDX_LABELS_MAGIC, 4)


def write_pair(tmp_path, images=None, labels=None, n=3, h=4, w=4):
    ip, lp = tmp_path / "a.idx", tmp_path / "b.idx"
    if images is None:
        images = struct.pack(">4l", IDX_IMAGES_MAGIC, n, h, w) + bytes(n * h * w)
    if labels is None:
        labels = struct.pack(">2l", IDX_LABELS_MAGIC, n) + bytes(n)
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return ip, lp


def test_idx_bad_image_magic(tmp_path):
    ip, lp = write_pair(tmp_path, images=struct.pack(">4l", 0x00000804, 3, 4, 4) + bytes(48))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(ip, lp)


def test_idx_bad_label_magic(tmp_path):
    ip, lp = write_pair(tmp_path, labels=struct.pack(">2l", 0x00000899, 3) + bytes(3))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_pair(tmp_path, labels=struct.pack(">2l", IDX_LABELS_MAGIC, 5) + bytes(5))
    with pytest.raises(IdxCountError):
        load_idx(ip, lp)


def test_idx_truncated_images(tmp_path):
    ip, lp = write_pair(tmp_path, images=struct.pack(">4l", IDX_IMAGES_MAGIC, 3, 4, 4) + bytes(30))
    with pytest.raises(IdxTruncatedError):
        load_idx(ip, lp)


def test_idx_truncated_header(tmp_path):
    ip, lp = write_pair(tmp_path, images=struct.pack(">2l", IDX_IMAGES_MAGIC, 3))
    with pytest.raises(IdxTruncatedError):
        load_idx(ip, lp)


def test_idx_label_out_of_range(tmp_path):
    ip, lp = write_pair(tmp_path, labels=struct.pack(">2l", IDX_LABELS_MAGIC, 3) + bytes([0, 1, 12]))
    with pytest.raises(IdxFormatError, match="outside"):
        load_idx(ip, lp, class_count=10)
