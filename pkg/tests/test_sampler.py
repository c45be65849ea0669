import json
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_phantom
from ichfusion.errors import ConfigError, ValidationError
from ichfusion.phantom import generate_dataset, generate_studies
from ichfusion.preprocessing import AugmentConfig, compose_channels
from ichfusion.sampler import (
    CtStudy,
    Dataset,
    block_for,
    block_indices,
    iterate_epoch,
    load_dataset,
    read_volume,
    sample_batch,
    write_manifest,
    write_volume,
)


def _study(n, sid="s", size=8):
    hu = np.arange(n * size * size, dtype=float).reshape(n, size, size)
    return CtStudy(sid, hu, np.zeros((n, 6)))


# ---------------------------------------------------------------- blocks


def test_block_examples():
    assert block_for(_study(10), 5).member_indices == (2, 3, 4, 5, 6, 7, 8)
    assert block_for(_study(10), 0).member_indices == (0, 0, 0, 0, 1, 2, 3)
    assert block_for(_study(4), 3).member_indices == (0, 1, 2, 3, 3, 3, 3)


def test_block_out_of_range():
    with pytest.raises(IndexError):
        block_for(_study(4), 4)
    with pytest.raises(IndexError):
        block_indices(4, -1)


@given(st.integers(1, 80), st.data())
def test_block_invariants(n, data):
    c = data.draw(st.integers(0, n - 1))
    idx = block_indices(n, c)
    assert len(idx) == 7 and idx[3] == c
    assert all(a <= b for a, b in zip(idx, idx[1:]))
    assert all(0 <= i < n for i in idx)
    if 3 <= c < n - 3:
        assert idx == tuple(range(c - 3, c + 4))


# ---------------------------------------------------------------- CTV1 format


def test_volume_round_trip_and_layout(tmp_path):
    raw = np.arange(-30, 30, dtype=np.int16).reshape(3, 4, 5)
    path = tmp_path / "v.ctv"
    write_volume(path, raw)
    data = path.read_bytes()
    assert data[:16] == b"CTV1" + struct.pack("<III", 3, 4, 5)
    assert data[16:18] == struct.pack("<h", -30)
    assert len(data) == 16 + 2 * raw.size
    np.testing.assert_array_equal(read_volume(path), raw)


def test_volume_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "v.ctv"
    write_volume(path, np.zeros((2, 3, 3), dtype=np.int16))
    good = path.read_bytes()
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(ValidationError, match="magic"):
        read_volume(path)
    path.write_bytes(good[:-2])
    with pytest.raises(ValidationError, match="bytes"):
        read_volume(path)


# ---------------------------------------------------------------- manifest


@pytest.fixture
def written(tmp_path):
    summary = generate_dataset(small_phantom(), 3, (1.0,), tmp_path)
    return tmp_path, summary["train"]["manifest"]


def test_load_dataset_matches_generator(written):
    root, manifest = written
    ds = load_dataset(manifest)
    ref = generate_studies(small_phantom(), 3)
    assert ds.study_ids == [s.study_id for s in ref]
    for i, st_ in enumerate(ref):
        np.testing.assert_array_equal(ds.study(i).hu, st_.hu)
        np.testing.assert_array_equal(ds.labels(i), st_.labels)


def _rewrite(manifest, fn):
    doc = json.loads(open(manifest).read())
    fn(doc["studies"][0])
    write_manifest(manifest, doc["studies"])


def test_missing_volume_names_study(written):
    root, manifest = written
    _rewrite(manifest, lambda s: s.update(volume_file="volumes/nope.ctv"))
    with pytest.raises(FileNotFoundError, match="study0000"):
        load_dataset(manifest)


def test_label_length_error_names_study(written):
    root, manifest = written
    _rewrite(manifest, lambda s: s["labels"][0].append(0))
    with pytest.raises(ValidationError, match="study0000"):
        load_dataset(manifest)


def test_any_must_equal_or(written):
    root, manifest = written
    _rewrite(manifest, lambda s: s["labels"][0].__setitem__(slice(0, 6), [0, 1, 0, 0, 0, 0]))
    with pytest.raises(ValidationError, match="OR"):
        load_dataset(manifest)


def test_row_count_mismatch(written):
    root, manifest = written
    _rewrite(manifest, lambda s: s["labels"].pop())
    with pytest.raises(ValidationError, match="study0000"):
        load_dataset(manifest)


def test_header_size_mismatch(written):
    root, manifest = written
    vol = root / "volumes" / "study0000.ctv"
    vol.write_bytes(vol.read_bytes()[:-4])
    with pytest.raises(ValidationError, match="study0000"):
        load_dataset(manifest)


# ---------------------------------------------------------------- batches


def test_sample_batch_shape(small_dataset, rng):
    b = sample_batch(small_dataset, rng, 16)
    assert b.images.shape == (112, 3, 16, 16)
    assert b.labels.shape == (112, 6) and b.center_labels.shape == (16, 6)
    for k, blk in enumerate(b.blocks):
        assert blk.member_indices[3] == blk.center_index
        np.testing.assert_array_equal(b.center_labels[k], b.labels[7 * k + 3])


def test_single_slice_study_replicates(rng):
    ds = Dataset.from_studies([_study(1)])
    b = sample_batch(ds, rng, 1)
    assert b.images.shape[0] == 7
    assert all(np.array_equal(b.images[0], im) for im in b.images)


def test_empty_dataset(rng):
    with pytest.raises(ConfigError):
        sample_batch(Dataset(), rng)
    with pytest.raises(ConfigError):
        next(iterate_epoch(Dataset(), rng))


def test_epoch_covers_every_slice_once(small_dataset, rng):
    seen = Counter()
    for b in iterate_epoch(small_dataset, rng, 5):
        assert b.images.shape[0] % 7 == 0
        seen.update((blk.study_id, blk.center_index) for blk in b.blocks)
    expected = Counter((small_dataset.study_ids[i], s) for i, s in small_dataset.pairs())
    assert seen == expected


def test_batches_match_windowed_blocks(small_dataset, rng):
    b = sample_batch(small_dataset, rng, 4)
    for k, blk in enumerate(b.blocks):
        i = small_dataset.study_ids.index(blk.study_id)
        ref = compose_channels(small_dataset.study(i).hu)[list(blk.member_indices)]
        np.testing.assert_array_equal(b.images[7 * k : 7 * k + 7], ref)


def test_augmentation_shared_across_block(small_dataset, rng):
    b = sample_batch(small_dataset, rng, 3, AugmentConfig(flip_p=1.0))
    for k, blk in enumerate(b.blocks):
        i = small_dataset.study_ids.index(blk.study_id)
        ref = small_dataset.windowed(i)[list(blk.member_indices)][..., ::-1]
        np.testing.assert_array_equal(b.images[7 * k : 7 * k + 7], ref)


def test_epoch_deterministic(small_dataset):
    cfg = AugmentConfig.training_default()
    a = list(iterate_epoch(small_dataset, np.random.default_rng(3), 8, cfg))
    b = list(iterate_epoch(small_dataset, np.random.default_rng(3), 8, cfg))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.images, y.images)
        np.testing.assert_array_equal(x.labels, y.labels)
