import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarpose.errors import MissingFileError, PreprocessError, SizeMismatchError, VersionMismatchError
from radarpose.pose_core import NUM_JOINTS, limb_lengths
from radarpose.preprocess import (
    DatasetManifest,
    RadarSequence,
    concat_frames,
    crop_region,
    pad_to,
    read_dataset,
    read_split,
    simulate_dataset,
    write_dataset,
)
from radarpose.radar_sim import PointCloudFrame

ASSETS = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'test_assets')


def random_frame(n, seed, timestamp=0.0, spread=2.0):
    rng = np.random.default_rng(seed)
    points = rng.uniform(-spread, spread, size=(n, 6))
    points[:, 1] += 3.0
    points[:, 4:] = np.abs(points[:, 4:])
    return PointCloudFrame(points, timestamp)


def toy_sequence(name, frames, n_max, seed):
    rng = np.random.default_rng(seed)
    poses = rng.normal(size=(frames, NUM_JOINTS, 3))
    points = np.zeros((frames, n_max, 6))
    mask = np.zeros((frames, n_max), dtype=bool)
    for t in range(frames):
        n = int(rng.integers(0, n_max + 1))
        points[t, :n] = rng.normal(size=(n, 6))
        mask[t, :n] = True
    return RadarSequence(name, poses, points, mask, preset='walk', scene='basic', subject_seed=seed)


@pytest.fixture
def fixture_dataset(tmp_path):
    """The fixture skeleton stored as a one-frame dataset with an empty radar frame."""
    with open(os.path.join(ASSETS, 'fixture_skeleton.json'), 'r', encoding='utf-8') as f:
        joints = np.array(json.load(f)['joints'])
    manifest = DatasetManifest(n_max=16)
    seq = RadarSequence('fixture', joints[None], np.zeros((1, 16, 6)), np.zeros((1, 16), dtype=bool),
                        preset='stand', scene='clean')
    write_dataset({'test': [seq]}, manifest, str(tmp_path))
    return str(tmp_path), joints


def test_concat_frames():
    frames = [random_frame(n, seed=i, timestamp=0.1 * i) for i, n in enumerate([30, 0, 25, 45])]
    cases = [
        (frames, 1, 45),
        (frames, 4, 100),
        (frames[:1], 4, 30),
        (frames, 10, 100),
    ]
    for window, m, expected in cases:
        merged = concat_frames(window, m)
        assert len(merged) == expected, f"Expected {expected} points but got {len(merged)}"
        assert merged.timestamp == window[-1].timestamp
    assert np.array_equal(concat_frames(frames, 1).points, frames[-1].points)
    # chronological order is kept
    assert np.array_equal(concat_frames(frames, 4).points[:30], frames[0].points)
    with pytest.raises(PreprocessError):
        concat_frames([], 4)


def test_crop_region():
    frame = random_frame(200, seed=3)
    center = np.array([0.1, 3.2, -0.3])
    cases = [
        (random_frame(50, seed=1, spread=0.5), np.array([0.0, 3.0, 0.0]), 1.6, 50),
        (frame, np.array([50.0, 0.0, 0.0]), 1.6, 0),
    ]
    for given_frame, c, extent, expected in cases:
        result = crop_region(given_frame, c, extent)
        assert len(result) == expected, f"Expected {expected} points but got {len(result)}"

    kept = [p for p in frame.points if all(abs(p[a] - center[a]) <= 1.0 for a in range(3))]
    result = crop_region(frame, center, 1.0)
    assert np.array_equal(result.points, np.array(kept).reshape(-1, 6))

    twice = crop_region(result, center, 1.0)
    assert np.array_equal(twice.points, result.points), "crop should be idempotent"
    with pytest.raises(PreprocessError):
        crop_region(frame, center, 0.0)


def test_pad_to():
    exact = random_frame(16, seed=0)
    padded = pad_to(exact, 16)
    assert np.array_equal(padded.points, exact.points)
    assert padded.valid_mask.all() and padded.n_valid == 16

    empty = pad_to(PointCloudFrame(), 16)
    assert not empty.points.any() and not empty.valid_mask.any() and empty.n_valid == 0

    big = random_frame(26, seed=1)
    a, b = pad_to(big, 16, seed=5), pad_to(big, 16, seed=5)
    assert np.array_equal(a.points, b.points), "subsampling should be deterministic for a fixed seed"
    assert a.n_valid == 16
    rows = {tuple(r) for r in big.points}
    assert all(tuple(r) in rows for r in a.points), "subsample must come from the input"

    with pytest.raises(PreprocessError):
        pad_to(exact, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 40), st.integers(0, 10 ** 6))
def test_pad_keeps_valid_points(n, seed):
    frame = random_frame(n, seed)
    padded = pad_to(frame, 40)
    assert padded.n_valid == n
    assert np.array_equal(padded.points[:n], frame.points)
    assert not padded.points[~padded.valid_mask].any(), "padding rows must be zero"


def test_dataset_round_trip(tmp_path):
    manifest = DatasetManifest(n_max=12)
    sequences = {
        'train': [toy_sequence('a', 5, 12, 1), toy_sequence('b', 3, 12, 2)],
        'test': [toy_sequence('c', 4, 12, 3)],
    }
    write_dataset(sequences, manifest, str(tmp_path))
    loaded, loaded_manifest = read_dataset(str(tmp_path))

    assert loaded_manifest.splits['train']['frames'] == 8
    for split, seqs in sequences.items():
        assert [s.name for s in loaded[split]] == [s.name for s in seqs]
        for original, back in zip(seqs, loaded[split]):
            for attr in ('poses', 'points', 'mask'):
                assert np.array_equal(getattr(original, attr), getattr(back, attr)), \
                    f"{split}/{original.name}: {attr} changed in the round trip"
            assert back.subject_seed == original.subject_seed


def test_truncated_file_names_it(tmp_path):
    write_dataset({'train': [toy_sequence('a', 3, 8, 0)]}, DatasetManifest(n_max=8), str(tmp_path))
    path = os.path.join(str(tmp_path), 'train', 'points.f32')
    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(data[:-4])
    with pytest.raises(SizeMismatchError) as info:
        read_split(str(tmp_path), 'train')
    assert info.value.path == path
    assert path in str(info.value)


def test_unknown_version_rejected(tmp_path):
    write_dataset({'train': [toy_sequence('a', 2, 8, 0)]}, DatasetManifest(n_max=8), str(tmp_path))
    path = os.path.join(str(tmp_path), 'manifest.json')
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    data['format_version'] = 99
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f)
    with pytest.raises(VersionMismatchError):
        read_dataset(str(tmp_path))


def test_missing_files(tmp_path):
    with pytest.raises(MissingFileError):
        read_dataset(str(tmp_path))
    write_dataset({'train': [toy_sequence('a', 2, 8, 0)]}, DatasetManifest(n_max=8), str(tmp_path))
    os.remove(os.path.join(str(tmp_path), 'train', 'mask.u8'))
    with pytest.raises(MissingFileError):
        read_split(str(tmp_path), 'train')


def test_fixture_skeleton_in_dataset_format(fixture_dataset):
    directory, joints = fixture_dataset
    sequences, manifest = read_dataset(directory)
    stored = sequences['test'][0].poses[0]
    assert np.array_equal(stored, joints.astype(np.float32))
    assert manifest.topology['joint_names'][0] == 'pelvis'
    assert np.allclose(limb_lengths(stored).lengths, limb_lengths(joints).lengths, atol=1e-6)


def test_simulate_dataset(tmp_path):
    manifest = DatasetManifest(n_max=64)
    plan = {'train': [('walk', 'basic', 0, 6)], 'test': [('kick', 'adverse', 1, 4)]}
    splits = simulate_dataset(plan, manifest)
    seq = splits['train'][0]
    assert seq.name == 'train-walk-basic-s0'
    assert seq.points.shape == (6, 64, 6)
    assert not seq.points[~seq.mask].any(), "padding rows must be zero"
    assert set(manifest.noise) == {'basic', 'adverse'}

    # every kept point lies inside the crop box around the pelvis
    for t in range(len(seq)):
        kept = seq.points[t][seq.mask[t], :3]
        assert np.all(np.abs(kept - seq.poses[t][0]) <= manifest.crop_half_extent + 1e-5)

    again = simulate_dataset(plan, DatasetManifest(n_max=64))
    assert np.array_equal(again['test'][0].points, splits['test'][0].points)

    write_dataset(splits, manifest, str(tmp_path))
    loaded, _ = read_dataset(str(tmp_path))
    assert np.array_equal(loaded['test'][0].points, splits['test'][0].points)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
