"""Frame aggregation, cropping, padding and the on-disk dataset format.

A dataset directory holds ``manifest.json`` plus one sub-directory per split
with flat little-endian files:

    poses.f32   [frame][joint][xyz]
    points.f32  [frame][N_max][6]
    mask.u8     [frame][N_max]
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from radarpose.errors import (
    DatasetError,
    MissingFileError,
    PreprocessError,
    SizeMismatchError,
    VersionMismatchError,
)
from radarpose.pose_core import H36M_TOPOLOGY, NUM_JOINTS
from radarpose.radar_sim import (
    PointCloudFrame,
    RadarConfig,
    render_sequence,
    scene_noise,
    synth_skeleton_sequence,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
POINT_DIM = 6


@dataclass
class PaddedFrame:
    points: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.points.shape != (len(self.valid_mask), POINT_DIM):
            raise PreprocessError(f"points {self.points.shape} do not match mask {self.valid_mask.shape}")

    @property
    def n_valid(self):
        return int(self.valid_mask.sum())

    @property
    def n_max(self):
        return len(self.valid_mask)


@dataclass
class RadarSequence:
    """One simulated recording after preprocessing, stored as float32."""
    name: str
    poses: np.ndarray
    points: np.ndarray
    mask: np.ndarray
    preset: str = 'walk'
    scene: str = 'basic'
    subject_seed: int = 0

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float32)
        self.points = np.asarray(self.points, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        frames = len(self.poses)
        if self.poses.shape != (frames, NUM_JOINTS, 3):
            raise DatasetError(f"sequence {self.name}: bad pose shape {self.poses.shape}")
        if self.points.ndim != 3 or self.points.shape[0] != frames or self.points.shape[2] != POINT_DIM:
            raise DatasetError(f"sequence {self.name}: bad point shape {self.points.shape}")
        if self.mask.shape != self.points.shape[:2]:
            raise DatasetError(f"sequence {self.name}: mask shape {self.mask.shape} mismatches points")

    def __len__(self):
        return len(self.poses)


@dataclass
class DatasetManifest:
    n_max: int = 256
    concat_window: int = 4
    crop_half_extent: float = 1.6
    subsample_seed: int = 0
    frame_period: float = 0.1
    radar: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)
    topology: dict = field(default_factory=lambda: {
        'joint_names': list(H36M_TOPOLOGY.joint_names),
        'edges': [list(e) for e in H36M_TOPOLOGY.edges],
    })
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        return {
            'format_version': self.format_version,
            'n_max': self.n_max,
            'concat_window': self.concat_window,
            'crop_half_extent': self.crop_half_extent,
            'subsample_seed': self.subsample_seed,
            'frame_period': self.frame_period,
            'topology': self.topology,
            'radar': self.radar,
            'noise': self.noise,
            'splits': self.splits,
        }

    @classmethod
    def from_dict(cls, data):
        version = data.get('format_version')
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"dataset format version {version} is not supported (expected {FORMAT_VERSION})")
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


def concat_frames(frames, m):
    """Union of the points of the last ``min(m, len(frames))`` frames."""
    if not frames:
        raise PreprocessError("cannot concatenate an empty frame list")
    if m < 1:
        raise PreprocessError(f"concat window must be >= 1, got {m}")
    window = frames[-m:]
    points = np.concatenate([f.points for f in window])
    labels = np.concatenate([f.labels for f in window])
    return PointCloudFrame(points, window[-1].timestamp, labels, dict(window[-1].metadata))


def crop_region(frame, center, half_extent):
    if not half_extent > 0:
        raise PreprocessError(f"crop half extent must be positive, got {half_extent}")
    center = np.asarray(center, dtype=np.float64)
    keep = np.all(np.abs(frame.points[:, :3] - center) <= half_extent, axis=1)
    return PointCloudFrame(frame.points[keep], frame.timestamp, frame.labels[keep], dict(frame.metadata))


def pad_to(frame, n_max, seed=0):
    """Zero-pad to ``n_max`` rows; oversized frames keep a seeded uniform subsample in original order."""
    if n_max < 1:
        raise PreprocessError(f"N_max must be >= 1, got {n_max}")
    points = frame.points
    if len(points) > n_max:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(points), size=n_max, replace=False))
        points = points[keep]
    padded = np.zeros((n_max, POINT_DIM), dtype=np.float64)
    padded[:len(points)] = points
    mask = np.zeros(n_max, dtype=bool)
    mask[:len(points)] = True
    return PaddedFrame(padded, mask)


def preprocess_frames(frames, poses, m, half_extent, n_max, seed):
    """Concatenate, crop around the ground-truth pelvis and pad every frame of a recording."""
    points = np.zeros((len(frames), n_max, POINT_DIM))
    mask = np.zeros((len(frames), n_max), dtype=bool)
    for t in range(len(frames)):
        merged = concat_frames(frames[:t + 1], m)
        cropped = crop_region(merged, poses[t][0], half_extent)
        padded = pad_to(cropped, n_max, seed=[seed, t])
        points[t] = padded.points
        mask[t] = padded.valid_mask
    return points, mask


def simulate_sequence(name, preset, scene, subject_seed, frames, manifest, radar_cfg):
    seq = synth_skeleton_sequence(preset, frames, manifest.frame_period, subject_seed)
    noise = scene_noise(scene)
    radar_frames = render_sequence(seq, radar_cfg, noise, subject_seed)
    poses = seq.as_array()
    points, mask = preprocess_frames(radar_frames, poses, manifest.concat_window,
                                     manifest.crop_half_extent, manifest.n_max,
                                     manifest.subsample_seed + subject_seed)
    return RadarSequence(name, poses, points, mask, preset, scene, subject_seed)


def simulate_dataset(split_plan, manifest, radar_cfg=None):
    """Build every split described by ``split_plan``.

    ``split_plan`` maps a split name to a list of ``(preset, scene, subject_seed, frames)``.
    """
    radar_cfg = radar_cfg or RadarConfig()
    manifest.radar = radar_cfg.to_dict()
    splits = {}
    for split, entries in split_plan.items():
        sequences = []
        for preset, scene, subject_seed, frames in entries:
            name = f"{split}-{preset}-{scene}-s{subject_seed}"
            sequences.append(simulate_sequence(name, preset, scene, subject_seed, frames, manifest, radar_cfg))
            manifest.noise[scene] = scene_noise(scene).to_dict()
        splits[split] = sequences
        logger.info(f"simulated split '{split}': {len(sequences)} sequences, "
                    f"{sum(len(s) for s in sequences)} frames")
    return splits


def _split_files(directory, split):
    base = os.path.join(directory, split)
    return (os.path.join(base, 'poses.f32'),
            os.path.join(base, 'points.f32'),
            os.path.join(base, 'mask.u8'))


def write_dataset(sequences, manifest, directory):
    """Write ``{split: [RadarSequence]}`` and its manifest to ``directory``."""
    os.makedirs(directory, exist_ok=True)
    manifest.splits = {}
    for split, seqs in sequences.items():
        if seqs and any(s.points.shape[1] != manifest.n_max for s in seqs):
            raise DatasetError(f"split '{split}' has frames not padded to N_max={manifest.n_max}")
        os.makedirs(os.path.join(directory, split), exist_ok=True)
        poses_path, points_path, mask_path = _split_files(directory, split)
        frames = sum(len(s) for s in seqs)
        if seqs:
            poses = np.concatenate([s.poses for s in seqs])
            points = np.concatenate([s.points for s in seqs])
            mask = np.concatenate([s.mask for s in seqs])
        else:
            poses = np.zeros((0, NUM_JOINTS, 3), dtype=np.float32)
            points = np.zeros((0, manifest.n_max, POINT_DIM), dtype=np.float32)
            mask = np.zeros((0, manifest.n_max), dtype=bool)
        poses.astype('<f4').tofile(poses_path)
        points.astype('<f4').tofile(points_path)
        mask.astype('<u1').tofile(mask_path)
        manifest.splits[split] = {
            'frames': frames,
            'sequences': [
                {'name': s.name, 'preset': s.preset, 'scene': s.scene,
                 'subject_seed': s.subject_seed, 'frames': len(s)}
                for s in seqs
            ],
        }
    with open(os.path.join(directory, 'manifest.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest.to_dict(), f, indent=2)
    logger.info(f"wrote dataset to {directory}")


def read_manifest(directory):
    path = os.path.join(directory, 'manifest.json')
    if not os.path.exists(path):
        raise MissingFileError(f"missing dataset manifest {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: invalid JSON ({e})")
    return DatasetManifest.from_dict(data)


def _read_flat(path, dtype, expected_bytes):
    if not os.path.exists(path):
        raise MissingFileError(f"missing dataset file {path}")
    actual = os.path.getsize(path)
    if actual != expected_bytes:
        raise SizeMismatchError(path, expected_bytes, actual)
    return np.fromfile(path, dtype=dtype)


def read_split(directory, split, manifest=None):
    manifest = manifest or read_manifest(directory)
    if split not in manifest.splits:
        raise DatasetError(f"split '{split}' not found in {directory}")
    info = manifest.splits[split]
    frames, n_max = info['frames'], manifest.n_max
    if sum(s['frames'] for s in info['sequences']) != frames:
        raise DatasetError(f"split '{split}': sequence frame counts do not sum to {frames}")
    poses_path, points_path, mask_path = _split_files(directory, split)
    poses = _read_flat(poses_path, '<f4', frames * NUM_JOINTS * 3 * 4).reshape(frames, NUM_JOINTS, 3)
    points = _read_flat(points_path, '<f4', frames * n_max * POINT_DIM * 4).reshape(frames, n_max, POINT_DIM)
    mask = _read_flat(mask_path, '<u1', frames * n_max).reshape(frames, n_max)
    if np.any(mask > 1):
        raise DatasetError(f"{mask_path}: mask bytes must be 0 or 1")

    sequences, start = [], 0
    for entry in info['sequences']:
        stop = start + entry['frames']
        sequences.append(RadarSequence(entry['name'], poses[start:stop], points[start:stop],
                                       mask[start:stop].astype(bool), entry['preset'],
                                       entry['scene'], entry['subject_seed']))
        start = stop
    return sequences


def read_dataset(directory):
    manifest = read_manifest(directory)
    sequences = {split: read_split(directory, split, manifest) for split in manifest.splits}
    return sequences, manifest
