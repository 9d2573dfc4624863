"""Skeleton topology, pose normalization, limb lengths and pose metrics.

Poses are stored in meters, metrics are reported in millimeters.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from radarpose.errors import (
    DegenerateTargetError,
    InsufficientFramesError,
    InvalidPoseError,
)

logger = logging.getLogger(__name__)

NUM_JOINTS = 17
NUM_LIMBS = 16

# Human3.6M 17-joint convention
JOINT_NAMES = (
    'pelvis', 'r_hip', 'r_knee', 'r_ankle',
    'l_hip', 'l_knee', 'l_ankle',
    'spine', 'thorax', 'neck', 'head',
    'l_shoulder', 'l_elbow', 'l_wrist',
    'r_shoulder', 'r_elbow', 'r_wrist',
)

# Kinematic tree, parents always listed before their children
LIMB_EDGES = (
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),
    (8, 14), (14, 15), (15, 16),
)


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple = JOINT_NAMES
    edges: tuple = LIMB_EDGES

    def __post_init__(self):
        if len(self.joint_names) != NUM_JOINTS:
            raise InvalidPoseError(f"expected {NUM_JOINTS} joints, got {len(self.joint_names)}")
        if len(self.edges) != NUM_LIMBS:
            raise InvalidPoseError(f"expected {NUM_LIMBS} edges, got {len(self.edges)}")
        if len(set(self.edges)) != len(self.edges):
            raise InvalidPoseError("duplicate edges in topology")
        parent_of = {}
        for parent, child in self.edges:
            for index in (parent, child):
                if not 0 <= index < NUM_JOINTS:
                    raise InvalidPoseError(f"joint index {index} out of range")
            if child in parent_of or child == 0:
                raise InvalidPoseError(f"joint {child} has more than one parent")
            parent_of[child] = parent
        # every joint must reach the pelvis
        for joint in range(1, NUM_JOINTS):
            seen = set()
            node = joint
            while node != 0:
                if node in seen or node not in parent_of:
                    raise InvalidPoseError(f"joint {joint} is not connected to the pelvis")
                seen.add(node)
                node = parent_of[node]

    @property
    def parents(self):
        return np.array([p for p, _ in self.edges], dtype=np.int64)

    @property
    def children(self):
        return np.array([c for _, c in self.edges], dtype=np.int64)

    def limb_name(self, index):
        parent, child = self.edges[index]
        return f"{self.joint_names[parent]}-{self.joint_names[child]}"


H36M_TOPOLOGY = SkeletonTopology()


@dataclass
class Pose:
    joints: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.shape != (NUM_JOINTS, 3):
            raise InvalidPoseError(f"pose must be {NUM_JOINTS}x3, got {self.joints.shape}")
        if not np.all(np.isfinite(self.joints)):
            raise InvalidPoseError("pose contains non-finite coordinates")
        if self.normalized and np.any(self.joints[0] != 0.0):
            raise InvalidPoseError("normalized pose must have its pelvis at the origin")


@dataclass
class PoseSequence:
    frames: list
    frame_period: float = 0.1

    def __post_init__(self):
        if not self.frames:
            raise InsufficientFramesError("pose sequence is empty")
        if not self.frame_period > 0:
            raise InvalidPoseError(f"frame period must be positive, got {self.frame_period}")
        self.frames = [f if isinstance(f, Pose) else Pose(f) for f in self.frames]

    def __len__(self):
        return len(self.frames)

    def as_array(self):
        return np.stack([f.joints for f in self.frames])

    @classmethod
    def from_array(cls, joints, frame_period=0.1):
        return cls([Pose(j) for j in np.asarray(joints)], frame_period)


@dataclass
class LimbLengths:
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(NUM_LIMBS))

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.float64)
        if self.lengths.shape != (NUM_LIMBS,):
            raise InvalidPoseError(f"expected {NUM_LIMBS} limb lengths, got {self.lengths.shape}")
        if not np.all(np.isfinite(self.lengths)) or np.any(self.lengths < 0):
            raise InvalidPoseError("limb lengths must be finite and non-negative")


def _as_pose(pose):
    return pose if isinstance(pose, Pose) else Pose(pose)


def pelvis_align(pose):
    """Translate a pose so that its pelvis sits at the origin."""
    pose = _as_pose(pose)
    joints = pose.joints - pose.joints[0].copy()
    return Pose(joints, normalized=True)


def limb_lengths(pose, topo=H36M_TOPOLOGY):
    pose = _as_pose(pose)
    bones = pose.joints[topo.children] - pose.joints[topo.parents]
    return LimbLengths(np.linalg.norm(bones, axis=1))


def limb_lengths_array(joints, topo=H36M_TOPOLOGY):
    """Vectorized limb lengths for an array of poses shaped (..., 17, 3)."""
    joints = np.asarray(joints, dtype=np.float64)
    return np.linalg.norm(joints[..., topo.children, :] - joints[..., topo.parents, :], axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint position error in millimeters after pelvis alignment."""
    pred = pelvis_align(pred)
    gt = pelvis_align(gt)
    return float(np.mean(np.linalg.norm(pred.joints - gt.joints, axis=1)) * 1000.0)


def procrustes_align(pred, gt):
    """Similarity transform of ``pred`` onto ``gt`` minimizing squared joint error.

    Rotation is restricted to det = +1. Returns the transformed prediction.
    """
    X = np.asarray(gt, dtype=np.float64)
    Y = np.asarray(pred, dtype=np.float64)
    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    X0 = X - mu_x
    Y0 = Y - mu_y

    norm_x = np.sqrt(np.sum(X0 ** 2))
    norm_y = np.sqrt(np.sum(Y0 ** 2))
    if norm_x < 1e-12:
        raise DegenerateTargetError("ground-truth joints are all coincident")
    if norm_y < 1e-12:
        # a collapsed prediction can only be translated onto the target centroid
        return np.tile(mu_x, (X.shape[0], 1))

    X0 = X0 / norm_x
    Y0 = Y0 / norm_y
    H = X0.T @ Y0
    U, s, Vt = np.linalg.svd(H)
    V = Vt.T
    R = V @ U.T
    if np.linalg.det(R) < 0:
        V[:, -1] *= -1
        s[-1] *= -1
        R = V @ U.T

    scale = s.sum() * norm_x / norm_y
    translation = mu_x - scale * mu_y @ R
    return scale * Y @ R + translation


def pa_mpjpe(pred, gt):
    """MPJPE in millimeters after Procrustes (scale, rotation, translation) alignment."""
    pred = _as_pose(pred)
    gt = _as_pose(gt)
    aligned = procrustes_align(pred.joints, gt.joints)
    return float(np.mean(np.linalg.norm(aligned - gt.joints, axis=1)) * 1000.0)


def akv(seq):
    """Average squared inter-frame joint displacement, in m^2 per frame.

    Averages over the 17 defined joints.
    """
    if isinstance(seq, PoseSequence):
        joints = seq.as_array()
    else:
        joints = np.asarray(seq, dtype=np.float64)
    if joints.shape[0] < 2:
        raise InsufficientFramesError(f"AKV needs at least 2 frames, got {joints.shape[0]}")
    steps = np.diff(joints, axis=0)
    return float(np.mean(np.sum(steps ** 2, axis=-1)))
