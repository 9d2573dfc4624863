"""Synthetic FMCW radar scenes: geometry formulas, skeleton motions, point rendering.

Sensor frame: radar at the origin, boresight +y, up +z. Points are placed
geometrically and can be mapped to and from (beat frequency, Doppler phase,
angle phases) with the FMCW formulas below.
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from radarpose.errors import (
    BehindSensorError,
    ConfigError,
    DegenerateGeometryError,
    RadarDomainError,
    SingularElevationError,
    UnresolvableAngleError,
)
from radarpose.pose_core import H36M_TOPOLOGY, NUM_JOINTS, NUM_LIMBS, Pose, PoseSequence

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 3e8  # m/s

MOTION_PRESETS = ('stand', 'walk', 'raise-hand', 'chest-expand', 'kick')


@dataclass
class RadarConfig:
    start_frequency: float = 77e9
    bandwidth: float = 4e9
    chirp_duration: float = 1e-4
    wavelength: float = None
    max_range: float = 6.0
    min_range: float = 0.3
    azimuth_fov: float = math.radians(60.0)
    elevation_fov: float = math.radians(40.0)

    def __post_init__(self):
        if self.wavelength is None:
            self.wavelength = SPEED_OF_LIGHT / self.start_frequency
        for name in ('start_frequency', 'bandwidth', 'chirp_duration', 'wavelength',
                     'max_range', 'min_range', 'azimuth_fov', 'elevation_fov'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"radar {name} must be positive")
        expected = SPEED_OF_LIGHT / self.start_frequency
        if abs(self.wavelength - expected) > 0.01 * expected:
            raise ConfigError(
                f"wavelength {self.wavelength} inconsistent with start frequency "
                f"(expected {expected:.6g} within 1%)")
        if self.min_range >= self.max_range:
            raise ConfigError("min_range must be below max_range")
        if self.azimuth_fov >= math.pi / 2 or self.elevation_fov >= math.pi / 2:
            raise ConfigError("field of view half-angles must be below 90 degrees")

    def to_dict(self):
        return asdict(self)


@dataclass
class RadarPoint:
    x: float
    y: float
    z: float
    v: float
    E: float
    A: float


@dataclass
class PointCloudFrame:
    """Variable-length radar frame; ``points`` is an (N, 6) array of x, y, z, v, E, A.

    ``labels`` holds the limb index each point was sampled from, -1 for ghosts.
    """
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    timestamp: float = 0.0
    labels: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 6)
        if self.labels is None:
            self.labels = np.full(len(self.points), -1, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.points):
            raise RadarDomainError("labels must match the number of points")
        if not np.all(np.isfinite(self.points[:, :3])):
            raise RadarDomainError("radar point coordinates must be finite")
        if np.any(self.points[:, 4:6] < 0):
            raise RadarDomainError("radar energy and amplitude must be non-negative")

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_points(cls, points, timestamp=0.0):
        rows = [[p.x, p.y, p.z, p.v, p.E, p.A] for p in points]
        return cls(np.array(rows, dtype=np.float64).reshape(-1, 6), timestamp)

    def points_list(self):
        return [RadarPoint(*row) for row in self.points.tolist()]


@dataclass
class NoiseModel:
    dispersion_sigma: float = 0.05
    segment_dropout_prob: float = 0.1
    ghost_point_rate: float = 5.0
    points_per_limb: int = 8
    amplitude_ref: float = 1.0
    amplitude_jitter: float = 0.2
    ghost_velocity_sigma: float = 0.3

    def __post_init__(self):
        if self.dispersion_sigma < 0:
            raise ConfigError("dispersion_sigma must be >= 0")
        if not 0.0 <= self.segment_dropout_prob <= 1.0:
            raise ConfigError("segment_dropout_prob must lie in [0, 1]")
        if self.ghost_point_rate < 0:
            raise ConfigError("ghost_point_rate must be >= 0")
        if self.points_per_limb < 0:
            raise ConfigError("points_per_limb must be >= 0")
        if self.amplitude_ref <= 0 or self.amplitude_jitter < 0 or self.ghost_velocity_sigma < 0:
            raise ConfigError("amplitude and ghost parameters must be non-negative")

    def to_dict(self):
        return asdict(self)


# Named scenes, standing in for basic and adverse recording conditions
SCENE_PRESETS = {
    'clean': NoiseModel(dispersion_sigma=0.01, segment_dropout_prob=0.0, ghost_point_rate=0.0),
    'basic': NoiseModel(),
    'adverse': NoiseModel(dispersion_sigma=0.08, segment_dropout_prob=0.25, ghost_point_rate=12.0),
}


def scene_noise(scene):
    try:
        return SCENE_PRESETS[scene]
    except KeyError:
        raise ConfigError(f"unknown scene '{scene}', expected one of {sorted(SCENE_PRESETS)}")


# FMCW geometry

def range_from_beat(f, cfg):
    if f < 0:
        raise RadarDomainError(f"beat frequency must be non-negative, got {f}")
    return SPEED_OF_LIGHT * f * cfg.chirp_duration / (2.0 * cfg.bandwidth)


def beat_from_range(r, cfg):
    if r < 0:
        raise RadarDomainError(f"range must be non-negative, got {r}")
    return 2.0 * cfg.bandwidth * r / (SPEED_OF_LIGHT * cfg.chirp_duration)


def velocity_from_phase(omega, cfg):
    return cfg.wavelength * omega / (4.0 * math.pi * cfg.chirp_duration)


def phase_from_velocity(v, cfg):
    return 4.0 * math.pi * cfg.chirp_duration * v / cfg.wavelength


def angles_from_phase(omega_x, omega_z):
    """Azimuth and elevation from the horizontal and vertical phase differences."""
    s = omega_z / math.pi
    if abs(s) > 1.0:
        raise UnresolvableAngleError(f"elevation phase {omega_z} outside [-pi, pi]")
    phi = math.asin(s)
    cos_phi = math.cos(phi)
    if abs(cos_phi) < 1e-12:
        raise SingularElevationError("elevation at +-90 degrees leaves azimuth undefined")
    a = omega_x / (cos_phi * math.pi)
    if abs(a) > 1.0:
        raise UnresolvableAngleError(f"azimuth phase {omega_x} not resolvable at elevation {phi}")
    return math.asin(a), phi


def phases_from_angles(theta, phi):
    return math.pi * math.cos(phi) * math.sin(theta), math.pi * math.sin(phi)


def spherical_to_cartesian(r, theta, phi):
    if r < 0:
        raise RadarDomainError(f"range must be non-negative, got {r}")
    if abs(theta) >= math.pi / 2 or abs(phi) >= math.pi / 2:
        raise RadarDomainError("angles must lie strictly inside (-pi/2, pi/2)")
    x = r * math.cos(phi) * math.sin(theta)
    z = r * math.sin(phi)
    y_sq = r * r - x * x - z * z
    if y_sq < -1e-12 * max(r * r, 1.0):
        raise DegenerateGeometryError(f"negative y^2 = {y_sq}")
    return x, math.sqrt(max(y_sq, 0.0)), z


def cartesian_to_spherical(x, y, z):
    if y <= 0:
        raise BehindSensorError(f"point with y={y} is behind the sensor")
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        raise DegenerateGeometryError("point at the sensor origin")
    # atan2 forms equal asin(z/R) and asin(x/(R cos(phi))) for y > 0
    phi = math.atan2(z, math.hypot(x, y))
    theta = math.atan2(x, y)
    return r, theta, phi


def detections_from_points(points, cfg):
    """Express Cartesian points as (beat frequency, Doppler phase, omega_x, omega_z) rows."""
    rows = []
    for x, y, z, v in np.asarray(points, dtype=np.float64)[:, :4]:
        r, theta, phi = cartesian_to_spherical(x, y, z)
        omega_x, omega_z = phases_from_angles(theta, phi)
        rows.append((beat_from_range(r, cfg), phase_from_velocity(v, cfg), omega_x, omega_z))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def points_from_detections(detections, cfg):
    """Reconstruct (x, y, z, v) from detection rows with the inverse FMCW formulas."""
    rows = []
    for f, omega_v, omega_x, omega_z in np.asarray(detections, dtype=np.float64):
        r = range_from_beat(f, cfg)
        theta, phi = angles_from_phase(omega_x, omega_z)
        rows.append((*spherical_to_cartesian(r, theta, phi), velocity_from_phase(omega_v, cfg)))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


# Skeleton motions

# Typical adult bone lengths in meters, ordered as LIMB_EDGES
_BASE_LIMB_LENGTHS = np.array([
    0.13, 0.45, 0.44,          # right hip, thigh, shin
    0.13, 0.45, 0.44,          # left hip, thigh, shin
    0.23, 0.25, 0.10, 0.12,    # spine, thorax, neck, head
    0.15, 0.28, 0.25,          # left shoulder, upper arm, forearm
    0.15, 0.28, 0.25,          # right shoulder, upper arm, forearm
])

# Subject faces the radar (-y); subject right is -x
_REST_DIRECTIONS = np.array([
    [-1, 0, 0], [0, 0, -1], [0, 0, -1],
    [1, 0, 0], [0, 0, -1], [0, 0, -1],
    [0, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, 1],
    [1, 0, 0], [0, 0, -1], [0, 0, -1],
    [-1, 0, 0], [0, 0, -1], [0, 0, -1],
], dtype=np.float64)

R_THIGH, R_SHIN, L_THIGH, L_SHIN = 1, 2, 4, 5
L_UPPER_ARM, L_FOREARM, R_UPPER_ARM, R_FOREARM = 11, 12, 14, 15


def _swing(angle):
    """Direction of a downward bone swung forward (towards the radar) by ``angle``."""
    return np.array([0.0, -math.sin(angle), -math.cos(angle)])


def _abduct(angle, side):
    """Direction of a downward arm raised sideways; side is -1 for right, +1 for left."""
    return np.array([side * math.sin(angle), 0.0, -math.cos(angle)])


def _bone_directions(preset, w):
    dirs = _REST_DIRECTIONS.copy()
    if preset == 'walk':
        swing = 0.45 * math.sin(w)
        knee = 0.35 * (1.0 + math.sin(w + math.pi / 2)) / 2.0
        dirs[R_THIGH] = _swing(swing)
        dirs[R_SHIN] = _swing(swing - knee)
        dirs[L_THIGH] = _swing(-swing)
        dirs[L_SHIN] = _swing(-swing - (0.35 - knee))
        dirs[R_UPPER_ARM] = _swing(-0.4 * math.sin(w))
        dirs[R_FOREARM] = _swing(-0.4 * math.sin(w) + 0.3)
        dirs[L_UPPER_ARM] = _swing(0.4 * math.sin(w))
        dirs[L_FOREARM] = _swing(0.4 * math.sin(w) + 0.3)
    elif preset == 'raise-hand':
        lift = math.pi * (1.0 - math.cos(w)) / 2.0
        dirs[R_UPPER_ARM] = _abduct(lift, -1)
        dirs[R_FOREARM] = _abduct(lift, -1)
    elif preset == 'chest-expand':
        spread = (math.pi / 2) * (1.0 - math.cos(w)) / 2.0
        dirs[R_UPPER_ARM] = [-math.sin(spread), -math.cos(spread), 0.0]
        dirs[R_FOREARM] = [-math.sin(spread), -math.cos(spread), 0.0]
        dirs[L_UPPER_ARM] = [math.sin(spread), -math.cos(spread), 0.0]
        dirs[L_FOREARM] = [math.sin(spread), -math.cos(spread), 0.0]
    elif preset == 'kick':
        lift = 1.1 * (1.0 - math.cos(w)) / 2.0
        dirs[R_THIGH] = _swing(lift)
        dirs[R_SHIN] = _swing(lift * 1.2)
        dirs[L_UPPER_ARM] = _abduct(0.3 * (1.0 - math.cos(w)) / 2.0, 1)
        dirs[R_UPPER_ARM] = _abduct(0.3 * (1.0 - math.cos(w)) / 2.0, -1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _forward_kinematics(root, lengths, dirs, topo):
    joints = np.zeros((NUM_JOINTS, 3))
    joints[0] = root
    for e, (parent, child) in enumerate(topo.edges):
        joints[child] = joints[parent] + lengths[e] * dirs[e]
    return joints


def subject_limb_lengths(seed):
    """Bone lengths of the subject drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    height_scale = rng.uniform(0.9, 1.1)
    jitter = rng.uniform(0.97, 1.03, size=NUM_LIMBS)
    lengths = _BASE_LIMB_LENGTHS * height_scale * jitter
    # left and right sides share a length
    for right, left in ((0, 3), (1, 4), (2, 5), (13, 10), (14, 11), (15, 12)):
        lengths[left] = lengths[right]
    return lengths


def synth_skeleton_sequence(preset, T, period=0.1, seed=0, topo=H36M_TOPOLOGY,
                            sensor_height=1.0, distance=3.0):
    """Generate an anatomically plausible 17-joint motion in sensor coordinates."""
    if preset not in MOTION_PRESETS:
        raise ConfigError(f"unknown motion preset '{preset}', expected one of {MOTION_PRESETS}")
    if T < 1:
        raise ConfigError(f"sequence length must be >= 1, got {T}")
    if not period > 0:
        raise ConfigError(f"frame period must be positive, got {period}")

    lengths = subject_limb_lengths(seed)
    rng = np.random.default_rng([seed, 1])
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    freq = rng.uniform(0.4, 0.6) if preset != 'walk' else rng.uniform(0.8, 1.1)
    lateral = rng.uniform(-0.3, 0.3)

    leg_height = lengths[R_THIGH] + lengths[R_SHIN]
    frames = []
    for t in range(T):
        if preset == 'stand':
            w = 0.0
            root = np.array([lateral, distance, leg_height - sensor_height])
        else:
            w = phase0 + 2.0 * math.pi * freq * t * period
            root = np.array([lateral, distance, leg_height - sensor_height])
            if preset == 'walk':
                root = root + np.array([
                    0.3 * math.sin(w / 4.0),
                    0.5 * math.sin(w / 3.0),
                    0.02 * math.cos(2.0 * w) - 0.02,
                ])
        dirs = _bone_directions(preset, w)
        frames.append(Pose(_forward_kinematics(root, lengths, dirs, topo)))
    return PoseSequence(frames, period)


# Point rendering

def _in_frustum(xyz, cfg):
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.linalg.norm(xyz, axis=1)
    if np.any(y <= 0) or np.any(r > cfg.max_range) or np.any(r < cfg.min_range):
        return False
    theta = np.arctan2(x, y)
    phi = np.arctan2(z, np.hypot(x, y))
    return bool(np.all(np.abs(theta) <= cfg.azimuth_fov) and np.all(np.abs(phi) <= cfg.elevation_fov))


def _attributes(xyz, noise, rng):
    """Amplitude falls as 1/R^2 with log-normal jitter; energy is amplitude squared."""
    r = np.linalg.norm(xyz, axis=1)
    amplitude = noise.amplitude_ref / r ** 2 * np.exp(noise.amplitude_jitter * rng.standard_normal(len(r)))
    return amplitude ** 2, amplitude


def render_pointcloud(pose, prev_pose, cfg, noise, seed, frame_period=0.1,
                      timestamp=0.0, topo=H36M_TOPOLOGY):
    """Render one radar frame for ``pose``; ``prev_pose`` supplies radial velocities.

    Deterministic given ``seed`` (an int or anything ``np.random.default_rng`` accepts).
    """
    pose = pose if isinstance(pose, Pose) else Pose(pose)
    prev_pose = prev_pose if isinstance(prev_pose, Pose) else Pose(prev_pose)
    rng = np.random.default_rng(seed)

    if not _in_frustum(pose.joints, cfg):
        logger.debug(f"subject outside the sensing frustum at t={timestamp:.3f}")
        return PointCloudFrame(timestamp=timestamp, metadata={'out_of_frustum': True, 'dropped_limbs': []})

    parents, children = topo.parents, topo.children
    chunks, labels, dropped = [], [], []
    for e in range(NUM_LIMBS):
        drop = rng.random() < noise.segment_dropout_prob
        u = rng.random((noise.points_per_limb, 1))
        offsets = rng.standard_normal((noise.points_per_limb, 3)) * noise.dispersion_sigma
        if drop:
            dropped.append(e)
            continue
        a, b = pose.joints[parents[e]], pose.joints[children[e]]
        pa, pb = prev_pose.joints[parents[e]], prev_pose.joints[children[e]]
        on_limb = a + u * (b - a)
        displacement = on_limb - (pa + u * (pb - pa))
        xyz = on_limb + offsets
        direction = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
        v = np.sum(displacement * direction, axis=1) / frame_period
        chunks.append(np.column_stack([xyz, v]))
        labels.append(np.full(len(xyz), e, dtype=np.int64))

    n_ghosts = rng.poisson(noise.ghost_point_rate)
    if n_ghosts:
        # uniform in volume: cube-root range, arcsine elevation
        r_lo, r_hi = cfg.min_range ** 3, cfg.max_range ** 3
        r = np.cbrt(rng.uniform(r_lo, r_hi, n_ghosts))
        theta = rng.uniform(-cfg.azimuth_fov, cfg.azimuth_fov, n_ghosts)
        sin_elev = math.sin(cfg.elevation_fov)
        phi = np.arcsin(rng.uniform(-sin_elev, sin_elev, n_ghosts))
        ghosts = np.array([spherical_to_cartesian(*p) for p in zip(r, theta, phi)])
        v = rng.standard_normal(n_ghosts) * noise.ghost_velocity_sigma
        chunks.append(np.column_stack([ghosts, v]))
        labels.append(np.full(n_ghosts, -1, dtype=np.int64))

    if chunks:
        xyzv = np.concatenate(chunks)
        energy, amplitude = _attributes(xyzv[:, :3], noise, rng)
        points = np.column_stack([xyzv, energy, amplitude])
        point_labels = np.concatenate(labels)
    else:
        points = np.zeros((0, 6))
        point_labels = np.zeros(0, dtype=np.int64)
    return PointCloudFrame(points, timestamp, point_labels,
                           {'out_of_frustum': False, 'dropped_limbs': dropped})


def render_sequence(seq, cfg, noise, seed, topo=H36M_TOPOLOGY):
    """Render every frame of a pose sequence, one derived seed per frame."""
    frames = []
    for t, pose in enumerate(seq.frames):
        prev = seq.frames[t - 1] if t > 0 else pose
        frames.append(render_pointcloud(pose, prev, cfg, noise, [seed, t], seq.frame_period,
                                        t * seq.frame_period, topo))
    return frames
