"""Run configuration, profiles and process-level settings.

Resolution order: dataclass defaults < profile < JSON file < explicit overrides.
Process-level settings come from the environment (a ``.env`` file is honoured).
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields

import torch
from dotenv import load_dotenv

from radarpose.errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

PROFILES = {
    'desk': {
        'batch_size': 64,
        'learning_rate': 1e-3,
        'epochs_phase1': 100,
        'epochs_phase2': 100,
        'joint_dim': 128,
        'pc_dim': 256,
        'global_layers': 4,
        'global_heads': 4,
        'local_layers': 2,
        'local_heads': 4,
        'local_width': 64,
        'n_max': 256,
    },
    'full': {
        'batch_size': 1024,
        'learning_rate': 2e-5,
        'epochs_phase1': 100,
        'epochs_phase2': 100,
        'joint_dim': 1024,
        'pc_dim': 1024,
        'global_layers': 10,
        'global_heads': 8,
        'local_layers': 5,
        'local_heads': 8,
        'local_width': 96,
        'n_max': 5000,
    },
}


@dataclass
class RunConfig:
    dataset: str = ''
    out: str = 'runs'
    profile: str = 'desk'
    seed: int = 0

    # optimizer
    learning_rate: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 1.0
    epochs_phase1: int = 100
    epochs_phase2: int = 100
    batch_size: int = 64
    ema_decay: float = 0.999

    # diffusion
    schedule: str = 'constant'
    diffusion_steps: int = 25
    beta_lo: float = 0.001
    beta_hi: float = 0.001
    limb_weight: float = 5.0
    hypotheses: int = 5
    sampler: str = 'x0'

    # conditioning
    history: int = 8
    knn_k: int = 50
    reliability_threshold: float = 0.04
    fps_stride: int = 32
    ball_radius: float = 0.1
    ball_samples: int = 32
    min_points: int = 1
    grc_guidance: str = 'template'
    lrc_anchors: str = 'dynamic'
    use_global: bool = True
    use_local: bool = True
    use_temporal: bool = True
    use_limb: bool = True

    # widths
    joint_dim: int = 128
    pc_dim: int = 256
    global_layers: int = 4
    global_heads: int = 4
    local_layers: int = 2
    local_heads: int = 4
    local_width: int = 64
    hidden_dim: int = 96
    gcn_blocks: int = 5
    gcn_heads: int = 4
    cheb_order: int = 2
    gcn_dropout: float = 0.25
    dropout: float = 0.1

    # preprocessing
    n_max: int = 256
    concat_window: int = 4
    crop_half_extent: float = 1.6

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile '{self.profile}', expected one of {sorted(PROFILES)}")
        if self.schedule not in ('constant', 'linear'):
            raise ConfigError(f"unknown schedule '{self.schedule}'")
        if self.sampler not in ('x0', 'beta-step'):
            raise ConfigError(f"unknown sampler '{self.sampler}'")
        if self.grc_guidance not in ('template', 'pointcloud'):
            raise ConfigError(f"unknown GRC guidance '{self.grc_guidance}'")
        if self.lrc_anchors not in ('dynamic', 'static'):
            raise ConfigError(f"unknown LRC anchors '{self.lrc_anchors}'")
        if not 0 < self.beta_lo <= self.beta_hi < 1:
            raise ConfigError(f"beta range must satisfy 0 < lo <= hi < 1, got [{self.beta_lo}, {self.beta_hi}]")
        for name in ('diffusion_steps', 'hypotheses', 'history', 'knn_k', 'batch_size',
                     'fps_stride', 'ball_samples', 'n_max', 'concat_window', 'gcn_blocks'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for dim, heads in ((self.joint_dim, self.global_heads), (self.local_width, self.local_heads),
                           (self.hidden_dim, self.gcn_heads)):
            if dim % heads:
                raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        if self.learning_rate <= 0 or self.grad_clip <= 0 or not 0 < self.ema_decay < 1:
            raise ConfigError("learning rate, gradient clip and EMA decay must be positive (decay < 1)")

    def to_dict(self):
        return asdict(self)

    def require_dataset(self):
        if not self.dataset or not os.path.isdir(self.dataset):
            raise ConfigError(f"dataset directory '{self.dataset}' does not exist")
        if not os.path.exists(os.path.join(self.dataset, 'manifest.json')):
            raise ConfigError(f"'{self.dataset}' is not a dataset directory (no manifest.json)")


def _check_keys(data, source):
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")


def load_config(path=None, overrides=None):
    """Resolve a RunConfig from profile, optional JSON file and overrides."""
    data = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        _check_keys(data, path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(overrides, 'overrides')

    profile = overrides.get('profile', data.get('profile', 'desk'))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}', expected one of {sorted(PROFILES)}")
    resolved = dict(PROFILES[profile])
    resolved.update(data)
    resolved.update(overrides)
    resolved['profile'] = profile
    return RunConfig(**resolved)


def config_from_dict(data):
    _check_keys(data, 'checkpoint')
    return RunConfig(**data)


def setup_environment(verbose=False):
    """Load ``.env``, configure logging and torch threading for an entry point."""
    load_dotenv()
    level_name = 'DEBUG' if verbose else os.getenv('RADARPOSE_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)
    threads = os.getenv('RADARPOSE_NUM_THREADS')
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            logger.warning(f"ignoring RADARPOSE_NUM_THREADS={threads!r}")


def blob_hash(path):
    """Git-style blob hash of a file: sha1 over ``blob <size>\\0`` plus the content."""
    with open(path, 'rb') as f:
        content = f.read()
    return hashlib.sha1(b'blob %d\0' % len(content) + content).hexdigest()


def input_hashes(*paths):
    """Blob hashes of every file under the given files or directories."""
    hashes = {}
    for path in paths:
        if not path or not os.path.exists(path):
            continue
        if os.path.isfile(path):
            hashes[path] = blob_hash(path)
            continue
        for root, _, files in os.walk(path):
            for name in sorted(files):
                full = os.path.join(root, name)
                hashes[full] = blob_hash(full)
    return dict(sorted(hashes.items()))


def write_run_record(out_dir, command, cfg=None, inputs=(), extra=None):
    """Write ``run.json``: command, resolved config and input hashes."""
    os.makedirs(out_dir, exist_ok=True)
    record = {
        'command': command,
        'config': cfg.to_dict() if cfg is not None else {},
        'inputs': input_hashes(*inputs),
    }
    if extra:
        record.update(extra)
    path = os.path.join(out_dir, 'run.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(record, f, indent=2)
    logger.debug(f"wrote run record {path}")
    return record
