"""Refined pose inference over a dataset split.

Writes ``poses.f32`` (refined, pelvis-relative), ``coarse.f32`` and a
``predictions.json`` index into the output directory.
"""

import json
import logging
import os

import numpy as np
import torch
from tqdm import tqdm

from radarpose.config import blob_hash
from radarpose.diffusion import make_schedule
from radarpose.errors import ConfigError, DatasetError
from radarpose.pose_core import NUM_JOINTS
from radarpose.preprocess import read_manifest
from radarpose.training import coarse_cache, frame_context, load_phase1, load_phase2, load_split

logger = logging.getLogger(__name__)

ABLATION_FLAGS = ('global', 'local', 'limb', 'temporal')


def apply_ablation(model, cfg):
    """Switch off modules the run config disables; a module missing from the checkpoint cannot be enabled."""
    requested = {'global': cfg.use_global, 'local': cfg.use_local,
                 'limb': cfg.use_limb, 'temporal': cfg.use_temporal}
    available = model.flags()
    for name in ABLATION_FLAGS:
        if requested[name] and not available[name]:
            logger.warning(f"checkpoint was trained without the {name} condition; leaving it disabled")
        setattr(model, f"use_{name}", bool(requested[name] and available[name]))
    return model.flags()


def _checkpoint_hash(directory):
    path = os.path.join(directory, 'params.f32')
    return blob_hash(path) if os.path.exists(path) else None


def infer(cfg, phase1_dir, phase2_dir, out_dir, split='test', hypotheses=None, seed=None,
          use_ema=True, progress=True):
    """Run coarse estimation and diffusion refinement for every frame of ``split``.

    Returns the predictions index written to ``predictions.json``.
    """
    cfg.require_dataset()
    manifest = read_manifest(cfg.dataset)
    if split not in manifest.splits:
        raise DatasetError(f"split '{split}' not found in {cfg.dataset} (have {sorted(manifest.splits)})")
    hypotheses = hypotheses or cfg.hypotheses
    seed = cfg.seed if seed is None else seed
    if hypotheses < 1:
        raise ConfigError(f"need at least one hypothesis, got {hypotheses}")

    phase1, phase1_cfg = load_phase1(phase1_dir)
    model, model_cfg = load_phase2(phase2_dir, use_ema)
    flags = apply_ablation(model, cfg)
    sched = make_schedule(model_cfg.diffusion_steps, model_cfg.schedule, model_cfg.beta_lo, model_cfg.beta_hi)

    data = load_split(cfg.dataset, split)
    cache = coarse_cache(phase1, data, phase1_cfg.min_points)
    history_index = data.history_index(model_cfg.history)

    refined = cache.coarse.clone()
    frames = torch.nonzero(cache.usable).flatten()
    batches = range(0, len(frames), cfg.batch_size)
    for start in tqdm(batches, desc=f'infer {split}', disable=not progress):
        idx = frames[start:start + cfg.batch_size]
        ctx = frame_context(data, cache, history_index, idx)
        _, mean = model.refine(ctx, sched, hypotheses, seed=seed + int(start), mode=cfg.sampler)
        refined[idx] = mean

    refined = refined - refined[:, :1]
    os.makedirs(out_dir, exist_ok=True)
    refined.numpy().astype('<f4').tofile(os.path.join(out_dir, 'poses.f32'))
    cache.coarse.numpy().astype('<f4').tofile(os.path.join(out_dir, 'coarse.f32'))

    index = {
        'split': split,
        'frames': len(data),
        'sequences': [{k: s[k] for k in ('name', 'scene', 'preset', 'frames')} for s in data.sequences],
        'hypotheses': hypotheses,
        'seed': seed,
        'sampler': cfg.sampler,
        'ablation': flags,
        'ema': use_ema,
        'unreadable_frames': int((~cache.usable).sum()),
        'checkpoints': {'phase1': _checkpoint_hash(phase1_dir), 'phase2': _checkpoint_hash(phase2_dir)},
    }
    with open(os.path.join(out_dir, 'predictions.json'), 'w', encoding='utf-8') as f:
        json.dump(index, f, indent=2)
    logger.info(f"wrote {len(data)} refined poses for split '{split}' to {out_dir}")
    return index


def read_predictions(directory):
    """Returns (index, refined (F, 17, 3), coarse (F, 17, 3)) as float32 arrays."""
    path = os.path.join(directory, 'predictions.json')
    if not os.path.exists(path):
        raise DatasetError(f"no predictions index at {path}")
    with open(path, 'r', encoding='utf-8') as f:
        index = json.load(f)
    arrays = []
    for name in ('poses.f32', 'coarse.f32'):
        file_path = os.path.join(directory, name)
        if not os.path.exists(file_path):
            raise DatasetError(f"missing predictions file {file_path}")
        flat = np.fromfile(file_path, dtype='<f4')
        if flat.size != index['frames'] * NUM_JOINTS * 3:
            raise DatasetError(f"{file_path}: expected {index['frames']} poses, found {flat.size / (NUM_JOINTS * 3):g}")
        arrays.append(flat.reshape(index['frames'], NUM_JOINTS, 3))
    return index, arrays[0], arrays[1]
