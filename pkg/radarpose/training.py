"""Two-phase training: coarse regression (phase 1), then conditional diffusion (phase 2).

Phase 2 freezes the phase-1 model and reads coarse poses, joint features and the
global condition from a cache built by one eval-mode pass over the split.
"""

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from radarpose.conditioning import Phase1Model
from radarpose.config import config_from_dict
from radarpose.diffusion import FrameContext, RefinementModel, make_schedule
from radarpose.errors import CheckpointError, ConfigError, DatasetError
from radarpose.nn_core import (
    ExponentialMovingAverage,
    load_checkpoint,
    load_module_state,
    save_checkpoint,
)
from radarpose.pose_core import H36M_TOPOLOGY
from radarpose.preprocess import read_manifest, read_split

logger = logging.getLogger(__name__)

PHASE1_DIR = 'phase1'
PHASE2_DIR = 'phase2'


@dataclass
class SplitTensors:
    """A dataset split flattened into frame tensors, with sequence bookkeeping."""
    poses: torch.Tensor       # (F, 17, 3) sensor frame
    points: torch.Tensor      # (F, N, 6)
    mask: torch.Tensor        # (F, N)
    sequences: list           # [{name, scene, start, frames}]

    def __len__(self):
        return self.poses.shape[0]

    @property
    def centers(self):
        # subject position the simulator reports (the pelvis); clouds are cropped around it
        return self.poses[:, 0]

    @property
    def targets(self):
        return self.poses - self.poses[:, :1]

    def usable(self, min_points=1):
        """Frames whose cloud has enough valid points to encode."""
        return self.mask.sum(dim=1) >= max(min_points, 1)

    def history_index(self, window):
        """(F, window) indices of the previous ``window`` frames, clamped to the sequence start.

        The first frame of a sequence has no past and uses itself.
        """
        index = np.zeros((len(self), window), dtype=np.int64)
        for seq in self.sequences:
            start = seq['start']
            for t in range(seq['frames']):
                if t == 0:
                    index[start] = start
                    continue
                past = np.arange(t - window, t)
                index[start + t] = start + np.maximum(past, 0)
        return torch.from_numpy(index)


def load_split(dataset_dir, split):
    manifest = read_manifest(dataset_dir)
    sequences = read_split(dataset_dir, split, manifest)
    if not sequences:
        raise DatasetError(f"split '{split}' in {dataset_dir} has no sequences")
    info, start = [], 0
    for seq in sequences:
        info.append({'name': seq.name, 'scene': seq.scene, 'preset': seq.preset,
                     'start': start, 'frames': len(seq)})
        start += len(seq)
    return SplitTensors(
        torch.from_numpy(np.concatenate([s.poses for s in sequences])),
        torch.from_numpy(np.concatenate([s.points for s in sequences])),
        torch.from_numpy(np.concatenate([s.mask for s in sequences])),
        info,
    )


def limb_lengths_tensor(poses, topo=H36M_TOPOLOGY):
    parents = torch.as_tensor(topo.parents)
    children = torch.as_tensor(topo.children)
    return torch.linalg.norm(poses[..., children, :] - poses[..., parents, :], dim=-1)


def _chunks(n, size):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def group_frames(encoder, data, frames, batch_size=256):
    """Run the parameter-free grouping stage once for the given frame indices."""
    grouped, anchor_mask = [], []
    for start, stop in _chunks(len(frames), batch_size):
        idx = frames[start:stop]
        g, m = encoder.group(data.points[idx], data.mask[idx], data.centers[idx])
        grouped.append(g)
        anchor_mask.append(m)
    return torch.cat(grouped), torch.cat(anchor_mask)


def write_loss_csv(path, rows):
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()) if rows else ['epoch', 'loss'])
        writer.writeheader()
        writer.writerows(rows)


def _loader(dataset, cfg):
    generator = torch.Generator().manual_seed(cfg.seed)
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator, num_workers=0)


def _optimizer(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.momentum, 0.999))


def train_phase1(cfg, out_dir=None, split='train', progress=True):
    """Train encoder, GRC and coarse decoder on the joint regression loss.

    Returns (model, per-epoch loss rows).
    """
    cfg.require_dataset()
    out_dir = out_dir or cfg.out
    data = load_split(cfg.dataset, split)
    torch.manual_seed(cfg.seed)
    model = Phase1Model(cfg)

    frames = torch.nonzero(data.usable(cfg.min_points)).flatten()
    if len(frames) < len(data):
        logger.warning(f"skipping {len(data) - len(frames)} frames with fewer than {cfg.min_points} points")
    if len(frames) == 0:
        raise DatasetError(f"split '{split}' has no frame with enough radar points")
    grouped, anchor_mask = group_frames(model.encoder, data, frames)
    loader = _loader(TensorDataset(grouped, anchor_mask, data.targets[frames]), cfg)
    optimizer = _optimizer(model.parameters(), cfg)

    rows, step = [], 0
    epochs = tqdm(range(1, cfg.epochs_phase1 + 1), desc='phase 1', disable=not progress)
    for epoch in epochs:
        model.train()
        total, seen = 0.0, 0
        for batch_grouped, batch_mask, target in loader:
            coarse, _, _ = model(grouped=(batch_grouped, batch_mask))
            loss = ((coarse - target) ** 2).sum(dim=-1).mean()
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            total += loss.item() * len(target)
            seen += len(target)
        rows.append({'epoch': epoch, 'loss': total / seen})
        epochs.set_postfix(loss=f"{total / seen:.5f}")
        logger.info(f"phase 1 epoch {epoch}/{cfg.epochs_phase1}: joint loss {total / seen:.6f}")

    write_loss_csv(os.path.join(out_dir, 'phase1_loss.csv'), rows)
    save_checkpoint(os.path.join(out_dir, PHASE1_DIR), model.state_dict(), step,
                    kind='phase1', config=cfg.to_dict())
    return model, rows


def load_phase1(directory):
    """Rebuild a frozen, eval-mode phase-1 model from its checkpoint."""
    state, _, manifest = load_checkpoint(directory)
    if manifest.get('kind') != 'phase1':
        raise CheckpointError(f"{directory} holds a '{manifest.get('kind')}' checkpoint, expected phase1")
    cfg = config_from_dict(manifest['config'])
    model = Phase1Model(cfg)
    load_module_state(model, state, 'phase-1')
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    logger.info(f"loaded phase-1 checkpoint {directory} (step {manifest['step']})")
    return model, cfg


@dataclass
class CoarseCache:
    coarse: torch.Tensor          # (F, 17, 3), pelvis-relative
    joint_features: torch.Tensor  # (F, 17, d_j)
    c_glo: torch.Tensor           # (F, 17, 64)
    usable: torch.Tensor          # (F,) frames the encoder could read


@torch.no_grad()
def coarse_cache(phase1, data, min_points=1, batch_size=256):
    """Phase-1 outputs for every frame; unreadable frames carry the previous frame's values."""
    usable = data.usable(min_points)
    frames = torch.nonzero(usable).flatten()
    if len(frames) == 0:
        raise DatasetError("no frame in the split has enough radar points")
    grouped, anchor_mask = group_frames(phase1.encoder, data, frames, batch_size)
    outputs = []
    for start, stop in _chunks(len(frames), batch_size):
        outputs.append(phase1(grouped=(grouped[start:stop], anchor_mask[start:stop])))
    coarse, features, c_glo = (torch.cat(parts) for parts in zip(*outputs))

    n = len(data)
    full = [torch.zeros(n, *t.shape[1:], dtype=t.dtype) for t in (coarse, features, c_glo)]
    for tensor, values in zip(full, (coarse, features, c_glo)):
        tensor[frames] = values
    for seq in data.sequences:
        for t in range(seq['start'], seq['start'] + seq['frames']):
            if not usable[t] and t > seq['start']:
                for tensor in full:
                    tensor[t] = tensor[t - 1]
    if not bool(usable.all()):
        logger.warning(f"{int((~usable).sum())} frames had too few points; reusing the previous estimate")
    return CoarseCache(*full, usable)


def frame_context(data, cache, history_index, idx):
    return FrameContext(
        coarse=cache.coarse[idx],
        joint_features=cache.joint_features[idx],
        c_glo=cache.c_glo[idx],
        history=cache.coarse[history_index[idx]],
        points=data.points[idx],
        mask=data.mask[idx],
        center=data.centers[idx],
    )


def train_phase2(cfg, phase1_dir=None, out_dir=None, split='train', progress=True):
    """Train LRC, SLC, TMC and the denoiser with the phase-1 model frozen.

    Returns (model, ema, per-epoch loss rows).
    """
    cfg.require_dataset()
    out_dir = out_dir or cfg.out
    phase1_dir = phase1_dir or os.path.join(out_dir, PHASE1_DIR)
    phase1, phase1_cfg = load_phase1(phase1_dir)
    if phase1_cfg.joint_dim != cfg.joint_dim:
        raise ConfigError(f"phase-1 joint width {phase1_cfg.joint_dim} does not match config {cfg.joint_dim}")

    data = load_split(cfg.dataset, split)
    cache = coarse_cache(phase1, data, phase1_cfg.min_points)
    history_index = data.history_index(cfg.history)
    sched = make_schedule(cfg.diffusion_steps, cfg.schedule, cfg.beta_lo, cfg.beta_hi)
    limbs_gt = limb_lengths_tensor(data.targets)

    torch.manual_seed(cfg.seed)
    model = RefinementModel(cfg)
    ema = ExponentialMovingAverage(model, cfg.ema_decay)
    frames = torch.nonzero(cache.usable).flatten()
    loader = _loader(TensorDataset(frames), cfg)
    optimizer = _optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    noise_generator = torch.Generator().manual_seed(cfg.seed + 1)

    rows, step = [], 0
    epochs = tqdm(range(1, cfg.epochs_phase2 + 1), desc='phase 2', disable=not progress)
    for epoch in epochs:
        model.train()
        totals, seen = {'loss': 0.0, 'noise': 0.0, 'limb': 0.0}, 0
        for (idx,) in loader:
            ctx = frame_context(data, cache, history_index, idx)
            loss, parts = model.loss(data.targets[idx], limbs_gt[idx], ctx, sched, cfg.limb_weight,
                                     noise_generator, return_parts=True)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            ema.update(model)
            step += 1
            totals['loss'] += loss.item() * len(idx)
            totals['noise'] += parts['noise'] * len(idx)
            totals['limb'] += parts['limb'] * len(idx)
            seen += len(idx)
        row = {'epoch': epoch, **{key: value / seen for key, value in totals.items()}}
        rows.append(row)
        epochs.set_postfix(loss=f"{row['loss']:.5f}")
        logger.info(f"phase 2 epoch {epoch}/{cfg.epochs_phase2}: loss {row['loss']:.6f} "
                    f"(noise {row['noise']:.6f}, limb {row['limb']:.6f})")

    write_loss_csv(os.path.join(out_dir, 'phase2_loss.csv'), rows)
    save_checkpoint(os.path.join(out_dir, PHASE2_DIR), model.state_dict(), step, ema.state_dict(),
                    kind='phase2', config=cfg.to_dict())
    return model, ema, rows


def load_phase2(directory, use_ema=True):
    """Rebuild the eval-mode refinement model; EMA weights replace the raw ones when present."""
    state, ema_state, manifest = load_checkpoint(directory)
    if manifest.get('kind') != 'phase2':
        raise CheckpointError(f"{directory} holds a '{manifest.get('kind')}' checkpoint, expected phase2")
    cfg = config_from_dict(manifest['config'])
    model = RefinementModel(cfg)
    load_module_state(model, state, 'phase-2')
    if use_ema and ema_state:
        ema = ExponentialMovingAverage(model, cfg.ema_decay)
        ema.load_state_dict(ema_state)
        ema.copy_to(model)
    model.eval()
    logger.info(f"loaded phase-2 checkpoint {directory} (step {manifest['step']}, ema={bool(use_ema and ema_state)})")
    return model, cfg
