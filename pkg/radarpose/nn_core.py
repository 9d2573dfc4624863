"""Neural building blocks, point-set utilities, EMA and checkpoint I/O.

Feature tensors are batch-first: (batch, tokens, features).
"""

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from radarpose.errors import CheckpointError, ConfigError, PointSetError, ShapeError
from radarpose.pose_core import H36M_TOPOLOGY, NUM_JOINTS

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def _check_last_dim(x, expected, what):
    if x.shape[-1] != expected:
        raise ShapeError(f"{what} expects feature dim {expected}, got {tuple(x.shape)}")


class MLP(nn.Module):
    """LayerNorm, Linear, Dropout, ReLU, Linear."""

    def __init__(self, in_dim, hidden_dim, out_dim, dropout=0.1):
        super().__init__()
        self.in_dim = in_dim
        self.norm = nn.LayerNorm(in_dim)
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        _check_last_dim(x, self.in_dim, 'MLP')
        return self.fc2(F.relu(self.dropout(self.fc1(self.norm(x)))))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"feature dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        """Returns (output, weights); weights are (batch, heads, tokens, tokens).

        ``key_mask`` (batch, tokens) marks keys that may be attended to.
        """
        _check_last_dim(x, self.dim, 'attention')
        batch, tokens, _ = x.shape
        head_dim = self.dim // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.reshape(batch, tokens, self.heads, head_dim).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float('-inf'))
        weights = torch.softmax(scores, dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(batch, tokens, self.dim)
        return self.out(attended), weights


class TransformerLayer(nn.Module):
    """Pre-norm self-attention and feed-forward, each with a skip connection."""

    def __init__(self, dim, heads, ff_hidden=None, dropout=0.1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attention = MultiHeadSelfAttention(dim, heads)
        self.dropout = nn.Dropout(dropout)
        self.feed_forward = MLP(dim, ff_hidden or 2 * dim, dim, dropout)

    def forward(self, x, key_mask=None, return_attention=False):
        attended, weights = self.attention(self.norm(x), key_mask)
        x = x + self.dropout(attended)
        x = x + self.feed_forward(x)
        return (x, weights) if return_attention else x


@dataclass
class GraphSpec:
    adjacency: np.ndarray
    order: int = 2

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n) or not np.array_equal(self.adjacency, self.adjacency.T):
            raise ConfigError("graph adjacency must be a symmetric square matrix")
        if self.order < 0:
            raise ConfigError(f"Chebyshev order must be >= 0, got {self.order}")

    @property
    def num_nodes(self):
        return self.adjacency.shape[0]

    def scaled_laplacian(self):
        """2 L / lambda_max - I for the symmetric normalized Laplacian L."""
        degree = self.adjacency.sum(axis=1)
        inv_sqrt = np.zeros_like(degree)
        nz = degree > 0
        inv_sqrt[nz] = 1.0 / np.sqrt(degree[nz])
        laplacian = np.eye(self.num_nodes) - inv_sqrt[:, None] * self.adjacency * inv_sqrt[None, :]
        lambda_max = np.linalg.eigvalsh(laplacian).max()
        return 2.0 * laplacian / lambda_max - np.eye(self.num_nodes)


def skeleton_graph(topo=H36M_TOPOLOGY, order=2):
    adjacency = np.zeros((NUM_JOINTS, NUM_JOINTS))
    for parent, child in topo.edges:
        adjacency[parent, child] = adjacency[child, parent] = 1.0
    return GraphSpec(adjacency, order)


class ChebGraphConv(nn.Module):
    """y = sum_j T_j(L~) x W_j (+ b) over the Chebyshev recurrence on the scaled Laplacian."""

    def __init__(self, in_dim, out_dim, graph, bias=True):
        super().__init__()
        self.in_dim = in_dim
        self.order = graph.order
        self.weight = nn.Parameter(torch.empty(graph.order + 1, in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None
        self.register_buffer('laplacian', torch.tensor(graph.scaled_laplacian(), dtype=torch.float32),
                             persistent=False)
        for w in self.weight:
            nn.init.xavier_uniform_(w)

    def forward(self, x):
        if x.shape[-2] != self.laplacian.shape[0]:
            raise ShapeError(f"graph conv expects {self.laplacian.shape[0]} nodes, got {tuple(x.shape)}")
        _check_last_dim(x, self.in_dim, 'graph conv')
        lap = self.laplacian.to(x.dtype)
        basis = [x]
        if self.order >= 1:
            basis.append(lap @ x)
        for _ in range(2, self.order + 1):
            basis.append(2.0 * (lap @ basis[-1]) - basis[-2])
        out = sum(t @ w for t, w in zip(basis, self.weight))
        if self.bias is not None:
            out = out + self.bias
        return out


class GraphAttention(TransformerLayer):
    """Self-attention over all joint pairs of the skeleton graph, with skip connections."""

    def __init__(self, graph, dim, heads=4, dropout=0.1):
        super().__init__(dim, heads, dropout=dropout)
        self.num_nodes = graph.num_nodes

    def forward(self, x, key_mask=None, return_attention=False):
        if x.shape[-2] != self.num_nodes:
            raise ShapeError(f"graph attention expects {self.num_nodes} nodes, got {tuple(x.shape)}")
        return super().forward(x, key_mask, return_attention)


class GCNBlock(nn.Module):
    """Chebyshev graph conv with a skip connection, followed by graph attention."""

    def __init__(self, graph, dim, heads=4, dropout=0.25):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.conv = ChebGraphConv(dim, dim, graph)
        self.dropout = nn.Dropout(dropout)
        self.attention = GraphAttention(graph, dim, heads, dropout)

    def forward(self, x):
        x = x + self.dropout(F.relu(self.conv(self.norm(x))))
        return self.attention(x)


class TemporalConv(nn.Module):
    """Conv1D(k=3), Dropout, ReLU, Conv1D(k=3), MaxPool along time, shared across joints."""

    def __init__(self, channels, dropout=0.1, kernel_size=3):
        super().__init__()
        self.channels = channels
        self.min_steps = 2 * (kernel_size - 1) + 1
        self.conv1 = nn.Conv1d(channels, channels, kernel_size)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size)

    def forward(self, z_seq):
        """(batch, time, joints, channels) or (time, joints, channels) -> (..., joints, channels)."""
        unbatched = z_seq.dim() == 3
        if unbatched:
            z_seq = z_seq.unsqueeze(0)
        if z_seq.dim() != 4:
            raise ShapeError(f"temporal conv expects a rank-3 or rank-4 input, got {tuple(z_seq.shape)}")
        _check_last_dim(z_seq, self.channels, 'temporal conv')
        batch, steps, joints, channels = z_seq.shape
        if steps < self.min_steps:
            # replicate the earliest frame
            pad = z_seq[:, :1].expand(batch, self.min_steps - steps, joints, channels)
            z_seq = torch.cat([pad, z_seq], dim=1)
        x = z_seq.permute(0, 2, 3, 1).reshape(batch * joints, channels, -1)
        x = self.conv2(F.relu(self.dropout(self.conv1(x))))
        out = x.max(dim=-1).values.reshape(batch, joints, channels)
        return out[0] if unbatched else out


# Point-set utilities; points are (N, >=3) tensors, masks are (N,) booleans.

def _valid_mask(points, mask):
    if mask is None:
        return torch.ones(points.shape[0], dtype=torch.bool, device=points.device)
    return mask.to(torch.bool)


@torch.no_grad()
def fps(points, count, mask=None):
    """Farthest point sampling over valid points.

    The distance field starts from the valid point nearest to the centroid; each
    step then takes the not-yet-selected valid point farthest from everything
    chosen so far (lowest index on ties).
    """
    xyz = points[:, :3].double()
    valid = _valid_mask(points, mask)
    n_valid = int(valid.sum())
    if count > n_valid:
        raise PointSetError(f"cannot sample {count} anchors from {n_valid} valid points")
    if count <= 0:
        return torch.zeros(0, dtype=torch.long)

    centroid = xyz[valid].mean(dim=0)
    to_centroid = torch.linalg.norm(xyz - centroid, dim=1)
    to_centroid[~valid] = float('inf')
    seed = int(torch.argmin(to_centroid))

    distance = torch.linalg.norm(xyz - xyz[seed], dim=1)
    available = valid.clone()
    selected = []
    for _ in range(count):
        candidates = torch.where(available, distance, torch.full_like(distance, -1.0))
        index = int(torch.argmax(candidates))
        selected.append(index)
        available[index] = False
        distance = torch.minimum(distance, torch.linalg.norm(xyz - xyz[index], dim=1))
    return torch.tensor(selected, dtype=torch.long)


@torch.no_grad()
def ball_query(points, anchors, radius=0.1, nsamples=32, mask=None):
    """Group valid points within ``radius`` of each anchor coordinate.

    Returns (indices (P, nsamples), empty (P,)). Groups are ordered by distance
    and completed by repeating the nearest member; anchors with no point in
    range repeat their nearest valid point and are flagged empty.
    """
    if radius <= 0:
        raise PointSetError(f"ball query radius must be positive, got {radius}")
    xyz = points[:, :3].double()
    valid = _valid_mask(points, mask)
    if not bool(valid.any()):
        raise PointSetError("ball query on a cloud without valid points")
    centers = anchors[:, :3].double()
    dist = torch.cdist(centers, xyz)
    dist[:, ~valid] = float('inf')
    order = torch.sort(dist, dim=1, stable=True).indices
    sorted_dist = torch.gather(dist, 1, order)
    in_range = (sorted_dist <= radius).sum(dim=1)

    groups = torch.empty(len(centers), nsamples, dtype=torch.long)
    for p in range(len(centers)):
        found = min(int(in_range[p]), nsamples)
        groups[p] = order[p, 0]
        groups[p, :found] = order[p, :found]
    return groups, in_range == 0


@torch.no_grad()
def knn_batch(xyz, anchors, k, mask=None):
    """K nearest valid neighbours per anchor.

    xyz (B, N, 3), anchors (B, A, 3), mask (B, N) -> (indices (B, A, k), distances (B, A, k)).
    Ties go to the lower index; clouds with fewer than k valid points cycle through
    their sorted neighbours.
    """
    batch, n, _ = xyz.shape
    valid = torch.ones(batch, n, dtype=torch.bool) if mask is None else mask.to(torch.bool)
    n_valid = valid.sum(dim=1)
    if bool((n_valid == 0).any()):
        raise PointSetError("nearest-neighbour search on an empty cloud")
    dist = torch.cdist(anchors.double(), xyz.double())
    dist = dist.masked_fill(~valid[:, None, :], float('inf'))
    order = torch.sort(dist, dim=-1, stable=True).indices
    positions = torch.arange(k)[None, :] % n_valid[:, None]
    positions = positions[:, None, :].expand(batch, anchors.shape[1], k)
    indices = torch.gather(order, 2, positions)
    return indices, torch.gather(dist, 2, indices)


def knn(points, anchor, k=50, mask=None):
    """Indices of the ``k`` valid points nearest to a single anchor coordinate."""
    if points.shape[0] == 0:
        raise PointSetError("nearest-neighbour search on an empty cloud")
    valid = None if mask is None else mask[None]
    indices, _ = knn_batch(points[None, :, :3], anchor.reshape(1, 1, 3), k, valid)
    return indices[0, 0]


class ExponentialMovingAverage:
    """Shadow copy of the trainable parameters: shadow <- decay * shadow + (1 - decay) * param."""

    def __init__(self, module, decay=0.999):
        self.decay = decay
        self.shadow = {name: p.detach().clone() for name, p in module.named_parameters() if p.requires_grad}

    @torch.no_grad()
    def update(self, module):
        for name, p in module.named_parameters():
            if name in self.shadow:
                self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, module):
        params = dict(module.named_parameters())
        for name, value in self.shadow.items():
            if params[name].shape != value.shape:
                raise CheckpointError(f"EMA shadow for {name} has shape {tuple(value.shape)}")
            params[name].copy_(value)

    def state_dict(self):
        return {name: t.clone() for name, t in self.shadow.items()}

    def load_state_dict(self, state):
        for name, value in state.items():
            if name not in self.shadow or self.shadow[name].shape != value.shape:
                raise CheckpointError(f"EMA entry {name} does not match the model")
            self.shadow[name] = value.clone()


def save_checkpoint(directory, state, step=0, ema_state=None, kind='model', config=None):
    """Write ``manifest.json`` and ``params.f32`` (float32, little-endian, manifest order)."""
    os.makedirs(directory, exist_ok=True)
    entries, chunks = [], []
    named = list(state.items())
    if ema_state:
        named += [(f"ema.{name}", t) for name, t in ema_state.items()]
    for name, tensor in named:
        array = tensor.detach().cpu().numpy().astype('<f4')
        entries.append({'name': name, 'shape': list(array.shape)})
        chunks.append(array.ravel())
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype='<f4')
    payload.astype('<f4').tofile(os.path.join(directory, 'params.f32'))
    manifest = {
        'format_version': CHECKPOINT_VERSION,
        'kind': kind,
        'step': int(step),
        'ema': bool(ema_state),
        'tensors': entries,
        'config': config or {},
    }
    with open(os.path.join(directory, 'manifest.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"saved {kind} checkpoint ({len(entries)} tensors) to {directory}")


def load_checkpoint(directory):
    """Returns (state, ema_state or None, manifest)."""
    manifest_path = os.path.join(directory, 'manifest.json')
    params_path = os.path.join(directory, 'params.f32')
    for path in (manifest_path, params_path):
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint file {path}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    if manifest.get('format_version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")

    payload = np.fromfile(params_path, dtype='<f4')
    expected = sum(int(np.prod(e['shape'])) for e in manifest['tensors'])
    if payload.size != expected:
        raise CheckpointError(f"{params_path}: expected {expected} floats, found {payload.size}")

    state, ema_state, offset = {}, {}, 0
    for entry in manifest['tensors']:
        size = int(np.prod(entry['shape']))
        tensor = torch.from_numpy(payload[offset:offset + size].reshape(entry['shape']).astype(np.float32))
        offset += size
        if entry['name'].startswith('ema.'):
            ema_state[entry['name'][4:]] = tensor
        else:
            state[entry['name']] = tensor
    return state, (ema_state if manifest['ema'] else None), manifest


def load_module_state(module, state, what='model'):
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{what} checkpoint does not match the model: {e}")
