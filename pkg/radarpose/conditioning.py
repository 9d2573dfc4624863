"""Condition producers for the pose denoiser.

Phase one: point-cloud encoder, global radar context (GRC) and the coarse pose
decoder. Phase two: local radar context (LRC), limb-length consistency (SLC)
and temporal motion consistency (TMC).
"""

import logging
import math
from dataclasses import dataclass, fields, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from radarpose.errors import ConfigError, EncoderError, InsufficientFramesError, ShapeError
from radarpose.nn_core import (
    MLP,
    ChebGraphConv,
    TemporalConv,
    TransformerLayer,
    ball_query,
    fps,
    knn_batch,
    skeleton_graph,
)
from radarpose.pose_core import NUM_JOINTS, NUM_LIMBS

logger = logging.getLogger(__name__)

GLOBAL_COND_DIM = 64
LOCAL_COND_DIM = 64


@dataclass
class ConditionSet:
    """Conditional embeddings, each (batch, 17, dim); None means ablated."""
    c_glo: torch.Tensor = None
    c_loc: torch.Tensor = None
    c_lim: torch.Tensor = None
    c_tem: torch.Tensor = None

    def members(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def replace(self, **changes):
        return replace(self, **changes)


class JointFeatureTemplate(nn.Module):
    """Trainable joint slots plus their positional embedding."""

    def __init__(self, dim):
        super().__init__()
        self.template = nn.Parameter(torch.randn(NUM_JOINTS, dim) * 0.02)
        self.positional = nn.Parameter(torch.randn(NUM_JOINTS, dim) * 0.02)

    def forward(self):
        return self.template + self.positional


class PointCloudEncoder(nn.Module):
    """FPS anchors, ball-query groups, shared MLP and per-group max pooling.

    Group features are relative xyz, the three radar attributes and the anchor's
    position relative to the crop center.
    """

    FEATURE_DIM = 9

    def __init__(self, out_dim, stride=32, radius=0.1, nsamples=32, min_points=1, dropout=0.1):
        super().__init__()
        self.out_dim = out_dim
        self.stride = stride
        self.radius = radius
        self.nsamples = nsamples
        self.min_points = min_points
        self.mlp = MLP(self.FEATURE_DIM, out_dim, out_dim, dropout)

    @torch.no_grad()
    def group(self, points, mask, center):
        """(B, N, 6), (B, N), (B, 3) -> grouped (B, P, nsamples, 9), anchor mask (B, P)."""
        batch, n, _ = points.shape
        max_anchors = math.ceil(n / self.stride)
        grouped = torch.zeros(batch, max_anchors, self.nsamples, self.FEATURE_DIM, dtype=points.dtype)
        anchor_mask = torch.zeros(batch, max_anchors, dtype=torch.bool)
        for b in range(batch):
            valid = mask[b].to(torch.bool)
            n_valid = int(valid.sum())
            if n_valid < max(self.min_points, 1):
                raise EncoderError("too few valid radar points to encode", n_valid)
            count = math.ceil(n_valid / self.stride)
            cloud = points[b].clone()
            cloud[:, :3] = cloud[:, :3] - center[b]
            anchors = fps(cloud, count, valid)
            anchor_xyz = cloud[anchors, :3]
            groups, _ = ball_query(cloud, anchor_xyz, self.radius, self.nsamples, valid)
            members = cloud[groups]
            relative = members[..., :3] - anchor_xyz[:, None, :]
            position = anchor_xyz[:, None, :].expand(count, self.nsamples, 3)
            grouped[b, :count] = torch.cat([relative, members[..., 3:], position], dim=-1)
            anchor_mask[b, :count] = True
        return grouped, anchor_mask

    def embed(self, grouped, anchor_mask):
        features = self.mlp(grouped).max(dim=2).values
        return features * anchor_mask[..., None].to(features.dtype)

    def forward(self, points, mask, center):
        grouped, anchor_mask = self.group(points, mask, center)
        return self.embed(grouped, anchor_mask), anchor_mask


class GlobalRadarContext(nn.Module):
    """Global transformer reading point-cloud tokens into 17 joint feature slots."""

    def __init__(self, joint_dim, pc_dim, layers=4, heads=4, dropout=0.1, guidance='template'):
        super().__init__()
        if guidance not in ('template', 'pointcloud'):
            raise ConfigError(f"unknown GRC guidance '{guidance}'")
        self.guidance = guidance
        self.joint_dim = joint_dim
        self.pc_dim = pc_dim
        self.template = JointFeatureTemplate(joint_dim)
        self.token_proj = nn.Linear(pc_dim, joint_dim) if pc_dim != joint_dim else nn.Identity()
        self.layers = nn.ModuleList(TransformerLayer(joint_dim, heads, dropout=dropout) for _ in range(layers))
        self.reduce = MLP(joint_dim, joint_dim, GLOBAL_COND_DIM, dropout)
        if guidance == 'pointcloud':
            self.to_joints = nn.Linear(joint_dim, NUM_JOINTS * joint_dim)

    def forward(self, pc_features, anchor_mask=None, return_attention=False):
        """(B, P, pc_dim) -> F_j (B, 17, joint_dim), C_glo (B, 17, 64)."""
        if pc_features.shape[-1] != self.pc_dim:
            raise ShapeError(f"GRC expects point features of dim {self.pc_dim}, got {tuple(pc_features.shape)}")
        batch, n_tokens, _ = pc_features.shape
        if anchor_mask is None:
            anchor_mask = torch.ones(batch, n_tokens, dtype=torch.bool)
        tokens = self.token_proj(pc_features)

        if self.guidance == 'template':
            slots = self.template().to(tokens.dtype).expand(batch, NUM_JOINTS, self.joint_dim)
            tokens = torch.cat([slots, tokens], dim=1)
            key_mask = torch.cat([torch.ones(batch, NUM_JOINTS, dtype=torch.bool), anchor_mask], dim=1)
        else:
            key_mask = anchor_mask

        attention = []
        for layer in self.layers:
            tokens, weights = layer(tokens, key_mask, return_attention=True)
            attention.append(weights)

        if self.guidance == 'template':
            joint_features = tokens[:, :NUM_JOINTS]
        else:
            weight = key_mask[..., None].to(tokens.dtype)
            pooled = (tokens * weight).sum(dim=1) / weight.sum(dim=1).clamp(min=1.0)
            joint_features = self.to_joints(pooled).reshape(batch, NUM_JOINTS, self.joint_dim)

        c_glo = self.reduce(joint_features)
        if return_attention:
            return joint_features, c_glo, attention
        return joint_features, c_glo


class CoarseDecoder(nn.Module):
    """Shared per-joint MLP to 3D, returned pelvis-relative."""

    def __init__(self, joint_dim, dropout=0.1):
        super().__init__()
        self.mlp = MLP(joint_dim, joint_dim, 3, dropout)

    def forward(self, joint_features):
        joints = self.mlp(joint_features)
        return joints - joints[:, :1]


class Phase1Model(nn.Module):
    """Point-cloud encoder + GRC + coarse decoder, trained on the joint regression loss."""

    def __init__(self, cfg):
        super().__init__()
        self.encoder = PointCloudEncoder(cfg.pc_dim, cfg.fps_stride, cfg.ball_radius,
                                         cfg.ball_samples, cfg.min_points, cfg.dropout)
        self.grc = GlobalRadarContext(cfg.joint_dim, cfg.pc_dim, cfg.global_layers, cfg.global_heads,
                                      cfg.dropout, cfg.grc_guidance)
        self.decoder = CoarseDecoder(cfg.joint_dim, cfg.dropout)

    def forward(self, points=None, mask=None, center=None, grouped=None, return_attention=False):
        """Returns (coarse pose (B, 17, 3), F_j, C_glo[, attention])."""
        if grouped is None:
            grouped = self.encoder.group(points, mask, center)
        grouped_features, anchor_mask = grouped
        features = self.encoder.embed(grouped_features, anchor_mask)
        out = self.grc(features, anchor_mask, return_attention=return_attention)
        coarse = self.decoder(out[0])
        return (coarse, *out)


class LocalRadarContext(nn.Module):
    """Per-joint KNN neighbourhoods encoded by a shared MLP and a local transformer.

    Each joint's pooled feature is scaled by its reliability: the share of its
    neighbours within ``threshold`` meters of the anchor.
    """

    def __init__(self, k=50, width=64, layers=2, heads=4, threshold=0.04, dropout=0.1):
        super().__init__()
        self.k = k
        self.width = width
        self.threshold = threshold
        self.point_mlp = MLP(6, width, width, dropout)
        self.layers = nn.ModuleList(TransformerLayer(width, heads, dropout=dropout) for _ in range(layers))
        self.out = nn.Linear(width, LOCAL_COND_DIM) if width != LOCAL_COND_DIM else nn.Identity()

    def neighborhoods(self, points, mask, anchors):
        """Returns local clouds (B, 17, k, 6) relative to each anchor and their distances (B, 17, k)."""
        batch, n, dim = points.shape
        indices, distances = knn_batch(points[..., :3], anchors, self.k, mask)
        expanded = points[:, None].expand(batch, anchors.shape[1], n, dim)
        gathered = torch.gather(expanded, 2, indices[..., None].expand(-1, -1, -1, dim))
        relative = gathered[..., :3] - anchors[:, :, None, :]
        return torch.cat([relative, gathered[..., 3:]], dim=-1), distances

    def encode_neighborhoods(self, local):
        batch, joints, k, _ = local.shape
        x = self.point_mlp(local).reshape(batch * joints, k, self.width)
        for layer in self.layers:
            x = layer(x)
        return self.out(x.mean(dim=1)).reshape(batch, joints, -1)

    def reliability(self, distances):
        return (distances <= self.threshold).sum(dim=-1).to(torch.float64) / distances.shape[-1]

    def forward(self, points, mask, anchors):
        """anchors (B, 17, 3) in the point cloud's frame -> C_loc (B, 17, 64), reliability (B, 17)."""
        local, distances = self.neighborhoods(points, mask, anchors)
        reliability = self.reliability(distances)
        features = self.encode_neighborhoods(local)
        return features * reliability[..., None].to(features.dtype), reliability


class LimbConsistency(nn.Module):
    """Limb decoder (softplus head) and the projector broadcasting limb lengths to every joint."""

    def __init__(self, joint_dim, hidden_dim=96, dropout=0.1):
        super().__init__()
        self.joint_dim = joint_dim
        self.decoder = MLP(NUM_JOINTS * joint_dim, hidden_dim, NUM_LIMBS, dropout)
        self.projector = MLP(NUM_LIMBS, hidden_dim, hidden_dim, dropout)

    def forward(self, joint_features):
        """F_j (B, 17, joint_dim) -> limb lengths (B, 16), C_lim (B, 17, hidden)."""
        lengths = F.softplus(self.decoder(joint_features.flatten(1)))
        embedding = self.projector(lengths)
        return lengths, embedding[:, None, :].expand(-1, NUM_JOINTS, -1)


def history_window(history, window):
    """Last ``window`` frames of (B, L, 17, 3); shorter histories repeat their earliest frame."""
    steps = history.shape[1]
    if steps == 0:
        raise InsufficientFramesError("temporal history is empty")
    if steps >= window:
        return history[:, steps - window:]
    pad = history[:, :1].expand(-1, window - steps, -1, -1)
    return torch.cat([pad, history], dim=1)


class PoseGraphEncoder(nn.Module):
    """Two Chebyshev graph convolutions lifting 3D joints to pose embeddings."""

    def __init__(self, graph, hidden_dim=96):
        super().__init__()
        self.conv1 = ChebGraphConv(3, hidden_dim, graph)
        self.conv2 = ChebGraphConv(hidden_dim, hidden_dim, graph)

    def forward(self, poses):
        return self.conv2(F.relu(self.conv1(poses)))


class TemporalMotionConsistency(nn.Module):
    """Shared GCN pose encoder followed by the temporal convolution extractor."""

    def __init__(self, graph=None, hidden_dim=96, window=8, dropout=0.1):
        super().__init__()
        graph = graph or skeleton_graph()
        self.window = window
        self.hidden_dim = hidden_dim
        self.encoder = PoseGraphEncoder(graph, hidden_dim)
        self.extractor = TemporalConv(hidden_dim, dropout)

    def forward(self, history):
        """(B, L, 17, 3) or (L, 17, 3) coarse poses -> C_tem (B, 17, hidden)."""
        unbatched = history.dim() == 3
        if unbatched:
            history = history.unsqueeze(0)
        history = history_window(history, self.window)
        batch, steps = history.shape[:2]
        z = self.encoder(history.reshape(batch * steps, NUM_JOINTS, 3))
        out = self.extractor(z.reshape(batch, steps, NUM_JOINTS, self.hidden_dim))
        return out[0] if unbatched else out
