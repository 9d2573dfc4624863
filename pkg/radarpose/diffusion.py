"""Noise schedules, forward/reverse processes, the conditioned GCN denoiser and its loss."""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from radarpose.conditioning import (
    GLOBAL_COND_DIM,
    LOCAL_COND_DIM,
    ConditionSet,
    LimbConsistency,
    LocalRadarContext,
    TemporalMotionConsistency,
)
from radarpose.errors import ConfigError, ShapeError
from radarpose.nn_core import ChebGraphConv, GCNBlock, skeleton_graph
from radarpose.pose_core import NUM_JOINTS

logger = logging.getLogger(__name__)

SAMPLERS = ('x0', 'beta-step')


@dataclass
class DiffusionSchedule:
    """beta_k for k = 1..K; alpha = 1 - beta, gamma = running product of alpha."""
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.ndim != 1 or len(self.beta) == 0:
            raise ConfigError("a schedule needs at least one step")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ConfigError("every beta must lie in (0, 1)")
        self.alpha = 1.0 - self.beta
        self.gamma = np.cumprod(self.alpha)

    @property
    def K(self):
        return len(self.beta)

    def check_step(self, k):
        if not 1 <= k <= self.K:
            raise ConfigError(f"diffusion step {k} outside [1, {self.K}]")

    def gamma_at(self, k):
        """gamma_k with gamma_0 = 1."""
        if k == 0:
            return 1.0
        self.check_step(k)
        return float(self.gamma[k - 1])

    def beta_at(self, k):
        self.check_step(k)
        return float(self.beta[k - 1])


def make_schedule(K, mode='constant', lo=0.001, hi=0.001):
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if not 0 < lo <= hi < 1:
        raise ConfigError(f"beta range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]")
    if mode == 'constant':
        beta = np.full(K, lo, dtype=np.float64)
    elif mode == 'linear':
        beta = np.linspace(lo, hi, K, dtype=np.float64)
    else:
        raise ConfigError(f"unknown schedule mode '{mode}'")
    return DiffusionSchedule(beta)


def forward_sample(h0, k, eps, sched):
    """H_k = sqrt(gamma_k) H0 + sqrt(1 - gamma_k) eps."""
    sched.check_step(k)
    gamma = sched.gamma_at(k)
    return math.sqrt(gamma) * h0 + math.sqrt(1.0 - gamma) * eps


def forward_chain(h0, eps_steps, sched):
    """Iterate H_k = sqrt(alpha_k) H_{k-1} + sqrt(beta_k) eps_k over the leading axis of ``eps_steps``."""
    h = h0
    for i, eps in enumerate(eps_steps, start=1):
        beta = sched.beta_at(i)
        h = math.sqrt(1.0 - beta) * h + math.sqrt(beta) * eps
    return h


def reverse_step(h_k, eps_hat, sched, k, mode='x0', return_x0=False):
    """One reverse update H_k -> H_{k-1}.

    ``x0`` recovers the clean estimate and re-noises it deterministically to step k-1;
    ``beta-step`` applies (H_k - beta_k eps) / (1 - beta_k).
    """
    sched.check_step(k)
    gamma, gamma_prev = sched.gamma_at(k), sched.gamma_at(k - 1)
    x0 = (h_k - math.sqrt(1.0 - gamma) * eps_hat) / math.sqrt(gamma)
    if mode == 'x0':
        h_prev = math.sqrt(gamma_prev) * x0 + math.sqrt(1.0 - gamma_prev) * eps_hat
    elif mode == 'beta-step':
        beta = sched.beta_at(k)
        h_prev = (h_k - beta * eps_hat) / (1.0 - beta)
    else:
        raise ConfigError(f"unknown sampler '{mode}', expected one of {SAMPLERS}")
    return (h_prev, x0) if return_x0 else h_prev


@dataclass
class HypothesisSet:
    members: torch.Tensor
    mean: torch.Tensor = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = self.members.mean(dim=0)

    def __len__(self):
        return self.members.shape[0]


@torch.no_grad()
def sample_pose(coarse, sched, denoise_fn, M=5, seed=0, mode='x0'):
    """Reverse diffusion from the coarse pose for M seeded initializations.

    ``denoise_fn(h_k, k)`` returns the predicted noise; ``coarse`` is (B, 17, 3).
    Returns (HypothesisSet, mean pose).
    """
    if M < 1:
        raise ConfigError(f"need at least one hypothesis, got {M}")
    generator = torch.Generator().manual_seed(int(seed))
    members = []
    for _ in range(M):
        eps = torch.randn(coarse.shape, generator=generator, dtype=torch.float64).to(coarse.dtype)
        h = forward_sample(coarse, sched.K, eps, sched)
        for k in range(sched.K, 0, -1):
            h = reverse_step(h, denoise_fn(h, k), sched, k, mode)
        members.append(h)
    hypotheses = HypothesisSet(torch.stack(members))
    return hypotheses, hypotheses.mean


def diffusion_loss(h0, limbs_gt, sched, denoise_fn, predicted_limbs=None, lam=5.0, generator=None,
                   return_parts=False):
    """Mean squared noise error plus lam times the mean absolute limb-length error.

    Draws k uniformly in [1, K] and eps per item, in that order, from ``generator``.
    """
    batch = h0.shape[0]
    k = torch.randint(1, sched.K + 1, (batch,), generator=generator)
    eps = torch.randn(h0.shape, generator=generator, dtype=torch.float64).to(h0.dtype)
    gamma = torch.as_tensor(sched.gamma, dtype=h0.dtype)[k - 1].view(batch, 1, 1)
    h_k = gamma.sqrt() * h0 + (1.0 - gamma).sqrt() * eps
    noise_loss = ((eps - denoise_fn(h_k, k)) ** 2).mean()
    if predicted_limbs is not None and lam:
        limb_loss = (limbs_gt - predicted_limbs).abs().mean()
    else:
        limb_loss = torch.zeros((), dtype=h0.dtype)
    loss = noise_loss + lam * limb_loss
    if return_parts:
        return loss, {'noise': noise_loss.item(), 'limb': limb_loss.item()}
    return loss


def step_embedding(k, dim):
    """Sinusoidal embedding of integer steps (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = k.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(k), 1, dtype=emb.dtype)], dim=-1)
    return emb


class StepEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, k):
        return self.mlp(step_embedding(k, self.dim).to(self.mlp[0].weight.dtype))


class Denoiser(nn.Module):
    """GCN encoder 3->hidden, step embedding, conditioned GCN blocks, GCN decoder hidden->3."""

    def __init__(self, graph=None, hidden_dim=96, blocks=5, heads=4, dropout=0.25):
        super().__init__()
        graph = graph or skeleton_graph()
        self.hidden_dim = hidden_dim
        self.encoder = ChebGraphConv(3, hidden_dim, graph)
        self.step = StepEmbedding(hidden_dim)
        self.glo_proj = ChebGraphConv(GLOBAL_COND_DIM, hidden_dim, graph)
        self.loc_proj = nn.Linear(LOCAL_COND_DIM, hidden_dim)
        self.blocks = nn.ModuleList(GCNBlock(graph, hidden_dim, heads, dropout) for _ in range(blocks))
        self.decoder = ChebGraphConv(hidden_dim, 3, graph)

    def inject(self, conditions, like):
        """Sum of the projected condition members; absent members count as zero."""
        total = torch.zeros_like(like)
        if conditions is None:
            return total
        if conditions.c_glo is not None:
            total = total + self.glo_proj(conditions.c_glo)
        if conditions.c_loc is not None:
            total = total + self.loc_proj(conditions.c_loc)
        for extra in (conditions.c_lim, conditions.c_tem):
            if extra is not None:
                if extra.shape[-1] != self.hidden_dim:
                    raise ShapeError(f"condition of shape {tuple(extra.shape)} does not match width {self.hidden_dim}")
                total = total + extra
        return total

    def forward(self, h_k, k, conditions=None):
        if h_k.shape[-2:] != (NUM_JOINTS, 3):
            raise ShapeError(f"denoiser expects (batch, {NUM_JOINTS}, 3), got {tuple(h_k.shape)}")
        batch = h_k.shape[0]
        if not torch.is_tensor(k):
            k = torch.full((batch,), int(k), dtype=torch.long)
        z = self.encoder(h_k) + self.step(k).to(h_k.dtype)[:, None, :]
        injected = self.inject(conditions, z)
        for block in self.blocks:
            z = block(z + injected)
        return self.decoder(z)


@dataclass
class FrameContext:
    """Per-frame inputs that stay fixed across the reverse chain."""
    coarse: torch.Tensor
    joint_features: torch.Tensor
    c_glo: torch.Tensor
    history: torch.Tensor
    points: torch.Tensor
    mask: torch.Tensor
    center: torch.Tensor


class RefinementModel(nn.Module):
    """Phase-two model: LRC, SLC, TMC and the denoiser, with per-module ablation switches."""

    def __init__(self, cfg):
        super().__init__()
        graph = skeleton_graph(order=cfg.cheb_order)
        self.use_global = cfg.use_global
        self.use_local = cfg.use_local
        self.use_limb = cfg.use_limb
        self.use_temporal = cfg.use_temporal
        self.lrc_anchors = cfg.lrc_anchors
        self.lrc = LocalRadarContext(cfg.knn_k, cfg.local_width, cfg.local_layers, cfg.local_heads,
                                     cfg.reliability_threshold, cfg.dropout) if cfg.use_local else None
        self.slc = LimbConsistency(cfg.joint_dim, cfg.hidden_dim, cfg.dropout) if cfg.use_limb else None
        self.tmc = TemporalMotionConsistency(graph, cfg.hidden_dim, cfg.history, cfg.dropout) \
            if cfg.use_temporal else None
        self.denoiser = Denoiser(graph, cfg.hidden_dim, cfg.gcn_blocks, cfg.gcn_heads, cfg.gcn_dropout)

    def flags(self):
        return {'global': self.use_global, 'local': self.use_local,
                'limb': self.use_limb, 'temporal': self.use_temporal}

    def frame_conditions(self, ctx):
        """Conditions that do not depend on the diffusion step, plus predicted limb lengths."""
        conditions = ConditionSet(c_glo=ctx.c_glo if self.use_global else None)
        limbs = None
        if self.use_limb and self.slc is not None:
            limbs, conditions.c_lim = self.slc(ctx.joint_features)
        if self.use_temporal and self.tmc is not None:
            conditions.c_tem = self.tmc(ctx.history)
        return conditions, limbs

    def make_denoise_fn(self, ctx, conditions=None):
        """Closure over a frame batch; LRC is re-evaluated at every call on its anchors."""
        if conditions is None:
            conditions, _ = self.frame_conditions(ctx)

        def denoise(h_k, k):
            step_conditions = conditions
            if self.use_local and self.lrc is not None:
                pose = h_k if self.lrc_anchors == 'dynamic' else ctx.coarse
                anchors = pose + ctx.center[:, None, :]
                c_loc, _ = self.lrc(ctx.points, ctx.mask, anchors)
                step_conditions = conditions.replace(c_loc=c_loc.to(h_k.dtype))
            return self.denoiser(h_k, k, step_conditions)

        return denoise

    def loss(self, h0, limbs_gt, ctx, sched, lam, generator=None, return_parts=False):
        conditions, limbs = self.frame_conditions(ctx)
        return diffusion_loss(h0, limbs_gt, sched, self.make_denoise_fn(ctx, conditions), limbs,
                              lam if self.use_limb else 0.0, generator, return_parts)

    @torch.no_grad()
    def refine(self, ctx, sched, M=5, seed=0, mode='x0'):
        return sample_pose(ctx.coarse, sched, self.make_denoise_fn(ctx), M, seed, mode)
