"""Mask-aware ST-GCN encoder, projection head and linear classifier.

Inputs follow the unified layout ``(N, C, V, T, P)``. Internally persons are
folded into the batch and features are kept as ``(rows, C, T, V)``. A joint
mask broadcast as ``(1, 1, 1, V)`` marks valid joints; features at padded
joints are held at exactly zero after every block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .graph import AdjacencySet


@dataclass(frozen=True)
class STGCNConfig:
    block_channel_widths: tuple[int, ...] = (32, 32, 64)
    block_strides: tuple[int, ...] | None = None
    temporal_kernel: int = 9
    embedding_dim: int = 256
    projection_dim: int = 128
    edge_importance: bool = True
    dropout: float = 0.0
    in_channels: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_channel_widths", tuple(int(w) for w in self.block_channel_widths))
        if not self.block_channel_widths or min(self.block_channel_widths) < 1:
            raise ValueError("block widths must be positive")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be a positive odd integer")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.block_strides is not None:
            strides = tuple(int(s) for s in self.block_strides)
            if len(strides) != len(self.block_channel_widths) or min(strides) < 1:
                raise ValueError("block_strides must give one positive stride per block")
            object.__setattr__(self, "block_strides", strides)

    def strides(self) -> tuple[int, ...]:
        if self.block_strides is not None:
            return self.block_strides
        # downsample time where the width grows, as in ST-GCN
        widths = self.block_channel_widths
        return tuple(1 if i == 0 or widths[i] == widths[i - 1] else 2 for i in range(len(widths)))

    @classmethod
    def full_scale(cls, **kw) -> "STGCNConfig":
        return cls(block_channel_widths=(64,) * 4 + (128,) * 3 + (256,) * 3, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderOutput(NamedTuple):
    embedding: torch.Tensor
    projection: torch.Tensor


def adjacency_tensors(adj: AdjacencySet, v: int | None = None, dtype=torch.float32,
                      device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """``(partitions, joint_mask)`` tensors, cropped to ``v`` joints if given."""
    v = adj.v_max if v is None else v
    a = torch.as_tensor(adj.partitions[:, :v, :v], dtype=dtype, device=device)
    mask = torch.zeros(v, dtype=torch.bool, device=device)
    mask[: adj.joint_count] = True
    return a, mask


class MaskedBatchNorm(nn.Module):
    """Per-channel batch norm whose statistics use only masked-in nodes."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        shape = (1, -1, 1, 1)
        if self.training:
            count = (mask.sum() * x.shape[0] * x.shape[2]).clamp_min(1.0)
            mean = (x * mask).sum(dim=(0, 2, 3)) / count
            var = (((x - mean.view(shape)) * mask) ** 2).sum(dim=(0, 2, 3)) / count
            with torch.no_grad():
                unbiased = var * count / (count - 1).clamp_min(1.0)
                self.running_mean.lerp_(mean.detach(), self.momentum)
                self.running_var.lerp_(unbiased.detach(), self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        y = (x - mean.view(shape)) * torch.rsqrt(var.view(shape) + self.eps)
        return (y * self.weight.view(shape) + self.bias.view(shape)) * mask


class STGCNBlock(nn.Module):
    """Partitioned spatial graph conv followed by a temporal convolution.

    ``norm``, ``activation`` and ``residual`` can be switched off, which
    leaves the bare linear operator (used by the oracle tests).
    """

    def __init__(self, c_in: int, c_out: int, v_max: int, partitions: int = 3,
                 temporal_kernel: int = 9, stride: int = 1, residual: bool = True,
                 edge_importance: bool = True, dropout: float = 0.0,
                 norm: bool = True, activation: bool = True):
        super().__init__()
        self.partitions, self.c_out = partitions, c_out
        self.gcn = nn.Conv2d(c_in, c_out * partitions, kernel_size=1)
        self.importance = nn.Parameter(torch.ones(partitions, v_max, v_max)) if edge_importance else None
        self.tcn = nn.Conv2d(c_out, c_out, (temporal_kernel, 1), (stride, 1),
                             padding=(temporal_kernel // 2, 0))
        self.norm1 = MaskedBatchNorm(c_out) if norm else None
        self.norm2 = MaskedBatchNorm(c_out) if norm else None
        self.activation = activation
        self.dropout = nn.Dropout(dropout) if dropout > 0 else None
        if not residual:
            self.residual = None
        elif c_in == c_out and stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Conv2d(c_in, c_out, 1, (stride, 1))
            self.residual_norm = MaskedBatchNorm(c_out) if norm else None

    def spatial(self, x: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        n, _, t, v = x.shape
        a = adjacency if self.importance is None else adjacency * self.importance[:, :v, :v]
        y = self.gcn(x).view(n, self.partitions, self.c_out, t, v)
        return torch.einsum("nkctj,kij->ncti", y, a)

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        y = self.spatial(x, adjacency)
        if self.norm1 is not None:
            y = self.norm1(y, mask)
        if self.activation:
            y = F.relu(y)
        y = self.tcn(y)
        if self.norm2 is not None:
            y = self.norm2(y, mask)
        if self.dropout is not None:
            y = self.dropout(y)
        if self.residual is not None:
            res = self.residual(x)
            if isinstance(self.residual, nn.Conv2d) and self.residual_norm is not None:
                res = self.residual_norm(res, mask)
            y = y + res
        if self.activation:
            y = F.relu(y)
        return y * mask


def active_rows(x: torch.Tensor) -> torch.Tensor:
    """Flat ``n * P + p`` indices of persons with any nonzero input."""
    active = (x != 0).flatten(1, 3).any(dim=1)  # (N, P)
    return torch.nonzero(active.flatten(), as_tuple=True)[0]


def fold_persons(x: torch.Tensor) -> torch.Tensor:
    n, c, v, t, p = x.shape
    return x.permute(0, 4, 1, 3, 2).reshape(n * p, c, t, v)


class STGCNEncoder(nn.Module):
    """Stack of blocks, then masked global average pooling to ``embedding_dim``.

    Absent (all-zero) persons are dropped before the trunk: they are masked
    out everywhere, so skipping them changes nothing but the cost.
    """

    def __init__(self, config: STGCNConfig, v_max: int):
        super().__init__()
        self.config, self.v_max = config, v_max
        self.input_norm = MaskedBatchNorm(config.in_channels)
        blocks = []
        c_in = config.in_channels
        for i, (w, s) in enumerate(zip(config.block_channel_widths, config.strides())):
            blocks.append(STGCNBlock(c_in, w, v_max, temporal_kernel=config.temporal_kernel,
                                     stride=s, residual=i > 0,
                                     edge_importance=config.edge_importance,
                                     dropout=config.dropout))
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(c_in, config.embedding_dim) if c_in != config.embedding_dim else nn.Identity()

    def trunk(self, x: torch.Tensor, adjacency: torch.Tensor, joint_mask: torch.Tensor,
              ) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor]:
        """Per-block features ``(R, C, T', V)`` of the ``R`` active person rows,
        their joint mask ``(1, 1, 1, V)`` and their flat row indices."""
        rows = active_rows(x)
        mask = joint_mask.to(x.dtype).view(1, 1, 1, -1)
        h = self.input_norm(fold_persons(x)[rows], mask)
        feats = []
        for block in self.blocks:
            h = block(h, adjacency, mask)
            feats.append(h)
        return feats, mask, rows

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor, joint_mask: torch.Tensor) -> torch.Tensor:
        n, p = x.shape[0], x.shape[-1]
        feats, mask, rows = self.trunk(x, adjacency, joint_mask)
        h = feats[-1]
        sample = torch.div(rows, p, rounding_mode="floor")
        summed = torch.zeros(n, h.shape[1], dtype=h.dtype, device=h.device)
        summed = summed.index_add(0, sample, h.sum(dim=(2, 3)))
        persons = torch.bincount(sample, minlength=n).to(h.dtype)
        nodes = persons * mask.sum() * h.shape[2]
        pooled = summed / nodes.clamp_min(1.0)[:, None]
        return self.fc(pooled)


class ProjectionHead(nn.Module):
    def __init__(self, embedding_dim: int, projection_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(embedding_dim, embedding_dim), nn.ReLU(),
                                 nn.Linear(embedding_dim, projection_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(z), dim=1, eps=1e-12)


class ContrastiveEncoder(nn.Module):
    """Encoder plus projection head: the unit that MoCo duplicates."""

    def __init__(self, config: STGCNConfig, v_max: int):
        super().__init__()
        self.config = config
        self.encoder = STGCNEncoder(config, v_max)
        self.head = ProjectionHead(config.embedding_dim, config.projection_dim)

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor, joint_mask: torch.Tensor) -> EncoderOutput:
        z = self.encoder(x, adjacency, joint_mask)
        return EncoderOutput(z, self.head(z))


def encode(model: ContrastiveEncoder, batch: np.ndarray | torch.Tensor, adjacency: AdjacencySet,
           conventions: list[str] | None = None) -> EncoderOutput:
    """Encode a homogeneous-convention batch ``(N, C, V_max, T, P)``."""
    if conventions is not None and len(set(conventions)) > 1:
        raise ValueError(f"mixed conventions in one mini-batch: {sorted(set(conventions))}")
    param = next(model.parameters())
    x = torch.as_tensor(batch, dtype=param.dtype, device=param.device)
    a, mask = adjacency_tensors(adjacency, x.shape[2], dtype=param.dtype, device=param.device)
    return model(x, a, mask)


def linear_classify(embedding: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    if embedding.shape[-1] != head.in_features:
        raise ValueError(f"embedding has {embedding.shape[-1]} features, head expects {head.in_features}")
    return head(embedding)
