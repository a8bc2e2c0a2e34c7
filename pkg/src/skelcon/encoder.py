"""Dual-path decoupling encoder.

Each path owns a graph-convolution extractor producing ``[C1, T, V]`` features.
The spatial path reads them as ``V`` joint tokens of width ``C1*T``, the
temporal path as ``T`` frame tokens of width ``C1*V``. Tokens are embedded by
two affine maps around a ReLU, refined by self-attention blocks, and
max-pooled into one ``C2`` vector per path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError
from .graph import SkeletonGraph, get_graph


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    num_joints: int = 25
    num_frames: int = 64
    graph: str = "ntu25"
    gcn_channels: tuple[int, ...] = (64, 256, 64)
    temporal_kernel: int = 9
    transformer_layers: int = 1
    heads: int = 8
    model_dim: int = 2048
    ffn_dim: int = 2048

    def __post_init__(self):
        object.__setattr__(self, "gcn_channels", tuple(int(c) for c in self.gcn_channels))

    @property
    def intermediate_dim(self) -> int:
        return self.gcn_channels[-1]

    def validate(self, prefix: str = "encoder"):
        if self.in_channels not in (2, 3):
            raise ConfigError("must be 2 or 3", f"{prefix}.in_channels")
        if not self.gcn_channels or min(self.gcn_channels) < 1:
            raise ConfigError("need at least one positive layer width", f"{prefix}.gcn_channels")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError("must be a positive odd integer", f"{prefix}.temporal_kernel")
        if self.transformer_layers < 1:
            raise ConfigError("must be >= 1", f"{prefix}.transformer_layers")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.heads} heads",
                              f"{prefix}.heads")
        if min(self.num_joints, self.num_frames, self.ffn_dim) < 1:
            raise ConfigError("dimensions must be positive", prefix)
        graph = get_graph(self.graph)
        if graph.num_joints != self.num_joints:
            raise ConfigError(f"graph {self.graph} has {graph.num_joints} joints, "
                              f"config says {self.num_joints}", f"{prefix}.num_joints")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_channels"] = list(self.gcn_channels)
        return d


class SpatialGraphConv(nn.Module):
    """Partitioned neighbourhood aggregation with one 1x1 weight per subset.

    ``out[:, :, t, i] = sum_k sum_j A[k, j, i] * W_k x[:, :, t, j]`` where
    ``A[k]`` averages the subset-``k`` neighbours of joint ``i``.
    """

    def __init__(self, in_channels: int, out_channels: int, graph: SkeletonGraph):
        super().__init__()
        self.register_buffer("A", torch.from_numpy(graph.subset_matrices()))
        K = graph.num_subsets
        self.out_channels = out_channels
        self.conv = nn.Conv2d(in_channels, out_channels * K, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        N, _, T, V = x.shape
        K = self.A.shape[0]
        y = self.conv(x).view(N, K, self.out_channels, T, V)
        return torch.einsum("nkctj,kji->ncti", y, self.A.to(y.dtype))


class STBlock(nn.Module):
    """Spatial graph conv, then temporal conv, each normalised; residual around both."""

    def __init__(self, in_channels: int, out_channels: int, graph: SkeletonGraph, kernel: int):
        super().__init__()
        self.gcn = SpatialGraphConv(in_channels, out_channels, graph)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.tcn = nn.Conv2d(out_channels, out_channels, (kernel, 1), padding=(kernel // 2, 0))
        self.bn2 = nn.BatchNorm2d(out_channels)
        if in_channels == out_channels:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1),
                                          nn.BatchNorm2d(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn1(self.gcn(x)))
        y = self.bn2(self.tcn(y))
        return F.relu(y + self.residual(x))


class GCNExtractor(nn.Module):
    def __init__(self, cfg: EncoderConfig, graph: SkeletonGraph):
        super().__init__()
        widths = (cfg.in_channels, *cfg.gcn_channels)
        # per joint-coordinate input normalisation, as in ST-GCN style extractors
        self.data_bn = nn.BatchNorm1d(cfg.in_channels * graph.num_joints)
        self.blocks = nn.ModuleList(
            STBlock(a, b, graph, cfg.temporal_kernel) for a, b in zip(widths[:-1], widths[1:]))
        self.num_joints = graph.num_joints

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``[N, C, T, V, M]`` -> ``[N, C1, T, V]``; persons are averaged after extraction."""
        if x.dim() == 4:
            x = x.unsqueeze(-1)
        N, C, T, V, M = x.shape
        if V != self.num_joints:
            raise ConfigError(f"input has {V} joints, graph has {self.num_joints}")
        y = x.permute(0, 4, 3, 1, 2).reshape(N * M, V * C, T)
        y = self.data_bn(y).view(N * M, V, C, T).permute(0, 2, 3, 1).contiguous()
        for block in self.blocks:
            y = block(y)
        return y.view(N, M, *y.shape[1:]).mean(dim=1)


class TokenEmbedding(nn.Module):
    """Two affine maps with a ReLU between them."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(tokens)))


class RefineLayer(nn.Module):
    """Multi-head self-attention with residual, then LayerNorm -> FFN with residual."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads", "encoder.heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.merge = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))

    def attention(self, y: torch.Tensor) -> torch.Tensor:
        B, N, D = y.shape
        h, d = self.heads, D // self.heads

        def split(t):
            return t.view(B, N, h, d).transpose(1, 2)

        q, k, v = split(self.q(y)), split(self.k(y)), split(self.v(y))
        w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        heads = (w @ v).transpose(1, 2).reshape(B, N, D)
        return self.merge(heads)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        z = self.attention(y) + y
        return self.ffn(self.norm(z)) + z


class DecouplingPath(nn.Module):
    def __init__(self, token_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.embed = TokenEmbedding(token_dim, cfg.model_dim)
        self.layers = nn.ModuleList(
            RefineLayer(cfg.model_dim, cfg.heads, cfg.ffn_dim) for _ in range(cfg.transformer_layers))

    def refine(self, tokens: torch.Tensor) -> torch.Tensor:
        """``[B, N, C2]`` tokens -> ``[B, C2]`` by refinement and token max-pooling."""
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens.max(dim=1).values


class DecouplingEncoder(nn.Module):
    """Maps ``[N, C, T, V, M]`` batches to spatial and temporal clues ``(z_s, z_t)``."""

    def __init__(self, cfg: EncoderConfig, graph: SkeletonGraph | None = None):
        super().__init__()
        cfg.validate()
        graph = graph or get_graph(cfg.graph)
        self.cfg = cfg
        C1 = cfg.intermediate_dim
        self.extract_s = GCNExtractor(cfg, graph)
        self.extract_t = GCNExtractor(cfg, graph)
        self.spatial = DecouplingPath(C1 * cfg.num_frames, cfg)
        self.temporal = DecouplingPath(C1 * cfg.num_joints, cfg)

    @property
    def out_dim(self) -> int:
        return self.cfg.model_dim

    def decouple_spatial(self, y: torch.Tensor) -> torch.Tensor:
        """``[N, C1, T, V]`` -> ``[N, V, C2]``: one token per joint."""
        N, C1, T, V = y.shape
        return self.spatial.embed(y.permute(0, 3, 1, 2).reshape(N, V, C1 * T))

    def decouple_temporal(self, y: torch.Tensor) -> torch.Tensor:
        """``[N, C1, T, V]`` -> ``[N, T, C2]``: one token per frame."""
        N, C1, T, V = y.shape
        return self.temporal.embed(y.permute(0, 2, 1, 3).reshape(N, T, C1 * V))

    def encode_spatial(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial.refine(self.decouple_spatial(self.extract_s(x)))

    def encode_temporal(self, x: torch.Tensor) -> torch.Tensor:
        return self.temporal.refine(self.decouple_temporal(self.extract_t(x)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encode_spatial(x), self.encode_temporal(x)
