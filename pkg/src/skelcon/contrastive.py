"""Projection heads, negative queues, InfoNCE and the cross-domain objective."""
from __future__ import annotations

from typing import Iterable, NamedTuple

import torch
from torch import nn

from .errors import ConfigError

NORM_EPS = 1e-12


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + NORM_EPS)


class ProjectionHeads(nn.Module):
    """``F_s``, ``F_t`` on single clues and ``F_g`` on ``[z_t, z_s]``; outputs are unit vectors.

    Each head is affine -> BatchNorm -> ReLU -> affine -> BatchNorm (no affine).
    The batch norms strip the offset that clue vectors share across samples,
    which otherwise dominates the projected directions and collapses them.
    """

    def __init__(self, clue_dim: int, out_dim: int = 128, hidden_dim: int | None = None):
        super().__init__()
        hidden = hidden_dim or clue_dim

        def head(in_dim):
            return nn.Sequential(nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
                                 nn.Linear(hidden, out_dim), nn.BatchNorm1d(out_dim, affine=False))

        self.spatial = head(clue_dim)
        self.temporal = head(clue_dim)
        self.glob = head(2 * clue_dim)

    def forward(self, z_s: torch.Tensor, z_t: torch.Tensor):
        q_s = l2_normalize(self.spatial(z_s))
        q_t = l2_normalize(self.temporal(z_t))
        q_g = l2_normalize(self.glob(torch.cat([z_t, z_s], dim=-1)))
        return q_s, q_t, q_g


def info_nce(u: torch.Tensor, v: torch.Tensor, negatives: torch.Tensor | None,
             tau: float) -> torch.Tensor:
    """``-log h(u,v) / (h(u,v) + sum_m h(u,m))`` with ``h(a,b) = exp(a.b / tau)``.

    ``u`` and ``v`` are ``[D]`` or ``[B, D]``; batches return the mean loss.
    Negatives (``[K, D]``) are detached, so no gradient reaches the queue.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}", "contrast.tau")
    single = u.dim() == 1
    u2, v2 = (u[None], v[None]) if single else (u, v)
    pos = (u2 * v2).sum(dim=-1, keepdim=True) / tau
    if negatives is not None and negatives.shape[0] > 0:
        neg = u2 @ negatives.detach().to(u2.dtype).T / tau
        logits = torch.cat([pos, neg], dim=1)
    else:
        logits = pos
    loss = torch.logsumexp(logits, dim=1) - pos[:, 0]
    return loss[0] if single else loss.mean()


class NegativeQueue:
    """Fixed-capacity FIFO of key embeddings backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1", "contrast.queue_size")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        keys = keys.detach().reshape(-1, self.dim).to(self.storage.dtype)
        if keys.shape[0] >= self.capacity:
            self.storage.copy_(keys[-self.capacity:])
            self.cursor = 0
            self.size = self.capacity
            return
        n = keys.shape[0]
        end = self.cursor + n
        if end <= self.capacity:
            self.storage[self.cursor:end] = keys
        else:
            split = self.capacity - self.cursor
            self.storage[self.cursor:] = keys[:split]
            self.storage[:n - split] = keys[split:]
        self.cursor = end % self.capacity
        self.size = min(self.capacity, self.size + n)

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self.storage[:self.size]
        return torch.roll(self.storage, -self.cursor, dims=0)

    def negatives(self) -> torch.Tensor:
        # order is irrelevant to the loss; skip the roll
        return self.storage[:self.size]

    def fill_random(self, generator: torch.Generator) -> None:
        """Warm start with random unit vectors so the first step has negatives."""
        noise = torch.randn(self.capacity, self.dim, generator=generator, dtype=torch.float64)
        self.storage.copy_(l2_normalize(noise).to(self.storage.dtype))
        self.cursor = 0
        self.size = self.capacity


class Views(NamedTuple):
    s: torch.Tensor
    t: torch.Tensor
    g: torch.Tensor


class LossTerms(NamedTuple):
    total: torch.Tensor
    gs: torch.Tensor
    gt: torch.Tensor
    sg: torch.Tensor
    tg: torch.Tensor


def cross_domain_loss(q: Views, k: Views, queues: dict[str, NegativeQueue],
                      weights=(0.25, 0.25, 0.25, 0.25), tau: float = 0.2) -> LossTerms:
    """Global anchor against single-domain keys, single-domain queries against the global key.

    Each term draws negatives from the queue of its key's domain. Keys are detached.
    """
    ks, kt, kg = (x.detach() for x in k)

    def neg(name):
        queue = queues.get(name)
        return None if queue is None else queue.negatives()

    gs = info_nce(q.g, ks, neg("s"), tau)
    gt = info_nce(q.g, kt, neg("t"), tau)
    sg = info_nce(q.s, kg, neg("g"), tau)
    tg = info_nce(q.t, kg, neg("g"), tau)
    l1, l2, l3, l4 = weights
    return LossTerms(l1 * gs + l2 * gt + l3 * sg + l4 * tg, gs, gt, sg, tg)


@torch.no_grad()
def momentum_update(theta: Iterable[torch.Tensor], xi: Iterable[torch.Tensor], m: float) -> None:
    """In place ``xi <- xi * m + theta * (1 - m)`` for each paired tensor."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {m}", "contrast.momentum")
    theta, xi = list(theta), list(xi)
    if len(theta) != len(xi):
        raise ConfigError(f"{len(theta)} query tensors vs {len(xi)} key tensors")
    for a, b in zip(theta, xi):
        if a.shape != b.shape:
            raise ConfigError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    for a, b in zip(theta, xi):
        b.copy_(b * m + a * (1.0 - m))

