"""Skeleton graphs: adjacency, walk-count powers, and the convolution partition."""
from __future__ import annotations

from collections import deque
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidGraphError

# NTU RGB+D 25-joint layout, 0-based (1-based list in the dataset docs).
NTU_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13),
    (15, 14), (16, 0), (17, 16), (18, 17), (19, 18), (21, 22), (22, 7),
    (23, 24), (24, 11),
)
NTU_ROOT = 0     # spine base, root of the bone tree
NTU_CENTER = 20  # spine shoulder, gravity center for the partition
NTU_FLIP_PAIRS: tuple[tuple[int, int], ...] = (
    (4, 8), (5, 9), (6, 10), (7, 11), (12, 16), (13, 17), (14, 18),
    (15, 19), (21, 23), (22, 24),
)


def power_adjacency(P: np.ndarray, n: int) -> np.ndarray:
    """Return ``P**n`` as an int64 matrix of length-``n`` walk counts."""
    P = np.asarray(P)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise InvalidGraphError(f"adjacency must be square, got shape {P.shape}")
    if not np.array_equal(P, P.T):
        raise InvalidGraphError("adjacency must be symmetric")
    if not np.isin(P, (0, 1)).all():
        raise InvalidGraphError("adjacency must be binary")
    if int(n) != n or n < 1:
        raise InvalidGraphError(f"exponent must be an integer >= 1, got {n}")
    return np.linalg.matrix_power(P.astype(np.int64), int(n))


def _hop_distance(P: np.ndarray, source: int) -> np.ndarray:
    V = P.shape[0]
    dist = np.full(V, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in np.flatnonzero(P[u]):
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint adjacency plus the subset labelling used by the graph convolution.

    ``partition[i, j]`` is the subset index of neighbour ``j`` when ``i`` is the
    centre of the convolution kernel, and -1 for non-neighbours.
    """

    name: str
    P: np.ndarray
    partition: np.ndarray
    num_subsets: int
    parents: np.ndarray
    center: int
    flip_pairs: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        V = self.P.shape[0]
        if not np.array_equal(self.P, self.P.T) or not np.isin(self.P, (0, 1)).all():
            raise InvalidGraphError(f"graph {self.name!r}: P must be symmetric binary")
        expected = (self.P == 1) | np.eye(V, dtype=bool)
        if not np.array_equal(self.partition >= 0, expected):
            raise InvalidGraphError(
                f"graph {self.name!r}: partition must cover exactly edges and self-pairs")
        for arr in (self.P, self.partition, self.parents):
            arr.setflags(write=False)

    @property
    def num_joints(self) -> int:
        return self.P.shape[0]

    @classmethod
    def from_edges(
        cls,
        name: str,
        num_joints: int,
        edges,
        *,
        root: int = 0,
        center: int | None = None,
        strategy: str = "spatial",
        flip_pairs=(),
    ) -> "SkeletonGraph":
        P = np.zeros((num_joints, num_joints), dtype=np.int64)
        for i, j in edges:
            if i == j:
                continue
            P[i, j] = P[j, i] = 1
        center = root if center is None else center

        hop_center = _hop_distance(P, center)
        partition = np.full((num_joints, num_joints), -1, dtype=np.int64)
        if strategy == "uniform":
            partition[(P == 1) | np.eye(num_joints, dtype=bool)] = 0
            num_subsets = 1
        elif strategy == "spatial":
            # 0: self (and equidistant neighbours), 1: centripetal, 2: centrifugal
            for i in range(num_joints):
                partition[i, i] = 0
                for j in np.flatnonzero(P[i]):
                    if hop_center[j] < hop_center[i]:
                        partition[i, j] = 1
                    elif hop_center[j] > hop_center[i]:
                        partition[i, j] = 2
                    else:
                        partition[i, j] = 0
            num_subsets = 3
        else:
            raise ConfigError(f"unknown partition strategy {strategy!r}")

        hop_root = _hop_distance(P, root)
        if (hop_root < 0).any():
            raise InvalidGraphError(f"graph {name!r} is not connected")
        parents = np.full(num_joints, -1, dtype=np.int64)
        for j in range(num_joints):
            if j == root:
                continue
            candidates = [i for i in np.flatnonzero(P[j]) if hop_root[i] == hop_root[j] - 1]
            parents[j] = min(candidates)
        return cls(name, P, partition, num_subsets, parents, center, tuple(flip_pairs))

    def degree(self) -> np.ndarray:
        return self.P.sum(axis=1)

    def subset_matrices(self) -> np.ndarray:
        """Per-subset aggregation matrices ``A[k, j, i]``, float32, shape (K, V, V).

        Column ``i`` averages over the members of subset ``k`` of joint ``i``'s
        neighbourhood, so ``X @ A[k]`` maps joint features onto kernel centres.
        """
        V = self.num_joints
        A = np.zeros((self.num_subsets, V, V), dtype=np.float64)
        for i in range(V):
            for j in np.flatnonzero(self.partition[i] >= 0):
                A[self.partition[i, j], j, i] = 1.0
        counts = A.sum(axis=1, keepdims=True)
        A = np.divide(A, counts, out=np.zeros_like(A), where=counts > 0)
        return A.astype(np.float32)


def ntu_graph(strategy: str = "spatial") -> SkeletonGraph:
    return SkeletonGraph.from_edges(
        "ntu25", 25, NTU_EDGES, root=NTU_ROOT, center=NTU_CENTER,
        strategy=strategy, flip_pairs=NTU_FLIP_PAIRS)


def chain_graph(num_joints: int, strategy: str = "spatial") -> SkeletonGraph:
    edges = [(i, i + 1) for i in range(num_joints - 1)]
    return SkeletonGraph.from_edges(
        f"chain{num_joints}", num_joints, edges, root=0, center=num_joints // 2,
        strategy=strategy)


@lru_cache(maxsize=None)
def get_graph(name: str, strategy: str = "spatial") -> SkeletonGraph:
    """Resolve a graph id: ``ntu25`` or ``chain<V>``."""
    if name == "ntu25":
        return ntu_graph(strategy)
    if name.startswith("chain") and name[5:].isdigit() and int(name[5:]) >= 1:
        return chain_graph(int(name[5:]), strategy)
    raise ConfigError(f"unknown graph id {name!r}")
