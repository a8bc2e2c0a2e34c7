"""Augmentations on ``[C, T, V, M]`` skeleton tensors.

Every transform accepts either a raw float32 array or a ``SkeletonSequence``
and returns the same kind. Randomness always comes from an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .graph import SkeletonGraph, get_graph, power_adjacency
from .skeleton import SkeletonSequence

MAX_ANGLE = np.pi / 6
MAX_SHEAR = 0.5


def _unwrap(x):
    return x.values if isinstance(x, SkeletonSequence) else np.asarray(x, dtype=np.float32)


def _rewrap(x, values: np.ndarray):
    return x.replace(values) if isinstance(x, SkeletonSequence) else values


def _graph_for(x, graph):
    if graph is not None:
        return graph
    return get_graph(x.graph_id if isinstance(x, SkeletonSequence) else "ntu25")


@dataclass(frozen=True)
class SpatialMaskParams:
    n: int = 2
    num_seeds: int = 5
    k: int = 8

    def validate(self, num_joints: int):
        if self.n < 1:
            raise ConfigError("adjacency exponent must be >= 1", "n")
        if self.num_seeds < 1:
            raise ConfigError("need at least one seed joint", "num_seeds")
        if not 1 <= self.k <= num_joints:
            raise ConfigError(f"k must lie in [1, {num_joints}]", "k")


@dataclass(frozen=True)
class TemporalMaskParams:
    s: int = 16
    r: int = 6

    def validate(self, num_frames: int):
        if self.s < 1 or num_frames % self.s:
            raise ConfigError(f"cube count {self.s} must divide {num_frames} frames", "s")
        if not 0 <= self.r <= self.s:
            raise ConfigError(f"r must lie in [0, {self.s}]", "r")


def spatial_mask_joints(graph: SkeletonGraph, params: SpatialMaskParams,
                        rng: np.random.Generator) -> np.ndarray:
    """Pick the joints to mask: top-``k`` walk-count response to random seed joints."""
    V = graph.num_joints
    params.validate(V)
    D = power_adjacency(graph.P, params.n)
    seeds = rng.integers(0, V, size=params.num_seeds)
    flag = D[seeds].sum(axis=0)
    # stable ascending sort: ties resolve to the higher joint index in the tail
    return np.argsort(flag, kind="stable")[-params.k:]


def spatial_mask(x, graph: SkeletonGraph | None, params: SpatialMaskParams,
                 rng: np.random.Generator):
    graph = _graph_for(x, graph)
    values = _unwrap(x)
    if values.shape[2] != graph.num_joints:
        raise ConfigError(f"sequence has {values.shape[2]} joints, graph has {graph.num_joints}")
    joints = spatial_mask_joints(graph, params, rng)
    out = values.copy()
    out[:, :, joints, :] = 0
    return _rewrap(x, out)


def temporal_mask_cubes(num_frames: int, params: TemporalMaskParams,
                        rng: np.random.Generator) -> np.ndarray:
    params.validate(num_frames)
    return rng.choice(params.s, size=params.r, replace=False)


def temporal_mask(x, params: TemporalMaskParams, rng: np.random.Generator):
    values = _unwrap(x)
    C, T, V, M = values.shape
    cubes = temporal_mask_cubes(T, params, rng)
    out = values.copy().reshape(C, params.s, T // params.s, V, M)
    out[:, cubes] = 0
    return _rewrap(x, out.reshape(C, T, V, M))


def rotation_matrix(angles) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles ``(ax, ay, az)`` in radians."""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def apply_linear(x, matrix: np.ndarray):
    """Apply one ``C x C`` matrix to every joint vector."""
    values = _unwrap(x)
    out = np.einsum("ij,jtvm->itvm", matrix, values.astype(np.float64))
    return _rewrap(x, out.astype(np.float32))


def rotate(x, rng: np.random.Generator | None = None, angles=None):
    C = _unwrap(x).shape[0]
    if C == 2:
        theta = rng.uniform(-MAX_ANGLE, MAX_ANGLE) if angles is None else angles
        c, s = np.cos(theta), np.sin(theta)
        return apply_linear(x, np.array([[c, -s], [s, c]]))
    if angles is None:
        angles = rng.uniform(-MAX_ANGLE, MAX_ANGLE, size=3)
    return apply_linear(x, rotation_matrix(angles))


def shear_matrix(C: int, rng: np.random.Generator) -> np.ndarray:
    S = np.eye(C)
    off = ~np.eye(C, dtype=bool)
    S[off] = rng.uniform(-MAX_SHEAR, MAX_SHEAR, size=C * C - C)
    return S


def shear(x, rng: np.random.Generator | None = None, matrix=None):
    C = _unwrap(x).shape[0]
    return apply_linear(x, shear_matrix(C, rng) if matrix is None else matrix)


def flip(x, rng: np.random.Generator | None = None, graph: SkeletonGraph | None = None):
    """Mirror left/right: swap symmetric joints and negate the x coordinate."""
    graph = _graph_for(x, graph)
    values = _unwrap(x)
    perm = np.arange(values.shape[2])
    for a, b in graph.flip_pairs:
        perm[a], perm[b] = b, a
    out = values[:, :, perm].copy()
    out[0] = -out[0]
    return _rewrap(x, out)


TRANSFORMS = ("rotate", "flip", "shear", "spatial_mask", "temporal_mask")


@dataclass(frozen=True)
class AugmentPipeline:
    """Ordered ``(transform id, probability)`` pairs plus masking parameters."""

    transforms: tuple[tuple[str, float], ...] = tuple((t, 0.5) for t in TRANSFORMS)
    spatial: SpatialMaskParams = field(default_factory=SpatialMaskParams)
    temporal: TemporalMaskParams = field(default_factory=TemporalMaskParams)

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple((str(t), float(p)) for t, p in self.transforms))
        for name, p in self.transforms:
            if name not in TRANSFORMS:
                raise ConfigError(f"unknown transform {name!r}", "augment.transforms")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} for {name} outside [0, 1]", "augment.transforms")

    def without(self, *names: str) -> "AugmentPipeline":
        kept = tuple((t, p) for t, p in self.transforms if t not in names)
        return AugmentPipeline(kept, self.spatial, self.temporal)


def compose_traced(pipeline: AugmentPipeline, x, rng: np.random.Generator,
                   graph: SkeletonGraph | None = None):
    """Run the pipeline; return the result and which transforms fired.

    A coin is drawn only for probabilities strictly between 0 and 1, so a
    ``p=1`` pipeline consumes the generator exactly like direct calls.
    """
    fired = []
    for name, p in pipeline.transforms:
        on = p >= 1.0 or (p > 0.0 and rng.random() < p)
        fired.append(on)
        if not on:
            continue
        if name == "rotate":
            x = rotate(x, rng)
        elif name == "flip":
            x = flip(x, rng, graph)
        elif name == "shear":
            x = shear(x, rng)
        elif name == "spatial_mask":
            x = spatial_mask(x, graph, pipeline.spatial, rng)
        else:
            x = temporal_mask(x, pipeline.temporal, rng)
    return x, fired


def compose(pipeline: AugmentPipeline, x, rng: np.random.Generator,
            graph: SkeletonGraph | None = None):
    return compose_traced(pipeline, x, rng, graph)[0]


def occlude(x, rng: np.random.Generator, joint_drop: float = 0.2, span: float = 0.25):
    """Sensor-style corruption for robustness checks, not part of training.

    Each joint is lost for the whole clip with probability ``joint_drop``, and
    one contiguous span covering ``span`` of the frames is lost for all joints.
    Lost coordinates are zeroed.
    """
    if not (0 <= joint_drop <= 1 and 0 <= span <= 1):
        raise ConfigError("joint_drop and span must lie in [0, 1]")
    out = _unwrap(x).copy()
    _, T, V, _ = out.shape
    out[:, :, rng.random(V) < joint_drop] = 0
    length = int(round(span * T))
    if length:
        start = int(rng.integers(0, T - length + 1))
        out[:, start:start + length] = 0
    return _rewrap(x, out)
