"""The skeleton sequence type and the per-sample transforms that are not augmentation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import SkeletonGraph, get_graph

VIEWS = ("joint", "motion", "bone")


@dataclass(frozen=True)
class SkeletonSequence:
    """Joint coordinates shaped ``[C, T, V, M]`` (channels, frames, joints, persons)."""

    values: np.ndarray
    label: int | None = None
    graph_id: str = "ntu25"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 4:
            raise ConfigError(f"expected a [C, T, V, M] tensor, got shape {values.shape}")
        C, T, V, M = values.shape
        if C not in (2, 3) or min(T, V, M) < 1:
            raise ConfigError(f"invalid sequence shape {values.shape}")
        if not np.isfinite(values).all():
            raise ConfigError("sequence contains non-finite values")
        if values.flags.writeable:
            values = values.copy() if values is self.values else values
            values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    def replace(self, values: np.ndarray) -> "SkeletonSequence":
        return dataclasses.replace(self, values=values)


def frame_indices(T_raw: int, T_out: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform frame indices; with replacement only when the clip is short."""
    if T_out < 1:
        raise ConfigError(f"T_out must be >= 1, got {T_out}")
    if T_raw >= T_out:
        idx = rng.choice(T_raw, size=T_out, replace=False)
    else:
        idx = rng.integers(0, T_raw, size=T_out)
    return np.sort(idx)


def sample_frames(seq: SkeletonSequence, T_out: int, rng: np.random.Generator) -> SkeletonSequence:
    idx = frame_indices(seq.num_frames, T_out, rng)
    return seq.replace(seq.values[:, idx])


def _view_array(x: np.ndarray, view: str, graph: SkeletonGraph) -> np.ndarray:
    if view == "joint":
        return x
    if view == "motion":
        out = np.zeros_like(x)
        out[:, :-1] = x[:, 1:] - x[:, :-1]
        return out
    if view == "bone":
        out = np.zeros_like(x)
        for child, parent in enumerate(graph.parents):
            if parent >= 0:
                out[:, :, child] = x[:, :, child] - x[:, :, parent]
        return out
    raise ConfigError(f"unknown view {view!r}; expected one of {VIEWS}")


def derive_view(seq: SkeletonSequence, view: str, graph: SkeletonGraph | None = None) -> SkeletonSequence:
    graph = graph or get_graph(seq.graph_id)
    return seq.replace(_view_array(seq.values, view, graph))


def normalize_origin(x: np.ndarray, root: int = 0) -> np.ndarray:
    """Translate so that the root joint of the first frame (person 0) sits at the origin."""
    origin = x[:, 0, root, 0]
    return (x - origin[:, None, None, None]).astype(np.float32)
