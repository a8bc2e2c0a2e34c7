"""Parameterized synthetic skeleton actions for desk-scale experiments.

Every class is a rest pose plus a mirrored pair of limbs that swing in step
along a class-specific direction at a class-specific tempo. Classes are therefore unchanged by a left-right flip and far
apart under small rotations. The swing is one-sided
(``(1 - cos) / 2``), so each class also has a distinct mean posture, which
keeps classes linearly separable on time-averaged coordinates. Per-sample
nuisance factors (body scale, heading, tempo, amplitude, clip length, sensor
noise) make the task non-trivial for small labelled sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .formats import SkeletonDataset
from .graph import NTU_ROOT
from .skeleton import SkeletonSequence, normalize_origin

# Approximate NTU rest pose in metres: x right, y up, z towards the camera.
NTU_REST_POSE = np.array([
    [0.00, 0.00, 0.0],    # 0 spine base
    [0.00, 0.30, 0.0],    # 1 spine mid
    [0.00, 0.62, 0.0],    # 2 neck
    [0.00, 0.78, 0.0],    # 3 head
    [-0.18, 0.55, 0.0],   # 4 left shoulder
    [-0.22, 0.28, 0.0],   # 5 left elbow
    [-0.24, 0.04, 0.0],   # 6 left wrist
    [-0.25, -0.04, 0.0],  # 7 left hand
    [0.18, 0.55, 0.0],    # 8 right shoulder
    [0.22, 0.28, 0.0],    # 9 right elbow
    [0.24, 0.04, 0.0],    # 10 right wrist
    [0.25, -0.04, 0.0],   # 11 right hand
    [-0.10, -0.02, 0.0],  # 12 left hip
    [-0.11, -0.45, 0.0],  # 13 left knee
    [-0.12, -0.85, 0.0],  # 14 left ankle
    [-0.12, -0.90, 0.08],  # 15 left foot
    [0.10, -0.02, 0.0],   # 16 right hip
    [0.11, -0.45, 0.0],   # 17 right knee
    [0.12, -0.85, 0.0],   # 18 right ankle
    [0.12, -0.90, 0.08],  # 19 right foot
    [0.00, 0.55, 0.0],    # 20 spine shoulder
    [-0.26, -0.10, 0.0],  # 21 left hand tip
    [-0.22, -0.06, 0.03],  # 22 left thumb
    [0.26, -0.10, 0.0],   # 23 right hand tip
    [0.22, -0.06, 0.03],  # 24 right thumb
], dtype=np.float64)

# Left/right joint chains, ordered proximal to distal. Classes animate both
# sides of a pair so that a left-right flip maps each class onto itself.
LIMB_PAIRS = {
    "arms": ((5, 6, 7, 21, 22), (9, 10, 11, 23, 24)),
    "legs": ((13, 14, 15), (17, 18, 19)),
}
LIMB_SETS = (("arms",), ("legs",), ("arms", "legs"))
# Swing directions for the left side; the right side mirrors x.
DIRECTIONS = {"up": (0.0, 1.0, 0.0), "forward": (0.0, 0.0, 1.0), "out": (-1.0, 0.0, 0.0)}
CYCLES = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class SyntheticParams:
    classes: int = 10
    per_class: int = 100
    seed: int = 0
    min_frames: int = 48
    max_frames: int = 96
    subjects: int = 5
    amplitude: float = 0.25
    noise: float = 0.02
    max_heading: float = np.pi / 4
    max_tilt: float = 0.0
    scale_jitter: float = 0.15
    style: float = 0.05
    tempo_jitter: float = 0.05
    onset_jitter: float = 0.5

    def validate(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes", "classes")
        if self.per_class < 1:
            raise ConfigError("must be >= 1", "per_class")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames", "min_frames")
        if self.subjects < 1:
            raise ConfigError("must be >= 1", "subjects")
        if not 0 <= self.style < 0.5:
            raise ConfigError("must lie in [0, 0.5)", "style")


def _class_prototypes(classes: int, rng: np.random.Generator):
    """Pick ``classes`` distinct (limbs, direction, tempo) combinations."""
    combos = [(ls, d, c) for ls in range(len(LIMB_SETS)) for d in DIRECTIONS for c in CYCLES]
    if classes > len(combos):
        raise ConfigError(f"at most {len(combos)} classes are supported", "classes")
    protos = []
    for idx in rng.choice(len(combos), size=classes, replace=False):
        limb_set, dname, cycles = combos[idx]
        joints, directions, weights, sides = [], [], [], []
        for limb in LIMB_SETS[limb_set]:
            for side, chain in enumerate(LIMB_PAIRS[limb]):
                d = np.array(DIRECTIONS[dname])
                if side == 1:
                    d[0] = -d[0]
                for k, j in enumerate(chain):
                    joints.append(j)
                    directions.append(d)
                    weights.append(0.5 + 0.5 * (k + 1) / len(chain))
                    sides.append(side)
        protos.append(dict(joints=np.array(joints), direction=np.array(directions),
                           weight=np.array(weights), cycles=cycles,
                           mirror=np.where(np.array(sides)[:, None] == 1, [-1.0, 1, 1], [1.0, 1, 1])))
    return protos


def _camera(heading: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation about y (heading), then x (pitch), then z (roll)."""
    ch, sh = np.cos(heading), np.sin(heading)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[ch, 0, sh], [0, 1, 0], [-sh, 0, ch]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def _render(proto, p: SyntheticParams, rng: np.random.Generator) -> np.ndarray:
    T = int(rng.integers(p.min_frames, p.max_frames + 1))
    scale = 1 + rng.uniform(-p.scale_jitter, p.scale_jitter)
    tempo = rng.uniform(1 - p.tempo_jitter, 1 + p.tempo_jitter)
    amp = p.amplitude * rng.uniform(1 - 2 * p.style, 1 + 2 * p.style)
    phase0 = rng.uniform(0, p.onset_jitter)  # clips start near the rest pose

    # per-body proportions and a personal swing style, mirrored across sides
    body = NTU_REST_POSE * scale * rng.uniform(1 - p.style, 1 + p.style, size=3)
    tilt = rng.normal(scale=p.style, size=3)
    direction = proto["direction"] + proto["mirror"] * tilt

    t = np.linspace(0, 1, T)
    pose = np.repeat(body[None], T, axis=0)  # [T, V, 3]
    angle = 2 * np.pi * proto["cycles"] * tempo * t[:, None] + phase0
    swing = amp * proto["weight"][None] * (1 - np.cos(angle)) / 2  # [T, J]
    pose[:, proto["joints"]] += swing[..., None] * direction[None]
    heading = rng.uniform(-p.max_heading, p.max_heading)
    pitch, roll = rng.uniform(-p.max_tilt, p.max_tilt, size=2)
    pose = pose @ _camera(heading, pitch, roll).T
    pose += rng.normal(scale=p.noise, size=pose.shape)
    return pose.transpose(2, 0, 1)[..., None].astype(np.float32)  # [3, T, V, 1]


def generate_synthetic(params: SyntheticParams | None = None, **kwargs) -> SkeletonDataset:
    """Generate a balanced labelled dataset; fully determined by ``params.seed``."""
    p = params or SyntheticParams(**kwargs)
    p.validate()
    rng = np.random.default_rng(p.seed)
    protos = _class_prototypes(p.classes, rng)
    samples, labels, subjects = [], [], []
    for c in range(p.classes):
        for i in range(p.per_class):
            x = normalize_origin(_render(protos[c], p, rng), NTU_ROOT)
            samples.append(SkeletonSequence(x, c, "ntu25"))
            labels.append(c)
            subjects.append(i % p.subjects)
    return SkeletonDataset(
        samples, np.array(labels, dtype=np.int64), np.array(subjects, dtype=np.int64),
        np.zeros(len(samples), dtype=np.int64), name=f"synthetic-{p.classes}x{p.per_class}-s{p.seed}")

