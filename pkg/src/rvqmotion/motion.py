"""Motion feature model: skeleton layout, kinematic operators, presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SkeletonSpec:
    """Where each joint's 3D position lives inside the feature vector, and
    which joint pairs form the bone tree used by the bone-direction loss."""

    joint_count: int
    position_slices: tuple[tuple[int, int], ...]   # per joint: (start, stop)
    bone_pairs: tuple[tuple[int, int], ...]        # (parent u, child v)
    feature_width: int

    def __post_init__(self):
        if len(self.position_slices) != self.joint_count:
            raise ValueError("one position slice per joint required")
        claimed = np.zeros(self.feature_width, dtype=bool)
        for start, stop in self.position_slices:
            if not (0 <= start < stop <= self.feature_width):
                raise ValueError(f"slice ({start},{stop}) outside feature "
                                 f"width {self.feature_width}")
            if stop - start != 3:
                raise ValueError("position slices must be 3-wide")
            if claimed[start:stop].any():
                raise ValueError("position slices overlap")
            claimed[start:stop] = True
        if len(self.bone_pairs) != self.joint_count - 1:
            raise ValueError(f"bone pairs must form a tree: expected "
                             f"{self.joint_count - 1}, got {len(self.bone_pairs)}")
        parent = list(range(self.joint_count))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for u, v in self.bone_pairs:
            if not (0 <= u < self.joint_count and 0 <= v < self.joint_count):
                raise ValueError(f"bone pair ({u},{v}) references a missing joint")
            ru, rv = find(u), find(v)
            if ru == rv:
                raise ValueError("bone pairs contain a cycle")
            parent[ru] = rv


@dataclass
class MotionSequence:
    frames: np.ndarray               # (T, D)
    fps: float
    skeleton: SkeletonSpec

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a (T, D) matrix")
        if self.frames.shape[1] != self.skeleton.feature_width:
            raise ValueError(
                f"feature width {self.frames.shape[1]} does not match "
                f"skeleton width {self.skeleton.feature_width}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def velocity(frames: np.ndarray) -> np.ndarray:
    """Forward difference: v_i = x_{i+1} - x_i, (T-1, D)."""
    return frames[1:] - frames[:-1]


def acceleration(frames: np.ndarray) -> np.ndarray:
    """Central second difference: a_i = x_{i+2} + x_i - 2 x_{i+1}, (T-2, D)."""
    return frames[2:] + frames[:-2] - 2.0 * frames[1:-1]


def bone_vectors(frames: np.ndarray, skeleton: SkeletonSpec) -> np.ndarray:
    """Per-frame parent-minus-child position differences, (T, bones, 3)."""
    out = np.empty((frames.shape[0], len(skeleton.bone_pairs), 3),
                   dtype=frames.dtype)
    for b, (u, v) in enumerate(skeleton.bone_pairs):
        su, sv = skeleton.position_slices[u], skeleton.position_slices[v]
        out[:, b, :] = frames[:, su[0]:su[1]] - frames[:, sv[0]:sv[1]]
    return out


def kinematics(frames: np.ndarray, skeleton: SkeletonSpec):
    """(velocity, acceleration, bone_vectors); needs T >= 3 frames."""
    if frames.shape[0] < 3:
        raise ValueError(f"kinematics needs T >= 3, got {frames.shape[0]}")
    return velocity(frames), acceleration(frames), bone_vectors(frames, skeleton)


def compute_norm_stats(frame_arrays) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean/std pooled over all frames of all clips.

    Dimensions with (near-)zero variance get std 1 so they pass through
    normalization unchanged.
    """
    stacked = np.concatenate([np.asarray(a, dtype=np.float64)
                              for a in frame_arrays], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-6, 1.0, std)
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def chain_skeleton() -> SkeletonSpec:
    """Synthetic 5-joint chain: 3 position coordinates per joint, 15 features."""
    return SkeletonSpec(
        joint_count=5,
        position_slices=tuple((3 * j, 3 * j + 3) for j in range(5)),
        bone_pairs=((0, 1), (1, 2), (2, 3), (3, 4)),
        feature_width=15,
    )


# Kinematic trees of the 22-joint and 21-joint mocap layouts, as edge lists.
_TREE_22 = [[0, 2, 5, 8, 11], [0, 1, 4, 7, 10], [0, 3, 6, 9, 12, 15],
            [9, 14, 17, 19, 21], [9, 13, 16, 18, 20]]
_TREE_21 = [[0, 11, 12, 13, 14, 15], [0, 16, 17, 18, 19, 20],
            [0, 1, 2, 3, 4], [3, 5, 6, 7], [3, 8, 9, 10]]


def _chain_edges(chains) -> tuple[tuple[int, int], ...]:
    edges = []
    for chain in chains:
        edges.extend(zip(chain[:-1], chain[1:]))
    return tuple(edges)


def _mocap_skeleton(joints: int, width: int, chains) -> SkeletonSpec:
    # Layout: [root rotational velocity (1), root linear velocity (2),
    # root height (1), local joint positions (3 each for joints 1..J-1), ...].
    # The root has no direct position triple; its slice covers the
    # (vel_x, vel_z, height) triple at indices 1..3 as a kinematic proxy so
    # bones incident to the root remain well-defined and consistently
    # comparable between a clip and its reconstruction.
    slices = [(1, 4)]
    slices += [(4 + 3 * (j - 1), 4 + 3 * j) for j in range(1, joints)]
    return SkeletonSpec(joint_count=joints,
                        position_slices=tuple(slices),
                        bone_pairs=_chain_edges(chains),
                        feature_width=width)


def humanml3d_skeleton() -> SkeletonSpec:
    """263-dim feature layout over 22 joints."""
    return _mocap_skeleton(22, 263, _TREE_22)


def kit_skeleton() -> SkeletonSpec:
    """251-dim feature layout over 21 joints."""
    return _mocap_skeleton(21, 251, _TREE_21)


_PRESETS = {
    "chain": chain_skeleton,
    "humanml3d": humanml3d_skeleton,
    "kit": kit_skeleton,
}


def skeleton_preset(name: str) -> SkeletonSpec:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown skeleton preset {name!r}; "
                         f"choose from {sorted(_PRESETS)}") from None
