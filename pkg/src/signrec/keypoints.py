"""Per-frame skeleton featurisation into a 443-wide vector.

Joint order inside a frame is pose (22), left hand (21), right hand (21).
Pose joints are the upper-body subset of the 33-point body model without
the nose; hand joints follow the usual 21-point hand model rooted at the
wrist (0) with thumb 1-4, index 5-8, middle 9-12, ring 13-16, pinky 17-20.

Feature layout (offsets into the 443 vector)::

    raw_pose            0   66   22 x xyz
    raw_left           66   63
    raw_right         129   63
    bone_pose         192   14
    bone_left         206   20
    bone_right        226   20
    rel_pose          246   63   21 non-root joints x xyz, child - parent
    rel_left          309   60
    rel_right         369   60
    dist_pose         429    4
    dist_left         433    5
    dist_right        438    5

Only the total width is fixed upstream; this decomposition is a
reconstruction and the only one we found that sums to 443 from the listed
ingredients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import DiffArray, linear, reshape
from .errors import ConfigError, DataError, DimensionError

N_POSE, N_HAND = 22, 21
N_JOINTS = N_POSE + 2 * N_HAND
FEATURE_DIM = 443
DEFAULT_SIGMA = 0.2

POSE_NAMES = (
    "left_eye_inner", "left_eye", "left_eye_outer", "right_eye_inner", "right_eye", "right_eye_outer",
    "left_ear", "right_ear", "mouth_left", "mouth_right",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_pinky", "right_pinky", "left_index", "right_index", "left_thumb", "right_thumb",
)
_P = {n: i for i, n in enumerate(POSE_NAMES)}


def _arm_bones(side: str) -> list[tuple[int, int]]:
    s = lambda n: _P[f"{side}_{n}"]  # noqa: E731
    return [(s("shoulder"), s("elbow")), (s("elbow"), s("wrist")), (s("wrist"), s("thumb")),
            (s("wrist"), s("index")), (s("wrist"), s("pinky")), (s("index"), s("pinky")),
            (s("index"), s("thumb"))]


@dataclass(frozen=True)
class SkeletonTopology:
    pose_bones: tuple[tuple[int, int], ...]
    hand_bones: tuple[tuple[int, int], ...]
    pose_parents: dict[int, int]
    hand_parents: dict[int, int]
    pose_distance_pairs: tuple[tuple[int, int], ...]
    hand_distance_pairs: tuple[tuple[int, int], ...]

    def validate(self) -> None:
        for bones, n in ((self.pose_bones, N_POSE), (self.hand_bones, N_HAND)):
            if len(set(map(frozenset, bones))) != len(bones):
                raise ConfigError("duplicate bone pair")
            if any(not (0 <= i < n and 0 <= j < n) or i == j for i, j in bones):
                raise ConfigError("bone index out of range")
        for parents, n in ((self.pose_parents, N_POSE), (self.hand_parents, N_HAND)):
            if len(parents) != n - 1:
                raise ConfigError(f"expected {n - 1} non-root joints, got {len(parents)}")
            for child in parents:
                seen, j = {child}, child
                while j in parents:
                    j = parents[j]
                    if j in seen or not 0 <= j < n:
                        raise ConfigError(f"parent map is cyclic or out of range at joint {child}")
                    seen.add(j)


def default_topology() -> SkeletonTopology:
    # left shoulder is the pose root; the shoulder bridge enters as right shoulder's parent offset
    p = _P
    pose_parents = {
        p["right_shoulder"]: p["left_shoulder"],
        p["left_elbow"]: p["left_shoulder"], p["left_wrist"]: p["left_elbow"],
        p["left_pinky"]: p["left_wrist"], p["left_index"]: p["left_wrist"], p["left_thumb"]: p["left_wrist"],
        p["right_elbow"]: p["right_shoulder"], p["right_wrist"]: p["right_elbow"],
        p["right_pinky"]: p["right_wrist"], p["right_index"]: p["right_wrist"],
        p["right_thumb"]: p["right_wrist"],
        p["mouth_left"]: p["left_shoulder"], p["mouth_right"]: p["mouth_left"],
        p["left_eye_inner"]: p["mouth_left"], p["left_eye"]: p["left_eye_inner"],
        p["left_eye_outer"]: p["left_eye"], p["right_eye_inner"]: p["left_eye_inner"],
        p["right_eye"]: p["right_eye_inner"], p["right_eye_outer"]: p["right_eye"],
        p["left_ear"]: p["left_eye_outer"], p["right_ear"]: p["right_eye_outer"],
    }
    hand_bones = []
    for base in (1, 5, 9, 13, 17):
        hand_bones.append((0, base))
        hand_bones.extend((base + k, base + k + 1) for k in range(3))
    hand_parents = {child: parent for parent, child in hand_bones}
    topo = SkeletonTopology(
        pose_bones=tuple(_arm_bones("left") + _arm_bones("right")),
        hand_bones=tuple(hand_bones),
        pose_parents=dict(sorted(pose_parents.items())),
        hand_parents=dict(sorted(hand_parents.items())),
        pose_distance_pairs=((p["left_wrist"], p["right_wrist"]), (p["left_elbow"], p["right_elbow"]),
                             (p["left_wrist"], p["left_shoulder"]), (p["right_wrist"], p["right_shoulder"])),
        hand_distance_pairs=((8, 0), (12, 0), (16, 0), (20, 0), (4, 0)),
    )
    topo.validate()
    return topo


TOPOLOGY = default_topology()


@dataclass
class SkeletonFrame:
    pose: np.ndarray
    left_hand: np.ndarray
    right_hand: np.ndarray
    visibility: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.left_hand = np.asarray(self.left_hand, dtype=np.float64)
        self.right_hand = np.asarray(self.right_hand, dtype=np.float64)
        if self.pose.shape != (N_POSE, 3) or self.left_hand.shape != (N_HAND, 3) \
                or self.right_hand.shape != (N_HAND, 3):
            raise DimensionError("a frame needs 22 pose and 2 x 21 hand joints, each (x, y, z)")
        if not (np.all(np.isfinite(self.pose)) and np.all(np.isfinite(self.left_hand))
                and np.all(np.isfinite(self.right_hand))):
            raise DataError("joint coordinates must be finite")

    @classmethod
    def from_array(cls, joints: np.ndarray, visibility=None) -> "SkeletonFrame":
        joints = np.asarray(joints, dtype=np.float64)
        if joints.shape != (N_JOINTS, 3):
            raise DimensionError(f"expected ({N_JOINTS}, 3) joints, got {joints.shape}")
        return cls(joints[:N_POSE], joints[N_POSE:N_POSE + N_HAND], joints[N_POSE + N_HAND:], visibility)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.pose, self.left_hand, self.right_hand])

    @classmethod
    def missing(cls) -> "SkeletonFrame":
        return cls(np.zeros((N_POSE, 3)), np.zeros((N_HAND, 3)), np.zeros((N_HAND, 3)),
                   np.zeros(N_JOINTS, dtype=bool))


def _groups(joints: np.ndarray):
    return joints[..., :N_POSE, :], joints[..., N_POSE:N_POSE + N_HAND, :], joints[..., N_POSE + N_HAND:, :]


def _as_joints(frame) -> np.ndarray:
    if isinstance(frame, SkeletonFrame):
        return frame.to_array()
    arr = np.asarray(frame, dtype=np.float64)
    if arr.shape[-2:] != (N_JOINTS, 3):
        raise DimensionError(f"expected (..., {N_JOINTS}, 3) joints, got {arr.shape}")
    return arr


def _pair_lengths(points: np.ndarray, pairs) -> np.ndarray:
    i, j = np.array(pairs).T
    d = points[..., i, :] - points[..., j, :]
    return np.sqrt((d * d).sum(axis=-1))


def _parent_offsets(points: np.ndarray, parents: dict[int, int]) -> np.ndarray:
    child = np.fromiter(parents.keys(), dtype=int)
    parent = np.fromiter(parents.values(), dtype=int)
    d = points[..., child, :] - points[..., parent, :]
    return d.reshape(d.shape[:-2] + (-1,))


def bone_lengths(frame, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """14 pose then 2 x 20 hand bone lengths; accepts a frame or a (..., 64, 3) array."""
    pose, left, right = _groups(_as_joints(frame))
    return np.concatenate([_pair_lengths(pose, topology.pose_bones),
                           _pair_lengths(left, topology.hand_bones),
                           _pair_lengths(right, topology.hand_bones)], axis=-1)


def relative_positions(frame, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """Child minus parent offsets for the 61 non-root joints, flattened to 183."""
    pose, left, right = _groups(_as_joints(frame))
    return np.concatenate([_parent_offsets(pose, topology.pose_parents),
                           _parent_offsets(left, topology.hand_parents),
                           _parent_offsets(right, topology.hand_parents)], axis=-1)


def pairwise_distances(frame, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    pose, left, right = _groups(_as_joints(frame))
    return np.concatenate([_pair_lengths(pose, topology.pose_distance_pairs),
                           _pair_lengths(left, topology.hand_distance_pairs),
                           _pair_lengths(right, topology.hand_distance_pairs)], axis=-1)


_SEGMENTS = (
    ("raw_pose", 66), ("raw_left", 63), ("raw_right", 63),
    ("bone_pose", 14), ("bone_left", 20), ("bone_right", 20),
    ("rel_pose", 63), ("rel_left", 60), ("rel_right", 60),
    ("dist_pose", 4), ("dist_left", 5), ("dist_right", 5),
)


def _layout() -> dict[str, slice]:
    out, start = {}, 0
    for name, width in _SEGMENTS:
        out[name] = slice(start, start + width)
        start += width
    assert start == FEATURE_DIM
    return out


FEATURE_LAYOUT = _layout()


def assemble_feature_vector(frame, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """The 443-wide feature for a frame, or (..., 443) for a (..., 64, 3) joint array."""
    joints = _as_joints(frame)
    lead = joints.shape[:-2]
    raw = joints.reshape(lead + (N_JOINTS * 3,))
    return np.concatenate([raw, bone_lengths(joints, topology), relative_positions(joints, topology),
                           pairwise_distances(joints, topology)], axis=-1)


def sequence_features(joints: np.ndarray, topology: SkeletonTopology = TOPOLOGY) -> np.ndarray:
    """T x 64 x 3 keypoint sequence to a T x 443 feature matrix."""
    joints = _as_joints(joints)
    if joints.ndim != 3:
        raise DimensionError(f"expected a (T, 64, 3) sequence, got {joints.shape}")
    return assemble_feature_vector(joints, topology)


def add_gaussian_noise(x: np.ndarray, sigma: float = DEFAULT_SIGMA, seed: int | np.random.Generator = 0) -> np.ndarray:
    if sigma < 0:
        raise ConfigError(f"noise sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)


def project_features(x, weights: DiffArray, bias: DiffArray) -> DiffArray:
    """Affine map of (..., 443) features to the encoder width."""
    x = x if isinstance(x, DiffArray) else DiffArray(x)
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(f"projection shapes disagree: x {x.shape}, W {weights.shape}, b {bias.shape}")
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, -1)), weights, bias), (-1,))
    return linear(x, weights, bias)


# --- keypoint stream files ----------------------------------------------------
#
# One frame per line: ``<frame index> x0 y0 z0 x1 y1 z1 ... x63 y63 z63``
# (193 whitespace-separated fields). Indices start at 0 and increase by one.
# Blank lines and lines starting with '#' are ignored. Floats are written with
# 17 significant digits so values round-trip exactly.

def write_keypoint_stream(path: str | Path, joints: np.ndarray) -> None:
    joints = _as_joints(joints)
    lines = []
    for t, frame in enumerate(joints):
        lines.append(" ".join([str(t)] + [format(v, ".17g") for v in frame.reshape(-1)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoint_stream(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"keypoint stream not found: {path}")
    frames = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 1 + N_JOINTS * 3:
            raise DataError(f"{path}:{lineno}: expected {1 + N_JOINTS * 3} fields, got {len(parts)}")
        if int(parts[0]) != len(frames):
            raise DataError(f"{path}:{lineno}: frame index {parts[0]} out of sequence")
        frames.append(np.array([float(v) for v in parts[1:]]).reshape(N_JOINTS, 3))
    if not frames:
        raise DataError(f"{path}: no frames")
    out = np.stack(frames)
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: non-finite coordinates")
    return out
