"""Two-hand motion codec: 147-dim per-frame representation and its inverse.

Each frame packs ``(pL, pR, vL, vR, r)``:

* ``pL, pR`` (60 each): joint coordinates aligned to a canonical hand
  template by a rigid palm fit and divided by the palm scale,
* ``vL, vR`` (9 each): relative palm motion versus the previous frame as a
  6D rotation + translation (mm), identity at the first frame,
* ``r`` (9): relative palm transform from the left to the right hand.

Trajectory recovery accumulates the relative palm motions from an anchor
frame; refined clips are additionally rectified so the accumulated endpoint
matches the input-derived global pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInput, SequenceTooShort, ShapeMismatch
from .transforms import RigidTransform, geodesic_interpolate, umeyama_align

N_JOINTS = 20
FRAME_DIM = 6 * N_JOINTS + 27  # 147

JOINT_NAMES = (
    "wrist",
    "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)
PALM_JOINTS = (0, 1, 4, 8, 12, 16)
PALM_BONES = ((0, 1), (0, 4), (0, 8), (0, 12), (0, 16))
FINGER_CHAINS = {
    "thumb": (1, 2, 3),
    "index": (4, 5, 6, 7),
    "middle": (8, 9, 10, 11),
    "ring": (12, 13, 14, 15),
    "pinky": (16, 17, 18, 19),
}

# slice layout of one 147-dim frame vector
PL = slice(0, 60)
PR = slice(60, 120)
VL = slice(120, 129)
VR = slice(129, 138)
REL = slice(138, 147)
# translation entries of the three 9-vector rigid blocks
TRANSLATION_DIMS = (126, 127, 128, 135, 136, 137, 144, 145, 146)

IDENTITY9 = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 0])


@dataclass(frozen=True)
class HandTemplate:
    """Canonical joint layout for both hands, palm centroid at the origin."""

    left: np.ndarray
    right: np.ndarray
    joint_names: tuple = JOINT_NAMES
    palm_joints: tuple = PALM_JOINTS
    palm_bones: tuple = PALM_BONES

    def __post_init__(self):
        object.__setattr__(self, "left", np.asarray(self.left, dtype=np.float64))
        object.__setattr__(self, "right", np.asarray(self.right, dtype=np.float64))
        for arr in (self.left, self.right):
            if arr.shape != (N_JOINTS, 3):
                raise ShapeMismatch(f"template hands must be ({N_JOINTS}, 3), got {arr.shape}")

    def joints(self, hand: str) -> np.ndarray:
        return self.left if hand == "left" else self.right

    def to_manifest(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "palm_joints": list(self.palm_joints),
            "palm_bones": [list(b) for b in self.palm_bones],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "HandTemplate":
        return cls(
            left=np.array(manifest["left"]),
            right=np.array(manifest["right"]),
            joint_names=tuple(manifest["joint_names"]),
            palm_joints=tuple(manifest["palm_joints"]),
            palm_bones=tuple(tuple(b) for b in manifest["palm_bones"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "HandTemplate":
        return cls.from_manifest(json.loads(Path(path).read_text()))


def default_template() -> HandTemplate:
    """Procedural flat right hand (mm), mirrored for the left.

    Bone lengths are anatomically plausible; the palm point set is shifted so
    its centroid sits at the origin, which makes template alignment commute
    with uniform scaling of the input hand.
    """
    right = np.array(
        [
            [0.0, 0.0, 0.0],        # wrist
            [35.0, 35.0, 0.0],      # thumb mcp/ip/tip
            [55.0, 60.0, 0.0],
            [70.0, 80.0, 0.0],
            [25.0, 95.0, 0.0],      # index
            [25.0, 130.0, 0.0],
            [25.0, 152.0, 0.0],
            [25.0, 170.0, 0.0],
            [8.0, 100.0, 0.0],      # middle
            [8.0, 140.0, 0.0],
            [8.0, 165.0, 0.0],
            [8.0, 185.0, 0.0],
            [-10.0, 95.0, 0.0],     # ring
            [-10.0, 132.0, 0.0],
            [-10.0, 155.0, 0.0],
            [-10.0, 172.0, 0.0],
            [-28.0, 85.0, 0.0],     # pinky
            [-28.0, 112.0, 0.0],
            [-28.0, 130.0, 0.0],
            [-28.0, 145.0, 0.0],
        ]
    )
    right = right - right[list(PALM_JOINTS)].mean(axis=0)
    left = right * np.array([-1.0, 1.0, 1.0])
    return HandTemplate(left=left, right=right)


@dataclass
class MotionSequence:
    """Raw two-hand joint trajectories in a world frame (mm)."""

    left: np.ndarray
    right: np.ndarray
    fps: float = 30.0
    verb: int | None = None
    noun: int | None = None
    action: int | None = None
    seq_id: str | None = None

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape or self.left.ndim != 3 or self.left.shape[1:] != (N_JOINTS, 3):
            raise ShapeMismatch(
                f"expected matching (F, {N_JOINTS}, 3) trajectories, got {self.left.shape} / {self.right.shape}"
            )
        if self.left.shape[0] < 1:
            raise SequenceTooShort("motion needs at least one frame")
        if not (np.isfinite(self.left).all() and np.isfinite(self.right).all()):
            raise DegenerateInput("non-finite joint coordinates")

    @property
    def n_frames(self) -> int:
        return self.left.shape[0]

    def hand(self, side: str) -> np.ndarray:
        return self.left if side == "left" else self.right


@dataclass
class EncodedMotion:
    """Frame vectors plus the per-frame palm alignments and hand scales."""

    frames: np.ndarray                      # (F, 147)
    scale_left: float
    scale_right: float
    align_left: list                        # per-frame world->template RigidTransform
    align_right: list
    fps: float = 30.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def anchor(self, side: str, index: int) -> RigidTransform:
        """Template->world pose of the palm at ``index`` (inverse alignment)."""
        aligns = self.align_left if side == "left" else self.align_right
        return aligns[index].inverse()


def palm_scale(joints: np.ndarray, template: HandTemplate) -> float:
    """Mean Euclidean length (mm) of the wrist->MCP palm bones."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (N_JOINTS, 3):
        raise ShapeMismatch(f"expected ({N_JOINTS}, 3) joints, got {joints.shape}")
    pairs = np.array(template.palm_bones)
    lengths = np.linalg.norm(joints[pairs[:, 1]] - joints[pairs[:, 0]], axis=-1)
    if np.any(lengths < 1e-6):
        raise DegenerateInput("palm bone with near-zero length")
    return float(lengths.mean())


def _align_hand(
    traj: np.ndarray, template_joints: np.ndarray, palm_idx: Sequence[int]
) -> tuple[list, np.ndarray]:
    """Per-frame rigid palm fits and the template-space joints."""
    aligns = []
    aligned = np.empty_like(traj)
    palm_idx = list(palm_idx)
    for i in range(traj.shape[0]):
        try:
            a = umeyama_align(traj[i, palm_idx], template_joints[palm_idx])
        except DegenerateInput as exc:
            raise DegenerateInput(f"frame {i}: {exc}") from exc
        aligns.append(a)
        aligned[i] = a.apply(traj[i])
    return aligns, aligned


def encode_sequence(seq: MotionSequence, template: HandTemplate) -> EncodedMotion:
    """Encode a raw trajectory into per-frame 147-dim hand vectors.

    Palm fits give the alignment ``a_i`` per hand; ``p`` is the aligned
    joints divided by the sequence-mean palm scale, ``v_i = a_{i-1} ∘
    a_i^{-1}`` (identity at i=1) and ``r_i = a_i^R ∘ (a_i^L)^{-1}``.
    """
    f = seq.n_frames
    align_l, aligned_l = _align_hand(seq.left, template.left, template.palm_joints)
    align_r, aligned_r = _align_hand(seq.right, template.right, template.palm_joints)

    scale_l = float(np.mean([palm_scale(seq.left[i], template) for i in range(f)]))
    scale_r = float(np.mean([palm_scale(seq.right[i], template) for i in range(f)]))

    frames = np.empty((f, FRAME_DIM))
    frames[:, PL] = (aligned_l / scale_l).reshape(f, -1)
    frames[:, PR] = (aligned_r / scale_r).reshape(f, -1)
    for i in range(f):
        if i == 0:
            vl = vr = RigidTransform.identity()
        else:
            vl = align_l[i - 1].compose(align_l[i].inverse())
            vr = align_r[i - 1].compose(align_r[i].inverse())
        rel = align_r[i].compose(align_l[i].inverse())
        frames[i, VL] = vl.as_vector9()
        frames[i, VR] = vr.as_vector9()
        frames[i, REL] = rel.as_vector9()
    return EncodedMotion(
        frames=frames,
        scale_left=scale_l,
        scale_right=scale_r,
        align_left=align_l,
        align_right=align_r,
        fps=seq.fps,
    )


def accumulate_roots(motions: Sequence[RigidTransform]) -> RigidTransform:
    """Accumulated global pose after chaining relative palm motions in order."""
    if len(motions) == 0:
        raise ShapeMismatch("accumulate_roots needs a nonempty list")
    acc = motions[0]
    for v in motions[1:]:
        acc = acc.compose(v)
    return acc


def _accumulate_prefix(motions: Sequence[RigidTransform]) -> list:
    out = []
    acc = RigidTransform.identity()
    for v in motions:
        acc = acc.compose(v)
        out.append(acc)
    return out


def rectify_refinement(roots: Sequence[RigidTransform], target_end: RigidTransform) -> list:
    """Blend accumulated clip roots so the final frame matches ``target_end``.

    Frame i of t keeps weight (t-i)/(t-1) of its own pose; the correction
    ``target_end ∘ roots[-1]^{-1}`` is geodesically scaled by the complement,
    leaving frame 1 untouched and pinning frame t exactly.
    """
    t = len(roots)
    if t < 2:
        raise SequenceTooShort("rectification needs at least two frames")
    delta = target_end.compose(roots[-1].inverse())
    out = []
    for i in range(1, t + 1):
        lam2 = (i - 1) / (t - 1)
        out.append(geodesic_interpolate(delta, lam2).compose(roots[i - 1]))
    return out


def frame_rigid(frames: np.ndarray, block: slice) -> list:
    """Decode one 9-vector block of (F, 147) frames into RigidTransforms."""
    return [RigidTransform.from_vector9(frames[i, block]) for i in range(frames.shape[0])]


def recover_trajectory(
    frames: np.ndarray,
    scale_left: float,
    scale_right: float,
    mode: str = "predict",
    anchor_left: RigidTransform | None = None,
    anchor_right: RigidTransform | None = None,
    rectify_to: tuple[RigidTransform, RigidTransform] | None = None,
    fps: float = 30.0,
) -> MotionSequence:
    """Recover world joint trajectories from 147-dim frame vectors.

    ``predict`` mode treats every frame as future relative to the anchor
    frame (its ``v`` chains from the anchor). ``refine`` mode treats the
    first frame as the anchor (its ``v`` is ignored) and, when
    ``rectify_to`` supplies input-derived endpoint poses, rectifies the
    accumulated roots before applying them. Anchors default to identity,
    i.e. coordinates relative to the anchor palm pose.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
        raise ShapeMismatch(f"expected (F, {FRAME_DIM}) frames, got {frames.shape}")
    if mode not in ("predict", "refine"):
        raise ValueError(f"unknown recovery mode {mode!r}")
    if scale_left <= 0 or scale_right <= 0:
        raise DegenerateInput("hand scales must be positive")
    f = frames.shape[0]
    anchor_left = anchor_left or RigidTransform.identity()
    anchor_right = anchor_right or RigidTransform.identity()

    out = {}
    for side, block, scale, anchor, pslice in (
        ("left", VL, scale_left, anchor_left, PL),
        ("right", VR, scale_right, anchor_right, PR),
    ):
        vs = frame_rigid(frames, block)
        if mode == "refine":
            roots = [RigidTransform.identity()] + _accumulate_prefix(vs[1:])
            if rectify_to is not None:
                target = rectify_to[0] if side == "left" else rectify_to[1]
                roots = rectify_refinement(roots, target)
        else:
            roots = _accumulate_prefix(vs)
        points = frames[:, pslice].reshape(f, N_JOINTS, 3) * scale
        traj = np.empty_like(points)
        for i in range(f):
            traj[i] = anchor.compose(roots[i]).apply(points[i])
        out[side] = traj
    return MotionSequence(left=out["left"], right=out["right"], fps=fps)


def input_root_targets(frames: np.ndarray) -> tuple[RigidTransform, RigidTransform]:
    """Accumulated endpoint palm poses of a clip, from its own ``v`` blocks.

    Used as the rectification target when recovering a refined clip: the
    first frame's ``v`` relates it to the previous clip and is excluded.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise SequenceTooShort("need at least two frames to derive endpoint roots")
    left = accumulate_roots(frame_rigid(frames[1:], VL))
    right = accumulate_roots(frame_rigid(frames[1:], VR))
    return left, right


def pad_frames_to_clip(frames: np.ndarray, t: int) -> tuple[np.ndarray, int]:
    """Right-pad (F, 147) frames to a multiple of ``t``.

    Padding repeats the last frame with identity relative motions (the hand
    stays put); returns the padded array and the number of padded frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    f = frames.shape[0]
    pad = (-f) % t
    if pad == 0:
        return frames, 0
    tail = np.repeat(frames[-1:], pad, axis=0)
    tail[:, VL] = IDENTITY9
    tail[:, VR] = IDENTITY9
    return np.concatenate([frames, tail], axis=0), pad
