"""Synthetic two-hand action data, JSONL persistence, and split management.

Each verb is a parametric motion primitive (oscillatory wrist rotation,
lateral shift, rocking wave, approach-grasp-pull, lift, hold-still) with
per-record randomized amplitude/frequency/duration; the noun modulates a
deterministic offset posture. Motions are designed to be separable from
joint-velocity statistics on purpose: downstream learnability checks need a
clean signal, not realism.
"""

from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import (
    FINGER_CHAINS,
    N_JOINTS,
    HandTemplate,
    MotionSequence,
    default_template,
)
from .errors import ConfigInvalid, ParseError, SchemaError, SequenceTooShort, SplitLeak
from .taxonomy import Taxonomy, build_taxonomy
from .transforms import rotation_about_axis

DEFAULT_VERBS = ("screw", "shift", "wave", "grasp", "lift", "hold")
DEFAULT_NOUNS = ("bolt", "plate", "tube")


@dataclass(frozen=True)
class GeneratorConfig:
    n_records: int = 360
    fps: float = 30.0
    min_frames: int = 32
    max_frames: int = 128
    fixed_frames: int | None = None
    verbs: tuple = DEFAULT_VERBS
    nouns: tuple = DEFAULT_NOUNS
    val_fraction: float = 0.2
    d_text: int = 64
    taxonomy_seed: int = 7

    def __post_init__(self):
        if self.n_records < 1 or self.min_frames < 2 or self.max_frames < self.min_frames:
            raise ConfigInvalid("bad record count or frame range")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigInvalid("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        data = dict(data)
        for key in ("verbs", "nouns"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _articulate(template_joints: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Bend fingers by per-finger angles (F, 5) via chain FK on the template."""
    f = angles.shape[0]
    out = np.repeat(template_joints[None], f, axis=0)
    normal = np.array([0.0, 0.0, 1.0])
    for fi, chain in enumerate(FINGER_CHAINS.values()):
        direction = template_joints[chain[1]] - template_joints[chain[0]]
        axis = np.cross(normal, direction)
        axis /= np.linalg.norm(axis)
        rot = rotation_about_axis(np.broadcast_to(axis, (f, 3)), angles[:, fi])
        for s in range(len(chain) - 1):
            pivot = out[:, chain[s]][:, None, :]
            rest = list(chain[s + 1:])
            out[:, rest] = np.einsum("fij,fnj->fni", rot, out[:, rest] - pivot) + pivot
    return out


def _verb_curves(verb: str, n_frames: int, fps: float, rng: np.random.Generator):
    """Rotation (F,3,3), translation (F,3) mm, and curl drive (F,) for one hand."""
    tau = np.arange(n_frames) / fps
    u = np.arange(n_frames) / max(n_frames - 1, 1)
    eye = np.broadcast_to(np.eye(3), (n_frames, 3, 3)).copy()
    trans = np.zeros((n_frames, 3))
    phase = rng.uniform(0, 2 * np.pi)

    if verb == "screw":
        amp = rng.uniform(0.6, 1.0)
        freq = rng.uniform(0.6, 1.2)
        rot = rotation_about_axis(np.broadcast_to([0.0, 1.0, 0.0], (n_frames, 3)),
                                  amp * np.sin(2 * np.pi * freq * tau + phase))
        curl = 0.45 + 0.1 * np.sin(2 * np.pi * freq * tau + phase)
        return rot, trans, curl
    if verb == "shift":
        amp = rng.uniform(50.0, 90.0)
        freq = rng.uniform(0.3, 0.7)
        trans[:, 0] = amp * np.sin(2 * np.pi * freq * tau + phase)
        return eye, trans, np.full(n_frames, 0.35)
    if verb == "wave":
        amp_r = rng.uniform(0.4, 0.8)
        amp_z = rng.uniform(20.0, 40.0)
        freq = rng.uniform(0.8, 1.6)
        rot = rotation_about_axis(np.broadcast_to([1.0, 0.0, 0.0], (n_frames, 3)),
                                  amp_r * np.sin(2 * np.pi * freq * tau + phase))
        trans[:, 2] = amp_z * np.sin(2 * np.pi * freq * tau + phase + np.pi / 2)
        return rot, trans, np.full(n_frames, 0.25)
    if verb == "grasp":
        reach = rng.uniform(50.0, 80.0)
        pull = rng.uniform(60.0, 100.0)
        trans[:, 1] = -reach * (1.0 - _smoothstep(u / 0.4)) - pull * _smoothstep((u - 0.6) / 0.4)
        curl = 0.15 + 0.75 * _smoothstep((u - 0.3) / 0.3)
        return eye, trans, curl
    if verb == "lift":
        height = rng.uniform(80.0, 140.0)
        ramp = _smoothstep(u / 0.7)
        trans[:, 2] = height * ramp
        rot = rotation_about_axis(np.broadcast_to([1.0, 0.0, 0.0], (n_frames, 3)), 0.15 * ramp)
        return rot, trans, np.full(n_frames, 0.5)
    if verb == "hold":
        wobble = rng.uniform(1.0, 3.0)
        trans[:, 2] = wobble * np.sin(2 * np.pi * 0.5 * tau + phase)
        return eye, trans, np.full(n_frames, 0.45)
    raise ConfigInvalid(f"unknown verb primitive {verb!r}")


def _generate_record(
    verb_name: str,
    verb: int,
    noun: int,
    n_frames: int,
    fps: float,
    rng: np.random.Generator,
    template: HandTemplate,
) -> MotionSequence:
    finger_weights = 1.0 + 0.15 * np.sin(np.arange(5) + noun)
    base_curl = 0.1 + 0.2 * noun
    separation = 240.0 + 45.0 * noun + rng.uniform(-10.0, 10.0)

    hands = {}
    for side, sign, scale in (("right", 1.0, 1.0), ("left", -1.0, 0.6)):
        rot, trans, curl = _verb_curves(verb_name, n_frames, fps, rng)
        angles = (base_curl + scale * curl)[:, None] * finger_weights[None, :]
        local = _articulate(template.joints(side), angles)
        if side == "left":
            trans = trans * np.array([-1.0, 1.0, 1.0]) * scale
        trans = trans + np.array([sign * separation / 2.0, 0.0, 0.0])
        hands[side] = np.einsum("fij,fnj->fni", rot, local) + trans[:, None, :]

    # one random world placement per record, shared by both hands
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    world_rot = rotation_about_axis(axis, rng.uniform(0.0, 0.5))
    world_t = rng.uniform(-200.0, 200.0, size=3)
    for side in hands:
        hands[side] = hands[side] @ world_rot.T + world_t

    return MotionSequence(left=hands["left"], right=hands["right"], fps=fps,
                          verb=verb, noun=noun, action=None)


def verb_separability(sequences: list[MotionSequence], verbs: list[int]) -> float:
    """Nearest-centroid accuracy of verbs from raw joint-velocity statistics.

    Independent of any learned model; used as a generation-time sanity
    oracle that the verb primitives are distinguishable.
    """
    feats = []
    for seq in sequences:
        rows = []
        for hand in (seq.right, seq.left):
            d = np.diff(hand, axis=0)
            speed = np.linalg.norm(d, axis=-1)
            tip_ids = [3, 7, 11, 15, 19]
            spread = np.linalg.norm(hand[:, tip_ids] - hand[:, :1], axis=-1).mean(axis=1)
            rows.extend([
                speed.mean(),
                speed.mean(axis=1).std(),
                speed.std(axis=1).mean(),          # across-joint dispersion: rotation proxy
                np.abs(d[:, 0, 0]).mean(),         # wrist |dx|
                np.abs(d[:, 0, 1]).mean(),
                np.abs(d[:, 0, 2]).mean(),
                np.abs(np.diff(spread)).mean(),    # finger curl motion
                abs(hand[-1, 0, 2] - hand[0, 0, 2]),
                abs(hand[-1, 0, 1] - hand[0, 0, 1]),
            ])
        feats.append(rows)
    x = np.array(feats)
    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-9)
    y = np.array(verbs)
    centroids = np.stack([x[y == v].mean(axis=0) for v in np.unique(y)])
    pred = np.argmin(((x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    return float((np.unique(y)[pred] == y).mean())


def assign_splits(record_ids: list[str], actions: list[int], val_fraction: float) -> dict:
    """Deterministic stratified split: every k-th record of each action goes to val."""
    train, val = [], []
    if val_fraction <= 0:
        return {"train": list(record_ids), "val": []}
    period = max(int(round(1.0 / val_fraction)), 2)
    counters: dict[int, int] = {}
    for rid, action in zip(record_ids, actions):
        k = counters.get(action, 0)
        counters[action] = k + 1
        (val if k % period == period - 1 else train).append(rid)
    return {"train": train, "val": val}


def check_split_disjoint(manifest: dict) -> None:
    splits = manifest["splits"]
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            leak = set(splits[a]) & set(splits[b])
            if leak:
                raise SplitLeak(f"records in both '{a}' and '{b}': {sorted(leak)[:5]}")


def _record_to_json(seq: MotionSequence, rid: str) -> str:
    return json.dumps(
        {
            "id": rid,
            "fps": seq.fps,
            "verb": int(seq.verb),
            "noun": int(seq.noun),
            "left": np.round(seq.left, 3).tolist(),
            "right": np.round(seq.right, 3).tolist(),
        },
        separators=(",", ":"),
    )


def _open_maybe_gz(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def generate_synthetic(config: GeneratorConfig, seed: int, out_dir: str | Path) -> dict:
    """Write dataset.jsonl, taxonomy.json, and manifest.json; return the manifest.

    Output bytes are identical for identical (config, seed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taxonomy = build_taxonomy(config.verbs, config.nouns, d_text=config.d_text, seed=config.taxonomy_seed)
    template = default_template()

    n_actions = taxonomy.n_actions
    sequences, records = [], []
    data_path = out_dir / "dataset.jsonl"
    with _open_maybe_gz(data_path, "w") as fh:
        for idx in range(config.n_records):
            action = idx % n_actions
            verb, noun = action // len(config.nouns), action % len(config.nouns)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, idx])))
            n_frames = config.fixed_frames or int(rng.integers(config.min_frames, config.max_frames + 1))
            seq = _generate_record(config.verbs[verb], verb, noun, n_frames, config.fps, rng, template)
            seq.action = action
            rid = f"rec{idx:05d}"
            seq.seq_id = rid
            fh.write(_record_to_json(seq, rid) + "\n")
            sequences.append(seq)
            records.append(
                {"id": rid, "line": idx + 1, "frames": n_frames, "fps": config.fps,
                 "verb": verb, "noun": noun, "action": action}
            )

    manifest = {
        "records": records,
        "splits": assign_splits([r["id"] for r in records], [r["action"] for r in records],
                                config.val_fraction),
        "content_hash": hashlib.sha256(data_path.read_bytes()).hexdigest(),
        "generator": {
            "seed": seed,
            "config": config.to_dict(),
            "verb_separability": verb_separability(sequences, [s.verb for s in sequences]),
        },
        "files": {"data": data_path.name, "taxonomy": "taxonomy.json", "template": "template.json"},
    }
    check_split_disjoint(manifest)
    taxonomy.save(out_dir / "taxonomy.json")
    template.save(out_dir / "template.json")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _validate_record(rec: dict, line: int) -> MotionSequence:
    for key in ("id", "fps", "verb", "noun", "left", "right"):
        if key not in rec:
            raise SchemaError(key, f"missing on line {line}")
    hands = {}
    for key in ("left", "right"):
        arr = np.asarray(rec[key], dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise SchemaError(key, f"expected F x N x 3 nested arrays on line {line}")
        if arr.shape[1] != N_JOINTS:
            raise SchemaError("joints", f"expected {N_JOINTS} joints, got {arr.shape[1]} on line {line}")
        if not np.isfinite(arr).all():
            raise SchemaError(key, f"non-finite coordinates on line {line}")
        hands[key] = arr
    if hands["left"].shape[0] != hands["right"].shape[0]:
        raise SchemaError("frames", f"left/right frame counts differ on line {line}")
    if not (isinstance(rec["fps"], (int, float)) and rec["fps"] > 0):
        raise SchemaError("fps", f"must be a positive number on line {line}")
    verb, noun = int(rec["verb"]), int(rec["noun"])
    return MotionSequence(left=hands["left"], right=hands["right"], fps=float(rec["fps"]),
                          verb=verb, noun=noun, seq_id=str(rec["id"]))


def load_dataset(path: str | Path):
    """Load (sequences, manifest-or-None) from a dataset dir or JSONL file."""
    path = Path(path)
    manifest = None
    if path.is_dir():
        manifest_path = path / "manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            data_path = path / manifest["files"]["data"]
        else:
            data_path = path / "dataset.jsonl"
    else:
        data_path = path
        sibling = path.parent / "manifest.json"
        if sibling.exists():
            manifest = json.loads(sibling.read_text())

    sequences = []
    n_nouns = None
    if manifest is not None:
        n_nouns = len(manifest["generator"]["config"]["nouns"])
    with _open_maybe_gz(data_path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=line_no) from exc
            seq = _validate_record(rec, line_no)
            if n_nouns is not None:
                seq.action = seq.verb * n_nouns + seq.noun
            sequences.append(seq)
    return sequences, manifest


def save_dataset(sequences: list[MotionSequence], path: str | Path) -> str:
    """Write sequences as JSONL; returns the content hash."""
    path = Path(path)
    with _open_maybe_gz(path, "w") as fh:
        for i, seq in enumerate(sequences):
            rid = seq.seq_id or f"rec{i:05d}"
            fh.write(_record_to_json(seq, rid) + "\n")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def split_sequences(sequences: list[MotionSequence], manifest: dict, split: str) -> list[MotionSequence]:
    wanted = set(manifest["splits"][split])
    return [s for s in sequences if s.seq_id in wanted]


def segment_for_eval(n_frames: int, t: int = 16, horizon_max: int = 96) -> list[tuple[int, int, int]]:
    """Non-overlapping t-frame observation windows with a nonempty future.

    Returns (obs_start, obs_end, target_end) as 0-based half-open indices;
    the prediction target runs from obs_end to at most horizon_max frames
    beyond it, clipped at the sequence end.
    """
    if n_frames < 2 * t:
        raise SequenceTooShort(f"need at least {2 * t} frames, got {n_frames}")
    segments = []
    for start in range(0, n_frames - t + 1, t):
        obs_end = start + t
        target_end = min(n_frames, obs_end + horizon_max)
        if target_end > obs_end:
            segments.append((start, obs_end, target_end))
    return segments
