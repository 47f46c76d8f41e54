"""Inference flows: pose refinement, action recognition, and motion prediction.

Two prediction paths exist. The pose-only path re-encodes its own output
autoregressively, one clip at a time. The action-guided path encodes the
whole observation, samples an action latent, decodes future mid-level
features, and expands each into poses; its first generated frame sits one
clip after the observation (the intervening clip is not generated), so
recovered trajectories are anchored at the last observed palm pose.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .codec import (
    FRAME_DIM,
    EncodedMotion,
    HandTemplate,
    MotionSequence,
    encode_sequence,
    input_root_targets,
    pad_frames_to_clip,
    recover_trajectory,
)
from .dataset import segment_for_eval
from .errors import SequenceTooShort, ShapeMismatch, SplitLeak
from .metrics import action_accuracy, apd_hands, fid, mpjpe_pa, mpjpe_ra
from .nets import (
    ActionBlock,
    ModelConfig,
    ObjectAggregator,
    PoseBlock,
    SequenceClassifier,
    frames_from_model_units,
    frames_to_model_units,
    reparameterize,
)
from .taxonomy import Taxonomy, classify
from .training import AugmentParams, augment_hand_frames


@dataclass
class RefineOutput:
    motion: MotionSequence
    midlevels: np.ndarray       # (n_clips, d) encoder means
    n_clips: int
    padded_frames: int


@dataclass
class Prediction:
    samples: list                   # MotionSequence per sample
    frames: np.ndarray              # (S, L, 147) codec-unit frame vectors
    first_frame_index: int          # 1-based index relative to the observation start


def refine_encoded(block: PoseBlock, encoded: EncodedMotion, config: ModelConfig) -> RefineOutput:
    """Refine an already-encoded input stream clip by clip.

    Each clip is denoised by the encoder; its trajectory is recovered
    relative to the clip's first input pose and rectified so the clip
    endpoint matches the input-derived global pose.
    """
    t = config.t
    padded, pad = pad_frames_to_clip(encoded.frames, t)
    clips = padded.reshape(-1, t, FRAME_DIM)
    n = clips.shape[0]
    with torch.no_grad():
        refined_net, dist, _ = block.encode(frames_to_model_units(clips, config))
    refined = frames_from_model_units(refined_net, config)

    left_parts, right_parts = [], []
    for c in range(n):
        first = c * t
        targets = input_root_targets(clips[c])
        rec = recover_trajectory(
            refined[c], encoded.scale_left, encoded.scale_right, mode="refine",
            anchor_left=encoded.anchor("left", first),
            anchor_right=encoded.anchor("right", first),
            rectify_to=targets, fps=encoded.fps,
        )
        left_parts.append(rec.left)
        right_parts.append(rec.right)
    f = encoded.n_frames
    motion = MotionSequence(
        left=np.concatenate(left_parts)[:f], right=np.concatenate(right_parts)[:f],
        fps=encoded.fps,
    )
    return RefineOutput(motion=motion, midlevels=dist.mu.numpy().copy(), n_clips=n,
                        padded_frames=pad)


def refine(block: PoseBlock, motion: MotionSequence, template: HandTemplate,
           config: ModelConfig) -> RefineOutput:
    if motion.n_frames > config.max_frames:
        raise SequenceTooShort(
            f"observation of {motion.n_frames} frames exceeds max_frames={config.max_frames}"
        )
    return refine_encoded(block, encode_sequence(motion, template), config)


def recognize(block: ActionBlock, taxonomy: Taxonomy, midlevels: np.ndarray,
              omegas: np.ndarray, phase_offset: int = 1):
    """Classify an observation from its clip features; deterministic (mean mode)."""
    midlevels = np.asarray(midlevels, dtype=np.float32)
    omegas = np.asarray(omegas, dtype=np.float32)
    if midlevels.shape != omegas.shape:
        raise ShapeMismatch(f"midlevels {midlevels.shape} vs omegas {omegas.shape}")
    n = midlevels.shape[0]
    positions = torch.arange(phase_offset, phase_offset + n)[None]
    with torch.no_grad():
        dist, _, _ = block.encode(torch.from_numpy(midlevels)[None],
                                  torch.from_numpy(omegas)[None], positions)
        candidates = block.label_head(
            torch.from_numpy(taxonomy.action_embeddings.astype(np.float32))
        ).numpy()
    mu = dist.mu[0].numpy().copy()
    label, probs = classify(mu, candidates)
    return label, mu, probs


def clip_midlevels(block: PoseBlock, encoded: EncodedMotion, config: ModelConfig) -> np.ndarray:
    """Encoder means per non-overlapping clip of an input stream, (n, d)."""
    padded, _ = pad_frames_to_clip(encoded.frames, config.t)
    clips = padded.reshape(-1, config.t, FRAME_DIM)
    with torch.no_grad():
        _, dist, _ = block.encode(frames_to_model_units(clips, config))
    return dist.mu.numpy().copy()


def predict_pose_only(block: PoseBlock, encoded: EncodedMotion, config: ModelConfig,
                      steps: int, n_samples: int = 1, variance_scale: float = 5.0,
                      seed: int = 0) -> Prediction:
    """Autoregressive clip-by-clip prediction using only the pose block."""
    t = config.t
    if encoded.n_frames < t:
        raise SequenceTooShort(f"need at least {t} observed frames")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    last = encoded.frames[encoded.n_frames - t:]
    cur = frames_to_model_units(last, config)[None].repeat(n_samples, 1, 1)
    chunks = []
    with torch.no_grad():
        for _ in range(steps):
            _, dist, tokens = block.encode(cur)
            mid = reparameterize(dist, generator=gen,
                                 mode="sample" if variance_scale > 0 else "mean",
                                 variance_scale=variance_scale)
            pred = block.decode(mid, tokens if config.decoder_skip else None)
            chunks.append(pred)
            cur = pred
    frames = frames_from_model_units(torch.cat(chunks, dim=1), config)
    samples = [
        recover_trajectory(
            frames[s], encoded.scale_left, encoded.scale_right, mode="predict",
            anchor_left=encoded.anchor("left", encoded.n_frames - 1),
            anchor_right=encoded.anchor("right", encoded.n_frames - 1),
            fps=encoded.fps,
        )
        for s in range(n_samples)
    ]
    return Prediction(samples=samples, frames=frames,
                      first_frame_index=encoded.n_frames + 1)


def predict_action_guided(pose_block: PoseBlock, action_block: ActionBlock,
                          encoded: EncodedMotion, omegas: np.ndarray, config: ModelConfig,
                          n_future_clips: int, n_samples: int = 20,
                          variance_scale: float = 5.0, seed: int = 0,
                          phase_offset: int = 1,
                          alpha_center: np.ndarray | None = None) -> Prediction:
    """Long-term prediction through the action block (paths up the hierarchy).

    Decodes mid-level features for the clips after the observation and
    expands each with the pose decoder (no skip memory is available for
    future clips). ``alpha_center`` overrides the latent mean, which is how
    label-shuffled baselines are produced.
    """
    if not 1 <= n_future_clips <= config.nbar_max:
        raise ValueError(f"n_future_clips must be in [1, {config.nbar_max}]")
    t = config.t
    mids = clip_midlevels(pose_block, encoded, config)
    n = mids.shape[0]
    omegas = np.asarray(omegas, dtype=np.float32)
    if omegas.shape != mids.shape:
        raise ShapeMismatch(f"omegas {omegas.shape} vs midlevels {mids.shape}")
    gen = torch.Generator().manual_seed(seed)
    positions = torch.arange(phase_offset, phase_offset + n)[None]
    with torch.no_grad():
        dist, eta, _ = action_block.encode(torch.from_numpy(mids)[None],
                                           torch.from_numpy(omegas)[None], positions)
        mu = dist.mu if alpha_center is None else torch.from_numpy(
            np.asarray(alpha_center, dtype=np.float32))[None]
        centered = type(dist)(mu.expand(n_samples, -1), dist.logvar.expand(n_samples, -1))
        alpha = reparameterize(centered, generator=gen,
                               mode="sample" if variance_scale > 0 else "mean",
                               variance_scale=variance_scale)
        qpos = torch.arange(phase_offset + n, phase_offset + n + n_future_clips)[None]
        context = eta.expand(n_samples, -1, -1) if config.decoder_context else None
        mid_future = action_block.decode(alpha, qpos.expand(n_samples, -1), context)
        pred = pose_block.decode(mid_future.reshape(-1, config.d), None)
    frames = frames_from_model_units(
        pred.reshape(n_samples, n_future_clips * t, FRAME_DIM), config
    )
    samples = [
        recover_trajectory(
            frames[s], encoded.scale_left, encoded.scale_right, mode="predict",
            anchor_left=encoded.anchor("left", encoded.n_frames - 1),
            anchor_right=encoded.anchor("right", encoded.n_frames - 1),
            fps=encoded.fps,
        )
        for s in range(n_samples)
    ]
    return Prediction(samples=samples, frames=frames,
                      first_frame_index=encoded.n_frames + t + 1)


def aggregate_object_stream(epo: ObjectAggregator | None, taxonomy: Taxonomy, noun: int,
                            n_clips: int, config: ModelConfig, rng: np.random.Generator,
                            noise_std: float) -> np.ndarray:
    """Clip-wise object features from a synthetic per-frame embedding stream.

    Without a trained aggregator the clean noun embedding is used directly.
    """
    base = taxonomy.object_embeddings[noun].astype(np.float32)
    if epo is None:
        return np.repeat(base[None], n_clips, axis=0)
    feats = base[None, None] + rng.normal(0.0, noise_std,
                                          size=(n_clips, config.t, base.shape[0]))
    with torch.no_grad():
        omega = epo(torch.from_numpy(feats.astype(np.float32)))
    return omega.numpy().copy()


def _check_split(sequences, train_ids) -> None:
    if train_ids is None:
        return
    leak = {s.seq_id for s in sequences} & set(train_ids)
    if leak:
        raise SplitLeak(f"evaluation ids seen in training: {sorted(leak)[:5]}")


def evaluate_recognition(sequences, pose_block: PoseBlock, action_block: ActionBlock,
                         taxonomy: Taxonomy, template: HandTemplate, config: ModelConfig,
                         epo: ObjectAggregator | None = None,
                         noise: AugmentParams | None = None, seed: int = 0,
                         split: str = "val", train_ids=None,
                         obj_noise_std: float = 0.01) -> dict:
    """Pose refinement + action recognition over a split; returns the report."""
    _check_split(sequences, train_ids)
    rng = np.random.default_rng(seed)
    ra, pa, preds, gts = [], [], [], []
    windows = 0
    for seq in sequences:
        enc = encode_sequence(seq, template)
        if noise is not None:
            enc.frames = augment_hand_frames(enc.frames, noise, rng)
        out = refine_encoded(pose_block, enc, config)
        ra.append(mpjpe_ra(out.motion, seq, template))
        pa.append(mpjpe_pa(out.motion, seq, template))
        omegas = aggregate_object_stream(epo, taxonomy, seq.noun, out.n_clips, config,
                                         rng, obj_noise_std)
        label, _, _ = recognize(action_block, taxonomy, out.midlevels, omegas)
        preds.append(label)
        gts.append(seq.action)
        windows += seq.n_frames // config.t
    ra = np.array(ra)
    pa = np.array(pa)
    return {
        "task": "recognition",
        "split": split,
        "mpjpe_ra": [float(ra[:, 0].mean()), float(ra[:, 1].mean())],
        "mpjpe_pa": [float(pa[:, 0].mean()), float(pa[:, 1].mean())],
        "accuracy": action_accuracy(preds, gts),
        "n_samples": len(sequences),
        "observation_windows": windows,
        "seed": seed,
    }


def _slice_motion(seq: MotionSequence, start: int, end: int) -> MotionSequence:
    return MotionSequence(left=seq.left[start:end], right=seq.right[start:end], fps=seq.fps,
                          verb=seq.verb, noun=seq.noun, action=seq.action, seq_id=seq.seq_id)


def sequence_features(fid_net: SequenceClassifier, frame_sets: list, config: ModelConfig,
                      batch_size: int = 64) -> np.ndarray:
    """Sequence-net features for a list of (F_i, 147) codec frame arrays."""
    feats = []
    for i in range(0, len(frame_sets), batch_size):
        chunk = [frames_to_model_units(f[:config.max_frames], config) for f in frame_sets[i:i + batch_size]]
        width = max(c.shape[0] for c in chunk)
        x = torch.zeros(len(chunk), width, FRAME_DIM)
        mask = torch.ones(len(chunk), width, dtype=torch.bool)
        for j, c in enumerate(chunk):
            x[j, :c.shape[0]] = c
            x[j, c.shape[0]:] = c[-1]
            mask[j, :c.shape[0]] = False
        with torch.no_grad():
            feats.append(fid_net(x, mask).numpy().copy())
    return np.concatenate(feats)


def evaluate_prediction(sequences, pose_block: PoseBlock, action_block: ActionBlock,
                        fid_net: SequenceClassifier, taxonomy: Taxonomy,
                        template: HandTemplate, config: ModelConfig,
                        n_samples: int = 20, variance_scale: float = 5.0, seed: int = 0,
                        horizon_max: int = 96, windows: str = "first",
                        include_shuffled: bool = True, split: str = "val",
                        train_ids=None, workers: int = 1) -> dict:
    """Compare prediction paths with FID/APD over a split.

    For each observation window the first future clip is taken from GT (the
    paper's long-term separation): the pose-only path autoregresses from it,
    the action-guided path decodes the clips after it. Sequence features
    concatenate GT frames through that clip with each path's output.
    """
    _check_split(sequences, train_ids)
    t = config.t
    usable = [s for s in sequences if s.n_frames >= 2 * t]
    if not usable:
        raise SequenceTooShort(f"no evaluation sequence has at least {2 * t} frames")

    rng = np.random.default_rng(seed)
    shuffle_map = rng.permutation(taxonomy.n_actions)
    for i in range(taxonomy.n_actions):      # force a derangement
        if shuffle_map[i] == i:
            shuffle_map[i] = (i + 1) % taxonomy.n_actions

    segments = []
    for seq in usable:
        segs = segment_for_eval(seq.n_frames, t, horizon_max)
        if windows == "first":
            segs = segs[:1]
        for w, (obs_start, obs_end, target_end) in enumerate(segs):
            if obs_end + t > seq.n_frames:
                continue  # GT gap clip incomplete; long-term comparison undefined
            segments.append((seq, obs_start // t, obs_start, obs_end, target_end))

    emb = taxonomy.action_embeddings.astype(np.float32)
    with torch.no_grad():
        mapped = action_block.label_head(torch.from_numpy(emb)).numpy()

    def run_segment(item):
        idx, (seq, w, obs_start, obs_end, target_end) = item
        seg_seed = seed * 100003 + idx
        seg_rng = np.random.default_rng(seg_seed)
        nbar = max(1, -(-(target_end - obs_end - t) // t))
        nbar = min(nbar, config.nbar_max)
        obs = _slice_motion(seq, obs_start, obs_end)
        enc_obs = encode_sequence(obs, template)
        gap = _slice_motion(seq, obs_start, obs_end + t)
        enc_gap = encode_sequence(gap, template)
        omegas = np.repeat(taxonomy.object_embeddings[seq.noun][None].astype(np.float32),
                           enc_obs.n_frames // t, axis=0)

        pb = predict_action_guided(pose_block, action_block, enc_obs, omegas, config,
                                   nbar, n_samples, variance_scale, seg_seed,
                                   phase_offset=w + 1)
        pa = predict_pose_only(pose_block, enc_gap, config, nbar, n_samples,
                               variance_scale, seg_seed)
        out = {"pb": pb, "pa": pa, "gap_frames": enc_gap.frames,
               "apd": apd_hands(pb.samples)}
        if include_shuffled:
            wrong = int(shuffle_map[seq.action])
            wrong_omegas = np.repeat(
                taxonomy.object_embeddings[taxonomy.actions[wrong][1]][None].astype(np.float32),
                enc_obs.n_frames // t, axis=0)
            out["pb_shuffled"] = predict_action_guided(
                pose_block, action_block, enc_obs, wrong_omegas, config, nbar,
                n_samples, variance_scale, seg_seed, phase_offset=w + 1,
                alpha_center=mapped[wrong])
        return out

    items = list(enumerate(segments))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_segment, items))
    else:
        results = [run_segment(it) for it in items]

    def collect(key):
        sets = []
        for res in results:
            prefix = res["gap_frames"]
            for s in range(res[key].frames.shape[0]):
                sets.append(np.concatenate([prefix, res[key].frames[s]]))
        return sets

    ref_feats = sequence_features(
        fid_net, [encode_sequence(_slice_motion(s, 0, min(s.n_frames, 2 * t + horizon_max)),
                                  template).frames for s in usable], config)
    report = {
        "task": "prediction",
        "split": split,
        "fid": fid(sequence_features(fid_net, collect("pb"), config), ref_feats),
        "fid_pa": fid(sequence_features(fid_net, collect("pa"), config), ref_feats),
        "apd": [float(np.mean([r["apd"][0] for r in results])),
                float(np.mean([r["apd"][1] for r in results]))],
        "apd_min": float(min(min(r["apd"]) for r in results)),
        "n_samples": n_samples,
        "n_segments": len(segments),
        "variance_scale": variance_scale,
        "seed": seed,
    }
    if include_shuffled:
        report["fid_shuffled"] = fid(
            sequence_features(fid_net, collect("pb_shuffled"), config), ref_feats)
    return report
