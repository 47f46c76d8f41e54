"""Two-stage decoupled training plus the two auxiliary encoders.

Stage 1 fits the pose block on 2t-frame windows sampled across action
boundaries; stage 2 freezes it, precomputes per-clip mid-level features,
and fits the action block on observed/predicted splits of whole sequences.
The object aggregator and the sequence feature net are trained separately
with the embedding-classification loss.
"""

from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import PL, PR, REL, VL, VR, pad_frames_to_clip
from .errors import (
    ClipMisaligned,
    DataEmpty,
    DimensionMismatch,
    NonFiniteLoss,
    SequenceTooShort,
)
from .losses import (
    LossWeights,
    loss_comp,
    loss_embed_classify,
    loss_kl,
    loss_mid,
    loss_trj,
    total_action_loss,
    total_pose_loss,
)
from .nets import (
    ActionBlock,
    ModelConfig,
    ObjectAggregator,
    PoseBlock,
    SequenceClassifier,
    frames_to_model_units,
    init_action_block,
    init_object_aggregator,
    init_pose_block,
    init_sequence_classifier,
    parameter_count,
    reparameterize,
)
from .transforms import matrix_to_rot6d, rot6d_to_matrix, rotation_about_axis


@dataclass(frozen=True)
class AugmentParams:
    """Gaussian input-noise magnitudes; the N(0, x) values are std devs."""

    p_noise_std: float = 0.025          # normalized template-space units
    v_rot_angle_std_deg: float = 1.25
    v_trans_std_mm: float = 7.5
    r_rot_angle_std_deg: float = 5.0
    r_trans_std_mm: float = 50.0
    mid_noise_std: float = 1.5
    obj_noise_std: float = 0.01

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("noise magnitudes must be non-negative")

    @classmethod
    def zeroed(cls) -> "AugmentParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pose"                 # pose | action | epo | fid
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 256
    epochs: int = 80                    # paper defaults: 80 pose / 200 action
    steps: int | None = None            # overrides epochs * windows/batch when set
    seed: int = 0
    grad_clip: float = 1.0
    skip_dropout: float = 0.5           # pose decoder trains both skip modes
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentParams = field(default_factory=AugmentParams)
    log_every: int = 10

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "loss_weights" in data and isinstance(data["loss_weights"], dict):
            data["loss_weights"] = LossWeights(**data["loss_weights"])
        if "augment" in data and isinstance(data["augment"], dict):
            data["augment"] = AugmentParams(**data["augment"])
        return cls(**data)


def _perturb_rigid_block(flat: np.ndarray, rot_std_deg: float, trans_std: float,
                         rng: np.random.Generator) -> None:
    """In-place noise on (M, 9) rigid blocks: random-axis rotation + translation."""
    m = flat.shape[0]
    if rot_std_deg > 0:
        axis = rng.standard_normal((m, 3))
        axis /= np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-12)
        angle = rng.normal(0.0, np.deg2rad(rot_std_deg), size=m)
        delta = rotation_about_axis(axis, angle)
        flat[:, :6] = matrix_to_rot6d(delta @ rot6d_to_matrix(flat[:, :6]))
    if trans_std > 0:
        flat[:, 6:] += rng.normal(0.0, trans_std, size=(m, 3))


def augment_hand_frames(frames: np.ndarray, params: AugmentParams,
                        rng: np.random.Generator) -> np.ndarray:
    """Noise up codec-space frames (..., 147): p jitter plus rigid perturbations.

    Rotations are composed with a random-axis rotation whose angle is
    Gaussian; 6D blocks are re-derived so outputs stay valid frames. All-zero
    params return the input unchanged.
    """
    frames = np.array(frames, dtype=np.float64)
    lead = frames.shape[:-1]
    if params.p_noise_std > 0:
        frames[..., PL] += rng.normal(0.0, params.p_noise_std, size=lead + (60,))
        frames[..., PR] += rng.normal(0.0, params.p_noise_std, size=lead + (60,))
    for block, rot_std, trans_std in (
        (VL, params.v_rot_angle_std_deg, params.v_trans_std_mm),
        (VR, params.v_rot_angle_std_deg, params.v_trans_std_mm),
        (REL, params.r_rot_angle_std_deg, params.r_trans_std_mm),
    ):
        if rot_std > 0 or trans_std > 0:
            flat = frames[..., block].reshape(-1, 9)
            _perturb_rigid_block(flat, rot_std, trans_std, rng)
            frames[..., block] = flat.reshape(lead + (9,))
    return frames


def split_observed_predicted(n_total: int, rng: np.random.Generator,
                             n_max: int = 16, nbar_max: int = 16) -> tuple[int, int]:
    """Uniform cut of a clip sequence into observed / predicted counts."""
    if n_total < 2:
        raise SequenceTooShort(f"need at least 2 clips, got {n_total}")
    n = int(rng.integers(1, min(n_max, n_total - 1) + 1))
    nbar = int(rng.integers(1, min(nbar_max, n_total - n) + 1))
    return n, nbar


@dataclass
class PreparedSequence:
    """Codec-encoded sequence ready for batching."""

    seq_id: str
    frames: np.ndarray          # (F, 147) codec units (mm translations)
    verb: int | None
    noun: int | None
    action: int | None
    fps: float
    scale_left: float
    scale_right: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def prepare_sequences(sequences, template) -> list[PreparedSequence]:
    from .codec import encode_sequence

    out = []
    for seq in sequences:
        enc = encode_sequence(seq, template)
        out.append(
            PreparedSequence(
                seq_id=seq.seq_id or "", frames=enc.frames, verb=seq.verb, noun=seq.noun,
                action=seq.action, fps=seq.fps, scale_left=enc.scale_left,
                scale_right=enc.scale_right,
            )
        )
    return out


@dataclass
class TrainResult:
    model: torch.nn.Module
    manifest: dict
    trace: list


def _git_hash() -> str:
    try:
        return subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, check=True
        ).stdout.strip()
    except Exception:
        return "unknown"


def _check_finite(value: torch.Tensor, step: int, parts: dict) -> None:
    if not torch.isfinite(value):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise NonFiniteLoss(f"non-finite loss at step {step}: {detail}")


def _manifest(stage: str, model, model_config: ModelConfig, train_config: TrainConfig,
              extra: dict) -> dict:
    return {
        "stage": stage,
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "seed": train_config.seed,
        "git_hash": _git_hash(),
        "parameter_count": parameter_count(model),
        **extra,
    }


def _num_steps(train_config: TrainConfig, n_items: int) -> int:
    if train_config.steps is not None:
        return train_config.steps
    per_epoch = max(1, -(-n_items // train_config.batch_size))
    return train_config.epochs * per_epoch


def train_pose_block(prepared: list[PreparedSequence], model_config: ModelConfig,
                     train_config: TrainConfig) -> TrainResult:
    """Stage 1: fit the pose block on uniformly sampled 2t-frame windows."""
    t = model_config.t
    windows = [
        (si, s)
        for si, seq in enumerate(prepared)
        for s in range(seq.n_frames - 2 * t + 1)
    ]
    if not windows:
        raise DataEmpty(f"no sequence provides a {2 * t}-frame window")

    rng = np.random.default_rng(train_config.seed)
    torch.manual_seed(train_config.seed)
    block = init_pose_block(model_config, train_config.seed)
    block.train()
    opt = torch.optim.AdamW(block.parameters(), lr=train_config.lr,
                            weight_decay=train_config.weight_decay)
    steps = _num_steps(train_config, len(windows))
    use_skip = model_config.decoder_skip

    trace = []
    for step in range(steps):
        picks = rng.integers(0, len(windows), size=min(train_config.batch_size, len(windows)))
        batch = np.stack([prepared[windows[i][0]].frames[windows[i][1]:windows[i][1] + 2 * t]
                          for i in picks])
        noisy = augment_hand_frames(batch[:, :t], train_config.augment, rng)
        skip_on = use_skip and rng.random() >= train_config.skip_dropout
        x = frames_to_model_units(noisy, model_config)
        gt = frames_to_model_units(batch, model_config)

        refined, dist, tokens = block.encode(x)
        mid = reparameterize(dist, mode="sample")
        pred = block.decode(mid, tokens if skip_on else None)
        l_comp = loss_comp(torch.cat([refined, pred], dim=1), gt)
        l_trj = loss_trj(pred, gt[:, t:])
        l_kl = loss_kl(dist.mu, dist.logvar)
        loss = total_pose_loss(l_comp, l_trj, l_kl, train_config.loss_weights)
        _check_finite(loss, step, {"comp": l_comp, "trj": l_trj, "kl": l_kl})

        opt.zero_grad()
        loss.backward()
        if train_config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(block.parameters(), train_config.grad_clip)
        opt.step()
        trace.append({"step": step, "loss": loss.item(), "comp": l_comp.item(),
                      "trj": l_trj.item(), "kl": l_kl.item()})

    block.eval()
    manifest = _manifest("pose", block, model_config, train_config,
                         {"n_windows": len(windows), "final_loss": trace[-1]["loss"]})
    return TrainResult(block, manifest, trace)


def clip_frames(frames: np.ndarray, t: int, pad: bool = True) -> np.ndarray:
    """(F, 147) -> (n_clips, t, 147), right-padding the tail clip."""
    if frames.shape[0] % t != 0 and not pad:
        raise ClipMisaligned(f"{frames.shape[0]} frames not divisible by t={t}")
    padded, _ = pad_frames_to_clip(frames, t)
    return padded.reshape(-1, t, frames.shape[1])


def precompute_midlevels(block: PoseBlock, prepared: list[PreparedSequence],
                         model_config: ModelConfig, batch_size: int = 256) -> dict:
    """Frozen-encoder mid-level means per non-overlapping clip.

    Returns {(seq_id, clip_index): (d,) float32 array}.
    """
    block.eval()
    keys, clips = [], []
    for seq in prepared:
        cl = clip_frames(seq.frames, model_config.t)
        for k in range(cl.shape[0]):
            keys.append((seq.seq_id, k))
            clips.append(cl[k])
    store = {}
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            x = frames_to_model_units(np.stack(clips[i:i + batch_size]), model_config)
            _, dist, _ = block.encode(x)
            for j, key in enumerate(keys[i:i + batch_size]):
                store[key] = dist.mu[j].numpy().copy()
    return store


def midlevel_matrix(store: dict, seq_id: str) -> np.ndarray:
    """Stack a sequence's stored mid-level features in clip order."""
    ks = sorted(k[1] for k in store if k[0] == seq_id)
    return np.stack([store[(seq_id, k)] for k in ks])


def _pad_batch(arrays: list[np.ndarray], width: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack (n_i, d) arrays into (B, width, d) plus a True-for-pad mask."""
    b, d = len(arrays), arrays[0].shape[1]
    out = torch.zeros(b, width, d)
    mask = torch.ones(b, width, dtype=torch.bool)
    for i, arr in enumerate(arrays):
        n = arr.shape[0]
        out[i, :n] = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
        mask[i, :n] = False
    return out, mask


def train_action_block(prepared: list[PreparedSequence], pose_block: PoseBlock,
                       taxonomy, model_config: ModelConfig,
                       train_config: TrainConfig) -> TrainResult:
    """Stage 2: freeze the pose block, fit the action block on mid-level splits."""
    if model_config.text_dim != model_config.d:
        raise DimensionMismatch("label-derived object features need d_text == d")
    store = precompute_midlevels(pose_block, prepared, model_config)
    usable = [p for p in prepared if -(-p.n_frames // model_config.t) >= 2]
    if not usable:
        raise DataEmpty("no sequence has at least 2 clips")
    mids = {p.seq_id: midlevel_matrix(store, p.seq_id) for p in usable}

    rng = np.random.default_rng(train_config.seed)
    torch.manual_seed(train_config.seed)
    block = init_action_block(model_config, train_config.seed)
    block.train()
    opt = torch.optim.AdamW(block.parameters(), lr=train_config.lr,
                            weight_decay=train_config.weight_decay)
    action_emb = torch.from_numpy(taxonomy.action_embeddings.astype(np.float32))
    object_emb = taxonomy.object_embeddings.astype(np.float32)
    steps = _num_steps(train_config, len(usable))

    trace = []
    for step in range(steps):
        picks = rng.integers(0, len(usable), size=min(train_config.batch_size, len(usable)))
        obs, oms, targets, obs_pos, q_pos, actions = [], [], [], [], [], []
        for i in picks:
            seq = usable[i]
            m = mids[seq.seq_id]
            n, nbar = split_observed_predicted(
                m.shape[0], rng, model_config.n_max, model_config.nbar_max
            )
            noised = m[:n] + rng.normal(0.0, train_config.augment.mid_noise_std,
                                        size=(n, m.shape[1]))
            obs.append(noised)
            oms.append(np.repeat(object_emb[seq.noun][None], n, axis=0))
            targets.append(m[n:n + nbar])
            obs_pos.append(np.arange(1, n + 1))
            q_pos.append(np.arange(n + 1, n + nbar + 1))
            actions.append(seq.action)

        n_w = max(a.shape[0] for a in obs)
        q_w = max(a.shape[0] for a in targets)
        mids_t, obs_mask = _pad_batch(obs, n_w)
        omegas_t, _ = _pad_batch(oms, n_w)
        target_t, q_mask = _pad_batch(targets, q_w)
        pos_t = torch.ones(len(picks), n_w, dtype=torch.long)
        qpos_t = torch.ones(len(picks), q_w, dtype=torch.long)
        for i, (op, qp) in enumerate(zip(obs_pos, q_pos)):
            pos_t[i, :len(op)] = torch.from_numpy(op)
            qpos_t[i, :len(qp)] = torch.from_numpy(qp)

        dist, eta, eta_mask = block.encode(mids_t, omegas_t, pos_t, obs_mask)
        alpha = reparameterize(dist, mode="sample")
        context = eta if model_config.decoder_context else None
        pred = block.decode(alpha, qpos_t, context, eta_mask if context is not None else None)

        l_mid = loss_mid(pred, target_t, mask=q_mask)
        l_act = loss_embed_classify(alpha, block.label_head(action_emb),
                                    torch.tensor(actions))
        l_kl = loss_kl(dist.mu, dist.logvar)
        loss = total_action_loss(l_mid, l_act, l_kl, train_config.loss_weights)
        _check_finite(loss, step, {"mid": l_mid, "action": l_act, "kl": l_kl})

        opt.zero_grad()
        loss.backward()
        if train_config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(block.parameters(), train_config.grad_clip)
        opt.step()
        trace.append({"step": step, "loss": loss.item(), "mid": l_mid.item(),
                      "action": l_act.item(), "kl": l_kl.item()})

    block.eval()
    manifest = _manifest("action", block, model_config, train_config,
                         {"n_sequences": len(usable), "final_loss": trace[-1]["loss"]})
    return TrainResult(block, manifest, trace)


def train_object_aggregator(nouns: list[int], taxonomy, model_config: ModelConfig,
                            train_config: TrainConfig) -> TrainResult:
    """Fit the clip-wise object aggregator on noised per-frame label embeddings."""
    if model_config.text_dim != model_config.d:
        raise DimensionMismatch("object features need d_text == d")
    if not nouns:
        raise DataEmpty("no nouns to train on")
    rng = np.random.default_rng(train_config.seed)
    torch.manual_seed(train_config.seed)
    model = init_object_aggregator(model_config, train_config.seed)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.lr,
                            weight_decay=train_config.weight_decay)
    object_emb = taxonomy.object_embeddings.astype(np.float32)
    emb_t = torch.from_numpy(object_emb)
    pool = np.array(sorted(set(nouns)))
    steps = _num_steps(train_config, len(nouns))

    trace = []
    for step in range(steps):
        picked = pool[rng.integers(0, len(pool), size=train_config.batch_size)]
        feats = object_emb[picked][:, None, :] + rng.normal(
            0.0, train_config.augment.obj_noise_std,
            size=(len(picked), model_config.t, model_config.d),
        )
        omega = model(torch.from_numpy(feats.astype(np.float32)))
        loss = loss_embed_classify(omega, emb_t, torch.from_numpy(picked))
        _check_finite(loss, step, {"obj": loss})
        opt.zero_grad()
        loss.backward()
        if train_config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
        opt.step()
        trace.append({"step": step, "loss": loss.item()})

    model.eval()
    with torch.no_grad():
        clean = object_emb[pool][:, None, :].repeat(model_config.t, axis=1)
        omega = model(torch.from_numpy(clean))
        cos = torch.nn.functional.normalize(omega, dim=-1) @ torch.nn.functional.normalize(emb_t, dim=-1).T
        acc = float((cos.argmax(dim=1).numpy() == pool).mean())
    manifest = _manifest("epo", model, model_config, train_config,
                         {"clean_accuracy": acc, "final_loss": trace[-1]["loss"]})
    return TrainResult(model, manifest, trace)


def train_fid_net(prepared: list[PreparedSequence], taxonomy, model_config: ModelConfig,
                  train_config: TrainConfig, train_ids: list[str] | None = None) -> TrainResult:
    """Fit the sequence feature net with the verb-level recognition loss."""
    if train_ids is not None:
        wanted = set(train_ids)
        prepared = [p for p in prepared if p.seq_id in wanted]
    if not prepared:
        raise DataEmpty("no training sequences for the feature net")
    rng = np.random.default_rng(train_config.seed)
    torch.manual_seed(train_config.seed)
    model = init_sequence_classifier(model_config, train_config.seed)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.lr,
                            weight_decay=train_config.weight_decay)
    verb_emb = torch.from_numpy(taxonomy.verb_embeddings.astype(np.float32))
    steps = _num_steps(train_config, len(prepared))
    cap = model_config.max_frames

    def batch_forward(seqs):
        frames = [frames_to_model_units(p.frames[:cap], model_config) for p in seqs]
        width = max(f.shape[0] for f in frames)
        x = torch.zeros(len(frames), width, frames[0].shape[1])
        mask = torch.ones(len(frames), width, dtype=torch.bool)
        for i, f in enumerate(frames):
            x[i, :f.shape[0]] = f
            x[i, f.shape[0]:] = f[-1]
            mask[i, :f.shape[0]] = False
        return model(x, mask)

    trace = []
    for step in range(steps):
        picks = rng.integers(0, len(prepared), size=min(train_config.batch_size, len(prepared)))
        seqs = [prepared[i] for i in picks]
        feat = batch_forward(seqs)
        loss = loss_embed_classify(feat, model.label_head(verb_emb),
                                   torch.tensor([p.verb for p in seqs]))
        _check_finite(loss, step, {"verb": loss})
        opt.zero_grad()
        loss.backward()
        if train_config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
        opt.step()
        trace.append({"step": step, "loss": loss.item()})

    model.eval()
    with torch.no_grad():
        correct = total = 0
        for i in range(0, len(prepared), 64):
            seqs = prepared[i:i + 64]
            feat = batch_forward(seqs)
            cand = torch.nn.functional.normalize(model.label_head(verb_emb), dim=-1)
            pred = (torch.nn.functional.normalize(feat, dim=-1) @ cand.T).argmax(dim=1)
            correct += int((pred.numpy() == np.array([p.verb for p in seqs])).sum())
            total += len(seqs)
    manifest = _manifest("fid", model, model_config, train_config, {
        "train_accuracy": correct / total,
        "train_id_hashes": sorted(
            __import__("hashlib").sha256(p.seq_id.encode()).hexdigest()[:12] for p in prepared
        ),
        "final_loss": trace[-1]["loss"],
    })
    return TrainResult(model, manifest, trace)


_STAGE_BUILDERS = {
    "pose": init_pose_block,
    "action": init_action_block,
    "epo": init_object_aggregator,
    "fid": init_sequence_classifier,
}


def save_checkpoint(result: TrainResult, stem: str | Path) -> tuple[Path, Path]:
    """Binary tensor blob (stem.pt) + JSON manifest (stem.json), atomically."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob, manifest = stem.with_suffix(".pt"), stem.with_suffix(".json")
    tmp = blob.with_suffix(".pt.tmp")
    torch.save(result.model.state_dict(), tmp)
    tmp.replace(blob)
    manifest.write_text(json.dumps(result.manifest, indent=1))
    return blob, manifest


def load_checkpoint(stem: str | Path):
    """Rebuild a model from its manifest + tensor blob; returns (model, manifest)."""
    stem = Path(stem)
    if stem.suffix in (".pt", ".json"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    config = ModelConfig.from_dict(manifest["model_config"])
    model = _STAGE_BUILDERS[manifest["stage"]](config, seed=0)
    model.load_state_dict(torch.load(stem.with_suffix(".pt"), weights_only=True))
    model.eval()
    return model, manifest


def write_trace(trace: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)
