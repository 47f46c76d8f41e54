"""Training objectives for the pose and action blocks.

All losses take model-unit tensors (frame translations already scaled to
O(1) by ``ModelConfig.translation_scale``) and return scalars averaged over
the batch. The trajectory loss re-accumulates global palm poses from the
relative motions with a torch implementation that is independent of the
float64 codec path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .codec import FRAME_DIM, VL, VR
from .errors import ShapeMismatch, ZeroVector
from .taxonomy import TEMPERATURE

PAPER_WEIGHTS = (1.0, 1.0, 1e-5, 1.0, 0.1, 1e-5)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = PAPER_WEIGHTS[0]   # frame components
    lambda2: float = PAPER_WEIGHTS[1]   # root trajectory
    lambda3: float = PAPER_WEIGHTS[2]   # pose KL
    lambda4: float = PAPER_WEIGHTS[3]   # mid-level
    lambda5: float = PAPER_WEIGHTS[4]   # action embedding
    lambda6: float = PAPER_WEIGHTS[5]   # action KL

    def __post_init__(self):
        if any(v < 0 for v in (self.lambda1, self.lambda2, self.lambda3,
                               self.lambda4, self.lambda5, self.lambda6)):
            raise ValueError("loss weights must be non-negative")


def rot6d_to_matrix_torch(v6: torch.Tensor) -> torch.Tensor:
    """Differentiable Gram-Schmidt decode of (..., 6) -> (..., 3, 3)."""
    a1, a2 = v6[..., :3], v6[..., 3:]
    b1 = torch.nn.functional.normalize(a1, dim=-1, eps=1e-9)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = torch.nn.functional.normalize(u2, dim=-1, eps=1e-9)
    b3 = torch.linalg.cross(b1, b2)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d_torch(m: torch.Tensor) -> torch.Tensor:
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def accumulate_roots_torch(v9: torch.Tensor) -> torch.Tensor:
    """Chain relative motions (B, t, 9) into accumulated poses (B, t, 9).

    Frame j accumulates v_1 ... v_j from the anchor; rotation composed as
    R_acc @ R_j, translation as R_acc t_j + t_acc.
    """
    rot = rot6d_to_matrix_torch(v9[..., :6])
    trans = v9[..., 6:]
    outs = []
    acc_r = rot[:, 0]
    acc_t = trans[:, 0]
    outs.append((acc_r, acc_t))
    for j in range(1, v9.shape[1]):
        acc_t = torch.einsum("bij,bj->bi", acc_r, trans[:, j]) + acc_t
        acc_r = acc_r @ rot[:, j]
        outs.append((acc_r, acc_t))
    return torch.stack(
        [torch.cat([matrix_to_rot6d_torch(r), t], dim=-1) for r, t in outs], dim=1
    )


def _check_frames(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape or pred.shape[-1] != FRAME_DIM:
        raise ShapeMismatch(f"frame tensors disagree: {tuple(pred.shape)} vs {tuple(target.shape)}")


def loss_comp(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the L1 norm of the 147-dim difference."""
    _check_frames(pred, target)
    return (pred - target).abs().sum(-1).mean()


def loss_trj(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over predicted frames of the L1 gap between accumulated palm poses.

    Both sides accumulate their own relative motions, so the loss is
    invariant to re-anchoring by any shared prefix transform.
    """
    _check_frames(pred, target)
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    total = 0.0
    for block in (VL, VR):
        s_pred = accumulate_roots_torch(pred[..., block])
        s_gt = accumulate_roots_torch(target[..., block])
        total = total + (s_pred - s_gt).abs().sum(-1).mean()
    return total


def loss_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dims, batch-averaged."""
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"mu {tuple(mu.shape)} vs logvar {tuple(logvar.shape)}")
    kl = 0.5 * (torch.exp(logvar) + mu * mu - 1.0 - logvar).sum(-1)
    return kl.mean()


def loss_embed_classify(
    feature: torch.Tensor,
    candidates: torch.Tensor,
    target: torch.Tensor | int,
    temperature: float = TEMPERATURE,
) -> torch.Tensor:
    """L1 pull toward the GT embedding plus a contrastive log-likelihood term.

    ``feature``: (B, d) or (d,); ``candidates``: (N, d); ``target``: GT
    indices. The probability term is a softmax over cosine similarities at
    the given temperature.
    """
    if feature.ndim == 1:
        feature = feature[None]
    target = torch.as_tensor(target, device=feature.device).reshape(-1)
    if candidates.ndim != 2 or candidates.shape[1] != feature.shape[1]:
        raise ShapeMismatch(f"candidates {tuple(candidates.shape)} vs feature {tuple(feature.shape)}")
    norms = feature.norm(dim=-1)
    if bool((norms < 1e-9).any()):
        raise ZeroVector("zero-norm feature in embed-classify loss")
    gt = candidates[target]
    l1 = (feature - gt).abs().sum(-1)
    f_hat = torch.nn.functional.normalize(feature, dim=-1, eps=1e-9)
    c_hat = torch.nn.functional.normalize(candidates, dim=-1, eps=1e-9)
    logits = (f_hat @ c_hat.T) / temperature
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(1, target[:, None]).squeeze(1)
    return (l1 + nll).mean()


def loss_mid(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over future clips of L1 differences between mid-level features."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mid-level tensors disagree: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    per_clip = (pred - target).abs().sum(-1)
    if mask is not None:
        per_clip = per_clip * (~mask).to(per_clip.dtype)
    return per_clip.sum(-1).mean()


def total_pose_loss(comp, trj, kl, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return weights.lambda1 * comp + weights.lambda2 * trj + weights.lambda3 * kl


def total_action_loss(mid, action, kl, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return weights.lambda4 * mid + weights.lambda5 * action + weights.lambda6 * kl
