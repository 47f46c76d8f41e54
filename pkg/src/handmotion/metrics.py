"""Evaluation metrics: MPJPE variants, diversity (APD), and Frechet distance.

MPJPE removes hand-scale ambiguity by rescaling the estimate so its mean
palm-bone length matches the ground truth (one scalar per hand per
sequence), then aligning either the per-frame root or the full hand by a
rigid Procrustes fit.
"""

from __future__ import annotations

import warnings

import numpy as np

from .codec import HandTemplate, MotionSequence, palm_scale
from .errors import CovarianceIllConditioned, ShapeMismatch
from .transforms import umeyama_align

FID_SHRINKAGE = 1e-6


def _sequence_palm_scale(traj: np.ndarray, template: HandTemplate) -> float:
    return float(np.mean([palm_scale(traj[i], template) for i in range(traj.shape[0])]))


def _equalized(est: np.ndarray, gt: np.ndarray, template: HandTemplate) -> np.ndarray:
    factor = _sequence_palm_scale(gt, template) / _sequence_palm_scale(est, template)
    return est * factor


def mpjpe_ra(est: MotionSequence, gt: MotionSequence, template: HandTemplate) -> tuple[float, float]:
    """Root-aligned MPJPE (mm) per hand after palm-bone scale equalization.

    The estimate is rescaled once per hand, then translated per frame so the
    wrist coincides with the ground truth before averaging joint errors.
    """
    out = []
    for side in ("left", "right"):
        e, g = est.hand(side), gt.hand(side)
        if e.shape != g.shape:
            raise ShapeMismatch(f"{side}: {e.shape} vs {g.shape}")
        e = _equalized(e, g, template)
        e = e - e[:, :1] + g[:, :1]
        out.append(float(np.linalg.norm(e - g, axis=-1).mean()))
    return out[0], out[1]


def mpjpe_pa(est: MotionSequence, gt: MotionSequence, template: HandTemplate) -> tuple[float, float]:
    """Procrustes-aligned MPJPE (mm): per-frame rigid fit over all joints."""
    out = []
    for side in ("left", "right"):
        e, g = est.hand(side), gt.hand(side)
        if e.shape != g.shape:
            raise ShapeMismatch(f"{side}: {e.shape} vs {g.shape}")
        e = _equalized(e, g, template)
        errs = []
        for i in range(e.shape[0]):
            fit = umeyama_align(e[i], g[i])
            errs.append(np.linalg.norm(fit.apply(e[i]) - g[i], axis=-1).mean())
        out.append(float(np.mean(errs)))
    return out[0], out[1]


def apd(samples) -> float:
    """Average pairwise distance of K generated trajectories (F, N, 3).

    Sum over frames and joints of the Euclidean gap, averaged over ordered
    pairs: (1 / (K (K-1))) * sum_{a != b} dist(h_a, h_b).
    """
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    k = len(arrs)
    if k < 2:
        raise ShapeMismatch("APD needs at least two samples")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ShapeMismatch("APD samples must share one shape")
    stack = np.stack(arrs)
    total = 0.0
    for a in range(k):
        for b in range(k):
            if a != b:
                total += np.linalg.norm(stack[a] - stack[b], axis=-1).sum()
    return float(total / (k * (k - 1)))


def apd_hands(samples: list[MotionSequence]) -> tuple[float, float]:
    return apd([s.left for s in samples]), apd([s.right for s in samples])


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -1e-6 * max(abs(vals).max(), 1.0):
        raise CovarianceIllConditioned(f"matrix has negative eigenvalue {vals.min():.3e}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (n, d).

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root evaluated on the symmetrized product sqrt(S_a) S_b sqrt(S_a).
    Sample-starved or rank-deficient covariances are shrunk by 1e-6 * I with
    a warning.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature sets disagree: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ShapeMismatch("need at least 2 samples per set")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    for name, n, cov in (("first", a.shape[0], cov_a), ("second", b.shape[0], cov_b)):
        if n < d + 1 or np.linalg.eigvalsh((cov + cov.T) / 2.0).min() < FID_SHRINKAGE:
            warnings.warn(
                f"{name} feature set ill-conditioned (n={n}, d={d}); applying {FID_SHRINKAGE} shrinkage",
                RuntimeWarning,
            )
            cov += FID_SHRINKAGE * np.eye(d)
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    gap = mu_a - mu_b
    return float(gap @ gap + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))


def action_accuracy(predictions, targets) -> float:
    """Top-1 exact-match fraction over action labels."""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ShapeMismatch(f"{predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise ShapeMismatch("empty prediction list")
    return float((predictions == targets).mean())
