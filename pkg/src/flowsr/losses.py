"""Sequence losses and evaluation metrics.

Reductions: losses reduce by *sum* over entries, metrics by *mean*; each
function documents its own convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from .motion import FlowSet, MaskSet, warp_bilinear
from .seqcore import VideoSequence

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class LossWeights:
    """Weights of the decoder fine-tuning objective and the structure factor."""

    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.025
    w: float = 3.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.w) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class StructureMap:
    """Sobel edge magnitude S in [0, 1] and the weighting map W = 1 + w*S."""

    S: np.ndarray
    W: np.ndarray


def _luminance(frame: np.ndarray) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected [H, W], [1, H, W] or [3, H, W], got {arr.shape}")
    if arr.shape[0] == 3:
        return 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]
    return arr[0]


def sobel_structure(frame: np.ndarray, w: float = 3.0) -> StructureMap:
    """Edge map from 3x3 Sobel responses, normalized by its own maximum.

    A uniform frame yields S = 0 everywhere (and W = 1).  Borders use
    reflect padding.
    """
    lum = _luminance(frame)
    gx = correlate2d(np.pad(lum, 1, mode="reflect"), _SOBEL_X, mode="valid")
    gy = correlate2d(np.pad(lum, 1, mode="reflect"), _SOBEL_Y, mode="valid")
    mag = np.sqrt(gx**2 + gy**2)
    peak = mag.max()
    # peaks at rounding-noise level mean a flat frame, not structure
    s = mag / peak if peak > 1e-9 else np.zeros_like(mag)
    return StructureMap(S=s[None], W=(1.0 + w * s)[None])


def frame_diff_loss(pred: VideoSequence, gt: VideoSequence) -> float:
    """Sum-L1 mismatch between consecutive-frame differences of pred and gt."""
    if pred.shape != gt.shape:
        raise ValueError(f"frame_diff_loss: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.n_frames < 2:
        raise ValueError("frame_diff_loss: need at least 2 frames")
    dp = np.diff(pred.data, axis=0)
    dg = np.diff(gt.data, axis=0)
    return float(np.abs(dp - dg).sum())


def swc_loss(
    pred: VideoSequence,
    gt_flows: FlowSet,
    masks: MaskSet,
    structure: list,
) -> float:
    """Structure-weighted, occlusion-masked warping consistency (sum reduction).

    For each adjacent pair (i, i+1) the prediction is warped across the pair
    in both directions with the ground-truth flows; each residual is weighted
    by the target frame's structure map W and masked by the pair's mask for
    that direction.  ``structure`` holds one :class:`StructureMap` per frame,
    computed on the ground-truth sequence.
    """
    n = pred.n_frames
    if gt_flows.n_pairs != n - 1 or masks.n_pairs != n - 1 or len(structure) != n:
        raise ValueError("swc_loss: flows/masks/structure counts do not match the sequence")
    total = 0.0
    for i in range(n - 1):
        to_next = warp_bilinear(pred.data[i], gt_flows.backward[i]) - pred.data[i + 1]
        total += np.abs(masks.backward[i].data * structure[i + 1].W * to_next).sum()
        to_prev = warp_bilinear(pred.data[i + 1], gt_flows.forward[i]) - pred.data[i]
        total += np.abs(masks.forward[i].data * structure[i].W * to_prev).sum()
    return float(total)


def total_video_loss(
    recon: float, diff: float, swc: float, gan: float, weights: LossWeights = LossWeights()
) -> float:
    for name, v in (("recon", recon), ("diff", diff), ("swc", swc), ("gan", gan)):
        if not np.isfinite(v):
            raise ValueError(f"total_video_loss: non-finite {name} component")
    return float(recon + weights.alpha * diff + weights.beta * swc + weights.gamma * gan)


def warping_error_metric(pred: VideoSequence, bwd_flows: FlowSet) -> float:
    """Mean per-entry L1 residual against the flow-warped previous frame.

    Averaged over the N-1 adjacent pairs and reported x1e4 per pixel-channel
    (frames live in [0, 1]).
    """
    n = pred.n_frames
    if n < 2:
        raise ValueError("warping_error_metric: need at least 2 frames")
    if bwd_flows.n_pairs != n - 1:
        raise ValueError("warping_error_metric: flow count does not match the sequence")
    total = 0.0
    for i in range(n - 1):
        warped = warp_bilinear(pred.data[i], bwd_flows.backward[i])
        total += np.abs(pred.data[i + 1] - warped).mean()
    return float(total / (n - 1) * 1e4)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) on [0, 1] frames, capped at 100 dB for near-identical pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid Gaussian windows, averaged across channels.

    C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim: expected [C, H, W] frames, got {a.shape}")
    if a.shape[1] < size or a.shape[2] < size:
        raise ValueError(f"ssim: frame smaller than the {size}x{size} window")
    kern = _gaussian_kernel(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = correlate2d(x, kern, mode="valid")
        my = correlate2d(y, kern, mode="valid")
        vx = correlate2d(x * x, kern, mode="valid") - mx**2
        vy = correlate2d(y * y, kern, mode="valid") - my**2
        vxy = correlate2d(x * y, kern, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * vxy + c2)
        den = (mx**2 + my**2 + c1) * (vx + vy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))
