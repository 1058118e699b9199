"""Classical optical flow, differentiable bilinear warping and occlusion masking.

Flow conventions (fixed throughout the package):

* a flow field is ``[2, H, W]``: channel 0 = horizontal displacement ``dx``
  (width axis), channel 1 = vertical displacement ``dy`` (height axis),
  in pixels of the grid the field is defined on;
* backward warping samples the *input* at displaced positions:
  ``out[y, x] = input[y + dy(y, x), x + dx(y, x)]`` (bilinear, border clamp),
  so the flow lives on the output grid;
* ``forward[i]`` lives on frame ``i``'s grid and points into frame ``i+1``;
  ``backward[i]`` lives on frame ``i+1``'s grid and points into frame ``i``.
  Hence ``warp(frame[i], backward[i]) ~ frame[i+1]`` and
  ``warp(frame[i+1], forward[i]) ~ frame[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .seqcore import VideoSequence

#: 8-neighbour averaging kernel from the classical Horn-Schunck iteration.
_HS_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
)


@dataclass
class FlowField:
    """Dense displacement field ``[2, H, W]`` (dx, dy) in pixels of its grid."""

    data: np.ndarray

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError(f"FlowField: expected [2, H, W], got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("FlowField: non-finite entries")
        bound = float(max(arr.shape[1], arr.shape[2]))
        if np.abs(arr).max(initial=0.0) > bound:
            raise ValueError("FlowField: displacement exceeds the grid size sanity bound")
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @staticmethod
    def zeros(h: int, w: int) -> "FlowField":
        return FlowField(np.zeros((2, h, w)))


@dataclass
class FlowSet:
    """Per-pair flows for an N-frame sequence: N-1 forward and N-1 backward fields."""

    forward: list
    backward: list

    def __post_init__(self):
        if len(self.forward) != len(self.backward) or not self.forward:
            raise ValueError("FlowSet: need equal, nonzero counts of forward/backward fields")

    @property
    def n_pairs(self) -> int:
        return len(self.forward)


@dataclass
class OcclusionMask:
    """Binary validity map ``[1, H, W]``; 1 = non-occluded (kept in losses)."""

    data: np.ndarray

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 1:
            raise ValueError(f"OcclusionMask: expected [1, H, W], got shape {arr.shape}")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("OcclusionMask: entries must be exactly 0 or 1")
        self.data = arr

    @staticmethod
    def ones(h: int, w: int) -> "OcclusionMask":
        return OcclusionMask(np.ones((1, h, w)))


@dataclass
class MaskSet:
    """Per-pair, per-direction occlusion masks.

    ``forward[i]`` lives on frame ``i``'s grid (masks residuals built there),
    ``backward[i]`` on frame ``i+1``'s grid, mirroring :class:`FlowSet`.
    """

    forward: list
    backward: list

    def __post_init__(self):
        if len(self.forward) != len(self.backward) or not self.forward:
            raise ValueError("MaskSet: need equal, nonzero counts of forward/backward masks")

    @property
    def n_pairs(self) -> int:
        return len(self.forward)

    @staticmethod
    def full(n_pairs: int, h: int, w: int) -> "MaskSet":
        return MaskSet(
            forward=[OcclusionMask.ones(h, w) for _ in range(n_pairs)],
            backward=[OcclusionMask.ones(h, w) for _ in range(n_pairs)],
        )


@dataclass(frozen=True)
class FlowParams:
    """Coarse-to-fine Horn-Schunck solver settings.

    ``alpha`` is the smoothness weight on 0..255 luminance; ``alpha**2`` sits
    in the update denominator as in the classical iteration.
    """

    levels: int = 3
    iters: int = 100
    alpha: float = 15.0


# ---------------------------------------------------------------------------
# Bilinear warping and its adjoint
# ---------------------------------------------------------------------------


def _corner_weights(flow: np.ndarray, h: int, w: int):
    """Clamped corner indices and bilinear weights for sampling at p + flow(p)."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    xq = xs + flow[0]
    yq = ys + flow[1]
    x0 = np.floor(xq)
    y0 = np.floor(yq)
    fx = xq - x0
    fy = yq - y0
    x0c = np.clip(x0, 0, w - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    y0c = np.clip(y0, 0, h - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.int64)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    return (y0c, x0c, w00), (y0c, x1c, w10), (y1c, x0c, w01), (y1c, x1c, w11)


def warp_bilinear(input: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp ``input [C, H, W]`` by ``flow``: out(p) = input(p + flow(p)).

    Samples falling outside the image clamp to the border, so the bilinear
    weights always sum to one and the map stays linear in ``input``.
    """
    inp = np.asarray(input, dtype=np.float64)
    if inp.ndim != 3:
        raise ValueError(f"warp_bilinear: expected [C, H, W], got shape {inp.shape}")
    c, h, w = inp.shape
    if flow.data.shape[1:] != (h, w):
        raise ValueError(
            f"warp_bilinear: flow grid {flow.data.shape[1:]} does not match input {h, w}"
        )
    out = np.zeros_like(inp)
    for yc, xc, wt in _corner_weights(flow.data, h, w):
        out += wt[None] * inp[:, yc, xc]
    return out


def warp_vjp(input: np.ndarray, flow: FlowField, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`warp_bilinear` w.r.t. its input.

    Returns ``J^T upstream`` where ``J`` is the (linear) warp's Jacobian:
    each output pixel scatters its upstream value back onto the four source
    corners with the same bilinear weights.  ``input`` fixes only the shape;
    the Jacobian of a fixed flow does not depend on the input values.
    """
    inp = np.asarray(input, dtype=np.float64)
    ups = np.asarray(upstream, dtype=np.float64)
    if ups.shape != inp.shape:
        raise ValueError(f"warp_vjp: upstream shape {ups.shape} != input shape {inp.shape}")
    c, h, w = inp.shape
    if flow.data.shape[1:] != (h, w):
        raise ValueError("warp_vjp: flow grid does not match input")
    grad = np.zeros((c, h * w), dtype=np.float64)
    rows = np.arange(c)[:, None]
    for yc, xc, wt in _corner_weights(flow.data, h, w):
        flat = (yc * w + xc).ravel()[None, :]
        np.add.at(grad, (rows, flat), (wt[None] * ups).reshape(c, -1))
    return grad.reshape(c, h, w)


# ---------------------------------------------------------------------------
# Flow resampling and occlusion masking
# ---------------------------------------------------------------------------


def _block_reduce(arr: np.ndarray, k: int) -> np.ndarray:
    h, w = arr.shape
    return arr.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def _down_factor(src_h: int, src_w: int, target_h: int, target_w: int) -> int:
    if target_h < 1 or target_w < 1 or src_h % target_h or src_w % target_w:
        raise ValueError(
            f"downsample: target {(target_h, target_w)} must divide source {(src_h, src_w)}"
        )
    kh, kw = src_h // target_h, src_w // target_w
    if kh != kw:
        raise ValueError(f"downsample: factors differ per axis ({kh} vs {kw})")
    return kh


def downsample_flow(flow: FlowField, target_h: int, target_w: int) -> FlowField:
    """Area-average the field to the target grid and rescale displacements by 1/k."""
    _, h, w = flow.data.shape
    k = _down_factor(h, w, target_h, target_w)
    pooled = np.stack([_block_reduce(flow.data[i], k) for i in range(2)])
    return FlowField(pooled / k)


def downsample_mask(mask: OcclusionMask, target_h: int, target_w: int) -> OcclusionMask:
    """Nearest-neighbour (block centre) mask downsampling, re-binarized at 0.5."""
    _, h, w = mask.data.shape
    k = _down_factor(h, w, target_h, target_w)
    off = k // 2
    picked = mask.data[0, off::k, off::k]
    return OcclusionMask((picked >= 0.5).astype(np.float64)[None])


def occlusion_mask_fb(
    fwd: FlowField, bwd: FlowField, alpha1: float = 0.01, alpha2: float = 0.5
) -> OcclusionMask:
    """Forward-backward consistency occlusion mask on ``fwd``'s grid.

    Pixel p is occluded (0) iff
    ``|fwd(p) + bwd(p + fwd(p))|^2 > alpha1 * (|fwd(p)|^2 + |bwd(p + fwd(p))|^2) + alpha2``.
    """
    if fwd.data.shape != bwd.data.shape:
        raise ValueError("occlusion_mask_fb: fields must share a grid")
    bwd_at = warp_bilinear(bwd.data, fwd)
    diff2 = ((fwd.data + bwd_at) ** 2).sum(axis=0)
    mag2 = (fwd.data**2).sum(axis=0) + (bwd_at**2).sum(axis=0)
    occluded = diff2 > alpha1 * mag2 + alpha2
    return OcclusionMask((~occluded).astype(np.float64)[None])


# ---------------------------------------------------------------------------
# Horn-Schunck coarse-to-fine flow
# ---------------------------------------------------------------------------


def _luminance255(frame: np.ndarray) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected [H, W], [1, H, W] or [3, H, W] frame, got {arr.shape}")
    if arr.shape[0] == 3:
        y = 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]
    else:
        y = arr[0]
    return y * 255.0


def _half(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return _block_reduce(img[: h - h % 2, : w - w % 2], 2)


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a single-channel image."""
    sh, sw = img.shape
    ys = np.clip((np.arange(h) + 0.5) * sh / h - 0.5, 0, sh - 1)
    xs = np.clip((np.arange(w) + 0.5) * sw / w - 0.5, 0, sw - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _hs_refine(
    i0: np.ndarray, i1: np.ndarray, u: np.ndarray, v: np.ndarray, iters: int, alpha: float
):
    """One pyramid level: linearize around the current flow, relax the residual."""
    i1w = warp_bilinear(i1[None], FlowField(np.stack([u, v])))[0]
    gy0, gx0 = np.gradient(i0)
    gy1, gx1 = np.gradient(i1w)
    ix = 0.5 * (gx0 + gx1)
    iy = 0.5 * (gy0 + gy1)
    it = i1w - i0
    den = alpha**2 + ix**2 + iy**2
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    for _ in range(iters):
        du_bar = ndi.convolve(du, _HS_KERNEL, mode="nearest")
        dv_bar = ndi.convolve(dv, _HS_KERNEL, mode="nearest")
        num = (ix * du_bar + iy * dv_bar + it) / den
        du = du_bar - ix * num
        dv = dv_bar - iy * num
    return u + du, v + dv


def estimate_flow(src, dst, params: FlowParams = FlowParams()) -> FlowField:
    """Dense flow on ``src``'s grid such that ``dst(p + flow(p)) ~ src(p)``.

    Multi-scale Horn-Schunck on 0..255 luminance; deterministic for fixed
    parameters.  RGB inputs are converted to luminance internally.
    """
    i0 = _luminance255(src)
    i1 = _luminance255(dst)
    if i0.shape != i1.shape:
        raise ValueError(f"estimate_flow: frame shapes differ ({i0.shape} vs {i1.shape})")
    pyr = [(i0, i1)]
    for _ in range(params.levels - 1):
        a, b = pyr[-1]
        if min(a.shape) < 8:
            break
        pyr.append((_half(a), _half(b)))
    h_top, w_top = pyr[-1][0].shape
    u = np.zeros((h_top, w_top))
    v = np.zeros((h_top, w_top))
    for level, (a, b) in enumerate(reversed(pyr)):
        if level > 0:
            u = _resize_bilinear(u, *a.shape) * (a.shape[1] / u.shape[1])
            v = _resize_bilinear(v, *a.shape) * (a.shape[0] / v.shape[0])
        if params.iters > 0:
            u, v = _hs_refine(a, b, u, v, params.iters, params.alpha)
    return FlowField(np.stack([u, v]))


def estimate_flow_set(frames: VideoSequence, params: FlowParams = FlowParams()) -> FlowSet:
    """Forward and backward flow for every adjacent pair of a sequence."""
    if frames.n_frames < 2:
        raise ValueError("estimate_flow_set: need at least 2 frames")
    fwd, bwd = [], []
    for i in range(frames.n_frames - 1):
        a, b = frames.data[i], frames.data[i + 1]
        fwd.append(estimate_flow(a, b, params))
        bwd.append(estimate_flow(b, a, params))
    return FlowSet(forward=fwd, backward=bwd)


def masks_from_flows(flows: FlowSet, alpha1: float = 0.01, alpha2: float = 0.5) -> MaskSet:
    """Per-pair, per-direction consistency masks for a flow set."""
    fwd = [occlusion_mask_fb(f, b, alpha1, alpha2) for f, b in zip(flows.forward, flows.backward)]
    bwd = [occlusion_mask_fb(b, f, alpha1, alpha2) for f, b in zip(flows.forward, flows.backward)]
    return MaskSet(forward=fwd, backward=bwd)


def downsample_flow_set(flows: FlowSet, target_h: int, target_w: int) -> FlowSet:
    return FlowSet(
        forward=[downsample_flow(f, target_h, target_w) for f in flows.forward],
        backward=[downsample_flow(f, target_h, target_w) for f in flows.backward],
    )


def downsample_mask_set(masks: MaskSet, target_h: int, target_w: int) -> MaskSet:
    return MaskSet(
        forward=[downsample_mask(m, target_h, target_w) for m in masks.forward],
        backward=[downsample_mask(m, target_h, target_w) for m in masks.backward],
    )
