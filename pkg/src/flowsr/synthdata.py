"""Synthetic video with exact ground-truth motion, plus the degradation pipeline.

Scenes are a periodically wrapping band-limited background translating at a
global velocity, with textured sprites moving over it (painter's order, later
sprites on top).  Because every surface translates rigidly, ground-truth flow
and occlusion are known exactly: each pixel carries its owner's velocity, and
a pixel is occluded when its correspondence in the neighbouring frame leaves
the canvas or belongs to a different surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .motion import FlowField, FlowSet, MaskSet, OcclusionMask
from .seqcore import Prng, VideoSequence

_BACKGROUND = -1


@dataclass(frozen=True)
class SpriteSpec:
    """One rigid moving sprite: shape, side length, start position, velocity."""

    shape: str = "square"  # "square" | "disk"
    size: int = 12
    x0: float = 0.0
    y0: float = 0.0
    vx: float = 1.0
    vy: float = 0.0

    def __post_init__(self):
        if self.shape not in ("square", "disk"):
            raise ValueError(f"unknown sprite shape {self.shape!r}")
        if self.size < 2:
            raise ValueError("sprite size must be >= 2")
        for v in (self.x0, self.y0, self.vx, self.vy):
            if not np.isfinite(v):
                raise ValueError("sprite trajectory must be finite")

    def position(self, frame: int) -> tuple:
        return (self.x0 + frame * self.vx, self.y0 + frame * self.vy)


@dataclass(frozen=True)
class SceneSpec:
    """Canvas, background motion and sprite list for one synthetic sequence."""

    height: int = 64
    width: int = 64
    n_frames: int = 8
    seed: int = 0
    bg_smoothness: float = 0.25
    bg_vx: float = 0.0
    bg_vy: float = 0.0
    sprites: tuple = ()

    def __post_init__(self):
        if self.height < 8 or self.width < 8 or self.n_frames < 1:
            raise ValueError("scene dims/frames too small")


@dataclass(frozen=True)
class DegradationSpec:
    """Fixed-order pipeline: Gaussian blur -> area downsample -> noise -> quantize."""

    blur_sigma: float = 1.0
    downscale: int = 4
    noise_sigma: float = 0.02
    quant_levels: int = 64

    def __post_init__(self):
        if not 0.0 <= self.blur_sigma <= 3.0:
            raise ValueError("blur_sigma must be in [0, 3]")
        if self.downscale < 1:
            raise ValueError("downscale must be >= 1")
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ValueError("noise_sigma must be in [0, 0.1]")
        if self.quant_levels < 2:
            raise ValueError("quant_levels must be >= 2")


def _bandlimited_texture(h: int, w: int, rng: Prng, smoothness: float) -> np.ndarray:
    """Periodic texture in [0.05, 0.95]: white noise low-passed in Fourier space."""
    noise = rng.normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    filt = np.exp(-((fx**2 + fy**2) * (smoothness * min(h, w)) ** 2))
    tex = np.fft.ifft2(np.fft.fft2(noise) * filt).real
    lo, hi = tex.min(), tex.max()
    tex = (tex - lo) / (hi - lo) if hi > lo else np.full_like(tex, 0.5)
    return 0.05 + 0.9 * tex


def _sample_periodic(tex: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Bilinear sample of a wrapping texture at integer grid + (dy, dx) offset."""
    h, w = tex.shape
    y0, x0 = int(np.floor(dy)), int(np.floor(dx))
    fy, fx = dy - y0, dx - x0
    a = np.roll(tex, (-y0, -x0), axis=(0, 1))
    b = np.roll(tex, (-y0, -x0 - 1), axis=(0, 1))
    c = np.roll(tex, (-y0 - 1, -x0), axis=(0, 1))
    d = np.roll(tex, (-y0 - 1, -x0 - 1), axis=(0, 1))
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _sprite_stamp(sprite: SpriteSpec, rng: Prng) -> tuple:
    """Sprite texture [3, s, s] and alpha [s, s] in local coordinates."""
    s = sprite.size
    base = _bandlimited_texture(s, s, rng.child("tex"), 0.5)
    tint = 0.4 + 0.6 * rng.child("tint").uniform(0.0, 1.0, (3,))
    tex = np.stack([np.clip(base * t + (1 - t) * 0.5, 0.0, 1.0) for t in tint])
    if sprite.shape == "disk":
        yy, xx = np.mgrid[0:s, 0:s]
        r = (s - 1) / 2
        alpha = (((yy - r) ** 2 + (xx - r) ** 2) <= r**2).astype(np.float64)
    else:
        alpha = np.ones((s, s))
    return tex, alpha


def _paint(canvas: np.ndarray, owner: np.ndarray, tex: np.ndarray, alpha: np.ndarray,
           y: float, x: float, sprite_id: int) -> None:
    """Blend a sprite stamp onto the canvas at a possibly fractional position.

    Bilinear placement: the stamp and its alpha are shifted by the fractional
    offset, then composited.  Ownership flips where effective alpha >= 0.5.
    """
    s = alpha.shape[0]
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    pad_a = np.zeros((s + 1, s + 1))
    pad_t = np.zeros((3, s + 1, s + 1))
    for (wy, wx), wt in (((0, 0), (1 - fy) * (1 - fx)), ((0, 1), (1 - fy) * fx),
                         ((1, 0), fy * (1 - fx)), ((1, 1), fy * fx)):
        pad_a[wy : wy + s, wx : wx + s] += wt * alpha
        pad_t[:, wy : wy + s, wx : wx + s] += wt * tex * alpha
    h, w = owner.shape
    ys, ye = max(0, y0), min(h, y0 + s + 1)
    xs, xe = max(0, x0), min(w, x0 + s + 1)
    if ys >= ye or xs >= xe:
        raise ValueError(f"sprite {sprite_id} entirely out of canvas at ({x:.1f}, {y:.1f})")
    ls, le = ys - y0, ye - y0
    ms, me = xs - x0, xe - x0
    a = pad_a[ls:le, ms:me]
    t = pad_t[:, ls:le, ms:me]
    region = canvas[:, ys:ye, xs:xe]
    canvas[:, ys:ye, xs:xe] = region * (1 - a) + t
    owner[ys:ye, xs:xe] = np.where(a >= 0.5, sprite_id, owner[ys:ye, xs:xe])


def _velocity_maps(owner: np.ndarray, spec: SceneSpec) -> tuple:
    vx = np.full(owner.shape, spec.bg_vx)
    vy = np.full(owner.shape, spec.bg_vy)
    for sid, sp in enumerate(spec.sprites):
        sel = owner == sid
        vx[sel] = sp.vx
        vy[sel] = sp.vy
    return vx, vy


def _consistency_mask(owner_src: np.ndarray, owner_dst: np.ndarray,
                      vx: np.ndarray, vy: np.ndarray) -> OcclusionMask:
    """1 where the source pixel's surface is still visible at its target spot."""
    h, w = owner_src.shape
    yy, xx = np.mgrid[0:h, 0:w]
    ty = np.round(yy + vy).astype(np.int64)
    tx = np.round(xx + vx).astype(np.int64)
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    same = np.zeros((h, w), dtype=bool)
    tyc = np.clip(ty, 0, h - 1)
    txc = np.clip(tx, 0, w - 1)
    same = owner_dst[tyc, txc] == owner_src
    return OcclusionMask((inside & same).astype(np.float64)[None])


def synth_sequence(spec: SceneSpec) -> tuple:
    """Render a scene; return (frames, exact flows, exact occlusion masks).

    Flows carry the per-pixel velocity of the owning surface; masks mark
    pixels whose correspondence stays in-canvas on the same surface (exact
    for integer velocities, nearest-pixel ownership otherwise).
    """
    rng = Prng(spec.seed)
    h, w = spec.height, spec.width
    bg_tex = _bandlimited_texture(h, w, rng.child("bg"), spec.bg_smoothness)
    bg_tint = 0.75 + 0.25 * rng.child("bgtint").uniform(0.0, 1.0, (3,))
    stamps = [_sprite_stamp(sp, rng.child(f"sprite{k}")) for k, sp in enumerate(spec.sprites)]

    frames, owners = [], []
    for i in range(spec.n_frames):
        bg = _sample_periodic(bg_tex, -i * spec.bg_vy, -i * spec.bg_vx)
        canvas = np.stack([np.clip(bg * t, 0.0, 1.0) for t in bg_tint])
        owner = np.full((h, w), _BACKGROUND, dtype=np.int64)
        for sid, (sp, (tex, alpha)) in enumerate(zip(spec.sprites, stamps)):
            x, y = sp.position(i)
            _paint(canvas, owner, tex, alpha, y, x, sid)
        frames.append(np.clip(canvas, 0.0, 1.0))
        owners.append(owner)

    video = VideoSequence(np.stack(frames))
    if spec.n_frames == 1:
        return video, None, None

    fwd_flows, bwd_flows, fwd_masks, bwd_masks = [], [], [], []
    for i in range(spec.n_frames - 1):
        vx_i, vy_i = _velocity_maps(owners[i], spec)
        vx_j, vy_j = _velocity_maps(owners[i + 1], spec)
        fwd_flows.append(FlowField(np.stack([vx_i, vy_i])))
        bwd_flows.append(FlowField(np.stack([-vx_j, -vy_j])))
        fwd_masks.append(_consistency_mask(owners[i], owners[i + 1], vx_i, vy_i))
        bwd_masks.append(_consistency_mask(owners[i + 1], owners[i], -vx_j, -vy_j))
    return (
        video,
        FlowSet(forward=fwd_flows, backward=bwd_flows),
        MaskSet(forward=fwd_masks, backward=bwd_masks),
    )


def make_random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    n_frames: int = 8,
    n_sprites: tuple = (1, 3),
    speed: float = 2.0,
    bg_speed: float = 1.0,
    smoothness: float = 0.25,
    occluder_bias: bool = False,
) -> SceneSpec:
    """Draw a renderable random scene; trajectories stay inside the canvas.

    ``occluder_bias`` forces one large, fast sprite for occlusion-heavy tests.
    """
    rng = Prng(seed).child("scene")
    count = int(rng.integers(n_sprites[0], n_sprites[1] + 1))
    sprites = []
    for k in range(count):
        big = occluder_bias and k == 0
        size = int(rng.integers(height // 4, height // 2)) if big else int(
            rng.integers(max(6, height // 8), height // 3)
        )
        vmax = speed * (1.5 if big else 1.0)
        vx = float(np.round(rng.uniform(-vmax, vmax) * 2) / 2)
        vy = float(np.round(rng.uniform(-vmax, vmax) * 2) / 2)
        if big and abs(vx) + abs(vy) < 2.0:
            vx = vmax
        span_x = abs(vx) * (n_frames - 1)
        span_y = abs(vy) * (n_frames - 1)
        lo_x = 1.0 + max(0.0, -vx * (n_frames - 1))
        hi_x = width - size - 1 - max(0.0, span_x - max(0.0, -vx * (n_frames - 1)))
        lo_y = 1.0 + max(0.0, -vy * (n_frames - 1))
        hi_y = height - size - 1 - max(0.0, span_y - max(0.0, -vy * (n_frames - 1)))
        if hi_x <= lo_x or hi_y <= lo_y:
            vx *= 0.5
            vy *= 0.5
            lo_x, hi_x = 1.0, width - size - 1 - abs(vx) * (n_frames - 1)
            lo_y, hi_y = 1.0, height - size - 1 - abs(vy) * (n_frames - 1)
        x0 = float(np.round(rng.uniform(lo_x, max(lo_x + 1, hi_x))))
        y0 = float(np.round(rng.uniform(lo_y, max(lo_y + 1, hi_y))))
        shape = "disk" if rng.uniform() < 0.5 else "square"
        sprites.append(SpriteSpec(shape=shape, size=size, x0=x0, y0=y0, vx=vx, vy=vy))
    bg_vx = float(np.round(rng.uniform(-bg_speed, bg_speed)))
    bg_vy = float(np.round(rng.uniform(-bg_speed, bg_speed)))
    return SceneSpec(
        height=height,
        width=width,
        n_frames=n_frames,
        seed=seed,
        bg_smoothness=smoothness,
        bg_vx=bg_vx,
        bg_vy=bg_vy,
        sprites=tuple(sprites),
    )


def degrade_sequence(hr: VideoSequence, spec: DegradationSpec, rng: Prng) -> VideoSequence:
    """Per-frame blur -> area downsample -> additive noise -> mid-rise quantize.

    Quantization with L cells maps x to (floor(x*L) + 0.5) / L, so the maximum
    error is 1/(2L); frame count is preserved.
    """
    n, c, h, w = hr.shape
    k = spec.downscale
    if h % k or w % k:
        raise ValueError(f"degrade_sequence: downscale {k} does not divide {h}x{w}")
    out = []
    for i in range(n):
        frame = hr.data[i]
        if spec.blur_sigma > 0:
            frame = np.stack([ndi.gaussian_filter(frame[ch], spec.blur_sigma, mode="reflect")
                              for ch in range(c)])
        if k > 1:
            frame = frame.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))
        frame = frame + spec.noise_sigma * rng.normal(frame.shape)
        frame = np.clip(frame, 0.0, 1.0)
        cell = np.minimum(np.floor(frame * spec.quant_levels), spec.quant_levels - 1)
        frame = (cell + 0.5) / spec.quant_levels
        out.append(frame)
    return VideoSequence(np.stack(out))
