"""Sequence autoencoder: frozen spatial blocks plus trainable temporal
convolutions and encoder-feature fusion, fine-tuned with sequence losses.

The encoder downsamples 8x over three stride-2 stages; the decoder mirrors it
with nearest-upsample + conv stages.  Each decoder stage runs spatial conv ->
temporal 1D conv (zero-init residual) -> feature fusion
``F <- F + cfw_weight * C(concat(F, e))`` with the encoder feature of the
matching resolution.  Temporal and fusion weights start at zero, so a fresh
decoder is exactly frame-independent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import OptimConfig, ResBlock, TemporalConv, TrainingDiverged
from .losses import LossWeights, psnr, sobel_structure
from .motion import FlowField, FlowSet, MaskSet, warp_bilinear, warp_vjp
from .seqcore import LatentSequence, Prng, VideoSequence

GROUPS = ("encoder", "decoder", "temporal", "cfw", "disc")


@dataclass
class EncoderFeatures:
    """Per-stage feature maps retained from encoding; dims halve per stage."""

    stages: tuple  # torch tensors [N, ch, H/2, W/2], [N, ch, H/4, W/4], [N, ch, H/8, W/8]

    @property
    def n_frames(self) -> int:
        return int(self.stages[0].shape[0])


class _Encoder(nn.Module):
    def __init__(self, channels: int, width: int, latent_channels: int):
        super().__init__()
        self.downs = nn.ModuleList(
            nn.Conv2d(channels if k == 0 else width, width, 3, stride=2, padding=1)
            for k in range(3)
        )
        self.blocks = nn.ModuleList(ResBlock(width) for _ in range(3))
        self.out = nn.Conv2d(width, latent_channels, 1)

    def forward(self, x: torch.Tensor):
        feats = []
        for down, block in zip(self.downs, self.blocks):
            x = block(down(x))
            feats.append(x)
        return self.out(feats[-1]), feats


class _Decoder(nn.Module):
    def __init__(self, channels: int, width: int, latent_channels: int):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(width) for _ in range(3))
        self.ups = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(3))
        self.norm_out = nn.GroupNorm(8, width)
        self.act_out = nn.SiLU()
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1)


class SequenceAutoencoder(nn.Module):
    """8x autoencoder with per-stage temporal and fusion modules.

    Weight groups (checkpoint name prefixes): ``encoder.``, ``decoder.``,
    ``temporal.``, ``cfw.``.  Only the last two stay trainable during
    fine-tuning.  ``latent_mean`` / ``latent_std`` normalize latents so the
    diffusion side sees roughly unit-scale values.
    """

    def __init__(self, channels: int = 3, width: int = 32, latent_channels: int = 4):
        super().__init__()
        self.channels = channels
        self.width = width
        self.latent_channels = latent_channels
        self.encoder = _Encoder(channels, width, latent_channels)
        self.decoder = _Decoder(channels, width, latent_channels)
        self.temporal = nn.ModuleList(TemporalConv(width) for _ in range(3))
        self.cfw = nn.ModuleList(nn.Conv2d(2 * width, width, 3, padding=1) for _ in range(3))
        for conv in self.cfw:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        self.register_buffer("latent_mean", torch.zeros(()))
        self.register_buffer("latent_std", torch.ones(()))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- encoding -----------------------------------------------------------

    def encode_tensors(self, frames: torch.Tensor):
        return self.encoder(frames)

    # -- decoding -----------------------------------------------------------

    def decode_tensors(
        self,
        z_raw: torch.Tensor,
        feats: list | None,
        cfw_weight: float,
        n_frames: int,
    ) -> torch.Tensor:
        d = self.decoder
        x = d.conv_in(z_raw)
        for k in range(3):
            x = d.blocks[k](x)
            if n_frames > 1:
                bn = x.shape[0]
                x = self.temporal[k](x.reshape(1, n_frames, *x.shape[1:])).reshape(bn, *x.shape[1:])
            if cfw_weight != 0.0 and feats is not None:
                e = feats[2 - k]
                x = x + cfw_weight * self.cfw[k](torch.cat([x, e], dim=1))
            x = d.ups[k](F.interpolate(x, scale_factor=2, mode="nearest"))
        return d.conv_out(d.act_out(d.norm_out(x)))


def build_autoencoder(channels: int = 3, width: int = 32, latent_channels: int = 4,
                      rng: Prng | None = None) -> SequenceAutoencoder:
    """Construct an autoencoder with reproducible seed-derived initialization."""
    torch.manual_seed((rng or Prng(0)).torch_seed())
    return SequenceAutoencoder(channels, width, latent_channels)


def encode(model: SequenceAutoencoder, frames: VideoSequence):
    """Deterministic latents (normalized) plus retained encoder stage features."""
    n, c, h, w = frames.shape
    if h % 8 or w % 8:
        raise ValueError(f"encode: frame dims {h}x{w} must be divisible by 8")
    with torch.no_grad():
        x = torch.from_numpy(frames.data.astype(np.float32))
        z_raw, feats = model.encode_tensors(x)
        z = (z_raw - model.latent_mean) / model.latent_std
    return LatentSequence(z.numpy().astype(np.float64)), EncoderFeatures(tuple(feats))


def decode_sequence(
    model: SequenceAutoencoder,
    z: LatentSequence,
    feats: EncoderFeatures | None,
    cfw_weight: float = 0.5,
    clamp_output: bool = True,
):
    """Decode a latent sequence, fusing encoder features at strength cfw_weight.

    Returns a :class:`VideoSequence` (output clamped to [0, 1]).  With
    ``clamp_output=False`` the raw pre-clamp array comes back instead, which
    linearity probes need.
    """
    if not 0.0 <= cfw_weight <= 1.0:
        raise ValueError("cfw_weight must be in [0, 1]")
    if feats is not None and feats.n_frames != z.n_frames:
        raise ValueError(
            f"decode_sequence: {z.n_frames} latent frames vs {feats.n_frames} feature frames"
        )
    with torch.no_grad():
        zt = torch.from_numpy(z.data.astype(np.float32))
        z_raw = zt * model.latent_std + model.latent_mean
        out = model.decode_tensors(
            z_raw, list(feats.stages) if feats is not None else None, cfw_weight, z.n_frames
        )
        arr = out.numpy().astype(np.float64)
    if not clamp_output:
        return arr
    return VideoSequence(np.clip(arr, 0.0, 1.0))


class PatchDiscriminator(nn.Module):
    """3-layer strided conv patch discriminator applied per frame."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# Weight-group helpers
# ---------------------------------------------------------------------------


def group_parameters(model: nn.Module, prefixes: tuple) -> list:
    return [p for name, p in model.named_parameters() if name.split(".")[0] in prefixes]


def group_checksum(model: nn.Module, prefixes: tuple) -> str:
    """SHA-256 over the named tensors of the given top-level groups."""
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        if name.split(".")[0] in prefixes:
            h.update(name.encode())
            h.update(p.detach().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def set_trainable_groups(model: SequenceAutoencoder, prefixes: tuple) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(name.split(".")[0] in prefixes)


# ---------------------------------------------------------------------------
# Torch-side sequence losses (training graph); reference values in losses.py
# ---------------------------------------------------------------------------


class _WarpFn(torch.autograd.Function):
    """Differentiable bilinear warp backed by the numpy warp and its adjoint."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, flow: FlowField) -> torch.Tensor:
        ctx.flow = flow
        out = warp_bilinear(x.detach().numpy().astype(np.float64), flow)
        return torch.from_numpy(out).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        g = warp_vjp(
            np.zeros(grad_out.shape), ctx.flow, grad_out.detach().numpy().astype(np.float64)
        )
        return torch.from_numpy(g).to(grad_out.dtype), None


def torch_warp(x: torch.Tensor, flow: FlowField) -> torch.Tensor:
    return _WarpFn.apply(x, flow)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _sobel_grads(frames: torch.Tensor) -> torch.Tensor:
    c = frames.shape[1]
    kx = _SOBEL_X.reshape(1, 1, 3, 3).repeat(c, 1, 1, 1)
    ky = _SOBEL_X.t().reshape(1, 1, 3, 3).repeat(c, 1, 1, 1)
    padded = F.pad(frames, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    return torch.cat([gx, gy], dim=1)


def recon_loss_t(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-frame L1 plus Sobel-gradient-domain L1 (perceptual-term stand-in)."""
    return (pred - gt).abs().sum() + 0.1 * (_sobel_grads(pred) - _sobel_grads(gt)).abs().sum()


def frame_diff_loss_t(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    dp = pred[1:] - pred[:-1]
    dg = gt[1:] - gt[:-1]
    return (dp - dg).abs().sum()


def swc_loss_t(pred: torch.Tensor, flows: FlowSet, masks: MaskSet, structure: list) -> torch.Tensor:
    """Torch mirror of losses.swc_loss; gradients flow through the warp adjoint."""
    n = pred.shape[0]
    total = pred.new_zeros(())
    for i in range(n - 1):
        w_next = torch.from_numpy(
            (masks.backward[i].data * structure[i + 1].W).astype(np.float32)
        )
        total = total + (w_next * (torch_warp(pred[i], flows.backward[i]) - pred[i + 1])).abs().sum()
        w_prev = torch.from_numpy(
            (masks.forward[i].data * structure[i].W).astype(np.float32)
        )
        total = total + (w_prev * (torch_warp(pred[i + 1], flows.forward[i]) - pred[i])).abs().sum()
    return total


def gan_g_loss_t(disc: PatchDiscriminator, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, mean over the patch map, summed over frames."""
    return F.softplus(-disc(fake)).mean(dim=(1, 2, 3)).sum()


def gan_d_loss_t(disc: PatchDiscriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return (
        F.softplus(-disc(real)).mean(dim=(1, 2, 3)).sum()
        + F.softplus(disc(fake)).mean(dim=(1, 2, 3)).sum()
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def pretrain_autoencoder(
    dataset: list,
    cfg: OptimConfig = OptimConfig(iters=600, batch_size=4, lr=2e-4),
    rng: Prng | None = None,
    holdout: list | None = None,
    width: int = 32,
    latent_channels: int = 4,
) -> tuple:
    """Frame-wise L1 pretraining of the spatial encoder/decoder groups.

    Temporal and fusion weights stay at zero init.  Latent normalization
    statistics are measured over the training frames afterwards.  Returns
    (model, report) where the report carries the loss history and, when a
    holdout is given, its mean reconstruction PSNR.
    """
    if not dataset:
        raise ValueError("pretrain_autoencoder: empty dataset")
    rng = rng or Prng(0)
    channels = dataset[0].shape[1]
    model = build_autoencoder(channels, width, latent_channels, rng.child("ae-init"))
    frames = np.concatenate([v.data for v in dataset], axis=0)
    opt = torch.optim.Adam(
        group_parameters(model, ("encoder", "decoder")),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
    )
    history = []
    initial = None
    for it in range(cfg.iters):
        idx = rng.integers(0, len(frames), (cfg.batch_size,))
        x = torch.from_numpy(frames[idx].astype(np.float32))
        z_raw, _ = model.encode_tensors(x)
        out = model.decode_tensors(z_raw, None, 0.0, 1)
        loss = (out - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss.detach())
        history.append((it, val))
        if initial is None:
            initial = max(val, 1e-12)
        elif val > 10.0 * initial:
            raise TrainingDiverged(
                f"autoencoder loss {val:.4g} exceeded 10x initial {initial:.4g} at iter {it}"
            )
    with torch.no_grad():
        z_all = []
        for start in range(0, len(frames), 16):
            chunk = torch.from_numpy(frames[start : start + 16].astype(np.float32))
            z_all.append(model.encode_tensors(chunk)[0])
        z_cat = torch.cat(z_all)
        model.latent_mean.fill_(float(z_cat.mean()))
        model.latent_std.fill_(max(float(z_cat.std()), 1e-6))
    report = {"history": history}
    if holdout:
        vals = []
        for video in holdout:
            z, _ = encode(model, video)
            rec = decode_sequence(model, z, None, cfw_weight=0.0)
            vals.append(np.mean([psnr(rec.data[i], video.data[i]) for i in range(video.n_frames)]))
        report["holdout_psnr"] = float(np.mean(vals))
    return model, report


@dataclass
class FinetuneSample:
    """One fine-tuning triple plus the ground-truth motion it needs."""

    lr: VideoSequence
    latents: LatentSequence
    hr: VideoSequence
    gt_flows: FlowSet
    gt_masks: MaskSet


def finetune_decoder(
    model: SequenceAutoencoder,
    dataset: list,
    weights: LossWeights = LossWeights(),
    cfg: OptimConfig = OptimConfig(iters=300, batch_size=1, lr=2e-4),
    rng: Prng | None = None,
    seq_len: int = 5,
    cfw_weight: float = 0.5,
    upscale: int = 4,
) -> tuple:
    """Fine-tune temporal + fusion groups (plus a patch discriminator).

    ``dataset`` holds :class:`FinetuneSample` items whose latents came from
    guided sampling on the matching degraded inputs.  Spatial groups are
    frozen; their checksums are asserted unchanged at the end.  Returns
    (model, discriminator, history) where history rows are dicts with the
    per-component losses; the logged total is recomposed from the logged
    components, asserted against the graph value each step.
    """
    if not dataset:
        raise ValueError("finetune_decoder: empty dataset")
    rng = rng or Prng(0)
    torch.manual_seed(rng.child("disc-init").torch_seed())
    disc = PatchDiscriminator(model.channels, model.width)
    frozen_before = group_checksum(model, ("encoder", "decoder"))
    set_trainable_groups(model, ("temporal", "cfw"))
    opt_g = torch.optim.Adam(
        group_parameters(model, ("temporal", "cfw")), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2)
    )
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    structures = [
        [sobel_structure(f, weights.w) for f in sample.hr.data] for sample in dataset
    ]
    history = []
    for it in range(cfg.iters):
        si = int(rng.integers(0, len(dataset)))
        sample = dataset[si]
        n = sample.hr.n_frames
        span = min(seq_len, n)
        start = int(rng.integers(0, n - span + 1))
        sl = slice(start, start + span)
        pl = slice(start, start + span - 1)

        hr = torch.from_numpy(sample.hr.data[sl].astype(np.float32))
        z = torch.from_numpy(sample.latents.data[sl].astype(np.float32))
        up = upscale_bicubic(VideoSequence(sample.lr.data[sl]), upscale)
        with torch.no_grad():
            _, feats = model.encode_tensors(torch.from_numpy(up.data.astype(np.float32)))
        z_raw = z * model.latent_std + model.latent_mean
        out = model.decode_tensors(z_raw, feats, cfw_weight, span).clamp(0.0, 1.0)

        flows = FlowSet(forward=sample.gt_flows.forward[pl], backward=sample.gt_flows.backward[pl])
        masks = MaskSet(forward=sample.gt_masks.forward[pl], backward=sample.gt_masks.backward[pl])
        structure = structures[si][sl]

        recon = recon_loss_t(out, hr)
        diff = frame_diff_loss_t(out, hr)
        swc = swc_loss_t(out, flows, masks, structure)
        gan = gan_g_loss_t(disc, out)
        total = recon + weights.alpha * diff + weights.beta * swc + weights.gamma * gan
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        fake = out.detach()
        d_loss = gan_d_loss_t(disc, hr, fake)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        row = {
            "iteration": it,
            "recon": float(recon.detach()),
            "diff": float(diff.detach()),
            "swc": float(swc.detach()),
            "gan": float(gan.detach()),
            "d_loss": float(d_loss.detach()),
        }
        row["total"] = (
            row["recon"]
            + weights.alpha * row["diff"]
            + weights.beta * row["swc"]
            + weights.gamma * row["gan"]
        )
        composed = row["recon"] + weights.alpha * row["diff"] + weights.beta * row["swc"] \
            + weights.gamma * row["gan"]
        assert abs(row["total"] - composed) <= 1e-9 * max(1.0, abs(composed))
        history.append(row)
    frozen_after = group_checksum(model, ("encoder", "decoder"))
    assert frozen_before == frozen_after, "frozen spatial weights changed during fine-tuning"
    set_trainable_groups(model, GROUPS)
    return model, disc, history


def upscale_bicubic(video: VideoSequence, factor: int) -> VideoSequence:
    """Deterministic bicubic upscaling (torch), clamped back to [0, 1]."""
    with torch.no_grad():
        x = torch.from_numpy(video.data.astype(np.float32))
        up = F.interpolate(x, scale_factor=factor, mode="bicubic", align_corners=False)
    return VideoSequence(np.clip(up.numpy().astype(np.float64), 0.0, 1.0))
