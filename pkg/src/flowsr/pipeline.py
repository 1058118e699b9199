"""Dataset layout and the glue between stored sequences and model operations.

On-disk layout under ``<workdir>/dataset/seq_NNN/``:

* ``hr/frame_KKK.ppm`` clean frames, ``lr/frame_KKK.ppm`` degraded frames
* ``flow/fwd_KKK.flo`` / ``flow/bwd_KKK.flo`` exact ground-truth flows (HR grid)
* ``mask/fwd_KKK.pgm`` / ``mask/bwd_KKK.pgm`` exact occlusion masks
* ``manifest.txt`` key=value record of the scene, degradation and split
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import flowio
from .checkpoint import load_tensors, save_tensors
from .config import ExperimentConfig
from .decoder import (
    EncoderFeatures,
    SequenceAutoencoder,
    build_autoencoder,
    decode_sequence,
    encode,
)
from .diffusion import DenoiserNet, GuidanceConfig, build_denoiser, motion_guided_sample
from .losses import psnr, ssim, warping_error_metric
from .motion import (
    FlowParams,
    FlowSet,
    MaskSet,
    downsample_flow_set,
    downsample_mask_set,
    estimate_flow_set,
    masks_from_flows,
)
from .seqcore import LatentSequence, NoiseSchedule, Prng, VideoSequence, make_linear_schedule
from .synthdata import DegradationSpec, degrade_sequence, make_random_scene, synth_sequence


def derive_seed(master: int, label: str) -> int:
    return Prng(master).child(label).torch_seed()


@dataclass
class StoredSequence:
    index: int
    split: str
    hr: VideoSequence
    lr: VideoSequence
    gt_flows: FlowSet
    gt_masks: MaskSet


def seq_dirname(index: int) -> str:
    return f"seq_{index:03d}"


def dataset_root(cfg: ExperimentConfig):
    from pathlib import Path

    return Path(cfg.paths.workdir) / "dataset"


def checkpoint_dir(cfg: ExperimentConfig):
    from pathlib import Path

    return Path(cfg.paths.workdir) / "checkpoints"


def results_dir(cfg: ExperimentConfig):
    from pathlib import Path

    return Path(cfg.paths.workdir) / "results"


def split_of(cfg: ExperimentConfig, index: int) -> str:
    return "train" if index < cfg.scene.n_train else "heldout"


def split_indices(cfg: ExperimentConfig, split: str) -> list:
    total = cfg.scene.n_train + cfg.scene.n_heldout
    if split == "train":
        return list(range(cfg.scene.n_train))
    if split == "heldout":
        return list(range(cfg.scene.n_train, total))
    if split == "all":
        return list(range(total))
    raise ValueError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# Synthesis and storage
# ---------------------------------------------------------------------------


def synth_one(cfg: ExperimentConfig, index: int) -> StoredSequence:
    """Deterministically generate sequence ``index`` from the master seed."""
    scene_seed = derive_seed(cfg.run.seed, f"scene-{index}")
    spec = make_random_scene(
        scene_seed,
        height=cfg.scene.height,
        width=cfg.scene.width,
        n_frames=cfg.scene.n_frames,
        n_sprites=(cfg.scene.sprites_min, cfg.scene.sprites_max),
        speed=cfg.scene.speed,
        bg_speed=cfg.scene.bg_speed,
        smoothness=cfg.scene.smoothness,
        occluder_bias=(index % 3 == 0),
    )
    hr, flows, masks = synth_sequence(spec)
    dspec = DegradationSpec(
        blur_sigma=cfg.degrade.blur_sigma,
        downscale=cfg.degrade.downscale,
        noise_sigma=cfg.degrade.noise_sigma,
        quant_levels=cfg.degrade.quant_levels,
    )
    lr = degrade_sequence(hr, dspec, Prng(derive_seed(cfg.run.seed, f"degrade-{index}")))
    return StoredSequence(
        index=index, split=split_of(cfg, index), hr=hr, lr=lr, gt_flows=flows, gt_masks=masks
    )


def write_sequence(root, seq: StoredSequence, cfg: ExperimentConfig) -> None:
    base = root / seq_dirname(seq.index)
    for sub in ("hr", "lr", "flow", "mask"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for i in range(seq.hr.n_frames):
        flowio.write_frame(base / "hr" / f"frame_{i:03d}.ppm", seq.hr.data[i])
        flowio.write_frame(base / "lr" / f"frame_{i:03d}.ppm", seq.lr.data[i])
    for i in range(seq.hr.n_frames - 1):
        flowio.write_flo(base / "flow" / f"fwd_{i:03d}.flo", seq.gt_flows.forward[i])
        flowio.write_flo(base / "flow" / f"bwd_{i:03d}.flo", seq.gt_flows.backward[i])
        flowio.write_mask_pgm(base / "mask" / f"fwd_{i:03d}.pgm", seq.gt_masks.forward[i])
        flowio.write_mask_pgm(base / "mask" / f"bwd_{i:03d}.pgm", seq.gt_masks.backward[i])
    manifest = {
        "index": seq.index,
        "split": seq.split,
        "n_frames": seq.hr.n_frames,
        "hr_height": seq.hr.shape[2],
        "hr_width": seq.hr.shape[3],
        "downscale": cfg.degrade.downscale,
        "master_seed": cfg.run.seed,
    }
    lines = [f"{k}={v}" for k, v in manifest.items()]
    (base / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def read_sequence(root, index: int) -> StoredSequence:
    base = root / seq_dirname(index)
    if not base.is_dir():
        raise FileNotFoundError(f"missing dataset sequence directory {base}")
    manifest = read_manifest(base / "manifest.txt")
    n = int(manifest["n_frames"])
    hr = VideoSequence(
        np.stack([flowio.read_frame(base / "hr" / f"frame_{i:03d}.ppm") for i in range(n)])
    )
    lr = VideoSequence(
        np.stack([flowio.read_frame(base / "lr" / f"frame_{i:03d}.ppm") for i in range(n)])
    )
    flows = FlowSet(
        forward=[flowio.read_flo(base / "flow" / f"fwd_{i:03d}.flo") for i in range(n - 1)],
        backward=[flowio.read_flo(base / "flow" / f"bwd_{i:03d}.flo") for i in range(n - 1)],
    )
    masks = MaskSet(
        forward=[flowio.read_mask_pgm(base / "mask" / f"fwd_{i:03d}.pgm") for i in range(n - 1)],
        backward=[flowio.read_mask_pgm(base / "mask" / f"bwd_{i:03d}.pgm") for i in range(n - 1)],
    )
    return StoredSequence(
        index=index, split=manifest["split"], hr=hr, lr=lr, gt_flows=flows, gt_masks=masks
    )


# ---------------------------------------------------------------------------
# Model IO
# ---------------------------------------------------------------------------


def save_module(path, module: torch.nn.Module) -> None:
    save_tensors(path, {k: v.detach().numpy() for k, v in module.state_dict().items()})


def load_module(path, module: torch.nn.Module) -> torch.nn.Module:
    tensors = load_tensors(path)
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    module.load_state_dict(state, strict=True)
    return module


def load_autoencoder(path, cfg: ExperimentConfig) -> SequenceAutoencoder:
    model = build_autoencoder(3, cfg.model.width, cfg.model.latent_channels, Prng(0))
    return load_module(path, model)


def load_denoiser(path, cfg: ExperimentConfig) -> DenoiserNet:
    model = build_denoiser(cfg.model.latent_channels, 3, Prng(0))
    return load_module(path, model)


# ---------------------------------------------------------------------------
# Conditioning and guidance preparation
# ---------------------------------------------------------------------------


def make_condition(lr: VideoSequence, up_factor: int, pool: int = 8) -> np.ndarray:
    """Bicubic-resize the degraded frames to output size, then pool to the latent grid."""
    with torch.no_grad():
        x = torch.from_numpy(lr.data.astype(np.float32))
        up = F.interpolate(x, scale_factor=up_factor, mode="bicubic", align_corners=False)
        up = up.clamp(0.0, 1.0)
        cond = F.avg_pool2d(up, pool)
    return cond.numpy().astype(np.float64)


def guidance_inputs(lr: VideoSequence, cfg: ExperimentConfig):
    """Flows and consistency masks estimated on the degraded frames, at latent scale."""
    params = FlowParams(levels=cfg.flow.levels, iters=cfg.flow.iters, alpha=cfg.flow.alpha)
    flows = estimate_flow_set(lr, params)
    masks = masks_from_flows(flows, cfg.flow.occl_alpha1, cfg.flow.occl_alpha2)
    lat_h = cfg.scene.height // 8
    lat_w = cfg.scene.width // 8
    return (
        downsample_flow_set(flows, lat_h, lat_w),
        downsample_mask_set(masks, lat_h, lat_w),
    )


def schedule_from(cfg: ExperimentConfig) -> NoiseSchedule:
    return make_linear_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.variance_mode
    )


def sample_one(
    denoiser: DenoiserNet,
    autoenc: SequenceAutoencoder,
    seq: StoredSequence,
    cfg: ExperimentConfig,
    mds_on: bool,
    rng: Prng,
    guidance: tuple | None = None,
):
    """Guided (or plain) sampling for one stored sequence; returns (latents, decoded).

    ``guidance`` lets callers reuse precomputed latent-grid flows/masks.
    """
    sched = schedule_from(cfg)
    cond = make_condition(seq.lr, cfg.degrade.downscale)
    if guidance is None and mds_on:
        guidance = guidance_inputs(seq.lr, cfg)
    flows, masks = guidance if guidance is not None else (None, None)
    gcfg = GuidanceConfig(
        scale=cfg.guidance.scale if mds_on else 0.0,
        charbonnier_eps=cfg.guidance.charbonnier_eps,
        eval_point=cfg.guidance.eval_point,
    )
    latents = motion_guided_sample(
        denoiser, cond, flows, masks, sched, gcfg, cfg.sample.steps, rng
    )
    up = upscaled_lr(seq, cfg)
    _, feats = encode(autoenc, up)
    decoded = decode_sequence(autoenc, latents, feats, cfg.sample.cfw_weight)
    return latents, decoded


def upscaled_lr(seq: StoredSequence, cfg: ExperimentConfig) -> VideoSequence:
    from .decoder import upscale_bicubic

    return upscale_bicubic(seq.lr, cfg.degrade.downscale)


def decode_stored_latents(
    autoenc: SequenceAutoencoder,
    latents: LatentSequence,
    seq: StoredSequence,
    cfg: ExperimentConfig,
) -> VideoSequence:
    _, feats = encode(autoenc, upscaled_lr(seq, cfg))
    return decode_sequence(autoenc, latents, feats, cfg.sample.cfw_weight)


def evaluate_sequence(pred: VideoSequence, seq: StoredSequence) -> dict:
    """Fidelity and temporal-consistency metrics against the stored ground truth."""
    n = pred.n_frames
    return {
        "sequence_id": seq_dirname(seq.index),
        "frame_count": n,
        "psnr": float(np.mean([psnr(pred.data[i], seq.hr.data[i]) for i in range(n)])),
        "ssim": float(np.mean([ssim(pred.data[i], seq.hr.data[i]) for i in range(n)])),
        "we": warping_error_metric(pred, seq.gt_flows),
    }


def save_latents(path, latents: LatentSequence) -> None:
    save_tensors(path, {"latents": latents.data})


def load_latents(path) -> LatentSequence:
    return LatentSequence(load_tensors(path)["latents"].astype(np.float64))
