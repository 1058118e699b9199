"""Experiment runner: synthesis, training, guided sampling, decoder
fine-tuning, evaluation, the component-toggle ablation grid, and gradient
checks.

Exit codes: 0 success, 1 usage/config error, 2 assertion/check failure,
3 I/O error.  All data outputs are deterministic for a fixed (config, seed);
progress goes to stderr only.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import flowio, pipeline
from .checks import run_gradcheck
from .config import ExperimentConfig, load_config, save_config
from .decoder import FinetuneSample, OptimConfig, finetune_decoder, pretrain_autoencoder
from .diffusion import train_denoiser
from .losses import LossWeights
from .seqcore import ConfigError, Prng
from .synthdata import SceneSpec


class CheckFailure(RuntimeError):
    """A verification command found results outside tolerance."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def _prepare_outdir(path, cfg: ExperimentConfig):
    path.mkdir(parents=True, exist_ok=True)
    save_config(cfg, path / "config.toml")


def _require(path, what: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the earlier pipeline stage first)")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _synth_task(args):
    cfg_dict, index = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    seq = pipeline.synth_one(cfg, index)
    pipeline.write_sequence(pipeline.dataset_root(cfg), seq, cfg)
    return index


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    root = pipeline.dataset_root(cfg)
    _prepare_outdir(root, cfg)
    indices = pipeline.split_indices(cfg, "all")
    tasks = [(cfg.to_dict(), i) for i in indices]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            done = sorted(pool.map(_synth_task, tasks))
    else:
        done = [_synth_task(t) for t in tasks]
    _log(f"synth: wrote {len(done)} sequences under {root}")
    return 0


def cmd_train_denoiser(cfg: ExperimentConfig, args) -> int:
    root = pipeline.dataset_root(cfg)
    _require(root, "dataset directory")
    ckdir = pipeline.checkpoint_dir(cfg)
    _prepare_outdir(ckdir, cfg)
    train_seqs = [pipeline.read_sequence(root, i) for i in pipeline.split_indices(cfg, "train")]
    held_seqs = [pipeline.read_sequence(root, i) for i in pipeline.split_indices(cfg, "heldout")]
    rng = Prng(cfg.run.seed)

    ae_path = ckdir / "autoencoder.ckpt"
    if ae_path.exists():
        _log(f"train-denoiser: reusing {ae_path}")
        autoenc = pipeline.load_autoencoder(ae_path, cfg)
    else:
        _log("train-denoiser: pretraining the autoencoder")
        autoenc, report = pretrain_autoencoder(
            [s.hr for s in train_seqs],
            OptimConfig(
                iters=cfg.train_autoencoder.iters,
                batch_size=cfg.train_autoencoder.batch_size,
                lr=cfg.train_autoencoder.lr,
            ),
            rng.child("autoencoder"),
            holdout=[s.hr for s in held_seqs],
            width=cfg.model.width,
            latent_channels=cfg.model.latent_channels,
        )
        pipeline.save_module(ae_path, autoenc)
        _write_csv(
            ckdir / "autoencoder_loss.csv",
            ["iteration", "loss"],
            [{"iteration": i, "loss": v} for i, v in report["history"]],
        )
        _log(f"train-denoiser: autoencoder holdout PSNR {report.get('holdout_psnr', float('nan')):.2f} dB")

    _log("train-denoiser: encoding training sequences")
    dataset = []
    from .decoder import encode

    for seq in train_seqs:
        z0, _ = encode(autoenc, seq.hr)
        cond = pipeline.make_condition(seq.lr, cfg.degrade.downscale)
        dataset.append((z0.data, cond))

    _log("train-denoiser: training the noise predictor")
    from .diffusion import build_denoiser

    model = build_denoiser(cfg.model.latent_channels, 3, rng.child("denoiser-init"))
    sched = pipeline.schedule_from(cfg)
    model, history = train_denoiser(
        model,
        dataset,
        sched,
        OptimConfig(
            iters=cfg.train_denoiser.iters,
            batch_size=cfg.train_denoiser.batch_size,
            lr=cfg.train_denoiser.lr,
        ),
        rng.child("denoiser-train"),
    )
    pipeline.save_module(ckdir / "denoiser.ckpt", model)
    _write_csv(
        ckdir / "denoiser_loss.csv",
        ["iteration", "loss"],
        [{"iteration": i, "loss": v} for i, v in history],
    )
    _log(f"train-denoiser: saved {ckdir / 'denoiser.ckpt'}")
    return 0


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    root = pipeline.dataset_root(cfg)
    _require(root, "dataset directory")
    ckdir = pipeline.checkpoint_dir(cfg)
    autoenc = pipeline.load_autoencoder(_require(ckdir / "autoencoder.ckpt", "autoencoder checkpoint"), cfg)
    denoiser = pipeline.load_denoiser(_require(ckdir / "denoiser.ckpt", "denoiser checkpoint"), cfg)
    split = args.split or cfg.sample.split
    out = pipeline.results_dir(cfg) / "sample"
    _prepare_outdir(out, cfg)
    for idx in pipeline.split_indices(cfg, split):
        seq = pipeline.read_sequence(root, idx)
        rng = Prng(pipeline.derive_seed(cfg.run.seed, f"sample-{idx}"))
        latents, decoded = pipeline.sample_one(denoiser, autoenc, seq, cfg, cfg.run.mds_on, rng)
        seq_out = out / pipeline.seq_dirname(idx)
        seq_out.mkdir(parents=True, exist_ok=True)
        pipeline.save_latents(seq_out / "latents.ckpt", latents)
        for i in range(decoded.n_frames):
            flowio.write_frame(seq_out / f"frame_{i:03d}.ppm", decoded.data[i])
        _log(f"sample: {pipeline.seq_dirname(idx)} done (mds={'on' if cfg.run.mds_on else 'off'})")
    return 0


def cmd_finetune_decoder(cfg: ExperimentConfig, args) -> int:
    root = pipeline.dataset_root(cfg)
    _require(root, "dataset directory")
    ckdir = pipeline.checkpoint_dir(cfg)
    autoenc = pipeline.load_autoencoder(_require(ckdir / "autoencoder.ckpt", "autoencoder checkpoint"), cfg)
    sample_dir = pipeline.results_dir(cfg) / "sample"
    samples = []
    for idx in pipeline.split_indices(cfg, "train"):
        seq = pipeline.read_sequence(root, idx)
        lat_path = _require(
            sample_dir / pipeline.seq_dirname(idx) / "latents.ckpt",
            f"sampled latents for {pipeline.seq_dirname(idx)}",
        )
        samples.append(
            FinetuneSample(
                lr=seq.lr,
                latents=pipeline.load_latents(lat_path),
                hr=seq.hr,
                gt_flows=seq.gt_flows,
                gt_masks=seq.gt_masks,
            )
        )
    weights = LossWeights(
        alpha=cfg.losses.alpha, beta=cfg.losses.beta, gamma=cfg.losses.gamma, w=cfg.losses.w
    )
    _log(f"finetune-decoder: {len(samples)} sequences, {cfg.train_finetune.iters} iterations")
    autoenc, disc, history = finetune_decoder(
        autoenc,
        samples,
        weights,
        OptimConfig(iters=cfg.train_finetune.iters, lr=cfg.train_finetune.lr),
        Prng(cfg.run.seed).child("finetune"),
        seq_len=5,
        cfw_weight=cfg.sample.cfw_weight,
        upscale=cfg.degrade.downscale,
    )
    _prepare_outdir(ckdir, cfg)
    pipeline.save_module(ckdir / "decoder_finetuned.ckpt", autoenc)
    pipeline.save_module(ckdir / "discriminator.ckpt", disc)
    _write_csv(
        ckdir / "finetune_loss.csv",
        ["iteration", "recon", "diff", "swc", "gan", "d_loss", "total"],
        history,
    )
    _log(f"finetune-decoder: saved {ckdir / 'decoder_finetuned.ckpt'}")
    return 0


def _eval_task(args):
    cfg_dict, results, idx = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    seq = pipeline.read_sequence(pipeline.dataset_root(cfg), idx)
    seq_dir = Path(results) / pipeline.seq_dirname(idx)
    frames = []
    for i in range(seq.hr.n_frames):
        frame_path = seq_dir / f"frame_{i:03d}.ppm"
        if not frame_path.exists():
            raise FileNotFoundError(f"missing decoded frame: {frame_path}")
        frames.append(flowio.read_frame(frame_path))
    from .seqcore import VideoSequence

    pred = VideoSequence(np.stack(frames))
    return pipeline.evaluate_sequence(pred, seq)


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    results = Path(args.results) if args.results else pipeline.results_dir(cfg) / "sample"
    _require(results, "results directory")
    split = args.split or "heldout"
    indices = pipeline.split_indices(cfg, split)
    tasks = [(cfg.to_dict(), str(results), i) for i in indices]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            rows = list(pool.map(_eval_task, tasks))
    else:
        rows = [_eval_task(t) for t in tasks]
    rows.sort(key=lambda r: r["sequence_id"])
    mean_row = {
        "sequence_id": "mean",
        "frame_count": sum(r["frame_count"] for r in rows),
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "we": float(np.mean([r["we"] for r in rows])),
    }
    _write_csv(
        results / "metrics.csv",
        ["sequence_id", "frame_count", "psnr", "ssim", "we"],
        rows + [mean_row],
    )
    _log(f"evaluate: psnr {mean_row['psnr']:.2f} ssim {mean_row['ssim']:.4f} we {mean_row['we']:.1f}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    root = pipeline.dataset_root(cfg)
    _require(root, "dataset directory")
    ckdir = pipeline.checkpoint_dir(cfg)
    autoenc = pipeline.load_autoencoder(_require(ckdir / "autoencoder.ckpt", "autoencoder checkpoint"), cfg)
    denoiser = pipeline.load_denoiser(_require(ckdir / "denoiser.ckpt", "denoiser checkpoint"), cfg)
    finetuned = pipeline.load_autoencoder(
        _require(ckdir / "decoder_finetuned.ckpt", "fine-tuned decoder checkpoint"), cfg
    )
    out = pipeline.results_dir(cfg) / "ablate"
    _prepare_outdir(out, cfg)
    indices = pipeline.split_indices(cfg, "heldout")
    seqs = {i: pipeline.read_sequence(root, i) for i in indices}

    latents = {}
    for mds in (False, True):
        for idx in indices:
            rng = Prng(pipeline.derive_seed(cfg.run.seed, f"ablate-{idx}"))
            lat, _ = pipeline.sample_one(denoiser, autoenc, seqs[idx], cfg, mds, rng)
            latents[(mds, idx)] = lat
        _log(f"ablate: sampled held-out split with mds={'on' if mds else 'off'}")

    rows = []
    for mds in (False, True):
        for tsd in (False, True):
            model = finetuned if tsd else autoenc
            cell_dir = out / f"mds{int(mds)}_tsd{int(tsd)}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            cell_rows = []
            for idx in indices:
                decoded = pipeline.decode_stored_latents(model, latents[(mds, idx)], seqs[idx], cfg)
                seq_dir = cell_dir / pipeline.seq_dirname(idx)
                seq_dir.mkdir(parents=True, exist_ok=True)
                for i in range(decoded.n_frames):
                    flowio.write_frame(seq_dir / f"frame_{i:03d}.ppm", decoded.data[i])
                cell_rows.append(pipeline.evaluate_sequence(decoded, seqs[idx]))
            rows.append(
                {
                    "mds": int(mds),
                    "tsd": int(tsd),
                    "we": float(np.mean([r["we"] for r in cell_rows])),
                    "psnr": float(np.mean([r["psnr"] for r in cell_rows])),
                    "ssim": float(np.mean([r["ssim"] for r in cell_rows])),
                    "n_sequences": len(cell_rows),
                }
            )
            _log(
                f"ablate: mds={int(mds)} tsd={int(tsd)} we={rows[-1]['we']:.2f} "
                f"psnr={rows[-1]['psnr']:.2f}"
            )
    _write_csv(out / "ablation.csv", ["mds", "tsd", "we", "psnr", "ssim", "n_sequences"], rows)
    _log(f"ablate: wrote {out / 'ablation.csv'}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    report = run_gradcheck(cfg.run.seed, args.instances, args.corrupt)
    out = pipeline.results_dir(cfg) / "gradcheck"
    _prepare_outdir(out, cfg)
    (out / "report.txt").write_text("\n".join(report.lines()) + "\n")
    for line in report.lines():
        _log(f"gradcheck: {line}")
    if not report.passed:
        raise CheckFailure("gradient checks exceeded tolerance")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="master u64 seed override")
    common.add_argument("--workers", type=int, default=None, help="parallel worker count")
    common.add_argument("--out", type=str, default=None, help="workdir override")

    parser = _Parser(prog="flowsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common])
    sub.add_parser("train-denoiser", parents=[common])
    p_sample = sub.add_parser("sample", parents=[common])
    p_sample.add_argument("--split", choices=["train", "heldout", "all"], default=None)
    sub.add_parser("finetune-decoder", parents=[common])
    p_eval = sub.add_parser("evaluate", parents=[common])
    p_eval.add_argument("--results", type=str, default=None, help="decoded-frames directory")
    p_eval.add_argument("--split", choices=["train", "heldout", "all"], default=None)
    sub.add_parser("ablate", parents=[common])
    p_grad = sub.add_parser("gradcheck", parents=[common])
    p_grad.add_argument("--instances", type=int, default=50)
    p_grad.add_argument("--corrupt", type=float, default=0.0,
                        help="perturb the analytic gradient (negative-control hook)")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train-denoiser": cmd_train_denoiser,
    "sample": cmd_sample,
    "finetune-decoder": cmd_finetune_decoder,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.workers is not None:
        overrides["run.workers"] = args.workers
    cfg = load_config(args.config, overrides)
    if args.out is not None:
        cfg.paths.workdir = args.out
    return COMMANDS[args.command](cfg, args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        _log(f"error: {exc}")
        return 1
    except (CheckFailure, AssertionError) as exc:
        _log(f"check failed: {exc}")
        return 2
    except OSError as exc:
        _log(f"io error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
