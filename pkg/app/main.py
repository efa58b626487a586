import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

# Thread caps must be exported before numpy loads its BLAS
RAP_THREADS = os.getenv("RAP_THREADS")
if RAP_THREADS:
    os.environ.setdefault("OMP_NUM_THREADS", RAP_THREADS)
    os.environ.setdefault("OPENBLAS_NUM_THREADS", RAP_THREADS)

RAP_LOG_LEVEL = os.getenv("RAP_LOG_LEVEL", "INFO").upper()

# Configure logging with explicit format and stream
logging.basicConfig(
    level=getattr(logging, RAP_LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stdout  # Ensure logs go to stdout not stderr
)
logger = logging.getLogger(__name__)


# Filter out Pillow's per-chunk PNG/PPM debug records
class SuppressChunkDebugFilter(logging.Filter):
    def filter(self, record):
        return not record.getMessage().startswith("STREAM")


pil_logger = logging.getLogger('PIL')
pil_logger.addFilter(SuppressChunkDebugFilter())
pil_logger.setLevel(max(logging.WARNING, logger.getEffectiveLevel()))

import sentry_sdk

from .ablations import AblationContext, get_ablation_definition, get_ablation_names
from .ablations.cfg_scale import DEFAULT_VALUES as DEFAULT_CFG_VALUES
from .ablations.overlap import DEFAULT_VALUES as DEFAULT_OVERLAP_VALUES
from .audio_features import read_wav
from .errors import DataError, RapError, UsageError
from .flow_matching import DEFAULT_CFG_SCALE
from .inference import StreamConfig, generate_stream, load_denoiser, write_timings_csv
from .latent_codec import export_frame_ppm, load_reference_image, read_mask, read_video, write_video
from .metrics import (
    boundary_discontinuity,
    drift_curve,
    export_heatmap_pgm,
    mask_region,
    motion_heatmap,
    sync_correlation,
    throughput_bench,
    write_metrics_csv,
)
from .persistence import ConfigValue, load_config_file
from .toy_dataset import DEFAULT_FPS, DEFAULT_FRAMES, DEFAULT_RES, ToyCorpus, default_workers, write_corpus
from .training import RunConfig, load_run, train_loop

# Initialize Sentry for error monitoring (only if DSN is configured)
if os.getenv("SENTRY_DSN"):
    sentry_sdk.init(
        dsn=os.getenv("SENTRY_DSN"),
        environment=os.getenv("SENTRY_ENVIRONMENT", "development"),
        traces_sample_rate=0.0,
    )
    logger.info("Sentry error monitoring initialized")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got '{text}'") from None


def _load_run_config(path: str, overrides: Dict[str, Any]) -> RunConfig:
    """Config file values with CLI overrides applied on top"""
    values = load_config_file(path)
    for key, value in overrides.items():
        if value is not None:
            values[key] = ConfigValue(str(value))
    return RunConfig.from_values(values)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args: argparse.Namespace) -> None:
    manifest = write_corpus(
        args.out,
        count=args.count,
        seed=args.seed,
        frames=args.frames,
        fps=args.fps,
        res=args.res,
        r_f=args.r_f,
        heldout=args.heldout,
        workers=args.workers or default_workers() or 1,
    )
    logger.info(f"Manifest: {manifest}")


def cmd_train(args: argparse.Namespace) -> None:
    run = _load_run_config(args.config, {"steps": args.steps, "seed": args.seed})
    corpus = ToyCorpus(args.data, run)
    logger.info(f"Training {run.train.steps} steps on {len(corpus)} samples (seed {run.train.seed})")
    ckpt = train_loop(corpus, run, args.out, resume_from=args.resume, loss_log=args.log, progress=sys.stderr.isatty())
    logger.info(f"Finished at step {ckpt.meta['step']}: {args.out}")


def cmd_generate(args: argparse.Namespace) -> None:
    run, model = load_denoiser(args.ckpt)
    codec = run.codec
    stream_cfg = StreamConfig(clips=args.clips, steps=args.steps, cfg_scale=args.cfg_scale, overlap=args.overlap, seed=args.seed)
    ref = load_reference_image(args.ref, res=codec.res)
    waveform = read_wav(args.audio)

    video, timings = generate_stream(ref, waveform, model, stream_cfg, codec)
    write_video(args.out, video)
    write_timings_csv(args.timings or f"{args.out}.timings.csv", timings)
    if args.export_frame is not None:
        export_frame_ppm(video, args.export_frame, f"{args.out}.frame{args.export_frame}.ppm")
    logger.info(f"Wrote {video.length} frames ({video.length / codec.fps:.2f}s) to {args.out}")


def _ablation_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        return _load_run_config(args.config, {"seed": args.seed})
    if args.ckpt:
        run, _, _ = load_run(args.ckpt)
        return run
    raise UsageError("ablate needs --config (to train variants) or --ckpt (to evaluate one model)")


def cmd_ablate(args: argparse.Namespace) -> None:
    names = get_ablation_names()
    chosen = [(name, getattr(args, name)) for name in names if getattr(args, name) is not None]
    if len(chosen) != 1:
        raise UsageError("choose exactly one of " + ", ".join(f"--{name}" for name in names))
    name, text = chosen[0]
    definition = get_ablation_definition(name)
    values = definition["parse"](text)

    run = _ablation_run_config(args)
    ctx = AblationContext(
        run=run,
        data_dir=args.data,
        ckpt_dir=args.ckpt_dir,
        stream=StreamConfig(clips=args.clips, steps=args.steps, cfg_scale=args.cfg_scale, overlap=args.overlap_n, seed=args.seed),
        eval_samples=args.eval_samples,
        eval_seed=args.seed,
        ckpt=args.ckpt,
        progress=sys.stderr.isatty(),
    )
    logger.info(f"{definition['display_name']}: {len(values)} settings")
    rows = definition["run"](values, ctx)
    write_metrics_csv(args.report, rows, definition["columns"])
    logger.info(f"Wrote {len(rows)} rows to {args.report}")


def _parse_region(text: str):
    parts = _int_list(text)
    if len(parts) != 4:
        raise UsageError(f"--region needs row0,row1,col0,col1, got '{text}'")
    return tuple(parts)


def cmd_metrics(args: argparse.Namespace) -> None:
    video = read_video(args.video)
    heatmap = motion_heatmap(video)
    row: Dict[str, Any] = {"frames": video.length, "motion_sum": float(heatmap.sum())}

    if args.heatmap:
        export_heatmap_pgm(heatmap, args.heatmap)
    if args.boundaries:
        row["boundary_ratio"] = boundary_discontinuity(video, _int_list(args.boundaries))
    if args.clip_len:
        drift = drift_curve(video, args.clip_len)
        row["drift_max"] = max(drift)
        row["drift_curve"] = ";".join(f"{d:.6f}" for d in drift)
    if args.audio:
        if args.region:
            region = _parse_region(args.region)
        elif args.mask:
            region = mask_region(read_mask(args.mask))
        else:
            raise DataError("sync correlation needs a mouth mask (--mask) or --region alongside --audio", path=args.video)
        sync, degenerate = sync_correlation(video, read_wav(args.audio), region)
        row["sync"] = sync
        row["sync_degenerate"] = int(degenerate)

    write_metrics_csv(args.out, [row])
    logger.info(", ".join(f"{k}={v}" for k, v in row.items()))


def cmd_bench(args: argparse.Namespace) -> None:
    run, model = load_denoiser(args.ckpt)
    stream_cfg = StreamConfig(clips=args.clips, steps=args.steps, cfg_scale=args.cfg_scale, overlap=args.overlap, seed=args.seed)
    report = throughput_bench(model, stream_cfg, run.codec, runs=args.runs, seed=args.seed)
    machine = report.pop("machine")
    logger.info(f"latents/s={report['latents_per_s']:.2f}, frames/s={report['frames_per_s']:.2f}, ms/step={report['ms_per_step']:.2f}")
    if args.out:
        write_metrics_csv(args.out, [{**report, **{f"machine_{k}": v for k, v in machine.items()}}])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _stream_flags(p: argparse.ArgumentParser, clips: int) -> None:
    p.add_argument("--clips", type=int, default=clips, help="Number of streamed clips N")
    p.add_argument("--steps", type=int, default=16, help="Euler steps T per clip")
    p.add_argument("--cfg-scale", type=float, default=DEFAULT_CFG_SCALE, help="Classifier-free guidance scale s")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rap", description="Desk-scale audio-driven portrait streaming")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="Write a synthetic talking-sprite corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=DEFAULT_FRAMES)
    p.add_argument("--fps", type=float, default=DEFAULT_FPS)
    p.add_argument("--res", type=int, default=DEFAULT_RES)
    p.add_argument("--r-f", dest="r_f", type=int, default=4, help="Temporal compression used for mask alignment")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("train", help="Train the denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.add_argument("--log", default=None, help="Loss CSV path")
    p.add_argument("--steps", type=int, default=None, help="Override config steps")
    p.add_argument("--seed", type=int, default=None, help="Override config seed")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("generate", help="Stream N clips from a reference image and audio")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=int, default=3, help="Latent overlap n")
    p.add_argument("--timings", default=None, help="Timing CSV path (default OUT.timings.csv)")
    p.add_argument("--export-frame", type=int, default=None, help="Also write this frame as PPM")
    _stream_flags(p, clips=3)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("ablate", help="Run an ablation study and write a CSV report")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--grid", default=None, help="full,window,hybrid,two-stage,params or W:DELTA entries")
    p.add_argument("--overlap", default=None, nargs="?", const=DEFAULT_OVERLAP_VALUES, help="Overlap values to sweep")
    p.add_argument("--cfg", default=None, nargs="?", const=DEFAULT_CFG_VALUES, help="CFG scales to sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", default=None, help="Checkpoint evaluated by --overlap / --cfg")
    p.add_argument("--overlap-n", type=int, default=3, help="Overlap used when it is not the swept value")
    p.add_argument("--eval-samples", type=int, default=4)
    _stream_flags(p, clips=4)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("metrics", help="Score a video")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audio", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--region", default=None, help="row0,row1,col0,col1")
    p.add_argument("--heatmap", default=None, help="PGM path for the motion heatmap")
    p.add_argument("--boundaries", default=None, help="Comma-separated seam frame indices")
    p.add_argument("--clip-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("bench", help="Measure streaming throughput")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--overlap", type=int, default=3)
    p.add_argument("--out", default=None)
    _stream_flags(p, clips=4)
    p.set_defaults(handler=cmd_bench)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except RapError as e:
        logger.error(f"{args.command} failed: {e}")
        sentry_sdk.capture_exception(e)
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} crashed: {e}", exc_info=True)
        sentry_sdk.capture_exception(e)
        return RapError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
