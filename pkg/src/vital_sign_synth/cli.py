"""Command line: generate corpora, run the classical baseline, train,
infer and evaluate."""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from vital_sign_synth import __version__, formats
from vital_sign_synth.configs import (
    DspConfig,
    EvalConfig,
    FrequencyRange,
    RateMethod,
    RunConfig,
    Task,
    load_run_config,
    report_window_frames,
    validation_context,
)
from vital_sign_synth.dsp import (
    baseline_rate,
    detect_peaks,
    fill_missing_boxes,
    mean_roi_signal,
)
from vital_sign_synth.errors import (
    FormatError,
    InsufficientPeaksError,
    ParameterError,
    TrainingDivergedError,
    VitalSignError,
)
from vital_sign_synth.evaluation import (
    RateAnnotation,
    aggregate_roi_metrics,
    format_table,
    mask_iou,
    windowed_rate_eval,
)
from vital_sign_synth.model import (
    build_model,
    infer_rate,
    make_loader,
    predict,
    train_model,
)
from vital_sign_synth.scene_synth import generate_video

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"


def _report_outputs(paths: Sequence[Path]) -> None:
    """Final line declaring every file a command wrote."""
    print("outputs: " + " ".join(str(p) for p in paths))


def _sample_name(seed: int) -> str:
    """File stem of a generated sample."""
    return f"sample_{seed:06d}"


def _generate_one(config_json: str, seed: int, out_dir: str) -> tuple:
    """Worker: write one sample and return its manifest fields."""
    run = RunConfig.model_validate_json(config_json)
    cfg = run.video.model_copy(update={"seed": seed})
    sample = generate_video(cfg)
    out = Path(out_dir)
    name = _sample_name(seed)
    formats.write_vsv(out / f"{name}.vsv", sample.frames, cfg.fs)
    formats.write_sidecar(out / f"{name}.json", sample)
    formats.write_boxes(out / f"{name}.boxes.txt", sample.bounding_boxes())
    digest = formats.file_sha256(out / f"{name}.vsv")
    logging.info(f"Wrote {name} ({sample.gt_rate:.2f} BPM)")
    return f"{name}.vsv", digest, sample.gt_rate


def cmd_generate(args: argparse.Namespace) -> List[Path]:
    """Write count samples with consecutive seeds plus a manifest."""
    run = load_run_config(args.config)
    if args.count < 0:
        raise ParameterError(f"count must be >= 0, got {args.count}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [run.seed + i for i in range(args.count)]
    config_json = run.model_dump_json()
    if args.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(
                pool.map(
                    _generate_one,
                    [config_json] * len(seeds),
                    seeds,
                    [str(out)] * len(seeds),
                )
            )
    else:
        results = [_generate_one(config_json, s, str(out)) for s in seeds]
    entries = [formats.ManifestEntry(*fields) for fields in results]
    manifest = out / "manifest.tsv"
    formats.write_manifest(manifest, entries)
    written = []
    for seed in seeds:
        name = _sample_name(seed)
        written += [
            out / f"{name}.vsv",
            out / f"{name}.json",
            out / f"{name}.boxes.txt",
        ]
    return written + [manifest]


def _dsp_config(run: RunConfig, args: argparse.Namespace) -> DspConfig:
    """Document settings overridden by command line flags."""
    update = {}
    if args.band is not None:
        update["band"] = FrequencyRange.parse(args.band)
    if args.rate_band is not None:
        update["rate_band"] = FrequencyRange.parse(args.rate_band)
    if args.method is not None:
        update["method"] = RateMethod(args.method)
    return DspConfig.model_validate({**run.dsp.model_dump(), **update})


def cmd_analyze(args: argparse.Namespace) -> List[Path]:
    """Classical baseline on one video with per-frame ROI boxes."""
    run = load_run_config(args.config)
    dsp_config = _dsp_config(run, args)
    video = formats.load_video(args.input, args.fs)
    boxes = formats.parse_boxes(args.boxes)
    missing = sum(box is None for box in boxes)
    if missing:
        logging.warning(f"Carrying boxes over {missing} empty frames")
    boxes = fill_missing_boxes(boxes)
    series = mean_roi_signal(video.frames, boxes, video.fs)
    result = baseline_rate(series, dsp_config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    signal_path = out / f"{stem}.signal.csv"
    formats.write_series_csv(signal_path, result.stages["bandpassed"])
    written = [signal_path]
    if args.dump_stages:
        for name, stage in result.stages.items():
            path = out / f"{stem}.{name}.csv"
            formats.write_series_csv(path, stage)
            written.append(path)
    print(f"rate: {result.rate:.2f} BPM ({dsp_config.method.value})")
    return written


def cmd_train(args: argparse.Namespace) -> List[Path]:
    """Train on streamed synthetic videos, checkpointing periodically."""
    run = load_run_config(args.config)
    steps = run.training.steps if args.steps is None else args.steps
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_path = Path(args.loss_csv or out.with_suffix(".loss.csv"))
    model, start_step, previous = None, 0, []
    if args.resume is not None:
        checkpoint = formats.load_checkpoint(args.resume)
        if checkpoint.config != run.model:
            raise ParameterError(
                "Checkpoint model config differs from the run config"
            )
        model, start_step = checkpoint.model, checkpoint.step
        if loss_path.is_file():
            previous = [
                row
                for row in formats.read_loss_csv(loss_path)
                if row["step"] < start_step
            ]
    if model is None:
        model = build_model(run.model, run.seed)
    formats.save_checkpoint(out, model, start_step)

    def on_step(step: int, net) -> None:
        """Periodic checkpoint."""
        if step % run.training.checkpoint_every == 0:
            formats.save_checkpoint(out, net, step)

    start_seed = run.video.seed + start_step * run.model.batch_size
    loader = make_loader(
        run.video,
        run.model.batch_size,
        start_seed,
        num_workers=run.training.num_workers,
        prefetch_factor=run.training.prefetch_factor,
    )
    try:
        result = train_model(
            run.model,
            loader,
            steps,
            seed=run.seed,
            model=model,
            start_step=start_step,
            log_every=run.training.log_every,
            on_step=on_step,
        )
    except TrainingDivergedError as e:
        formats.write_loss_csv(loss_path, previous + e.trace)
        raise
    formats.save_checkpoint(out, result.model, start_step + steps)
    formats.write_loss_csv(loss_path, previous + result.trace)
    return [out, loss_path]


def cmd_infer(args: argparse.Namespace) -> List[Path]:
    """Predicted signal, ROI and rate of one video."""
    video = formats.load_video(args.input, args.fs)
    frames = video.frames
    checkpoint = _load_checkpoint_for(args.checkpoint, frames)
    try:
        result = infer_rate(
            checkpoint.model,
            frames,
            video.fs,
            min_distance=args.min_distance,
            threshold=args.threshold,
        )
    except InsufficientPeaksError as e:
        logging.warning(f"No rate: {e}")
        result = predict(checkpoint.model, frames, video.fs, args.threshold)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    signal_path = out / f"{stem}.pred.csv"
    plot_path = out / f"{stem}.plot.csv"
    summary_path = out / f"{stem}.infer.json"
    formats.write_series_csv(signal_path, result.signal)
    formats.write_plot_csv(plot_path, result.signal, result.peaks)
    summary = {
        "rate": result.rate,
        "peaks": result.peaks,
        "roi_fraction": float(result.roi.mean()),
    }
    summary_path.write_text(json.dumps(summary, indent=2))
    rate = "n/a" if result.rate is None else f"{result.rate:.2f} BPM"
    print(f"rate: {rate}")
    return [signal_path, plot_path, summary_path]


def _load_checkpoint_for(
    path: str, frames: np.ndarray
) -> formats.Checkpoint:
    """Restore a checkpoint, rejecting one built for another frame size."""
    with validation_context({"frame_shape": tuple(frames.shape[1:])}):
        return formats.load_checkpoint(path)


def _eval_config(run: RunConfig, args: argparse.Namespace) -> EvalConfig:
    """Document settings overridden by command line flags."""
    data = run.evaluation.model_dump(exclude_none=True)
    if args.task is not None:
        data["task"] = Task(args.task)
        data.pop("window", None)
    for name in ("window", "stride", "min_distance"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    return EvalConfig.model_validate(data)


def _read_events(path: Path) -> List[int]:
    """One event frame index per line."""
    events = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            events.append(int(line))
        except ValueError:
            raise FormatError(
                f"Invalid frame index {line!r}", str(path), lineno
            )
    return events


def cmd_evaluate(args: argparse.Namespace) -> List[Path]:
    """Windowed rate errors, plus ROI metrics when references exist."""
    run = load_run_config(args.config)
    eval_config = _eval_config(run, args)
    video = formats.load_video(args.input, args.fs)
    checkpoint = _load_checkpoint_for(args.checkpoint, video.frames)
    result = predict(checkpoint.model, video.frames, video.fs, args.threshold)
    num_frames = len(result.signal)
    annotation, sidecar = None, None
    if args.annotation is not None:
        path = Path(args.annotation)
        if path.suffix == ".json":
            sidecar = formats.read_sidecar(path)
            annotation = RateAnnotation.from_signal_spec(
                sidecar.target_spec, num_frames
            )
        else:
            annotation = RateAnnotation(
                fs=video.fs, event_times=_read_events(path)
            )
    labels = None
    if args.labels is not None:
        labels = [
            line.strip()
            for line in Path(args.labels).read_text().splitlines()
            if line.strip()
        ]
    report = windowed_rate_eval(
        result.signal,
        annotation,
        eval_config.window,
        report_window=report_window_frames(eval_config, video.fs),
        stride=eval_config.stride,
        min_distance=eval_config.min_distance,
        labels=labels,
    )
    extras = dict(report.extras)
    if args.boxes is not None:
        boxes = formats.parse_boxes(args.boxes)
        roi = aggregate_roi_metrics(result.roi, boxes)
        extras.update({f"roi_{k}": v for k, v in roi.items()})
    if sidecar is not None:
        extras["mask_iou"] = float(
            np.mean(
                [
                    mask_iou(p, g)
                    for p, g in zip(result.roi, sidecar.gt_masks)
                ]
            )
        )
    report = report.model_copy(update={"extras": extras})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    json_path = out / f"{stem}.metrics.json"
    csv_path = out / f"{stem}.metrics.csv"
    formats.write_metrics_json(json_path, report)
    formats.write_metrics_csv(csv_path, report)
    written = [json_path, csv_path]
    if args.plot:
        plot_path = out / f"{stem}.plot.csv"
        peaks = []
        for row in report.per_window:
            stop = row.start + eval_config.window
            window = result.signal.values[row.start : stop]
            peaks += [
                row.start + p
                for p in detect_peaks(window, eval_config.min_distance)
            ]
        formats.write_plot_csv(plot_path, result.signal, peaks)
        written.append(plot_path)
    print(format_table(report))
    return written


def cmd_schema(args: argparse.Namespace) -> List[Path]:
    """Print or write the JSON schema of the run document."""
    text = json.dumps(RunConfig.model_json_schema(), indent=2)
    if args.out is None:
        print(text)
        return []
    path = Path(args.out)
    path.write_text(text + "\n")
    return [path]


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per pipeline stage."""
    parser = argparse.ArgumentParser(
        prog="vsynth",
        description="Synthetic vital-sign videos, baseline and model.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="write synthetic videos")
    generate.add_argument("--config", help="run config JSON")
    generate.add_argument("--count", type=int, default=1)
    generate.add_argument("--out", required=True, help="output directory")
    generate.add_argument("--workers", type=int, default=1)
    generate.set_defaults(func=cmd_generate)

    analyze = commands.add_parser("analyze", help="classical baseline")
    analyze.add_argument("input", help="VSV file or frame directory")
    analyze.add_argument("--boxes", required=True, help="ROI box per frame")
    analyze.add_argument("--config", help="run config JSON")
    analyze.add_argument("--band", help="band-pass interval lo:hi (Hz)")
    analyze.add_argument(
        "--rate-band", help="interval searched for the DFT maximum lo:hi"
    )
    analyze.add_argument("--method", choices=[m.value for m in RateMethod])
    analyze.add_argument("--fs", type=float, help="frame rate (Hz)")
    analyze.add_argument("--dump-stages", action="store_true")
    analyze.add_argument("--out-dir", default=".")
    analyze.set_defaults(func=cmd_analyze)

    train = commands.add_parser("train", help="train the model")
    train.add_argument("--config", help="run config JSON")
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--loss-csv", help="loss trace path")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--steps", type=int, help="override training.steps")
    train.set_defaults(func=cmd_train)

    for name, func, text in (
        ("infer", cmd_infer, "predict signal, ROI and rate"),
        ("evaluate", cmd_evaluate, "score predictions"),
    ):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("checkpoint")
        sub.add_argument("input", help="VSV file or frame directory")
        sub.add_argument("--fs", type=float, help="frame rate (Hz)")
        sub.add_argument("--threshold", type=float, default=0.5)
        sub.add_argument("--out-dir", default=".")
        sub.set_defaults(func=func)
        if name == "infer":
            sub.add_argument("--min-distance", type=int, default=40)
            continue
        sub.add_argument("--config", help="run config JSON")
        sub.add_argument(
            "--annotation", help="sidecar JSON or event index file"
        )
        sub.add_argument("--boxes", help="reference box per frame")
        sub.add_argument("--labels", help="one window label per line")
        sub.add_argument("--task", choices=[t.value for t in Task])
        sub.add_argument("--window", type=int)
        sub.add_argument("--stride", type=int)
        sub.add_argument("--min-distance", type=int)
        sub.add_argument("--plot", action="store_true")

    schema = commands.add_parser("schema", help="run config JSON schema")
    schema.add_argument("--out", help="write to a file instead of stdout")
    schema.set_defaults(func=cmd_schema)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.
    Parameters
    ----------
    argv : Optional[Sequence[str]]

    Returns
    -------
    int
      0 on success, 1 on a runtime failure, 2 on a usage or config error.

    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        written = args.func(args)
    except (ValidationError, ParameterError, FormatError) as e:
        logging.error(str(e))
        return EXIT_USAGE
    except FileNotFoundError as e:
        logging.error(str(e))
        return EXIT_USAGE
    except (VitalSignError, OSError) as e:
        logging.error(str(e))
        return EXIT_RUNTIME
    _report_outputs(written)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
