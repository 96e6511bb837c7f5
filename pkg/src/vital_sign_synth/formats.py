"""Readers and writers for every file the command line produces or
consumes."""

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import cv2
import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, ValidationError

from vital_sign_synth.configs import ModelConfig, VideoConfig
from vital_sign_synth.dsp import Box
from vital_sign_synth.errors import FormatError
from vital_sign_synth.evaluation import MetricsReport
from vital_sign_synth.model import VSignNet
from vital_sign_synth.scene_synth import VideoSample
from vital_sign_synth.signal_models import SignalSpec, TimeSeries

PathLike = Union[str, Path]

VSV_MAGIC = b"VSV1"
VSV_FLOAT32 = 0
# magic, width, height, num_frames, fs, dtype tag
_VSV_HEADER = struct.Struct("<4sIIIfB")

CHECKPOINT_MAGIC = b"VSNP"
CHECKPOINT_VERSION = 1
_TENSOR_DTYPES = {0: "<f4", 1: "<i8"}

FRAME_EXTENSIONS = (".png", ".tif", ".tiff", ".pgm")

LOSS_COLUMNS = [
    "step",
    "total",
    "signal_local",
    "signal_global",
    "roi_local",
    "roi_global",
]


class Video(NamedTuple):
    """Frames in [0, 1] and their sampling rate."""

    frames: np.ndarray
    fs: float


class Sidecar(BaseModel):
    """Ground truth stored next to a generated video."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    gt_signal: TimeSeries
    gt_rate: float
    gt_masks: np.ndarray
    target_spec: SignalSpec
    distractor_specs: List[SignalSpec] = []
    config: VideoConfig


class ManifestEntry(NamedTuple):
    """One generated sample."""

    path: str
    sha256: str
    gt_rate: float


class Checkpoint(NamedTuple):
    """Model restored from disk and the step it was saved at."""

    model: VSignNet
    config: ModelConfig
    step: int


def _write_atomic(path: PathLike, data: bytes) -> None:
    """Write through a temporary file so readers never see partial data."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_bytes(path: PathLike) -> bytes:
    """Read a whole file, mapping a missing file to FileNotFoundError."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No such file: {path}")
    return path.read_bytes()


def write_vsv(path: PathLike, frames: np.ndarray, fs: float) -> None:
    """
    Write frames as a VSV container: header, then float32 little-endian
    payload, frame-major and row-major.
    Parameters
    ----------
    path : PathLike
    frames : np.ndarray
      (T, H, W) with values in [0, 1].
    fs : float

    Returns
    -------
    None

    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise FormatError(f"Expected (T, H, W) frames, got {frames.shape}")
    if frames.size and (frames.min() < 0 or frames.max() > 1):
        raise FormatError("Frame values must lie in [0, 1]")
    num_frames, height, width = frames.shape
    header = _VSV_HEADER.pack(
        VSV_MAGIC, width, height, num_frames, fs, VSV_FLOAT32
    )
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    _write_atomic(path, header + payload)


def read_vsv(path: PathLike) -> Video:
    """
    Read a VSV container.
    Parameters
    ----------
    path : PathLike

    Returns
    -------
    Video
      Frames as float32 (T, H, W).

    """
    data = _read_bytes(path)
    if len(data) < _VSV_HEADER.size:
        raise FormatError("Truncated VSV header", str(path))
    magic, width, height, num_frames, fs, tag = _VSV_HEADER.unpack_from(data)
    if magic != VSV_MAGIC:
        raise FormatError(f"Bad magic {magic!r}", str(path))
    if tag != VSV_FLOAT32:
        raise FormatError(f"Unsupported dtype tag {tag}", str(path))
    expected = num_frames * height * width * 4
    payload = data[_VSV_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"Payload has {len(payload)} bytes, expected {expected}",
            str(path),
        )
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Video(frames.reshape(num_frames, height, width), float(fs))


def load_frame_dir(path: PathLike, fs: float) -> Video:
    """
    Load a directory of grayscale images named by zero-padded frame index
    and min-max normalise the whole video to [0, 1].
    Parameters
    ----------
    path : PathLike
    fs : float

    Returns
    -------
    Video

    """
    path = Path(path)
    files = [
        f
        for f in path.iterdir()
        if f.suffix.lower() in FRAME_EXTENSIONS and f.stem.isdigit()
    ]
    if not files:
        raise FormatError("No indexed frame images found", str(path))
    files.sort(key=lambda f: int(f.stem))
    frames = []
    for f in files:
        image = cv2.imread(str(f), cv2.IMREAD_UNCHANGED)
        if image is None:
            raise FormatError("Unreadable image", str(f))
        if image.ndim != 2:
            raise FormatError(
                f"Expected a grayscale image, got shape {image.shape}", str(f)
            )
        frames.append(image)
    shapes = {frame.shape for frame in frames}
    if len(shapes) != 1:
        raise FormatError(
            f"Frames differ in size: {sorted(shapes)}", str(path)
        )
    video = np.stack(frames).astype(np.float64)
    lo, hi = video.min(), video.max()
    if hi > lo:
        video = (video - lo) / (hi - lo)
    else:
        video = np.zeros_like(video)
    return Video(video.astype(np.float32), float(fs))


def load_video(path: PathLike, fs: Optional[float] = None) -> Video:
    """VSV file or frame directory. fs is required for directories and
    overrides the container's rate when given."""
    path = Path(path)
    if path.is_dir():
        if fs is None:
            raise FormatError("A frame directory needs --fs", str(path))
        return load_frame_dir(path, fs)
    video = read_vsv(path)
    if fs is not None:
        video = video._replace(fs=float(fs))
    return video


def parse_boxes(path: PathLike) -> List[Optional[Box]]:
    """
    One box per frame, 'x0,y0,x1,y1' (commas or whitespace). A '-' line
    marks a frame without a box; blank lines and '#' comments are skipped.
    Parameters
    ----------
    path : PathLike

    Returns
    -------
    List[Optional[Box]]

    """
    text = _read_bytes(path).decode("utf-8")
    boxes: List[Optional[Box]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "-":
            boxes.append(None)
            continue
        fields = line.replace(",", " ").split()
        if len(fields) != 4:
            raise FormatError(
                f"Expected 4 box coordinates, got {len(fields)}",
                str(path),
                lineno,
            )
        try:
            x0, y0, x1, y1 = (int(v) for v in fields)
            boxes.append(Box(x0=x0, y0=y0, x1=x1, y1=y1))
        except (ValueError, ValidationError) as e:
            raise FormatError(f"Invalid box: {e}", str(path), lineno)
    return boxes


def write_boxes(path: PathLike, boxes: Sequence[Optional[Box]]) -> None:
    """Inverse of parse_boxes."""
    lines = ["# x0,y0,x1,y1 per frame"]
    for box in boxes:
        if box is None:
            lines.append("-")
        else:
            lines.append(f"{box.x0},{box.y0},{box.x1},{box.y1}")
    _write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def encode_rle(mask: np.ndarray) -> List[int]:
    """Run lengths of a row-major flattened boolean mask, starting with a
    (possibly empty) run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    edges = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def decode_rle(counts: Sequence[int], shape: Sequence[int]) -> np.ndarray:
    """Inverse of encode_rle."""
    size = int(np.prod(shape))
    if sum(counts) != size:
        raise FormatError(
            f"Run lengths sum to {sum(counts)}, expected {size}"
        )
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


def write_sidecar(path: PathLike, sample: VideoSample) -> None:
    """Ground truth of a sample as JSON with run-length encoded masks."""
    document = {
        "gt_rate": sample.gt_rate,
        "fs": sample.gt_signal.fs,
        "gt_signal": sample.gt_signal.values.tolist(),
        "masks": {
            "shape": list(sample.gt_masks.shape),
            "rle": [encode_rle(mask) for mask in sample.gt_masks],
        },
        "target_spec": sample.target_spec.model_dump(mode="json"),
        "distractor_specs": [
            spec.model_dump(mode="json") for spec in sample.distractor_specs
        ],
        "config": sample.config.model_dump(mode="json"),
    }
    text = json.dumps(document, indent=1, sort_keys=True)
    _write_atomic(path, text.encode("utf-8"))


def read_sidecar(path: PathLike) -> Sidecar:
    """
    Read a sidecar written by write_sidecar.
    Parameters
    ----------
    path : PathLike

    Returns
    -------
    Sidecar

    """
    try:
        document = json.loads(_read_bytes(path))
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON: {e.msg}", str(path), e.lineno)
    try:
        shape = document["masks"]["shape"]
        masks = np.stack(
            [decode_rle(c, shape[1:]) for c in document["masks"]["rle"]]
        )
        return Sidecar(
            gt_signal=TimeSeries(
                values=document["gt_signal"], fs=document["fs"]
            ),
            gt_rate=document["gt_rate"],
            gt_masks=masks.reshape(shape),
            target_spec=document["target_spec"],
            distractor_specs=document.get("distractor_specs", []),
            config=document["config"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed sidecar: {e}", str(path))


def file_sha256(path: PathLike) -> str:
    """Hex digest of a file's contents."""
    return hashlib.sha256(_read_bytes(path)).hexdigest()


def write_manifest(path: PathLike, entries: Sequence[ManifestEntry]) -> None:
    """Tab-separated relative path, checksum and gt_rate per line."""
    lines = [f"{e.path}\t{e.sha256}\t{e.gt_rate!r}" for e in entries]
    text = "".join(line + "\n" for line in lines)
    _write_atomic(path, text.encode("utf-8"))


def read_manifest(path: PathLike) -> List[ManifestEntry]:
    """Inverse of write_manifest."""
    entries = []
    text = _read_bytes(path).decode("utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(
                "Expected 3 tab-separated fields", str(path), lineno
            )
        try:
            entries.append(
                ManifestEntry(fields[0], fields[1], float(fields[2]))
            )
        except ValueError:
            raise FormatError("Invalid gt_rate", str(path), lineno)
    return entries


def write_series_csv(path: PathLike, series: TimeSeries) -> None:
    """Two columns (frame_index, value) after a '# fs=<Hz>' comment."""
    buffer = io.StringIO()
    buffer.write(f"# fs={series.fs!r}\n")
    pd.DataFrame(
        {"frame_index": np.arange(len(series)), "value": series.values}
    ).to_csv(buffer, index=False)
    _write_atomic(path, buffer.getvalue().encode("utf-8"))


def read_series_csv(path: PathLike) -> TimeSeries:
    """Inverse of write_series_csv."""
    text = _read_bytes(path).decode("utf-8")
    first, _, rest = text.partition("\n")
    if not first.startswith("# fs="):
        raise FormatError("Missing '# fs=' line", str(path), 1)
    try:
        fs = float(first[len("# fs=") :])
    except ValueError:
        raise FormatError("Invalid sampling rate", str(path), 1)
    table = pd.read_csv(io.StringIO(rest))
    if list(table.columns) != ["frame_index", "value"]:
        raise FormatError(
            f"Unexpected columns {list(table.columns)}", str(path), 2
        )
    return TimeSeries(values=table["value"].to_numpy(), fs=fs)


def write_loss_csv(path: PathLike, trace: Sequence[Dict[str, float]]) -> None:
    """One row per training step."""
    table = pd.DataFrame(list(trace), columns=LOSS_COLUMNS)
    table["step"] = table["step"].astype(int)
    _write_atomic(path, table.to_csv(index=False).encode("utf-8"))


def read_loss_csv(path: PathLike) -> List[Dict[str, float]]:
    """Inverse of write_loss_csv."""
    table = pd.read_csv(path)
    return table.to_dict(orient="records")


def write_metrics_json(path: PathLike, report: MetricsReport) -> None:
    """Full report as JSON; NaN becomes null."""
    _write_atomic(path, report.model_dump_json(indent=2).encode("utf-8"))


def write_metrics_csv(path: PathLike, report: MetricsReport) -> None:
    """Flat per-window rows."""
    table = pd.DataFrame(
        [row._asdict() for row in report.per_window],
        columns=["start", "predicted", "reference", "label"],
    )
    _write_atomic(path, table.to_csv(index=False).encode("utf-8"))


def write_plot_csv(
    path: PathLike, series: TimeSeries, peaks: Sequence[int]
) -> None:
    """(frame, signal, peak_flag) rows for plotting a predicted signal."""
    flags = np.zeros(len(series), dtype=int)
    flags[list(peaks)] = 1
    table = pd.DataFrame(
        {
            "frame": np.arange(len(series)),
            "signal": series.values,
            "peak_flag": flags,
        }
    )
    _write_atomic(path, table.to_csv(index=False).encode("utf-8"))


def _tensor_record(name: str, tensor: torch.Tensor) -> bytes:
    """name length, name, dtype tag, rank, dims, little-endian payload."""
    if tensor.dtype.is_floating_point:
        tag = 0
    elif tensor.dtype in (torch.int64, torch.int32):
        tag = 1
    else:
        raise FormatError(f"Unsupported dtype {tensor.dtype} for {name}")
    array = tensor.detach().cpu().numpy().astype(_TENSOR_DTYPES[tag])
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded
    header += struct.pack("<BB", tag, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def save_checkpoint(path: PathLike, model: VSignNet, step: int) -> None:
    """
    Write a VSNP checkpoint: magic, version, JSON config echo with the
    step, then every state_dict tensor.
    Parameters
    ----------
    path : PathLike
    model : VSignNet
    step : int
      Completed training steps.

    Returns
    -------
    None

    """
    echo = json.dumps(
        {"model": model.config.model_dump(mode="json"), "step": step},
        sort_keys=True,
    ).encode("utf-8")
    state = model.state_dict()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(echo)),
        echo,
        struct.pack("<I", len(state)),
    ]
    parts += [_tensor_record(name, t) for name, t in state.items()]
    _write_atomic(path, b"".join(parts))


class _Reader:
    """Cursor over checkpoint bytes."""

    def __init__(self, data: bytes, path: str) -> None:
        """Start at the beginning of data."""
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        """Next size bytes."""
        if self.offset + size > len(self.data):
            raise FormatError("Truncated checkpoint", self.path)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        """Next struct fields."""
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_tensors(path: PathLike) -> tuple:
    """(config echo dict, {name: tensor}) of a VSNP file."""
    reader = _Reader(_read_bytes(path), str(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("Bad checkpoint magic", str(path))
    version, echo_size = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported version {version}", str(path))
    echo = json.loads(reader.take(echo_size).decode("utf-8"))
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_size,) = reader.unpack("<H")
        name = reader.take(name_size).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in _TENSOR_DTYPES:
            raise FormatError(f"Unknown dtype tag {tag}", str(path))
        dims = reader.unpack(f"<{rank}I")
        dtype = np.dtype(_TENSOR_DTYPES[tag])
        size = int(np.prod(dims)) * dtype.itemsize
        array = np.frombuffer(reader.take(size), dtype=dtype).reshape(dims)
        tensors[name] = torch.from_numpy(array.copy())
    if reader.offset != len(reader.data):
        raise FormatError("Trailing bytes after tensors", str(path))
    return echo, tensors


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Rebuild the model stored in a VSNP checkpoint.
    Parameters
    ----------
    path : PathLike

    Returns
    -------
    Checkpoint

    """
    echo, tensors = read_checkpoint_tensors(path)
    config = ModelConfig.model_validate(echo["model"])
    model = VSignNet(config)
    try:
        model.load_state_dict(tensors)
    except RuntimeError as e:
        raise FormatError(f"Checkpoint does not match its config: {e}")
    model.eval()
    return Checkpoint(model=model, config=config, step=int(echo["step"]))
