"""Evaluation protocol: windowed rate errors, temporal localization of
detected cycles, and ROI metrics against reference boxes or masks."""

import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from typing_extensions import Self

from vital_sign_synth.dsp import Box, detect_peaks, rate_from_peaks
from vital_sign_synth.errors import (
    EmptyPredictionError,
    InsufficientPeaksError,
    ParameterError,
)
from vital_sign_synth.signal_models import SignalSpec, TimeSeries

ALL_WINDOWS = "all"


class RateAnnotation(BaseModel):
    """Reference for one recording: annotated cycle events (inspiration
    starts, beats) or a per-frame reference rate series in BPM."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    fs: float = Field(..., gt=0, description="Sampling rate (Hz)")
    event_times: Optional[List[int]] = Field(
        default=None, description="Frame indices of cycle events"
    )
    reference_rate: Optional[List[float]] = Field(
        default=None, description="Per-frame reference rate (BPM)"
    )

    @model_validator(mode="after")
    def check_source(self) -> Self:
        """Exactly one reference; events strictly increasing."""
        if (self.event_times is None) == (self.reference_rate is None):
            raise ValueError(
                "Provide exactly one of event_times or reference_rate"
            )
        if self.event_times is not None:
            events = np.asarray(self.event_times)
            if events.size > 1 and np.any(np.diff(events) <= 0):
                raise ValueError("event_times must be strictly increasing")
        return self

    @classmethod
    def from_signal_spec(
        cls, spec: SignalSpec, length: int
    ) -> "RateAnnotation":
        """Analytic annotation: the waveform maxima of a synthetic target."""
        return cls(fs=spec.fs, event_times=spec.peak_frames(length).tolist())

    def window_rate(self, start: int, stop: int) -> Optional[float]:
        """Reference rate over frames [start, stop), None if undefined."""
        if self.reference_rate is not None:
            values = self.reference_rate[start:stop]
            return float(np.mean(values)) if len(values) else None
        events = [e for e in self.event_times if start <= e < stop]
        if len(events) < 2:
            return None
        return rate_from_peaks(events, self.fs)


class WindowRate(NamedTuple):
    """Rates of one counting window."""

    start: int
    predicted: float
    reference: Optional[float]
    label: Optional[str] = None


class MetricsReport(BaseModel):
    """Aggregated rate errors plus per-window rows."""

    mae: Optional[float] = Field(
        default=None, ge=0, description="Mean absolute error (BPM)"
    )
    std: Optional[float] = Field(
        default=None, ge=0, description="Population std of abs errors (BPM)"
    )
    per_window: List[WindowRate] = []
    extras: Dict[str, float] = {}
    groups: Dict[str, Dict[str, float]] = {}
    report_window: Optional[int] = Field(
        default=None, description="Reporting window (frames)"
    )


class LocalizationResult(NamedTuple):
    """Period-normalised offsets between annotated starts and peaks."""

    mean: float
    std: float
    median: float
    ratios: List[float]
    misses: int
    offsets_s: List[float]  # first peak minus period start, seconds


class RoiResult(NamedTuple):
    """ROI metrics of one frame."""

    iou: float
    center_hit: bool
    dc: float


def _error_stats(rows: Sequence[WindowRate]) -> Dict[str, float]:
    """MAE and population std of absolute errors."""
    errors = np.abs(
        np.array([r.predicted - r.reference for r in rows], dtype=float)
    )
    return {
        "mae": float(errors.mean()),
        "std": float(errors.std()),
        "windows": float(len(rows)),
    }


def aggregate_windows(
    rows: Sequence[WindowRate],
    report_window: Optional[int] = None,
    skipped: int = 0,
) -> MetricsReport:
    """
    Pool per-window rates into a report. Windows without a reference only
    contribute to the mean predicted rate.
    Parameters
    ----------
    rows : Sequence[WindowRate]
    report_window : Optional[int]
    skipped : int
      Windows dropped upstream for lack of peaks or events.

    Returns
    -------
    MetricsReport

    """
    rows = list(rows)
    extras = {"skipped_windows": float(skipped)}
    if rows:
        extras["mean_predicted_rate"] = float(
            np.mean([r.predicted for r in rows])
        )
    scored = [r for r in rows if r.reference is not None]
    if not scored:
        return MetricsReport(
            per_window=rows, extras=extras, report_window=report_window
        )
    overall = _error_stats(scored)
    extras["windows"] = overall["windows"]
    groups = {}
    labels = sorted({r.label for r in scored if r.label is not None})
    for label in labels:
        groups[label] = _error_stats([r for r in scored if r.label == label])
    return MetricsReport(
        mae=overall["mae"],
        std=overall["std"],
        per_window=rows,
        extras=extras,
        groups=groups,
        report_window=report_window,
    )


def windowed_rate_eval(
    pred_signal: TimeSeries,
    annotation: Optional[RateAnnotation],
    window: int,
    report_window: Optional[int] = None,
    stride: Optional[int] = None,
    min_distance: int = 40,
    labels: Optional[Sequence[Optional[str]]] = None,
) -> MetricsReport:
    """
    Count cycles of a predicted signal in fixed windows and compare them
    with the reference rate of the same windows.
    Parameters
    ----------
    pred_signal : TimeSeries
    annotation : Optional[RateAnnotation]
      None gives a rate-only report.
    window : int
      Counting window (frames).
    report_window : Optional[int]
      Reporting window (frames). Defaults to one minute.
    stride : Optional[int]
      Defaults to window (non-overlapping windows).
    min_distance : int
      Minimum frames between predicted peaks.
    labels : Optional[Sequence[Optional[str]]]
      One label per window (e.g. still or moving) for grouped errors.

    Returns
    -------
    MetricsReport

    """
    num_frames = len(pred_signal)
    if window > num_frames:
        raise ParameterError(
            f"Window of {window} frames exceeds the series ({num_frames})"
        )
    stride = window if stride is None else stride
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if report_window is None:
        report_window = int(math.floor(60 * pred_signal.fs + 0.5))
    starts = list(range(0, num_frames - window + 1, stride))
    if labels is not None and len(labels) != len(starts):
        raise ParameterError(
            f"Expected {len(starts)} window labels, got {len(labels)}"
        )
    rows: List[WindowRate] = []
    skipped = 0
    for index, start in enumerate(starts):
        stop = start + window
        peaks = detect_peaks(pred_signal.values[start:stop], min_distance)
        try:
            predicted = rate_from_peaks(peaks, pred_signal.fs)
        except InsufficientPeaksError:
            skipped += 1
            continue
        reference = None
        if annotation is not None:
            reference = annotation.window_rate(start, stop)
            if reference is None:
                skipped += 1
                continue
        label = labels[index] if labels is not None else None
        rows.append(WindowRate(start, predicted, reference, label))
    if skipped:
        logging.warning(f"Skipped {skipped} of {len(starts)} windows")
    return aggregate_windows(rows, report_window, skipped)


def temporal_localization(
    pred_peaks: Sequence[int], gt_starts: Sequence[int], fs: float
) -> LocalizationResult:
    """
    For every annotated period [start_i, start_i+1) take the predicted peak
    closest to start_i inside the period and express its offset as a
    fraction of the period length.
    Parameters
    ----------
    pred_peaks : Sequence[int]
    gt_starts : Sequence[int]
      Strictly increasing.
    fs : float
      Sampling rate of the offsets returned in seconds.

    Returns
    -------
    LocalizationResult

    """
    if len(gt_starts) < 2:
        raise ParameterError(
            f"At least 2 annotated starts are required, got {len(gt_starts)}"
        )
    starts = np.asarray(gt_starts)
    if np.any(np.diff(starts) <= 0):
        raise ParameterError("gt_starts must be strictly increasing")
    peaks = np.sort(np.asarray(pred_peaks, dtype=np.int64))
    ratios: List[float] = []
    offsets: List[float] = []
    misses = 0
    for begin, end in zip(starts[:-1], starts[1:]):
        inside = peaks[(peaks >= begin) & (peaks < end)]
        if inside.size == 0:
            misses += 1
            continue
        offset = int(inside[0] - begin)
        offsets.append(offset / fs)
        ratios.append(offset / float(end - begin))
    if misses:
        logging.warning(f"{misses} annotated periods have no predicted peak")
    if not ratios:
        return LocalizationResult(
            math.nan, math.nan, math.nan, [], misses, []
        )
    values = np.asarray(ratios)
    return LocalizationResult(
        mean=float(values.mean()),
        std=float(values.std()),
        median=float(np.median(values)),
        ratios=ratios,
        misses=misses,
        offsets_s=offsets,
    )


def mask_iou(pred: np.ndarray, ref: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1.0 if both empty."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ParameterError(f"Mask shapes differ: {pred.shape} {ref.shape}")
    union = np.logical_or(pred, ref).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, ref).sum() / union)


def roi_metrics(pred_mask: np.ndarray, ref_box: Box) -> RoiResult:
    """
    IOU with the filled reference box, whether the mask's center of mass
    falls inside the box, and the distance between the two centers.
    Parameters
    ----------
    pred_mask : np.ndarray
      (H, W) boolean.
    ref_box : Box

    Returns
    -------
    RoiResult

    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    if not pred_mask.any():
        raise EmptyPredictionError("Predicted ROI mask is empty")
    iou = mask_iou(pred_mask, ref_box.as_mask(pred_mask.shape))
    row, col = ndimage.center_of_mass(pred_mask)
    hit = (
        ref_box.y0 - 0.5 <= row < ref_box.y1 - 0.5
        and ref_box.x0 - 0.5 <= col < ref_box.x1 - 0.5
    )
    box_row, box_col = ref_box.center
    dc = float(np.hypot(row - box_row, col - box_col))
    return RoiResult(iou=iou, center_hit=bool(hit), dc=dc)


def aggregate_roi_metrics(
    masks: np.ndarray, boxes: Sequence[Optional[Box]]
) -> Dict[str, float]:
    """
    Sequence-level ROI metrics: mean IOU, center hit rate (fraction of
    frames), mean center distance. Empty predictions count as misses with
    IOU 0. Frames without a reference box are ignored.
    Parameters
    ----------
    masks : np.ndarray
      (T, H, W) boolean.
    boxes : Sequence[Optional[Box]]

    Returns
    -------
    Dict[str, float]

    """
    if len(boxes) != len(masks):
        raise ParameterError(
            f"Expected {len(masks)} boxes, one per frame, got {len(boxes)}"
        )
    ious: List[float] = []
    hits: List[bool] = []
    distances: List[float] = []
    misses = 0
    for mask, box in zip(masks, boxes):
        if box is None:
            continue
        try:
            result = roi_metrics(mask, box)
        except EmptyPredictionError:
            misses += 1
            ious.append(0.0)
            hits.append(False)
            continue
        ious.append(result.iou)
        hits.append(result.center_hit)
        distances.append(result.dc)
    if misses:
        logging.warning(f"Empty ROI prediction in {misses} frames")
    return {
        "iou": float(np.mean(ious)) if ious else math.nan,
        "chr": float(np.mean(hits)) if hits else math.nan,
        "dc": float(np.mean(distances)) if distances else math.nan,
        "empty_predictions": float(misses),
        "frames": float(len(ious)),
    }


def signal_agreement(
    peaks_a: Sequence[int], peaks_b: Sequence[int], tolerance: int = 5
) -> float:
    """
    Fraction of peaks matched one-to-one between two peak sets within
    tolerance frames, relative to the larger set. 1.0 if both are empty.
    Parameters
    ----------
    peaks_a : Sequence[int]
    peaks_b : Sequence[int]
    tolerance : int

    Returns
    -------
    float

    """
    a, b = sorted(peaks_a), sorted(peaks_b)
    if not a and not b:
        return 1.0
    i = j = matched = 0
    while i < len(a) and j < len(b):
        if abs(a[i] - b[j]) <= tolerance:
            matched += 1
            i += 1
            j += 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return matched / max(len(a), len(b))


def format_table(report: MetricsReport) -> str:
    """Aligned MAE / STD table, one column pair per window label."""
    groups = dict(report.groups)
    if report.mae is not None:
        groups[ALL_WINDOWS] = {"mae": report.mae, "std": report.std}
    if not groups:
        rate = report.extras.get("mean_predicted_rate", math.nan)
        return f"predicted rate: {rate:.2f} BPM"
    row = {}
    for label, stats in groups.items():
        row[f"{label} MAE"] = stats["mae"]
        row[f"{label} STD"] = stats["std"]
    table = pd.DataFrame([row], index=["rate (BPM)"])
    return table.to_string(float_format=lambda v: f"{v:.2f}")
