"""Classical signal pipeline: ROI means, detrending, normalisation,
band-pass filtering, spectral rate estimation and peak-based rates."""

from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import fft, ndimage
from typing_extensions import Self

from vital_sign_synth.configs import DspConfig, FrequencyRange, RateMethod
from vital_sign_synth.errors import (
    DegenerateSeriesError,
    EmptyRoiError,
    InsufficientPeaksError,
    ParameterError,
)
from vital_sign_synth.signal_models import TimeSeries

# Gaussian kernels are cut at this many sigmas
KERNEL_TRUNCATE = 4.0


class Box(BaseModel):
    """Axis-aligned rectangle with half-open pixel ranges [x0, x1) x
    [y0, y1). x runs along columns, y along rows."""

    model_config = ConfigDict(frozen=True)

    x0: int
    y0: int
    x1: int
    y1: int

    @model_validator(mode="after")
    def check_extent(self) -> Self:
        """Boxes must have positive width and height."""
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(
                f"Box ({self.x0}, {self.y0}, {self.x1}, {self.y1}) is empty"
            )
        return self

    @property
    def center(self) -> Tuple[float, float]:
        """(row, col) of the box center in pixel-center coordinates."""
        return (self.y0 + self.y1 - 1) / 2.0, (self.x0 + self.x1 - 1) / 2.0

    def clip(self, dims: Tuple[int, int]) -> Optional["Box"]:
        """Intersection with a (height, width) frame, None if empty."""
        height, width = dims
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return Box(x0=x0, y0=y0, x1=x1, y1=y1)

    def as_mask(self, dims: Tuple[int, int]) -> np.ndarray:
        """Filled boolean mask of the box inside a frame."""
        mask = np.zeros(dims, dtype=bool)
        clipped = self.clip(dims)
        if clipped is not None:
            mask[clipped.y0 : clipped.y1, clipped.x0 : clipped.x1] = True
        return mask


class BaselineResult(BaseModel):
    """Rate from the classical pipeline plus its intermediate series."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rate: float = Field(..., description="Cycles per minute")
    stages: Dict[str, TimeSeries]
    peaks: List[int] = []


def mean_roi_signal(
    frames: np.ndarray, boxes: Sequence[Box], fs: float
) -> TimeSeries:
    """
    Mean intensity inside each frame's box.
    Parameters
    ----------
    frames : np.ndarray
      (T, H, W)
    boxes : Sequence[Box]
      One box per frame.
    fs : float

    Returns
    -------
    TimeSeries

    """
    if len(boxes) != len(frames):
        raise ParameterError(
            f"Expected {len(frames)} boxes, one per frame, got {len(boxes)}"
        )
    dims = frames.shape[1:]
    values = np.empty(len(frames), dtype=np.float64)
    empty: List[int] = []
    for t, (frame, box) in enumerate(zip(frames, boxes)):
        clipped = box.clip(dims) if box is not None else None
        if clipped is None:
            empty.append(t)
            continue
        roi = frame[clipped.y0 : clipped.y1, clipped.x0 : clipped.x1]
        values[t] = roi.mean()
    if empty:
        raise EmptyRoiError(empty)
    return TimeSeries(values=values, fs=fs)


def fill_missing_boxes(boxes: Sequence[Optional[Box]]) -> List[Box]:
    """
    Replace frames without a box (e.g. a fully occluded object) by the last
    box seen before them. Leading gaps take the first available box.
    Parameters
    ----------
    boxes : Sequence[Optional[Box]]

    Returns
    -------
    List[Box]

    """
    present = [box for box in boxes if box is not None]
    if not present:
        raise EmptyRoiError(range(len(boxes)))
    last = present[0]
    filled: List[Box] = []
    for box in boxes:
        if box is not None:
            last = box
        filled.append(last)
    return filled


def dog_detrend(
    series: TimeSeries, sigma_narrow: float, sigma_wide: float
) -> TimeSeries:
    """
    Remove transient peaks and edges: subtract the Difference of Gaussians
    response (narrow minus wide smoothing) from the series.
    Parameters
    ----------
    series : TimeSeries
    sigma_narrow : float
      Narrow kernel sigma (frames).
    sigma_wide : float
      Wide kernel sigma (frames).

    Returns
    -------
    TimeSeries

    """
    if not 0 < sigma_narrow < sigma_wide:
        raise ParameterError(
            "Require 0 < sigma_narrow < sigma_wide, got "
            f"{sigma_narrow} and {sigma_wide}"
        )
    if len(series) <= 6 * sigma_wide:
        raise ParameterError(
            f"Series of length {len(series)} is too short for "
            f"sigma_wide={sigma_wide}"
        )
    x = series.values
    narrow = ndimage.gaussian_filter1d(
        x, sigma_narrow, mode="reflect", truncate=KERNEL_TRUNCATE
    )
    wide = ndimage.gaussian_filter1d(
        x, sigma_wide, mode="reflect", truncate=KERNEL_TRUNCATE
    )
    return series.with_values(x - (narrow - wide))


def normalize(series: TimeSeries) -> TimeSeries:
    """
    Zero mean, unit population standard deviation.
    Parameters
    ----------
    series : TimeSeries

    Returns
    -------
    TimeSeries

    """
    x = series.values
    mean = x.mean()
    std = x.std()
    if std <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateSeriesError("Cannot normalise a constant series")
    return series.with_values((x - mean) / std)


def bandpass(series: TimeSeries, f_lo: float, f_hi: float) -> TimeSeries:
    """
    Ideal band-pass: zero every DFT bin with |f| outside [f_lo, f_hi].
    Parameters
    ----------
    series : TimeSeries
    f_lo : float
    f_hi : float

    Returns
    -------
    TimeSeries

    """
    nyquist = series.fs / 2
    if not 0 < f_lo < f_hi < nyquist:
        raise ParameterError(
            f"Require 0 < f_lo < f_hi < {nyquist}, got {f_lo} and {f_hi}"
        )
    n = len(series)
    spectrum = fft.rfft(series.values)
    freqs = fft.rfftfreq(n, d=1.0 / series.fs)
    spectrum[(freqs < f_lo) | (freqs > f_hi)] = 0
    return series.with_values(fft.irfft(spectrum, n=n))


def _as_band(band: Union[FrequencyRange, Sequence[float]]) -> FrequencyRange:
    """Accept a FrequencyRange or a (lo, hi) pair."""
    if isinstance(band, FrequencyRange):
        return band
    lo, hi = band
    return FrequencyRange(min_hz=lo, max_hz=hi)


def _spectrum(series: TimeSeries) -> Tuple[np.ndarray, np.ndarray]:
    """Bin frequencies and DFT magnitudes of the non-negative half."""
    magnitude = np.abs(fft.rfft(series.values))
    freqs = fft.rfftfreq(len(series), d=1.0 / series.fs)
    return freqs, magnitude


def dominant_frequency(
    series: TimeSeries,
    band: Union[FrequencyRange, Sequence[float], None] = None,
) -> float:
    """
    Frequency (Hz) of the largest DFT magnitude, within band if given and
    excluding DC otherwise. Ties go to the lower frequency.
    Parameters
    ----------
    series : TimeSeries
    band : Union[FrequencyRange, Sequence[float], None]

    Returns
    -------
    float

    """
    if len(series) < 2:
        raise ParameterError("Series needs at least 2 samples")
    freqs, magnitude = _spectrum(series)
    if band is None:
        selected = freqs > 0
    else:
        band = _as_band(band)
        selected = (freqs >= band.min_hz) & (freqs <= band.max_hz)
    if not selected.any():
        raise ParameterError(f"No DFT bins fall inside the band {band}")
    candidates = np.flatnonzero(selected)
    return float(freqs[candidates[np.argmax(magnitude[candidates])]])


def dft_rate(
    series: TimeSeries, band: Union[FrequencyRange, Sequence[float]]
) -> float:
    """
    Rate (cycles per minute) at the in-band DFT magnitude maximum.
    Parameters
    ----------
    series : TimeSeries
    band : Union[FrequencyRange, Sequence[float]]

    Returns
    -------
    float

    """
    return 60.0 * dominant_frequency(series, _as_band(band))


def detect_peaks(
    series: Union[TimeSeries, np.ndarray], min_distance: int
) -> List[int]:
    """
    Strict local maxima at least min_distance apart. Among conflicting
    candidates the taller peak wins, then the earlier one.
    Parameters
    ----------
    series : Union[TimeSeries, np.ndarray]
    min_distance : int

    Returns
    -------
    List[int]
      Sorted peak indices.

    """
    if min_distance < 1:
        raise ParameterError(f"min_distance must be >= 1, got {min_distance}")
    if isinstance(series, TimeSeries):
        x = series.values
    else:
        x = np.asarray(series, dtype=np.float64)
    if x.size < 3:
        return []
    inner = x[1:-1]
    candidates = np.flatnonzero((inner > x[:-2]) & (inner > x[2:])) + 1
    if candidates.size == 0:
        return []
    order = np.lexsort((candidates, -x[candidates]))
    kept: List[int] = []
    taken = np.zeros(x.size, dtype=bool)
    for index in candidates[order]:
        lo = max(0, index - min_distance + 1)
        if taken[lo : index + min_distance].any():
            continue
        taken[index] = True
        kept.append(int(index))
    return sorted(kept)


def rate_from_peaks(peaks: Sequence[int], fs: float) -> float:
    """
    Rate (cycles per minute) from the first-to-last peak span.
    Parameters
    ----------
    peaks : Sequence[int]
      Sorted peak indices.
    fs : float

    Returns
    -------
    float

    """
    if len(peaks) < 2:
        raise InsufficientPeaksError(len(peaks))
    span = (peaks[-1] - peaks[0]) / fs
    if span <= 0:
        raise ParameterError("Peaks must be strictly increasing")
    return 60.0 * (len(peaks) - 1) / span


def baseline_rate(series: TimeSeries, config: DspConfig) -> BaselineResult:
    """
    Classical pipeline on an ROI mean signal: DoG detrend, normalise,
    band-pass, then DFT maximum or peak counting.
    Parameters
    ----------
    series : TimeSeries
    config : DspConfig

    Returns
    -------
    BaselineResult

    """
    stages = {"roi_mean": series}
    stages["detrended"] = dog_detrend(
        series, config.sigma_narrow, config.sigma_wide
    )
    stages["normalized"] = normalize(stages["detrended"])
    stages["bandpassed"] = bandpass(
        stages["normalized"], config.band.min_hz, config.band.max_hz
    )
    filtered = stages["bandpassed"]
    if config.method == RateMethod.DFT:
        return BaselineResult(
            rate=dft_rate(filtered, config.search_band), stages=stages
        )
    peaks = detect_peaks(filtered, config.min_distance)
    return BaselineResult(
        rate=rate_from_peaks(peaks, filtered.fs), stages=stages, peaks=peaks
    )


def quiescent_segments(
    series: TimeSeries, window: int, ratio: float = 0.3
) -> List[Tuple[int, int]]:
    """
    Intervals where the rolling standard deviation drops below ratio times
    the global standard deviation, e.g. a held breath in a predicted signal.
    Parameters
    ----------
    series : TimeSeries
    window : int
      Rolling window (frames).
    ratio : float

    Returns
    -------
    List[Tuple[int, int]]
      Half-open [start, end) intervals.

    """
    if window < 2 or window > len(series):
        raise ParameterError(
            f"window must be in [2, {len(series)}], got {window}"
        )
    x = series.values
    mean = ndimage.uniform_filter1d(x, window, mode="nearest")
    mean_sq = ndimage.uniform_filter1d(x * x, window, mode="nearest")
    rolling_std = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
    quiet = rolling_std < ratio * x.std()
    edges = np.diff(np.concatenate(([0], quiet.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends)]
