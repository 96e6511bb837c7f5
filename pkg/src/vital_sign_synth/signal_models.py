"""Periodic target and distractor signals that drive pixel intensities"""

from enum import Enum
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from scipy import signal as sps
from typing_extensions import Self

from vital_sign_synth.configs import FrequencyRange, SignalSamplingConfig
from vital_sign_synth.errors import ParameterError

# Gaussian bump width as a fraction of the period
GAUSSIAN_WIDTH = 1.0 / 8.0
# Distractor support relative to the excluded interval
DISTRACTOR_LOW = (0.25, 0.9)
DISTRACTOR_HIGH = (1.1, 4.0)
# Upper distractor frequencies stay below this fraction of fs
NYQUIST_MARGIN = 0.45


class SignalFamily(str, Enum):
    """Cyclic waveform families."""

    SIN = "sin"
    STEP = "step"
    TRIANGLE = "triangle"
    GAUSSIAN = "gaussian"


class TimeSeries(BaseModel):
    """Uniformly sampled real series."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="Samples")
    fs: float = Field(..., gt=0, description="Sampling rate (Hz)")

    @field_validator("values", mode="before")
    def to_float_array(cls, values: Any) -> np.ndarray:
        """Coerce to a finite 1-D float64 array."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"values must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("values must be finite")
        return arr

    def __len__(self) -> int:
        """Number of samples."""
        return int(self.values.shape[0])

    def with_values(self, values: np.ndarray) -> "TimeSeries":
        """New series at the same sampling rate."""
        return TimeSeries(values=values, fs=self.fs)


class SignalSpec(BaseModel):
    """One periodic signal. Serialises with the keys family, freq_hz,
    amp_min, amp_max, phase_frames, noise_std and flatten_intervals."""

    model_config = ConfigDict(allow_inf_nan=False)

    family: SignalFamily
    freq_hz: float = Field(..., gt=0, description="Frequency (Hz)")
    fs: float = Field(..., gt=0, description="Frame rate (Hz)")
    amp_min: float = Field(..., ge=0, le=1)
    amp_max: float = Field(..., ge=0, le=1)
    phase_frames: float = Field(default=0.0, ge=0)
    noise_std: float = Field(default=0.0, ge=0)
    flatten_intervals: List[Tuple[int, int]] = Field(
        default=[], description="Half-open [start, end) frame intervals"
    )

    @model_validator(mode="after")
    def check_spec(self) -> Self:
        """Amplitude order, phase within one period, disjoint flattening."""
        if self.amp_min > self.amp_max:
            raise ValueError(
                f"amp_min {self.amp_min} exceeds amp_max {self.amp_max}"
            )
        if self.phase_frames >= self.period_frames:
            raise ValueError(
                f"phase_frames {self.phase_frames} must be below the period "
                f"{self.period_frames}"
            )
        check_intervals(self.flatten_intervals)
        return self

    @property
    def period_frames(self) -> float:
        """Period in frames."""
        return self.fs / self.freq_hz

    @property
    def rate_bpm(self) -> float:
        """Cycles per minute."""
        return 60.0 * self.freq_hz

    def peak_frames(self, length: int) -> np.ndarray:
        """Analytic frames of waveform maxima (rising edge for Step)."""
        period = self.period_frames
        k = np.arange(int(np.ceil(length / period)) + 2)
        times = period * (k + 0.5) - self.phase_frames
        times = np.round(times[(times >= 0) & (times < length - 0.5)])
        return np.unique(times.astype(int))


def check_intervals(
    intervals: Sequence[Tuple[int, int]], length: Optional[int] = None
) -> List[Tuple[int, int]]:
    """
    Validate flattening intervals and return them sorted.
    Parameters
    ----------
    intervals : Sequence[Tuple[int, int]]
      Half-open [start, end) frame intervals.
    length : Optional[int]
      If given, every interval must lie inside [0, length).

    Returns
    -------
    List[Tuple[int, int]]

    """
    ordered = sorted((int(s), int(e)) for s, e in intervals)
    for start, end in ordered:
        if start < 0 or end <= start:
            raise ParameterError(f"Invalid interval [{start}, {end})")
        if length is not None and end > length:
            raise ParameterError(
                f"Interval [{start}, {end}) exceeds series length {length}"
            )
    for (_, prev_end), (start, end) in zip(ordered, ordered[1:]):
        if start < prev_end:
            raise ParameterError(
                f"Overlapping interval [{start}, {end}) starts before "
                f"{prev_end}"
            )
    return ordered


def _as_range(value: Union[FrequencyRange, Sequence[float]]):
    """Accept a FrequencyRange or a (lo, hi) pair."""
    if isinstance(value, FrequencyRange):
        return value
    try:
        lo, hi = value
        return FrequencyRange(min_hz=lo, max_hz=hi)
    except (TypeError, ValueError, ValidationError) as e:
        raise ParameterError(f"Invalid frequency range {value!r}: {e}")


def _sample_flatten_intervals(
    rng: np.random.Generator, length: int, options: SignalSamplingConfig
) -> List[Tuple[int, int]]:
    """Draw a few disjoint flattened intervals, possibly none."""
    if options.max_flatten_intervals == 0:
        return []
    if rng.random() >= options.flatten_probability:
        return []
    count = int(rng.integers(1, options.max_flatten_intervals + 1))
    lo, hi = options.flatten_length
    intervals: List[Tuple[int, int]] = []
    for _ in range(count):
        size = int(rng.integers(lo, hi + 1))
        if size >= length:
            continue
        start = int(rng.integers(0, length - size + 1))
        candidate = (start, start + size)
        if all(candidate[1] <= s or candidate[0] >= e for s, e in intervals):
            intervals.append(candidate)
    return sorted(intervals)


def _build_spec(
    rng: np.random.Generator,
    freq_hz: float,
    fs: float,
    length: int,
    options: SignalSamplingConfig,
) -> SignalSpec:
    """Sample everything except the frequency."""
    family = list(SignalFamily)[int(rng.integers(len(SignalFamily)))]
    amp_min, amp_max = np.sort(rng.uniform(0.0, 1.0, size=2))
    period = fs / freq_hz
    phase = float(rng.uniform(0.0, period))
    if phase >= period:
        phase = 0.0
    return SignalSpec(
        family=family,
        freq_hz=freq_hz,
        fs=fs,
        amp_min=float(amp_min),
        amp_max=float(amp_max),
        phase_frames=phase,
        noise_std=options.noise_std,
        flatten_intervals=_sample_flatten_intervals(rng, length, options),
    )


def _check_sampling_args(fs: float, length: int) -> None:
    """Shared preconditions of the samplers."""
    if not fs > 0:
        raise ParameterError(f"fs must be positive, got {fs}")
    if length < 1:
        raise ParameterError(f"length must be positive, got {length}")


def sample_signal_spec(
    rng: np.random.Generator,
    freq_range: Union[FrequencyRange, Sequence[float]],
    fs: float,
    length: int,
    options: Optional[SignalSamplingConfig] = None,
) -> SignalSpec:
    """
    Sample a target signal whose frequency lies in the prior range.
    Parameters
    ----------
    rng : np.random.Generator
    freq_range : Union[FrequencyRange, Sequence[float]]
      Frequency prior (Hz). Frequency is drawn uniformly from it.
    fs : float
      Frame rate (Hz).
    length : int
      Video length in frames, bounds the flattened intervals.
    options : Optional[SignalSamplingConfig]
      Noise and flattening settings. Defaults to SignalSamplingConfig().

    Returns
    -------
    SignalSpec

    """
    freq_range = _as_range(freq_range)
    _check_sampling_args(fs, length)
    options = options or SignalSamplingConfig()
    freq = float(rng.uniform(freq_range.min_hz, freq_range.max_hz))
    return _build_spec(rng, freq, fs, length, options)


def distractor_support(
    excluded: FrequencyRange, fs: Optional[float] = None
) -> List[Tuple[float, float]]:
    """
    Bounded complement of the prior used for distractor frequencies.
    Parameters
    ----------
    excluded : FrequencyRange
    fs : Optional[float]
      If given, the upper segment is clipped below Nyquist.

    Returns
    -------
    List[Tuple[float, float]]
      One or two closed segments (Hz).

    """
    segments = [
        (
            excluded.min_hz * DISTRACTOR_LOW[0],
            excluded.min_hz * DISTRACTOR_LOW[1],
        ),
        (
            excluded.max_hz * DISTRACTOR_HIGH[0],
            excluded.max_hz * DISTRACTOR_HIGH[1],
        ),
    ]
    if fs is not None:
        lo, hi = segments[1]
        segments[1] = (lo, min(hi, NYQUIST_MARGIN * fs))
    return [(lo, hi) for lo, hi in segments if hi > lo]


def sample_distractor_spec(
    rng: np.random.Generator,
    excluded: Union[FrequencyRange, Sequence[float]],
    fs: float,
    length: int,
    options: Optional[SignalSamplingConfig] = None,
) -> SignalSpec:
    """
    Sample a distractor signal whose frequency lies outside the prior.
    Parameters
    ----------
    rng : np.random.Generator
    excluded : Union[FrequencyRange, Sequence[float]]
      The target prior. The frequency is drawn from [min/4, 0.9 min] and
      [1.1 max, 4 max] with mass proportional to segment length.
    fs : float
    length : int
    options : Optional[SignalSamplingConfig]

    Returns
    -------
    SignalSpec

    """
    excluded = _as_range(excluded)
    _check_sampling_args(fs, length)
    options = options or SignalSamplingConfig()
    segments = distractor_support(excluded, fs)
    widths = np.array([hi - lo for lo, hi in segments])
    index = int(rng.choice(len(segments), p=widths / widths.sum()))
    lo, hi = segments[index]
    freq = float(rng.uniform(lo, hi))
    return _build_spec(rng, freq, fs, length, options)


def _unit_waveform(family: SignalFamily, cycles: np.ndarray) -> np.ndarray:
    """Waveform in [0, 1] at a position measured in cycles. Every family
    starts a cycle at its minimum and peaks half way through."""
    angle = 2.0 * np.pi * cycles
    if family == SignalFamily.SIN:
        return 0.5 * (1.0 - np.cos(angle))
    if family == SignalFamily.STEP:
        return 0.5 * (1.0 - sps.square(angle, duty=0.5))
    if family == SignalFamily.TRIANGLE:
        return 0.5 * (sps.sawtooth(angle, width=0.5) + 1.0)
    frac = np.mod(cycles, 1.0)
    return np.exp(-0.5 * ((frac - 0.5) / GAUSSIAN_WIDTH) ** 2)


def _clean_values(spec: SignalSpec, t: np.ndarray) -> np.ndarray:
    """Amplitude-mapped waveform without flattening or noise."""
    cycles = (t + spec.phase_frames) / spec.period_frames
    unit = _unit_waveform(spec.family, cycles)
    return spec.amp_min + (spec.amp_max - spec.amp_min) * unit


def _held_times(spec: SignalSpec, t: np.ndarray) -> np.ndarray:
    """Move times inside a flattened interval to the interval start."""
    held = np.array(t, dtype=np.float64, copy=True)
    for start, end in spec.flatten_intervals:
        held[(t >= start) & (t < end)] = start
    return held


def _add_noise(
    values: np.ndarray, noise_std: float, rng: Optional[np.random.Generator]
) -> np.ndarray:
    """Additive white noise, then clamp to [0, 1]."""
    if rng is not None and noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=values.shape)
    return np.clip(values, 0.0, 1.0)


def eval_signal(
    spec: SignalSpec,
    t: Union[float, np.ndarray],
    rng: Optional[np.random.Generator] = None,
) -> Union[float, np.ndarray]:
    """
    Evaluate a signal at frame index t (scalar or array).
    Parameters
    ----------
    spec : SignalSpec
    t : Union[float, np.ndarray]
      Frame indices, t >= 0.
    rng : Optional[np.random.Generator]
      Source of the additive noise. Without it the value is noise free.

    Returns
    -------
    Union[float, np.ndarray]
      Values in [0, 1].

    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ParameterError("Frame index must be non-negative")
    values = _clean_values(spec, _held_times(spec, t_arr))
    values = _add_noise(values, spec.noise_std, rng)
    if values.ndim == 0:
        return float(values)
    return values


def apply_flattening(
    series: TimeSeries, intervals: Sequence[Tuple[int, int]]
) -> TimeSeries:
    """
    Hold the value at each interval start across the interval.
    Parameters
    ----------
    series : TimeSeries
    intervals : Sequence[Tuple[int, int]]
      Disjoint half-open [start, end) intervals inside the series.

    Returns
    -------
    TimeSeries

    """
    ordered = check_intervals(intervals, len(series))
    values = series.values.copy()
    for start, end in ordered:
        values[start:end] = values[start]
    return series.with_values(values)


def render_signal(
    spec: SignalSpec,
    length: int,
    rng: Optional[np.random.Generator] = None,
) -> TimeSeries:
    """
    Render a signal over frames 0..length-1: waveform, flattening, noise
    and clamping, in that order.
    Parameters
    ----------
    spec : SignalSpec
    length : int
    rng : Optional[np.random.Generator]

    Returns
    -------
    TimeSeries

    """
    clean = TimeSeries(
        values=_clean_values(spec, np.arange(length, dtype=np.float64)),
        fs=spec.fs,
    )
    flattened = apply_flattening(clean, spec.flatten_intervals)
    return flattened.with_values(
        _add_noise(flattened.values, spec.noise_std, rng)
    )
