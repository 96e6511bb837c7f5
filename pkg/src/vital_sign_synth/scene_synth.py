"""Synthetic video generation: moving ellipses, occlusion-resolved masks,
frame composition, background drift, blur and salt-and-pepper noise."""

import logging
import math
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationInfo,
    field_validator,
)
from scipy import ndimage

from vital_sign_synth.configs import VideoConfig
from vital_sign_synth.dsp import Box
from vital_sign_synth.errors import ParameterError, SceneCompositionError
from vital_sign_synth.signal_models import (
    SignalSpec,
    TimeSeries,
    render_signal,
    sample_distractor_spec,
    sample_signal_spec,
)


class TrackRole(str, Enum):
    """What an ellipse contributes to the scene."""

    INTEREST = "interest"
    DISTRACTOR = "distractor"


class EllipseState(BaseModel):
    """Per-frame geometry of one ellipse. Coordinates are (row, col)."""

    position: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float = Field(..., description="Rotation (degrees)")


class EllipseTrack(BaseModel):
    """A moving blob and the signal that sets its intensity."""

    start_pos: Tuple[float, float]
    end_pos: Tuple[float, float]
    axes: Tuple[float, float] = Field(..., description="Semi-axes (px)")
    angle: float = Field(..., description="Initial rotation (degrees)")
    z_order: int = Field(..., ge=0)
    role: TrackRole
    signal: SignalSpec

    def initial_state(self) -> EllipseState:
        """State at frame 0."""
        return EllipseState(
            position=self.start_pos, axes=self.axes, angle=self.angle
        )


class VideoSample(BaseModel):
    """Frames plus the ground-truth tuple."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: np.ndarray = Field(..., description="T x H x W in [0, 1]")
    gt_signal: TimeSeries
    gt_rate: float = Field(..., description="Cycles per minute")
    gt_masks: np.ndarray = Field(..., description="T x H x W boolean")
    config: VideoConfig
    target_spec: SignalSpec
    distractor_specs: List[SignalSpec] = []
    tracks: List[EllipseTrack] = []

    @field_validator("gt_masks", mode="after")
    def check_masks(
        cls, v: np.ndarray, info: ValidationInfo
    ) -> np.ndarray:
        """Masks are binary and shaped like the frames."""
        frames = info.data.get("frames")
        if frames is not None and v.shape != frames.shape:
            raise ValueError(
                f"gt_masks shape {v.shape} != frames shape {frames.shape}"
            )
        return v.astype(bool, copy=False)

    @property
    def num_frames(self) -> int:
        """Number of frames."""
        return int(self.frames.shape[0])

    def bounding_boxes(self) -> List[Optional[Box]]:
        """Per-frame bounding box of the interest masks (oracle ROI)."""
        boxes: List[Optional[Box]] = []
        for mask in self.gt_masks:
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            if rows.size == 0:
                boxes.append(None)
            else:
                boxes.append(
                    Box(
                        x0=int(cols[0]),
                        y0=int(rows[0]),
                        x1=int(cols[-1]) + 1,
                        y1=int(rows[-1]) + 1,
                    )
                )
        return boxes


def sample_ellipse_track(
    rng: np.random.Generator,
    cfg: VideoConfig,
    role: TrackRole,
    z_order: int = 0,
    signal: Optional[SignalSpec] = None,
) -> EllipseTrack:
    """
    Sample a track: start and end positions uniform over the frame, semi-axes
    uniform in [1, Dim/4], angle uniform in [0, 360).
    Parameters
    ----------
    rng : np.random.Generator
    cfg : VideoConfig
    role : TrackRole
    z_order : int
      Occlusion priority. Lower values are drawn on top.
    signal : Optional[SignalSpec]
      Signal to attach. If None, one is sampled from the target prior
      (interest) or its complement (distractor).

    Returns
    -------
    EllipseTrack

    """
    height, width = cfg.frame_shape
    start = (rng.uniform(0, height), rng.uniform(0, width))
    end = (rng.uniform(0, height), rng.uniform(0, width))
    axes = (rng.uniform(1, height / 4), rng.uniform(1, width / 4))
    angle = rng.uniform(0, 360)
    if signal is None and role == TrackRole.INTEREST:
        signal = sample_signal_spec(
            rng, cfg.target_range, cfg.fs, cfg.num_frames, cfg.signals
        )
    elif signal is None:
        signal = sample_distractor_spec(
            rng, cfg.target_range, cfg.fs, cfg.num_frames, cfg.signals
        )
    return EllipseTrack(
        start_pos=(float(start[0]), float(start[1])),
        end_pos=(float(end[0]), float(end[1])),
        axes=(float(axes[0]), float(axes[1])),
        angle=float(angle),
        z_order=z_order,
        role=role,
        signal=signal,
    )


def step_ellipse(
    state: EllipseState,
    track: EllipseTrack,
    t: int,
    num_frames: int,
    rng: np.random.Generator,
    cfg: VideoConfig,
) -> EllipseState:
    """
    Advance a track from frame t-1 to frame t. Axes and angle are scaled by
    independent draws of N(1, size/angle noise std). The position blends the
    previous position, weight (T-t)/T, with the end position, weight t/T,
    plus N(0, position noise std) per axis.
    Parameters
    ----------
    state : EllipseState
      State at frame t-1.
    track : EllipseTrack
    t : int
      1 <= t < num_frames.
    num_frames : int
    rng : np.random.Generator
    cfg : VideoConfig

    Returns
    -------
    EllipseState

    """
    if not 1 <= t < num_frames:
        raise ParameterError(f"t must be in [1, {num_frames}), got {t}")
    height, width = cfg.frame_shape
    size_delta = rng.normal(1.0, cfg.size_noise_std, size=2)
    angle_delta = rng.normal(1.0, cfg.angle_noise_std)
    position_delta = rng.normal(0.0, cfg.position_noise_std, size=2)
    axes = np.asarray(state.axes) * size_delta
    axes = np.clip(axes, 1.0, [height / 2, width / 2])
    keep = (num_frames - t) / num_frames
    pull = t / num_frames
    position = (
        keep * np.asarray(state.position)
        + position_delta
        + pull * np.asarray(track.end_pos)
    )
    position = np.clip(position, 0.0, [height - 1, width - 1])
    return EllipseState(
        position=(float(position[0]), float(position[1])),
        axes=(float(axes[0]), float(axes[1])),
        angle=float(state.angle * angle_delta),
    )


def ellipse_mask(state: EllipseState, dims: Tuple[int, int]) -> np.ndarray:
    """
    Filled rotated ellipse. A pixel belongs to it iff its center satisfies
    the ellipse inequality; pixel (r, c) has its center at (r, c).
    Parameters
    ----------
    state : EllipseState
    dims : Tuple[int, int]
      (height, width)

    Returns
    -------
    np.ndarray
      Boolean (height, width) mask.

    """
    height, width = dims
    mask = np.zeros(dims, dtype=bool)
    pr, pc = state.position
    a, b = state.axes
    reach = max(a, b)
    r0, r1 = max(0, int(math.floor(pr - reach))), int(math.ceil(pr + reach))
    c0, c1 = max(0, int(math.floor(pc - reach))), int(math.ceil(pc + reach))
    r1, c1 = min(height - 1, r1), min(width - 1, c1)
    if r0 > r1 or c0 > c1:
        return mask
    rows, cols = np.ogrid[r0 : r1 + 1, c0 : c1 + 1]
    dy = rows - pr
    dx = cols - pc
    theta = np.deg2rad(state.angle)
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    mask[r0 : r1 + 1, c0 : c1 + 1] = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def rasterize_scene_masks(
    tracks: Sequence[EllipseTrack],
    states: Sequence[EllipseState],
    dims: Tuple[int, int],
) -> List[np.ndarray]:
    """
    Rasterize every ellipse and remove the pixels already claimed by
    ellipses of lower z_order, so the returned masks are pairwise disjoint.
    Parameters
    ----------
    tracks : Sequence[EllipseTrack]
    states : Sequence[EllipseState]
      State of each track at the frame being drawn.
    dims : Tuple[int, int]

    Returns
    -------
    List[np.ndarray]
      One mask per track, in input order.

    """
    if len(tracks) != len(states):
        raise ParameterError("Every track needs a state")
    masks: List[Optional[np.ndarray]] = [None] * len(tracks)
    claimed = np.zeros(dims, dtype=bool)
    for index in sorted(range(len(tracks)), key=lambda i: tracks[i].z_order):
        mask = ellipse_mask(states[index], dims) & ~claimed
        claimed |= mask
        masks[index] = mask
    return masks


def _background_keyframes(
    rng: np.random.Generator, cfg: VideoConfig
) -> np.ndarray:
    """Upsampled U[0, 1] keyframes, one every bg_keyframe_stride frames."""
    low_w, low_h = cfg.bg_lowres
    count = math.ceil((cfg.num_frames - 1) / cfg.bg_keyframe_stride) + 1
    low = rng.uniform(0.0, 1.0, size=(count, low_h, low_w))
    zoom = (cfg.height / low_h, cfg.width / low_w)
    return np.stack(
        [
            ndimage.zoom(k, zoom, order=1, mode="nearest", grid_mode=True)
            for k in low
        ]
    )


def generate_background(
    rng: np.random.Generator, cfg: VideoConfig
) -> np.ndarray:
    """
    Smoothly drifting background: low-resolution U[0, 1] keyframes,
    bilinearly upsampled, linearly interpolated in time.
    Parameters
    ----------
    rng : np.random.Generator
    cfg : VideoConfig

    Returns
    -------
    np.ndarray
      (T, H, W) intensities.

    """
    keys = _background_keyframes(rng, cfg)
    stride = cfg.bg_keyframe_stride
    t = np.arange(cfg.num_frames)
    index = t // stride
    weight = ((t - index * stride) / stride)[:, None, None]
    upper = np.minimum(index + 1, len(keys) - 1)
    return (1.0 - weight) * keys[index] + weight * keys[upper]


def compose_frame(
    masks: Sequence[np.ndarray],
    values: Sequence[float],
    background: np.ndarray,
    cfg: VideoConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Paint each mask with its signal value over the background, blur with
    G_sigma, then apply salt-and-pepper noise and clamp to [0, 1].
    Parameters
    ----------
    masks : Sequence[np.ndarray]
      Pairwise disjoint boolean masks.
    values : Sequence[float]
      Signal value for each mask at this frame.
    background : np.ndarray
      (H, W) background intensities at this frame.
    cfg : VideoConfig
    rng : np.random.Generator

    Returns
    -------
    np.ndarray

    """
    frame = np.array(background, dtype=np.float64, copy=True)
    if len(masks):
        coverage = np.sum(masks, axis=0)
        if coverage.max() > 1:
            raise SceneCompositionError(
                f"{int((coverage > 1).sum())} pixels are covered by more "
                "than one mask"
            )
    for mask, value in zip(masks, values):
        frame[mask] = value
    if cfg.blur_sigma > 0:
        frame = ndimage.gaussian_filter(frame, cfg.blur_sigma, mode="reflect")
    if cfg.sp_density > 0:
        hit = rng.random(frame.shape) < cfg.sp_density
        salt = rng.random(frame.shape) < 0.5
        frame[hit] = salt[hit].astype(np.float64)
    return np.clip(frame, 0.0, 1.0)


def _object_series(
    rng: np.random.Generator,
    target: SignalSpec,
    target_series: TimeSeries,
    per_object_amplitude: bool,
) -> np.ndarray:
    """Intensity series of one interest object."""
    if not per_object_amplitude:
        return target_series.values
    span = target.amp_max - target.amp_min
    if span > 0:
        unit = (target_series.values - target.amp_min) / span
    else:
        unit = np.full_like(target_series.values, 0.5)
    amp_min, amp_max = np.sort(rng.uniform(0.0, 1.0, size=2))
    return np.clip(amp_min + (amp_max - amp_min) * unit, 0.0, 1.0)


def generate_video(cfg: VideoConfig) -> VideoSample:
    """
    Generate one synthetic video and its ground truth. All interest objects
    share the target signal; each distractor has its own signal.
    Parameters
    ----------
    cfg : VideoConfig

    Returns
    -------
    VideoSample

    """
    cfg = VideoConfig.model_validate(cfg.model_dump())
    rng = np.random.default_rng(cfg.seed)
    num_frames, dims = cfg.num_frames, cfg.frame_shape
    target = sample_signal_spec(
        rng, cfg.target_range, cfg.fs, num_frames, cfg.signals
    )
    roles = [TrackRole.INTEREST] * cfg.n_interest + [
        TrackRole.DISTRACTOR
    ] * cfg.n_distractors
    order = rng.permutation(len(roles))
    tracks: List[EllipseTrack] = []
    for z_order, index in enumerate(order):
        role = roles[int(index)]
        spec = target if role == TrackRole.INTEREST else None
        tracks.append(sample_ellipse_track(rng, cfg, role, z_order, spec))

    gt_signal = render_signal(target, num_frames, rng)
    series = []
    for track in tracks:
        if track.role == TrackRole.INTEREST:
            series.append(
                _object_series(
                    rng, target, gt_signal, cfg.signals.per_object_amplitude
                )
            )
        else:
            series.append(render_signal(track.signal, num_frames, rng).values)
    background = generate_background(rng, cfg)

    frames = np.empty((num_frames,) + dims, dtype=np.float64)
    gt_masks = np.zeros((num_frames,) + dims, dtype=bool)
    interest = [tr.role == TrackRole.INTEREST for tr in tracks]
    states = [track.initial_state() for track in tracks]
    for t in range(num_frames):
        if t > 0:
            states = [
                step_ellipse(state, track, t, num_frames, rng, cfg)
                for state, track in zip(states, tracks)
            ]
        masks = rasterize_scene_masks(tracks, states, dims)
        values = [s[t] for s in series]
        frames[t] = compose_frame(masks, values, background[t], cfg, rng)
        for mask, is_interest in zip(masks, interest):
            if is_interest:
                gt_masks[t] |= mask
    logging.debug(
        f"Generated video seed={cfg.seed} rate={target.rate_bpm:.2f} BPM"
    )
    return VideoSample(
        frames=frames,
        gt_signal=gt_signal,
        gt_rate=target.rate_bpm,
        gt_masks=gt_masks,
        config=cfg,
        target_spec=target,
        distractor_specs=[
            tr.signal for tr in tracks if tr.role == TrackRole.DISTRACTOR
        ],
        tracks=tracks,
    )


def stream_samples(
    cfg: VideoConfig, start_seed: Optional[int] = None
) -> Iterator[VideoSample]:
    """
    Endless stream of videos with seeds start_seed, start_seed + 1, ...
    Parameters
    ----------
    cfg : VideoConfig
    start_seed : Optional[int]
      Defaults to cfg.seed.

    Returns
    -------
    Iterator[VideoSample]

    """
    seed = cfg.seed if start_seed is None else start_seed
    while True:
        yield generate_video(cfg.model_copy(update={"seed": seed}))
        seed += 1

