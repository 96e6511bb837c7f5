"""Settings models for generation, analysis, training and evaluation"""

import json
import math
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationInfo,
    field_validator,
    model_validator,
)
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)
from typing_extensions import Self

from vital_sign_synth.errors import FormatError

_validation_context: ContextVar[Union[Dict[str, Any], None]] = ContextVar(
    "_validation_context", default=None
)


@contextmanager
def validation_context(context: Union[Dict[str, Any], None]) -> None:
    """
    Makes a context available to validators of models built inside the
    block. Used to check a model config against the frames it will see.
    Parameters
    ----------
    context : Union[Dict[str, Any], None]
      Supported key: "frame_shape", a (height, width) tuple.

    Returns
    -------
    None

    """
    token = _validation_context.set(context)
    try:
        yield
    finally:
        _validation_context.reset(token)


class Task(str, Enum):
    """Vital sign the pipeline is configured for."""

    RESPIRATION = "respiration"
    HEART = "heart"


class RateMethod(str, Enum):
    """How the classical pipeline turns a series into a rate."""

    DFT = "dft"
    PEAKS = "peaks"


class OptimizerType(str, Enum):
    """Parameter update rules available to training."""

    SGD = "sgd"
    ADAM = "adam"


class FrequencyRange(BaseModel):
    """Closed interval of frequencies in Hz."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    min_hz: float = Field(..., gt=0, description="Lower bound (Hz)")
    max_hz: float = Field(..., gt=0, description="Upper bound (Hz)")

    @model_validator(mode="after")
    def check_order(self) -> Self:
        """A degenerate interval is allowed; an inverted one is not."""
        if self.min_hz > self.max_hz:
            raise ValueError(
                f"min_hz {self.min_hz} must not exceed max_hz {self.max_hz}"
            )
        return self

    def contains(self, freq_hz: float) -> bool:
        """Whether a frequency lies inside the closed interval."""
        return self.min_hz <= freq_hz <= self.max_hz

    @classmethod
    def parse(cls, text: str) -> "FrequencyRange":
        """Parse 'lo:hi' as used on the command line."""
        parts = text.split(":")
        if len(parts) != 2:
            raise ValueError(f"Expected a band as 'lo:hi', got {text!r}")
        return cls(min_hz=float(parts[0]), max_hz=float(parts[1]))


# Priors from the frequency-range ablation. "dataset" spans the rates seen in
# the annotated recordings, "domain" comes from medical knowledge, the others
# shrink or expand the dataset interval.
FREQUENCY_PRIORS: Dict[Task, Dict[str, FrequencyRange]] = {
    Task.RESPIRATION: {
        "shrunk": FrequencyRange(min_hz=0.30, max_hz=0.45),
        "narrow": FrequencyRange(min_hz=0.24, max_hz=0.50),
        "dataset": FrequencyRange(min_hz=0.24, max_hz=0.54),
        "expanded": FrequencyRange(min_hz=0.20, max_hz=0.67),
        "domain": FrequencyRange(min_hz=0.16, max_hz=0.67),
    },
    Task.HEART: {
        "shrunk": FrequencyRange(min_hz=1.50, max_hz=1.58),
        "dataset": FrequencyRange(min_hz=1.20, max_hz=1.80),
        "expanded": FrequencyRange(min_hz=1.00, max_hz=2.25),
        "wide": FrequencyRange(min_hz=0.67, max_hz=2.70),
        "domain": FrequencyRange(min_hz=0.60, max_hz=5.40),
    },
}

TASK_WINDOWS: Dict[Task, int] = {Task.RESPIRATION: 1000, Task.HEART: 250}


def prior_range(task: Union[Task, str], name: str = "dataset"):
    """
    Look up a named frequency prior.
    Parameters
    ----------
    task : Union[Task, str]
    name : str

    Returns
    -------
    FrequencyRange

    """
    priors = FREQUENCY_PRIORS[Task(task)]
    if name not in priors:
        raise ValueError(
            f"Unknown prior {name} for {Task(task).value}. "
            f"Choose from {sorted(priors)}"
        )
    return priors[name]


class SignalSamplingConfig(BaseModel):
    """Signal-level augmentation settings."""

    model_config = ConfigDict(extra="forbid")

    noise_std: float = Field(
        default=0.02,
        ge=0,
        description="Std of additive white noise on signal values",
    )
    flatten_probability: float = Field(
        default=0.3,
        ge=0,
        le=1,
        description="Probability that a signal receives flattened intervals",
    )
    max_flatten_intervals: int = Field(
        default=2,
        ge=0,
        description="Maximum number of flattened intervals per signal",
    )
    flatten_length: Tuple[int, int] = Field(
        default=(10, 60),
        description="Inclusive range of flattened interval lengths (frames)",
    )
    per_object_amplitude: bool = Field(
        default=False,
        description=(
            "Give every interest object its own amplitude bounds while "
            "sharing the target timing. gt_signal then follows the shared "
            "target amplitude only."
        ),
    )

    @field_validator("flatten_length", mode="after")
    def check_flatten_length(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        """Lengths must be positive and ordered."""
        if v[0] < 1 or v[0] > v[1]:
            raise ValueError(
                f"flatten_length must satisfy 1 <= lo <= hi, got {v}"
            )
        return v


class VideoConfig(BaseModel):
    """Settings for one synthetic video."""

    model_config = ConfigDict(extra="forbid")

    width: int = Field(default=64, ge=16, description="Frame width (px)")
    height: int = Field(default=64, ge=16, description="Frame height (px)")
    num_frames: int = Field(
        default=256, ge=2, description="Number of frames T"
    )
    fs: float = Field(default=27.0, gt=0, description="Frame rate (Hz)")
    n_interest: int = Field(
        default=1, ge=1, description="Number of interest ellipses"
    )
    n_distractors: int = Field(
        default=2, ge=0, description="Number of distractor ellipses"
    )
    blur_sigma: float = Field(
        default=1.0, ge=0, description="Gaussian blur sigma (px)"
    )
    sp_density: float = Field(
        default=0.01,
        ge=0,
        lt=1,
        description="Probability of salt-and-pepper corruption per pixel",
    )
    bg_lowres: Tuple[int, int] = Field(
        default=(4, 4),
        description="Background keyframe grid size (width, height)",
    )
    bg_keyframe_stride: int = Field(
        default=100,
        ge=1,
        description="Frames between background keyframes",
    )
    target_range: FrequencyRange = Field(
        default=FREQUENCY_PRIORS[Task.RESPIRATION]["dataset"],
        description="Frequency prior of the target signal",
    )
    size_noise_std: float = Field(
        default=0.1,
        ge=0,
        description="Std of the multiplicative axis fluctuation",
    )
    angle_noise_std: float = Field(
        default=0.1,
        ge=0,
        description="Std of the multiplicative angle fluctuation",
    )
    position_noise_std: float = Field(
        default=1.0,
        ge=0,
        description="Std of the additive position noise (px)",
    )
    signals: SignalSamplingConfig = Field(
        default=SignalSamplingConfig(),
        description="Signal-level augmentation settings",
    )
    seed: int = Field(default=0, description="Random seed")

    @field_validator("target_range", mode="before")
    def get_named_prior(cls, v: Any) -> Any:
        """Accept a preset written as "task:name", e.g.
        "respiration:dataset"."""
        if isinstance(v, str):
            task, sep, name = v.partition(":")
            if not sep:
                raise ValueError(
                    f"Expected a prior as 'task:name', got {v!r}"
                )
            return prior_range(task, name)
        return v

    @field_validator("bg_lowres", mode="after")
    def check_bg_lowres(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        """Grid must have at least one cell per axis."""
        if v[0] < 1 or v[1] < 1:
            raise ValueError(f"bg_lowres must be at least (1, 1), got {v}")
        return v

    @property
    def frame_shape(self) -> Tuple[int, int]:
        """(height, width) of a frame."""
        return self.height, self.width


class LossWeights(BaseModel):
    """Weights of the four training loss terms."""

    model_config = ConfigDict(extra="forbid")

    signal_local: float = Field(default=1.0, ge=0)
    signal_global: float = Field(default=1.0, ge=0)
    roi_local: float = Field(default=1.0, ge=0)
    roi_global: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def check_not_all_zero(self) -> Self:
        """At least one term has to contribute."""
        if not any(
            (
                self.signal_local,
                self.signal_global,
                self.roi_local,
                self.roi_global,
            )
        ):
            raise ValueError("At least one loss weight must be positive")
        return self

    def scaled(self, factor: float) -> "LossWeights":
        """Copy with every weight multiplied by factor."""
        return LossWeights(
            signal_local=self.signal_local * factor,
            signal_global=self.signal_global * factor,
            roi_local=self.roi_local * factor,
            roi_global=self.roi_global * factor,
        )


class ModelConfig(BaseModel):
    """Architecture and optimisation settings of the sequence model."""

    model_config = ConfigDict(extra="forbid")

    num_frames: int = Field(
        default=256, ge=1, description="Clip length used for training"
    )
    height: int = Field(default=64, ge=1, description="Input height (px)")
    width: int = Field(default=64, ge=1, description="Input width (px)")
    encoder_blocks: int = Field(
        default=4, ge=1, description="Number of Conv3D encoder blocks"
    )
    kernel_size: int = Field(default=3, ge=1, description="Conv kernel size")
    temporal_stride: int = Field(
        default=2, ge=1, description="Temporal stride per encoder block"
    )
    spatial_stride: int = Field(
        default=2, ge=1, description="Spatial stride per encoder block"
    )
    channels: int = Field(
        default=16, ge=1, description="Channel width of encoder blocks"
    )
    recurrent_layers: int = Field(
        default=2, ge=1, description="Stacked recurrent layers"
    )
    hidden_units: int = Field(
        default=64, ge=1, description="Hidden units per direction"
    )
    bidirectional: bool = Field(default=True)
    signal_head_widths: List[int] = Field(
        default=[32, 8],
        description="Hidden widths of the signal heads (output width is 1)",
    )
    decoder_channels: int = Field(
        default=16, ge=1, description="Channel width of ROI decoder blocks"
    )
    dropout: float = Field(default=0.1, ge=0, lt=1)
    loss_weights: LossWeights = Field(default=LossWeights())
    optimizer: OptimizerType = Field(default=OptimizerType.SGD)
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.0, ge=0, lt=1)
    batch_size: int = Field(default=2, ge=1)

    @field_validator("signal_head_widths", mode="after")
    def check_head_widths(cls, v: List[int]) -> List[int]:
        """Head widths must be positive."""
        if any(w < 1 for w in v):
            raise ValueError(f"signal_head_widths must be >= 1, got {v}")
        return v

    @field_validator("kernel_size", mode="after")
    def check_kernel_size(cls, v: int) -> int:
        """Same-padding needs an odd kernel."""
        if v % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {v}")
        return v

    @field_validator("height", "width", mode="after")
    def check_frame_shape(cls, v: int, info: ValidationInfo) -> int:
        """If a frame shape is supplied through validation_context, the
        model must have been built for it."""
        context = info.context or _validation_context.get() or dict()
        frame_shape = context.get("frame_shape")
        if frame_shape is not None:
            axis = 0 if info.field_name == "height" else 1
            expected = frame_shape[axis]
            if v != expected:
                raise ValueError(
                    f"Model {info.field_name} {v} does not match input "
                    f"frames ({expected})"
                )
        return v

    @model_validator(mode="after")
    def check_divisibility(self) -> Self:
        """Strided encoder must tile the clip and the frame exactly."""
        t_factor = self.temporal_factor
        s_factor = self.spatial_factor
        if self.num_frames % t_factor != 0:
            raise ValueError(
                f"num_frames {self.num_frames} is not divisible by the "
                f"temporal stride product {t_factor}"
            )
        for name in ("height", "width"):
            if getattr(self, name) % s_factor != 0:
                raise ValueError(
                    f"{name} {getattr(self, name)} is not divisible by the "
                    f"spatial stride product {s_factor}"
                )
        return self

    @property
    def temporal_factor(self) -> int:
        """Product of temporal strides of the encoder."""
        return self.temporal_stride**self.encoder_blocks

    @property
    def spatial_factor(self) -> int:
        """Product of spatial strides of the encoder."""
        return self.spatial_stride**self.encoder_blocks

    @property
    def embedding_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) of the encoder output per step."""
        return (
            self.channels,
            self.height // self.spatial_factor,
            self.width // self.spatial_factor,
        )

    @property
    def embedding_size(self) -> int:
        """Length of the flattened per-step embedding."""
        c, h, w = self.embedding_shape
        return c * h * w


class TrainingConfig(BaseModel):
    """Settings of the training loop."""

    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=1000, ge=0, description="Update steps")
    log_every: int = Field(default=10, ge=1)
    checkpoint_every: int = Field(
        default=100, ge=1, description="Steps between checkpoint writes"
    )
    num_workers: int = Field(
        default=0,
        ge=0,
        description="Sample generation worker processes (0 = in-process)",
    )
    prefetch_factor: int = Field(
        default=2,
        ge=1,
        description="Batches loaded in advance by each worker",
    )


class DspConfig(BaseModel):
    """Settings of the classical signal pipeline."""

    model_config = ConfigDict(extra="forbid")

    # The subtracted DoG response must lie above the target band
    sigma_narrow: float = Field(
        default=1.0, gt=0, description="Narrow DoG sigma (frames)"
    )
    sigma_wide: float = Field(
        default=3.0, gt=0, description="Wide DoG sigma (frames)"
    )
    band: FrequencyRange = Field(
        default=FrequencyRange(min_hz=0.1, max_hz=0.8),
        description="Band-pass interval (Hz)",
    )
    rate_band: Optional[FrequencyRange] = Field(
        default=None,
        description="Interval searched for the spectral maximum (Hz). "
        "Defaults to the band-pass interval.",
    )
    method: RateMethod = Field(default=RateMethod.DFT)
    min_distance: int = Field(
        default=40, ge=1, description="Minimum distance between peaks"
    )

    @model_validator(mode="after")
    def check_sigmas(self) -> Self:
        """Narrow kernel must be narrower than the wide one."""
        if self.sigma_narrow >= self.sigma_wide:
            raise ValueError(
                "sigma_narrow must be smaller than sigma_wide, got "
                f"{self.sigma_narrow} and {self.sigma_wide}"
            )
        return self

    @model_validator(mode="after")
    def check_rate_band(self) -> Self:
        """Bins outside the band-pass interval are zero after filtering."""
        rate_band = self.rate_band
        if rate_band is not None and not (
            self.band.contains(rate_band.min_hz)
            and self.band.contains(rate_band.max_hz)
        ):
            raise ValueError(
                f"rate_band {rate_band} must lie inside band {self.band}"
            )
        return self

    @property
    def search_band(self) -> FrequencyRange:
        """Interval the DFT maximum is taken over."""
        return self.band if self.rate_band is None else self.rate_band


class EvalConfig(BaseModel):
    """Settings of the windowed evaluation."""

    model_config = ConfigDict(extra="forbid")

    task: Task = Field(default=Task.RESPIRATION)
    window: Optional[int] = Field(
        default=None,
        ge=2,
        description="Counting window (frames). Defaults per task.",
        validate_default=True,
    )
    stride: Optional[int] = Field(
        default=None,
        ge=1,
        description="Window stride (frames). Defaults to the window.",
    )
    report_window: Optional[int] = Field(
        default=None,
        ge=1,
        description="Reporting window (frames). Defaults to 60 * fs.",
    )
    min_distance: int = Field(default=40, ge=1)

    @field_validator("window", mode="after")
    def get_window_default(
        cls, window: Optional[int], info: ValidationInfo
    ) -> int:
        """Use the task's standard counting window if none is given."""
        if window is None:
            return TASK_WINDOWS[Task(info.data.get("task", Task.RESPIRATION))]
        return window


class RunConfig(BaseSettings):
    """Root document tying every stage together. Unknown keys are rejected
    and VSYNTH_SEED in the environment overrides the seed."""

    model_config = SettingsConfigDict(env_prefix="VSYNTH_", extra="forbid")

    seed: int = Field(default=0, description="Master seed", title="Seed")
    video: VideoConfig = Field(
        default=VideoConfig(), description="Synthetic video settings"
    )
    model: ModelConfig = Field(
        default=ModelConfig(), description="Sequence model settings"
    )
    training: TrainingConfig = Field(
        default=TrainingConfig(), description="Training loop settings"
    )
    dsp: DspConfig = Field(
        default=DspConfig(), description="Classical pipeline settings"
    )
    evaluation: EvalConfig = Field(
        default=EvalConfig(), description="Evaluation settings"
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type,
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        """Environment wins over the document so sweeps can set seeds."""
        return env_settings, init_settings

    @model_validator(mode="after")
    def propagate_seed(self) -> Self:
        """Push the master seed into the video settings."""
        if self.video.seed != self.seed:
            self.video = self.video.model_copy(update={"seed": self.seed})
        return self

    @model_validator(mode="after")
    def check_model_matches_video(self) -> Self:
        """Training clips are generated at the model's input size."""
        video_dims = (
            self.video.num_frames,
            self.video.height,
            self.video.width,
        )
        model_dims = (
            self.model.num_frames,
            self.model.height,
            self.model.width,
        )
        if video_dims != model_dims:
            raise ValueError(
                f"Model input dims {model_dims} must match video dims "
                f"{video_dims} (num_frames, height, width)"
            )
        return self


def load_run_config(path: Union[str, Path, None]) -> RunConfig:
    """
    Read a RunConfig document. A missing path gives the defaults.
    Parameters
    ----------
    path : Union[str, Path, None]

    Returns
    -------
    RunConfig

    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON: {e.msg}", str(path), e.lineno)
    if not isinstance(data, dict):
        raise FormatError("Config document must be an object", str(path))
    return RunConfig(**data)


def report_window_frames(config: EvalConfig, fs: float) -> int:
    """Reporting window in frames: configured or one minute."""
    if config.report_window is not None:
        return config.report_window
    return int(math.floor(60 * fs + 0.5))
