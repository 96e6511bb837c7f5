"""Two-pathway sequence model: a strided Conv3D encoder gives local temporal
context, a bidirectional LSTM over its embeddings gives global context, and
each pathway feeds a per-frame signal head and an ROI decoder."""

import itertools
import logging
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, IterableDataset, get_worker_info

from vital_sign_synth.configs import (
    LossWeights,
    ModelConfig,
    OptimizerType,
    VideoConfig,
)
from vital_sign_synth.dsp import detect_peaks, rate_from_peaks
from vital_sign_synth.errors import (
    ModelNumericError,
    ParameterError,
    TrainingDivergedError,
)
from vital_sign_synth.scene_synth import VideoSample, stream_samples
from vital_sign_synth.signal_models import TimeSeries

# Every learnable or buffered tensor, keyed by its state_dict name
ModelParams = Dict[str, torch.Tensor]

LOSS_TERMS = ("signal_local", "signal_global", "roi_local", "roi_global")

# (frames, gt_signal, gt_masks), batched along dim 0 by the loader
Batch = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class ModelOutput(NamedTuple):
    """Per-frame predictions of both pathways."""

    signal_local: torch.Tensor  # (B, T)
    signal_global: torch.Tensor  # (B, T)
    roi_local: torch.Tensor  # (B, T, H, W), probabilities
    roi_global: torch.Tensor  # (B, T, H, W), probabilities


class LossBreakdown(NamedTuple):
    """Weighted total plus the unweighted value of each term."""

    total: torch.Tensor
    terms: Dict[str, float]


class TrainingResult(NamedTuple):
    """Trained network and one loss record per step."""

    model: "VSignNet"
    trace: List[Dict[str, float]]


class InferenceResult(NamedTuple):
    """Global-pathway predictions for one video."""

    signal: TimeSeries
    signal_local: TimeSeries
    roi: np.ndarray  # (T, H, W) boolean
    roi_probability: np.ndarray  # (T, H, W)
    rate: Optional[float]
    peaks: List[int]


def _encoder_block(
    in_channels: int, config: ModelConfig
) -> nn.Sequential:
    """Conv3D - ReLU - BatchNorm - Dropout."""
    stride = (
        config.temporal_stride,
        config.spatial_stride,
        config.spatial_stride,
    )
    return nn.Sequential(
        nn.Conv3d(
            in_channels,
            config.channels,
            kernel_size=config.kernel_size,
            stride=stride,
            padding=config.kernel_size // 2,
        ),
        nn.ReLU(),
        nn.BatchNorm3d(config.channels),
        nn.Dropout(config.dropout),
    )


class SignalHead(nn.Module):
    """Fully connected layers mapping each step's features to one value."""

    def __init__(self, in_features: int, widths: Sequence[int]) -> None:
        """Hidden layers of the given widths, then a single output unit."""
        super().__init__()
        layers: List[nn.Module] = []
        for width in widths:
            layers += [nn.Linear(in_features, width), nn.ReLU()]
            in_features = width
        layers.append(nn.Linear(in_features, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, S, F) -> (B, S)"""
        return self.layers(x).squeeze(-1)


class RoiDecoder(nn.Module):
    """Transposed convolutions turning each step's features into an H x W
    probability map."""

    def __init__(self, in_features: int, config: ModelConfig) -> None:
        """Project to the encoder's spatial grid, then upsample it back."""
        super().__init__()
        _, grid_h, grid_w = config.embedding_shape
        self.grid = (config.decoder_channels, grid_h, grid_w)
        self.project = nn.Linear(
            in_features, config.decoder_channels * grid_h * grid_w
        )
        stride = config.spatial_stride
        blocks: List[nn.Module] = []
        for index in range(config.encoder_blocks):
            last = index == config.encoder_blocks - 1
            out_channels = 1 if last else config.decoder_channels
            blocks.append(
                nn.ConvTranspose2d(
                    config.decoder_channels,
                    out_channels,
                    kernel_size=config.kernel_size,
                    stride=stride,
                    padding=config.kernel_size // 2,
                    output_padding=stride - 1,
                )
            )
            if not last:
                blocks += [
                    nn.ReLU(),
                    nn.BatchNorm2d(out_channels),
                    nn.Dropout(config.dropout),
                ]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, S, F) -> (B, S, H, W)"""
        batch, steps, features = x.shape
        grid = self.project(x.reshape(batch * steps, features))
        grid = grid.reshape((batch * steps,) + self.grid)
        maps = torch.sigmoid(self.blocks(grid))
        return maps.reshape((batch, steps) + maps.shape[-2:])


class VSignNet(nn.Module):
    """Encoder, bidirectional recurrent aggregator, and local/global signal
    heads and ROI decoders."""

    def __init__(self, config: ModelConfig) -> None:
        """Build every layer from the config."""
        super().__init__()
        self.config = config
        blocks = []
        in_channels = 1
        for _ in range(config.encoder_blocks):
            blocks.append(_encoder_block(in_channels, config))
            in_channels = config.channels
        self.encoder = nn.Sequential(*blocks)
        embedding = config.embedding_size
        self.recurrent = nn.LSTM(
            input_size=embedding,
            hidden_size=config.hidden_units,
            num_layers=config.recurrent_layers,
            batch_first=True,
            bidirectional=config.bidirectional,
            dropout=config.dropout if config.recurrent_layers > 1 else 0.0,
        )
        recurrent_out = config.hidden_units * (
            2 if config.bidirectional else 1
        )
        self.signal_local = SignalHead(embedding, config.signal_head_widths)
        self.signal_global = SignalHead(
            recurrent_out, config.signal_head_widths
        )
        self.roi_local = RoiDecoder(embedding, config)
        self.roi_global = RoiDecoder(recurrent_out, config)

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) -> (B, T', C*h*w) per-step embeddings."""
        features = self.encoder(frames.unsqueeze(1))
        batch, channels, steps, grid_h, grid_w = features.shape
        features = features.permute(0, 2, 1, 3, 4)
        return features.reshape(batch, steps, channels * grid_h * grid_w)

    def forward(self, frames: torch.Tensor) -> ModelOutput:
        """
        Predict per-frame signals and ROI maps.
        Parameters
        ----------
        frames : torch.Tensor
          (B, T, H, W) with values in [0, 1]. H and W must match the config
          and T must be divisible by the temporal stride product.

        Returns
        -------
        ModelOutput

        """
        self._check_input(frames)
        factor = self.config.temporal_factor
        embedding = self.embed(frames)
        context, _ = self.recurrent(embedding)
        output = ModelOutput(
            signal_local=_expand(self.signal_local(embedding), factor),
            signal_global=_expand(self.signal_global(context), factor),
            roi_local=_expand(self.roi_local(embedding), factor),
            roi_global=_expand(self.roi_global(context), factor),
        )
        for name, tensor in output._asdict().items():
            if not torch.isfinite(tensor).all():
                raise ModelNumericError("Non-finite activation", name)
        return output

    def _check_input(self, frames: torch.Tensor) -> None:
        """Shape preconditions of forward."""
        if frames.dim() != 4:
            raise ParameterError(
                "Expected (B, T, H, W) frames, got shape "
                f"{tuple(frames.shape)}"
            )
        _, steps, height, width = frames.shape
        if (height, width) != (self.config.height, self.config.width):
            raise ParameterError(
                f"Frame size {(height, width)} does not match the model "
                f"({self.config.height}, {self.config.width})"
            )
        if steps % self.config.temporal_factor != 0:
            raise ParameterError(
                f"Clip length {steps} is not divisible by "
                f"{self.config.temporal_factor}"
            )


def _expand(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour temporal upsampling along dim 1."""
    return x.repeat_interleave(factor, dim=1)


def build_model(config: ModelConfig, seed: int = 0) -> VSignNet:
    """
    Initialise a network deterministically.
    Parameters
    ----------
    config : ModelConfig
    seed : int

    Returns
    -------
    VSignNet

    """
    torch.manual_seed(seed)
    return VSignNet(config)


def model_params(model: VSignNet) -> ModelParams:
    """Named copies of every parameter and buffer."""
    return {
        name: tensor.detach().clone()
        for name, tensor in model.state_dict().items()
    }


def forward(
    model: VSignNet, frames: torch.Tensor, train: bool = False
) -> ModelOutput:
    """Run the network in training (dropout on, batch statistics) or
    inference mode."""
    model.train(train)
    return model(frames)


def compute_loss(
    output: ModelOutput,
    gt_signal: torch.Tensor,
    gt_masks: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """
    MSE on both signals and pixelwise binary cross-entropy on both ROI maps,
    combined with the configured weights. Every term is a mean.
    Parameters
    ----------
    output : ModelOutput
    gt_signal : torch.Tensor
      (B, T)
    gt_masks : torch.Tensor
      (B, T, H, W), 0 or 1.
    weights : LossWeights

    Returns
    -------
    LossBreakdown

    """
    gt_masks = gt_masks.to(output.roi_global.dtype)
    gt_signal = gt_signal.to(output.signal_global.dtype)
    terms = {
        "signal_local": F.mse_loss(output.signal_local, gt_signal),
        "signal_global": F.mse_loss(output.signal_global, gt_signal),
        "roi_local": F.binary_cross_entropy(output.roi_local, gt_masks),
        "roi_global": F.binary_cross_entropy(output.roi_global, gt_masks),
    }
    total = sum(getattr(weights, name) * terms[name] for name in LOSS_TERMS)
    return LossBreakdown(
        total=total,
        terms={name: float(value.detach()) for name, value in terms.items()},
    )


def compute_gradients(
    model: VSignNet,
    frames: torch.Tensor,
    gt_signal: torch.Tensor,
    gt_masks: torch.Tensor,
    weights: LossWeights,
    train: bool = False,
) -> Dict[str, torch.Tensor]:
    """
    Gradient of the weighted loss with respect to every parameter.
    Parameters
    ----------
    model : VSignNet
    frames : torch.Tensor
    gt_signal : torch.Tensor
    gt_masks : torch.Tensor
    weights : LossWeights
    train : bool
      Use training mode. Off by default so the result is deterministic.

    Returns
    -------
    Dict[str, torch.Tensor]

    """
    model.zero_grad(set_to_none=True)
    output = forward(model, frames, train=train)
    loss = compute_loss(output, gt_signal, gt_masks, weights)
    loss.total.backward()
    return _collect_gradients(model)


def _collect_gradients(model: VSignNet) -> Dict[str, torch.Tensor]:
    """Copy gradients, zeros for unused parameters, rejecting non-finite
    values."""
    gradients = {}
    for name, param in model.named_parameters():
        grad = param.grad
        if grad is None:
            grad = torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise ModelNumericError("Non-finite gradient", name)
        gradients[name] = grad.detach().clone()
    return gradients


def sample_tensors(
    sample: VideoSample, dtype: torch.dtype = torch.float32
) -> Batch:
    """(frames, gt_signal, gt_masks) tensors of one sample, unbatched."""
    return (
        torch.as_tensor(sample.frames, dtype=dtype),
        torch.as_tensor(sample.gt_signal.values, dtype=dtype),
        torch.as_tensor(sample.gt_masks, dtype=dtype),
    )


class VideoStream(IterableDataset):
    """
    Endless synthetic videos as sample tensors. Batch b holds the seeds
    start_seed + b * batch_size + i. Loader workers take every
    num_workers-th batch, so the batch order does not depend on the
    number of workers.
    """

    def __init__(
        self,
        cfg: VideoConfig,
        batch_size: int,
        start_seed: Optional[int] = None,
    ) -> None:
        """Stream of cfg videos starting at start_seed (cfg.seed if None)."""
        super().__init__()
        self.cfg = cfg
        self.batch_size = batch_size
        self.start_seed = cfg.seed if start_seed is None else start_seed

    def __iter__(self) -> Iterator[Batch]:
        """Samples of this worker's batches, in batch order."""
        info = get_worker_info()
        worker, workers = 0, 1
        if info is not None:
            worker, workers = info.id, info.num_workers
        for index in itertools.count(worker, workers):
            first = self.start_seed + index * self.batch_size
            samples = stream_samples(self.cfg, first)
            for sample in itertools.islice(samples, self.batch_size):
                yield sample_tensors(sample)


def make_loader(
    cfg: VideoConfig,
    batch_size: int,
    start_seed: Optional[int] = None,
    num_workers: int = 0,
    prefetch_factor: int = 2,
) -> DataLoader:
    """
    Batches of synthetic videos for train_model.
    Parameters
    ----------
    cfg : VideoConfig
    batch_size : int
    start_seed : Optional[int]
      Seed of the first sample. Defaults to cfg.seed.
    num_workers : int
      Generator processes. 0 generates in the calling process.
    prefetch_factor : int
      Batches each worker prepares ahead. Ignored without workers.

    Returns
    -------
    DataLoader

    """
    options = dict()
    if num_workers > 0:
        options["prefetch_factor"] = prefetch_factor
    return DataLoader(
        VideoStream(cfg, batch_size, start_seed),
        batch_size=batch_size,
        num_workers=num_workers,
        **options,
    )


def _make_optimizer(
    model: VSignNet, config: ModelConfig
) -> torch.optim.Optimizer:
    """SGD (optionally with momentum) or Adam."""
    if config.optimizer == OptimizerType.ADAM:
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
    )


def train_model(
    config: ModelConfig,
    batches: Iterable[Batch],
    steps: int,
    seed: int = 0,
    model: Optional[VSignNet] = None,
    start_step: int = 0,
    log_every: int = 10,
    on_step: Optional[Callable[[int, VSignNet], None]] = None,
) -> TrainingResult:
    """
    Train on batches drawn from a stream of synthetic videos.
    Parameters
    ----------
    config : ModelConfig
    batches : Iterable[Batch]
      Batched (frames, gt_signal, gt_masks), e.g. from make_loader.
      Deterministic given its seed. Must hold at least steps batches.
    steps : int
      Number of update steps to run.
    seed : int
      Initialisation and dropout seed.
    model : Optional[VSignNet]
      Network to continue training. A new one is built if None.
    start_step : int
      Step number of the first update, for resumed runs.
    log_every : int
    on_step : Optional[Callable[[int, VSignNet], None]]
      Called after every update with the completed step number.

    Returns
    -------
    TrainingResult

    """
    if model is None:
        model = build_model(config, seed)
    # A loader iterator draws its base seed from the global generator
    batch_iter = iter(batches)
    torch.manual_seed(seed + start_step)
    optimizer = _make_optimizer(model, config)
    trace: List[Dict[str, float]] = []
    for step in range(start_step, start_step + steps):
        frames, gt_signal, gt_masks = next(batch_iter)
        optimizer.zero_grad(set_to_none=True)
        try:
            output = forward(model, frames, train=True)
        except ModelNumericError:
            raise TrainingDivergedError(step, trace)
        loss = compute_loss(output, gt_signal, gt_masks, config.loss_weights)
        record = {"step": step, "total": float(loss.total.detach())}
        record.update(loss.terms)
        if not np.isfinite(record["total"]):
            trace.append(record)
            raise TrainingDivergedError(step, trace)
        loss.total.backward()
        optimizer.step()
        trace.append(record)
        if step % log_every == 0:
            logging.info(f"step {step} loss {record['total']:.6f}")
        if on_step is not None:
            on_step(step + 1, model)
    model.eval()
    return TrainingResult(model=model, trace=trace)


def predict(
    model: VSignNet, frames: np.ndarray, fs: float, threshold: float = 0.5
) -> InferenceResult:
    """
    Inference on one video of any length. The clip is edge-padded up to a
    multiple of the temporal stride product and cropped back.
    Parameters
    ----------
    model : VSignNet
    frames : np.ndarray
      (T, H, W)
    fs : float
    threshold : float
      Probability above which a pixel is part of the ROI.

    Returns
    -------
    InferenceResult
      rate is None and peaks empty; see infer_rate.

    """
    num_frames = frames.shape[0]
    factor = model.config.temporal_factor
    padded = -(-num_frames // factor) * factor
    if padded != num_frames:
        frames = np.pad(
            frames, ((0, padded - num_frames), (0, 0), (0, 0)), mode="edge"
        )
    dtype = next(model.parameters()).dtype
    batch = torch.as_tensor(frames[None], dtype=dtype)
    with torch.no_grad():
        output = forward(model, batch, train=False)
    signal = output.signal_global[0, :num_frames].double().numpy()
    local = output.signal_local[0, :num_frames].double().numpy()
    probability = output.roi_global[0, :num_frames].double().numpy()
    return InferenceResult(
        signal=TimeSeries(values=signal, fs=fs),
        signal_local=TimeSeries(values=local, fs=fs),
        roi=probability > threshold,
        roi_probability=probability,
        rate=None,
        peaks=[],
    )


def infer_rate(
    model: VSignNet,
    frames: np.ndarray,
    fs: float,
    min_distance: int = 40,
    threshold: float = 0.5,
) -> InferenceResult:
    """
    Predict the signal and ROI, then count peaks of the global signal.
    Parameters
    ----------
    model : VSignNet
    frames : np.ndarray
    fs : float
    min_distance : int
      Minimum frames between peaks.
    threshold : float

    Returns
    -------
    InferenceResult

    """
    result = predict(model, frames, fs, threshold)
    peaks = detect_peaks(result.signal, min_distance)
    rate = rate_from_peaks(peaks, fs)
    return result._replace(rate=rate, peaks=peaks)
