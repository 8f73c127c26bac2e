import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..acquisition import Dataset, Sample, flip_sample
from ..dualct_error import ConfigurationError, NumericalError
from ..messages import get_logger, progress
from ..nn.optim import OptimState, adam_step, report_validation
from ..nn.tensor import Tensor, backward
from .architectures import ArchitectureKind, TrainedModel, apply_image_net, apply_projection_net, build_model
from .objectives import LossOptions, loss_dualnet, loss_image_unet, loss_projection_unet, loss_wnet

logger = get_logger("training")


@dataclass
class TrainConfig:
    """Optimization defaults: Adam at 1e-4, x0.1 after 5 stale epochs, batch 4, 30 epochs, vertical flips."""

    epochs: int = 30
    batch: int = 4
    lr: float = 1e-4
    depth: int = 3
    base_channels: int = 8
    flip: bool = True
    detach_h: bool = True
    barrier: bool = True
    reduction: str = "mean"
    seed: int = 0
    window: str = "ram-lak"
    patience: int = 5
    factor: float = 0.1

    def validate(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigurationError(f"epochs and batch must be positive, got {self.epochs} and {self.batch}")
        if not self.lr > 0:
            raise ConfigurationError(f"Learning rate must be positive, got {self.lr}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError(f"Invalid network size depth={self.depth} base={self.base_channels}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigurationError(f"Unknown loss reduction '{self.reduction}'")

    @property
    def loss_options(self) -> LossOptions:
        return LossOptions(reduction=self.reduction, detach_h=self.detach_h, barrier=self.barrier)


@dataclass
class LossCurves:
    train: List[float] = field(default_factory=list)
    val: List[float] = field(default_factory=list)

    def append(self, train_loss: float, val_loss: float):
        self.train.append(float(train_loss))
        self.val.append(float(val_loss))

    def __len__(self):
        return len(self.train)

    def rows(self):
        return [(epoch + 1, t, v) for epoch, (t, v) in enumerate(zip(self.train, self.val))]


@dataclass
class TrainingState:
    model: TrainedModel
    optim: OptimState
    curves: LossCurves
    epoch: int = 0


@dataclass
class Batch:
    f: np.ndarray
    y: np.ndarray
    p: np.ndarray
    T: np.ndarray
    I: np.ndarray
    q: Optional[np.ndarray] = None

    def __len__(self):
        return self.f.shape[0]


def make_batch(model: TrainedModel, samples: Sequence[Sample]) -> Batch:
    """Stacks samples into data-scaled (N, 1, ., .) arrays."""
    dtype = model.stage1.dtype
    scale = model.data_scale

    def stack(get):
        return np.stack([get(s) for s in samples])[:, None].astype(dtype)

    batch = Batch(
        f=stack(lambda s: s.f.values) * dtype(scale),
        y=stack(lambda s: s.y.values) * dtype(scale),
        p=stack(lambda s: s.p.values) * dtype(scale),
        T=stack(lambda s: s.T.values),
        I=stack(lambda s: s.I.values),
    )
    if not model.arch.projection_first:
        batch.q = model.fbp_layer.forward_values(batch.p)
    return batch


def batch_loss(model: TrainedModel, batch: Batch, mode: str = "train", options: LossOptions = LossOptions()) -> Tensor:
    arch = model.arch
    if arch == ArchitectureKind.IMAGE_UNET:
        out = apply_image_net(model.stage1, batch.q, mode)
        return loss_image_unet(batch.q, batch.f, batch.I, out, options)
    if arch == ArchitectureKind.WNET:
        return loss_wnet(
            batch.q, batch.f, batch.I,
            lambda x: apply_image_net(model.stage1, x, mode),
            lambda x: apply_image_net(model.stage2, x, mode),
            options,
        )
    h_hat, z_hat = apply_projection_net(model, batch.p, mode)
    if arch == ArchitectureKind.PROJECTION_CNN:
        return loss_projection_unet(batch.p, batch.y, batch.f, batch.T, batch.I, h_hat, z_hat, model.fbp_layer, options)
    return loss_dualnet(
        batch.p, batch.y, batch.f, batch.T, batch.I, (h_hat, z_hat),
        lambda x: apply_image_net(model.stage2, x, mode),
        model.fbp_layer, options,
    )


def training_step(model: TrainedModel, batch: Batch, optim: OptimState, options: LossOptions) -> float:
    model.zero_grad()
    loss = batch_loss(model, batch, "train", options)
    value = float(loss.values)
    if not math.isfinite(value):
        raise NumericalError(f"Training loss became {value}")
    backward(loss)
    params = model.parameters()
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adam_step(params, grads, optim)
    return value


def evaluate_loss(model: TrainedModel, data: Dataset, batch_size: int, options: LossOptions) -> float:
    losses, weights = [], []
    for start in range(0, len(data), batch_size):
        batch = make_batch(model, data.samples[start:start + batch_size])
        losses.append(float(batch_loss(model, batch, "eval", options).values))
        weights.append(len(batch))
    return float(np.average(losses, weights=weights))


def data_scales(data: Dataset):
    """(data_scale, sino_scale) from the training set maxima."""
    f_max = max(float(np.max(np.abs(s.f.values))) for s in data)
    p_max = max(float(np.max(np.abs(s.y.values))) for s in data)
    if f_max == 0 or p_max == 0:
        raise ConfigurationError("Training data is identically zero")
    data_scale = 1.0 / f_max
    return data_scale, 1.0 / (p_max * data_scale)


def new_training_state(arch: ArchitectureKind, data: Dataset, hyper: TrainConfig) -> TrainingState:
    if len(data) == 0:
        raise ConfigurationError("Training dataset is empty")
    hyper.validate()
    first = data[0]
    model = build_model(
        arch, first.y.geom, first.f.grid, hyper.base_channels, hyper.depth,
        np.random.default_rng([hyper.seed, 0]), window=hyper.window,
    )
    model.data_scale, model.sino_scale = data_scales(data)
    model.manifest = dict(asdict(hyper), arch=arch.value, samples=len(data))
    optim = OptimState(lr=hyper.lr, patience=hyper.patience, factor=hyper.factor)
    return TrainingState(model=model, optim=optim, curves=LossCurves())


def train(arch: ArchitectureKind, data: Dataset, hyper: TrainConfig, val_data: Dataset = None,
          state: TrainingState = None, on_epoch_end: Callable[[TrainingState], None] = None):
    """
    Minibatch Adam over `data`; returns (TrainedModel, LossCurves).

    Shuffling and flips draw from a stream seeded by (seed, epoch), so a run
    resumed from a saved TrainingState continues exactly where it stopped.
    Validation falls back to the training loss when no validation set is given.
    """
    state = state or new_training_state(arch, data, hyper)
    model, optim = state.model, state.optim
    options = hyper.loss_options
    can_flip = hyper.flip and data[0].y.geom.is_full_scan and data[0].y.geom.angle_start_rad == 0.0
    if hyper.flip and not can_flip:
        logger.warning("Flip augmentation disabled: geometry is not a full rotation from angle 0")

    epochs = progress(range(state.epoch, hyper.epochs), desc=f"train {arch.value}", initial=state.epoch, total=hyper.epochs)
    for epoch in epochs:
        rng = np.random.default_rng([hyper.seed, 1, epoch])
        order = rng.permutation(len(data))
        losses, weights = [], []
        for start in range(0, len(order), hyper.batch):
            samples = [data[int(i)] for i in order[start:start + hyper.batch]]
            if can_flip:
                samples = [flip_sample(s) if rng.random() < 0.5 else s for s in samples]
            batch = make_batch(model, samples)
            losses.append(training_step(model, batch, optim, options))
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(model, val_data, hyper.batch, options) if val_data is not None and len(val_data) else train_loss
        report_validation(optim, val_loss)
        state.curves.append(train_loss, val_loss)
        state.epoch = epoch + 1
        epochs.set_postfix(train=f"{train_loss:.4g}", val=f"{val_loss:.4g}", lr=f"{optim.lr:.2g}")
        logger.info(f"epoch {epoch + 1}/{hyper.epochs} train {train_loss:.6g} val {val_loss:.6g} lr {optim.lr:.3g}")
        if on_epoch_end is not None:
            on_epoch_end(state)

    model.manifest["epochs_done"] = state.epoch
    return model, state.curves
