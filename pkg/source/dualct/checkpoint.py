"""
Training checkpoints.

A checkpoint `<name>.ctdl` holds every array of a TrainingState flattened
into one CTDL container. Beside it live `<name>.manifest.csv` (layer_id,
shape, offset into the flat payload) and `<name>.cfg` with the scalars
needed to rebuild the model and resume the optimizer.
"""
import glob
import math
import os
import re
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .container import read_container, write_container
from .dualct_error import ConfigurationError, ContainerFormatError
from .geometry import FanBeamGeometry, ImageGrid
from .messages import get_logger
from .nn.network import load_state_arrays, state_arrays
from .nn.optim import OptimState
from .pipelines.architectures import ArchitectureKind, TrainedModel, build_model
from .pipelines.training import LossCurves, TrainingState

logger = get_logger("checkpoint")

MANIFEST_COLUMNS = ["layer_id", "shape", "offset"]
_EPOCH_FILE = re.compile(r"epoch_(\d+)\.ctdl$")


def _paths(path: str) -> Tuple[str, str, str]:
    stem = path[:-len(".ctdl")] if path.endswith(".ctdl") else path
    return f"{stem}.ctdl", f"{stem}.manifest.csv", f"{stem}.cfg"


def _model_arrays(model: TrainedModel) -> Dict[str, np.ndarray]:
    arrays = {}
    for i, net in enumerate(model.stages(), start=1):
        arrays.update({f"stage{i}.{name}": values for name, values in state_arrays(net).items()})
    return arrays


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _scalars(state: TrainingState) -> Dict[str, object]:
    model, optim = state.model, state.optim
    geom, grid = model.geom, model.grid
    return {
        "arch": model.arch.value,
        "depth": model.stage1.depth,
        "base_channels": model.stage1.base_channels,
        "window": model.window,
        "data_scale": repr(model.data_scale),
        "sino_scale": repr(model.sino_scale),
        "grid.nx": grid.nx,
        "grid.ny": grid.ny,
        "grid.pixel_mm": repr(grid.pixel_size_mm),
        "geom.views": geom.n_views,
        "geom.dets": geom.n_dets,
        "geom.pitch_mm": repr(geom.det_pitch_mm),
        "geom.sod_mm": repr(geom.sod_mm),
        "geom.sdd_mm": repr(geom.sdd_mm),
        "geom.angle_start_rad": repr(geom.angle_start_rad),
        "geom.angle_extent_rad": repr(geom.angle_extent_rad),
        "epoch": state.epoch,
        "optim.lr": repr(optim.lr),
        "optim.beta1": repr(optim.beta1),
        "optim.beta2": repr(optim.beta2),
        "optim.eps": repr(optim.eps),
        "optim.step": optim.step,
        "optim.best_val": repr(optim.best_val),
        "optim.plateau_count": optim.plateau_count,
        "optim.patience": optim.patience,
        "optim.factor": repr(optim.factor),
        "curves.train": _floats(state.curves.train),
        "curves.val": _floats(state.curves.val),
    }


def save_checkpoint(path: str, state: TrainingState) -> str:
    """Writes the three checkpoint files and returns the container path."""
    data_path, manifest_path, cfg_path = _paths(path)
    arrays = _model_arrays(state.model)
    for name in sorted(state.optim.m):
        arrays[f"optim.m.{name}"] = state.optim.m[name]
        arrays[f"optim.v.{name}"] = state.optim.v[name]

    rows, chunks, offset = [], [], 0
    for layer_id, values in arrays.items():
        values = np.asarray(values)
        rows.append((layer_id, "x".join(str(d) for d in values.shape), offset))
        chunks.append(values.ravel())
        offset += values.size
    write_container(data_path, np.concatenate(chunks))
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest_path, index=False)
    with open(cfg_path, "w", encoding="utf-8") as f:
        f.write("".join(f"{key} = {value}\n" for key, value in _scalars(state).items()))
    logger.info(f"Saved checkpoint {data_path} ({offset} values, epoch {state.epoch})")
    return data_path


def _read_scalars(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ConfigurationError(f"Cannot read checkpoint settings {path}", e)
    scalars = {}
    for line in lines:
        if "=" in line:
            key, value = line.split("=", 1)
            scalars[key.strip()] = value.strip()
    return scalars


def _read_arrays(data_path: str, manifest_path: str) -> Dict[str, np.ndarray]:
    flat = read_container(data_path)
    if flat.ndim != 1:
        raise ContainerFormatError(data_path, f"checkpoint payload must be 1-D, got dims {flat.shape}")
    try:
        manifest = pd.read_csv(manifest_path, dtype={"layer_id": str, "shape": str, "offset": np.int64}, keep_default_na=False)
    except (OSError, ValueError) as e:
        raise ContainerFormatError(manifest_path, "cannot read manifest", e)
    if list(manifest.columns) != MANIFEST_COLUMNS:
        raise ContainerFormatError(manifest_path, f"expected columns {MANIFEST_COLUMNS}, got {list(manifest.columns)}")

    arrays = {}
    for row in manifest.itertuples(index=False):
        shape = tuple(int(d) for d in row.shape.split("x")) if row.shape else ()
        size = int(np.prod(shape, dtype=np.int64))
        if row.offset < 0 or row.offset + size > flat.size:
            raise ContainerFormatError(manifest_path, f"entry {row.layer_id} runs past the payload")
        arrays[row.layer_id] = flat[row.offset:row.offset + size].reshape(shape)
    return arrays


def _parse_floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def load_checkpoint(path: str) -> TrainingState:
    data_path, manifest_path, cfg_path = _paths(path)
    if not os.path.exists(data_path):
        raise ConfigurationError(f"Checkpoint {data_path} does not exist")
    s = _read_scalars(cfg_path)
    try:
        arch = ArchitectureKind.parse(s["arch"])
        grid = ImageGrid(int(s["grid.nx"]), int(s["grid.ny"]), float(s["grid.pixel_mm"]))
        geom = FanBeamGeometry(
            n_views=int(s["geom.views"]),
            n_dets=int(s["geom.dets"]),
            det_pitch_mm=float(s["geom.pitch_mm"]),
            sod_mm=float(s["geom.sod_mm"]),
            sdd_mm=float(s["geom.sdd_mm"]),
            angle_start_rad=float(s["geom.angle_start_rad"]),
            angle_extent_rad=float(s["geom.angle_extent_rad"]),
        )
        model = build_model(arch, geom, grid, int(s["base_channels"]) // arch.width_factor, int(s["depth"]), window=s["window"])
        model.data_scale = float(s["data_scale"])
        model.sino_scale = float(s["sino_scale"])
        optim = OptimState(
            lr=float(s["optim.lr"]),
            beta1=float(s["optim.beta1"]),
            beta2=float(s["optim.beta2"]),
            eps=float(s["optim.eps"]),
            step=int(s["optim.step"]),
            best_val=float(s["optim.best_val"]),
            plateau_count=int(s["optim.plateau_count"]),
            patience=int(s["optim.patience"]),
            factor=float(s["optim.factor"]),
        )
        curves = LossCurves(train=_parse_floats(s["curves.train"]), val=_parse_floats(s["curves.val"]))
        epoch = int(s["epoch"])
    except KeyError as e:
        raise ConfigurationError(f"Checkpoint settings {cfg_path} lack key {e}")
    except ValueError as e:
        raise ConfigurationError(f"Checkpoint settings {cfg_path} are malformed", e)

    arrays = _read_arrays(data_path, manifest_path)
    for i, net in enumerate(model.stages(), start=1):
        prefix = f"stage{i}."
        load_state_arrays(net, {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    for key, values in arrays.items():
        if key.startswith("optim.m."):
            optim.m[key[len("optim.m."):]] = values.astype(np.float64)
        elif key.startswith("optim.v."):
            optim.v[key[len("optim.v."):]] = values.astype(np.float64)

    model.manifest = {"arch": arch.value, "epochs_done": epoch, "checkpoint": data_path}
    if not all(math.isfinite(v) for v in curves.train + curves.val):
        logger.warning(f"Checkpoint {data_path} carries non-finite loss values")
    logger.info(f"Loaded checkpoint {data_path} at epoch {epoch}")
    return TrainingState(model=model, optim=optim, curves=curves, epoch=epoch)


def load_model(path: str) -> TrainedModel:
    return load_checkpoint(path).model


def epoch_checkpoint_path(directory: str, epoch: int) -> str:
    return os.path.join(directory, f"epoch_{epoch:04d}.ctdl")


def latest_checkpoint(directory: str) -> Optional[str]:
    """Highest-epoch checkpoint in `directory`, or None."""
    found = []
    for path in glob.glob(os.path.join(directory, "epoch_*.ctdl")):
        match = _EPOCH_FILE.search(path)
        if match and os.path.exists(_paths(path)[2]):
            found.append((int(match.group(1)), path))
    return max(found)[1] if found else None
