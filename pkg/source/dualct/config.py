"""
Flat `key = value` experiment configuration.

Keys are fixed by SCHEMA; unknown keys are rejected. Values may be quoted.
Empty values mean "derive": grid/geometry sizes come from `geom.scale`,
`sim.i0` / `sim.ratio` left empty are drawn per sample, `tv.step` left empty
uses the power-iteration Lipschitz estimate.
"""
import math
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional

from .acquisition import DEFAULT_ATTENUATION_SCALE, DatasetConfig
from .baselines import TvConfig
from .dualct_error import ConfigurationError, DomainError
from .geometry import FanBeamGeometry, ImageGrid, scaled_geometry, scaled_grid
from .pipelines.architectures import ArchitectureKind
from .pipelines.training import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _parse_list(text: str):
    return tuple(_parse_float(part) for part in text.split(",") if part.strip())


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    optional: bool = False


SCHEMA: Dict[str, Key] = {
    "grid.nx": Key(int, None, True),
    "grid.ny": Key(int, None, True),
    "grid.pixel_mm": Key(_parse_float, None, True),
    "geom.views": Key(int, None, True),
    "geom.dets": Key(int, None, True),
    "geom.pitch_mm": Key(_parse_float, None, True),
    "geom.sod_mm": Key(_parse_float, 1000.0),
    "geom.sdd_mm": Key(_parse_float, 1500.0),
    "geom.scale": Key(_parse_float, 0.125),
    "sim.i0": Key(_parse_float, None, True),
    "sim.ratio": Key(_parse_float, None, True),
    "sim.seed": Key(int, 0),
    "sim.schedule_mode": Key(str, "sample"),
    "sim.attenuation_scale": Key(_parse_float, DEFAULT_ATTENUATION_SCALE),
    "sim.phantom": Key(str, "random-ellipses"),
    "sim.n_phantoms": Key(int, 4),
    "sim.n_ellipses": Key(int, 8),
    "sim.flip": Key(_parse_bool, False),
    "sim.val_phantoms": Key(int, 0),
    "sim.test_phantoms": Key(int, 4),
    "sim.ratios": Key(_parse_list, ()),
    "sim.i0s": Key(_parse_list, ()),
    "train.arch": Key(str, "dualnet"),
    "train.depth": Key(int, 3),
    "train.base_channels": Key(int, 8),
    "train.lr": Key(_parse_float, 1e-4),
    "train.batch": Key(int, 4),
    "train.epochs": Key(int, 30),
    "train.flip": Key(_parse_bool, True),
    "train.detach_h": Key(_parse_bool, True),
    "train.barrier": Key(_parse_bool, True),
    "train.seed": Key(int, 0),
    "train.loss_reduction": Key(str, "mean"),
    "train.window": Key(str, "ram-lak"),
    "tv.lambda": Key(_parse_float, 1e-4),
    "tv.iters": Key(int, 100),
    "tv.step": Key(_parse_float, None, True),
    "tv.epsilon": Key(_parse_float, 1e-6),
    "tv.backtracking": Key(_parse_bool, True),
    "metrics.psnr_convention": Key(str, "scaled"),
    "metrics.ssim_windowed": Key(_parse_bool, False),
    "render.low_hu": Key(_parse_float, -150.0),
    "render.high_hu": Key(_parse_float, 400.0),
    "paths.out_dir": Key(str, "out"),
}


class ExperimentConfig:
    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = {key: entry.default for key, entry in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigurationError(f"Unknown config key '{key}'")
        return self.values[key]

    def set(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigurationError(f"Unknown config key '{key}'")
        entry = SCHEMA[key]
        if isinstance(value, str):
            text = value.strip().strip('"').strip("'")
            if text == "":
                if not entry.optional and entry.default != ():
                    raise ConfigurationError(f"Config key '{key}' needs a value")
                value = entry.default
            else:
                try:
                    value = entry.parse(text)
                except ValueError as e:
                    raise ConfigurationError(f"Bad value for '{key}'", e)
        self.values[key] = value

    def apply_overrides(self, overrides: Iterable[str]):
        for item in overrides or ():
            if "=" not in item:
                raise ConfigurationError(f"Override '{item}' is not key=value")
            key, value = item.split("=", 1)
            self.set(key.strip(), value)
        return self

    def to_text(self) -> str:
        return "".join(f"{key} = {_format(value)}\n" for key, value in self.values.items())

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @property
    def out_dir(self) -> str:
        return self["paths.out_dir"]

    def ensure_out_dir(self) -> str:
        path = os.path.abspath(self.out_dir)
        try:
            os.makedirs(path, exist_ok=True)
        except OSError as e:
            raise ConfigurationError(f"Cannot create output directory {path}", e)
        if not os.access(path, os.W_OK):
            raise ConfigurationError(f"Output directory {path} is not writable")
        return path

    def output_path(self, name: str) -> str:
        """Path under the output directory; names may not escape it."""
        root = self.ensure_out_dir()
        path = os.path.abspath(os.path.join(root, name))
        if os.path.commonpath([root, path]) != root:
            raise ConfigurationError(f"Output {name} would land outside {root}")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def grid(self) -> ImageGrid:
        try:
            base = scaled_grid(self["geom.scale"])
            nx = self["grid.nx"] or base.nx
            ny = self["grid.ny"] or self["grid.nx"] or base.ny
            # resized grids keep the physical field unless a pitch is given
            pixel = self["grid.pixel_mm"] or base.nx * base.pixel_size_mm / nx
            return ImageGrid(nx, ny, pixel)
        except DomainError as e:
            raise ConfigurationError("Invalid image grid", e)

    def geometry(self) -> FanBeamGeometry:
        try:
            base = scaled_geometry(self["geom.scale"])
            return FanBeamGeometry(
                n_views=self["geom.views"] or base.n_views,
                n_dets=self["geom.dets"] or base.n_dets,
                det_pitch_mm=self["geom.pitch_mm"] or base.det_pitch_mm,
                sod_mm=self["geom.sod_mm"],
                sdd_mm=self["geom.sdd_mm"],
            )
        except DomainError as e:
            raise ConfigurationError("Invalid scan geometry", e)

    def dataset_config(self, n_phantoms: Optional[int] = None) -> DatasetConfig:
        return DatasetConfig(
            grid=self.grid(),
            geom=self.geometry(),
            n_phantoms=self["sim.n_phantoms"] if n_phantoms is None else n_phantoms,
            phantom=self["sim.phantom"],
            n_ellipses=self["sim.n_ellipses"],
            schedule_mode=self["sim.schedule_mode"],
            ratio=self["sim.ratio"],
            i0=self["sim.i0"],
            ratios=self["sim.ratios"],
            i0s=self["sim.i0s"],
            flip=self["sim.flip"],
            attenuation_scale=self["sim.attenuation_scale"],
        )

    def arch(self) -> ArchitectureKind:
        return ArchitectureKind.parse(self["train.arch"])

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            epochs=self["train.epochs"],
            batch=self["train.batch"],
            lr=self["train.lr"],
            depth=self["train.depth"],
            base_channels=self["train.base_channels"],
            flip=self["train.flip"],
            detach_h=self["train.detach_h"],
            barrier=self["train.barrier"],
            reduction=self["train.loss_reduction"],
            seed=self["train.seed"],
            window=self["train.window"],
        )
        cfg.validate()
        return cfg

    def tv_config(self) -> TvConfig:
        cfg = TvConfig(
            lam=self["tv.lambda"],
            n_iters=self["tv.iters"],
            step=self["tv.step"],
            epsilon=self["tv.epsilon"],
            backtracking=self["tv.backtracking"],
        )
        try:
            cfg.validate()
        except DomainError as e:
            raise ConfigurationError("Invalid TV settings", e)
        return cfg


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"Line {number}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}", e)
