"""
Batch command line: phantom, simulate, recon, train, eval, diagnose, render.

Every command reads the flat experiment config (`--config`, `--set key=value`),
writes only below `paths.out_dir` and returns 0 on success, 2 on usage or
configuration errors and 3 on numerical failures.
"""
import argparse
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd
from PIL import Image as PilImage
from PIL.PngImagePlugin import PngInfo

from . import __version__
from .acquisition import PHANTOM_KINDS, WATER_MU_PER_MM, build_dataset, ingest_raw_image, make_phantom, make_sample, sample_i0, sample_truncation_ratio
from .baselines import extrapolate_sinogram, tv_reconstruct
from .checkpoint import epoch_checkpoint_path, latest_checkpoint, load_checkpoint, load_model, save_checkpoint
from .config import ExperimentConfig, load_config
from .container import read_container, write_container
from .diagnostics import coupled_artifact_rank_experiment, evaluate_regions, singular_spectrum, spectrum_area
from .dualct_error import ConfigurationError, DualCtError
from .geometry import ProjectionMask, roi_mask
from .messages import get_logger
from .pipelines import reconstruct, stage_features, train
from .pipelines.training import new_training_state
from .projector import Image, Role, Sinogram, fbp

logger = get_logger("cli")

METHODS = ("fbp", "extrapolate-fbp", "tv", "model")
DEFAULT_PENCIL = 64


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.apply_overrides(args.set)


def _save_effective_config(cfg: ExperimentConfig):
    cfg.write(cfg.output_path("config.cfg"))


def _rng(cfg: ExperimentConfig, seed: Optional[int]):
    return np.random.default_rng(cfg["sim.seed"] if seed is None else seed)


def cmd_phantom(cfg: ExperimentConfig, args) -> int:
    if args.nx:
        cfg.set("grid.nx", str(args.nx))
        cfg.set("grid.ny", str(args.nx))
    grid = cfg.grid()
    phantom = make_phantom(args.kind, grid, _rng(cfg, args.seed), cfg["sim.n_ellipses"])
    values = phantom.values * cfg["sim.attenuation_scale"]
    path = cfg.output_path(args.out)
    write_container(path, values)
    _save_effective_config(cfg)
    print(f"{path}: {grid.ny}x{grid.nx}, values in [{values.min():.6g}, {values.max():.6g}]")
    return 0


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    grid, geom = cfg.grid(), cfg.geometry()
    geom.check_covers(grid)
    f = ingest_raw_image(args.image, grid)
    rng = _rng(cfg, args.seed)
    ratio = args.ratio if args.ratio is not None else cfg["sim.ratio"]
    if ratio is None:
        ratio = sample_truncation_ratio(rng)
    i0 = args.i0 if args.i0 is not None else cfg["sim.i0"]
    if i0 is None:
        i0 = sample_i0(rng)
    sample = make_sample(f, geom, ratio, i0, rng)

    for name, values in (("y", sample.y.values), ("p", sample.p.values), ("T", sample.T.values), ("I", sample.I.values)):
        write_container(cfg.output_path(f"{args.prefix}_{name}.ctdl"), values)
    _save_effective_config(cfg)
    print(f"ratio {ratio:.4f}, i0 {i0:.4g}: kept {sample.T.kept} of {geom.n_dets} detectors, ROI radius {sample.I.mu_mm:.2f} mm")
    return 0


def _load_measurement(cfg: ExperimentConfig, sino_path: str, mask_path: str, geom):
    p = Sinogram(geom, read_container(sino_path, expected_shape=geom.shape))
    T = ProjectionMask.from_values(read_container(mask_path, expected_shape=geom.shape))
    return p, T


def _reconstruct(method: str, cfg: ExperimentConfig, p: Sinogram, T: ProjectionMask, grid, model=None) -> Image:
    window = cfg["train.window"]
    if method == "fbp":
        return fbp(p, grid, window)
    if method == "extrapolate-fbp":
        return fbp(extrapolate_sinogram(p, T), grid, window)
    if method == "tv":
        return tv_reconstruct(p, T, grid, cfg.tv_config())
    if model is None:
        raise ConfigurationError("Method 'model' needs --checkpoint")
    return reconstruct(model, p, T)


def _metric_rows(cfg: ExperimentConfig, f: Image, recon: Image, roi, sample_id, method) -> List[dict]:
    reports = evaluate_regions(
        f, recon, roi, sample_id, method,
        psnr_convention=cfg["metrics.psnr_convention"],
        ssim_windowed=cfg["metrics.ssim_windowed"],
    )
    return [r.to_row() for r in reports]


def cmd_recon(cfg: ExperimentConfig, args) -> int:
    model = load_model(args.checkpoint) if args.checkpoint else None
    if args.method == "model" and model is None:
        raise ConfigurationError("Method 'model' needs --checkpoint")
    grid, geom = (model.grid, model.geom) if model is not None else (cfg.grid(), cfg.geometry())
    p, T = _load_measurement(cfg, args.sino, args.mask, geom)
    recon = _reconstruct(args.method, cfg, p, T, grid, model)

    stem = args.out or f"recon_{args.method}"
    path = cfg.output_path(f"{stem}.ctdl")
    write_container(path, recon.values)
    if args.reference:
        f = Image(grid, read_container(args.reference, expected_shape=grid.shape), Role.GROUND_TRUTH)
        rows = _metric_rows(cfg, f, recon, roi_mask(grid, geom, T).values, os.path.basename(args.sino), args.method)
        pd.DataFrame(rows).to_csv(cfg.output_path(f"{stem}_metrics.csv"), index=False)
    _save_effective_config(cfg)
    print(path)
    return 0


def _datasets(cfg: ExperimentConfig):
    seed = cfg["sim.seed"]
    train_data = build_dataset(cfg.dataset_config(), seed, "train")
    val_data = None
    if cfg["sim.val_phantoms"] > 0:
        val_data = build_dataset(cfg.dataset_config(cfg["sim.val_phantoms"]), seed, "val")
    return train_data, val_data


def _write_curves(cfg: ExperimentConfig, name: str, curves) -> str:
    path = cfg.output_path(f"{name}_loss.csv")
    pd.DataFrame(curves.rows(), columns=["epoch", "train", "val"]).to_csv(path, index=False)
    return path


def cmd_train(cfg: ExperimentConfig, args) -> int:
    if args.arch:
        cfg.set("train.arch", args.arch)
    arch = cfg.arch()
    hyper = cfg.train_config()
    train_data, val_data = _datasets(cfg)
    checkpoint_dir = cfg.output_path(os.path.join("checkpoints", arch.value))
    os.makedirs(checkpoint_dir, exist_ok=True)

    state = None
    if args.resume:
        latest = latest_checkpoint(checkpoint_dir)
        if latest is not None:
            state = load_checkpoint(latest)
            if state.model.arch != arch:
                raise ConfigurationError(f"Checkpoint {latest} holds {state.model.arch.value}, not {arch.value}")
            logger.info(f"Resuming {arch.value} from epoch {state.epoch}")
    if state is None:
        state = new_training_state(arch, train_data, hyper)

    def on_epoch_end(s):
        save_checkpoint(epoch_checkpoint_path(checkpoint_dir, s.epoch), s)
        _write_curves(cfg, arch.value, s.curves)

    _, curves = train(arch, train_data, hyper, val_data, state=state, on_epoch_end=on_epoch_end)
    final = save_checkpoint(cfg.output_path(f"{arch.value}.ctdl"), state)
    curves_path = _write_curves(cfg, arch.value, curves)
    _save_effective_config(cfg)
    print(f"{final}\n{curves_path}")
    return 0


def _checkpoint_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    n_test = cfg["sim.test_phantoms"]
    if n_test < 1:
        raise ConfigurationError("The test set is empty (sim.test_phantoms = 0)")
    test_data = build_dataset(cfg.dataset_config(n_test), cfg["sim.seed"], "test")
    if len(test_data) == 0:
        raise ConfigurationError("The test set is empty")

    methods = [(m, None) for m in args.methods.split(",") if m]
    for m, _ in methods:
        if m not in METHODS[:3]:
            raise ConfigurationError(f"Unknown method '{m}'; models are given with --checkpoint")
    methods += [(f"model:{_checkpoint_name(path)}", load_model(path)) for path in args.checkpoint or []]
    if not methods:
        raise ConfigurationError("Nothing to evaluate")

    rows = []
    for position, sample in enumerate(test_data):
        for name, model in methods:
            method = "model" if model is not None else name
            recon = _reconstruct(method, cfg, sample.p, sample.T, sample.f.grid, model)
            row = {"sample": position, "ratio": sample.ratio, "i0": sample.i0, "method": name}
            for report in _metric_rows(cfg, sample.f, recon, sample.I.values, position, name):
                for metric in ("nmse", "psnr_db", "ssim"):
                    row[f"{metric}_{report['region']}"] = report[metric]
            rows.append(row)

    table = pd.DataFrame(rows)
    means = table.drop(columns=["sample"]).groupby(["ratio", "i0", "method"], as_index=False, sort=True).mean()
    means.insert(0, "sample", "mean")
    path = cfg.output_path(args.out)
    pd.concat([table, means], ignore_index=True).to_csv(path, index=False)
    _save_effective_config(cfg)
    print(path)
    return 0


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    columns = {}
    if args.checkpoint:
        test_data = build_dataset(cfg.dataset_config(max(cfg["sim.test_phantoms"], 1)), cfg["sim.seed"], "test")
        if not (0 <= args.sample < len(test_data)):
            raise ConfigurationError(f"Sample {args.sample} is outside the test set of {len(test_data)}")
        sample = test_data[args.sample]
        for path in args.checkpoint:
            model = load_model(path)
            maps = stage_features(model, sample.p, sample.T, args.stage)
            spectrum = singular_spectrum(maps, min(args.d, maps[0].size))
            columns[_checkpoint_name(path)] = pd.Series(spectrum)
            logger.info(f"{path}: spectrum area {spectrum_area(spectrum):.4f}")
    if args.synthetic:
        result = coupled_artifact_rank_experiment(_rng(cfg, None), trials=args.trials)
        summary = pd.DataFrame(
            [("cupping", result.cupping_rank), ("noise", result.noise_rank), ("coupled", result.coupled_rank)],
            columns=["signal", "mean_rank"],
        )
        summary.to_csv(cfg.output_path("rank_experiment.csv"), index=False)
        print(f"cupping {result.reduction('cupping'):.0%} and noise {result.reduction('noise'):.0%} fewer singular values than coupled")
    if not columns and not args.synthetic:
        raise ConfigurationError("Give at least one --checkpoint or --synthetic")

    if columns:
        table = pd.DataFrame(columns)
        table.index.name = "k"
        path = cfg.output_path(args.out)
        table.to_csv(path)
        print(path)
    _save_effective_config(cfg)
    return 0


def to_hounsfield(mu: np.ndarray) -> np.ndarray:
    return 1000.0 * (np.asarray(mu, dtype=np.float64) - WATER_MU_PER_MM) / WATER_MU_PER_MM


def render_window(hu: np.ndarray, low: float, high: float) -> np.ndarray:
    """Linear map of [low, high] HU onto 0..255, clamped."""
    if not high > low:
        raise ConfigurationError(f"Display window needs high > low, got ({low}, {high})")
    scaled = (np.asarray(hu, dtype=np.float64) - low) / (high - low)
    return np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_render(cfg: ExperimentConfig, args) -> int:
    values = read_container(args.image)
    if values.ndim != 2:
        raise ConfigurationError(f"Can only render 2-D images, {args.image} has dims {values.shape}")
    low = cfg["render.low_hu"] if args.low is None else args.low
    high = cfg["render.high_hu"] if args.high is None else args.high
    pixels = render_window(to_hounsfield(values), low, high)

    info = PngInfo()
    info.add_text("window_hu", f"{low:g},{high:g}")
    info.add_text("source", os.path.basename(args.image))
    path = cfg.output_path(args.out or f"{_checkpoint_name(args.image)}.png")
    PilImage.fromarray(pixels).save(path, format="PNG", pnginfo=info)
    print(path)
    return 0


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="key = value experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    parser = argparse.ArgumentParser(prog="dualct", description="Low-dose interior CT reconstruction experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("phantom", parents=[common], help="write a phantom image")
    p.add_argument("--kind", choices=PHANTOM_KINDS, default="shepp-logan")
    p.add_argument("--nx", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="phantom.ctdl")
    p.set_defaults(run=cmd_phantom)

    p = commands.add_parser("simulate", parents=[common], help="project, add noise and truncate")
    p.add_argument("--image", required=True)
    p.add_argument("--ratio", type=float)
    p.add_argument("--i0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix", default="sim")
    p.set_defaults(run=cmd_simulate)

    p = commands.add_parser("recon", parents=[common], help="reconstruct one measurement")
    p.add_argument("--method", choices=METHODS, default="fbp")
    p.add_argument("--sino", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--reference", help="ground truth image for metrics")
    p.add_argument("--out")
    p.set_defaults(run=cmd_recon)

    p = commands.add_parser("train", parents=[common], help="train one architecture")
    p.add_argument("--arch")
    p.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
    p.set_defaults(run=cmd_train)

    p = commands.add_parser("eval", parents=[common], help="metrics over the test split")
    p.add_argument("--methods", default="fbp,extrapolate-fbp")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--out", default="eval.csv")
    p.set_defaults(run=cmd_eval)

    p = commands.add_parser("diagnose", parents=[common], help="Hankel singular value spectra")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--d", type=int, default=DEFAULT_PENCIL)
    p.add_argument("--synthetic", action="store_true", help="also run the cupping/noise rank comparison")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", default="spectra.csv")
    p.set_defaults(run=cmd_diagnose)

    p = commands.add_parser("render", parents=[common], help="8-bit PNG in a HU display window")
    p.add_argument("--image", required=True)
    p.add_argument("--low", type=float)
    p.add_argument("--high", type=float)
    p.add_argument("--out")
    p.set_defaults(run=cmd_render)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        try:
            return args.run(_config(args), args)
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"{args.command} could not complete", e)
    except DualCtError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
