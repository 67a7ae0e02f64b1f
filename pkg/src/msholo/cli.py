"""Command-line interface.

All subcommands read one INI config file (sections documented in
`CONFIG_SCHEMA` below) with `--set section.key=value` overrides and the
global flags --seed, --precision, --threads. Exit codes: 0 success,
2 usage error, 3 malformed config, 4 missing file, 1 runtime failure;
failures print one machine-readable line `msholo-error code=<name>: ...`
to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import __version__, calibration as cal
from .fields import ComplexField2D
from .forward import SlmPattern, SystemConfig
from .metrics import eyebox_report, stack_report
from .optimizer import OptimizeSpec, init_pattern, optimize, save_checkpoint
from .propagation import propagate
from .sources import GridSpec, make_grid
from .targets import FocalStackTarget, SceneLayer, LayeredScene, render_focal_stack
from .experiments import (
    EXPERIMENT_KINDS,
    ExperimentSpec,
    run_count_sweep,
    run_named_experiment,
    run_spacing_sweep,
    scene_target,
    source_energy,
    write_csv,
    write_manifest,
)
from . import tensorio, selftest

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 1

CONFIG_SCHEMA = """\
[system]   slm, pitch_um, gap_mm, wavelengths_nm, planes_mm (start:stop:count
           or comma list), upsample, eyepiece_mm, eyebox_plane_mm (optional)
[sources]  rows, cols, spacing_rad_mm, offset_rad_mm (optional "y,x")
[target]   kind = scene|grating, seed, blur_px_per_mm, grating_focus_mm,
           scene_file (optional layer list, see render-target --help)
[optimize] iterations, step_size, init = random|constant, frames, seed,
           precision, modulation1, modulation2 = phase|amplitude|complex|none,
           loss_planes_mm (optional), pupil_radius_frac, pupil_count (optional)
[analysis] spacings_rad_mm, counts, grating_iterations
[calibration] slm, records, fit_warp/fit_single/fit_source/fit_finetune,
           preset, noise_sigma, citl_iterations
[output]   directory
"""


class ConfigError(ValueError):
    pass


def _fail(code_name: str, exit_code: int, message: str) -> int:
    print(f"msholo-error code={code_name}: {message}", file=sys.stderr)
    return exit_code


def _parse_floats(text: str) -> list:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _parse_planes(text: str) -> tuple:
    if ":" in text:
        start, stop, count = text.split(":")
        return tuple(np.linspace(float(start), float(stop), int(count)))
    return tuple(_parse_floats(text))


def load_config(path, overrides=()) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, option = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), option.strip(), value.strip())
    return parser


def system_from_config(cfg: configparser.ConfigParser) -> tuple[SystemConfig, tuple]:
    try:
        sec = cfg["system"] if cfg.has_section("system") else {}
        n = str(sec.get("slm", "128"))
        shape = tuple(int(v) for v in n.split("x")) if "x" in n else (int(n), int(n))
        planes = tuple(z * 1e-3 for z in _parse_planes(str(sec.get("planes_mm", "15:25:5"))))
        wavelengths = tuple(w * 1e-9 for w in _parse_floats(str(sec.get("wavelengths_nm", "520"))))
        eyebox_plane = sec.get("eyebox_plane_mm") if hasattr(sec, "get") else None
        config = SystemConfig(
            pitch=float(sec.get("pitch_um", 8.0)) * 1e-6,
            gap=float(sec.get("gap_mm", 2.0)) * 1e-3,
            wavelengths=wavelengths,
            planes=planes,
            upsample=int(sec.get("upsample", 2)),
            eyepiece_focal=float(sec.get("eyepiece_mm", 27.5)) * 1e-3,
            eyebox_plane=float(eyebox_plane) * 1e-3 if eyebox_plane else None,
        )
        return config, shape
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [system] section: {exc}") from exc


def grid_from_config(cfg) -> GridSpec:
    try:
        sec = cfg["sources"] if cfg.has_section("sources") else {}
        offset = (0.0, 0.0)
        if hasattr(sec, "get") and sec.get("offset_rad_mm"):
            oy, ox = _parse_floats(sec.get("offset_rad_mm"))
            offset = (oy * 1e3, ox * 1e3)
        return GridSpec(
            rows=int(sec.get("rows", 4)),
            cols=int(sec.get("cols", 4)),
            spacing=float(sec.get("spacing_rad_mm", 50.0)) * 1e3,
            offset=offset,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [sources] section: {exc}") from exc


def optimize_from_config(cfg, config: SystemConfig, seed=None, precision=None) -> OptimizeSpec:
    try:
        sec = cfg["optimize"] if cfg.has_section("optimize") else {}
        pupil = None
        if hasattr(sec, "get") and sec.get("pupil_radius_frac"):
            from .forward import eyebox_extent
            from .optimizer import PupilSpec
            radius = float(sec.get("pupil_radius_frac")) * eyebox_extent(config, config.wavelengths[0])
            pupil = PupilSpec(radius=radius, count=int(sec.get("pupil_count", 4)))
        loss_planes = None
        if hasattr(sec, "get") and sec.get("loss_planes_mm"):
            loss_planes = tuple(z * 1e-3 for z in _parse_floats(sec.get("loss_planes_mm")))
        return OptimizeSpec(
            iterations=int(sec.get("iterations", 200)),
            step_size=float(sec.get("step_size", 0.02)),
            init=str(sec.get("init", "random")),
            frames=int(sec.get("frames", 1)),
            seed=int(sec.get("seed", 0)) if seed is None else seed,
            precision=str(sec.get("precision", "f64")) if precision is None else precision,
            loss_planes=loss_planes,
            pupil=pupil,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [optimize] section: {exc}") from exc


def _modulations(cfg) -> tuple[str, str | None]:
    sec = cfg["optimize"] if cfg.has_section("optimize") else {}
    mod1 = str(sec.get("modulation1", "phase")) if hasattr(sec, "get") else "phase"
    mod2 = str(sec.get("modulation2", "amplitude")) if hasattr(sec, "get") else "amplitude"
    return mod1, (None if mod2 == "none" else mod2)


def target_from_config(cfg, config: SystemConfig, shape, sources) -> FocalStackTarget:
    sec = cfg["target"] if cfg.has_section("target") else {}
    kind = str(sec.get("kind", "scene")) if hasattr(sec, "get") else "scene"
    if kind == "scene":
        scene_file = sec.get("scene_file") if hasattr(sec, "get") else None
        if scene_file:
            scene = load_scene_file(scene_file, config)
            target = render_focal_stack(scene, config,
                                        float(sec.get("blur_px_per_mm", 4.0)))
            return target.normalized(source_energy(shape, sources))
        return scene_target(config, shape, int(sec.get("seed", 7)), sources)
    if kind == "grating":
        from .targets import make_grating_target
        focus = float(sec.get("grating_focus_mm", 20.0)) * 1e-3
        target = make_grating_target(config, focus, shape=shape,
                                     blur_px_per_mm=float(sec.get("blur_px_per_mm", 4.0)))
        return target.normalized(source_energy(shape, sources))
    raise ConfigError(f"unknown target kind {kind!r}")


def load_scene_file(path, config: SystemConfig) -> LayeredScene:
    """Scene description: INI with one [layerN] section per depth layer,
    nearest first, each holding depth_mm, image (tensor or png path), and an
    optional mask path."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene file {path} not found")
    parser = configparser.ConfigParser()
    parser.read(path)
    layers = []
    for name in parser.sections():
        sec = parser[name]
        img = _load_image(Path(path).parent / sec["image"])
        mask = _load_image(Path(path).parent / sec["mask"]) if sec.get("mask") else np.ones_like(img)
        layers.append(SceneLayer(float(sec["depth_mm"]) * 1e-3, img, mask))
    return LayeredScene(tuple(layers))


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image {path} not found")
    if path.suffix == ".tnsr":
        return np.asarray(tensorio.read_tensor(path), dtype=np.float64)
    return tensorio.read_png(path)


def _output_dir(cfg, args) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    if cfg.has_section("output") and cfg["output"].get("directory"):
        return Path(cfg["output"]["directory"])
    return Path("msholo-out")


def _experiment_spec(cfg, args, kind="") -> ExperimentSpec:
    config, shape = system_from_config(cfg)
    grid = grid_from_config(cfg)
    ospec = optimize_from_config(cfg, config, seed=args.seed, precision=args.precision)
    sec = cfg["analysis"] if cfg.has_section("analysis") else {}
    spacings = tuple(v * 1e3 for v in _parse_floats(str(sec.get("spacings_rad_mm", "0,12,25,50,75")))) \
        if hasattr(sec, "get") else ()
    counts = tuple(int(v) for v in _parse_floats(str(sec.get("counts", "1,4,9,16,25")))) \
        if hasattr(sec, "get") else ()
    extras = {}
    if cfg.has_section("calibration"):
        csec = cfg["calibration"]
        extras["records"] = int(csec.get("records", 16))
    psec = cfg["optimize"] if cfg.has_section("optimize") else {}
    return ExperimentSpec(
        kind=kind, config=config, shape=shape, grid=grid, optimize=ospec,
        output=_output_dir(cfg, args),
        scene_seed=int(cfg["target"].get("seed", 7)) if cfg.has_section("target") else 7,
        spacings=spacings, counts=counts,
        grating_iterations=int(sec.get("grating_iterations", 150)) if hasattr(sec, "get") else 150,
        pupil_radius_frac=float(psec.get("pupil_radius_frac", 0.25)) if hasattr(psec, "get") else 0.25,
        pupil_count=int(psec.get("pupil_count", 4)) if hasattr(psec, "get") else 4,
        extras=extras,
    )


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_propagate(args, cfg):
    field = tensorio.read_tensor(args.input)
    f = ComplexField2D(field.astype(np.complex128), args.pitch_um * 1e-6, args.wavelength_nm * 1e-9)
    out = propagate(f, args.z_mm * 1e-3, args.band_limit)
    tensorio.write_tensor(args.output, out.data)
    print(f"propagated {field.shape} by {args.z_mm} mm -> {args.output}")
    return EXIT_OK


def _cmd_render_target(args, cfg):
    config, shape = system_from_config(cfg)
    sources = make_grid(grid_from_config(cfg))
    target = target_from_config(cfg, config, shape, sources)
    out = _output_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    peak = float(target.stack_array().max())
    for i, img in enumerate(target.images):
        tensorio.write_tensor(out / f"target_plane{i}.tnsr", img.data)
        tensorio.write_png(out / f"target_plane{i}.png", np.clip(img.data / peak, 0, 1))
    write_manifest(out, {"command": "render-target", "planes_m": list(target.planes),
                         "normalization": target.normalization})
    print(f"wrote {len(target.images)} target planes to {out}")
    return EXIT_OK


def _cmd_optimize(args, cfg):
    config, shape = system_from_config(cfg)
    sources = make_grid(grid_from_config(cfg))
    spec = optimize_from_config(cfg, config, seed=args.seed, precision=args.precision)
    target = target_from_config(cfg, config, shape, sources)
    mod1, mod2 = _modulations(cfg)
    rng = np.random.default_rng(spec.seed)
    s1 = init_pattern(shape, config.pitch, mod1, spec.init, rng)
    s2 = init_pattern(shape, config.pitch, mod2, spec.init, rng) if mod2 else None
    result = optimize(s1, s2, sources, config, target, spec)
    out = _output_dir(cfg, args)
    save_checkpoint(out / "checkpoint", result, None, spec)
    write_csv(out / "loss_history.csv", ("iteration", "loss"),
              list(enumerate(result.loss_history)))
    from .forward import forward_multisource_stack
    predicted = forward_multisource_stack(result.s1, result.s2, sources, config,
                                          precision=spec.precision)
    report = stack_report([p.data for p in predicted], [t.data for t in target.images])
    write_csv(out / "metrics.csv", ("name", "value"), report.rows())
    write_manifest(out, {"command": "optimize", "seed": spec.seed,
                         "iterations": spec.iterations, "modulations": [mod1, mod2]})
    print(f"final loss {result.loss_history[-1]:.6g}; {report.summary()}")
    return EXIT_OK


def _cmd_metrics(args, cfg):
    pred = tensorio.read_tensor(args.predicted)
    ref = tensorio.read_tensor(args.reference)
    pred = pred[None] if pred.ndim == 2 else pred
    ref = ref[None] if ref.ndim == 2 else ref
    report = stack_report(list(pred.real), list(ref.real))
    for name, value in report.rows():
        print(f"{name},{value:.10g}")
    return EXIT_OK


def _cmd_eyebox(args, cfg):
    from .optimizer import load_checkpoint
    from .forward import fields_at_plane
    config, shape = system_from_config(cfg)
    sources = make_grid(grid_from_config(cfg))
    result, _ = load_checkpoint(args.checkpoint)
    fields = fields_at_plane(result.s1, result.s2, sources, config, config.eyebox_z)
    report = eyebox_report(fields, config, weights=sources.intensities)
    out = _output_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_png(out / "eyebox_log.png", report.log_image(), bit_depth=8)
    write_csv(out / "eyebox_stats.csv", ("name", "value"),
              [("peak_mean_ratio", report.peak_mean_ratio),
               ("central_energy_fraction", report.central_energy_fraction),
               ("total_energy", report.total_energy)])
    print(f"eyebox peak/mean {report.peak_mean_ratio:.4g}, "
          f"central fraction {report.central_energy_fraction:.4g}")
    return EXIT_OK


def _cmd_analyze(args, cfg):
    spec = _experiment_spec(cfg, args, kind=f"{args.what}-sweep")
    if args.what == "spacing":
        path = run_spacing_sweep(spec, threads=args.threads)
    else:
        path = run_count_sweep(spec, threads=args.threads)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_experiment(args, cfg):
    spec = _experiment_spec(cfg, args, kind=args.kind)
    out = run_named_experiment(spec, threads=args.threads)
    print(f"experiment {args.kind} artifacts in {out}")
    return EXIT_OK


def _calib_setup(cfg, args):
    config, shape = system_from_config(cfg)
    sec = cfg["calibration"] if cfg.has_section("calibration") else {}
    n = int(sec.get("slm", 24)) if hasattr(sec, "get") else 24
    shape = (n, n)
    sources = make_grid(grid_from_config(cfg))
    ident = cal.identity_model(sources, shape, pupil_spatial=(2, 3), pupil_freq=(4, 4),
                               warp_ctrl=(3, 3), upsample=config.upsample)
    return config, shape, sources, ident, sec


def _cmd_calibrate(args, cfg):
    config, shape, sources, ident, sec = _calib_setup(cfg, args)
    out = _output_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    preset = str(sec.get("preset", "standard")) if hasattr(sec, "get") else "standard"
    records = int(sec.get("records", 16)) if hasattr(sec, "get") else 16
    noise = float(sec.get("noise_sigma", 0.0)) if hasattr(sec, "get") else 0.0
    seed = args.seed if args.seed is not None else 0
    oracle = cal.perturbed_model(ident, preset, config, shape, seed=seed + 3)

    if args.action == "make-data":
        dataset = cal.make_synthetic_dataset(oracle, config, shape, n_per_config=records,
                                             noise_sigma=noise, seed=seed + 4)
        dataset.save(out / "dataset")
        cal.save_model(out / "oracle", oracle)
        print(f"wrote {len(dataset.records)} records to {out / 'dataset'}")
        return EXIT_OK

    if args.action == "fit":
        dataset = cal.CaptureDataset.load(Path(args.dataset) if args.dataset else out / "dataset")
        fitted, history = cal.fit_model(dataset, ident, config,
                                        spec=cal.FitSpec(seed=seed))
        cal.save_model(out / "fitted", fitted)
        rows = [(stage, float(v[0]), float(v[-1])) for stage, v in history.items()]
        write_csv(out / "fit_history.csv", ("stage", "initial_loss", "final_loss"), rows)
        print("fit stages:", ", ".join(f"{s} {a:.3g}->{b:.3g}" for s, a, b in rows))
        return EXIT_OK

    if args.action == "citl":
        fitted = cal.load_model(Path(args.model) if args.model else out / "fitted")
        target = scene_target(config, shape, 7, sources)
        rng = np.random.default_rng(seed)
        d1 = rng.uniform(0, 255, shape)
        d2 = rng.uniform(0, 255, shape)
        iters = int(sec.get("citl_iterations", 150)) if hasattr(sec, "get") else 150
        camera = lambda a, b, z: cal.render_capture(oracle, a, b, "multi", z, config)
        d1f, d2f, history = cal.active_citl(d1, d2, target, fitted, config,
                                            cal.CitlSpec(iterations=iters, seed=seed),
                                            camera=camera)
        tensorio.write_bundle(out / "citl_patterns", {"d1": d1f, "d2": d2f, "loss": history},
                              {"iterations": iters})
        print(f"citl final loss {history[-1]:.6g}")
        return EXIT_OK
    raise ConfigError(f"unknown calibrate action {args.action!r}")


def _cmd_selftest(args, cfg):
    return selftest.run(verbose=True)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msholo",
        description="Multisource two-SLM holographic display simulation and optimization.",
        epilog=f"Config file schema:\n{CONFIG_SCHEMA}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--precision", choices=("f32", "f64"), default=None)
        p.add_argument("--threads", type=int, default=1, help="parallel sweep points")
        p.add_argument("--output", help="output directory")

    p = sub.add_parser("propagate", help="propagate a complex field tensor")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--z-mm", type=float, required=True)
    p.add_argument("--pitch-um", type=float, default=8.0)
    p.add_argument("--wavelength-nm", type=float, default=520.0)
    p.add_argument("--band-limit", choices=("none", "matsushima"), default="none")
    p.add_argument("--out", dest="output", required=False)
    p.set_defaults(func=_cmd_propagate)

    p = sub.add_parser("render-target", help="render a focal-stack target")
    common(p)
    p.set_defaults(func=_cmd_render_target)

    p = sub.add_parser("optimize", help="optimize SLM patterns for a target")
    common(p)
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two tensor stacks")
    common(p)
    p.add_argument("--predicted", required=True)
    p.add_argument("--reference", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("eyebox", help="eyebox report for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_eyebox)

    p = sub.add_parser("analyze", help="source-configuration sweeps")
    common(p)
    p.add_argument("what", choices=("spacing", "count"))
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("experiment", help="named comparison experiments")
    common(p)
    p.add_argument("kind", choices=EXPERIMENT_KINDS)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("calibrate", help="synthetic calibration workflows")
    common(p)
    p.add_argument("action", choices=("make-data", "fit", "citl"))
    p.add_argument("--dataset", help="dataset directory (fit)")
    p.add_argument("--model", help="fitted model directory (citl)")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("selftest", help="run the built-in oracle/property checks")
    common(p)
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config, args.overrides)
    except FileNotFoundError as exc:
        return _fail("missing-file", EXIT_MISSING, str(exc))
    except ConfigError as exc:
        return _fail("bad-config", EXIT_CONFIG, str(exc))
    try:
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        return _fail("missing-file", EXIT_MISSING, str(exc))
    except ConfigError as exc:
        return _fail("bad-config", EXIT_CONFIG, str(exc))
    except (tensorio.TensorFileError, OSError) as exc:
        return _fail("io-error", EXIT_RUNTIME, str(exc))
    except Exception as exc:  # keep the promise of a machine-readable line
        return _fail("runtime", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
