"""Experiment harness: source-configuration sweeps, method comparisons, and
calibration recovery runs, with deterministic artifact directories.

Every run writes a manifest (resolved configuration, seed, tool version)
sufficient to reproduce it exactly; sweep CSVs are byte-identical across
runs with the same seed in single-thread mode.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, calibration as cal
from .fields import IntensityImage
from .forward import SlmPattern, SystemConfig, eyebox_extent, fields_at_plane, forward_multisource_stack
from .metrics import eyebox_report, michelson_contrast, psnr, ssim, stack_report
from .optimizer import (
    OptimizeSpec,
    PupilSpec,
    init_pattern,
    optimize,
    optimize_temporal_multiplex,
)
from .pipeline import evaluate_patterns, pupil_mask
from .sources import GridSpec, SourceArray, count_in_memory_region, make_grid, memory_effect_spacing
from .targets import FocalStackTarget, demo_scene, make_grating_target, render_focal_stack
from .tensorio import write_png

__all__ = [
    "ExperimentSpec",
    "desk_config",
    "scene_target",
    "source_energy",
    "run_spacing_sweep",
    "run_count_sweep",
    "run_named_experiment",
    "EXPERIMENT_KINDS",
    "write_csv",
    "write_manifest",
]

EXPERIMENT_KINDS = ("single-vs-multi", "tm-compare", "pupil-demo", "eyebox-demo", "calib-recovery")

GRATING_FOCI_MM = (15.7, 20.0, 24.3)


@dataclass(frozen=True)
class ExperimentSpec:
    """Resolved description of one experiment run."""

    kind: str
    config: SystemConfig
    shape: tuple
    grid: GridSpec
    optimize: OptimizeSpec
    output: Path
    scene_seed: int = 7
    spacings: tuple = ()
    counts: tuple = ()
    grating_iterations: int = 150
    pupil_radius_frac: float = 0.25
    pupil_count: int = 4
    extras: dict = field(default_factory=dict)


def desk_config(n: int = 128, upsample: int = 2, n_planes: int = 5,
                wavelength: float = 520e-9) -> SystemConfig:
    """Desk-scale default geometry: 8 um pitch, 2 mm gap, planes over
    15..25 mm, eyepiece 27.5 mm."""
    planes = tuple(np.linspace(15e-3, 25e-3, n_planes))
    return SystemConfig(pitch=8e-6, gap=2e-3, wavelengths=(wavelength,), planes=planes,
                        upsample=upsample, eyepiece_focal=27.5e-3)


def source_energy(shape, sources: SourceArray | None = None) -> float:
    """Total image-plane energy delivered by unit-amplitude illumination."""
    scale = 1.0 if sources is None else float(np.sum(sources.intensities))
    return float(shape[0] * shape[1]) * scale


def scene_target(config: SystemConfig, shape, seed: int = 7,
                 sources: SourceArray | None = None) -> FocalStackTarget:
    scene = demo_scene(shape, config, seed=seed)
    return render_focal_stack(scene, config).normalized(source_energy(shape, sources))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.10g}" if isinstance(v, (float, np.floating)) else v for v in row])


def write_manifest(directory, payload: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"tool_version": __version__, **payload}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


def _save_plane_pngs(directory, tag, stack):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = [np.asarray(img.data if isinstance(img, IntensityImage) else img) for img in stack]
    peak = max(float(a.max()) for a in arrays) or 1.0
    for i, a in enumerate(arrays):
        write_png(directory / f"{tag}_plane{i}.png", np.clip(a / peak, 0, 1), bit_depth=16)


def _save_eyebox_png(directory, tag, report):
    write_png(Path(directory) / f"{tag}_eyebox_log.png", report.log_image(), bit_depth=8)


def _two_slm_init(shape, config, rng):
    s1 = init_pattern(shape, config.pitch, "phase", "random", rng)
    s2 = init_pattern(shape, config.pitch, "amplitude", "random", rng)
    return s1, s2


def _optimize_condition(name, shape, sources, config, target, spec):
    """One named optimization condition; returns (frames, predicted stack)."""
    rng = np.random.default_rng(spec.seed)
    if name == "smooth-single":
        s1 = init_pattern(shape, config.pitch, "complex", "constant", rng)
        result = optimize(s1, None, sources, config, target, spec)
    elif name == "random-single":
        s1 = init_pattern(shape, config.pitch, "complex", "random", rng)
        result = optimize(s1, None, sources, config, target, spec)
    elif name == "multi-1slm":
        s1 = init_pattern(shape, config.pitch, "complex", "random", rng)
        result = optimize(s1, None, sources, config, target, spec)
    elif name == "multi-2slm":
        s1, s2 = _two_slm_init(shape, config, rng)
        result = optimize(s1, s2, sources, config, target, spec)
    else:
        raise ValueError(f"unknown condition {name!r}")
    planes = spec.loss_planes if spec.loss_planes is not None else config.planes
    predicted = forward_multisource_stack(result.s1, result.s2, sources, config, planes,
                                          band_limit=spec.band_limit, precision=spec.precision)
    return result, predicted


def grating_contrast_at_focus(shape, sources, config, spec: OptimizeSpec, focus_z: float,
                              region=None) -> float:
    """In-focus Michelson contrast of an optimized Nyquist-grating stack.

    The focus plane joins the supervised plane set (otherwise the sharp
    grating never appears as a target) and contrast is measured there.
    """
    from dataclasses import replace as _replace
    region = region if region is not None else (min(100, shape[0]), min(100, shape[1]))
    planes = tuple(sorted(set(config.planes) | {focus_z}))
    cfg = _replace(config, planes=planes)
    target = make_grating_target(cfg, focus_z, shape=shape).normalized(
        source_energy(shape, sources))
    rng = np.random.default_rng(spec.seed)
    s1, s2 = _two_slm_init(shape, cfg, rng)
    result = optimize(s1, s2, sources, cfg, target, spec)
    pred = forward_multisource_stack(result.s1, result.s2, sources, cfg, (focus_z,),
                                     precision=spec.precision)[0]
    return michelson_contrast(pred.data, region)


def _grating_contrast(shape, sources, config, spec, iterations, region=None) -> float:
    """Mean in-focus contrast over the standard focus placements."""
    values = []
    for focus_mm in GRATING_FOCI_MM:
        gspec = OptimizeSpec(iterations=iterations, seed=spec.seed, precision=spec.precision,
                             band_limit=spec.band_limit)
        values.append(grating_contrast_at_focus(shape, sources, config, gspec,
                                                focus_mm * 1e-3, region))
    return float(np.mean(values))


def _sweep_point_spacing(spacing, spec: ExperimentSpec, seed):
    config, shape = spec.config, spec.shape
    grid = GridSpec(spec.grid.rows, spec.grid.cols, spacing)
    sources = make_grid(grid)
    target = scene_target(config, shape, spec.scene_seed, sources)
    ospec = OptimizeSpec(iterations=spec.optimize.iterations, seed=seed,
                         precision=spec.optimize.precision, band_limit=spec.optimize.band_limit)
    rng = np.random.default_rng(seed)
    s1, s2 = _two_slm_init(shape, config, rng)
    result = optimize(s1, s2, sources, config, target, ospec)
    predicted = forward_multisource_stack(result.s1, result.s2, sources, config,
                                          precision=ospec.precision)
    report = stack_report([p.data for p in predicted], [t.data for t in target.images])
    contrast = _grating_contrast(shape, sources, config, ospec, spec.grating_iterations)
    threshold = memory_effect_spacing(config.pitch, config.wavelengths[0], config.gap)
    in_region = count_in_memory_region(sources, threshold)
    return (spacing * 1e-3, report.psnr_stack, contrast, in_region)


def run_spacing_sweep(spec: ExperimentSpec, threads: int = 1) -> Path:
    """PSNR and 1-arcmin grating contrast as a function of source spacing."""
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _child_seeds(spec.optimize.seed, len(spec.spacings))
    points = list(zip(spec.spacings, seeds))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda p: _sweep_point_spacing(p[0], spec, p[1]), points))
    else:
        rows = [_sweep_point_spacing(s, spec, sd) for s, sd in points]
    path = out / "spacing_sweep.csv"
    write_csv(path, ("dm_rad_per_mm", "psnr_stack_db", "contrast_1arcmin", "n_sources_in_memory_region"), rows)
    write_manifest(out, {"experiment": "spacing-sweep", "seed": spec.optimize.seed,
                         "spacings_rad_per_m": list(spec.spacings), "iterations": spec.optimize.iterations,
                         "grating_iterations": spec.grating_iterations,
                         "config": _config_dict(spec)})
    return path


def _sweep_point_count(n, spec: ExperimentSpec, seed):
    config, shape = spec.config, spec.shape
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError(f"source counts must be squares, got {n}")
    sources = make_grid(GridSpec(side, side, spec.grid.spacing if side > 1 else 0.0))
    target = scene_target(config, shape, spec.scene_seed, sources)
    ospec = OptimizeSpec(iterations=spec.optimize.iterations, seed=seed,
                         precision=spec.optimize.precision, band_limit=spec.optimize.band_limit)
    rng = np.random.default_rng(seed)
    s1, s2 = _two_slm_init(shape, config, rng)
    result = optimize(s1, s2, sources, config, target, ospec)
    predicted = forward_multisource_stack(result.s1, result.s2, sources, config,
                                          precision=ospec.precision)
    report = stack_report([p.data for p in predicted], [t.data for t in target.images])
    contrast = _grating_contrast(shape, sources, config, ospec, spec.grating_iterations)
    return (n, report.psnr_stack, contrast)


def run_count_sweep(spec: ExperimentSpec, threads: int = 1) -> Path:
    """PSNR and contrast as a function of the number of sources (square grids)."""
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _child_seeds(spec.optimize.seed, len(spec.counts))
    points = list(zip(spec.counts, seeds))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda p: _sweep_point_count(p[0], spec, p[1]), points))
    else:
        rows = [_sweep_point_count(n, spec, sd) for n, sd in points]
    path = out / "count_sweep.csv"
    write_csv(path, ("n_sources", "psnr_stack_db", "contrast_1arcmin"), rows)
    write_manifest(out, {"experiment": "count-sweep", "seed": spec.optimize.seed,
                         "counts": list(spec.counts), "spacing_rad_per_m": spec.grid.spacing,
                         "iterations": spec.optimize.iterations,
                         "grating_iterations": spec.grating_iterations,
                         "config": _config_dict(spec)})
    return path


def _child_seeds(master: int, n: int) -> list:
    return [int(s.generate_state(1)[0] % (2 ** 31)) for s in np.random.SeedSequence(master).spawn(n)]


def _config_dict(spec: ExperimentSpec) -> dict:
    c = spec.config
    return {
        "shape": list(spec.shape), "pitch_m": c.pitch, "gap_m": c.gap,
        "wavelengths_m": list(c.wavelengths), "planes_m": list(c.planes),
        "upsample": c.upsample, "eyepiece_focal_m": c.eyepiece_focal,
        "grid": [spec.grid.rows, spec.grid.cols, spec.grid.spacing],
    }


def _eyebox_of(result, sources, config):
    fields = fields_at_plane(result.s1, result.s2, sources, config, config.eyebox_z)
    return eyebox_report(fields, config, weights=sources.intensities)


def _experiment_single_vs_multi(spec: ExperimentSpec, out: Path) -> list:
    config, shape = spec.config, spec.shape
    single = make_grid(GridSpec(1, 1, 0.0))
    multi = make_grid(spec.grid)
    rows = []
    conditions = (
        ("smooth-single", single, "constant"),
        ("random-single", single, "random"),
        ("multi-1slm", multi, "random"),
        ("multi-2slm", multi, "random"),
    )
    for name, sources, init in conditions:
        target = scene_target(config, shape, spec.scene_seed, sources)
        ospec = OptimizeSpec(iterations=spec.optimize.iterations, init=init,
                             seed=spec.optimize.seed, precision=spec.optimize.precision)
        result, predicted = _optimize_condition(name, shape, sources, config, target, ospec)
        report = stack_report([p.data for p in predicted], [t.data for t in target.images])
        ebox = _eyebox_of(result, sources, config)
        _save_plane_pngs(out, name, predicted)
        _save_eyebox_png(out, name, ebox)
        rows.append((name, report.psnr_stack, report.ssim_stack, ebox.peak_mean_ratio,
                     ebox.central_energy_fraction))
        if name == "multi-2slm":
            _save_plane_pngs(out, "target", target.images)
    write_csv(out / "metrics.csv",
              ("condition", "psnr_stack_db", "ssim", "eyebox_peak_mean", "eyebox_central_fraction"),
              rows)
    return rows


def _experiment_tm_compare(spec: ExperimentSpec, out: Path) -> list:
    config, shape = spec.config, spec.shape
    multi = make_grid(spec.grid)
    single = make_grid(GridSpec(1, 1, 0.0))
    frames = spec.extras.get("tm_frames", 6)
    rows = []

    target = scene_target(config, shape, spec.scene_seed, multi)
    ospec = OptimizeSpec(iterations=spec.optimize.iterations, seed=spec.optimize.seed,
                         precision=spec.optimize.precision)
    rng = np.random.default_rng(ospec.seed)
    s1, s2 = _two_slm_init(shape, config, rng)
    result = optimize(s1, s2, multi, config, target, ospec)
    predicted = forward_multisource_stack(result.s1, result.s2, multi, config,
                                          precision=ospec.precision)
    report = stack_report([p.data for p in predicted], [t.data for t in target.images])
    _save_plane_pngs(out, "multisource", predicted)
    rows.append(("multisource-1frame", len(multi), 1, report.psnr_stack, report.ssim_stack))

    target_tm = scene_target(config, shape, spec.scene_seed, single)
    rng = np.random.default_rng(ospec.seed + 1)
    inits = [init_pattern(shape, config.pitch, "phase", "random", rng) for _ in range(frames)]
    tm_result = optimize_temporal_multiplex(inits, single, config, target_tm, ospec)
    tm_pred = evaluate_patterns(tm_result.frames, single, config, None, planes=config.planes,
                                precision=ospec.precision, want_grads=False).predicted
    tm_report = stack_report(tm_pred, [t.data for t in target_tm.images])
    _save_plane_pngs(out, "temporal_multiplex", tm_pred)
    rows.append((f"tm-{frames}frames", 1, frames, tm_report.psnr_stack, tm_report.ssim_stack))
    write_csv(out / "metrics.csv", ("condition", "n_sources", "frames", "psnr_stack_db", "ssim"), rows)
    return rows


def pupil_eval_positions(config: SystemConfig, wavelength, radius) -> list:
    """Five deterministic pupil centers: eyebox center plus four diagonal
    positions near the edge."""
    half = max(eyebox_extent(config, wavelength) - radius, 0.0)
    d = 0.7 * half
    return [(0.0, 0.0), (d, d), (d, -d), (-d, d), (-d, -d)]


def _pupil_render(frames, sources, config, center, radius):
    shape = frames[0][0].shape
    shape_up = (shape[0] * config.upsample, shape[1] * config.upsample)
    mask = pupil_mask(shape_up, config.sim_pitch, config, config.wavelengths[0], center, radius)
    result = evaluate_patterns(frames, sources, config, None, planes=(config.eyebox_z,),
                               pupil_masks=[mask], want_grads=False)
    return result.predicted[0]


def _experiment_pupil_demo(spec: ExperimentSpec, out: Path) -> list:
    config, shape = spec.config, spec.shape
    wavelength = config.wavelengths[0]
    radius = spec.pupil_radius_frac * eyebox_extent(config, wavelength)
    single = make_grid(GridSpec(1, 1, 0.0))
    multi = make_grid(spec.grid)
    plane = (config.eyebox_z,)

    conditions = (
        ("smooth-single", single, "constant"),
        ("random-single", single, "random"),
        ("multi-2slm", multi, "random"),
    )
    rows = []
    positions = pupil_eval_positions(config, wavelength, radius)
    for name, sources, init in conditions:
        target = scene_target(config, shape, spec.scene_seed, sources)
        ospec = OptimizeSpec(iterations=spec.optimize.iterations, init=init,
                             seed=spec.optimize.seed, loss_planes=plane,
                             pupil=PupilSpec(radius=radius, count=spec.pupil_count),
                             precision=spec.optimize.precision)
        result, _ = _optimize_condition(name, shape, sources, config, target, ospec)
        target_img = target.image_at(plane[0]).data
        peak = float(target_img.max())
        centered_total = None
        for k, center in enumerate(positions):
            intensity = _pupil_render(result.frames, sources, config, center, radius)
            total = float(intensity.sum())
            centered_total = total if centered_total is None else centered_total
            denom = float(np.sum(intensity * intensity))
            scale = float(np.sum(intensity * target_img)) / denom if denom > 0 else 1.0
            value = psnr(scale * intensity, target_img, peak)
            rel = total / centered_total if centered_total > 0 else 0.0
            rows.append((name, k, center[0], center[1], value, rel))
            write_png(out / f"{name}_pupil{k}.png",
                      np.clip(intensity / max(intensity.max(), 1e-30), 0, 1), bit_depth=16)
    write_csv(out / "metrics.csv",
              ("condition", "pupil_index", "center_y_m", "center_x_m", "psnr_db", "relative_intensity"),
              rows)
    return rows


def _experiment_eyebox_demo(spec: ExperimentSpec, out: Path) -> list:
    config, shape = spec.config, spec.shape
    single = make_grid(GridSpec(1, 1, 0.0))
    multi = make_grid(spec.grid)
    rows = []
    for name, sources, init in (("smooth-single", single, "constant"),
                                ("random-single", single, "random"),
                                ("multi-2slm", multi, "random")):
        target = scene_target(config, shape, spec.scene_seed, sources)
        ospec = OptimizeSpec(iterations=spec.optimize.iterations, init=init,
                             seed=spec.optimize.seed, precision=spec.optimize.precision)
        result, _ = _optimize_condition(name, shape, sources, config, target, ospec)
        ebox = _eyebox_of(result, sources, config)
        _save_eyebox_png(out, name, ebox)
        rows.append((name, ebox.peak_mean_ratio, ebox.central_energy_fraction, ebox.total_energy))
    write_csv(out / "metrics.csv",
              ("condition", "peak_mean_ratio", "central_energy_fraction", "total_energy"), rows)
    return rows


def _experiment_calib_recovery(spec: ExperimentSpec, out: Path) -> list:
    config, shape = spec.config, spec.shape
    sources = make_grid(spec.grid)
    records = spec.extras.get("records", 16)
    iterations = spec.extras.get("fit_iterations",
                                 {"warp": 60, "single": 220, "source": 80, "finetune": 60})
    ident = cal.identity_model(sources, shape, pupil_spatial=(2, 3), pupil_freq=(4, 4),
                               warp_ctrl=(3, 3), upsample=config.upsample)
    rows = []
    shape_up = (shape[0] * config.upsample, shape[1] * config.upsample)
    for preset, metric_name, tolerance in (("lut", "lut_rms_rad", 0.05),
                                           ("source", "source_bins", 0.1),
                                           ("warp", "warp_rms_px", 0.1)):
        oracle = cal.perturbed_model(ident, preset, config, shape, seed=spec.optimize.seed + 3)
        dataset = cal.make_synthetic_dataset(oracle, config, shape, n_per_config=records,
                                             seed=spec.optimize.seed + 4)
        fitted, _ = cal.fit_model(dataset, ident, config,
                                  spec=cal.FitSpec(iterations=iterations, seed=spec.optimize.seed))
        if preset == "lut":
            err = max(cal.lut_rms_error(fitted.lut1, oracle.lut1),
                      cal.lut_rms_error(fitted.lut2, oracle.lut2))
        elif preset == "source":
            err = cal.source_bin_error(fitted, oracle, config, shape)
        else:
            err = cal.warp_rms_error(fitted.warp_slm, oracle.warp_slm, shape_up)
        rows.append((preset, metric_name, err, tolerance, "pass" if err <= tolerance else "fail"))
    write_csv(out / "recovery.csv", ("preset", "metric", "error", "tolerance", "status"), rows)
    return rows


def run_named_experiment(spec: ExperimentSpec, threads: int = 1) -> Path:
    """Dispatch one named experiment; returns the artifact directory."""
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    runners = {
        "single-vs-multi": _experiment_single_vs_multi,
        "tm-compare": _experiment_tm_compare,
        "pupil-demo": _experiment_pupil_demo,
        "eyebox-demo": _experiment_eyebox_demo,
        "calib-recovery": _experiment_calib_recovery,
    }
    if spec.kind not in runners:
        raise ValueError(f"unknown experiment kind {spec.kind!r}; choose from {EXPERIMENT_KINDS}")
    rows = runners[spec.kind](spec, out)
    write_manifest(out, {"experiment": spec.kind, "seed": spec.optimize.seed,
                         "iterations": spec.optimize.iterations, "rows": len(rows),
                         "config": _config_dict(spec)})
    return out
