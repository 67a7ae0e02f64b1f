"""Hologram optimization: L2 loss, adjoint gradients, Adam, constraints,
initialization schemes, temporal multiplexing, and pupil-sampled loss.

Phase parameters are unconstrained reals (exp(j phi) is 2 pi periodic), so
no wrapping happens during optimization; amplitude planes are projected to
[0, 1] after every step. Runs are deterministic for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .fields import ComplexField2D, IntensityImage, ufft2, uifft2
from .forward import SlmPattern, SystemConfig, eyebox_extent
from .pipeline import evaluate_patterns, pupil_mask
from .sources import SourceArray
from .targets import FocalStackTarget
from . import tensorio

__all__ = [
    "OptimizeError",
    "PupilSpec",
    "OptimizeSpec",
    "GradientBundle",
    "AdamState",
    "loss_l2",
    "gradients",
    "adam_step",
    "init_adam",
    "project_constraints",
    "project_pattern",
    "init_pattern",
    "OptimizeResult",
    "optimize",
    "optimize_temporal_multiplex",
    "pupil_sampled_forward",
    "sample_pupil_centers",
    "save_checkpoint",
    "load_checkpoint",
]


class OptimizeError(RuntimeError):
    """Optimization diverged or was configured inconsistently."""


@dataclass(frozen=True)
class PupilSpec:
    """Pupil-sampled loss: aperture radius in meters at the eyebox and the
    number of random pupil positions drawn per iteration."""

    radius: float
    count: int = 4

    def __post_init__(self):
        if not (self.radius > 0 and self.count >= 1):
            raise ValueError("pupil radius must be positive and count >= 1")


@dataclass(frozen=True)
class OptimizeSpec:
    iterations: int = 200
    step_size: float = 0.02
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    init: str = "random"
    loss_planes: tuple | None = None
    plane_weights: tuple | None = None
    frames: int = 1
    pupil: PupilSpec | None = None
    seed: int = 0
    precision: str = "f64"
    band_limit: str = "none"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.init not in ("constant", "random"):
            raise ValueError("init must be 'constant' or 'random'")
        if self.loss_planes is not None:
            object.__setattr__(self, "loss_planes", tuple(float(z) for z in self.loss_planes))
        if self.plane_weights is not None:
            w = tuple(float(v) for v in self.plane_weights)
            if any(v < 0 for v in w) or not sum(w) > 0:
                raise ValueError("plane weights must be nonnegative with positive sum")
            object.__setattr__(self, "plane_weights", w)


@dataclass(frozen=True)
class GradientBundle:
    """Real gradients keyed by parameter name, mirroring parameter shapes."""

    values: dict

    def __post_init__(self):
        for name, g in self.values.items():
            if not np.all(np.isfinite(g)):
                raise OptimizeError(f"non-finite gradient for {name}")

    def __getitem__(self, key):
        return self.values[key]

    def keys(self):
        return self.values.keys()


def loss_l2(predicted, target: FocalStackTarget, weights=None) -> float:
    """Weighted sum over planes of squared intensity differences.

    The reduction order is fixed (planes in order, rows then columns in
    float64), so repeated calls are bit-identical.
    """
    pred = predicted if isinstance(predicted, np.ndarray) else np.stack([p.data for p in predicted])
    tgt = target.stack_array()
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {tgt.shape}")
    w = np.ones(len(target.planes)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = 0.0
    for i in range(pred.shape[0]):
        d = pred[i].astype(np.float64) - tgt[i]
        total += float(w[i]) * float(np.sum(d * d))
    return total


def _select_planes(target: FocalStackTarget, spec_planes):
    planes = tuple(target.planes) if spec_planes is None else tuple(spec_planes)
    images = [target.image_at(z).data for z in planes]
    return planes, np.stack(images)


def gradients(s1: SlmPattern, s2: SlmPattern | None, sources: SourceArray,
              config: SystemConfig, target: FocalStackTarget, wavelength=None,
              loss_planes=None, plane_weights=None, band_limit="none",
              precision="f64") -> tuple[float, GradientBundle]:
    """Loss and exact adjoint gradient for every real SLM parameter."""
    planes, tgt = _select_planes(target, loss_planes)
    result = evaluate_patterns([(s1, s2)], sources, config, tgt, wavelength, planes,
                               plane_weights, band_limit, precision)
    values = {}
    for plane_name, g in result.gradients[0]["s1"].items():
        values[f"s1.{plane_name}"] = g
    if s2 is not None:
        for plane_name, g in result.gradients[0]["s2"].items():
            values[f"s2.{plane_name}"] = g
    return result.loss, GradientBundle(values)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, spec: OptimizeSpec):
    """One bias-corrected Adam update; returns new params and state."""
    b1, b2 = spec.betas
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = p - spec.step_size * m_hat / (np.sqrt(v_hat) + spec.epsilon)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t)


def project_constraints(modulation: str, phase=None, amplitude=None):
    """Project raw optimizer planes onto the modulator's feasible set.

    phase-only forces unit amplitude (returned as None, realized as 1);
    amplitude-only clamps to [0, 1] and zeroes phase; complex clamps the
    amplitude and keeps phase untouched. Idempotent.
    """
    if modulation == "phase":
        return phase, None
    if modulation == "amplitude":
        return None, np.clip(amplitude, 0.0, 1.0)
    if modulation == "complex":
        return phase, np.clip(amplitude, 0.0, 1.0)
    raise ValueError(f"unknown modulation {modulation!r}")


def project_pattern(pattern: SlmPattern) -> SlmPattern:
    phase, amplitude = project_constraints(pattern.modulation, pattern.phase, pattern.amplitude)
    return SlmPattern(pattern.modulation, pattern.pitch, phase, amplitude)


def init_pattern(shape, pitch: float, modulation: str, init: str, rng) -> SlmPattern:
    """Constant (phase 0, amplitude 1) or uniform-random initialization."""
    if init == "constant":
        phase = np.zeros(shape)
        amplitude = np.ones(shape)
    else:
        phase = rng.uniform(-np.pi, np.pi, shape)
        amplitude = rng.uniform(0.0, 1.0, shape)
    if modulation == "phase":
        return SlmPattern("phase", pitch, phase=phase)
    if modulation == "amplitude":
        return SlmPattern("amplitude", pitch, amplitude=amplitude)
    return SlmPattern("complex", pitch, phase=phase, amplitude=amplitude)


def _params_from_patterns(frames):
    params = {}
    for i, (s1, s2) in enumerate(frames):
        for name, pat in (("s1", s1), ("s2", s2)):
            if pat is None:
                continue
            key = f"f{i}.{name}"
            if pat.phase is not None:
                params[f"{key}.phase"] = np.array(pat.phase)
            if pat.amplitude is not None:
                params[f"{key}.amplitude"] = np.array(pat.amplitude)
    return params


def _patterns_from_params(frames, params):
    out = []
    for i, (s1, s2) in enumerate(frames):
        rebuilt = []
        for name, pat in (("s1", s1), ("s2", s2)):
            if pat is None:
                rebuilt.append(None)
                continue
            key = f"f{i}.{name}"
            phase, amplitude = project_constraints(
                pat.modulation,
                params.get(f"{key}.phase"),
                params.get(f"{key}.amplitude"),
            )
            rebuilt.append(SlmPattern(pat.modulation, pat.pitch, phase, amplitude))
        out.append((rebuilt[0], rebuilt[1]))
    return out


def sample_pupil_centers(rng, config: SystemConfig, wavelength: float, pupil: PupilSpec,
                         count=None) -> np.ndarray:
    """Random pupil centers (meters) keeping the aperture inside the native eyebox."""
    half = max(eyebox_extent(config, wavelength) - pupil.radius, 0.0)
    n = pupil.count if count is None else count
    return rng.uniform(-half, half, size=(n, 2))


@dataclass
class OptimizeResult:
    frames: list
    loss_history: np.ndarray

    @property
    def s1(self) -> SlmPattern:
        return self.frames[0][0]

    @property
    def s2(self) -> SlmPattern | None:
        return self.frames[0][1]


def _run_loop(frames, sources, config, target, spec: OptimizeSpec, wavelength):
    wavelength = config.wavelengths[0] if wavelength is None else wavelength
    planes, tgt = _select_planes(target, spec.loss_planes)
    rng = np.random.default_rng(spec.seed)
    params = _params_from_patterns(frames)
    state = init_adam(params)
    history = np.zeros(spec.iterations)

    shape_up = (frames[0][0].shape[0] * config.upsample, frames[0][0].shape[1] * config.upsample)
    for it in range(spec.iterations):
        masks = None
        if spec.pupil is not None:
            centers = sample_pupil_centers(rng, config, wavelength, spec.pupil)
            masks = [pupil_mask(shape_up, config.sim_pitch, config, wavelength, c, spec.pupil.radius)
                     for c in centers]
        current = _patterns_from_params(frames, params)
        result = evaluate_patterns(current, sources, config, tgt, wavelength, planes,
                                   spec.plane_weights, spec.band_limit, spec.precision,
                                   pupil_masks=masks, pupil_scaled=spec.pupil is not None)
        if not np.isfinite(result.loss):
            raise OptimizeError(f"loss diverged to {result.loss} at iteration {it}")
        history[it] = result.loss
        grads = {}
        for i, entry in enumerate(result.gradients):
            for name, planes_g in entry.items():
                for plane_name, g in planes_g.items():
                    grads[f"f{i}.{name}.{plane_name}"] = g
        params, state = adam_step(params, grads, state, spec)
        for key in list(params):
            if key.endswith(".amplitude"):
                params[key] = np.clip(params[key], 0.0, 1.0)
    return OptimizeResult(_patterns_from_params(frames, params), history)


def optimize(s1_init: SlmPattern, s2_init: SlmPattern | None, sources: SourceArray,
             config: SystemConfig, target: FocalStackTarget, spec: OptimizeSpec,
             wavelength=None) -> OptimizeResult:
    """Jointly optimize one or two SLM patterns against a focal-stack target."""
    return _run_loop([(s1_init, s2_init)], sources, config, target, spec, wavelength)


def optimize_temporal_multiplex(frame_inits, sources: SourceArray, config: SystemConfig,
                                target: FocalStackTarget, spec: OptimizeSpec,
                                wavelength=None) -> OptimizeResult:
    """Jointly optimize F single-modulator frames whose intensities average.

    All frames contribute to one summed prediction per iteration and are
    updated simultaneously.
    """
    frames = [(f, None) for f in frame_inits]
    return _run_loop(frames, sources, config, target, spec, wavelength)


def pupil_sampled_forward(field_z0: ComplexField2D, center, radius: float,
                          config: SystemConfig) -> IntensityImage:
    """Retinal intensity seen through a circular pupil at the eyebox.

    field_z0 is the complex field at the eyepiece focal plane; the pupil
    aperture is applied in its Fourier domain.
    """
    mask = pupil_mask(field_z0.shape, field_z0.pitch, config, field_z0.wavelength,
                      center, radius)
    e = uifft2(ufft2(field_z0.data) * mask)
    return IntensityImage(np.abs(e) ** 2, field_z0.pitch)


def spec_hash(spec: OptimizeSpec) -> str:
    blob = json.dumps(asdict(spec), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(directory, result: OptimizeResult, state: AdamState | None,
                    spec: OptimizeSpec) -> None:
    arrays = _params_from_patterns(result.frames)
    if state is not None:
        arrays.update({f"adam.m.{k}": v for k, v in state.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in state.v.items()})
    arrays["loss_history"] = result.loss_history
    meta = {
        "spec_hash": spec_hash(spec),
        "spec": asdict(spec),
        "adam_t": 0 if state is None else state.t,
        "modulations": [[s.modulation if s else None for s in fr] for fr in result.frames],
        "pitch": result.frames[0][0].pitch,
    }
    tensorio.write_bundle(directory, arrays, meta)


def load_checkpoint(directory):
    arrays, meta = tensorio.read_bundle(directory)
    frames = []
    for i, (mod1, mod2) in enumerate(meta["modulations"]):
        pats = []
        for name, mod in (("s1", mod1), ("s2", mod2)):
            if mod is None:
                pats.append(None)
                continue
            pats.append(SlmPattern(mod, meta["pitch"],
                                   arrays.get(f"f{i}.{name}.phase"),
                                   arrays.get(f"f{i}.{name}.amplitude")))
        frames.append((pats[0], pats[1]))
    return OptimizeResult(frames, arrays["loss_history"]), meta
