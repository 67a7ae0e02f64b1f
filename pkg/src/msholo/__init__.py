"""Simulation, optimization, and calibration engine for multisource
two-SLM holographic displays."""

from .fields import ComplexField2D, IntensityImage, fft2, ifft2, resample, shift_field
from .forward import (
    SlmPattern,
    SystemConfig,
    forward_single,
    forward_multisource_1slm,
    forward_multisource_2slm,
    forward_multisource_stack,
    field_at_eyebox_plane,
)
from .propagation import AsmKernel, asm_kernel, propagate, propagate_adjoint
from .sources import (
    GridSpec,
    SourceArray,
    expected_shift,
    grid_spacing_from_geometry,
    make_grid,
    memory_effect_spacing,
    plane_wave,
)
from .targets import FocalStackTarget, LayeredScene, SceneLayer, make_grating_target, render_focal_stack
from .optimizer import (
    GradientBundle,
    OptimizeSpec,
    PupilSpec,
    adam_step,
    gradients,
    loss_l2,
    optimize,
    optimize_temporal_multiplex,
    project_constraints,
    pupil_sampled_forward,
)
from .metrics import eyebox_report, michelson_contrast, psnr, speckle_contrast, ssim

__version__ = "0.1.0"
