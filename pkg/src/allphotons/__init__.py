"""Imaging a transmission mask hidden inside a scattering slab from one time-resolved measurement.

The forward model composes closed-form diffusion kernels of the two slabs
around the mask plane. Estimation recovers absorption from the late-time
decay, reduced scattering by gradient descent with dual-number derivatives,
and the mask by ADMM with l1 and total-variation priors. A Monte Carlo
photon tracer produces ground-truth measurements.
"""

from .diffusion import C_VACUUM, OpticalProperties, SceneGeometry, sample_kernel, slab_kernel_value
from .dual import Dual, RMSProp, rmsprop_step
from .estimation import EstimationConfig, EstimationReport, InsufficientSNR, alternate, estimate_mu_a, estimate_mu_s
from .forward import ForwardScene, default_scene, predict, predict_dual
from .montecarlo import McConfig, McCounters, McResult, trace
from .reconstruction import (AdmmConfig, NumericalFailure, PriorOperator, SystemMatrix, admm_solve,
                             build_system_matrix, soft_threshold, tikhonov_solve)
from .tensor import Image2D, Volume3D, conv3d, integrate_time, vec_normalized

__version__ = "0.1.0"

__all__ = [
    "C_VACUUM", "OpticalProperties", "SceneGeometry", "sample_kernel", "slab_kernel_value",
    "Dual", "RMSProp", "rmsprop_step",
    "EstimationConfig", "EstimationReport", "InsufficientSNR", "alternate", "estimate_mu_a", "estimate_mu_s",
    "ForwardScene", "default_scene", "predict", "predict_dual",
    "McConfig", "McCounters", "McResult", "trace",
    "AdmmConfig", "NumericalFailure", "PriorOperator", "SystemMatrix", "admm_solve",
    "build_system_matrix", "soft_threshold", "tikhonov_solve",
    "Image2D", "Volume3D", "conv3d", "integrate_time", "vec_normalized",
]
