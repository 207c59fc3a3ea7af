"""Deep equilibrium image reconstruction trained with implicit differentiation or equivariant imaging.

Submodules: ``autodiff`` (reverse-mode engine), ``linops`` (measurement
operators and rotations), ``solvers`` (fixed-point iterations), ``deq``
(equilibrium layer), ``models`` (denoiser), ``losses``, ``baselines``,
``training``, ``metrics``, ``config`` and ``cli``.
"""

from .config import ExperimentConfig, load_config, parse_config
from .deq import BackpropMode, DeqModel, DeqReconstructor
from .kernels import BACKEND
from .linops import GroupElement, rotate
from .losses import LossConfig, ei_objective, sup_loss
from .models import Denoiser, DenoiserArch
from .solvers import SolverConfig, solve

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BackpropMode",
    "DeqModel",
    "DeqReconstructor",
    "Denoiser",
    "DenoiserArch",
    "ExperimentConfig",
    "GroupElement",
    "LossConfig",
    "SolverConfig",
    "ei_objective",
    "load_config",
    "parse_config",
    "rotate",
    "solve",
    "sup_loss",
]
