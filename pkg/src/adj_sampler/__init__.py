"""Diffusion samplers trained from unnormalized energy functions.

The library builds a controlled diffusion whose terminal law matches a
Boltzmann density given only the energy and its gradient.  Training regresses
the drift onto cached terminal-cost gradients under closed-form posterior
resampling, so many gradient updates are made per energy evaluation.  It
supports Euclidean, zero-center-of-mass, and flat-torus state spaces, MALA
reference chains, and symmetry-aware Wasserstein evaluation.
"""

import logging

from .base_process import BaseProcess, GeometrySpec, NoiseSchedule
from .buffer import BufferEntry, ReplayBuffer
from .control_net import EquivariantPolicy, MlpPolicy, build_policy, loss_gradient
from .energy import (CallableEnergy, DoubleWell4Energy, GaussianEnergy,
                     LennardJonesEnergy, TerminalCost, TorusDoubleWellEnergy,
                     build_energy)
from .errors import (ConfigError, ContractViolationError,
                     DivergedTrajectoryError, SingularConfigurationError)
from .metrics import align_pair, energy_w2, geometric_w2, path_ess
from .reference import MalaConfig, mala_sample
from .sde import SdeRun, path_log_weight, simulate
from .trainer import Adam, bridge_matching_pretrain, outer_loop, ram_inner_step

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "BaseProcess", "GeometrySpec", "NoiseSchedule", "BufferEntry", "ReplayBuffer",
    "EquivariantPolicy", "MlpPolicy", "build_policy", "loss_gradient",
    "CallableEnergy", "DoubleWell4Energy", "GaussianEnergy", "LennardJonesEnergy",
    "TerminalCost", "TorusDoubleWellEnergy", "build_energy",
    "ConfigError", "ContractViolationError", "DivergedTrajectoryError",
    "SingularConfigurationError", "align_pair", "energy_w2", "geometric_w2",
    "path_ess", "MalaConfig", "mala_sample", "SdeRun", "path_log_weight",
    "simulate", "Adam", "bridge_matching_pretrain", "outer_loop", "ram_inner_step",
]
