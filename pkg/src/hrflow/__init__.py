"""Depth-two hierarchical rectified flow on toy data, in numpy."""
from .coupling import CouplingPlan, couple_data, couple_velocity, minibatch_couple, solve_ot
from .dists import GaussianMixture, MoonDataset, StandardGaussian, make_rng, preset, sample
from .interp import SpaceTimePoint, VelTimePoint, interp_state, interp_velocity
from .metrics import dip_bimodality, sliced_w2, w1_1d
from .model import AccelModel, NetConfig, load_checkpoint, save_checkpoint
from .oracle import UndefinedVelocityLaw, velocity_law
from .sampling import NfeBudget, integrate_velocity, marginal_snapshot, sample_hrf2, sample_rf
from .training import TrainConfig, train, validate

__version__ = "0.1.0"

__all__ = [
    "AccelModel",
    "CouplingPlan",
    "GaussianMixture",
    "MoonDataset",
    "NetConfig",
    "NfeBudget",
    "SpaceTimePoint",
    "StandardGaussian",
    "TrainConfig",
    "UndefinedVelocityLaw",
    "VelTimePoint",
    "couple_data",
    "couple_velocity",
    "dip_bimodality",
    "integrate_velocity",
    "interp_state",
    "interp_velocity",
    "load_checkpoint",
    "make_rng",
    "marginal_snapshot",
    "minibatch_couple",
    "preset",
    "sample",
    "sample_hrf2",
    "sample_rf",
    "save_checkpoint",
    "sliced_w2",
    "solve_ot",
    "train",
    "validate",
    "velocity_law",
    "w1_1d",
]
