"""Behaviour-cloning toolkit for a recurrent attention locomotion policy."""

__version__ = "0.1.0"

from .errors import (
    ChecksumError, ContractError, DegenerateInputError, DimensionError, EmptyWindowError,
    FormatError, GroqLocoError, NumericalError, ShapeError, TruncatedFileError,
    ValidationError, VersionError,
)
from .model import (
    ArchConfig, ModelParams, Observation, PolicyState, forward_sequence, init_params,
    policy_step, rollout,
)
from .loss import adaptive_term, masked_sequence_loss
from .data import Dataset, GaitSpec, Trajectory, generate_dataset, generate_trajectory
from .trainer import TrainConfig, TrainerState, train, train_epoch
from .estimator import GroqLocoPolicy
