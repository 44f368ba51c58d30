"""Task-correlated class-incremental learning on dynamically expandable networks."""

from .errors import (
    ConfigError,
    DegenerateWeightsError,
    InputError,
    IntegrityError,
    ProtocolConfigError,
    ResumeError,
    StateError,
    TCILError,
)
from .losses import KdConfig, LossBundle
from .model import RescoreState, TCILModel
from .protocol import ExemplarMemory, Protocol, TaskStream, build_stream
from .trainer import ExperimentConfig, TrainConfig, run_experiment, run_step

__version__ = "0.1.0"
