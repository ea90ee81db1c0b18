"""Branched individual-level world model and imagination-trained driving policy."""

__version__ = "0.1.0"

from .env import DrivingEnv, SPEED_ACTIONS, compute_reward
from .scenarios import TemplateParams, generate
from .tracks import Scenario, VehicleTrack

__all__ = [
    "DrivingEnv",
    "SPEED_ACTIONS",
    "Scenario",
    "TemplateParams",
    "VehicleTrack",
    "compute_reward",
    "generate",
    "__version__",
]
