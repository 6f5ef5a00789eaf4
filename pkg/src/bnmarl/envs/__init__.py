from .aloha import AlohaEnv, AlohaSpec, AlohaState, aloha_step
from .base import StepResult
from .coordination import (CoordinationGameEnv, CoordinationGameSpec, coordination_game,
                           coordination_reward)

__all__ = [
    "AlohaEnv", "AlohaSpec", "AlohaState", "aloha_step", "StepResult",
    "CoordinationGameEnv", "CoordinationGameSpec", "coordination_game",
    "coordination_reward", "make_env",
]


def make_env(name: str, spec=None):
    """Construct a sample-based environment by name (``coordination`` or ``aloha``)."""
    if name in ("coordination", "coordination_game"):
        return CoordinationGameEnv(spec or CoordinationGameSpec())
    if name == "aloha":
        return AlohaEnv(spec or AlohaSpec())
    raise ValueError(f"unknown environment {name!r}")
