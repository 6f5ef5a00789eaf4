from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StepResult:
    obs: np.ndarray  # joint observation, one row per agent
    reward: float
    done: bool
    info: dict = field(default_factory=dict)
