"""Masking schedule for absorbing-state discrete diffusion.

The forward process keeps a token with survival probability alpha(t) and
replaces it with the mask token otherwise, so the mask ratio is
gamma(t) = 1 - alpha(t).  The cosine schedule used here is

    gamma(t) = sin(pi * t / 2),        t in [0, 1],

which is fully masked at t = 1 and untouched at t = 0.  Training times are
drawn uniformly from (epsilon, 1]; under the cosine schedule the induced
density of the mask ratio is (2/pi) * (1 - gamma^2)^(-1/2), i.e. heavy near
gamma = 1.

The per-sample loss weight is w(t) = -alpha'(t) / (1 - alpha(t)), which for
the cosine schedule reduces to (pi/2) * cot(pi * t / 2).  It diverges as
t -> 0, so weights are clamped at t = epsilon and the clamp is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SCHEDULE_KINDS = ("cosine",)


@dataclass(frozen=True)
class MaskSchedule:
    """Cosine masking schedule with a clamped loss weight.

    kind is an enumeration hook; only "cosine" is implemented.
    """

    kind: str = "cosine"
    epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind: {self.kind!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    @staticmethod
    def _check_t(t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return t

    def alpha(self, t):
        """Survival probability at time t."""
        t = self._check_t(t)
        out = 1.0 - np.sin(np.pi * t / 2.0)
        return float(out) if out.ndim == 0 else out

    def gamma(self, t):
        """Mask ratio at time t, identically 1 - alpha(t)."""
        t = self._check_t(t)
        out = np.sin(np.pi * t / 2.0)
        return float(out) if out.ndim == 0 else out

    def alpha_prime(self, t):
        """Exact derivative d alpha / d t."""
        t = self._check_t(t)
        out = -(np.pi / 2.0) * np.cos(np.pi * t / 2.0)
        return float(out) if out.ndim == 0 else out

    def loss_weight_flagged(self, t: float) -> tuple[float, bool]:
        """Loss weight w(t) and whether the epsilon clamp fired.

        w(t) = -alpha'(t) / (1 - alpha(t)).  Times below epsilon are
        evaluated at epsilon instead of letting the weight diverge.
        """
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        clamped = t < self.epsilon
        te = max(t, self.epsilon)
        w = (math.pi / 2.0) / math.tan(math.pi * te / 2.0)
        return w, clamped

    def loss_weight(self, t: float) -> float:
        return self.loss_weight_flagged(t)[0]

    def step_grid(self, T: int) -> np.ndarray:
        """Decode time grid [1, (T-1)/T, ..., 1/T], strictly decreasing."""
        if not isinstance(T, int) or T < 1:
            raise ValueError(f"T must be a positive integer, got {T!r}")
        return np.array([(T - k) / T for k in range(T)], dtype=np.float64)

    def sample_train_time(self, rng: np.random.Generator) -> float:
        """Draw a training time uniformly from (epsilon, 1]."""
        # rng.random() lies in [0, 1); flipping it keeps the right endpoint.
        u = 1.0 - rng.random()
        return self.epsilon + (1.0 - self.epsilon) * u
