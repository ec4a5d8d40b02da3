"""Analytic attention-cost model and an empirical latency harness.

Units count attention score terms only; projections and MLPs are
excluded on purpose so the exact closed forms below stay exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .diffusion import Modality
from .errors import ConfigError

AR_NOCACHE = "ar_nocache"
AR_CACHE = "ar_cache"
DIFFUSION = "diffusion"


@dataclass(frozen=True)
class CostReport:
    regime: str
    length: int
    dim: int
    steps: Optional[int]
    exact_attention_units: int
    asymptotic_class: str
    units_with_cfg: Optional[int] = None
    wall_clock_seconds: Optional[float] = None


def _check(name: str, value: int) -> int:
    value = int(value)
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}")
    return value


def ar_flops_nocache(length: int, dim: int) -> CostReport:
    """Token-by-token decoding that re-attends to the whole prefix."""
    L = _check("length", length)
    D = _check("dim", dim)
    units = D * L * (L + 1) * (2 * L + 1) // 6
    return CostReport(AR_NOCACHE, L, D, None, units, "O(L^3 D)")


def ar_flops_cache(length: int, dim: int) -> CostReport:
    """Token-by-token decoding with cached keys and values."""
    L = _check("length", length)
    D = _check("dim", dim)
    units = D * L * (L + 1) // 2
    return CostReport(AR_CACHE, L, D, None, units, "O(L^2 D)")


def diffusion_flops(steps: int, length: int, dim: int) -> CostReport:
    """T parallel full-sequence passes; the CFG column doubles the calls."""
    T = _check("steps", steps)
    L = _check("length", length)
    D = _check("dim", dim)
    units = T * L * L * D
    return CostReport(DIFFUSION, L, D, T, units, "O(T L^2 D)", units_with_cfg=2 * units)


def measure_latency(
    model,
    length: int,
    steps: int,
    trials: int = 5,
    modality: Modality = Modality.TEXT,
) -> tuple[CostReport, CostReport]:
    """Median wall clock of sequential vs parallel decoding schedules.

    Sequential issues one growing-prefix call per position (the no-cache
    autoregressive pattern); parallel issues `steps` full-length calls.
    Both run the same backbone unconditionally in fast precision.
    """
    L = _check("length", length)
    T = _check("steps", steps)
    if trials < 3:
        raise ConfigError(f"need at least 3 trials for a median, got {trials}")
    limit = model.config.text_len if modality is Modality.TEXT else model.config.image_len
    if L > limit:
        raise ConfigError(f"length {L} exceeds the model's {modality.name.lower()} length {limit}")
    ids = np.zeros(L, dtype=np.int64)

    def sequential() -> None:
        for i in range(1, L + 1):
            model.forward(ids[:i], modality, 0.5, None, precision="fast")

    def parallel() -> None:
        for _ in range(T):
            model.forward(ids, modality, 0.5, None, precision="fast")

    seq_times = []
    par_times = []
    with torch.no_grad():
        sequential()
        parallel()
        for _ in range(trials):
            began = time.perf_counter()
            sequential()
            seq_times.append(time.perf_counter() - began)
            began = time.perf_counter()
            parallel()
            par_times.append(time.perf_counter() - began)
    dim = model.config.dim
    seq = ar_flops_nocache(L, dim)
    par = diffusion_flops(T, L, dim)
    return (
        CostReport(
            seq.regime,
            L,
            dim,
            None,
            seq.exact_attention_units,
            seq.asymptotic_class,
            wall_clock_seconds=float(np.median(seq_times)),
        ),
        CostReport(
            par.regime,
            L,
            dim,
            T,
            par.exact_attention_units,
            par.asymptotic_class,
            units_with_cfg=par.units_with_cfg,
            wall_clock_seconds=float(np.median(par_times)),
        ),
    )
