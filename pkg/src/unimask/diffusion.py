"""Core math of the absorbing-state token diffusion.

Conventions used everywhere in this package:

* a vocabulary of size V holds V - 1 data tokens plus the mask token,
  whose ID is always the last index (V - 1);
* the forward process at time t keeps each token with probability
  alpha(t) and replaces it with the mask otherwise, independently per
  position;
* the reverse posterior from time t to an earlier time s < t leaves
  non-mask tokens untouched (carry-over) and, for a masked position with
  predicted clean-token distribution p, is

      [(1 - alpha_s) * e_mask + (alpha_s - alpha_t) * p] / (1 - alpha_t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .schedule import MaskSchedule


class Modality(Enum):
    TEXT = "text"
    IMAGE = "image"


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length integer token IDs with a modality tag.

    vocab_size counts the mask token, so valid IDs are [0, vocab_size - 1]
    and the mask ID is vocab_size - 1.  The underlying array is read-only.
    """

    ids: np.ndarray
    modality: Modality
    vocab_size: int

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(f"ids must be 1-D, got shape {ids.shape}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (one data token plus mask)")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(
                f"token ids must lie in [0, {self.vocab_size - 1}], "
                f"got range [{ids.min()}, {ids.max()}]"
            )
        ids = ids.copy()
        ids.flags.writeable = False
        object.__setattr__(self, "ids", ids)

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    def __len__(self) -> int:
        return int(self.ids.size)

    def mask_positions(self) -> np.ndarray:
        return np.nonzero(self.ids == self.mask_id)[0]

    def replace_ids(self, ids: np.ndarray) -> "TokenSequence":
        return TokenSequence(ids, self.modality, self.vocab_size)


@dataclass(frozen=True)
class CorruptionRecord:
    corrupted: TokenSequence
    mask_pattern: np.ndarray  # boolean, True where the token was masked
    t: float
    mask_count: int


def forward_corrupt(
    seq: TokenSequence,
    t: float,
    schedule: MaskSchedule,
    rng: np.random.Generator,
) -> CorruptionRecord:
    """Mask each position of a clean sequence independently at rate gamma(t)."""
    if np.any(seq.ids == seq.mask_id):
        raise ValueError("forward_corrupt expects a clean sequence without mask ids")
    alpha = schedule.alpha(float(t))
    # rng.random() < alpha keeps the token; at alpha = 1 this is always true
    # (draws lie in [0, 1)) and at alpha = 0 never, so the endpoints are exact.
    keep = rng.random(len(seq)) < alpha
    pattern = ~keep
    ids = np.where(pattern, seq.mask_id, seq.ids)
    return CorruptionRecord(
        corrupted=seq.replace_ids(ids),
        mask_pattern=pattern,
        t=float(t),
        mask_count=int(pattern.sum()),
    )


def reverse_posterior(
    current_id,
    alpha_s: float,
    alpha_t: float,
    predicted: np.ndarray,
) -> np.ndarray:
    """Posterior over the token at time s given the state at time t > s.

    current_id may be a scalar or a 1-D array; predicted must then be a
    matching [V] vector or [L, V] matrix of clean-token probabilities.
    The mask ID is the last index of the probability vector.  Carry-over
    positions (current_id != mask) get a point mass at their current token.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    scalar = np.ndim(current_id) == 0
    ids = np.atleast_1d(np.asarray(current_id, dtype=np.int64))
    probs = np.atleast_2d(predicted)
    if probs.shape[0] != ids.shape[0]:
        raise ValueError("current_id and predicted have mismatched leading shapes")
    if not (0.0 <= alpha_t < 1.0 and 0.0 < alpha_s <= 1.0):
        raise ValueError(f"need 0 <= alpha_t < 1 and 0 < alpha_s <= 1, got {alpha_t}, {alpha_s}")
    if alpha_s <= alpha_t:
        raise ValueError(f"reverse step needs alpha_s > alpha_t, got {alpha_s} <= {alpha_t}")
    if np.any(probs < 0.0):
        raise ValueError("predicted probabilities must be non-negative")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"predicted rows must sum to 1 within 1e-6, got {sums}")

    vocab = probs.shape[-1]
    mask_id = vocab - 1
    if ids.size and (ids.min() < 0 or ids.max() > mask_id):
        raise ValueError("current ids outside the vocabulary")

    out = np.zeros_like(probs)
    masked = ids == mask_id
    # carry-over: a revealed token is already final
    out[np.nonzero(~masked)[0], ids[~masked]] = 1.0
    if masked.any():
        denom = 1.0 - alpha_t
        row = (alpha_s - alpha_t) / denom * probs[masked]
        row[:, mask_id] += (1.0 - alpha_s) / denom
        out[masked] = row
    return out[0] if scalar else out


def commit_count(
    schedule: MaskSchedule,
    step_index: int,
    T: int,
    total_masked_at_start: int,
) -> int:
    """How many positions the confidence sampler commits at a given step.

    Uses cumulative half-up-rounded targets C(k) = round(total * (1 -
    gamma(s_k) / gamma(1))) with s_k = (T - k - 1) / T, so the per-step
    counts telescope to the total exactly and the final step commits
    everything left.
    """
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not 0 <= step_index < T:
        raise ValueError(f"step_index must lie in [0, {T}), got {step_index}")
    if total_masked_at_start < 0:
        raise ValueError("total_masked_at_start must be non-negative")

    g1 = schedule.gamma(1.0)

    def cum(k: int) -> int:
        if k < 0:
            return 0
        s = (T - k - 1) / T
        frac = 1.0 - schedule.gamma(s) / g1
        return int(math.floor(total_masked_at_start * frac + 0.5))

    return cum(step_index) - cum(step_index - 1)


def weighted_masked_ce(
    logits: torch.Tensor,
    target_ids: np.ndarray,
    masked_positions: np.ndarray,
    weight: float,
) -> tuple[torch.Tensor, bool]:
    """Weighted cross-entropy summed over the masked positions.

    logits is [L, V]; target_ids are the clean tokens.  Each masked token
    contributes its own full cross-entropy, so at near-uniform logits the
    loss per masked token is weight * ln(V).  Returns the scalar loss (a
    torch tensor on the autograd graph) and an empty-mask flag; an empty
    position set yields a zero loss with the flag set.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    masked_positions = np.asarray(masked_positions, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [L, V], got shape {tuple(logits.shape)}")
    L, vocab = logits.shape
    if target_ids.shape != (L,):
        raise ValueError("target_ids length must match logits rows")
    if masked_positions.size == 0:
        return logits.new_zeros(()), True
    if masked_positions.min() < 0 or masked_positions.max() >= L:
        raise ValueError("masked positions out of range")
    picked = target_ids[masked_positions]
    if np.any(picked == vocab - 1):
        raise ValueError("clean targets must not contain the mask id")
    pos = torch.from_numpy(masked_positions)
    tgt = torch.from_numpy(picked)
    logp = torch.log_softmax(logits[pos], dim=-1)
    ce = -logp[torch.arange(len(pos)), tgt].sum()
    return weight * ce, False
