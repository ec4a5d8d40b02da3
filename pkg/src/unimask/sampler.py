"""Reverse-diffusion decoding: confidence-ordered parallel unmasking.

One decoder serves all three tasks; only the condition, the target
template, and the negative condition differ.  A pure per-position
posterior mode is kept alongside the ranked default so the decoder can
be compared against an exact chain enumeration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import Condition
from .codec import (
    DEFAULT_ANSWER_LEN,
    GridImage,
    IMG_MASK_ID,
    IMG_VOCAB_SIZE,
    TEXT_MASK_ID,
    TEXT_VOCAB_SIZE,
    decode_image,
    decode_text,
    empty_image_tokens,
    empty_text_tokens,
    encode_image,
    encode_text,
)
from .diffusion import Modality, TokenSequence, commit_count, reverse_posterior
from .errors import ConfigError, DataError, InvariantViolation
from .schedule import MaskSchedule

COSINE = MaskSchedule()

COMMIT_MODES = ("confidence", "posterior")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 64
    cfg_scale: float = 9.0
    temperature: float = 1.0
    top_k: Optional[int] = None
    seed: int = 0
    confidence_noise: bool = False
    commit_mode: str = "confidence"
    precision: str = "fast"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1 when set")
        if self.commit_mode not in COMMIT_MODES:
            raise ConfigError(f"unknown commit_mode {self.commit_mode!r}")
        if self.precision not in ("high", "fast"):
            raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass(frozen=True)
class DecodeStep:
    t: float
    positions: np.ndarray
    ids: np.ndarray
    confidence: np.ndarray
    max_prob: np.ndarray
    snapshot: np.ndarray


@dataclass
class DecodeTrace:
    steps: list[DecodeStep] = field(default_factory=list)
    model_calls: int = 0

    def committed_positions(self) -> np.ndarray:
        if not self.steps:
            return np.array([], dtype=np.int64)
        return np.concatenate([s.positions for s in self.steps])

    def jsonl_lines(self) -> list[str]:
        lines = []
        for k, s in enumerate(self.steps):
            lines.append(
                json.dumps(
                    {
                        "step": k,
                        "t": s.t,
                        "positions": s.positions.tolist(),
                        "ids": s.ids.tolist(),
                        "confidence": [round(float(c), 6) for c in s.confidence],
                        "max_prob": [round(float(c), 6) for c in s.max_prob],
                        "snapshot": s.snapshot.tolist(),
                    }
                )
            )
        return lines


def cfg_logits(cond, uncond, scale: float):
    """Guided logits cond + scale * (cond - uncond); shapes must match."""
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {cond.shape} vs {uncond.shape}")
    return cond + scale * (cond - uncond)


def _filtered_probs(logits: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Guided logits -> per-position categorical over clean tokens.

    Order is fixed for reproducibility: the mask class is removed, then
    temperature, then top-k, then normalization.  Ties at the top-k
    threshold all stay in.
    """
    x = np.array(logits, dtype=np.float64)
    x[..., -1] = -np.inf
    x = x / config.temperature
    if config.top_k is not None and config.top_k < x.shape[-1]:
        thresh = np.sort(x, axis=-1)[..., -config.top_k, None]
        x = np.where(x < thresh, -np.inf, x)
    x -= x.max(axis=-1, keepdims=True)
    z = np.exp(x)
    return z / z.sum(axis=-1, keepdims=True)


def _draw(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random((rows.shape[0], 1))
    return np.minimum((u > cdf).sum(axis=-1), rows.shape[-1] - 1)


def decode(
    model,
    condition: Optional[Condition],
    template: TokenSequence,
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    negative: Optional[Condition] = None,
    schedule: MaskSchedule = COSINE,
) -> tuple[TokenSequence, DecodeTrace]:
    """Fill the template's masked slots; frozen slots pass through untouched.

    Issues one backbone call per step, two when a negative condition is
    active (cfg_scale > 0); at scale 0 the negative branch is skipped and
    the result is bit-identical to decoding without one.
    """
    if config.top_k is not None and config.top_k > template.vocab_size:
        raise ConfigError(f"top_k {config.top_k} exceeds the vocabulary {template.vocab_size}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    mask_id = template.mask_id
    current = template.ids.copy()
    total = int((current == mask_id).sum())
    trace = DecodeTrace()
    if total == 0:
        return template, trace
    conds = None if condition is None else [condition]
    use_negative = negative is not None and config.cfg_scale > 0
    negs = [negative] if use_negative else None
    grid = schedule.step_grid(config.steps)
    for k, t in enumerate(grid):
        t = float(t)
        alpha_t = schedule.alpha(t)
        cond_logits = model.forward(
            current, template.modality, alpha_t, conds, precision=config.precision
        )
        trace.model_calls += 1
        guided = cond_logits.detach().double().numpy()
        if use_negative:
            uncond_logits = model.forward(
                current, template.modality, alpha_t, negs, precision=config.precision
            )
            trace.model_calls += 1
            guided = cfg_logits(guided, uncond_logits.detach().double().numpy(), config.cfg_scale)
        probs = _filtered_probs(guided, config)
        masked_now = np.flatnonzero(current == mask_id)
        rows = probs[masked_now]
        if len(masked_now) == 0:
            # posterior mode may finish early; keep one trace line per step
            commit_pos = np.array([], dtype=np.int64)
            commit_ids = np.array([], dtype=np.int64)
            confidence = np.array([], dtype=np.float64)
        elif config.commit_mode == "posterior":
            alpha_s = schedule.alpha((config.steps - k - 1) / config.steps)
            post = reverse_posterior(current[masked_now], alpha_s, alpha_t, rows)
            draw = _draw(post, rng)
            chosen = draw != mask_id
            commit_pos = masked_now[chosen]
            commit_ids = draw[chosen]
            confidence = post[np.flatnonzero(chosen), commit_ids]
        else:
            n_commit = commit_count(schedule, k, config.steps, total)
            if n_commit > len(masked_now):
                raise InvariantViolation(
                    f"step {k} wants {n_commit} commits but only {len(masked_now)} slots remain"
                )
            cand = _draw(rows, rng)
            conf = rows[np.arange(len(masked_now)), cand]
            key = np.log(np.maximum(conf, 1e-300))
            if config.confidence_noise:
                # noise scale follows t so late steps become greedy
                key = key + t * rng.gumbel(size=len(masked_now))
            order = np.argsort(-key, kind="stable")[:n_commit]
            commit_pos = masked_now[order]
            commit_ids = cand[order]
            confidence = conf[order]
        current[commit_pos] = commit_ids
        trace.steps.append(
            DecodeStep(
                t=t,
                positions=commit_pos.copy(),
                ids=commit_ids.astype(np.int64),
                confidence=confidence.copy(),
                max_prob=rows.max(axis=-1)[
                    np.searchsorted(masked_now, commit_pos)
                ].copy(),
                snapshot=current.copy(),
            )
        )
    if np.any(current == mask_id):
        raise InvariantViolation(
            f"{int((current == mask_id).sum())} masked slots remain after the final step"
        )
    return template.replace_ids(current), trace


# ------------------------------------------------------------- task recipes


def _grid_shape(model, width: int, height: int) -> None:
    if width * height != model.config.image_len:
        raise ConfigError(
            f"{width}x{height} grid does not match the model's image length "
            f"{model.config.image_len}"
        )


def text_to_image(
    model,
    prompt: Sequence[str],
    config: SamplerConfig,
    width: int = 8,
    height: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> tuple[GridImage, DecodeTrace]:
    """Prompt words -> grid, decoding a fully masked image sequence."""
    _grid_shape(model, width, height)
    text_len = model.config.text_len
    condition = Condition(text=encode_text(prompt, text_len))
    template = TokenSequence(
        np.full(model.config.image_len, IMG_MASK_ID, dtype=np.int64),
        Modality.IMAGE,
        IMG_VOCAB_SIZE,
    )
    final, trace = decode(
        model, condition, template, config, rng, negative=Condition(text=empty_text_tokens(text_len))
    )
    return decode_image(final, width, height), trace


def image_to_text(
    model,
    grid: GridImage,
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[tuple[str, ...], DecodeTrace]:
    """Grid -> caption words, decoding a fully masked text sequence."""
    _grid_shape(model, grid.width, grid.height)
    condition = Condition(image=encode_image(grid))
    template = TokenSequence(
        np.full(model.config.text_len, TEXT_MASK_ID, dtype=np.int64),
        Modality.TEXT,
        TEXT_VOCAB_SIZE,
    )
    final, trace = decode(
        model,
        condition,
        template,
        config,
        rng,
        negative=Condition(image=empty_image_tokens(grid.width, grid.height)),
    )
    return decode_text(final), trace


def vqa(
    model,
    grid: GridImage,
    question: Sequence[str],
    config: SamplerConfig,
    answer_len: int = DEFAULT_ANSWER_LEN,
    rng: Optional[np.random.Generator] = None,
) -> tuple[tuple[str, ...], DecodeTrace]:
    """Grid + question -> answer words from appended mask slots.

    The question rides along twice: frozen in the target template and as
    the text part of the condition; only the answer slots are generated.
    """
    _grid_shape(model, grid.width, grid.height)
    text_len = model.config.text_len
    if len(question) + answer_len > text_len:
        raise DataError("question does not leave room for the answer slots")
    encoded = encode_text(question, text_len)
    ids = encoded.ids.copy()
    slots = np.arange(len(question), len(question) + answer_len)
    ids[slots] = TEXT_MASK_ID
    template = TokenSequence(ids, Modality.TEXT, TEXT_VOCAB_SIZE)
    condition = Condition(image=encode_image(grid), text=encoded)
    # the negative keeps the image so guidance pushes against question
    # specificity, not against the image content
    negative = Condition(image=encode_image(grid), text=empty_text_tokens(text_len))
    final, trace = decode(model, condition, template, config, rng, negative=negative)
    if not np.array_equal(final.ids[: len(question)], encoded.ids[: len(question)]):
        raise InvariantViolation("question tokens changed during decode")
    answer = TokenSequence(final.ids[slots], Modality.TEXT, TEXT_VOCAB_SIZE)
    return decode_text(answer), trace
