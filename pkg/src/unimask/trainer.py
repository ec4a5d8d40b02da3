"""Mixed-direction training for the unified masked-token objective.

A batch mixes image-target and text-target items; the loss path is one
code path for both directions, only the (target, condition) roles swap.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, Condition, load_checkpoint, save_checkpoint
from .codec import (
    DEFAULT_ANSWER_LEN,
    DEFAULT_TEXT_LEN,
    Sample,
    empty_image_tokens,
    empty_text_tokens,
    encode_image,
    encode_text,
)
from .diffusion import Modality, TokenSequence, forward_corrupt, weighted_masked_ce
from .errors import ConfigError, DataError, InvariantViolation
from .schedule import MaskSchedule

COSINE = MaskSchedule()


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    accum_steps: int = 1
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    lr_min_ratio: float = 0.1
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    text_loss_weight: float = 0.6
    joint_training: bool = True
    direction_mix: float = 0.5
    cond_dropout: float = 0.1
    sft_mode: bool = False
    sft_qa_fraction: float = 0.5
    text_len: int = DEFAULT_TEXT_LEN
    answer_len: int = DEFAULT_ANSWER_LEN
    seed: int = 0
    precision: str = "high"
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("batch_size and accum_steps must be >= 1")
        # zero rate is allowed so a no-op update step stays expressible
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        for name in ("text_loss_weight", "direction_mix", "sft_qa_fraction", "cond_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ConfigError("betas must lie in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.lr_min_ratio <= 1.0:
            raise ConfigError(f"lr_min_ratio must lie in [0, 1], got {self.lr_min_ratio}")
        if self.precision not in ("high", "fast"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.answer_len < 1 or self.text_len <= self.answer_len:
            raise ConfigError("need text_len > answer_len >= 1")


@dataclass(frozen=True)
class BatchItem:
    """One training example: corrupted input, clean labels, and loss weight."""

    clean: TokenSequence
    corrupted: TokenSequence
    condition: Condition
    masked_positions: np.ndarray
    t: float
    weight: float


def _diffusion_item(
    target: TokenSequence,
    condition: Condition,
    direction_weight: float,
    config: TrainConfig,
    rng: np.random.Generator,
    schedule: MaskSchedule,
) -> BatchItem:
    t = schedule.sample_train_time(rng)
    record = forward_corrupt(target, t, schedule, rng)
    weight = schedule.loss_weight(t) * direction_weight
    return BatchItem(
        clean=target,
        corrupted=record.corrupted,
        condition=condition,
        masked_positions=np.flatnonzero(record.mask_pattern),
        t=t,
        weight=weight,
    )


def _qa_item(
    sample: Sample, config: TrainConfig, rng: np.random.Generator, dropped: bool
) -> BatchItem:
    qa = sample.qa[int(rng.integers(len(sample.qa)))]
    if len(qa.answer) > config.answer_len:
        raise DataError(f"answer longer than {config.answer_len} slots: {qa.answer}")
    if len(qa.question) + config.answer_len > config.text_len:
        raise DataError("question does not leave room for the answer slots")
    clean = encode_text(tuple(qa.question) + tuple(qa.answer), config.text_len)
    start = len(qa.question)
    slots = np.arange(start, start + config.answer_len)
    ids = clean.ids.copy()
    ids[slots] = clean.mask_id
    # a dropped item keeps the image and blanks only the question, the
    # same null the guided decoder evaluates
    condition = Condition(
        image=encode_image(sample.grid),
        text=empty_text_tokens(config.text_len)
        if dropped
        else encode_text(qa.question, config.text_len),
    )
    # answer slots are fully masked, so t = 1; the schedule weight vanishes
    # there and would erase the objective, hence a unit base weight
    return BatchItem(
        clean=clean,
        corrupted=clean.replace_ids(ids),
        condition=condition,
        masked_positions=slots,
        t=1.0,
        weight=1.0 * config.text_loss_weight,
    )


def make_batch(
    corpus: Sequence[Sample],
    config: TrainConfig,
    rng: np.random.Generator,
    schedule: MaskSchedule = COSINE,
) -> list[BatchItem]:
    """Draw one mixed-direction batch of config.batch_size items."""
    if len(corpus) == 0:
        raise DataError("cannot build a batch from an empty corpus")
    items = []
    for _ in range(config.batch_size):
        sample = corpus[int(rng.integers(len(corpus)))]
        to_image = rng.random() < config.direction_mix
        # null-condition items train the branch classifier-free guidance
        # evaluates at decode time; skip the draw at 0 so the stream is
        # unchanged when the feature is off
        dropped = config.cond_dropout > 0 and rng.random() < config.cond_dropout
        if to_image:
            text = (
                empty_text_tokens(config.text_len)
                if dropped
                else encode_text(sample.caption, config.text_len)
            )
            items.append(
                _diffusion_item(
                    encode_image(sample.grid),
                    Condition(text=text),
                    1.0 - config.text_loss_weight,
                    config,
                    rng,
                    schedule,
                )
            )
        elif config.sft_mode and sample.qa and rng.random() < config.sft_qa_fraction:
            items.append(_qa_item(sample, config, rng, dropped))
        else:
            image = (
                empty_image_tokens(sample.grid.width, sample.grid.height)
                if dropped
                else encode_image(sample.grid)
            )
            items.append(
                _diffusion_item(
                    encode_text(sample.caption, config.text_len),
                    Condition(image=image),
                    config.text_loss_weight,
                    config,
                    rng,
                    schedule,
                )
            )
    return items


def _group_key(item: BatchItem) -> tuple:
    return (
        item.corrupted.modality.value,
        item.condition.image is not None,
        item.condition.text is not None,
    )


def _group_losses(
    model: Backbone,
    items: Sequence[BatchItem],
    config: TrainConfig,
    schedule: MaskSchedule,
):
    """Yield (group loss tensor, masked count) per (modality, layout) group."""
    groups: dict[tuple, list[BatchItem]] = {}
    for item in items:
        if not config.joint_training and item.corrupted.modality is Modality.IMAGE:
            continue
        groups.setdefault(_group_key(item), []).append(item)
    for group in groups.values():
        ids = np.stack([it.corrupted.ids for it in group])
        alphas = np.array([schedule.alpha(it.t) for it in group])
        conds = [it.condition for it in group]
        logits = model.forward(
            ids, group[0].corrupted.modality, alphas, conds, precision=config.precision
        )
        loss = logits.new_zeros(())
        n_masked = 0
        for row, it in enumerate(group):
            part, empty = weighted_masked_ce(
                logits[row], it.clean.ids, it.masked_positions, it.weight
            )
            if not empty:
                loss = loss + part
                n_masked += len(it.masked_positions)
        yield loss, n_masked


def batch_loss(
    model: Backbone,
    items: Sequence[BatchItem],
    config: TrainConfig,
    schedule: MaskSchedule = COSINE,
    backward: bool = False,
) -> tuple[float, int]:
    """Summed weighted loss over the batch; optionally runs backward.

    Items are grouped by (modality, condition layout) so each group runs
    as one batched forward.  Returns (loss, number of masked targets).
    """
    total = 0.0
    n_masked = 0
    for loss, count in _group_losses(model, items, config, schedule):
        if backward:
            loss.backward()
        total += float(loss.detach())
        n_masked += count
    return total, n_masked


def batch_loss_tensor(
    model: Backbone,
    items: Sequence[BatchItem],
    config: TrainConfig,
    schedule: MaskSchedule = COSINE,
) -> torch.Tensor:
    """The same summed loss as one autograd scalar (gradient-gate hook)."""
    total = None
    for loss, _ in _group_losses(model, items, config, schedule):
        total = loss if total is None else total + loss
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


class AdamW:
    """Decoupled-weight-decay Adam over the model's float32 leaves."""

    def __init__(self, model: Backbone, config: TrainConfig):
        self.model = model
        self.config = config
        self.weight_decay = config.weight_decay
        self.betas = (config.beta1, config.beta2)
        self.eps = config.adam_eps
        self.count = 0
        self.m = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        self.v = {n: torch.zeros_like(p) for n, p in model.named_parameters()}

    @property
    def lr(self) -> float:
        """Rate for the update numbered `count`; derived from the step counter
        alone so a resumed run replays the identical decay."""
        cfg = self.config
        if cfg.lr_schedule == "constant" or cfg.steps <= 1:
            return cfg.learning_rate
        progress = min(1.0, max(0, self.count - 1) / (cfg.steps - 1))
        floor = cfg.learning_rate * cfg.lr_min_ratio
        return floor + (cfg.learning_rate - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    @torch.no_grad()
    def step(self) -> None:
        self.count += 1
        lr = self.lr
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.count
        c2 = 1.0 - b2**self.count
        for name, p in self.model.named_parameters():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.mul_(1.0 - lr * self.weight_decay)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m / c1, denom, value=-lr)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out["opt.m." + name] = self.m[name].numpy()
            out["opt.v." + name] = self.v[name].numpy()
        return out

    def load_state_tensors(self, count: int, tensors: dict[str, np.ndarray]) -> None:
        self.count = int(count)
        for name in self.m:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                key = prefix + name
                if key not in tensors:
                    raise DataError(f"optimizer state is missing {key}")
                arr = tensors[key]
                if tuple(arr.shape) != tuple(store[name].shape):
                    raise DataError(f"optimizer state shape mismatch at {key}")
                store[name].copy_(torch.from_numpy(arr.copy()))


def train_step(
    model: Backbone,
    items: Sequence[BatchItem],
    config: TrainConfig,
    opt: AdamW,
    schedule: MaskSchedule = COSINE,
) -> float:
    """One optimizer update over a prepared batch; returns the summed loss."""
    model.zero_grad(set_to_none=True)
    loss, n_masked = batch_loss(model, items, config, schedule, backward=True)
    if not math.isfinite(loss):
        ts = [it.t for it in items]
        raise InvariantViolation(
            f"non-finite loss {loss!r} over {len(items)} items "
            f"(n_masked={n_masked}, t range [{min(ts):.6f}, {max(ts):.6f}])"
        )
    opt.step()
    return loss


def _save(model: Backbone, opt: AdamW, step: int, path: Path) -> None:
    save_checkpoint(
        model, path, extra={"step": step, "opt_step": opt.count}, extra_tensors=opt.state_tensors()
    )


def _rewrite_metrics(path: Path, keep_up_to: int) -> None:
    if not path.exists():
        return
    kept = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and json.loads(line)["step"] <= keep_up_to:
                kept.append(line)
    with open(path, "w", encoding="utf-8") as fh:
        for line in kept:
            fh.write(line + "\n")


def train_loop(
    corpus: Sequence[Sample],
    config: TrainConfig,
    backbone_config: BackboneConfig,
    out_dir,
    resume_from=None,
    schedule: MaskSchedule = COSINE,
    final_hook: Optional[Callable[[Backbone, int], dict]] = None,
) -> tuple[Backbone, list[dict]]:
    """Run the loop, writing metrics.jsonl and periodic checkpoints.

    A fresh run seeds the model from config.seed and writes ckpt_000000.
    Each step re-derives its data stream from [seed, step], so resuming
    from any checkpoint continues bit-identically in fixed precision.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if resume_from is not None:
        model, extra, extra_tensors = load_checkpoint(resume_from)
        if model.config != backbone_config:
            raise ConfigError("checkpoint backbone config does not match the run config")
        start = int(extra["step"])
        opt = AdamW(model, config)
        opt.load_state_tensors(extra["opt_step"], extra_tensors)
        _rewrite_metrics(metrics_path, start)
    else:
        model = Backbone(backbone_config, np.random.default_rng(config.seed))
        start = 0
        opt = AdamW(model, config)
        metrics_path.unlink(missing_ok=True)
        _save(model, opt, 0, out_dir / "ckpt_000000.ckpt")
    metrics: list[dict] = []
    with open(metrics_path, "a", encoding="utf-8") as log:
        for step in range(start + 1, config.steps + 1):
            began = time.monotonic()
            rng = np.random.default_rng([config.seed, step])
            items: list[BatchItem] = []
            for _ in range(config.accum_steps):
                items.extend(make_batch(corpus, config, rng, schedule))
            try:
                loss = train_step(model, items, config, opt, schedule)
            except InvariantViolation as exc:
                raise InvariantViolation(f"step {step}: {exc}") from exc
            row = {
                "step": step,
                "loss": loss,
                "n_items": len(items),
                "seconds": round(time.monotonic() - began, 4),
            }
            metrics.append(row)
            log.write(json.dumps(row) + "\n")
            log.flush()
            if step % config.checkpoint_every == 0 or step == config.steps:
                _save(model, opt, step, out_dir / f"ckpt_{step:06d}.ckpt")
    if final_hook is not None and config.steps >= start:
        result = final_hook(model, config.steps)
        with open(metrics_path, "a", encoding="utf-8") as log:
            log.write(json.dumps({"step": config.steps, "final": result}) + "\n")
    return model, metrics
