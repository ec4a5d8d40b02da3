"""Tiny shared transformer over [condition || target] token sequences.

One bidirectional stack serves every task.  The condition (image tokens,
text tokens, or image-then-text) and the target sequence are embedded
with per-modality token and position tables plus a role embedding that
tells condition slots from target slots.  Timestep information enters as
an additive embedding of the survival probability alpha_t bucketized
into a fixed number of bins and added to every position.  Two linear
heads read out per-position logits, one per target modality.

Attention is fully bidirectional with one exception: condition text pad
slots never serve as keys, so a short caption is not diluted by its pad
tail and an all-pad (null) text condition carries no signal at all.

Precision policy: parameters are canonically float32 (checkpoints store
raw little-endian float32 and round-trip bit-exactly); the forward pass
upcasts to float64 in "high" mode, which training and gradient checks
use.  "fast" mode keeps float32 and is meant for sampling only.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import IMG_VOCAB_SIZE, PAD_ID, TEXT_VOCAB_SIZE
from .diffusion import Modality, TokenSequence
from .errors import ConfigError, DataError

ROLE_COND_IMAGE, ROLE_COND_TEXT, ROLE_TARGET = 0, 1, 2

_DTYPES = {"high": torch.float64, "fast": torch.float32}


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    text_len: int = 77
    image_len: int = 64
    text_vocab: int = TEXT_VOCAB_SIZE
    image_vocab: int = IMG_VOCAB_SIZE
    time_bins: int = 256
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("dim", "layers", "heads", "text_len", "image_len", "time_bins", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class Condition:
    """Conditioning signal: image tokens, text tokens, or image then text."""

    image: Optional[TokenSequence] = None
    text: Optional[TokenSequence] = None

    def __post_init__(self) -> None:
        if self.image is None and self.text is None:
            raise ValueError("a condition needs at least one modality")
        if self.image is not None:
            if self.image.modality is not Modality.IMAGE:
                raise ValueError("condition.image must be an image sequence")
            if np.any(self.image.ids == self.image.mask_id):
                raise ValueError("condition tokens must not contain mask ids")
        if self.text is not None:
            if self.text.modality is not Modality.TEXT:
                raise ValueError("condition.text must be a text sequence")
            if np.any(self.text.ids == self.text.mask_id):
                raise ValueError("condition tokens must not contain mask ids")


def count_params(config: BackboneConfig) -> int:
    """Closed-form parameter count; must equal the sum of tensor sizes."""
    d = config.dim
    embeds = d * (
        config.text_vocab
        + config.image_vocab
        + config.text_len
        + config.image_len
        + 3
        + config.time_bins
    )
    m = config.mlp_ratio
    per_layer = (3 * d * d + 3 * d) + (d * d + d) + (m * d * d + m * d) + (m * d * d + d) + 4 * d
    heads = (d + 1) * (config.text_vocab + config.image_vocab)
    return embeds + config.layers * per_layer + 2 * d + heads


class _Block(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        d = config.dim
        self.heads = config.heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, config.mlp_ratio * d)
        self.fc2 = nn.Linear(config.mlp_ratio * d, d)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """key_mask [B, L] boolean: False rows never serve as attention keys.
        Every position still attends somewhere because targets stay True."""
        dt = x.dtype
        B, L, d = x.shape
        h = self.heads
        hd = d // h
        y = F.layer_norm(x, (d,), self.ln1.weight.to(dt), self.ln1.bias.to(dt))
        qkv = F.linear(y, self.qkv.weight.to(dt), self.qkv.bias.to(dt))
        q, k, v = qkv.reshape(B, L, 3, h, hd).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / (hd ** 0.5)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + F.linear(y, self.proj.weight.to(dt), self.proj.bias.to(dt))
        y = F.layer_norm(x, (d,), self.ln2.weight.to(dt), self.ln2.bias.to(dt))
        y = F.gelu(F.linear(y, self.fc1.weight.to(dt), self.fc1.bias.to(dt)))
        return x + F.linear(y, self.fc2.weight.to(dt), self.fc2.bias.to(dt))


class Backbone(nn.Module):
    """The shared denoiser.  Construct with a numpy Generator to seed init."""

    def __init__(self, config: BackboneConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        d = config.dim
        self.text_embed = nn.Embedding(config.text_vocab, d)
        self.image_embed = nn.Embedding(config.image_vocab, d)
        self.text_pos = nn.Embedding(config.text_len, d)
        self.image_pos = nn.Embedding(config.image_len, d)
        self.role_embed = nn.Embedding(3, d)
        self.time_embed = nn.Embedding(config.time_bins, d)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.layers))
        self.final_ln = nn.LayerNorm(d)
        self.text_head = nn.Linear(d, config.text_vocab)
        self.image_head = nn.Linear(d, config.image_vocab)
        if rng is not None:
            self.seeded_init(rng)

    def seeded_init(self, rng: np.random.Generator) -> None:
        """Deterministic init: hidden weights N(0, 1/sqrt(dim)), biases zero,
        LayerNorm at identity.  Output heads use the smaller N(0, 1/dim) so
        initial logits are near-uniform."""
        d = self.config.dim
        std = 1.0 / (d ** 0.5)
        head_std = 1.0 / d
        with torch.no_grad():
            for name, p in self.named_parameters():
                parent = name.split(".")[-2]
                if name.endswith(".bias"):
                    p.zero_()
                elif parent in ("ln1", "ln2", "final_ln"):
                    p.fill_(1.0)
                else:
                    s = head_std if parent in ("text_head", "image_head") else std
                    vals = rng.normal(0.0, s, size=tuple(p.shape))
                    p.copy_(torch.from_numpy(vals.astype(np.float32)))

    # ------------------------------------------------------------ assembly

    def _stack_conditions(
        self, conditions: Sequence[Condition]
    ) -> tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        has_img = conditions[0].image is not None
        has_txt = conditions[0].text is not None
        for c in conditions:
            if (c.image is not None) != has_img or (c.text is not None) != has_txt:
                raise ValueError("all conditions in a batch must share one layout")
        img = txt = None
        if has_img:
            img = torch.from_numpy(np.stack([c.image.ids for c in conditions]))
            if img.shape[1] > self.config.image_len:
                raise ValueError("condition image longer than image_len")
        if has_txt:
            txt = torch.from_numpy(np.stack([c.text.ids for c in conditions]))
            if txt.shape[1] > self.config.text_len:
                raise ValueError("condition text longer than text_len")
        return img, txt

    def condition_embedding(
        self, conditions: Sequence[Condition], precision: str = "high"
    ) -> torch.Tensor:
        """Embedded condition block [B, Lc, dim], before any attention."""
        dt = _DTYPES[precision]
        img, txt = self._stack_conditions(conditions)
        parts = []
        if img is not None:
            pos = torch.arange(img.shape[1])
            x = (
                self.image_embed(img).to(dt)
                + self.image_pos(pos).to(dt)
                + self.role_embed.weight[ROLE_COND_IMAGE].to(dt)
            )
            parts.append(x)
        if txt is not None:
            pos = torch.arange(txt.shape[1])
            x = (
                self.text_embed(txt).to(dt)
                + self.text_pos(pos).to(dt)
                + self.role_embed.weight[ROLE_COND_TEXT].to(dt)
            )
            parts.append(x)
        return torch.cat(parts, dim=1)

    def condition_key_mask(self, conditions: Sequence[Condition]) -> torch.Tensor:
        """Boolean [B, Lc]; condition text pad slots are False.

        Pads carry no content, so they are excluded from attention keys;
        an all-pad text condition therefore contributes nothing, exactly
        like having no text condition at all."""
        img, txt = self._stack_conditions(conditions)
        parts = []
        if img is not None:
            parts.append(torch.ones(img.shape, dtype=torch.bool))
        if txt is not None:
            parts.append(txt != PAD_ID)
        return torch.cat(parts, dim=1)

    def forward(
        self,
        target_ids: np.ndarray,
        target_modality: Modality,
        alpha_t,
        conditions: Optional[Sequence[Condition]] = None,
        precision: str = "high",
        cond_embed: Optional[torch.Tensor] = None,
        cond_key_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Per-position logits over the target vocabulary, [B, L, V].

        target_ids is [B, L] (or [L], auto-promoted); alpha_t is the
        survival probability per batch row, scalar or [B].  conditions may
        be None for a purely unconditional pass.  cond_embed overrides the
        embedded condition block (tests use it to probe equivariance) and
        is treated as all-content unless cond_key_mask says otherwise.
        """
        if precision not in _DTYPES:
            raise ConfigError(f"unknown precision mode {precision!r}")
        dt = _DTYPES[precision]
        ids = np.asarray(target_ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        B, L = ids.shape
        cfg = self.config
        if target_modality is Modality.TEXT:
            if L > cfg.text_len:
                raise ValueError(f"text target length {L} exceeds {cfg.text_len}")
            if ids.max(initial=0) >= cfg.text_vocab:
                raise ValueError("text target id outside vocabulary")
            tok, pos_table, head = self.text_embed, self.text_pos, self.text_head
        else:
            if L > cfg.image_len:
                raise ValueError(f"image target length {L} exceeds {cfg.image_len}")
            if ids.max(initial=0) >= cfg.image_vocab:
                raise ValueError("image target id outside vocabulary")
            tok, pos_table, head = self.image_embed, self.image_pos, self.image_head

        alpha = np.broadcast_to(np.asarray(alpha_t, dtype=np.float64), (B,))
        if np.any(alpha < 0.0) or np.any(alpha > 1.0):
            raise ValueError("alpha_t must lie in [0, 1]")
        bins = np.minimum((alpha * cfg.time_bins).astype(np.int64), cfg.time_bins - 1)

        tgt = torch.from_numpy(ids.copy())
        pos = torch.arange(L)
        x = (
            tok(tgt).to(dt)
            + pos_table(pos).to(dt)
            + self.role_embed.weight[ROLE_TARGET].to(dt)
        )
        if cond_embed is None and conditions is not None:
            if len(conditions) not in (1, B):
                raise ValueError("conditions must have batch length or length one")
            cond_embed = self.condition_embedding(conditions, precision)
            cond_key_mask = self.condition_key_mask(conditions)
            if cond_embed.shape[0] == 1 and B > 1:
                cond_embed = cond_embed.expand(B, -1, -1)
        if cond_embed is not None:
            x = torch.cat([cond_embed.to(dt), x], dim=1)
        cond_len = x.shape[1] - L

        key_mask = None
        if cond_key_mask is not None and bool((~cond_key_mask).any()):
            if cond_key_mask.shape[0] == 1 and B > 1:
                cond_key_mask = cond_key_mask.expand(B, -1)
            key_mask = torch.cat(
                [cond_key_mask, torch.ones((B, L), dtype=torch.bool)], dim=1
            )

        t_emb = self.time_embed(torch.from_numpy(bins)).to(dt)
        x = x + t_emb[:, None, :]
        for block in self.blocks:
            x = block(x, key_mask)
        x = F.layer_norm(
            x, (cfg.dim,), self.final_ln.weight.to(dt), self.final_ln.bias.to(dt)
        )
        logits = F.linear(x[:, cond_len:], head.weight.to(dt), head.bias.to(dt))
        return logits[0] if squeeze else logits


# --------------------------------------------------------------- checkpoints

_MAGIC = b"UMCK"
_VERSION = 1


def save_checkpoint(
    model: Backbone,
    path,
    extra: Optional[dict] = None,
    extra_tensors: Optional[dict[str, np.ndarray]] = None,
) -> None:
    """Versioned header plus raw little-endian float32 tensor data.

    extra is free-form JSON (training state); extra_tensors lets the
    trainer persist optimizer moments next to the parameters.
    """
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        tensors.append((name, arr))
    for name, arr in (extra_tensors or {}).items():
        tensors.append((name, np.asarray(arr, dtype="<f4")))

    manifest = []
    offset = 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "config": asdict(model.config),
        "extra": extra or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple[Backbone, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    data = raw[12 + hlen :]
    config = BackboneConfig(**header["config"])
    model = Backbone(config)
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    state = {}
    model_keys = set(model.state_dict().keys())
    extra_tensors = {}
    for name, arr in arrays.items():
        if name in model_keys:
            state[name] = torch.from_numpy(arr)
        else:
            extra_tensors[name] = arr
    missing = model_keys - set(state)
    if missing:
        raise DataError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    return model, header["extra"], extra_tensors


# ------------------------------------------------------------- gradient gate


@dataclass
class GradCheckReport:
    n_checked: int
    max_rel_err: float
    worst: tuple[str, tuple, float] = field(default=("", (), 0.0))

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def gradient_check(
    model: Backbone,
    loss_fn,
    n_coords: int,
    rng: np.random.Generator,
    h: float = 1e-5,
) -> GradCheckReport:
    """Central-difference validation of autograd on a float64 clone.

    loss_fn(model) must return a scalar tensor built in high precision.
    Coordinates are sampled uniformly across all parameter tensors; both
    sides of each difference reuse the same clone with the coordinate
    restored afterwards, so the check is exact up to O(h^2) truncation.
    """
    import copy

    clone = copy.deepcopy(model).double()
    loss = loss_fn(clone)
    clone.zero_grad()
    loss.backward()

    params = [(n, p) for n, p in clone.named_parameters()]
    sizes = np.array([p.numel() for _, p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    report = GradCheckReport(n_checked=len(picks), max_rel_err=0.0)
    with torch.no_grad():
        for flat_idx in picks:
            ti = int(np.searchsorted(bounds, flat_idx, side="right"))
            local = int(flat_idx - (bounds[ti - 1] if ti else 0))
            name, p = params[ti]
            idx = np.unravel_index(local, p.shape)
            orig = p[idx].item()
            g = 0.0 if p.grad is None else p.grad[idx].item()
            p[idx] = orig + h
            lp = loss_fn(clone).item()
            p[idx] = orig - h
            lm = loss_fn(clone).item()
            p[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            # the 1e-5 floor turns the test absolute for coordinates whose
            # true gradient sits below the FD noise floor (~1e-11 here)
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-5)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (name, tuple(int(i) for i in idx), rel)
    return report
