"""Exhaustive reverse-chain oracle shared by the diffusion and sampler tests.

Enumerates every trajectory of the posterior-mode reverse chain for tiny
vocabularies and lengths, aggregating exact probabilities per final
sequence.  A vectorized Monte Carlo runner of the same chain and a total
variation helper sit next to it so tests can compare the two.
"""

from __future__ import annotations

import itertools
from collections import defaultdict

import numpy as np

from unimask.diffusion import reverse_posterior
from unimask.schedule import MaskSchedule


def make_context_stub(length: int, vocab: int, seed: int = 5):
    """A deterministic stand-in predictor with mild context dependence.

    Returns predict(ids, t) -> probabilities of shape ids.shape + (vocab,).
    The distribution shifts with the number of committed 0-tokens so the
    chain is genuinely history-dependent, and the mask column carries no
    mass (the predictor proposes clean tokens only).
    """
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 1.0, size=(length, vocab))
    shift = rng.normal(0.0, 1.0, size=(vocab,))
    mask_id = vocab - 1

    def predict(ids: np.ndarray, t: float) -> np.ndarray:
        ids = np.asarray(ids)
        n_zero = (ids == 0).sum(axis=-1)
        logits = base * (0.5 + t) + 0.3 * np.asarray(n_zero)[..., None, None] * shift
        logits = logits.reshape(ids.shape + (vocab,))
        logits[..., mask_id] = -np.inf
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        z[..., mask_id] = 0.0
        return z / z.sum(axis=-1, keepdims=True)

    return predict


def enumerate_chain(
    predict,
    template_ids: np.ndarray,
    vocab: int,
    schedule: MaskSchedule,
    T: int,
) -> dict[tuple[int, ...], float]:
    """Exact distribution over final sequences of the posterior-mode chain."""
    mask_id = vocab - 1
    grid = schedule.step_grid(T)
    states: dict[tuple[int, ...], float] = {tuple(int(x) for x in template_ids): 1.0}
    for k, t in enumerate(grid):
        s = (T - k - 1) / T
        a_s, a_t = schedule.alpha(s), schedule.alpha(float(t))
        nxt: dict[tuple[int, ...], float] = defaultdict(float)
        for ids, p in states.items():
            arr = np.array(ids, dtype=np.int64)
            masked = [i for i, x in enumerate(ids) if x == mask_id]
            if not masked:
                nxt[ids] += p
                continue
            post = reverse_posterior(arr, a_s, a_t, predict(arr, float(t)))
            supports = []
            for i in masked:
                nz = np.nonzero(post[i] > 0.0)[0]
                supports.append([(int(v), float(post[i, v])) for v in nz])
            for combo in itertools.product(*supports):
                nids = list(ids)
                q = p
                for i, (v, pv) in zip(masked, combo):
                    nids[i] = v
                    q *= pv
                nxt[tuple(nids)] += q
        states = dict(nxt)
    return states


def mc_chain(
    predict,
    template_ids: np.ndarray,
    vocab: int,
    schedule: MaskSchedule,
    T: int,
    n: int,
    rng: np.random.Generator,
) -> dict[tuple[int, ...], float]:
    """Monte Carlo distribution of the same chain, vectorized over n runs."""
    mask_id = vocab - 1
    length = len(template_ids)
    ids = np.tile(np.asarray(template_ids, dtype=np.int64), (n, 1))
    grid = schedule.step_grid(T)
    for k, t in enumerate(grid):
        s = (T - k - 1) / T
        a_s, a_t = schedule.alpha(s), schedule.alpha(float(t))
        probs = predict(ids, float(t)).reshape(n * length, vocab)
        post = reverse_posterior(ids.reshape(-1), a_s, a_t, probs)
        cdf = np.cumsum(post, axis=-1)
        u = rng.random((n * length, 1))
        draw = (u > cdf).sum(axis=-1)
        draw = np.minimum(draw, vocab - 1).reshape(n, length)
        ids = np.where(ids == mask_id, draw, ids)
    out: dict[tuple[int, ...], float] = defaultdict(float)
    unique, counts = np.unique(ids, axis=0, return_counts=True)
    for row, c in zip(unique, counts):
        out[tuple(int(x) for x in row)] = c / n
    return dict(out)


def tv_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
