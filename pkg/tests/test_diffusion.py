"""Diffusion-core unit tests: corruption, posterior, commit rule, loss."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from chain_oracle import enumerate_chain, make_context_stub, mc_chain, tv_distance
from unimask.diffusion import (
    CorruptionRecord,
    Modality,
    TokenSequence,
    commit_count,
    forward_corrupt,
    reverse_posterior,
    weighted_masked_ce,
)
from unimask.schedule import MaskSchedule


def seq_of(ids, vocab=6):
    return TokenSequence(np.array(ids), Modality.TEXT, vocab)


# ---------------------------------------------------------------- sequences


def test_token_sequence_validates_range_and_is_immutable() -> None:
    s = seq_of([0, 1, 5])
    assert s.mask_id == 5
    assert s.mask_positions().tolist() == [2]
    with pytest.raises(ValueError):
        s.ids[0] = 2
    with pytest.raises(ValueError):
        seq_of([0, 6])
    with pytest.raises(ValueError):
        seq_of([-1, 0])


# --------------------------------------------------------------- corruption


def test_corrupt_endpoints_are_deterministic() -> None:
    sched = MaskSchedule()
    rng = np.random.default_rng(1)
    clean = seq_of([0, 1, 2, 3, 4])
    rec0 = forward_corrupt(clean, 0.0, sched, rng)
    assert rec0.corrupted.ids.tolist() == clean.ids.tolist()
    assert rec0.mask_count == 0
    rec1 = forward_corrupt(clean, 1.0, sched, rng)
    assert rec1.corrupted.ids.tolist() == [5] * 5
    assert rec1.mask_count == 5
    assert rec1.mask_pattern.all()


def test_corrupt_rejects_sequences_that_already_contain_masks() -> None:
    sched = MaskSchedule()
    with pytest.raises(ValueError):
        forward_corrupt(seq_of([0, 5]), 0.5, sched, np.random.default_rng(0))


def test_corrupt_mask_count_is_binomial() -> None:
    sched = MaskSchedule()
    rng = np.random.default_rng(7)
    L, t, n = 64, 0.37, 20_000
    clean = seq_of(list(range(5)) * 12 + [0, 1, 2, 3], vocab=6)
    assert len(clean) == L
    g = sched.gamma(t)
    counts = np.array(
        [forward_corrupt(clean, t, sched, rng).mask_count for _ in range(n)]
    )
    mean, var = L * g, L * g * (1 - g)
    assert abs(counts.mean() - mean) < 3.0 * math.sqrt(var / n)
    # sample variance of a binomial concentrates too; generous 10% band
    assert abs(counts.var() - var) / var < 0.1


def test_corrupt_two_step_composition_matches_single_shot() -> None:
    # masking at t1 then masking survivors with keep ratio alpha(t2)/alpha(t1)
    # must equal single-shot masking at t2; compare mask-pattern laws by TV.
    sched = MaskSchedule()
    rng = np.random.default_rng(42)
    L, t1, t2, n = 4, 0.3, 0.7, 100_000
    a1, a2 = sched.alpha(t1), sched.alpha(t2)
    clean = seq_of([0, 1, 2, 3])

    def key(pattern):
        return tuple(bool(b) for b in pattern)

    single: dict = {}
    composed: dict = {}
    for _ in range(n):
        pat = forward_corrupt(clean, t2, sched, rng).mask_pattern
        single[key(pat)] = single.get(key(pat), 0.0) + 1.0 / n
    for _ in range(n):
        pat1 = forward_corrupt(clean, t1, sched, rng).mask_pattern
        keep2 = rng.random(L) < a2 / a1
        pat = pat1 | ~keep2
        composed[key(pat)] = composed.get(key(pat), 0.0) + 1.0 / n
    assert tv_distance(single, composed) < 0.02


def test_corrupt_seeded_replay_is_identical() -> None:
    sched = MaskSchedule()
    clean = seq_of(list(range(5)), vocab=6)
    a = forward_corrupt(clean, 0.6, sched, np.random.default_rng(3))
    b = forward_corrupt(clean, 0.6, sched, np.random.default_rng(3))
    assert a.corrupted.ids.tolist() == b.corrupted.ids.tolist()


# ---------------------------------------------------------------- posterior


def test_posterior_hand_value_masked_position() -> None:
    # alpha_s = 0.5, alpha_t = 0.25, prediction concentrated on token 3:
    # P(token 3) = (0.5 - 0.25) / 0.75 = 1/3, P(mask) = 0.5 / 0.75 = 2/3.
    predicted = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
    post = reverse_posterior(4, 0.5, 0.25, predicted)
    assert post[3] == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert post[4] == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert post[:3].sum() == 0.0


def test_posterior_carry_over_is_point_mass() -> None:
    predicted = np.full(5, 0.2)
    post = reverse_posterior(2, 0.5, 0.25, predicted)
    assert post.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_posterior_terminal_step_leaves_no_mask_mass() -> None:
    predicted = np.array([0.4, 0.3, 0.2, 0.1, 0.0])
    post = reverse_posterior(4, 1.0, 0.25, predicted)
    assert post[4] == 0.0
    assert np.allclose(post, predicted, atol=1e-12)


def test_posterior_rows_normalize_for_random_inputs() -> None:
    rng = np.random.default_rng(11)
    for _ in range(200):
        V = rng.integers(2, 9)
        p = rng.random(V)
        p /= p.sum()
        a_t = rng.uniform(0.0, 0.98)
        a_s = rng.uniform(a_t + 1e-6, 1.0)
        cur = rng.integers(0, V)
        post = reverse_posterior(int(cur), a_s, a_t, p)
        assert abs(post.sum() - 1.0) < 1e-6
        assert np.all(post >= 0.0)


def test_posterior_vector_form_matches_scalar_form() -> None:
    rng = np.random.default_rng(13)
    V, L = 5, 7
    probs = rng.random((L, V))
    probs /= probs.sum(axis=1, keepdims=True)
    ids = np.array([4, 0, 4, 2, 4, 1, 3])
    batch = reverse_posterior(ids, 0.7, 0.3, probs)
    for i in range(L):
        single = reverse_posterior(int(ids[i]), 0.7, 0.3, probs[i])
        assert np.allclose(batch[i], single, atol=1e-15)


def test_posterior_input_validation() -> None:
    good = np.array([0.5, 0.5, 0.0])
    with pytest.raises(ValueError):
        reverse_posterior(2, 0.25, 0.5, good)  # alpha_s <= alpha_t
    with pytest.raises(ValueError):
        reverse_posterior(2, 0.5, 0.5, good)
    with pytest.raises(ValueError):
        reverse_posterior(2, 0.5, 0.25, np.array([0.6, 0.6, 0.0]))  # not normalized
    with pytest.raises(ValueError):
        reverse_posterior(2, 0.5, 0.25, np.array([1.5, -0.5, 0.0]))  # negative
    with pytest.raises(ValueError):
        reverse_posterior(5, 0.5, 0.25, good)  # id outside vocab


# -------------------------------------------------------------- commit rule


def test_commit_count_worked_example() -> None:
    sched = MaskSchedule()
    counts = [commit_count(sched, k, 4, 16) for k in range(4)]
    assert counts == [1, 4, 5, 6]
    assert sum(counts) == 16


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 64), total=st.integers(0, 500))
def test_commit_count_telescopes_exactly(T: int, total: int) -> None:
    sched = MaskSchedule()
    counts = [commit_count(sched, k, T, total) for k in range(T)]
    assert all(c >= 0 for c in counts)
    assert sum(counts) == total


def test_commit_count_final_step_commits_everything() -> None:
    sched = MaskSchedule()
    for T in (1, 2, 5, 16):
        for total in (0, 1, 7, 77):
            counts = [commit_count(sched, k, T, total) for k in range(T)]
            assert sum(counts[:-1]) + counts[-1] == total
    assert commit_count(sched, 0, 1, 9) == 9


def test_commit_count_validates_arguments() -> None:
    sched = MaskSchedule()
    with pytest.raises(ValueError):
        commit_count(sched, 4, 4, 16)
    with pytest.raises(ValueError):
        commit_count(sched, -1, 4, 16)
    with pytest.raises(ValueError):
        commit_count(sched, 0, 0, 16)
    with pytest.raises(ValueError):
        commit_count(sched, 0, 4, -1)


# -------------------------------------------------------------------- loss


def test_weighted_ce_hand_value_uniform_two_way() -> None:
    logits = torch.zeros((1, 2), dtype=torch.float64)
    loss, empty = weighted_masked_ce(logits, np.array([0]), np.array([0]), 2.0)
    assert not empty
    assert loss.item() == pytest.approx(2.0 * math.log(2.0), abs=1e-12)


def test_weighted_ce_sums_per_masked_token() -> None:
    # two uniform masked positions contribute ln(V) each, not ln(V) total
    logits = torch.zeros((3, 4), dtype=torch.float64)
    loss, _ = weighted_masked_ce(logits, np.array([0, 1, 2]), np.array([0, 2]), 0.5)
    assert loss.item() == pytest.approx(0.5 * 2.0 * math.log(4.0), abs=1e-12)


def test_weighted_ce_matches_independent_numpy_oracle() -> None:
    rng = np.random.default_rng(23)
    L, V = 9, 7
    logits_np = rng.normal(0.0, 2.0, size=(L, V))
    targets = rng.integers(0, V - 1, size=L)
    positions = np.array([0, 3, 4, 8])
    w = 0.7
    # independent oracle: stable log-softmax by hand
    z = logits_np - logits_np.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = w * np.sum([-logp[i, targets[i]] for i in positions])
    loss, empty = weighted_masked_ce(
        torch.tensor(logits_np, dtype=torch.float64), targets, positions, w
    )
    assert not empty
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_weighted_ce_empty_mask_returns_zero_with_flag() -> None:
    logits = torch.zeros((3, 4), dtype=torch.float64)
    loss, empty = weighted_masked_ce(logits, np.array([0, 1, 2]), np.array([], dtype=np.int64), 1.0)
    assert empty
    assert loss.item() == 0.0


def test_weighted_ce_rejects_bad_positions_and_mask_targets() -> None:
    logits = torch.zeros((3, 4), dtype=torch.float64)
    with pytest.raises(ValueError):
        weighted_masked_ce(logits, np.array([0, 1, 2]), np.array([3]), 1.0)
    with pytest.raises(ValueError):
        weighted_masked_ce(logits, np.array([0, 3, 2]), np.array([1]), 1.0)  # target is mask


def test_weighted_ce_is_differentiable() -> None:
    logits = torch.zeros((2, 3), dtype=torch.float64, requires_grad=True)
    loss, _ = weighted_masked_ce(logits, np.array([0, 1]), np.array([0, 1]), 1.5)
    loss.backward()
    assert logits.grad is not None
    assert torch.any(logits.grad != 0)


# ---------------------------------------------------- chain self-consistency


def test_reverse_chain_enumeration_matches_monte_carlo() -> None:
    # exhaustive expansion of the posterior-mode chain vs a vectorized MC of
    # the same chain; tiny world: 3 data tokens + mask, length 3, T = 3.
    vocab, L, T = 4, 3, 3
    sched = MaskSchedule()
    predict = make_context_stub(L, vocab, seed=5)
    template = np.full(L, vocab - 1, dtype=np.int64)
    exact = enumerate_chain(predict, template, vocab, sched, T)
    assert abs(sum(exact.values()) - 1.0) < 1e-9
    # every enumerated final sequence is mask-free
    assert all(vocab - 1 not in k for k in exact)
    mc = mc_chain(predict, template, vocab, sched, T, 100_000, np.random.default_rng(99))
    assert tv_distance(exact, mc) < 0.02


def test_reverse_chain_respects_frozen_context() -> None:
    vocab, L, T = 4, 3, 2
    sched = MaskSchedule()
    predict = make_context_stub(L, vocab, seed=6)
    template = np.array([1, vocab - 1, 0], dtype=np.int64)
    exact = enumerate_chain(predict, template, vocab, sched, T)
    for final in exact:
        assert final[0] == 1 and final[2] == 0
