from __future__ import annotations

import itertools

import numpy as np
import pytest

from latentlang.errors import DegenerateEvidence, InvalidPrefix, MalformedMessage
from latentlang.langspec import GeneratorConfig, Message, Mode, build_spec, sample_corpus, sample_message
from latentlang.oracle import (
    CHAIN,
    CLAMPED,
    ambiguity,
    calibrate_noise,
    corpus_epsilons,
    entropy_rate,
    intention_hop,
    message_loglik,
    next_symbol_conditioned,
    next_symbol_marginal,
    posterior_single,
    posterior_tied,
    sequence_logmarginal,
    stream_log_loss,
    stream_predictive,
)
from latentlang.rng import SplitMix64

from conftest import brute_next, brute_prefix_prob


def _product(spec, x, theta):
    p = spec.emission_initial[theta, x[0]]
    for a, b in zip(x[:-2], x[1:-1]):
        p *= spec.emission_transition[theta, a, b]
    return p


def test_message_loglik_matches_product(spec05):
    rng = SplitMix64(0)
    for _ in range(20):
        x = sample_message(spec05, rng.next_u64() % 6, rng).symbols
        for theta in range(6):
            assert message_loglik(spec05, x, theta) == pytest.approx(np.log(_product(spec05, x, theta)), abs=1e-12)


def test_message_loglik_zero_support(spec0):
    x = sample_message(spec0, 0, SplitMix64(1)).symbols
    assert message_loglik(spec0, x, 1) == -np.inf
    assert np.isfinite(message_loglik(spec0, x, 0))


def test_single_letter_message():
    spec = build_spec(message_length=1, noise_level=0.1)
    assert message_loglik(spec, (0, 18), 0) == pytest.approx(np.log(spec.emission_initial[0, 0]))


@pytest.mark.parametrize("x", [(0, 1), (0, 18, 1, 18), (), (19,), (0,) * 20 + (18,) + (0,)])
def test_malformed(spec0, x):
    with pytest.raises(MalformedMessage):
        message_loglik(spec0, x, 0)


def test_posterior_sparse(spec0):
    rng = SplitMix64(2)
    for theta in range(6):
        m = sample_message(spec0, theta, rng)
        post = posterior_single(spec0, m)
        assert post.probs[theta] == 1.0 and post.probs.sum() == 1.0
        rep = ambiguity(spec0, m)
        assert rep.epsilon == 0.0 and rep.argmax_intention == theta and rep.matches_generating


def test_posterior_degenerate(spec0):
    with pytest.raises(DegenerateEvidence):
        posterior_single(spec0, (0, 3) + (0,) * 18 + (18,))


def test_posterior_symmetric_tie():
    # two intentions with two letters each; swap symmetry built by hand
    spec = build_spec(GeneratorConfig(num_intentions=2, alphabet_size=4, letters_per_intention=2,
                                      message_length=2, noise_level=0.5, seed=7))
    init = np.full((2, 4), 0.25)
    trans = np.full((2, 4, 4), 0.25)
    sym = type(spec)(2, 4, 2, 2, spec.prior_transition, spec.prior_initial, init, trans, 0.5, 7)
    post = posterior_single(sym, (0, 3, 4))
    np.testing.assert_allclose(post.probs, [0.5, 0.5], atol=1e-15)
    rep = ambiguity(sym, (0, 3, 4))
    assert rep.argmax_intention == 0 and rep.epsilon == pytest.approx(0.5)


def test_posterior_brute_force(spec05):
    c = sample_corpus(spec05, 200, Mode.CHAIN, SplitMix64(3))
    eps, top = corpus_epsilons(spec05, c)
    for i, m in enumerate(c.messages):
        joint = np.array([spec05.stationary[t] * _product(spec05, m.symbols, t) for t in range(6)])
        post = joint / joint.sum()
        assert np.abs(posterior_single(spec05, m).probs - post).max() < 1e-12
        assert eps[i] == pytest.approx(1 - post.max(), abs=1e-12)
        assert top[i] == np.argmax(post)


def test_dominance_ratio(spec05):
    c = sample_corpus(spec05, 1000, Mode.CHAIN, SplitMix64(4))
    assert all(ambiguity(spec05, m).dominance_holds for m in c.messages)


def test_posterior_tied(spec0, spec05):
    rng = SplitMix64(5)
    a, b = sample_message(spec0, 0, rng), sample_message(spec0, 0, rng)
    assert posterior_tied(spec0, [a, b]).probs[0] == 1.0
    c = sample_corpus(spec05, 400, Mode.CLAMPED, SplitMix64(6), intention=3)
    for x1, x2 in zip(c.messages[::2], c.messages[1::2]):
        single = posterior_single(spec05, x1).probs
        np.testing.assert_allclose(posterior_tied(spec05, [x1]).probs, single, atol=1e-15)
        e1 = posterior_single(spec05, x1).residual(3)
        e2 = posterior_single(spec05, x2).residual(3)
        assert posterior_tied(spec05, [x1, x2]).residual(3) <= e1 * e2 + 1e-12


def test_sequence_logmarginal(spec05, tiny_spec):
    rng = SplitMix64(7)
    x = sample_message(spec05, 2, rng)
    assert sequence_logmarginal(spec05, [x]) == pytest.approx(posterior_single(spec05, x).log_evidence, abs=1e-12)
    xs = [sample_message(spec05, t, rng) for t in (2, 3)]
    brute = np.log(sum(
        spec05.stationary[a] * spec05.prior_transition[a, b]
        * np.exp(message_loglik(spec05, xs[0], a) + message_loglik(spec05, xs[1], b))
        for a, b in itertools.product(range(6), repeat=2)
    ))
    assert sequence_logmarginal(spec05, xs) == pytest.approx(brute, abs=1e-10)
    stream = [0, 3, 4, 2, 1, 4, 3, 3, 4]
    for across in (CHAIN, CLAMPED):
        msgs = [stream[i:i + 3] for i in range(0, 9, 3)]
        assert np.exp(sequence_logmarginal(tiny_spec, msgs, across)) == pytest.approx(
            brute_prefix_prob(tiny_spec, stream, across), rel=1e-12)


def test_sequence_support(spec0):
    rng = SplitMix64(8)
    xs = [sample_message(spec0, t, rng) for t in (0, 1, 1, 2)]
    assert np.isfinite(sequence_logmarginal(spec0, xs))
    assert sequence_logmarginal(spec0, [xs[0], xs[3]]) == -np.inf


@pytest.mark.parametrize("across", [CHAIN, CLAMPED])
def test_next_symbol_brute(tiny_spec, across):
    for hist in ([], [0], [0, 3], [0, 3, 4], [1, 2, 4, 3], [2, 2, 4, 0, 1, 4]):
        np.testing.assert_allclose(next_symbol_marginal(tiny_spec, hist, across),
                                   brute_next(tiny_spec, hist, across), atol=1e-12)


def test_next_symbol_examples(spec0):
    np.testing.assert_allclose(next_symbol_marginal(spec0, []),
                               np.append(spec0.emission_initial.mean(0), 0.0), atol=1e-15)
    out = next_symbol_marginal(spec0, [0, 1])
    np.testing.assert_array_equal(out[:18], spec0.emission_transition[0, 1])
    full = sample_message(spec0, 4, SplitMix64(9)).symbols[:-1]
    assert next_symbol_marginal(spec0, full)[18] == 1.0
    with pytest.raises(InvalidPrefix):
        next_symbol_marginal(spec0, [0, 3])


def test_next_symbol_conditioned(spec0):
    m = sample_message(spec0, 0, SplitMix64(10)).symbols
    for cut in (1, 5, 20):
        np.testing.assert_array_equal(next_symbol_conditioned(spec0, m[:cut], 0),
                                      next_symbol_marginal(spec0, m[:cut]))
    clamped = next_symbol_conditioned(spec0, m, 0, CLAMPED)
    np.testing.assert_allclose(clamped[:18], spec0.emission_initial[0])
    chained = next_symbol_conditioned(spec0, m, 0, CHAIN)
    np.testing.assert_allclose(chained[:18], 0.5 * spec0.emission_initial[0] + 0.5 * spec0.emission_initial[1])


def test_chain_rule(spec05):
    c = sample_corpus(spec05, 3, Mode.CHAIN, SplitMix64(11))
    stream = c.stream.tolist()
    total = sum(np.log(next_symbol_marginal(spec05, stream[:t])[stream[t]]) for t in range(len(stream)))
    assert np.exp(total) == pytest.approx(np.exp(sequence_logmarginal(spec05, c)), rel=1e-9)
    assert total == pytest.approx(-stream_log_loss(spec05, c.stream).sum(), abs=1e-9)


@pytest.mark.parametrize("across", [CHAIN, CLAMPED])
def test_stream_predictive_matches_scalar(spec05, across):
    c = sample_corpus(spec05, 3, Mode.CHAIN, SplitMix64(12))
    pred = stream_predictive(spec05, c.stream, across)
    for t in (0, 1, 19, 20, 21, 40, 62):
        np.testing.assert_allclose(pred[t], next_symbol_marginal(spec05, c.stream[:t], across), atol=1e-12)
        assert abs(pred[t].sum() - 1) < 1e-9


def test_entropy_rate_zero_noise(spec0):
    c = sample_corpus(spec0, 50, Mode.CHAIN, SplitMix64(13))
    assert 0 < entropy_rate(spec0, c.stream) < np.log(3)


def test_intention_hop(spec0):
    np.testing.assert_array_equal(intention_hop(spec0, 1), spec0.prior_transition)
    assert intention_hop(spec0, 4)[0, 4] == pytest.approx(0.0625, abs=1e-15)
    for m in (1, 3, 7, 20):
        np.testing.assert_allclose(intention_hop(spec0, m).sum(1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        intention_hop(spec0, 0)


def test_calibrate_monotone():
    cfg = GeneratorConfig()
    lo = calibrate_noise(0.02, cfg, num_messages=300)
    hi = calibrate_noise(0.08, cfg, num_messages=300)
    assert 0 < lo < hi < 1
    assert calibrate_noise(0.0, cfg) == 0.0


def test_generating_epsilon_flag(spec05):
    x = Message(sample_message(spec05, 1, SplitMix64(14)).symbols, 1)
    rep = ambiguity(spec05, x)
    assert rep.matches_generating == (rep.argmax_intention == 1)
    assert rep.epsilon_generating >= rep.epsilon - 1e-15
