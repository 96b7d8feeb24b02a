from __future__ import annotations

import itertools

import numpy as np
import pytest

from latentlang.langspec import GeneratorConfig, LanguageSpec, build_spec


@pytest.fixture(scope="session")
def spec0() -> LanguageSpec:
    return build_spec(noise_level=0.0)


@pytest.fixture(scope="session")
def spec05() -> LanguageSpec:
    return build_spec(noise_level=0.05)


@pytest.fixture(scope="session")
def tiny_spec() -> LanguageSpec:
    """Two intentions, four letters, two-letter messages: small enough to enumerate."""
    return build_spec(GeneratorConfig(num_intentions=2, alphabet_size=4, letters_per_intention=2,
                                      message_length=2, noise_level=0.3, seed=7))


def brute_prefix_prob(
    spec: LanguageSpec, prefix, across: str = "chain", theta_last: int | None = None, fix: tuple[int, int] | None = None
) -> float:
    """Probability that a stream starts with ``prefix``, by summing over every intention path.

    With ``theta_last`` the intention of the message holding the last symbol is
    fixed (only the joint with that intention is returned, unnormalised);
    ``fix = (j, theta)`` does the same for message j.
    Messages are fixed length; the prefix may end mid-message.
    """
    L, V = spec.message_length, spec.alphabet_size
    prefix = list(prefix)
    msgs = [prefix[i : i + L + 1] for i in range(0, len(prefix), L + 1)] or [[]]
    K = spec.num_intentions
    total = 0.0
    for path in itertools.product(range(K), repeat=len(msgs)):
        if across == "clamped" and len(set(path)) > 1:
            continue
        if theta_last is not None and path[-1] != theta_last:
            continue
        if fix is not None and path[fix[0]] != fix[1]:
            continue
        pr = spec.stationary[path[0]]
        if across == "chain":
            for a, b in zip(path, path[1:]):
                pr *= spec.prior_transition[a, b]
        for th, msg in zip(path, msgs):
            for t, s in enumerate(msg):
                if t == L:
                    pr *= float(s == V)
                elif s == V:
                    pr = 0.0
                elif t == 0:
                    pr *= spec.emission_initial[th, s]
                else:
                    pr *= spec.emission_transition[th, msg[t - 1], s]
        total += pr
    return total


def brute_next(spec: LanguageSpec, history, across: str = "chain") -> np.ndarray:
    base = brute_prefix_prob(spec, history, across)
    return np.array([brute_prefix_prob(spec, list(history) + [s], across) for s in range(spec.num_symbols)]) / base
