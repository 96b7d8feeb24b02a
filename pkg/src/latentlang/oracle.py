"""Exact inference over a :class:`LanguageSpec`.

Everything here is exact: the latent space is small, so posteriors, marginals
and next-symbol distributions are computed by enumeration over intentions and
forward filtering over messages, in log space.

Two ways to cross a message boundary appear throughout:

``chain``
    the next message's intention follows ``prior_transition`` (how corpora are
    generated);
``clamped``
    all messages share one intention (the tied setting used for composing
    messages and for in-context prompts).

Posteriors use the stationary law of the intention chain as prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateEvidence, InvalidPrefix, MalformedMessage
from .langspec import Corpus, GeneratorConfig, LanguageSpec, Message, Mode, build_spec, sample_corpus
from .rng import SplitMix64

CHAIN = "chain"
CLAMPED = "clamped"


def _across(across: str | Mode) -> str:
    value = across.value if isinstance(across, Mode) else str(across)
    if value not in (CHAIN, CLAMPED):
        raise ValueError(f"across must be 'chain' or 'clamped', got {across!r}")
    return value


def _symbols(x: Message | Sequence[int] | np.ndarray) -> np.ndarray:
    if isinstance(x, Message):
        x = x.symbols
    return np.asarray(x, dtype=np.int64).reshape(-1)


# -- per-symbol emission table --------------------------------------------------


@dataclass
class _Emissions:
    logq: np.ndarray  # (N, K) log prob of each symbol under each intention
    position: np.ndarray  # letters emitted in the current message before symbol j
    prev: np.ndarray  # previous symbol in the message (-1 at message start)
    message: np.ndarray  # message index of symbol j
    starts: np.ndarray  # start offset of every (possibly partial) message


def _emissions(spec: LanguageSpec, stream: np.ndarray) -> _Emissions:
    """Log emission of every symbol of a concatenated stream, per intention.

    Raises :class:`InvalidPrefix` if a newline or letter sits where the
    message format forbids it.
    """
    V, L, K = spec.alphabet_size, spec.message_length, spec.num_intentions
    stream = np.asarray(stream, dtype=np.int64)
    N = len(stream)
    if N and (stream.min() < 0 or stream.max() > V):
        raise InvalidPrefix(f"symbols must lie in [0, {V}]")
    is_nl = stream == V
    message = np.zeros(N, dtype=np.int64)
    if N > 1:
        message[1:] = np.cumsum(is_nl[:-1])
    starts = np.concatenate([[0], np.flatnonzero(is_nl) + 1])
    if len(starts) and starts[-1] == N and N > 0:
        starts = starts[:-1]
    position = np.arange(N) - starts[message]
    prev = np.full(N, -1, dtype=np.int64)
    inner = position > 0
    prev[inner] = stream[np.flatnonzero(inner) - 1]

    logq = np.zeros((N, K))
    letter = ~is_nl
    first = letter & (position == 0)
    later = letter & inner
    logq[first] = spec.log_emission_initial[:, stream[first]].T
    logq[later] = spec.log_emission_transition[:, prev[later], stream[later]].T
    if spec.fixed_length:
        if (letter & (position >= L)).any():
            j = int(np.flatnonzero(letter & (position >= L))[0])
            raise InvalidPrefix(f"letter at offset {j} exceeds message length {L}")
        if (is_nl & (position != L)).any():
            j = int(np.flatnonzero(is_nl & (position != L))[0])
            raise InvalidPrefix(f"newline at offset {j} after {position[j]} letters, expected {L}")
    else:
        if (is_nl & (position == 0)).any():
            j = int(np.flatnonzero(is_nl & (position == 0))[0])
            raise InvalidPrefix(f"empty message at offset {j}")
        logq[later] += np.log1p(-spec.end_prob)
        logq[is_nl] = np.log(spec.end_prob)
    return _Emissions(logq, position, prev, message, starts)


# -- likelihoods and posteriors --------------------------------------------------


def _check_message(spec: LanguageSpec, x, partial: bool = False) -> np.ndarray:
    syms = _symbols(x)
    V, L = spec.newline, spec.message_length
    if len(syms) == 0:
        raise MalformedMessage("empty message")
    if (syms < 0).any() or (syms > V).any():
        raise MalformedMessage(f"symbols must lie in [0, {V}]")
    body_nl = np.flatnonzero(syms[:-1] == V)
    if len(body_nl):
        raise MalformedMessage(f"newline inside message at offset {int(body_nl[0])}")
    terminated = syms[-1] == V
    if partial:
        if terminated:
            raise MalformedMessage("partial message must not carry a terminator")
        if spec.fixed_length and len(syms) > L:
            raise MalformedMessage(f"partial message longer than {L} letters")
        return syms
    if not terminated:
        raise MalformedMessage("message must end with the newline terminator")
    if spec.fixed_length and len(syms) != L + 1:
        raise MalformedMessage(f"message has {len(syms) - 1} letters, expected {L}")
    if len(syms) < 2:
        raise MalformedMessage("message has no letters")
    return syms


def loglik_vector(spec: LanguageSpec, x, partial: bool = False) -> np.ndarray:
    """``log q(x | theta)`` for every intention (K-vector).

    With ``partial=True`` ``x`` is an unterminated prefix of a message and the
    result is the probability of that prefix.
    """
    syms = _check_message(spec, x, partial)
    return _emissions(spec, syms).logq.sum(axis=0)


def message_loglik(spec: LanguageSpec, x, theta: int) -> float:
    if not 0 <= theta < spec.num_intentions:
        raise ValueError(f"intention {theta} out of range")
    return float(loglik_vector(spec, x)[theta])


def corpus_loglik(spec: LanguageSpec, corpus: Corpus) -> np.ndarray:
    """(num_messages, K) matrix of ``log q(x_i | theta)``."""
    if corpus.num_symbols == 0:
        return np.zeros((0, spec.num_intentions))
    em = _emissions(spec, corpus.stream)
    return np.add.reduceat(em.logq, corpus.offsets[:-1], axis=0)


@dataclass(frozen=True)
class PosteriorVector:
    probs: np.ndarray
    log_evidence: float
    log_joint: np.ndarray  # log q(theta, observations)

    def residual(self, theta: int) -> float:
        """Posterior mass off ``theta``, computed without cancellation."""
        others = np.delete(self.log_joint, theta)
        if len(others) == 0:
            return 0.0
        return float(np.exp(logsumexp(others) - self.log_evidence))

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.log_joint))  # first maximum = lowest index


def posterior_from_loglik(spec: LanguageSpec, loglik: np.ndarray, log_prior: np.ndarray | None = None) -> PosteriorVector:
    log_prior = spec.log_stationary if log_prior is None else log_prior
    log_joint = log_prior + np.asarray(loglik, dtype=float)
    log_ev = float(logsumexp(log_joint))
    if not np.isfinite(log_ev):
        raise DegenerateEvidence("observations have zero probability under every intention")
    probs = np.exp(log_joint - log_ev)
    return PosteriorVector(probs, log_ev, log_joint)


def posterior_single(spec: LanguageSpec, x, partial: bool = False) -> PosteriorVector:
    return posterior_from_loglik(spec, loglik_vector(spec, x, partial))


def posterior_tied(spec: LanguageSpec, messages: Iterable, partial_last: bool = False) -> PosteriorVector:
    """Posterior of one intention shared by all messages.

    ``probs[lam]`` is proportional to ``prior[lam] * prod_j q(x_j | lam)``.
    With ``partial_last`` the final element may be an unterminated prefix.
    """
    messages = list(messages)
    if not messages:
        raise ValueError("need at least one message")
    total = np.zeros(spec.num_intentions)
    for j, x in enumerate(messages):
        total = total + loglik_vector(spec, x, partial=partial_last and j == len(messages) - 1)
    return posterior_from_loglik(spec, total)


def sequence_logmarginal(spec: LanguageSpec, X, across: str = CHAIN) -> float:
    """``log q(x_1, ..., x_m)`` by the forward recursion over intentions."""
    across = _across(across)
    if isinstance(X, Corpus):
        L = corpus_loglik(spec, X)
    else:
        L = np.array([loglik_vector(spec, x) for x in X])
    if len(L) == 0:
        return 0.0
    if across == CLAMPED:
        return float(logsumexp(spec.log_stationary + L.sum(axis=0)))
    log_alpha = spec.log_stationary + L[0]
    logP = spec.log_prior_transition
    for row in L[1:]:
        log_alpha = logsumexp(log_alpha[:, None] + logP, axis=0) + row
    return float(logsumexp(log_alpha))


def intention_hop(spec: LanguageSpec, steps: int) -> np.ndarray:
    """``q(theta_m | theta_0)`` as the m-th power of the intention chain."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.linalg.matrix_power(spec.prior_transition, steps)


# -- ambiguity --------------------------------------------------------------------


@dataclass(frozen=True)
class AmbiguityReport:
    epsilon: float
    argmax_intention: int
    matches_generating: bool | None = None
    # 1 - Pr(generating | x); the quantity the error bounds are stated in
    epsilon_generating: float | None = None
    log_top: float = 0.0  # log q(argmax, x)
    log_rest: float = -np.inf  # log q(all other intentions, x)

    @property
    def dominance_holds(self) -> bool:
        """``q(top, x) / q(rest, x) >= (1 - eps) / eps`` (exact form, log space)."""
        if self.log_rest == -np.inf:
            return True
        lhs = self.log_top - self.log_rest
        rhs = np.log1p(-self.epsilon) - np.log(self.epsilon)
        return bool(lhs >= rhs - 1e-9 * max(1.0, abs(rhs)))


def ambiguity_from_posterior(post: PosteriorVector, generating: int | None = None) -> AmbiguityReport:
    top = post.argmax
    others = np.delete(post.log_joint, top)
    log_rest = float(logsumexp(others)) if len(others) else -np.inf
    eps = float(np.exp(log_rest - post.log_evidence))
    eps_gen = None if generating is None else post.residual(generating)
    return AmbiguityReport(
        epsilon=eps,
        argmax_intention=top,
        matches_generating=None if generating is None else top == generating,
        epsilon_generating=eps_gen,
        log_top=float(post.log_joint[top]),
        log_rest=log_rest,
    )


def ambiguity(spec: LanguageSpec, x, generating: int | None = None, partial: bool = False) -> AmbiguityReport:
    if generating is None and isinstance(x, Message):
        generating = x.generating_intention
    return ambiguity_from_posterior(posterior_single(spec, x, partial), generating)


def corpus_epsilons(spec: LanguageSpec, corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Per-message ambiguity and argmax intention for a whole corpus."""
    log_joint = corpus_loglik(spec, corpus) + spec.log_stationary
    top = np.argmax(log_joint, axis=1)
    masked = log_joint.copy()
    masked[np.arange(len(top)), top] = -np.inf
    eps = np.exp(logsumexp(masked, axis=1) - logsumexp(log_joint, axis=1))
    return eps, top


def calibrate_noise(
    target_mean_epsilon: float,
    config: GeneratorConfig | None = None,
    num_messages: int = 2000,
    seed: int = 0,
    tol: float = 1e-3,
    max_iter: int = 60,
) -> float:
    """Noise level whose sampled corpus has mean per-message ambiguity ``target``.

    Bisection with common random numbers: every candidate spec shares the
    construction seed of ``config`` and every corpus the sampling ``seed``.
    """
    config = config or GeneratorConfig()
    if target_mean_epsilon <= 0:
        return 0.0

    def mean_eps(eta: float) -> float:
        spec = build_spec(config, noise_level=eta)
        corpus = sample_corpus(spec, num_messages, Mode.CHAIN, SplitMix64(seed))
        return float(corpus_epsilons(spec, corpus)[0].mean())

    lo, hi = 0.0, 0.999
    if mean_eps(hi) < target_mean_epsilon:
        raise ValueError(f"target ambiguity {target_mean_epsilon} not reachable with noise < 1")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mean_eps(mid) < target_mean_epsilon:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return round(0.5 * (lo + hi), 6)


# -- forward filtering -------------------------------------------------------------


@dataclass
class FilterState:
    """Batch of filtering states, one row per history.

    ``log_post`` is the normalised log posterior over the intention of the
    message in progress, ``position`` the number of letters already emitted in
    it (0 right after a newline) and ``prev`` its last letter (-1 if none).
    """

    log_post: np.ndarray
    position: np.ndarray
    prev: np.ndarray
    log_evidence: np.ndarray

    def __len__(self) -> int:
        return len(self.position)

    @property
    def posterior(self) -> np.ndarray:
        return np.exp(self.log_post)

    def copy(self) -> "FilterState":
        return FilterState(self.log_post.copy(), self.position.copy(), self.prev.copy(), self.log_evidence.copy())

    def take(self, idx) -> "FilterState":
        return FilterState(self.log_post[idx], self.position[idx], self.prev[idx], self.log_evidence[idx])


def initial_state(spec: LanguageSpec, batch: int = 1, theta=None) -> FilterState:
    """Fresh state at the start of a stream (prior), or clamped to ``theta``."""
    K = spec.num_intentions
    if theta is None:
        log_post = np.tile(spec.log_stationary, (batch, 1))
    else:
        theta = np.broadcast_to(np.asarray(theta, dtype=np.int64), (batch,))
        log_post = np.full((batch, K), -np.inf)
        log_post[np.arange(batch), theta] = 0.0
    return FilterState(
        log_post=log_post,
        position=np.zeros(batch, dtype=np.int64),
        prev=np.full(batch, -1, dtype=np.int64),
        log_evidence=np.zeros(batch),
    )


def _letter_rows(spec: LanguageSpec, position: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """(B, K, V) letter distributions for each row's context."""
    B = len(position)
    rows = np.empty((B, spec.num_intentions, spec.alphabet_size))
    start = position == 0
    rows[start] = spec.emission_initial[None]
    inner = ~start
    if inner.any():
        rows[inner] = np.transpose(spec.emission_transition[:, prev[inner]], (1, 0, 2))
    return rows


def _end_prob(spec: LanguageSpec, position: np.ndarray) -> np.ndarray:
    if spec.fixed_length:
        return (position >= spec.message_length).astype(float)
    return np.where(position >= 1, spec.end_prob, 0.0)


def predictive(spec: LanguageSpec, state: FilterState) -> np.ndarray:
    """(B, V+1) next-symbol distributions: posterior mixture of emission rows."""
    letters = np.einsum("bk,bkv->bv", np.exp(state.log_post), _letter_rows(spec, state.position, state.prev))
    end = _end_prob(spec, state.position)
    out = np.empty((len(state), spec.num_symbols))
    out[:, :-1] = letters * (1.0 - end)[:, None]
    out[:, -1] = end
    return out


def predictive_by_intention(spec: LanguageSpec, state: FilterState) -> np.ndarray:
    """(B, K, V+1): the next-symbol distribution each intention would give."""
    rows = _letter_rows(spec, state.position, state.prev)
    end = _end_prob(spec, state.position)
    out = np.empty(rows.shape[:2] + (spec.num_symbols,))
    out[..., :-1] = rows * (1.0 - end)[:, None, None]
    out[..., -1] = end[:, None]
    return out


def advance(
    spec: LanguageSpec, state: FilterState, symbols, across: str = CHAIN, active: np.ndarray | None = None
) -> FilterState:
    """Feed one symbol per row (rows where ``active`` is False are left alone).

    A symbol with zero probability sets that row's ``log_evidence`` to -inf and
    leaves its posterior unchanged.
    """
    across = _across(across)
    symbols = np.asarray(symbols, dtype=np.int64)
    if active is None:
        active = np.ones(len(state), dtype=bool)
    new = state.copy()
    V, L = spec.alphabet_size, spec.message_length
    idx = np.flatnonzero(active)
    if len(idx) == 0:
        return new
    s = symbols[idx]
    pos, prev = state.position[idx], state.prev[idx]
    if (s < 0).any() or (s > V).any():
        raise InvalidPrefix(f"symbols must lie in [0, {V}]")
    is_nl = s == V
    if spec.fixed_length:
        bad = (is_nl & (pos != L)) | (~is_nl & (pos >= L))
    else:
        bad = is_nl & (pos == 0)
    if bad.any():
        raise InvalidPrefix("symbol not allowed at this position of the message")

    # letters: Bayes update of the current intention
    li = idx[~is_nl]
    if len(li):
        sl, pl, pv = s[~is_nl], pos[~is_nl], prev[~is_nl]
        logq = np.empty((len(li), spec.num_intentions))
        first = pl == 0
        logq[first] = spec.log_emission_initial[:, sl[first]].T
        logq[~first] = spec.log_emission_transition[:, pv[~first], sl[~first]].T
        if not spec.fixed_length:
            logq[~first] += np.log1p(-spec.end_prob)
        joint = state.log_post[li] + logq
        z = logsumexp(joint, axis=1)
        ok = np.isfinite(z)
        new.log_post[li[ok]] = joint[ok] - z[ok, None]
        new.log_evidence[li] = state.log_evidence[li] + z
        new.position[li] = pl + 1
        new.prev[li] = sl

    # newlines: close the message and move to the next intention
    ni = idx[is_nl]
    if len(ni):
        if not spec.fixed_length:
            new.log_evidence[ni] += np.log(spec.end_prob)
        if across == CHAIN:
            moved = logsumexp(state.log_post[ni][:, :, None] + spec.log_prior_transition[None], axis=1)
            new.log_post[ni] = moved - logsumexp(moved, axis=1)[:, None]
        new.position[ni] = 0
        new.prev[ni] = -1
    return new


def _pad(histories: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(h) for h in histories], dtype=np.int64)
    width = int(lengths.max()) if len(lengths) else 0
    arr = np.zeros((len(histories), width), dtype=np.int64)
    for i, h in enumerate(histories):
        arr[i, : len(h)] = h
    return arr, lengths


def _current_segment(history: np.ndarray, newline: int) -> np.ndarray:
    """The symbols of the message that contains the last symbol of ``history``."""
    if len(history) == 0:
        return history
    nl = np.flatnonzero(history[:-1] == newline)
    return history[nl[-1] + 1 :] if len(nl) else history


def filter_histories(
    spec: LanguageSpec, histories: Sequence[Sequence[int]], across: str = CHAIN, theta=None
) -> FilterState:
    """Filter a batch of histories.

    With ``theta`` given (scalar or per-row array) the intention of the message
    containing each history's last symbol is fixed to ``theta``; earlier
    messages are then irrelevant and are skipped.
    """
    across = _across(across)
    hist = [_symbols(h) for h in histories]
    if theta is not None:
        hist = [_current_segment(h, spec.newline) for h in hist]
    state = initial_state(spec, len(hist), theta)
    if not hist:
        return state
    arr, lengths = _pad(hist)
    for t in range(arr.shape[1]):
        state = advance(spec, state, arr[:, t], across, active=lengths > t)
    return state


def filter_stream(spec: LanguageSpec, history, across: str = CHAIN, theta: int | None = None) -> FilterState:
    return filter_histories(spec, [history], across, theta)


def next_symbol_marginal(spec: LanguageSpec, history, across: str = CHAIN) -> np.ndarray:
    """Exact ``q(next symbol | history)`` over the V+1 symbols."""
    state = filter_stream(spec, history, across)
    if not np.isfinite(state.log_evidence[0]):
        raise InvalidPrefix("history has probability zero")
    return predictive(spec, state)[0]


def next_symbol_conditioned(spec: LanguageSpec, history, theta: int, across: str = CHAIN) -> np.ndarray:
    """``q(next symbol | history, theta)`` with ``theta`` the current message's intention.

    If the history ends with a newline, ``theta`` is the intention of the
    message just finished and ``across`` decides the next one.
    """
    if not 0 <= theta < spec.num_intentions:
        raise ValueError(f"intention {theta} out of range")
    return predictive(spec, filter_stream(spec, history, across, theta))[0]


# -- whole-stream evaluation -------------------------------------------------------


class _LogCumsum:
    """Prefix sums of log probabilities that may contain -inf."""

    def __init__(self, logq: np.ndarray):
        dead = np.isneginf(logq)
        zero = np.zeros((1, logq.shape[1]))
        self.finite = np.vstack([zero, np.cumsum(np.where(dead, 0.0, logq), axis=0)])
        self.dead = np.vstack([zero, np.cumsum(dead, axis=0)])

    def between(self, lo, hi) -> np.ndarray:
        """Sum of rows ``lo .. hi-1``."""
        out = self.finite[hi] - self.finite[lo]
        out[(self.dead[hi] - self.dead[lo]) > 0] = -np.inf
        return out


def stream_predictive(spec: LanguageSpec, stream, across: str = CHAIN, chunk: int = 65536) -> np.ndarray:
    """Next-symbol distribution before every symbol of ``stream``: (N, V+1).

    Equivalent to calling :func:`next_symbol_marginal` on every prefix, but
    computed from per-message cumulative likelihoods and one forward pass
    over messages.
    """
    across = _across(across)
    stream = np.asarray(stream, dtype=np.int64)
    N, K = len(stream), spec.num_intentions
    if N == 0:
        return np.zeros((0, spec.num_symbols))
    em = _emissions(spec, stream)
    cum = _LogCumsum(em.logq)
    n_msg = len(em.starts)
    ends = np.append(em.starts[1:], N)
    msg_ll = cum.between(em.starts, ends)

    # log prior over each message's intention, before seeing it
    log_alpha = np.empty((n_msg, K))
    log_alpha[0] = spec.log_stationary
    P = spec.prior_transition
    for i in range(1, n_msg):
        joint = log_alpha[i - 1] + msg_ll[i - 1]
        if across == CLAMPED:
            log_alpha[i] = joint - logsumexp(joint)
        else:
            m = joint.max()
            w = np.exp(joint - m) @ P
            with np.errstate(divide="ignore"):
                log_alpha[i] = np.log(w / w.sum())

    out = np.empty((N, spec.num_symbols))
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        j = np.arange(lo, hi)
        logb = log_alpha[em.message[j]] + cum.between(em.starts[em.message[j]], j)
        logb -= logsumexp(logb, axis=1)[:, None]
        state = FilterState(logb, em.position[j], em.prev[j], np.zeros(hi - lo))
        out[lo:hi] = predictive(spec, state)
    return out


def stream_log_loss(spec: LanguageSpec, stream, across: str = CHAIN) -> np.ndarray:
    """``-log q(x_t | x_<t)`` for every symbol of a stream."""
    stream = np.asarray(stream, dtype=np.int64)
    dist = stream_predictive(spec, stream, across)
    with np.errstate(divide="ignore"):
        return -np.log(dist[np.arange(len(stream)), stream])


def entropy_rate(spec: LanguageSpec, stream, across: str = CHAIN) -> float:
    """Mean oracle log-loss (nats/symbol) on a held-out stream."""
    return float(stream_log_loss(spec, stream, across).mean())

