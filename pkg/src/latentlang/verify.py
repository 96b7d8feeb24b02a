"""Numerical checks of the ambiguity error bounds and the KL measurements.

Checks take an LM backend: :class:`OracleBackend` (exact filtering, the ideal
model) or :class:`TrainedBackend` (a fitted :class:`DensityModel`).  Only
oracle results are asserted; trained results are reported.

Differences between the model distribution and the intention-conditioned
truth are tracked as the posterior difference ``w - v`` itself, updated
without cancellation, so deviations far below machine epsilon relative to
the probabilities involved (1e-30 and smaller) are still exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .density import ContextState, DensityModel
from .errors import HorizonTooLarge, ZeroProbabilityPath
from .langspec import Corpus, LanguageSpec, Message, Mode, sample_batch, sample_message
from .oracle import (
    CHAIN,
    CLAMPED,
    FilterState,
    _across,
    advance,
    corpus_loglik,
    filter_histories,
    intention_hop,
    message_loglik,
    predictive,
    predictive_by_intention,
)
from .rng import SplitMix64, categorical, derive, derive_many, stream_uniforms

TOLERANCE = 1e-9
MODEL_TRUE = "model_true"  # KL(p_model || q_true), the default direction
TRUE_MODEL = "true_model"  # KL(q_true || p_model)
MONTE_CARLO = "monte_carlo"
EXACT_DP = "exact_dp"
LOG_RATIO = "log_ratio"  # average of sum_t log p_t(y_t) - log q_t(y_t)
STEPWISE = "stepwise"  # sum_t of the exact per-step KL along sampled paths
MAX_DP_HORIZON = 3


# -- backends ---------------------------------------------------------------------


class OracleBackend:
    """Exact next-symbol marginals by forward filtering."""

    kind = "oracle"

    def __init__(self, spec: LanguageSpec, across: str = CHAIN):
        self.spec = spec
        self.across = _across(across)

    def start(self, histories: Sequence[Sequence[int]]) -> FilterState:
        return filter_histories(self.spec, histories, self.across)

    def predict(self, state: FilterState) -> np.ndarray:
        return predictive(self.spec, state)

    def advance(self, state: FilterState, symbols, active=None) -> FilterState:
        return advance(self.spec, state, symbols, self.across, active)

    def take(self, state: FilterState, idx) -> FilterState:
        return state.take(idx)


class TrainedBackend:
    kind = "trained"

    def __init__(self, model: DensityModel):
        self.model = model
        self.across = None

    def start(self, histories: Sequence[Sequence[int]]) -> ContextState:
        return self.model.start(histories)

    def predict(self, state: ContextState) -> np.ndarray:
        return self.model.predict_state(state)

    def advance(self, state: ContextState, symbols, active=None) -> ContextState:
        new = self.model.advance_state(state, symbols)
        if active is not None:
            keep = ~np.asarray(active, dtype=bool)
            new.window[keep] = state.window[keep]
            new.position[keep] = state.position[keep]
        return new

    def take(self, state: ContextState, idx) -> ContextState:
        return ContextState(state.window[idx], state.position[idx])


def _asserted(backend, across: str) -> bool:
    return isinstance(backend, OracleBackend) and backend.across == _across(across)


# -- records ----------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    measured_deviation: float
    bound_value: float
    trial: int = 0
    seed: int = 0
    m: int | None = None
    eta: float = 0.0
    epsilons: tuple[float, ...] = ()
    asserted: bool = True
    extra: dict = field(default_factory=dict)
    satisfied: bool = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "satisfied", bool(self.measured_deviation <= self.bound_value + TOLERANCE)
        )


@dataclass(frozen=True)
class KlEstimate:
    value: float
    standard_error: float
    method: str
    horizon: int
    direction: str = MODEL_TRUE
    estimator: str | None = None
    num_samples: int = 0
    m: int | None = None
    # per-sample totals (Monte Carlo only), kept for paired comparisons
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class CotRecord:
    direct: float
    chained: float
    direct_factor: float
    chained_factor: float
    message_likelihood: float
    steps: int

    @property
    def ratio(self) -> float:
        return self.chained_factor / self.direct_factor


# -- shared machinery -------------------------------------------------------------


def _base(rng: SplitMix64 | int | None) -> int:
    if rng is None:
        rng = SplitMix64(0)
    if isinstance(rng, int):
        rng = SplitMix64(rng)
    return rng.next_u64()


def _trial_uniforms(base: int, label: str, count: int, step: int = 1) -> np.ndarray:
    return stream_uniforms(derive_many(derive(base, label), np.arange(count)), step)


def _draw_intentions(spec: LanguageSpec, base: int, count: int, label: str = "theta") -> np.ndarray:
    u = _trial_uniforms(base, label, count)
    return categorical(np.broadcast_to(spec.stationary, (count, spec.num_intentions)), u)


def _messages(spec: LanguageSpec, intentions: np.ndarray, base: int, label: str) -> list[np.ndarray]:
    stream, offsets = sample_batch(spec, intentions, derive_many(derive(base, label), np.arange(len(intentions))))
    return [stream[a:b] for a, b in zip(offsets[:-1], offsets[1:])]


def _prefix_lengths(spec: LanguageSpec, base: int, count: int, letters: int | None, longest: int) -> np.ndarray:
    """Prefix length per trial: fixed, or uniform on 1..longest."""
    if letters is not None:
        if not 1 <= letters <= spec.message_length:
            raise ValueError(f"prompt_letters must lie in [1, {spec.message_length}]")
        return np.full(count, letters, dtype=np.int64)
    u = _trial_uniforms(base, "length", count)
    return 1 + np.minimum((u * longest).astype(np.int64), longest - 1)


def _partial_inputs(
    spec: LanguageSpec, intentions: np.ndarray, base: int, letters: int | None, longest: int, label: str = "input"
) -> list[np.ndarray]:
    full = _messages(spec, intentions, base, label)
    cut = _prefix_lengths(spec, base, len(intentions), letters, longest)
    # a prefix never includes the terminating newline
    return [msg[: min(int(c), len(msg) - 1)] for msg, c in zip(full, cut)]


def _residuals(log_joint: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Row-wise posterior mass off ``theta`` without cancellation."""
    log_joint = np.atleast_2d(log_joint)
    rows = np.arange(len(log_joint))
    masked = log_joint.copy()
    masked[rows, theta] = -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(logsumexp(masked, axis=1) - logsumexp(log_joint, axis=1))
    return np.nan_to_num(out, nan=0.0)


def _argmax_residuals(log_joint: np.ndarray) -> np.ndarray:
    return _residuals(log_joint, np.argmax(log_joint, axis=1))


def _odds_bound(eps: np.ndarray, theta: int, log_prior: np.ndarray) -> float:
    """Product-form bound on 1 - w* that always holds: prior-corrected product of per-part odds."""
    with np.errstate(divide="ignore"):
        odds = np.prod(eps / (1.0 - eps)) if np.all(eps < 1) else np.inf
    n = len(eps)
    correction = np.exp((n - 1) * max(0.0, float(np.max(log_prior[theta] - log_prior))))
    return float(min(1.0, odds * correction))


def _format_ok(spec: LanguageSpec, position: np.ndarray, symbols: np.ndarray) -> np.ndarray:
    is_nl = symbols == spec.newline
    if spec.fixed_length:
        return np.where(is_nl, position == spec.message_length, position < spec.message_length)
    return ~(is_nl & (position == 0))


def _format_mask(spec: LanguageSpec, position: np.ndarray) -> np.ndarray:
    """(B, V+1) mask of symbols the format allows next."""
    S = spec.num_symbols
    syms = np.broadcast_to(np.arange(S), (len(position), S))
    return _format_ok(spec, np.repeat(position[:, None], S, axis=1), syms)


def _initial_diff(log_w: np.ndarray, log_v: np.ndarray) -> np.ndarray:
    """``w - v`` with the one-hot entry of ``v`` computed as minus the rest of ``w``."""
    w, v = np.exp(log_w), np.exp(log_v)
    diff = w - v
    onehot = np.isfinite(log_v).sum(axis=1) == 1
    if onehot.any():
        rows = np.flatnonzero(onehot)
        th = np.argmax(log_v[rows], axis=1)
        diff[rows, th] = -_residuals(log_w[rows], th)
    return diff


class _Pair:
    """A backend state and the intention-conditioned truth, advanced in lockstep."""

    def __init__(self, backend, spec: LanguageSpec, histories, theta, across: str, _parts=None):
        self.backend, self.spec, self.across = backend, spec, _across(across)
        if _parts is not None:
            self.model, self.truth, self.diff, self.alive = _parts
            return
        self.truth = filter_histories(spec, histories, self.across, theta)
        self.model = backend.start(histories)
        self.alive = np.isfinite(self.truth.log_evidence)
        self.diff = None
        if isinstance(backend, OracleBackend):
            self.diff = _initial_diff(self.model.log_post, self.truth.log_post)

    def __len__(self) -> int:
        return len(self.truth)

    def take(self, idx) -> "_Pair":
        parts = (
            self.backend.take(self.model, idx),
            self.truth.take(idx),
            None if self.diff is None else self.diff[idx],
            self.alive[idx],
        )
        return _Pair(self.backend, self.spec, None, None, self.across, parts)

    def dists(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Model law ``p``, true law ``q`` and ``p - q`` for the next symbol."""
        rows = predictive_by_intention(self.spec, self.truth)
        q = np.einsum("bk,bks->bs", np.exp(self.truth.log_post), rows)
        if self.diff is None:
            p = self.backend.predict(self.model)
            return p, q, p - q
        p = np.einsum("bk,bks->bs", np.exp(self.model.log_post), rows)
        return p, q, np.einsum("bk,bks->bs", self.diff, rows)

    def advance(self, symbols) -> None:
        symbols = np.asarray(symbols, dtype=np.int64)
        active = self.alive & _format_ok(self.spec, self.truth.position, symbols)
        if self.diff is not None:
            self.diff = self._next_diff(symbols, active)
            self.model = self.backend.advance(self.model, symbols, active)
        else:
            self.model = self.backend.advance(self.model, symbols)
        self.truth = advance(self.spec, self.truth, symbols, self.across, active)
        self.alive = active & np.isfinite(self.truth.log_evidence)

    def _next_diff(self, symbols: np.ndarray, active: np.ndarray) -> np.ndarray:
        rows = predictive_by_intention(self.spec, self.truth)
        r = rows[np.arange(len(symbols)), :, symbols]  # (B, K)
        w, v, d = np.exp(self.model.log_post), np.exp(self.truth.log_post), self.diff
        p_s, q_s, d_s = (w * r).sum(1), (v * r).sum(1), (d * r).sum(1)
        ok = active & (p_s > 0) & (q_s > 0)
        new = d.copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            upd = ((d * r) * q_s[:, None] - (v * r) * d_s[:, None]) / (p_s * q_s)[:, None]
        new[ok] = upd[ok]
        new[active & ~ok] = 0.0
        nl = ok & (symbols == self.spec.newline)
        if nl.any():
            if self.backend.across == self.across:
                if self.across == CHAIN:
                    new[nl] = new[nl] @ self.spec.prior_transition
            else:
                w_next = self.backend.advance(self.model, symbols, nl).log_post[nl]
                v_next = advance(self.spec, self.truth, symbols, self.across, nl).log_post[nl]
                new[nl] = np.exp(w_next) - np.exp(v_next)
        return new


def _phi(r: np.ndarray) -> np.ndarray:
    """``(1 + r) log(1 + r) - r``, accurate for tiny ``r``."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    small = np.abs(r) < 1e-5
    rs = r[small]
    out[small] = rs * rs * (0.5 - rs / 6.0 + rs * rs / 12.0)
    big = ~small
    rb = r[big]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = (1.0 + rb) * np.log1p(rb) - rb
    vals[rb == -1.0] = 1.0
    out[big] = vals
    return out


def _step_kl(p: np.ndarray, q: np.ndarray, d: np.ndarray, direction: str) -> np.ndarray:
    """Exact per-step KL from ``p``, ``q`` and their difference ``d = p - q``."""
    ref, sign, other = (q, 1.0, p) if direction == MODEL_TRUE else (p, -1.0, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = ref * _phi(sign * d / np.where(ref > 0, ref, 1.0))
    terms = np.where(ref > 0, terms, np.where(other > 0, np.inf, 0.0))
    return terms.sum(axis=1)


def _log_ratio(q_y: np.ndarray, d_y: np.ndarray) -> np.ndarray:
    """``log p(y) - log q(y)`` via ``log1p(d/q)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log1p(d_y / np.where(q_y > 0, q_y, 1.0))
    return np.where(q_y > 0, out, np.where(d_y > 0, np.inf, 0.0))


def _score(pair: _Pair, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Along fixed continuations: log q(y), log p(y) - log q(y), max per-symbol |p - q|."""
    B, H = Y.shape
    rows = np.arange(B)
    log_q, ratio, max_sym = np.zeros(B), np.zeros(B), np.zeros(B)
    for t in range(H):
        p, q, d = pair.dists()
        max_sym = np.maximum(max_sym, np.abs(d).max(axis=1))
        y = Y[:, t]
        with np.errstate(divide="ignore"):
            log_q += np.log(q[rows, y])
        ratio += _log_ratio(q[rows, y], d[rows, y])
        if t + 1 < H:
            pair.advance(y)
    return log_q, ratio, max_sym


def _path_deviation(log_q: np.ndarray, ratio: np.ndarray) -> np.ndarray:
    """``|p(y) - q(y)| = q(y) |expm1(log p(y) - log q(y))|``."""
    with np.errstate(invalid="ignore", over="ignore"):
        dev = np.exp(log_q) * np.abs(np.expm1(ratio))
    return np.where(np.isneginf(log_q) & np.isfinite(ratio), 0.0, dev)


def _sample_truth(spec: LanguageSpec, histories, theta, across: str, horizon: int, states: np.ndarray) -> np.ndarray:
    """Continuations drawn from ``q(. | history, theta)``."""
    state = filter_histories(spec, histories, across, theta)
    Y = np.empty((len(state), horizon), dtype=np.int64)
    for t in range(horizon):
        Y[:, t] = categorical(predictive(spec, state), stream_uniforms(states, t + 1))
        state = advance(spec, state, Y[:, t], across)
    return Y


def _continuations(spec: LanguageSpec, position: int, horizon: int) -> np.ndarray:
    """Every format-valid continuation of ``horizon`` symbols from ``position``."""
    seqs = np.zeros((1, 0), dtype=np.int64)
    pos = np.array([position])
    for _ in range(horizon):
        mask = _format_mask(spec, pos)
        r, s = np.nonzero(mask)
        seqs = np.concatenate([seqs[r], s[:, None]], axis=1)
        pos = np.where(s == spec.newline, 0, pos[r] + 1)
    return seqs


# -- sparsity and bound checks ----------------------------------------------------


def check_sparsity(spec: LanguageSpec, trials: int, rng=None) -> list[BoundCheck]:
    """One-hot joint at zero noise; dominance ratio against the generating intention otherwise.

    With noise the measured value is ``log((1 - eps) / eps) - log(q(gen, x) / q(rest, x))``
    with ``eps`` the max-posterior ambiguity; it must not exceed 0.
    """
    base = _base(rng)
    theta = _draw_intentions(spec, base, trials)
    msgs = _messages(spec, theta, base, "message")
    stream = np.concatenate(msgs)
    offsets = np.concatenate([[0], np.cumsum([len(m) for m in msgs])])
    corpus = Corpus(stream, offsets, theta, Mode.CHAIN, spec.fingerprint, spec.alphabet_size)
    log_joint = corpus_loglik(spec, corpus) + spec.log_stationary
    eps = _argmax_residuals(log_joint)
    eps_gen = _residuals(log_joint, theta)
    out = []
    for i in range(trials):
        lj, th = log_joint[i], int(theta[i])
        rest = logsumexp(np.delete(lj, th))
        top_is_gen = int(np.argmax(lj)) == th
        if not np.isfinite(rest):
            measured, bound = float(eps_gen[i]), 0.0
        else:
            rhs = np.log1p(-eps[i]) - np.log(eps[i])
            lhs = lj[th] - rest
            measured, bound = float(rhs - lhs), 0.0
        out.append(BoundCheck(
            measured, bound, trial=i, seed=base, eta=spec.noise_level,
            epsilons=(float(eps[i]),),
            extra={"epsilon_generating": float(eps_gen[i]), "argmax_is_generating": top_is_gen},
        ))
    return out


def check_prop1(spec: LanguageSpec, trials: int, rng=None) -> list[BoundCheck]:
    """Two messages sharing an intention: the composite residual versus the product of the parts."""
    base = _base(rng)
    theta = _draw_intentions(spec, base, trials)
    lls = []
    for label in ("first", "second"):
        msgs = _messages(spec, theta, base, label)
        stream = np.concatenate(msgs)
        offsets = np.concatenate([[0], np.cumsum([len(m) for m in msgs])])
        corpus = Corpus(stream, offsets, theta, Mode.CLAMPED, spec.fingerprint, spec.alphabet_size)
        lls.append(corpus_loglik(spec, corpus))
    prior = spec.log_stationary
    eps = np.stack([_residuals(prior + ll, theta) for ll in lls], axis=1)
    eps_top = np.stack([_argmax_residuals(prior + ll) for ll in lls], axis=1)
    composite = _residuals(prior + lls[0] + lls[1], theta)
    out = []
    for i in range(trials):
        parts = eps[i]
        out.append(BoundCheck(
            float(composite[i]), float(parts[0] * parts[1]), trial=i, seed=base, m=2,
            eta=spec.noise_level, epsilons=tuple(float(e) for e in parts),
            extra={
                "epsilons_argmax": ";".join(repr(float(e)) for e in eps_top[i]),
                "odds_bound": _odds_bound(parts, int(theta[i]), prior),
            },
        ))
    return out


def check_prop2(
    backend,
    spec: LanguageSpec,
    trials: int,
    continuation_len: int = 3,
    rng=None,
    prompt_letters: int | None = None,
) -> list[BoundCheck]:
    """``|p(y|x) - q(y|x, theta_x)| <= eps(x)`` on sampled partial-message prompts.

    ``eps(x)`` is the posterior mass off the generating intention; continuations
    are drawn from the truth and may run past the end of the message.
    """
    base = _base(rng)
    theta = _draw_intentions(spec, base, trials)
    prompts = _partial_inputs(spec, theta, base, prompt_letters, spec.message_length, "prompt")
    log_post = filter_histories(spec, prompts, CHAIN).log_post
    eps = _residuals(log_post, theta)
    eps_top = _argmax_residuals(log_post)
    Y = _sample_truth(
        spec, prompts, theta, CHAIN, continuation_len, derive_many(derive(base, "continuation"), np.arange(trials))
    )
    pair = _Pair(backend, spec, prompts, theta, CHAIN)
    log_q, ratio, _ = _score(pair, Y)
    dev = _path_deviation(log_q, ratio)
    asserted = _asserted(backend, CHAIN)
    return [
        BoundCheck(
            float(dev[i]), float(eps[i]), trial=i, seed=base, eta=spec.noise_level,
            epsilons=(float(eps[i]),), asserted=asserted,
            extra={"epsilon_argmax": float(eps_top[i]), "prompt_letters": len(prompts[i]), "backend": backend.kind},
        )
        for i in range(trials)
    ]


def check_prop2_exhaustive(
    backend, spec: LanguageSpec, num_prompts: int, rng=None, horizon: int = 3, prompt_letters: int | None = None
) -> list[BoundCheck]:
    """As :func:`check_prop2` but the deviation is maximised over every continuation of ``horizon`` symbols."""
    base = _base(rng)
    theta = _draw_intentions(spec, base, num_prompts)
    prompts = _partial_inputs(spec, theta, base, prompt_letters, spec.message_length, "prompt")
    log_post = filter_histories(spec, prompts, CHAIN).log_post
    eps = _residuals(log_post, theta)
    asserted = _asserted(backend, CHAIN)
    out = []
    for i, prompt in enumerate(prompts):
        pair = _Pair(backend, spec, [prompt], np.array([theta[i]]), CHAIN)
        Y = _continuations(spec, int(pair.truth.position[0]), horizon)
        pair = pair.take(np.zeros(len(Y), dtype=np.int64))
        log_q, ratio, _ = _score(pair, Y)
        dev = _path_deviation(log_q, ratio)
        with np.errstate(over="ignore"):
            mass_p = float(np.sum(np.exp(log_q + ratio)))
        out.append(BoundCheck(
            float(dev.max()), float(eps[i]), trial=i, seed=base, eta=spec.noise_level,
            epsilons=(float(eps[i]),), asserted=asserted,
            extra={
                "continuations": len(Y),
                "total_mass_model": mass_p,
                "total_mass_true": float(np.exp(log_q).sum()),
                "backend": backend.kind,
            },
        ))
    return out


def _icl_material(spec: LanguageSpec, base: int, trials: int, max_m: int, letters: int | None):
    theta = _draw_intentions(spec, base, trials)
    inputs = _partial_inputs(spec, theta, base, letters, max(1, spec.message_length - 1))
    context = []
    if max_m:
        msgs = _messages(spec, np.repeat(theta, max_m), base, "context")
        context = [msgs[i * max_m : (i + 1) * max_m] for i in range(trials)]
    else:
        context = [[] for _ in range(trials)]
    return theta, inputs, context


def _prompt(context: list[np.ndarray], m: int, tail: np.ndarray) -> np.ndarray:
    return np.concatenate(list(context[:m]) + [tail]).astype(np.int64)


def check_icl(
    backend,
    spec: LanguageSpec,
    m_range: Iterable[int],
    trials: int,
    rng=None,
    continuation_len: int = 5,
    samples_per_trial: int = 4,
    prompt_letters: int | None = None,
) -> list[BoundCheck]:
    """m same-intention messages followed by a partial input.

    The deviation is the max over shared continuations (drawn from the truth,
    so identical for every m) of ``|p(y | prompt) - q(y | input, theta*)|``.
    The bound is the product of the parts' ambiguities; the looser
    ``max_part ** (m + 1)`` and the exact tied residual are recorded too.
    """
    ms = sorted(set(int(m) for m in m_range))
    if not ms or ms[0] < 0:
        raise ValueError("m_range must hold non-negative integers")
    base = _base(rng)
    max_m = ms[-1]
    theta, inputs, context = _icl_material(spec, base, trials, max_m, prompt_letters)
    S = samples_per_trial
    rep = np.repeat(np.arange(trials), S)
    Y = _sample_truth(
        spec, [inputs[i] for i in rep], theta[rep], CLAMPED, continuation_len,
        derive_many(derive(base, "continuation"), np.arange(trials * S)),
    )
    prior = spec.log_stationary
    ll_input = filter_histories(spec, inputs, CHAIN).log_post - prior
    eps_input = _residuals(prior + ll_input, theta)
    eps_input_top = _argmax_residuals(prior + ll_input)
    if max_m:
        flat = [msg for msgs in context for msg in msgs]
        stream = np.concatenate(flat)
        offsets = np.concatenate([[0], np.cumsum([len(m) for m in flat])])
        corpus = Corpus(stream, offsets, np.repeat(theta, max_m), Mode.CLAMPED, spec.fingerprint, spec.alphabet_size)
        ll_ctx = corpus_loglik(spec, corpus).reshape(trials, max_m, -1)
        eps_ctx = _residuals((prior + ll_ctx).reshape(trials * max_m, -1), np.repeat(theta, max_m)).reshape(trials, max_m)
        eps_ctx_top = _argmax_residuals((prior + ll_ctx).reshape(trials * max_m, -1)).reshape(trials, max_m)
    else:
        ll_ctx = np.zeros((trials, 0, spec.num_intentions))
        eps_ctx = eps_ctx_top = np.zeros((trials, 0))
    asserted = _asserted(backend, CLAMPED)
    results: dict[tuple[int, int], BoundCheck] = {}
    for m in ms:
        histories = [_prompt(context[i], m, inputs[i]) for i in rep]
        pair = _Pair(backend, spec, histories, theta[rep], CLAMPED)
        log_q, ratio, max_sym = _score(pair, Y)
        dev = _path_deviation(log_q, ratio).reshape(trials, S).max(axis=1)
        max_sym = max_sym.reshape(trials, S).max(axis=1)
        tied = _residuals(prior + ll_ctx[:, :m].sum(axis=1) + ll_input, theta)
        for i in range(trials):
            parts = np.append(eps_ctx[i, :m], eps_input[i])
            parts_top = np.append(eps_ctx_top[i, :m], eps_input_top[i])
            results[(i, m)] = BoundCheck(
                float(dev[i]), float(np.prod(parts)), trial=i, seed=base, m=m, eta=spec.noise_level,
                epsilons=tuple(float(e) for e in parts), asserted=asserted,
                extra={
                    "loose_bound": float(np.max(parts) ** (m + 1)),
                    "tied_residual": float(tied[i]),
                    "odds_bound": _odds_bound(parts, int(theta[i]), prior),
                    "epsilons_argmax": ";".join(repr(float(e)) for e in parts_top),
                    "max_symbol_deviation": float(max_sym[i]),
                    "backend": backend.kind,
                },
            )
    return [results[(i, m)] for i in range(trials) for m in ms]


def nonincreasing_fraction(checks: Sequence[BoundCheck], rel_tol: float = 1e-9) -> float:
    """Share of trials whose deviation never increases as m grows."""
    by_trial: dict[int, list[tuple[int, float]]] = {}
    for c in checks:
        by_trial.setdefault(c.trial, []).append((c.m, c.measured_deviation))
    if not by_trial:
        return 1.0
    good = 0
    for series in by_trial.values():
        devs = [d for _, d in sorted(series)]
        good += all(b <= a * (1 + rel_tol) for a, b in zip(devs, devs[1:]))
    return good / len(by_trial)


# -- instruction mixture ------------------------------------------------------------


def mixture_pointwise(spec: LanguageSpec, x, ys: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """``p(y | x)`` by forward filtering and ``sum_theta q(theta | theta_x) q(y | theta)``.

    Both are exact; ``x`` must carry its generating intention.
    """
    theta_x = x.generating_intention
    if theta_x is None:
        raise ValueError("x must carry its generating intention")
    ys = [np.asarray(y, dtype=np.int64) for y in ys]
    lengths = np.array([len(y) for y in ys])
    stream = np.concatenate(ys)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    corpus = Corpus(stream, offsets, None, Mode.CHAIN, spec.fingerprint, spec.alphabet_size)
    with np.errstate(divide="ignore"):
        log_mix = logsumexp(np.log(spec.prior_transition[theta_x]) + corpus_loglik(spec, corpus), axis=1)
    state = filter_histories(spec, [x.symbols]).take(np.zeros(len(ys), dtype=np.int64))
    log_p = np.zeros(len(ys))
    for t in range(int(lengths.max())):
        act = lengths > t
        sym = np.array([y[t] if len(y) > t else 0 for y in ys])
        with np.errstate(divide="ignore"):
            step = np.log(predictive(spec, state)[np.arange(len(ys)), sym])
        log_p[act] += step[act]
        ok = act & _format_ok(spec, state.position, sym)
        log_p[act & ~ok] = -np.inf
        state = advance(spec, state, sym, CHAIN, ok)
    return np.exp(log_p), np.exp(log_mix)


def check_instruction_mixture(spec: LanguageSpec, x: Message, sample_ys: int, rng=None) -> list[BoundCheck]:
    """Next-message law after ``x`` versus the one-step intention mixture, on sampled ``y``."""
    base = _base(rng)
    theta_x = x.generating_intention
    u = _trial_uniforms(base, "next", sample_ys)
    nxt = categorical(np.broadcast_to(spec.prior_transition[theta_x], (sample_ys, spec.num_intentions)), u)
    ys = _messages(spec, nxt, base, "y")
    p, mix = mixture_pointwise(spec, x, ys)
    log_joint = spec.log_stationary + np.array([_loglik(spec, x)])
    eps = float(_residuals(log_joint, np.array([theta_x]))[0])
    dev = np.abs(p - mix)
    scale = np.maximum(p, mix)
    rel = np.divide(dev, scale, out=np.zeros_like(dev), where=scale > 0)
    return [
        BoundCheck(
            float(dev[j]), eps, trial=j, seed=base, eta=spec.noise_level, epsilons=(eps,),
            extra={"p": float(p[j]), "mixture": float(mix[j]), "relative_deviation": float(rel[j])},
        )
        for j in range(sample_ys)
    ]


def _loglik(spec: LanguageSpec, x: Message) -> np.ndarray:
    return np.array([message_loglik(spec, x, th) for th in range(spec.num_intentions)])


def instruction_mixture_suite(spec: LanguageSpec, num_instructions: int, ys_per_instruction: int, rng=None) -> list[BoundCheck]:
    """:func:`check_instruction_mixture` over several sampled instructions ``x``."""
    base = _base(rng)
    theta = _draw_intentions(spec, base, num_instructions)
    msgs = _messages(spec, theta, base, "instruction")
    out = []
    for i, (th, msg) in enumerate(zip(theta, msgs)):
        x = Message(tuple(int(s) for s in msg), int(th))
        for c in check_instruction_mixture(spec, x, ys_per_instruction, SplitMix64(derive(base, "ys", i))):
            out.append(BoundCheck(
                c.measured_deviation, c.bound_value, trial=i * ys_per_instruction + c.trial, seed=base,
                eta=c.eta, epsilons=c.epsilons, extra={**c.extra, "instruction": i},
            ))
    return out


# -- chain of thought ---------------------------------------------------------------


def cot_compare(
    spec: LanguageSpec,
    chain: Sequence[int],
    target_message_sampler: Callable[[LanguageSpec, int, SplitMix64], Message] | None = None,
    rng=None,
) -> CotRecord:
    """Direct m-step intention hop versus conditioning on the whole intention path."""
    chain = [int(c) for c in chain]
    if len(chain) < 2:
        raise ValueError("chain needs at least two intentions")
    if min(chain) < 0 or max(chain) >= spec.num_intentions:
        raise ValueError("intention out of range")
    P = spec.prior_transition
    if any(P[a, b] <= 0 for a, b in zip(chain, chain[1:])):
        raise ZeroProbabilityPath(f"path {chain} has probability zero under the intention chain")
    steps = len(chain) - 1
    rng = rng if isinstance(rng, SplitMix64) else SplitMix64(0 if rng is None else rng)
    sampler = target_message_sampler or sample_message
    x = sampler(spec, chain[-1], rng)
    lik = float(np.exp(message_loglik(spec, x, chain[-1])))
    direct_factor = float(intention_hop(spec, steps)[chain[0], chain[-1]])
    chained_factor = float(P[chain[-2], chain[-1]])
    return CotRecord(direct_factor * lik, chained_factor * lik, direct_factor, chained_factor, lik, steps)


# -- KL measurements ----------------------------------------------------------------


def _kl(
    backend, spec, theta, histories, horizon, num_samples, base, method, direction, estimator, across, max_dp_horizon, m
) -> KlEstimate:
    if direction not in (MODEL_TRUE, TRUE_MODEL):
        raise ValueError(f"unknown direction {direction!r}")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if method == EXACT_DP:
        if horizon > max_dp_horizon:
            raise HorizonTooLarge(f"exact_dp is capped at horizon {max_dp_horizon}, got {horizon}")
        value = float(np.mean(_kl_exact(backend, spec, theta, histories, horizon, direction, across)))
        return KlEstimate(value, 0.0, EXACT_DP, horizon, direction, None, len(histories), m)
    if method != MONTE_CARLO:
        raise ValueError(f"unknown method {method!r}")
    if estimator not in (LOG_RATIO, STEPWISE):
        raise ValueError(f"unknown estimator {estimator!r}")
    idx = np.arange(num_samples) % len(histories)
    pair = _Pair(backend, spec, [histories[i] for i in idx], theta[idx], across)
    states = derive_many(derive(base, "continuation"), np.arange(num_samples))
    totals = np.zeros(num_samples)
    rows = np.arange(num_samples)
    for t in range(horizon):
        p, q, d = pair.dists()
        draw = p if direction == MODEL_TRUE else q
        y = categorical(draw, stream_uniforms(states, t + 1))
        if estimator == STEPWISE:
            step = _step_kl(p, q, d, direction)
        else:
            lr = _log_ratio(q[rows, y], d[rows, y])
            step = lr if direction == MODEL_TRUE else -lr
        totals += np.where(pair.alive, step, 0.0)
        if t + 1 < horizon:
            pair.advance(y)
    if not np.all(np.isfinite(totals)):
        return KlEstimate(float("inf"), float("nan"), MONTE_CARLO, horizon, direction, estimator, num_samples, m)
    se = float(totals.std(ddof=1) / np.sqrt(num_samples)) if num_samples > 1 else float("nan")
    return KlEstimate(float(totals.mean()), se, MONTE_CARLO, horizon, direction, estimator, num_samples, m, totals)


def _kl_exact(backend, spec, theta, histories, horizon, direction, across) -> np.ndarray:
    """Per-prompt KL over every continuation, by the chain rule on the continuation tree."""
    pair = _Pair(backend, spec, histories, theta, across)
    owner = np.arange(len(histories))
    weight = np.ones(len(histories))
    out = np.zeros(len(histories))
    for t in range(horizon):
        p, q, d = pair.dists()
        step = _step_kl(p, q, d, direction)
        live = (weight > 0) & pair.alive
        with np.errstate(invalid="ignore"):
            np.add.at(out, owner[live], weight[live] * step[live])
        if t + 1 == horizon:
            break
        draw = p if direction == MODEL_TRUE else q
        mask = live[:, None] & (draw > 0) & _format_mask(spec, pair.truth.position)
        r, s = np.nonzero(mask)
        weight = weight[r] * draw[r, s]
        owner = owner[r]
        pair = pair.take(r)
        pair.advance(s)
    return out


def _kl_prompts(spec: LanguageSpec, base: int, count: int, m: int, letters: int | None, max_m: int | None = None):
    theta, inputs, context = _icl_material(spec, base, count, max_m if max_m is not None else m, letters)
    return theta, [_prompt(context[i], m, inputs[i]) for i in range(count)]


def kl_understanding(
    backend,
    spec: LanguageSpec,
    horizon: int = 20,
    num_samples: int = 10_000,
    rng=None,
    method: str = MONTE_CARLO,
    direction: str = MODEL_TRUE,
    estimator: str = LOG_RATIO,
    num_prompts: int | None = None,
    prompt_letters: int | None = None,
    across: str = CHAIN,
    max_dp_horizon: int = MAX_DP_HORIZON,
) -> KlEstimate:
    """KL between the backend and ``q(. | x, theta_x)`` over ``horizon``-symbol continuations.

    Prompts are partial messages under a known intention.  Monte Carlo
    sample i uses prompt ``i % num_prompts``; ``exact_dp`` averages the exact
    KL over the prompts.
    """
    base = _base(rng)
    count = num_prompts or (num_samples if method == MONTE_CARLO else 100)
    theta, histories = _kl_prompts(spec, base, count, 0, prompt_letters)
    return _kl(backend, spec, theta, histories, horizon, num_samples, base, method, direction, estimator,
               across, max_dp_horizon, None)


def kl_icl(
    backend,
    spec: LanguageSpec,
    m_range: Iterable[int],
    horizon: int = 20,
    num_samples: int = 10_000,
    rng=None,
    method: str = MONTE_CARLO,
    direction: str = MODEL_TRUE,
    estimator: str = LOG_RATIO,
    num_prompts: int | None = None,
    prompt_letters: int | None = None,
    across: str = CLAMPED,
    max_dp_horizon: int = MAX_DP_HORIZON,
) -> list[KlEstimate]:
    """:func:`kl_understanding` with m same-intention messages before the input.

    Every m reuses the same intentions, inputs, context messages and
    continuation streams, so m = 0 reproduces :func:`kl_understanding`.
    """
    ms = sorted(set(int(m) for m in m_range))
    base = _base(rng)
    count = num_prompts or (num_samples if method == MONTE_CARLO else 100)
    out = []
    for m in ms:
        theta, histories = _kl_prompts(spec, base, count, m, prompt_letters, max_m=ms[-1])
        out.append(_kl(backend, spec, theta, histories, horizon, num_samples, base, method, direction,
                       estimator, across, max_dp_horizon, m))
    return out


def significant_increases(estimates: Sequence[KlEstimate], sigmas: float = 3.0) -> list[bool]:
    """For each consecutive pair, whether the later estimate is larger by more than ``sigmas`` SE.

    Estimates sharing random numbers (as :func:`kl_icl` produces) are compared
    through the standard error of their per-sample differences.
    """
    out = []
    for a, b in zip(estimates, estimates[1:]):
        diff = b.value - a.value
        if a.samples is not None and b.samples is not None and len(a.samples) == len(b.samples) > 1:
            d = b.samples - a.samples
            se = float(d.std(ddof=1) / np.sqrt(len(d)))
        else:
            se = float(np.hypot(a.standard_error, b.standard_error))
        out.append(bool(diff > sigmas * se))
    return out


# -- output ------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(v).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


CHECK_COLUMNS = ("trial", "seed", "m", "eta", "measured_deviation", "bound_value", "satisfied", "asserted", "epsilons")
KL_COLUMNS = ("m", "value", "standard_error", "method", "estimator", "direction", "horizon", "num_samples")


def write_checks_csv(checks: Sequence[BoundCheck], path: str | Path) -> None:
    extras = sorted({k for c in checks for k in c.extra})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CHECK_COLUMNS) + extras)
        for c in checks:
            row = [c.trial, c.seed, c.m, c.eta, c.measured_deviation, c.bound_value, c.satisfied, c.asserted,
                   ";".join(repr(float(e)) for e in c.epsilons)]
            w.writerow([_fmt(v) for v in row] + [_fmt(c.extra.get(k)) for k in extras])


def write_kl_csv(estimates: Sequence[KlEstimate], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KL_COLUMNS)
        for e in estimates:
            w.writerow([_fmt(getattr(e, col)) for col in KL_COLUMNS])


def summarize(checks: Sequence[BoundCheck]) -> dict:
    """Pass counts and the worst case over the asserted checks."""
    asserted = [c for c in checks if c.asserted]
    failed = [c for c in asserted if not c.satisfied]
    worst = max(asserted, key=lambda c: c.measured_deviation - c.bound_value, default=None)
    return {
        "checks": len(checks),
        "asserted": len(asserted),
        "passed": len(asserted) - len(failed),
        "violations": len(failed),
        "max_deviation": max((c.measured_deviation for c in checks), default=0.0),
        "worst_margin": None if worst is None else worst.measured_deviation - worst.bound_value,
        "first_violation": None if not failed else _check_dict(failed[0]),
    }


def _check_dict(c: BoundCheck) -> dict:
    return {
        "trial": c.trial, "seed": c.seed, "m": c.m, "eta": c.eta,
        "measured_deviation": c.measured_deviation, "bound_value": c.bound_value,
        "epsilons": list(c.epsilons), "extra": c.extra,
    }


def write_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
