"""Doubly-embedded Markov chain languages: construction, sampling and file IO.

An outer K-state chain over intentions picks which inner letter-level Markov
chain writes the next message.  Every intention owns a contiguous block of
``letters_per_intention`` letters; with ``noise_level == 0`` its chain never
leaves that block (an unambiguous language), with ``noise_level > 0`` each row
is mixed with the uniform distribution over all V letters.

Symbols are integers: letters are ``0 .. V-1`` (printed ``a, b, ...``) and
``V`` is the newline that terminates every message.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, CorpusFormatError, FormatError, VersionError
from .rng import SplitMix64, categorical, derive, derive_many, stream_uniforms

SPEC_FORMAT = "latentlang-spec"
SPEC_VERSION = 1
MAX_ALPHABET = 26


class Mode(str, enum.Enum):
    CHAIN = "chain"
    CLAMPED = "clamped"


@dataclass(frozen=True)
class GeneratorConfig:
    num_intentions: int = 6
    alphabet_size: int = 18
    letters_per_intention: int = 3
    message_length: int = 20
    noise_level: float = 0.0
    seed: int = 42
    stay_prob: float = 0.5
    # None -> fixed-length messages; otherwise per-step end probability
    end_prob: float | None = None

    def validate(self) -> None:
        K, V, n = self.num_intentions, self.alphabet_size, self.letters_per_intention
        if K < 2:
            raise ConfigError(f"num_intentions must be >= 2, got {K}")
        if n < 1:
            raise ConfigError(f"letters_per_intention must be >= 1, got {n}")
        if V < K * n:
            raise ConfigError(f"alphabet_size {V} < num_intentions * letters_per_intention = {K * n}")
        if V > MAX_ALPHABET:
            raise ConfigError(f"alphabet_size must be <= {MAX_ALPHABET}, got {V}")
        if self.message_length < 1:
            raise ConfigError(f"message_length must be >= 1, got {self.message_length}")
        if not 0.0 <= self.noise_level < 1.0:
            raise ConfigError(f"noise_level must lie in [0, 1), got {self.noise_level}")
        if not 0.0 <= self.stay_prob <= 1.0:
            raise ConfigError(f"stay_prob must lie in [0, 1], got {self.stay_prob}")
        if self.end_prob is not None and not 0.0 < self.end_prob < 1.0:
            raise ConfigError(f"end_prob must lie in (0, 1), got {self.end_prob}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LanguageSpec:
    num_intentions: int
    alphabet_size: int
    letters_per_intention: int
    message_length: int
    prior_transition: np.ndarray
    prior_initial: np.ndarray
    emission_initial: np.ndarray
    emission_transition: np.ndarray
    noise_level: float
    seed: int
    end_prob: float | None = None

    def __post_init__(self) -> None:
        for name in ("prior_transition", "prior_initial", "emission_initial", "emission_transition"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        K, V = self.num_intentions, self.alphabet_size
        expected = {
            "prior_transition": (K, K),
            "prior_initial": (K,),
            "emission_initial": (K, V),
            "emission_transition": (K, V, V),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if (arr < 0).any() or not np.allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=1e-12):
                raise ConfigError(f"{name} rows must be probability vectors")

    # -- derived quantities -------------------------------------------------

    @property
    def newline(self) -> int:
        return self.alphabet_size

    @property
    def num_symbols(self) -> int:
        return self.alphabet_size + 1

    @property
    def fixed_length(self) -> bool:
        return self.end_prob is None

    def dedicated_letters(self, intention: int) -> range:
        n = self.letters_per_intention
        return range(intention * n, (intention + 1) * n)

    @cached_property
    def stationary(self) -> np.ndarray:
        """Stationary law of the intention chain (lazy power iteration to 1e-12)."""
        P = 0.5 * (self.prior_transition + np.eye(self.num_intentions))
        pi = np.full(self.num_intentions, 1.0 / self.num_intentions)
        for _ in range(1_000_000):
            nxt = pi @ P
            nxt /= nxt.sum()
            if np.abs(nxt - pi).sum() < 1e-12:
                pi = nxt
                break
            pi = nxt
        pi.setflags(write=False)
        return pi

    @cached_property
    def log_prior_transition(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.prior_transition)

    @cached_property
    def log_stationary(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.stationary)

    @cached_property
    def log_emission_initial(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.emission_initial)

    @cached_property
    def log_emission_transition(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.emission_transition)

    @cached_property
    def cdf_initial(self) -> np.ndarray:
        return np.cumsum(self.emission_initial, axis=-1)

    @cached_property
    def cdf_transition(self) -> np.ndarray:
        return np.cumsum(self.emission_transition, axis=-1)

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(_canonical_bytes(self._content())).hexdigest()

    # -- serialisation ------------------------------------------------------

    def _content(self) -> dict:
        return {
            "num_intentions": self.num_intentions,
            "alphabet_size": self.alphabet_size,
            "letters_per_intention": self.letters_per_intention,
            "message_length": self.message_length,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "end_prob": self.end_prob,
            "prior_initial": self.prior_initial.tolist(),
            "prior_transition": self.prior_transition.tolist(),
            "emission_initial": self.emission_initial.tolist(),
            "emission_transition": self.emission_transition.tolist(),
        }

    def to_json(self) -> str:
        doc = {"format": SPEC_FORMAT, "version": SPEC_VERSION, **self._content(), "fingerprint": self.fingerprint}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LanguageSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"spec is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != SPEC_FORMAT:
            raise FormatError("not a latentlang spec document")
        if doc.get("version") != SPEC_VERSION:
            raise VersionError(f"unsupported spec version {doc.get('version')!r}")
        claimed = doc.pop("fingerprint", None)
        for key in ("format", "version"):
            doc.pop(key)
        spec = cls(**doc)
        if claimed != spec.fingerprint:
            raise FormatError("spec fingerprint does not match its content")
        return spec

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LanguageSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _canonical_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def circulant_prior(num_intentions: int, stay_prob: float = 0.5) -> np.ndarray:
    """One-directional circular chain: stay with ``stay_prob``, else advance."""
    P = np.eye(num_intentions) * stay_prob
    P[np.arange(num_intentions), (np.arange(num_intentions) + 1) % num_intentions] += 1.0 - stay_prob
    return P


def build_spec(config: GeneratorConfig | None = None, **overrides) -> LanguageSpec:
    """Build a language from a config; a pure function of the config.

    Base rows are Dirichlet(1, ..., 1) over the intention's dedicated letters,
    drawn from ``SplitMix64(seed)`` in the order: for each intention, its
    initial row, then its transition rows for previous letters 0 .. V-1.  Each
    row is then mixed as ``(1 - eta) * row + eta / V``.
    """
    if config is None:
        config = GeneratorConfig(**overrides)
    elif overrides:
        config = GeneratorConfig(**{**config.__dict__, **overrides})
    config.validate()
    K, V, n = config.num_intentions, config.alphabet_size, config.letters_per_intention
    eta = config.noise_level
    rng = SplitMix64(config.seed)

    init = np.zeros((K, V))
    trans = np.zeros((K, V, V))
    for theta in range(K):
        block = slice(theta * n, (theta + 1) * n)
        init[theta, block] = rng.dirichlet_ones(n)
        for prev in range(V):
            trans[theta, prev, block] = rng.dirichlet_ones(n)

    init = (1.0 - eta) * init + eta / V
    trans = (1.0 - eta) * trans + eta / V
    return LanguageSpec(
        num_intentions=K,
        alphabet_size=V,
        letters_per_intention=n,
        message_length=config.message_length,
        prior_transition=circulant_prior(K, config.stay_prob),
        prior_initial=np.full(K, 1.0 / K),
        emission_initial=init,
        emission_transition=trans,
        noise_level=eta,
        seed=config.seed,
        end_prob=config.end_prob,
    )


# -- messages and corpora -------------------------------------------------------


@dataclass(frozen=True)
class Message:
    symbols: tuple[int, ...]
    generating_intention: int | None = None

    def __len__(self) -> int:
        return len(self.symbols)

    def body(self, newline: int) -> tuple[int, ...]:
        """Symbols without the trailing newline (if any)."""
        if self.symbols and self.symbols[-1] == newline:
            return self.symbols[:-1]
        return self.symbols

    def text(self, alphabet_size: int) -> str:
        return symbols_to_text(self.symbols, alphabet_size)


def symbols_to_text(symbols: Sequence[int], alphabet_size: int) -> str:
    return "".join("\n" if s == alphabet_size else chr(ord("a") + s) for s in symbols)


def text_to_symbols(text: str, alphabet_size: int) -> list[int]:
    out = []
    for ch in text:
        if ch == "\n":
            out.append(alphabet_size)
            continue
        s = ord(ch) - ord("a")
        if not 0 <= s < alphabet_size:
            raise ValueError(f"character {ch!r} outside alphabet a..{chr(ord('a') + alphabet_size - 1)}")
        out.append(s)
    return out


@dataclass(frozen=True, eq=False)
class Corpus:
    """Messages stored as one flat symbol stream plus message offsets."""

    stream: np.ndarray
    offsets: np.ndarray
    intentions: np.ndarray | None
    mode: Mode
    spec_fingerprint: str
    alphabet_size: int

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, i: int) -> Message:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        syms = tuple(int(s) for s in self.stream[self.offsets[i] : self.offsets[i + 1]])
        theta = None if self.intentions is None else int(self.intentions[i])
        return Message(syms, theta)

    def __iter__(self) -> Iterator[Message]:
        for i in range(len(self)):
            yield self[i]

    @property
    def messages(self) -> list[Message]:
        return list(self)

    @property
    def num_symbols(self) -> int:
        return int(self.offsets[-1])

    def head(self, num_messages: int) -> "Corpus":
        n = min(num_messages, len(self))
        return Corpus(
            stream=self.stream[: self.offsets[n]],
            offsets=self.offsets[: n + 1],
            intentions=None if self.intentions is None else self.intentions[:n],
            mode=self.mode,
            spec_fingerprint=self.spec_fingerprint,
            alphabet_size=self.alphabet_size,
        )

    def text(self) -> str:
        return symbols_to_text(self.stream.tolist(), self.alphabet_size)

    @classmethod
    def from_messages(
        cls, messages: Sequence[Message], alphabet_size: int, mode: Mode = Mode.CHAIN, spec_fingerprint: str = ""
    ) -> "Corpus":
        lengths = [len(m) for m in messages]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        stream = np.array([s for m in messages for s in m.symbols], dtype=np.int64)
        thetas = [m.generating_intention for m in messages]
        intentions = None if any(t is None for t in thetas) else np.array(thetas, dtype=np.int64)
        return cls(stream, offsets, intentions, Mode(mode), spec_fingerprint, alphabet_size)


# -- sampling -------------------------------------------------------------------


def sample_intention_path(
    spec: LanguageSpec, mode: Mode | str, count: int, rng: SplitMix64, intention: int | None = None
) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    mode = Mode(mode)
    u = rng.uniforms(count)
    first = intention if intention is not None else int(categorical(spec.prior_initial[None], u[:1])[0])
    if not 0 <= first < spec.num_intentions:
        raise ValueError(f"intention {first} out of range")
    path = np.empty(count, dtype=np.int64)
    path[0] = first
    if mode is Mode.CLAMPED:
        path[:] = first
        return path
    cdf = np.cumsum(spec.prior_transition, axis=-1).tolist()
    last_positive = [int(np.flatnonzero(row)[-1]) for row in spec.prior_transition]
    K = spec.num_intentions
    cur = first
    for i in range(1, count):
        j = bisect.bisect_right(cdf[cur], u[i])
        cur = j if j < K else last_positive[cur]
        path[i] = cur
    return path


def _draw_rows(cdf_rows: np.ndarray, probs_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    hit = u[:, None] < cdf_rows
    idx = hit.argmax(axis=-1)
    missed = ~hit.any(axis=-1)
    if missed.any():
        positive = probs_rows[missed] > 0
        idx[missed] = probs_rows.shape[-1] - 1 - positive[:, ::-1].argmax(axis=-1)
    return idx


def _sample_streams(spec: LanguageSpec, intentions: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Draw one message per (intention, stream) pair; symbol t uses uniform t."""
    N = len(intentions)
    L, nl = spec.message_length, spec.newline
    if spec.fixed_length:
        out = np.empty((N, L + 1), dtype=np.int64)
        u = stream_uniforms(states, 1)
        out[:, 0] = _draw_rows(spec.cdf_initial[intentions], spec.emission_initial[intentions], u)
        for t in range(1, L):
            u = stream_uniforms(states, t + 1)
            prev = out[:, t - 1]
            out[:, t] = _draw_rows(
                spec.cdf_transition[intentions, prev], spec.emission_transition[intentions, prev], u
            )
        out[:, L] = nl
        offsets = np.arange(0, N * (L + 1) + 1, L + 1, dtype=np.int64)
        return out.ravel(), offsets

    p_end = spec.end_prob
    pieces: list[list[int]] = [[] for _ in range(N)]
    u = stream_uniforms(states, 1)
    first = _draw_rows(spec.cdf_initial[intentions], spec.emission_initial[intentions], u)
    for i in range(N):
        pieces[i].append(int(first[i]))
    active = np.arange(N)
    prev = first.copy()
    step = 1
    while len(active):
        step += 1
        u = stream_uniforms(states[active], step)
        ends = u < p_end
        for i in active[ends]:
            pieces[i].append(nl)
        keep = ~ends
        active, u = active[keep], (u[keep] - p_end) / (1.0 - p_end)
        th, pv = intentions[active], prev[active]
        nxt = _draw_rows(spec.cdf_transition[th, pv], spec.emission_transition[th, pv], u)
        for i, s in zip(active, nxt):
            pieces[i].append(int(s))
        prev[active] = nxt
    lengths = np.array([len(p) for p in pieces], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return np.fromiter((s for p in pieces for s in p), dtype=np.int64, count=int(offsets[-1])), offsets


def sample_batch(spec: LanguageSpec, intentions, states) -> tuple[np.ndarray, np.ndarray]:
    """One message per entry of ``intentions``, message i driven by stream ``states[i]``.

    Returns the concatenated symbols and message offsets, as in :class:`Corpus`.
    """
    intentions = np.asarray(intentions, dtype=np.int64)
    if len(intentions) and (intentions.min() < 0 or intentions.max() >= spec.num_intentions):
        raise ValueError("intention out of range")
    return _sample_streams(spec, intentions, np.asarray(states, dtype=np.uint64))


def sample_message(spec: LanguageSpec, intention: int, rng: SplitMix64) -> Message:
    """One message under ``intention``; consumes one uniform per random symbol."""
    if not 0 <= intention < spec.num_intentions:
        raise ValueError(f"intention {intention} out of range [0, {spec.num_intentions})")
    stream, _ = _sample_streams(spec, np.array([intention]), np.array([rng.state], dtype=np.uint64))
    used = len(stream) - 1 if spec.fixed_length else len(stream)
    rng.uniforms(used)
    return Message(tuple(int(s) for s in stream), intention)


def sample_corpus(
    spec: LanguageSpec,
    num_messages: int,
    mode: Mode | str,
    rng: SplitMix64,
    intention: int | None = None,
) -> Corpus:
    """Sample a corpus; message i uses the stream ``derive(base, "message", i)``.

    ``base`` is one draw from ``rng``, so the output depends only on the
    stream state handed in and is independent of how messages are batched.
    """
    if num_messages < 1:
        raise ValueError("num_messages must be >= 1")
    mode = Mode(mode)
    base = rng.next_u64()
    path = sample_intention_path(spec, mode, num_messages, SplitMix64(derive(base, "path")), intention)
    states = derive_many(derive(base, "message"), np.arange(num_messages))
    stream, offsets = _sample_streams(spec, path, states)
    return Corpus(stream, offsets, path, mode, spec.fingerprint, spec.alphabet_size)


def message_stream(rng: SplitMix64, index: int) -> SplitMix64:
    """The per-message stream :func:`sample_corpus` uses for ``index`` (given the same ``rng``)."""
    base = SplitMix64(rng.state).next_u64()
    return SplitMix64(derive(derive(base, "message"), index))


# -- text IO ----------------------------------------------------------------------


def write_corpus(corpus: Corpus, path: str | Path, intentions_path: str | Path | None = None) -> None:
    Path(path).write_text(corpus.text(), encoding="utf-8", newline="\n")
    if intentions_path is not None:
        if corpus.intentions is None:
            raise ValueError("corpus has no recorded intentions")
        Path(intentions_path).write_text("".join(f"{t}\n" for t in corpus.intentions.tolist()), encoding="utf-8")


def read_corpus(
    path: str | Path,
    alphabet_size: int,
    message_length: int | None = None,
    intentions_path: str | Path | None = None,
    spec_fingerprint: str = "",
) -> Corpus:
    """Parse a one-message-per-line corpus file.

    ``message_length`` enforces the fixed-length format.  Raises
    :class:`CorpusFormatError` with a 1-based line number on bad input.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise CorpusFormatError(len(lines), "last message is missing its newline terminator")
    messages = []
    for lineno, line in enumerate(lines, start=1):
        if not line:
            raise CorpusFormatError(lineno, "empty message")
        if message_length is not None and len(line) != message_length:
            raise CorpusFormatError(lineno, f"expected {message_length} letters, found {len(line)}")
        try:
            syms = text_to_symbols(line, alphabet_size)
        except ValueError as exc:
            raise CorpusFormatError(lineno, str(exc)) from None
        messages.append(Message(tuple(syms) + (alphabet_size,)))
    if intentions_path is not None:
        raw = Path(intentions_path).read_text(encoding="utf-8").split()
        if len(raw) != len(messages):
            raise CorpusFormatError(len(raw), "intention sidecar length does not match corpus")
        messages = [Message(m.symbols, int(t)) for m, t in zip(messages, raw)]
    return Corpus.from_messages(messages, alphabet_size, Mode.CHAIN, spec_fingerprint)
