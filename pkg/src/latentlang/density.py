"""Smoothed count model of the next symbol given a bounded feature context.

The context of the symbol at offset j is the previous ``k`` symbols (padded
with a begin marker at the start of a stream) together with the number of
letters already written in the current message, capped at L.  Training is
one counting pass, i.e. the closed-form maximum-likelihood estimate with
additive smoothing ``lam``:

    p(s | ctx) = (count(ctx, s) + lam) / (count(ctx) + lam * (V + 1))
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyCorpus, FormatError, SpecMismatch, VersionError
from .langspec import Corpus, LanguageSpec, Message
from .oracle import stream_predictive

MODEL_FORMAT = "latentlang-density"
MODEL_VERSION = 1


class FeatureContext(NamedTuple):
    last_k_symbols: tuple[int, ...]  # oldest first; begin marker = V + 1
    position_in_message: int

    @classmethod
    def from_history(cls, history: Sequence[int], k: int, alphabet_size: int, message_length: int) -> "FeatureContext":
        history = [int(s) for s in history]
        bos, nl = alphabet_size + 1, alphabet_size
        window = ([bos] * k + history)[-k:]
        pos = 0
        for s in reversed(history):
            if s == nl:
                break
            pos += 1
        return cls(tuple(window), min(pos, message_length))


def _positions(stream: np.ndarray, newline: int, cap: int) -> np.ndarray:
    """Letters written in the current message before each offset (capped)."""
    N = len(stream)
    is_nl = stream == newline
    # index of the most recent newline strictly before j, or -1
    marks = np.where(is_nl, np.arange(N), -1)
    last_nl = np.maximum.accumulate(np.concatenate([[-1], marks[:-1]])) if N else marks
    return np.minimum(np.arange(N) - last_nl - 1, cap)


@dataclass
class DensityModel:
    k: int
    lam: float
    alphabet_size: int
    message_length: int
    contexts: np.ndarray  # sorted context codes, int64
    counts: np.ndarray  # (n_contexts, V+1) int64
    total_training_symbols: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")

    # -- context coding -----------------------------------------------------

    @property
    def num_symbols(self) -> int:
        return self.alphabet_size + 1

    @property
    def _base(self) -> int:
        return self.alphabet_size + 2

    def encode(self, ctx: FeatureContext) -> int:
        code = 0
        for s in ctx.last_k_symbols:
            code = code * self._base + s
        return code * (self.message_length + 1) + ctx.position_in_message

    def decode(self, code: int) -> FeatureContext:
        code, pos = divmod(int(code), self.message_length + 1)
        syms = []
        for _ in range(self.k):
            code, s = divmod(code, self._base)
            syms.append(s)
        return FeatureContext(tuple(reversed(syms)), pos)

    def stream_codes(self, stream) -> np.ndarray:
        """Context code in force before every symbol of a fresh stream."""
        stream = np.asarray(stream, dtype=np.int64)
        N, k = len(stream), self.k
        padded = np.concatenate([np.full(k, self.alphabet_size + 1, dtype=np.int64), stream])
        code = np.zeros(N, dtype=np.int64)
        for i in range(k):
            code = code * self._base + padded[i : i + N]
        return code * (self.message_length + 1) + _positions(stream, self.alphabet_size, self.message_length)

    # -- prediction ---------------------------------------------------------

    def predict_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        out = np.full((len(codes), self.num_symbols), self.lam)
        if len(self.contexts):
            idx = np.searchsorted(self.contexts, codes)
            idx_c = np.minimum(idx, len(self.contexts) - 1)
            seen = self.contexts[idx_c] == codes
            out[seen] += self.counts[idx_c[seen]]
        return out / out.sum(axis=1, keepdims=True)

    def next_symbol(self, history: Sequence[int]) -> np.ndarray:
        ctx = FeatureContext.from_history(history, self.k, self.alphabet_size, self.message_length)
        return self.predict_codes(np.array([self.encode(ctx)]))[0]

    def predict_stream(self, stream, chunk: int = 262144) -> np.ndarray:
        """(N, V+1) predictions before every symbol of a fresh stream."""
        codes = self.stream_codes(stream)
        out = np.empty((len(codes), self.num_symbols))
        for lo in range(0, len(codes), chunk):
            out[lo : lo + chunk] = self.predict_codes(codes[lo : lo + chunk])
        return out

    def stream_log_probs(self, stream) -> np.ndarray:
        stream = np.asarray(stream, dtype=np.int64)
        codes = self.stream_codes(stream)
        # only the observed symbol's probability is needed
        num = np.full(len(codes), self.lam)
        den = np.full(len(codes), self.lam * self.num_symbols)
        if len(self.contexts):
            idx = np.minimum(np.searchsorted(self.contexts, codes), len(self.contexts) - 1)
            seen = self.contexts[idx] == codes
            rows = idx[seen]
            num[seen] += self.counts[rows, stream[seen]]
            den[seen] += self.row_totals[rows]
        return np.log(num) - np.log(den)

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def sequence_logprob(self, X) -> float:
        return float(self.stream_log_probs(_stream_of(X)).sum())

    def cross_entropy(self, corpus) -> float:
        stream = _stream_of(corpus)
        if len(stream) == 0:
            raise EmptyCorpus("cannot evaluate on an empty corpus")
        return float(-self.stream_log_probs(stream).mean())

    def merge(self, other: "DensityModel") -> "DensityModel":
        """Sum the counts of two models with identical settings."""
        if (self.k, self.lam, self.alphabet_size, self.message_length) != (
            other.k, other.lam, other.alphabet_size, other.message_length,
        ):
            raise ValueError("models have different settings")
        ctx = np.union1d(self.contexts, other.contexts)
        counts = np.zeros((len(ctx), self.num_symbols), dtype=np.int64)
        counts[np.searchsorted(ctx, self.contexts)] += self.counts
        counts[np.searchsorted(ctx, other.contexts)] += other.counts
        return DensityModel(
            self.k, self.lam, self.alphabet_size, self.message_length, ctx, counts,
            self.total_training_symbols + other.total_training_symbols,
        )

    # -- batch stepping (used as an LM backend) --------------------------------

    def start(self, histories: Sequence[Sequence[int]]) -> "ContextState":
        bos = self.alphabet_size + 1
        window = np.full((len(histories), self.k), bos, dtype=np.int64)
        pos = np.zeros(len(histories), dtype=np.int64)
        for i, h in enumerate(histories):
            ctx = FeatureContext.from_history(h, self.k, self.alphabet_size, self.message_length)
            window[i] = ctx.last_k_symbols
            pos[i] = ctx.position_in_message
        return ContextState(window, pos)

    def state_codes(self, state: "ContextState") -> np.ndarray:
        code = np.zeros(len(state.position), dtype=np.int64)
        for i in range(self.k):
            code = code * self._base + state.window[:, i]
        return code * (self.message_length + 1) + state.position

    def predict_state(self, state: "ContextState") -> np.ndarray:
        return self.predict_codes(self.state_codes(state))

    def advance_state(self, state: "ContextState", symbols) -> "ContextState":
        symbols = np.asarray(symbols, dtype=np.int64)
        window = np.concatenate([state.window[:, 1:], symbols[:, None]], axis=1)
        pos = np.where(symbols == self.alphabet_size, 0, np.minimum(state.position + 1, self.message_length))
        return ContextState(window, pos)

    # -- serialisation --------------------------------------------------------

    def to_json(self) -> str:
        records = []
        for code, row in zip(self.contexts.tolist(), self.counts.tolist()):
            ctx = self.decode(code)
            records.append(
                {
                    "context": list(ctx.last_k_symbols),
                    "position": ctx.position_in_message,
                    "counts": [[s, c] for s, c in enumerate(row) if c],
                }
            )
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "k": self.k,
            "lambda": self.lam,
            "alphabet_size": self.alphabet_size,
            "message_length": self.message_length,
            "total_training_symbols": self.total_training_symbols,
            "records": records,
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DensityModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"model file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
            raise FormatError("not a latentlang density model file")
        if doc.get("version") != MODEL_VERSION:
            raise VersionError(f"unsupported model version {doc.get('version')!r}")
        try:
            shell = cls(
                k=int(doc["k"]),
                lam=float(doc["lambda"]),
                alphabet_size=int(doc["alphabet_size"]),
                message_length=int(doc["message_length"]),
                contexts=np.zeros(0, dtype=np.int64),
                counts=np.zeros((0, int(doc["alphabet_size"]) + 1), dtype=np.int64),
                total_training_symbols=int(doc["total_training_symbols"]),
            )
            records = doc["records"]
            codes = np.array(
                [shell.encode(FeatureContext(tuple(r["context"]), r["position"])) for r in records], dtype=np.int64
            )
            counts = np.zeros((len(records), shell.num_symbols), dtype=np.int64)
            for i, r in enumerate(records):
                for s, c in r["counts"]:
                    counts[i, s] = c
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"malformed model file: {exc}") from exc
        order = np.argsort(codes, kind="stable")
        shell.contexts, shell.counts = codes[order], counts[order]
        return shell


def _stream_of(X) -> np.ndarray:
    if isinstance(X, Corpus):
        return X.stream
    if isinstance(X, Message):
        return np.asarray(X.symbols, dtype=np.int64)
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Message):
        return np.array([s for m in X for s in m.symbols], dtype=np.int64)
    return np.asarray(X, dtype=np.int64)


@dataclass
class ContextState:
    window: np.ndarray  # (B, k)
    position: np.ndarray  # (B,)


def train(
    corpus,
    k: int = 2,
    lam: float = 0.1,
    alphabet_size: int | None = None,
    message_length: int | None = None,
) -> DensityModel:
    """Count every (context, next symbol) event over the concatenated corpus.

    ``message_length`` defaults to the longest message in the corpus and
    ``alphabet_size`` to the corpus alphabet.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not lam > 0:
        raise ValueError("lam must be > 0")
    stream = _stream_of(corpus)
    if len(stream) == 0:
        raise EmptyCorpus("cannot train on an empty corpus")
    if alphabet_size is None:
        if not isinstance(corpus, Corpus):
            raise ValueError("alphabet_size is required unless training on a Corpus")
        alphabet_size = corpus.alphabet_size
    if message_length is None:
        nl = np.flatnonzero(stream == alphabet_size)
        gaps = np.diff(np.concatenate([[-1], nl])) - 1
        message_length = int(gaps.max()) if len(gaps) else len(stream)
    model = DensityModel(
        k, lam, alphabet_size, message_length,
        np.zeros(0, dtype=np.int64), np.zeros((0, alphabet_size + 1), dtype=np.int64),
    )
    codes = model.stream_codes(stream)
    pair = codes * model.num_symbols + stream
    uniq, freq = np.unique(pair, return_counts=True)
    ctx_codes, sym = np.divmod(uniq, model.num_symbols)
    model.contexts, inverse = np.unique(ctx_codes, return_inverse=True)
    model.counts = np.zeros((len(model.contexts), model.num_symbols), dtype=np.int64)
    model.counts[inverse, sym] = freq
    model.total_training_symbols = int(len(stream))
    return model


def next_symbol(model: DensityModel, history: Sequence[int]) -> np.ndarray:
    return model.next_symbol(history)


def sequence_logprob(model: DensityModel, X) -> float:
    return model.sequence_logprob(X)


def cross_entropy(model: DensityModel, corpus) -> float:
    return model.cross_entropy(corpus)


def tv_gaps(model, spec: LanguageSpec, eval_set, across: str = "chain") -> np.ndarray:
    """Per-position total-variation distance between ``model`` and the oracle."""
    stream = _stream_of(eval_set)
    if len(stream) and (stream.min() < 0 or stream.max() > spec.alphabet_size):
        raise SpecMismatch("evaluation symbols fall outside the spec alphabet")
    if getattr(model, "alphabet_size", spec.alphabet_size) != spec.alphabet_size:
        raise SpecMismatch("model and spec alphabets differ")
    p = model.predict_stream(stream)
    q = stream_predictive(spec, stream, across)
    return 0.5 * np.abs(p - q).sum(axis=1)


def mean_tv_gap(model, spec: LanguageSpec, eval_set, across: str = "chain") -> float:
    """Average over evaluation positions of TV(model, oracle next-symbol law)."""
    gaps = tv_gaps(model, spec, eval_set, across)
    if len(gaps) == 0:
        raise EmptyCorpus("empty evaluation set")
    return float(gaps.mean())


def save(model: DensityModel, path: str | Path) -> None:
    Path(path).write_text(model.to_json(), encoding="utf-8")


def load(path: str | Path) -> DensityModel:
    return DensityModel.from_json(Path(path).read_text(encoding="utf-8"))
