"""Sweeps behind the convergence, understanding-KL and ICL-KL data series.

Each sweep returns plain row dicts with a fixed column order (see the
``*_COLUMNS`` tuples); :func:`write_rows` turns them into CSV.  Units: nats
for entropies and KL, TV distance in [0, 1].  Output depends only on the
arguments, never on timing, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .density import DensityModel, mean_tv_gap, train
from .langspec import GeneratorConfig, LanguageSpec, Mode, build_spec, sample_corpus
from .oracle import CLAMPED, calibrate_noise, entropy_rate
from .rng import SplitMix64, derive
from .verify import (
    EXACT_DP,
    MODEL_TRUE,
    MONTE_CARLO,
    STEPWISE,
    TRUE_MODEL,
    OracleBackend,
    TrainedBackend,
    kl_icl,
    kl_understanding,
    significant_increases,
)

CONVERGENCE_COLUMNS = (
    "k", "train_symbols", "train_messages", "cross_entropy", "oracle_entropy", "excess", "mean_tv_gap",
)
UNDERSTANDING_COLUMNS = (
    "level", "target_epsilon", "eta", "backend", "direction", "estimator", "horizon", "num_samples",
    "kl", "standard_error",
)
ICL_COLUMNS = (
    "level", "target_epsilon", "eta", "backend", "direction", "m", "horizon", "num_samples",
    "kl", "standard_error", "significant_increase",
)
CROSSCHECK_COLUMNS = ("level", "eta", "horizon", "mc_kl", "mc_standard_error", "dp_kl", "z_score")

DEFAULT_TARGETS = (0.0, 0.06, 0.11)


@dataclass(frozen=True)
class AmbiguityLevel:
    name: str
    target_epsilon: float
    eta: float


def ambiguity_levels(
    targets: Sequence[float] = DEFAULT_TARGETS, config: GeneratorConfig | None = None
) -> list[AmbiguityLevel]:
    """Noise levels whose corpora have the given mean per-message ambiguity."""
    config = config or GeneratorConfig()
    levels = []
    for t in targets:
        eta = 0.0 if t == 0 else calibrate_noise(t, config)
        levels.append(AmbiguityLevel(f"eps={t:g}", float(t), eta))
    return levels


def _messages_for(spec: LanguageSpec, symbols: int) -> int:
    return max(1, -(-symbols // (spec.message_length + 1)))


def train_corpus(spec: LanguageSpec, symbols: int, seed: int, chunk_messages: int = 100_000, k: int = 2,
                 lam: float = 0.1) -> DensityModel:
    """Count model over a fresh chain corpus of about ``symbols`` symbols, built chunk by chunk.

    Each chunk is an independent corpus with its own derived seed; counts are
    merged, so memory stays bounded for large corpora.
    """
    total = _messages_for(spec, symbols)
    model = None
    for c, lo in enumerate(range(0, total, chunk_messages)):
        n = min(chunk_messages, total - lo)
        corpus = sample_corpus(spec, n, Mode.CHAIN, SplitMix64(derive(seed, "train", c)))
        part = train(corpus, k=k, lam=lam, message_length=spec.message_length)
        model = part if model is None else model.merge(part)
    return model


def convergence_sweep(
    spec: LanguageSpec,
    sizes: Sequence[int] = (10_000, 100_000, 1_000_000),
    ks: Sequence[int] = (1, 2, 3),
    seed: int = 0,
    heldout_messages: int = 5_000,
    lam: float = 0.1,
) -> list[dict]:
    """Held-out cross-entropy and TV gap of count models on nested training prefixes.

    Training sets are prefixes (in whole messages) of one chain corpus, so the
    series for each k is a learning curve over the same data.
    """
    sizes = sorted(int(n) for n in sizes)
    heldout = sample_corpus(spec, heldout_messages, Mode.CHAIN, SplitMix64(derive(seed, "heldout")))
    oracle = entropy_rate(spec, heldout.stream)
    biggest = sample_corpus(spec, _messages_for(spec, sizes[-1]), Mode.CHAIN, SplitMix64(derive(seed, "train")))
    rows = []
    for k in ks:
        for n in sizes:
            data = biggest.head(_messages_for(spec, n))
            model = train(data, k=k, lam=lam, message_length=spec.message_length)
            ce = model.cross_entropy(heldout)
            rows.append({
                "k": k,
                "train_symbols": data.num_symbols,
                "train_messages": len(data),
                "cross_entropy": ce,
                "oracle_entropy": oracle,
                "excess": ce - oracle,
                "mean_tv_gap": mean_tv_gap(model, spec, heldout),
            })
    return rows


def understanding_sweep(
    levels: Sequence[AmbiguityLevel],
    config: GeneratorConfig | None = None,
    horizon: int = 20,
    num_samples: int = 10_000,
    seed: int = 0,
    trained_symbols: int | None = None,
    k: int = 2,
) -> list[dict]:
    """KL of the oracle (and optionally a trained model) against the intention-conditioned truth.

    The oracle is measured as KL(model || truth).  A count model is smoothed,
    so it puts mass where the truth has none and that direction is infinite;
    trained rows (and matching oracle rows) use KL(truth || model).
    """
    config = config or GeneratorConfig()
    rows = []
    for lvl in levels:
        spec = build_spec(config, noise_level=lvl.eta)
        runs = [("oracle", OracleBackend(spec), MODEL_TRUE), ("oracle", OracleBackend(spec), TRUE_MODEL)]
        if trained_symbols:
            model = train_corpus(spec, trained_symbols, derive(seed, "model", lvl.name), k=k)
            runs.append(("trained", TrainedBackend(model), TRUE_MODEL))
        for name, backend, direction in runs:
            est = kl_understanding(
                backend, spec, horizon, num_samples, SplitMix64(derive(seed, "understanding")),
                direction=direction, estimator=STEPWISE,
            )
            rows.append({
                "level": lvl.name, "target_epsilon": lvl.target_epsilon, "eta": lvl.eta, "backend": name,
                "direction": direction, "estimator": STEPWISE, "horizon": horizon, "num_samples": num_samples,
                "kl": est.value, "standard_error": est.standard_error,
            })
    return rows


def icl_sweep(
    levels: Sequence[AmbiguityLevel],
    config: GeneratorConfig | None = None,
    m_range: Iterable[int] = range(1, 9),
    horizon: int = 20,
    num_samples: int = 10_000,
    seed: int = 0,
    direction: str = MODEL_TRUE,
) -> list[dict]:
    """KL against ``q(. | input, theta*)`` as same-intention messages are prepended."""
    config = config or GeneratorConfig()
    rows = []
    for lvl in levels:
        spec = build_spec(config, noise_level=lvl.eta)
        ests = kl_icl(
            OracleBackend(spec, CLAMPED), spec, m_range, horizon, num_samples,
            SplitMix64(derive(seed, "icl")), direction=direction, estimator=STEPWISE,
        )
        flags = [False] + significant_increases(ests)
        for est, flag in zip(ests, flags):
            rows.append({
                "level": lvl.name, "target_epsilon": lvl.target_epsilon, "eta": lvl.eta, "backend": "oracle",
                "direction": direction, "m": est.m, "horizon": horizon, "num_samples": num_samples,
                "kl": est.value, "standard_error": est.standard_error, "significant_increase": flag,
            })
    return rows


def estimator_crosscheck(
    levels: Sequence[AmbiguityLevel],
    config: GeneratorConfig | None = None,
    num_samples: int = 10_000,
    num_prompts: int = 100,
    horizon: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Monte Carlo (log-ratio) against exact enumeration on a shared prompt set."""
    config = config or GeneratorConfig()
    rows = []
    for lvl in levels:
        spec = build_spec(config, noise_level=lvl.eta)
        backend = OracleBackend(spec)
        mc = kl_understanding(backend, spec, horizon, num_samples, SplitMix64(derive(seed, "crosscheck")),
                              method=MONTE_CARLO, num_prompts=num_prompts)
        dp = kl_understanding(backend, spec, horizon, num_samples, SplitMix64(derive(seed, "crosscheck")),
                              method=EXACT_DP, num_prompts=num_prompts)
        z = 0.0 if mc.standard_error == 0 else (mc.value - dp.value) / mc.standard_error
        rows.append({
            "level": lvl.name, "eta": lvl.eta, "horizon": horizon, "mc_kl": mc.value,
            "mc_standard_error": mc.standard_error, "dp_kl": dp.value, "z_score": z,
        })
    return rows


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])
