"""Command-line entry point: gen, train, eval, verify, experiment.

Exit codes: 0 success, 1 a verification failed, 2 usage/configuration/missing
input, 3 malformed data (with the offending line number).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .density import load as load_model, mean_tv_gap, save as save_model, train
from .errors import (
    ConfigError,
    CorpusFormatError,
    EmptyCorpus,
    FormatError,
    LatentLangError,
    SpecMismatch,
    VersionError,
)
from .experiments import (
    CONVERGENCE_COLUMNS,
    CROSSCHECK_COLUMNS,
    ICL_COLUMNS,
    UNDERSTANDING_COLUMNS,
    ambiguity_levels,
    convergence_sweep,
    estimator_crosscheck,
    icl_sweep,
    understanding_sweep,
    write_rows,
)
from .langspec import Corpus, GeneratorConfig, LanguageSpec, Mode, build_spec, read_corpus, sample_corpus, write_corpus
from .oracle import CLAMPED, corpus_epsilons, entropy_rate
from .rng import SplitMix64, derive
from . import verify as vf

OUTPUT_ENV = "LATENTLANG_OUTPUT_DIR"
EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
VERIFIERS = ("sparsity", "1", "2", "3", "4", "mixture", "cot", "all")

# flags that only choose where files go; kept out of the config hash
_LOCATION_KEYS = {"out_dir", "config", "command", "func"}


class UsageError(LatentLangError):
    pass


# -- config plumbing ----------------------------------------------------------------


def canonical_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _LOCATION_KEYS}
    return json.loads(json.dumps(cfg, sort_keys=True, default=str))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def output_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir or os.environ.get(OUTPUT_ENV) or "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_summary(args: argparse.Namespace, out: Path, results: dict, name: str = "summary.json") -> Path:
    cfg = canonical_config(args)
    doc = {
        "command": args.command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "results": results,
    }
    path = out / name
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _generator_config(args: argparse.Namespace, eta: float | None = None) -> GeneratorConfig:
    cfg = GeneratorConfig(
        num_intentions=args.intentions,
        alphabet_size=args.alphabet,
        letters_per_intention=args.letters_per_intention,
        message_length=args.length,
        noise_level=args.eta if eta is None else eta,
        seed=args.spec_seed,
        stay_prob=args.stay_prob,
        end_prob=args.end_prob,
    )
    cfg.validate()
    return cfg


def _load_spec(args: argparse.Namespace) -> LanguageSpec:
    if getattr(args, "spec", None):
        return LanguageSpec.load(_existing(args.spec))
    return build_spec(_generator_config(args))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _read(path: str, spec: LanguageSpec):
    corpus = read_corpus(
        _existing(path),
        spec.alphabet_size,
        spec.message_length if spec.fixed_length else None,
        spec_fingerprint=spec.fingerprint,
    )
    if len(corpus) == 0:
        raise EmptyCorpus(f"corpus {path} holds no messages")
    return corpus


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- commands ---------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    spec = build_spec(_generator_config(args))
    corpus = sample_corpus(spec, args.messages, Mode(args.mode), SplitMix64(args.seed), args.intention)
    out = output_dir(args)
    write_corpus(corpus, out / "corpus.txt", out / "corpus.intentions" if args.sidecar else None)
    spec.save(out / "spec.json")
    results = {"messages": len(corpus), "symbols": corpus.num_symbols, "spec_fingerprint": spec.fingerprint}
    print(f"messages: {len(corpus)}  symbols: {corpus.num_symbols}")
    if args.measure_epsilon:
        eps, top = corpus_epsilons(spec, corpus)
        results.update(mean_epsilon=float(eps.mean()), max_epsilon=float(eps.max()),
                       argmax_matches=float(np.mean(top == corpus.intentions)))
        print(f"mean epsilon: {eps.mean():.6g}  max epsilon: {eps.max():.6g}")
    write_summary(args, out, results)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    corpus = _read(args.corpus, spec)
    if args.heldout:
        heldout = _read(args.heldout, spec)
        train_set = corpus
    else:
        cut = len(corpus) - max(1, int(round(len(corpus) * args.heldout_fraction)))
        if cut < 1:
            raise EmptyCorpus("corpus too small to hold out evaluation messages")
        train_set, heldout = corpus.head(cut), _tail(corpus, cut)
    model = train(train_set, k=args.k, lam=args.lam, message_length=spec.message_length)
    out = output_dir(args)
    save_model(model, out / "model.json")
    ce = model.cross_entropy(heldout)
    results = {"train_symbols": train_set.num_symbols, "heldout_symbols": heldout.num_symbols, "cross_entropy": ce}
    print(f"held-out cross-entropy: {ce:.6f} nats/symbol")
    if args.spec or args.oracle:
        oracle = entropy_rate(spec, heldout.stream)
        results.update(oracle_entropy=oracle, excess=ce - oracle)
        print(f"oracle entropy rate:    {oracle:.6f} nats/symbol (excess {ce - oracle:.6f})")
    write_summary(args, out, results)
    return EXIT_OK


def _tail(corpus: Corpus, start: int) -> Corpus:
    lo = int(corpus.offsets[start])
    ints = None if corpus.intentions is None else corpus.intentions[start:]
    return Corpus(corpus.stream[lo:], corpus.offsets[start:] - lo, ints, corpus.mode, corpus.spec_fingerprint,
                  corpus.alphabet_size)


def cmd_eval(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    model = load_model(_existing(args.model))
    if model.alphabet_size != spec.alphabet_size:
        raise SpecMismatch("model and spec alphabets differ")
    corpus = _read(args.corpus, spec)
    ce = model.cross_entropy(corpus)
    oracle = entropy_rate(spec, corpus.stream)
    gap = mean_tv_gap(model, spec, corpus)
    results = {"cross_entropy": ce, "oracle_entropy": oracle, "excess": ce - oracle, "mean_tv_gap": gap}
    print(f"cross-entropy {ce:.6f}  oracle {oracle:.6f}  excess {ce - oracle:.6f}  mean TV gap {gap:.6f}")
    write_summary(args, output_dir(args), results, "eval_summary.json")
    return EXIT_OK


def _backend(args, spec: LanguageSpec, across: str):
    if args.backend == "trained":
        if not args.model:
            raise UsageError("--backend trained needs --model")
        return vf.TrainedBackend(load_model(_existing(args.model)))
    return vf.OracleBackend(spec, across)


def _run_verifier(name: str, args, spec: LanguageSpec, rng: SplitMix64) -> tuple[list, dict]:
    if name == "sparsity":
        checks = vf.check_sparsity(spec, args.trials, rng)
        return checks, vf.summarize(checks)
    if name == "1":
        checks = vf.check_prop1(spec, args.trials, rng)
        return checks, vf.summarize(checks)
    if name == "2":
        backend = _backend(args, spec, "chain")
        checks = vf.check_prop2(backend, spec, args.trials, args.horizon, rng)
        checks += vf.check_prop2_exhaustive(backend, spec, args.exhaustive_prompts, rng, horizon=3)
        return checks, vf.summarize(checks)
    if name in ("3", "4"):
        backend = _backend(args, spec, CLAMPED)
        checks = vf.check_icl(backend, spec, range(1, args.m_max + 1), args.trials, rng, args.horizon)
        summary = vf.summarize(checks)
        summary["max_symbol_deviation"] = max(c.extra["max_symbol_deviation"] for c in checks)
        summary["nonincreasing_fraction"] = vf.nonincreasing_fraction(checks)
        print(f"  max per-symbol deviation: {summary['max_symbol_deviation']:.3e}")
        if name == "3" and spec.noise_level == 0 and summary["max_symbol_deviation"] >= 1e-10:
            summary["violations"] += 1
        return checks, summary
    if name == "mixture":
        checks = vf.instruction_mixture_suite(spec, max(1, args.trials // 100), 100, rng)
        summary = vf.summarize(checks)
        summary["max_relative_deviation"] = max(c.extra["relative_deviation"] for c in checks)
        if spec.noise_level == 0 and summary["max_relative_deviation"] > 1e-10:
            summary["violations"] += 1
        return checks, summary
    if name == "cot":
        rows = []
        violations = 0
        for m in range(1, args.m_max + 1):
            for start in range(spec.num_intentions):
                chain = [(start + i) % spec.num_intentions for i in range(m + 1)]
                rec = vf.cot_compare(spec, chain, rng=SplitMix64(derive(args.seed, "cot", m, start)))
                rows.append(vf.BoundCheck(
                    rec.direct, rec.chained, trial=start, m=m, eta=spec.noise_level,
                    extra={"direct_factor": rec.direct_factor, "chained_factor": rec.chained_factor,
                           "ratio": rec.ratio},
                ))
                violations += rec.ratio < 1 - 1e-12
        return rows, {"checks": len(rows), "violations": int(violations)}
    raise UsageError(f"unknown verifier {name!r}")


def cmd_verify(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    out = output_dir(args)
    names = ["sparsity", "1", "2", "3", "mixture", "cot"] if args.prop == "all" else [args.prop]
    results, failed = {}, False
    for name in names:
        start = time.perf_counter()
        rng = SplitMix64(derive(args.seed, "verify", name))
        checks, summary = _run_verifier(name, args, spec, rng)
        label = f"prop{name}" if name.isdigit() else name
        vf.write_checks_csv(checks, out / f"verify_{label}.csv")
        results[label] = summary
        status = "PASS" if summary["violations"] == 0 else "FAIL"
        print(f"{label}: {status} ({summary['checks']} checks, {summary['violations']} violations)")
        _log(f"{label}: {time.perf_counter() - start:.2f}s")
        if summary["violations"]:
            failed = True
            if summary.get("first_violation"):
                _log("offending trial: " + json.dumps(summary["first_violation"], default=_jsonable))
    write_summary(args, out, results, "verify_summary.json")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    out = output_dir(args)
    base = _generator_config(args, eta=0.0)
    which = ["convergence", "understanding", "icl", "crosscheck"] if args.which == "all" else [args.which]
    results = {}
    levels = None
    for name in which:
        start = time.perf_counter()
        if name == "convergence":
            rows = convergence_sweep(build_spec(base, noise_level=args.eta), args.sizes, args.ks, args.seed)
            write_rows(rows, CONVERGENCE_COLUMNS, out / "convergence.csv")
        else:
            levels = levels or ambiguity_levels(args.levels, base)
            if name == "understanding":
                rows = understanding_sweep(levels, base, args.horizon, args.samples, args.seed,
                                           trained_symbols=args.trained_symbols or None)
                write_rows(rows, UNDERSTANDING_COLUMNS, out / "understanding_kl.csv")
            elif name == "icl":
                rows = icl_sweep(levels, base, range(1, args.m_max + 1), args.horizon, args.samples, args.seed)
                write_rows(rows, ICL_COLUMNS, out / "icl_kl.csv")
            else:
                rows = estimator_crosscheck(levels, base, args.samples, seed=args.seed)
                write_rows(rows, CROSSCHECK_COLUMNS, out / "kl_crosscheck.csv")
        results[name] = {"rows": len(rows)}
        print(f"{name}: {len(rows)} rows")
        _log(f"{name}: {time.perf_counter() - start:.2f}s")
    if levels:
        results["levels"] = [{"name": l.name, "target_epsilon": l.target_epsilon, "eta": l.eta} for l in levels]
    write_summary(args, out, results, "experiment_summary.json")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _add_language(p: argparse.ArgumentParser, spec_file: bool = True) -> None:
    g = p.add_argument_group("language")
    g.add_argument("--eta", type=float, default=0.0, help="noise level mixed into every emission row")
    g.add_argument("--intentions", type=int, default=6)
    g.add_argument("--alphabet", type=int, default=18)
    g.add_argument("--letters-per-intention", type=int, default=3)
    g.add_argument("--length", type=int, default=20, help="letters per message")
    g.add_argument("--stay-prob", type=float, default=0.5)
    g.add_argument("--end-prob", type=float, default=None, help="geometric message length instead of fixed")
    g.add_argument("--spec-seed", type=int, default=42, help="seed of the emission-table draw")
    if spec_file:
        g.add_argument("--spec", help="spec JSON file (overrides the language flags)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentlang", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./results)")

    p = sub.add_parser("gen", help="sample a corpus")
    _add_language(p, spec_file=False)
    common(p)
    p.add_argument("--messages", type=int, default=1000)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="chain")
    p.add_argument("--intention", type=int, default=None, help="intention for clamped mode")
    p.add_argument("--sidecar", action="store_true", help="also write generating intentions")
    p.add_argument("--measure-epsilon", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit a count model to a corpus")
    _add_language(p)
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--heldout", help="held-out corpus (default: tail of --corpus)")
    p.add_argument("--heldout-fraction", type=float, default=0.1)
    p.add_argument("--k", type=int, default=2, help="context length in symbols")
    p.add_argument("--lam", type=float, default=0.1, help="additive smoothing")
    p.add_argument("--oracle", action="store_true", help="also report the oracle entropy rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare a model with the oracle on a corpus")
    _add_language(p)
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run bound verifiers")
    _add_language(p)
    common(p)
    p.add_argument("--prop", choices=VERIFIERS, required=True,
                   help="1, 2, 3/4 (in-context bounds), sparsity, mixture, cot or all")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=3, help="continuation length")
    p.add_argument("--m-max", type=int, default=8)
    p.add_argument("--exhaustive-prompts", type=int, default=100)
    p.add_argument("--backend", choices=["oracle", "trained"], default="oracle")
    p.add_argument("--model", help="model JSON for --backend trained")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("experiment", help="run the experiment sweeps")
    _add_language(p, spec_file=False)
    common(p)
    p.add_argument("--which", choices=["convergence", "understanding", "icl", "crosscheck", "all"], default="all")
    p.add_argument("--sizes", type=int, nargs="+", default=[10_000, 100_000, 1_000_000])
    p.add_argument("--ks", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--levels", type=float, nargs="+", default=[0.0, 0.06, 0.11], help="target mean ambiguities")
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--m-max", type=int, default=8)
    p.add_argument("--trained-symbols", type=int, default=1_000_000, help="0 skips the trained backend")
    p.set_defaults(func=cmd_experiment)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        defaults = json.loads(_existing(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(defaults, dict):
        raise ConfigError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest for a in sub._actions}  # noqa: SLF001
    unknown = set(defaults) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0) and EXIT_USAGE
    except CorpusFormatError as exc:
        print(f"error: malformed corpus, {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, VersionError, SpecMismatch, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, UsageError, EmptyCorpus, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
