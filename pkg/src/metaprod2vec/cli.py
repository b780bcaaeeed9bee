"""Experiment pipeline CLI: train embeddings, evaluate methods, ablate, query.

Every command writes the exact configuration it resolved next to its outputs
so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

from . import evaluation, scorers, trainer
from .corpus import (
    PHASE_FINAL,
    PHASE_TUNING,
    MetadataMap,
    build_vocabulary,
    load_metadata,
    load_sessions,
    split_sessions,
)
from .pairs import PairKind
from .scorers import (
    COCOUNT_ROW_COSINE,
    BestOfScorer,
    CoCountScorer,
    EmbeddingScorer,
    MixScorer,
)

logger = logging.getLogger(__name__)

MODE_PROD2VEC = "prod2vec"
MODE_METAPROD2VEC = "metaprod2vec"

METHOD_ORDER = [
    "bestof",
    "cocounts",
    "prod2vec",
    "metaprod2vec",
    "mix_prod2vec",
    "mix_metaprod2vec",
]
METHOD_LABELS = {
    "bestof": "BestOf",
    "cocounts": "CoCounts",
    "prod2vec": "Prod2Vec",
    "metaprod2vec": "Meta-Prod2Vec",
    "mix_prod2vec": "Mix(Prod2Vec,CoCounts)",
    "mix_metaprod2vec": "Mix(Meta-Prod2Vec,CoCounts)",
}

DEFAULT_ALPHA_GRID = [round(0.05 * i, 2) for i in range(21)]


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


@dataclass
class RunConfig:
    sessions: str = ""
    metadata: dict[str, str] = field(default_factory=dict)
    out: str = ""
    mode: str = MODE_METAPROD2VEC
    phase: str = "both"
    dim: int = 50
    window: int = 3
    epochs: int = 10
    negatives: int = 5
    learning_rate: float = 0.025
    lam: float = 1.0
    lambda_im: float | None = None
    lambda_jm: float | None = None
    lambda_mi: float | None = None
    lambda_mm: float | None = None
    min_count: int = 5
    power: float = 0.75
    seed: int = 1
    threads: int = 1
    k_list: list[int] = field(default_factory=lambda: [10, 20])
    alpha: float | None = None
    alpha_grid: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    bootstrap_samples: int = 1000
    ci_level: float = 0.90
    bucket_edges: list[int] = field(default_factory=lambda: [1, 3])
    pool: int = 500
    cocounts_variant: str = COCOUNT_ROW_COSINE
    methods: list[str] = field(default_factory=lambda: list(METHOD_ORDER))
    save_vectors: str = "input"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def side_lambdas(self) -> dict[PairKind, float]:
        if self.mode == MODE_PROD2VEC:
            return {}
        overrides = {
            PairKind.IM: self.lambda_im,
            PairKind.JM: self.lambda_jm,
            PairKind.MI: self.lambda_mi,
            PairKind.MM: self.lambda_mm,
        }
        return {k: (v if v is not None else self.lam) for k, v in overrides.items()}

    def hyperparams(self, lambdas: dict[PairKind, float] | None = None) -> trainer.HyperParams:
        return trainer.HyperParams(
            dim=self.dim,
            window=self.window,
            epochs=self.epochs,
            negatives=self.negatives,
            learning_rate=self.learning_rate,
            lambdas=self.side_lambdas() if lambdas is None else lambdas,
            min_count=self.min_count,
            power=self.power,
            seed=self.seed,
            threads=self.threads,
        )


def _parse_metadata_args(values: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for value in values or []:
        name, sep, path = value.partition("=")
        if not sep or not name or not path:
            raise CliError(f"--metadata expects NAME=PATH, got {value!r}")
        out[name] = path
    return out


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_config(args: argparse.Namespace) -> RunConfig:
    """Resolve defaults <- config file <- command-line flags, in that order."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        for key, value in loaded.items():
            setattr(cfg, key, value)
        cfg.metadata = dict(cfg.metadata)
    overrides = {
        "sessions": args.sessions if getattr(args, "sessions", None) else None,
        "out": args.out if getattr(args, "out", None) else None,
        "mode": getattr(args, "mode", None),
        "phase": getattr(args, "phase", None),
        "dim": getattr(args, "dim", None),
        "window": getattr(args, "window", None),
        "epochs": getattr(args, "epochs", None),
        "negatives": getattr(args, "negatives", None),
        "learning_rate": getattr(args, "lr", None),
        "lam": getattr(args, "lam", None),
        "lambda_im": getattr(args, "lambda_im", None),
        "lambda_jm": getattr(args, "lambda_jm", None),
        "lambda_mi": getattr(args, "lambda_mi", None),
        "lambda_mm": getattr(args, "lambda_mm", None),
        "min_count": getattr(args, "min_count", None),
        "power": getattr(args, "power", None),
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "alpha": getattr(args, "alpha", None),
        "bootstrap_samples": getattr(args, "bootstrap", None),
        "ci_level": getattr(args, "ci_level", None),
        "pool": getattr(args, "pool", None),
        "cocounts_variant": getattr(args, "cocounts_variant", None),
        "save_vectors": getattr(args, "save_vectors", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "metadata", None):
        cfg.metadata = _parse_metadata_args(args.metadata)
    if getattr(args, "k_list", None):
        cfg.k_list = _parse_int_list(args.k_list)
    if getattr(args, "alpha_grid", None):
        cfg.alpha_grid = _parse_float_list(args.alpha_grid)
    if getattr(args, "bucket_edges", None):
        cfg.bucket_edges = _parse_int_list(args.bucket_edges)
    if getattr(args, "methods", None):
        cfg.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise CliError(f"--{name} is required")


def _load_inputs(cfg: RunConfig) -> tuple[list, list[MetadataMap]]:
    if not os.path.exists(cfg.sessions):
        raise CliError(f"sessions file not found: {cfg.sessions}")
    for name, path in cfg.metadata.items():
        if not os.path.exists(path):
            raise CliError(f"metadata file not found: {name}={path}")
    sessions = load_sessions(cfg.sessions)
    metadata = [load_metadata(path, name) for name, path in sorted(cfg.metadata.items())]
    return sessions, metadata


def _write_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _vec_path(out: str, mode: str, phase: str) -> str:
    return os.path.join(out, f"{mode}.{phase}.vec")


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "sessions", "out")
    if cfg.mode not in (MODE_PROD2VEC, MODE_METAPROD2VEC):
        raise CliError(f"unknown mode {cfg.mode!r}")
    if cfg.mode == MODE_METAPROD2VEC and not cfg.metadata:
        raise CliError("metaprod2vec mode needs at least one --metadata NAME=PATH")
    sessions, metadata = _load_inputs(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    phases = [PHASE_TUNING, PHASE_FINAL] if cfg.phase == "both" else [cfg.phase]
    for phase in phases:
        split = split_sessions(sessions, phase)
        params = cfg.hyperparams()
        log_path = os.path.join(cfg.out, f"{cfg.mode}.{phase}.log.jsonl")
        logger.info("training %s (%s phase) on %d sessions", cfg.mode, phase, len(split))
        model = trainer.train(split, metadata, params, log_path=log_path)
        trainer.save_embeddings(model, _vec_path(cfg.out, cfg.mode, phase), cfg.save_vectors)
    _write_config(cfg, os.path.join(cfg.out, f"train.{cfg.mode}.config.json"))
    return 0


def _embedding_scorer(cfg: RunConfig, mode: str, phase: str) -> EmbeddingScorer:
    path = _vec_path(cfg.out, mode, phase)
    if not os.path.exists(path):
        raise CliError(
            f"missing embeddings {path}; run: metaprod2vec train --mode {mode} first"
        )
    return EmbeddingScorer(trainer.load_embeddings(path))


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "sessions", "out")
    unknown = [m for m in cfg.methods if m not in METHOD_ORDER]
    if unknown:
        raise CliError(f"unknown methods: {unknown}; choose from {METHOD_ORDER}")
    methods = [m for m in METHOD_ORDER if m in cfg.methods]
    sessions, _ = _load_inputs(cfg)
    os.makedirs(cfg.out, exist_ok=True)

    final = split_sessions(sessions, PHASE_FINAL)
    vocab = build_vocabulary(final.train_sessions, None, cfg.min_count)
    cocounts = scorers.build_cocounts(final.train_sessions, cfg.window, vocab)
    pair_freq = evaluation.pair_frequency_fn(cocounts, vocab)
    co_scorer = CoCountScorer(cocounts, vocab, cfg.cocounts_variant)

    needs_alpha = [m for m in methods if m.startswith("mix_")]
    alphas: dict[str, float] = {}
    if needs_alpha:
        if cfg.alpha is not None:
            alphas = {m: cfg.alpha for m in needs_alpha}
        else:
            tuning = split_sessions(sessions, PHASE_TUNING)
            t_vocab = build_vocabulary(tuning.train_sessions, None, cfg.min_count)
            t_cocounts = scorers.build_cocounts(tuning.train_sessions, cfg.window, t_vocab)
            t_co = CoCountScorer(t_cocounts, t_vocab, cfg.cocounts_variant)
            for method in needs_alpha:
                mode = MODE_PROD2VEC if method == "mix_prod2vec" else MODE_METAPROD2VEC
                emb = _embedding_scorer(cfg, mode, PHASE_TUNING)
                best, _ = evaluation.tune_alpha(
                    emb, t_co, tuning, cfg.alpha_grid, k=max(cfg.k_list), pool=cfg.pool
                )
                alphas[method] = best

    def make_scorer(method: str):
        if method == "bestof":
            return BestOfScorer(vocab), {}
        if method == "cocounts":
            return co_scorer, {"variant": cfg.cocounts_variant}
        if method in (MODE_PROD2VEC, MODE_METAPROD2VEC):
            return _embedding_scorer(cfg, method, PHASE_FINAL), {}
        mode = MODE_PROD2VEC if method == "mix_prod2vec" else MODE_METAPROD2VEC
        emb = _embedding_scorer(cfg, mode, PHASE_FINAL)
        alpha = alphas[method]
        return MixScorer(alpha, emb, co_scorer, cfg.pool), {"alpha": alpha}

    reports = []
    for method in methods:
        scorer, extra = make_scorer(method)
        report = evaluation.evaluate(
            scorer,
            final,
            cfg.k_list,
            bootstrap_samples=cfg.bootstrap_samples,
            ci_level=cfg.ci_level,
            seed=cfg.seed,
            method=METHOD_LABELS[method],
            pair_freq=pair_freq,
            bucket_edges=cfg.bucket_edges,
            params=extra,
        )
        reports.append(report)
        path = os.path.join(cfg.out, f"eval.{method}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        logger.info("%s: %s", report.method,
                    {k: round(m.est, 5) for k, m in report.metrics.items()})

    _write_comparison(reports, cfg, os.path.join(cfg.out, "eval.comparison.tsv"))
    _write_config(cfg, os.path.join(cfg.out, "eval.config.json"))
    return 0


def _write_comparison(reports, cfg: RunConfig, path: str) -> None:
    names = evaluation.metric_names(cfg.k_list)
    with open(path, "w", encoding="utf-8") as fh:
        header = ["method"]
        for name in names:
            header += [name, f"{name}_lo", f"{name}_hi"]
        fh.write("\t".join(header) + "\n")
        for report in reports:
            row = [report.method]
            for name in names:
                m = report.metrics[name]
                row += [f"{m.est:.6f}", f"{m.lo:.6f}", f"{m.hi:.6f}"]
            fh.write("\t".join(row) + "\n")


def cmd_ablate(cfg: RunConfig) -> int:
    _require(cfg, "sessions", "out")
    if not cfg.metadata:
        raise CliError("ablate needs at least one --metadata NAME=PATH")
    sessions, metadata = _load_inputs(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    final = split_sessions(sessions, PHASE_FINAL)
    params = cfg.hyperparams(lambdas={})
    rows = evaluation.ablation_run(
        final, metadata, params, side_lambda=cfg.lam, k=max(cfg.k_list)
    )
    path = os.path.join(cfg.out, "ablation.tsv")
    k = max(cfg.k_list)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"config\tHR@{k}\tNDCG@{k}\tHR_lift\tNDCG_lift\n")
        for row in rows:
            fh.write(
                f"{row.config}\t{row.hr:.6f}\t{row.ndcg:.6f}"
                f"\t{row.hr_lift:.4f}\t{row.ndcg_lift:.4f}\n"
            )
    _write_config(cfg, os.path.join(cfg.out, "ablate.config.json"))
    return 0


def cmd_nn(args: argparse.Namespace) -> int:
    if not os.path.exists(args.embeddings):
        raise CliError(f"embeddings file not found: {args.embeddings}")
    model = trainer.load_embeddings(args.embeddings)
    scorer = EmbeddingScorer(model)
    try:
        neighbors = scorer.top_k(args.query, args.k)
    except scorers.UnknownItemError:
        raise CliError(f"unknown item: {args.query!r}") from None
    for rank, (token, score) in enumerate(neighbors, start=1):
        sys.stdout.write(f"{args.query}\t{rank}\t{token}\t{score:.6f}\n")
    return 0


def _add_common_options(p: argparse.ArgumentParser, train_opts: bool = True) -> None:
    p.add_argument("--sessions", help="sessions file: user_id<TAB>item1 item2 ...")
    p.add_argument("--metadata", action="append", metavar="NAME=PATH",
                   help="attribute map file, repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--window", type=int)
    p.add_argument("--min-count", type=int, dest="min_count")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--k-list", dest="k_list", help="comma-separated cutoffs, e.g. 10,20")
    if train_opts:
        p.add_argument("--dim", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--negatives", type=int)
        p.add_argument("--lr", type=float, help="base learning rate")
        p.add_argument("--lambda", type=float, dest="lam",
                       help="weight for all side-information kinds")
        p.add_argument("--lambda-im", type=float, dest="lambda_im")
        p.add_argument("--lambda-jm", type=float, dest="lambda_jm")
        p.add_argument("--lambda-mi", type=float, dest="lambda_mi")
        p.add_argument("--lambda-mm", type=float, dest="lambda_mm")
        p.add_argument("--power", type=float, help="negative-sampling exponent")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaprod2vec",
        description="Train and evaluate session embeddings with side information.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train embeddings and save them")
    _add_common_options(p_train)
    p_train.add_argument("--mode", choices=[MODE_PROD2VEC, MODE_METAPROD2VEC])
    p_train.add_argument("--phase", choices=[PHASE_TUNING, PHASE_FINAL, "both"])
    p_train.add_argument("--save-vectors", choices=["input", "output", "both"],
                         dest="save_vectors")

    p_eval = sub.add_parser("eval", help="evaluate methods on held-out targets")
    _add_common_options(p_eval)
    p_eval.add_argument("--methods", help=f"comma-separated subset of {METHOD_ORDER}")
    p_eval.add_argument("--alpha", type=float, help="fixed blend weight (skips tuning)")
    p_eval.add_argument("--alpha-grid", dest="alpha_grid",
                        help="comma-separated blend weights to tune over")
    p_eval.add_argument("--bootstrap", type=int, help="bootstrap resamples")
    p_eval.add_argument("--ci-level", type=float, dest="ci_level")
    p_eval.add_argument("--bucket-edges", dest="bucket_edges",
                        help="pair-frequency bucket edges, e.g. 1,3")
    p_eval.add_argument("--pool", type=int, help="mix candidate pool size")
    p_eval.add_argument("--cocounts-variant", dest="cocounts_variant",
                        choices=[scorers.COCOUNT_ROW_COSINE, scorers.COCOUNT_PAIR_NORM])

    p_ablate = sub.add_parser("ablate", help="per-side-information lift table")
    _add_common_options(p_ablate)

    p_nn = sub.add_parser("nn", help="nearest neighbors of an item")
    p_nn.add_argument("--embeddings", required=True)
    p_nn.add_argument("--query", required=True)
    p_nn.add_argument("-k", "--k", type=int, default=10)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "nn":
            return cmd_nn(args)
        cfg = build_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
