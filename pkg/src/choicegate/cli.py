"""Command-line front door.

One subcommand per artifact: ``passes`` prints forward-pass accounting for
choice lists, ``classify`` and ``retrieve`` run batches against a backend and
write record caches / score matrices, ``eval`` turns caches into reports, and
``report`` re-renders a report JSON as text.

The backend comes from ``--mock TABLE`` or ``--backend URL``; the
CHOICEGATE_BACKEND environment variable overrides ``--backend``.  Mock runs
use a fixed clock so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import evaluation, pipeline, report
from .backend import BackendError, LMBackend, MockBackend, RemoteBackend
from .evaluation import EvalError, EvalReport
from .pipeline import CacheError, RunConfig, load_cache, load_manifest
from .prompts import (
    SteeringMode,
    TemplateError,
    bundled_profile,
    default_templates,
    load_profile,
    load_templates,
)
from .scoring import RAW, RENORM
from .tokenizer import TokenizeError, VocabularyError, load_vocabulary
from .trie import build_trie, load_choice_set

NORM_ALIASES = {"raw": RAW, "renorm": RENORM}

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


class CliError(ValueError):
    pass


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--backend", help="base URL of a serving backend")
    group.add_argument("--mock", help="path to a mock table config")
    vocab = parser.add_mutually_exclusive_group()
    vocab.add_argument("--vocab", help="vocabulary file path")
    vocab.add_argument(
        "--vocab-from-backend",
        action="store_true",
        help="fetch the vocabulary from the backend",
    )


def _resolve_backend(args) -> LMBackend:
    if args.mock:
        return MockBackend.from_file(args.mock)
    backend_url = os.environ.get("CHOICEGATE_BACKEND") or args.backend
    if backend_url:
        return RemoteBackend(backend_url)
    raise CliError("no backend: pass --mock TABLE or --backend URL (or set CHOICEGATE_BACKEND)")


def _resolve_vocab(args, backend: LMBackend):
    if args.vocab:
        return load_vocabulary(args.vocab)
    if args.vocab_from_backend:
        return backend.vocabulary()
    if args.mock:
        return backend.vocabulary()
    raise CliError("no vocabulary: pass --vocab FILE or --vocab-from-backend")


def _resolve_profile(spec: str):
    path = Path(spec)
    if path.exists():
        profile = load_profile(path)
    else:
        try:
            profile = bundled_profile(spec)
        except FileNotFoundError:
            raise CliError(f"profile {spec!r} is neither a file nor a bundled profile name")
    if profile.choices is None:
        raise CliError(f"profile {spec!r} has no choice list")
    return profile


def _is_mock(args) -> bool:
    return bool(args.mock)


def _build_config(args, profile, templates) -> RunConfig:
    return RunConfig(
        profile=profile,
        templates=tuple(templates),
        method=args.method,
        steering=SteeringMode(args.steering),
        cot=args.cot,
        normalization=NORM_ALIASES[args.norm],
        selector=args.selector,
        max_new_tokens=args.max_new_tokens,
        rounds=args.rounds,
        yes_text=args.yes_text,
        no_text=args.no_text,
        jobs=args.jobs,
        fixed_time=0.0 if _is_mock(args) else None,
    )


# -- subcommands -------------------------------------------------------------


def cmd_passes(args) -> int:
    vocab = load_vocabulary(args.vocab)
    rows = []
    for spec in args.choices:
        name, _, path = spec.rpartition("=")
        if not name:
            name = Path(path).stem
        choices = load_choice_set(path)
        rows.append(report.passes_row(name, build_trie(choices, vocab)))
    text = report.render_passes_table(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "passes.txt").write_text(text, encoding="utf-8")
        (out / "passes.json").write_text(report.passes_table_json(rows), encoding="utf-8")
    return EXIT_OK


def _run_batch_command(args, methods) -> int:
    if args.method not in methods:
        raise CliError(f"method must be one of {sorted(methods)}")
    backend = _resolve_backend(args)
    vocab = _resolve_vocab(args, backend)
    profile = _resolve_profile(args.profile)
    templates = load_templates(args.templates) if args.templates else default_templates()
    cfg = _build_config(args, profile, templates)
    examples = load_manifest(args.manifest, profile.choices)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trie = build_trie(profile.choices, vocab)
    result = pipeline.run_batch(
        cfg,
        backend,
        examples,
        out / "records.jsonl",
        resume=args.resume,
        overwrite=args.overwrite,
        trie=trie,
    )
    if args.method in ("retrieval_trunc", "yes_no"):
        rows = pipeline.dump_score_matrix(result.records, out / "scores.jsonl")
        print(f"score matrix: {rows} rows -> {out / 'scores.jsonl'}")
        if args.method == "retrieval_trunc":
            pipeline.dump_score_details(
                result.records, cfg.normalization, out / "scores_dump.jsonl"
            )
    print(
        f"records: {result.computed} computed, {result.cached} cached, "
        f"{result.failed} failed -> {out / 'records.jsonl'}"
    )
    return EXIT_PARTIAL if result.failed else EXIT_OK


def cmd_classify(args) -> int:
    return _run_batch_command(
        args, {"choice", "nlg2choice", "nlg2choice_open", "nlg2nlg2choice"}
    )


def cmd_retrieve(args) -> int:
    return _run_batch_command(args, {"retrieval_trunc", "yes_no"})


def _truth_maps(manifest_path, profile):
    examples = load_manifest(manifest_path, profile.choices)
    truth_ids = {ex.id: ex.ground_truth for ex in examples}
    truth_labels = {ex.id: profile.choices.labels[ex.ground_truth] for ex in examples}
    return truth_ids, truth_labels


def _single_prompt_predictions(records, prompt_id):
    rows = [r for r in records if r.status == "ok" and r.prediction_label is not None]
    if prompt_id:
        rows = [r for r in rows if r.prompt_id == prompt_id]
    prompt_ids = {r.prompt_id for r in rows}
    if len(prompt_ids) > 1:
        raise CliError(
            f"cache holds predictions for prompts {sorted(prompt_ids)}; pass --prompt-id"
        )
    if not rows:
        raise CliError("no usable predictions in the cache")
    return {r.example_id: r.prediction_label for r in rows}


def cmd_eval(args) -> int:
    profile = _resolve_profile(args.profile)
    rep = EvalReport(method=args.kind)
    if args.kind == "accuracy":
        records = load_cache(args.cache)
        truth_ids, _ = _truth_maps(args.manifest, profile)
        rep.accuracy = evaluation.accuracy_over_variations(records, truth_ids)
    elif args.kind == "genus":
        records = load_cache(args.cache)
        _, truth_labels = _truth_maps(args.manifest, profile)
        genus_path = args.genus_map or profile.genus_map_path
        if not genus_path:
            raise CliError("no genus map: pass --genus-map or use a profile that has one")
        rep.genus = evaluation.genus_accuracy(
            records, truth_labels, evaluation.load_genus_map(genus_path)
        )
    elif args.kind == "stats":
        truth_ids, _ = _truth_maps(args.manifest, profile)
        acc_a = evaluation.accuracy_over_variations(load_cache(args.cache_a), truth_ids)
        acc_b = evaluation.accuracy_over_variations(load_cache(args.cache_b), truth_ids)
        rep.diff_stats = evaluation.question_level_diff_stats(
            acc_a.per_prompt, acc_b.per_prompt, sigma_mode=args.sigma_mode
        )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "deltas.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("prompt_id,accuracy_a,accuracy_b,delta\n")
            for pid in sorted(acc_a.per_prompt):
                a, b = acc_a.per_prompt[pid], acc_b.per_prompt[pid]
                fh.write(f"{pid},{a!r},{b!r},{b - a!r}\n")
    elif args.kind == "extraction":
        records = load_cache(args.cache)
        predictions = _single_prompt_predictions(records, args.prompt_id)
        labels = evaluation.load_labels(args.labels)
        rep.extraction = evaluation.extraction_agreement(predictions, labels, profile.choices)
    elif args.kind == "subset":
        records = load_cache(args.cache)
        if args.prompt_id:
            records = [r for r in records if r.prompt_id == args.prompt_id]
        backend = _resolve_backend(args)
        _, truth_labels = _truth_maps(args.manifest, profile)
        subsets = evaluation.load_subsets(args.subsets)
        rep.subset_accuracy = evaluation.subset_choice_eval(
            records, subsets, truth_labels, backend, profile, NORM_ALIASES[args.norm]
        )
    elif args.kind == "map":
        rows = pipeline.load_score_matrix(args.scores)
        truth_ids, _ = _truth_maps(args.manifest, profile)
        rows = sorted(rows, key=lambda r: r["example_id"])
        missing = [r["example_id"] for r in rows if r["example_id"] not in truth_ids]
        if missing:
            raise CliError(f"score rows without ground truth: {missing[:5]}")
        matrix = [r["scores"] for r in rows]
        truth = [truth_ids[r["example_id"]] for r in rows]
        rep.retrieval_map = evaluation.map_one_vs_rest(matrix, truth)
    else:  # pragma: no cover - argparse restricts choices
        raise CliError(f"unknown eval kind {args.kind!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.eval_report_json(rep), encoding="utf-8")
    text = report.render_eval_report(rep)
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    payload = json.loads(Path(args.report).read_text(encoding="utf-8"))
    if isinstance(payload, list):
        rows = [
            report.PassesRow(
                name=r["name"], full=r["full"], yes_no=r["yes_no"], truncated=r["truncated"]
            )
            for r in payload
        ]
        sys.stdout.write(report.render_passes_table(rows))
        return EXIT_OK
    rep = EvalReport(method=payload.get("method"), notes=payload.get("notes", []))
    if "accuracy" in payload:
        a = payload["accuracy"]
        rep.accuracy = evaluation.AccuracyResult(
            mean=a["mean"], per_prompt=a["per_prompt"], examples_per_prompt=a["examples_per_prompt"]
        )
    if "map" in payload:
        m = payload["map"]
        rep.retrieval_map = evaluation.MapResult(
            map_percent=m["map_percent"],
            per_class_ap={int(k): v for k, v in m["per_class_ap"].items()},
            excluded_classes=tuple(m["excluded_classes"]),
        )
    if "genus" in payload:
        g = payload["genus"]
        rep.genus = evaluation.GenusResult(
            match_rate=g["match_rate"],
            pct_misclassified=g["pct_misclassified"],
            n_misclassified=g["n_misclassified"],
            n_total=g["n_total"],
        )
    if "diff_stats" in payload:
        d = payload["diff_stats"]
        rep.diff_stats = evaluation.DiffStats(
            deltas=tuple(d["deltas"]),
            mu=d["mu"],
            sigma=d["sigma"],
            ci_low=d["ci_low"],
            ci_high=d["ci_high"],
            sigma_mode=d["sigma_mode"],
        )
    if "extraction" in payload:
        e = payload["extraction"]
        rep.extraction = evaluation.ExtractionResult(
            agreement=e["agreement"], breakdown=e["breakdown"], n_labels=e["n_labels"]
        )
    rep.subset_accuracy = payload.get("subset_accuracy")
    sys.stdout.write(report.render_eval_report(rep))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="choicegate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("passes", help="forward-pass accounting for choice lists")
    p.add_argument("--choices", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_passes)

    def add_run_flags(p: argparse.ArgumentParser, methods, default_method):
        p.add_argument("--profile", required=True, help="profile path or bundled name")
        p.add_argument("--manifest", required=True)
        p.add_argument("--templates", help="template file (default: bundled variations)")
        _add_backend_flags(p)
        p.add_argument("--method", choices=sorted(methods), default=default_method)
        p.add_argument(
            "--steering",
            choices=[m.value for m in SteeringMode],
            default=SteeringMode.TYPE_ONLY.value,
        )
        p.add_argument("--cot", help="forced assistant prefix for stage 1")
        p.add_argument("--norm", choices=sorted(NORM_ALIASES), default="renorm")
        p.add_argument("--selector", choices=["truncated_argmax", "greedy"], default="truncated_argmax")
        p.add_argument("--rounds", type=int, default=2)
        p.add_argument("--max-new-tokens", type=int, default=512)
        p.add_argument("--yes-text", default="Yes", help="yes string for the yes_no method")
        p.add_argument("--no-text", default="No")
        p.add_argument("--out", required=True)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("classify", help="run a classification batch")
    add_run_flags(
        p, {"choice", "nlg2choice", "nlg2choice_open", "nlg2nlg2choice"}, "nlg2choice"
    )
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("retrieve", help="run a retrieval-scoring batch")
    add_run_flags(p, {"retrieval_trunc", "yes_no"}, "retrieval_trunc")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="compute metrics from caches")
    p.add_argument(
        "--kind",
        choices=["accuracy", "genus", "stats", "extraction", "subset", "map"],
        required=True,
    )
    p.add_argument("--profile", required=True)
    p.add_argument("--manifest")
    p.add_argument("--cache")
    p.add_argument("--cache-a")
    p.add_argument("--cache-b")
    p.add_argument("--scores")
    p.add_argument("--labels")
    p.add_argument("--subsets")
    p.add_argument("--genus-map")
    p.add_argument("--prompt-id")
    p.add_argument("--sigma-mode", choices=["population", "sample"], default="population")
    p.add_argument("--norm", choices=sorted(NORM_ALIASES), default="renorm")
    _add_backend_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a report JSON as text")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)

    return parser


_REQUIRED_EVAL_INPUTS = {
    "accuracy": ("cache", "manifest"),
    "genus": ("cache", "manifest"),
    "stats": ("cache_a", "cache_b", "manifest"),
    "extraction": ("cache", "labels"),
    "subset": ("cache", "manifest", "subsets"),
    "map": ("scores", "manifest"),
}


def _validate_eval_args(args) -> None:
    for name in _REQUIRED_EVAL_INPUTS[args.kind]:
        if getattr(args, name) is None:
            raise CliError(f"eval --kind {args.kind} needs --{name.replace('_', '-')}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "command", None) == "eval":
            _validate_eval_args(args)
        return args.func(args)
    except (
        CliError,
        CacheError,
        EvalError,
        TemplateError,
        BackendError,
        VocabularyError,
        TokenizeError,
        ValueError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
