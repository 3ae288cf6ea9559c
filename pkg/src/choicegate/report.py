"""Human-readable tables plus their machine JSON mirrors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .evaluation import EvalReport
from .trie import ChoiceTrie


@dataclass(frozen=True)
class PassesRow:
    name: str
    full: int
    yes_no: int
    truncated: int


def passes_row(name: str, trie: ChoiceTrie) -> PassesRow:
    return PassesRow(
        name=name,
        full=trie.forward_pass_count("full"),
        yes_no=trie.forward_pass_count("yes_no"),
        truncated=trie.forward_pass_count("truncated"),
    )


def speedup_percent(full: int, mode: int) -> int:
    """Throughput increase of a mode over computing full sequence
    probabilities, as a rounded percent: (full - mode) / mode x100."""
    if mode == 0:
        return 0
    return math.floor((full - mode) / mode * 100.0 + 0.5)


def render_passes_table(rows: list[PassesRow]) -> str:
    """One row per choice set: forward-pass counts with the percentage
    speedups over the full-probability method underneath."""
    header = f"{'choice_set':<20}{'full':>10}{'yes_no':>10}{'truncated':>12}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row.name:<20}{row.full:>10}{row.yes_no:>10}{row.truncated:>12}")
        percents = (
            f"({speedup_percent(row.full, row.full):+d}%)",
            f"({speedup_percent(row.full, row.yes_no):+d}%)",
            f"({speedup_percent(row.full, row.truncated):+d}%)",
        )
        lines.append(f"{'':<20}{percents[0]:>10}{percents[1]:>10}{percents[2]:>12}")
    return "\n".join(lines) + "\n"


def passes_table_json(rows: list[PassesRow]) -> str:
    payload = [
        {
            "name": row.name,
            "full": row.full,
            "yes_no": row.yes_no,
            "truncated": row.truncated,
            "speedup_yes_no_pct": speedup_percent(row.full, row.yes_no),
            "speedup_truncated_pct": speedup_percent(row.full, row.truncated),
        }
        for row in rows
    ]
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def _fmt(value: float | None, digits: int = 2) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def render_eval_report(report: EvalReport) -> str:
    lines: list[str] = []
    if report.method:
        lines.append(f"method: {report.method}")
    if report.accuracy:
        lines.append("")
        lines.append(
            f"accuracy over {len(report.accuracy.per_prompt)} prompts "
            f"({report.accuracy.examples_per_prompt} examples each): "
            f"{report.accuracy.mean:.2f}"
        )
        for pid in sorted(report.accuracy.per_prompt):
            lines.append(f"  {pid:<12}{report.accuracy.per_prompt[pid]:>8.2f}")
    if report.retrieval_map:
        lines.append("")
        lines.append(f"mAP: {report.retrieval_map.map_percent:.2f}")
        if report.retrieval_map.excluded_classes:
            lines.append(
                f"  classes without positives (excluded): "
                f"{list(report.retrieval_map.excluded_classes)}"
            )
    if report.genus:
        lines.append("")
        lines.append(
            f"genus matches on misclassified: {_fmt(report.genus.match_rate)}   "
            f"% of data misclassified: {report.genus.pct_misclassified:.2f}"
        )
    if report.diff_stats:
        d = report.diff_stats
        lines.append("")
        lines.append(
            f"question-level accuracy difference: mu={d.mu:.2f} sigma={d.sigma:.2f} "
            f"95% CI [{d.ci_low:.2f}, {d.ci_high:.2f}] ({d.sigma_mode} sigma, n={len(d.deltas)})"
        )
    if report.extraction:
        lines.append("")
        lines.append(f"extraction agreement (in-schema answers): {_fmt(report.extraction.agreement)}")
        for name in sorted(report.extraction.breakdown):
            lines.append(f"  {name:<18}{report.extraction.breakdown[name]:>8.2f}%")
    if report.subset_accuracy is not None:
        lines.append("")
        lines.append(f"subset-choice accuracy: {report.subset_accuracy:.2f}")
    for note in report.notes:
        lines.append("")
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def eval_report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json_dict(), sort_keys=True, ensure_ascii=False, indent=2) + "\n"
