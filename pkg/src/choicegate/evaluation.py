"""Metrics over run records: accuracy across prompt variations, one-vs-rest
mean average precision, genus-level analysis of misclassifications,
question-level difference statistics, answer-extraction agreement against a
labeled set, and choice-subset evaluation.

Everything here is a pure computation over immutable record sets; all rates
are percentages in [0, 100].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .pipeline import EMPTY_STAGE1_MARKER, RunRecord
from .prompts import DatasetProfile, build_stage2_prompt
from .scoring import RENORM, truncated_choice_logprobs
from .trie import ChoiceSet, build_trie


class EvalError(ValueError):
    """Inconsistent inputs: coverage mismatch, missing genus entry, etc."""


# -- accuracy over prompt variations ---------------------------------------


@dataclass(frozen=True)
class AccuracyResult:
    mean: float
    per_prompt: dict[str, float]
    examples_per_prompt: int


def _ok_classification_records(records) -> list[RunRecord]:
    return [r for r in records if r.status == "ok" and r.prediction is not None]


def accuracy_over_variations(records, truth: dict[str, int]) -> AccuracyResult:
    """Per-prompt accuracy (correct/total x100) and the mean over prompts.

    Every prompt group must cover the same example set; anything else makes
    the mean incomparable across prompts.
    """
    groups: dict[str, dict[str, int]] = {}
    for record in _ok_classification_records(records):
        groups.setdefault(record.prompt_id, {})[record.example_id] = record.prediction
    if not groups:
        raise EvalError("no successful classification records")
    prompt_ids = sorted(groups)
    coverage = {pid: frozenset(groups[pid]) for pid in prompt_ids}
    base = coverage[prompt_ids[0]]
    for pid in prompt_ids[1:]:
        if coverage[pid] != base:
            raise EvalError(
                f"prompt {pid!r} covers a different example set than {prompt_ids[0]!r}"
            )
    missing = base - set(truth)
    if missing:
        raise EvalError(f"examples missing ground truth: {sorted(missing)[:5]}")
    per_prompt = {}
    for pid in prompt_ids:
        correct = sum(1 for ex, pred in groups[pid].items() if pred == truth[ex])
        per_prompt[pid] = correct / len(base) * 100.0
    mean = sum(per_prompt[pid] for pid in prompt_ids) / len(prompt_ids)
    return AccuracyResult(mean=mean, per_prompt=per_prompt, examples_per_prompt=len(base))


# -- one-vs-rest retrieval ---------------------------------------------------


@dataclass(frozen=True)
class MapResult:
    map_percent: float
    per_class_ap: dict[int, float]
    excluded_classes: tuple[int, ...]


def average_precision(scores, positives) -> float:
    """AP for one class: rank examples by score descending (ties keep the
    lower example index first); mean of precision at each positive rank."""
    scores = np.asarray(scores, dtype=float)
    if not len(scores):
        raise EvalError("empty score column")
    order = np.lexsort((np.arange(len(scores)), -scores))
    flags = np.asarray(positives, dtype=bool)[order]
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise EvalError("class has no positives")
    hits = np.cumsum(flags)
    ranks = np.arange(1, len(scores) + 1)
    precisions = hits[flags] / ranks[flags]
    return float(precisions.sum() / n_pos)


def map_one_vs_rest(matrix, truth) -> MapResult:
    """mAP over classes with at least one positive; zero-positive classes
    are excluded and reported."""
    matrix = np.asarray(matrix, dtype=float)
    truth = list(truth)
    if matrix.ndim != 2:
        raise EvalError("score matrix must be 2-dimensional")
    if matrix.shape[0] != len(truth):
        raise EvalError("score matrix rows do not match ground-truth length")
    n_classes = matrix.shape[1]
    per_class = {}
    excluded = []
    for cls in range(n_classes):
        positives = [gt == cls for gt in truth]
        if not any(positives):
            excluded.append(cls)
            continue
        per_class[cls] = average_precision(matrix[:, cls], positives)
    if not per_class:
        raise EvalError("no class has positives")
    map_percent = 100.0 * sum(per_class.values()) / len(per_class)
    return MapResult(
        map_percent=map_percent, per_class_ap=per_class, excluded_classes=tuple(excluded)
    )


# -- genus analysis ----------------------------------------------------------


@dataclass(frozen=True)
class GenusResult:
    match_rate: float | None  # None when nothing was misclassified
    pct_misclassified: float
    n_misclassified: int
    n_total: int


def genus_accuracy(records, truth_labels: dict[str, str], genus_map: dict[str, str]) -> GenusResult:
    """Among misclassified records, the rate whose predicted label falls in
    the same genus bucket as the truth; plus how much of the data that is."""
    rows = _ok_classification_records(records)
    if not rows:
        raise EvalError("no successful classification records")
    mis = 0
    matches = 0
    for record in rows:
        gt_label = truth_labels.get(record.example_id)
        if gt_label is None:
            raise EvalError(f"example {record.example_id!r} has no ground-truth label")
        pred_label = record.prediction_label
        for label in (gt_label, pred_label):
            if label not in genus_map:
                raise EvalError(f"genus map has no entry for {label!r}")
        if pred_label != gt_label:
            mis += 1
            if genus_map[pred_label] == genus_map[gt_label]:
                matches += 1
    pct = mis / len(rows) * 100.0
    rate = matches / mis * 100.0 if mis else None
    return GenusResult(
        match_rate=rate, pct_misclassified=pct, n_misclassified=mis, n_total=len(rows)
    )


def load_genus_map(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {str(k): str(v) for k, v in raw.items()}


# -- question-level difference statistics -------------------------------------


@dataclass(frozen=True)
class DiffStats:
    deltas: tuple[float, ...]
    mu: float
    sigma: float
    ci_low: float
    ci_high: float
    sigma_mode: str = "population"


def question_level_diff_stats(
    acc_a: dict[str, float], acc_b: dict[str, float], sigma_mode: str = "population"
) -> DiffStats:
    """Per-question deltas (B - A), their mean, standard deviation, and the
    normal-approximation 95% interval mu +/- 1.96 sigma / sqrt(n)."""
    if set(acc_a) != set(acc_b):
        raise EvalError("prompt ids differ between the two accuracy sets")
    if sigma_mode not in ("population", "sample"):
        raise EvalError(f"unknown sigma mode {sigma_mode!r}")
    ids = sorted(acc_a)
    deltas = tuple(acc_b[pid] - acc_a[pid] for pid in ids)
    n = len(deltas)
    mu = sum(deltas) / n
    ddof = 0 if sigma_mode == "population" else 1
    if n - ddof <= 0:
        raise EvalError("not enough deltas for the requested sigma mode")
    var = sum((d - mu) ** 2 for d in deltas) / (n - ddof)
    sigma = math.sqrt(var)
    half = 1.96 * sigma / math.sqrt(n)
    return DiffStats(
        deltas=deltas,
        mu=mu,
        sigma=sigma,
        ci_low=mu - half,
        ci_high=mu + half,
        sigma_mode=sigma_mode,
    )


# -- answer-extraction agreement ----------------------------------------------


RESOLUTION_KINDS = ("answer", "schema_failure", "no_species", "refused", "no_information")


@dataclass(frozen=True)
class LabelRecord:
    """One human-labeled free-form response.

    ``span`` highlights the first incidence of the predicted species inside
    the response text; ``answer`` carries the labeled species for kind
    "answer" (in or out of the dataset schema).
    """

    example_id: str
    nlg: str
    kind: str
    answer: str | None = None
    span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in RESOLUTION_KINDS:
            raise EvalError(f"unknown resolution kind {self.kind!r}")
        if self.kind == "answer" and not self.answer:
            raise EvalError("resolution kind 'answer' needs an answer string")
        if self.span is not None:
            start, end = self.span
            if not (0 <= start < end <= len(self.nlg)):
                raise EvalError(f"span {self.span} outside the response text")
            if self.nlg.find(self.nlg[start:end]) != start:
                raise EvalError("span is not the first incidence of its text")


def load_labels(path) -> list[LabelRecord]:
    """Labels file: JSON lines {"example_id", "nlg", "span": [s, e] | null,
    "resolution": {"kind", "answer"?}}."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            resolution = raw["resolution"]
            span = tuple(raw["span"]) if raw.get("span") else None
            out.append(
                LabelRecord(
                    example_id=str(raw["example_id"]),
                    nlg=raw["nlg"],
                    kind=resolution["kind"],
                    answer=resolution.get("answer"),
                    span=span,
                )
            )
    return out


@dataclass(frozen=True)
class ExtractionResult:
    agreement: float | None  # None when no in-schema answers exist
    breakdown: dict[str, float]
    n_labels: int


def extraction_agreement(
    predictions: dict[str, str], labels: list[LabelRecord], choices: ChoiceSet
) -> ExtractionResult:
    """Agreement between engine predictions and labeled answers, restricted
    to labels whose answer lies in the dataset schema; plus the category
    breakdown of the whole labeled set as percentages."""
    if not labels:
        raise EvalError("empty label set")
    label_set = set(choices.labels)
    counts = {
        "answer_in_schema": 0,
        "out_of_schema": 0,
        "schema_failure": 0,
        "no_species": 0,
        "refused": 0,
        "no_information": 0,
    }
    agree = 0
    scored = 0
    for record in labels:
        if record.example_id not in predictions:
            raise EvalError(f"label for {record.example_id!r} has no prediction")
        if record.kind == "answer":
            if record.answer in label_set:
                counts["answer_in_schema"] += 1
                scored += 1
                if predictions[record.example_id] == record.answer:
                    agree += 1
            else:
                counts["out_of_schema"] += 1
        else:
            counts[record.kind] += 1
    breakdown = {k: v / len(labels) * 100.0 for k, v in counts.items()}
    agreement = agree / scored * 100.0 if scored else None
    return ExtractionResult(agreement=agreement, breakdown=breakdown, n_labels=len(labels))


# -- choice-subset evaluation ---------------------------------------------------


def load_subsets(path) -> dict[str, list[str]]:
    """Subsets file: JSON lines {"example_id", "choices": [label, ...]}."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            out[str(raw["example_id"])] = list(raw["choices"])
    return out


def subset_choice_eval(
    records,
    subsets: dict[str, list[str]],
    truth_labels: dict[str, str],
    backend,
    profile: DatasetProfile,
    normalization: str = RENORM,
) -> float:
    """Re-select over a small per-example choice subset (a fresh trie per
    example) from the persisted stage-1 text; returns accuracy x100.

    Each subset must contain the example's ground truth.
    """
    vocab = backend.vocabulary()
    rows = [r for r in records if r.status == "ok" and r.stage1_text is not None]
    if not rows:
        raise EvalError("no records with stage-1 text")
    correct = 0
    for record in rows:
        gt_label = truth_labels[record.example_id]
        try:
            subset = subsets[record.example_id]
        except KeyError:
            raise EvalError(f"no choice subset for example {record.example_id!r}") from None
        if gt_label not in subset:
            raise EvalError(f"subset for {record.example_id!r} is missing the ground truth")
        subset_choices = ChoiceSet(tuple(subset))
        trie = build_trie(subset_choices, vocab)
        nlg = record.stage1_text if record.stage1_text.strip() else EMPTY_STAGE1_MARKER
        sub_profile = DatasetProfile(
            name=profile.name, type=profile.type, domain=profile.domain, choices=subset_choices
        )
        prompt = build_stage2_prompt(sub_profile, nlg)
        scores = truncated_choice_logprobs(backend, prompt, trie, normalization)
        if subset_choices.labels[scores.argmax()] == gt_label:
            correct += 1
    return correct / len(rows) * 100.0


# -- the aggregate report -------------------------------------------------------


@dataclass
class EvalReport:
    """Everything the report renderer knows how to print; sections are
    filled by whichever eval commands ran."""

    method: str | None = None
    accuracy: AccuracyResult | None = None
    retrieval_map: MapResult | None = None
    genus: GenusResult | None = None
    diff_stats: DiffStats | None = None
    extraction: ExtractionResult | None = None
    subset_accuracy: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out: dict = {"method": self.method, "notes": self.notes}
        if self.accuracy:
            out["accuracy"] = {
                "mean": self.accuracy.mean,
                "per_prompt": dict(sorted(self.accuracy.per_prompt.items())),
                "examples_per_prompt": self.accuracy.examples_per_prompt,
            }
        if self.retrieval_map:
            out["map"] = {
                "map_percent": self.retrieval_map.map_percent,
                "per_class_ap": {
                    str(k): v for k, v in sorted(self.retrieval_map.per_class_ap.items())
                },
                "excluded_classes": list(self.retrieval_map.excluded_classes),
            }
        if self.genus:
            out["genus"] = {
                "match_rate": self.genus.match_rate,
                "pct_misclassified": self.genus.pct_misclassified,
                "n_misclassified": self.genus.n_misclassified,
                "n_total": self.genus.n_total,
            }
        if self.diff_stats:
            out["diff_stats"] = {
                "deltas": list(self.diff_stats.deltas),
                "mu": self.diff_stats.mu,
                "sigma": self.diff_stats.sigma,
                "ci_low": self.diff_stats.ci_low,
                "ci_high": self.diff_stats.ci_high,
                "sigma_mode": self.diff_stats.sigma_mode,
            }
        if self.extraction:
            out["extraction"] = {
                "agreement": self.extraction.agreement,
                "breakdown": dict(sorted(self.extraction.breakdown.items())),
                "n_labels": self.extraction.n_labels,
            }
        if self.subset_accuracy is not None:
            out["subset_accuracy"] = self.subset_accuracy
        return out
