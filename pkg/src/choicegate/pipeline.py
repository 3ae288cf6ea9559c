"""Run orchestration: direct constrained decoding, the two-stage method and
its open-prompt and multi-round variants, retrieval scoring, the Yes/No
baseline, and a resumable append-only record cache.

The second stage never sees the image reference; it scores a text-only
prompt built from the persisted first-stage response.  Per-example failures
become failed records rather than aborting a batch, so long runs against
remote models degrade instead of dying.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backend import GenerationRequest, LMBackend
from .prompts import (
    DatasetProfile,
    PromptTemplate,
    SteeringMode,
    substitute,
    build_stage1_prompt,
    build_stage2_prompt,
    build_yesno_prompt,
)
from .scoring import (
    RENORM,
    first_token_id,
    greedy_decode_with_passes,
    truncated_choice_logprobs,
    yes_no_score,
)
from .trie import ChoiceSet, ChoiceTrie, build_trie

CACHE_FORMAT = "choicegate-cache-v1"
EMPTY_STAGE1_MARKER = "(no response)"
DEFAULT_REPHRASE_TEMPLATE = (
    "Rewrite the following response as a single short answer.\n\nResponse: {nlg}"
)

METHODS = ("choice", "nlg2choice", "nlg2choice_open", "nlg2nlg2choice", "yes_no", "retrieval_trunc")
CLASSIFICATION_METHODS = frozenset({"choice", "nlg2choice", "nlg2choice_open", "nlg2nlg2choice"})
GENERATIVE_METHODS = frozenset(
    {"nlg2choice", "nlg2choice_open", "nlg2nlg2choice", "retrieval_trunc"}
)
SELECTORS = ("truncated_argmax", "greedy")
MAX_ROUNDS = 8


class CacheError(RuntimeError):
    """Cache corruption or a config mismatch against an existing cache."""


@dataclass(frozen=True)
class Example:
    id: str
    image: str | None
    ground_truth: int


def load_manifest(path, choices: ChoiceSet) -> list[Example]:
    """Dataset manifest: JSON lines {"id", "image", "label"}; labels resolve
    against the choice set."""
    label_ids = {label: cid for cid, label in enumerate(choices)}
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            label = row["label"]
            if label not in label_ids:
                raise ValueError(f"{path}:{lineno}: label {label!r} not in the choice set")
            if row["id"] in seen:
                raise ValueError(f"{path}:{lineno}: duplicate example id {row['id']!r}")
            seen.add(row["id"])
            examples.append(
                Example(id=str(row["id"]), image=row.get("image"), ground_truth=label_ids[label])
            )
    return examples


@dataclass
class RunRecord:
    example_id: str
    prompt_id: str
    method: str
    status: str = "ok"
    stage1_text: str | None = None
    round_texts: list[str] | None = None
    prediction: int | None = None
    prediction_label: str | None = None
    scores: list[float] | None = None
    passes_used: int = 0
    started: float = 0.0
    finished: float = 0.0
    flags: list[str] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))

    @property
    def key(self) -> tuple[str, str]:
        return (self.example_id, self.prompt_id)


@dataclass(frozen=True)
class RunConfig:
    profile: DatasetProfile
    templates: tuple[PromptTemplate, ...]
    method: str = "nlg2choice"
    steering: SteeringMode = SteeringMode.TYPE_ONLY
    cot: str | None = None
    normalization: str = RENORM
    selector: str = "truncated_argmax"
    max_new_tokens: int = 512
    rounds: int = 2
    rephrase_template: str = DEFAULT_REPHRASE_TEMPLATE
    yes_text: str = "Yes"
    no_text: str = "No"
    jobs: int = 1
    fixed_time: float | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not 1 <= self.rounds <= MAX_ROUNDS:
            raise ValueError(f"rounds must be in [1, {MAX_ROUNDS}]")
        if self.profile.choices is None:
            raise ValueError("profile has no choice set")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


def config_hash(cfg: RunConfig, backend_desc: str) -> str:
    """Stable digest of everything that affects record contents."""
    payload = {
        "format": CACHE_FORMAT,
        "profile": {
            "name": cfg.profile.name,
            "type": cfg.profile.type,
            "domain": cfg.profile.domain,
            "labels": list(cfg.profile.choices.labels),
        },
        "templates": [[tpl.id, tpl.body] for tpl in cfg.templates],
        "method": cfg.method,
        "steering": cfg.steering.value if cfg.method in GENERATIVE_METHODS | {"choice"} else None,
        "cot": cfg.cot if cfg.method in GENERATIVE_METHODS else None,
        "normalization": cfg.normalization,
        "selector": cfg.selector if cfg.method in CLASSIFICATION_METHODS else None,
        "max_new_tokens": cfg.max_new_tokens,
        "rounds": cfg.rounds if cfg.method == "nlg2nlg2choice" else None,
        "rephrase_template": cfg.rephrase_template if cfg.method == "nlg2nlg2choice" else None,
        "yes_no": [cfg.yes_text, cfg.no_text] if cfg.method == "yes_no" else None,
        "backend": backend_desc,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def backend_description(backend: LMBackend) -> str:
    desc = getattr(backend, "describe", None)
    if callable(desc):
        return desc()
    base = getattr(backend, "base_url", None)
    if base:
        return f"remote:{base}"
    return type(backend).__name__


# -- single-example methods -------------------------------------------------


def _select(cfg: RunConfig, backend, trie: ChoiceTrie, prompt: str, image=None):
    """Constrained selection; returns (choice id, scores or None, passes)."""
    if cfg.selector == "greedy":
        choice, passes = greedy_decode_with_passes(backend, prompt, trie, image=image)
        return choice, None, passes
    scores = truncated_choice_logprobs(backend, prompt, trie, cfg.normalization, image=image)
    return scores.argmax(), list(scores.log_scores), scores.passes_used


def _effective_steering(cfg: RunConfig) -> SteeringMode:
    if cfg.method == "nlg2choice_open":
        return SteeringMode.OPEN
    return cfg.steering


def _generate_rounds(cfg: RunConfig, backend, example: Example, tpl: PromptTemplate, rounds: int):
    """Stage-1 generation plus any text-only rephrase rounds; returns the
    list of round texts (verbatim, forced prefix included)."""
    stage1 = build_stage1_prompt(tpl, cfg.profile, _effective_steering(cfg), cfg.cot)
    text = backend.generate(
        GenerationRequest(
            prompt=stage1.text,
            image=example.image,
            forced_prefix=stage1.forced_prefix,
            max_new_tokens=cfg.max_new_tokens,
        )
    )
    texts = [text]
    for _ in range(rounds - 1):
        nlg = texts[-1] if texts[-1].strip() else EMPTY_STAGE1_MARKER
        rephrase_prompt = substitute(cfg.rephrase_template, {"nlg": nlg})
        texts.append(
            backend.generate(
                GenerationRequest(prompt=rephrase_prompt, max_new_tokens=cfg.max_new_tokens)
            )
        )
    return texts


def classify_choice_baseline(
    cfg: RunConfig, backend, trie: ChoiceTrie, example: Example, tpl: PromptTemplate
) -> RunRecord:
    """Constrained decoding directly on the (image) prompt."""
    record = RunRecord(example_id=example.id, prompt_id=tpl.id, method="choice")
    prompt = build_stage1_prompt(tpl, cfg.profile, cfg.steering, cot=None).text
    choice, scores, passes = _select(cfg, backend, trie, prompt, image=example.image)
    record.prediction = choice
    record.prediction_label = trie.choices.labels[choice]
    record.scores = scores
    record.passes_used = passes
    return record


def classify_nlg2choice(
    cfg: RunConfig, backend, trie: ChoiceTrie, example: Example, tpl: PromptTemplate
) -> RunRecord:
    """Free-form response first, then text-only constrained selection."""
    return classify_multi_round(cfg, backend, trie, example, tpl, rounds=1)


def classify_multi_round(
    cfg: RunConfig,
    backend,
    trie: ChoiceTrie,
    example: Example,
    tpl: PromptTemplate,
    rounds: int,
) -> RunRecord:
    """nlg2choice with (rounds - 1) text-only rephrase generations inserted
    before the final constrained selection; rounds=1 is plain nlg2choice."""
    if not 1 <= rounds <= MAX_ROUNDS:
        raise ValueError(f"rounds must be in [1, {MAX_ROUNDS}]")
    record = RunRecord(example_id=example.id, prompt_id=tpl.id, method=cfg.method)
    texts = _generate_rounds(cfg, backend, example, tpl, rounds)
    record.stage1_text = texts[0]
    if rounds > 1:
        record.round_texts = texts
    final = texts[-1]
    if not final.strip():
        record.flags.append("empty_stage1")
        final = EMPTY_STAGE1_MARKER
    stage2 = build_stage2_prompt(cfg.profile, final)
    choice, scores, passes = _select(cfg, backend, trie, stage2, image=None)
    record.prediction = choice
    record.prediction_label = trie.choices.labels[choice]
    record.scores = scores
    record.passes_used = passes
    return record


def score_retrieval_trunc(
    cfg: RunConfig, backend, trie: ChoiceTrie, example: Example, tpl: PromptTemplate
) -> RunRecord:
    """Stage-1 generate, then truncated scores over every choice from the
    text-only prompt; the per-choice vector is the retrieval row."""
    record = RunRecord(example_id=example.id, prompt_id=tpl.id, method="retrieval_trunc")
    texts = _generate_rounds(cfg, backend, example, tpl, rounds=1)
    record.stage1_text = texts[0]
    final = texts[0]
    if not final.strip():
        record.flags.append("empty_stage1")
        final = EMPTY_STAGE1_MARKER
    stage2 = build_stage2_prompt(cfg.profile, final)
    scores = truncated_choice_logprobs(backend, stage2, trie, cfg.normalization, image=None)
    record.scores = list(scores.log_scores)
    record.passes_used = scores.passes_used
    return record


def score_yes_no(
    cfg: RunConfig, backend, trie: ChoiceTrie, example: Example, tpl: PromptTemplate
) -> RunRecord:
    """One Yes/No query per choice; the p_yes vector is the retrieval row."""
    vocab = trie.vocab
    yes_id = first_token_id(vocab, cfg.yes_text)
    no_id = first_token_id(vocab, cfg.no_text)
    record = RunRecord(example_id=example.id, prompt_id=tpl.id, method="yes_no")
    row = []
    for label in cfg.profile.choices:
        prompt = build_yesno_prompt(cfg.profile, label)
        row.append(yes_no_score(backend, prompt, yes_id, no_id, image=example.image).p_yes)
    record.scores = row
    record.passes_used = len(row)  # one forward pass per choice, by contract
    return record


_RUNNERS = {
    "choice": classify_choice_baseline,
    "nlg2choice": classify_nlg2choice,
    "nlg2choice_open": classify_nlg2choice,
    "yes_no": score_yes_no,
    "retrieval_trunc": score_retrieval_trunc,
}


def run_one(
    cfg: RunConfig, backend, trie: ChoiceTrie, example: Example, tpl: PromptTemplate
) -> RunRecord:
    """One (example, prompt) record; failures are recorded, never raised."""
    clock = (lambda: cfg.fixed_time) if cfg.fixed_time is not None else time.time
    started = clock()
    try:
        if cfg.method == "nlg2nlg2choice":
            record = classify_multi_round(cfg, backend, trie, example, tpl, rounds=cfg.rounds)
        else:
            record = _RUNNERS[cfg.method](cfg, backend, trie, example, tpl)
    except Exception as exc:  # noqa: BLE001 - failures are first-class record states
        record = RunRecord(
            example_id=example.id,
            prompt_id=tpl.id,
            method=cfg.method,
            status="failed",
            error=f"{type(exc).__name__}: {exc}",
        )
    record.started = started
    record.finished = clock()
    return record


# -- batches and the cache ----------------------------------------------------


@dataclass
class BatchResult:
    records: list[RunRecord]
    computed: int
    cached: int
    failed: int


def _read_cache(path: Path, expected_hash: str, overwrite: bool):
    """Existing records keyed for resume; raises on corruption/mismatch."""
    if overwrite or not path.exists():
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CacheError(f"cannot read cache {path}: {exc}") from exc
    if not lines:
        return None
    try:
        header = json.loads(lines[0])
        if header.get("format") != CACHE_FORMAT:
            raise ValueError("missing cache header")
        records = [RunRecord.from_json(line) for line in lines[1:] if line]
    except (ValueError, KeyError, TypeError) as exc:
        raise CacheError(
            f"cache {path} is corrupt ({exc}); refusing to resume, rerun with overwrite"
        ) from exc
    if header.get("config_hash") != expected_hash:
        raise CacheError(
            f"cache {path} was written with a different config; refusing to reuse it"
        )
    return records


def run_batch(
    cfg: RunConfig,
    backend,
    examples: list[Example],
    cache_path,
    resume: bool = False,
    overwrite: bool = False,
    trie: ChoiceTrie | None = None,
) -> BatchResult:
    """Record per (example, prompt), ordered by (example id, prompt id).

    Already-cached records are not recomputed; an interrupted run resumes to
    a byte-identical cache because records are streamed in sorted order.
    """
    cache_path = Path(cache_path)
    if trie is None:
        trie = build_trie(cfg.profile.choices, backend.vocabulary())
    digest = config_hash(cfg, backend_description(backend))
    existing = _read_cache(cache_path, digest, overwrite)
    if existing and not resume:
        raise CacheError(
            f"cache {cache_path} already holds {len(existing)} records; pass resume to continue"
        )
    done = {record.key: record for record in existing} if existing else {}

    tasks = [
        (example, tpl)
        for example in sorted(examples, key=lambda e: e.id)
        for tpl in sorted(cfg.templates, key=lambda t: t.id)
    ]
    todo = [(example, tpl) for example, tpl in tasks if (example.id, tpl.id) not in done]

    cache_path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not existing
    mode = "w" if fresh else "a"
    records: list[RunRecord] = list(done.values())
    computed = 0
    with open(cache_path, mode, encoding="utf-8", newline="\n") as fh:
        if fresh:
            fh.write(json.dumps({"format": CACHE_FORMAT, "config_hash": digest}) + "\n")
        if cfg.jobs > 1:
            executor = ThreadPoolExecutor(max_workers=cfg.jobs)
            results = executor.map(lambda t: run_one(cfg, backend, trie, *t), todo)
        else:
            results = (run_one(cfg, backend, trie, example, tpl) for example, tpl in todo)
        for record in results:
            fh.write(record.to_json() + "\n")
            records.append(record)
            computed += 1
        if cfg.jobs > 1:
            executor.shutdown()

    records.sort(key=lambda r: r.key)
    failed = sum(1 for r in records if r.status == "failed")
    return BatchResult(records=records, computed=computed, cached=len(done), failed=failed)


def retrieve_scores(
    cfg: RunConfig,
    backend,
    examples: list[Example],
    cache_path,
    resume: bool = False,
    overwrite: bool = False,
    trie: ChoiceTrie | None = None,
):
    """Retrieval run: the batch result plus (example id, score row) pairs,
    one row per successfully scored example; failed examples are flagged in
    the records and omitted from the matrix."""
    if cfg.method not in ("retrieval_trunc", "yes_no"):
        raise ValueError(f"retrieve_scores needs a retrieval method, got {cfg.method!r}")
    result = run_batch(
        cfg, backend, examples, cache_path, resume=resume, overwrite=overwrite, trie=trie
    )
    rows = [
        (record.example_id, list(record.scores))
        for record in result.records
        if record.status == "ok" and record.scores is not None
    ]
    return result, rows


def load_cache(cache_path) -> list[RunRecord]:
    with open(cache_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return []
    header = json.loads(lines[0])
    if header.get("format") != CACHE_FORMAT:
        raise CacheError(f"{cache_path} is not a record cache")
    return [RunRecord.from_json(line) for line in lines[1:] if line]


def dump_score_matrix(records: list[RunRecord], path) -> int:
    """Score matrix: JSON lines {"example_id", "scores"} for successful
    scoring records, ordered by (example id, prompt id)."""
    rows = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in sorted(records, key=lambda r: r.key):
            if record.status != "ok" or record.scores is None:
                continue
            fh.write(
                json.dumps(
                    {"example_id": record.example_id, "scores": record.scores},
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )
            rows += 1
    return rows


def load_score_matrix(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def dump_score_details(records: list[RunRecord], normalization: str, path) -> int:
    """Score dump: one JSON object per (example, choice) with the log-score,
    for records carrying per-choice log-scores."""
    rows = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in sorted(records, key=lambda r: r.key):
            if record.status != "ok" or record.scores is None:
                continue
            for choice_id, log_score in enumerate(record.scores):
                fh.write(
                    json.dumps(
                        {
                            "example_id": record.example_id,
                            "choice_id": choice_id,
                            "log_score": log_score,
                            "normalization": normalization,
                            "passes_used": record.passes_used,
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                rows += 1
    return rows
