"""Choice-probability computation over a choice trie.

Two sequence scores per choice:

* full: the product over the entire token path of per-token probabilities
  (the eos factor enters only when the label prefixes another label, which
  is when prefix-freeness needs it);
* truncated: the same product stopped at the first token after which the
  prefix identifies the choice uniquely.  Every later token is forced under
  constrained generation, so in per-step-renormalized mode the truncated
  score equals the full constrained score exactly; that equality is what
  makes early stopping free.

Both run in raw or per-step-renormalized mode.  Raw multiplies unmasked
next-token probabilities; renormalized masks each step to the tokens that
extend some choice and rescales.  All arithmetic stays in log space until
final reporting.

Distributions are fetched once per distinct prefix and shared across choices
through the trie; ``passes_used`` on the returned scores is the number of
fetches and must match the trie's forward-pass accounting for the mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .backend import LMBackend, NextTokenDistribution
from .tokenizer import Vocabulary, encode
from .trie import ChoiceTrie

RAW = "raw"
RENORM = "per_step_renormalized"
NORMALIZATIONS = (RAW, RENORM)

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ChoiceScores:
    """Per-choice log-scores plus the pass accounting for the mode used."""

    log_scores: tuple[float, ...]
    normalization: str
    passes_used: int

    def argmax(self) -> int:
        """Highest-scoring choice id; ties break to the lowest id."""
        best = 0
        for cid in range(1, len(self.log_scores)):
            if self.log_scores[cid] > self.log_scores[best]:
                best = cid
        return best


@dataclass(frozen=True)
class YesNoScore:
    p_yes: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_yes <= 1.0:
            raise ValueError(f"p_yes {self.p_yes} outside [0, 1]")


def _logsumexp(values) -> float:
    m = max(values)
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(sum(math.exp(v - m) for v in values))


def masked_renormalize(dist: NextTokenDistribution, allowed) -> NextTokenDistribution:
    """Restrict ``dist`` to ``allowed`` token ids and rescale to sum to 1."""
    allowed = tuple(allowed)
    if not allowed:
        raise ValueError("allowed set is empty")
    missing = [tid for tid in allowed if tid not in dist.logprobs]
    if missing:
        raise ValueError(f"allowed ids missing from distribution: {missing}")
    total = _logsumexp([dist.logprobs[tid] for tid in allowed])
    if total == NEG_INF:
        raise ValueError("no probability mass on allowed tokens")
    return NextTokenDistribution(
        logprobs={tid: dist.logprobs[tid] - total for tid in allowed},
        logsumexp_all=0.0,
    )


class _PrefixCache:
    """One next-token distribution per distinct trie node for this scoring
    call; fetch count is the pass count."""

    def __init__(self, backend: LMBackend, prompt: str, trie: ChoiceTrie, image: str | None):
        self.backend = backend
        self.prompt = prompt
        self.trie = trie
        self.image = image
        self._dists: dict[int, NextTokenDistribution] = {}
        self._texts: dict[int, str] = {trie.root: prompt}

    def register(self, node_id: int, parent_id: int, token_id: int) -> None:
        if node_id not in self._texts:
            self._texts[node_id] = self._texts[parent_id] + self.trie.vocab.token_of(token_id)

    def get(self, node_id: int) -> NextTokenDistribution:
        dist = self._dists.get(node_id)
        if dist is None:
            dist = self.backend.next_token_logprobs(
                self._texts[node_id], self.trie.allowed_tokens(node_id), image=self.image
            )
            self._dists[node_id] = dist
        return dist

    @property
    def misses(self) -> int:
        return len(self._dists)


def _step_term(
    cache: _PrefixCache, node_id: int, token_id: int, normalization: str
) -> float:
    dist = cache.get(node_id)
    if token_id not in dist.logprobs:
        raise ValueError(f"token {token_id} missing from distribution at node {node_id}")
    if normalization == RAW:
        return dist.logprobs[token_id]
    total = _logsumexp([dist.logprobs[t] for t in cache.trie.allowed_tokens(node_id)])
    if total == NEG_INF:
        raise ValueError("no probability mass on allowed tokens")
    return dist.logprobs[token_id] - total


def _check_normalization(normalization: str) -> None:
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")


def _full_logprob(cache: _PrefixCache, choice: int, normalization: str) -> float:
    trie = cache.trie
    node = trie.root
    score = 0.0
    for token_id in trie.choice_paths[choice][:-1]:
        child = trie.step(node, token_id)
        cache.register(child, node, token_id)
        score += _step_term(cache, node, token_id, normalization)
        node = child
    if trie.eos_needed(choice):
        score += _step_term(cache, node, trie.eos_id, normalization)
    return score


def full_choice_logprob(
    backend: LMBackend,
    prompt: str,
    trie: ChoiceTrie,
    choice: int,
    normalization: str = RENORM,
    image: str | None = None,
) -> float:
    """Log-probability of one choice's entire token path."""
    _check_normalization(normalization)
    if not 0 <= choice < len(trie.choices):
        raise IndexError(f"invalid choice id {choice}")
    return _full_logprob(_PrefixCache(backend, prompt, trie, image), choice, normalization)


def full_choice_logprobs(
    backend: LMBackend,
    prompt: str,
    trie: ChoiceTrie,
    normalization: str = RENORM,
    image: str | None = None,
) -> ChoiceScores:
    """Full-path log-scores for every choice, sharing prefix distributions."""
    _check_normalization(normalization)
    cache = _PrefixCache(backend, prompt, trie, image)
    scores = tuple(
        _full_logprob(cache, choice, normalization) for choice in range(len(trie.choices))
    )
    return ChoiceScores(log_scores=scores, normalization=normalization, passes_used=cache.misses)


def truncated_choice_logprobs(
    backend: LMBackend,
    prompt: str,
    trie: ChoiceTrie,
    normalization: str = RENORM,
    image: str | None = None,
) -> ChoiceScores:
    """Early-stopped log-scores: factors past each choice's truncation point
    are omitted, and distributions are read only at prefixes still shared by
    two or more choices."""
    _check_normalization(normalization)
    cache = _PrefixCache(backend, prompt, trie, image)
    scores = []
    for choice in range(len(trie.choices)):
        included = trie.truncation_point(choice).included_len
        path = trie.choice_paths[choice]
        node = trie.root
        score = 0.0
        for k in range(included):
            token_id = path[k]
            ambiguous = trie.node(node).choice_count >= 2
            if ambiguous:
                score += _step_term(cache, node, token_id, normalization)
            if token_id != trie.eos_id:
                child = trie.step(node, token_id)
                cache.register(child, node, token_id)
                node = child
        scores.append(score)
    return ChoiceScores(
        log_scores=tuple(scores), normalization=normalization, passes_used=cache.misses
    )


def constrained_greedy_decode(
    backend: LMBackend, prompt: str, trie: ChoiceTrie, image: str | None = None
) -> int:
    """Token-level greedy walk; always lands on a member of the choice set.

    At each node the allowed token with the highest renormalized probability
    is taken (ties to the lowest token id); forced steps need no query.
    Token-level greedy can differ from the sequence-level argmax.
    """
    choice, _ = greedy_decode_with_passes(backend, prompt, trie, image)
    return choice


def greedy_decode_with_passes(
    backend: LMBackend, prompt: str, trie: ChoiceTrie, image: str | None = None
) -> tuple[int, int]:
    """constrained_greedy_decode plus the number of distributions fetched."""
    cache = _PrefixCache(backend, prompt, trie, image)
    node = trie.root
    while True:
        allowed = trie.allowed_tokens(node)
        if len(allowed) == 1:
            token_id = allowed[0]
        else:
            dist = cache.get(node)
            token_id = allowed[0]
            for tid in allowed[1:]:
                if dist.logprobs[tid] > dist.logprobs[token_id] or (
                    dist.logprobs[tid] == dist.logprobs[token_id] and tid < token_id
                ):
                    token_id = tid
        if token_id == trie.eos_id:
            terminal = trie.node(node).terminal_choice
            assert terminal is not None
            return terminal, cache.misses
        child = trie.step(node, token_id)
        cache.register(child, node, token_id)
        node = child


def first_token_id(vocab: Vocabulary, text: str) -> int:
    """Id of the first token of ``text`` under the greedy tokenizer."""
    return encode(vocab, text).ids[0]


def yes_no_score(
    backend: LMBackend,
    prompt: str,
    yes_token: int,
    no_token: int,
    image: str | None = None,
) -> YesNoScore:
    """Two-way softmax over the Yes/No first-token log-probabilities at the
    prompt; one forward pass."""
    dist = backend.next_token_logprobs(prompt, (yes_token, no_token), image=image)
    ly, ln = dist.logprobs[yes_token], dist.logprobs[no_token]
    if ly == NEG_INF and ln == NEG_INF:
        raise ValueError("no probability mass on either token")
    if ly == NEG_INF:
        return YesNoScore(p_yes=0.0)
    if ln == NEG_INF:
        return YesNoScore(p_yes=1.0)
    return YesNoScore(p_yes=1.0 / (1.0 + math.exp(ln - ly)))


def score_dump_lines(example_id: str, scores: ChoiceScores):
    """Score dump rows: one JSON object per (example, choice)."""
    for choice_id, log_score in enumerate(scores.log_scores):
        yield json.dumps(
            {
                "example_id": example_id,
                "choice_id": choice_id,
                "log_score": log_score,
                "normalization": scores.normalization,
                "passes_used": scores.passes_used,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
