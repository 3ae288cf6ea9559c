"""Shared builders and independent oracles for the test suite.

The oracles here never touch the trie or the scorers they check: accounting
is brute-force prefix enumeration over token paths, and average precision is
a dumb precision/recall step curve.
"""

from __future__ import annotations

import math
import random
from collections import Counter

import pytest

from choicegate.backend import MockBackend
from choicegate.tokenizer import Vocabulary, decode, encode
from choicegate.trie import ChoiceSet, build_trie

LETTERS = "abcdef"


def single_char_vocab(chars: str = "abcdefghijklmnopqrstuvwxyz ") -> Vocabulary:
    return Vocabulary(entries={c: i for i, c in enumerate(chars)}, eos_id=len(chars))


@pytest.fixture
def char_vocab() -> Vocabulary:
    return single_char_vocab()


def spec_toy_setup(prompt: str = "Q: "):
    """The {"abc", "abd", "xyz"} toy: root a=0.5 x=0.3 other=0.2, after "a"
    b=0.9, after "ab" c=0.6 d=0.3 e=0.1; remaining nodes get full mass on
    their single continuation so every table row is a proper distribution."""
    vocab_cfg = {"tokens": {c: i for i, c in enumerate("abcdexyz")}, "eos_id": 8}
    table = {
        "vocab": vocab_cfg,
        "distributions": [
            {"prefix_is": prompt, "probs": {"a": 0.5, "x": 0.3}, "other_mass": 0.2},
            {"prefix_is": prompt + "a", "probs": {"b": 0.9}, "other_mass": 0.1},
            {"prefix_is": prompt + "ab", "probs": {"c": 0.6, "d": 0.3, "e": 0.1}},
            {"prefix_is": prompt + "x", "probs": {"y": 0.8}, "other_mass": 0.2},
            {"prefix_is": prompt + "xy", "probs": {"z": 0.7}, "other_mass": 0.3},
        ],
    }
    backend = MockBackend(table)
    choices = ChoiceSet(("abc", "abd", "xyz"))
    trie = build_trie(choices, backend.vocabulary())
    return backend, trie, prompt


# -- randomized instances ------------------------------------------------------


def random_vocab(rng: random.Random, max_tokens: int = 50) -> Vocabulary:
    entries = {c: i for i, c in enumerate(LETTERS)}
    n_extra = rng.randint(0, max(0, max_tokens - len(LETTERS) - 1))
    while len(entries) < len(LETTERS) + n_extra:
        piece = "".join(rng.choice(LETTERS) for _ in range(rng.randint(2, 3)))
        if piece not in entries:
            entries[piece] = len(entries)
    return Vocabulary(entries=entries, eos_id=len(entries))


def random_choices(
    rng: random.Random, max_choices: int = 20, force_prefix_containment: bool = False
) -> ChoiceSet:
    n = rng.randint(1, max_choices)
    labels: set[str] = set()
    while len(labels) < n:
        labels.add("".join(rng.choice(LETTERS) for _ in range(rng.randint(1, 8))))
    labels = sorted(labels)
    if force_prefix_containment:
        base = rng.choice(labels)
        longer = base + rng.choice(LETTERS)
        if longer not in labels:
            labels.append(longer)
    return ChoiceSet(tuple(labels))


def table_for_trie(rng: random.Random, trie, vocab: Vocabulary, prompt: str) -> dict:
    """Exact-match mock entries for every queried trie node, each row a
    proper distribution (total mass 1, some of it off the listed tokens)."""
    entries = []
    stack = [(trie.root, prompt)]
    while stack:
        node_id, text = stack.pop()
        node = trie.node(node_id)
        allowed = trie.allowed_tokens(node_id)
        weights = {tid: rng.random() + 0.05 for tid in allowed}
        other = rng.random() * 0.5
        total = sum(weights.values()) + other
        probs = {}
        eos_prob = None
        for tid, w in weights.items():
            if tid == trie.eos_id:
                eos_prob = w / total
            else:
                probs[vocab.token_of(tid)] = w / total
        entry = {"prefix_is": text, "probs": probs, "other_mass": other / total}
        if eos_prob is not None:
            entry["eos_prob"] = eos_prob
        entries.append(entry)
        for tid, child in node.children.items():
            stack.append((child, text + vocab.token_of(tid)))
    return {"vocab": vocab.to_file_dict(), "distributions": entries}


def random_instance(seed: int, force_prefix_containment: bool = False):
    """(backend, trie, prompt) over a random vocab, choice set, and table."""
    rng = random.Random(seed)
    vocab = random_vocab(rng)
    choices = random_choices(rng, force_prefix_containment=force_prefix_containment)
    trie = build_trie(choices, vocab)
    prompt = "Task %d: " % seed
    backend = MockBackend(table_for_trie(rng, trie, vocab, prompt))
    return backend, trie, prompt


# -- independent oracles --------------------------------------------------------


def brute_force_pass_counts(trie) -> tuple[int, int]:
    """(full, truncated) by enumerating token-path prefixes, no trie walk.

    full: distinct prefixes followed by a non-eos token in some path.
    truncated: distinct label-token prefixes (root and full label included)
    shared by at least two choices.
    """
    paths = trie.choice_paths
    eos = trie.eos_id
    full_prefixes = set()
    for path in paths:
        for k, token in enumerate(path):
            if token != eos:
                full_prefixes.add(tuple(path[:k]))
    counter: Counter = Counter()
    for path in paths:
        label = path[:-1]
        for k in range(len(label) + 1):
            counter[tuple(label[:k])] += 1
    truncated = sum(1 for count in counter.values() if count >= 2)
    return len(full_prefixes), truncated


def brute_force_full_logprob(backend, prompt: str, trie, choice: int, renormalize: bool) -> float:
    """Per-step product over the choice's path, computed without the scorer's
    caching or the trie's truncation machinery."""
    path = trie.choice_paths[choice]
    label = path[:-1]
    text = prompt
    node = trie.root
    total = 0.0
    steps = list(label)
    if trie.eos_needed(choice):
        steps.append(trie.eos_id)
    for token in steps:
        allowed = trie.allowed_tokens(node)
        dist = backend.next_token_logprobs(text, allowed)
        term = dist.logprobs[token]
        if renormalize:
            m = max(dist.logprobs[t] for t in allowed)
            term -= m + math.log(sum(math.exp(dist.logprobs[t] - m) for t in allowed))
        total += term
        if token != trie.eos_id:
            text += trie.vocab.token_of(token)
            node = trie.step(node, token)
    return total


def brute_force_average_precision(scores, positives) -> float:
    """AP from the precision/recall step curve: sum over positive ranks of
    (recall step) x precision, walking the ranking one rank at a time."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for p in positives if p)
    assert n_pos > 0
    hits = 0
    area = 0.0
    prev_recall = 0.0
    for rank, idx in enumerate(order, start=1):
        if positives[idx]:
            hits += 1
            recall = hits / n_pos
            precision = hits / rank
            area += (recall - prev_recall) * precision
            prev_recall = recall
    return area


def roundtrip_label(vocab: Vocabulary, label: str) -> str:
    return decode(vocab, encode(vocab, label))
