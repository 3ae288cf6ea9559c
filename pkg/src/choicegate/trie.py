"""Prefix tree over tokenized choice labels.

Each label is encoded and terminated with the vocabulary's end-of-choice
sentinel, so the path set is prefix-free even when one label is a prefix of
another (e.g. a genus-level label contained in a species label).  The trie
carries per-node choice counts, from which two things fall out:

* the truncation point of a choice: the first token after which the prefix
  identifies that choice uniquely, so probabilities for the remaining tokens
  need not be computed;
* forward-pass accounting: how many distinct next-token distributions each
  scoring mode needs.

Node children are ordered by token id so every traversal is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .tokenizer import TokenizeError, Vocabulary, encode


@dataclass(frozen=True)
class ChoiceSet:
    """Ordered list of choice label strings; the index is the choice id."""

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("choice set is empty")
        seen = set()
        for label in self.labels:
            if label in seen:
                raise ValueError(f"duplicate choice label {label!r}")
            seen.add(label)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def id_of(self, label: str) -> int:
        return self.labels.index(label)


def load_choice_set(path) -> ChoiceSet:
    """Choice list file: one label per line, order significant."""
    labels = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            label = line.rstrip("\r\n")
            if label == "":
                continue
            if label in seen:
                raise ValueError(
                    f"{path}:{lineno}: duplicate choice label {label!r} (first at line {seen[label]})"
                )
            seen[label] = lineno
            labels.append(label)
    return ChoiceSet(labels=tuple(labels))


@dataclass
class TrieNode:
    children: dict[int, int] = field(default_factory=dict)  # token id -> node id
    choice_count: int = 0
    terminal_choice: int | None = None


@dataclass(frozen=True)
class TruncationPoint:
    """Number of leading path tokens whose probabilities are multiplied.

    ``included_len`` is 1-based over the choice's full path (label tokens
    followed by the eos sentinel); the prefix of that length matches exactly
    one choice.
    """

    choice: int
    included_len: int


class ChoiceTrie:
    """Immutable after build; safe to share across concurrent scoring tasks."""

    def __init__(self, choices: ChoiceSet, vocab: Vocabulary):
        self.choices = choices
        self.vocab = vocab
        self.eos_id = vocab.eos_id
        self.nodes: list[TrieNode] = [TrieNode()]
        self.root = 0
        self.choice_paths: list[tuple[int, ...]] = []
        self._node_paths: list[tuple[int, ...]] = []  # label-token node ids per choice

        for choice_id, label in enumerate(choices):
            try:
                label_ids = encode(vocab, label).ids
            except TokenizeError as exc:
                raise TokenizeError(f"choice {label!r} is not tokenizable: {exc}") from exc
            node = self.root
            visited = []
            self.nodes[node].choice_count += 1
            for tid in label_ids:
                nxt = self.nodes[node].children.get(tid)
                if nxt is None:
                    nxt = len(self.nodes)
                    self.nodes.append(TrieNode())
                    self.nodes[node].children[tid] = nxt
                node = nxt
                self.nodes[node].choice_count += 1
                visited.append(node)
            if self.nodes[node].terminal_choice is not None:
                raise ValueError(f"duplicate token path for choice {label!r}")
            self.nodes[node].terminal_choice = choice_id
            self.choice_paths.append(label_ids + (self.eos_id,))
            self._node_paths.append(tuple(visited))

        for node in self.nodes:
            node.children = dict(sorted(node.children.items()))

    def node(self, node_id: int) -> TrieNode:
        if not 0 <= node_id < len(self.nodes):
            raise IndexError(f"invalid node id {node_id}")
        return self.nodes[node_id]

    def allowed_tokens(self, node_id: int) -> tuple[int, ...]:
        """Token ids that extend some choice from this node (eos included
        when a choice terminates here)."""
        node = self.node(node_id)
        allowed = list(node.children)
        if node.terminal_choice is not None:
            allowed.append(self.eos_id)
        return tuple(allowed)

    def step(self, node_id: int, token_id: int) -> int:
        nxt = self.node(node_id).children.get(token_id)
        if nxt is None:
            raise KeyError(f"token {token_id} does not extend node {node_id}")
        return nxt

    def truncation_point(self, choice: int) -> TruncationPoint:
        """First 1-based path position after which only this choice remains.

        When the label is a proper prefix of another label, uniqueness is
        only reached on the eos step, so included_len spans the full path.
        """
        if not 0 <= choice < len(self.choices):
            raise IndexError(f"invalid choice id {choice}")
        for depth, node_id in enumerate(self._node_paths[choice], start=1):
            if self.nodes[node_id].choice_count == 1:
                return TruncationPoint(choice=choice, included_len=depth)
        return TruncationPoint(choice=choice, included_len=len(self.choice_paths[choice]))

    def path_nodes(self, choice: int) -> tuple[int, ...]:
        """Node ids visited by the choice's label tokens (root excluded)."""
        return self._node_paths[choice]

    def eos_needed(self, choice: int) -> bool:
        """Whether the full-probability product must include the eos factor
        to keep the path prefix-free (the label prefixes another label)."""
        terminal = self._node_paths[choice][-1] if self._node_paths[choice] else self.root
        return bool(self.nodes[terminal].children)

    def forward_pass_count(self, mode: str) -> int:
        """Distinct next-token distributions needed by a scoring mode.

        full: nodes (root included) with at least one non-eos outgoing edge,
        shared across choices.  truncated: nodes still shared by two or more
        choices; once a prefix is unique the remaining tokens are forced and
        no distribution is read.  yes_no: one pass per choice.
        """
        if mode == "yes_no":
            return len(self.choices)
        if mode == "full":
            return sum(1 for node in self.nodes if node.children)
        if mode == "truncated":
            return sum(1 for node in self.nodes if node.choice_count >= 2)
        raise ValueError(f"unknown accounting mode {mode!r}")


def build_trie(choices: ChoiceSet, vocab: Vocabulary) -> ChoiceTrie:
    return ChoiceTrie(choices, vocab)
