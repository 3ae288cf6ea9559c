"""Deterministic text <-> token-id conversion over a pluggable vocabulary.

The reference scheme is greedy longest-match segmentation: at each position
the longest vocabulary entry matching the remaining text is consumed.  It is
deterministic and trivially auditable, which is what the trie and scorers
need; runs against real models can instead fetch tokenizations from the
serving backend.  Matching is on exact UTF-8 strings, no normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class VocabularyError(ValueError):
    """Raised for malformed vocabulary files or inconsistent entries."""


class TokenizeError(ValueError):
    """Raised when a text cannot be segmented with the vocabulary."""


@dataclass(frozen=True)
class Vocabulary:
    """Token string -> id table with a reserved end-of-choice sentinel.

    ``eos_id`` is not mapped by any token string; it terminates choice paths
    in the trie so label sets are prefix-free.
    """

    entries: dict[str, int]
    eos_id: int
    _by_id: dict[int, str] = field(init=False, repr=False, compare=False)
    _max_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_id: dict[int, str] = {}
        for token, tid in self.entries.items():
            if token == "":
                raise VocabularyError("empty token string")
            if not isinstance(tid, int) or isinstance(tid, bool) or tid < 0:
                raise VocabularyError(f"token id for {token!r} must be a non-negative integer")
            if tid in by_id:
                raise VocabularyError(f"duplicate token id {tid} ({by_id[tid]!r} and {token!r})")
            by_id[tid] = token
        if not isinstance(self.eos_id, int) or isinstance(self.eos_id, bool) or self.eos_id < 0:
            raise VocabularyError("eos_id must be a non-negative integer")
        if self.eos_id in by_id:
            raise VocabularyError(f"eos_id {self.eos_id} collides with token {by_id[self.eos_id]!r}")
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_max_len", max((len(t) for t in self.entries), default=0))

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, token: str) -> int:
        return self.entries[token]

    def token_of(self, tid: int) -> str:
        if tid == self.eos_id:
            raise TokenizeError("eos_id has no token string")
        try:
            return self._by_id[tid]
        except KeyError:
            raise TokenizeError(f"unknown token id {tid}") from None

    def contains_id(self, tid: int) -> bool:
        return tid == self.eos_id or tid in self._by_id

    def to_file_dict(self) -> dict:
        """The vocabulary-file JSON body (see load_vocabulary)."""
        return {"tokens": dict(self.entries), "eos_id": self.eos_id}


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __iter__(self):
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def _reject_duplicate_keys(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise VocabularyError(f"duplicate token string {key!r}")
        seen[key] = value
    return seen


def parse_vocabulary(text: str) -> Vocabulary:
    """Parse the vocabulary-file body: {"tokens": {str: int}, "eos_id": int}."""
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except VocabularyError:
        raise
    except json.JSONDecodeError as exc:
        raise VocabularyError(f"vocabulary is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "tokens" not in raw or "eos_id" not in raw:
        raise VocabularyError('vocabulary must be an object with "tokens" and "eos_id"')
    tokens = raw["tokens"]
    if not isinstance(tokens, dict):
        raise VocabularyError('"tokens" must be an object mapping token string to id')
    return Vocabulary(entries=tokens, eos_id=raw["eos_id"])


def load_vocabulary(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return parse_vocabulary(fh.read())


def encode(vocab: Vocabulary, text: str) -> TokenSequence:
    """Greedy longest-match segmentation of ``text``.

    At each position the longest matching vocabulary entry is consumed; a
    position with no matching entry is an error.
    """
    if text == "":
        raise TokenizeError("cannot encode empty text")
    ids: list[int] = []
    pos = 0
    n = len(text)
    entries = vocab.entries
    max_len = vocab._max_len
    while pos < n:
        for length in range(min(max_len, n - pos), 0, -1):
            piece = text[pos : pos + length]
            tid = entries.get(piece)
            if tid is not None:
                ids.append(tid)
                pos += length
                break
        else:
            raise TokenizeError(f"untokenizable text at position {pos}: {text[pos:pos+12]!r}")
    return TokenSequence(ids=tuple(ids))


def decode(vocab: Vocabulary, seq: TokenSequence) -> str:
    """Concatenate token strings; inverse of encode for encodable texts."""
    parts = []
    for tid in seq:
        if tid == vocab.eos_id:
            raise TokenizeError("sequence contains eos_id")
        parts.append(vocab.token_of(tid))
    return "".join(parts)
