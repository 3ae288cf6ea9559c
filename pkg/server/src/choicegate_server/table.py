"""Deterministic table runtime.

Serves the same table-config format the engine's in-process mock consumes,
so the two can be conformance-tested against each other over the wire.  This
module deliberately does not import the engine: the shared contract is the
file format and the protocol, nothing else.

Table semantics: each distribution entry lists exact probabilities for some
tokens (plus an optional eos probability); ``other_mass`` is spread
uniformly over the unlisted ids; ``logsumexp_all`` is the log of the total
listed-plus-other mass.  Entry matching tries exact ``prefix_is`` lookups
first, then patterned rules (``ends_with`` / ``when_contains`` /
``when_image``) in file order, then the uniform fallback if enabled.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

NEG_INF = float("-inf")


class TableError(ValueError):
    """Malformed table config or an unserveable request."""


def _log(p: float) -> float:
    return math.log(p) if p > 0.0 else NEG_INF


def load_vocab_body(raw: dict) -> tuple[dict[str, int], int]:
    tokens = raw.get("tokens")
    eos_id = raw.get("eos_id")
    if not isinstance(tokens, dict) or not isinstance(eos_id, int):
        raise TableError('vocabulary needs "tokens" and integer "eos_id"')
    seen = set()
    for token, tid in tokens.items():
        if not token or not isinstance(tid, int) or tid < 0 or tid in seen:
            raise TableError(f"bad vocabulary entry {token!r} -> {tid!r}")
        seen.add(tid)
    if eos_id in seen or eos_id < 0:
        raise TableError("eos_id must be a fresh non-negative id")
    return dict(tokens), eos_id


def greedy_encode(tokens: dict[str, int], max_len: int, text: str) -> list[int]:
    """Longest-match segmentation, same definition as the engine tokenizer."""
    if text == "":
        raise TableError("cannot encode empty text")
    out: list[int] = []
    pos = 0
    while pos < len(text):
        for length in range(min(max_len, len(text) - pos), 0, -1):
            tid = tokens.get(text[pos : pos + length])
            if tid is not None:
                out.append(tid)
                pos += length
                break
        else:
            raise TableError(f"untokenizable text at position {pos}")
    return out


class TableRuntime:
    def __init__(self, config: dict, base_dir: Path | None = None):
        base = Path(base_dir) if base_dir is not None else Path(".")
        if "vocab" in config:
            vocab_raw = config["vocab"]
        elif "vocab_path" in config:
            with open(base / config["vocab_path"], encoding="utf-8") as fh:
                vocab_raw = json.load(fh)
        else:
            raise TableError('table config needs "vocab" or "vocab_path"')
        self.tokens, self.eos_id = load_vocab_body(vocab_raw)
        self.by_id = {tid: tok for tok, tid in self.tokens.items()}
        self.max_token_len = max((len(t) for t in self.tokens), default=0)
        self.fallback_uniform = bool(config.get("fallback_uniform", False))
        self._exact: dict[str, list[dict]] = {}
        self._rules: list[dict] = []
        for entry in config.get("distributions", []):
            if "prefix_is" in entry:
                self._exact.setdefault(entry["prefix_is"], []).append(entry)
            else:
                self._rules.append(entry)
        self._generate_exact: dict[str, list[dict]] = {}
        self._generate_rules: list[dict] = []
        for rule in config.get("generate", []):
            if "prompt_is" in rule:
                self._generate_exact.setdefault(rule["prompt_is"], []).append(rule)
            else:
                self._generate_rules.append(rule)
        self._generate_by_image = dict(config.get("generate_by_image", {}))
        self._generate_default = config.get("generate_default")

    @classmethod
    def from_file(cls, path) -> "TableRuntime":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), base_dir=path.parent)

    # -- protocol operations ----------------------------------------------

    def vocab_body(self) -> dict:
        return {"tokens": dict(self.tokens), "eos_id": self.eos_id}

    def encode(self, text: str) -> list[int]:
        return greedy_encode(self.tokens, self.max_token_len, text)

    def decode(self, ids) -> str:
        parts = []
        for tid in ids:
            if tid not in self.by_id:
                raise TableError(f"unknown token id {tid}")
            parts.append(self.by_id[tid])
        return "".join(parts)

    def logprobs(self, prefix_tokens, prefix_text, candidates, image=None):
        if not candidates:
            raise TableError("candidates set is empty")
        for tid in candidates:
            if tid != self.eos_id and tid not in self.by_id:
                raise TableError(f"unknown token id {tid}")
        if prefix_text is None:
            if prefix_tokens is None:
                raise TableError("one of prefix_tokens or prefix_text is required")
            prefix_text = self.decode(prefix_tokens)
        entry = self._match(prefix_text, image)
        if entry is None:
            if not self.fallback_uniform:
                raise TableError(f"no distribution entry for prefix {prefix_text[-80:]!r}")
            lp = -math.log(len(self.tokens) + 1)
            return {tid: lp for tid in candidates}, 0.0
        return self._distribution(entry, candidates)

    def generate(self, prompt, image=None, forced_prefix=None, max_new_tokens=512):
        if not prompt:
            raise TableError("prompt is empty")
        if max_new_tokens < 1:
            raise TableError("max_new_tokens must be >= 1")
        text = self._reply_for(prompt, image)
        if text is None:
            raise TableError(f"no canned reply for prompt {prompt[:60]!r}")
        if forced_prefix:
            text = forced_prefix + text
        return self._bound(text, max_new_tokens)

    # -- internals ----------------------------------------------------------

    def _match(self, text: str, image) -> dict | None:
        for entry in self._exact.get(text, []):
            if "when_image" in entry and image != entry["when_image"]:
                continue
            return entry
        for entry in self._rules:
            if "ends_with" in entry and not text.endswith(entry["ends_with"]):
                continue
            if "when_contains" in entry and entry["when_contains"] not in text:
                continue
            if "when_image" in entry and image != entry["when_image"]:
                continue
            return entry
        return None

    def _distribution(self, entry: dict, candidates):
        listed = {self.tokens[tok]: float(p) for tok, p in entry.get("probs", {}).items()}
        if entry.get("eos_prob") is not None:
            listed[self.eos_id] = float(entry["eos_prob"])
        other = float(entry.get("other_mass", 0.0))
        n_unlisted = (len(self.tokens) + 1) - len(listed)
        per_unlisted = other / n_unlisted if n_unlisted else 0.0
        out = {
            tid: _log(listed[tid]) if tid in listed else _log(per_unlisted)
            for tid in candidates
        }
        return out, _log(sum(listed.values()) + other)

    def _reply_for(self, prompt: str, image) -> str | None:
        if image is not None and image in self._generate_by_image:
            return self._generate_by_image[image]
        for rule in self._generate_exact.get(prompt, []):
            reply = self._apply_rule(rule, prompt, image)
            if reply is not None:
                return reply
        for rule in self._generate_rules:
            reply = self._apply_rule(rule, prompt, image)
            if reply is not None:
                return reply
        return self._generate_default

    @staticmethod
    def _apply_rule(rule: dict, prompt: str, image) -> str | None:
        if "when_contains" in rule and rule["when_contains"] not in prompt:
            return None
        if "when_image" in rule and image != rule["when_image"]:
            return None
        if "echo_between" in rule:
            start_marker, end_marker = rule["echo_between"]
            start = prompt.find(start_marker)
            if start < 0:
                return None
            start += len(start_marker)
            end = len(prompt) if end_marker is None else prompt.find(end_marker, start)
            if end < 0:
                end = len(prompt)
            return prompt[start:end]
        return rule.get("text")

    def _bound(self, text: str, max_new_tokens: int) -> str:
        if not text:
            return text
        try:
            ids = self.encode(text)
        except TableError:
            return text
        if len(ids) <= max_new_tokens:
            return text
        return self.decode(ids[:max_new_tokens])
