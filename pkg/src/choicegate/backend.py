"""Uniform interface to language models: free-form generation plus
next-token log-probability queries.

Two implementations ship here.  ``MockBackend`` is a bit-deterministic table
over (prefix, image) patterns loaded from a config file; it is the oracle for
every property test.  ``RemoteBackend`` speaks the wire protocol below to a
serving process.

Probabilities travel in log space end-to-end; products of per-token
probabilities become sums, which is what keeps thousand-class choice sets
from underflowing.

Wire protocol (JSON bodies, UTF-8):
  POST /v1/generate  {"prompt", "image", "forced_prefix", "max_new_tokens"}
                     -> {"text": str}
  POST /v1/logprobs  {"prefix_tokens"|null, "prefix_text"|null,
                      "candidates": [int, ...], "image"?: str}
                     -> {"logprobs": {"<id>": float}, "logsumexp_all": float}
  POST /v1/encode    {"text"} -> {"tokens": [int, ...]}
  GET  /v1/vocab     -> vocabulary file body
Errors are {"error": str} with a non-success status.  The optional "image"
field on /v1/logprobs carries the opaque image reference needed by
direct-on-the-prompt constrained decoding; it is omitted when absent.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import httpx

from .tokenizer import TokenSequence, Vocabulary, decode, encode, parse_vocabulary

NEG_INF = float("-inf")


class BackendError(RuntimeError):
    """Backend unreachable, capability missing, or generation failure."""


@dataclass(frozen=True)
class NextTokenDistribution:
    """Log-probabilities for a set of token ids at a given prefix.

    ``logsumexp_all`` is the log of the total probability mass over the full
    vocabulary, so a subset of entries can be renormalized exactly.
    """

    logprobs: dict[int, float]
    logsumexp_all: float

    def __post_init__(self) -> None:
        for tid, lp in self.logprobs.items():
            if lp > self.logsumexp_all + 1e-12:
                raise ValueError(
                    f"logprob {lp} for token {tid} exceeds total mass {self.logsumexp_all}"
                )


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    image: str | None = None
    forced_prefix: str | None = None
    max_new_tokens: int = 512

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt is empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


class LMBackend:
    """Interface: capabilities plus a vocabulary handle.

    logprobs queries are pure with respect to a fixed model state; ``passes``
    counts them (the accounting unit: one forward pass per distinct prefix,
    callers deduplicate repeated prefixes through their own caches).  The
    counters are lock-protected so concurrent batch fan-out keeps them exact.
    """

    capabilities: frozenset[str] = frozenset()

    def __init__(self) -> None:
        self.passes = 0
        self.generate_calls = 0
        self._counter_lock = threading.Lock()

    def _count_pass(self) -> None:
        with self._counter_lock:
            self.passes += 1

    def _count_generate(self) -> None:
        with self._counter_lock:
            self.generate_calls += 1

    def reset_counters(self) -> None:
        with self._counter_lock:
            self.passes = 0
            self.generate_calls = 0

    def vocabulary(self) -> Vocabulary:
        raise NotImplementedError

    def generate(self, req: GenerationRequest) -> str:
        raise NotImplementedError

    def next_token_logprobs(
        self, prefix: str | TokenSequence, candidates, image: str | None = None
    ) -> NextTokenDistribution:
        raise NotImplementedError


def _log(p: float) -> float:
    return math.log(p) if p > 0.0 else NEG_INF


class MockBackend(LMBackend):
    """Table-driven deterministic backend.

    Config format (JSON object):
      vocab            inline vocabulary body, or vocab_path relative to the
                       config file
      fallback_uniform when true, prefixes matching no distribution entry get
                       the uniform distribution over the vocabulary (eos
                       included); when false they raise
      distributions    list of entries matched in order after exact lookup:
                         prefix_is      exact full-prefix match
                         ends_with      prefix suffix match
                         when_contains  substring of the prefix
                         when_image     exact image reference match
                         probs          token string -> probability
                         eos_prob       probability of the eos sentinel
                         other_mass     mass spread uniformly over unlisted ids
      generate         list of reply rules: prompt_is / when_contains /
                       when_image conditions plus either text or
                       echo_between [start_marker, end_marker|null] which
                       echoes the prompt slice between the markers.
                       Rules with prompt_is are checked (by exact prompt)
                       before patterned rules, each group in file order
      generate_by_image  image reference -> reply (checked first)
      generate_default   reply when no rule matches

    Replies are truncated to max_new_tokens tokens when they are encodable
    under the table's vocabulary, otherwise returned whole.
    """

    capabilities = frozenset({"generate", "logprobs"})

    def __init__(self, config: dict, base_dir: Path | None = None):
        super().__init__()
        self._config_digest = hashlib.sha256(
            json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()
        base = Path(base_dir) if base_dir is not None else Path(".")
        if "vocab" in config:
            self._vocab = parse_vocabulary(json.dumps(config["vocab"]))
        elif "vocab_path" in config:
            with open(base / config["vocab_path"], encoding="utf-8") as fh:
                self._vocab = parse_vocabulary(fh.read())
        else:
            raise BackendError('mock table needs "vocab" or "vocab_path"')
        self._fallback_uniform = bool(config.get("fallback_uniform", False))
        self._exact: dict[str, list[dict]] = {}
        self._rules: list[dict] = []
        for entry in config.get("distributions", []):
            if "prefix_is" in entry:
                self._exact.setdefault(entry["prefix_is"], []).append(entry)
            else:
                self._rules.append(entry)
        self._generate_exact: dict[str, list[dict]] = {}
        self._generate_rules = []
        for rule in config.get("generate", []):
            if "prompt_is" in rule:
                self._generate_exact.setdefault(rule["prompt_is"], []).append(rule)
            else:
                self._generate_rules.append(rule)
        self._generate_by_image = dict(config.get("generate_by_image", {}))
        self._generate_default = config.get("generate_default")

    @classmethod
    def from_file(cls, path) -> "MockBackend":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
        return cls(config, base_dir=path.parent)

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def describe(self) -> str:
        return f"mock:{self._config_digest}"

    # -- generation ------------------------------------------------------

    def generate(self, req: GenerationRequest) -> str:
        self._count_generate()
        text = self._reply_for(req)
        if text is None:
            raise BackendError(f"no canned reply for prompt {req.prompt[:60]!r}")
        if req.forced_prefix:
            text = req.forced_prefix + text
        return self._bound_tokens(text, req.max_new_tokens)

    def _reply_for(self, req: GenerationRequest) -> str | None:
        if req.image is not None and req.image in self._generate_by_image:
            return self._generate_by_image[req.image]
        for rule in self._generate_exact.get(req.prompt, []):
            reply = self._apply_generate_rule(rule, req)
            if reply is not None:
                return reply
        for rule in self._generate_rules:
            reply = self._apply_generate_rule(rule, req)
            if reply is not None:
                return reply
        return self._generate_default

    @staticmethod
    def _apply_generate_rule(rule: dict, req: GenerationRequest) -> str | None:
        if "when_contains" in rule and rule["when_contains"] not in req.prompt:
            return None
        if "when_image" in rule and req.image != rule["when_image"]:
            return None
        if "echo_between" in rule:
            start_marker, end_marker = rule["echo_between"]
            start = req.prompt.find(start_marker)
            if start < 0:
                return None
            start += len(start_marker)
            end = len(req.prompt) if end_marker is None else req.prompt.find(end_marker, start)
            if end < 0:
                end = len(req.prompt)
            return req.prompt[start:end]
        return rule["text"]

    def _bound_tokens(self, text: str, max_new_tokens: int) -> str:
        if not text:
            return text
        try:
            ids = encode(self._vocab, text).ids
        except Exception:
            return text
        if len(ids) <= max_new_tokens:
            return text
        return decode(self._vocab, TokenSequence(ids[:max_new_tokens]))

    # -- logprobs --------------------------------------------------------

    def next_token_logprobs(
        self, prefix: str | TokenSequence, candidates, image: str | None = None
    ) -> NextTokenDistribution:
        candidates = tuple(candidates)
        if not candidates:
            raise ValueError("candidates set is empty")
        for tid in candidates:
            if not self._vocab.contains_id(tid):
                raise BackendError(f"unknown token id {tid}")
        text = prefix if isinstance(prefix, str) else decode(self._vocab, prefix)
        self._count_pass()
        entry = self._match_entry(text, image)
        if entry is None:
            if self._fallback_uniform:
                return self._uniform(candidates)
            raise BackendError(f"no distribution entry for prefix {text[-80:]!r}")
        return self._distribution(entry, candidates)

    def _match_entry(self, text: str, image: str | None) -> dict | None:
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

    def _uniform(self, candidates) -> NextTokenDistribution:
        total = len(self._vocab) + 1  # eos included
        lp = -math.log(total)
        return NextTokenDistribution(
            logprobs={tid: lp for tid in candidates}, logsumexp_all=0.0
        )

    def _distribution(self, entry: dict, candidates) -> NextTokenDistribution:
        probs = entry.get("probs", {})
        eos_prob = entry.get("eos_prob")
        other_mass = float(entry.get("other_mass", 0.0))
        listed = {self._vocab.id_of(token): float(p) for token, p in probs.items()}
        if eos_prob is not None:
            listed[self._vocab.eos_id] = float(eos_prob)
        total_listed = sum(listed.values())
        n_unlisted = (len(self._vocab) + 1) - len(listed)
        per_unlisted = other_mass / n_unlisted if n_unlisted else 0.0
        out = {}
        for tid in candidates:
            out[tid] = _log(listed[tid]) if tid in listed else _log(per_unlisted)
        return NextTokenDistribution(
            logprobs=out, logsumexp_all=_log(total_listed + other_mass)
        )


class RemoteBackend(LMBackend):
    """Client for the wire protocol; interchangeable with the table mock."""

    capabilities = frozenset({"generate", "logprobs"})

    def __init__(self, base_url: str, client: httpx.Client | None = None, timeout: float = 60.0):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)
        self._vocab: Vocabulary | None = None

    def _post(self, path: str, body: dict) -> dict:
        try:
            resp = self._client.post(self.base_url + path, json=body)
        except httpx.HTTPError as exc:
            raise BackendError(f"backend unreachable: {exc}") from exc
        if resp.status_code >= 400:
            try:
                message = resp.json().get("error", resp.text)
            except ValueError:
                message = resp.text
            raise BackendError(f"{path}: {message}")
        return resp.json()

    def vocabulary(self) -> Vocabulary:
        if self._vocab is None:
            try:
                resp = self._client.get(self.base_url + "/v1/vocab")
            except httpx.HTTPError as exc:
                raise BackendError(f"backend unreachable: {exc}") from exc
            if resp.status_code >= 400:
                raise BackendError(f"/v1/vocab: {resp.text}")
            self._vocab = parse_vocabulary(resp.text)
        return self._vocab

    def generate(self, req: GenerationRequest) -> str:
        self._count_generate()
        body = {
            "prompt": req.prompt,
            "image": req.image,
            "forced_prefix": req.forced_prefix,
            "max_new_tokens": req.max_new_tokens,
        }
        return self._post("/v1/generate", body)["text"]

    def next_token_logprobs(
        self, prefix: str | TokenSequence, candidates, image: str | None = None
    ) -> NextTokenDistribution:
        candidates = sorted(candidates)
        if not candidates:
            raise ValueError("candidates set is empty")
        body: dict = {"prefix_tokens": None, "prefix_text": None, "candidates": candidates}
        if isinstance(prefix, str):
            body["prefix_text"] = prefix
        else:
            body["prefix_tokens"] = list(prefix.ids)
        if image is not None:
            body["image"] = image
        self._count_pass()
        data = self._post("/v1/logprobs", body)
        return NextTokenDistribution(
            logprobs={int(tid): float(lp) for tid, lp in data["logprobs"].items()},
            logsumexp_all=float(data["logsumexp_all"]),
        )

    def encode_remote(self, text: str) -> TokenSequence:
        data = self._post("/v1/encode", {"text": text})
        return TokenSequence(tuple(int(t) for t in data["tokens"]))

    def describe(self) -> str:
        return f"remote:{self.base_url}"


def load_backend(spec: str) -> LMBackend:
    """"mock:<table path>" or an http(s) URL."""
    if spec.startswith("mock:"):
        return MockBackend.from_file(spec[len("mock:"):])
    if spec.startswith(("http://", "https://")):
        return RemoteBackend(spec)
    raise BackendError(f"unrecognized backend spec {spec!r}")
