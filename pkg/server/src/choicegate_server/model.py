"""Causal-LM runtime over torch/transformers.

Log-probabilities come from a single forward pass at the given prefix,
reading the final-position distribution; no sampling is involved, which is
what keeps one request equal to one accounting unit.  Generation is greedy
by default with the model's own generation config on top.

The constructor takes live (model, tokenizer) objects so tests can inject a
tiny locally built model; ``from_pretrained`` loads a checkpoint by id.  The
tokenizer must offer ``encode(text, add_special_tokens=False)``,
``decode(ids, skip_special_tokens=True)``, ``get_vocab()`` and
``eos_token_id``.  Model calls are serialized through a lock (the serial
contract of the protocol handshake); image inputs need a processor-equipped
multimodal checkpoint and are rejected otherwise.
"""

from __future__ import annotations

import threading


class ModelError(RuntimeError):
    pass


class ModelRuntime:
    def __init__(self, model, tokenizer, device: str = "cpu", processor=None,
                 max_new_tokens_default: int = 512):
        import torch

        self._torch = torch
        self.device = device
        self.model = model.to(device).eval()
        self.tokenizer = tokenizer
        self.processor = processor
        self.max_new_tokens_default = max_new_tokens_default
        self._lock = threading.Lock()
        if tokenizer.eos_token_id is None:
            raise ModelError("tokenizer has no eos token")

    @classmethod
    def from_pretrained(cls, model_id: str, device: str = "cpu",
                        max_new_tokens_default: int = 512) -> "ModelRuntime":
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id)
        return cls(model, tokenizer, device=device,
                   max_new_tokens_default=max_new_tokens_default)

    # -- protocol operations ----------------------------------------------

    def vocab_body(self) -> dict:
        eos_id = int(self.tokenizer.eos_token_id)
        tokens = {
            token: int(tid)
            for token, tid in self.tokenizer.get_vocab().items()
            if int(tid) != eos_id
        }
        return {"tokens": tokens, "eos_id": eos_id}

    def encode(self, text: str) -> list[int]:
        if text == "":
            raise ModelError("cannot encode empty text")
        return [int(t) for t in self.tokenizer.encode(text, add_special_tokens=False)]

    def logprobs(self, prefix_tokens, prefix_text, candidates, image=None):
        if image is not None:
            raise ModelError("image-conditioned logprobs need a multimodal processor")
        if not candidates:
            raise ModelError("candidates set is empty")
        if prefix_tokens is None:
            if prefix_text is None:
                raise ModelError("one of prefix_tokens or prefix_text is required")
            prefix_tokens = self.encode(prefix_text)
        if not prefix_tokens:
            raise ModelError("empty prefix")
        torch = self._torch
        ids = torch.tensor([list(prefix_tokens)], dtype=torch.long, device=self.device)
        with self._lock, torch.no_grad():
            logits = self.model(ids).logits[0, -1, :]
            logprobs = torch.log_softmax(logits.double(), dim=-1)
        n_vocab = logprobs.shape[0]
        out = {}
        for tid in candidates:
            if not 0 <= int(tid) < n_vocab:
                raise ModelError(f"unknown token id {tid}")
            out[int(tid)] = float(logprobs[int(tid)])
        return out, 0.0  # full softmax: total mass is exactly 1

    def generate(self, prompt, image=None, forced_prefix=None, max_new_tokens=None):
        if not prompt:
            raise ModelError("prompt is empty")
        if image is not None and self.processor is None:
            raise ModelError("image inputs need a multimodal processor")
        max_new = max_new_tokens or self.max_new_tokens_default
        if max_new < 1:
            raise ModelError("max_new_tokens must be >= 1")
        torch = self._torch
        input_ids = self.tokenizer.encode(prompt, add_special_tokens=False)
        forced = forced_prefix or ""
        if forced:
            input_ids = input_ids + self.encode(forced)
        ids = torch.tensor([input_ids], dtype=torch.long, device=self.device)
        with self._lock, torch.no_grad():
            output = self.model.generate(
                ids,
                max_new_tokens=max_new,
                do_sample=False,
                pad_token_id=int(self.tokenizer.eos_token_id),
            )
        continuation = output[0][len(input_ids):]
        text = self.tokenizer.decode(continuation.tolist(), skip_special_tokens=True)
        return forced + text
