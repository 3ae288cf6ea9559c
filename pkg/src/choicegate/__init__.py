"""Constrained-choice decoding engine and evaluation harness.

Free-form generation first, then text-only constrained selection over a
choice trie, with early-stopped truncated-probability scoring and
forward-pass accounting.
"""

from .backend import (
    BackendError,
    GenerationRequest,
    LMBackend,
    MockBackend,
    NextTokenDistribution,
    RemoteBackend,
)
from .pipeline import Example, RunConfig, RunRecord, retrieve_scores, run_batch
from .prompts import DatasetProfile, PromptTemplate, SteeringMode
from .scoring import (
    ChoiceScores,
    YesNoScore,
    constrained_greedy_decode,
    full_choice_logprob,
    full_choice_logprobs,
    masked_renormalize,
    truncated_choice_logprobs,
    yes_no_score,
)
from .tokenizer import TokenSequence, Vocabulary, decode, encode, load_vocabulary
from .trie import ChoiceSet, ChoiceTrie, TruncationPoint, build_trie, load_choice_set

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ChoiceScores",
    "ChoiceSet",
    "ChoiceTrie",
    "DatasetProfile",
    "Example",
    "GenerationRequest",
    "LMBackend",
    "MockBackend",
    "NextTokenDistribution",
    "PromptTemplate",
    "RemoteBackend",
    "RunConfig",
    "RunRecord",
    "SteeringMode",
    "TokenSequence",
    "TruncationPoint",
    "Vocabulary",
    "YesNoScore",
    "build_trie",
    "constrained_greedy_decode",
    "decode",
    "encode",
    "full_choice_logprob",
    "full_choice_logprobs",
    "load_choice_set",
    "load_vocabulary",
    "masked_renormalize",
    "retrieve_scores",
    "run_batch",
    "truncated_choice_logprobs",
    "yes_no_score",
]
