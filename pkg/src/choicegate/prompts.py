"""Prompt template management.

Covers the base instruction variations and their dataset variable
substitution, the steering suffixes that control answer form, forced
assistant prefixes for chain-of-thought prompting, the text-only choice
prompt used by the second stage, and the Yes/No retrieval prompt.

Substitution is a single pass, so placeholder-looking text inside a
substituted value (notably a free-form model response) is never expanded.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .trie import ChoiceSet, load_choice_set

ALLOWED_PLACEHOLDERS = frozenset({"type", "domain", "choice_list", "cname", "nlg"})

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")

STAGE2_TEMPLATE = (
    "What is the most likely {type} of {domain} indicated in this response?"
    "\n\nResponse: {nlg}"
    "\n\nAnswer from the following: {choice_list}"
)

STEERING_SUFFIXES = {
    "type_only": "Answer with {type} only.",
    "choice_list": "Answer from {choice_list}.",
}

YESNO_TEMPLATE = "Is this a {cname}?"

# Forced assistant prefixes commonly used to trigger step-by-step reasoning.
COT_PRESETS = {
    "step_by_step": "Let's think step by step.",
    "first": "First,",
    "split_into_steps": "Let's solve this problem by splitting it into steps.",
}


class TemplateError(ValueError):
    """Malformed template or unbound placeholder."""


class SteeringMode(str, Enum):
    OPEN = "open"
    TYPE_ONLY = "type_only"
    CHOICE_LIST = "choice_list"


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str

    def __post_init__(self) -> None:
        _validate_body(self.body)


@dataclass(frozen=True)
class DatasetProfile:
    """Variables for filling out prompt templates for one dataset."""

    name: str
    type: str
    domain: str
    choices: ChoiceSet | None = None
    genus_map_path: str | None = None

    def __post_init__(self) -> None:
        if not self.type or not self.domain:
            raise ValueError("profile type and domain must be non-empty")


@dataclass(frozen=True)
class Stage1Prompt:
    """Generation-request fragment: prompt text plus optional forced
    assistant prefix."""

    text: str
    forced_prefix: str | None


def _validate_body(body: str) -> None:
    names = _PLACEHOLDER_RE.findall(body)
    bad = [name for name in names if name not in ALLOWED_PLACEHOLDERS]
    if bad:
        raise TemplateError(f"placeholders not in allowed set: {bad}")
    leftover = _PLACEHOLDER_RE.sub("", body)
    if "{" in leftover or "}" in leftover:
        raise TemplateError(f"stray braces in template body: {body!r}")


def substitute(body: str, values: dict[str, str]) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"unbound placeholder {{{name}}}")
        return values[name]

    return _PLACEHOLDER_RE.sub(repl, body)


def _profile_values(profile: DatasetProfile) -> dict[str, str]:
    values = {"type": profile.type, "domain": profile.domain}
    if profile.choices is not None:
        values["choice_list"] = "\n".join(profile.choices.labels)
    return values


def instantiate(
    tpl: PromptTemplate, profile: DatasetProfile, bindings: dict[str, str] | None = None
) -> str:
    """Exact single-pass substitution of the template's placeholders."""
    values = _profile_values(profile)
    if bindings:
        unknown = set(bindings) - ALLOWED_PLACEHOLDERS
        if unknown:
            raise TemplateError(f"bindings not in allowed set: {sorted(unknown)}")
        values.update(bindings)
    return substitute(tpl.body, values)


def build_stage1_prompt(
    base: PromptTemplate,
    profile: DatasetProfile,
    steering: SteeringMode = SteeringMode.TYPE_ONLY,
    cot: str | None = None,
) -> Stage1Prompt:
    """First-stage prompt with the steering suffix appended after a single
    space; the chain-of-thought text, when given, travels as the forced
    assistant prefix rather than in the prompt."""
    steering = SteeringMode(steering)
    if cot is not None and cot == "":
        raise TemplateError("chain-of-thought prefix must be non-empty when present")
    body = base.body
    if steering is not SteeringMode.OPEN:
        body = body + " " + STEERING_SUFFIXES[steering.value]
    text = substitute(body, _profile_values(profile))
    return Stage1Prompt(text=text, forced_prefix=cot)


def build_stage2_prompt(profile: DatasetProfile, nlg: str) -> str:
    """Text-only choice prompt asking for the most likely choice indicated
    by a free-form response."""
    if nlg == "":
        raise TemplateError("nlg text is empty")
    values = _profile_values(profile)
    values["nlg"] = nlg
    return substitute(STAGE2_TEMPLATE, values)


def build_yesno_prompt(
    profile: DatasetProfile, cname: str, template: str = YESNO_TEMPLATE
) -> str:
    if profile.choices is None or cname not in profile.choices.labels:
        raise TemplateError(f"cname {cname!r} not in the profile's choice set")
    _validate_body(template)
    values = _profile_values(profile)
    values["cname"] = cname
    return substitute(template, values)


# -- file loading ---------------------------------------------------------


def parse_templates(text: str) -> list[PromptTemplate]:
    """Template file: JSON array of {"id", "body"}."""
    raw = json.loads(text)
    if not isinstance(raw, list):
        raise TemplateError("template file must be a JSON array")
    templates = []
    seen = set()
    for item in raw:
        tpl = PromptTemplate(id=str(item["id"]), body=str(item["body"]))
        if tpl.id in seen:
            raise TemplateError(f"duplicate template id {tpl.id!r}")
        seen.add(tpl.id)
        templates.append(tpl)
    return templates


def load_templates(path) -> list[PromptTemplate]:
    with open(path, encoding="utf-8") as fh:
        return parse_templates(fh.read())


def default_templates() -> list[PromptTemplate]:
    """The bundled base instruction variations (15 of them)."""
    text = resources.files("choicegate.data").joinpath("templates.json").read_text("utf-8")
    return parse_templates(text)


def load_profile(path) -> DatasetProfile:
    """Profile file: {"name", "type", "domain", "choice_list_path",
    "genus_map_path"}; paths resolve relative to the profile file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    choices = None
    clp = raw.get("choice_list_path")
    if clp:
        choices = load_choice_set((path.parent / clp).resolve())
    gmp = raw.get("genus_map_path")
    genus_map_path = str((path.parent / gmp).resolve()) if gmp else None
    return DatasetProfile(
        name=raw["name"],
        type=raw["type"],
        domain=raw["domain"],
        choices=choices,
        genus_map_path=genus_map_path,
    )


def bundled_data_path(*parts: str) -> Path:
    """Filesystem path of a bundled data file (installs are directories)."""
    return Path(str(resources.files("choicegate.data").joinpath("/".join(parts))))


def bundled_profile(name: str) -> DatasetProfile:
    """A bundled dataset profile by name (cub200, flowers102, aircrafts,
    cars, foods, nabirds, inat_birds); cub200 ships with its choice list."""
    return load_profile(bundled_data_path("profiles", f"{name}.json"))
