"""Access to the bundled prompt templates.

Templates use ``{name}`` slots filled by literal replacement, never
str.format, so braces inside math text and Lean code pass through intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources


def load_prompt(name: str) -> str:
    return (resources.files("stepverify") / "prompts" / f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, **slots: str) -> str:
    text = template
    for key, value in slots.items():
        text = text.replace("{" + key + "}", value)
    return text


@dataclass(frozen=True)
class PromptSet:
    cot_system: str
    decompose: str
    formalize: str
    prove: str
    judge: str
    judge_category: str

    @classmethod
    def bundled(cls) -> "PromptSet":
        return cls(
            cot_system=load_prompt("cot_system"),
            decompose=load_prompt("decompose"),
            formalize=load_prompt("formalize"),
            prove=load_prompt("prove"),
            judge=load_prompt("judge"),
            judge_category=load_prompt("judge_category"),
        )
