"""Domain types for reasoning trajectories and their decomposition into steps."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Sequence

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_WHITESPACE = " \t\n"


class StructureError(ValueError):
    """A step sequence violates the contiguous-index contract."""


def normalize_text(text: str) -> str:
    """Canonical whitespace form of a trajectory text.

    CRLF becomes LF, trailing blanks are trimmed per line, runs of two or
    more newlines collapse to one, and outer whitespace is stripped.  The
    function is idempotent; decompose/reconstruct round-trips are defined
    relative to this form.
    """
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    text = "\n".join(line.rstrip(" \t") for line in text.split("\n"))
    text = re.sub(r"\n{2,}", "\n", text)
    return text.strip()


@dataclass(frozen=True)
class Problem:
    """A single task instance with an optional reference answer."""

    id: str
    statement: str
    ground_truth_answer: str | None = None

    def __post_init__(self) -> None:
        if not self.statement.strip():
            raise ValueError(f"problem {self.id!r} has an empty statement")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "statement": self.statement,
            "ground_truth_answer": self.ground_truth_answer,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Problem":
        return cls(
            id=str(payload["id"]),
            statement=payload["statement"],
            ground_truth_answer=payload.get("ground_truth_answer"),
        )


@dataclass(frozen=True)
class Step:
    """One reasoning step plus the separator that followed it in the source text."""

    index: int
    text: str
    trailing_separator: str = ""

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("step index must be non-negative")
        if not self.text.strip():
            raise ValueError("step text must be non-empty after whitespace trim")

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "text": self.text, "separator": self.trailing_separator}

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Step":
        return cls(
            index=int(payload["index"]),
            text=payload["text"],
            trailing_separator=payload.get("separator", ""),
        )


class StepStateTag(Enum):
    NO_VERIFICATION_REQUIRED = "no_verification_required"
    FORMALIZATION_FAILED = "formalization_failed"
    PROOF_SUCCEEDED = "proof_succeeded"
    PROOF_FAILED = "proof_failed"


@dataclass(frozen=True)
class StepState:
    """Verification verdict for one step, with the evidence that produced it.

    Evidence payloads are plain dicts (the serialized forms of the
    formalization and proof outcomes) so this module stays free of
    pipeline dependencies.
    """

    tag: StepStateTag
    formalization: dict[str, Any] | None = None
    proof: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.tag is StepStateTag.PROOF_SUCCEEDED:
            if not self.proof or not self.proof.get("proof_text"):
                raise ValueError("proof_succeeded state requires a non-empty proof text")
        if self.tag is StepStateTag.FORMALIZATION_FAILED and self.proof is not None:
            raise ValueError("formalization_failed state cannot carry proof attempts")

    def to_dict(self) -> dict[str, Any]:
        return {"tag": self.tag.value, "formalization": self.formalization, "proof": self.proof}

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "StepState":
        return cls(
            tag=StepStateTag(payload["tag"]),
            formalization=payload.get("formalization"),
            proof=payload.get("proof"),
        )


@dataclass
class Trajectory:
    """A sampled solution text, its step decomposition, and verification results."""

    problem_id: str
    raw_text: str
    steps: list[Step] = field(default_factory=list)
    extracted_answer: str | None = None
    is_correct: bool | None = None
    states: list[StepState] | None = None
    scores: dict[str, Any] | None = None
    provenance: list[str] = field(default_factory=list)

    @property
    def step_texts(self) -> list[str]:
        return [step.text for step in self.steps]

    def state_tags(self) -> list[StepStateTag]:
        if self.states is None:
            raise ValueError("trajectory has not been verified")
        return [state.tag for state in self.states]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "problem_id": self.problem_id,
            "raw_text": self.raw_text,
            "steps": [step.to_dict() for step in self.steps],
            "extracted_answer": self.extracted_answer,
            "is_correct": self.is_correct,
            "states": None if self.states is None else [s.to_dict() for s in self.states],
            "scores": self.scores,
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Trajectory":
        states = payload.get("states")
        return cls(
            problem_id=str(payload["problem_id"]),
            raw_text=payload["raw_text"],
            steps=[Step.from_dict(s) for s in payload.get("steps", [])],
            extracted_answer=payload.get("extracted_answer"),
            is_correct=payload.get("is_correct"),
            states=None if states is None else [StepState.from_dict(s) for s in states],
            scores=payload.get("scores"),
            provenance=list(payload.get("provenance", [])),
        )


def _is_decimal_point(text: str, i: int) -> bool:
    return 0 < i < len(text) - 1 and text[i - 1].isdigit() and text[i + 1].isdigit()


def decompose_heuristic(raw_text: str) -> list[Step]:
    """Split a solution text on periods and line breaks.

    A period flanked by digits is a decimal point, not a boundary.  Each
    step keeps its trailing period; the whitespace consumed after a
    boundary is stored as the step's trailing separator so that
    ``reconstruct`` reproduces ``normalize_text(raw_text)`` exactly.
    Whitespace-only input yields an empty list.
    """
    text = normalize_text(raw_text)
    steps: list[Step] = []
    pending = ""

    def emit(fragment: str, separator: str) -> None:
        nonlocal pending
        if fragment.strip():
            steps.append(Step(index=len(steps), text=pending + fragment, trailing_separator=separator))
            pending = ""
        elif steps:
            last = steps[-1]
            steps[-1] = Step(
                index=last.index,
                text=last.text,
                trailing_separator=last.trailing_separator + fragment + separator,
            )
        else:
            pending += fragment + separator

    n = len(text)
    start = 0
    i = 0
    while i < n:
        ch = text[i]
        if ch == "." and not _is_decimal_point(text, i):
            j = i + 1
            while j < n and text[j] in _WHITESPACE:
                j += 1
            emit(text[start : i + 1], text[i + 1 : j])
            start = i = j
        elif ch == "\n":
            j = i
            while j < n and text[j] in _WHITESPACE:
                j += 1
            emit(text[start:i], text[i:j])
            start = i = j
        else:
            i += 1
    if start < n:
        emit(text[start:], "")
    return steps


def reconstruct(steps: Sequence[Step]) -> str:
    """Concatenate steps and separators; inverse of decomposition up to normalization."""
    for expected, step in enumerate(steps):
        if step.index != expected:
            raise StructureError(
                f"step indices must be contiguous from 0; found {step.index} at position {expected}"
            )
    return "".join(step.text + step.trailing_separator for step in steps)


def align_steps(raw_text: str, step_texts: Sequence[str]) -> list[Step] | None:
    """Fit externally proposed step strings onto the normalized text.

    Steps must tile the normalized text in order, separated only by
    whitespace.  Returns None when they do not, which signals dropped or
    rewritten content.
    """
    text = normalize_text(raw_text)
    pos = 0
    fitted: list[tuple[str, int]] = []
    for step_text in step_texts:
        fragment = normalize_text(step_text)
        if not fragment:
            return None
        while pos < len(text) and text[pos] in _WHITESPACE:
            pos += 1
        if not text.startswith(fragment, pos):
            return None
        fitted.append((fragment, pos + len(fragment)))
        pos += len(fragment)
    if text[pos:].strip():
        return None
    steps: list[Step] = []
    for k, (fragment, end) in enumerate(fitted):
        next_start = fitted[k + 1][1] - len(fitted[k + 1][0]) if k + 1 < len(fitted) else len(text)
        steps.append(Step(index=k, text=fragment, trailing_separator=text[end:next_start]))
    return steps


def decompose_llm(raw_text: str, client: Any, *, prompt_template: str, **request_overrides: Any) -> list[Step]:
    """Decompose via an instructed model, falling back to the heuristic.

    The model must reply with a JSON array of step strings that round-trips
    to the source text under normalization.  Any malformed or lossy reply
    falls back to ``decompose_heuristic`` with a warning.
    """
    from .llm import CompletionRequest

    prompt = prompt_template.replace("{solution}", raw_text)
    try:
        response = client.complete(
            CompletionRequest(
                model=request_overrides.pop("model", client.model),
                messages=(("user", prompt),),
                purpose="decompose",
                **request_overrides,
            )
        )
        reply = response.choices[0]
        parsed = json.loads(_strip_json_fence(reply))
        if not isinstance(parsed, list) or not all(isinstance(s, str) for s in parsed):
            raise ValueError("reply is not a JSON array of strings")
        steps = align_steps(raw_text, parsed)
        if steps is None:
            raise ValueError("steps do not round-trip to the source text")
        return steps
    except Exception as exc:  # noqa: BLE001  (any failure falls back)
        logger.warning("llm decomposition failed (%s); falling back to heuristic", exc)
        return decompose_heuristic(raw_text)


def _strip_json_fence(text: str) -> str:
    match = re.search(r"```(?:json)?\s*\n(.*?)```", text, re.DOTALL)
    return match.group(1) if match else text


_BOXED = "\\boxed{"
_NUMBER_RE = re.compile(r"(?<![\w.])[-+]?\$?\d[\d,]*(?:\.\d+)?%?")


def _last_boxed(text: str) -> str | None:
    idx = text.rfind(_BOXED)
    if idx < 0:
        return None
    depth = 1
    start = idx + len(_BOXED)
    for j in range(start, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[start:j]
    return None


def normalize_answer(answer: str) -> str:
    """Canonical answer form: no thousands separators, currency/percent marks,
    or trailing decimal zeros; minus sign kept."""
    token = answer.strip()
    sign = ""
    rest = token
    if rest[:1] in "+-":
        sign, rest = rest[0], rest[1:]
    rest = rest.lstrip("$%").replace(",", "").rstrip("%")
    if re.fullmatch(r"\d+(\.\d*)?", rest):
        if "." in rest:
            rest = rest.rstrip("0").rstrip(".")
        if rest == "":
            rest = "0"
        if sign == "-" and rest != "0":
            return "-" + rest
        return rest
    return token


def extract_answer(raw_text: str) -> str | None:
    """Final answer of a solution text.

    The last ``\\boxed{...}`` group wins; otherwise the last number-like
    token of the final step.  Returns None when neither is present.
    """
    boxed = _last_boxed(raw_text)
    if boxed is not None and boxed.strip():
        return normalize_answer(boxed)
    steps = decompose_heuristic(raw_text)
    if not steps:
        return None
    matches = _NUMBER_RE.findall(steps[-1].text)
    if not matches:
        return None
    return normalize_answer(matches[-1])


_REL_TOLERANCE = Fraction(1, 10**9)


def answers_equivalent(left: str, right: str) -> bool:
    """String equality after normalization, or numeric equality within a
    relative tolerance of 1e-9 when both sides parse as rationals."""
    a = normalize_answer(left)
    b = normalize_answer(right)
    if a == b:
        return True
    try:
        fa = Fraction(a)
        fb = Fraction(b)
    except (ValueError, ZeroDivisionError):
        return False
    if fa == fb:
        return True
    return abs(fa - fb) <= _REL_TOLERANCE * max(abs(fa), abs(fb))


def label_trajectory(trajectory: Trajectory, problem: Problem) -> None:
    """Fill in the extracted answer and its correctness against the reference."""
    trajectory.extracted_answer = extract_answer(trajectory.raw_text)
    if problem.ground_truth_answer is None or trajectory.extracted_answer is None:
        trajectory.is_correct = None if problem.ground_truth_answer is None else False
        return
    trajectory.is_correct = answers_equivalent(trajectory.extracted_answer, problem.ground_truth_answer)


def content_hash(text: str, length: int = 12) -> str:
    """Stable short hex digest used for theorem names, cache keys, and ids."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def load_problems(lines: Iterable[dict[str, Any]]) -> list[Problem]:
    """Build problems from already-parsed JSONL payloads, tolerating an
    ``answer`` alias for the reference answer field."""
    problems = []
    for payload in lines:
        if "ground_truth_answer" not in payload and "answer" in payload:
            payload = dict(payload)
            payload["ground_truth_answer"] = payload.pop("answer")
        problems.append(Problem.from_dict(payload))
    return problems
