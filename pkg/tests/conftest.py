"""Shared builders for pipeline tests: mock clients, in-process REPLs, records."""

from __future__ import annotations

from typing import Any

import pytest

from stepverify.core import Problem, Step, StepState, StepStateTag, Trajectory
from stepverify.llm import LlmClient, MockBackend
from stepverify.prompting import PromptSet
from stepverify.repl import RuleRepl


@pytest.fixture(scope="session")
def prompts() -> PromptSet:
    return PromptSet.bundled()


@pytest.fixture()
def rule_repl() -> RuleRepl:
    return RuleRepl()


def make_client(
    entries: list[dict[str, Any]] | None = None,
    *,
    synthesize: bool = False,
    **client_kwargs: Any,
) -> tuple[LlmClient, MockBackend]:
    backend = MockBackend(entries, synthesize=synthesize)
    client_kwargs.setdefault("backoff_seconds", 0.0)
    return LlmClient(backend, **client_kwargs), backend


def make_step(index: int = 0, text: str = "So 2 + 2 = 4.", separator: str = " ") -> Step:
    return Step(index=index, text=text, trailing_separator=separator)


def make_problem(pid: str = "p1", statement: str = "What is 2 + 2?", answer: str | None = "4") -> Problem:
    return Problem(id=pid, statement=statement, ground_truth_answer=answer)


def proved_state(statement: str = "theorem s : 1 = 1 := by sorry", attempt: int = 1) -> StepState:
    proof_text = statement.replace("sorry", "rfl")
    return StepState(
        StepStateTag.PROOF_SUCCEEDED,
        formalization={"kind": "statement", "statement_text": statement},
        proof={"proved": True, "proof_text": proof_text, "attempt_count": attempt},
    )


def refuted_state(statement: str = "theorem s : 1 = 2 := by sorry", attempts: int = 16) -> StepState:
    return StepState(
        StepStateTag.PROOF_FAILED,
        formalization={"kind": "statement", "statement_text": statement},
        proof={"proved": False, "proof_text": None, "attempt_count": attempts},
    )


def plain_state(tag: StepStateTag) -> StepState:
    if tag is StepStateTag.PROOF_SUCCEEDED:
        return proved_state()
    if tag is StepStateTag.PROOF_FAILED:
        return refuted_state()
    return StepState(tag, formalization={"kind": "not_required", "statement_text": None})


def make_trajectory(
    pid: str = "p1",
    answer: str | None = "4",
    correct: bool | None = True,
    tags: list[StepStateTag] | None = None,
    raw_text: str = "Add the numbers. The answer is 4.",
    steps: list[str] | None = None,
) -> Trajectory:
    trajectory = Trajectory(problem_id=pid, raw_text=raw_text)
    if steps is None:
        steps = ["Add the numbers.", "The answer is 4."]
    trajectory.steps = [
        Step(index=i, text=text, trailing_separator=" " if i < len(steps) - 1 else "")
        for i, text in enumerate(steps)
    ]
    trajectory.extracted_answer = answer
    trajectory.is_correct = correct
    if tags is not None:
        trajectory.states = [plain_state(tag) for tag in tags]
    return trajectory
