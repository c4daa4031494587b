"""Auto-formalization of reasoning steps into prover-checkable statements."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

from .core import Problem, Step, content_hash
from .llm import LlmClient, LlmError
from .prompting import render
from .repl import DEFAULT_STATEMENT_TIMEOUT, StatementCheck, ReplError, classify_statement

logger = logging.getLogger(__name__)

SENTINEL = "NO_VERIFICATION_NEEDED"
DEFAULT_MAX_ATTEMPTS = 3

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_]*[ \t]*\n(.*?)```", re.DOTALL)
_HEADER_RE = re.compile(r"\b(theorem|lemma|example)\b(\s+[A-Za-z_][A-Za-z0-9_']*)?")


class FormalizationKind(Enum):
    NOT_REQUIRED = "not_required"
    FAILED = "failed"
    STATEMENT = "statement"


@dataclass(frozen=True)
class FormalizeAttempt:
    llm_output: str
    classification: str

    def to_dict(self) -> dict[str, str]:
        return {"llm_output": self.llm_output, "classification": self.classification}


@dataclass
class FormalizationOutcome:
    kind: FormalizationKind
    statement_text: str | None = None
    attempts: list[FormalizeAttempt] = field(default_factory=list)

    @property
    def attempt_count(self) -> int:
        return len(self.attempts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "statement_text": self.statement_text,
            "attempts": [attempt.to_dict() for attempt in self.attempts],
        }


def extract_formal_block(text: str) -> tuple[str, str | None]:
    """Parse a formalizer reply into ("sentinel"|"code"|"none", payload).

    The sentinel token is matched case-sensitively anywhere in the reply;
    otherwise the last fenced code block wins.
    """
    if SENTINEL in text:
        return "sentinel", None
    blocks = _FENCE_RE.findall(text)
    if blocks:
        return "code", blocks[-1].strip()
    return "none", None


def statement_name(step_text: str) -> str:
    return f"step_{content_hash(step_text)}"


def normalize_statement(code: str, step_text: str) -> str:
    """Canonical statement form: deterministic theorem name, import lines
    dropped (the worker environment supplies them), and the proof body
    forced to ``sorry`` regardless of what the model wrote."""
    lines = [line for line in code.splitlines() if not line.startswith("import ")]
    body = "\n".join(lines).strip()
    name = statement_name(step_text)
    match = _HEADER_RE.search(body)
    if match:
        body = body[: match.start()] + f"theorem {name}" + body[match.end() :]
    else:
        body = f"theorem {name} : {body}"
    split = body.find(":=")
    if split >= 0:
        body = body[:split].rstrip()
    return f"{body} := by sorry"


def build_formalization_prompt(
    problem: Problem, prior_steps: Sequence[Step], step: Step, template: str
) -> str:
    """Fill the formalization template; all prior steps form the context block."""
    context = "\n".join(prior.text for prior in prior_steps) if prior_steps else "(none)"
    return render(template, problem=problem.statement, context=context, step=step.text)


def formalize(
    problem: Problem,
    prior_steps: Sequence[Step],
    step: Step,
    client: LlmClient,
    repl: Any,
    *,
    template: str,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    statement_timeout: float = DEFAULT_STATEMENT_TIMEOUT,
) -> FormalizationOutcome:
    """Produce a REPL-validated statement for one step, or decide none is needed.

    Each failed attempt feeds the REPL's diagnostics back into the next
    prompt.  After ``max_attempts`` invalid candidates the outcome is
    Failed; client errors (already retried inside the client) and repeated
    worker crashes also end in Failed with the error recorded.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    base_prompt = build_formalization_prompt(problem, prior_steps, step, template)
    attempts: list[FormalizeAttempt] = []
    feedback = ""
    for _ in range(max_attempts):
        prompt = base_prompt + feedback
        try:
            response = client.request(prompt, purpose="formalize")
        except LlmError as exc:
            attempts.append(FormalizeAttempt(f"<client error: {exc}>", "client_error"))
            return FormalizationOutcome(FormalizationKind.FAILED, attempts=attempts)
        reply = response.choices[0]
        kind, code = extract_formal_block(reply)
        if kind == "sentinel":
            attempts.append(FormalizeAttempt(reply, "sentinel"))
            return FormalizationOutcome(FormalizationKind.NOT_REQUIRED, attempts=attempts)
        if kind == "none":
            attempts.append(FormalizeAttempt(reply, "no_code_block"))
            feedback = (
                "\n\nYour previous reply contained no fenced code block and no "
                f"{SENTINEL} token. Reply again following the instructions."
            )
            continue
        assert code is not None
        statement = normalize_statement(code, step.text)
        try:
            result = repl.check(statement, statement_timeout)
        except ReplError as exc:
            attempts.append(FormalizeAttempt(reply, "repl_error"))
            logger.warning("statement check failed for step %d: %s", step.index, exc)
            return FormalizationOutcome(FormalizationKind.FAILED, attempts=attempts)
        check = classify_statement(result)
        if check is StatementCheck.VALID:
            attempts.append(FormalizeAttempt(reply, "valid"))
            return FormalizationOutcome(
                FormalizationKind.STATEMENT, statement_text=statement, attempts=attempts
            )
        label = "timeout" if check is StatementCheck.TIMEOUT else "invalid"
        attempts.append(FormalizeAttempt(reply, label))
        diagnostics = "; ".join(m.text for m in result.errors()) or label
        feedback = (
            "\n\nYour previous statement failed validation with: "
            f"{diagnostics}\nProduce a corrected Lean 4 statement."
        )
    return FormalizationOutcome(FormalizationKind.FAILED, attempts=attempts)
