"""Budgeted whole-proof search and the step/trajectory verification drivers."""

from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from .core import Problem, Step, StepState, StepStateTag, Trajectory
from .formalize import FormalizationKind, extract_formal_block, formalize
from .llm import LlmClient, LlmError
from .prompting import PromptSet, render
from .repl import DEFAULT_PROOF_TIMEOUT, ProofCheck, ReplError, classify_proof

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 16


@dataclass(frozen=True)
class ProofAttempt:
    candidate_text: str
    classification: str  # proved | not_proved | timeout | duplicate | repl_error | client_error

    def to_dict(self) -> dict[str, str]:
        return {"candidate_text": self.candidate_text, "classification": self.classification}


@dataclass
class ProofOutcome:
    proved: bool
    proof_text: str | None
    budget: int
    attempts: list[ProofAttempt] = field(default_factory=list)

    @property
    def attempt_count(self) -> int:
        """Budget-consuming attempts; textual duplicates are excluded."""
        return sum(1 for attempt in self.attempts if attempt.classification != "duplicate")

    def to_dict(self) -> dict[str, Any]:
        return {
            "proved": self.proved,
            "proof_text": self.proof_text,
            "budget": self.budget,
            "attempt_count": self.attempt_count,
            "attempts": [attempt.to_dict() for attempt in self.attempts],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ProofOutcome":
        return cls(
            proved=bool(payload["proved"]),
            proof_text=payload.get("proof_text"),
            budget=int(payload.get("budget", DEFAULT_BUDGET)),
            attempts=[
                ProofAttempt(a["candidate_text"], a["classification"])
                for a in payload.get("attempts", [])
            ],
        )


def statement_key(statement_text: str) -> str:
    """Content-addressed cache key; identical normalized statements collide
    by construction on any machine."""
    return hashlib.sha256(statement_text.strip().encode("utf-8")).hexdigest()


_SORRY_TAIL_RE = re.compile(r":=\s*by\s+sorry\s*\Z")


def statement_prefix(statement_text: str) -> str:
    """The statement with its placeholder proof body removed."""
    stripped = _SORRY_TAIL_RE.sub("", statement_text).rstrip()
    split = stripped.find(":=")
    if split >= 0:
        stripped = stripped[:split].rstrip()
    return stripped


def graft_candidate(prefix: str, llm_output: str) -> str:
    """Attach a sampled proof to the original statement header.

    The model may return a full theorem, a ``:= by ...`` tail, or a bare
    tactic script; in every case the checked candidate keeps the original
    hypotheses and goal, so a proof of a mutated statement can never count.
    """
    kind, block = extract_formal_block(llm_output)
    body = block if kind == "code" and block else llm_output.strip()
    split = body.find(":=")
    if split >= 0:
        tail = body[split:]
    elif body.lstrip().startswith("by"):
        tail = ":= " + body.strip()
    else:
        indented = "\n".join("  " + line for line in body.splitlines())
        tail = ":= by\n" + indented
    return f"{prefix} {tail}"


def prove(
    statement_text: str,
    client: LlmClient,
    repl: Any,
    budget: int = DEFAULT_BUDGET,
    *,
    template: str,
    proof_timeout: float = DEFAULT_PROOF_TIMEOUT,
    max_samples: int | None = None,
) -> ProofOutcome:
    """Sample whole proofs until one checks or the budget is spent.

    Textual duplicates are recorded but do not consume budget; a sampling
    cap of twice the budget bounds the loop when the endpoint keeps
    repeating itself.  The first proved candidate ends the search.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    max_samples = 2 * budget if max_samples is None else max_samples
    prefix = statement_prefix(statement_text)
    prompt = render(template, statement=statement_text)
    seen: set[str] = set()
    attempts: list[ProofAttempt] = []
    checked = 0
    samples = 0
    while checked < budget and samples < max_samples:
        samples += 1
        try:
            response = client.request(prompt, purpose="prove")
        except LlmError as exc:
            attempts.append(ProofAttempt(f"<client error: {exc}>", "client_error"))
            logger.warning("prover endpoint failed: %s", exc)
            break
        candidate = graft_candidate(prefix, response.choices[0])
        key = candidate.strip()
        if key in seen:
            attempts.append(ProofAttempt(candidate, "duplicate"))
            continue
        seen.add(key)
        checked += 1
        try:
            result = repl.check(candidate, proof_timeout)
        except ReplError as exc:
            attempts.append(ProofAttempt(candidate, "repl_error"))
            logger.warning("proof check errored: %s", exc)
            continue
        check = classify_proof(result)
        if check is ProofCheck.PROVED:
            attempts.append(ProofAttempt(candidate, "proved"))
            return ProofOutcome(True, candidate, budget, attempts)
        label = "timeout" if check is ProofCheck.TIMEOUT else "not_proved"
        attempts.append(ProofAttempt(candidate, label))
    return ProofOutcome(False, None, budget, attempts)


@dataclass
class VerifierServices:
    """Everything verify_step needs, bundled so call sites stay small.

    ``cache`` is any object with lookup/store/key_lock (see the run store);
    None disables caching.  ``prover_client`` defaults to the formalizer
    client when not given.
    """

    client: LlmClient
    repl: Any
    prompts: PromptSet
    prover_client: LlmClient | None = None
    cache: Any = None
    formalize_attempts: int = 3
    prove_budget: int = DEFAULT_BUDGET
    statement_timeout: float = 60.0
    proof_timeout: float = DEFAULT_PROOF_TIMEOUT
    revalidate: bool = False
    parallelism: int = 4

    def __post_init__(self) -> None:
        if self.prover_client is None:
            self.prover_client = self.client


def verify_step(
    problem: Problem, prior_steps: Sequence[Step], step: Step, services: VerifierServices
) -> StepState:
    """Formalize one step and, when a statement exists, prove or refute it.

    Proof outcomes are cached by statement content; concurrent requests
    for the same statement within a process are deduplicated so only one
    prover run happens per unique statement.
    """
    outcome = formalize(
        problem,
        prior_steps,
        step,
        services.client,
        services.repl,
        template=services.prompts.formalize,
        max_attempts=services.formalize_attempts,
        statement_timeout=services.statement_timeout,
    )
    if outcome.kind is FormalizationKind.NOT_REQUIRED:
        return StepState(StepStateTag.NO_VERIFICATION_REQUIRED, formalization=outcome.to_dict())
    if outcome.kind is FormalizationKind.FAILED:
        return StepState(StepStateTag.FORMALIZATION_FAILED, formalization=outcome.to_dict())
    statement = outcome.statement_text
    assert statement is not None
    proof = _prove_with_cache(statement, services)
    tag = StepStateTag.PROOF_SUCCEEDED if proof.proved else StepStateTag.PROOF_FAILED
    return StepState(tag, formalization=outcome.to_dict(), proof=proof.to_dict())


def _prove_with_cache(statement: str, services: VerifierServices) -> ProofOutcome:
    cache = services.cache
    prover = services.prover_client
    assert prover is not None

    def run() -> ProofOutcome:
        return prove(
            statement,
            prover,
            services.repl,
            services.prove_budget,
            template=services.prompts.prove,
            proof_timeout=services.proof_timeout,
        )

    if cache is None:
        return run()
    key = statement_key(statement)
    with cache.key_lock(key):
        cached = cache.lookup(key)
        if cached is not None and services.revalidate and cached.proved:
            try:
                result = services.repl.check(cached.proof_text, services.proof_timeout)
            except ReplError:
                result = None
            if result is None or classify_proof(result) is not ProofCheck.PROVED:
                logger.warning("cached proof no longer checks; re-proving %s", key[:12])
                cached = None
        if cached is not None:
            return cached
        outcome = run()
        cache.store(key, statement, outcome, prover.model)
        return outcome


def verify_trajectory(
    problem: Problem, trajectory: Trajectory, services: VerifierServices
) -> Trajectory:
    """Verify every step of a decomposed trajectory; states match step order.

    Steps are independent tasks run on a thread pool; results are placed
    by index, so the state sequence does not depend on completion order.
    """
    if not trajectory.steps:
        raise ValueError("trajectory has no steps to verify")
    steps = trajectory.steps

    def task(i: int) -> StepState:
        return verify_step(problem, steps[:i], steps[i], services)

    if services.parallelism <= 1:
        states = [task(i) for i in range(len(steps))]
    else:
        with ThreadPoolExecutor(max_workers=services.parallelism) as pool:
            states = list(pool.map(task, range(len(steps))))
    trajectory.states = states
    return trajectory
