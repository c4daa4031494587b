"""Score combination and answer selection over sampled trajectories."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Protocol, Sequence

import requests

from .core import Trajectory, answers_equivalent
from .llm import trajectory_key

logger = logging.getLogger(__name__)

SCORE_FLOOR = 1e-6


class EnsembleStrategy(Enum):
    WEIGHTED_MUL = "weighted_mul"
    WEIGHTED_SUM = "weighted_sum"
    MIN = "min"
    MAX = "max"


def clamp_score(value: float) -> float:
    """Scores live in [1e-6, 1]; the floor keeps the geometric form away
    from zero annihilation."""
    if value != value:  # NaN
        raise ValueError("score is NaN")
    return min(1.0, max(SCORE_FLOOR, value))


def ensemble(
    retrospective: float,
    prospective: float,
    alpha: float = 0.5,
    strategy: EnsembleStrategy = EnsembleStrategy.WEIGHTED_MUL,
) -> float:
    """Combine the two scores; alpha weights the retrospective side.

    At alpha 1 or 0 the weighted forms return one input unchanged.  The
    weighted product is a geometric mean, so its value is clamped into the
    [min, max] envelope of its inputs to shed float rounding.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    retro = clamp_score(retrospective)
    pro = clamp_score(prospective)
    if strategy is EnsembleStrategy.MIN:
        return min(retro, pro)
    if strategy is EnsembleStrategy.MAX:
        return max(retro, pro)
    if strategy is EnsembleStrategy.WEIGHTED_SUM:
        return alpha * retro + (1.0 - alpha) * pro
    if alpha == 1.0:
        return retro
    if alpha == 0.0:
        return pro
    value = retro**alpha * pro ** (1.0 - alpha)
    low, high = min(retro, pro), max(retro, pro)
    return min(high, max(low, value))


@dataclass(frozen=True)
class ScoreBreakdown:
    retrospective: float
    prospective: float
    combined: float
    alpha: float
    strategy: str

    def to_dict(self) -> dict[str, float | str]:
        return {
            "retrospective": self.retrospective,
            "prospective": self.prospective,
            "combined": self.combined,
            "alpha": self.alpha,
            "strategy": self.strategy,
        }


class ProspectiveScorer(Protocol):
    def score_steps(self, problem_statement: str, steps: Sequence[str]) -> list[float]: ...


class ConstantPrm:
    """Fixed per-step score; the neutral choice when no reward model exists."""

    def __init__(self, value: float = 1.0) -> None:
        self.value = clamp_score(value)

    def score_steps(self, problem_statement: str, steps: Sequence[str]) -> list[float]:
        return [self.value for _ in steps]


class MockPrm:
    """Scripted per-trajectory step scores, keyed by trajectory content hash.

    Unscripted trajectories get deterministic hash-derived scores so runs
    stay reproducible without exhaustive scripting.
    """

    def __init__(self, by_key: dict[str, list[float]] | None = None) -> None:
        self.by_key = dict(by_key or {})
        self.calls = 0

    @classmethod
    def from_file(cls, path: str) -> "MockPrm":
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
        return cls(payload.get("by_key", payload))

    def score_trajectory_text(self, raw_text: str, count: int) -> list[float]:
        key = trajectory_key(raw_text)
        self.calls += 1
        if key in self.by_key:
            scores = self.by_key[key]
            if len(scores) != count:
                raise ValueError(
                    f"scripted scores for {key} have length {len(scores)}, expected {count}"
                )
            return [clamp_score(s) for s in scores]
        base = int(key, 16)
        return [clamp_score(((base // (i + 1)) % 1000) / 1000.0) for i in range(count)]

    def score_steps(self, problem_statement: str, steps: Sequence[str]) -> list[float]:
        # Without the trajectory text, key on the joined steps instead.
        return self.score_trajectory_text("\n".join(steps), len(steps))


class RemotePrm:
    """HTTP reward-model endpoint: POST {problem, steps} -> {scores}."""

    def __init__(
        self,
        endpoint_url: str,
        *,
        timeout_seconds: float = 60.0,
        on_error: str = "fail",
        session: requests.Session | None = None,
    ) -> None:
        if on_error not in ("fail", "fallback"):
            raise ValueError("on_error must be 'fail' or 'fallback'")
        self.endpoint_url = endpoint_url
        self.timeout_seconds = timeout_seconds
        self.on_error = on_error
        self._session = session or requests.Session()

    def score_steps(self, problem_statement: str, steps: Sequence[str]) -> list[float]:
        try:
            response = self._session.post(
                self.endpoint_url,
                json={"problem": problem_statement, "steps": list(steps)},
                timeout=self.timeout_seconds,
            )
            response.raise_for_status()
            scores = response.json()["scores"]
            if len(scores) != len(steps):
                raise ValueError(f"{len(scores)} scores for {len(steps)} steps")
            return [clamp_score(float(s)) for s in scores]
        except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
            if self.on_error == "fallback":
                logger.warning("reward endpoint failed (%s); scoring steps as 1.0", exc)
                return [1.0 for _ in steps]
            raise


def prospective_score(
    trajectory: Trajectory,
    scorer: ProspectiveScorer,
    *,
    problem_statement: str = "",
    reduce: str = "last",
) -> float:
    """Single trajectory-level score from per-step reward scores.

    ``last`` takes the final step's score; ``min`` the weakest step.
    """
    if reduce not in ("last", "min"):
        raise ValueError("reduce must be 'last' or 'min'")
    if not trajectory.steps:
        raise ValueError("trajectory has no steps to score")
    if isinstance(scorer, MockPrm):
        scores = scorer.score_trajectory_text(trajectory.raw_text, len(trajectory.steps))
    else:
        scores = scorer.score_steps(problem_statement, trajectory.step_texts)
    scores = [clamp_score(s) for s in scores]
    return scores[-1] if reduce == "last" else min(scores)


def select_best_of_n(trajectories: Sequence[Trajectory]) -> int:
    """Index of the highest combined score; earliest index wins ties."""
    if not trajectories:
        raise ValueError("no trajectories to select from")
    best_index = 0
    best_score = None
    for i, trajectory in enumerate(trajectories):
        if trajectory.scores is None or "combined" not in trajectory.scores:
            raise ValueError(f"trajectory {i} has no combined score")
        score = trajectory.scores["combined"]
        if best_score is None or score > best_score:
            best_index, best_score = i, score
    return best_index


def majority_vote(trajectories: Sequence[Trajectory], tie_break: str = "first") -> str | None:
    """Most frequent extracted answer under answer equivalence.

    ``first`` breaks ties toward the answer whose first occurrence is
    earliest; ``last`` toward the latest.  Trajectories without an answer
    do not vote; returns None when nobody voted.
    """
    if tie_break not in ("first", "last"):
        raise ValueError("tie_break must be 'first' or 'last'")
    groups: list[tuple[str, int]] = []  # representative answer, vote count
    for trajectory in trajectories:
        answer = trajectory.extracted_answer
        if answer is None:
            continue
        for k, (representative, count) in enumerate(groups):
            if answers_equivalent(representative, answer):
                groups[k] = (representative, count + 1)
                break
        else:
            groups.append((answer, 1))
    if not groups:
        return None
    best = max(count for _, count in groups)
    winners = [representative for representative, count in groups if count == best]
    return winners[0] if tie_break == "first" else winners[-1]


def pass_at_k(trajectories: Sequence[Trajectory], k: int) -> bool:
    """True when any of the first k trajectories is correct."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return any(bool(t.is_correct) for t in trajectories[:k])


def score_trajectory(
    trajectory: Trajectory,
    retro_score: float,
    scorer: ProspectiveScorer,
    *,
    problem_statement: str = "",
    alpha: float = 0.5,
    strategy: EnsembleStrategy = EnsembleStrategy.WEIGHTED_MUL,
    reduce: str = "last",
) -> ScoreBreakdown:
    pro = prospective_score(
        trajectory, scorer, problem_statement=problem_statement, reduce=reduce
    )
    retro = clamp_score(retro_score)
    pro = clamp_score(pro)
    combined = ensemble(retro, pro, alpha, strategy)
    breakdown = ScoreBreakdown(
        retrospective=retro,
        prospective=pro,
        combined=combined,
        alpha=alpha,
        strategy=strategy.value,
    )
    trajectory.scores = dict(breakdown.to_dict())
    return breakdown
