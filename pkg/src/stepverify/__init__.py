"""Step-level formal verification of sampled reasoning trajectories.

Pipeline: sample chain-of-thought solutions, split them into steps,
auto-formalize each step into a prover-checkable statement, attempt a
budgeted proof, score the resulting state sequence with a trained
recurrent aggregator, blend in a prospective reward score, and select the
best trajectory per problem.
"""

__version__ = "0.1.0"

from .core import (
    Problem,
    Step,
    StepState,
    StepStateTag,
    Trajectory,
    answers_equivalent,
    decompose_heuristic,
    decompose_llm,
    extract_answer,
    normalize_text,
    reconstruct,
)

__all__ = [
    "Problem",
    "Step",
    "StepState",
    "StepStateTag",
    "Trajectory",
    "answers_equivalent",
    "decompose_heuristic",
    "decompose_llm",
    "extract_answer",
    "normalize_text",
    "reconstruct",
    "__version__",
]
