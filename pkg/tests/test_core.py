"""Decomposition, reconstruction, and answer-handling behavior."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepverify.core import (
    Problem,
    Step,
    StepState,
    StepStateTag,
    StructureError,
    Trajectory,
    align_steps,
    answers_equivalent,
    decompose_heuristic,
    decompose_llm,
    extract_answer,
    label_trajectory,
    load_problems,
    normalize_answer,
    normalize_text,
    reconstruct,
)

from conftest import make_client


# ---- heuristic decomposition ------------------------------------------------


def test_decompose_periods_and_newlines_with_decimal_kept_whole():
    steps = decompose_heuristic("First halve it. Then 3.14 appears.\nDone.")
    assert [s.text for s in steps] == ["First halve it.", "Then 3.14 appears.", "Done."]
    assert "3.14" in steps[1].text


def test_decompose_text_without_delimiters_is_one_step():
    steps = decompose_heuristic("x")
    assert [s.text for s in steps] == ["x"]


def test_decompose_collapses_blank_line_runs():
    steps = decompose_heuristic("A.\n\n\nB.")
    assert [s.text for s in steps] == ["A.", "B."]
    assert reconstruct(steps) == "A.\nB."


def test_decompose_whitespace_only_input_is_empty():
    assert decompose_heuristic("   \n\n  \t ") == []


def test_decompose_indices_are_contiguous():
    steps = decompose_heuristic("One. Two. Three. 4.5 is not a boundary. End.")
    assert [s.index for s in steps] == list(range(len(steps)))


def test_decompose_keeps_trailing_periods_on_steps():
    steps = decompose_heuristic("A. B.")
    assert steps[0].text.endswith(".")
    assert steps[0].trailing_separator == " "
    assert steps[1].trailing_separator == ""


def test_round_trip_on_varied_corpus():
    corpus = [
        "Simple sentence.",
        "Costs $14.40 each. Buy 3.",
        "Line one\nline two. And 2.5 more.\n\nFinal line.",
        "Trailing spaces.   \nNext.",
        "No final period",
        "1.5. 2.5. 3.5.",
        "Ellipsis... then more.",
    ]
    for text in corpus:
        steps = decompose_heuristic(text)
        assert reconstruct(steps) == normalize_text(text), text


def test_reconstruct_empty_list_is_empty_text():
    assert reconstruct([]) == ""


def test_reconstruct_single_step_appends_separator():
    assert reconstruct([Step(index=0, text="A.", trailing_separator=" ")]) == "A. "


def test_reconstruct_rejects_non_contiguous_indices():
    steps = [Step(index=0, text="A."), Step(index=2, text="B.")]
    with pytest.raises(StructureError):
        reconstruct(steps)


def test_normalize_text_is_idempotent_on_samples():
    samples = ["a\r\nb", "x  \n\n\n y", "  padded  ", "tabs\t\nhere"]
    for text in samples:
        once = normalize_text(text)
        assert normalize_text(once) == once


_texts = st.text(
    alphabet=st.sampled_from(list("abAB12. \n$%")),
    min_size=0,
    max_size=80,
)


@given(_texts)
@settings(max_examples=300)
def test_round_trip_property(text):
    assert reconstruct(decompose_heuristic(text)) == normalize_text(text)


@given(
    st.integers(min_value=0, max_value=999),
    st.integers(min_value=0, max_value=999),
    st.sampled_from(["Take {d} away. ", "We get {d} now.\n", "{d} remains. "]),
)
@settings(max_examples=200)
def test_decimal_tokens_never_split(whole, frac, template):
    token = f"{whole}.{frac}"
    text = template.replace("{d}", token) + "Then stop."
    steps = decompose_heuristic(text)
    holders = [s for s in steps if token in s.text]
    assert len(holders) == 1


@given(_texts)
@settings(max_examples=200)
def test_normalize_idempotent_property(text):
    once = normalize_text(text)
    assert normalize_text(once) == once


# ---- llm decomposition ------------------------------------------------------


def _decompose_template() -> str:
    return "Split into steps:\n{solution}"


def test_decompose_llm_accepts_round_tripping_json():
    client, _ = make_client([{"choices": ['["A.", "B."]']}])
    steps = decompose_llm("A. B.", client, prompt_template=_decompose_template())
    assert [s.text for s in steps] == ["A.", "B."]
    assert reconstruct(steps) == "A. B."


def test_decompose_llm_falls_back_on_non_json():
    client, _ = make_client([{"choices": ["not json at all"]}])
    steps = decompose_llm("A. B.", client, prompt_template=_decompose_template())
    assert [s.text for s in steps] == ["A.", "B."]  # heuristic output


def test_decompose_llm_falls_back_on_dropped_content():
    client, _ = make_client([{"choices": ['["A."]']}])
    steps = decompose_llm("A. B.", client, prompt_template=_decompose_template())
    assert [s.text for s in steps] == ["A.", "B."]


def test_decompose_llm_falls_back_on_transport_failure():
    client, _ = make_client(
        [{"error": "transport", "repeat": True}], max_retries=0
    )
    steps = decompose_llm("A. B.", client, prompt_template=_decompose_template())
    assert [s.text for s in steps] == ["A.", "B."]


def test_decompose_llm_accepts_fenced_json_reply():
    client, _ = make_client([{"choices": ['```json\n["A.", "B."]\n```']}])
    steps = decompose_llm("A. B.", client, prompt_template=_decompose_template())
    assert [s.text for s in steps] == ["A.", "B."]


def test_align_steps_recovers_separators():
    steps = align_steps("A.\nB. C.", ["A.", "B.", "C."])
    assert steps is not None
    assert reconstruct(steps) == "A.\nB. C."


def test_align_steps_rejects_rewritten_content():
    assert align_steps("A. B.", ["A.", "X."]) is None
    assert align_steps("A. B.", ["A."]) is None


# ---- answers ----------------------------------------------------------------


def test_extract_answer_prefers_last_boxed():
    text = "First \\boxed{12} then later the answer is \\boxed{36}."
    assert extract_answer(text) == "36"


def test_extract_answer_last_number_of_final_step():
    assert extract_answer("The price was $14.40, so 36 dollars.") == "36"


def test_extract_answer_absent_when_no_numbers():
    assert extract_answer("no numbers here") is None


def test_extract_answer_handles_nested_braces_in_boxed():
    assert extract_answer("thus \\boxed{\\frac{1}{2}}") == "\\frac{1}{2}"


def test_extract_answer_decimal_and_currency():
    assert extract_answer("Total cost comes to $7.50.") == "7.5"


@pytest.mark.parametrize(
    ("raw", "expected"),
    [
        ("1,000", "1000"),
        ("36.0", "36"),
        ("  42 ", "42"),
        ("$25", "25"),
        ("50%", "50"),
        ("-0", "0"),
        ("-3.10", "-3.1"),
        ("0.500", "0.5"),
        ("x+1", "x+1"),
    ],
)
def test_normalize_answer(raw, expected):
    assert normalize_answer(raw) == expected


def test_answers_equivalent_numeric_forms():
    assert answers_equivalent("36", "36.0")
    assert answers_equivalent("1/2", "0.5")
    assert not answers_equivalent("36", "35")
    assert not answers_equivalent("x", "y")


def test_answers_equivalent_relative_tolerance():
    assert answers_equivalent("1000000000", "1000000000.000000001")
    assert not answers_equivalent("1", "1.001")


def test_label_trajectory_sets_answer_and_correctness():
    problem = Problem(id="p", statement="s", ground_truth_answer="4")
    trajectory = Trajectory(problem_id="p", raw_text="2 + 2 = 4. So \\boxed{4}.")
    label_trajectory(trajectory, problem)
    assert trajectory.extracted_answer == "4"
    assert trajectory.is_correct is True


def test_label_trajectory_without_ground_truth_leaves_correctness_unset():
    problem = Problem(id="p", statement="s")
    trajectory = Trajectory(problem_id="p", raw_text="the answer is 4.")
    label_trajectory(trajectory, problem)
    assert trajectory.extracted_answer == "4"
    assert trajectory.is_correct is None


def test_label_trajectory_unextractable_answer_is_incorrect():
    problem = Problem(id="p", statement="s", ground_truth_answer="4")
    trajectory = Trajectory(problem_id="p", raw_text="cannot decide.")
    label_trajectory(trajectory, problem)
    assert trajectory.extracted_answer is None
    assert trajectory.is_correct is False


# ---- domain type validation -------------------------------------------------


def test_problem_rejects_empty_statement():
    with pytest.raises(ValueError):
        Problem(id="p", statement="   ")


def test_step_rejects_blank_text_and_negative_index():
    with pytest.raises(ValueError):
        Step(index=0, text="  ")
    with pytest.raises(ValueError):
        Step(index=-1, text="x")


def test_proof_succeeded_requires_proof_text():
    with pytest.raises(ValueError):
        StepState(StepStateTag.PROOF_SUCCEEDED, proof={"proof_text": ""})


def test_formalization_failed_forbids_proof_attempts():
    with pytest.raises(ValueError):
        StepState(StepStateTag.FORMALIZATION_FAILED, proof={"attempts": []})


def test_trajectory_serialization_round_trip():
    trajectory = Trajectory(
        problem_id="p",
        raw_text="A. B.",
        steps=decompose_heuristic("A. B."),
        extracted_answer="4",
        is_correct=False,
        states=[StepState(StepStateTag.NO_VERIFICATION_REQUIRED)] * 2,
        scores={"combined": 0.25},
        provenance=["decomposition_fallback"],
    )
    restored = Trajectory.from_dict(trajectory.to_dict())
    assert restored.to_dict() == trajectory.to_dict()


def test_load_problems_accepts_answer_alias():
    problems = load_problems([{"id": "a", "statement": "s", "answer": "7"}])
    assert problems[0].ground_truth_answer == "7"
