"""Run persistence: trajectory JSONL, the proof cache, statistics, and exports."""

from __future__ import annotations

import datetime as dt
import json
import logging
import os
import re
import threading
import uuid
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .core import StepStateTag, Trajectory, content_hash
from .prove import ProofOutcome

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPORT_HEADER = "# formalstep-export schema_version=1"


def _json_line(payload: dict[str, Any]) -> str:
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n"


def write_jsonl(
    path: str | Path,
    payloads: Iterable[dict[str, Any]],
    append: bool = False,
    run_id: str | None = None,
) -> int:
    """Write records one JSON object per line, flushing per record so an
    interrupted run leaves a readable prefix.  A run id, when given, is
    stamped onto every record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "a" if append else "w", encoding="utf-8") as handle:
        for payload in payloads:
            if run_id is not None:
                payload = {**payload, "run_id": run_id}
            handle.write(_json_line(payload))
            handle.flush()
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Read JSONL tolerating one partial trailing line.

    A final line that fails to parse and lacks a newline is a crash
    artifact: it is skipped with a warning.  A malformed line anywhere
    else is corruption and raises.
    """
    records: list[dict[str, Any]] = []
    with open(path, "r", encoding="utf-8") as handle:
        raw = handle.read()
    if not raw:
        return records
    lines = raw.split("\n")
    terminated = raw.endswith("\n")
    if terminated:
        lines = lines[:-1]
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if number == len(lines) and not terminated:
                logger.warning("%s: skipping partial trailing line", path)
                continue
            raise ValueError(f"{path}:{number}: malformed JSONL record") from exc
    return records


def write_trajectories(
    path: str | Path,
    trajectories: Iterable[Trajectory],
    append: bool = False,
    run_id: str | None = None,
) -> int:
    return write_jsonl(path, (t.to_dict() for t in trajectories), append=append, run_id=run_id)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return [Trajectory.from_dict(payload) for payload in read_jsonl(path)]


# ---- proof cache ------------------------------------------------------------


class ProofCache:
    """Content-addressed store of proof outcomes, one JSON file per statement.

    Keys are SHA-256 digests of the normalized statement text.  Writes are
    atomic (temp file and rename).  ``key_lock`` serializes in-process work
    on one statement so concurrent verification of duplicate steps runs the
    prover once.
    """

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._guard = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def key_lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks[key]

    def lookup(self, key: str) -> ProofOutcome | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as handle:
                payload = json.load(handle)
            return ProofOutcome.from_dict(payload["outcome"])
        except (json.JSONDecodeError, KeyError) as exc:
            logger.warning("cache entry %s unreadable (%s); treating as miss", key[:12], exc)
            return None

    def store(self, key: str, statement: str, outcome: ProofOutcome, prover_model: str) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "key": key,
            "statement": statement,
            "prover_model": prover_model,
            "created_at": dt.datetime.now(dt.timezone.utc).isoformat(),
            "outcome": outcome.to_dict(),
        }
        path = self._path(key)
        temp = path.with_suffix(".tmp")
        with open(temp, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, ensure_ascii=False)
        os.replace(temp, path)

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))


# ---- statistics -------------------------------------------------------------


@dataclass(frozen=True)
class StepStatRecord:
    state: StepStateTag
    trajectory_correct: bool | None = None
    first_success_attempt: int | None = None


@dataclass(frozen=True)
class DistributionReport:
    total_steps: int
    state_counts: dict[str, int]
    formalization_attempted: int
    formalized_count: int
    formalization_rate: float
    proved_count: int
    proof_rate: float
    correctness_by_state: dict[str, float | None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_steps": self.total_steps,
            "state_counts": dict(self.state_counts),
            "formalization_attempted": self.formalization_attempted,
            "formalized_count": self.formalized_count,
            "formalization_rate": self.formalization_rate,
            "proved_count": self.proved_count,
            "proof_rate": self.proof_rate,
            "correctness_by_state": dict(self.correctness_by_state),
        }


def stats(records: Iterable[StepStatRecord]) -> DistributionReport:
    """Fold step records into a distribution report; order-independent.

    The formalization rate is the share of valid statements among steps
    where formalization was attempted, i.e. steps that required
    verification.  The proof rate is the share proved among valid
    statements.
    """
    counts: dict[StepStateTag, int] = {tag: 0 for tag in StepStateTag}
    correct: dict[StepStateTag, int] = {tag: 0 for tag in StepStateTag}
    labeled: dict[StepStateTag, int] = {tag: 0 for tag in StepStateTag}
    total = 0
    for record in records:
        total += 1
        counts[record.state] += 1
        if record.trajectory_correct is not None:
            labeled[record.state] += 1
            if record.trajectory_correct:
                correct[record.state] += 1
    formalized = counts[StepStateTag.PROOF_SUCCEEDED] + counts[StepStateTag.PROOF_FAILED]
    attempted = total - counts[StepStateTag.NO_VERIFICATION_REQUIRED]
    proved = counts[StepStateTag.PROOF_SUCCEEDED]
    return DistributionReport(
        total_steps=total,
        state_counts={tag.value: counts[tag] for tag in StepStateTag},
        formalization_attempted=attempted,
        formalized_count=formalized,
        formalization_rate=formalized / attempted if attempted else 0.0,
        proved_count=proved,
        proof_rate=proved / formalized if formalized else 0.0,
        correctness_by_state={
            tag.value: (correct[tag] / labeled[tag] if labeled[tag] else None)
            for tag in StepStateTag
        },
    )


def step_records_from_trajectories(trajectories: Iterable[Trajectory]) -> Iterator[StepStatRecord]:
    for trajectory in trajectories:
        if trajectory.states is None:
            continue
        for state in trajectory.states:
            attempt = None
            if state.tag is StepStateTag.PROOF_SUCCEEDED and state.proof:
                attempt = state.proof.get("attempt_count")
            yield StepStatRecord(
                state=state.tag,
                trajectory_correct=trajectory.is_correct,
                first_success_attempt=attempt,
            )


def load_state_fixture(path: str | Path) -> Iterator[StepStatRecord]:
    """Expand a count-encoded state fixture into individual step records.

    The fixture stores groups of identical records (state, correctness,
    optional first-success-attempt histogram) so distributions with tens of
    thousands of steps ship in a few hundred bytes.
    """
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("kind") != "state_fixture":
        raise ValueError(f"{path} is not a state fixture")
    for group in payload["groups"]:
        state = StepStateTag(group["state"])
        correctness = group.get("trajectory_correct")
        histogram = group.get("first_success_attempts")
        if histogram:
            emitted = 0
            for attempt_text in sorted(histogram, key=int):
                for _ in range(histogram[attempt_text]):
                    yield StepStatRecord(state, correctness, int(attempt_text))
                    emitted += 1
            if emitted != group["count"]:
                raise ValueError(
                    f"group histogram sums to {emitted}, declared count {group['count']}"
                )
        else:
            for _ in range(group["count"]):
                yield StepStatRecord(state, correctness, None)


def is_state_fixture(path: str | Path) -> bool:
    if str(path).endswith(".jsonl"):
        return False
    try:
        with open(path, "r", encoding="utf-8") as handle:
            head = handle.read(2048)
        return '"state_fixture"' in head
    except OSError:
        return False


def proof_rate_curve(
    records: Iterable[StepStatRecord], budgets: Sequence[int]
) -> list[tuple[int, float]]:
    """Cumulative share of statements proved within each budget.

    The denominator is all formalized statements (proved or refuted); a
    budget of zero therefore maps to rate zero, and the curve is
    non-decreasing in the budget.
    """
    if any(b < 0 for b in budgets):
        raise ValueError("budgets must be non-negative")
    attempt_counts: list[int] = []
    statements = 0
    for record in records:
        if record.state is StepStateTag.PROOF_SUCCEEDED:
            statements += 1
            if record.first_success_attempt is not None:
                attempt_counts.append(record.first_success_attempt)
        elif record.state is StepStateTag.PROOF_FAILED:
            statements += 1
    curve = []
    for budget in budgets:
        if statements == 0:
            curve.append((budget, 0.0))
            continue
        proved = sum(1 for attempt in attempt_counts if attempt <= budget)
        curve.append((budget, proved / statements))
    return curve


# ---- dataset export ---------------------------------------------------------


def export_formalstep(trajectories: Iterable[Trajectory]) -> list[str]:
    """Serialize proved and refuted statements as dataset JSONL lines.

    One record per unique statement (first occurrence in problem-id, step
    order wins), preceded by a header comment line.  Record ids are
    statement content hashes.
    """
    ordered: list[tuple[str, int, dict[str, Any]]] = []
    for trajectory in trajectories:
        if trajectory.states is None:
            continue
        for index, state in enumerate(trajectory.states):
            if state.tag not in (StepStateTag.PROOF_SUCCEEDED, StepStateTag.PROOF_FAILED):
                continue
            formalization = state.formalization or {}
            statement = formalization.get("statement_text")
            if not statement:
                continue
            proof_text = (state.proof or {}).get("proof_text")
            record = {
                "id": content_hash(statement),
                "statement": statement,
                "proved": state.tag is StepStateTag.PROOF_SUCCEEDED,
                "proof": proof_text,
                "source_problem_id": trajectory.problem_id,
            }
            ordered.append((trajectory.problem_id, index, record))
    ordered.sort(key=lambda item: (item[0], item[1]))
    seen: set[str] = set()
    lines = [EXPORT_HEADER + "\n"]
    for _, _, record in ordered:
        if record["id"] in seen:
            continue
        seen.add(record["id"])
        lines.append(_json_line(record))
    return lines


def read_export(path: str | Path) -> list[dict[str, Any]]:
    """Read a dataset export, skipping comment lines."""
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip() or line.startswith("#"):
                continue
            records.append(json.loads(line))
    return records


# ---- run store --------------------------------------------------------------


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", text).strip("-") or "unnamed"


@dataclass
class RunStore:
    """Filesystem layout for one run: manifest, trajectory files, cache, outputs."""

    root: Path
    run_id: str = ""
    manifest: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        root: str | Path,
        *,
        config_snapshot: dict[str, Any] | None = None,
        seeds: dict[str, int] | None = None,
        fixture_hashes: dict[str, str] | None = None,
        run_id: str | None = None,
    ) -> "RunStore":
        """Open (or start) a run directory; the manifest lands on disk
        before any record does.

        Callers wanting replayable outputs pass a content-derived run id;
        otherwise one is drawn at random.
        """
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest_path = root / "manifest.json"
        if manifest_path.exists():
            with open(manifest_path, "r", encoding="utf-8") as handle:
                manifest = json.load(handle)
            return cls(root=root, run_id=manifest["run_id"], manifest=manifest)
        if run_id is None:
            run_id = uuid.uuid4().hex[:12]
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "run_id": run_id,
            "created_at": dt.datetime.now(dt.timezone.utc).isoformat(),
            "config": config_snapshot or {},
            "seeds": seeds or {},
            "fixture_hashes": fixture_hashes or {},
        }
        with open(manifest_path, "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, ensure_ascii=False, indent=2)
            handle.write("\n")
        return cls(root=root, run_id=run_id, manifest=manifest)

    def trajectories_path(self, dataset: str, model: str) -> Path:
        return self.root / "trajectories" / f"{_slug(dataset)}__{_slug(model)}.jsonl"

    @property
    def cache(self) -> ProofCache:
        return ProofCache(self.root / "cache")

    def path(self, *parts: str) -> Path:
        target = self.root.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target


def file_sha256(path: str | Path) -> str:
    import hashlib

    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
