"""Worker pool over prover REPL subprocesses, with command classification."""

from __future__ import annotations

import json
import logging
import os
import queue
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from . import fake_repl

logger = logging.getLogger(__name__)

DEFAULT_STATEMENT_TIMEOUT = 60.0
DEFAULT_PROOF_TIMEOUT = 120.0


class ReplError(Exception):
    """Base class for REPL infrastructure failures."""


class WorkerCrashed(ReplError):
    """A worker process died or broke protocol; surfaced after one retry."""


class PoolExhausted(ReplError):
    """No worker became available before the acquire deadline, or the pool is closed."""


@dataclass(frozen=True)
class ReplMessage:
    severity: str
    position: str
    text: str


@dataclass(frozen=True)
class ReplResult:
    messages: tuple[ReplMessage, ...]
    contains_sorry: bool
    elapsed_seconds: float
    timed_out: bool

    def errors(self) -> list[ReplMessage]:
        return [m for m in self.messages if m.severity == "error"]


class StatementCheck(Enum):
    VALID = "valid_statement"
    INVALID = "invalid"
    TIMEOUT = "timeout"


class ProofCheck(Enum):
    PROVED = "proved"
    NOT_PROVED = "not_proved"
    TIMEOUT = "timeout"


def classify_statement(result: ReplResult) -> StatementCheck:
    """Valid iff no error-severity messages and no timeout; sorry is allowed."""
    if result.timed_out:
        return StatementCheck.TIMEOUT
    if result.errors():
        return StatementCheck.INVALID
    return StatementCheck.VALID


def classify_proof(result: ReplResult) -> ProofCheck:
    """Proved iff no errors, no remaining sorry, and no timeout."""
    if result.timed_out:
        return ProofCheck.TIMEOUT
    if result.errors() or result.contains_sorry:
        return ProofCheck.NOT_PROVED
    return ProofCheck.PROVED


def parse_reply(reply: dict[str, Any], elapsed_seconds: float) -> ReplResult:
    messages = []
    for raw in reply.get("messages", []):
        pos = raw.get("pos") or {}
        position = f"{pos.get('line', '?')}:{pos.get('column', '?')}" if pos else ""
        messages.append(
            ReplMessage(
                severity=raw.get("severity", "info"),
                position=position,
                text=str(raw.get("data", "")),
            )
        )
    contains_sorry = bool(reply.get("sorries")) or any(
        "declaration uses 'sorry'" in m.text for m in messages
    )
    return ReplResult(
        messages=tuple(messages),
        contains_sorry=contains_sorry,
        elapsed_seconds=elapsed_seconds,
        timed_out=False,
    )


def fake_launch_command() -> list[str]:
    return [sys.executable, "-m", "stepverify.fake_repl"]


@dataclass(frozen=True)
class WorkerConfig:
    launch_command: tuple[str, ...]
    project_root: str | None = None
    max_commands_per_worker: int = 200
    init_commands: tuple[str, ...] = ()
    startup_timeout: float = 300.0
    acquire_timeout: float = 600.0

    @classmethod
    def fake(cls, **overrides: Any) -> "WorkerConfig":
        return cls(launch_command=tuple(fake_launch_command()), **overrides)


class _CommandTimeout(Exception):
    pass


class _Worker:
    def __init__(self, config: WorkerConfig) -> None:
        self.config = config
        self.commands_served = 0
        self.base_env: int | None = None
        try:
            self.process = subprocess.Popen(
                list(config.launch_command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                cwd=config.project_root,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ReplError(f"could not launch {config.launch_command}: {exc}") from exc
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._read_stdout, daemon=True)
        self._reader.start()
        for command in config.init_commands:
            reply = self.run({"cmd": command}, config.startup_timeout)
            env = reply.get("env")
            if isinstance(env, int):
                self.base_env = env

    def _read_stdout(self) -> None:
        assert self.process.stdout is not None
        while True:
            line = self.process.stdout.readline()
            if not line:
                self._lines.put(None)
                return
            self._lines.put(line)

    def run(self, payload: dict[str, Any], timeout: float) -> dict[str, Any]:
        assert self.process.stdin is not None
        try:
            self.process.stdin.write(json.dumps(payload) + "\n")
            self.process.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise WorkerCrashed(f"worker stdin closed: {exc}") from exc
        deadline = time.monotonic() + timeout
        buffer = ""
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _CommandTimeout()
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                raise _CommandTimeout() from None
            if line is None:
                raise WorkerCrashed("worker process exited mid-command")
            if not buffer and not line.strip():
                continue
            buffer += line
            try:
                return json.loads(buffer)
            except json.JSONDecodeError:
                continue  # multi-line reply still streaming

    def close(self) -> None:
        if self.process.poll() is None:
            self.process.kill()
        try:
            self.process.wait(timeout=5)
        except subprocess.TimeoutExpired:  # pragma: no cover
            pass


class ReplPool:
    """Fixed-size pool of REPL workers with per-command timeouts.

    A command that exceeds its deadline kills the worker and replaces it;
    the command reports as timed out.  A crashed worker is replaced and the
    command retried once before the crash surfaces.  Workers are recycled
    after a configured number of commands to bound interpreter state drift.
    """

    def __init__(self, config: WorkerConfig, size: int | None = None) -> None:
        self.config = config
        self.size = size or os.cpu_count() or 1
        self._workers: queue.Queue[_Worker] = queue.Queue()
        self._closed = False
        self._lock = threading.Lock()
        self._waiting = 0
        self.commands_issued = 0
        self.workers_replaced = 0
        for _ in range(self.size):
            self._workers.put(_Worker(config))

    def __enter__(self) -> "ReplPool":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    @property
    def queue_depth(self) -> int:
        with self._lock:
            return self._waiting

    def _acquire(self) -> _Worker:
        if self._closed:
            raise PoolExhausted("pool is closed")
        with self._lock:
            self._waiting += 1
        try:
            return self._workers.get(timeout=self.config.acquire_timeout)
        except queue.Empty:
            raise PoolExhausted(
                f"no worker available within {self.config.acquire_timeout}s"
            ) from None
        finally:
            with self._lock:
                self._waiting -= 1

    def _release(self, worker: _Worker) -> None:
        if worker.commands_served >= self.config.max_commands_per_worker:
            self._replace(worker)
        else:
            self._workers.put(worker)

    def _replace(self, worker: _Worker) -> None:
        worker.close()
        self.workers_replaced += 1
        self._workers.put(_Worker(self.config))

    def check(self, code: str, timeout: float | None = None) -> ReplResult:
        """Run one self-contained command and classify the reply.

        Every command sees the same base environment (built once per worker
        from the configured init commands); nothing persists between
        commands.
        """
        timeout = DEFAULT_STATEMENT_TIMEOUT if timeout is None else timeout
        crashes = 0
        while True:
            worker = self._acquire()
            payload: dict[str, Any] = {"cmd": code}
            if worker.base_env is not None:
                payload["env"] = worker.base_env
            started = time.monotonic()
            try:
                reply = worker.run(payload, timeout)
            except _CommandTimeout:
                elapsed = time.monotonic() - started
                logger.warning("repl command timed out after %.1fs; replacing worker", elapsed)
                self._replace(worker)
                with self._lock:
                    self.commands_issued += 1
                return ReplResult((), False, elapsed, timed_out=True)
            except WorkerCrashed:
                self._replace(worker)
                crashes += 1
                if crashes > 1:
                    raise
                logger.warning("repl worker crashed; retrying command once")
                continue
            worker.commands_served += 1
            with self._lock:
                self.commands_issued += 1
            self._release(worker)
            return parse_reply(reply, time.monotonic() - started)

    def close(self) -> None:
        self._closed = True
        while True:
            try:
                worker = self._workers.get_nowait()
            except queue.Empty:
                break
            worker.close()


@dataclass
class RuleRepl:
    """In-process stand-in honoring the ``check`` contract.

    Applies the same marker rules as the fake REPL subprocess by default;
    tests can swap in any ``str -> ReplResult`` rule.  Counts commands so
    cache-soundness assertions can observe prover activity.
    """

    rule: Callable[[str], ReplResult] | None = None
    commands: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def check(self, code: str, timeout: float | None = None) -> ReplResult:
        with self._lock:
            self.commands.append(code)
        if self.rule is not None:
            return self.rule(code)
        return parse_reply(fake_repl.evaluate(code), 0.0)

    def close(self) -> None:
        pass
