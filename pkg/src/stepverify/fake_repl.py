"""Stand-in prover REPL process for offline runs and tests.

Speaks the same JSON-lines protocol as the real toolchain REPL: one
``{"cmd": ...}`` object per stdin line, one reply object per stdout line.
Outcomes are driven by markers in the submitted code so tests can script
every classification path without a prover installation:

- ``FAKE_INVALID``   elaboration error (invalid statement)
- ``FAKE_FAIL``      unsolved goals (proof attempt fails)
- ``FAKE_SLEEP:<s>`` delays the reply, for timeout handling
- ``FAKE_CRASH``     kills the process mid-command
- ``sorry``          reported via a sorries entry plus the usual warning
"""

from __future__ import annotations

import json
import re
import sys
import time
from typing import Any


def evaluate(code: str) -> dict[str, Any]:
    messages: list[dict[str, Any]] = []
    sorries: list[dict[str, Any]] = []
    sleep_match = re.search(r"FAKE_SLEEP:([0-9.]+)", code)
    if sleep_match:
        time.sleep(float(sleep_match.group(1)))
    if not code.strip():
        messages.append(_message("error", "empty command"))
    if "FAKE_INVALID" in code:
        messages.append(_message("error", "unknown identifier 'FAKE_INVALID'"))
    if re.search(r":\s*:=", code):
        messages.append(_message("error", "unexpected token ':='; expected term"))
    if "FAKE_FAIL" in code:
        messages.append(_message("error", "unsolved goals"))
    if re.search(r"\bsorry\b", code):
        messages.append(_message("warning", "declaration uses 'sorry'"))
        sorries.append({"pos": {"line": 1, "column": 0}, "goal": "True"})
    reply: dict[str, Any] = {"env": 0, "messages": messages}
    if sorries:
        reply["sorries"] = sorries
    return reply


def _message(severity: str, data: str) -> dict[str, Any]:
    return {"severity": severity, "pos": {"line": 1, "column": 0}, "data": data}


def main() -> None:
    for line in sys.stdin:
        if not line.strip():
            continue
        command = json.loads(line)
        code = command.get("cmd", "")
        if "FAKE_CRASH" in code:
            sys.exit(1)
        sys.stdout.write(json.dumps(evaluate(code)) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
