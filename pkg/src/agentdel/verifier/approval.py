"""Approval handlers for require_approval decisions."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Callable, TextIO

from ..policy import AccessRequest, Decision
from ..tokens import VerifiedDelegation


@dataclass(frozen=True)
class ApprovalRequest:
    request: AccessRequest
    decision: Decision
    delegation: VerifiedDelegation

    def describe(self) -> str:
        req = self.request
        amount = f" for {req.amount.value / 100:.2f} {req.amount.currency}" if req.amount else ""
        return (
            f"{self.delegation.agent.global_id} (on behalf of {self.delegation.user_subject}) "
            f"asks to {req.action} {req.resource}{amount}"
        )


ApprovalHandler = Callable[[ApprovalRequest], bool]


def auto_deny(_: ApprovalRequest) -> bool:
    return False


def auto_approve(_: ApprovalRequest) -> bool:
    return True


class CliPrompt:
    """Ask a human on a terminal; anything but y/yes rejects."""

    def __init__(self, stdin: TextIO | None = None, stdout: TextIO | None = None) -> None:
        self._in = stdin or sys.stdin
        self._out = stdout or sys.stderr

    def __call__(self, req: ApprovalRequest) -> bool:
        self._out.write(f"approval needed: {req.describe()} [y/N] ")
        self._out.flush()
        answer = self._in.readline()
        return answer.strip().lower() in ("y", "yes")


class Scripted:
    """Replays fixed answers in order (for scenarios); rejects once exhausted."""

    def __init__(self, answers: list[bool]) -> None:
        self._answers = list(answers)
        self.seen: list[ApprovalRequest] = []

    def __call__(self, req: ApprovalRequest) -> bool:
        self.seen.append(req)
        return self._answers.pop(0) if self._answers else False
