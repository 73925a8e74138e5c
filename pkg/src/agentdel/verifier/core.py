"""Resource-server enforcement: verify the bundle, evaluate, escalate, account, audit."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from ..audit import AuditError, AuditLog
from ..policy import AccessRequest, Decision, Effect, PolicyError, UsageState, apply_usage, evaluate, evaluate_chain
from ..tokens import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_SKEW,
    TokenEnvelope,
    TokenError,
    TrustStore,
    VerifiedDelegation,
    decode_bundle,
    token_hash,
    verify_delegation_chain,
)
from .approval import ApprovalHandler, ApprovalRequest, auto_deny

log = logging.getLogger(__name__)


class UsageStore:
    """Usage state per delegation chain, each behind its own lock."""

    def __init__(self) -> None:
        self._states: dict[str, UsageState] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def lock(self, chain_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(chain_id, threading.Lock())

    def get(self, chain_id: str) -> UsageState:
        return self._states.get(chain_id, UsageState())

    def put(self, chain_id: str, state: UsageState) -> None:
        self._states[chain_id] = state


@dataclass
class VerifierConfig:
    trust: TrustStore
    approval_handler: ApprovalHandler = auto_deny
    approval_timeout: float = 30.0
    usage: UsageStore = field(default_factory=UsageStore)
    audit: AuditLog | None = None
    skew: int = DEFAULT_SKEW
    max_depth: int = DEFAULT_MAX_DEPTH
    clock: Callable[[], int] | None = None
    actor: str = "verifier"

    def __post_init__(self) -> None:
        if not self.trust.hosts:
            raise ValueError("a verifier needs at least one trusted provider")
        if self.audit is None:
            self.audit = AuditLog(clock=self.clock)


def _deny(*reasons: str) -> Decision:
    return Decision(Effect.DENY, (None,), tuple(reasons))


def _run_handler(handler: ApprovalHandler, req: ApprovalRequest, timeout: float) -> str:
    """``approved``, ``ApprovalRejected``, ``ApprovalTimeout`` or ``ApprovalError``."""
    box: dict[str, Any] = {}

    def target() -> None:
        try:
            box["answer"] = bool(handler(req))
        except Exception as exc:  # a broken handler must not escape
            box["error"] = exc

    worker = threading.Thread(target=target, daemon=True, name="approval")
    worker.start()
    worker.join(timeout)
    if worker.is_alive():
        return "ApprovalTimeout"
    if "error" in box:
        log.warning("approval handler failed: %s", box["error"])
        return "ApprovalError"
    return "approved" if box["answer"] else "ApprovalRejected"


class Verifier:
    """``authorize`` is total: every failure becomes a deny Decision, and each
    call appends exactly one audit record."""

    def __init__(self, config: VerifierConfig) -> None:
        self.config = config
        self.audit: AuditLog = config.audit  # type: ignore[assignment]

    def _now(self, now: int | None) -> int:
        if now is not None:
            return now
        if self.config.clock is not None:
            return int(self.config.clock())
        return int(time.time())

    def _record(self, actor: str, refs: Sequence[str], decision: Decision, details: dict, now: int) -> Decision:
        try:
            self.audit.append("authorize", actor, refs, decision=decision.summary(), details=details, timestamp=now)
        except (AuditError, OSError, TypeError) as exc:
            log.error("audit append failed, denying: %s", exc)
            return _deny("AuditFailure")
        return decision

    def verify(self, bundle: Sequence[TokenEnvelope | str], now: int) -> VerifiedDelegation:
        return verify_delegation_chain(
            decode_bundle(bundle), self.config.trust, now, skew=self.config.skew, max_depth=self.config.max_depth
        )

    def authorize(
        self, bundle: Sequence[TokenEnvelope | str], req: AccessRequest | dict, now: int | None = None
    ) -> Decision:
        now = self._now(now)
        details: dict[str, Any] = {}
        refs: list[str] = []
        actor = "unknown"
        try:
            if isinstance(req, dict):
                req = AccessRequest.from_json(req, default_timestamp=now)
            details.update({"resource": req.resource, "action": str(req.action)})
        except (PolicyError, ValueError) as exc:
            details["error"] = str(exc)
            return self._record(actor, refs, _deny("InvalidRequest"), details, now)
        try:
            envs = decode_bundle(bundle)
            refs = [token_hash(e) for e in envs]
        except TokenError as exc:
            details["error"] = str(exc)
            return self._record(actor, refs, _deny(exc.code), details, now)
        except Exception as exc:  # anything unparsable in the bundle
            details["error"] = str(exc)
            return self._record(actor, refs, _deny("MalformedBundle"), details, now)
        try:
            vd = verify_delegation_chain(envs, self.config.trust, now, skew=self.config.skew,
                                         max_depth=self.config.max_depth)
        except TokenError as exc:
            details["error"] = str(exc)
            return self._record(actor, refs, _deny(exc.code), details, now)
        except Exception as exc:  # fail closed on anything unexpected
            log.exception("chain verification crashed")
            details["error"] = str(exc)
            return self._record(actor, refs, _deny("VerificationError"), details, now)

        actor = vd.agent.global_id
        refs = [*vd.delegation_refs, vd.user_ref, vd.agent_ref]
        details["chain_id"] = vd.chain_id
        chain = vd.chain_id
        policies = vd.effective_policies
        usage = self.config.usage

        with usage.lock(chain):
            decision = evaluate_chain(policies, req, usage.get(chain), now)
            if decision.outcome is not Effect.REQUIRE_APPROVAL:
                return self._commit(chain, req, decision, actor, refs, details, now)

        verdict = _run_handler(
            self.config.approval_handler, ApprovalRequest(req, decision, vd), self.config.approval_timeout
        )
        details["approval"] = verdict
        if verdict != "approved":
            return self._record(actor, refs, _deny(verdict), details, now)
        with usage.lock(chain):
            # usage may have moved while the human was deciding
            state = usage.get(chain)
            parts = [evaluate(p, req, state, now) for p in policies]
            denied = [r for d in parts if d.outcome is Effect.DENY for r in d.reasons]
            if denied:
                final = _deny(*dict.fromkeys(denied))
            else:
                final = Decision(
                    Effect.PERMIT,
                    tuple(r for d in parts for r in d.matched_rules),
                    ("ApprovalGranted",),
                    tuple(c for d in parts for c in d.charges),
                )
            return self._commit(chain, req, final, actor, refs, details, now)

    def _commit(
        self, chain: str, req: AccessRequest, decision: Decision, actor: str, refs: list[str], details: dict, now: int
    ) -> Decision:
        """Audit first, then record usage; a failed audit leaves usage untouched."""
        recorded = self._record(actor, refs, decision, details, now)
        if recorded is decision and decision.permitted:
            self.config.usage.put(chain, apply_usage(self.config.usage.get(chain), req, decision))
        return recorded
