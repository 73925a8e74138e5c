"""Policy evaluation with deny-overrides combining and usage accounting.

Outcome precedence inside one policy, over the rules that match the request:

1. any deny rule                                   -> deny  (``DenyRule``)
2. a permit rule whose constraints all hold        -> permit
3. permit rules that all fail a constraint         -> deny  (constraint codes)
4. any require_approval rule                       -> require_approval
5. nothing matched                                 -> the policy default

Constraints are caveats on permit rules; on deny and require_approval
rules they are ignored.

``evaluate`` and ``evaluate_chain`` are pure.  ``UsageState`` is the only
mutable state in the engine and ``apply_usage`` returns a new value; callers
must serialize evaluate/apply pairs per delegation chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

from .model import (
    AccessRequest,
    Budget,
    Charge,
    Decision,
    Effect,
    Policy,
    PolicyError,
    Rate,
    Schema,
    TimeWindow,
)
from .patterns import PatternError

UsageKey = tuple  # (policy_id, rule index, constraint index)


@dataclass(frozen=True)
class UsageEntry:
    window_start: int
    count: int = 0
    spent: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class UsageState:
    """Per-(policy, rule, constraint) counters for one delegation chain."""

    entries: Mapping[UsageKey, UsageEntry] = field(default_factory=dict)

    def live(self, key: UsageKey, window_seconds: int, now: int) -> UsageEntry | None:
        entry = self.entries.get(key)
        if entry is None or now >= entry.window_start + window_seconds:
            return None
        return entry

    def spent(self, key: UsageKey, currency: str, window_seconds: int, now: int) -> int:
        entry = self.live(key, window_seconds, now)
        return entry.spent.get(currency, 0) if entry else 0

    def count(self, key: UsageKey, window_seconds: int, now: int) -> int:
        entry = self.live(key, window_seconds, now)
        return entry.count if entry else 0


def _field_paths(value: Any, prefix: str = "") -> Iterator[tuple[str, str, Any]]:
    if isinstance(value, dict):
        for key, item in value.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            yield path, str(key), item
            yield from _field_paths(item, path)
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _field_paths(item, prefix)


def check_schema(c: Schema, payload: Any) -> bool:
    """Payload conforms to the schema constraint.

    Field paths are dotted map keys; list elements share their parent's path.
    An allowed path also admits all of its ancestors.  Every ``predicate``
    entry must name an allowed predicate.
    """
    allowed = set(c.allowed_fields)
    for path in c.allowed_fields:
        parts = path.split(".")
        allowed.update(".".join(parts[:i]) for i in range(1, len(parts)))
    for path, key, item in _field_paths(payload):
        if path not in allowed:
            return False
        if key == "predicate" and (not isinstance(item, str) or item not in c.allowed_predicates):
            return False
    return True


def _check_constraints(
    policy: Policy, idx: int, req: AccessRequest, usage: UsageState, now: int
) -> tuple[list[str], list[Charge]]:
    failures: list[str] = []
    charges: list[Charge] = []
    for cidx, c in enumerate(policy.rules[idx].constraints):
        key = (policy.policy_id, idx, cidx)
        if isinstance(c, TimeWindow):
            if not c.start <= now < c.end:
                failures.append("OutsideTimeWindow")
        elif isinstance(c, Schema):
            if not check_schema(c, req.payload):
                failures.append("SchemaViolation")
        elif isinstance(c, Budget):
            if req.amount is None:
                continue
            if req.amount.currency != c.currency:
                failures.append("CurrencyMismatch")
            elif usage.spent(key, c.currency, c.window_seconds, now) + req.amount.value > c.limit:
                failures.append("BudgetExceeded")
            else:
                charges.append(Charge(key, "budget", c.window_seconds, now, c.currency, req.amount.value))
        elif isinstance(c, Rate):
            if usage.count(key, c.window_seconds, now) + 1 > c.max_count:
                failures.append("RateExceeded")
            else:
                charges.append(Charge(key, "rate", c.window_seconds, now))
    return failures, charges


def evaluate(policy: Policy, req: AccessRequest, usage: UsageState | None = None, now: int | None = None) -> Decision:
    now = req.timestamp if now is None else now
    usage = usage if usage is not None else UsageState()
    try:
        matching = [i for i, rule in enumerate(policy.rules) if rule.applies_to(req.resource, req.action)]
    except PatternError:
        return Decision(Effect.DENY, (None,), ("MalformedResource",))

    for i in matching:
        if policy.rules[i].effect is Effect.DENY:
            return Decision(Effect.DENY, (i,), ("DenyRule",))

    failed: list[int] = []
    failure_codes: list[str] = []
    for i in matching:
        if policy.rules[i].effect is not Effect.PERMIT:
            continue
        failures, charges = _check_constraints(policy, i, req, usage, now)
        if not failures:
            return Decision(Effect.PERMIT, (i,), (), tuple(charges))
        failed.append(i)
        failure_codes.extend(f for f in failures if f not in failure_codes)
    if failed:
        return Decision(Effect.DENY, (failed[0],), tuple(failure_codes))

    for i in matching:
        if policy.rules[i].effect is Effect.REQUIRE_APPROVAL:
            return Decision(Effect.REQUIRE_APPROVAL, (i,), ("ApprovalRequired",))

    return Decision(policy.default_effect, (None,), ("NoMatchingRule",))


def evaluate_chain(
    policies: Sequence[Policy], req: AccessRequest, usage: UsageState | None = None, now: int | None = None
) -> Decision:
    """Intersection of root-first chain policies: permit only if every one permits."""
    if not policies:
        raise PolicyError("cannot evaluate an empty policy chain")
    decisions = [evaluate(p, req, usage, now) for p in policies]
    matched = tuple(r for d in decisions for r in d.matched_rules)
    if all(d.outcome is Effect.PERMIT for d in decisions):
        return Decision(Effect.PERMIT, matched, (), tuple(c for d in decisions for c in d.charges))
    reasons: list[str] = []
    for d in decisions:
        if d.outcome is not Effect.PERMIT:
            reasons.extend(r for r in d.reasons if r not in reasons)
    if any(d.outcome is Effect.DENY for d in decisions):
        deny_reasons = []
        for d in decisions:
            if d.outcome is Effect.DENY:
                deny_reasons.extend(r for r in d.reasons if r not in deny_reasons)
        return Decision(Effect.DENY, matched, tuple(deny_reasons))
    return Decision(Effect.REQUIRE_APPROVAL, matched, tuple(reasons))


def apply_usage(usage: UsageState, req: AccessRequest, decision: Decision) -> UsageState:
    """Record the charges of a permit decision; other outcomes leave usage untouched."""
    if decision.outcome is not Effect.PERMIT or not decision.charges:
        return usage
    entries = dict(usage.entries)
    for ch in decision.charges:
        entry = entries.get(ch.key)
        if entry is None:
            entry = UsageEntry(window_start=ch.at)
        elif ch.at >= entry.window_start + ch.window_seconds:
            # tumbling windows aligned to the first use
            elapsed = (ch.at - entry.window_start) // ch.window_seconds
            entry = UsageEntry(window_start=entry.window_start + elapsed * ch.window_seconds)
        if ch.kind == "budget":
            spent = dict(entry.spent)
            spent[ch.currency] = spent.get(ch.currency, 0) + ch.amount
            entry = UsageEntry(entry.window_start, entry.count, spent)
        else:
            entry = UsageEntry(entry.window_start, entry.count + 1, entry.spent)
        entries[ch.key] = entry
    return UsageState(entries)
