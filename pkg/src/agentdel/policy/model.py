"""Policy documents: rules of effect over resource patterns and actions.

JSON form (``Policy.to_json``)::

    {"policy_id": "...", "default_effect": "deny",
     "rules": [{"effect": "permit",
                "resources": ["https://api.example.com/v1/**"],
                "actions": ["read", "execute:make"],
                "constraints": [{"type": "budget", "limit": 50000,
                                 "currency": "USD", "window_seconds": 86400}]}]}
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any, Union

from .patterns import PatternError, ResourcePattern


class PolicyError(ValueError):
    code = "InvalidPolicy"


class Effect(str, enum.Enum):
    PERMIT = "permit"
    DENY = "deny"
    REQUIRE_APPROVAL = "require_approval"


class Verb(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"
    PURCHASE = "purchase"
    MESSAGE = "message"


_QUALIFIER_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.\-]*$")
_CURRENCY_RE = re.compile(r"^[A-Z]{3}$")


@dataclass(frozen=True)
class Action:
    """A verb plus an optional qualifier (the command name for ``execute``).

    In a rule, ``execute`` without a qualifier stands for any command.  A
    request must always name the command.
    """

    verb: Verb
    qualifier: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "verb", Verb(self.verb))
        if self.qualifier is not None:
            if self.verb is not Verb.EXECUTE:
                raise PolicyError(f"qualifier is only allowed for execute, not {self.verb.value}")
            if not _QUALIFIER_RE.match(self.qualifier):
                raise PolicyError(f"invalid command qualifier {self.qualifier!r}")

    @classmethod
    def parse(cls, text: str) -> Action:
        verb, sep, qualifier = text.partition(":")
        try:
            return cls(Verb(verb), qualifier if sep else None)
        except ValueError as exc:
            raise PolicyError(f"unknown action {text!r}") from exc

    def __str__(self) -> str:
        return self.verb.value if self.qualifier is None else f"{self.verb.value}:{self.qualifier}"

    def covers(self, other: Action) -> bool:
        return self.verb is other.verb and (self.qualifier is None or self.qualifier == other.qualifier)


ALL_ACTIONS: tuple[Action, ...] = tuple(Action(v) for v in Verb)


def _positive_int(value: Any, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise PolicyError(f"{name} must be a positive integer, got {value!r}")
    return value


@dataclass(frozen=True)
class Budget:
    """Cumulative spend cap in minor currency units, shared by the whole chain."""

    limit: int
    currency: str
    window_seconds: int

    def __post_init__(self) -> None:
        _positive_int(self.limit, "budget limit")
        _positive_int(self.window_seconds, "budget window_seconds")
        if not isinstance(self.currency, str) or not _CURRENCY_RE.match(self.currency):
            raise PolicyError(f"currency must be 3 uppercase letters, got {self.currency!r}")

    def to_json(self) -> dict:
        return {"type": "budget", "limit": self.limit, "currency": self.currency, "window_seconds": self.window_seconds}


@dataclass(frozen=True)
class Rate:
    max_count: int
    window_seconds: int

    def __post_init__(self) -> None:
        _positive_int(self.max_count, "rate max_count")
        _positive_int(self.window_seconds, "rate window_seconds")

    def to_json(self) -> dict:
        return {"type": "rate", "max_count": self.max_count, "window_seconds": self.window_seconds}


@dataclass(frozen=True)
class TimeWindow:
    start: int
    end: int

    def __post_init__(self) -> None:
        if not isinstance(self.start, int) or isinstance(self.start, bool) or self.start < 0:
            raise PolicyError(f"time window start must be a non-negative integer, got {self.start!r}")
        _positive_int(self.end, "time window end")
        if self.end <= self.start:
            raise PolicyError("time window end must be after start")

    def to_json(self) -> dict:
        return {"type": "time_window", "start": self.start, "end": self.end}


@dataclass(frozen=True)
class Schema:
    """Allowed payload shape: dotted field paths and values of ``predicate`` entries."""

    allowed_fields: frozenset[str]
    allowed_predicates: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "allowed_fields", frozenset(self.allowed_fields))
        object.__setattr__(self, "allowed_predicates", frozenset(self.allowed_predicates))
        for item in self.allowed_fields | self.allowed_predicates:
            if not isinstance(item, str) or not item:
                raise PolicyError("schema entries must be non-empty strings")

    def to_json(self) -> dict:
        return {
            "type": "schema",
            "allowed_fields": sorted(self.allowed_fields),
            "allowed_predicates": sorted(self.allowed_predicates),
        }


Constraint = Union[Budget, Rate, TimeWindow, Schema]


def constraint_from_json(data: Any) -> Constraint:
    if not isinstance(data, dict):
        raise PolicyError("constraint must be an object")
    kind = data.get("type")
    try:
        if kind == "budget":
            return Budget(data["limit"], data["currency"], data["window_seconds"])
        if kind == "rate":
            return Rate(data["max_count"], data["window_seconds"])
        if kind == "time_window":
            return TimeWindow(data["start"], data["end"])
        if kind == "schema":
            fields_, preds = data.get("allowed_fields", []), data.get("allowed_predicates", [])
            if not isinstance(fields_, list) or not isinstance(preds, list):
                raise PolicyError("schema allowed_fields/allowed_predicates must be lists")
            return Schema(frozenset(fields_), frozenset(preds))
    except KeyError as exc:
        raise PolicyError(f"{kind} constraint missing field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise PolicyError(f"bad {kind} constraint: {exc}") from exc
    raise PolicyError(f"unknown constraint type {kind!r}")


@dataclass(frozen=True)
class Rule:
    effect: Effect
    resources: tuple[ResourcePattern, ...]
    actions: tuple[Action, ...]
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "effect", Effect(self.effect))
        object.__setattr__(self, "resources", tuple(self.resources))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.resources or not self.actions:
            raise PolicyError("a rule needs at least one resource and one action")

    def applies_to(self, resource: str, action: Action) -> bool:
        return any(a.covers(action) for a in self.actions) and any(p.matches(resource) for p in self.resources)

    def to_json(self) -> dict:
        return {
            "effect": self.effect.value,
            "resources": [str(p) for p in self.resources],
            "actions": [str(a) for a in self.actions],
            "constraints": [c.to_json() for c in self.constraints],
        }

    @classmethod
    def from_json(cls, data: Any) -> Rule:
        if not isinstance(data, dict):
            raise PolicyError("rule must be an object")
        try:
            effect = Effect(data["effect"])
            resources = data["resources"]
            actions = data["actions"]
            constraints = data.get("constraints", [])
        except (KeyError, ValueError) as exc:
            raise PolicyError(f"bad rule: {exc}") from exc
        if not all(isinstance(x, list) for x in (resources, actions, constraints)):
            raise PolicyError("rule resources/actions/constraints must be lists")
        try:
            patterns = tuple(ResourcePattern.parse(r) for r in resources)
        except PatternError as exc:
            raise PolicyError(str(exc)) from exc
        if not all(isinstance(a, str) for a in actions):
            raise PolicyError("actions must be strings")
        return cls(
            effect,
            patterns,
            tuple(Action.parse(a) for a in actions),
            tuple(constraint_from_json(c) for c in constraints),
        )


@dataclass(frozen=True)
class Policy:
    policy_id: str
    rules: tuple[Rule, ...] = ()
    default_effect: Effect = Effect.DENY

    def __post_init__(self) -> None:
        object.__setattr__(self, "default_effect", Effect(self.default_effect))
        object.__setattr__(self, "rules", tuple(self.rules))
        if not isinstance(self.policy_id, str) or not self.policy_id:
            raise PolicyError("policy_id must be a non-empty string")
        if self.default_effect is Effect.PERMIT:
            raise PolicyError("default_effect may not be permit")

    def to_json(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "default_effect": self.default_effect.value,
            "rules": [r.to_json() for r in self.rules],
        }

    @classmethod
    def from_json(cls, data: Any) -> Policy:
        if not isinstance(data, dict):
            raise PolicyError("policy must be an object")
        rules = data.get("rules", [])
        if not isinstance(rules, list):
            raise PolicyError("rules must be a list")
        try:
            default = Effect(data.get("default_effect", "deny"))
        except ValueError as exc:
            raise PolicyError(str(exc)) from exc
        return cls(data.get("policy_id", ""), tuple(Rule.from_json(r) for r in rules), default)


@dataclass(frozen=True)
class Money:
    value: int
    currency: str

    def __post_init__(self) -> None:
        _positive_int(self.value, "amount")
        if not isinstance(self.currency, str) or not _CURRENCY_RE.match(self.currency):
            raise PolicyError(f"currency must be 3 uppercase letters, got {self.currency!r}")


@dataclass(frozen=True)
class AccessRequest:
    resource: str
    action: Action
    timestamp: int
    amount: Money | None = None
    payload: Any = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.resource, str):
            raise PolicyError("request resource must be a URI string")
        if isinstance(self.action, str):
            object.__setattr__(self, "action", Action.parse(self.action))
        if (self.amount is not None) != (self.action.verb is Verb.PURCHASE):
            raise PolicyError("amount is required for purchase and forbidden otherwise")
        if self.action.verb is Verb.EXECUTE and self.action.qualifier is None:
            raise PolicyError("execute requests must name the command")
        object.__setattr__(self, "flags", tuple(self.flags))

    def to_json(self) -> dict:
        out: dict[str, Any] = {"resource": self.resource, "action": str(self.action), "timestamp": self.timestamp}
        if self.amount is not None:
            out["amount"] = {"value": self.amount.value, "currency": self.amount.currency}
        if self.payload is not None:
            out["payload"] = self.payload
        if self.flags:
            out["flags"] = list(self.flags)
        return out

    @classmethod
    def from_json(cls, data: Any, *, default_timestamp: int | None = None) -> AccessRequest:
        if not isinstance(data, dict):
            raise PolicyError("request must be an object")
        amount = data.get("amount")
        ts = data.get("timestamp", default_timestamp)
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise PolicyError("request timestamp must be an integer")
        try:
            return cls(
                resource=data["resource"],
                action=Action.parse(data["action"]),
                timestamp=ts,
                amount=Money(amount["value"], amount["currency"]) if amount is not None else None,
                payload=data.get("payload"),
                flags=tuple(data.get("flags", ())),
            )
        except (KeyError, TypeError) as exc:
            raise PolicyError(f"bad request: {exc}") from exc


@dataclass(frozen=True)
class Charge:
    """Usage to record if the decision it belongs to is carried out."""

    key: tuple[str, int, int]  # (policy_id, rule index, constraint index)
    kind: str  # "budget" | "rate"
    window_seconds: int
    at: int
    currency: str | None = None
    amount: int = 0


@dataclass(frozen=True)
class Decision:
    outcome: Effect
    matched_rules: tuple[int | None, ...] = ()
    reasons: tuple[str, ...] = ()
    charges: tuple[Charge, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", Effect(self.outcome))
        if self.outcome is not Effect.PERMIT and not self.reasons:
            raise PolicyError("non-permit decisions must carry a reason")

    @property
    def permitted(self) -> bool:
        return self.outcome is Effect.PERMIT

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "matched_rules": list(self.matched_rules),
            "reasons": list(self.reasons),
        }

    def summary(self) -> dict:
        return {"outcome": self.outcome.value, "reasons": list(self.reasons)}
