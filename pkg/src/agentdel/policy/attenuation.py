"""Conservative check that one policy only narrows another.

``is_attenuation_of(child, parent)`` is sound, not complete: when it returns
True, every request the child permits (from fresh usage) is also permitted
by the parent.  It may return False for policies that are in fact narrower
but whose narrowing it cannot prove rule by rule.
"""

from __future__ import annotations

from .model import Action, Budget, Constraint, Effect, Policy, Rate, Rule, Schema, TimeWindow
from .patterns import ResourcePattern, pattern_subsumes, patterns_overlap


def _at_least_as_strict(child: Constraint, parent: Constraint) -> bool:
    if isinstance(parent, Budget):
        return (
            isinstance(child, Budget)
            and child.currency == parent.currency
            and child.limit <= parent.limit
            and child.window_seconds >= parent.window_seconds
        )
    if isinstance(parent, Rate):
        return (
            isinstance(child, Rate)
            and child.max_count <= parent.max_count
            and child.window_seconds >= parent.window_seconds
        )
    if isinstance(parent, TimeWindow):
        return isinstance(child, TimeWindow) and child.start >= parent.start and child.end <= parent.end
    if isinstance(parent, Schema):
        return (
            isinstance(child, Schema)
            and child.allowed_fields <= parent.allowed_fields
            and child.allowed_predicates <= parent.allowed_predicates
        )
    return False


def _constraints_narrower(child: Rule, parent: Rule) -> bool:
    return all(any(_at_least_as_strict(c, p) for c in child.constraints) for p in parent.constraints)


def _covered(pattern: ResourcePattern, action: Action, child: Rule, parent: Policy) -> bool:
    for rule in parent.rules:
        if rule.effect is not Effect.PERMIT:
            continue
        if (
            any(pattern_subsumes(p, pattern) for p in rule.resources)
            and any(a.covers(action) for a in rule.actions)
            and _constraints_narrower(child, rule)
        ):
            return True
    return False


def _actions_overlap(a: Action, b: Action) -> bool:
    return a.verb is b.verb and (a.qualifier is None or b.qualifier is None or a.qualifier == b.qualifier)


def _hits_parent_deny(pattern: ResourcePattern, action: Action, parent: Policy) -> bool:
    return any(
        rule.effect is Effect.DENY
        and any(_actions_overlap(action, a) for a in rule.actions)
        and any(patterns_overlap(pattern, p) for p in rule.resources)
        for rule in parent.rules
    )


def is_attenuation_of(child: Policy, parent: Policy) -> bool:
    for rule in child.rules:
        if rule.effect is not Effect.PERMIT:
            continue
        for pattern in rule.resources:
            for action in rule.actions:
                if not _covered(pattern, action, rule, parent) or _hits_parent_deny(pattern, action, parent):
                    return False
    return True
