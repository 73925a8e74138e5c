"""Structured permission language: patterns, policies, evaluation, attenuation."""

from .attenuation import is_attenuation_of
from .engine import UsageEntry, UsageState, apply_usage, check_schema, evaluate, evaluate_chain
from .model import (
    ALL_ACTIONS,
    AccessRequest,
    Action,
    Budget,
    Charge,
    Constraint,
    Decision,
    Effect,
    Money,
    Policy,
    PolicyError,
    Rate,
    Rule,
    Schema,
    TimeWindow,
    Verb,
    constraint_from_json,
)
from .patterns import PatternError, ResourcePattern, match_pattern, pattern_subsumes, patterns_overlap

__all__ = [
    "ALL_ACTIONS",
    "AccessRequest",
    "Action",
    "Budget",
    "Charge",
    "Constraint",
    "Decision",
    "Effect",
    "Money",
    "PatternError",
    "Policy",
    "PolicyError",
    "Rate",
    "ResourcePattern",
    "Rule",
    "Schema",
    "TimeWindow",
    "UsageEntry",
    "UsageState",
    "Verb",
    "apply_usage",
    "check_schema",
    "constraint_from_json",
    "evaluate",
    "evaluate_chain",
    "is_attenuation_of",
    "match_pattern",
    "pattern_subsumes",
    "patterns_overlap",
]
