"""CNL statements to Policy documents, review rendering and human approval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Protocol, Sequence

from ..audit import AuditLog
from ..canonical import canonical_bytes, sha256_hex
from ..crypto import Ed25519PrivateKey, Ed25519PublicKey, b64url_decode, b64url_encode, load_public_key, verify_signature
from ..policy import (
    ALL_ACTIONS,
    Budget,
    Constraint,
    Effect,
    Policy,
    PolicyError,
    Rate,
    ResourcePattern,
    Rule,
    TimeWindow,
    Verb,
    pattern_subsumes,
)
from ..tokens import BadSignature, GlobalId
from .cnl import WINDOWS, CnlStatement, parse_cnl


class CompileError(ValueError):
    code = "CompileError"


class DuplicateLabel(CompileError):
    code = "DuplicateLabel"


class UnresolvedLabels(CompileError):
    code = "UnresolvedLabels"


class UncompiledDraft(CompileError):
    code = "UncompiledDraft"


class ApprovalMismatch(CompileError):
    code = "ApprovalMismatch"


class ResourceCatalog:
    """Labels (case-insensitive, unique) mapped to resource patterns."""

    def __init__(self, entries: Mapping[str, Sequence[str | ResourcePattern]] | None = None) -> None:
        self._entries: dict[str, tuple[str, tuple[ResourcePattern, ...]]] = {}
        for label, patterns in (entries or {}).items():
            self.add(label, patterns)

    def add(self, label: str, patterns: Sequence[str | ResourcePattern]) -> None:
        key = label.casefold()
        if key in self._entries:
            raise DuplicateLabel(f"label {label!r} is already in the catalog")
        parsed = tuple(p if isinstance(p, ResourcePattern) else ResourcePattern.parse(p) for p in patterns)
        if not parsed:
            raise CompileError(f"label {label!r} resolves to no patterns")
        self._entries[key] = (label, parsed)

    def resolve(self, label: str) -> tuple[ResourcePattern, ...] | None:
        entry = self._entries.get(label.casefold())
        return entry[1] if entry else None

    def labels(self) -> list[str]:
        return [name for name, _ in self._entries.values()]

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> list[tuple[str, tuple[ResourcePattern, ...]]]:
        return list(self._entries.values())

    @classmethod
    def from_json(cls, data: Mapping[str, Sequence[str]]) -> ResourceCatalog:
        if not isinstance(data, Mapping):
            raise CompileError("catalog must be a JSON object of label -> [pattern]")
        return cls(data)

    @classmethod
    def load(cls, path: str) -> ResourceCatalog:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {name: [str(p) for p in pats] for name, pats in self._entries.values()}


@dataclass(frozen=True)
class CompileDefaults:
    policy_id: str | None = None
    default_effect: Effect = Effect.DENY


@dataclass(frozen=True)
class UnresolvedLabel:
    label: str
    line: int
    column: int


@dataclass(frozen=True)
class PolicyDraft:
    """``compiled`` is set iff every label resolved.  ``partial`` always holds
    the rules that did resolve, so a review can still show them."""

    statements: tuple[CnlStatement, ...]
    compiled: Policy | None
    source_text: str
    unresolved_labels: tuple[UnresolvedLabel, ...] = ()
    partial: Policy | None = None
    catalog: ResourceCatalog | None = field(default=None, compare=False)


def _rule_for(stmt: CnlStatement, patterns: tuple[ResourcePattern, ...]) -> Rule:
    return Rule(stmt.effect, patterns, stmt.actions, stmt.constraints)


def compile(  # noqa: A001 - the operation's public name
    statements: Sequence[CnlStatement],
    catalog: ResourceCatalog,
    defaults: CompileDefaults | None = None,
    source_text: str = "",
) -> PolicyDraft:
    """Resolve labels and build rules in source order.

    Unresolved labels are collected, never guessed.  Without an explicit
    policy id the id is derived from the rules, so identical inputs give
    byte-identical documents.
    """
    defaults = defaults or CompileDefaults()
    rules: list[Rule] = []
    unresolved: list[UnresolvedLabel] = []
    for stmt in statements:
        if stmt.pattern is not None:
            rules.append(_rule_for(stmt, (stmt.pattern,)))
            continue
        patterns = catalog.resolve(stmt.label or "")
        if patterns is None:
            unresolved.append(UnresolvedLabel(stmt.label or "", stmt.line, stmt.column))
        else:
            rules.append(_rule_for(stmt, patterns))
    policy_id = defaults.policy_id
    if policy_id is None:
        body = canonical_bytes({"default_effect": Effect(defaults.default_effect).value,
                                "rules": [r.to_json() for r in rules]})
        policy_id = "cnl-" + sha256_hex(body)[:12]
    partial = Policy(policy_id, tuple(rules), defaults.default_effect)
    return PolicyDraft(
        statements=tuple(statements),
        compiled=None if unresolved else partial,
        source_text=source_text,
        unresolved_labels=tuple(unresolved),
        partial=partial,
        catalog=catalog,
    )


def compile_text(text: str, catalog: ResourceCatalog, defaults: CompileDefaults | None = None) -> PolicyDraft:
    return compile(parse_cnl(text), catalog, defaults, text)


# -- rendering ---------------------------------------------------------------

_WINDOW_NAMES = {v: k for k, v in WINDOWS.items()}
_EFFECT_WORDS = {Effect.PERMIT: "PERMIT", Effect.DENY: "DENY", Effect.REQUIRE_APPROVAL: "ASK BEFORE"}


def format_money(minor: int) -> str:
    return f"{minor // 100}.{minor % 100:02d}"


def _window_name(seconds: int) -> str:
    return _WINDOW_NAMES.get(seconds, f"{seconds}s")


def _iso(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def describe_constraint(c: Constraint) -> str:
    if isinstance(c, Budget):
        return f"LIMIT {format_money(c.limit)} {c.currency} PER {_window_name(c.window_seconds)}"
    if isinstance(c, Rate):
        return f"AT MOST {c.max_count} PER {_window_name(c.window_seconds)}"
    if isinstance(c, TimeWindow):
        return f"UNTIL {_iso(c.end)}" if c.start == 0 else f"FROM {_iso(c.start)} UNTIL {_iso(c.end)}"
    return f"SCHEMA fields={','.join(c.allowed_fields)} predicates={','.join(c.allowed_predicates)}"


def _actions_text(rule: Rule) -> str:
    if set(rule.actions) == set(ALL_ACTIONS):
        return "all"
    return ",".join(str(a) for a in rule.actions)


def describe_rule(rule: Rule) -> str:
    parts = [_EFFECT_WORDS[rule.effect], _actions_text(rule), "ON", ", ".join(str(p) for p in rule.resources)]
    parts.extend(describe_constraint(c) for c in rule.constraints)
    return " ".join(parts)


def _broad_hits(rule: Rule, catalog: ResourceCatalog) -> list[str]:
    hits = []
    for label, patterns in catalog.items():
        if any(pattern_subsumes(rp, p) for rp in rule.resources for p in patterns):
            hits.append(label)
    return hits


def render_for_review(draft: PolicyDraft, broad_threshold: int = 3) -> str:
    """Deterministic plain-text summary: one line per rule, then the default.

    Warning blocks follow for unresolved labels and for rules covering more
    than ``broad_threshold`` catalog entries.
    """
    policy = draft.compiled or draft.partial
    if policy is None:
        raise UncompiledDraft("draft has not been compiled")
    lines = [describe_rule(r) for r in policy.rules]
    lines.append(f"DEFAULT: {policy.default_effect.value}")
    if draft.unresolved_labels:
        lines.append("UNRESOLVED:")
        lines.extend(f"  - {u.label} (line {u.line}, column {u.column})" for u in draft.unresolved_labels)
    if draft.catalog is not None:
        broad = []
        for i, rule in enumerate(policy.rules):
            hits = _broad_hits(rule, draft.catalog)
            if len(hits) > broad_threshold:
                broad.append(f"  - rule {i} covers {len(hits)} catalog entries: {', '.join(hits)}")
        if broad:
            lines.append("BROAD:")
            lines.extend(broad)
    return "\n".join(lines)


def to_cnl(policy: Policy) -> str:
    """Pretty-print a policy back into CNL, one statement per resource pattern.

    Raises PolicyError for content the grammar cannot express (schema
    constraints, time windows not starting at 0, exotic command names).
    """
    out = []
    effect_words = {Effect.PERMIT: "allow", Effect.DENY: "deny", Effect.REQUIRE_APPROVAL: "ask before"}
    for rule in policy.rules:
        if set(rule.actions) == set(ALL_ACTIONS):
            actions = "all"
        else:
            names = []
            for a in rule.actions:
                if a.qualifier is not None and not a.qualifier.replace("-", "").replace("_", "").isalnum():
                    raise PolicyError(f"command {a.qualifier!r} cannot be written in CNL")
                if a.qualifier is not None and not (a.qualifier[0].isalpha() or a.qualifier[0] == "_"):
                    raise PolicyError(f"command {a.qualifier!r} cannot be written in CNL")
                names.append(a.verb.value if a.qualifier is None else f"{a.verb.value} {a.qualifier}")
            actions = ", ".join(names)
        clauses = []
        for c in rule.constraints:
            if rule.effect is not Effect.PERMIT:
                raise PolicyError("constraints on non-permit rules cannot be written in CNL")
            if isinstance(c, Budget):
                if c.window_seconds not in _WINDOW_NAMES or not any(a.verb is Verb.PURCHASE for a in rule.actions):
                    raise PolicyError("budget cannot be written in CNL")
                clauses.append(f"limit {format_money(c.limit)} {c.currency} per {_WINDOW_NAMES[c.window_seconds]}")
            elif isinstance(c, Rate):
                if c.window_seconds not in _WINDOW_NAMES:
                    raise PolicyError("rate window cannot be written in CNL")
                clauses.append(f"at most {c.max_count} per {_WINDOW_NAMES[c.window_seconds]}")
            elif isinstance(c, TimeWindow) and c.start == 0:
                clauses.append(f"until {c.end}")
            else:
                raise PolicyError(f"constraint {c.to_json()} cannot be written in CNL")
        tail = "".join(" " + cl for cl in clauses)
        for p in rule.resources:
            # a space before the period keeps a pattern literal unambiguous
            out.append(f"{effect_words[rule.effect]} {actions} on {p}{tail} .")
    return "\n".join(out)


# -- approval ----------------------------------------------------------------


def draft_hash(policy: Policy) -> str:
    return sha256_hex(canonical_bytes(policy.to_json()))


@dataclass(frozen=True)
class Approval:
    approver: str
    draft_hash: str
    approved_at: int
    signature: str = ""

    def signed_bytes(self) -> bytes:
        return canonical_bytes({"approver": self.approver, "draft_hash": self.draft_hash, "approved_at": self.approved_at})

    def to_json(self) -> dict:
        return {"approver": self.approver, "draft_hash": self.draft_hash,
                "approved_at": self.approved_at, "signature": self.signature}

    @classmethod
    def from_json(cls, data: Mapping) -> Approval:
        try:
            return cls(str(data["approver"]), str(data["draft_hash"]), int(data["approved_at"]), str(data["signature"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CompileError(f"malformed approval: {exc}") from exc


def approve(
    draft: PolicyDraft,
    approver_key: Ed25519PrivateKey,
    approver_id: str | GlobalId,
    now: int,
    audit: AuditLog | None = None,
) -> Approval:
    if draft.unresolved_labels:
        raise UnresolvedLabels("unresolved labels: " + ", ".join(u.label for u in draft.unresolved_labels))
    if draft.compiled is None:
        raise UncompiledDraft("draft has not been compiled")
    approver = str(GlobalId.parse(str(approver_id)))
    unsigned = Approval(approver, draft_hash(draft.compiled), int(now))
    approval = Approval(approver, unsigned.draft_hash, unsigned.approved_at,
                        b64url_encode(approver_key.sign(unsigned.signed_bytes())))
    if audit is not None:
        audit.append("approve", approver, [approval.draft_hash],
                     details={"policy_id": draft.compiled.policy_id}, timestamp=int(now))
    return approval


def activate(policy: Policy, approval: Approval, approver_public_key: Ed25519PublicKey | str) -> Policy:
    """Return ``policy`` if ``approval`` is a valid signature over exactly it."""
    try:
        sig = b64url_decode(approval.signature)
    except ValueError as exc:
        raise BadSignature("approval signature is not base64url") from exc
    if not verify_signature(load_public_key(approver_public_key), sig, approval.signed_bytes()):
        raise BadSignature("approval signature does not verify")
    if approval.draft_hash != draft_hash(policy):
        raise ApprovalMismatch("approval was given for a different policy")
    return policy


# -- translator boundary -----------------------------------------------------


class Translator(Protocol):
    def translate(self, text: str) -> str: ...


class IdentityTranslator:
    """Input must already be CNL; external translators may call a model."""

    def translate(self, text: str) -> str:
        return text


def translate_freeform(text: str, translator: Translator | None = None) -> str:
    return (translator or IdentityTranslator()).translate(text)
