"""Lexer and recursive-descent parser for the permission CNL.

Grammar::

    policy     := statement+ ;
    statement  := effect actionlist "on" resource constraint* "." ;
    effect     := "allow" | "deny" | "ask before" ;
    actionlist := action ("," action)* | "all" ;
    action     := "read" | "write" | "execute" IDENT? | "purchase" | "message" ;
    resource   := LABEL | PATTERN_LITERAL ;
    constraint := "limit" MONEY CUR "per" WINDOW
                | "at most" INT "per" WINDOW
                | "until" TIMESTAMP ;
    WINDOW     := "minute" | "hour" | "day" ;

Keywords are lowercase.  ``#`` starts a comment that runs to end of line.
Constraints are caveats on ``allow`` statements; ``limit`` additionally needs
a purchase action.  Money is converted to minor units (1 unit = 100).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation

from ..policy import ALL_ACTIONS, Action, Budget, Constraint, Effect, Rate, ResourcePattern, TimeWindow, Verb
from ..policy.patterns import PatternError

WINDOWS = {"minute": 60, "hour": 3600, "day": 86400}
EFFECT_WORDS = ("allow", "deny", "ask")
VERB_WORDS = tuple(v.value for v in Verb)
CONSTRAINT_WORDS = ("limit", "at", "until")


class ParseError(ValueError):
    """First offending token, with 1-based line and column."""

    def __init__(self, code: str, message: str, line: int, column: int, token: str = "") -> None:
        super().__init__(f"{code} at {line}:{column}: {message}")
        self.code = code
        self.line = line
        self.column = column
        self.token = token

    def to_json(self) -> dict:
        return {"code": self.code, "message": str(self), "line": self.line, "column": self.column, "token": self.token}


@dataclass(frozen=True)
class Token:
    kind: str  # word, pattern, number, timestamp, comma, dot, eof
    text: str
    line: int
    column: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+) | (?P<nl>\n) | (?P<comment>\#[^\n]*)
  | (?P<pattern>[A-Za-z][A-Za-z0-9+.\-]*://\S*)
  | (?P<timestamp>\d{4}-\d{2}-\d{2}(?:T\d{2}:\d{2}(?::\d{2})?Z)?)
  | (?P<number>\d+(?:\.\d+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_\-]*)
  | (?P<comma>,) | (?P<dot>\.)
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        column = pos - line_start + 1
        if m is None:
            raise ParseError("UnexpectedCharacter", f"unexpected character {text[pos]!r}", line, column, text[pos])
        kind = m.lastgroup
        value = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "pattern" and value.endswith("."):
            # a trailing period closes the statement, it is not part of the URL
            tokens.append(Token("pattern", value[:-1], line, column))
            tokens.append(Token("dot", ".", line, column + len(value) - 1))
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, value, line, column))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


@dataclass(frozen=True)
class CnlStatement:
    effect: Effect
    actions: tuple[Action, ...]
    all_actions: bool
    label: str | None
    pattern: ResourcePattern | None
    constraints: tuple[Constraint, ...]
    line: int
    column: int

    @property
    def resource_text(self) -> str:
        return self.label if self.label is not None else str(self.pattern)


def parse_money(text: str) -> int:
    """Decimal amount to minor units; at most two fraction digits."""
    try:
        amount = Decimal(text)
    except InvalidOperation as exc:
        raise ValueError(f"not an amount: {text!r}") from exc
    if amount.as_tuple().exponent < -2:
        raise ValueError("amounts take at most two fraction digits")
    minor = int(amount * 100)
    if minor <= 0:
        raise ValueError("amount must be positive")
    return minor


def parse_timestamp(text: str) -> int:
    if text.isdigit():
        return int(text)
    if "T" not in text:
        text += "T00:00:00Z"
    if text.count(":") == 1:
        text = text[:-1] + ":00Z"
    return int(datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc).timestamp())


class _Parser:
    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.i = 0

    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        self.i += 1
        return tok

    def fail(self, code: str, message: str, tok: Token) -> ParseError:
        return ParseError(code, message, tok.line, tok.column, tok.text)

    def unexpected(self, tok: Token, wanted: str) -> ParseError:
        if tok.kind == "eof":
            return self.fail("UnexpectedEnd", f"input ended, expected {wanted}", tok)
        return self.fail("UnexpectedToken", f"expected {wanted}, got {tok.text!r}", tok)

    def expect_word(self, word: str) -> Token:
        tok = self.next()
        if tok.kind != "word" or tok.text != word:
            raise self.unexpected(tok, repr(word))
        return tok

    def parse(self) -> list[CnlStatement]:
        if self.peek().kind == "eof":
            raise self.fail("EmptyInput", "no statements", self.peek())
        out = []
        while self.peek().kind != "eof":
            out.append(self.statement())
        return out

    def statement(self) -> CnlStatement:
        start = self.next()
        if start.kind != "word":
            raise self.unexpected(start, "a statement ('allow', 'deny' or 'ask before')")
        if start.text == "allow":
            effect = Effect.PERMIT
        elif start.text == "deny":
            effect = Effect.DENY
        elif start.text == "ask":
            self.expect_word("before")
            effect = Effect.REQUIRE_APPROVAL
        elif start.text in CONSTRAINT_WORDS:
            raise self.fail("DanglingConstraint", f"constraint {start.text!r} outside a statement", start)
        else:
            raise self.fail("UnknownKeyword", f"unknown effect {start.text!r}", start)

        actions, all_actions = self.actionlist()
        on = self.next()
        if on.kind != "word" or on.text != "on":
            raise self.unexpected(on, "'on'")

        res = self.next()
        label = pattern = None
        if res.kind == "pattern":
            try:
                pattern = ResourcePattern.parse(res.text)
            except PatternError as exc:
                raise self.fail("InvalidPattern", str(exc), res) from exc
        elif res.kind == "word":
            label = res.text
        else:
            raise self.unexpected(res, "a resource label or pattern")

        constraints = []
        while self.peek().kind == "word" and self.peek().text in CONSTRAINT_WORDS:
            kw = self.peek()
            c = self.constraint()
            if effect is not Effect.PERMIT:
                raise self.fail("DanglingConstraint", f"{kw.text!r} only applies to 'allow' statements", kw)
            if isinstance(c, Budget) and not any(a.verb is Verb.PURCHASE for a in actions):
                raise self.fail("DanglingConstraint", "'limit' needs a purchase action", kw)
            constraints.append(c)

        end = self.next()
        if end.kind != "dot":
            if end.kind == "word":
                raise self.fail("UnknownKeyword", f"unknown keyword {end.text!r}", end)
            raise self.unexpected(end, "'.'")
        return CnlStatement(effect, actions, all_actions, label, pattern, tuple(constraints), start.line, start.column)

    def actionlist(self) -> tuple[tuple[Action, ...], bool]:
        if self.peek().kind == "word" and self.peek().text == "all":
            self.next()
            return ALL_ACTIONS, True
        actions: list[Action] = []
        while True:
            tok = self.next()
            if tok.kind != "word":
                raise self.unexpected(tok, "an action")
            if tok.text == "all":
                raise self.fail("UnexpectedToken", "'all' cannot be combined with other actions", tok)
            if tok.text not in VERB_WORDS:
                raise self.fail("UnknownKeyword", f"unknown action {tok.text!r}", tok)
            qualifier = None
            if tok.text == "execute" and self.peek().kind == "word" and self.peek().text != "on":
                qualifier = self.next().text
            actions.append(Action(Verb(tok.text), qualifier))
            if self.peek().kind != "comma":
                return tuple(actions), False
            self.next()

    def window(self) -> int:
        self.expect_word("per")
        tok = self.next()
        if tok.kind != "word":
            raise self.unexpected(tok, "'minute', 'hour' or 'day'")
        if tok.text not in WINDOWS:
            raise self.fail("UnknownKeyword", f"unknown window {tok.text!r}", tok)
        return WINDOWS[tok.text]

    def constraint(self) -> Constraint:
        kw = self.next()
        if kw.text == "limit":
            amount = self.next()
            if amount.kind != "number":
                raise self.unexpected(amount, "an amount")
            try:
                minor = parse_money(amount.text)
            except ValueError as exc:
                raise self.fail("InvalidMoney", str(exc), amount) from exc
            cur = self.next()
            if cur.kind != "word" or not re.fullmatch(r"[A-Z]{3}", cur.text):
                raise self.fail("InvalidCurrency", "currency must be a 3-letter uppercase code", cur)
            return Budget(minor, cur.text, self.window())
        if kw.text == "at":
            self.expect_word("most")
            count = self.next()
            if count.kind != "number":
                raise self.unexpected(count, "a count")
            if not count.text.isdigit() or int(count.text) <= 0:
                raise self.fail("InvalidNumber", "count must be a positive integer", count)
            return Rate(int(count.text), self.window())
        tok = self.next()
        if tok.kind not in ("timestamp", "number"):
            raise self.unexpected(tok, "a timestamp")
        try:
            end = parse_timestamp(tok.text)
            return TimeWindow(0, end)
        except ValueError as exc:
            raise self.fail("InvalidTimestamp", str(exc), tok) from exc


def parse_cnl(text: str) -> list[CnlStatement]:
    """Statements in source order; raises ParseError at the first bad token."""
    return _Parser(tokenize(text)).parse()
