"""Resource patterns: ``scheme://host/seg/...`` globs.

Path segments are literals, ``*`` (exactly one segment) or ``**`` (zero or
more segments, at most once per pattern).  The host may start with ``*.``,
which matches one or more leading DNS labels.  Hosts compare
case-insensitively, everything else is case-sensitive.

Containment and overlap between two patterns are decided exactly by running
the two segment automata side by side.  Only equality against literals
matters to either automaton, so the infinite segment alphabet collapses to
the literals of both patterns plus one fresh symbol.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from urllib.parse import urlsplit

ONE = "*"
ANY = "**"

_HOST_RE = re.compile(r"^(?:\*\.)?[a-z0-9](?:[a-z0-9-]*[a-z0-9])?(?:\.[a-z0-9](?:[a-z0-9-]*[a-z0-9])?)*(?::\d{1,5})?$")

_NETLOC_RE = re.compile(r"^(?:\*\.)?[A-Za-z0-9._~\-]*(?::\d{1,5})?$")


class PatternError(ValueError):
    code = "InvalidPattern"


@functools.lru_cache(maxsize=8192)
def split_uri(uri: str) -> tuple[str, str, tuple[str, ...]]:
    """Split a concrete URI into (scheme, lowercased host, path segments).

    Empty segments are dropped, so ``/a/b/`` and ``/a//b`` both give ``("a", "b")``.
    Query and fragment are ignored.
    """
    if not isinstance(uri, str) or "://" not in uri:
        raise PatternError(f"not an absolute URI: {uri!r}")
    try:
        parts = urlsplit(uri)
    except ValueError as exc:
        raise PatternError(f"malformed URI {uri!r}: {exc}") from exc
    if not parts.scheme:
        raise PatternError(f"URI has no scheme: {uri!r}")
    if not _NETLOC_RE.match(parts.netloc):
        raise PatternError(f"malformed host in URI {uri!r}")
    segments = tuple(s for s in parts.path.split("/") if s)
    return parts.scheme.lower(), parts.netloc.lower(), segments


def _split_port(host: str) -> tuple[str, str]:
    name, sep, port = host.rpartition(":")
    if sep and port.isdigit():
        return name, port
    return host, ""


def host_matches(pattern: str, host: str) -> bool:
    pname, pport = _split_port(pattern)
    hname, hport = _split_port(host)
    if pport != hport:
        return False
    if pname.startswith("*."):
        suffix = pname[1:]
        return hname.endswith(suffix) and len(hname) > len(suffix) and not hname[: -len(suffix)].endswith(".")
    return pname == hname


def host_subsumes(a: str, b: str) -> bool:
    """Every host matched by ``b`` is matched by ``a``."""
    aname, aport = _split_port(a)
    bname, bport = _split_port(b)
    if aport != bport:
        return False
    if aname == bname:
        return True
    if not aname.startswith("*."):
        return False
    if bname.startswith("*."):
        return bname.endswith(aname[1:])
    return host_matches(a, b)


def host_overlaps(a: str, b: str) -> bool:
    aname, aport = _split_port(a)
    bname, bport = _split_port(b)
    if aport != bport:
        return False
    aw, bw = aname.startswith("*."), bname.startswith("*.")
    if aw and bw:
        return aname.endswith(bname[1:]) or bname.endswith(aname[1:])
    if aw:
        return host_matches(a, b)
    if bw:
        return host_matches(b, a)
    return aname == bname


def _match_fixed(pattern: tuple[str, ...], segments: tuple[str, ...]) -> bool:
    return all(p == ONE or p == s for p, s in zip(pattern, segments))


def path_matches(pattern: tuple[str, ...], segments: tuple[str, ...]) -> bool:
    if ANY not in pattern:
        return len(pattern) == len(segments) and _match_fixed(pattern, segments)
    k = pattern.index(ANY)
    head, tail = pattern[:k], pattern[k + 1 :]
    if len(segments) < len(head) + len(tail):
        return False
    return _match_fixed(head, segments[: len(head)]) and _match_fixed(tail, segments[len(segments) - len(tail) :])


class _Fresh:
    """A segment equal to no literal in either pattern."""

    __slots__ = ()


_FRESH = _Fresh()


class _SegmentNFA:
    # State i means "the first i pattern tokens are consumed".  State sets are bitmasks.
    __slots__ = ("tokens", "n", "any_at", "accept")

    def __init__(self, tokens: tuple[str, ...]) -> None:
        self.tokens = tokens
        self.n = len(tokens)
        self.any_at = tokens.index(ANY) if ANY in tokens else -1
        self.accept = 1 << self.n

    def closure(self, mask: int) -> int:
        if self.any_at >= 0 and mask >> self.any_at & 1:
            mask |= 1 << (self.any_at + 1)
        return mask

    def start(self) -> int:
        return self.closure(1)

    def step(self, mask: int, symbol: object) -> int:
        out = 0
        i = 0
        while mask >> i:
            if mask >> i & 1 and i < self.n:
                tok = self.tokens[i]
                if tok == ANY:
                    out |= 1 << i
                elif tok == ONE or tok == symbol:
                    out |= 1 << (i + 1)
            i += 1
        return self.closure(out)


def _alphabet(a: tuple[str, ...], b: tuple[str, ...]) -> list[object]:
    lits = {t for t in a + b if t not in (ONE, ANY)}
    return [*sorted(lits), _FRESH]


def path_subsumes(a: tuple[str, ...], b: tuple[str, ...]) -> bool:
    """L(b) is a subset of L(a) over path segment sequences."""
    if a == b:
        return True
    na, nb = _SegmentNFA(a), _SegmentNFA(b)
    sigma = _alphabet(a, b)
    start = (nb.start(), na.start())
    seen = {start}
    todo = [start]
    while todo:
        mb, ma = todo.pop()
        if mb & nb.accept and not ma & na.accept:
            return False
        for sym in sigma:
            nxt_b = nb.step(mb, sym)
            if not nxt_b:
                continue
            pair = (nxt_b, na.step(ma, sym))
            if pair not in seen:
                seen.add(pair)
                todo.append(pair)
    return True


def path_overlaps(a: tuple[str, ...], b: tuple[str, ...]) -> bool:
    """Some segment sequence is matched by both patterns."""
    na, nb = _SegmentNFA(a), _SegmentNFA(b)
    sigma = _alphabet(a, b)
    start = (na.start(), nb.start())
    seen = {start}
    todo = [start]
    while todo:
        ma, mb = todo.pop()
        if ma & na.accept and mb & nb.accept:
            return True
        for sym in sigma:
            pair = (na.step(ma, sym), nb.step(mb, sym))
            if pair[0] and pair[1] and pair not in seen:
                seen.add(pair)
                todo.append(pair)
    return False


@dataclass(frozen=True)
class ResourcePattern:
    scheme: str
    host: str
    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.segments.count(ANY) > 1:
            raise PatternError("'**' may appear at most once in a pattern")
        if self.host and not _HOST_RE.match(self.host):
            raise PatternError(f"invalid host pattern {self.host!r}")

    @classmethod
    def parse(cls, text: str) -> ResourcePattern:
        scheme, host, segments = split_uri(text)
        return cls(scheme, host, segments)

    def __str__(self) -> str:
        return f"{self.scheme}://{self.host}/" + "/".join(self.segments)

    def matches(self, uri: str) -> bool:
        """Raises PatternError for a malformed URI."""
        scheme, host, segments = split_uri(uri)
        return scheme == self.scheme and host_matches(self.host, host) and path_matches(self.segments, segments)


def match_pattern(p: ResourcePattern, uri: str) -> bool:
    return p.matches(uri)


def pattern_subsumes(a: ResourcePattern, b: ResourcePattern) -> bool:
    """True iff every concrete URI matched by ``b`` is matched by ``a``."""
    return a.scheme == b.scheme and host_subsumes(a.host, b.host) and path_subsumes(a.segments, b.segments)


def patterns_overlap(a: ResourcePattern, b: ResourcePattern) -> bool:
    return a.scheme == b.scheme and host_overlaps(a.host, b.host) and path_overlaps(a.segments, b.segments)
