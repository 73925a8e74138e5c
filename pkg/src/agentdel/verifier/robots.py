"""robots.txt AgentBot groups and outbound request routing."""

from __future__ import annotations

from dataclasses import dataclass, replace
from urllib.parse import urlsplit, urlunsplit

from ..policy import AccessRequest

AGENT_UA = "agentbot"
ROBOTS_DISALLOWED = "RobotsDisallowed"


@dataclass(frozen=True)
class AgentDirectives:
    disallowed_paths: tuple[str, ...] = ()
    agent_interface_path: str | None = None

    def disallows(self, path: str) -> bool:
        path = path or "/"
        return any(path.startswith(p) for p in self.disallowed_paths)


def parse_agent_directives(robots_txt: str) -> AgentDirectives:
    """Collect the groups addressed to AgentBot.

    Consecutive User-agent lines open one group.  Malformed lines, relative
    paths and empty Disallow values are ignored.
    """
    disallowed: list[str] = []
    interface: str | None = None
    agents: list[str] = []
    in_rules = False
    for raw in robots_txt.splitlines():
        line = raw.split("#", 1)[0].strip()
        if ":" not in line:
            continue
        name, _, value = line.partition(":")
        name, value = name.strip().lower(), value.strip()
        if name == "user-agent":
            if in_rules:
                agents, in_rules = [], False
            agents.append(value.lower())
            continue
        in_rules = True
        if AGENT_UA not in agents:
            continue
        if name == "disallow" and value.startswith("/") and value not in disallowed:
            disallowed.append(value)
        elif name == "agent-interface" and value.startswith("/"):
            interface = value
    return AgentDirectives(tuple(disallowed), interface)


def route_outbound(req: AccessRequest, directives: AgentDirectives) -> AccessRequest:
    """Send disallowed HTTP(S) requests to the agent interface, or flag them.

    A flagged request is returned unchanged apart from the RobotsDisallowed
    flag; aborting is the caller's decision.
    """
    parts = urlsplit(req.resource)
    if parts.scheme not in ("http", "https") or not directives.disallows(parts.path):
        return req
    iface = directives.agent_interface_path
    if iface is not None and not parts.path.startswith(iface):
        return replace(req, resource=urlunsplit((parts.scheme, parts.netloc, iface, parts.query, "")))
    if iface is not None:
        return req
    return replace(req, flags=tuple(dict.fromkeys((*req.flags, ROBOTS_DISALLOWED))))
