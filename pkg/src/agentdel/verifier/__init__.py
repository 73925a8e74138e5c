"""Resource-server side: authorization of presented delegation bundles."""

from .approval import ApprovalHandler, ApprovalRequest, CliPrompt, Scripted, auto_approve, auto_deny
from .core import UsageStore, Verifier, VerifierConfig
from .http import serve_verifier
from .robots import ROBOTS_DISALLOWED, AgentDirectives, parse_agent_directives, route_outbound

__all__ = [
    "ROBOTS_DISALLOWED",
    "AgentDirectives",
    "ApprovalHandler",
    "ApprovalRequest",
    "CliPrompt",
    "Scripted",
    "UsageStore",
    "Verifier",
    "VerifierConfig",
    "auto_approve",
    "auto_deny",
    "parse_agent_directives",
    "route_outbound",
    "serve_verifier",
]
