from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

import pytest
from hypothesis import HealthCheck, settings

from agentdel.audit import AuditLog
from agentdel.crypto import generate_signing_key, public_key_hex
from agentdel.harness.clock import LogicalClock
from agentdel.policy import Policy
from agentdel.provider import Provider, ProviderConfig, UserEntry
from agentdel.tokens import TrustStore, build_delegation

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

T0 = 1_700_000_000


def seeded_key(n: int):
    return generate_signing_key(bytes([n]) * 32)


def make_provider(host: str = "op1.test", clock=None, seed: int = 7, **overrides) -> Provider:
    users = {
        name: UserEntry(name, hashlib.sha256(pw.encode()).hexdigest())
        for name, pw in {"alice": "alice-pw", "bob": "bob-pw"}.items()
    }
    cfg = ProviderConfig(
        issuer_host=host,
        signing_key_seed=(bytes([seed]) * 32).hex(),
        pairwise_salt="aa55",
        users=users,
        max_user_token_lifetime=overrides.pop("max_user_token_lifetime", 86400),
        max_agent_token_lifetime=overrides.pop("max_agent_token_lifetime", 86400),
        **overrides,
    )
    clock = clock or LogicalClock(T0)
    rng = random.Random(seed)
    return Provider(cfg, clock=clock, secret_source=rng.randbytes, audit=AuditLog(clock=clock))


READ_DOCS = {
    "policy_id": "read-docs",
    "default_effect": "deny",
    "rules": [{"effect": "permit", "resources": ["https://docs.example/**"], "actions": ["read"]}],
}


@dataclass
class World:
    """One provider, one user (alice) and two registered agents."""

    clock: LogicalClock
    provider: Provider
    user_key: object
    agent_key: object
    user: object
    agent: object
    other_agent: object
    trust: TrustStore
    extras: dict = field(default_factory=dict)

    def delegate(self, policy=READ_DOCS, window=(0, 3600), agent=None, **kw):
        now = self.clock()
        pol = policy if isinstance(policy, Policy) else Policy.from_json(policy)
        return build_delegation(self.user, agent or self.agent, pol, (now + window[0], now + window[1]),
                                self.user_key, **kw)


def build_world() -> World:
    clock = LogicalClock(T0)
    p = make_provider(clock=clock)
    user_key, agent_key = seeded_key(1), seeded_key(2)
    user = p.issue_user_token({"username": "alice", "password": "alice-pw"}, public_key_hex(user_key))
    reg = p.register_agent(user, {"capabilities": ["read"], "agent_key": public_key_hex(agent_key)}, "helper")
    agent = p.issue_agent_token("helper", reg["client_secret"])
    reg2 = p.register_agent(user, {"capabilities": ["read"]}, "other")
    other = p.issue_agent_token("other", reg2["client_secret"])
    trust = TrustStore({p.host: {p.key_id: p.public_key}})
    return World(clock, p, user_key, agent_key, user, agent, other, trust,
                 {"secrets": {"helper": reg["client_secret"], "other": reg2["client_secret"]}})


@pytest.fixture
def world() -> World:
    return build_world()
