from __future__ import annotations

import dataclasses
import hashlib
import json
import threading
from pathlib import Path

import pytest

from conftest import READ_DOCS, T0, make_provider, seeded_key
from agentdel.crypto import public_key_hex
from agentdel.harness.clock import LogicalClock
from agentdel.policy import Policy
from agentdel.provider import (
    AuthnFailed,
    BadClientSecret,
    BadRequest,
    CallerUnauthenticated,
    ConfigError,
    DuplicateLocalId,
    InvalidOwnerToken,
    NotOwner,
    PeerConfig,
    PeerKeyFetchFailed,
    ProviderClient,
    ProviderConfig,
    UnknownReferencedToken,
    UnknownToken,
    load_config,
    pairwise_local_id,
    serve_provider,
)
from agentdel._http import RemoteError
from agentdel.tokens import (
    BadSignature,
    TokenKind,
    TrustStore,
    UnknownPeer,
    build_delegation,
    build_redelegation,
    token_hash,
    verify_delegation_chain,
    verify_token,
)

ALICE = {"username": "alice", "password": "alice-pw"}
BOB = {"username": "bob", "password": "bob-pw"}


def _user(p, who=ALICE, key=1):
    return p.issue_user_token(who, public_key_hex(seeded_key(key)))


# -- issuance ------------------------------------------------------------------


def test_user_token_verifies_under_provider_key():
    p = make_provider()
    env = _user(p)
    cs = verify_token(env, p.keys()["public_key"], now=T0, skew=0)
    assert cs.kind is TokenKind.USER_ID and cs.subject == "user://op1.test/alice"
    assert cs.claims["user_key"] == public_key_hex(seeded_key(1))


def test_wrong_credential():
    p = make_provider()
    for bad in ({"username": "alice", "password": "nope"}, {"username": "mallory", "password": "x"}, {}):
        with pytest.raises(AuthnFailed):
            p.issue_user_token(bad, public_key_hex(seeded_key(1)))


def test_lifetime_clamped():
    p = make_provider(max_user_token_lifetime=600, max_agent_token_lifetime=300)
    env = p.issue_user_token(ALICE, public_key_hex(seeded_key(1)), lifetime=10_000)
    assert env.claims.expires_at == env.claims.issued_at + 600
    short = p.issue_user_token(ALICE, public_key_hex(seeded_key(1)), lifetime=30)
    assert short.claims.expires_at == short.claims.issued_at + 30
    reg = p.register_agent(env, {}, "a")
    agent = p.issue_agent_token("a", reg["client_secret"], lifetime=10_000)
    assert agent.claims.expires_at - agent.claims.issued_at == 300


def test_bad_user_key():
    with pytest.raises(BadRequest):
        make_provider().issue_user_token(ALICE, "zz")


# -- registration --------------------------------------------------------------


def test_register_fresh_id_and_secret():
    p = make_provider()
    reg = p.register_agent(_user(p), {"capabilities": ["read"]})
    assert reg["local_id"].startswith("agent-")
    assert len(bytes.fromhex(reg["client_secret"])) == 32
    assert reg["global_id"] == f"agent://op1.test/{reg['local_id']}"


def test_register_requires_valid_owner():
    clock = LogicalClock(T0)
    p = make_provider(clock=clock)
    user = _user(p)
    clock.advance(86400 + 61)
    with pytest.raises(InvalidOwnerToken):
        p.register_agent(user, {})
    other = make_provider("op2.test", seed=9)
    with pytest.raises(InvalidOwnerToken):
        p.register_agent(_user(other), {})
    with pytest.raises(InvalidOwnerToken):
        p.register_agent("garbage", {})


def test_duplicate_local_id():
    p = make_provider()
    user = _user(p)
    p.register_agent(user, {}, "helper")
    with pytest.raises(DuplicateLocalId):
        p.register_agent(user, {}, "helper")


def test_register_rejects_unknown_metadata():
    p = make_provider()
    with pytest.raises(BadRequest):
        p.register_agent(_user(p), {"root": True})
    for bad in ({"model_descriptor": "m-1"}, {"capabilities": "read"}, {"limitations": [1]}):
        with pytest.raises(BadRequest):
            p.register_agent(_user(p), bad)


def test_secrets_are_stored_only_as_hashes(tmp_path):
    p = make_provider(store=f"sqlite:{tmp_path / 's.db'}")
    user = _user(p)
    reg = p.register_agent(user, {"agent_key": public_key_hex(seeded_key(2))}, "helper")
    secret = reg["client_secret"]
    dump = json.dumps(p.store_dump())
    assert secret not in dump
    assert hashlib.sha256(bytes.fromhex(secret)).hexdigest() in dump
    raw = (tmp_path / "s.db").read_bytes()
    assert secret.encode() not in raw and bytes.fromhex(secret) not in raw
    assert b"alice-pw" not in raw


def test_agent_token_requires_secret():
    p = make_provider()
    reg = p.register_agent(_user(p), {}, "helper")
    for local_id, secret in (("helper", "00" * 32), ("nobody", reg["client_secret"]), ("helper", "xyz")):
        with pytest.raises(BadClientSecret):
            p.issue_agent_token(local_id, secret)


def test_agent_token_claims():
    p = make_provider()
    reg = p.register_agent(_user(p), {"capabilities": ["read"], "model_descriptor": {"family": "m-1"},
                                      "agent_key": public_key_hex(seeded_key(2))}, "helper")
    env = p.issue_agent_token("helper", reg["client_secret"])
    c = env.claims.claims
    assert env.claims.subject == "agent://op1.test/helper" == c["global_id"]
    assert c["owner"] == "user://op1.test/alice" and c["capabilities"] == ["read"]
    assert c["model_descriptor"] == {"family": "m-1"} and c["pairwise"] is False


def test_pairwise_ids():
    p = make_provider()
    reg = p.register_agent(_user(p), {"agent_key": public_key_hex(seeded_key(2))}, "helper")
    s = reg["client_secret"]
    a2 = p.issue_agent_token("helper", s, audience="op2.test")
    a3 = p.issue_agent_token("helper", s, audience="op3.test")
    a2b = p.issue_agent_token("helper", s, audience="op2.test")
    assert a2.claims.subject != a3.claims.subject
    assert a2.claims.subject == a2b.claims.subject
    expected = hashlib.sha256(bytes.fromhex("aa55") + b"\x00helper\x00op2.test").hexdigest()
    assert a2.claims.subject == f"agent://op1.test/{expected}" == f"agent://op1.test/{pairwise_local_id('aa55', 'helper', 'op2.test')}"
    for env in (a2, a3):
        assert "owner" not in env.claims.claims and "agent_key" not in env.claims.claims
        assert "helper" not in json.dumps(env.claims.to_json())


# -- delegations ---------------------------------------------------------------


def test_record_delegation_idempotent(world):
    p = world.provider
    d = world.delegate()
    h = p.record_delegation(d)
    assert h == token_hash(d)
    assert p.record_delegation(d) == h
    assert p.audit.counts().get("delegate") == 1


def test_record_delegation_foreign_user(world):
    other = make_provider("op2.test", seed=9)
    foreign_user = _user(other)
    d = build_delegation(foreign_user, world.agent, Policy.from_json(READ_DOCS), (T0, T0 + 60), seeded_key(1))
    with pytest.raises(UnknownReferencedToken):
        world.provider.record_delegation(d)


def test_record_delegation_bad_signature(world):
    d = world.delegate()
    forged = dataclasses.replace(d, signature=seeded_key(9).sign(d.claims_bytes()))
    with pytest.raises(BadSignature):
        world.provider.record_delegation(forged)


def test_record_redelegation(world):
    p = world.provider
    d1 = world.delegate()
    p.record_delegation(d1)
    narrow = Policy.from_json({**READ_DOCS, "policy_id": "narrow"})
    d2 = build_redelegation(d1, world.agent, world.other_agent, narrow, (T0, T0 + 60), world.agent_key)
    assert p.record_delegation(d2) == token_hash(d2)
    orphan = build_redelegation(world.delegate(window=(0, 10)), world.agent, world.other_agent, narrow,
                                (T0, T0 + 5), world.agent_key)
    with pytest.raises(UnknownReferencedToken):
        p.record_delegation(orphan)


# -- introspection and revocation --------------------------------------------------


def test_introspect_and_revoke(world):
    p = world.provider
    d = world.delegate()
    h = p.record_delegation(d)
    caller = world.agent
    res = p.introspect(h, caller)
    assert res.active and not res.revoked and res.kind == "delegation"
    assert set(res.to_json()) == {"active", "kind", "subject", "expires_at", "revoked", "reasons"}
    ack = p.revoke(h, world.user)
    assert ack["revoked"] is True
    again = p.revoke(h, world.user)
    assert again == ack
    res = p.introspect(d, caller)
    assert not res.active and res.revoked and "Revoked" in res.reasons
    assert p.audit.counts().get("revoke") == 1


def test_revocation_cascades_to_dependents(world):
    p = world.provider
    d = world.delegate()
    h = p.record_delegation(d)
    p.revoke(token_hash(world.agent), world.user)
    assert p.introspect(h, world.other_agent).revoked


def test_revocation_is_monotone(world):
    p = world.provider
    h = p.record_delegation(world.delegate())
    p.revoke(h, world.user)
    for step in range(5):
        world.clock.advance(10)
        p.revoke(h, world.user)
        assert not p.introspect(h, world.agent).active


def test_revoke_errors(world):
    p = world.provider
    h = p.record_delegation(world.delegate())
    bob = _user(p, BOB, key=3)
    with pytest.raises(NotOwner):
        p.revoke(h, bob)
    with pytest.raises(UnknownToken):
        p.revoke("0" * 64, world.user)


def test_introspect_caller_checks(world):
    p = world.provider
    h = p.record_delegation(world.delegate())
    stranger = make_provider("op9.test", seed=11)
    u = _user(stranger)
    reg = stranger.register_agent(u, {}, "spy")
    spy = stranger.issue_agent_token("spy", reg["client_secret"])
    before = len(p.audit)
    with pytest.raises(CallerUnauthenticated):
        p.introspect(h, spy)
    with pytest.raises(CallerUnauthenticated):
        p.introspect(h, world.user)
    assert len(p.audit) == before + 2
    last = p.audit.records[-1]
    assert last.decision == {"outcome": "deny", "reasons": ["CallerUnauthenticated"]}
    with pytest.raises(UnknownToken):
        p.introspect("f" * 64, world.agent)


def test_introspect_expired_token(world):
    p = world.provider
    h = p.record_delegation(world.delegate(window=(0, 100)))
    world.clock.advance(100 + 60)
    res = p.introspect(h, world.agent)
    assert not res.active and res.reasons == ("Expired",) and not res.revoked


# -- federation ----------------------------------------------------------------


def _pair(fetcher=None, pin=True):
    clock = LogicalClock(T0)
    op2 = make_provider("op2.test", clock=clock, seed=9)
    peer = (PeerConfig("op2.test", op2.public_key, op2.key_id) if pin
            else PeerConfig("op2.test", keys_url="http://op2.invalid/keys"))
    op1 = make_provider("op1.test", clock=clock, federation_peers={"op2.test": peer})
    if fetcher is not None:
        op1._fetch = fetcher
    u = _user(op2, key=4)
    reg = op2.register_agent(u, {}, "a2")
    a2 = op2.issue_agent_token("a2", reg["client_secret"])
    return clock, op1, op2, a2


def test_federation_pinned():
    _, op1, _, a2 = _pair()
    assert op1.federation_verify(a2).subject == "agent://op2.test/a2"
    stranger = make_provider("op9.test", seed=11)
    with pytest.raises(UnknownPeer):
        op1.federation_verify(_user(stranger))


def test_federation_rotation_refetch():
    state = {}
    calls = []

    def fetch(url):
        calls.append(url)
        return state["op2"].keys()

    clock, op1, op2, a2 = _pair(fetch, pin=False)
    state["op2"] = op2
    op1.federation_verify(a2)
    op1.federation_verify(a2)
    assert len(calls) == 1
    op2.rotate_key(bytes([33]) * 32, "k2")
    reg = op2.register_agent(_user(op2, key=4), {}, "a3")
    a3 = op2.issue_agent_token("a3", reg["client_secret"])
    assert op1.federation_verify(a3).subject == "agent://op2.test/a3"
    assert len(calls) == 2
    forged = dataclasses.replace(a3, signature=seeded_key(5).sign(a3.claims_bytes()))
    with pytest.raises(BadSignature):
        op1.federation_verify(forged)
    clock.advance(op1.config.key_cache_ttl)
    op1.federation_verify(a3)
    assert len(calls) == 4


def test_federation_fetch_failure():
    def broken(url):
        raise OSError("connection refused")

    _, op1, _, a2 = _pair(broken, pin=False)
    with pytest.raises(PeerKeyFetchFailed):
        op1.federation_verify(a2)


def test_federated_caller_may_introspect():
    _, op1, op2, a2 = _pair()
    u = _user(op1)
    reg = op1.register_agent(u, {}, "a1")
    a1 = op1.issue_agent_token("a1", reg["client_secret"])
    assert op1.introspect(a1, a2).active


def test_non_peer_tokens_never_active():
    _, op1, _, _ = _pair()
    stranger = make_provider("op9.test", seed=11)
    tok = _user(stranger)
    with pytest.raises(UnknownToken):
        op1.introspect(tok, op1.issue_agent_token(
            "x", op1.register_agent(_user(op1), {}, "x")["client_secret"]))


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ProviderConfig("op1.test", "00")
    with pytest.raises(ConfigError):
        PeerConfig("op2.test")
    with pytest.raises(ConfigError):
        ProviderConfig("op1.test", "01" * 32, federation_peers={"op1.test": PeerConfig("op1.test", keys_url="x")})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"issuer_host": "op1.test", "signing_key_seed": "01" * 32,
                                "users": {"alice": {"password": "pw"}}, "audit_path": "a.ndjson"}))
    cfg = load_config(path)
    assert cfg.users["alice"].password_sha256 == hashlib.sha256(b"pw").hexdigest()
    assert cfg.audit_path == str(tmp_path / "a.ndjson")


def test_shipped_config_loads():
    cfg = load_config(Path(__file__).parent.parent / "configs" / "op1.toml")
    assert cfg.issuer_host == "op1.test" and "op2.test" in cfg.federation_peers


# -- HTTP ------------------------------------------------------------------------


def test_http_round_trip():
    clock = LogicalClock(T0)
    p = make_provider(clock=clock)
    with serve_provider(p) as srv:
        c = ProviderClient(srv.url)
        assert c.health()["status"] == "ok"
        assert c.keys()["public_key"] == p.public_key
        user = c.issue_user_token(ALICE, public_key_hex(seeded_key(1)))
        reg = c.register_agent(user, {"agent_key": public_key_hex(seeded_key(2))}, "helper")
        agent = c.issue_agent_token("helper", reg["client_secret"])
        d = build_delegation(user, agent, Policy.from_json(READ_DOCS), (T0, T0 + 60), seeded_key(1))
        h = c.record_delegation(d)
        assert c.introspect(h, agent).active
        trust = TrustStore(introspectors={"op1.test": c.introspector(agent)})
        assert verify_delegation_chain([user, agent, d], trust, T0).depth == 1
        c.revoke(h, user)
        assert c.introspect(d, agent).revoked
        with pytest.raises(RemoteError) as info:
            c.issue_user_token({"username": "alice", "password": "x"}, public_key_hex(seeded_key(1)))
        assert info.value.code == "AuthnFailed"
        with pytest.raises(RemoteError) as info:
            c.register_agent(user, {}, "helper")
        assert info.value.code == "DuplicateLocalId"


def test_concurrent_registration_is_linearizable():
    p = make_provider()
    user = _user(p)
    results = []

    def worker():
        try:
            p.register_agent(user, {}, "same")
            results.append("ok")
        except DuplicateLocalId:
            results.append("dup")

    threads = [threading.Thread(target=worker) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(results) == ["dup"] * 15 + ["ok"]
