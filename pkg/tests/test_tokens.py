from __future__ import annotations

import dataclasses
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from _sha256_ref import sha256_hex as ref_sha256
from conftest import READ_DOCS, seeded_key
from agentdel.canonical import CanonicalizationError, canonical_bytes, sha256_hex
from agentdel.crypto import b64url_decode, b64url_encode, public_key_hex
from agentdel.policy import Policy
from agentdel.tokens import (
    BadSignature,
    ChainCycle,
    ClaimsError,
    ClaimSet,
    DanglingRef,
    DepthExceeded,
    Expired,
    GlobalId,
    KeyMismatch,
    KindMismatch,
    MalformedBundle,
    MalformedEnvelope,
    NotYetValid,
    TokenEnvelope,
    TokenKind,
    TrustStore,
    UnknownPeer,
    build_delegation,
    build_redelegation,
    decode_token,
    sign_token,
    token_hash,
    verify_delegation_chain,
    verify_token,
)

# Envelope with an empty claim map and an all-zero signature.  The expected
# digest was computed once with the pure-Python SHA-256 in _sha256_ref over
# hand-written canonical bytes, then pinned here.
SENTINEL = TokenEnvelope(
    ClaimSet(TokenKind.USER_ID, "sentinel.invalid", "user://sentinel.invalid/none", 0, 1, {}), "k0", bytes(64)
)
SENTINEL_HASH = "9beb1dfe13263ef50a5d97eaf677bc8d915040b28ab3dcc1fb4cdbc6a6ddb7c0"


def user_claims(key, issued=100, expires=200, host="op1.test", name="alice"):
    return ClaimSet(TokenKind.USER_ID, host, f"user://{host}/{name}", issued, expires,
                    {"user_key": public_key_hex(key)})


# -- canonical form ------------------------------------------------------------


def test_canonical_is_sorted_and_compact():
    assert canonical_bytes({"b": 1, "a": [1, "x"]}) == b'{"a":[1,"x"],"b":1}'


def test_canonical_ignores_insertion_order():
    assert canonical_bytes({"a": 1, "b": 2}) == canonical_bytes({"b": 2, "a": 1})


def test_canonical_is_injective_on_a_changed_field():
    assert canonical_bytes({"expires_at": 10}) != canonical_bytes({"expires_at": 11})


def test_canonical_rejects_non_json_types():
    for bad in (1.5, {1, 2}, b"x", float("nan")):
        with pytest.raises(CanonicalizationError):
            canonical_bytes({"v": bad})


def test_canonical_keeps_utf8():
    assert canonical_bytes({"n": "é"}) == '{"n":"é"}'.encode("utf-8")


# -- crypto helpers ------------------------------------------------------------


def test_b64url_round_trip_and_strictness():
    for data in (b"", b"\x00", b"\xff\xfe", bytes(range(40))):
        assert b64url_decode(b64url_encode(data)) == data
    with pytest.raises(ValueError):
        b64url_decode("ab=c")
    with pytest.raises(ValueError):
        b64url_decode("a+b/")


# -- token hash ----------------------------------------------------------------


def test_sentinel_token_hash_golden():
    assert token_hash(SENTINEL) == SENTINEL_HASH
    assert ref_sha256(SENTINEL.claims_bytes() + SENTINEL.signature) == SENTINEL_HASH


def test_reference_sha256_agrees_with_hashlib():
    for data in (b"", b"abc", b"a" * 55, b"a" * 56, b"a" * 64, bytes(range(256)) * 3):
        assert ref_sha256(data) == sha256_hex(data)


def test_token_hash_stable_and_signature_sensitive():
    key = seeded_key(3)
    env = sign_token(user_claims(key), key, "k1")
    assert token_hash(env) == token_hash(env)
    other = dataclasses.replace(env, signature=bytes(64))
    assert token_hash(other) != token_hash(env)


# -- sign / verify -------------------------------------------------------------


def test_sign_verify_round_trip_and_wire_form():
    key = seeded_key(3)
    cs = user_claims(key)
    env = sign_token(cs, key, "k1")
    assert verify_token(env, key.public_key(), now=150, skew=0) == cs
    wire = env.encode()
    claims_part, sig_part, kid = wire.split(".")
    assert kid == "k1" and b64url_decode(claims_part) == canonical_bytes(cs.to_json())
    assert decode_token(wire) == env


def test_verify_window_boundaries():
    key = seeded_key(3)
    env = sign_token(user_claims(key, 100, 200), key, "k1")
    assert verify_token(env, key.public_key(), now=40, skew=60)
    with pytest.raises(NotYetValid):
        verify_token(env, key.public_key(), now=39, skew=60)
    assert verify_token(env, key.public_key(), now=259, skew=60)
    with pytest.raises(Expired):
        verify_token(env, key.public_key(), now=260, skew=60)


def test_verify_other_key_is_bad_signature():
    key = seeded_key(3)
    env = sign_token(user_claims(key), key, "k1")
    with pytest.raises(BadSignature):
        verify_token(env, seeded_key(4).public_key(), now=150, skew=0)


def test_flipped_signature_byte_rejected():
    key = seeded_key(3)
    env = sign_token(user_claims(key), key, "k1")
    sig = bytearray(env.signature)
    sig[10] ^= 0x01
    with pytest.raises(BadSignature):
        verify_token(dataclasses.replace(env, signature=bytes(sig)), key.public_key(), now=150, skew=0)


def test_mutated_claim_rejected():
    key = seeded_key(3)
    env = sign_token(user_claims(key), key, "k1")
    forged = dataclasses.replace(env, claims=dataclasses.replace(env.claims, expires_at=10_000))
    with pytest.raises(BadSignature):
        verify_token(forged, key.public_key(), now=150, skew=0)


@pytest.mark.parametrize(
    "wire",
    ["", "abc", "a.b", "!!.AAAA.k1", "e30.AAAA.k1", "e30." + "A" * 86 + ".", "bm90IGpzb24." + "A" * 86 + ".k1"],
)
def test_malformed_envelopes(wire):
    with pytest.raises(MalformedEnvelope):
        decode_token(wire)


def test_non_canonical_claims_rejected():
    key = seeded_key(3)
    env = sign_token(user_claims(key), key, "k1")
    loose = json.dumps(env.claims.to_json(), indent=1).encode()
    wire = f"{b64url_encode(loose)}.{b64url_encode(env.signature)}.k1"
    with pytest.raises(MalformedEnvelope):
        decode_token(wire)


def test_claim_validation():
    key = seeded_key(3)
    with pytest.raises(ClaimsError):
        sign_token(user_claims(key, 200, 100), key, "k1")
    with pytest.raises(ClaimsError):
        sign_token(ClaimSet(TokenKind.USER_ID, "op1.test", "user://op1.test/a", 1, 2, {}), key, "k1")
    with pytest.raises(ClaimsError):
        ClaimSet.from_json({"kind": "user_id"})
    with pytest.raises(ClaimsError):
        sign_token(ClaimSet(TokenKind.USER_ID, "op1.test", "user://op1.test/a", 1, 2,
                            {"user_key": public_key_hex(key), "x": 1.5}), key, "k1")


def test_global_id_forms():
    gid = GlobalId.parse("agent://op1.test/helper")
    assert (gid.kind, gid.host, gid.local_id) == ("agent", "op1.test", "helper")
    for bad in ("agent:/op1.test/x", "robot://op1.test/x", "agent://op1.test/", "agent:///x"):
        with pytest.raises(ValueError):
            GlobalId.parse(bad)


@given(
    st.dictionaries(st.text(min_size=1, max_size=8),
                    st.recursive(st.none() | st.booleans() | st.integers() | st.text(max_size=10),
                                 lambda kids: st.lists(kids, max_size=3) | st.dictionaries(
                                     st.text(max_size=5), kids, max_size=3), max_leaves=8),
                    max_size=5),
    st.integers(0, 2**40),
    st.integers(1, 2**20),
)
def test_round_trip_property(extra, issued, life):
    key = seeded_key(5)
    claims = {**extra, "user_key": public_key_hex(key)}
    cs = ClaimSet(TokenKind.USER_ID, "op1.test", "user://op1.test/u", issued, issued + life, claims)
    env = sign_token(cs, key, "k1")
    back = decode_token(env.encode())
    assert back == env
    assert verify_token(back, key.public_key(), now=issued, skew=0) == cs


# -- delegation building -------------------------------------------------------


def test_build_delegation_binds_hashes(world):
    d = world.delegate(goal_summary="read docs", audit_url="https://audit.example/a")
    claims = d.claims.claims
    assert claims["user_token_ref"] == token_hash(world.user)
    assert claims["agent_token_ref"] == token_hash(world.agent)
    assert claims["goal_summary"] == "read docs"
    assert d.claims.issuer == world.user.claims.subject
    assert d.claims.subject == world.agent.claims.subject


def test_build_delegation_errors(world):
    pol = Policy.from_json(READ_DOCS)
    now = world.clock()
    with pytest.raises(KeyMismatch):
        build_delegation(world.user, world.agent, pol, (now, now + 10), seeded_key(9))
    with pytest.raises(KindMismatch):
        build_delegation(world.agent, world.agent, pol, (now, now + 10), world.user_key)
    with pytest.raises(KindMismatch):
        build_delegation(world.user, world.user, pol, (now, now + 10), world.user_key)
    with pytest.raises(ClaimsError):
        build_delegation(world.user, world.agent, pol, (now + 10, now), world.user_key)


# -- chain verification --------------------------------------------------------


def test_one_hop_chain(world):
    d = world.delegate()
    vd = verify_delegation_chain([world.user, world.agent, d], world.trust, world.clock())
    assert vd.depth == 1
    assert [p.policy_id for p in vd.effective_policies] == ["read-docs"]
    assert vd.agent.global_id == "agent://op1.test/helper"
    assert vd.chain_id == token_hash(d)
    assert world.clock() <= vd.validity_window[1]


def test_bundle_order_does_not_matter(world):
    d = world.delegate()
    a = verify_delegation_chain([d, world.agent, world.user], world.trust, world.clock())
    b = verify_delegation_chain([world.user, world.agent, d], world.trust, world.clock())
    assert a == b


def test_instance_spoofing_is_dangling_ref(world):
    d = world.delegate()
    with pytest.raises(DanglingRef):
        verify_delegation_chain([world.user, world.other_agent, d], world.trust, world.clock())


def test_substituted_user_token_is_rejected(world):
    d = world.delegate()
    p = world.provider
    world.clock.advance(1)  # same instant would reproduce the identical token
    user2 = p.issue_user_token({"username": "alice", "password": "alice-pw"}, public_key_hex(world.user_key))
    with pytest.raises(DanglingRef):
        verify_delegation_chain([user2, world.agent, d], world.trust, world.clock())


def test_unknown_issuer(world):
    d = world.delegate()
    with pytest.raises(UnknownPeer):
        verify_delegation_chain([world.user, world.agent, d], TrustStore({"op9.test": {"k1": world.provider.public_key}}),
                                world.clock())


def test_bundle_shape_errors(world):
    d = world.delegate()
    for bundle in ([world.agent, d], [world.user, d], [world.user, world.agent], [world.user, world.agent, d, d]):
        with pytest.raises(MalformedBundle):
            verify_delegation_chain(bundle, world.trust, world.clock())
    with pytest.raises(MalformedBundle):
        verify_delegation_chain([world.user, world.agent, world.other_agent, d], world.trust, world.clock())


def test_expired_and_not_yet_valid_chain(world):
    d = world.delegate(window=(0, 600))
    with pytest.raises(Expired):
        verify_delegation_chain([world.user, world.agent, d], world.trust, world.clock() + 600 + 60)
    late = world.delegate(window=(1000, 2000))
    with pytest.raises(NotYetValid):
        verify_delegation_chain([world.user, world.agent, late], world.trust, world.clock())


def _redelegate(world, parent, policy, window):
    now = world.clock()
    return build_redelegation(parent, world.agent, world.other_agent, Policy.from_json(policy),
                              (now + window[0], now + window[1]), world.agent_key)


NARROW = {"policy_id": "narrow", "rules": [
    {"effect": "permit", "resources": ["https://docs.example/public/**"], "actions": ["read"]}]}


def test_two_hop_chain_root_first(world):
    d1 = world.delegate()
    d2 = _redelegate(world, d1, NARROW, (0, 600))
    vd = verify_delegation_chain([world.user, world.agent, world.other_agent, d1, d2], world.trust, world.clock())
    assert [p.policy_id for p in vd.effective_policies] == ["read-docs", "narrow"]
    assert vd.agent.local_id == "other" and vd.chain_id == token_hash(d1) and vd.depth == 2
    assert vd.validity_window[1] == world.clock() + 600


def test_two_hop_disjoint_windows_expired(world):
    d1 = world.delegate(window=(1000, 2000))
    d2 = _redelegate(world, d1, NARROW, (0, 500))
    with pytest.raises(Expired):
        verify_delegation_chain([world.user, world.agent, world.other_agent, d1, d2], world.trust, world.clock())


def test_redelegation_key_and_parent_errors(world):
    d1 = world.delegate()
    now = world.clock()
    with pytest.raises(KeyMismatch):
        build_redelegation(d1, world.agent, world.other_agent, Policy.from_json(NARROW), (now, now + 5), world.user_key)
    with pytest.raises(DanglingRef):
        build_redelegation(d1, world.other_agent, world.agent, Policy.from_json(NARROW), (now, now + 5),
                           world.agent_key)
    d2 = _redelegate(world, d1, NARROW, (0, 600))
    with pytest.raises(DanglingRef):
        verify_delegation_chain([world.user, world.agent, world.other_agent, d2], world.trust, now)


def test_redelegation_signed_by_wrong_agent_key(world):
    d1 = world.delegate()
    d2 = _redelegate(world, d1, NARROW, (0, 600))
    sig = world.user_key.sign(d2.claims_bytes())
    forged = dataclasses.replace(d2, signature=sig)
    with pytest.raises(BadSignature):
        verify_delegation_chain([world.user, world.agent, world.other_agent, d1, forged], world.trust, world.clock())


def _chain_of(world, depth, name="third"):
    """A chain alternating between the two agents; both need agent keys."""
    p = world.provider
    k_other = seeded_key(8)
    reg = p.register_agent(world.user, {"agent_key": public_key_hex(k_other)}, name)
    third = p.issue_agent_token(name, reg["client_secret"])
    agents = [(world.agent, world.agent_key), (third, k_other)]
    now = world.clock()
    chain = [world.delegate()]
    for i in range(1, depth):
        delegator, dkey = agents[(i - 1) % 2]
        delegatee = agents[i % 2][0]
        pol = Policy.from_json({**NARROW, "policy_id": f"hop{i}"})
        chain.append(build_redelegation(chain[-1], delegator, delegatee, pol, (now, now + 600), dkey))
    return [world.user, world.agent, third, *chain]


def test_depth_limit(world):
    bundle = _chain_of(world, 4)
    assert verify_delegation_chain(bundle, world.trust, world.clock()).depth == 4
    bundle5 = _chain_of(world, 5, "fourth")
    with pytest.raises(DepthExceeded):
        verify_delegation_chain(bundle5, world.trust, world.clock())
    assert verify_delegation_chain(bundle5, world.trust, world.clock(), max_depth=5).depth == 5


def test_cycle_without_root(world):
    d1 = world.delegate()
    d2 = _redelegate(world, d1, NARROW, (0, 600))
    # d2 alone names d1 as parent; presenting a self-contained loop requires
    # forging parent refs, which breaks signatures first, so build a loop of
    # re-delegations signed with the right keys but pointing at each other.
    now = world.clock()
    pol = Policy.from_json({**NARROW, "policy_id": "x"})
    a = build_redelegation(d1, world.agent, world.other_agent, pol, (now, now + 60), world.agent_key)
    loop_claims = dict(a.claims.claims, parent_delegation_ref=token_hash(d2))
    forged = sign_token(dataclasses.replace(a.claims, claims=loop_claims), world.agent_key, a.signer_key_id)
    loop2 = dict(d2.claims.claims, parent_delegation_ref=token_hash(forged))
    d2b = sign_token(dataclasses.replace(d2.claims, claims=loop2), world.agent_key, d2.signer_key_id)
    with pytest.raises((ChainCycle, DanglingRef)):
        verify_delegation_chain([world.user, world.agent, world.other_agent, forged, d2b], world.trust, now)


def test_validity_intersection_within_members(world):
    d1 = world.delegate(window=(0, 900))
    d2 = _redelegate(world, d1, NARROW, (100, 600))
    now = world.clock() + 200
    vd = verify_delegation_chain([world.user, world.agent, world.other_agent, d1, d2], world.trust, now)
    start, end = vd.validity_window
    for env in (world.user, world.agent, world.other_agent, d1, d2):
        assert env.claims.issued_at <= start and end <= env.claims.expires_at
