"""User ID, Agent ID and Delegation tokens.

All three kinds share one envelope: a claim set, the id of the signing key
and a detached Ed25519 signature over the canonical JSON of the claim set.
Wire form::

    <b64url(canonical claims)>.<b64url(signature)>.<key_id>

ID tokens are signed by their provider.  A root delegation is signed by the
user with the key bound in their user token; a re-delegation is signed by the
delegating agent with the ``agent_key`` bound in its agent token.
"""

from __future__ import annotations

import copy
import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .canonical import CanonicalizationError, canonical_bytes, sha256_hex
from .crypto import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
    b64url_decode,
    b64url_encode,
    load_public_key,
    public_key_hex,
    verify_signature,
)
from .policy import Policy, PolicyError

DEFAULT_SKEW = 60
DEFAULT_MAX_DEPTH = 4
ZERO_HASH = "0" * 64

_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_HOST = re.compile(r"^[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?(?:\.[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?)*(?::\d{1,5})?$")
_LOCAL_ID = re.compile(r"^[A-Za-z0-9._~-]+$")


class TokenError(Exception):
    """Base for verification failures; ``code`` is the machine-readable reason."""

    code = "TokenError"


class MalformedEnvelope(TokenError):
    code = "MalformedEnvelope"


class ClaimsError(MalformedEnvelope, ValueError):
    code = "InvalidClaims"


class BadSignature(TokenError):
    code = "BadSignature"


class Expired(TokenError):
    code = "Expired"


class NotYetValid(TokenError):
    code = "NotYetValid"


class KindMismatch(TokenError):
    code = "KindMismatch"


class KeyMismatch(TokenError):
    code = "KeyMismatch"


class DanglingRef(TokenError):
    code = "DanglingRef"


class ChainCycle(TokenError):
    code = "ChainCycle"


class DepthExceeded(TokenError):
    code = "DepthExceeded"


class MalformedBundle(TokenError):
    code = "MalformedBundle"


class UnknownPeer(TokenError):
    code = "UnknownPeer"


class Revoked(TokenError):
    code = "Revoked"


class Inactive(TokenError):
    code = "Inactive"


class IntrospectionFailed(TokenError):
    code = "IntrospectionFailed"


class TokenKind(str, enum.Enum):
    USER_ID = "user_id"
    AGENT_ID = "agent_id"
    DELEGATION = "delegation"


# -- identifiers -------------------------------------------------------------


@dataclass(frozen=True)
class GlobalId:
    """``user://<host>/<local-id>`` or ``agent://<host>/<local-id>``."""

    kind: str
    host: str
    local_id: str

    def __post_init__(self) -> None:
        if self.kind not in ("user", "agent"):
            raise ValueError(f"global id kind must be user or agent, got {self.kind!r}")
        if not _HOST.match(self.host):
            raise ValueError(f"invalid issuer host {self.host!r}")
        if not _LOCAL_ID.match(self.local_id):
            raise ValueError(f"invalid local id {self.local_id!r}")

    @classmethod
    def parse(cls, text: str) -> GlobalId:
        if not isinstance(text, str):
            raise ValueError("global id must be a string")
        kind, sep, rest = text.partition("://")
        host, slash, local = rest.partition("/")
        if not sep or not slash:
            raise ValueError(f"not a global id: {text!r}")
        return cls(kind, host, local)

    def __str__(self) -> str:
        return f"{self.kind}://{self.host}/{self.local_id}"


def compose_global_id(host: str, local_id: str, kind: str = "agent") -> str:
    return str(GlobalId(kind, host, local_id))


def is_hash_ref(value: Any) -> bool:
    return isinstance(value, str) and bool(_HEX64.match(value))


def _host_of(issuer: str) -> str:
    """Trust-store host for an issuer: ID tokens name a host, delegations a GlobalId."""
    if "://" in issuer:
        return GlobalId.parse(issuer).host
    return issuer


# -- claim sets --------------------------------------------------------------


def _need(claims: Mapping[str, Any], key: str, kind: type | tuple, what: str) -> Any:
    value = claims.get(key)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ClaimsError(f"{what} claim {key!r} missing or not {getattr(kind, '__name__', kind)}")
    return value


def _str_list(claims: Mapping[str, Any], key: str) -> tuple[str, ...]:
    value = claims.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ClaimsError(f"claim {key!r} must be a list of strings")
    return tuple(value)


@dataclass(frozen=True)
class UserIdClaims:
    user_key: str
    display_claims: Mapping[str, Any] | None = None

    @classmethod
    def from_claims(cls, claims: Mapping[str, Any]) -> UserIdClaims:
        key = _need(claims, "user_key", str, "user_id")
        try:
            load_public_key(key)
        except ValueError as exc:
            raise ClaimsError(f"user_key is not an Ed25519 public key: {exc}") from exc
        display = claims.get("display_claims")
        if display is not None and not isinstance(display, dict):
            raise ClaimsError("display_claims must be a map")
        return cls(key, display)

    def to_claims(self) -> dict:
        out: dict[str, Any] = {"user_key": self.user_key}
        if self.display_claims is not None:
            out["display_claims"] = dict(self.display_claims)
        return out


@dataclass(frozen=True)
class AgentIdClaims:
    local_id: str
    global_id: str
    capabilities: tuple[str, ...] = ()
    limitations: tuple[str, ...] = ()
    model_descriptor: Mapping[str, Any] | None = None
    pairwise: bool = False
    agent_key: str | None = None  # lets this agent sign re-delegations
    owner: str | None = None

    @classmethod
    def from_claims(cls, claims: Mapping[str, Any], issuer: str | None = None) -> AgentIdClaims:
        local_id = _need(claims, "local_id", str, "agent_id")
        global_id = _need(claims, "global_id", str, "agent_id")
        pairwise = claims.get("pairwise", False)
        if not isinstance(pairwise, bool):
            raise ClaimsError("pairwise must be a boolean")
        try:
            gid = GlobalId.parse(global_id)
        except ValueError as exc:
            raise ClaimsError(str(exc)) from exc
        if gid.kind != "agent":
            raise ClaimsError("agent global_id must use the agent:// form")
        if issuer is not None and gid.host != issuer:
            raise ClaimsError("agent global_id host differs from issuer")
        if not pairwise and gid.local_id != local_id:
            raise ClaimsError("global_id must be composed from issuer and local_id when pairwise is false")
        agent_key = claims.get("agent_key")
        if agent_key is not None:
            try:
                load_public_key(agent_key)
            except (ValueError, TypeError) as exc:
                raise ClaimsError("agent_key is not an Ed25519 public key") from exc
        descriptor = claims.get("model_descriptor")
        if descriptor is not None and not isinstance(descriptor, dict):
            raise ClaimsError("model_descriptor must be a map")
        owner = claims.get("owner")
        if owner is not None and not isinstance(owner, str):
            raise ClaimsError("owner must be a string")
        return cls(
            local_id,
            global_id,
            _str_list(claims, "capabilities"),
            _str_list(claims, "limitations"),
            descriptor,
            pairwise,
            agent_key,
            owner,
        )

    def to_claims(self) -> dict:
        out: dict[str, Any] = {
            "local_id": self.local_id,
            "global_id": self.global_id,
            "capabilities": list(self.capabilities),
            "limitations": list(self.limitations),
            "pairwise": self.pairwise,
        }
        if self.model_descriptor is not None:
            out["model_descriptor"] = dict(self.model_descriptor)
        if self.agent_key is not None:
            out["agent_key"] = self.agent_key
        if self.owner is not None:
            out["owner"] = self.owner
        return out


@dataclass(frozen=True)
class DelegationClaims:
    user_token_ref: str
    agent_token_ref: str
    policy: Policy
    goal_summary: str | None = None
    audit_url: str | None = None
    revocation_url: str | None = None
    parent_delegation_ref: str | None = None

    @classmethod
    def from_claims(cls, claims: Mapping[str, Any]) -> DelegationClaims:
        refs = {}
        for key in ("user_token_ref", "agent_token_ref"):
            if not is_hash_ref(claims.get(key)):
                raise ClaimsError(f"{key} must be 64 lowercase hex characters")
            refs[key] = claims[key]
        parent = claims.get("parent_delegation_ref")
        if parent is not None and not is_hash_ref(parent):
            raise ClaimsError("parent_delegation_ref must be 64 lowercase hex characters")
        try:
            policy = Policy.from_json(claims.get("policy"))
        except PolicyError as exc:
            raise ClaimsError(f"invalid policy: {exc}") from exc
        optional = {}
        for key in ("goal_summary", "audit_url", "revocation_url"):
            value = claims.get(key)
            if value is not None and not isinstance(value, str):
                raise ClaimsError(f"{key} must be a string")
            optional[key] = value
        return cls(refs["user_token_ref"], refs["agent_token_ref"], policy, parent_delegation_ref=parent, **optional)

    def to_claims(self) -> dict:
        out: dict[str, Any] = {
            "user_token_ref": self.user_token_ref,
            "agent_token_ref": self.agent_token_ref,
            "policy": self.policy.to_json(),
        }
        for key in ("goal_summary", "audit_url", "revocation_url", "parent_delegation_ref"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass(frozen=True)
class ClaimSet:
    kind: TokenKind
    issuer: str
    subject: str
    issued_at: int
    expires_at: int
    claims: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", TokenKind(self.kind))
        except ValueError as exc:
            raise ClaimsError(f"unknown token kind {self.kind!r}") from exc
        object.__setattr__(self, "claims", copy.deepcopy(dict(self.claims)))

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "issuer": self.issuer,
            "subject": self.subject,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
            "claims": copy.deepcopy(self.claims),
        }

    @classmethod
    def from_json(cls, data: Any) -> ClaimSet:
        if not isinstance(data, dict) or set(data) != {"kind", "issuer", "subject", "issued_at", "expires_at", "claims"}:
            raise ClaimsError("claim set must have exactly kind, issuer, subject, issued_at, expires_at, claims")
        cs = cls(data["kind"], data["issuer"], data["subject"], data["issued_at"], data["expires_at"], data["claims"])
        cs.validate()
        return cs

    def validate(self) -> None:
        for name in ("issuer", "subject"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise ClaimsError(f"{name} must be a non-empty string")
        for name in ("issued_at", "expires_at"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ClaimsError(f"{name} must be integer epoch seconds")
        if self.expires_at <= self.issued_at:
            raise ClaimsError("expires_at must be after issued_at")
        if not isinstance(self.claims, dict):
            raise ClaimsError("claims must be a map")
        try:
            canonical_bytes(self.to_json())
        except CanonicalizationError as exc:
            raise ClaimsError(str(exc)) from exc
        self.typed()

    def typed(self) -> UserIdClaims | AgentIdClaims | DelegationClaims:
        if self.kind is TokenKind.USER_ID:
            return UserIdClaims.from_claims(self.claims)
        if self.kind is TokenKind.AGENT_ID:
            agent = AgentIdClaims.from_claims(self.claims, issuer=self.issuer)
            if agent.global_id != self.subject:
                raise ClaimsError("agent token subject must equal its global_id")
            return agent
        return DelegationClaims.from_claims(self.claims)


def canonical_claims(claims: ClaimSet) -> bytes:
    """Canonical bytes of a claim set (what gets signed)."""
    return canonical_bytes(claims.to_json())


# -- envelopes ---------------------------------------------------------------


@dataclass(frozen=True)
class TokenEnvelope:
    claims: ClaimSet
    signer_key_id: str
    signature: bytes

    @property
    def kind(self) -> TokenKind:
        return self.claims.kind

    def claims_bytes(self) -> bytes:
        return canonical_claims(self.claims)

    def encode(self) -> str:
        return f"{b64url_encode(self.claims_bytes())}.{b64url_encode(self.signature)}.{self.signer_key_id}"

    @classmethod
    def decode(cls, text: str) -> TokenEnvelope:
        return decode_token(text)


def decode_token(text: str) -> TokenEnvelope:
    """Parse the wire form; claims must already be in canonical form."""
    if not isinstance(text, str):
        raise MalformedEnvelope("token must be a string")
    parts = text.split(".", 2)
    if len(parts) != 3 or not parts[2]:
        raise MalformedEnvelope("token must have three dot-separated parts")
    try:
        raw_claims = b64url_decode(parts[0])
        signature = b64url_decode(parts[1])
    except ValueError as exc:
        raise MalformedEnvelope(str(exc)) from exc
    if len(signature) != 64:
        raise MalformedEnvelope("signature must be 64 bytes")
    try:
        data = json.loads(raw_claims.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedEnvelope(f"claims are not UTF-8 JSON: {exc}") from exc
    claims = ClaimSet.from_json(data)
    if canonical_claims(claims) != raw_claims:
        raise MalformedEnvelope("claims are not in canonical form")
    return TokenEnvelope(claims, parts[2], signature)


def encode_token(env: TokenEnvelope) -> str:
    return env.encode()


def token_hash(env: TokenEnvelope) -> str:
    """SHA-256 over claims bytes followed by signature bytes."""
    return sha256_hex(env.claims_bytes() + env.signature)


def sign_token(claims: ClaimSet, key: Ed25519PrivateKey, key_id: str) -> TokenEnvelope:
    claims.validate()
    if not key_id or not isinstance(key_id, str):
        raise ClaimsError("key_id must be a non-empty string")
    return TokenEnvelope(claims, key_id, key.sign(canonical_claims(claims)))


def check_signature(env: TokenEnvelope, key: Ed25519PublicKey | str) -> None:
    try:
        key = load_public_key(key)
    except ValueError as exc:
        raise BadSignature(f"unusable verification key: {exc}") from exc
    if not verify_signature(key, env.signature, env.claims_bytes()):
        raise BadSignature(f"signature of {env.kind.value} token from {env.claims.issuer} does not verify")


def check_window(issued_at: int, expires_at: int, now: int, skew: int) -> None:
    if now < issued_at - skew:
        raise NotYetValid(f"not valid before {issued_at} (now {now}, skew {skew})")
    if now >= expires_at + skew:
        raise Expired(f"expired at {expires_at} (now {now}, skew {skew})")


def verify_token(
    env: TokenEnvelope, key: Ed25519PublicKey | str, now: int, skew: int = DEFAULT_SKEW
) -> ClaimSet:
    if not isinstance(env, TokenEnvelope) or not isinstance(env.signature, bytes) or len(env.signature) != 64:
        raise MalformedEnvelope("not a token envelope")
    check_signature(env, key)
    check_window(env.claims.issued_at, env.claims.expires_at, now, skew)
    return env.claims


# -- delegation --------------------------------------------------------------


def build_delegation(
    user_env: TokenEnvelope,
    agent_env: TokenEnvelope,
    policy: Policy,
    window: tuple[int, int],
    user_key: Ed25519PrivateKey,
    *,
    goal_summary: str | None = None,
    audit_url: str | None = None,
    revocation_url: str | None = None,
    parent_ref: str | None = None,
    key_id: str | None = None,
) -> TokenEnvelope:
    """User-signed grant binding the two ID tokens (by hash) to ``policy``."""
    if user_env.kind is not TokenKind.USER_ID:
        raise KindMismatch("first token must be a user ID token")
    if agent_env.kind is not TokenKind.AGENT_ID:
        raise KindMismatch("second token must be an agent ID token")
    bound = user_env.claims.claims["user_key"]
    if public_key_hex(user_key) != bound:
        raise KeyMismatch("signing key is not the key bound in the user token")
    claims = DelegationClaims(
        token_hash(user_env),
        token_hash(agent_env),
        policy,
        goal_summary,
        audit_url,
        revocation_url,
        parent_ref,
    )
    start, end = window
    cs = ClaimSet(TokenKind.DELEGATION, user_env.claims.subject, agent_env.claims.subject, start, end, claims.to_claims())
    return sign_token(cs, user_key, key_id or user_env.claims.subject)


def build_redelegation(
    parent_env: TokenEnvelope,
    delegator_env: TokenEnvelope,
    delegatee_env: TokenEnvelope,
    policy: Policy,
    window: tuple[int, int],
    delegator_key: Ed25519PrivateKey,
    *,
    goal_summary: str | None = None,
    audit_url: str | None = None,
    revocation_url: str | None = None,
) -> TokenEnvelope:
    """Agent-to-agent grant extending ``parent_env``, signed by the delegating agent."""
    if parent_env.kind is not TokenKind.DELEGATION:
        raise KindMismatch("parent must be a delegation token")
    if delegator_env.kind is not TokenKind.AGENT_ID or delegatee_env.kind is not TokenKind.AGENT_ID:
        raise KindMismatch("delegator and delegatee must be agent ID tokens")
    parent = DelegationClaims.from_claims(parent_env.claims.claims)
    if parent.agent_token_ref != token_hash(delegator_env):
        raise DanglingRef("delegator is not the agent named by the parent delegation")
    agent_key = delegator_env.claims.claims.get("agent_key")
    if agent_key is None or public_key_hex(delegator_key) != agent_key:
        raise KeyMismatch("signing key is not the agent_key bound in the delegator's token")
    claims = DelegationClaims(
        parent.user_token_ref,
        token_hash(delegatee_env),
        policy,
        goal_summary,
        audit_url,
        revocation_url,
        token_hash(parent_env),
    )
    start, end = window
    cs = ClaimSet(
        TokenKind.DELEGATION, delegator_env.claims.subject, delegatee_env.claims.subject, start, end, claims.to_claims()
    )
    return sign_token(cs, delegator_key, delegator_env.claims.subject)


# -- trust and chain verification ----------------------------------------------


Introspector = Callable[[TokenEnvelope], Any]


def _status(result: Any) -> tuple[bool, bool, list[str]]:
    if isinstance(result, Mapping):
        return bool(result.get("active")), bool(result.get("revoked")), list(result.get("reasons", []))
    return bool(result.active), bool(getattr(result, "revoked", False)), list(getattr(result, "reasons", []))


class TrustStore:
    """Provider hosts mapped to pinned keys and/or an introspection callable.

    A host with a pinned key is verified locally.  A host without one but with
    an introspector is asked about every token tied to it (its ID tokens and
    delegations rooted in its user tokens).  Anything else is an unknown peer.
    """

    def __init__(
        self,
        keys: Mapping[str, Mapping[str, Ed25519PublicKey | str]] | None = None,
        introspectors: Mapping[str, Introspector] | None = None,
    ) -> None:
        self._keys: dict[str, dict[str, Ed25519PublicKey]] = {}
        self._introspectors: dict[str, Introspector] = dict(introspectors or {})
        for host, entries in (keys or {}).items():
            for key_id, key in entries.items():
                self.pin(host, key_id, key)

    def pin(self, host: str, key_id: str, key: Ed25519PublicKey | str) -> None:
        self._keys.setdefault(host, {})[key_id] = load_public_key(key)

    def add_introspector(self, host: str, introspector: Introspector) -> None:
        self._introspectors[host] = introspector

    @property
    def hosts(self) -> set[str]:
        return set(self._keys) | set(self._introspectors)

    def is_pinned(self, host: str) -> bool:
        return host in self._keys

    def key_for(self, host: str, key_id: str) -> Ed25519PublicKey:
        keys = self._keys.get(host)
        if keys is None:
            raise UnknownPeer(f"no trusted key for issuer {host!r}")
        key = keys.get(key_id)
        if key is None:
            raise BadSignature(f"key id {key_id!r} is not a trusted key of {host!r}")
        return key

    def introspect(self, host: str, env: TokenEnvelope) -> None:
        fn = self._introspectors.get(host)
        if fn is None:
            raise UnknownPeer(f"issuer {host!r} is neither pinned nor introspectable")
        try:
            active, revoked, reasons = _status(fn(env))
        except TokenError:
            raise
        except Exception as exc:  # transport or remote failure: fail closed
            raise IntrospectionFailed(f"introspection at {host} failed: {exc}") from exc
        if revoked:
            raise Revoked(f"{env.kind.value} token revoked at {host}")
        if not active:
            for err in (Expired, NotYetValid, BadSignature):
                if err.code in reasons:
                    raise err(f"{env.kind.value} token inactive at {host}")
            raise Inactive(f"{env.kind.value} token inactive at {host}: {reasons}")

    def check_id_token(self, env: TokenEnvelope) -> None:
        host = _host_of(env.claims.issuer)
        if self.is_pinned(host):
            check_signature(env, self.key_for(host, env.signer_key_id))
        else:
            self.introspect(host, env)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> TrustStore:
        """``{"host": {"key_id": ..., "public_key": hex}}`` or ``{"host": {"keys": {kid: hex}}}``."""
        store = cls()
        for host, entry in data.items():
            if "keys" in entry:
                for kid, pub in entry["keys"].items():
                    store.pin(host, kid, pub)
            else:
                store.pin(host, entry["key_id"], entry["public_key"])
        return store


@dataclass(frozen=True)
class VerifiedDelegation:
    user: UserIdClaims
    agent: AgentIdClaims
    effective_policies: tuple[Policy, ...]
    validity_window: tuple[int, int]
    user_subject: str
    user_ref: str
    agent_ref: str
    delegation_refs: tuple[str, ...]

    @property
    def chain_id(self) -> str:
        """Usage and audit key for the chain: the root delegation hash."""
        return self.delegation_refs[0]

    @property
    def depth(self) -> int:
        return len(self.delegation_refs)

    def to_json(self) -> dict:
        return {
            "user": {"subject": self.user_subject, **self.user.to_claims()},
            "agent": self.agent.to_claims(),
            "effective_policies": [p.to_json() for p in self.effective_policies],
            "validity_window": list(self.validity_window),
            "user_ref": self.user_ref,
            "agent_ref": self.agent_ref,
            "delegation_refs": list(self.delegation_refs),
        }


def verify_delegation_chain(
    presented: Sequence[TokenEnvelope],
    trust: TrustStore,
    now: int,
    skew: int = DEFAULT_SKEW,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> VerifiedDelegation:
    """Verify a bundle of one user token, agent tokens and a delegation chain.

    Checks run in a fixed order so that each attack has a stable reason:
    ID-token signatures, delegation signatures, hash references and chain
    shape, remote status, then the intersected validity window.
    """
    by_kind: dict[TokenKind, list[TokenEnvelope]] = {k: [] for k in TokenKind}
    hashes: dict[str, TokenEnvelope] = {}
    for env in presented:
        if not isinstance(env, TokenEnvelope):
            raise MalformedEnvelope("bundle entries must be token envelopes")
        h = token_hash(env)
        if h in hashes:
            raise MalformedBundle("token presented twice")
        hashes[h] = env
        by_kind[env.kind].append(env)
    users, agents, delegations = by_kind[TokenKind.USER_ID], by_kind[TokenKind.AGENT_ID], by_kind[TokenKind.DELEGATION]
    if len(users) != 1 or not agents or not delegations:
        raise MalformedBundle("bundle needs exactly one user token, at least one agent token and one delegation")

    user_env = users[0]
    trust.check_id_token(user_env)
    user = UserIdClaims.from_claims(user_env.claims.claims)
    agent_claims: dict[str, AgentIdClaims] = {}
    agent_by_subject: dict[str, TokenEnvelope] = {}
    for env in agents:
        trust.check_id_token(env)
        agent_claims[token_hash(env)] = AgentIdClaims.from_claims(env.claims.claims)
        agent_by_subject[env.claims.subject] = env

    user_ref = token_hash(user_env)
    parsed: dict[str, DelegationClaims] = {}
    for env in delegations:
        dc = DelegationClaims.from_claims(env.claims.claims)
        if dc.parent_delegation_ref is None:
            if env.claims.issuer != user_env.claims.subject:
                raise BadSignature("root delegation is not issued by the presented user")
            signer_key = user.user_key
        else:
            delegator = agent_by_subject.get(env.claims.issuer)
            if delegator is None:
                raise DanglingRef(f"delegating agent {env.claims.issuer} not presented")
            signer_key = delegator.claims.claims.get("agent_key")
            if signer_key is None:
                raise BadSignature(f"delegating agent {env.claims.issuer} has no agent_key")
        check_signature(env, signer_key)
        parsed[token_hash(env)] = dc

    for h, dc in parsed.items():
        env = hashes[h]
        if dc.user_token_ref != user_ref:
            raise DanglingRef("delegation references a user token that was not presented")
        if dc.agent_token_ref not in agent_claims:
            raise DanglingRef("delegation references an agent token that was not presented")
        if hashes[dc.agent_token_ref].claims.subject != env.claims.subject:
            raise MalformedEnvelope("delegation subject differs from the referenced agent")
        if dc.parent_delegation_ref is not None and dc.parent_delegation_ref not in parsed:
            raise DanglingRef("re-delegation references a parent delegation that was not presented")

    roots = [h for h, dc in parsed.items() if dc.parent_delegation_ref is None]
    if not roots:
        raise ChainCycle("no root delegation: parent references form a cycle")
    if len(roots) > 1:
        raise MalformedBundle("more than one root delegation")
    children: dict[str, list[str]] = {}
    for h, dc in parsed.items():
        if dc.parent_delegation_ref is not None:
            children.setdefault(dc.parent_delegation_ref, []).append(h)
    chain = [roots[0]]
    while chain[-1] in children:
        nxt = children[chain[-1]]
        if len(nxt) > 1:
            raise MalformedBundle("delegation chain branches")
        if nxt[0] in chain:
            raise ChainCycle("delegation chain revisits a token")
        chain.append(nxt[0])
    if len(chain) != len(parsed):
        raise ChainCycle("delegations unreachable from the root form a cycle")
    if len(chain) > max_depth:
        raise DepthExceeded(f"chain depth {len(chain)} exceeds {max_depth}")
    for parent_h, child_h in zip(chain, chain[1:]):
        if hashes[child_h].claims.issuer != hashes[parsed[parent_h].agent_token_ref].claims.subject:
            raise BadSignature("re-delegation is not signed by the parent's delegatee")
    used_agents = {parsed[h].agent_token_ref for h in chain}
    if set(agent_claims) - used_agents:
        raise MalformedBundle("bundle carries agent tokens no delegation refers to")
    policies = tuple(parsed[h].policy for h in chain)
    if len({p.policy_id for p in policies}) != len(policies):
        raise MalformedEnvelope("policy ids must be unique within a delegation chain")

    user_host = _host_of(user_env.claims.issuer)
    if not trust.is_pinned(user_host):
        for h in chain:
            trust.introspect(user_host, hashes[h])

    members = [user_env, *agents, *(hashes[h] for h in chain)]
    start = max(e.claims.issued_at for e in members)
    end = min(e.claims.expires_at for e in members)
    if start >= end:
        raise Expired("validity windows of the chain do not intersect")
    check_window(start, end, now, skew)

    leaf_agent_ref = parsed[chain[-1]].agent_token_ref
    return VerifiedDelegation(
        user=user,
        agent=agent_claims[leaf_agent_ref],
        effective_policies=policies,
        validity_window=(start, end),
        user_subject=user_env.claims.subject,
        user_ref=user_ref,
        agent_ref=leaf_agent_ref,
        delegation_refs=tuple(chain),
    )


def decode_bundle(items: Iterable[str | TokenEnvelope]) -> list[TokenEnvelope]:
    return [item if isinstance(item, TokenEnvelope) else decode_token(item) for item in items]
