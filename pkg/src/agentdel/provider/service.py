"""Reference identity provider extended for agents.

Authenticates users, registers agents, signs user and agent ID tokens,
records user-signed delegations, answers introspection, revokes tokens and
verifies tokens of federated peer providers.

All mutating operations run under one lock, so the store sees a single
writer.  The clock and the secret source are injected for reproducible runs.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import secrets
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol

from ..audit import AuditLog
from ..crypto import Ed25519PublicKey, generate_signing_key, load_public_key, public_key_hex
from ..tokens import (
    BadSignature,
    ClaimSet,
    DelegationClaims,
    MalformedEnvelope,
    TokenEnvelope,
    TokenError,
    TokenKind,
    UnknownPeer,
    _host_of,
    check_signature,
    check_window,
    compose_global_id,
    decode_token,
    sign_token,
    token_hash,
)
from .config import ProviderConfig
from .store import REGISTRATIONS, REVOCATIONS, TOKENS, MemoryStore, open_store

log = logging.getLogger(__name__)


class ProviderError(Exception):
    code = "ProviderError"

    def __init__(self, message: str = "") -> None:
        super().__init__(message or self.code)


class BadRequest(ProviderError):
    code = "BadRequest"


class AuthnFailed(ProviderError):
    code = "AuthnFailed"


class InvalidOwnerToken(ProviderError):
    code = "InvalidOwnerToken"


class DuplicateLocalId(ProviderError):
    code = "DuplicateLocalId"


class BadClientSecret(ProviderError):
    code = "BadClientSecret"


class UnknownReferencedToken(ProviderError):
    code = "UnknownReferencedToken"


class CallerUnauthenticated(ProviderError):
    code = "CallerUnauthenticated"


class UnknownToken(ProviderError):
    code = "UnknownToken"


class NotOwner(ProviderError):
    code = "NotOwner"


class PeerKeyFetchFailed(ProviderError):
    code = "PeerKeyFetchFailed"


# -- authentication ------------------------------------------------------------


class Authenticator(Protocol):
    def authenticate(self, assertion: Mapping[str, Any]) -> str:
        """Return the username the assertion proves, or raise AuthnFailed."""
        ...


class StaticCredentials:
    """Username/password table with SHA-256 password digests."""

    def __init__(self, table: Mapping[str, str]) -> None:
        self._table = dict(table)

    def authenticate(self, assertion: Mapping[str, Any]) -> str:
        username = assertion.get("username")
        password = assertion.get("password")
        if not isinstance(username, str) or not isinstance(password, str):
            raise AuthnFailed("assertion needs username and password")
        expected = self._table.get(username)
        digest = hashlib.sha256(password.encode("utf-8")).hexdigest()
        if expected is None or not hmac.compare_digest(expected, digest):
            raise AuthnFailed("unknown user or wrong credential")
        return username


# -- results -------------------------------------------------------------------


@dataclass(frozen=True)
class Registration:
    local_id: str
    client_secret_hash: str
    owner: str
    agent_metadata: dict
    created_at: int

    def to_json(self) -> dict:
        return {
            "local_id": self.local_id,
            "client_secret_hash": self.client_secret_hash,
            "owner": self.owner,
            "agent_metadata": self.agent_metadata,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Registration:
        return cls(data["local_id"], data["client_secret_hash"], data["owner"], data["agent_metadata"], data["created_at"])


@dataclass(frozen=True)
class IntrospectionResult:
    active: bool
    kind: str
    subject: str
    expires_at: int
    revoked: bool = False
    reasons: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "active": self.active,
            "kind": self.kind,
            "subject": self.subject,
            "expires_at": self.expires_at,
            "revoked": self.revoked,
            "reasons": list(self.reasons),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> IntrospectionResult:
        return cls(bool(data["active"]), data["kind"], data["subject"], int(data["expires_at"]),
                   bool(data.get("revoked", False)), tuple(data.get("reasons", ())))


KeyFetcher = Callable[[str], Mapping[str, Any]]


def http_key_fetcher(url: str, timeout: float = 5.0) -> Mapping[str, Any]:
    with urllib.request.urlopen(url, timeout=timeout) as resp:  # noqa: S310 - configured peer URL
        return json.loads(resp.read().decode("utf-8"))


def _keys_from_document(doc: Mapping[str, Any]) -> dict[str, Ed25519PublicKey]:
    entries = doc.get("keys")
    if entries is None:
        entries = [doc]
    return {e["key_id"]: load_public_key(e["public_key"]) for e in entries}


@dataclass
class _CachedKeys:
    fetched_at: int
    keys: dict[str, Ed25519PublicKey] = field(default_factory=dict)


def pairwise_local_id(salt: str, local_id: str, audience: str) -> str:
    """Audience-specific pseudonym; zero bytes separate the three inputs."""
    data = bytes.fromhex(salt) if salt else b""
    data += b"\x00" + local_id.encode("utf-8") + b"\x00" + audience.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def _as_envelope(token: TokenEnvelope | str) -> TokenEnvelope:
    if isinstance(token, TokenEnvelope):
        return token
    return decode_token(token)


class Provider:
    def __init__(
        self,
        config: ProviderConfig,
        *,
        clock: Callable[[], int] | None = None,
        secret_source: Callable[[int], bytes] | None = None,
        authenticator: Authenticator | None = None,
        store: Any = None,
        audit: AuditLog | None = None,
        key_fetcher: KeyFetcher | None = None,
    ) -> None:
        self.config = config
        self.host = config.issuer_host
        self._clock = clock or (lambda: int(time.time()))
        self._secret = secret_source or secrets.token_bytes
        self._authn = authenticator or StaticCredentials({u.username: u.password_sha256 for u in config.users.values()})
        self.store = store if store is not None else open_store(config.store)
        self.audit = audit if audit is not None else AuditLog(config.audit_path, clock=self._clock)
        self._fetch = key_fetcher or http_key_fetcher
        self._signing_key = generate_signing_key(bytes.fromhex(config.signing_key_seed))
        self._key_id = config.key_id
        self._own_keys: dict[str, Ed25519PublicKey] = {self._key_id: self._signing_key.public_key()}
        self._peer_cache: dict[str, _CachedKeys] = {}
        self._lock = threading.RLock()

    # -- keys ------------------------------------------------------------------

    def now(self) -> int:
        return int(self._clock())

    @property
    def key_id(self) -> str:
        return self._key_id

    @property
    def public_key(self) -> str:
        return public_key_hex(self._signing_key)

    def keys(self) -> dict:
        """Key document: the current signing key."""
        return {
            "issuer": self.host,
            "key_id": self._key_id,
            "public_key": self.public_key,
            "keys": [{"key_id": self._key_id, "public_key": self.public_key}],
        }

    def rotate_key(self, seed: bytes | None = None, key_id: str | None = None) -> str:
        """Switch to a new signing key.  Tokens signed earlier keep verifying locally."""
        with self._lock:
            self._signing_key = generate_signing_key(seed)
            self._key_id = key_id or f"k{len(self._own_keys) + 1}"
            self._own_keys[self._key_id] = self._signing_key.public_key()
            return self._key_id

    def _sign(self, cs: ClaimSet) -> TokenEnvelope:
        return sign_token(cs, self._signing_key, self._key_id)

    def _check_own(self, env: TokenEnvelope) -> None:
        key = self._own_keys.get(env.signer_key_id)
        if key is None:
            raise BadSignature(f"key id {env.signer_key_id!r} is not a key of {self.host}")
        check_signature(env, key)

    def _remember(self, env: TokenEnvelope, owner: str, refs: Iterable[str] = ()) -> str:
        h = token_hash(env)
        self.store.insert(TOKENS, h, {
            "kind": env.kind.value,
            "wire": env.encode(),
            "subject": env.claims.subject,
            "owner": owner,
            "issued_at": env.claims.issued_at,
            "expires_at": env.claims.expires_at,
            "refs": list(refs),
        })
        return h

    def _verify_owner(self, token: TokenEnvelope | str) -> TokenEnvelope:
        """A user token minted here, signature valid, in its window and not revoked."""
        try:
            env = _as_envelope(token)
            if env.kind is not TokenKind.USER_ID or env.claims.issuer != self.host:
                raise InvalidOwnerToken("owner token must be a user token from this provider")
            self._check_own(env)
            check_window(env.claims.issued_at, env.claims.expires_at, self.now(), self.config.skew)
        except TokenError as exc:
            raise InvalidOwnerToken(f"{exc.code}: {exc}") from exc
        if self._revoked(token_hash(env)):
            raise InvalidOwnerToken("owner token has been revoked")
        return env

    # -- issuance --------------------------------------------------------------

    def issue_user_token(
        self, assertion: Mapping[str, Any], user_key: str | Ed25519PublicKey, lifetime: int | None = None
    ) -> TokenEnvelope:
        username = self._authn.authenticate(assertion)
        try:
            key_hex = public_key_hex(load_public_key(user_key))
        except (ValueError, TypeError) as exc:
            raise BadRequest(f"user_key: {exc}") from exc
        now = self.now()
        max_life = self.config.max_user_token_lifetime
        life = max_life if lifetime is None else max(1, min(int(lifetime), max_life))
        subject = f"user://{self.host}/{username}"
        claims: dict[str, Any] = {"user_key": key_hex}
        entry = self.config.users.get(username)
        if entry is not None and entry.display_name:
            claims["display_claims"] = {"name": entry.display_name}
        with self._lock:
            env = self._sign(ClaimSet(TokenKind.USER_ID, self.host, subject, now, now + life, claims))
            h = self._remember(env, owner=subject)
            self.audit.append("issue", subject, [h], details={"kind": "user_id", "expires_at": now + life})
        return env

    def register_agent(
        self, owner_token: TokenEnvelope | str, metadata: Mapping[str, Any] | None = None, local_id: str | None = None
    ) -> dict:
        """Register an agent instance.  The client secret is returned here only."""
        owner_env = self._verify_owner(owner_token)
        metadata = dict(metadata or {})
        allowed = {"capabilities", "limitations", "model_descriptor", "agent_key"}
        if set(metadata) - allowed:
            raise BadRequest(f"unknown metadata fields {sorted(set(metadata) - allowed)}")
        for name in ("capabilities", "limitations"):
            value = metadata.get(name, [])
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise BadRequest(f"{name} must be a list of strings")
        if not isinstance(metadata.get("model_descriptor", {}), dict):
            raise BadRequest("model_descriptor must be an object")
        if "agent_key" in metadata:
            try:
                metadata["agent_key"] = public_key_hex(load_public_key(metadata["agent_key"]))
            except (ValueError, TypeError) as exc:
                raise BadRequest(f"agent_key: {exc}") from exc
        with self._lock:
            if local_id is None:
                local_id = "agent-" + self._secret(8).hex()
            try:
                compose_global_id(self.host, local_id)
            except ValueError as exc:
                raise BadRequest(str(exc)) from exc
            secret = self._secret(32)
            reg = Registration(
                local_id=local_id,
                client_secret_hash=hashlib.sha256(secret).hexdigest(),
                owner=owner_env.claims.subject,
                agent_metadata=metadata,
                created_at=self.now(),
            )
            if not self.store.insert(REGISTRATIONS, local_id, reg.to_json()):
                raise DuplicateLocalId(f"local id {local_id!r} is already registered")
            self.audit.append("register", reg.owner, [compose_global_id(self.host, local_id)],
                              details={"local_id": local_id})
        return {"local_id": local_id, "client_secret": secret.hex(), "global_id": compose_global_id(self.host, local_id)}

    def issue_agent_token(
        self, local_id: str, client_secret: str, audience: str | None = None, lifetime: int | None = None
    ) -> TokenEnvelope:
        data = self.store.get(REGISTRATIONS, local_id) if isinstance(local_id, str) else None
        try:
            presented = hashlib.sha256(bytes.fromhex(client_secret)).hexdigest()
        except (ValueError, TypeError):
            presented = ""
        if data is None or not hmac.compare_digest(presented, data["client_secret_hash"]):
            raise BadClientSecret("unknown agent or wrong client secret")
        reg = Registration.from_json(data)
        meta = reg.agent_metadata
        pairwise = audience is not None and self.config.pairwise
        claims: dict[str, Any] = {
            "capabilities": list(meta.get("capabilities", [])),
            "limitations": list(meta.get("limitations", [])),
            "pairwise": pairwise,
        }
        if meta.get("model_descriptor") is not None:
            claims["model_descriptor"] = meta["model_descriptor"]
        if pairwise:
            # owner and agent_key would link pseudonyms across audiences
            claims["local_id"] = pairwise_local_id(self.config.pairwise_salt, local_id, audience)
        else:
            claims["local_id"] = local_id
            claims["owner"] = reg.owner
            if meta.get("agent_key"):
                claims["agent_key"] = meta["agent_key"]
        claims["global_id"] = compose_global_id(self.host, claims["local_id"])
        now = self.now()
        max_life = self.config.max_agent_token_lifetime
        life = max_life if lifetime is None else max(1, min(int(lifetime), max_life))
        with self._lock:
            env = self._sign(ClaimSet(TokenKind.AGENT_ID, self.host, claims["global_id"], now, now + life, claims))
            h = self._remember(env, owner=reg.owner)
            self.audit.append("issue", reg.owner, [h, compose_global_id(self.host, local_id)],
                              details={"kind": "agent_id", "audience": audience, "pairwise": pairwise})
        return env

    # -- delegations -----------------------------------------------------------

    def _stored_env(self, ref: str) -> TokenEnvelope | None:
        rec = self.store.get(TOKENS, ref)
        return decode_token(rec["wire"]) if rec else None

    def record_delegation(
        self, delegation: TokenEnvelope | str, presented: Iterable[TokenEnvelope | str] = ()
    ) -> str:
        """Store a delegation after checking it against tokens minted here.

        ``presented`` may carry agent tokens of federated peers, needed when
        an agent re-delegates to an agent of another provider.
        """
        try:
            env = _as_envelope(delegation)
            extra = {token_hash(e): e for e in map(_as_envelope, presented)}
        except TokenError as exc:
            raise BadRequest(f"{exc.code}: {exc}") from exc
        if env.kind is not TokenKind.DELEGATION:
            raise BadRequest("not a delegation token")
        h = token_hash(env)
        if self.store.get(TOKENS, h) is not None:
            return h
        try:
            dc = DelegationClaims.from_claims(env.claims.claims)
        except TokenError as exc:
            raise BadRequest(f"{exc.code}: {exc}") from exc

        user_env = self._stored_env(dc.user_token_ref)
        if user_env is None or user_env.kind is not TokenKind.USER_ID:
            raise UnknownReferencedToken("user token was not issued by this provider")

        def agent(ref: str) -> TokenEnvelope:
            found = self._stored_env(ref)
            if found is None and ref in extra:
                found = extra[ref]
                self.federation_verify(found)
            if found is None or found.kind is not TokenKind.AGENT_ID:
                raise UnknownReferencedToken(f"agent token {ref[:12]} is unknown here")
            return found

        agent_env = agent(dc.agent_token_ref)
        if agent_env.claims.subject != env.claims.subject:
            raise BadRequest("delegation subject differs from the referenced agent")
        if dc.parent_delegation_ref is None:
            if env.claims.issuer != user_env.claims.subject:
                raise BadSignature("root delegation must be issued by the referenced user")
            check_signature(env, user_env.claims.claims["user_key"])
        else:
            parent = self._stored_env(dc.parent_delegation_ref)
            if parent is None or parent.kind is not TokenKind.DELEGATION:
                raise UnknownReferencedToken("parent delegation is not recorded here")
            delegator = agent(DelegationClaims.from_claims(parent.claims.claims).agent_token_ref)
            if env.claims.issuer != delegator.claims.subject or "agent_key" not in delegator.claims.claims:
                raise BadSignature("re-delegation is not signed by the parent's delegatee")
            check_signature(env, delegator.claims.claims["agent_key"])

        refs = [dc.user_token_ref, dc.agent_token_ref]
        if dc.parent_delegation_ref:
            refs.append(dc.parent_delegation_ref)
        with self._lock:
            if self.store.get(TOKENS, h) is None:
                self._remember(env, owner=user_env.claims.subject, refs=refs)
                details = {"policy_id": dc.policy.policy_id}
                for key in ("audit_url", "revocation_url", "goal_summary"):
                    if getattr(dc, key):
                        details[key] = getattr(dc, key)
                self.audit.append("delegate", env.claims.issuer, [h, *refs], details=details)
        return h

    # -- status ----------------------------------------------------------------

    def _revoked(self, ref: str, depth: int = 0) -> bool:
        """Revoked directly, or via a token it references (cascade)."""
        if self.store.get(REVOCATIONS, ref) is not None:
            return True
        rec = self.store.get(TOKENS, ref)
        if rec is None or depth > 8:
            return False
        return any(self._revoked(r, depth + 1) for r in rec.get("refs", []))

    def _authenticate_caller(self, caller: TokenEnvelope | str) -> TokenEnvelope:
        try:
            env = _as_envelope(caller)
            if env.kind is not TokenKind.AGENT_ID:
                raise CallerUnauthenticated("caller must present an agent token")
            if _host_of(env.claims.issuer) == self.host:
                self._check_own(env)
                if self._revoked(token_hash(env)):
                    raise CallerUnauthenticated("caller token is revoked")
            else:
                self.federation_verify(env)
            check_window(env.claims.issued_at, env.claims.expires_at, self.now(), self.config.skew)
        except (TokenError, ProviderError) as exc:
            if isinstance(exc, CallerUnauthenticated):
                raise
            raise CallerUnauthenticated(f"{exc.code}: {exc}") from exc
        return env

    def introspect(self, target: TokenEnvelope | str, caller: TokenEnvelope | str) -> IntrospectionResult:
        """Status of a token issued or recorded here.  ``target`` is an envelope,
        its wire form, or its hash."""
        try:
            caller_env = self._authenticate_caller(caller)
        except CallerUnauthenticated as exc:
            self.audit.append("authorize", "unauthenticated", [],
                              decision={"outcome": "deny", "reasons": ["CallerUnauthenticated"]},
                              details={"op": "introspect", "error": str(exc)})
            raise
        if isinstance(target, str) and len(target) == 64 and all(c in "0123456789abcdef" for c in target):
            ref = target
        else:
            try:
                ref = token_hash(_as_envelope(target))
            except TokenError as exc:
                raise BadRequest(f"{exc.code}: {exc}") from exc
        rec = self.store.get(TOKENS, ref)
        actor = caller_env.claims.subject
        if rec is None:
            self.audit.append("authorize", actor, [ref], decision={"outcome": "deny", "reasons": ["UnknownToken"]},
                              details={"op": "introspect"})
            raise UnknownToken("token is not known to this provider")
        env = decode_token(rec["wire"])
        reasons: list[str] = []
        revoked = self._revoked(ref)
        if revoked:
            reasons.append("Revoked")
        try:
            if env.kind is not TokenKind.DELEGATION:
                self._check_own(env)
            check_window(env.claims.issued_at, env.claims.expires_at, self.now(), self.config.skew)
        except TokenError as exc:
            reasons.append(exc.code)
        result = IntrospectionResult(not reasons, rec["kind"], rec["subject"], rec["expires_at"], revoked, tuple(reasons))
        self.audit.append("authorize", actor, [ref],
                          decision={"outcome": "permit" if result.active else "deny", "reasons": reasons},
                          details={"op": "introspect"})
        return result

    def revoke(self, ref: str, owner_token: TokenEnvelope | str) -> dict:
        owner_env = self._verify_owner(owner_token)
        rec = self.store.get(TOKENS, ref) if isinstance(ref, str) else None
        if rec is None:
            raise UnknownToken("token is not known to this provider")
        owner = owner_env.claims.subject
        if rec["owner"] != owner:
            raise NotOwner("only the owning user may revoke this token")
        with self._lock:
            now = self.now()
            if self.store.insert(REVOCATIONS, ref, {"revoked_at": now, "by": owner}):
                self.audit.append("revoke", owner, [ref], details={"kind": rec["kind"]})
            revoked_at = self.store.get(REVOCATIONS, ref)["revoked_at"]
        return {"revoked": True, "token_hash": ref, "revoked_at": revoked_at}

    # -- federation ------------------------------------------------------------

    def _fetch_peer_keys(self, host: str, url: str) -> dict[str, Ed25519PublicKey]:
        try:
            doc = self._fetch(url)
            keys = _keys_from_document(doc)
        except Exception as exc:  # network, JSON or key format problems
            raise PeerKeyFetchFailed(f"fetching keys of {host} from {url} failed: {exc}") from exc
        self._peer_cache[host] = _CachedKeys(self.now(), keys)
        return keys

    def federation_verify(self, token: TokenEnvelope | str) -> ClaimSet:
        """Verify a token issued by this provider or a federated peer.

        Key documents are cached for ``key_cache_ttl`` seconds.  An unknown
        key id or a failing signature triggers one refetch before giving up.
        """
        env = _as_envelope(token)
        host = _host_of(env.claims.issuer)
        if host == self.host:
            self._check_own(env)
            return env.claims
        peer = self.config.federation_peers.get(host)
        if peer is None:
            raise UnknownPeer(f"{host} is not a federation peer")
        if peer.public_key is not None and (peer.key_id is None or peer.key_id == env.signer_key_id):
            check_signature(env, peer.public_key)
            return env.claims
        if peer.keys_url is None:
            raise BadSignature(f"key id {env.signer_key_id!r} is not pinned for {host}")
        with self._lock:
            cached = self._peer_cache.get(host)
            fresh = False
            if cached is None or self.now() - cached.fetched_at >= self.config.key_cache_ttl:
                keys = self._fetch_peer_keys(host, peer.keys_url)
                fresh = True
            else:
                keys = cached.keys
            key = keys.get(env.signer_key_id)
            if key is not None:
                try:
                    check_signature(env, key)
                    return env.claims
                except BadSignature:
                    if fresh:
                        raise
            elif fresh:
                raise BadSignature(f"{host} publishes no key {env.signer_key_id!r}")
            keys = self._fetch_peer_keys(host, peer.keys_url)
            key = keys.get(env.signer_key_id)
            if key is None:
                raise BadSignature(f"{host} publishes no key {env.signer_key_id!r}")
            check_signature(env, key)
            return env.claims

    # -- inspection ------------------------------------------------------------

    def store_dump(self) -> dict:
        return self.store.dump()

    def introspector(self, caller: TokenEnvelope | str) -> Callable[[TokenEnvelope], IntrospectionResult]:
        """In-process introspection callable for a TrustStore."""
        return lambda env: self.introspect(env, caller)


__all__ = [
    "AuthnFailed",
    "Authenticator",
    "BadClientSecret",
    "BadRequest",
    "CallerUnauthenticated",
    "DuplicateLocalId",
    "IntrospectionResult",
    "InvalidOwnerToken",
    "MalformedEnvelope",
    "MemoryStore",
    "NotOwner",
    "PeerKeyFetchFailed",
    "Provider",
    "ProviderError",
    "Registration",
    "StaticCredentials",
    "UnknownReferencedToken",
    "UnknownToken",
    "http_key_fetcher",
    "pairwise_local_id",
]
