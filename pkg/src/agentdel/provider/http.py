"""HTTP JSON API for the provider and a matching client."""

from __future__ import annotations

from typing import Any, Iterable, Mapping

from .._http import JsonServer, RemoteError, call
from ..tokens import TokenEnvelope, decode_token, encode_token
from .service import IntrospectionResult, Provider


def _wire(token: TokenEnvelope | str) -> str:
    return encode_token(token) if isinstance(token, TokenEnvelope) else token


def provider_routes(p: Provider) -> tuple[dict, dict]:
    def register(body: dict) -> dict:
        return p.register_agent(body["owner_token"], body.get("metadata"), body.get("local_id"))

    def token_user(body: dict) -> dict:
        assertion = {"username": body.get("username"), "password": body.get("password")}
        env = p.issue_user_token(assertion, body["user_key"], body.get("lifetime"))
        return {"token": env.encode()}

    def token_agent(body: dict) -> dict:
        env = p.issue_agent_token(body["local_id"], body["client_secret"], body.get("audience"), body.get("lifetime"))
        return {"token": env.encode()}

    def delegation(body: dict) -> dict:
        return {"token_hash": p.record_delegation(body["token"], body.get("presented", []))}

    def introspect(body: dict) -> dict:
        target = body.get("token") or body["token_hash"]
        return p.introspect(target, body["caller"]).to_json()

    def revoke(body: dict) -> dict:
        return p.revoke(body["token_hash"], body["owner_token"])

    gets = {"/keys": p.keys, "/health": lambda: {"status": "ok", "issuer": p.host}}
    posts = {
        "/register": register,
        "/token/user": token_user,
        "/token/agent": token_agent,
        "/delegation": delegation,
        "/introspect": introspect,
        "/revoke": revoke,
    }
    return gets, posts


def serve_provider(p: Provider, host: str = "127.0.0.1", port: int = 0) -> JsonServer:
    """Unstarted server; call ``start()`` or use it as a context manager."""
    gets, posts = provider_routes(p)
    return JsonServer(gets, posts, host, port)


class ProviderClient:
    """Same operations as Provider, over HTTP.  Errors raise RemoteError."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post(self, path: str, body: Mapping[str, Any]) -> Any:
        return call(self.base_url + path, body, self.timeout)

    def health(self) -> dict:
        return call(self.base_url + "/health", None, self.timeout)

    def keys(self) -> dict:
        return call(self.base_url + "/keys", None, self.timeout)

    def issue_user_token(self, assertion: Mapping[str, Any], user_key: str, lifetime: int | None = None) -> TokenEnvelope:
        body = {**assertion, "user_key": user_key}
        if lifetime is not None:
            body["lifetime"] = lifetime
        return decode_token(self._post("/token/user", body)["token"])

    def register_agent(
        self, owner_token: TokenEnvelope | str, metadata: Mapping[str, Any] | None = None, local_id: str | None = None
    ) -> dict:
        body: dict[str, Any] = {"owner_token": _wire(owner_token), "metadata": dict(metadata or {})}
        if local_id is not None:
            body["local_id"] = local_id
        return self._post("/register", body)

    def issue_agent_token(
        self, local_id: str, client_secret: str, audience: str | None = None, lifetime: int | None = None
    ) -> TokenEnvelope:
        body: dict[str, Any] = {"local_id": local_id, "client_secret": client_secret}
        if audience is not None:
            body["audience"] = audience
        if lifetime is not None:
            body["lifetime"] = lifetime
        return decode_token(self._post("/token/agent", body)["token"])

    def record_delegation(self, delegation: TokenEnvelope | str, presented: Iterable[TokenEnvelope | str] = ()) -> str:
        body = {"token": _wire(delegation), "presented": [_wire(t) for t in presented]}
        return self._post("/delegation", body)["token_hash"]

    def introspect(self, target: TokenEnvelope | str, caller: TokenEnvelope | str) -> IntrospectionResult:
        if isinstance(target, TokenEnvelope):
            body = {"token": target.encode()}
        elif len(target) == 64:
            body = {"token_hash": target}
        else:
            body = {"token": target}
        body["caller"] = _wire(caller)
        return IntrospectionResult.from_json(self._post("/introspect", body))

    def revoke(self, ref: str, owner_token: TokenEnvelope | str) -> dict:
        return self._post("/revoke", {"token_hash": ref, "owner_token": _wire(owner_token)})

    def introspector(self, caller: TokenEnvelope | str):
        """Introspection callable for a TrustStore."""
        return lambda env: self.introspect(env, caller)


__all__ = ["ProviderClient", "RemoteError", "provider_routes", "serve_provider"]
