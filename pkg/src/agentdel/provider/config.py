"""Provider configuration, loaded from one JSON or TOML file."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..crypto import generate_signing_key, load_public_key, public_key_hex

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    code = "InvalidConfig"


@dataclass(frozen=True)
class PeerConfig:
    """A federated provider: a pinned key, a key-document URL, or both."""

    host: str
    public_key: str | None = None
    key_id: str | None = None
    keys_url: str | None = None

    def __post_init__(self) -> None:
        if self.public_key is None and self.keys_url is None:
            raise ConfigError(f"peer {self.host} needs public_key or keys_url")
        if self.public_key is not None:
            try:
                load_public_key(self.public_key)
            except ValueError as exc:
                raise ConfigError(f"peer {self.host}: {exc}") from exc

    @classmethod
    def from_json(cls, host: str, data: Mapping[str, Any]) -> PeerConfig:
        return cls(host, data.get("public_key"), data.get("key_id"), data.get("keys_url"))


@dataclass(frozen=True)
class UserEntry:
    """Static credential table row; the password is kept as a SHA-256 hex digest."""

    username: str
    password_sha256: str
    display_name: str | None = None


@dataclass
class ProviderConfig:
    issuer_host: str
    signing_key_seed: str
    key_id: str = "k1"
    federation_peers: dict[str, PeerConfig] = field(default_factory=dict)
    pairwise_salt: str = ""
    pairwise: bool = True
    skew: int = 60
    max_user_token_lifetime: int = 3600
    max_agent_token_lifetime: int = 3600
    users: dict[str, UserEntry] = field(default_factory=dict)
    store: str = "memory"
    audit_path: str | None = None
    key_cache_ttl: int = 300

    def __post_init__(self) -> None:
        try:
            seed = bytes.fromhex(self.signing_key_seed)
        except ValueError as exc:
            raise ConfigError("signing_key_seed must be hex") from exc
        if len(seed) != 32:
            raise ConfigError("signing_key_seed must be 32 bytes")
        if self.issuer_host in self.federation_peers:
            raise ConfigError("a provider cannot list itself as a federation peer")
        for name in ("max_user_token_lifetime", "max_agent_token_lifetime", "key_cache_ttl"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.skew < 0:
            raise ConfigError("skew must be non-negative")

    @property
    def public_key(self) -> str:
        return public_key_hex(generate_signing_key(bytes.fromhex(self.signing_key_seed)))

    @classmethod
    def from_json(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> ProviderConfig:
        try:
            users = {}
            for name, entry in data.get("users", {}).items():
                digest = entry.get("password_sha256")
                if digest is None:
                    digest = hashlib.sha256(entry["password"].encode("utf-8")).hexdigest()
                users[name] = UserEntry(name, digest, entry.get("display_name"))
            peers = {h: PeerConfig.from_json(h, p) for h, p in data.get("federation_peers", {}).items()}
            audit_path = data.get("audit_path")
            store = data.get("store", "memory")
            if base_dir is not None:
                if audit_path and not Path(audit_path).is_absolute():
                    audit_path = str(base_dir / audit_path)
                if store.startswith("sqlite:") and not Path(store[7:]).is_absolute():
                    store = "sqlite:" + str(base_dir / store[7:])
            return cls(
                issuer_host=data["issuer_host"],
                signing_key_seed=data["signing_key_seed"],
                key_id=data.get("key_id", "k1"),
                federation_peers=peers,
                pairwise_salt=data.get("pairwise_salt", ""),
                pairwise=bool(data.get("pairwise", True)),
                skew=int(data.get("skew", 60)),
                max_user_token_lifetime=int(data.get("max_user_token_lifetime", 3600)),
                max_agent_token_lifetime=int(data.get("max_agent_token_lifetime", 3600)),
                users=users,
                store=store,
                audit_path=audit_path,
                key_cache_ttl=int(data.get("key_cache_ttl", 300)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from exc


def load_config(path: str | Path) -> ProviderConfig:
    """Read a ``.toml`` or ``.json`` provider config; relative paths resolve next to it."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".toml":
        data = tomllib.loads(raw.decode("utf-8"))
    else:
        data = json.loads(raw)
    return ProviderConfig.from_json(data, base_dir=path.parent)
