"""Identity provider with agent registration, delegation records and federation."""

from .config import ConfigError, PeerConfig, ProviderConfig, UserEntry, load_config
from .http import ProviderClient, serve_provider
from .service import (
    AuthnFailed,
    BadClientSecret,
    BadRequest,
    CallerUnauthenticated,
    DuplicateLocalId,
    IntrospectionResult,
    InvalidOwnerToken,
    NotOwner,
    PeerKeyFetchFailed,
    Provider,
    ProviderError,
    Registration,
    StaticCredentials,
    UnknownReferencedToken,
    UnknownToken,
    pairwise_local_id,
)
from .store import MemoryStore, SqliteStore, open_store

__all__ = [
    "AuthnFailed",
    "BadClientSecret",
    "BadRequest",
    "CallerUnauthenticated",
    "ConfigError",
    "DuplicateLocalId",
    "IntrospectionResult",
    "InvalidOwnerToken",
    "MemoryStore",
    "NotOwner",
    "PeerConfig",
    "PeerKeyFetchFailed",
    "Provider",
    "ProviderClient",
    "ProviderConfig",
    "ProviderError",
    "Registration",
    "SqliteStore",
    "StaticCredentials",
    "UnknownReferencedToken",
    "UnknownToken",
    "UserEntry",
    "load_config",
    "open_store",
    "pairwise_local_id",
    "serve_provider",
]
