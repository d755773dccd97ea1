"""API-key issuance, authorization, and per-key token-bucket rate limiting.

Secrets are high-entropy bearer tokens shown exactly once at issuance; only
their SHA-256 survives. Every time-dependent decision takes an injectable
clock so the bucket laws are testable against a simulated clock.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import secrets
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable

SCOPES = ("score", "read", "admin")
DEFAULT_RATE_LIMIT = 60  # requests per 60-second window
WINDOW_SECONDS = 60.0


class AuthError(Exception):
    """Base for authorization failures; ``reason`` is a stable code string."""

    reason = "unauthorized"


class MissingCredentials(AuthError):
    reason = "missing_credentials"


class UnknownKey(AuthError):
    reason = "unknown_key"


class RevokedKey(AuthError):
    reason = "revoked_key"


class ForbiddenScope(AuthError):
    reason = "missing_scope"


@dataclass(frozen=True)
class ApiKey:
    key_id: str
    secret_hash: str
    owner: str
    scopes: frozenset[str]
    rate_limit: int
    created_at: str
    revoked: bool = False

    def to_dict(self) -> dict:
        return {
            "key_id": self.key_id,
            "secret_hash": self.secret_hash,
            "owner": self.owner,
            "scopes": sorted(self.scopes),
            "rate_limit": self.rate_limit,
            "created_at": self.created_at,
            "revoked": self.revoked,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApiKey":
        return cls(
            key_id=str(d["key_id"]),
            secret_hash=str(d["secret_hash"]),
            owner=str(d["owner"]),
            scopes=frozenset(d["scopes"]),
            rate_limit=int(d["rate_limit"]),
            created_at=str(d["created_at"]),
            revoked=bool(d["revoked"]),
        )


@dataclass(frozen=True)
class Principal:
    owner: str
    scopes: frozenset[str]
    key_id: str

    def allows(self, scope: str) -> bool:
        return scope in self.scopes or "admin" in self.scopes


@dataclass(frozen=True)
class RateDecision:
    allowed: bool
    retry_after: int = 0  # seconds until one token is available, integer ceiling


class TokenBucket:
    """Capacity = rate_limit, refill = rate_limit/60 tokens per second, atomic."""

    def __init__(self, capacity: int, clock: Callable[[], float]):
        self.capacity = float(capacity)
        self.refill_per_s = capacity / WINDOW_SECONDS
        self._tokens = float(capacity)
        self._updated = clock()
        self._clock = clock
        self._lock = threading.Lock()

    def try_acquire(self) -> RateDecision:
        with self._lock:
            now = self._clock()
            elapsed = max(0.0, now - self._updated)
            self._tokens = min(self.capacity, self._tokens + elapsed * self.refill_per_s)
            self._updated = now
            if self._tokens >= 1.0:
                self._tokens -= 1.0
                return RateDecision(allowed=True)
            wait_s = (1.0 - self._tokens) / self.refill_per_s
            return RateDecision(allowed=False, retry_after=int(math.ceil(wait_s)))


def _hash_secret(secret: str) -> str:
    return hashlib.sha256(secret.encode("utf-8")).hexdigest()


class KeyManager:
    """Key issuance, bearer authorization, revocation, and rate checks.

    ``persist``/``load_all`` hooks let a store own durability; the manager
    keeps the working set in memory. Authorization reads are lock-free over
    an immutable dict snapshot; mutations swap the snapshot.
    """

    def __init__(
        self,
        *,
        clock: Callable[[], float] = time.monotonic,
        wall_clock: Callable[[], str] | None = None,
        persist: Callable[[ApiKey], None] | None = None,
    ):
        self._clock = clock
        self._wall_clock = wall_clock or _iso_now
        self._persist = persist
        self._keys: dict[str, ApiKey] = {}
        self._buckets: dict[str, TokenBucket] = {}
        self._mutate_lock = threading.Lock()

    def load(self, keys: Iterable[ApiKey]) -> None:
        with self._mutate_lock:
            snapshot = dict(self._keys)
            for key in keys:
                snapshot[key.key_id] = key
            self._keys = snapshot

    def list_keys(self) -> list[ApiKey]:
        return sorted(self._keys.values(), key=lambda k: k.key_id)

    def get(self, key_id: str) -> ApiKey:
        try:
            return self._keys[key_id]
        except KeyError:
            raise UnknownKey(f"unknown key {key_id!r}") from None

    def issue_key(
        self,
        owner: str,
        scopes: Iterable[str] = ("score", "read"),
        rate_limit: int = DEFAULT_RATE_LIMIT,
        *,
        secret: str | None = None,
    ) -> tuple[ApiKey, str]:
        """Create a key; the returned secret exists only in this return value."""
        scope_set = frozenset(scopes)
        bad = scope_set - set(SCOPES)
        if bad:
            raise ValueError(f"invalid scopes {sorted(bad)}; valid: {list(SCOPES)}")
        if not scope_set:
            raise ValueError("at least one scope required")
        if rate_limit < 1:
            raise ValueError("rate_limit must be >= 1")
        if secret is not None:
            # operator-supplied secret (bootstrap): the key id is its prefix
            key_id, dot, rand = secret.partition(".")
            if not dot or not key_id or not rand:
                raise ValueError("provided secret must have the form '<key_id>.<random>'")
            if key_id in self._keys:
                raise ValueError(f"key id {key_id!r} already exists")
        else:
            key_id = secrets.token_hex(8)
            # secret embeds the key id so authorization is a direct lookup plus
            # a constant-time hash comparison; the random part is 256 bits
            secret = f"{key_id}.{secrets.token_urlsafe(32)}"
        key = ApiKey(
            key_id=key_id,
            secret_hash=_hash_secret(secret),
            owner=owner,
            scopes=scope_set,
            rate_limit=int(rate_limit),
            created_at=self._wall_clock(),
        )
        with self._mutate_lock:
            snapshot = dict(self._keys)
            snapshot[key_id] = key
            self._keys = snapshot
        if self._persist:
            self._persist(key)
        return key, secret

    def authorize(self, authorization_header: str | None) -> Principal:
        """Resolve a ``Bearer <secret>`` header to a principal."""
        if not authorization_header:
            raise MissingCredentials("missing Authorization header")
        parts = authorization_header.split(None, 1)
        if len(parts) != 2 or parts[0].lower() != "bearer":
            raise MissingCredentials("Authorization header must be 'Bearer <secret>'")
        secret = parts[1].strip()
        key_id, _, _ = secret.partition(".")
        key = self._keys.get(key_id)
        if key is None:
            raise UnknownKey("unknown API key")
        if not hmac.compare_digest(key.secret_hash, _hash_secret(secret)):
            raise UnknownKey("unknown API key")
        if key.revoked:
            raise RevokedKey(f"key {key_id} has been revoked")
        return Principal(owner=key.owner, scopes=key.scopes, key_id=key_id)

    def rate_check(self, key_id: str) -> RateDecision:
        key = self.get(key_id)
        bucket = self._buckets.get(key_id)
        if bucket is None:
            with self._mutate_lock:
                bucket = self._buckets.setdefault(key_id, TokenBucket(key.rate_limit, self._clock))
        return bucket.try_acquire()

    def revoke_key(self, key_id: str) -> None:
        """Idempotent for already-revoked keys; unknown ids are an error."""
        with self._mutate_lock:
            key = self._keys.get(key_id)
            if key is None:
                raise UnknownKey(f"unknown key {key_id!r}")
            if not key.revoked:
                revoked = replace(key, revoked=True)
                snapshot = dict(self._keys)
                snapshot[key_id] = revoked
                self._keys = snapshot
                key = revoked
        if self._persist:
            self._persist(key)


def _iso_now() -> str:
    from datetime import datetime, timezone

    return datetime.now(timezone.utc).isoformat()
