import threading

import pytest

from traitmark.auth import (
    KeyManager,
    MissingCredentials,
    RevokedKey,
    TokenBucket,
    UnknownKey,
)


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t

    def advance(self, s):
        self.t += s


def manager(clock=None):
    return KeyManager(clock=clock or FakeClock(), wall_clock=lambda: "2026-01-01T00:00:00+00:00")


def test_issue_defaults():
    km = manager()
    key, secret = km.issue_key("teacher")
    assert key.rate_limit == 60
    assert key.scopes == frozenset({"score", "read"})
    assert secret not in key.to_dict().values()  # clear secret never stored


def test_issue_distinct_keys():
    km = manager()
    k1, s1 = km.issue_key("a")
    k2, s2 = km.issue_key("a")
    assert k1.key_id != k2.key_id
    assert s1 != s2


def test_issue_invalid_inputs():
    km = manager()
    with pytest.raises(ValueError, match="invalid scopes"):
        km.issue_key("a", scopes=["score", "root"])
    with pytest.raises(ValueError, match="rate_limit"):
        km.issue_key("a", rate_limit=0)


def test_authorize_valid_key():
    km = manager()
    key, secret = km.issue_key("teacher", scopes=["read"])
    principal = km.authorize(f"Bearer {secret}")
    assert principal.owner == "teacher"
    assert principal.key_id == key.key_id
    assert principal.allows("read") and not principal.allows("admin")


def test_authorize_missing_header():
    km = manager()
    with pytest.raises(MissingCredentials):
        km.authorize(None)
    with pytest.raises(MissingCredentials):
        km.authorize("Basic dXNlcjpwYXNz")


def test_authorize_tampered_secret():
    km = manager()
    _, secret = km.issue_key("teacher")
    flipped = secret[:-1] + ("A" if secret[-1] != "A" else "B")
    with pytest.raises(UnknownKey):
        km.authorize(f"Bearer {flipped}")


def test_authorize_revoked_key():
    km = manager()
    key, secret = km.issue_key("teacher")
    km.revoke_key(key.key_id)
    with pytest.raises(RevokedKey):
        km.authorize(f"Bearer {secret}")


def test_revoke_idempotent_but_unknown_errors():
    km = manager()
    key, _ = km.issue_key("teacher")
    km.revoke_key(key.key_id)
    km.revoke_key(key.key_id)  # second revoke is a no-op
    with pytest.raises(UnknownKey):
        km.revoke_key("deadbeef00000000")


def test_admin_scope_implies_all():
    km = manager()
    _, secret = km.issue_key("root", scopes=["admin"])
    principal = km.authorize(f"Bearer {secret}")
    assert principal.allows("score") and principal.allows("read") and principal.allows("admin")


# ---------------------------------------------------------------------------
# Token bucket
# ---------------------------------------------------------------------------


def test_bucket_capacity_then_deny_with_refill_time():
    clock = FakeClock()
    km = manager(clock)
    key, _ = km.issue_key("t", rate_limit=5)
    for _ in range(5):
        assert km.rate_check(key.key_id).allowed
    denied = km.rate_check(key.key_id)
    assert not denied.allowed
    assert denied.retry_after == 12  # 60s / 5 tokens
    clock.advance(12.0)
    assert km.rate_check(key.key_id).allowed


def test_bucket_law_over_window():
    # allowed <= capacity + refill * window for any call pattern
    clock = FakeClock()
    bucket = TokenBucket(10, clock)
    allowed = 0
    window = 120.0
    step = 0.05
    while clock.t < window:
        if bucket.try_acquire().allowed:
            allowed += 1
        clock.advance(step)
    assert allowed <= 10 + (10 / 60.0) * window + 1


def test_bucket_concurrent_exactly_capacity():
    clock = FakeClock()
    bucket = TokenBucket(10, clock)
    results = []
    barrier = threading.Barrier(100)

    def worker():
        barrier.wait()
        results.append(bucket.try_acquire().allowed)

    threads = [threading.Thread(target=worker) for _ in range(100)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(results) == 10


def test_rate_limit_isolated_per_key():
    clock = FakeClock()
    km = manager(clock)
    k1, _ = km.issue_key("a", rate_limit=2)
    k2, _ = km.issue_key("b", rate_limit=2)
    assert km.rate_check(k1.key_id).allowed
    assert km.rate_check(k1.key_id).allowed
    assert not km.rate_check(k1.key_id).allowed  # k1 saturated
    assert km.rate_check(k2.key_id).allowed  # k2 unaffected


def test_secret_entropy_at_least_256_bits():
    km = manager()
    _, secret = km.issue_key("a")
    random_part = secret.split(".", 1)[1]
    # token_urlsafe(32) encodes 32 random bytes = 256 bits
    assert len(random_part) >= 43
