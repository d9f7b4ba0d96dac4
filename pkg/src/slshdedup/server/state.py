"""In-memory server records: users, images, rate limits, load sharing.

Everything here is plain state plus pure decision logic; durability
lives in oplog.py and the surrounding orchestration in engine.py.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

DEFAULT_BURST = 60.0
DEFAULT_RATE = 1.0
DEFAULT_QUOTA = 1024 * 1024 * 1024  # 1 GiB


class TokenBucket:
    """Classic token bucket with fractional refill.

    tokens stays in [0, capacity]; refill is elapsed * rate, accumulated
    continuously, so 0.5 s at rate 1 adds 0.5 tokens (not enough for a
    cost-1 query).  The clock is injected for deterministic tests.
    """

    def __init__(self, capacity: float, rate: float, clock=time.monotonic) -> None:
        if capacity <= 0 or rate < 0:
            raise ValueError("capacity must be > 0 and rate >= 0")
        self.capacity = float(capacity)
        self.rate = float(rate)
        self._clock = clock
        self.tokens = float(capacity)
        self.last_refill = clock()

    def _refill(self) -> None:
        now = self._clock()
        elapsed = max(0.0, now - self.last_refill)
        self.last_refill = now
        self.tokens = min(self.capacity, self.tokens + elapsed * self.rate)

    def try_take(self, cost: float = 1.0) -> bool:
        self._refill()
        if self.tokens >= cost:
            self.tokens -= cost
            return True
        return False

    def peek(self) -> float:
        self._refill()
        return self.tokens


@dataclass
class UserRecord:
    user_id: str
    rate_bucket: TokenBucket
    quota_used: int = 0
    quota_limit: int = DEFAULT_QUOTA


@dataclass
class ImageRecord:
    """One stored ciphertext and who can serve its key."""

    image_ref: bytes
    size: int
    access_holders: list[str] = field(default_factory=list)
    exchange_counts: dict[str, int] = field(default_factory=dict)

    def add_holder(self, user_id: str) -> None:
        if user_id not in self.access_holders:
            self.access_holders.append(user_id)
            self.exchange_counts.setdefault(user_id, 0)

    def remove_holder(self, user_id: str) -> None:
        if user_id in self.access_holders:
            self.access_holders.remove(user_id)


class NoHolderOnline(Exception):
    """No connected serving client holds this image's key."""


def select_counterpart(
    record: ImageRecord, online: set[str], exclude: str = ""
) -> str:
    """Pick the serving holder with the fewest exchanges served.

    Ties break by access_holders order (oldest holder first), which
    keeps repeated selection deterministic and spreads load: after N
    completed exchanges over k always-online holders the per-holder
    counts differ by at most 1.
    """
    candidates = [
        u for u in record.access_holders if u in online and u != exclude
    ]
    if not candidates:
        raise NoHolderOnline(record.image_ref.hex())
    return min(candidates, key=lambda u: record.exchange_counts.get(u, 0))
