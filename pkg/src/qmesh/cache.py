"""In-memory store for recorded reply sequences, with TTL and capacity limits.

Each entry maps an invocation key to the ordered replies observed on the
initiating connection. Expiry is half-open: an entry created at t with
ttl d is readable for now < t + d. On overflow the new entry (or the
entry being grown) is rejected whole and its context is flagged failed;
nothing else is evicted, so one oversized context cannot silently break
other contexts' mature executions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional


@dataclass
class CacheEntry:
    key: bytes
    context_id: int
    created_at_ns: int
    replies: list = field(default_factory=list)
    size_bytes: int = 0
    complete: bool = False


class CacheOverflow(Exception):
    def __init__(self, context_id: int):
        self.context_id = context_id
        super().__init__(f"cache capacity exceeded recording context {context_id}")


class ReplyCache:
    def __init__(self, capacity_bytes: int, ttl_ns: int,
                 on_overflow: Optional[Callable[[int], None]] = None):
        self.capacity_bytes = capacity_bytes
        self.ttl_ns = ttl_ns
        self.on_overflow = on_overflow
        self._entries: dict[bytes, CacheEntry] = {}
        self._used_bytes = 0
        self._last_activity: dict[int, int] = {}  # context_id -> last write ns
        self._open_entries: dict[int, int] = {}   # context_id -> incomplete count

    def _live(self, entry: CacheEntry, now_ns: int) -> bool:
        return now_ns < entry.created_at_ns + self.ttl_ns

    def _touch(self, context_id: int, now_ns: int) -> None:
        self._last_activity[context_id] = now_ns

    def _drop(self, entry: CacheEntry) -> None:
        if not entry.complete:
            self._close_open(entry.context_id)
        self._used_bytes -= entry.size_bytes
        del self._entries[entry.key]

    def has_entry(self, key: bytes) -> bool:
        return key in self._entries

    def create(self, key: bytes, context_id: int, now_ns: int) -> None:
        """Open an (empty, incomplete) entry; replaces an expired one."""
        existing = self._entries.get(key)
        if existing is not None:
            if self._live(existing, now_ns):
                return
            self._drop(existing)
        self._entries[key] = CacheEntry(key=key, context_id=context_id, created_at_ns=now_ns)
        self._open_entries[context_id] = self._open_entries.get(context_id, 0) + 1
        self._touch(context_id, now_ns)

    def put_append(self, key: bytes, reply: bytes, now_ns: int, context_id: int = 0) -> None:
        entry = self._entries.get(key)
        if entry is not None and not self._live(entry, now_ns):
            self._drop(entry)
            entry = None
        if entry is None:
            entry = CacheEntry(key=key, context_id=context_id, created_at_ns=now_ns)
            self._entries[key] = entry
        if self._used_bytes + len(reply) > self.capacity_bytes:
            ctx = entry.context_id
            self._drop(entry)
            self._touch(ctx, now_ns)
            if self.on_overflow is not None:
                self.on_overflow(ctx)
            raise CacheOverflow(ctx)
        entry.replies.append(reply)
        entry.size_bytes += len(reply)
        self._used_bytes += len(reply)
        self._touch(entry.context_id, now_ns)

    def finalize(self, key: bytes, now_ns: int, complete: bool) -> Optional[CacheEntry]:
        entry = self._entries.get(key)
        if entry is None:
            return None
        if not entry.complete:
            self._close_open(entry.context_id)
        entry.complete = complete
        self._touch(entry.context_id, now_ns)
        return entry

    def _close_open(self, context_id: int) -> None:
        count = self._open_entries.get(context_id, 0)
        if count <= 1:
            self._open_entries.pop(context_id, None)
        else:
            self._open_entries[context_id] = count - 1

    def open_entry_count(self, context_id: int) -> int:
        """Entries created under the context but not yet finalized: the
        sub-executions whose recording is still in flight."""
        return self._open_entries.get(context_id, 0)

    def get_all(self, key: bytes, now_ns: int) -> tuple[bool, list]:
        """Hit iff the entry exists and is still live; replies in insertion order."""
        entry = self._entries.get(key)
        if entry is None or not self._live(entry, now_ns):
            return False, []
        return True, list(entry.replies)

    def get_entry(self, key: bytes, now_ns: int) -> Optional[CacheEntry]:
        entry = self._entries.get(key)
        if entry is None or not self._live(entry, now_ns):
            return None
        return entry

    def evict_expired(self, now_ns: int) -> int:
        stale = [e for e in self._entries.values() if not self._live(e, now_ns)]
        for entry in stale:
            self._drop(entry)
        return len(stale)

    def used_bytes(self) -> int:
        return self._used_bytes

    def entry_count(self) -> int:
        return len(self._entries)

    def last_activity_ns(self, context_id: int) -> Optional[int]:
        return self._last_activity.get(context_id)

    def dump(self, path) -> None:
        """Debug format: one line per entry (hex key, context id, reply sizes)."""
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self._entries):
                entry = self._entries[key]
                sizes = ",".join(str(len(r)) for r in entry.replies)
                fh.write(f"{key.hex()} {entry.context_id} [{sizes}]\n")
