"""Context tracking and message interposition.

Every component owns a context table fed by lossy control datagrams.
The component's *current* context (newest live entry) is global: it
applies to all traffic the component sees, which is what lets context
tracking work without touching application payloads. Consequences the
rest of the system is built around:

- inbound invocations at a component in record mode open a cache entry
  keyed by (context id, callee endpoint, invocation bytes); replies on
  that connection, and only that connection, are appended to it;
- caller-initiated terminations aimed at a component in record mode are
  blocked and held, so the callee finishes its work in the background;
  the held termination is released when the callee completes, or the
  context's record deadline cancels the work and finalizes the entry
  incomplete;
- outbound calls from a component in record/replay mode propagate the
  context to destinations not yet contacted this phase, while the
  propagate window is open;
- outbound calls in replay mode are served from the cache on a complete
  entry, otherwise forwarded live over a shadow connection.

Unrelated concurrent traffic is legally swept into a current context;
its entries are garbage that no replay ever looks up.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .cache import CacheOverflow, ReplyCache
from .model import Mode
from .timebase import EventLoop
from .transport import (ConnectionState, ControlMessage, Endpoint, Frame,
                        FrameKind, Network, Connection)


def cache_key(context_id: int, callee: Endpoint, payload: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack(">Q", context_id))
    h.update(str(callee).encode())
    h.update(b"\x00")
    h.update(payload)
    return h.digest()


_TAG_PREFIX = b"CTX!"
_TAG_STRUCT = struct.Struct(">QBQ")


def tag_payload(context_id: int, mode: Mode, deadline_ns: int, payload: bytes) -> bytes:
    return _TAG_PREFIX + _TAG_STRUCT.pack(context_id, mode.value, deadline_ns) + payload


_TAG_LEN = len(_TAG_PREFIX) + _TAG_STRUCT.size


def split_tag(payload: bytes):
    """Returns ((context_id, mode, deadline) | None, untagged payload)."""
    if payload.startswith(_TAG_PREFIX):
        head = payload[len(_TAG_PREFIX):_TAG_LEN]
        context_id, mode_byte, deadline = _TAG_STRUCT.unpack(head)
        return (context_id, Mode(mode_byte), deadline), payload[_TAG_LEN:]
    return None, payload


@dataclass
class ModeFlags:
    """What machinery a competing design uses."""

    name: str = "ubora"
    sampling_scale: float = 1.0
    interpose: bool = True         # False: transport is a pure pass-through
    use_datagrams: bool = True     # control plane exists
    jit_propagation: bool = True   # False: a control precedes every send in context
    local_expiry: bool = True      # False: entries live until an explicit reset
    broadcast_contexts: bool = False  # context/reset datagrams go to every component
    tag_in_payload: bool = False   # application-level context tracking
    use_cache: bool = True         # memoization on
    toggle_timeouts: bool = False  # mature runs happen under a global timeout boost


@dataclass
class ContextEntry:
    context_id: int
    mode: Mode
    record_deadline_ns: int
    propagate_deadline_ns: int
    installed_seq: int
    propagated: dict = field(default_factory=dict)  # Endpoint -> True, ordered
    expiry_event: object = None
    # What control datagrams advertise; the front's own entry outlives this
    # by the wait margin but must not extend anyone else's timer.
    advertised_deadline_ns: int = 0

    def __post_init__(self):
        if self.advertised_deadline_ns == 0:
            self.advertised_deadline_ns = self.record_deadline_ns


class ContextTable:
    """Per-component map: context id -> mode, deadlines, propagation state."""

    def __init__(self, component: "ComponentRuntime"):
        self.component = component
        self.entries: dict[int, ContextEntry] = {}
        self._seq = 0

    def install(self, context_id: int, mode: Mode, record_deadline_ns: int) -> Optional[ContextEntry]:
        mesh = self.component.mesh
        now = mesh.loop.now_ns
        if mode is Mode.NORMAL:
            self.remove(context_id)
            return None
        if record_deadline_ns <= now:
            return None  # arrived after its own deadline
        entry = self.entries.get(context_id)
        if entry is not None:
            if entry.mode is mode:
                return entry  # duplicate control, idempotent
            # Mode switch (record -> replay): new phase, fresh propagation state.
            entry.mode = mode
            entry.record_deadline_ns = max(entry.record_deadline_ns, record_deadline_ns)
            entry.advertised_deadline_ns = record_deadline_ns
            entry.propagate_deadline_ns = now + mesh.propagate_timeout_ns
            entry.propagated = {}
            self._seq += 1
            entry.installed_seq = self._seq
            self._reschedule_expiry(entry)
            return entry
        self._seq += 1
        entry = ContextEntry(
            context_id=context_id,
            mode=mode,
            record_deadline_ns=record_deadline_ns,
            propagate_deadline_ns=now + mesh.propagate_timeout_ns,
            installed_seq=self._seq,
        )
        self.entries[context_id] = entry
        self._reschedule_expiry(entry)
        return entry

    def _reschedule_expiry(self, entry: ContextEntry) -> None:
        mesh = self.component.mesh
        if entry.expiry_event is not None:
            entry.expiry_event.cancel()
            entry.expiry_event = None
        if mesh.flags.local_expiry:
            entry.expiry_event = mesh.loop.schedule_at(
                entry.record_deadline_ns,
                lambda: self.component.on_context_expired(entry.context_id))

    def remove(self, context_id: int) -> None:
        entry = self.entries.pop(context_id, None)
        if entry is not None and entry.expiry_event is not None:
            entry.expiry_event.cancel()

    def current(self, now_ns: int) -> Optional[ContextEntry]:
        best = None
        for entry in self.entries.values():
            if entry.record_deadline_ns <= now_ns:
                continue
            if best is None or entry.installed_seq > best.installed_seq:
                best = entry
        return best

    def get_live(self, context_id: int, now_ns: int) -> Optional[ContextEntry]:
        entry = self.entries.get(context_id)
        if entry is None or entry.record_deadline_ns <= now_ns:
            return None
        return entry

    def __len__(self) -> int:
        return len(self.entries)


class CallHandle:
    """Caller-side view of one invocation and its reply stream."""

    __slots__ = ("dest", "payload", "replies", "completed", "terminated",
                 "served_from_cache", "shadow", "conn", "on_reply", "on_complete")

    def __init__(self, dest: Endpoint, payload: bytes,
                 on_reply: Optional[Callable] = None,
                 on_complete: Optional[Callable] = None):
        self.dest = dest
        self.payload = payload
        self.replies: list[bytes] = []
        self.completed = False
        self.terminated = False
        self.served_from_cache = False
        self.shadow = False
        self.conn: Optional[Connection] = None
        self.on_reply = on_reply
        self.on_complete = on_complete

    def _deliver(self, payload: bytes) -> None:
        if self.terminated or self.completed:
            return
        self.replies.append(payload)
        if self.on_reply is not None:
            self.on_reply(self, payload)

    def _complete(self) -> None:
        if self.terminated or self.completed:
            return
        self.completed = True
        if self.on_complete is not None:
            self.on_complete(self)


class Task:
    """A unit of component work occupying one worker slot."""

    def __init__(self):
        self.component: Optional[ComponentRuntime] = None
        self.started = False
        self.cancelled = False
        self.finished = False

    def start(self) -> None:  # pragma: no cover - overridden
        raise NotImplementedError

    def cancel(self) -> None:
        self.cancelled = True

    def finish(self) -> None:
        if self.finished:
            return
        self.finished = True
        if self.component is not None and self.started:
            self.component._release_worker()


class BusyTask(Task):
    """Burns worker time; models per-datagram processing stolen from the app."""

    def __init__(self, cost_ns: int):
        super().__init__()
        self.cost_ns = cost_ns

    def start(self) -> None:
        self.started = True
        self.component.mesh.loop.schedule(self.cost_ns, self.finish)


class ComponentRuntime:
    """A mesh node: worker pool, context table, interposition hooks.

    Service behavior plugs in through handle_invocation()/on_cancel().
    """

    def __init__(self, mesh: "Mesh", endpoint: Endpoint, role: str,
                 memoize: bool, workers: int):
        self.mesh = mesh
        self.endpoint = endpoint
        self.role = role  # front | middle | back
        self.memoize = memoize
        self.workers = workers
        self.table = ContextTable(self)
        self._busy = 0
        self._queue: deque[Task] = deque()
        # ctx id -> {Connection: True}; connections currently recording/held.
        self._recording: dict[int, dict] = {}
        self._held: dict[int, dict] = {}
        mesh.network.register(self)
        mesh.components.append(self)

    # -- worker pool ------------------------------------------------------

    def submit(self, task: Task, front_of_queue: bool = False) -> None:
        task.component = self
        if self._busy < self.workers:
            self._busy += 1
            task.started = True
            task.start()
        elif front_of_queue:
            self._queue.appendleft(task)
        else:
            self._queue.append(task)

    def _release_worker(self) -> None:
        self._busy -= 1
        while self._queue:
            task = self._queue.popleft()
            if task.cancelled:
                continue
            self._busy += 1
            task.started = True
            task.start()
            break

    def busy_workers(self) -> int:
        return self._busy

    # -- outbound calls ---------------------------------------------------

    def call(self, dest: Endpoint, payload: bytes, *,
             ctx_entry: Optional[ContextEntry] = None,
             tag: Optional[tuple] = None,
             on_reply: Optional[Callable] = None,
             on_complete: Optional[Callable] = None) -> CallHandle:
        """Invoke dest. Context handling depends on the active design mode."""
        mesh = self.mesh
        now = mesh.loop.now_ns
        handle = CallHandle(dest, payload, on_reply, on_complete)
        entry = None
        if mesh.flags.interpose and not mesh.flags.tag_in_payload:
            entry = ctx_entry if ctx_entry is not None else self.table.current(now)
        wire_payload = payload
        replay_ctx = None

        if mesh.flags.tag_in_payload and tag is not None:
            tag_ctx, tag_mode, tag_deadline = tag
            wire_payload = tag_payload(tag_ctx, tag_mode, tag_deadline, payload)
            if tag_mode is Mode.REPLAY:
                replay_ctx = tag_ctx
        elif entry is not None and entry.mode is Mode.REPLAY:
            replay_ctx = entry.context_id

        if replay_ctx is not None and mesh.flags.use_cache and mesh.dest_memoized(dest) \
                and not mesh.replay_force_shadow:
            # Keys always cover the untagged invocation bytes, so tagged record
            # and replay phases (whose tag mode bytes differ) agree on the key.
            key = cache_key(replay_ctx, dest, payload)
            cached = mesh.cache.get_entry(key, now)
            if cached is not None and cached.complete:
                handle.served_from_cache = True
                mesh.count_ctx(replay_ctx, "replay_hits")
                replies = list(cached.replies)

                def deliver_cached():
                    for reply in replies:
                        handle._deliver(reply)
                    handle._complete()

                mesh.loop.schedule(mesh.tuning.cache_read_latency_ns, deliver_cached)
                return handle
            handle.shadow = True
            mesh.count_ctx(replay_ctx, "shadow_calls")

        if entry is not None and entry.mode in (Mode.RECORD, Mode.REPLAY):
            self.propagate_context(entry, dest)
            mesh.note_contact(entry, dest)

        conn = mesh.network.open_connection(self.endpoint, dest)
        conn.caller_handle = handle
        conn.shadow = handle.shadow
        handle.conn = conn
        mesh.network.send(conn, self.endpoint, Frame(FrameKind.DATA, wire_payload))
        return handle

    def propagate_context(self, entry: ContextEntry, dest: Endpoint) -> bool:
        """Send a control datagram ahead of first contact; returns whether sent."""
        mesh = self.mesh
        if not mesh.flags.use_datagrams:
            return False
        now = mesh.loop.now_ns
        if mesh.flags.jit_propagation:
            if dest in entry.propagated:
                return False
            if now >= entry.propagate_deadline_ns:
                return False
            entry.propagated[dest] = True
        msg = ControlMessage(entry.context_id, entry.mode.value, entry.advertised_deadline_ns)
        mesh.network.send_control(dest, msg)
        mesh.count_ctx(entry.context_id, "controls_sent")
        return True

    def terminate(self, handle: CallHandle) -> None:
        """Caller-side timeout trigger: send an end-of-call toward the callee."""
        if handle.completed or handle.terminated:
            return
        handle.terminated = True
        if handle.conn is None:
            return
        self.mesh.network.send(handle.conn, self.endpoint, Frame(FrameKind.END_OF_CALL))

    # -- inbound: invocations and terminations ----------------------------

    def ingress_invocation(self, conn: Connection, frame: Frame) -> None:
        mesh = self.mesh
        now = mesh.loop.now_ns
        if frame.kind is FrameKind.END_OF_CALL:
            self._ingress_termination(conn)
            return

        if mesh.flags.interpose and self.memoize and mesh.flags.use_cache:
            record_ctx = None
            deadline = 0
            tag, inner = split_tag(frame.payload)
            if mesh.flags.tag_in_payload:
                if tag is not None and tag[1] is Mode.RECORD:
                    record_ctx, deadline = tag[0], tag[2]
            else:
                cur = self.table.current(now)
                if cur is not None and cur.mode is Mode.RECORD:
                    record_ctx, deadline = cur.context_id, cur.record_deadline_ns
            if record_ctx is not None:
                self._open_record_key(conn, record_ctx, deadline, inner)

        self.handle_invocation(conn, frame.payload)

    def _open_record_key(self, conn: Connection, context_id: int,
                         deadline_ns: int, payload: bytes) -> None:
        mesh = self.mesh
        now = mesh.loop.now_ns
        if conn.record_key is not None:
            # Split: a new invocation on the same connection starts a new value.
            mesh.cache.finalize(conn.record_key, now, complete=conn.callee_task is None)
            self._unregister_recording(conn)
        key = cache_key(context_id, self.endpoint, payload)
        if mesh.cache.has_entry(key):
            return  # first recorder wins; never interleave a second connection
        conn.record_key = key
        conn.record_context_id = context_id
        conn.record_deadline_ns = deadline_ns
        mesh.cache.create(key, context_id, now)
        self._recording.setdefault(context_id, {})[conn] = True

    def _unregister_recording(self, conn: Connection) -> None:
        conns = self._recording.get(conn.record_context_id)
        if conns is not None:
            conns.pop(conn, None)
            if not conns:
                self._recording.pop(conn.record_context_id, None)
        conn.record_key = None
        conn.record_context_id = 0

    def _ingress_termination(self, conn: Connection) -> None:
        mesh = self.mesh
        now = mesh.loop.now_ns
        block_ctx = None
        if mesh.flags.interpose:
            if mesh.flags.tag_in_payload:
                # Tagged tracking is exact: block only if this connection records.
                if conn.record_key is not None:
                    block_ctx = conn.record_context_id
            else:
                cur = self.table.current(now)
                if cur is not None and cur.mode is Mode.RECORD:
                    block_ctx = cur.context_id
                elif conn.record_key is not None:
                    live = self.table.get_live(conn.record_context_id, now)
                    if live is not None and live.mode is Mode.RECORD:
                        block_ctx = conn.record_context_id
        if block_ctx is not None:
            conn.state = ConnectionState.CALLER_TERMINATED
            conn.held_termination = Frame(FrameKind.END_OF_CALL)
            self._held.setdefault(block_ctx, {})[conn] = True
            if mesh.flags.tag_in_payload and conn.record_deadline_ns > now:
                # No context table in tagged mode; bound the hold explicitly.
                mesh.loop.schedule_at(conn.record_deadline_ns,
                                      lambda: self._release_expired_hold(conn))
            return
        self._cancel_callee_work(conn)

    def _release_expired_hold(self, conn: Connection) -> None:
        if conn.state is ConnectionState.CALLER_TERMINATED and conn.callee_task is not None:
            for ctx in [c for c, conns in self._held.items() if conn in conns]:
                self._held[ctx].pop(conn, None)
                if not self._held[ctx]:
                    self._held.pop(ctx, None)
            self._cancel_callee_work(conn)

    def _cancel_callee_work(self, conn: Connection) -> None:
        now = self.mesh.loop.now_ns
        if conn.callee_task is not None:
            conn.callee_task.cancel()
            conn.callee_task = None
        if conn.record_key is not None:
            self.mesh.cache.finalize(conn.record_key, now, complete=False)
            self.mesh.flag_context(conn.record_context_id)
            self._unregister_recording(conn)
        conn.state = ConnectionState.CLOSED

    # -- inbound: replies at the caller -----------------------------------

    def ingress_reply(self, conn: Connection, frame: Frame) -> None:
        handle = conn.caller_handle
        if handle is None:
            return
        if frame.kind is FrameKind.END_OF_CALL:
            handle._complete()
        else:
            payload = frame.payload
            if self.mesh.flags.tag_in_payload:
                _, payload = split_tag(payload)
            handle._deliver(payload)

    # -- reply emission at the callee --------------------------------------

    def send_reply(self, conn: Connection, payload: bytes) -> None:
        mesh = self.mesh
        extra = 0
        if conn.record_key is not None:
            try:
                mesh.cache.put_append(conn.record_key, payload, mesh.loop.now_ns,
                                      conn.record_context_id)
                extra = mesh.tuning.record_write_cost_ns
            except CacheOverflow:
                self._unregister_recording(conn)
        mesh.network.send(conn, self.endpoint, Frame(FrameKind.DATA, payload),
                          extra_latency_ns=extra)

    def complete_call(self, conn: Connection) -> None:
        """Callee finished: finalize recording, emit the reply terminator."""
        mesh = self.mesh
        now = mesh.loop.now_ns
        conn.callee_task = None
        if conn.record_key is not None:
            mesh.cache.finalize(conn.record_key, now, complete=True)
            self._unregister_recording(conn)
        mesh.network.send(conn, self.endpoint, Frame(FrameKind.END_OF_CALL))
        if conn.state is ConnectionState.CALLER_TERMINATED:
            # The held termination has nothing left to protect.
            ctxs = [ctx for ctx, conns in self._held.items() if conn in conns]
            for ctx in ctxs:
                self._held[ctx].pop(conn, None)
                if not self._held[ctx]:
                    self._held.pop(ctx, None)
            conn.held_termination = None
            conn.state = ConnectionState.CLOSED

    # -- control plane -----------------------------------------------------

    def ingress_control(self, msg: ControlMessage) -> None:
        mesh = self.mesh
        self.handle_control(msg)
        if mesh.tuning.datagram_handling_cost_ns > 0:
            self.submit(BusyTask(mesh.tuning.datagram_handling_cost_ns), front_of_queue=True)

    def handle_control(self, msg: ControlMessage) -> None:
        self.table.install(msg.context_id, Mode(msg.mode), msg.record_deadline_ns)

    def install_local(self, context_id: int, mode: Mode, deadline_ns: int,
                      margin_ns: int = 0) -> ContextEntry:
        """Front components set their own context without a datagram; their
        entry waits margin_ns past the deadline they advertise to others."""
        entry = self.table.install(context_id, mode, deadline_ns)
        if entry is not None and margin_ns > 0:
            entry.advertised_deadline_ns = deadline_ns
            entry.record_deadline_ns = deadline_ns + margin_ns
            self.table._reschedule_expiry(entry)
        return entry

    def on_context_expired(self, context_id: int) -> None:
        """Local record timeout: revert to normal, cancel protected work."""
        self.table.remove(context_id)
        for conn in list(self._held.pop(context_id, {})):
            conn.held_termination = None
            self._cancel_callee_work(conn)
        for conn in list(self._recording.pop(context_id, {})):
            self.mesh.cache.finalize(conn.record_key, self.mesh.loop.now_ns, complete=False)
            self.mesh.flag_context(context_id)
            conn.record_key = None
            conn.record_context_id = 0

    # -- service plug-in points --------------------------------------------

    def handle_invocation(self, conn: Connection, payload: bytes) -> None:  # pragma: no cover
        raise NotImplementedError


class Mesh:
    """Shared simulation state: loop, network, cache, mode flags, stats."""

    def __init__(self, loop: EventLoop, network: Network, cache: ReplyCache,
                 tuning, flags: ModeFlags, propagate_timeout_ns: int):
        self.loop = loop
        self.network = network
        self.cache = cache
        self.tuning = tuning
        self.flags = flags
        self.propagate_timeout_ns = propagate_timeout_ns
        self.components: list[ComponentRuntime] = []
        self.failed_contexts: set[int] = set()
        self.ctx_stats: dict[int, dict] = {}
        self.ctx_contacted: dict[int, dict] = {}
        self.toggle_depth = 0
        self.replay_force_shadow = False
        self._memoized: dict[Endpoint, bool] = {}

    def register_memoized(self, endpoint: Endpoint, memoize: bool) -> None:
        self._memoized[endpoint] = memoize

    def dest_memoized(self, endpoint: Endpoint) -> bool:
        return self._memoized.get(endpoint, False)

    def flag_context(self, context_id: int) -> None:
        if context_id:
            self.failed_contexts.add(context_id)

    def context_failed(self, context_id: int) -> bool:
        return context_id in self.failed_contexts

    def count_ctx(self, context_id: int, counter: str, n: int = 1) -> None:
        stats = self.ctx_stats.setdefault(context_id, {})
        stats[counter] = stats.get(counter, 0) + n

    def note_contact(self, entry: ContextEntry, dest: Endpoint) -> None:
        if entry.mode is Mode.RECORD:
            self.ctx_contacted.setdefault(entry.context_id, {})[dest] = True

    def effective_timeout_ns(self, base_ns: int) -> int:
        if self.flags.toggle_timeouts and self.toggle_depth > 0:
            return int(base_ns * self.tuning.toggle_factor)
        return base_ns

    def broadcast_control(self, msg: ControlMessage, context_id: int) -> None:
        for component in self.components:
            self.network.send_control(component.endpoint, msg)
            self.count_ctx(context_id, "controls_sent")

    def tables_holding(self, context_id: int) -> list[Endpoint]:
        return [c.endpoint for c in self.components if context_id in c.table.entries]
