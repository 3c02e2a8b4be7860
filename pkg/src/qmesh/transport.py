"""In-process loopback transport.

Connections are reliable, ordered, bidirectional message streams carrying
length-prefixed frames (Data | EndOfCall); the control plane is a lossy,
unordered datagram channel with a fixed 17-byte layout. The transport
knows nothing about execution contexts: nodes register ingress hooks and
the interposition layer decides what to do with each frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Optional

from .timebase import EventLoop


class TransportError(Exception):
    pass


@dataclass(frozen=True, order=True)
class Endpoint:
    address: str
    port: int

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


class FrameKind(IntEnum):
    DATA = 0
    END_OF_CALL = 1


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    payload: bytes = b""

    def encode(self) -> bytes:
        return struct.pack(">IB", len(self.payload), int(self.kind)) + self.payload

    @staticmethod
    def decode(raw: bytes) -> "Frame":
        if len(raw) < 5:
            raise TransportError("short frame")
        length, kind = struct.unpack(">IB", raw[:5])
        payload = raw[5:5 + length]
        if len(payload) != length:
            raise TransportError("truncated frame payload")
        return Frame(FrameKind(kind), payload)


_CONTROL_STRUCT = struct.Struct(">QBQ")  # context id, mode byte, deadline ns


@dataclass(frozen=True)
class ControlMessage:
    context_id: int
    mode: int  # model.Mode value byte; 0 resets to normal
    record_deadline_ns: int

    def encode(self) -> bytes:
        return _CONTROL_STRUCT.pack(self.context_id, self.mode, self.record_deadline_ns)

    @staticmethod
    def decode(raw: bytes) -> "ControlMessage":
        if len(raw) != _CONTROL_STRUCT.size:
            raise TransportError("control datagram must be exactly 17 bytes")
        context_id, mode, deadline = _CONTROL_STRUCT.unpack(raw)
        return ControlMessage(context_id, mode, deadline)


class ConnectionState(Enum):
    OPEN = "open"
    CALLER_TERMINATED = "caller_terminated"
    CLOSED = "closed"


class Connection:
    def __init__(self, caller: Endpoint, callee: Endpoint, connection_id: int = 0):
        self.connection_id = connection_id
        self.caller = caller
        self.callee = callee
        self.state = ConnectionState.OPEN
        self.shadow = False
        self._last_due_to_caller_ns = 0
        self._last_due_to_callee_ns = 0
        # Slots owned by the interposition layer.
        self.record_key: Optional[bytes] = None
        self.record_context_id: int = 0
        self.record_deadline_ns: int = 0
        self.held_termination: Optional[Frame] = None
        self.caller_handle = None  # the caller-side call bookkeeping object
        self.callee_task = None    # the callee-side in-flight work, if any

    def __repr__(self) -> str:
        return f"<conn {self.connection_id} {self.caller}->{self.callee} {self.state.value}>"


class Network:
    """Registry plus scheduled delivery. One instance per simulation."""

    def __init__(self, loop: EventLoop, *, net_latency_ns: int, datagram_latency_ns: int,
                 datagram_loss: float, loss_rng, trace_frames: bool = False):
        self.loop = loop
        self.net_latency_ns = net_latency_ns
        self.datagram_latency_ns = datagram_latency_ns
        self.datagram_loss = datagram_loss
        self.loss_rng = loss_rng
        self.nodes: dict[Endpoint, object] = {}
        self.trace_frames = trace_frames
        self.frame_trace: list[tuple] = []  # (conn_id, direction, encoded frame)
        self.datagrams_sent = 0
        self.datagrams_delivered = 0
        self._next_conn_id = 1

    def register(self, node) -> None:
        if node.endpoint in self.nodes:
            raise TransportError(f"endpoint {node.endpoint} already registered")
        self.nodes[node.endpoint] = node

    def open_connection(self, caller: Endpoint, callee: Endpoint) -> Connection:
        if callee not in self.nodes:
            raise TransportError(f"unknown callee {callee}")
        conn = Connection(caller, callee, self._next_conn_id)
        self._next_conn_id += 1
        return conn

    def send(self, conn: Connection, sender: Endpoint, frame: Frame,
             extra_latency_ns: int = 0) -> None:
        """Deliver after the wire latency. The stream is ordered: a frame is
        never delivered before one sent earlier in the same direction, even
        when per-frame extra latency differs."""
        if conn.state is ConnectionState.CLOSED:
            return
        to_caller = sender == conn.callee
        if self.trace_frames:
            self.frame_trace.append(
                (conn.connection_id, "c2r" if to_caller else "r2c", frame.encode()))
        due = self.loop.now_ns + self.net_latency_ns + extra_latency_ns
        if to_caller:
            due = max(due, conn._last_due_to_caller_ns)
            conn._last_due_to_caller_ns = due
        else:
            due = max(due, conn._last_due_to_callee_ns)
            conn._last_due_to_callee_ns = due
        self.loop.schedule_at(due, lambda: self._deliver(conn, frame, to_caller))

    def _deliver(self, conn: Connection, frame: Frame, to_caller: bool) -> None:
        if conn.state is ConnectionState.CLOSED:
            return
        if to_caller:
            if conn.state is ConnectionState.CALLER_TERMINATED:
                return  # recorded on egress, never delivered to the caller
            node = self.nodes.get(conn.caller)
            if node is not None:
                node.ingress_reply(conn, frame)
        else:
            node = self.nodes.get(conn.callee)
            if node is not None:
                node.ingress_invocation(conn, frame)

    def send_control(self, dest: Endpoint, msg: ControlMessage) -> bool:
        """Returns False when the datagram was dropped in flight."""
        self.datagrams_sent += 1
        if self.datagram_loss > 0.0 and self.loss_rng.random() < self.datagram_loss:
            return False
        node = self.nodes.get(dest)
        if node is None:
            return False
        raw = msg.encode()
        self.loop.schedule(self.datagram_latency_ns,
                           lambda: self._deliver_control(node, raw))
        return True

    def _deliver_control(self, node, raw: bytes) -> None:
        self.datagrams_delivered += 1
        node.ingress_control(ControlMessage.decode(raw))
