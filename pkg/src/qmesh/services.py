"""Synthetic data-intensive services with the execution structure under study.

Two services: a data-parallel sharded top-k search (a front fanning out
to per-shard paths, optionally through re-executed middle aggregators)
and a partial-redundancy recommender (small and large databases scoring
the same request, the large one preferred when it beats the timeout).

Result content is a pure function of (content seed, query params), so a
query's mature answer has an exact closed-form oracle independent of the
transport: the global top-k over all shards, or the large-db top-k.
Service *times* are random (lognormal body, Pareto tail) and drawn from
per-component streams, so latency depends on load while content never
does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

from .config import LatencyModel, RunConfig, ServiceConfig
from .interpose import (CallHandle, ComponentRuntime, ContextEntry, Mesh, Task,
                        split_tag)
from .model import Answer, AnswerKind, Mode, Query, top_k
from .rng import RngHub
from .timebase import seconds_to_ns
from .transport import Connection, Endpoint


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    endpoint: Endpoint
    role: str  # front | middle | back
    memoize: bool
    service_time: Optional[LatencyModel] = None
    online_timeout_ns: int = 0
    workers: int = 2


def draw_service_ns(model: LatencyModel, rng, heavy: bool, heavy_factor: float) -> int:
    if model.distribution == "pareto":
        scale = model.mean_s * (model.tail_alpha - 1.0) / model.tail_alpha
        x = scale * rng.paretovariate(model.tail_alpha)
    else:
        mu = math.log(model.mean_s) - 0.5 * model.sigma * model.sigma
        x = rng.lognormvariate(mu, model.sigma)
        if model.tail_probability > 0.0 and rng.random() < model.tail_probability:
            scale = model.tail_scale_s if model.tail_scale_s > 0 else 3.0 * model.mean_s
            x = scale * rng.paretovariate(model.tail_alpha)
    if heavy:
        x *= heavy_factor
    return max(1, seconds_to_ns(x))


# -- query params ----------------------------------------------------------

def make_params(term: int, heavy: bool) -> bytes:
    return f"t={term} h={1 if heavy else 0}".encode()


def parse_params(params: bytes) -> tuple[int, bool]:
    fields = dict(kv.split("=", 1) for kv in params.decode().split())
    return int(fields["t"]), fields["h"] == "1"


def encode_items(items) -> str:
    return ",".join(f"{item_id}:{score!r}" for item_id, score in items)


def decode_items(text: str) -> list:
    out = []
    if text:
        for part in text.split(","):
            item_id, score = part.split(":", 1)
            out.append((int(item_id), float(score)))
    return out


# -- content models (pure functions; the mature-answer oracle) -------------

class SearchModel:
    """Per-query document scores: Zipf-skewed shard multipliers over a
    uniform per-document relevance draw, so one shard can dominate a query."""

    def __init__(self, cfg: ServiceConfig, hub: RngHub):
        self.cfg = cfg
        self.hub = hub

    def shard_multiplier(self, term: int, shard: int) -> float:
        order = list(range(self.cfg.shard_count))
        self.hub.fresh("skew", term).shuffle(order)
        rank = order[shard]
        return 1.0 / float(rank + 1) ** self.cfg.score_skew

    def shard_scores(self, term: int, shard: int) -> dict:
        rng = self.hub.fresh("score", term, shard)
        mult = self.shard_multiplier(term, shard)
        base = shard * self.cfg.docs_per_shard
        return {base + j: mult * rng.random() for j in range(self.cfg.docs_per_shard)}

    def shard_local_topk(self, term: int, shard: int) -> tuple:
        return top_k(self.shard_scores(term, shard), self.cfg.answer_size)

    def global_topk(self, term: int) -> tuple:
        merged: dict = {}
        for shard in range(self.cfg.shard_count):
            merged.update(self.shard_scores(term, shard))
        return top_k(merged, self.cfg.answer_size)

    def subset_topk(self, term: int, shards) -> tuple:
        """Online answer when exactly `shards` beat the timeout (whole replies)."""
        merged: dict = {}
        for shard in shards:
            merged.update(dict(self.shard_local_topk(term, shard)))
        return top_k(merged, self.cfg.answer_size)

    def reference_answer(self, query: Query) -> frozenset:
        term, _ = parse_params(query.params)
        return frozenset(item_id for item_id, _ in self.global_topk(term))


class RecommenderModel:
    """Small db scores a 75% subset of the catalog with the large db's draws."""

    def __init__(self, cfg: ServiceConfig, hub: RngHub):
        self.cfg = cfg
        self.hub = hub

    def _scores(self, term: int) -> dict:
        rng = self.hub.fresh("rec", term)
        return {item: rng.random() for item in range(self.cfg.catalog_size)}

    def db_topk(self, term: int, db: str) -> tuple:
        scores = self._scores(term)
        if db == "small":
            scores = {item: s for item, s in scores.items() if item % 4 != 0}
        return top_k(scores, self.cfg.answer_size)

    def reference_answer(self, query: Query) -> frozenset:
        term, _ = parse_params(query.params)
        return frozenset(item_id for item_id, _ in self.db_topk(term, "large"))


# -- generic component tasks ------------------------------------------------

class CallbackTask(Task):
    def __init__(self, cost_ns: int, at_start: Optional[Callable] = None,
                 at_end: Optional[Callable] = None):
        super().__init__()
        self.cost_ns = cost_ns
        self.at_start = at_start
        self.at_end = at_end
        self._event = None

    def start(self) -> None:
        extra = 0
        if self.at_start is not None:
            extra = self.at_start() or 0
        self._event = self.component.mesh.loop.schedule(self.cost_ns + extra, self._end)

    def _end(self) -> None:
        if self.cancelled:
            return
        if self.at_end is not None:
            self.at_end()
        self.finish()

    def cancel(self) -> None:
        super().cancel()
        if self._event is not None:
            self._event.cancel()
        self.finish()


class ShardTask(Task):
    """Scores one shard's partition: a provisional chunk at half service
    time, the remainder plus the reply terminator at completion."""

    def __init__(self, back: "ShardBack", conn: Connection, payload: bytes):
        super().__init__()
        self.back = back
        self.conn = conn
        self.payload = payload
        self._events: list = []

    def start(self) -> None:
        back = self.back
        mesh = back.mesh
        _, raw = back.strip_tag(self.payload)
        fields = dict(kv.split("=", 1) for kv in raw.decode().split()[1:])
        term, heavy = int(fields["t"]), fields["h"] == "1"
        svc_ns = draw_service_ns(back.spec.service_time, back.svc_rng, heavy,
                                 back.service_cfg.heavy_factor)
        local = back.model.shard_local_topk(term, back.shard_index)
        half = (len(local) + 1) // 2
        self.chunk0 = f"hits {encode_items(local[:half])}".encode()
        self.chunk1 = f"hits {encode_items(local[half:])}".encode()
        self._events.append(mesh.loop.schedule(svc_ns // 2, self._emit_first))
        self._events.append(mesh.loop.schedule(svc_ns, self._complete))

    def _emit_first(self) -> None:
        if not self.cancelled:
            self.back.send_reply(self.conn, self.chunk0)

    def _complete(self) -> None:
        if self.cancelled:
            return
        self.back.send_reply(self.conn, self.chunk1)
        self.back.complete_call(self.conn)
        self.finish()

    def cancel(self) -> None:
        super().cancel()
        for ev in self._events:
            ev.cancel()
        self.finish()


class SingleReplyTask(Task):
    """One reply after the service time; used by the recommender databases."""

    def __init__(self, back: "DbBack", conn: Connection, payload: bytes):
        super().__init__()
        self.back = back
        self.conn = conn
        self.payload = payload
        self._event = None

    def start(self) -> None:
        back = self.back
        _, raw = back.strip_tag(self.payload)
        fields = dict(kv.split("=", 1) for kv in raw.decode().split()[1:])
        heavy = fields.get("h") == "1"
        svc_ns = draw_service_ns(back.latency_model, back.svc_rng, heavy,
                                 back.service_cfg.heavy_factor)
        self.reply = back.build_reply(fields)
        self._event = back.mesh.loop.schedule(svc_ns, self._complete)

    def _complete(self) -> None:
        if self.cancelled:
            return
        self.back.send_reply(self.conn, self.reply)
        self.back.complete_call(self.conn)
        self.finish()

    def cancel(self) -> None:
        super().cancel()
        if self._event is not None:
            self._event.cancel()
        self.finish()


class ServiceComponent(ComponentRuntime):
    """Shared plumbing: spec, tag passthrough, service rng stream."""

    def __init__(self, mesh: Mesh, spec: ComponentSpec, service_cfg: ServiceConfig,
                 hub: RngHub):
        super().__init__(mesh, spec.endpoint, spec.role, spec.memoize, spec.workers)
        self.spec = spec
        self.name = spec.name
        self.service_cfg = service_cfg
        self.svc_rng = hub.stream("svc", spec.name)
        mesh.register_memoized(spec.endpoint, spec.memoize)

    def strip_tag(self, payload: bytes):
        return split_tag(payload)


class ShardBack(ServiceComponent):
    def __init__(self, mesh, spec, service_cfg, hub, model: SearchModel, shard_index: int):
        super().__init__(mesh, spec, service_cfg, hub)
        self.model = model
        self.shard_index = shard_index

    def handle_invocation(self, conn: Connection, payload: bytes) -> None:
        task = ShardTask(self, conn, payload)
        conn.callee_task = task
        self.submit(task)


class DbBack(ServiceComponent):
    def __init__(self, mesh, spec, service_cfg, hub, model: Optional[RecommenderModel],
                 db: str):
        super().__init__(mesh, spec, service_cfg, hub)
        self.model = model
        self.db = db
        self.latency_model = spec.service_time

    def build_reply(self, fields: dict) -> bytes:
        if self.db == "telemetry":
            return b"ok"
        items = self.model.db_topk(int(fields["t"]), self.db)
        return f"hits {encode_items(items)}".encode()

    def handle_invocation(self, conn: Connection, payload: bytes) -> None:
        task = SingleReplyTask(self, conn, payload)
        conn.callee_task = task
        self.submit(task)


class PathMiddle(ServiceComponent):
    """Re-executed aggregator in front of one shard: forwards the request,
    applies its own online timeout, relays whatever arrived in time."""

    def __init__(self, mesh, spec, service_cfg, hub, back_endpoint: Endpoint,
                 back_name: str):
        super().__init__(mesh, spec, service_cfg, hub)
        self.back_endpoint = back_endpoint
        self.back_name = back_name

    def handle_invocation(self, conn: Connection, payload: bytes) -> None:
        session = _MiddleSession(self, conn, payload)
        task = CallbackTask(self.mesh.tuning.dispatch_cost_ns, at_start=session.dispatch)
        conn.callee_task = task
        self.submit(task)


class _MiddleSession:
    def __init__(self, middle: PathMiddle, conn: Connection, payload: bytes):
        self.middle = middle
        self.conn = conn
        self.tag, self.raw = middle.strip_tag(payload)
        self.items: dict = {}
        self.timed_out: list = []
        self.done = False
        self._timeout_event = None

    def dispatch(self) -> int:
        middle = self.middle
        mesh = middle.mesh
        inner = b"search" + self.raw[len(b"path"):]
        sub_tag = None
        patience = False
        if self.tag is not None:
            sub_tag = self.tag
            patience = self.tag[1] is Mode.REPLAY
        before = mesh.network.datagrams_sent
        self.handle = middle.call(middle.back_endpoint, inner, tag=sub_tag,
                                  on_reply=self._on_chunk, on_complete=self._on_complete)
        sends = mesh.network.datagrams_sent - before
        if not patience:
            timeout = mesh.effective_timeout_ns(middle.spec.online_timeout_ns)
            self._timeout_event = mesh.loop.schedule(timeout, self._on_timeout)
        return sends * mesh.tuning.datagram_send_cost_ns

    def _on_chunk(self, handle: CallHandle, payload: bytes) -> None:
        if payload.startswith(b"hits "):
            for item_id, score in decode_items(payload[5:].decode()):
                self.items[item_id] = score

    def _on_complete(self, handle: CallHandle) -> None:
        self._reply()

    def _on_timeout(self) -> None:
        if not self.handle.completed:
            self.middle.terminate(self.handle)
            self.timed_out.append(self.middle.back_name)
        self._reply()

    def _reply(self) -> None:
        if self.done:
            return
        self.done = True
        if self._timeout_event is not None:
            self._timeout_event.cancel()
        middle = self.middle
        body = encode_items(sorted(self.items.items(), key=lambda kv: (-kv[1], kv[0])))
        payload = f"agg {body}|to={';'.join(self.timed_out)}".encode()

        def emit():
            middle.send_reply(self.conn, payload)
            middle.complete_call(self.conn)

        middle.submit(CallbackTask(middle.mesh.tuning.aggregate_cost_ns, at_end=emit))


# -- front components and the execution driver ------------------------------

class QueryExecution:
    """One execution of a query at a front: dispatch, collect, timeout or
    wait-for-all, aggregate. The coordinator supplies context/tag/patience."""

    def __init__(self, front: "FrontBase", query: Query, kind: AnswerKind, *,
                 ctx_entry: Optional[ContextEntry] = None,
                 tag: Optional[tuple] = None,
                 patience: bool = False,
                 hard_deadline_ns: Optional[int] = None,
                 on_done: Callable = None):
        self.front = front
        self.query = query
        self.kind = kind
        self.ctx_entry = ctx_entry
        self.tag = tag
        self.patience = patience
        self.hard_deadline_ns = hard_deadline_ns
        self.on_done = on_done
        self.started_ns = 0
        self.finished_ns = 0
        self.answer: Optional[Answer] = None
        self.aborted = False
        self.timed_out: list = []
        self.items: dict = {}
        self.handles: dict = {}  # name -> CallHandle for answer-bearing children
        self.aux_handles: dict = {}
        self._pending = 0
        self._finalizing = False
        self._timeout_event = None
        self._deadline_event = None

    def start(self) -> None:
        self.started_ns = self.front.mesh.loop.now_ns
        self.front.submit(CallbackTask(0, at_start=self._dispatch))

    def _dispatch(self) -> int:
        mesh = self.front.mesh
        before = mesh.network.datagrams_sent
        self.front.dispatch_children(self)
        sends = mesh.network.datagrams_sent - before
        if not self.patience:
            timeout = mesh.effective_timeout_ns(self.front.spec.online_timeout_ns)
            self._timeout_event = mesh.loop.schedule(timeout, self._on_timeout)
        if self.hard_deadline_ns is not None:
            self._deadline_event = mesh.loop.schedule_at(self.hard_deadline_ns,
                                                         self._on_hard_deadline)
        cost = len(self.handles) * mesh.tuning.dispatch_cost_ns
        cost += sends * mesh.tuning.datagram_send_cost_ns
        return cost

    def child(self, name: str, dest: Endpoint, payload: bytes, aux: bool = False) -> CallHandle:
        handle = self.front.call(
            dest, payload, ctx_entry=self.ctx_entry, tag=self.tag,
            on_reply=lambda h, p: self._on_chunk(name, h, p),
            on_complete=lambda h: self._on_child_complete(name, h))
        if aux:
            self.aux_handles[name] = handle
        else:
            self.handles[name] = handle
            self._pending += 1
        return handle

    def _on_chunk(self, name: str, handle: CallHandle, payload: bytes) -> None:
        self.front.absorb_reply(self, name, payload)

    def _on_child_complete(self, name: str, handle: CallHandle) -> None:
        self._pending -= 1
        if self._pending == 0 and not self._finalizing:
            self._begin_finalize()

    def _on_timeout(self) -> None:
        if self._finalizing:
            return
        for name, handle in self.handles.items():
            if not handle.completed:
                self.front.terminate(handle)
                self.timed_out.append(name)
        self._begin_finalize()

    def _on_hard_deadline(self) -> None:
        if self._finalizing:
            return
        self._finalizing = True
        self.aborted = True
        self._cancel_timers()
        for handle in list(self.handles.values()) + list(self.aux_handles.values()):
            if not handle.completed:
                self.front.terminate(handle)
        self.finished_ns = self.front.mesh.loop.now_ns
        if self.on_done is not None:
            self.on_done(self)

    def _cancel_timers(self) -> None:
        if self._timeout_event is not None:
            self._timeout_event.cancel()
        if self._deadline_event is not None:
            self._deadline_event.cancel()

    def _begin_finalize(self) -> None:
        self._finalizing = True
        self._cancel_timers()
        for name, handle in self.aux_handles.items():
            if not handle.completed:
                self.front.terminate(handle)
        self.front.submit(CallbackTask(self.front.mesh.tuning.aggregate_cost_ns,
                                       at_end=self._finalize))

    def _finalize(self) -> None:
        mesh = self.front.mesh
        self.finished_ns = mesh.loop.now_ns
        self.answer = self.front.aggregate(self)
        if self._deadline_event is not None:
            self._deadline_event.cancel()
        if self.on_done is not None:
            self.on_done(self)


class FrontBase(ServiceComponent):
    def execute(self, query: Query, kind: AnswerKind = AnswerKind.ONLINE, **kw) -> QueryExecution:
        execution = QueryExecution(self, query, kind, **kw)
        execution.start()
        return execution

    def dispatch_children(self, execution: QueryExecution) -> None:  # pragma: no cover
        raise NotImplementedError

    def absorb_reply(self, execution, name, payload) -> None:  # pragma: no cover
        raise NotImplementedError

    def aggregate(self, execution: QueryExecution) -> Answer:  # pragma: no cover
        raise NotImplementedError

    def handle_invocation(self, conn, payload):  # fronts take queries, not RPCs
        raise NotImplementedError("front components do not accept mesh invocations")


class SearchFront(FrontBase):
    def __init__(self, mesh, spec, service_cfg, hub, model: SearchModel,
                 children: list):
        super().__init__(mesh, spec, service_cfg, hub)
        self.model = model
        self.children = children  # list of (name, endpoint, shard_index, via_middle)

    def dispatch_children(self, execution: QueryExecution) -> None:
        term, heavy = parse_params(execution.query.params)
        for name, endpoint, shard, via_middle in self.children:
            verb = "path" if via_middle else "search"
            payload = f"{verb} t={term} h={1 if heavy else 0} shard={shard}".encode()
            execution.child(name, endpoint, payload)

    def absorb_reply(self, execution: QueryExecution, name: str, payload: bytes) -> None:
        if payload.startswith(b"hits "):
            for item_id, score in decode_items(payload[5:].decode()):
                execution.items[item_id] = score
        elif payload.startswith(b"agg "):
            body = payload[4:].decode()
            items_text, _, to_text = body.partition("|to=")
            for item_id, score in decode_items(items_text):
                execution.items[item_id] = score
            for comp in to_text.split(";"):
                if comp:
                    execution.timed_out.append(comp)

    def aggregate(self, execution: QueryExecution) -> Optional[Answer]:
        items = top_k(execution.items, self.service_cfg.answer_size)
        timed_out = tuple(sorted(set(execution.timed_out)))
        if execution.kind is AnswerKind.MATURE and timed_out:
            return None  # not a valid mature answer; coordinator marks it Failed
        return Answer(items, execution.finished_ns, execution.kind, timed_out)


class RecommenderFront(FrontBase):
    def __init__(self, mesh, spec, service_cfg, hub, model: RecommenderModel,
                 small: Endpoint, large: Endpoint, telemetry: Optional[Endpoint]):
        super().__init__(mesh, spec, service_cfg, hub)
        self.model = model
        self.small = small
        self.large = large
        self.telemetry = telemetry

    def dispatch_children(self, execution: QueryExecution) -> None:
        term, heavy = parse_params(execution.query.params)
        h = 1 if heavy else 0
        execution.child("small-db", self.small, f"recommend db=small t={term} h={h}".encode())
        execution.child("large-db", self.large, f"recommend db=large t={term} h={h}".encode())
        if self.telemetry is not None:
            handle = execution.child("telemetry", self.telemetry,
                                     f"telemetry t={term} h={h}".encode(), aux=True)
            timeout = self.mesh.effective_timeout_ns(self.service_cfg.telemetry_timeout_ns)
            self.mesh.loop.schedule(timeout, lambda: self.terminate(handle))

    def absorb_reply(self, execution: QueryExecution, name: str, payload: bytes) -> None:
        if payload.startswith(b"hits "):
            execution.items[name] = decode_items(payload[5:].decode())

    def aggregate(self, execution: QueryExecution) -> Optional[Answer]:
        large = execution.handles.get("large-db")
        small = execution.handles.get("small-db")
        if large is not None and large.completed:
            chosen = execution.items.get("large-db", [])
        elif small is not None and small.completed:
            chosen = execution.items.get("small-db", [])
        else:
            chosen = []
        timed_out = tuple(sorted(set(execution.timed_out)))
        if execution.kind is AnswerKind.MATURE and timed_out:
            return None  # not a valid mature answer; coordinator marks it Failed
        return Answer(tuple(chosen), execution.finished_ns, execution.kind, timed_out)


# -- mesh assembly -----------------------------------------------------------

def _expand_address(pattern: str, index: int, default_port: int = 80) -> Endpoint:
    addr, _, port_text = pattern.partition(":")
    port = int(port_text) if port_text else default_port
    if "*" in addr:
        addr = addr.replace("*", str(index))
    else:
        addr = f"{addr}.{index}"
    return Endpoint(addr, port)


@dataclass
class ServiceHandles:
    front: FrontBase
    model: object
    specs: list
    reference_answer: Callable[[Query], frozenset]


SEARCH_ASSIGNMENTS = ("direct", "middle-tier", "no-memo")
RECOMMENDER_ASSIGNMENTS = ("memo-both", "memo-large", "no-memo")


def build_service(mesh: Mesh, cfg: RunConfig, hub: RngHub,
                  assignment: Optional[str] = None) -> ServiceHandles:
    svc = cfg.service
    front_ep = _expand_address(cfg.front_addresses[0], 0)
    back_patterns = cfg.back_addresses or ("10.244.2.*",)
    specs: list[ComponentSpec] = []

    if svc.kind == "sharded-search":
        if assignment is None:
            assignment = "middle-tier" if svc.middle_tier else "direct"
        if assignment not in SEARCH_ASSIGNMENTS:
            raise ValueError(f"unknown role assignment {assignment!r}")
        model = SearchModel(svc, hub)
        use_middles = assignment == "middle-tier"
        memoize_backs = assignment != "no-memo"
        front_timeout = svc.online_timeout_ns
        if use_middles:
            front_timeout = int(svc.online_timeout_ns * 1.25)
        front_spec = ComponentSpec("front", front_ep, "front", False,
                                   online_timeout_ns=front_timeout,
                                   workers=svc.front_workers)
        specs.append(front_spec)
        children = []
        backs = []
        for i in range(svc.shard_count):
            pattern = back_patterns[i % len(back_patterns)]
            shard_ep = _expand_address(pattern, 10 + i)
            shard_spec = ComponentSpec(f"shard{i}", shard_ep, "back", memoize_backs,
                                       service_time=svc.service_time,
                                       workers=svc.back_workers)
            specs.append(shard_spec)
            backs.append(shard_spec)
            if use_middles:
                mid_ep = _expand_address(pattern, 100 + i)
                mid_spec = ComponentSpec(f"mid{i}", mid_ep, "middle", False,
                                         online_timeout_ns=svc.online_timeout_ns,
                                         workers=svc.middle_workers)
                specs.append(mid_spec)
                children.append((f"mid{i}", mid_ep, i, True))
            else:
                children.append((f"shard{i}", shard_ep, i, False))
        front = SearchFront(mesh, front_spec, svc, hub, model, children)
        for i, shard_spec in enumerate(backs):
            ShardBack(mesh, shard_spec, svc, hub, model, i)
        if use_middles:
            for spec in specs:
                if spec.role == "middle":
                    i = int(spec.name[3:])
                    PathMiddle(mesh, spec, svc, hub, backs[i].endpoint, backs[i].name)
        return ServiceHandles(front, model, specs, model.reference_answer)

    if svc.kind == "recommender":
        if assignment is None:
            assignment = "memo-both"
        if assignment not in RECOMMENDER_ASSIGNMENTS:
            raise ValueError(f"unknown role assignment {assignment!r}")
        model = RecommenderModel(svc, hub)
        memo_small = assignment == "memo-both"
        memo_large = assignment in ("memo-both", "memo-large")
        front_spec = ComponentSpec("front", front_ep, "front", False,
                                   online_timeout_ns=svc.online_timeout_ns,
                                   workers=svc.front_workers)
        specs.append(front_spec)
        small_spec = ComponentSpec("small-db", _expand_address(back_patterns[0], 10),
                                   "back", memo_small, service_time=svc.small_db_latency,
                                   workers=svc.back_workers)
        large_spec = ComponentSpec("large-db", _expand_address(back_patterns[-1], 11),
                                   "back", memo_large, service_time=svc.large_db_latency,
                                   workers=svc.back_workers)
        specs.extend([small_spec, large_spec])
        telemetry_ep = None
        if svc.telemetry:
            tel_spec = ComponentSpec("telemetry", _expand_address(back_patterns[0], 12),
                                     "back", True,
                                     service_time=LatencyModel(mean_s=0.05, sigma=0.3),
                                     workers=1)
            specs.append(tel_spec)
            telemetry_ep = tel_spec.endpoint
        front = RecommenderFront(mesh, front_spec, svc, hub, model,
                                 small_spec.endpoint, large_spec.endpoint, telemetry_ep)
        DbBack(mesh, small_spec, svc, hub, model, "small")
        DbBack(mesh, large_spec, svc, hub, model, "large")
        if telemetry_ep is not None:
            DbBack(mesh, [s for s in specs if s.name == "telemetry"][0], svc, hub,
                   None, "telemetry")
        return ServiceHandles(front, model, specs, model.reference_answer)

    raise ValueError(f"unknown service kind {svc.kind!r}")


def rate_for_utilization(cfg: RunConfig, utilization: float) -> float:
    """Arrival rate putting each back component at roughly the target load."""
    svc = cfg.service
    heavy_mean = 1.0 + (svc.heavy_factor - 1.0) * cfg.trace.heavy_fraction
    if svc.kind == "sharded-search":
        per_query_s = svc.service_time.mean_s * heavy_mean
        return utilization * svc.back_workers / per_query_s
    per_query_s = svc.large_db_latency.mean_s * heavy_mean
    return utilization * svc.back_workers / per_query_s
