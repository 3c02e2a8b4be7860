"""Experiment orchestration: composes the mesh, the sampler, a design mode,
and an admission controller over one trace, then writes the run artifacts.

The coordinator owns the sampled-query lifecycle: allocate a context,
run the online execution under record mode, detect quiescence from cache
activity, drive the mature re-execution in replay mode, score the pair.
Competing designs replace pieces of that pipeline (tags for datagrams,
timeout toggling for memoization) behind the same lifecycle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import metrics
from .cache import ReplyCache
from .config import RunConfig
from .control import (ControllerState, TimeoutFrequencyWindow, admit,
                      controller_update, timeout_frequency_signal)
from .interpose import Mesh, ModeFlags
from .model import AnswerKind, Mode, Priority, Query
from .quality import (QualitySample, QualityWindow, resolve_similarity,
                      true_positive_rate, window_quality)
from .rng import RngHub
from .sampler import Sampler
from .services import ServiceHandles, build_service, rate_for_utilization
from .timebase import EventLoop, seconds_to_ns
from .transport import ControlMessage, Network
from .workload import generate_trace, load_trace_csv, save_trace_csv, trace_hash

MODES = ("ubora", "ubora-low-samples", "ubora-no-opt", "query-tagging",
         "query-tagging-caching", "timeout-toggling", "baseline")
CONTROLLERS = ("none", "quality-pid", "timeout-freq-pid", "no-sharing", "full-sharing")


def mode_flags(mode: str) -> ModeFlags:
    if mode in ("ubora", "ubora-low-samples"):
        return ModeFlags(name=mode)
    if mode == "ubora-no-opt":
        return ModeFlags(name=mode, jit_propagation=False, local_expiry=False,
                         broadcast_contexts=True)
    if mode == "query-tagging":
        return ModeFlags(name=mode, use_datagrams=False, tag_in_payload=True,
                         use_cache=False)
    if mode == "query-tagging-caching":
        return ModeFlags(name=mode, use_datagrams=False, tag_in_payload=True)
    if mode == "timeout-toggling":
        return ModeFlags(name=mode, use_datagrams=False, use_cache=False,
                         toggle_timeouts=True)
    if mode == "baseline":
        return ModeFlags(name=mode, interpose=False, use_datagrams=False,
                         use_cache=False)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class ExperimentPlan:
    config: RunConfig
    mode: str = "ubora"
    controller: str = "none"
    out_dir: Optional[Path] = None
    assignment: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r} (choose from {MODES})")
        if self.controller not in CONTROLLERS:
            raise ValueError(
                f"unknown controller {self.controller!r} (choose from {CONTROLLERS})")
        if self.mode == "timeout-toggling" and self.controller == "quality-pid":
            # Mature answers arrive too late to steer admission; allowed for
            # the other controllers, rejected here to fail fast.
            raise ValueError("quality-pid cannot run on timeout-toggling measurements")
        resolve_similarity(self.config.quality_function)


@dataclass
class SampleTracker:
    query: Query
    context_id: int
    created_ns: int
    record_deadline_ns: int
    online_answer: object = None
    online_done_ns: int = 0
    replay_started_ns: Optional[int] = None
    resolved: bool = False
    outcome: str = ""
    mature_answer: object = None
    resolved_ns: int = 0
    quiescence_event: object = None


@dataclass
class RunResult:
    out_dir: Optional[Path]
    log: metrics.RunLog
    summary: dict
    manifest: dict
    windows: list
    samples: list
    mesh: Mesh = None
    service: ServiceHandles = None


class Experiment:
    def __init__(self, plan: ExperimentPlan):
        plan.validate()
        self.plan = plan
        cfg = plan.config
        self.cfg = cfg
        self.flags = mode_flags(plan.mode)
        self.hub = RngHub(cfg.rng_seed)
        self.loop = EventLoop(real_time=cfg.time_mode == "real")
        self.network = Network(
            self.loop,
            net_latency_ns=cfg.tuning.net_latency_ns,
            datagram_latency_ns=cfg.tuning.datagram_latency_ns,
            datagram_loss=cfg.tuning.datagram_loss,
            loss_rng=self.hub.stream("ctrl-loss"),
        )
        self.cache = ReplyCache(cfg.cache_capacity_bytes, cfg.cache_ttl_ns)
        self.mesh = Mesh(self.loop, self.network, self.cache, cfg.tuning, self.flags,
                         cfg.propagate_timeout_ns)
        self.cache.on_overflow = self.mesh.flag_context
        self.service = build_service(self.mesh, cfg, self.hub, plan.assignment)
        self.similarity = resolve_similarity(cfg.quality_function)

        sampling = cfg.sampling
        if plan.mode == "ubora-low-samples":
            sampling = sampling.scaled(cfg.tuning.low_samples_factor)
        if plan.mode == "baseline":
            sampling = type(sampling)()  # reference run: nothing sampled
        self.sampler = Sampler(sampling, self.hub.stream("sampler"))
        self.on_sample_created = None  # test hook: fn(tracker)

        ctl = cfg.controller
        self.ctl_state = ControllerState.from_config(ctl)
        if plan.controller == "timeout-freq-pid":
            self.ctl_state.target_quality = ctl.proxy_target
        elif plan.controller == "no-sharing":
            self.ctl_state.shed_probability = 1.0
        self.tf_window = TimeoutFrequencyWindow(ctl.evaluation_interval)
        self.q_window = QualityWindow(ctl.window_samples)
        self.admit_rng = self.hub.stream("admit")

        self.settle_ns = cfg.tuning.settle_window_ns
        if self.settle_ns <= 0:
            backs = [s for s in self.service.specs if s.role == "back" and s.service_time]
            mean_s = max(s.service_time.mean_s for s in backs) if backs else 0.2
            self.settle_ns = seconds_to_ns(2.0 * mean_s)
        if self.flags.tag_in_payload:
            self.settle_ns = seconds_to_ns(0.001)  # exact tracking, no garbage writes
        self.margin_ns = int(cfg.record_timeout_ns * cfg.tuning.front_margin_fraction)

        self.log = metrics.RunLog()
        self.records: dict[int, metrics.QueryRecord] = {}
        self.true_tpr: dict[int, float] = {}
        self.admission_order: list[int] = []
        self.quality_rows: list = []
        self.controller_rows: list = []
        self.sample_rows: list = []
        self.trackers: dict[int, SampleTracker] = {}
        self.eval_marks: list = []  # (time_ns, admitted span end index)
        self._next_context_id = 1
        self._admitted = 0
        self._counts = {"low_admitted": 0, "low_rejected": 0, "high_admitted": 0}
        self._last_counts = dict(self._counts)

    # -- workload ----------------------------------------------------------

    def _make_trace(self) -> list[Query]:
        trace_cfg = self.cfg.trace
        if trace_cfg.csv_path:
            return load_trace_csv(trace_cfg.csv_path)
        if trace_cfg.utilization is not None:
            trace_cfg = replace(trace_cfg,
                                arrival_rate=rate_for_utilization(self.cfg, trace_cfg.utilization))
        return generate_trace(trace_cfg, self.hub.stream("trace"))

    # -- per-query lifecycle -------------------------------------------------

    def _on_arrival(self, query: Query) -> None:
        if self.plan.controller == "none":
            admitted = True
        else:
            admitted = admit(query, self.ctl_state, self.admit_rng)
        if query.priority is Priority.LOW:
            self._counts["low_admitted" if admitted else "low_rejected"] += 1
        elif admitted:
            self._counts["high_admitted"] += 1
        if not admitted:
            return

        self._admitted += 1
        sampled = self.sampler.decide(self.loop.now_ns)
        query = query.with_sampled(sampled)
        record = metrics.QueryRecord(
            query_id=query.query_id, priority=query.priority.value, sampled=sampled,
            arrival_ns=query.arrival_time_ns)
        self.records[query.query_id] = record
        self.log.add(record)
        self.admission_order.append(query.query_id)

        tracker = None
        tag = None
        if sampled:
            ctx_id = self._next_context_id
            self._next_context_id += 1
            deadline = self.loop.now_ns + self.cfg.record_timeout_ns
            tracker = SampleTracker(query, ctx_id, self.loop.now_ns, deadline)
            self.trackers[ctx_id] = tracker
            if self.flags.use_datagrams:
                self.service.front.install_local(ctx_id, Mode.RECORD, deadline,
                                                 margin_ns=self.margin_ns)
                if self.flags.broadcast_contexts:
                    self.mesh.broadcast_control(
                        ControlMessage(ctx_id, Mode.RECORD.value, deadline), ctx_id)
            elif self.flags.tag_in_payload:
                tag = (ctx_id, Mode.RECORD, deadline)
            if self.on_sample_created is not None:
                self.on_sample_created(tracker)

        self.service.front.execute(
            query, AnswerKind.ONLINE, tag=tag,
            on_done=lambda ex, t=tracker: self._online_done(t, ex))

        if self._admitted % self.cfg.controller.evaluation_interval == 0:
            self._evaluate_controller()

    def _online_done(self, tracker: Optional[SampleTracker], execution) -> None:
        query = execution.query
        record = self.records[query.query_id]
        answer = execution.answer
        record.online_latency_ns = execution.finished_ns - query.arrival_time_ns
        record.online_size = len(answer.items) if answer else 0
        record.timed_out_components = answer.timed_out_components if answer else ()
        self.tf_window.add(bool(record.timed_out_components))
        reference = self.service.reference_answer(query)
        online_ids = answer.item_ids() if answer else frozenset()
        self.true_tpr[query.query_id] = true_positive_rate(online_ids, reference)

        if tracker is None:
            return
        tracker.online_answer = answer
        tracker.online_done_ns = execution.finished_ns
        if self.flags.toggle_timeouts:
            self._start_mature(tracker)
        elif self.flags.tag_in_payload and not self.flags.use_cache:
            self._start_mature(tracker)
        else:
            self._arm_quiescence(tracker)

    # -- record-phase quiescence ----------------------------------------------

    def _arm_quiescence(self, tracker: SampleTracker) -> None:
        def check():
            if tracker.resolved or tracker.replay_started_ns is not None:
                return
            if self.mesh.context_failed(tracker.context_id):
                self._resolve(tracker, success=False)
                return
            now = self.loop.now_ns
            last = self.cache.last_activity_ns(tracker.context_id)
            quiet_since = max(last or 0, tracker.online_done_ns)
            due = quiet_since + self.settle_ns
            open_entries = self.cache.open_entry_count(tracker.context_id)
            if now >= tracker.record_deadline_ns or (now >= due and open_entries == 0):
                self._start_mature(tracker)
            else:
                # An open entry means a sub-execution is still recording:
                # poll again a settle window after the next sign of life.
                next_check = max(due, now + self.settle_ns) if open_entries else due
                tracker.quiescence_event = self.loop.schedule_at(
                    min(next_check, tracker.record_deadline_ns), check)

        check()

    # -- mature execution -------------------------------------------------------

    def _start_mature(self, tracker: SampleTracker) -> None:
        if tracker.resolved:
            return
        tracker.replay_started_ns = self.loop.now_ns
        ctx_entry = None
        tag = None
        patience = True
        deadline = tracker.record_deadline_ns + self.margin_ns
        if self.flags.use_datagrams:
            ctx_entry = self.service.front.install_local(
                tracker.context_id, Mode.REPLAY, tracker.record_deadline_ns,
                margin_ns=self.margin_ns)
            if self.flags.broadcast_contexts:
                self.mesh.broadcast_control(
                    ControlMessage(tracker.context_id, Mode.REPLAY.value,
                                   tracker.record_deadline_ns), tracker.context_id)
            if ctx_entry is None:
                self._resolve(tracker, success=False)
                return
        elif self.flags.tag_in_payload:
            tag = (tracker.context_id, Mode.REPLAY, deadline)
        elif self.flags.toggle_timeouts:
            patience = False
            deadline = tracker.online_done_ns + self.cfg.record_timeout_ns
            self.mesh.toggle_depth += 1

        self.service.front.execute(
            tracker.query, AnswerKind.MATURE, ctx_entry=ctx_entry, tag=tag,
            patience=patience, hard_deadline_ns=deadline,
            on_done=lambda ex, t=tracker: self._mature_done(t, ex))

    def _mature_done(self, tracker: SampleTracker, execution) -> None:
        if self.flags.toggle_timeouts:
            self.mesh.toggle_depth -= 1
        if tracker.resolved:
            return
        success = (not execution.aborted and execution.answer is not None
                   and not execution.timed_out
                   and not self.mesh.context_failed(tracker.context_id))
        tracker.mature_answer = execution.answer if success else None
        self._resolve(tracker, success=success)

    def _resolve(self, tracker: SampleTracker, success: bool) -> None:
        if tracker.resolved:
            return
        tracker.resolved = True
        tracker.resolved_ns = self.loop.now_ns
        tracker.outcome = metrics.MATURE_SUCCESS if success else metrics.MATURE_FAILED
        query = tracker.query
        record = self.records[query.query_id]
        record.mature_outcome = tracker.outcome
        if success:
            record.mature_latency_ns = tracker.resolved_ns - tracker.created_ns
            score = self.similarity(tracker.online_answer, tracker.mature_answer)
            record.quality_score = score
            if query.priority is Priority.HIGH:
                self.q_window.add(QualitySample(
                    query.query_id, tracker.online_answer, tracker.mature_answer,
                    score, tracker.resolved_ns))
            self.quality_rows.append((
                tracker.resolved_ns, query.query_id, score,
                len(tracker.online_answer.items) if tracker.online_answer else 0,
                len(tracker.mature_answer.items), False))
        else:
            self.quality_rows.append((
                tracker.resolved_ns, query.query_id, None,
                len(tracker.online_answer.items) if tracker.online_answer else 0,
                0, True))
        stats = self.mesh.ctx_stats.get(tracker.context_id, {})
        contacted = len(self.mesh.ctx_contacted.get(tracker.context_id, {}))
        self.sample_rows.append((
            tracker.context_id, query.query_id,
            (tracker.replay_started_ns - tracker.created_ns)
            if tracker.replay_started_ns is not None else None,
            (tracker.resolved_ns - tracker.replay_started_ns)
            if tracker.replay_started_ns is not None else None,
            tracker.outcome, stats.get("controls_sent", 0), contacted,
            stats.get("replay_hits", 0), stats.get("shadow_calls", 0)))
        if self.flags.broadcast_contexts:
            self.mesh.broadcast_control(
                ControlMessage(tracker.context_id, Mode.NORMAL.value,
                               tracker.record_deadline_ns), tracker.context_id)

    # -- controller -------------------------------------------------------------

    def _evaluate_controller(self) -> None:
        controller = self.plan.controller
        if controller == "quality-pid":
            signal = window_quality(self.q_window)
            if signal is not None:
                controller_update(self.ctl_state, signal)
        elif controller == "timeout-freq-pid":
            signal = timeout_frequency_signal(self.tf_window)
            if signal is not None:
                controller_update(self.ctl_state, signal)
        else:
            signal = window_quality(self.q_window)
        deltas = {k: self._counts[k] - self._last_counts[k] for k in self._counts}
        self._last_counts = dict(self._counts)
        self.controller_rows.append((
            self.loop.now_ns, signal, self.ctl_state.shed_probability,
            deltas["low_admitted"], deltas["low_rejected"], deltas["high_admitted"]))
        self.eval_marks.append((self.loop.now_ns, self._admitted))

    def _build_windows(self) -> list:
        """Per-evaluation-window true quality over high-priority admissions."""
        windows = []
        interval = self.cfg.controller.evaluation_interval
        measured = {end: signal for (_, signal, *_), (_, end) in
                    zip(self.controller_rows, self.eval_marks)}
        for mark_ns, end in self.eval_marks:
            span = self.admission_order[end - interval:end]
            truths = [self.true_tpr[qid] for qid in span
                      if qid in self.true_tpr
                      and self.records[qid].priority == Priority.HIGH.value]
            true_q = sum(truths) / len(truths) if truths else None
            low = sum(1 for qid in span if self.records[qid].priority == Priority.LOW.value)
            windows.append((mark_ns, measured.get(end), true_q, len(span), low))
        return windows

    # -- run ----------------------------------------------------------------------

    def run(self) -> RunResult:
        queries = self._make_trace()
        for query in queries:
            self.loop.schedule_at(query.arrival_time_ns,
                                  lambda q=query: self._on_arrival(q))
        # Finite sweep schedule keeps the heap drainable.
        sweep_step = max(self.cfg.cache_ttl_ns // 2, 1)
        horizon = self.cfg.trace.duration_ns + self.cfg.record_timeout_ns
        for t in range(sweep_step, horizon + sweep_step, sweep_step):
            self.loop.schedule_at(t, lambda: self.cache.evict_expired(self.loop.now_ns))
        self.loop.run()

        windows = self._build_windows()
        summary = metrics.summarize(self.log)
        manifest = self._manifest(queries, summary)
        if self.plan.out_dir is not None:
            self._write_artifacts(manifest, windows, queries)
        return RunResult(self.plan.out_dir, self.log, summary, manifest, windows,
                         self.sample_rows, self.mesh, self.service)

    def _manifest(self, queries, summary) -> dict:
        return {
            "schema": "run-manifest-v1",
            "mode": self.plan.mode,
            "controller": self.plan.controller,
            "assignment": self.plan.assignment,
            "seed": self.cfg.rng_seed,
            "time_mode": self.cfg.time_mode,
            "cache_key_algo": "blake2b-128(context_id, callee, invocation)",
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "trace_hash": trace_hash(queries),
            "summary": summary,
        }

    def _write_artifacts(self, manifest, windows, queries) -> None:
        out = Path(self.plan.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_runlog(out / "runlog.csv", self.log)
        metrics.write_quality_csv(out / "quality.csv", self.quality_rows)
        metrics.write_controller_csv(out / "controller.csv", self.controller_rows)
        metrics.write_windows_csv(out / "windows.csv", windows)
        metrics.write_samples_csv(out / "samples.csv", self.sample_rows)
        save_trace_csv(out / "trace.csv", queries)
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_experiment(plan: ExperimentPlan) -> RunResult:
    return Experiment(plan).run()


# -- role/sampling-rate profiling ------------------------------------------------

def profile_roles(config: RunConfig, assignments: list, sampling_rates: list,
                  mode: str = "ubora") -> dict:
    """Throughput matrix over (assignment, sampling fraction); argmax cell."""
    from .config import SamplingSpec
    cells = {}
    best = None
    for assignment in assignments:
        for rate in sampling_rates:
            cfg = replace(config, sampling=SamplingSpec(fraction=rate))
            plan = ExperimentPlan(config=cfg, mode=mode, assignment=assignment)
            result = run_experiment(plan)
            cell = result.summary["throughput"]
            cells[(assignment, rate)] = cell
            if best is None or cell > cells[best]:
                best = (assignment, rate)
    return {"cells": cells, "best": best}


def write_profile_csv(path, profile: dict) -> None:
    import csv as _csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["assignment", "sampling_rate", "throughput", "best"])
        for (assignment, rate), tput in profile["cells"].items():
            writer.writerow([assignment, repr(rate), repr(tput),
                             int((assignment, rate) == profile["best"])])


# -- cross-run comparison ----------------------------------------------------------

class CompareError(ValueError):
    pass


def compare(run_dirs: list) -> list:
    """Side-by-side metric table; requires at least two matching-trace runs."""
    if len(run_dirs) < 2:
        raise CompareError("need at least two run directories")
    rows = []
    trace_hashes = set()
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        with open(run_dir / "manifest.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        log = metrics.read_runlog(run_dir / "runlog.csv")
        summary = metrics.summarize(log)
        trace_hashes.add(manifest["trace_hash"])
        rows.append({
            "run": run_dir.name,
            "mode": manifest["mode"],
            "controller": manifest["controller"],
            "throughput": summary["throughput"],
            "online_latency_mean_ns": summary["online_latency_mean_ns"],
            "online_latency_p50_ns": summary["online_latency_p50_ns"],
            "online_latency_p75_ns": summary["online_latency_p75_ns"],
            "mean_quality": summary["mean_quality"],
            "low_admitted": summary["low_admitted"],
        })
    if len(trace_hashes) != 1:
        raise CompareError("trace hash mismatch: runs come from different traces")
    base = rows[0]["throughput"]
    for row in rows:
        row["throughput_gain_vs_first"] = (row["throughput"] / base) if base else None
    return rows


def write_compare_csv(path, rows: list) -> None:
    import csv as _csv
    header = ["run", "mode", "controller", "throughput", "online_latency_mean_ns",
              "online_latency_p50_ns", "online_latency_p75_ns", "mean_quality",
              "low_admitted", "throughput_gain_vs_first"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[k] if row[k] is not None else "" for k in header])
