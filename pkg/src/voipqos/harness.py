"""Scenario configuration, run orchestration and artifact emission."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from . import actions as actions_mod
from . import netsim
from .controller import Controller, check_global, validate_trace
from .knowledge import KnowledgeBase, ScenarioCase
from .metrics import (
    Constraints,
    DEFAULT_CONSTRAINTS,
    classify,
    estimate_mos,
    satisfies,
)
from .netsim import (
    BackgroundFlow,
    FecConfig,
    LinkConfig,
    MediaFlow,
    NetworkChange,
    QueueConfig,
    REDParams,
    SimWorld,
)

SCHEMA_VERSION = 1
WINDOW_S = 5.0


class ScenarioError(Exception):
    pass


@dataclass
class FlowSpec:
    rate_kbps: float = 26.0
    packet_interval_ms: float = 20.0
    burst_pkts: int = 1
    service: str = netsim.BEST_EFFORT
    reserved_kbps: float = 0.0
    fec_block_k: int = 0  # 0 = no FEC


@dataclass
class CallSpec:
    call_id: str
    flow: FlowSpec = field(default_factory=FlowSpec)
    weight: float = 1.0
    start_s: float = 0.0
    end_s: Optional[float] = None


@dataclass
class TimelineEntry:
    at_s: float
    kind: str
    value: float


@dataclass
class Scenario:
    name: str
    duration_s: float
    link: Dict[str, float] = field(
        default_factory=lambda: {"latency_ms": 6.0, "loss_rate": 0.0, "capacity_kbps": 1000.0}
    )
    queue: Dict[str, object] = field(
        default_factory=lambda: {"capacity_pkts": 100, "discipline": "tail_drop"}
    )
    calls: List[CallSpec] = field(default_factory=list)
    background: Optional[Dict[str, float]] = None
    timeline: List[TimelineEntry] = field(default_factory=list)
    learning: bool = True
    constraints: Optional[Dict[str, float]] = None
    version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise ScenarioError(f"{self.name}: duration_s must be > 0")
        at = [e.at_s for e in self.timeline]
        if at != sorted(at):
            raise ScenarioError(f"{self.name}: timeline must be sorted by at_s")
        for call in self.calls:
            end = call.end_s if call.end_s is not None else self.duration_s
            if not 0 <= call.start_s < end <= self.duration_s:
                raise ScenarioError(
                    f"{self.name}: call {call.call_id} interval outside duration"
                )

    def get_constraints(self) -> Constraints:
        if self.constraints is None:
            return DEFAULT_CONSTRAINTS
        return Constraints(**self.constraints)


def scenario_to_json(scenario: Scenario) -> dict:
    return asdict(scenario)


def scenario_from_json(data: dict) -> Scenario:
    try:
        scenario = Scenario(
            name=data["name"],
            duration_s=data["duration_s"],
            link=dict(data.get("link", {})) or Scenario("_", 1).link,
            queue=dict(data.get("queue", {})) or Scenario("_", 1).queue,
            calls=[
                CallSpec(
                    call_id=c["call_id"],
                    flow=FlowSpec(**c.get("flow", {})),
                    weight=c.get("weight", 1.0),
                    start_s=c.get("start_s", 0.0),
                    end_s=c.get("end_s"),
                )
                for c in data.get("calls", [])
            ],
            background=data.get("background"),
            timeline=[TimelineEntry(**t) for t in data.get("timeline", [])],
            learning=data.get("learning", True),
            constraints=data.get("constraints"),
            version=data.get("version", SCHEMA_VERSION),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"invalid scenario field: {exc}") from exc
    scenario.validate()
    return scenario


def write_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_json(scenario), fh, indent=2)


def load_scenario(path_or_preset: str) -> Scenario:
    if path_or_preset in PRESETS:
        return PRESETS[path_or_preset]()
    if not os.path.exists(path_or_preset):
        raise ScenarioError(
            f"{path_or_preset!r} is neither a preset ({', '.join(sorted(PRESETS))}) "
            "nor an existing file"
        )
    with open(path_or_preset) as fh:
        return scenario_from_json(json.load(fh))


# ---------------- presets ----------------

def _bursty_call(call_id: str = "call-1", burst: int = 150) -> CallSpec:
    return CallSpec(call_id, FlowSpec(burst_pkts=burst))


def _table1(name: str, loss: float, buffer_pkts: int, service: str = "best_effort") -> Scenario:
    return Scenario(
        name=name,
        duration_s=30.0,
        link={"latency_ms": 100.0, "loss_rate": loss, "capacity_kbps": 100.0},
        queue={"capacity_pkts": buffer_pkts, "discipline": "tail_drop"},
        calls=[
            CallSpec(
                "call-1",
                FlowSpec(burst_pkts=150, service=service, reserved_kbps=32.5),
            )
        ],
        learning=False,
    )


def _table4(name: str, bg_kbps: float) -> Scenario:
    return Scenario(
        name=name,
        duration_s=30.0,
        link={"latency_ms": 6.0, "loss_rate": 0.0, "capacity_kbps": 1000.0},
        queue={
            "capacity_pkts": 150,
            "discipline": "red",
            "red": {"min_th": 50, "max_th": 100, "max_p": 0.1, "ewma_weight": 0.002},
        },
        calls=[CallSpec("call-1", FlowSpec())],
        background={"rate_kbps": bg_kbps, "packet_bytes": 100, "burst_pkts": 1},
        learning=False,
    )


def _table7_singlecall() -> Scenario:
    return Scenario(
        name="table7-singlecall",
        duration_s=600.0,
        link={"latency_ms": 6.0, "loss_rate": 0.0, "capacity_kbps": 400.0},
        queue={"capacity_pkts": 120, "discipline": "tail_drop"},
        calls=[CallSpec("call-1", FlowSpec())],
        background={"rate_kbps": 0.0, "packet_bytes": 100, "burst_pkts": 1},
        timeline=[
            TimelineEntry(30.0, netsim.SET_LATENCY, 50.0),
            TimelineEntry(90.0, netsim.SET_LATENCY, 65.0),
            TimelineEntry(150.0, netsim.SET_LATENCY, 120.0),
            TimelineEntry(210.0, netsim.SET_BACKGROUND_RATE, 380.0),
            TimelineEntry(390.0, netsim.SET_BACKGROUND_RATE, 80.0),
            TimelineEntry(400.0, netsim.SET_LOSS_RATE, 0.065),
        ],
        learning=True,
    )


def _fig7_multicall() -> Scenario:
    return Scenario(
        name="fig7-multicall",
        duration_s=400.0,
        link={"latency_ms": 30.0, "loss_rate": 0.0, "capacity_kbps": 500.0},
        queue={"capacity_pkts": 40, "discipline": "tail_drop"},
        calls=[
            CallSpec("call-1", FlowSpec()),
            CallSpec("call-2", FlowSpec()),
        ],
        background={"rate_kbps": 0.0, "packet_bytes": 100, "burst_pkts": 1},
        timeline=[TimelineEntry(60.0, netsim.SET_BACKGROUND_RATE, 515.0)],
        learning=True,
    )


def _fig10_learning() -> Scenario:
    return Scenario(
        name="fig10-learning",
        duration_s=700.0,
        link={"latency_ms": 20.0, "loss_rate": 0.0, "capacity_kbps": 1000.0},
        queue={"capacity_pkts": 100, "discipline": "tail_drop"},
        calls=[
            CallSpec("call-1", FlowSpec(), start_s=0.0, end_s=340.0),
            CallSpec("call-2", FlowSpec(), start_s=350.0, end_s=690.0),
        ],
        timeline=[
            TimelineEntry(30.0, netsim.SET_LOSS_RATE, 0.06),
            TimelineEntry(330.0, netsim.SET_LOSS_RATE, 0.0),
            TimelineEntry(380.0, netsim.SET_LOSS_RATE, 0.06),
        ],
        learning=True,
    )


def _video_loss_sweep() -> Scenario:
    return Scenario(
        name="video-loss-sweep",
        duration_s=360.0,
        link={"latency_ms": 20.0, "loss_rate": 0.0, "capacity_kbps": 2000.0},
        queue={"capacity_pkts": 100, "discipline": "tail_drop"},
        calls=[CallSpec("call-1", FlowSpec(rate_kbps=512.0))],
        timeline=[
            TimelineEntry(60.0, netsim.SET_LOSS_RATE, 0.01),
            TimelineEntry(120.0, netsim.SET_LOSS_RATE, 0.03),
            TimelineEntry(180.0, netsim.SET_LOSS_RATE, 0.06),
        ],
        learning=True,
    )


PRESETS = {
    "table1-s1": lambda: _table1("table1-s1", 0.0, 200),
    "table1-s2": lambda: _table1("table1-s2", 0.0, 20),
    "table1-s3": lambda: _table1("table1-s3", 0.30, 200),
    "table1-s4": lambda: _table1("table1-s4", 0.30, 20),
    "fig5-s3-controlled": lambda: _table1("fig5-s3-controlled", 0.30, 200, "controlled_load"),
    "fig5-s3-guaranteed": lambda: _table1("fig5-s3-guaranteed", 0.30, 200, "guaranteed"),
    "fig5-s4-controlled": lambda: _table1("fig5-s4-controlled", 0.30, 20, "controlled_load"),
    "fig5-s4-guaranteed": lambda: _table1("fig5-s4-guaranteed", 0.30, 20, "guaranteed"),
    "table4-red-1k": lambda: _table4("table4-red-1k", 900.0),
    "table4-red-10k": lambda: _table4("table4-red-10k", 1080.0),
    "table7-singlecall": _table7_singlecall,
    "fig7-multicall": _fig7_multicall,
    "fig10-learning": _fig10_learning,
    "video-loss-sweep": _video_loss_sweep,
}


# ---------------- world construction ----------------

def build_world(scenario: Scenario, seed: int) -> SimWorld:
    scenario.validate()
    link = LinkConfig(**scenario.link)
    queue = _queue_config(scenario.queue)
    timeline = tuple(
        NetworkChange(e.at_s * 1000.0, e.kind, e.value) for e in scenario.timeline
    )
    world = SimWorld(link, queue, seed=seed, timeline=timeline)
    for call in scenario.calls:
        world.add_media_flow(_media_flow(call, scenario))
    if scenario.background is not None:
        bg = scenario.background
        world.add_background_flow(
            BackgroundFlow(
                "bg",
                rate_kbps=bg.get("rate_kbps", 0.0),
                packet_bytes=int(bg.get("packet_bytes", 100)),
                burst_pkts=int(bg.get("burst_pkts", 1)),
            )
        )
    return world


def _queue_config(queue: Dict[str, object]) -> QueueConfig:
    discipline = queue.get("discipline", "tail_drop")
    red = None
    if "red" in queue and queue["red"] is not None:
        red = REDParams(**queue["red"])  # type: ignore[arg-type]
    return QueueConfig(
        capacity_pkts=int(queue.get("capacity_pkts", 100)),
        discipline=discipline,
        red=red,
    )


def _flow_id(call_id: str) -> str:
    return f"flow-{call_id}"


def _media_flow(call: CallSpec, scenario: Scenario) -> MediaFlow:
    f = call.flow
    service = f.service
    reserved = f.reserved_kbps
    if service == "guaranteed" and reserved <= 0:
        reserved = f.rate_kbps * actions_mod.GUARANTEED_RESERVATION_FACTOR
    return MediaFlow(
        flow_id=_flow_id(call.call_id),
        rate_kbps=f.rate_kbps,
        packet_interval_ms=f.packet_interval_ms,
        burst_pkts=f.burst_pkts,
        service=service,
        reserved_kbps=reserved,
        fec=FecConfig(f.fec_block_k) if f.fec_block_k else None,
        start_ms=call.start_s * 1000.0,
        end_ms=None if call.end_s is None else call.end_s * 1000.0,
    )


# ---------------- calibration (analysis phase) ----------------

def _calibration_scenario(case: ScenarioCase) -> Scenario:
    if case == ScenarioCase.CASE1:
        return Scenario(
            name="calib-case1",
            duration_s=40.0,
            link={"latency_ms": 30.0, "loss_rate": 0.0, "capacity_kbps": 1000.0},
            queue={"capacity_pkts": 100, "discipline": "tail_drop"},
            calls=[CallSpec("cal", FlowSpec())],
        )
    if case == ScenarioCase.CASE2:
        # Loss from the call's own bursts overflowing a small buffer.
        return Scenario(
            name="calib-case2",
            duration_s=40.0,
            link={"latency_ms": 20.0, "loss_rate": 0.0, "capacity_kbps": 500.0},
            queue={"capacity_pkts": 25, "discipline": "tail_drop"},
            calls=[CallSpec("cal", FlowSpec(burst_pkts=30))],
        )
    if case == ScenarioCase.CASE3:
        # Delay from a standing queue under slight oversubscription.
        return Scenario(
            name="calib-case3",
            duration_s=40.0,
            link={"latency_ms": 100.0, "loss_rate": 0.0, "capacity_kbps": 400.0},
            queue={"capacity_pkts": 200, "discipline": "tail_drop"},
            calls=[CallSpec("cal", FlowSpec())],
            background={"rate_kbps": 380.0, "packet_bytes": 100, "burst_pkts": 1},
        )
    return Scenario(
        name="calib-case4",
        duration_s=40.0,
        link={"latency_ms": 190.0, "loss_rate": 0.08, "capacity_kbps": 500.0},
        queue={"capacity_pkts": 25, "discipline": "tail_drop"},
        calls=[CallSpec("cal", FlowSpec(burst_pkts=30))],
    )


def calibrate(seed: int = 0) -> KnowledgeBase:
    """Analysis phase: measure each catalog action once per case."""
    kb = KnowledgeBase()
    for case_name, action_list in actions_mod.CASE_ORDER.items():
        case = ScenarioCase(case_name)
        scenario = _calibration_scenario(case)
        for action in action_list:
            world = build_world(scenario, seed)
            flow_id = _flow_id(scenario.calls[0].call_id)
            world.advance(10_000.0)
            world.measure(flow_id)  # discard warmup window
            try:
                actions_mod.apply_action(world, flow_id, action)
            except actions_mod.ActionFailedError:
                kb.add_entry(case, action, scenario.link["latency_ms"], 1.0)
                continue
            world.advance(15_000.0)
            world.measure(flow_id)  # discard settling window
            world.advance(35_000.0)
            sample = world.measure(flow_id)
            if sample is None:
                kb.add_entry(case, action, scenario.link["latency_ms"], 0.0)
            else:
                kb.add_entry(case, action, sample.delay_ms, sample.loss)
    return kb


def default_kb() -> KnowledgeBase:
    """Knowledge base from the shipped calibration seed."""
    return KnowledgeBase.from_json(actions_mod.default_knowledge())


# ---------------- runs ----------------

@dataclass
class RunArtifacts:
    scenario: Scenario
    seed: int
    mode: str
    summary: dict
    timeseries: List[Tuple[float, str, float, float, float]]
    world: Optional[SimWorld] = None
    controller: Optional[Controller] = None
    kb: Optional[KnowledgeBase] = None


def run(
    scenario: Scenario,
    seed: int = 0,
    mode: str = "control",
    learning: Optional[bool] = None,
    out_dir: Optional[str] = None,
) -> RunArtifacts:
    if mode == "calibrate":
        kb = calibrate(seed)
        artifacts = RunArtifacts(scenario, seed, mode, {"revision": kb.revision}, [], kb=kb)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "kb.json"), "w") as fh:
                json.dump(kb.to_json(), fh, indent=2, sort_keys=True)
        return artifacts
    if mode == "baseline":
        artifacts = _run_baseline(scenario, seed)
    elif mode == "control":
        artifacts = _run_control(scenario, seed, learning)
    else:
        raise ValueError(f"unknown mode: {mode}")
    if out_dir is not None:
        write_outputs(artifacts, out_dir)
    return artifacts


def _run_baseline(scenario: Scenario, seed: int) -> RunArtifacts:
    scenario.validate()
    world = build_world(scenario, seed)
    constraints = scenario.get_constraints()
    timeseries = []
    window_ms = WINDOW_S * 1000.0
    samples: Dict[str, list] = {c.call_id: [] for c in scenario.calls}
    t = 0.0
    while t < scenario.duration_s * 1000.0 - 1e-9:
        t += window_ms
        world.advance(min(t, scenario.duration_s * 1000.0))
        world.pop_notifications()
        for call in scenario.calls:
            sample = world.measure(_flow_id(call.call_id))
            if sample is not None:
                samples[call.call_id].append(sample)
                timeseries.append(
                    (t / 1000.0, call.call_id, sample.delay_ms, sample.loss, sample.mos)
                )
    summary = _summary(scenario, world, samples, constraints, episodes=[])
    return RunArtifacts(scenario, seed, "baseline", summary, timeseries, world=world)


def _run_control(
    scenario: Scenario, seed: int, learning: Optional[bool]
) -> RunArtifacts:
    scenario.validate()
    world = build_world(scenario, seed)
    constraints = scenario.get_constraints()
    learn = scenario.learning if learning is None else learning
    kb = default_kb()
    kb.constraints = constraints
    controller = Controller(world, kb, constraints, learning=learn, window_s=WINDOW_S)
    window_ms = WINDOW_S * 1000.0
    timeseries = []
    samples: Dict[str, list] = {c.call_id: [] for c in scenario.calls}
    opened = set()
    t = 0.0
    end_ms = scenario.duration_s * 1000.0
    while t < end_ms - 1e-9:
        # Open/close calls whose boundaries fall in this window.
        for call in scenario.calls:
            if call.call_id not in opened and call.start_s * 1000.0 <= t:
                controller.add_call(call.call_id, _flow_id(call.call_id), call.weight)
                opened.add(call.call_id)
        t = min(t + window_ms, end_ms)
        world.advance(t)
        for call in scenario.calls:
            call_end = (call.end_s if call.end_s is not None else scenario.duration_s)
            if call.call_id in opened and call_end * 1000.0 <= t:
                ctrl_call = controller.calls[call.call_id]
                if not ctrl_call.closed:
                    world.end_flow(_flow_id(call.call_id))
                    controller.close_call(call.call_id)
        controller.on_window(t)
        live = controller.active_calls()
        for call in live:
            if call.sample is not None:
                samples[call.call_id].append(call.sample)
                timeseries.append(
                    (
                        t / 1000.0,
                        call.call_id,
                        call.sample.delay_ms,
                        call.sample.loss,
                        call.sample.mos,
                    )
                )
        if len(live) >= 2:
            ok, means = check_global(live)
            if means:
                timeseries.append(
                    (t / 1000.0, "__global__", means["delay_ms"], means["loss"], means["mos"])
                )
    for call in scenario.calls:
        if call.call_id in opened and not controller.calls[call.call_id].closed:
            controller.close_call(call.call_id)
    summary = _summary(scenario, world, samples, constraints, controller.episodes)
    summary["trace_errors"] = validate_trace(controller)
    return RunArtifacts(
        scenario, seed, "control", summary, timeseries,
        world=world, controller=controller, kb=kb,
    )


def _summary(
    scenario: Scenario,
    world: SimWorld,
    samples: Dict[str, list],
    constraints: Constraints,
    episodes: List[dict],
) -> dict:
    per_call = {}
    all_ok = bool(scenario.calls)
    for call in scenario.calls:
        totals = world.totals(_flow_id(call.call_id))
        resolved = totals.delivered + totals.dropped
        avg_loss = (totals.dropped - totals.recovered) / resolved if resolved else 0.0
        avg_delay = totals.delay_sum_ms / totals.delay_n if totals.delay_n else 0.0
        windows = samples.get(call.call_id, [])
        ok_windows = sum(1 for s in windows if satisfies(s, constraints))
        avg_mos = sum(s.mos for s in windows) / len(windows) if windows else estimate_mos(
            avg_delay, min(1.0, avg_loss)
        )
        call_ok = (
            avg_delay <= constraints.delay_max_ms
            and avg_loss <= constraints.loss_max
            and avg_mos >= constraints.mos_min
        )
        all_ok = all_ok and call_ok
        per_call[call.call_id] = {
            "avg_delay_ms": avg_delay,
            "avg_loss": avg_loss,
            "avg_mos": avg_mos,
            "windows": len(windows),
            "satisfied_windows": ok_windows,
            "satisfaction_fraction": ok_windows / len(windows) if windows else 0.0,
            "packets_sent": totals.sent,
            "packets_delivered": totals.delivered,
            "packets_recovered": totals.recovered,
            "constraints_met": call_ok,
        }
    ep_out = []
    for ep in episodes:
        entry = dict(ep)
        if ep["satisfied_ms"] is not None:
            entry["time_to_satisfaction_s"] = (ep["satisfied_ms"] - ep["started_ms"]) / 1000.0
        ep_out.append(entry)
    return {
        "scenario": scenario.name,
        "calls": per_call,
        "episodes": ep_out,
        "constraints_met": all_ok,
    }


# ---------------- artifact emission ----------------

def write_outputs(artifacts: RunArtifacts, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name: str) -> str:
        written.append(os.path.join(out_dir, name))
        return written[-1]

    if artifacts.world is not None:
        artifacts.world.export_trace_csv(path("trace.csv"))
    with open(path("states.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "state_id", "call_id", "entering", "opened_ms", "closed_ms",
                "avg_delay", "avg_loss", "mos", "category",
            ]
        )
        if artifacts.controller is not None:
            for call in artifacts.controller.calls.values():
                for s in call.states:
                    writer.writerow(
                        [
                            s.state_id,
                            s.call_id,
                            s.entering,
                            f"{s.opened_at_ms:.3f}",
                            "" if s.closed_at_ms is None else f"{s.closed_at_ms:.3f}",
                            f"{s.g.avg_delay_ms:.3f}",
                            f"{s.g.avg_loss:.6f}",
                            "" if s.sample is None else f"{s.sample.mos:.3f}",
                            "" if s.category is None else s.category.name,
                        ]
                    )
    with open(path("transitions.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["at_ms", "call_id", "kind", "cause"])
        if artifacts.controller is not None:
            for tr in artifacts.controller.transitions:
                writer.writerow([f"{tr.at_ms:.3f}", tr.call_id, tr.kind, tr.cause])
    with open(path("timeseries.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "call_id", "delay_ms", "loss", "mos"])
        for row in artifacts.timeseries:
            writer.writerow(
                [f"{row[0]:.3f}", row[1], f"{row[2]:.6f}", f"{row[3]:.8f}", f"{row[4]:.6f}"]
            )
    if artifacts.kb is not None:
        with open(path("kb.json"), "w") as fh:
            json.dump(artifacts.kb.to_json(), fh, indent=2, sort_keys=True)
    with open(path("summary.json"), "w") as fh:
        json.dump(artifacts.summary, fh, indent=2, sort_keys=True)
    return written
