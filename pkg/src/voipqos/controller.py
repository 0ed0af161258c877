"""Closed-loop call controller over the simulated network.

Each call is a chain of states opened by transitions: network/heuristic
changes (d1), single-call QoS actions (d2) and multi-call coordination
(d3).  Constraint violations start an episode that walks the knowledge
base's candidate actions until the call recovers, acquiring measured
outcomes along the way and, with learning enabled, re-ranking the case
afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import actions as actions_mod
from . import knowledge as kb_mod
from .actions import ActionFailedError, ActionId, TransitionRecord
from .knowledge import KnowledgeBase, ScenarioCase
from .metrics import (
    Constraints,
    DEFAULT_CONSTRAINTS,
    HeuristicSample,
    QualityCategory,
    WindowStats,
    classify,
    satisfies,
    update_window,
)
from .netsim import SimWorld

# A heuristic move of more than this relative fraction, sustained for
# two consecutive windows, opens a new d1 state.
SIGNIFICANT_CHANGE = 0.20
SIGNIFICANT_WINDOWS = 2

ACCEPTED = "accepted"
DEGRADED = "degraded"


def detect_case(
    g: Tuple[float, float], constraints: Constraints = DEFAULT_CONSTRAINTS
) -> ScenarioCase:
    """Which analysis-phase scenario the (delay, loss) pair falls into."""
    delay_ms, loss = g
    delay_ok = delay_ms <= constraints.delay_max_ms
    loss_ok = loss <= constraints.loss_max
    if delay_ok and loss_ok:
        return ScenarioCase.CASE1
    if delay_ok:
        return ScenarioCase.CASE2
    if loss_ok:
        return ScenarioCase.CASE3
    return ScenarioCase.CASE4


@dataclass
class CallState:
    state_id: int
    call_id: str
    opened_at_ms: float
    entering: str  # "start" | "d1" | "d2" | "d3" | "goal"
    closed_at_ms: Optional[float] = None
    g: WindowStats = field(default_factory=WindowStats)
    sample: Optional[HeuristicSample] = None
    category: Optional[QualityCategory] = None
    opening_sample: Optional[HeuristicSample] = None


@dataclass
class Episode:
    case: ScenarioCase
    started_ms: float
    tried: List[ActionId] = field(default_factory=list)
    last_action: Optional[ActionId] = None
    settling: bool = False
    exhausted: bool = False
    satisfied_ms: Optional[float] = None


@dataclass
class Call:
    call_id: str
    flow_id: str
    constraints: Constraints = DEFAULT_CONSTRAINTS
    weight: float = 1.0
    states: List[CallState] = field(default_factory=list)
    active_actions: List[ActionId] = field(default_factory=list)
    status: str = ACCEPTED
    episode: Optional[Episode] = None
    sample: Optional[HeuristicSample] = None
    drift_windows: int = 0
    closed: bool = False

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError("call weight must be > 0")

    @property
    def current_state(self) -> CallState:
        return self.states[-1]


def check_global(calls: List[Call]) -> Tuple[bool, Dict[str, float]]:
    """Weighted means of the calls' current samples vs shared thresholds."""
    if not calls:
        raise ValueError("check_global needs at least one call")
    sampled = [c for c in calls if c.sample is not None]
    if not sampled:
        return True, {}
    wsum = sum(c.weight for c in sampled)
    means = {
        "delay_ms": sum(c.weight * c.sample.delay_ms for c in sampled) / wsum,
        "loss": sum(c.weight * c.sample.loss for c in sampled) / wsum,
        "mos": sum(c.weight * c.sample.mos for c in sampled) / wsum,
    }
    constraints = sampled[0].constraints
    ok = (
        means["delay_ms"] <= constraints.delay_max_ms
        and means["loss"] <= constraints.loss_max
        and means["mos"] >= constraints.mos_min
    )
    return ok, means


class Controller:
    """Runs the closed loop for one SimWorld and its calls."""

    def __init__(
        self,
        world: SimWorld,
        kb: KnowledgeBase,
        constraints: Constraints = DEFAULT_CONSTRAINTS,
        learning: bool = True,
        window_s: float = 5.0,
        coordinate_cooldown_windows: int = 2,
    ):
        self.world = world
        self.kb = kb
        self.constraints = constraints
        self.learning = learning
        self.window_ms = window_s * 1000.0
        self.calls: Dict[str, Call] = {}
        self.transitions: List[TransitionRecord] = []
        self.episodes: List[dict] = []
        self._state_seq = 0
        self._cooldown = coordinate_cooldown_windows
        self._cooldown_left = 0
        # One entry per action application: did the triggering sample
        # actually violate the call's constraints?
        self.apply_checks: List[bool] = []

    # ---------------- call lifecycle ----------------

    def add_call(self, call_id: str, flow_id: str, weight: float = 1.0) -> Call:
        call = Call(call_id, flow_id, self.constraints, weight)
        self.calls[call_id] = call
        self._open_state(call, "start", self.world.clock)
        return call

    def close_call(self, call_id: str) -> None:
        call = self.calls[call_id]
        if call.closed:
            return
        now = self.world.clock
        for action in list(call.active_actions):
            self._stop(call, action, "d2")
        if call.episode is not None:
            self._finish_episode(call, satisfied=False)
        self._open_state(call, "goal", now)
        call.current_state.closed_at_ms = now
        call.closed = True

    def active_calls(self) -> List[Call]:
        return [c for c in self.calls.values() if not c.closed]

    # ---------------- state bookkeeping ----------------

    def _open_state(self, call: Call, entering: str, now: float) -> None:
        if call.states:
            call.current_state.closed_at_ms = now
        self._state_seq += 1
        state = CallState(self._state_seq, call.call_id, now, entering)
        if call.sample is not None:
            state.opening_sample = call.sample
            state.category = classify(call.sample)
        call.states.append(state)
        call.drift_windows = 0

    def _record(self, call: Call, kind: str, cause: str, now: float) -> None:
        self.transitions.append(TransitionRecord(kind, cause, now, call.call_id))

    # ---------------- per-window loop ----------------

    def on_window(self, now_ms: float) -> None:
        """One control iteration; the world must already be advanced to now."""
        changes = self.world.pop_notifications()
        calls = self.active_calls()
        for call in calls:
            sample = self.world.measure(call.flow_id)
            if sample is not None:
                call.sample = sample
            self._observe(call, changes, now_ms)
        for call in calls:
            if call.sample is not None:
                call.status = (
                    ACCEPTED if satisfies(call.sample, call.constraints) else DEGRADED
                )
        if self._cooldown_left > 0:
            self._cooldown_left -= 1
        multi = [c for c in calls if c.sample is not None]
        if len(multi) >= 2 and self._cooldown_left == 0:
            ok, _ = check_global(multi)
            if not ok:
                self.coordinate(multi, now_ms)
                self._cooldown_left = self._cooldown
                return
        for call in calls:
            self.step_call(call, now_ms)

    def _observe(self, call: Call, changes, now_ms: float) -> None:
        """Open a d1 state on a network change or significant heuristic move."""
        sample = call.sample
        if sample is None:
            return
        state = call.current_state
        state.g = update_window(state.g, sample.delay_ms, sample.loss)
        state.sample = sample
        new_category = classify(sample)
        if state.category is None:
            state.category = new_category
        if state.opening_sample is None:
            state.opening_sample = sample
        if changes:
            cause = ",".join(f"{c.kind}={c.value:g}" for c in changes)
            self._record(call, "d1", cause, now_ms)
            self._open_state(call, "d1", now_ms)
            self._seed_state(call, sample)
            return
        if new_category != state.category:
            self._record(
                call, "d1", f"category:{state.category.name}->{new_category.name}", now_ms
            )
            self._open_state(call, "d1", now_ms)
            self._seed_state(call, sample)
            return
        ref = state.opening_sample
        drifted = _rel_change(ref.delay_ms, sample.delay_ms) > SIGNIFICANT_CHANGE or (
            _rel_change(ref.loss, sample.loss) > SIGNIFICANT_CHANGE
        )
        call.drift_windows = call.drift_windows + 1 if drifted else 0
        if call.drift_windows >= SIGNIFICANT_WINDOWS:
            self._record(call, "d1", "heuristic-drift", now_ms)
            self._open_state(call, "d1", now_ms)
            self._seed_state(call, sample)

    def _seed_state(self, call: Call, sample: HeuristicSample) -> None:
        state = call.current_state
        state.opening_sample = sample
        state.category = classify(sample)
        state.sample = sample
        state.g = update_window(state.g, sample.delay_ms, sample.loss)

    # ---------------- single-call control ----------------

    def step_call(self, call: Call, now_ms: float) -> None:
        sample = call.sample
        if sample is None:
            return
        ep = call.episode
        violated = not satisfies(sample, call.constraints)
        if ep is not None and ep.settling:
            kb_mod.acquire(self.kb, ep.case, ep.last_action, (sample.delay_ms, sample.loss))
            ep.settling = False
        if violated:
            if ep is None:
                ep = Episode(
                    detect_case((sample.delay_ms, sample.loss), call.constraints),
                    now_ms,
                )
                call.episode = ep
                entry = kb_mod.select_one_of(self.kb, ep.case)
            else:
                if ep.exhausted:
                    return
                entry = kb_mod.select_next(self.kb, ep.case, ep.tried)
            self._try_apply(call, ep, entry, now_ms, kind="d2")
        else:
            if ep is not None:
                self._finish_episode(call, satisfied=True)

    def _try_apply(
        self, call: Call, ep: Episode, entry, now_ms: float, kind: str
    ) -> None:
        while entry is not None:
            action = entry.action
            try:
                record = self._apply(call, action, kind)
            except ActionFailedError:
                ep.tried.append(action)
                entry = kb_mod.select_next(self.kb, ep.case, ep.tried)
                continue
            ep.tried.append(action)
            ep.last_action = action
            ep.settling = True
            self.apply_checks.append(
                call.sample is not None
                and not satisfies(call.sample, call.constraints)
            )
            self.transitions.append(record)
            self._open_state(call, kind, now_ms)
            return
        ep.exhausted = True
        self._record(call, kind, "episode-exhausted", now_ms)

    def _apply(self, call: Call, action: ActionId, kind: str) -> TransitionRecord:
        # Applying a mechanism implicitly retires a conflicting active one.
        for active in list(call.active_actions):
            if actions_mod.conflicts(active, action):
                self._stop(call, active, kind)
        record = actions_mod.apply_action(self.world, call.flow_id, action, kind)
        if not record.noop and action not in call.active_actions:
            call.active_actions.append(action)
        return record

    def _stop(self, call: Call, action: ActionId, kind: str) -> TransitionRecord:
        record = actions_mod.stop_action(self.world, call.flow_id, action, kind)
        if action in call.active_actions:
            call.active_actions.remove(action)
        self.transitions.append(record)
        return record

    def _finish_episode(self, call: Call, satisfied: bool) -> None:
        ep = call.episode
        now = self.world.clock
        if satisfied:
            ep.satisfied_ms = now
            if ep.last_action is not None and not ep.exhausted and self.learning:
                kb_mod.refine(self.kb, ep.case, ep.last_action)
        self.episodes.append(
            {
                "call_id": call.call_id,
                "case": ep.case.value,
                "started_ms": ep.started_ms,
                "satisfied_ms": ep.satisfied_ms,
                "actions": [a.name for a in ep.tried],
                "final_action": ep.last_action.name if ep.last_action else None,
                "exhausted": ep.exhausted,
                "satisfied": satisfied,
            }
        )
        call.episode = None

    # ---------------- multi-call coordination ----------------

    def coordinate(self, calls: List[Call], now_ms: float) -> None:
        """Global-constraint recovery: free accepted calls' mechanisms and
        point the knowledge base's best candidates at the degraded calls."""
        accepted = [c for c in calls if c.status == ACCEPTED]
        degraded = [c for c in calls if c.status == DEGRADED]
        if not degraded:
            return
        for call in accepted:
            if call.active_actions:
                for action in list(call.active_actions):
                    self._stop(call, action, "d3")
                self._open_state(call, "d3", now_ms)
        for call in degraded:
            sample = call.sample
            case = detect_case((sample.delay_ms, sample.loss), call.constraints)
            if call.episode is None:
                call.episode = Episode(case, now_ms)
            ep = call.episode
            entry = kb_mod.select_next(self.kb, case, ep.tried)
            self._try_apply(call, ep, entry, now_ms, kind="d3")


def _rel_change(ref: float, value: float) -> float:
    if ref == 0.0:
        return float("inf") if value != 0.0 else 0.0
    return abs(value - ref) / abs(ref)


# ---------------- trace validation ----------------

def validate_trace(controller: Controller) -> List[str]:
    """Check state-machine soundness over all calls; returns error strings."""
    errors: List[str] = []
    for call in controller.calls.values():
        states = call.states
        if not states:
            errors.append(f"{call.call_id}: no states")
            continue
        if states[0].entering != "start":
            errors.append(f"{call.call_id}: first state is {states[0].entering}")
        goal_count = sum(1 for s in states if s.entering == "goal")
        if call.closed and (goal_count != 1 or states[-1].entering != "goal"):
            errors.append(f"{call.call_id}: terminated call must end in one goal state")
        for prev, cur in zip(states, states[1:]):
            if cur.opened_at_ms < prev.opened_at_ms:
                errors.append(f"{call.call_id}: states out of order")
            if prev.closed_at_ms is not None and prev.closed_at_ms > cur.opened_at_ms:
                errors.append(f"{call.call_id}: overlapping state intervals")
        for state in states[1:-1] if call.closed else states[1:]:
            if state.entering not in ("d1", "d2", "d3"):
                errors.append(
                    f"{call.call_id}: interior state entered by {state.entering}"
                )
    # No action application while the triggering sample satisfied constraints.
    if not all(controller.apply_checks):
        errors.append("an action was applied while constraints were satisfied")
    return errors
