"""QoS mechanism catalog: identifiers, world effects, conflicts, defaults.

Each action mutates the shared SimWorld (buffer size, queue discipline,
FEC, service class).  Applying an action records enough state to revert
it later; stopping an action restores the configuration fields it
touched and releases any reserved bandwidth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Optional, Tuple

from . import netsim
from .netsim import (
    AdmissionRefusedError,
    FecConfig,
    REDParams,
    SimWorld,
)

INCREASE_BUFFER = "increase_buffer"
DECREASE_BUFFER = "decrease_buffer"
ENABLE_RED = "enable_red"
ENABLE_WRED = "enable_wred"
ENABLE_FEC = "enable_fec"
CONTROLLED_LOAD = "controlled_load"
GUARANTEED_LOAD = "guaranteed_load"

BUFFER_STEP_PKTS = 15
BUFFER_MIN_PKTS = 10
BUFFER_MAX_PKTS = 200

# Headroom factor applied to the flow rate when reserving guaranteed
# bandwidth (covers FEC parity overhead and scheduling slack).
GUARANTEED_RESERVATION_FACTOR = 1.25


class ActionFailedError(Exception):
    """The action could not be applied (e.g. admission refused)."""


@dataclass(frozen=True)
class ActionId:
    kind: str
    params: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        # Canonical parameter order so identity survives serialization.
        object.__setattr__(self, "params", tuple(sorted(self.params)))

    def param(self, name: str, default: Optional[float] = None) -> Optional[float]:
        for key, value in self.params:
            if key == name:
                return value
        return default

    @property
    def name(self) -> str:
        if not self.params:
            return self.kind
        args = ",".join(f"{k}={v:g}" for k, v in self.params)
        return f"{self.kind}({args})"


def increase_buffer(step_pkts: int = BUFFER_STEP_PKTS) -> ActionId:
    return ActionId(INCREASE_BUFFER, (("step_pkts", float(step_pkts)),))


def decrease_buffer(step_pkts: int = BUFFER_STEP_PKTS) -> ActionId:
    return ActionId(DECREASE_BUFFER, (("step_pkts", float(step_pkts)),))


def enable_red(min_th: float = 50, max_th: float = 100, max_p: float = 0.1) -> ActionId:
    return ActionId(
        ENABLE_RED, (("min_th", min_th), ("max_th", max_th), ("max_p", max_p))
    )


def enable_wred(min_th: float = 50, max_th: float = 100, max_p: float = 0.1) -> ActionId:
    return ActionId(
        ENABLE_WRED, (("min_th", min_th), ("max_th", max_th), ("max_p", max_p))
    )


def enable_fec(block_k: int = 4, parity: int = 1) -> ActionId:
    return ActionId(ENABLE_FEC, (("block_k", float(block_k)), ("parity", float(parity))))


def controlled_load() -> ActionId:
    return ActionId(CONTROLLED_LOAD)


def guaranteed_load() -> ActionId:
    return ActionId(GUARANTEED_LOAD)


# Mutually exclusive mechanism groups.
CONFLICT_SETS: Tuple[frozenset, ...] = (
    frozenset({INCREASE_BUFFER, DECREASE_BUFFER}),
    frozenset({CONTROLLED_LOAD, GUARANTEED_LOAD}),
    frozenset({ENABLE_RED, ENABLE_WRED}),
)


def conflicts(a: ActionId, b: ActionId) -> bool:
    """True iff the two catalog actions must not coexist."""
    if a == b:
        return False
    if a.kind == b.kind:
        # Two parameterizations of one mechanism are mutually exclusive.
        return True
    return any(a.kind in s and b.kind in s for s in CONFLICT_SETS)


@dataclass(frozen=True)
class TransitionRecord:
    kind: str  # "d1" | "d2" | "d3"
    cause: str
    at_ms: float
    call_id: str = ""
    noop: bool = False


@dataclass
class _Applied:
    action: ActionId
    prev_buffer: Optional[int] = None
    prev_queue: Optional[netsim.QueueConfig] = None
    prev_service: Optional[str] = None
    prev_reserved: float = 0.0
    prev_fec: Optional[FecConfig] = None
    had_fec: bool = False


def _registry(world: SimWorld) -> Dict[Tuple[str, ActionId], _Applied]:
    reg = getattr(world, "_action_registry", None)
    if reg is None:
        reg = {}
        world._action_registry = reg
    return reg


def active_actions(world: SimWorld, flow_id: str) -> List[ActionId]:
    return [a for (fid, a) in _registry(world) if fid == flow_id]


def apply_action(
    world: SimWorld, flow_id: str, action: ActionId, kind: str = "d2"
) -> TransitionRecord:
    """Apply one QoS mechanism on behalf of the given call's flow."""
    reg = _registry(world)
    key = (flow_id, action)
    if key in reg:
        return TransitionRecord(kind, action.name, world.clock, flow_id, noop=True)
    applied = _Applied(action)
    if action.kind in (INCREASE_BUFFER, DECREASE_BUFFER):
        step = int(action.param("step_pkts", BUFFER_STEP_PKTS))
        cur = world.queue.capacity_pkts
        delta = step if action.kind == INCREASE_BUFFER else -step
        new = max(BUFFER_MIN_PKTS, min(BUFFER_MAX_PKTS, cur + delta))
        applied.prev_buffer = cur
        world.set_buffer(new)
    elif action.kind in (ENABLE_RED, ENABLE_WRED):
        applied.prev_queue = world.queue
        params = REDParams(
            action.param("min_th", 50.0),
            action.param("max_th", 100.0),
            action.param("max_p", 0.1),
        )
        if action.kind == ENABLE_RED:
            world.set_discipline(netsim.RED, red=params)
        else:
            # Priority class gets a laxer drop curve than best effort.
            lax = REDParams(
                params.min_th * 1.2, params.max_th * 1.2, params.max_p / 2
            )
            world.set_discipline(netsim.WRED, wred=((0, params), (1, lax)))
    elif action.kind == ENABLE_FEC:
        st = world.flows[flow_id]
        applied.prev_fec = st.cfg.fec
        applied.had_fec = st.cfg.fec is not None
        world.set_fec(
            flow_id,
            FecConfig(int(action.param("block_k", 4)), int(action.param("parity", 1))),
        )
    elif action.kind == CONTROLLED_LOAD:
        cfg = world.flows[flow_id].cfg
        if cfg.service == netsim.CONTROLLED_LOAD:
            return TransitionRecord(kind, action.name, world.clock, flow_id, noop=True)
        applied.prev_service = cfg.service
        applied.prev_reserved = cfg.reserved_kbps
        world.configure_service_class(flow_id, netsim.CONTROLLED_LOAD)
    elif action.kind == GUARANTEED_LOAD:
        cfg = world.flows[flow_id].cfg
        if cfg.service == netsim.GUARANTEED:
            return TransitionRecord(kind, action.name, world.clock, flow_id, noop=True)
        applied.prev_service = cfg.service
        applied.prev_reserved = cfg.reserved_kbps
        reserved = cfg.rate_kbps * GUARANTEED_RESERVATION_FACTOR
        try:
            world.configure_service_class(
                flow_id, netsim.GUARANTEED, reserved_kbps=reserved
            )
        except AdmissionRefusedError as exc:
            raise ActionFailedError(str(exc)) from exc
    else:
        raise ValueError(f"unknown action kind: {action.kind}")
    reg[key] = applied
    return TransitionRecord(kind, action.name, world.clock, flow_id)


def stop_action(
    world: SimWorld, flow_id: str, action: ActionId, kind: str = "d2"
) -> TransitionRecord:
    """Revert a previously applied action; stopping an inactive one is a no-op."""
    reg = _registry(world)
    applied = reg.pop((flow_id, action), None)
    if applied is None:
        return TransitionRecord(
            kind, f"stop:{action.name}", world.clock, flow_id, noop=True
        )
    if applied.prev_buffer is not None:
        world.set_buffer(applied.prev_buffer)
    if applied.prev_queue is not None:
        world.set_discipline(
            applied.prev_queue.discipline,
            red=applied.prev_queue.red,
            wred=applied.prev_queue.wred,
        )
    if action.kind == ENABLE_FEC:
        world.set_fec(flow_id, applied.prev_fec if applied.had_fec else None)
    if applied.prev_service is not None:
        if applied.prev_service == netsim.GUARANTEED:
            world.configure_service_class(
                flow_id, netsim.GUARANTEED, reserved_kbps=applied.prev_reserved
            )
        else:
            world.configure_service_class(flow_id, applied.prev_service)
    return TransitionRecord(kind, f"stop:{action.name}", world.clock, flow_id)


# ---------------- default knowledge seed ----------------

CASE_ORDER: Dict[str, List[ActionId]] = {
    "case1": [guaranteed_load()],
    "case2": [increase_buffer(), enable_red(), enable_fec(), controlled_load()],
    "case3": [decrease_buffer(), enable_wred(), controlled_load()],
    "case4": [controlled_load(), enable_red(min_th=80, max_th=100)],
}


def default_knowledge() -> dict:
    """Shipped knowledge seed: case orderings plus calibrated h estimates.

    The JSON payload is regenerated by the harness calibration mode; the
    orderings themselves are fixed by the analysis-phase cases.
    """
    payload = resources.files("voipqos.data").joinpath("default_kb.json")
    return json.loads(payload.read_text())
