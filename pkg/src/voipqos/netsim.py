"""Deterministic discrete-event simulation of a shared-bottleneck VoIP path.

All flows (media calls plus CBR background) traverse one queue and one
link.  The queue supports tail-drop, RED and WRED disciplines plus a
strict-priority class used by the IntServ-style service classes.  Media
flows can run single-parity FEC.  A scripted timeline of network changes
drives impairments; every run with the same (seed, config) produces the
same event history.
"""
from __future__ import annotations

import csv
import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .metrics import HeuristicSample

BEST_EFFORT = "best_effort"
CONTROLLED_LOAD = "controlled_load"
GUARANTEED = "guaranteed"


class AdmissionRefusedError(Exception):
    """Raised when a guaranteed-service reservation cannot be admitted."""


@dataclass(frozen=True)
class LinkConfig:
    latency_ms: float = 6.0
    loss_rate: float = 0.0
    capacity_kbps: float = 1000.0

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be in [0, 1]")
        if self.capacity_kbps <= 0:
            raise ValueError("capacity_kbps must be > 0")


@dataclass(frozen=True)
class REDParams:
    min_th: float = 50.0
    max_th: float = 100.0
    max_p: float = 0.1
    ewma_weight: float = 0.002

    def __post_init__(self) -> None:
        if not 0 < self.min_th < self.max_th:
            raise ValueError("need 0 < min_th < max_th")
        if not 0.0 < self.max_p <= 1.0:
            raise ValueError("max_p must be in (0, 1]")
        if not 0.0 < self.ewma_weight <= 1.0:
            raise ValueError("ewma_weight must be in (0, 1]")


TAIL_DROP = "tail_drop"
RED = "red"
WRED = "wred"


@dataclass(frozen=True)
class QueueConfig:
    capacity_pkts: int = 100
    discipline: str = TAIL_DROP
    red: Optional[REDParams] = None
    # WRED: per-priority-class RED parameters (class 0 = best effort,
    # class 1 = priority).
    wred: Optional[Tuple[Tuple[int, REDParams], ...]] = None

    def __post_init__(self) -> None:
        if self.capacity_pkts < 1:
            raise ValueError("capacity_pkts must be >= 1")
        if self.discipline == RED and self.red is None:
            raise ValueError("RED discipline needs red parameters")
        if self.discipline == WRED and self.wred is None:
            raise ValueError("WRED discipline needs per-class parameters")
        for params in self._all_params():
            if params.max_th > self.capacity_pkts:
                raise ValueError("max_th must not exceed capacity_pkts")

    def _all_params(self) -> List[REDParams]:
        out = []
        if self.red is not None:
            out.append(self.red)
        if self.wred is not None:
            out.extend(p for _, p in self.wred)
        return out

    def params_for_class(self, pclass: int) -> Optional[REDParams]:
        if self.discipline == RED:
            return self.red if pclass == 0 else None
        if self.discipline == WRED and self.wred is not None:
            for cls, params in self.wred:
                if cls == pclass:
                    return params
        return None


def red_drop_probability(params: REDParams, avg_queue: float) -> float:
    """Early-drop probability at the given average queue length."""
    if avg_queue < params.min_th:
        return 0.0
    if avg_queue > params.max_th:
        return 1.0
    span = params.max_th - params.min_th
    return params.max_p * (avg_queue - params.min_th) / span


@dataclass(frozen=True)
class FecConfig:
    block_k: int = 4
    parity_count: int = 1

    def __post_init__(self) -> None:
        if self.block_k < 1:
            raise ValueError("block_k must be >= 1")
        if self.parity_count != 1:
            raise ValueError("only single-parity FEC is supported")


@dataclass
class MediaFlow:
    """A voice (or video-profile) media flow."""

    flow_id: str
    rate_kbps: float = 26.0
    packet_interval_ms: float = 20.0
    priority: int = 0
    service: str = BEST_EFFORT
    reserved_kbps: float = 0.0
    bucket_depth_pkts: int = 10
    fec: Optional[FecConfig] = None
    burst_pkts: int = 1
    start_ms: float = 0.0
    end_ms: Optional[float] = None

    def __post_init__(self) -> None:
        if self.rate_kbps <= 0 or self.packet_interval_ms <= 0:
            raise ValueError("rate_kbps and packet_interval_ms must be > 0")
        if self.burst_pkts < 1:
            raise ValueError("burst_pkts must be >= 1")

    @property
    def packet_bits(self) -> float:
        return self.rate_kbps * self.packet_interval_ms


@dataclass
class BackgroundFlow:
    """CBR cross traffic sharing the bottleneck."""

    flow_id: str
    rate_kbps: float
    packet_bytes: int = 100
    burst_pkts: int = 1
    start_ms: float = 0.0

    @property
    def packet_bits(self) -> float:
        return self.packet_bytes * 8.0

    @property
    def packet_interval_ms(self) -> float:
        return self.packet_bits / self.rate_kbps


SET_LATENCY = "set_latency"
SET_LOSS_RATE = "set_loss_rate"
SET_BUFFER_SIZE = "set_buffer_size"
SET_BACKGROUND_RATE = "set_background_rate"


@dataclass(frozen=True)
class NetworkChange:
    at_ms: float
    kind: str
    value: float

    def __post_init__(self) -> None:
        if self.kind not in (
            SET_LATENCY,
            SET_LOSS_RATE,
            SET_BUFFER_SIZE,
            SET_BACKGROUND_RATE,
        ):
            raise ValueError(f"unknown network change kind: {self.kind}")


@dataclass
class Packet:
    flow_id: str
    seq: int
    bits: float
    created_ms: float
    kind: str = "media"  # media | parity | background
    block: Optional[int] = None
    pclass: int = 0  # 0 = best effort, 1 = priority


@dataclass
class FlowCounters:
    sent: int = 0
    delivered: int = 0
    dropped_link: int = 0
    dropped_queue: int = 0
    dropped_policer: int = 0
    recovered: int = 0
    delay_sum_ms: float = 0.0
    delay_n: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_link + self.dropped_queue + self.dropped_policer

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped


@dataclass
class _Block:
    k: int
    media_resolved: int = 0
    parity_resolved: bool = False
    delivered: List[Packet] = field(default_factory=list)
    lost: List[Packet] = field(default_factory=list)
    parity_ok: bool = False
    last_arrival_ms: float = 0.0


class _FlowState:
    def __init__(self, cfg):
        self.cfg = cfg
        self.epoch = 0
        self.next_seq = 0
        self.media_in_block = 0
        self.block_id = 0
        self.tokens_bits = 0.0
        self.tokens_at_ms = 0.0
        self.totals = FlowCounters()
        self.window = FlowCounters()
        self.blocks: Dict[int, _Block] = {}
        self.last_delay_ms: Optional[float] = None
        self.active = True

    @property
    def is_media(self) -> bool:
        return isinstance(self.cfg, MediaFlow)


class SimWorld:
    """Single-bottleneck network world with a scripted impairment timeline."""

    def __init__(
        self,
        link: LinkConfig,
        queue: QueueConfig,
        seed: int = 0,
        timeline: Tuple[NetworkChange, ...] = (),
    ):
        self.clock = 0.0
        self.rng = random.Random(seed)
        self.link = link
        self.queue = queue
        self.flows: Dict[str, _FlowState] = {}
        self._events: List[Tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self._qp: deque = deque()
        self._qb: deque = deque()
        self._avg_queue = 0.0
        self._busy = False
        self.log: List[Tuple[float, str, str, str, float]] = []
        self.notifications: List[NetworkChange] = []
        self.reserved_kbps = 0.0
        for change in sorted(timeline, key=lambda c: c.at_ms):
            self._schedule(change.at_ms, lambda c=change: self._do_change(c))

    # ---------------- event machinery ----------------

    def _schedule(self, at_ms: float, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._events, (at_ms, self._seq, fn))

    def advance(self, until_ms: float) -> None:
        if until_ms < self.clock:
            raise ValueError("cannot advance backwards")
        while self._events and self._events[0][0] <= until_ms:
            at, _, fn = heapq.heappop(self._events)
            self.clock = at
            fn()
        self.clock = until_ms

    # ---------------- flow management ----------------

    def add_media_flow(self, cfg: MediaFlow) -> None:
        if cfg.flow_id in self.flows:
            raise ValueError(f"duplicate flow id {cfg.flow_id}")
        st = _FlowState(cfg)
        if cfg.service == GUARANTEED:
            self._admit(cfg.flow_id, cfg.reserved_kbps)
            st.tokens_bits = cfg.bucket_depth_pkts * cfg.packet_bits
            st.tokens_at_ms = cfg.start_ms
        self.flows[cfg.flow_id] = st
        self._schedule(cfg.start_ms, lambda: self._emit(cfg.flow_id, st.epoch))

    def add_background_flow(self, cfg: BackgroundFlow) -> None:
        if cfg.flow_id in self.flows:
            raise ValueError(f"duplicate flow id {cfg.flow_id}")
        st = _FlowState(cfg)
        self.flows[cfg.flow_id] = st
        if cfg.rate_kbps > 0:
            self._schedule(cfg.start_ms, lambda: self._emit(cfg.flow_id, st.epoch))

    def end_flow(self, flow_id: str) -> None:
        st = self.flows[flow_id]
        st.active = False
        st.epoch += 1
        if st.is_media and st.cfg.service == GUARANTEED:
            self.reserved_kbps -= st.cfg.reserved_kbps
            st.cfg.service = BEST_EFFORT

    def _admit(self, flow_id: str, reserved_kbps: float) -> None:
        if reserved_kbps <= 0:
            raise AdmissionRefusedError(f"{flow_id}: reservation must be > 0")
        if self.reserved_kbps + reserved_kbps > self.link.capacity_kbps:
            raise AdmissionRefusedError(
                f"{flow_id}: reservation {reserved_kbps} kbps exceeds headroom "
                f"({self.link.capacity_kbps - self.reserved_kbps} kbps free)"
            )
        self.reserved_kbps += reserved_kbps

    # ---------------- configuration hooks (used by QoS actions) ------

    def set_buffer(self, capacity_pkts: int) -> None:
        if capacity_pkts < 1:
            raise ValueError("capacity_pkts must be >= 1")
        self.queue = self._requeue_config(capacity_pkts=capacity_pkts)
        self._shed_excess()

    def set_discipline(
        self,
        discipline: str,
        red: Optional[REDParams] = None,
        wred: Optional[Tuple[Tuple[int, REDParams], ...]] = None,
    ) -> None:
        cap = self.queue.capacity_pkts
        red = _clamp_red(red, cap)
        if wred is not None:
            wred = tuple((c, _clamp_red(p, cap)) for c, p in wred)
        self.queue = QueueConfig(cap, discipline, red=red, wred=wred)

    def _requeue_config(self, capacity_pkts: int) -> QueueConfig:
        red = _clamp_red(self.queue.red, capacity_pkts)
        wred = self.queue.wred
        if wred is not None:
            wred = tuple((c, _clamp_red(p, capacity_pkts)) for c, p in wred)
        return QueueConfig(capacity_pkts, self.queue.discipline, red=red, wred=wred)

    def _shed_excess(self) -> None:
        # Newest best-effort packets are shed first, then priority.
        while self.occupancy > self.queue.capacity_pkts:
            pkt = self._qb.pop() if self._qb else self._qp.pop()
            self._drop(pkt, "dropped_queue")

    def configure_service_class(
        self,
        flow_id: str,
        service: str,
        reserved_kbps: float = 0.0,
        bucket_depth_pkts: int = 10,
    ) -> None:
        st = self.flows[flow_id]
        if not st.is_media:
            raise ValueError("service classes apply to media flows only")
        cfg = st.cfg
        if cfg.service == GUARANTEED:
            self.reserved_kbps -= cfg.reserved_kbps
            cfg.reserved_kbps = 0.0
        if service == GUARANTEED:
            try:
                self._admit(flow_id, reserved_kbps)
            except AdmissionRefusedError:
                cfg.service = BEST_EFFORT
                raise
            cfg.reserved_kbps = reserved_kbps
            cfg.bucket_depth_pkts = bucket_depth_pkts
            st.tokens_bits = bucket_depth_pkts * cfg.packet_bits
            st.tokens_at_ms = self.clock
        cfg.service = service

    def set_fec(self, flow_id: str, fec: Optional[FecConfig]) -> None:
        st = self.flows[flow_id]
        if not st.is_media:
            raise ValueError("FEC applies to media flows only")
        st.cfg.fec = fec
        st.media_in_block = 0
        if fec is not None:
            st.block_id += 1  # start a fresh block

    # ---------------- network changes ----------------

    def apply_network_change(self, change: NetworkChange) -> None:
        self._do_change(change)

    def _do_change(self, change: NetworkChange) -> None:
        if change.kind == SET_LATENCY:
            self.link = LinkConfig(
                change.value, self.link.loss_rate, self.link.capacity_kbps
            )
        elif change.kind == SET_LOSS_RATE:
            self.link = LinkConfig(
                self.link.latency_ms, change.value, self.link.capacity_kbps
            )
        elif change.kind == SET_BUFFER_SIZE:
            self.set_buffer(int(change.value))
        elif change.kind == SET_BACKGROUND_RATE:
            for st in self.flows.values():
                if isinstance(st.cfg, BackgroundFlow):
                    st.cfg.rate_kbps = change.value
                    st.epoch += 1
                    if change.value > 0 and st.active:
                        epoch = st.epoch
                        self._schedule(
                            self.clock + st.cfg.packet_interval_ms,
                            lambda fid=st.cfg.flow_id, e=epoch: self._emit(fid, e),
                        )
        self.notifications.append(change)

    def pop_notifications(self) -> List[NetworkChange]:
        out = self.notifications
        self.notifications = []
        return out

    # ---------------- emission ----------------

    def _emit(self, flow_id: str, epoch: int) -> None:
        st = self.flows[flow_id]
        if epoch != st.epoch or not st.active:
            return
        cfg = st.cfg
        if st.is_media and cfg.end_ms is not None and self.clock >= cfg.end_ms:
            return
        if isinstance(cfg, BackgroundFlow) and cfg.rate_kbps <= 0:
            return
        for _ in range(cfg.burst_pkts):
            self._emit_one(st)
        self._schedule(
            self.clock + cfg.burst_pkts * cfg.packet_interval_ms,
            lambda: self._emit(flow_id, epoch),
        )

    def _emit_one(self, st: _FlowState) -> None:
        cfg = st.cfg
        if st.is_media:
            pkt = Packet(cfg.flow_id, st.next_seq, cfg.packet_bits, self.clock)
            st.next_seq += 1
            if cfg.fec is not None:
                pkt.block = st.block_id
                st.blocks.setdefault(st.block_id, _Block(cfg.fec.block_k))
                st.media_in_block += 1
            st.totals.sent += 1
            st.window.sent += 1
            self._log(pkt, "sent")
            self._offer(st, pkt)
            if cfg.fec is not None and st.media_in_block >= cfg.fec.block_k:
                parity = Packet(
                    cfg.flow_id,
                    st.next_seq,
                    cfg.packet_bits,
                    self.clock,
                    kind="parity",
                    block=st.block_id,
                )
                st.next_seq += 1
                st.media_in_block = 0
                st.block_id += 1
                self._offer(st, parity)
        else:
            pkt = Packet(
                cfg.flow_id, st.next_seq, cfg.packet_bits, self.clock, kind="background"
            )
            st.next_seq += 1
            st.totals.sent += 1
            st.window.sent += 1
            self._log(pkt, "sent")
            self._offer(st, pkt)

    # ---------------- policing and queueing ----------------

    def _offer(self, st: _FlowState, pkt: Packet) -> None:
        cfg = st.cfg
        if st.is_media:
            if cfg.service == CONTROLLED_LOAD:
                pkt.pclass = 1
            elif cfg.service == GUARANTEED:
                self._refill_tokens(st)
                if st.tokens_bits >= pkt.bits:
                    st.tokens_bits -= pkt.bits
                    pkt.pclass = 1
                else:
                    # Non-conforming traffic is policed under congestion,
                    # otherwise demoted to best effort.
                    if self.occupancy >= self.queue.capacity_pkts // 2:
                        self._drop(pkt, "dropped_policer")
                        return
                    pkt.pclass = 0
        self.offer_packet(pkt)

    def _refill_tokens(self, st: _FlowState) -> None:
        cfg = st.cfg
        depth = cfg.bucket_depth_pkts * cfg.packet_bits
        elapsed = self.clock - st.tokens_at_ms
        st.tokens_bits = min(depth, st.tokens_bits + cfg.reserved_kbps * elapsed)
        st.tokens_at_ms = self.clock

    @property
    def occupancy(self) -> int:
        return len(self._qp) + len(self._qb)

    def offer_packet(self, pkt: Packet) -> str:
        """Run the queue discipline for one packet; returns the outcome."""
        occ = self.occupancy
        params = self.queue.params_for_class(pkt.pclass)
        weight_params = self.queue.red or (
            self.queue.wred[0][1] if self.queue.wred else None
        )
        if weight_params is not None:
            w = weight_params.ewma_weight
            self._avg_queue = (1.0 - w) * self._avg_queue + w * occ
        if occ >= self.queue.capacity_pkts:
            # A full buffer yields to priority traffic: the newest
            # best-effort packet is pushed out to make room.
            if pkt.pclass == 1 and self._qb:
                self._drop(self._qb.pop(), "dropped_queue")
            else:
                self._drop(pkt, "dropped_queue")
                return "dropped_queue"
        if params is not None:
            p = red_drop_probability(params, self._avg_queue)
            if p >= 1.0 or (p > 0.0 and self.rng.random() < p):
                self._drop(pkt, "dropped_queue")
                return "dropped_queue"
        if pkt.pclass == 1:
            self._qp.append(pkt)
        else:
            self._qb.append(pkt)
        self._kick()
        return "enqueued"

    def _kick(self) -> None:
        if self._busy:
            return
        pkt = self._next_packet()
        if pkt is None:
            return
        self._busy = True
        service_ms = pkt.bits / self.link.capacity_kbps
        self._schedule(self.clock + service_ms, lambda: self._tx_done(pkt))

    def _next_packet(self) -> Optional[Packet]:
        if self._qp:
            return self._qp.popleft()
        if self._qb:
            return self._qb.popleft()
        return None

    def _tx_done(self, pkt: Packet) -> None:
        self._busy = False
        if self.link.loss_rate > 0 and self.rng.random() < self.link.loss_rate:
            self._drop(pkt, "dropped_link")
        else:
            latency = self.link.latency_ms
            self._schedule(self.clock + latency, lambda: self._deliver(pkt))
        self._kick()

    # ---------------- terminal events ----------------

    def _drop(self, pkt: Packet, reason: str) -> None:
        st = self.flows[pkt.flow_id]
        if pkt.kind != "parity":
            setattr(st.totals, reason, getattr(st.totals, reason) + 1)
            setattr(st.window, reason, getattr(st.window, reason) + 1)
            self._log(pkt, reason)
        if pkt.block is not None:
            self._block_resolve(st, pkt, delivered=False)

    def _deliver(self, pkt: Packet) -> None:
        st = self.flows[pkt.flow_id]
        delay = self.clock - pkt.created_ms
        if pkt.kind != "parity":
            st.totals.delivered += 1
            st.window.delivered += 1
            st.totals.delay_sum_ms += delay
            st.totals.delay_n += 1
            st.window.delay_sum_ms += delay
            st.window.delay_n += 1
            self._log(pkt, "delivered", delay)
        if pkt.block is not None:
            self._block_resolve(st, pkt, delivered=True)

    def _block_resolve(self, st: _FlowState, pkt: Packet, delivered: bool) -> None:
        block = st.blocks.get(pkt.block)
        if block is None:
            return
        if pkt.kind == "parity":
            block.parity_resolved = True
            block.parity_ok = delivered
        else:
            block.media_resolved += 1
            (block.delivered if delivered else block.lost).append(pkt)
        if delivered:
            block.last_arrival_ms = max(block.last_arrival_ms, self.clock)
        if block.media_resolved >= block.k and block.parity_resolved:
            self._block_finalize(st, pkt.block, block)

    def _block_finalize(self, st: _FlowState, block_id: int, block: _Block) -> None:
        if block.parity_ok and len(block.lost) == 1:
            lost = block.lost[0]
            delay = block.last_arrival_ms - lost.created_ms
            st.totals.recovered += 1
            st.window.recovered += 1
            st.totals.delay_sum_ms += delay
            st.totals.delay_n += 1
            st.window.delay_sum_ms += delay
            st.window.delay_n += 1
            self._log(lost, "recovered", delay)
        del st.blocks[block_id]

    def _log(self, pkt: Packet, event: str, delay: float = float("nan")) -> None:
        self.log.append((self.clock, pkt.flow_id, event, pkt.kind, delay))

    # ---------------- measurement ----------------

    def measure(self, flow_id: str) -> Optional[HeuristicSample]:
        """Sample of the flow's window counters; resets the window.

        Returns None when nothing was resolved in the window (the caller
        keeps its previous sample).
        """
        st = self.flows[flow_id]
        w = st.window
        resolved = w.delivered + w.dropped
        if resolved == 0:
            return None
        net_drops = w.dropped - w.recovered
        loss = min(1.0, max(0.0, net_drops / resolved))
        if w.delay_n > 0:
            delay = w.delay_sum_ms / w.delay_n
            st.last_delay_ms = delay
        elif st.last_delay_ms is not None:
            delay = st.last_delay_ms
        else:
            delay = self.link.latency_ms
        st.window = FlowCounters()
        return HeuristicSample.from_measurement(delay, loss)

    def totals(self, flow_id: str) -> FlowCounters:
        return self.flows[flow_id].totals

    def check_conservation(self) -> None:
        for fid, st in self.flows.items():
            t = st.totals
            if t.sent != t.delivered + t.dropped + t.in_flight:
                raise AssertionError(f"conservation violated for flow {fid}")
            if t.in_flight < 0:
                raise AssertionError(f"negative in-flight count for flow {fid}")

    def export_trace_csv(self, path) -> None:
        """Packet event log, media and background packets only."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_ms", "flow_id", "event", "delay_ms"])
            for at, fid, event, kind, delay in self.log:
                if kind == "parity":
                    continue
                writer.writerow(
                    [f"{at:.6f}", fid, event, "" if delay != delay else f"{delay:.6f}"]
                )


def _clamp_red(params: Optional[REDParams], capacity: int) -> Optional[REDParams]:
    """Scale thresholds down so max_th fits the buffer."""
    if params is None or params.max_th <= capacity:
        return params
    scale = capacity / params.max_th
    min_th = max(1.0, params.min_th * scale)
    max_th = max(min_th + 1.0, float(capacity))
    return REDParams(min_th, max_th, params.max_p, params.ewma_weight)
