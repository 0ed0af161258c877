"""QoS action catalog tests: conflicts, apply/stop reversibility, defaults."""
import itertools

import pytest

from voipqos import actions, netsim
from voipqos.actions import (
    ActionFailedError,
    BUFFER_MAX_PKTS,
    BUFFER_MIN_PKTS,
    CASE_ORDER,
    conflicts,
    controlled_load,
    decrease_buffer,
    enable_fec,
    enable_red,
    enable_wred,
    guaranteed_load,
    increase_buffer,
)
from voipqos.netsim import LinkConfig, MediaFlow, QueueConfig, SimWorld


CATALOG = [
    increase_buffer(),
    decrease_buffer(),
    enable_red(),
    enable_wred(),
    enable_fec(),
    controlled_load(),
    guaranteed_load(),
]


def _world(capacity=1000.0, buffer_pkts=100):
    world = SimWorld(LinkConfig(10.0, 0.0, capacity), QueueConfig(capacity_pkts=buffer_pkts))
    world.add_media_flow(MediaFlow("m"))
    return world


class TestConflicts:
    def test_irreflexive(self):
        for a in CATALOG:
            assert not conflicts(a, a)

    def test_symmetric_over_catalog(self):
        for a, b in itertools.combinations(CATALOG, 2):
            assert conflicts(a, b) == conflicts(b, a)

    @pytest.mark.parametrize(
        "a,b",
        [
            (increase_buffer(), decrease_buffer()),
            (controlled_load(), guaranteed_load()),
            (enable_red(), enable_wred()),
        ],
    )
    def test_declared_pairs_conflict(self, a, b):
        assert conflicts(a, b)

    def test_unrelated_mechanisms_coexist(self):
        assert not conflicts(enable_fec(), increase_buffer())
        assert not conflicts(enable_fec(), controlled_load())
        assert not conflicts(enable_red(), increase_buffer())

    def test_same_mechanism_different_params_conflict(self):
        assert conflicts(enable_red(), enable_red(min_th=80, max_th=100))
        assert conflicts(increase_buffer(15), increase_buffer(30))


class TestNaming:
    def test_parameterless_name(self):
        assert controlled_load().name == "controlled_load"

    def test_parameterized_name_is_stable(self):
        assert enable_fec().name == "enable_fec(block_k=4,parity=1)"


class TestCaseOrder:
    def test_shipped_orderings(self):
        assert CASE_ORDER["case1"] == [guaranteed_load()]
        assert CASE_ORDER["case2"] == [
            increase_buffer(),
            enable_red(),
            enable_fec(),
            controlled_load(),
        ]
        assert CASE_ORDER["case3"] == [
            decrease_buffer(),
            enable_wred(),
            controlled_load(),
        ]
        assert CASE_ORDER["case4"] == [
            controlled_load(),
            enable_red(min_th=80, max_th=100),
        ]

    def test_no_case_lists_conflicting_defaults_twice(self):
        for case, order in CASE_ORDER.items():
            assert len(order) == len(set(order)), case


class TestApplyStop:
    def _snapshot(self, world):
        cfg = world.flows["m"].cfg
        return (
            world.queue,
            cfg.service,
            cfg.reserved_kbps,
            cfg.fec,
            world.reserved_kbps,
        )

    @pytest.mark.parametrize("action", CATALOG, ids=lambda a: a.name)
    def test_round_trip_restores_configuration(self, action):
        world = _world()
        before = self._snapshot(world)
        record = actions.apply_action(world, "m", action)
        assert not record.noop
        assert self._snapshot(world) != before
        stop = actions.stop_action(world, "m", action)
        assert not stop.noop
        assert self._snapshot(world) == before
        assert actions.active_actions(world, "m") == []

    @pytest.mark.parametrize("action", CATALOG, ids=lambda a: a.name)
    def test_reapply_is_noop(self, action):
        world = _world()
        actions.apply_action(world, "m", action)
        again = actions.apply_action(world, "m", action)
        assert again.noop

    def test_stop_inactive_is_noop(self):
        world = _world()
        record = actions.stop_action(world, "m", enable_fec())
        assert record.noop

    def test_buffer_steps_clamp(self):
        world = _world(buffer_pkts=BUFFER_MAX_PKTS - 5)
        actions.apply_action(world, "m", increase_buffer())
        assert world.queue.capacity_pkts == BUFFER_MAX_PKTS
        world2 = _world(buffer_pkts=BUFFER_MIN_PKTS + 5)
        actions.apply_action(world2, "m", decrease_buffer())
        assert world2.queue.capacity_pkts == BUFFER_MIN_PKTS

    def test_guaranteed_needs_headroom(self):
        world = _world(capacity=20.0)  # below the 26 * 1.25 reservation
        with pytest.raises(ActionFailedError):
            actions.apply_action(world, "m", guaranteed_load())
        # Failure leaves no registration and no reservation behind.
        assert actions.active_actions(world, "m") == []
        assert world.reserved_kbps == 0.0

    def test_red_thresholds_scale_to_small_buffers(self):
        world = _world(buffer_pkts=40)
        actions.apply_action(world, "m", enable_red())
        assert world.queue.discipline == netsim.RED
        assert world.queue.red.max_th <= 40

    def test_transition_records_carry_kind(self):
        world = _world()
        record = actions.apply_action(world, "m", enable_fec(), kind="d3")
        assert record.kind == "d3"
        assert record.cause == enable_fec().name


class TestDefaultKnowledge:
    def test_seed_loads_and_covers_all_cases(self):
        from voipqos.harness import default_kb
        from voipqos.knowledge import ScenarioCase

        kb = default_kb()
        for case_name, order in CASE_ORDER.items():
            entries = kb.entries(ScenarioCase(case_name))
            assert [e.action for e in entries] == order
            assert [e.rank for e in entries] == list(range(1, len(order) + 1))
            for e in entries:
                assert e.h_delay_ms >= 0.0
                assert 0.0 <= e.h_loss <= 1.0

    def test_seed_matches_fresh_calibration(self):
        from voipqos.harness import calibrate, default_kb

        shipped = default_kb().to_json()
        fresh = calibrate(seed=0).to_json()
        assert shipped["cases"] == fresh["cases"]
