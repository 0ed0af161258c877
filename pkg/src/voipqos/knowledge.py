"""Ranked per-case action knowledge: selection, acquisition, refinement.

Action outcomes are predicted by an (estimated delay, estimated loss)
pair.  Pairs are ordered through a scalar penalty that is 1.0 per metric
exactly at its constraint threshold; selection picks the minimum-penalty
entry, falling back to rank and then action name on ties.  Acquisition
overwrites an estimate with a measured outcome; refinement re-ranks a
case after an episode in which the finally successful action had been
ranked behind actions that measured worse.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .actions import ActionId, conflicts
from .metrics import (
    Constraints,
    DEFAULT_CONSTRAINTS,
    QualityCategory,
    categorize_delay,
    categorize_loss,
)


class ScenarioCase(Enum):
    CASE1 = "case1"  # delay ok, loss ok
    CASE2 = "case2"  # delay ok, loss high
    CASE3 = "case3"  # delay high, loss ok
    CASE4 = "case4"  # delay high, loss high


def penalty(
    h: Tuple[float, float], constraints: Constraints = DEFAULT_CONSTRAINTS
) -> float:
    """Scalar ordering of (delay_ms, loss) pairs; 2.0 when both sit at threshold."""
    delay_ms, loss = h
    return delay_ms / constraints.delay_max_ms + loss / constraints.loss_max


def h_category(delay_ms: float, loss: float) -> QualityCategory:
    """Band of an h estimate; the worse of its delay and loss bands."""
    return min(categorize_delay(delay_ms), categorize_loss(loss))


@dataclass
class ActionEntry:
    action: ActionId
    rank: int
    h_delay_ms: float
    h_loss: float
    category: QualityCategory = QualityCategory.EXCELLENT
    deleted: bool = False

    @property
    def h(self) -> Tuple[float, float]:
        return (self.h_delay_ms, self.h_loss)

    def penalty(self, constraints: Constraints = DEFAULT_CONSTRAINTS) -> float:
        return penalty(self.h, constraints)


class KnowledgeError(Exception):
    pass


class KnowledgeBase:
    """Per-case ranked action lists with tombstoned deletions."""

    def __init__(self, constraints: Constraints = DEFAULT_CONSTRAINTS):
        self.constraints = constraints
        self._cases: Dict[ScenarioCase, List[ActionEntry]] = {
            case: [] for case in ScenarioCase
        }
        self.revision = 0

    # ---------------- construction ----------------

    def add_entry(
        self, case: ScenarioCase, action: ActionId, h_delay_ms: float, h_loss: float
    ) -> ActionEntry:
        if any(e.action == action for e in self.entries(case)):
            raise KnowledgeError(f"{action.name} already present in {case.value}")
        entry = ActionEntry(
            action,
            rank=len(self.entries(case)) + 1,
            h_delay_ms=h_delay_ms,
            h_loss=h_loss,
            category=h_category(h_delay_ms, h_loss),
        )
        self._cases[case].append(entry)
        self._check(case)
        return entry

    @classmethod
    def from_seed(cls, seed: dict, constraints: Constraints = DEFAULT_CONSTRAINTS):
        kb = cls(constraints)
        for case_name, entries in seed["cases"].items():
            case = ScenarioCase(case_name)
            for item in sorted(entries, key=lambda e: e["rank"]):
                kb.add_entry(
                    case,
                    action_from_json(item["action"]),
                    item["h_est"]["delay_ms"],
                    item["h_est"]["loss"],
                )
        return kb

    # ---------------- access ----------------

    def entries(self, case: ScenarioCase) -> List[ActionEntry]:
        """Live entries of a case, best rank first."""
        live = [e for e in self._cases[case] if not e.deleted]
        return sorted(live, key=lambda e: e.rank)

    def tombstones(self, case: ScenarioCase) -> List[ActionEntry]:
        return [e for e in self._cases[case] if e.deleted]

    def entry(self, case: ScenarioCase, action: ActionId) -> ActionEntry:
        for e in self.entries(case):
            if e.action == action:
                return e
        raise KnowledgeError(f"{action.name} not present in {case.value}")

    def _check(self, case: ScenarioCase) -> None:
        ranks = sorted(e.rank for e in self.entries(case))
        if ranks != list(range(1, len(ranks) + 1)):
            raise KnowledgeError(f"ranks not contiguous in {case.value}: {ranks}")

    # ---------------- serialization ----------------

    def to_json(self) -> dict:
        def entry_json(e: ActionEntry) -> dict:
            return {
                "action": action_to_json(e.action),
                "rank": e.rank,
                "h_est": {"delay_ms": e.h_delay_ms, "loss": e.h_loss},
                "category": e.category.name,
                "deleted": e.deleted,
            }

        return {
            "version": 1,
            "revision": self.revision,
            "cases": {
                case.value: [entry_json(e) for e in self._cases[case]]
                for case in ScenarioCase
            },
            "conflict_sets": [
                sorted(s) for s in _conflict_set_names()
            ],
        }

    @classmethod
    def from_json(cls, data: dict, constraints: Constraints = DEFAULT_CONSTRAINTS):
        kb = cls(constraints)
        for case_name, entries in data["cases"].items():
            case = ScenarioCase(case_name)
            for item in entries:
                entry = ActionEntry(
                    action_from_json(item["action"]),
                    rank=item["rank"],
                    h_delay_ms=item["h_est"]["delay_ms"],
                    h_loss=item["h_est"]["loss"],
                    category=QualityCategory[item["category"]],
                    deleted=item.get("deleted", False),
                )
                kb._cases[case].append(entry)
            kb._check(case)
        kb.revision = data.get("revision", 0)
        return kb


def _conflict_set_names() -> List[Set[str]]:
    from .actions import CONFLICT_SETS

    return [set(s) for s in CONFLICT_SETS]


def action_to_json(action: ActionId) -> dict:
    return {"kind": action.kind, "params": {k: v for k, v in action.params}}


def action_from_json(data: dict) -> ActionId:
    return ActionId(data["kind"], tuple(sorted(data["params"].items())))


# ---------------- selection ----------------

def _selection_key(entry: ActionEntry, constraints: Constraints):
    return (entry.penalty(constraints), entry.rank, entry.action.name)


def select_one_of(kb: KnowledgeBase, case: ScenarioCase) -> Optional[ActionEntry]:
    """Best entry for the case; None when the case list is empty."""
    entries = kb.entries(case)
    if not entries:
        return None
    return min(entries, key=lambda e: _selection_key(e, kb.constraints))


def select_next(
    kb: KnowledgeBase, case: ScenarioCase, tried: Iterable[ActionId]
) -> Optional[ActionEntry]:
    """Best entry not yet tried this episode; None when exhausted."""
    tried_set = set(tried)
    remaining = [e for e in kb.entries(case) if e.action not in tried_set]
    if not remaining:
        return None
    return min(remaining, key=lambda e: _selection_key(e, kb.constraints))


# ---------------- learning ----------------

def acquire(
    kb: KnowledgeBase,
    case: ScenarioCase,
    action: ActionId,
    measured_g: Tuple[float, float],
) -> None:
    """Replace an entry's estimate with the measured outcome."""
    entry = kb.entry(case, action)
    entry.h_delay_ms, entry.h_loss = measured_g
    entry.category = h_category(entry.h_delay_ms, entry.h_loss)
    kb.revision += 1


def refine(
    kb: KnowledgeBase,
    case: ScenarioCase,
    a_current: ActionId,
    conflict_fn=conflicts,
) -> None:
    """Re-rank a case after an episode that ended with a_current succeeding.

    Every action that the pre-episode ranking preferred over a_current
    but whose estimate now measures worse is either swapped with
    a_current (non-conflicting) or deleted with a_current taking its
    rank (conflicting).  Candidates are visited best pre-episode rank
    first, and a step only fires while the candidate still outranks
    a_current, so a_current's rank never worsens.
    """
    current = kb.entry(case, a_current)
    pre_ranks = {e.action: e.rank for e in kb.entries(case)}
    ahead = sorted(
        (e for e in kb.entries(case) if pre_ranks[e.action] < pre_ranks[a_current]),
        key=lambda e: pre_ranks[e.action],
    )
    changed = False
    for other in ahead:
        if other.deleted:
            continue
        if penalty(other.h, kb.constraints) <= penalty(current.h, kb.constraints):
            continue
        if other.rank >= current.rank:
            continue
        if conflict_fn(other.action, current.action):
            current.rank = other.rank
            other.deleted = True
        else:
            other.rank, current.rank = current.rank, other.rank
        changed = True
    _recompact(kb, case)
    if changed:
        kb.revision += 1


def _recompact(kb: KnowledgeBase, case: ScenarioCase) -> None:
    for i, entry in enumerate(kb.entries(case), start=1):
        entry.rank = i
    kb._check(case)
