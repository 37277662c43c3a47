"""Budget-constrained choice of deployed candidates by attribution rank.

``select_initial`` walks candidates in descending importance (ties by name)
and adds them while the running cost stays within the budget, stopping at
the first one that would exceed it. ``select_continuous`` applies the
last-in-first-out rule: a newcomer replaces the most recently inserted
model when it is more important and the swapped set still fits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import DataError

STATE_VERSION = "esci-selection v1"


@dataclass(frozen=True)
class Entry:
    name: str
    cost: float
    importance: float


@dataclass
class SelectionState:
    selected: list = field(default_factory=list)  # Entry, insertion order
    budget: float = 0.0
    metric: str = "macro_f1"
    pool: list = field(default_factory=list)  # every candidate seen, for audit

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.selected]

    @property
    def used(self) -> float:
        return float(sum(e.cost for e in self.selected))

    @property
    def last(self) -> Optional[Entry]:
        return self.selected[-1] if self.selected else None

    def to_record(self) -> dict:
        as_list = lambda es: [[e.name, e.cost, e.importance] for e in es]  # noqa: E731
        return {
            "version": STATE_VERSION,
            "budget": self.budget,
            "metric": self.metric,
            "selected": as_list(self.selected),
            "pool": as_list(self.pool),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SelectionState":
        if rec.get("version") != STATE_VERSION:
            raise DataError(f"unsupported selection state version {rec.get('version')!r}")
        mk = lambda rows: [Entry(str(n), float(c), float(i)) for n, c, i in rows]  # noqa: E731
        return cls(mk(rec["selected"]), float(rec["budget"]), rec["metric"], mk(rec["pool"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SelectionState":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"selection state not found: {path}")
        return cls.from_record(json.loads(path.read_text(encoding="utf-8")))


def _entries(candidates: Iterable) -> list[Entry]:
    out = []
    for c in candidates:
        e = c if isinstance(c, Entry) else Entry(str(c[0]), float(c[1]), float(c[2]))
        if e.cost < 0 or e.importance < 0:
            raise ValueError(f"{e.name}: cost and importance must be nonnegative")
        out.append(e)
    return out


def rank(candidates: Sequence[Entry]) -> list[Entry]:
    """Descending importance, ties broken by name."""
    return sorted(candidates, key=lambda e: (-e.importance, e.name))


def select_initial(candidates: Iterable, budget: float, metric: str = "macro_f1",
                   greedy_skip: bool = False) -> SelectionState:
    """Rank-prefix selection; ``greedy_skip`` keeps scanning past a candidate that does not fit."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    pool = _entries(candidates)
    state = SelectionState([], float(budget), metric, list(pool))
    used = 0.0
    for e in rank(pool):
        if used + e.cost <= budget:
            state.selected.append(e)
            used += e.cost
        elif not greedy_skip:
            break
    return state


def select_continuous(state: SelectionState, candidate) -> SelectionState:
    """Offer one new candidate; returns a new state with at most one slot changed."""
    (f,) = _entries([candidate])
    pool = list(state.pool) + [f]
    if not state.selected:
        fresh = select_initial([f], state.budget, state.metric)
        return SelectionState(fresh.selected, state.budget, state.metric, pool)
    last = state.selected[-1]
    rest = state.selected[:-1]
    if f.importance > last.importance and sum(e.cost for e in rest) + f.cost <= state.budget:
        return SelectionState(rest + [f], state.budget, state.metric, pool)
    return SelectionState(list(state.selected), state.budget, state.metric, pool)


@dataclass(frozen=True)
class AuditReport:
    budget: float
    used: float
    utilization: float
    coverage: float
    selected_importance: float
    unselected_importance: float
    dominance: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def audit(state: SelectionState) -> AuditReport:
    chosen = set(state.names)
    total = sum(e.importance for e in state.pool)
    sel = sum(e.importance for e in state.selected)
    # pool may hold entries displaced by a swap; count each name once
    seen, unsel = set(), 0.0
    for e in state.pool:
        if e.name not in chosen and e.name not in seen:
            unsel += e.importance
            seen.add(e.name)
    denom = sel + unsel if total > 0 else 0.0
    return AuditReport(
        budget=state.budget,
        used=state.used,
        utilization=(state.used / state.budget) if state.budget > 0 else 0.0,
        coverage=(sel / denom) if denom > 0 else (1.0 if state.selected else 0.0),
        selected_importance=sel,
        unselected_importance=unsel,
        dominance=bool(state.selected) and sel >= unsel,
    )
