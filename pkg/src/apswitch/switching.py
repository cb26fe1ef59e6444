"""Greedy AP switching: proximity-based initial access, slack-driven
activation until the SINR targets are feasible, then pruning of APs whose
removal lowers the total power.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .channel import ChannelStatistics
from .conic import DEFAULT_TOL
from .problems import (SLACK_ZERO_TOL, FeasibilityReport, InfeasibleError, PowerAllocation,
                       SolveCounter, SolverError, SwitchingSolution, normalize_active, solve_p2,
                       solve_p3, total_power)
from .scenario import NetworkGeometry

StatsProvider = Callable[[Iterable[int]], ChannelStatistics]


class RequirementImpossibleError(InfeasibleError):
    """Every AP is active and some user still misses its SINR target."""

    def __init__(self, message: str = "SINR requirement is impossible to satisfy"):
        super().__init__(message)


@dataclass(frozen=True)
class TraceEvent:
    phase: str
    active: tuple[int, ...]
    total_slack: float | None
    power: float | None
    solves: int

    def to_line(self) -> str:
        slack = "-" if self.total_slack is None else f"{self.total_slack:.6e}"
        power = "-" if self.power is None else f"{self.power:.9f}"
        aps = ",".join(map(str, self.active))
        return f"{self.phase}\t|A|={len(self.active)}\tsum_s={slack}\tP={power}\tsolves={self.solves}\tA={aps}"


@dataclass
class PipelineTrace:
    """Event log of one run; ``solution`` is set once pruning finishes.

    Every event except the initial ``access`` one follows a conic solve.
    ``prune-probe`` events carry the candidate set that was tested; the
    other pruning events carry the current active set.
    """

    events: list[TraceEvent] = field(default_factory=list)
    counter: SolveCounter = field(default_factory=SolveCounter)
    solution: SwitchingSolution | None = None

    def record(self, phase: str, active, total_slack: float | None = None,
               power: float | None = None) -> None:
        self.events.append(TraceEvent(phase, normalize_active(active), total_slack, power,
                                      self.counter.total))

    @property
    def measured_aps(self) -> tuple[int, ...]:
        """Every AP whose statistics were requested, i.e. that left sleep mode to measure."""
        return normalize_active(a for e in self.events if e.phase in ("access", "search") for a in e.active)

    def phase_sizes(self, phase: str) -> list[int]:
        return [len(e.active) for e in self.events if e.phase == phase]

    def to_text(self) -> str:
        return "\n".join(e.to_line() for e in self.events) + "\n"


def initial_access(geometry: NetworkGeometry) -> tuple[int, ...]:
    """Each user's nearest AP (lowest index on ties), deduplicated."""
    # argmin returns the first minimum, i.e. the lowest AP index
    return normalize_active(np.argmin(geometry.distances, axis=0))


def _nearest_inactive(geometry: NetworkGeometry, user: int, active: tuple[int, ...]) -> int:
    d = np.array(geometry.distances[:, user], dtype=float)
    d[list(active)] = np.inf
    return int(np.argmin(d))


def feasible_set_search(stats_provider: StatsProvider, geometry: NetworkGeometry, initial,
                        targets, p_max: float, tol: float = DEFAULT_TOL,
                        slack_tol: float = SLACK_ZERO_TOL,
                        trace: PipelineTrace | None = None) -> tuple[tuple[int, ...], FeasibilityReport]:
    """Grow ``initial`` until P3 reports zero slack.

    Each round activates the AP nearest to the user with the largest slack
    (lowest index on ties) and re-measures the statistics for the grown set.
    """
    trace = trace if trace is not None else PipelineTrace()
    active = normalize_active(initial)
    num_aps = geometry.num_aps
    while True:
        stats = stats_provider(active)
        report = solve_p3(stats, active, targets, p_max, tol=tol, slack_tol=slack_tol,
                          counter=trace.counter, allow_inexact=True, kind="p3_search")
        trace.record("search", active, total_slack=report.total_slack)
        if report.feasible:
            return active, report
        if len(active) == num_aps:
            raise RequirementImpossibleError()
        worst_user = int(np.argmax(report.slacks))
        active = normalize_active(active + (_nearest_inactive(geometry, worst_user, active),))


def prune_active_aps(stats_provider: StatsProvider, active, targets, p_max: float,
                     fixed_ap_power: float, pa_inefficiency: float,
                     initial_allocation: PowerAllocation | None = None, tol: float = DEFAULT_TOL,
                     slack_tol: float = SLACK_ZERO_TOL,
                     trace: PipelineTrace | None = None) -> SwitchingSolution:
    """Put APs to sleep, lowest transmit power first, while the total power drops.

    A candidate whose removal keeps the targets feasible but does not lower
    the total power is excluded from further consideration; the first
    candidate whose removal breaks feasibility ends the loop.  The candidate
    in the first round is ranked by ``initial_allocation`` (the allocation
    from the feasibility search), later rounds by the current P2 optimum.
    """
    trace = trace if trace is not None else PipelineTrace()
    active = normalize_active(active)

    def evaluate(aps):
        alloc = solve_p2(stats_provider(aps), aps, targets, p_max, tol=tol, counter=trace.counter)
        return alloc, total_power(aps, alloc, fixed_ap_power, pa_inefficiency)

    alloc, power = evaluate(active)
    trace.record("prune-start", active, power=power)
    ranking = initial_allocation if initial_allocation is not None else alloc
    excluded: set[int] = set()
    while len(active) > 1:
        candidates = [a for a in active if a not in excluded]
        if not candidates:
            break
        per_ap = ranking.per_ap_power[candidates]
        victim = candidates[int(np.argmin(per_ap))]
        reduced = tuple(a for a in active if a != victim)
        probe = solve_p3(stats_provider(reduced), reduced, targets, p_max, tol=tol, slack_tol=slack_tol,
                         counter=trace.counter, allow_inexact=True, kind="p3_probe")
        trace.record("prune-probe", reduced, total_slack=probe.total_slack)
        if not probe.feasible:
            break
        try:
            new_alloc, new_power = evaluate(reduced)
        except (InfeasibleError, SolverError):
            excluded.add(victim)
            trace.record("prune-reject", active, power=power)
            ranking = alloc
            continue
        if new_power < power:
            active, alloc, power = reduced, new_alloc, new_power
            trace.record("prune-accept", active, power=power)
        else:
            excluded.add(victim)
            trace.record("prune-reject", active, power=power)
        ranking = alloc

    transmit = float(alloc.rho[list(active)].sum())
    return SwitchingSolution(
        active=active,
        allocation=alloc,
        transmit_power=transmit,
        total_power=power,
        measuring_aps=len(trace.measured_aps),
        serving_aps=len(active),
        solves=trace.counter.total,
        details=dict(trace.counter.counts),
    )


def run_proposed(geometry: NetworkGeometry, stats_provider: StatsProvider, targets, p_max: float,
                 fixed_ap_power: float, pa_inefficiency: float, tol: float = DEFAULT_TOL,
                 slack_tol: float = SLACK_ZERO_TOL) -> PipelineTrace:
    """Initial access, feasibility search and pruning chained on one trace.

    Raises :class:`RequirementImpossibleError` when the targets cannot be met
    even with every AP active.  The solve count is asserted to stay within
    ``3 L + 2``.
    """
    trace = PipelineTrace()
    start = initial_access(geometry)
    trace.record("access", start)
    active, report = feasible_set_search(stats_provider, geometry, start, targets, p_max,
                                         tol=tol, slack_tol=slack_tol, trace=trace)
    solution = prune_active_aps(stats_provider, active, targets, p_max, fixed_ap_power,
                                pa_inefficiency, initial_allocation=report.allocation, tol=tol,
                                slack_tol=slack_tol, trace=trace)
    limit = 3 * geometry.num_aps + 2
    if solution.solves > limit:
        raise AssertionError(f"{solution.solves} conic solves exceed the linear bound {limit}")
    details = dict(solution.details)
    # the classic "2L" worst case counts P2-type solves only, without the pruning probes
    details["solves_without_probes"] = solution.solves - trace.counter["p3_probe"]
    trace.solution = dataclasses.replace(solution, details=details)
    return trace
