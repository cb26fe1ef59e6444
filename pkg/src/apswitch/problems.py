"""Power minimization (P2), slack feasibility testing (P3), the joint
mixed-binary problem (P1) by branch-and-bound, and max-min SINR bisection.

Optimization variables are amplitudes ``u_lk = sqrt(rho_lk)``.  Internally
each program works with ``v = u / a`` where ``a = sigma_DL / max(b)`` and all
cone rows are divided by ``sigma_DL``, so the noise entry becomes 1 and the
interior-point tolerances act on O(1) quantities.  Slack values are reported
in these noise-normalized units.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .channel import ChannelStatistics, restrict_statistics
from .conic import (DEFAULT_TOL, ConicProgram, ProgramBuilder, SocConstraint, SolveResult, Status,
                    epigraph_quadratic, solve_socp)

SLACK_ZERO_TOL = 1e-7
BNB_GAP_TOL = 1e-6
INTEGRALITY_TOL = 1e-6
DUAL_BOUND_TOL = 1e-7
COVER_CUTS = True


class InfeasibleError(RuntimeError):
    """The requested SINR targets cannot be met (certified by the solver)."""


class SolverError(RuntimeError):
    def __init__(self, message: str, status: Status | None = None):
        super().__init__(message)
        self.status = status


class SolveCounter:
    """Tallies conic solves by kind."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, kind: str) -> None:
        self.counts[kind] = self.counts.get(kind, 0) + 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, kind: str) -> int:
        return self.counts.get(kind, 0)


def se_to_sinr(se):
    return 2.0 ** np.asarray(se, dtype=float) - 1.0


def normalize_active(active: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(set(int(a) for a in active)))


@dataclass(frozen=True)
class PowerAllocation:
    """Downlink powers ``rho`` (watts), shape ``(L, K)``; rows outside the active set are zero."""

    rho: np.ndarray

    def __post_init__(self):
        self.rho.setflags(write=False)

    @classmethod
    def zeros(cls, num_aps: int, num_users: int) -> PowerAllocation:
        return cls(np.zeros((num_aps, num_users)))

    @property
    def amplitudes(self) -> np.ndarray:
        return np.sqrt(self.rho)

    @property
    def transmit_power(self) -> float:
        return float(self.rho.sum())

    @property
    def per_ap_power(self) -> np.ndarray:
        return self.rho.sum(axis=1)


@dataclass(frozen=True)
class FeasibilityReport:
    """P3 outcome.  ``exact`` is False when the solver stopped short of full
    accuracy; such a report is never marked feasible."""

    slacks: np.ndarray
    allocation: PowerAllocation
    feasible: bool
    active: tuple[int, ...] = ()
    exact: bool = True

    @property
    def total_slack(self) -> float:
        return float(self.slacks.sum())


@dataclass(frozen=True)
class SwitchingSolution:
    active: tuple[int, ...]
    allocation: PowerAllocation
    transmit_power: float
    total_power: float
    measuring_aps: int
    serving_aps: int
    solves: int
    details: dict = field(default_factory=dict)


def total_power(active: Sequence[int], allocation: PowerAllocation | np.ndarray,
                fixed_ap_power: float, pa_inefficiency: float) -> float:
    """Fixed power of every active AP plus amplifier-scaled transmit power over the active set."""
    active = normalize_active(active)
    if not active:
        return 0.0
    rho = allocation.rho if isinstance(allocation, PowerAllocation) else np.asarray(allocation)
    return fixed_ap_power * len(active) + pa_inefficiency * float(rho[list(active)].sum())


def sinr(stats: ChannelStatistics, allocation: PowerAllocation | np.ndarray, k: int | None = None,
         active: Iterable[int] | None = None):
    """Use-and-then-forget SINR of every user (or only user ``k``).

    ``allocation`` is the full ``(L, K)`` power matrix.  When ``active`` is
    given the restricted statistics are used, i.e. APs outside the set are
    treated as silent.
    """
    rho = allocation.rho if isinstance(allocation, PowerAllocation) else np.asarray(allocation, dtype=float)
    if active is not None:
        stats = restrict_statistics(stats, active)
    u = np.sqrt(np.clip(rho[list(stats.ap_indices)], 0.0, None))
    signal = np.einsum("km,mk->k", stats.b, u) ** 2
    received = np.einsum("kilm,li,mi->k", stats.quad_forms, u, u)
    gamma = signal / (received - signal + stats.dl_noise)
    return float(gamma[k]) if k is not None else gamma


def _targets(stats: ChannelStatistics, targets) -> np.ndarray:
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (stats.num_users,)).copy()
    if np.any(targets <= 0) or not np.all(np.isfinite(targets)):
        raise ValueError("SINR targets must be positive and finite")
    return targets


@dataclass
class _Layout:
    """Scaled data and variable indices shared by the P1/P2/P3 builders."""

    stats: ChannelStatistics
    amp_scale: float
    builder: ProgramBuilder
    v: np.ndarray

    @classmethod
    def create(cls, stats: ChannelStatistics) -> _Layout:
        bmax = float(stats.b.max())
        amp_scale = stats.dl_noise ** 0.5 / bmax if bmax > 0 else 1.0
        builder = ProgramBuilder()
        v = builder.add_vars("v", (stats.num_users, stats.num_aps), nonneg=True)
        return cls(stats, amp_scale, builder, v)

    def add_sinr_cones(self, targets: np.ndarray, slack: np.ndarray | None = None) -> None:
        stats = self.stats
        K, M = stats.num_users, stats.num_aps
        scale = self.amp_scale / stats.dl_noise ** 0.5
        roots = stats.sqrt_quad_forms * scale
        signal = np.sqrt((1.0 + targets) / targets)[:, None] * stats.b * scale
        I, P, Q = np.meshgrid(np.arange(K), np.arange(M), np.arange(M), indexing="ij")
        blk_rows = (1 + I * M + P).ravel()
        blk_cols = self.v[I, Q].ravel()
        dim = 2 + K * M
        offset = np.zeros(dim)
        offset[-1] = 1.0
        for k in range(K):
            rows = [np.zeros(M, dtype=np.int64), blk_rows]
            cols = [self.v[k], blk_cols]
            vals = [signal[k], roots[k].ravel()]
            if slack is not None:
                rows.append(np.zeros(1, dtype=np.int64))
                cols.append(np.atleast_1d(slack[k]))
                vals.append(np.ones(1))
            self.builder.add_raw_cone(SocConstraint(np.concatenate(rows), np.concatenate(cols),
                                                    np.concatenate(vals), offset))

    def add_power_caps(self, p_max: float, switches: dict[int, int] | None = None) -> None:
        """Per-AP ``||v_l|| <= sqrt(P_max)/a``, times ``x_l`` where a switch variable is given."""
        cap = np.sqrt(p_max) / self.amp_scale
        K = self.stats.num_users
        for m in range(self.stats.num_aps):
            if switches and m in switches:
                cols = np.concatenate([[switches[m]], self.v[:, m]])
                coeffs = np.zeros((K + 1, K + 1))
                coeffs[0, 0] = cap
                coeffs[1:, 1:] = np.eye(K)
                self.builder.add_cone(cols, coeffs, np.zeros(K + 1))
            else:
                coeffs = np.vstack([np.zeros(K), np.eye(K)])
                offset = np.zeros(K + 1)
                offset[0] = cap
                self.builder.add_cone(self.v[:, m], coeffs, offset)

    def add_power_epigraph(self) -> int:
        t = int(self.builder.add_vars("t"))
        self.builder.add_raw_cone(epigraph_quadratic(self.v.ravel(), t))
        return t

    def build(self) -> ConicProgram:
        return self.builder.build()

    def allocation(self, x: np.ndarray, total_aps: int) -> PowerAllocation:
        v = np.clip(x[self.v], 0.0, None)
        rho = np.zeros((total_aps, self.stats.num_users))
        rho[list(self.stats.ap_indices)] = (self.amp_scale * v.T) ** 2
        return PowerAllocation(rho)


def _prepare(stats: ChannelStatistics, active) -> ChannelStatistics:
    active = normalize_active(active if active is not None else stats.ap_indices)
    if not active:
        raise ValueError("active set must be non-empty")
    return stats if active == stats.ap_indices else restrict_statistics(stats, active)


def build_p2(stats: ChannelStatistics, active, targets, p_max: float) -> tuple[ConicProgram, _Layout]:
    """Transmit-power minimization over the APs in ``active``."""
    sub = _prepare(stats, active)
    targets = _targets(sub, targets)
    layout = _Layout.create(sub)
    t = layout.add_power_epigraph()
    layout.builder.add_objective(t, 1.0)
    layout.add_sinr_cones(targets)
    layout.add_power_caps(p_max)
    return layout.build(), layout


def _check(result: SolveResult, what: str) -> None:
    if result.status is Status.INFEASIBLE:
        raise InfeasibleError(f"{what} is infeasible")
    if result.status is not Status.OPTIMAL:
        raise SolverError(f"{what} failed: {result.status.value}", result.status)


def solve_p2(stats: ChannelStatistics, active, targets, p_max: float, tol: float = DEFAULT_TOL,
             counter: SolveCounter | None = None) -> PowerAllocation:
    """Minimum transmit power allocation over ``active``.

    The fixed consumption ``|A| * P_BB`` is not part of this problem; see
    :func:`total_power`.  Raises :class:`InfeasibleError` when the targets are
    certified unreachable.
    """
    program, layout = build_p2(stats, active, targets, p_max)
    result = solve_socp(program, tol)
    if counter is not None:
        counter.add("p2")
    _check(result, "P2")
    return layout.allocation(result.x, stats.total_aps)


def build_p3(stats: ChannelStatistics, active, targets, p_max: float) -> tuple[ConicProgram, _Layout]:
    """Minimize the summed per-user slack on the SINR cones (always feasible)."""
    sub = _prepare(stats, active)
    targets = _targets(sub, targets)
    layout = _Layout.create(sub)
    s = layout.builder.add_vars("s", (sub.num_users,), nonneg=True)
    layout.builder.add_objective(s, 1.0)
    layout.add_sinr_cones(targets, slack=s)
    layout.add_power_caps(p_max)
    return layout.build(), layout


def slack_violations(stats: ChannelStatistics, allocation: PowerAllocation, targets,
                     active=None) -> np.ndarray:
    """``I_k(u) - sqrt((1+g)/g) b_k^T u_k`` per user, in noise-normalized units."""
    sub = _prepare(stats, active)
    targets = _targets(sub, targets)
    u = allocation.amplitudes[list(sub.ap_indices)]
    interference = np.sqrt(np.einsum("kilm,li,mi->k", sub.quad_forms, u, u) + sub.dl_noise)
    signal = np.sqrt((1.0 + targets) / targets) * np.einsum("km,mk->k", sub.b, u)
    return (interference - signal) / np.sqrt(sub.dl_noise)


def solve_p3(stats: ChannelStatistics, active, targets, p_max: float, tol: float = DEFAULT_TOL,
             slack_tol: float = SLACK_ZERO_TOL, counter: SolveCounter | None = None,
             allow_inexact: bool = False, kind: str = "p3") -> FeasibilityReport:
    """Minimum summed slack over ``active``; feasible means ``sum(s) <= slack_tol``.

    With ``allow_inexact`` a reduced-accuracy exit still yields a report (built
    from the last iterate, flagged ``exact=False`` and infeasible) instead of
    raising :class:`SolverError`.
    """
    program, layout = build_p3(stats, active, targets, p_max)
    result = solve_socp(program, tol)
    if counter is not None:
        counter.add(kind)
    exact = result.status is Status.OPTIMAL
    if not exact and not (allow_inexact and result.x.size and np.all(np.isfinite(result.x))):
        raise SolverError(f"P3 failed: {result.status.value}", result.status)
    slacks = np.clip(result.x[program.names["s"]], 0.0, None)
    return FeasibilityReport(
        slacks=slacks,
        allocation=layout.allocation(result.x, stats.total_aps),
        feasible=exact and bool(slacks.sum() <= slack_tol),
        active=layout.stats.ap_indices,
        exact=exact,
    )


def max_min_sinr(stats: ChannelStatistics, p_max: float, tol: float = 1e-4,
                 solver_tol: float = DEFAULT_TOL, counter: SolveCounter | None = None) -> float:
    """Largest common SINR target that every user can reach with all APs active.

    Bisection on P3 feasibility.  The lower end of the bracket is the minimum
    SINR under equal full-power allocation, which is feasible by construction;
    the upper end starts at ten times that and doubles until infeasible.
    """
    K = stats.num_users

    def feasible(gamma: float) -> bool:
        try:
            return solve_p3(stats, None, np.full(K, gamma), p_max, tol=solver_tol, counter=counter).feasible
        except SolverError:
            # only happens where the feasible set degenerates to a point; not certified feasible
            return False

    equal = np.zeros((stats.total_aps, K))
    equal[list(stats.ap_indices)] = p_max / K
    lo = float(np.min(sinr(stats, equal)))
    if not lo > 0 or not feasible(lo):
        raise InfeasibleError("network cannot serve every user at any positive SINR")
    hi = 10.0 * lo
    while feasible(hi):
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * lo:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# Branch-and-bound for the mixed-binary problem


def build_p1_relaxation(stats: ChannelStatistics, ones: Sequence[int], free: Sequence[int], targets,
                        p_max: float, fixed_ap_power: float, pa_inefficiency: float,
                        covers: Sequence[Sequence[int]] = ()):
    """Continuous relaxation with ``x_l = 1`` on ``ones``, ``x_l in [0, 1]`` on ``free``.

    APs switched off are simply left out.  The returned program omits the
    constant ``P_BB * |ones|``.  Each entry of ``covers`` is a subset of
    ``free`` and adds the cut ``sum(x[cover]) >= 1``; it is valid when the
    APs outside the cover are known to be infeasible on their own.
    """
    sub = restrict_statistics(stats, tuple(ones) + tuple(free))
    targets = _targets(sub, targets)
    layout = _Layout.create(sub)
    x = layout.builder.add_vars("x", (len(free),), nonneg=True)
    layout.builder.add_objective(x, fixed_ap_power)
    t = layout.add_power_epigraph()
    layout.builder.add_objective(t, pa_inefficiency * layout.amp_scale ** 2)
    for j in range(len(free)):
        layout.builder.add_cone([x[j]], [[-1.0]], [1.0])
    position = {ap: j for j, ap in enumerate(free)}
    for cover in covers:
        cols = x[[position[ap] for ap in cover]]
        layout.builder.add_cone(cols, np.ones((1, cols.size)), [-1.0])
    switches = {sub.position(ap): int(x[j]) for j, ap in enumerate(free)}
    layout.add_sinr_cones(targets)
    layout.add_power_caps(p_max, switches)
    return layout.build(), layout


@dataclass(order=True)
class _Node:
    key: float
    pattern: tuple[int, ...]
    ones: tuple[int, ...] = field(compare=False)
    free: tuple[int, ...] = field(compare=False)


def branch_and_bound_p1(stats: ChannelStatistics, targets, config, gap_tol: float = BNB_GAP_TOL,
                        tol: float = DEFAULT_TOL, max_nodes: int | None = None) -> SwitchingSolution:
    """Globally optimal AP activation and power allocation.

    Best-first search on the relaxation bound, branching on the most
    fractional activation variable.  The incumbent starts from all APs
    active; a node is pruned when its bound is within ``gap_tol`` of the
    incumbent.  Leaf values (all activations fixed) come from P2 on the
    active set.  ``config`` supplies ``fixed_ap_power``, ``pa_inefficiency``
    and ``max_tx_power``.

    Exact accelerations on top of the plain relaxation bound:

    * Feasibility is monotone in the AP set, so every certified-infeasible
      set ``S`` is remembered.  Nodes whose candidate APs fit inside ``S``
      are dropped without a solve, and nodes whose forced-on APs fit inside
      ``S`` get the cover cut ``sum(x_l for free l outside S) >= 1``.
    * The forced-on set ``O`` of every node is evaluated with P2.  Any other
      point of the node switches on a further AP and costs at least
      ``P_BB * (|O| + 1)``, so the node is closed when ``O`` beats that.
    * Node keys never drop below ``P_BB * |O|``.
    """
    p_bb, delta, p_max = config.fixed_ap_power, config.pa_inefficiency, config.max_tx_power
    aps = stats.ap_indices
    bit = {ap: 1 << j for j, ap in enumerate(aps)}
    counter = SolveCounter()
    failures = 0
    infeasible_masks: list[int] = [0]
    leaf_cache: dict[tuple[int, ...], tuple[float, PowerAllocation] | None] = {}

    def mask(subset) -> int:
        return sum(bit[a] for a in subset)

    def known_infeasible(m: int) -> bool:
        return any(m & ~s == 0 for s in infeasible_masks)

    def add_infeasible(m: int) -> None:
        nonlocal infeasible_masks
        if not known_infeasible(m):
            infeasible_masks = [s for s in infeasible_masks if s & ~m != 0] + [m]

    def leaf_value(active):
        nonlocal failures, best_value, best_alloc, best_active
        active = normalize_active(active)
        if active in leaf_cache:
            return leaf_cache[active]
        value = None
        if active and not known_infeasible(mask(active)):
            try:
                alloc = solve_p2(stats, active, targets, p_max, tol=tol, counter=counter)
                value = total_power(active, alloc, p_bb, delta), alloc
            except InfeasibleError:
                add_infeasible(mask(active))
            except SolverError:
                failures += 1
        leaf_cache[active] = value
        if value is not None and value[0] < best_value:
            best_value, best_alloc = value
            best_active = active
        return value

    best_value, best_alloc, best_active = np.inf, None, aps
    if leaf_value(aps) is None:
        raise InfeasibleError("targets are infeasible even with every AP active")

    def pattern(ones, free):
        return tuple(1 if a in ones else (2 if a in free else 0) for a in aps)

    heap = [_Node(-np.inf, pattern((), aps), (), aps)]
    nodes = 0
    while heap:
        node = heapq.heappop(heap)
        if node.key >= best_value - gap_tol:
            continue
        if max_nodes is not None and nodes >= max_nodes:
            heapq.heappush(heap, node)
            break
        nodes += 1
        if not node.free:
            leaf_value(node.ones)
            continue
        union = mask(node.ones) | mask(node.free)
        if known_infeasible(union):
            continue
        ones_mask = mask(node.ones)
        if node.ones:
            # integer point with every free AP off: an incumbent or a certificate for the cover cut
            value = leaf_value(node.ones)
            if value is not None:
                # every other point in the node pays for at least one more AP
                if value[0] <= p_bb * (len(node.ones) + 1) + gap_tol:
                    continue
        if known_infeasible(ones_mask) and p_bb * (len(node.ones) + 1) >= best_value - gap_tol:
            continue  # the forced-on set needs at least one more AP
        covers = {tuple(a for a in node.free if not bit[a] & s)
                  for s in infeasible_masks if ones_mask & ~s == 0} if COVER_CUTS else ()
        program, _ = build_p1_relaxation(stats, node.ones, node.free, targets, p_max, p_bb, delta,
                                         sorted(covers))
        result = solve_socp(program, tol)
        counter.add("relaxation")
        if result.status is Status.INFEASIBLE:
            # cuts only exclude infeasible integer points, so the union itself is infeasible
            add_infeasible(union)
            continue
        xs = result.x[program.names["x"]] if result.x.size else np.full(len(node.free), np.nan)
        if result.status is Status.OPTIMAL:
            bound = p_bb * len(node.ones) + min(result.objective, result.dual_objective)
        elif np.isfinite(result.dual_objective) and result.residuals.get("dual", np.inf) <= DUAL_BOUND_TOL:
            # reduced-accuracy exit with an (almost) dual-feasible point: weak duality still bounds
            bound = p_bb * len(node.ones) + result.dual_objective
        else:
            failures += 1
            bound = node.key
        if not np.all(np.isfinite(xs)):
            xs = np.full(len(node.free), 0.5)
        xs = np.clip(xs, 0.0, 1.0)
        if bound >= best_value - gap_tol:
            continue
        frac = np.minimum(xs, 1.0 - xs)
        if result.status is Status.OPTIMAL and np.all(frac <= INTEGRALITY_TOL):
            rounded = normalize_active(list(node.ones) + [a for a, xv in zip(node.free, xs) if xv > 0.5])
            if leaf_value(rounded) is not None:
                continue
        j = int(np.argmin(np.abs(xs - 0.5)))
        branch_ap = node.free[j]
        rest = node.free[:j] + node.free[j + 1:]
        for ones in (node.ones, normalize_active(node.ones + (branch_ap,))):
            key = max(bound, p_bb * len(ones))
            if key < best_value - gap_tol:
                heapq.heappush(heap, _Node(key, pattern(ones, rest), ones, rest))

    return SwitchingSolution(
        active=best_active,
        allocation=best_alloc,
        transmit_power=best_alloc.transmit_power,
        total_power=best_value,
        measuring_aps=len(aps),
        serving_aps=len(best_active),
        solves=counter.total,
        details={"nodes": nodes, "open_nodes": len(heap), "p2_solves": counter["p2"],
                 "relaxation_solves": counter["relaxation"], "numerical_failures": failures},
    )
