"""Adaptive data-offloading planner for one federated round.

Decides which way data should flow (satellite down to the clusters, or
air/ground up to the satellite) and how much each link should carry so that
the slowest layer finishes as early as possible.  The search is hierarchical
bisection throughout: an outer loop over the total transfer volume, an inner
loop over a common completion level that the clusters are driven toward, and
per-device solves that invert the piecewise-linear completion-time formulas
in closed form.

Every loop records its iteration count and initial interval in the returned
trace, so callers can audit that each bisection stayed within its logarithmic
iteration budget.

Sample counts are real-valued during planning.  ``apply_plan`` is the only
place where counts become integers and concrete sample indices move between
dataset ledgers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .latency import (
    CASE_AIR_GROUND_TO_SPACE,
    CASE_SPACE_TO_AIR_GROUND,
    ClusterState,
    RoundLatency,
    SaginState,
    SpaceInfeasibleError,
    air_cluster_completion_no_offload,
    case1_air_local_delay,
    case1_air_receive_delay,
    case1_ground_delay,
    case2_air_local_delay,
    case2_air_transmit_delay,
    case2_ground_delay,
    model_upload_delay,
    round_latency_no_offload,
    round_latency_with_plan,
    space_layer_latency,
)
from .linkmodel import PayloadSizes

DEFAULT_EPSILON_1 = 1e-3
DEFAULT_EPSILON_2 = 1e-3

# Bisection intervals narrower than this are treated as already converged.
_TINY = 1e-12


class OffloadConfigError(ValueError):
    """Raised when planner inputs fail validation."""


@dataclass(frozen=True)
class LoopStat:
    """Iteration record for one bisection loop.

    ``interval`` is the width of the initial search interval and ``epsilon``
    the absolute termination width, so ``bound`` is the maximum number of
    halvings the loop may take.
    """

    name: str
    iterations: int
    interval: float
    epsilon: float

    @property
    def bound(self) -> int:
        if self.interval <= self.epsilon or self.epsilon <= 0:
            return 1
        return math.ceil(math.log2(self.interval / self.epsilon)) + 1


@dataclass(frozen=True)
class BisectionTrace:
    """Audit record of one planner run.

    ``outer_iterations`` counts the top-level volume bisection,
    ``inner_iterations`` the largest completion-level loop observed inside
    any outer step.  ``final_gap`` is the absolute difference between the two
    sides the outer loop tried to equalize, measured at the returned plan.
    ``saturated`` marks runs where a box constraint stopped the balancing
    before the gap could close.  ``loops`` holds one LoopStat per bisection
    loop that ran.
    """

    outer_iterations: int
    inner_iterations: int
    final_gap: float
    saturated: bool = False
    loops: tuple = ()


@dataclass(frozen=True, eq=False)
class OffloadPlan:
    """Per-link transfer volumes for one round.

    ``s2a[n]`` and ``a2s[n]`` are satellite-facing volumes per air node (only
    one of the two directions may be nonzero, selected by ``direction``);
    ``a2g[n][k]`` and ``g2a[n][k]`` are the air-to-device and device-to-air
    volumes inside cluster n.  A cluster may send or receive ground transfers
    in one round, not both.
    """

    direction: str
    s2a: np.ndarray
    a2s: np.ndarray
    a2g: tuple
    g2a: tuple
    epsilon1: float = DEFAULT_EPSILON_1
    epsilon2: float = DEFAULT_EPSILON_2

    def __post_init__(self) -> None:
        if self.direction not in (CASE_SPACE_TO_AIR_GROUND, CASE_AIR_GROUND_TO_SPACE):
            raise OffloadConfigError(f"unknown direction {self.direction!r}")
        s2a = _frozen_array(self.s2a)
        a2s = _frozen_array(self.a2s)
        a2g = tuple(_frozen_array(x) for x in self.a2g)
        g2a = tuple(_frozen_array(x) for x in self.g2a)
        if s2a.ndim != 1 or a2s.shape != s2a.shape:
            raise OffloadConfigError("s2a and a2s must be 1-d arrays of equal length")
        if len(a2g) != s2a.size or len(g2a) != s2a.size:
            raise OffloadConfigError("need one device array per cluster")
        for name, block in (("s2a", s2a), ("a2s", a2s)):
            if np.any(block < 0):
                raise OffloadConfigError(f"{name} has negative entries")
        for inner_a2g, inner_g2a in zip(a2g, g2a):
            if np.any(inner_a2g < 0) or np.any(inner_g2a < 0):
                raise OffloadConfigError("device transfers must be >= 0")
            if np.sum(inner_a2g) > 0 and np.sum(inner_g2a) > 0:
                raise OffloadConfigError(
                    "a cluster cannot both send and receive ground transfers"
                )
        if self.direction == CASE_SPACE_TO_AIR_GROUND and np.any(a2s > 0):
            raise OffloadConfigError("space-bound volumes in a downlink plan")
        if self.direction == CASE_AIR_GROUND_TO_SPACE and np.any(s2a > 0):
            raise OffloadConfigError("ground-bound volumes in an uplink plan")
        object.__setattr__(self, "s2a", s2a)
        object.__setattr__(self, "a2s", a2s)
        object.__setattr__(self, "a2g", a2g)
        object.__setattr__(self, "g2a", g2a)

    @property
    def is_zero(self) -> bool:
        return (
            float(np.sum(self.s2a)) == 0.0
            and float(np.sum(self.a2s)) == 0.0
            and all(float(np.sum(x)) == 0.0 for x in self.a2g)
            and all(float(np.sum(x)) == 0.0 for x in self.g2a)
        )


def _frozen_array(values) -> np.ndarray:
    out = np.array(values, dtype=float)
    out.setflags(write=False)
    return out


class ClusterBalance(NamedTuple):
    """Result of balancing one cluster at a fixed satellite-facing volume."""

    a2g: np.ndarray
    g2a: np.ndarray
    air_delay: float
    ground_delay: float
    cluster_delay: float
    trace: BisectionTrace


class OptimizeResult(NamedTuple):
    plan: OffloadPlan
    latency: RoundLatency
    trace: BisectionTrace


def zero_plan(
    state: SaginState,
    epsilon1: float = DEFAULT_EPSILON_1,
    epsilon2: float = DEFAULT_EPSILON_2,
) -> OffloadPlan:
    """The no-transfer plan for a state (uplink direction by convention)."""
    n = len(state.clusters)
    return OffloadPlan(
        direction=CASE_AIR_GROUND_TO_SPACE,
        s2a=np.zeros(n),
        a2s=np.zeros(n),
        a2g=tuple(np.zeros(len(c.devices)) for c in state.clusters),
        g2a=tuple(np.zeros(len(c.devices)) for c in state.clusters),
        epsilon1=epsilon1,
        epsilon2=epsilon2,
    )


# --------------------------------------------------------------------------
# Per-cluster working arrays and closed-form per-device solves.


class _ClusterData:
    """Precomputed numpy views of one cluster for the planning loops."""

    __slots__ = (
        "air", "m_air", "f_air", "z_s2a", "z_a2s", "q", "model_bits",
        "d", "sens", "m", "f", "zg2a", "za2g", "up", "own",
        "c_air", "a2s_model", "send_cap", "n_dev", "level_hi",
        "own_compute", "m_over_f", "f_over_m", "recv_rate", "za2g_over_q",
        "fm_air", "q_over_zs2a",
    )

    def __init__(self, cluster: ClusterState, payload: PayloadSizes, mass_hint: float):
        self.air = cluster.air_samples
        self.m_air = cluster.air_cycles_per_sample
        self.f_air = cluster.air_cpu_rate
        self.z_s2a = cluster.s2a_rate
        self.z_a2s = cluster.a2s_rate
        self.q = payload.sample_bits
        self.model_bits = payload.model_bits
        devs = cluster.devices
        self.n_dev = len(devs)
        self.d = np.array([x.samples for x in devs], dtype=float)
        self.sens = np.array([x.sensitive_samples for x in devs], dtype=float)
        self.m = np.array([x.cycles_per_sample for x in devs], dtype=float)
        self.f = np.array([x.cpu_rate for x in devs], dtype=float)
        self.zg2a = np.array([x.g2a_rate for x in devs], dtype=float)
        self.za2g = np.array([x.a2g_rate for x in devs], dtype=float)
        self.up = self.model_bits / self.zg2a
        self.own_compute = _safe_div(self.m * self.d, self.f)
        self.own = self.own_compute + self.up
        self.c_air = self.m_air * self.air / self.f_air
        self.a2s_model = payload.model_bits / self.z_a2s
        # Reciprocal forms used by the planning loops, hoisted because the
        # level inversions run hundreds of times per round.
        self.m_over_f = _safe_div(self.m, self.f)
        self.f_over_m = _safe_div(self.f, self.m)
        self.recv_rate = _safe_div(1.0, self.q / self.za2g + self.m_over_f)
        self.za2g_over_q = self.za2g / self.q if self.q > 0 else np.zeros_like(self.za2g)
        self.fm_air = self.f_air / self.m_air
        self.q_over_zs2a = self.q / self.z_s2a
        # Uploading beyond this count slows a device down again; together with
        # the privacy floor it caps what each device may shed.
        threshold = _safe_div(
            self.m * self.zg2a * self.d, self.m * self.zg2a + self.q * self.f
        )
        self.send_cap = np.minimum(threshold, self.d - self.sens)
        # A completion level no balanced allocation can exceed: every sample in
        # sight processed serially on the slowest processor after the slowest
        # conceivable transfer.
        mass = self.air + float(np.sum(self.d)) + mass_hint + 1.0
        slow_compute = self.m_air / self.f_air
        slow_link = self.q / min(self.z_s2a, self.z_a2s)
        if self.n_dev:
            slow_compute = max(slow_compute, float(np.max(self.m / self.f)))
            slow_link = max(
                slow_link,
                float(np.max(self.q / self.zg2a)),
                float(np.max(self.q / self.za2g)),
            )
            base = max(self.c_air, float(np.max(self.own)))
        else:
            base = self.c_air
        self.level_hi = base + mass * (slow_compute + slow_link) + 1.0


def _safe_div(num, den):
    den = np.asarray(den, dtype=float)
    out = np.zeros_like(den)
    np.divide(np.asarray(num, dtype=float), den, out=out, where=den != 0)
    return out


def _absorb_at_level(cd: _ClusterData, level, upstream: float) -> np.ndarray:
    """Largest per-device intake meeting a completion level.

    Inverts max(own compute, upstream + transfer) + extra compute + model
    upload = level for each device; zero when the device cannot even meet the
    level empty-handed.
    """
    budget = level - cd.up
    own_compute = cd.own_compute
    waiting = own_compute > upstream
    at_zero = np.where(waiting, own_compute, upstream)
    cross_x = np.where(waiting, (own_compute - upstream) * cd.za2g_over_q, 0.0)
    at_cross = np.where(waiting, own_compute + cd.m_over_f * cross_x, at_zero)
    intake = np.where(
        budget <= at_zero,
        0.0,
        np.where(
            budget <= at_cross,
            (budget - own_compute) * cd.f_over_m,
            cross_x + (budget - at_cross) * cd.recv_rate,
        ),
    )
    return np.maximum(intake, 0.0)


def _required_send_at_level(cd: _ClusterData, level) -> np.ndarray:
    """Smallest per-device upload that lets each device finish by the level.

    On the capped range the completion time is compute-dominated and falls
    linearly with every sample shed, so the inverse is immediate.  Entries are
    not clamped to the send caps; callers decide how to treat shortfalls.
    """
    budget = level - cd.up
    return np.maximum(0.0, cd.d - budget * cd.f_over_m)


def _invert_receiver_intake(wait: float, slope: float, transfer_slope: float, budget: float) -> float:
    """Largest s with max(wait, transfer_slope*s) + slope*s <= budget."""
    if budget < wait:
        return -math.inf
    if transfer_slope <= 0:
        return math.inf if slope <= 0 else (budget - wait) / slope
    cross = wait / transfer_slope
    at_cross = wait + slope * cross
    if budget <= at_cross:
        return (budget - wait) / slope if slope > 0 else cross
    return cross + (budget - at_cross) / (slope + transfer_slope)


# --------------------------------------------------------------------------
# Cluster capacity at a completion level (the inner solve of the outer
# planner); each direction gets its own feasibility algebra.


def _case1_transmit_absorb(cd: _ClusterData, level: float, box: float) -> float:
    """Max satellite intake when the air node relays surplus to the ground."""
    if cd.n_dev and float(np.max(cd.own)) > level:
        return -math.inf

    def feasible(s: float) -> bool:
        upstream = cd.q_over_zs2a * s
        intake = np.minimum(_absorb_at_level(cd, level, upstream), cd.air + s)
        ground_room = float(np.sum(intake))
        shed_floor = max(s, cd.air + s - level * cd.fm_air)
        received = max(cd.c_air, upstream)
        if level >= received:
            grown = s - (level - received) * cd.fm_air
            shed_floor = min(shed_floor, max(0.0, grown))
        shed_floor = max(0.0, shed_floor)
        return shed_floor <= min(ground_room, cd.air + s) + _TINY

    if not feasible(0.0):
        return -math.inf
    if feasible(box):
        return box
    lo, hi = 0.0, box
    # 13 halvings pin the boundary to box/2^13; finer resolution is wasted
    # because the level loop above only needs the capacity to within its own
    # relative window.
    for _ in range(13):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _case1_receive_absorb(cd: _ClusterData, level: float, box: float) -> float:
    """Max satellite intake when ground devices also shed into the air node."""
    need = _required_send_at_level(cd, level)
    if cd.n_dev and np.any(need > cd.send_cap + _TINY):
        return -math.inf
    inflow_each = np.minimum(need, cd.send_cap)
    inflow = float(np.sum(inflow_each))
    arrival = 0.0
    if cd.n_dev:
        arrival = float(np.max(cd.q * inflow_each / cd.zg2a))
    wait = max(cd.c_air, arrival)
    slope = cd.m_air / cd.f_air
    budget = level - slope * inflow
    intake = _invert_receiver_intake(wait, slope, cd.q / cd.z_s2a, budget)
    if intake < 0:
        return -math.inf
    return min(intake, box)


def _case1_absorb_at_level(cd: _ClusterData, level: float, box: float) -> float:
    """Max satellite volume a cluster can take while finishing by the level."""
    best = max(
        _case1_transmit_absorb(cd, level, box),
        _case1_receive_absorb(cd, level, box),
    )
    if best == -math.inf:
        return 0.0
    return max(0.0, min(best, box))


def _case2_lift_bounds(cd: _ClusterData, level: float, box: float):
    """Feasible satellite-upload interval [lo, hi] at a completion level.

    Returns (inf, -inf) when the cluster cannot meet the level at any upload
    volume.  The lower bound is the forced lift; the upper bound comes from
    the upload-readiness constraint and the printed boxes.
    """
    hi = min(level * cd.z_a2s / cd.q, cd.air, box)
    if hi < 0:
        return math.inf, -math.inf
    need = _required_send_at_level(cd, level)
    candidates = []
    if cd.n_dev and np.any(need > cd.send_cap + _TINY):
        # Some device misses the level even at its cap; the level is too low
        # for the shed-to-air sub-case, and the other sub-cases cannot help a
        # slow device either.
        return math.inf, -math.inf
    inflow_each = np.minimum(need, cd.send_cap) if cd.n_dev else need
    inflow = float(np.sum(inflow_each))
    arrival = 0.0
    if cd.n_dev and inflow > 0:
        arrival = float(np.max(cd.q * inflow_each / cd.zg2a))

    # Upload at least a so the held (or net) dataset computes within the level.
    lift_net = max(inflow, cd.air + inflow - level * cd.f_air / cd.m_air)
    if lift_net <= hi:
        candidates.append(max(0.0, lift_net))
    wait = max(cd.c_air, arrival)
    if level >= wait:
        lift_partial = inflow - (level - wait) * cd.f_air / cd.m_air
        if lift_partial <= min(hi, inflow):
            candidates.append(max(0.0, lift_partial))
    if inflow == 0.0 and cd.n_dev:
        # No device is forced to shed, so the air node may instead push some
        # of its burden down while lifting the rest.
        ground_room = float(
            np.sum(np.minimum(_absorb_at_level(cd, level, 0.0), cd.air))
        )
        lift_after_shed = cd.air - ground_room - level * cd.f_air / cd.m_air
        if lift_after_shed <= hi:
            candidates.append(max(0.0, lift_after_shed))
    if not candidates:
        return math.inf, -math.inf
    return min(candidates), hi


def _case2_best_effort_lift(cd: _ClusterData, box: float) -> float:
    """Upload volume minimizing air readiness when no level is meetable."""
    bottom = cd.air * cd.m_air * cd.z_a2s / (cd.m_air * cd.z_a2s + cd.q * cd.f_air)
    return min(bottom, cd.air, box)


# --------------------------------------------------------------------------
# Algorithm core: budgeted air-ground balancing inside one cluster.


def _distribute_case1_transmit(
    cd: _ClusterData, budget: float, s2a_n: float, eps2: float, holdings: float
) -> tuple[np.ndarray, int, bool, float]:
    """Spread a downlink budget over the devices at a common level.

    Bisects the completion level until the device intakes sum into the
    (1 +/- eps2) window around the budget.  Exits early, flagged, when the
    per-device caps cannot reach the window.  ``holdings`` is what the air
    node has available to forward once the satellite exchange settles.
    Returns the per-device intakes, the iteration count, the saturation
    flag, and the level tolerance the loop ran at.
    """
    caps = np.full(cd.n_dev, min(holdings, budget))  # per-device forwarding box
    upstream = cd.q * s2a_n / cd.z_s2a
    if budget <= _TINY or cd.n_dev == 0:
        return np.zeros(cd.n_dev), 0, False, math.inf
    cap_total = float(np.sum(caps))
    floor = (1 - eps2) * budget
    if cap_total < floor:
        return caps.copy(), 0, True, math.inf
    # Intakes flatten at the caps, so bisect for the lowest level clearing the
    # budget floor rather than accepting any level inside the window; the
    # bracket width pins the total because it moves by at most the summed
    # device rates per unit of level.
    lo, hi = 0.0, cd.level_hi
    slope = float(np.sum(cd.f_over_m))
    eps_abs = max(eps2 * budget / max(slope, _TINY), _TINY)
    bound = _loop_bound(cd.level_hi, eps_abs)
    iterations = 0
    while hi - lo >= eps_abs and iterations < bound:
        level = 0.5 * (lo + hi)
        intake = np.minimum(_absorb_at_level(cd, level, upstream), caps)
        iterations += 1
        if float(np.sum(intake)) < floor:
            lo = level
        else:
            hi = level
    intake = np.minimum(_absorb_at_level(cd, hi, upstream), caps)
    total = float(np.sum(intake))
    sat = not floor - _TINY <= total <= (1 + eps2) * budget + _TINY
    return intake, iterations, sat, eps_abs


def _distribute_receive(
    cd: _ClusterData, budget: float, eps2: float
) -> tuple[np.ndarray, int, bool, float]:
    """Collect an uplink budget from the devices at a common level.

    Mirror of the downlink distribution: device sheds grow as the target
    level falls, so the interval update direction flips.
    """
    if budget <= _TINY or cd.n_dev == 0:
        return np.zeros(cd.n_dev), 0, False, math.inf
    caps = cd.send_cap
    cap_total = float(np.sum(caps))
    floor = (1 - eps2) * budget
    if cap_total < floor:
        return caps.copy(), 0, True, math.inf
    # Sheds grow as the level falls and flatten at the caps; bisect for the
    # highest level that still clears the budget floor.
    lo, hi = 0.0, cd.level_hi
    slope = float(np.sum(cd.f_over_m))
    eps_abs = max(eps2 * budget / max(slope, _TINY), _TINY)
    bound = _loop_bound(cd.level_hi, eps_abs)
    iterations = 0
    while hi - lo >= eps_abs and iterations < bound:
        level = 0.5 * (lo + hi)
        send = np.minimum(_required_send_at_level(cd, level), caps)
        iterations += 1
        if float(np.sum(send)) < floor:
            hi = level  # overshot: bring the level back down
        else:
            lo = level
    send = np.minimum(_required_send_at_level(cd, lo), caps)
    total = float(np.sum(send))
    sat = not floor - _TINY <= total <= (1 + eps2) * budget + _TINY
    return send, iterations, sat, eps_abs


def _loop_bound(interval: float, eps_abs: float) -> int:
    if interval <= eps_abs or eps_abs <= 0:
        return 1
    return math.ceil(math.log2(interval / eps_abs)) + 1


def _system_slope(cds: list[_ClusterData]) -> float:
    """Upper bound on samples absorbed per second of completion level."""
    return sum(
        cd.f_air / cd.m_air + float(np.sum(cd.f / cd.m)) for cd in cds
    )


def _air_delay_case1(cd: _ClusterData, s2a_n: float, a2g: np.ndarray, g2a: np.ndarray) -> float:
    if float(np.sum(g2a)) > 0:
        return case1_air_receive_delay(
            cd.air, s2a_n, g2a, cd.m_air, cd.f_air, cd.z_s2a, cd.zg2a, cd.q
        )
    return float(
        case1_air_local_delay(
            cd.air, s2a_n, float(np.sum(a2g)), cd.m_air, cd.f_air, cd.z_s2a, cd.q
        )
    )


def _air_delay_case2(cd: _ClusterData, a2s_n: float, a2g: np.ndarray, g2a: np.ndarray) -> float:
    if float(np.sum(a2g)) > 0:
        return case2_air_transmit_delay(
            cd.air, a2s_n, float(np.sum(a2g)), cd.m_air, cd.f_air, cd.z_a2s, cd.q
        )
    return case2_air_local_delay(
        cd.air, a2s_n, g2a, cd.m_air, cd.f_air, cd.z_a2s, cd.zg2a, cd.q
    )


def _ground_arrivals_case1(cd: _ClusterData, s2a_n: float, a2g: np.ndarray) -> np.ndarray:
    upstream = cd.q * s2a_n / cd.z_s2a
    delays = case1_ground_delay(cd.d, a2g, upstream, cd.m, cd.f, cd.za2g, cd.q)
    return np.atleast_1d(np.asarray(delays, dtype=float)) + cd.up


def _ground_arrivals_send(cd: _ClusterData, g2a: np.ndarray) -> np.ndarray:
    delays = case2_ground_delay(cd.d, g2a, cd.m, cd.f, cd.zg2a, cd.q)
    return np.atleast_1d(np.asarray(delays, dtype=float)) + cd.up


def _ground_arrivals_case2_receive(cd: _ClusterData, a2g: np.ndarray) -> np.ndarray:
    delays = case1_ground_delay(cd.d, a2g, 0.0, cd.m, cd.f, cd.za2g, cd.q)
    return np.atleast_1d(np.asarray(delays, dtype=float)) + cd.up


def _balance_cluster(
    cd: _ClusterData,
    satellite_volume: float,
    case1: bool,
    eps1: float,
    eps2: float,
) -> ClusterBalance:
    """Run the budgeted air-ground balancing for one cluster.

    Decides the ground sub-case from the pre-balancing delays, then bisects
    the total ground-facing budget, distributing each candidate budget over
    the devices at a common completion level.
    """
    zeros = np.zeros(cd.n_dev)
    if case1:
        air0 = _air_delay_case1(cd, satellite_volume, zeros, zeros)
        arrivals0 = _ground_arrivals_case1(cd, satellite_volume, zeros)
    else:
        air0 = _air_delay_case2(cd, satellite_volume, zeros, zeros)
        arrivals0 = _ground_arrivals_send(cd, zeros)
    ground0 = float(np.max(arrivals0)) if cd.n_dev else 0.0

    air_transmits = air0 > ground0
    if cd.n_dev == 0 or air0 == ground0:
        delay = max(air0, ground0)
        return ClusterBalance(
            zeros, zeros.copy(), air0, ground0, delay,
            BisectionTrace(0, 0, abs(air0 - ground0)),
        )

    if case1:
        if air_transmits:
            budget_hi = cd.air + satellite_volume

            def run(budget):
                a2g, iters, sat, eps = _distribute_case1_transmit(
                    cd, budget, satellite_volume, eps2, budget_hi
                )
                # Joint mass clamp: the air node cannot forward more than it
                # holds plus what it received.
                total = float(np.sum(a2g))
                if total > budget_hi and total > 0:
                    a2g = a2g * (budget_hi / total)
                    sat = True
                air = _air_delay_case1(cd, satellite_volume, a2g, zeros)
                ground = float(np.max(_ground_arrivals_case1(cd, satellite_volume, a2g)))
                return a2g, air, ground, iters, sat, eps
        else:
            budget_hi = float(np.sum(cd.send_cap))

            def run(budget):
                g2a, iters, sat, eps = _distribute_receive(cd, budget, eps2)
                air = _air_delay_case1(cd, satellite_volume, zeros, g2a)
                ground = float(np.max(_ground_arrivals_send(cd, g2a)))
                return g2a, air, ground, iters, sat, eps
    else:
        if air_transmits:
            budget_hi = max(0.0, cd.air - satellite_volume)

            def run(budget):
                a2g, iters, sat, eps = _distribute_case1_transmit(
                    cd, budget, 0.0, eps2, budget_hi
                )
                total = float(np.sum(a2g))
                if total > budget_hi and total > 0:
                    a2g = a2g * (budget_hi / total)
                    sat = True
                air = _air_delay_case2(cd, satellite_volume, a2g, zeros)
                ground = float(np.max(_ground_arrivals_case2_receive(cd, a2g)))
                return a2g, air, ground, iters, sat, eps
        else:
            budget_hi = float(np.sum(cd.send_cap))

            def run(budget):
                g2a, iters, sat, eps = _distribute_receive(cd, budget, eps2)
                air = _air_delay_case2(cd, satellite_volume, zeros, g2a)
                ground = float(np.max(_ground_arrivals_send(cd, g2a)))
                return g2a, air, ground, iters, sat, eps

    if budget_hi <= _TINY:
        delay = max(air0, ground0)
        return ClusterBalance(
            zeros, zeros.copy(), air0, ground0, delay,
            BisectionTrace(0, 0, abs(air0 - ground0)),
        )

    eps1_abs = max(eps1 * budget_hi, _TINY)
    lo, hi = 0.0, budget_hi
    outer_iters = 0
    inner_max = 0
    inner_eps = math.inf
    saturated = False
    while hi - lo >= eps1_abs:
        budget = 0.5 * (lo + hi)
        _, air, ground, inner, sat, eps = run(budget)
        outer_iters += 1
        inner_max = max(inner_max, inner)
        inner_eps = min(inner_eps, eps)
        saturated = saturated or sat
        favors_more = air >= ground if air_transmits else air < ground
        if favors_more:
            lo = budget
        else:
            hi = budget

    final_budget = 0.5 * (lo + hi)
    alloc, air, ground, inner, sat, eps = run(final_budget)
    inner_max = max(inner_max, inner)
    inner_eps = min(inner_eps, eps)
    saturated = saturated or sat

    loops = (
        LoopStat("cluster-budget", outer_iters, budget_hi, eps1_abs),
        LoopStat("cluster-level", inner_max, cd.level_hi, inner_eps),
    )
    trace = BisectionTrace(
        outer_iterations=outer_iters,
        inner_iterations=inner_max,
        final_gap=abs(air - ground),
        saturated=saturated,
        loops=loops,
    )
    a2g = alloc if air_transmits else zeros
    g2a = zeros if air_transmits else alloc
    delay = max(air, ground)
    return ClusterBalance(a2g, g2a, air, ground, delay, trace)


def balance_air_ground_case1(
    cluster: ClusterState,
    s2a_n: float,
    payload: PayloadSizes,
    epsilon1: float = DEFAULT_EPSILON_1,
    epsilon2: float = DEFAULT_EPSILON_2,
) -> ClusterBalance:
    """Balance one cluster that receives a fixed satellite downlink volume.

    Compares the air node's stand-alone delay with the slowest device arrival
    to pick the transfer direction inside the cluster, then equalizes the two
    sides by bisecting the transfer budget.
    """
    if s2a_n < 0:
        raise OffloadConfigError(f"s2a volume must be >= 0, got {s2a_n}")
    cd = _ClusterData(cluster, payload, mass_hint=s2a_n)
    return _balance_cluster(cd, s2a_n, case1=True, eps1=epsilon1, eps2=epsilon2)


def balance_air_ground_case2(
    cluster: ClusterState,
    a2s_n: float,
    payload: PayloadSizes,
    epsilon1: float = DEFAULT_EPSILON_1,
    epsilon2: float = DEFAULT_EPSILON_2,
) -> ClusterBalance:
    """Balance one cluster that uploads a fixed volume to the satellite."""
    if a2s_n < 0:
        raise OffloadConfigError(f"a2s volume must be >= 0, got {a2s_n}")
    if a2s_n > cluster.air_samples + _TINY:
        raise OffloadConfigError(
            "a2s volume exceeds the air node's holdings "
            f"({a2s_n} > {cluster.air_samples})"
        )
    cd = _ClusterData(cluster, payload, mass_hint=0.0)
    return _balance_cluster(cd, a2s_n, case1=False, eps1=epsilon1, eps2=epsilon2)


# --------------------------------------------------------------------------
# Direction classification and the outer space-air-ground balancing.


def _rescale_to_target(volumes: np.ndarray, target: float, eps2: float) -> np.ndarray:
    """Shrink a distributed allocation that overshot the requested total.

    Floor-limited clusters contribute best-effort fallbacks regardless of the
    target, so the per-cluster sum can jump past the tolerance window; the
    outer volume bisection needs the collected total to track its request.
    """
    total = float(np.sum(volumes))
    ceiling = (1.0 + eps2) * target
    if total > ceiling and total > 0:
        return volumes * (target / total)
    return volumes


def _space_tau(state: SaginState, samples: float) -> float:
    try:
        return space_layer_latency(state.space_job(max(0.0, samples))).tau
    except SpaceInfeasibleError:
        return math.inf


def classify_direction(state: SaginState) -> str:
    """Which way offloading should flow, judged before any transfers.

    The satellite side wins ties, meaning data moves up (or nowhere): only a
    strictly slower space layer justifies pushing its dataset down.  A space
    job that cannot finish within the remaining passes counts as infinitely
    slow.
    """
    air_side = 0.0
    for cluster in state.clusters:
        readiness = air_cluster_completion_no_offload(cluster, state.payload)
        air_side = max(
            air_side, readiness + model_upload_delay(state.payload, cluster.a2s_rate)
        )
    tau_space = _space_tau(state, state.space_samples)
    if tau_space > air_side:
        return CASE_SPACE_TO_AIR_GROUND
    return CASE_AIR_GROUND_TO_SPACE


def _distribute_space_case1(
    cds: list[_ClusterData], target: float, boxes: np.ndarray, eps2: float, level_hi: float
):
    """Split a downlink volume over clusters at a common completion level."""
    n = len(cds)
    if target <= _TINY:
        return np.zeros(n), 0, False, 0.0, math.inf

    def intakes(level):
        return np.array(
            [_case1_absorb_at_level(cd, level, float(b)) for cd, b in zip(cds, boxes)]
        )

    floor = (1 - eps2) * target
    intake_at_hi = intakes(level_hi)
    if float(np.sum(intake_at_hi)) < floor:
        return intake_at_hi, 0, True, level_hi, math.inf
    # Cluster capacities flatten at their boxes, so the loop hunts the lowest
    # level whose capped total clears the target floor; that level doubles as
    # the clusters' common readiness estimate.
    lo, hi = 0.0, level_hi
    eps_abs = max(eps2 * target / max(_system_slope(cds), _TINY), _TINY)
    bound = _loop_bound(level_hi, eps_abs)
    iterations = 0
    while hi - lo >= eps_abs and iterations < bound:
        level = 0.5 * (lo + hi)
        iterations += 1
        if float(np.sum(intakes(level))) < floor:
            lo = level
        else:
            hi = level
    intake = intakes(hi)
    total = float(np.sum(intake))
    sat = not floor - _TINY <= total <= (1 + eps2) * target + _TINY
    return intake, iterations, sat, hi, eps_abs


def _distribute_space_case2(
    cds: list[_ClusterData], target: float, boxes: np.ndarray, eps2: float, level_hi: float
):
    """Collect an uplink volume from the clusters at a common level.

    Each cluster contributes its minimum forced lift at the level; lowering
    the level raises the total, so the update direction flips relative to the
    downlink split.  Clusters that cannot meet a level fall back to their
    readiness-minimizing lift.
    """
    n = len(cds)
    if target <= _TINY:
        return np.zeros(n), 0, False, level_hi, math.inf

    def lifts(level):
        out = np.zeros(n)
        for i, cd in enumerate(cds):
            lift_lo, lift_hi = _case2_lift_bounds(cd, level, float(boxes[i]))
            if lift_lo > lift_hi:
                out[i] = _case2_best_effort_lift(cd, float(boxes[i]))
            else:
                out[i] = min(lift_lo, float(boxes[i]))
        return out

    floor = (1 - eps2) * target
    base = lifts(0.0)
    if float(np.sum(base)) < floor:
        # Even demanding instant completion cannot pull enough volume up.
        return base, 0, True, 0.0, math.inf
    # Forced lifts shrink as the level relaxes; hunt the highest level whose
    # total still clears the floor so the clusters stay as unhurried as the
    # target allows.
    lo, hi = 0.0, level_hi
    eps_abs = max(eps2 * target / max(_system_slope(cds), _TINY), _TINY)
    bound = _loop_bound(level_hi, eps_abs)
    iterations = 0
    while hi - lo >= eps_abs and iterations < bound:
        level = 0.5 * (lo + hi)
        iterations += 1
        if float(np.sum(lifts(level))) < floor:
            hi = level  # overshot: tighten the level again
        else:
            lo = level
    volume = lifts(lo)
    total = float(np.sum(volume))
    sat = not floor - _TINY <= total <= (1 + eps2) * target + _TINY
    return volume, iterations, sat, lo, eps_abs


def optimize_round(
    state: SaginState,
    epsilon1: float = DEFAULT_EPSILON_1,
    epsilon2: float = DEFAULT_EPSILON_2,
) -> OptimizeResult:
    """Plan the round's offloading so the slowest layer finishes earliest.

    Classifies the transfer direction, bisects the total satellite-facing
    volume while equalizing the space-side and air-side completion times,
    then balances each cluster internally at the chosen volumes.  Falls back
    to the zero plan whenever the candidate plan fails to improve on it.
    """
    if epsilon1 <= 0 or epsilon2 <= 0:
        raise OffloadConfigError("tolerances must be > 0")
    direction = classify_direction(state)
    case1 = direction == CASE_SPACE_TO_AIR_GROUND
    try:
        baseline = round_latency_no_offload(state)
        baseline_total = baseline.tau_total
    except SpaceInfeasibleError:
        # The satellite cannot finish what it holds; only draining (the
        # downlink direction classify just picked) can rescue the round.
        baseline = None
        baseline_total = math.inf

    payload = state.payload
    mass_hint = state.space_samples
    cds = [_ClusterData(c, payload, mass_hint) for c in state.clusters]
    n = len(cds)
    level_hi = max(cd.level_hi for cd in cds)
    a2s_model = np.array([cd.a2s_model for cd in cds])

    if case1:
        volume_hi = state.space_samples
    else:
        shed_room = sum(float(np.sum(cd.send_cap)) for cd in cds)
        air_room = sum(cd.air for cd in cds)
        volume_hi = shed_room + air_room

    if volume_hi <= _TINY:
        if baseline is None:
            raise SpaceInfeasibleError(state.space_samples, len(state.passes))
        plan = zero_plan(state, epsilon1, epsilon2)
        return OptimizeResult(
            plan, baseline, BisectionTrace(0, 0, 0.0, loops=())
        )

    eps1_abs = max(epsilon1 * volume_hi, _TINY)
    outer_bound = _loop_bound(volume_hi, eps1_abs)

    def evaluate(total_volume: float, probe: bool):
        if case1:
            boxes = np.full(n, min(state.space_samples, total_volume))
            volumes, inner, sat, level, eps = _distribute_space_case1(
                cds, total_volume, boxes, epsilon2, level_hi
            )
            volumes = _rescale_to_target(
                np.minimum(volumes, boxes), total_volume, epsilon2
            )
            drained = min(float(np.sum(volumes)), state.space_samples)
            tau_space = _space_tau(state, state.space_samples - drained)
        else:
            boxes = np.array([min(cd.air, total_volume) for cd in cds])
            volumes, inner, sat, level, eps = _distribute_space_case2(
                cds, total_volume, boxes, epsilon2, level_hi
            )
            volumes = _rescale_to_target(
                np.minimum(volumes, boxes), total_volume, epsilon2
            )
            tau_space = _space_tau(
                state, state.space_samples + float(np.sum(volumes))
            )
        if probe:
            # The distribution level is the common completion time the
            # clusters were solved for, so it stands in for their balanced
            # readiness without paying for the full per-cluster balance.
            air_side = level + float(np.max(a2s_model)) if n else 0.0
            return volumes, None, tau_space, air_side, inner, sat, eps
        if not case1:
            # A cluster near its pool or its upload-equalizing lift cannot
            # usefully shed more, and one whose lift window is empty at the
            # solved level sits at its readiness-minimizing fallback: either
            # way its readiness stops tracking the level, so the run cannot
            # promise a balanced finish.
            pools = np.array([cd.air for cd in cds])
            bottoms = np.array(
                [_case2_best_effort_lift(cd, float(p)) for cd, p in zip(cds, pools)]
            )
            sat = sat or bool(
                np.any(volumes >= np.minimum(pools, bottoms) - eps1_abs)
            )
            if not sat:
                for cd, box in zip(cds, boxes):
                    lift_lo, lift_hi = _case2_lift_bounds(cd, level, float(box))
                    if lift_lo > lift_hi:
                        sat = True
                        break
        balances = [
            _balance_cluster(cd, float(v), case1, epsilon1, epsilon2)
            for cd, v in zip(cds, volumes)
        ]
        readiness = np.array([b.cluster_delay for b in balances])
        air_side = float(np.max(readiness + a2s_model)) if n else 0.0
        return volumes, balances, tau_space, air_side, inner, sat, eps

    lo, hi = 0.0, volume_hi
    outer_iters = 0
    inner_max = 0
    inner_eps = math.inf
    saturated = False
    while hi - lo >= eps1_abs and outer_iters < outer_bound:
        total_volume = 0.5 * (lo + hi)
        _, _, tau_space, air_side, inner, sat, eps = evaluate(total_volume, True)
        outer_iters += 1
        inner_max = max(inner_max, inner)
        inner_eps = min(inner_eps, eps)
        space_dominates = tau_space >= air_side
        # More volume relieves the dominating side: drain the satellite
        # harder in the downlink case, lift less in the uplink case.
        if case1:
            lo, hi = (total_volume, hi) if space_dominates else (lo, total_volume)
        else:
            lo, hi = (lo, total_volume) if space_dominates else (total_volume, hi)

    final_volume = 0.5 * (lo + hi)
    volumes, balances, tau_space, air_side, inner, sat, eps = evaluate(
        final_volume, False
    )
    inner_max = max(inner_max, inner)
    inner_eps = min(inner_eps, eps)

    # The probes estimate the air side from the distribution level, which can
    # sit above the balanced readiness when a cluster is pinned at a floor
    # (sensitive-heavy devices).  Re-target the volume against the realized
    # air side a few times and keep whichever candidate finishes first.
    def space_at(volume: float) -> float:
        if case1:
            drained = min(volume, state.space_samples)
            return _space_tau(state, state.space_samples - drained)
        return _space_tau(state, state.space_samples + volume)

    def invert_space(target: float) -> tuple[float, int]:
        lo_v, hi_v = 0.0, volume_hi
        at_lo, at_hi = space_at(lo_v), space_at(hi_v)
        rising = at_hi >= at_lo
        if rising:
            if at_lo >= target:
                return lo_v, 0
            if at_hi <= target:
                return hi_v, 0
        else:
            if at_hi >= target:
                return hi_v, 0
            if at_lo <= target:
                return lo_v, 0
        iters = 0
        bound = _loop_bound(volume_hi, eps1_abs)
        while hi_v - lo_v >= eps1_abs and iters < bound:
            mid = 0.5 * (lo_v + hi_v)
            iters += 1
            if (space_at(mid) < target) == rising:
                lo_v = mid
            else:
                hi_v = mid
        return 0.5 * (lo_v + hi_v), iters

    best = (max(tau_space, air_side), volumes, balances, tau_space, air_side, sat)
    refine_loops: list[LoopStat] = []
    seen_volume = final_volume
    probe_space, probe_air = tau_space, air_side
    for _ in range(3):
        gap = probe_space - probe_air
        if not math.isfinite(probe_air) or abs(gap) <= 1e-6 * max(1.0, best[0]):
            break
        candidate_volume, iters = invert_space(probe_air)
        refine_loops.append(LoopStat("refine-space", iters, volume_hi, eps1_abs))
        if abs(candidate_volume - seen_volume) < eps1_abs:
            break
        seen_volume = candidate_volume
        c_vol, c_bal, c_space, c_air, c_inner, c_sat, c_eps = evaluate(
            candidate_volume, False
        )
        inner_max = max(inner_max, c_inner)
        inner_eps = min(inner_eps, c_eps)
        if max(c_space, c_air) < best[0]:
            best = (max(c_space, c_air), c_vol, c_bal, c_space, c_air, c_sat)
        probe_space, probe_air = c_space, c_air
    _, volumes, balances, tau_space, air_side, saturated = best

    # Converging onto either end of the volume range with the relieved side
    # still behind means the range, not the tolerance, decided the residual
    # gap.  At the top the cap binds; at the bottom the transfer direction
    # does, because shipping a negative volume would mean reclassifying.
    chosen_total = float(np.sum(volumes))
    gap_tol = 1e-6 * max(1.0, tau_space, air_side)
    if chosen_total >= volume_hi - 2.0 * eps1_abs:
        open_gap = tau_space - air_side if case1 else air_side - tau_space
        saturated = saturated or open_gap > gap_tol
    if chosen_total <= 2.0 * eps1_abs:
        open_gap = air_side - tau_space if case1 else tau_space - air_side
        saturated = saturated or open_gap > gap_tol

    cluster_loops = []
    for idx, result in enumerate(balances):
        saturated = saturated or result.trace.saturated
        for stat in result.trace.loops:
            cluster_loops.append(
                LoopStat(
                    f"cluster{idx}-{stat.name.split('-', 1)[1]}",
                    stat.iterations,
                    stat.interval,
                    stat.epsilon,
                )
            )

    plan = OffloadPlan(
        direction=direction,
        s2a=volumes if case1 else np.zeros(n),
        a2s=np.zeros(n) if case1 else volumes,
        a2g=tuple(result.a2g for result in balances),
        g2a=tuple(result.g2a for result in balances),
        epsilon1=epsilon1,
        epsilon2=epsilon2,
    )
    try:
        latency = round_latency_with_plan(state, plan)
    except SpaceInfeasibleError:
        if baseline is None:
            raise
        latency = None

    if latency is not None and math.isfinite(latency.tau_space) and math.isfinite(air_side):
        final_gap = abs(latency.tau_space - air_side)
    else:
        final_gap = math.inf
    loops = (
        LoopStat("outer-volume", outer_iters, volume_hi, eps1_abs),
        LoopStat("inner-level", inner_max, level_hi, inner_eps),
        *refine_loops,
        *cluster_loops,
    )
    trace = BisectionTrace(
        outer_iterations=outer_iters,
        inner_iterations=inner_max,
        final_gap=final_gap,
        saturated=saturated,
        loops=loops,
    )

    if latency is None or latency.tau_total > baseline_total:
        # The candidate lost to doing nothing (degenerate geometry or heavy
        # saturation); keep the guarantee that planning never hurts.
        plan = zero_plan(state, epsilon1, epsilon2)
        return OptimizeResult(plan, baseline, trace)
    return OptimizeResult(plan, latency, trace)


# --------------------------------------------------------------------------
# Applying a plan to concrete sample holdings.


def _round_counts(targets: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Round real-valued transfer counts to integers under per-source caps.

    Floors every count, then hands the leftover units one at a time to the
    flow with the most remaining slack, so totals stay within one sample of
    the planned mass and no source is overdrawn.
    """
    targets = np.asarray(targets, dtype=float)
    caps = np.asarray(caps, dtype=float)
    base = np.minimum(np.floor(targets), caps).astype(int)
    residual = int(round(float(np.sum(targets)))) - int(np.sum(base))
    slack = np.minimum(caps, np.ceil(targets)) - base
    for _ in range(max(0, residual)):
        candidate = int(np.argmax(slack))
        if slack[candidate] <= 0:
            break
        base[candidate] += 1
        slack[candidate] -= 1
    return base


def apply_plan(ledger, plan: OffloadPlan, rng: np.random.Generator):
    """Move concrete sample indices between holdings according to a plan.

    ``ledger`` must expose ``space`` (index array), ``air`` (list of index
    arrays), ``ground_offloadable`` and ``ground_sensitive`` (nested lists of
    index arrays per cluster), and a ``copy()`` method; the flcore dataset
    ledger does.  Only offloadable indices ever move, transfers are sampled
    uniformly without replacement, and the total index population is
    conserved.  Returns the updated copy.
    """
    out = ledger.copy()
    n_clusters = len(out.air)

    def draw(pool: np.ndarray, count: int):
        count = min(count, pool.size)
        if count <= 0:
            return pool, pool[:0]
        picked = rng.choice(pool.size, size=count, replace=False)
        mask = np.zeros(pool.size, dtype=bool)
        mask[picked] = True
        return pool[~mask], pool[mask]

    if plan.direction == CASE_SPACE_TO_AIR_GROUND:
        s2a_counts = _round_counts(
            plan.s2a, np.full(n_clusters, float(out.space.size))
        )
        # Sequential draws: cap each downlink by what the satellite still has.
        for idx in range(n_clusters):
            out.space, moved = draw(out.space, int(s2a_counts[idx]))
            out.air[idx] = np.concatenate([out.air[idx], moved])
        for idx in range(n_clusters):
            sends = _round_counts(
                plan.a2g[idx],
                np.full(len(out.ground_offloadable[idx]), float(out.air[idx].size)),
            )
            for k in range(len(sends)):
                out.air[idx], moved = draw(out.air[idx], int(sends[k]))
                out.ground_offloadable[idx][k] = np.concatenate(
                    [out.ground_offloadable[idx][k], moved]
                )
            pulls = _round_counts(
                plan.g2a[idx],
                np.array([p.size for p in out.ground_offloadable[idx]], dtype=float),
            )
            for k in range(len(pulls)):
                out.ground_offloadable[idx][k], moved = draw(
                    out.ground_offloadable[idx][k], int(pulls[k])
                )
                out.air[idx] = np.concatenate([out.air[idx], moved])
    else:
        for idx in range(n_clusters):
            lift = _round_counts(
                np.array([plan.a2s[idx]]), np.array([float(out.air[idx].size)])
            )[0]
            out.air[idx], moved = draw(out.air[idx], int(lift))
            out.space = np.concatenate([out.space, moved])
            pulls = _round_counts(
                plan.g2a[idx],
                np.array([p.size for p in out.ground_offloadable[idx]], dtype=float),
            )
            for k in range(len(pulls)):
                out.ground_offloadable[idx][k], moved = draw(
                    out.ground_offloadable[idx][k], int(pulls[k])
                )
                out.air[idx] = np.concatenate([out.air[idx], moved])
            sends = _round_counts(
                plan.a2g[idx],
                np.full(len(out.ground_offloadable[idx]), float(out.air[idx].size)),
            )
            for k in range(len(sends)):
                out.air[idx], moved = draw(out.air[idx], int(sends[k]))
                out.ground_offloadable[idx][k] = np.concatenate(
                    [out.ground_offloadable[idx][k], moved]
                )
    return out
