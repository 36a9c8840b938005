"""Completion-time formulas for one federated round over a space-air-ground network.

Builds every per-node delay out of two primitives, compute time m*|D|/f and
transfer time bits/rate, then composes them into the round-level min-max
latency.  The space layer is the interesting part: a training job hands over
from satellite to satellite as coverage windows expire, and the recursion here
tracks how many samples each pass absorbs before the next takeover.

Delays for the two offloading regimes are kept separate.  In the
space-to-air-ground direction (case 1) the satellite pushes samples down and
the receiving cluster overlaps reception with local compute.  In the
air-ground-to-space direction (case 2) nodes must finish uploading before
their model counts as delivered, so the offload transfer appears as a
readiness bound instead of a pipeline stage.

All sample counts are real-valued here.  Integer rounding happens only when a
plan is applied to an actual dataset ledger; the optimizer relies on the
continuity of these formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .constellation import SatellitePass
from .linkmodel import PayloadSizes, transfer_delay

# Direction tags for offloading plans.  Case 1 drains the satellite dataset
# into the clusters; case 2 lifts air/ground samples up to the satellite.
CASE_SPACE_TO_AIR_GROUND = "space-to-air-ground"
CASE_AIR_GROUND_TO_SPACE = "air-ground-to-space"

HANDOVER_PAYLOAD_FULL = "full"
HANDOVER_PAYLOAD_REMAINING = "remaining"


class LatencyConfigError(ValueError):
    """Raised when a latency input fails validation."""


class SpaceInfeasibleError(RuntimeError):
    """Raised when the pass sequence ends before the space job completes.

    Carries the unprocessed sample count so callers can decide whether to
    evacuate the space dataset or extend the horizon.
    """

    def __init__(self, remaining_samples: float, passes_used: int):
        self.remaining_samples = float(remaining_samples)
        self.passes_used = int(passes_used)
        super().__init__(
            f"space-layer job infeasible: {self.remaining_samples:.3f} samples "
            f"left after {self.passes_used} passes"
        )


@dataclass(frozen=True)
class ComputeLoad:
    """A batch of samples bound to one processor.

    ``cycles_per_sample`` times ``samples`` divided by ``cpu_rate`` is the
    local computation time in seconds.
    """

    samples: float
    cycles_per_sample: float
    cpu_rate: float

    def __post_init__(self) -> None:
        if self.samples < 0:
            raise LatencyConfigError(f"samples must be >= 0, got {self.samples}")
        if self.cycles_per_sample <= 0:
            raise LatencyConfigError(
                f"cycles_per_sample must be > 0, got {self.cycles_per_sample}"
            )
        if self.cpu_rate <= 0:
            raise LatencyConfigError(f"cpu_rate must be > 0, got {self.cpu_rate}")


@dataclass(frozen=True)
class SpaceLayerJob:
    """A satellite-side training job spread over a sequence of passes.

    ``passes`` must be ordered by entry time and each pass must carry its
    compute parameters (``cpu_rate``, ``cycles_per_sample``), the ISL rate to
    the next satellite, and the takeover deadline ``t_limit`` measured from
    round start.  ``handover_payload`` selects how many samples are shipped at
    each handover: "full" re-sends the whole job dataset alongside the model,
    "remaining" sends only the unprocessed part.
    """

    samples: float
    passes: tuple[SatellitePass, ...]
    payload: PayloadSizes
    handover_payload: str = HANDOVER_PAYLOAD_FULL

    def __post_init__(self) -> None:
        if self.samples < 0:
            raise LatencyConfigError(f"samples must be >= 0, got {self.samples}")
        if self.handover_payload not in (
            HANDOVER_PAYLOAD_FULL,
            HANDOVER_PAYLOAD_REMAINING,
        ):
            raise LatencyConfigError(
                f"unknown handover_payload {self.handover_payload!r}"
            )
        object.__setattr__(self, "passes", tuple(self.passes))
        for earlier, later in zip(self.passes, self.passes[1:]):
            if later.t_enter < earlier.t_enter:
                raise LatencyConfigError("passes must be ordered by entry time")
        for rank, p in enumerate(self.passes, start=1):
            if p.cpu_rate is None or p.cycles_per_sample is None:
                raise LatencyConfigError(
                    f"pass {rank} lacks compute parameters; build the sequence "
                    "with pass_sequence() or fill cpu_rate/cycles_per_sample"
                )


class SpaceLayerResult(NamedTuple):
    """Latency, index of the pass that finished, and per-pass sample counts."""

    tau: float
    finishing_pass: int
    processed_per_pass: list


@dataclass(frozen=True)
class DeviceState:
    """One ground device: its dataset, processor, and links to the air node.

    ``sensitive_samples`` is the portion of the dataset that may never leave
    the device; offloading draws only on the rest.  ``g2a_rate`` is the uplink
    the device transmits on, ``a2g_rate`` the downlink the air node uses to
    reach it.
    """

    samples: float
    sensitive_samples: float
    cycles_per_sample: float
    cpu_rate: float
    g2a_rate: float
    a2g_rate: float

    def __post_init__(self) -> None:
        if self.samples < 0:
            raise LatencyConfigError(f"samples must be >= 0, got {self.samples}")
        if not 0 <= self.sensitive_samples <= self.samples:
            raise LatencyConfigError(
                f"sensitive_samples must lie in [0, samples], got "
                f"{self.sensitive_samples} with samples={self.samples}"
            )
        if self.cycles_per_sample <= 0 or self.cpu_rate <= 0:
            raise LatencyConfigError("compute parameters must be > 0")
        if self.g2a_rate <= 0 or self.a2g_rate <= 0:
            raise LatencyConfigError("link rates must be > 0")

    @property
    def offloadable_samples(self) -> float:
        return self.samples - self.sensitive_samples


@dataclass(frozen=True)
class ClusterState:
    """An air node together with the ground devices it covers."""

    air_samples: float
    air_cycles_per_sample: float
    air_cpu_rate: float
    s2a_rate: float
    a2s_rate: float
    devices: tuple[DeviceState, ...]

    def __post_init__(self) -> None:
        if self.air_samples < 0:
            raise LatencyConfigError(
                f"air_samples must be >= 0, got {self.air_samples}"
            )
        if self.air_cycles_per_sample <= 0 or self.air_cpu_rate <= 0:
            raise LatencyConfigError("air compute parameters must be > 0")
        if self.s2a_rate <= 0 or self.a2s_rate <= 0:
            raise LatencyConfigError("satellite link rates must be > 0")
        object.__setattr__(self, "devices", tuple(self.devices))


@dataclass(frozen=True)
class SaginState:
    """Snapshot of dataset placement and connectivity at the start of a round."""

    space_samples: float
    passes: tuple[SatellitePass, ...]
    clusters: tuple[ClusterState, ...]
    payload: PayloadSizes
    handover_payload: str = HANDOVER_PAYLOAD_FULL

    def __post_init__(self) -> None:
        if self.space_samples < 0:
            raise LatencyConfigError(
                f"space_samples must be >= 0, got {self.space_samples}"
            )
        object.__setattr__(self, "passes", tuple(self.passes))
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.clusters:
            raise LatencyConfigError("state needs at least one cluster")

    def space_job(self, samples: float | None = None) -> SpaceLayerJob:
        """Space-layer job for this round, optionally with an adjusted size."""
        return SpaceLayerJob(
            samples=self.space_samples if samples is None else samples,
            passes=self.passes,
            payload=self.payload,
            handover_payload=self.handover_payload,
        )


@dataclass(frozen=True)
class RoundLatency:
    """Per-layer completion times for one round.

    ``tau_ground[n][k]`` is the time at which device k's model has arrived at
    air node n (local finish plus model upload).  ``tau_air[n]`` is the time
    at which air node n has its own update and every device model, ready to
    aggregate.  ``tau_total`` adds the air-to-satellite model uploads and the
    space-layer delay.
    """

    tau_space: float
    tau_air: tuple
    tau_ground: tuple
    tau_total: float
    finishing_pass_index: int


def compute_time(load: ComputeLoad) -> float:
    """Seconds to process the load; zero samples cost zero seconds."""
    if load.samples == 0:
        return 0.0
    return load.cycles_per_sample * load.samples / load.cpu_rate


def _handover_payload_bits(
    payload: PayloadSizes, total: float, remaining: float, mode: str
) -> float:
    carried = total if mode == HANDOVER_PAYLOAD_FULL else remaining
    return payload.model_bits + payload.sample_bits * carried


def space_layer_latency(job: SpaceLayerJob) -> SpaceLayerResult:
    """Training latency at the space layer with satellite handover.

    The first pass starts computing at round start.  Pass i takes over at
    T_{i-1} plus the handover transfer, and completes the job if its finish
    time beats its own deadline T_i (strictly).  Otherwise it processes what
    its service window allows and hands the rest on.  Deadlines of None mean
    the pass never leaves during the round.

    Returns the completion time, the 1-based index of the finishing pass, and
    the samples absorbed by each pass up to and including that one.  Raises
    SpaceInfeasibleError when the passes run out first.
    """
    if job.samples == 0:
        return SpaceLayerResult(0.0, 1, [])

    omega = 0.0  # samples processed before the current pass
    start = 0.0  # time the current pass takes over
    processed: list = []
    for rank, current in enumerate(job.passes, start=1):
        if rank > 1:
            prev = job.passes[rank - 2]
            if prev.isl_rate_to_next is None:
                raise LatencyConfigError(
                    f"pass {rank - 1} lacks an ISL rate for the handover"
                )
            bits = _handover_payload_bits(
                job.payload, job.samples, job.samples - omega, job.handover_payload
            )
            start = _limit(job.passes[rank - 2]) + transfer_delay(
                bits, prev.isl_rate_to_next
            )
        remaining = job.samples - omega
        tau = start + current.cycles_per_sample * remaining / current.cpu_rate
        deadline = _limit(current)
        if tau < deadline:
            processed.append(remaining)
            return SpaceLayerResult(tau, rank, processed)
        # Pass leaves first: it absorbs what fits in [takeover, deadline].
        window = max(0.0, deadline - start)
        done = window * current.cpu_rate / current.cycles_per_sample
        processed.append(done)
        omega += done
    raise SpaceInfeasibleError(job.samples - omega, len(job.passes))


def _limit(p: SatellitePass) -> float:
    return math.inf if p.t_limit is None else p.t_limit


def model_upload_delay(payload: PayloadSizes, rate: float) -> float:
    """Seconds to push one model copy over a link."""
    return transfer_delay(payload.model_bits, rate)


def air_cluster_completion_no_offload(
    cluster: ClusterState, payload: PayloadSizes
) -> float:
    """Time until an air node holds its own update and all device models.

    The air node trains on its dataset while devices train on theirs and
    upload their models; the cluster is ready at the latest of these.
    """
    air = compute_time(
        ComputeLoad(cluster.air_samples, cluster.air_cycles_per_sample, cluster.air_cpu_rate)
    )
    ready = air
    for dev in cluster.devices:
        local = compute_time(
            ComputeLoad(dev.samples, dev.cycles_per_sample, dev.cpu_rate)
        )
        ready = max(ready, local + model_upload_delay(payload, dev.g2a_rate))
    return ready


def round_latency_no_offload(state: SaginState) -> RoundLatency:
    """Round latency when every node trains exactly what it already holds."""
    zero = _zero_plan_arrays(state)
    return round_latency_with_plan(state, zero)


class _ZeroPlan:
    """Minimal stand-in for an OffloadPlan with no transfers."""

    __slots__ = ("direction", "s2a", "a2s", "a2g", "g2a")

    def __init__(self, direction, s2a, a2s, a2g, g2a):
        self.direction = direction
        self.s2a = s2a
        self.a2s = a2s
        self.a2g = a2g
        self.g2a = g2a


def _zero_plan_arrays(state: SaginState) -> _ZeroPlan:
    n = len(state.clusters)
    return _ZeroPlan(
        direction=CASE_AIR_GROUND_TO_SPACE,
        s2a=np.zeros(n),
        a2s=np.zeros(n),
        a2g=tuple(np.zeros(len(c.devices)) for c in state.clusters),
        g2a=tuple(np.zeros(len(c.devices)) for c in state.clusters),
    )


def _as_float_or_array(values):
    out = np.asarray(values, dtype=float)
    if out.ndim == 0:
        return float(out)
    return out


def case1_air_local_delay(
    air_samples,
    s2a_samples,
    a2g_total,
    cycles_per_sample: float,
    cpu_rate: float,
    s2a_rate: float,
    sample_bits: float,
):
    """Air-node finish time when the satellite pushes samples down.

    While the download is in flight the air node trains on its original
    dataset; afterwards it trains on whatever it received and kept.  When the
    node forwards at least as much to the ground as it received, the download
    fully overlaps and only the shrunken dataset matters.

    Broadcasts over numpy arrays.
    """
    air = np.asarray(air_samples, dtype=float)
    s2a = np.asarray(s2a_samples, dtype=float)
    fwd = np.asarray(a2g_total, dtype=float)
    new_air = air + s2a - fwd
    shrunk = cycles_per_sample * new_air / cpu_rate
    grown = (
        np.maximum(
            cycles_per_sample * air / cpu_rate, sample_bits * s2a / s2a_rate
        )
        + cycles_per_sample * (s2a - fwd) / cpu_rate
    )
    return _as_float_or_array(np.where(new_air <= air, shrunk, grown))


def case1_ground_delay(
    ground_samples,
    a2g_samples,
    upstream_delay,
    cycles_per_sample,
    cpu_rate,
    a2g_rate,
    sample_bits: float,
):
    """Ground finish time when samples arrive via the air node.

    The device trains on its own data in parallel with the relay
    (``upstream_delay`` covers the hop into the air node, zero when the data
    originates there), then trains on the received batch.
    """
    own = np.asarray(ground_samples, dtype=float)
    recv = np.asarray(a2g_samples, dtype=float)
    arrival = np.asarray(upstream_delay, dtype=float) + sample_bits * recv / np.asarray(
        a2g_rate, dtype=float
    )
    own_compute = np.asarray(cycles_per_sample, dtype=float) * own / np.asarray(
        cpu_rate, dtype=float
    )
    extra = np.asarray(cycles_per_sample, dtype=float) * recv / np.asarray(
        cpu_rate, dtype=float
    )
    return _as_float_or_array(np.maximum(own_compute, arrival) + extra)


def case1_air_receive_delay(
    air_samples,
    s2a_samples,
    g2a_samples,
    cycles_per_sample: float,
    cpu_rate: float,
    s2a_rate: float,
    g2a_rates,
    sample_bits: float,
) -> float:
    """Air-node finish time when it absorbs data from satellite and ground.

    Original compute overlaps all incoming transfers; the absorbed samples
    are processed once the last needed transfer lands.
    """
    g2a = np.asarray(g2a_samples, dtype=float)
    inflow = float(np.sum(g2a))
    waits = [
        cycles_per_sample * float(air_samples) / cpu_rate,
        sample_bits * float(s2a_samples) / s2a_rate,
    ]
    if g2a.size:
        waits.append(float(np.max(sample_bits * g2a / np.asarray(g2a_rates, dtype=float))))
    return max(waits) + cycles_per_sample * (float(s2a_samples) + inflow) / cpu_rate


def case2_air_local_delay(
    air_samples: float,
    a2s_samples: float,
    g2a_samples,
    cycles_per_sample: float,
    cpu_rate: float,
    a2s_rate: float,
    g2a_rates,
    sample_bits: float,
) -> float:
    """Air-node readiness when it uploads samples to the satellite.

    The node cannot deliver its model until the upload completes, so the
    transfer time lower-bounds the result even when compute is short.  When
    ground inflow exceeds the upload, the node also trains on the surplus
    after the last device transfer lands.
    """
    g2a = np.asarray(g2a_samples, dtype=float)
    inflow = float(np.sum(g2a))
    upload = sample_bits * a2s_samples / a2s_rate
    new_air = air_samples - a2s_samples + inflow
    if new_air <= air_samples:
        return max(cycles_per_sample * new_air / cpu_rate, upload)
    arrivals = 0.0
    if g2a.size:
        arrivals = float(np.max(sample_bits * g2a / np.asarray(g2a_rates, dtype=float)))
    busy = max(cycles_per_sample * air_samples / cpu_rate, arrivals)
    busy += cycles_per_sample * (inflow - a2s_samples) / cpu_rate
    return max(busy, upload)


def case2_ground_delay(
    ground_samples,
    g2a_samples,
    cycles_per_sample,
    cpu_rate,
    g2a_rate,
    sample_bits: float,
):
    """Ground readiness when the device uploads samples to its air node.

    The device trains on what it keeps while uploading what it sheds, and is
    ready when both finish.  Broadcasts over numpy arrays.
    """
    own = np.asarray(ground_samples, dtype=float)
    sent = np.asarray(g2a_samples, dtype=float)
    keep_compute = (
        np.asarray(cycles_per_sample, dtype=float)
        * (own - sent)
        / np.asarray(cpu_rate, dtype=float)
    )
    upload = sample_bits * sent / np.asarray(g2a_rate, dtype=float)
    return _as_float_or_array(np.maximum(keep_compute, upload))


def case2_air_transmit_delay(
    air_samples: float,
    a2s_samples: float,
    a2g_total: float,
    cycles_per_sample: float,
    cpu_rate: float,
    a2s_rate: float,
    sample_bits: float,
) -> float:
    """Air-node readiness when it sheds data both upward and to the ground."""
    kept = air_samples - a2s_samples - a2g_total
    upload = sample_bits * a2s_samples / a2s_rate
    return max(cycles_per_sample * kept / cpu_rate, upload)


def _cluster_completion(
    cluster: ClusterState,
    payload: PayloadSizes,
    direction: str,
    s2a_n: float,
    a2s_n: float,
    a2g: np.ndarray,
    g2a: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Air-node readiness and per-device model-arrival times under a plan."""
    devs = cluster.devices
    dev_m = np.array([d.cycles_per_sample for d in devs])
    dev_f = np.array([d.cpu_rate for d in devs])
    dev_samples = np.array([d.samples for d in devs])
    dev_g2a_rate = np.array([d.g2a_rate for d in devs])
    dev_a2g_rate = np.array([d.a2g_rate for d in devs])
    q = payload.sample_bits

    a2g = np.asarray(a2g, dtype=float)
    g2a = np.asarray(g2a, dtype=float)
    a2g_total = float(np.sum(a2g))
    g2a_total = float(np.sum(g2a))
    if a2g_total > 0 and g2a_total > 0:
        raise LatencyConfigError(
            "a cluster cannot send and receive ground transfers in one round"
        )

    if direction == CASE_SPACE_TO_AIR_GROUND:
        upstream = q * s2a_n / cluster.s2a_rate
        if g2a_total > 0:
            air_local = case1_air_receive_delay(
                cluster.air_samples, s2a_n, g2a,
                cluster.air_cycles_per_sample, cluster.air_cpu_rate,
                cluster.s2a_rate, dev_g2a_rate, q,
            )
            ground = case2_ground_delay(
                dev_samples, g2a, dev_m, dev_f, dev_g2a_rate, q
            )
        else:
            air_local = case1_air_local_delay(
                cluster.air_samples, s2a_n, a2g_total,
                cluster.air_cycles_per_sample, cluster.air_cpu_rate,
                cluster.s2a_rate, q,
            )
            ground = case1_ground_delay(
                dev_samples, a2g, upstream, dev_m, dev_f, dev_a2g_rate, q
            )
    elif direction == CASE_AIR_GROUND_TO_SPACE:
        if a2g_total > 0:
            air_local = case2_air_transmit_delay(
                cluster.air_samples, a2s_n, a2g_total,
                cluster.air_cycles_per_sample, cluster.air_cpu_rate,
                cluster.a2s_rate, q,
            )
            ground = case1_ground_delay(
                dev_samples, a2g, 0.0, dev_m, dev_f, dev_a2g_rate, q
            )
        else:
            air_local = case2_air_local_delay(
                cluster.air_samples, a2s_n, g2a,
                cluster.air_cycles_per_sample, cluster.air_cpu_rate,
                cluster.a2s_rate, dev_g2a_rate, q,
            )
            ground = case2_ground_delay(
                dev_samples, g2a, dev_m, dev_f, dev_g2a_rate, q
            )
    else:
        raise LatencyConfigError(f"unknown plan direction {direction!r}")

    ground = np.atleast_1d(np.asarray(ground, dtype=float))
    arrivals = ground + payload.model_bits / dev_g2a_rate
    readiness = float(air_local)
    if devs:
        readiness = max(readiness, float(np.max(arrivals)))
    return readiness, arrivals


def round_latency_with_plan(state: SaginState, plan) -> RoundLatency:
    """Round latency after executing an offloading plan.

    ``plan`` needs attributes ``direction``, ``s2a``, ``a2s`` (per-cluster
    sample counts) and ``a2g``, ``g2a`` (per-cluster arrays of per-device
    counts).  A zero plan reproduces the no-offload latency exactly.
    """
    s2a = np.asarray(plan.s2a, dtype=float)
    a2s = np.asarray(plan.a2s, dtype=float)
    n_clusters = len(state.clusters)
    if s2a.shape != (n_clusters,) or a2s.shape != (n_clusters,):
        raise LatencyConfigError(
            f"plan arrays must have one entry per cluster ({n_clusters})"
        )

    new_space = state.space_samples - float(np.sum(s2a)) + float(np.sum(a2s))
    if new_space < -1e-9 * max(1.0, state.space_samples):
        raise LatencyConfigError("plan drains more than the space dataset holds")
    new_space = max(0.0, new_space)

    job = state.space_job(new_space)
    tau_space, finishing_pass, _ = space_layer_latency(job)

    tau_air = []
    tau_ground = []
    tau_total = tau_space
    for idx, cluster in enumerate(state.clusters):
        readiness, arrivals = _cluster_completion(
            cluster,
            state.payload,
            plan.direction,
            float(s2a[idx]),
            float(a2s[idx]),
            plan.a2g[idx],
            plan.g2a[idx],
        )
        tau_air.append(readiness)
        tau_ground.append(tuple(float(a) for a in arrivals))
        tau_total = max(
            tau_total,
            readiness + model_upload_delay(state.payload, cluster.a2s_rate),
        )

    return RoundLatency(
        tau_space=tau_space,
        tau_air=tuple(tau_air),
        tau_ground=tuple(tau_ground),
        tau_total=tau_total,
        finishing_pass_index=finishing_pass,
    )
