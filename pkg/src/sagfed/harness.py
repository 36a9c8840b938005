"""Experiment orchestration: configs, baselines, the round loop, and export.

A run takes one :class:`ExperimentConfig` and produces one
:class:`RoundReport` per round plus the final model.  Each round follows
the same skeleton regardless of scheme: refresh the serving-pass chain
from the constellation at the current simulated clock, let the scheme
plan an offload, apply the plan to the dataset ledger, train every node
in parallel streams from the shared global model, aggregate, and advance
the clock by the round's latency.

Schemes differ only in step two.  The proposed scheme runs the full
optimizer; the five baselines build plans with simpler rules but obey
the same privacy caps and conservation through the shared apply path.

Coverage gaps are real at mid latitudes.  When a round begins inside a
gap and the satellite holds data, the round waits for the next window
and the wait is charged to simulated time; when the satellite is empty
the round simply proceeds without a space layer.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .constellation import (
    GroundSite,
    NoServingSatelliteError,
    OrbitalShell,
    build_walker_star,
    coverage_windows,
    elevation,
    pass_sequence,
    slant_range,
)
from .flcore import (
    DatasetLedger,
    LocalTrainConfig,
    LogisticModel,
    ModelState,
    PartitionSpec,
    SyntheticTask,
    TwoLayerNetModel,
    aggregate,
    evaluate,
    global_loss_and_grad,
    local_sgd,
    make_blobs_task,
    node_rng,
    partition,
    satellite_training_with_handover,
)
from .latency import (
    ClusterState,
    DeviceState,
    RoundLatency,
    SaginState,
    SpaceInfeasibleError,
    SpaceLayerJob,
    round_latency_no_offload,
    round_latency_with_plan,
    space_layer_latency,
)
from .linkmodel import LinkParams, PayloadSizes, a2s_rate, g2a_rate
from .offload import (
    CASE_AIR_GROUND_TO_SPACE,
    CASE_SPACE_TO_AIR_GROUND,
    OffloadPlan,
    apply_plan,
    balance_air_ground_case2,
    optimize_round,
    zero_plan,
)

SCHEME_PROPOSED = "proposed"
SCHEME_NO_OFFLOAD = "no-offload"
SCHEME_AIR_ONLY = "air-only"
SCHEME_SPACE_ONLY = "space-only"
SCHEME_STATIC = "static"
SCHEME_PROPORTIONAL = "proportional"
SCHEMES = (
    SCHEME_PROPOSED,
    SCHEME_NO_OFFLOAD,
    SCHEME_AIR_ONLY,
    SCHEME_SPACE_ONLY,
    SCHEME_STATIC,
    SCHEME_PROPORTIONAL,
)

CSV_COLUMNS = (
    "round",
    "scheme",
    "sim_time_s",
    "accuracy",
    "loss",
    "tau_space",
    "tau_air_max",
    "tau_total",
    "direction",
    "g2a_total",
    "a2s_total",
    "s2a_total",
    "a2g_total",
)


class HarnessConfigError(ValueError):
    """Raised when an experiment configuration is inconsistent."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, with defaults matching the reference setup."""

    # Constellation and site
    satellite_count: int = 80
    plane_count: int = 5
    altitude_m: float = 800e3
    inclination_deg: float = 85.0
    site_latitude_deg: float = 40.0
    site_longitude_deg: float = -86.0
    min_elevation_deg: float = 15.0
    # Node profiles
    device_count: int = 50
    air_node_count: int = 5
    region_size_m: float = 1200.0
    air_altitude_m: float = 20e3
    ground_cpu_hz: float = 1e8
    air_cpu_hz: float = 1e9
    space_cpu_hz_low: float = 1e9
    space_cpu_hz_high: float = 1e10
    cycles_per_sample: float = 3e9
    ground_tx_power_w: float = 0.1
    air_tx_power_w: float = 1.0
    space_tx_power_w: float = 10.0
    isl_rate_bps: float = 3.125e6
    noise_density_w_per_hz: float = 3.98e-21
    # Links
    g2a_bandwidth_hz: float = 1e6
    a2s_bandwidth_hz: float = 1e7
    g2a_pathloss_exponent: float = 3.0
    a2s_pathloss_exponent: float = 2.0
    reference_gain: float = 1e7
    channel_mode: str = "rayleigh-expectation"
    # Task, partition, training
    train_samples: int = 10_000
    test_samples: int = 2_000
    n_classes: int = 10
    feature_dim: int = 32
    class_separation: float = 4.0
    model: str = "two-layer"
    hidden_units: int = 24
    partition_mode: str = "iid"
    shard_count: int = 200
    shards_per_device: int = 4
    alpha: float = 0.8
    local_iterations: int = 5
    learning_rate: float = 0.5
    lr_schedule: str = "constant"
    # Run controls
    scheme: str = SCHEME_PROPOSED
    rounds: int = 30
    seed: int = 0
    target_accuracy: float | None = None
    round_horizon_s: float = 3600.0
    epsilon1: float = 1e-3
    epsilon2: float = 1e-3
    output_dir: str | None = None

    def __post_init__(self) -> None:
        if self.device_count < 1 or self.air_node_count < 1:
            raise HarnessConfigError("need at least one device and one air node")
        if self.device_count % self.air_node_count != 0:
            raise HarnessConfigError(
                "device_count must divide evenly into non-overlapping clusters"
            )
        if self.rounds < 1:
            raise HarnessConfigError("rounds must be >= 1")
        if self.scheme not in SCHEMES:
            raise HarnessConfigError(f"unknown scheme {self.scheme!r}")
        if self.lr_schedule not in ("constant", "harmonic"):
            raise HarnessConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.channel_mode not in ("rayleigh-expectation", "free-space"):
            raise HarnessConfigError(f"unknown channel mode {self.channel_mode!r}")
        if self.model not in ("logistic", "two-layer"):
            raise HarnessConfigError(f"unknown model {self.model!r}")
        if not self.space_cpu_hz_low <= self.space_cpu_hz_high:
            raise HarnessConfigError("space CPU range is inverted")
        if self.partition_mode == "shard-noniid":
            if self.shard_count % self.shards_per_device != 0:
                raise HarnessConfigError("shards must divide evenly across devices")
            if self.shard_count // self.shards_per_device != self.device_count:
                raise HarnessConfigError(
                    "shard layout implies a different device count"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise HarnessConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        data = yaml.safe_load(Path(path).read_text())
        if not isinstance(data, dict):
            raise HarnessConfigError(f"{path} does not contain a config mapping")
        return cls.from_dict(data)


@dataclass(frozen=True)
class RoundReport:
    """One row of a run: what was planned, how long it took, how it learned."""

    round_index: int
    scheme: str
    direction: str
    g2a_total: float
    a2s_total: float
    s2a_total: float
    a2g_total: float
    latency: RoundLatency
    wait_s: float
    sim_time_s: float
    accuracy: float
    loss: float
    grad_norm: float


# --------------------------------------------------------------------------
# Geometry and link construction


def _air_positions(count: int, size: float) -> np.ndarray:
    # Regular grid over the region: deterministic and roughly even coverage.
    cells = math.ceil(math.sqrt(count))
    spots = [
        ((col + 0.5) / cells * size, (row + 0.5) / cells * size)
        for row in range(cells)
        for col in range(cells)
    ]
    return np.array(spots[:count])


def _assign_devices(
    device_xy: np.ndarray, air_xy: np.ndarray, per_cluster: int
) -> list[np.ndarray]:
    """Nearest-air clustering with exact per-cluster capacity.

    Device-air pairs are taken in order of increasing distance, filling
    clusters greedily, which keeps assignments near-nearest while meeting
    the exact capacity the non-overlapping layout requires.
    """
    n_dev, n_air = device_xy.shape[0], air_xy.shape[0]
    dists = np.linalg.norm(device_xy[:, None, :] - air_xy[None, :, :], axis=2)
    order = np.dstack(np.unravel_index(np.argsort(dists, axis=None), dists.shape))[0]
    assigned = np.full(n_dev, -1)
    loads = np.zeros(n_air, dtype=int)
    for dev, air in order:
        if assigned[dev] != -1 or loads[air] >= per_cluster:
            continue
        assigned[dev] = air
        loads[air] += 1
    return [np.flatnonzero(assigned == a) for a in range(n_air)]


@dataclass(frozen=True)
class LinkBudget:
    """Per-run link rates derived from placement and channel settings."""

    g2a: np.ndarray  # per device, uplink to its air node
    a2g: np.ndarray  # per device, downlink from its air node
    clusters: tuple  # device index arrays per air node
    device_xy: np.ndarray
    air_xy: np.ndarray


def build_link_budget(config: ExperimentConfig) -> LinkBudget:
    """Place nodes and evaluate every ground-air link rate once per run."""
    rng = np.random.default_rng((config.seed, 9))
    device_xy = rng.uniform(0, config.region_size_m, (config.device_count, 2))
    air_xy = _air_positions(config.air_node_count, config.region_size_m)
    clusters = _assign_devices(
        device_xy, air_xy, config.device_count // config.air_node_count
    )

    g2a = np.empty(config.device_count)
    a2g = np.empty(config.device_count)
    for air_idx, members in enumerate(clusters):
        for dev in members:
            horizontal = float(
                np.linalg.norm(device_xy[dev] - air_xy[air_idx])
            )
            distance = math.hypot(horizontal, config.air_altitude_m)
            params = LinkParams(
                bandwidth=config.g2a_bandwidth_hz,
                noise_density=config.noise_density_w_per_hz,
                distance=distance,
                reference_gain=config.reference_gain,
                pathloss_exponent=config.g2a_pathloss_exponent,
                channel_mode=config.channel_mode,
            )
            g2a[dev] = g2a_rate(params, config.ground_tx_power_w)
            a2g[dev] = g2a_rate(params, config.air_tx_power_w)
    return LinkBudget(g2a, a2g, tuple(clusters), device_xy, air_xy)


def _space_link_rates(
    config: ExperimentConfig, slant_m: float
) -> tuple[float, float]:
    """Air-to-space and space-to-air rates at the given slant range."""
    params = LinkParams(
        bandwidth=config.a2s_bandwidth_hz,
        noise_density=config.noise_density_w_per_hz,
        distance=slant_m,
        reference_gain=config.reference_gain,
        pathloss_exponent=config.a2s_pathloss_exponent,
        channel_mode=config.channel_mode,
    )
    up = a2s_rate(params, config.air_tx_power_w)
    down = a2s_rate(params, config.space_tx_power_w)
    return up, down


# --------------------------------------------------------------------------
# Pass provisioning


_WINDOW_CACHE: dict[tuple, tuple[list, float]] = {}


def _constellation_key(config: ExperimentConfig) -> tuple:
    return (
        config.satellite_count,
        config.plane_count,
        config.altitude_m,
        config.inclination_deg,
        config.site_latitude_deg,
        config.site_longitude_deg,
        config.min_elevation_deg,
    )


class _PassProvider:
    """Serves coverage windows, growing the scanned horizon on demand."""

    _STEP = 5.0
    _INITIAL_HORIZON = 8 * 3600.0

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.site = GroundSite(
            math.radians(config.site_latitude_deg),
            math.radians(config.site_longitude_deg),
            math.radians(config.min_elevation_deg),
        )
        self.elements = build_walker_star(
            OrbitalShell(
                config.satellite_count,
                config.plane_count,
                config.altitude_m,
                math.radians(config.inclination_deg),
            )
        )
        key = _constellation_key(config)
        if key not in _WINDOW_CACHE:
            windows = coverage_windows(
                self.elements, self.site, self._INITIAL_HORIZON, step=self._STEP
            )
            _WINDOW_CACHE[key] = (windows, self._INITIAL_HORIZON)
        self.windows, self.horizon = _WINDOW_CACHE[key]

    def ensure(self, until: float) -> None:
        # Rescan from zero on growth: stitching chunked scans would split
        # windows at chunk edges, and a fresh scan stays deterministic.
        while self.horizon < until:
            self.horizon *= 2
            self.windows = coverage_windows(
                self.elements, self.site, self.horizon, step=self._STEP
            )
            _WINDOW_CACHE[_constellation_key(self.config)] = (
                self.windows,
                self.horizon,
            )

    def chain(self, round_start: float, cpu_sampler, config: ExperimentConfig):
        """The serving chain for one round, truncated at coverage gaps.

        Returns (passes, wait) where wait is the dead time spent inside a
        gap before the chain could start.
        """
        self.ensure(round_start + config.round_horizon_s)
        wait = 0.0
        start = round_start
        for _ in range(8):  # a handful of gap skips bounds any pathology
            horizon = config.round_horizon_s
            try:
                passes = pass_sequence(
                    self.windows,
                    start,
                    cpu_sampler,
                    config.isl_rate_bps,
                    config.cycles_per_sample,
                    horizon=horizon,
                )
                return tuple(passes), wait
            except NoServingSatelliteError as gap:
                if gap.gap_start > start:
                    # Mid-chain gap: keep the feasible prefix of the chain.
                    passes = pass_sequence(
                        self.windows,
                        start,
                        cpu_sampler,
                        config.isl_rate_bps,
                        config.cycles_per_sample,
                        horizon=gap.gap_start - start - 1.0,
                    )
                    return tuple(passes), wait
                if not math.isfinite(gap.gap_end):
                    self.ensure(self.horizon * 2)
                    continue
                wait += gap.gap_end - start
                start = gap.gap_end + 1e-3
                self.ensure(start + config.round_horizon_s)
        raise NoServingSatelliteError(round_start, math.inf)

    def slant_at(self, t: float) -> float:
        """Slant range to the highest-elevation covering satellite."""
        best, best_elev = None, -math.inf
        for elem in self.elements:
            e = float(elevation(elem, self.site, np.array([t]))[0])
            if e > best_elev:
                best, best_elev = elem, e
        rng = slant_range(best, self.site, t)
        # The air node sits on the line of sight's lower end; shorten the
        # path by its altitude component.
        return max(rng - self.config.air_altitude_m, 1e3)


# --------------------------------------------------------------------------
# State assembly and baseline planners


def _device_counts(ledger: DatasetLedger) -> list[np.ndarray]:
    return [
        np.array(
            [ledger.device_indices(k, j).size for j in range(len(off))], dtype=float
        )
        for k, off in enumerate(ledger.ground_offloadable)
    ]


def _sensitive_counts(ledger: DatasetLedger) -> list[np.ndarray]:
    return [
        np.array([g.size for g in cluster], dtype=float)
        for cluster in ledger.ground_sensitive
    ]


def build_sagin_state(
    config: ExperimentConfig,
    ledger: DatasetLedger,
    budget: LinkBudget,
    passes: tuple,
    payload: PayloadSizes,
    a2s: float,
    s2a: float,
) -> SaginState:
    """Snapshot the physical system for the latency and offload layers."""
    clusters = []
    for k, members in enumerate(budget.clusters):
        devices = tuple(
            DeviceState(
                samples=float(ledger.device_indices(k, j).size),
                sensitive_samples=float(ledger.ground_sensitive[k][j].size),
                cycles_per_sample=config.cycles_per_sample,
                cpu_rate=config.ground_cpu_hz,
                g2a_rate=float(budget.g2a[dev]),
                a2g_rate=float(budget.a2g[dev]),
            )
            for j, dev in enumerate(members)
        )
        clusters.append(
            ClusterState(
                air_samples=float(ledger.air[k].size),
                air_cycles_per_sample=config.cycles_per_sample,
                air_cpu_rate=config.air_cpu_hz,
                s2a_rate=s2a,
                a2s_rate=a2s,
                devices=devices,
            )
        )
    return SaginState(
        space_samples=float(ledger.space.size),
        passes=passes,
        clusters=tuple(clusters),
        payload=payload,
    )


def _send_caps(state: SaginState, payload: PayloadSizes) -> list[np.ndarray]:
    """Per-device upper bounds on ground-to-air offloading.

    The transmit-feasibility cap keeps a device from spending longer
    sending than it saves, and the privacy cap pins sensitive samples.
    """
    caps = []
    for cluster in state.clusters:
        row = []
        for dev in cluster.devices:
            feas = (
                dev.cycles_per_sample * dev.g2a_rate * dev.samples
                / (dev.cycles_per_sample * dev.g2a_rate + payload.sample_bits * dev.cpu_rate)
            )
            row.append(max(0.0, min(feas, dev.samples - dev.sensitive_samples)))
        caps.append(np.array(row))
    return caps


def baseline_plan(
    scheme: str,
    state: SaginState,
    config: ExperimentConfig,
    static_plan: OffloadPlan | None = None,
    round_cpu_mean: float | None = None,
) -> OffloadPlan:
    """Offload plan for one baseline scheme at the current state.

    Every baseline goes through the same plan type and apply path as the
    optimizer, so privacy caps and conservation are enforced identically.
    ``static_plan`` supplies the frozen round-zero plan for the static
    scheme; ``round_cpu_mean`` supplies the satellite CPU estimate the
    proportional scheme splits by.
    """
    n = len(state.clusters)
    eps = (config.epsilon1, config.epsilon2)
    if scheme == SCHEME_NO_OFFLOAD:
        return zero_plan(state, *eps)

    if scheme == SCHEME_AIR_ONLY:
        g2a = []
        for cluster in state.clusters:
            balance = balance_air_ground_case2(
                cluster, 0.0, state.payload, *eps
            )
            g2a.append(np.asarray(balance.g2a, dtype=float))
        return OffloadPlan(
            direction=CASE_AIR_GROUND_TO_SPACE,
            s2a=np.zeros(n),
            a2s=np.zeros(n),
            a2g=tuple(np.zeros(len(c.devices)) for c in state.clusters),
            g2a=tuple(g2a),
            epsilon1=config.epsilon1,
            epsilon2=config.epsilon2,
        )

    if scheme == SCHEME_SPACE_ONLY:
        # Push everything toward the satellite: lift the full air holding,
        # pull the ground maximum; air acts as a store-and-forward stage.
        caps = _send_caps(state, state.payload)
        return OffloadPlan(
            direction=CASE_AIR_GROUND_TO_SPACE,
            s2a=np.zeros(n),
            a2s=np.array([c.air_samples for c in state.clusters]),
            a2g=tuple(np.zeros(len(c.devices)) for c in state.clusters),
            g2a=tuple(caps),
            epsilon1=config.epsilon1,
            epsilon2=config.epsilon2,
        )

    if scheme == SCHEME_STATIC:
        if static_plan is None:
            raise HarnessConfigError("static scheme needs the frozen plan")
        return _cap_plan_to_state(static_plan, state)

    if scheme == SCHEME_PROPORTIONAL:
        return _proportional_plan(state, config, round_cpu_mean)

    raise HarnessConfigError(f"no baseline planner for scheme {scheme!r}")


def _cap_plan_to_state(plan: OffloadPlan, state: SaginState) -> OffloadPlan:
    """Clip frozen plan volumes to what the current state can supply."""
    n = len(state.clusters)
    air = np.array([c.air_samples for c in state.clusters])
    if plan.direction == CASE_SPACE_TO_AIR_GROUND:
        s2a = np.minimum(np.asarray(plan.s2a, dtype=float), state.space_samples)
        # Sequential draws share one satellite pool; scale to its total.
        total = float(s2a.sum())
        if total > state.space_samples > 0:
            s2a = s2a * (state.space_samples / total)
        elif state.space_samples <= 0:
            s2a = np.zeros(n)
        a2g = []
        for k, cluster in enumerate(state.clusters):
            have = air[k] + float(s2a[k])
            row = np.asarray(plan.a2g[k], dtype=float).copy()
            total = float(row.sum())
            if total > have:
                row = row * (0.0 if total <= 0 else have / total)
            a2g.append(row)
        g2a = [
            np.minimum(
                np.asarray(plan.g2a[k], dtype=float),
                np.array(
                    [
                        max(0.0, d.samples - d.sensitive_samples)
                        for d in state.clusters[k].devices
                    ]
                ),
            )
            for k in range(n)
        ]
        return OffloadPlan(
            plan.direction, s2a, np.zeros(n), tuple(a2g), tuple(g2a),
            plan.epsilon1, plan.epsilon2,
        )
    a2s = np.minimum(np.asarray(plan.a2s, dtype=float), air)
    g2a = [
        np.minimum(
            np.asarray(plan.g2a[k], dtype=float),
            np.array(
                [
                    max(0.0, d.samples - d.sensitive_samples)
                    for d in state.clusters[k].devices
                ]
            ),
        )
        for k in range(n)
    ]
    return OffloadPlan(
        plan.direction, np.zeros(n), a2s,
        tuple(np.zeros(len(c.devices)) for c in state.clusters), tuple(g2a),
        plan.epsilon1, plan.epsilon2,
    )


def _proportional_plan(
    state: SaginState, config: ExperimentConfig, round_cpu_mean: float | None
) -> OffloadPlan:
    """Move samples toward counts proportional to node CPU frequency."""
    f_space = round_cpu_mean or 0.5 * (config.space_cpu_hz_low + config.space_cpu_hz_high)
    n = len(state.clusters)
    device_counts = [np.array([d.samples for d in c.devices]) for c in state.clusters]
    air_counts = np.array([c.air_samples for c in state.clusters])
    total = state.space_samples + float(air_counts.sum()) + sum(
        float(c.sum()) for c in device_counts
    )
    f_total = (
        f_space
        + n * config.air_cpu_hz
        + sum(len(c.devices) for c in state.clusters) * config.ground_cpu_hz
    )
    target_space = total * f_space / f_total
    target_air = total * config.air_cpu_hz / f_total
    target_dev = total * config.ground_cpu_hz / f_total

    caps = _send_caps(state, state.payload)
    if state.space_samples > target_space:
        # Satellite surplus flows down, filling air then device deficits.
        surplus = state.space_samples - target_space
        air_deficit = np.maximum(0.0, target_air - air_counts)
        dev_deficit = [np.maximum(0.0, target_dev - c) for c in device_counts]
        want = air_deficit + np.array([float(d.sum()) for d in dev_deficit])
        scale = min(1.0, surplus / want.sum()) if want.sum() > 0 else 0.0
        s2a = want * scale
        a2g = tuple(d * scale for d in dev_deficit)
        return OffloadPlan(
            CASE_SPACE_TO_AIR_GROUND, s2a, np.zeros(n),
            a2g, tuple(np.zeros_like(c) for c in device_counts),
            config.epsilon1, config.epsilon2,
        )
    g2a = tuple(
        np.minimum(np.maximum(0.0, device_counts[k] - target_dev), caps[k])
        for k in range(n)
    )
    a2s = np.minimum(np.maximum(0.0, air_counts - target_air), air_counts)
    return OffloadPlan(
        CASE_AIR_GROUND_TO_SPACE, np.zeros(n), a2s,
        tuple(np.zeros_like(c) for c in device_counts), g2a,
        config.epsilon1, config.epsilon2,
    )


def plan_totals(plan: OffloadPlan) -> dict[str, float]:
    return {
        "g2a_total": float(sum(np.sum(g) for g in plan.g2a)),
        "a2s_total": float(np.sum(plan.a2s)),
        "s2a_total": float(np.sum(plan.s2a)),
        "a2g_total": float(sum(np.sum(a) for a in plan.a2g)),
    }


# --------------------------------------------------------------------------
# The round loop


def _build_model(config: ExperimentConfig):
    if config.model == "logistic":
        return LogisticModel(config.feature_dim, config.n_classes)
    return TwoLayerNetModel(config.feature_dim, config.hidden_units, config.n_classes)


def _initial_state(config: ExperimentConfig, model) -> ModelState:
    return ModelState(
        model.init_parameters(np.random.default_rng((config.seed, 6))), 0
    )


def _drain_plan(state: SaginState, config: ExperimentConfig) -> OffloadPlan:
    """Send the whole satellite holding down, split evenly across clusters."""
    n = len(state.clusters)
    s2a = np.full(n, state.space_samples / n)
    return OffloadPlan(
        CASE_SPACE_TO_AIR_GROUND, s2a, np.zeros(n),
        tuple(np.zeros(len(c.devices)) for c in state.clusters),
        tuple(np.zeros(len(c.devices)) for c in state.clusters),
        config.epsilon1, config.epsilon2,
    )


def _plan_and_latency(
    scheme: str,
    state: SaginState,
    config: ExperimentConfig,
    static_plan: OffloadPlan | None,
    round_cpu_mean: float | None,
) -> tuple[OffloadPlan, RoundLatency]:
    if scheme == SCHEME_PROPOSED or (
        scheme == SCHEME_STATIC and static_plan is None
    ):
        # The static scheme's frozen plan is the genuine round-zero
        # optimizer output, so both schemes share this code path.
        result = optimize_round(state, config.epsilon1, config.epsilon2)
        return result.plan, result.latency
    if scheme == SCHEME_NO_OFFLOAD:
        return zero_plan(state, config.epsilon1, config.epsilon2), (
            round_latency_no_offload(state)
        )
    plan = baseline_plan(scheme, state, config, static_plan, round_cpu_mean)
    attempts = [plan]
    # A baseline plan can overfill the space layer relative to the passes
    # at hand; retreat to lighter plans rather than abort the run.
    scaled = plan
    for _ in range(3):
        scaled = OffloadPlan(
            scaled.direction,
            np.asarray(scaled.s2a) * 0.5,
            np.asarray(scaled.a2s) * 0.5,
            tuple(np.asarray(a) * 0.5 for a in scaled.a2g),
            tuple(np.asarray(g) * 0.5 for g in scaled.g2a),
            scaled.epsilon1,
            scaled.epsilon2,
        )
        attempts.append(scaled)
    attempts.append(zero_plan(state, config.epsilon1, config.epsilon2))
    attempts.append(_drain_plan(state, config))
    last_error: Exception | None = None
    for candidate in attempts:
        try:
            return candidate, round_latency_with_plan(state, candidate)
        except SpaceInfeasibleError as err:
            last_error = err
    raise last_error


def _space_segments(state_after_plan_samples, passes, payload):
    if state_after_plan_samples <= 0 or not passes:
        return None
    job = SpaceLayerJob(
        samples=float(state_after_plan_samples), passes=tuple(passes), payload=payload
    )
    return space_layer_latency(job).processed_per_pass


def run_experiment(
    config: ExperimentConfig,
) -> tuple[list[RoundReport], ModelState]:
    """Execute one full run and return its per-round reports and model.

    Deterministic: every random draw comes from a stream named by the
    config seed, the round, and a purpose tag, so identical configs give
    bit-identical reports.
    """
    task = make_blobs_task(
        n_train=config.train_samples,
        n_test=config.test_samples,
        n_classes=config.n_classes,
        feature_dim=config.feature_dim,
        separation=config.class_separation,
        seed=config.seed,
    )
    spec = PartitionSpec(
        mode=config.partition_mode,
        shard_count=config.shard_count,
        shards_per_device=config.shards_per_device,
        alpha=config.alpha,
        seed=config.seed,
    )
    per_cluster = config.device_count // config.air_node_count
    ledger = partition(task, spec, cluster_sizes=[per_cluster] * config.air_node_count)

    budget = build_link_budget(config)
    provider = _PassProvider(config)
    model = _build_model(config)
    payload = PayloadSizes(
        model_bits=32.0 * model.parameter_count,
        sample_bits=32.0 * config.feature_dim + 8.0,
    )
    state = _initial_state(config, model)

    probe = np.random.default_rng((config.seed, 5)).choice(
        config.train_samples, size=min(2048, config.train_samples), replace=False
    )

    reports: list[RoundReport] = []
    static_plan: OffloadPlan | None = None
    clock = 0.0

    for r in range(config.rounds):
        cpu_rng = np.random.default_rng((config.seed, r, 3))
        drawn: dict[int, float] = {}

        def cpu_sampler(pass_index: int) -> float:
            if pass_index not in drawn:
                drawn[pass_index] = float(
                    cpu_rng.uniform(config.space_cpu_hz_low, config.space_cpu_hz_high)
                )
            return drawn[pass_index]

        try:
            passes, wait = provider.chain(clock, cpu_sampler, config)
        except NoServingSatelliteError:
            passes, wait = (), 0.0
        if not passes and ledger.space.size > 0:
            raise NoServingSatelliteError(clock, math.inf)

        if passes:
            mid = 0.5 * (passes[0].t_enter + min(passes[0].t_exit, clock + 600.0))
            up, down = _space_link_rates(config, provider.slant_at(max(mid, clock)))
        else:
            up, down = _space_link_rates(config, config.altitude_m)

        sagin = build_sagin_state(
            config, ledger, budget, passes, payload, a2s=up, s2a=down
        )
        round_cpu_mean = (
            float(np.mean([cpu_sampler(i) for i in range(len(passes))]))
            if passes
            else None
        )

        plan, lat = _plan_and_latency(
            config.scheme, sagin, config, static_plan, round_cpu_mean
        )
        if config.scheme == SCHEME_STATIC and static_plan is None:
            static_plan = plan

        ledger = apply_plan(ledger, plan, np.random.default_rng((config.seed, r, 4)))

        eta = (
            config.learning_rate
            if config.lr_schedule == "constant"
            else config.learning_rate / (r + 1)
        )
        train_cfg = LocalTrainConfig(config.local_iterations, eta)

        node_states: list[ModelState] = []
        segments = _space_segments(ledger.space.size, passes, payload)
        space_state, _ = satellite_training_with_handover(
            model,
            state,
            task.train_features[ledger.space],
            task.train_labels[ledger.space],
            train_cfg,
            node_rng(config.seed, r, "space", 0),
            processed_per_pass=segments,
        )
        node_states.append(space_state)
        for n_idx, pool in enumerate(ledger.air):
            node_states.append(
                local_sgd(
                    model,
                    state,
                    task.train_features[pool],
                    task.train_labels[pool],
                    train_cfg,
                    node_rng(config.seed, r, "air", n_idx),
                )
            )
        dev_flat = 0
        for k in range(ledger.cluster_count):
            for j in range(len(ledger.ground_offloadable[k])):
                pool = ledger.device_indices(k, j)
                node_states.append(
                    local_sgd(
                        model,
                        state,
                        task.train_features[pool],
                        task.train_labels[pool],
                        train_cfg,
                        node_rng(config.seed, r, "ground", dev_flat),
                    )
                )
                dev_flat += 1

        state = aggregate(node_states, ledger.weights())

        accuracy, loss = evaluate(
            model, state.parameters, task.test_features, task.test_labels
        )
        _, grad = global_loss_and_grad(
            model, state.parameters, task.train_features[probe], task.train_labels[probe]
        )
        clock += wait + lat.tau_total
        totals = plan_totals(plan)
        reports.append(
            RoundReport(
                round_index=r,
                scheme=config.scheme,
                direction=plan.direction,
                latency=lat,
                wait_s=wait,
                sim_time_s=clock,
                accuracy=accuracy,
                loss=loss,
                grad_norm=float(np.linalg.norm(grad)),
                **totals,
            )
        )
        if (
            config.target_accuracy is not None
            and accuracy >= config.target_accuracy
        ):
            break
    return reports, state


def time_to_target(reports: Sequence[RoundReport], target: float) -> float:
    """Simulated seconds until test accuracy first reaches the target."""
    for report in reports:
        if report.accuracy >= target:
            return report.sim_time_s
    return math.inf


def layer_shares(ledger: DatasetLedger) -> dict[str, float]:
    """Fraction of all samples resident per layer."""
    total = ledger.total_samples
    space = ledger.space.size / total
    air = sum(a.size for a in ledger.air) / total
    return {"space": space, "air": air, "ground": 1.0 - space - air}


def final_layer_shares(config: ExperimentConfig) -> dict[str, float]:
    """Run the config and report where the samples ended up."""
    reports, _ = run_experiment(config)
    ledger = replay_ledger(config, len(reports))
    return layer_shares(ledger)


def replay_ledger(config: ExperimentConfig, rounds: int) -> DatasetLedger:
    """Rebuild the dataset ledger after the first ``rounds`` rounds.

    Runs the same deterministic loop without training, which is cheap and
    lets tests inspect residency without touching run_experiment's
    internals.
    """
    sub = replace(config, rounds=rounds)
    task = make_blobs_task(
        n_train=sub.train_samples,
        n_test=sub.test_samples,
        n_classes=sub.n_classes,
        feature_dim=sub.feature_dim,
        separation=sub.class_separation,
        seed=sub.seed,
    )
    spec = PartitionSpec(
        mode=sub.partition_mode,
        shard_count=sub.shard_count,
        shards_per_device=sub.shards_per_device,
        alpha=sub.alpha,
        seed=sub.seed,
    )
    per_cluster = sub.device_count // sub.air_node_count
    ledger = partition(task, spec, cluster_sizes=[per_cluster] * sub.air_node_count)
    budget = build_link_budget(sub)
    provider = _PassProvider(sub)
    payload = PayloadSizes(
        model_bits=32.0 * _build_model(sub).parameter_count,
        sample_bits=32.0 * sub.feature_dim + 8.0,
    )
    static_plan = None
    clock = 0.0
    for r in range(rounds):
        cpu_rng = np.random.default_rng((sub.seed, r, 3))
        drawn: dict[int, float] = {}

        def cpu_sampler(pass_index: int) -> float:
            if pass_index not in drawn:
                drawn[pass_index] = float(
                    cpu_rng.uniform(sub.space_cpu_hz_low, sub.space_cpu_hz_high)
                )
            return drawn[pass_index]

        try:
            passes, wait = provider.chain(clock, cpu_sampler, sub)
        except NoServingSatelliteError:
            passes, wait = (), 0.0
        if passes:
            mid = 0.5 * (passes[0].t_enter + min(passes[0].t_exit, clock + 600.0))
            up, down = _space_link_rates(sub, provider.slant_at(max(mid, clock)))
        else:
            up, down = _space_link_rates(sub, sub.altitude_m)
        sagin = build_sagin_state(sub, ledger, budget, passes, payload, up, down)
        round_cpu_mean = (
            float(np.mean([cpu_sampler(i) for i in range(len(passes))]))
            if passes
            else None
        )
        plan, lat = _plan_and_latency(sub.scheme, sagin, sub, static_plan, round_cpu_mean)
        if sub.scheme == SCHEME_STATIC and static_plan is None:
            static_plan = plan
        ledger = apply_plan(ledger, plan, np.random.default_rng((sub.seed, r, 4)))
        clock += wait + lat.tau_total
    return ledger


# --------------------------------------------------------------------------
# Export


def export_metrics(
    reports: Sequence[RoundReport],
    path: str | Path,
    config: ExperimentConfig | None = None,
) -> list[Path]:
    """Write the per-round CSV and the run manifest; returns written paths.

    Output is byte-stable: float fields use repr (shortest round-trip
    form) and the manifest is canonical JSON, so identical runs produce
    identical files.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(
                [
                    r.round_index,
                    r.scheme,
                    repr(r.sim_time_s),
                    repr(r.accuracy),
                    repr(r.loss),
                    repr(r.latency.tau_space),
                    repr(max(r.latency.tau_air) if r.latency.tau_air else 0.0),
                    repr(r.latency.tau_total),
                    r.direction,
                    repr(r.g2a_total),
                    repr(r.a2s_total),
                    repr(r.s2a_total),
                    repr(r.a2g_total),
                ]
            )
    manifest_path = out / "manifest.json"
    config_dict = config.to_dict() if config is not None else None
    blob = json.dumps(config_dict, sort_keys=True).encode()
    manifest = {
        "config": config_dict,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": config.seed if config is not None else None,
        "rows": len(reports),
        "versions": {"sagfed": __version__, "numpy": np.__version__},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [csv_path, manifest_path]


def read_metrics(path: str | Path) -> list[dict]:
    """Parse an exported CSV back into typed per-round rows."""
    rows = []
    with Path(path).open(newline="") as fh:
        for record in csv.DictReader(fh):
            parsed: dict = {}
            for key, value in record.items():
                if key in ("scheme", "direction"):
                    parsed[key] = value
                elif key == "round":
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value)
            rows.append(parsed)
    return rows
