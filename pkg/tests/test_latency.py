"""Completion-time formula tests.

Covers:
 Group 1 - Primitives
   1.  Zero samples compute in zero seconds
   2.  Model upload delay is model_bits / rate

 Group 2 - Space layer
   3.  Hand-built 3-pass chain, every term checked: window yields, handover
       delays, takeover instants, and the closed-form finish at 440 s
   4.  Same chain shipping only the unprocessed remainder finishes at
       433.27 s with the per-pass yields shifted accordingly
   5.  Empty job finishes instantly in pass 1
   6.  Single open-ended pass reduces to samples * m / f
   7.  Event-driven clock simulation agrees on 300 random instances,
       including feasibility classification and finishing pass
   8.  Latency is nondecreasing in the sample count
   9.  Latency is nonincreasing in every pass CPU rate
  10.  A chain that runs out of passes raises SpaceInfeasibleError

 Group 3 - Case delays
  11.  Case I: the slowest ground device only gets slower as downlink
       shares grow; the air node only gets faster as it forwards more
  12.  Case I: air receive delay is nondecreasing in every ground inflow
  13.  Case II: device readiness falls then rises in the shed count, with
       the minimum at m Z D / (m Z + q f)
  14.  Case II: air readiness is nondecreasing in ground inflow and never
       beats the upload time

 Group 4 - Round latency
  15.  Zero plan reproduces the no-offload latency exactly on 500 states
  16.  tau_total is the max of the space side and the air sides plus their
       model uploads
  17.  Draining more than the satellite holds is rejected
  18.  Space side of the round is monotone in the post-plan space count
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from sagfed.constellation import SatellitePass
from sagfed.latency import (
    ComputeLoad,
    LatencyConfigError,
    SpaceInfeasibleError,
    SpaceLayerJob,
    case1_air_local_delay,
    case1_air_receive_delay,
    case1_ground_delay,
    case2_air_local_delay,
    case2_ground_delay,
    compute_time,
    model_upload_delay,
    round_latency_no_offload,
    round_latency_with_plan,
    space_layer_latency,
)
from sagfed.linkmodel import PayloadSizes
from sagfed.offload import OffloadPlan, zero_plan

from oracles import (
    SimInfeasible,
    job_from_sim,
    random_sagin_state,
    random_space_instance,
    simulate_space_layer,
)

_PAYLOAD = PayloadSizes(model_bits=1e6, sample_bits=1e3)

# Three-pass reference chain: 2 samples/s for 100 s, then 3 samples/s in a
# 180 s window after a 20 s handover, then 2 samples/s open-ended after a
# 10 s handover.
_THREE_PASSES = (
    SatellitePass(0, 0.0, 100.0, cpu_rate=2e6, cycles_per_sample=1e6,
                  isl_rate_to_next=1e5, t_limit=100.0),
    SatellitePass(1, 100.0, 300.0, cpu_rate=3e6, cycles_per_sample=1e6,
                  isl_rate_to_next=2e5, t_limit=300.0),
    SatellitePass(2, 300.0, 1e9, cpu_rate=2e6, cycles_per_sample=1e6,
                  isl_rate_to_next=None, t_limit=None),
)


# ---------------------------------------------------------------------------
# Group 1 - Primitives


def test_zero_samples_zero_time():
    assert compute_time(ComputeLoad(0.0, 1e6, 1e9)) == 0.0


def test_model_upload_delay():
    assert model_upload_delay(_PAYLOAD, 2e5) == pytest.approx(5.0, rel=1e-12)


# ---------------------------------------------------------------------------
# Group 2 - Space layer


def test_three_pass_chain_term_by_term():
    """1000 samples through the reference chain, every quantity by hand.

    Pass 1 yields T1 * f1/m1 = 100 * 2 = 200. The first handover ships the
    model plus the full dataset, (1e6 + 1e3*1000)/1e5 = 20 s, so pass 2
    takes over at 120 and yields (300 - 120) * 3 = 540. The second handover
    takes (1e6 + 1e3*1000)/2e5 = 10 s, so pass 3 starts at 310 holding
    1000 - 200 - 540 = 260 samples and finishes at 310 + 260/2 = 440.
    """
    job = SpaceLayerJob(samples=1000.0, passes=_THREE_PASSES,
                        payload=_PAYLOAD, handover_payload="full")
    result = space_layer_latency(job)

    yield_1 = 100.0 * 2e6 / 1e6
    assert yield_1 == 200.0
    hand_12 = (1e6 + 1e3 * 1000.0) / 1e5
    assert hand_12 == 20.0
    yield_2 = (300.0 - (100.0 + hand_12)) * 3e6 / 1e6
    assert yield_2 == 540.0
    hand_23 = (1e6 + 1e3 * 1000.0) / 2e5
    assert hand_23 == 10.0
    remainder = 1000.0 - yield_1 - yield_2
    finish = 300.0 + hand_23 + 1e6 * remainder / 2e6
    assert finish == 440.0

    assert result.processed_per_pass == [yield_1, yield_2, remainder], (
        f"per-pass yields {result.processed_per_pass}"
    )
    assert result.finishing_pass == 3
    assert result.tau == finish, f"tau {result.tau} != hand value {finish}"


def test_three_pass_chain_remaining_mode():
    """Shipping only the remainder shrinks both handovers.

    Handover 1 carries 800 samples: 1.8e6 b / 1e5 = 18 s, so pass 2 starts
    at 118 and yields 546. Handover 2 carries 254 samples: 1.254e6 / 2e5 =
    6.27 s, so pass 3 finishes at 306.27 + 127 = 433.27.
    """
    job = SpaceLayerJob(samples=1000.0, passes=_THREE_PASSES,
                        payload=_PAYLOAD, handover_payload="remaining")
    result = space_layer_latency(job)
    assert result.processed_per_pass == [200.0, 546.0, 254.0]
    assert result.tau == pytest.approx(433.27, abs=1e-9)


def test_empty_job():
    job = SpaceLayerJob(samples=0.0, passes=_THREE_PASSES, payload=_PAYLOAD)
    result = space_layer_latency(job)
    assert (result.tau, result.finishing_pass) == (0.0, 1)


def test_single_open_pass():
    """With one never-ending pass the latency is plain compute time."""
    job = SpaceLayerJob(
        samples=500.0,
        passes=(SatellitePass(0, 0.0, 1e9, cpu_rate=1e9,
                              cycles_per_sample=1e6, isl_rate_to_next=None,
                              t_limit=None),),
        payload=_PAYLOAD,
    )
    assert space_layer_latency(job).tau == pytest.approx(0.5, rel=1e-15)


def test_matches_event_simulation():
    """The recursion agrees with an event-driven clock on random chains."""
    rng = np.random.default_rng(42)
    checked = multi = 0
    for i in range(300):
        samples, passes, mb, sb, carry = random_space_instance(rng)
        job = job_from_sim(samples, passes, mb, sb, carry)
        try:
            finish, rank, _ = simulate_space_layer(samples, passes, mb, sb, carry)
        except SimInfeasible:
            with pytest.raises(SpaceInfeasibleError):
                space_layer_latency(job)
            continue
        result = space_layer_latency(job)
        rel = abs(result.tau - finish) / max(abs(finish), 1e-12)
        assert rel <= 1e-9, (
            f"instance {i}: recursion {result.tau!r} vs simulation "
            f"{finish!r}, rel err {rel:.2e}"
        )
        assert result.finishing_pass == rank, (
            f"instance {i}: finishing pass {result.finishing_pass} vs {rank}"
        )
        checked += 1
        multi += rank > 1
    assert multi >= 30, f"only {multi}/{checked} instances used handovers"


def test_latency_monotone_in_samples():
    counts = np.linspace(0.0, 2000.0, 40)
    taus = [
        space_layer_latency(
            SpaceLayerJob(float(n), _THREE_PASSES, _PAYLOAD)
        ).tau
        for n in counts
    ]
    assert np.all(np.diff(taus) >= -1e-12), "latency dropped as samples grew"


def test_latency_monotone_in_cpu():
    """Speeding up any single pass never delays the finish."""
    base = space_layer_latency(
        SpaceLayerJob(1000.0, _THREE_PASSES, _PAYLOAD)
    ).tau
    for idx in range(3):
        faster = list(_THREE_PASSES)
        faster[idx] = replace(faster[idx],
                              cpu_rate=faster[idx].cpu_rate * 1.5)
        tau = space_layer_latency(
            SpaceLayerJob(1000.0, tuple(faster), _PAYLOAD)
        ).tau
        assert tau <= base + 1e-12, (
            f"speeding pass {idx + 1} raised latency {base} -> {tau}"
        )


def test_exhausted_chain_raises():
    """Two short windows cannot absorb the job: infeasible, not silent."""
    passes = (
        SatellitePass(0, 0.0, 10.0, cpu_rate=1e6, cycles_per_sample=1e6,
                      isl_rate_to_next=1e6, t_limit=10.0),
        SatellitePass(1, 10.0, 20.0, cpu_rate=1e6, cycles_per_sample=1e6,
                      isl_rate_to_next=1e6, t_limit=20.0),
    )
    with pytest.raises(SpaceInfeasibleError):
        space_layer_latency(
            SpaceLayerJob(1e5, passes, _PAYLOAD)
        )


# ---------------------------------------------------------------------------
# Group 3 - Case delays


def test_case1_ground_up_air_down_in_forwarding():
    """Forwarding more pulls ground delays up and the air delay down."""
    shares = np.linspace(0.0, 120.0, 25)
    ground = case1_ground_delay(
        ground_samples=200.0, a2g_samples=shares, upstream_delay=1.0,
        cycles_per_sample=1e6, cpu_rate=5e7, a2g_rate=1e6, sample_bits=1e3,
    )
    assert np.all(np.diff(ground) >= -1e-12), "ground delay fell as shares grew"
    air = [
        case1_air_local_delay(
            air_samples=300.0, s2a_samples=150.0, a2g_total=float(total),
            cycles_per_sample=1e6, cpu_rate=1e8, s2a_rate=1e6,
            sample_bits=1e3,
        )
        for total in np.linspace(0.0, 150.0, 25)
    ]
    assert np.all(np.diff(air) <= 1e-12), "air delay rose as forwarding grew"


def test_case1_air_receive_monotone_in_inflow():
    rng = np.random.default_rng(3)
    g2a = rng.uniform(0.0, 50.0, size=4)
    rates = rng.uniform(1e5, 1e7, size=4)
    base = case1_air_receive_delay(
        air_samples=100.0, s2a_samples=80.0, g2a_samples=g2a,
        cycles_per_sample=1e6, cpu_rate=1e8, s2a_rate=1e6,
        g2a_rates=rates, sample_bits=1e3,
    )
    for k in range(4):
        grown = g2a.copy()
        grown[k] += 25.0
        more = case1_air_receive_delay(
            air_samples=100.0, s2a_samples=80.0, g2a_samples=grown,
            cycles_per_sample=1e6, cpu_rate=1e8, s2a_rate=1e6,
            g2a_rates=rates, sample_bits=1e3,
        )
        assert more >= base - 1e-12, f"inflow {k} lowered the receive delay"


def test_case2_ground_unimodal_with_printed_minimum():
    """Keep-compute falls and upload rises; they cross at m Z D/(m Z + q f)."""
    m, f, z, q, d = 1e6, 5e7, 1e6, 1e3, 400.0
    threshold = m * z * d / (m * z + q * f)
    shed = np.linspace(0.0, d, 801)
    delay = case2_ground_delay(
        ground_samples=d, g2a_samples=shed, cycles_per_sample=m,
        cpu_rate=f, g2a_rate=z, sample_bits=q,
    )
    best = shed[int(np.argmin(delay))]
    assert best == pytest.approx(threshold, abs=d / 800.0 + 1e-9), (
        f"grid minimum at {best:.3f}, threshold {threshold:.3f}"
    )
    left = delay[shed <= threshold]
    right = delay[shed >= threshold]
    assert np.all(np.diff(left) <= 1e-9), "not decreasing left of the minimum"
    assert np.all(np.diff(right) >= -1e-9), "not increasing right of it"


def test_case2_air_monotone_and_upload_floor():
    """Air readiness grows with inflow and never undercuts the upload."""
    inflows = np.linspace(0.0, 300.0, 30)
    delays = [
        case2_air_local_delay(
            air_samples=200.0, a2s_samples=150.0, g2a_samples=np.array([x]),
            cycles_per_sample=1e6, cpu_rate=1e8, a2s_rate=1e5,
            g2a_rates=np.array([1e6]), sample_bits=1e3,
        )
        for x in inflows
    ]
    assert np.all(np.diff(delays) >= -1e-12), "air readiness fell with inflow"
    upload = 1e3 * 150.0 / 1e5
    assert min(delays) >= upload - 1e-12, (
        f"readiness {min(delays)} beat the upload floor {upload}"
    )


# ---------------------------------------------------------------------------
# Group 4 - Round latency


def test_zero_plan_identity_on_500_states():
    """Composing the round with an all-zero plan changes nothing at all."""
    rng = np.random.default_rng(2024)
    for i in range(500):
        state = random_sagin_state(rng, infinite_horizon=bool(rng.integers(0, 2)))
        try:
            base = round_latency_no_offload(state)
        except SpaceInfeasibleError:
            continue
        planned = round_latency_with_plan(state, zero_plan(state))
        assert planned.tau_total == base.tau_total, (
            f"state {i}: zero plan moved tau_total "
            f"{base.tau_total!r} -> {planned.tau_total!r}"
        )
        assert planned.tau_space == base.tau_space
        assert planned.tau_air == base.tau_air


def test_round_total_is_layer_max():
    rng = np.random.default_rng(77)
    for i in range(100):
        state = random_sagin_state(rng)
        latency = round_latency_no_offload(state)
        uploads = [
            model_upload_delay(state.payload, c.a2s_rate)
            for c in state.clusters
        ]
        recomposed = max(
            latency.tau_space,
            max(a + u for a, u in zip(latency.tau_air, uploads)),
        )
        assert latency.tau_total == pytest.approx(recomposed, rel=1e-12), (
            f"state {i}: tau_total {latency.tau_total} is not the layer max"
        )
        assert latency.finishing_pass_index >= 1


def test_overdrain_rejected():
    """A plan pulling more down than the satellite holds must not pass."""
    rng = np.random.default_rng(8)
    state = random_sagin_state(rng)
    n = len(state.clusters)
    devices = [len(c.devices) for c in state.clusters]
    plan = OffloadPlan(
        direction="space-to-air-ground",
        s2a=np.full(n, state.space_samples + 10.0),
        a2s=np.zeros(n),
        a2g=tuple(np.zeros(d) for d in devices),
        g2a=tuple(np.zeros(d) for d in devices),
    )
    with pytest.raises((ValueError, LatencyConfigError)):
        round_latency_with_plan(state, plan)


def test_space_side_monotone_in_space_count():
    rng = np.random.default_rng(15)
    state = random_sagin_state(rng)
    taus = [
        space_layer_latency(state.space_job(float(n))).tau
        for n in np.linspace(0.0, 500.0, 26)
    ]
    assert np.all(np.diff(taus) >= -1e-12), "space side fell as data grew"
