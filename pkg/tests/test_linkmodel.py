"""Link-rate and transfer-delay tests.

Covers:
 Group 1 - ISL rate
   1.  Zero power gives zero rate
   2.  Unit SNR argument at 1 MHz bandwidth gives exactly 1 Mb/s
   3.  Rate is strictly increasing in power and in bandwidth

 Group 2 - Device links (G2A / A2S)
   4.  Zero power gives zero rate in both channel modes
   5.  Free-space mode at SNR 3 and 1 MHz gives exactly 2 Mb/s
   6.  Rayleigh quadrature matches the exponential-integral closed form
   7.  Rayleigh quadrature sits within sampling error of a frozen
       10^7-draw Monte-Carlo value at mean SNR 3
   8.  Fading average never beats the free-space rate at equal mean SNR
       (Jensen, 20-point SNR grid)
   9.  Rates are monotone nondecreasing in power and bandwidth
  10.  a2s_rate and g2a_rate agree on identical parameters

 Group 3 - Transfer delay
  11.  Zero bits cost zero seconds at any rate
  12.  3.125 Mb over 3.125 Mb/s takes exactly 1 s
  13.  Handover payload: model 1e6 b plus 1e3 samples of 6.4e3 b over the
       default ISL is 2.368 s
  14.  Delay is additive in bits at fixed rate
  15.  Nonempty transfer over a dead link raises; negative bits raise

 Group 4 - Validation
  16.  Nonpositive physical parameters are rejected
  17.  Pathloss exponent below 2 is rejected
  18.  Unknown channel mode is rejected; payload sizes must be positive
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from sagfed.linkmodel import (
    MODE_FREE_SPACE,
    MODE_RAYLEIGH,
    InfeasibleLinkError,
    LinkConfigError,
    LinkParams,
    PayloadSizes,
    a2s_rate,
    g2a_rate,
    isl_rate,
    rayleigh_expected_log2,
    transfer_delay,
)

from oracles import rayleigh_log2_closed_form

# E[log2(1 + 3 g)], g ~ Exp(1): mean over 1e7 draws of
# numpy.random.default_rng(314159).exponential(), frozen before the build.
_MC_MEAN_SNR3 = 1.668520121
_MC_TOL = 1.5e-3  # about four standard errors of that sample mean

# Same expectation through exp(1/3) E1(1/3) / ln 2, frozen from scipy.
_CLOSED_SNR3 = 1.668918332


def _device_params(mode: str, distance: float = 1.0,
                   bandwidth: float = 1e6) -> LinkParams:
    """Unit-gain link at 1 m so mean SNR = power / (bandwidth * N0)."""
    return LinkParams(
        bandwidth=bandwidth,
        noise_density=1e-6,
        distance=distance,
        reference_gain=1.0,
        pathloss_exponent=2.0,
        channel_mode=mode,
    )


# ---------------------------------------------------------------------------
# Group 1 - ISL rate


def test_isl_zero_power():
    """log2(1 + 0) = 0, whatever the budget."""
    params = LinkParams(bandwidth=1e7, noise_density=1e-9, distance=1e6,
                        tx_gain=10.0, rx_gain=10.0, free_space_pathloss=1e3)
    assert isl_rate(params, 0.0) == 0.0


def test_isl_unit_snr():
    """p A_tx A_rx / (C N0) = 1 at B = 1 MHz gives exactly 1 Mb/s."""
    params = LinkParams(bandwidth=1e6, noise_density=2.0, distance=1e6,
                        tx_gain=4.0, rx_gain=1.0, free_space_pathloss=10.0)
    rate = isl_rate(params, 5.0)  # snr = 5*4*1 / (10*2) = 1
    assert rate == pytest.approx(1e6, rel=1e-12), f"rate {rate}"


def test_isl_monotone_in_power_and_bandwidth():
    """More power or more bandwidth never slows the ISL down."""
    params = LinkParams(bandwidth=1e7, noise_density=1e-9, distance=1e6,
                        free_space_pathloss=1e3)
    powers = np.linspace(0.0, 50.0, 21)
    rates = [isl_rate(params, float(p)) for p in powers]
    assert all(b > a for a, b in zip(rates, rates[1:])), "not increasing in p"
    import dataclasses
    wide = dataclasses.replace(params, bandwidth=2e7)
    assert isl_rate(wide, 10.0) > isl_rate(params, 10.0), "not increasing in B"


# ---------------------------------------------------------------------------
# Group 2 - Device links


def test_device_zero_power_both_modes():
    """No transmit power moves no bits, fading or not."""
    for mode in (MODE_RAYLEIGH, MODE_FREE_SPACE):
        assert g2a_rate(_device_params(mode), 0.0) == 0.0
        assert a2s_rate(_device_params(mode), 0.0) == 0.0


def test_free_space_snr3():
    """SNR 3 at 1 MHz: b log2(4) = 2 Mb/s exactly."""
    params = _device_params(MODE_FREE_SPACE)
    rate = g2a_rate(params, 3.0)  # snr = 3 * 1 / (1e6 * 1e-6) = 3
    assert rate == pytest.approx(2e6, rel=1e-12), f"rate {rate}"


def test_rayleigh_matches_exponential_integral():
    """Quadrature equals exp(1/s) E1(1/s) / ln 2 over eight decades."""
    for snr in np.logspace(-2, 4, 25):
        quad = rayleigh_expected_log2(float(snr))
        closed = rayleigh_log2_closed_form(float(snr))
        rel = abs(quad - closed) / max(closed, 1e-300)
        assert rel < 1e-9, f"snr {snr:.3g}: quadrature off by {rel:.2e}"


def test_rayleigh_matches_frozen_monte_carlo():
    """The quadrature lands inside the frozen 1e7-draw MC confidence band."""
    value = rayleigh_expected_log2(3.0)
    assert value == pytest.approx(_CLOSED_SNR3, abs=1e-9), f"value {value!r}"
    assert abs(value - _MC_MEAN_SNR3) < _MC_TOL, (
        f"quadrature {value:.9f} vs Monte-Carlo {_MC_MEAN_SNR3:.9f} differ "
        f"by {abs(value - _MC_MEAN_SNR3):.2e}, outside the sampling band"
    )


def test_fading_never_beats_free_space():
    """E[log(1+sX)] <= log(1+s) for unit-mean X, on a 20-point grid."""
    for snr in np.logspace(-2, 3, 20):
        power = float(snr)  # mean SNR = power with the unit-gain setup
        fading = g2a_rate(_device_params(MODE_RAYLEIGH), power)
        direct = g2a_rate(_device_params(MODE_FREE_SPACE), power)
        assert fading <= direct + 1e-9, (
            f"snr {snr:.3g}: fading rate {fading:.6g} exceeds free-space "
            f"{direct:.6g}"
        )


def test_device_rate_monotone():
    """Stepping up power or bandwidth never lowers a device rate."""
    for mode in (MODE_RAYLEIGH, MODE_FREE_SPACE):
        powers = np.linspace(0.0, 20.0, 15)
        rates = [g2a_rate(_device_params(mode), float(p)) for p in powers]
        diffs = np.diff(rates)
        assert np.all(diffs >= -1e-12), f"{mode}: rate decreased {diffs.min()}"
        narrow = g2a_rate(_device_params(mode, bandwidth=1e6), 5.0)
        wide = g2a_rate(_device_params(mode, bandwidth=4e6), 5.0)
        assert wide >= narrow, f"{mode}: bandwidth increase lowered the rate"


def test_a2s_equals_g2a_on_same_params():
    """The two device-link wrappers share one channel model."""
    params = _device_params(MODE_RAYLEIGH, distance=3.0)
    assert a2s_rate(params, 7.0) == g2a_rate(params, 7.0)


# ---------------------------------------------------------------------------
# Group 3 - Transfer delay


def test_zero_bits_zero_delay():
    assert transfer_delay(0.0, 1e6) == 0.0
    assert transfer_delay(0.0, 0.0) == 0.0, "empty transfer needs no link"


def test_reference_isl_second():
    """3.125 Mb over the 3.125 Mb/s reference ISL is one second."""
    assert transfer_delay(3.125e6, 3.125e6) == pytest.approx(1.0, rel=1e-15)


def test_handover_payload_delay():
    """Model of 1e6 b plus 1e3 samples at 6.4e3 b each: 7.4e6 b, 2.368 s."""
    payload = PayloadSizes(model_bits=1e6, sample_bits=6.4e3)
    bits = payload.model_bits + payload.sample_bits * 1e3
    assert transfer_delay(bits, 3.125e6) == pytest.approx(2.368, rel=1e-12)


def test_delay_additive_in_bits():
    """tau(a + b) = tau(a) + tau(b) at fixed rate."""
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = rng.uniform(0, 1e8, size=2)
        rate = rng.uniform(1e3, 1e9)
        lhs = transfer_delay(a + b, rate)
        rhs = transfer_delay(a, rate) + transfer_delay(b, rate)
        assert lhs == pytest.approx(rhs, rel=1e-12), f"a={a} b={b} rate={rate}"


def test_dead_link_and_negative_bits():
    with pytest.raises(InfeasibleLinkError):
        transfer_delay(1.0, 0.0)
    with pytest.raises(LinkConfigError):
        transfer_delay(-1.0, 1e6)


# ---------------------------------------------------------------------------
# Group 4 - Validation


def test_nonpositive_parameters_rejected():
    with pytest.raises(LinkConfigError):
        LinkParams(bandwidth=0.0, noise_density=1e-9, distance=1.0)
    with pytest.raises(LinkConfigError):
        LinkParams(bandwidth=1e6, noise_density=-1.0, distance=1.0)
    with pytest.raises(LinkConfigError):
        isl_rate(LinkParams(bandwidth=1e6, noise_density=1e-9, distance=1.0),
                 tx_power=-0.1)


def test_subfreespace_pathloss_rejected():
    with pytest.raises(LinkConfigError):
        LinkParams(bandwidth=1e6, noise_density=1e-9, distance=1.0,
                   pathloss_exponent=1.5)


def test_unknown_mode_and_bad_payload_rejected():
    with pytest.raises(LinkConfigError):
        LinkParams(bandwidth=1e6, noise_density=1e-9, distance=1.0,
                   channel_mode="awgn")
    with pytest.raises(LinkConfigError):
        PayloadSizes(model_bits=0.0, sample_bits=100.0)
    with pytest.raises(LinkConfigError):
        PayloadSizes(model_bits=1e6, sample_bits=-5.0)
