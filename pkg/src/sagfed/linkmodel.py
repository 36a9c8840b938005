"""Communication rates and transfer delays for every SAGIN link.

Three link families appear in the model:

- inter-satellite links (ISL), Shannon rate over a free-space path loss,
- ground-to-air / air-to-ground (G2A, A2G), small-scale Rayleigh fading
  around a distance power law,
- air-to-satellite / satellite-to-air (A2S, S2A), same fading model with
  slant-range geometry.

The fading average E[b log2(1 + snr * |g|^2)] is evaluated deterministically
by 64-node Gauss-Legendre quadrature over the exponential density of |g|^2
(after the substitution u = ln(1 + snr * x), which keeps the rule at machine
precision from snr ~ 1e-6 up to ~1e8), so a latency is a pure function of
the plan rather than of a fading draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RAYLEIGH_QUAD_NODES = 64
_QUAD_X, _QUAD_W = np.polynomial.legendre.leggauss(RAYLEIGH_QUAD_NODES)
_QUAD_CUTOFF = 45.0  # exponential tail truncation, exp(-45) ~ 3e-20

MODE_RAYLEIGH = "rayleigh-expectation"
MODE_FREE_SPACE = "free-space"


class LinkConfigError(ValueError):
    """Raised when link parameters violate their invariants."""


class InfeasibleLinkError(RuntimeError):
    """Raised when a transfer is requested over a zero-rate link."""


@dataclass(frozen=True)
class LinkParams:
    """Physical parameters of one link.

    Attributes:
        bandwidth: Channel bandwidth, Hz (B for ISL, b for device links).
        noise_density: One-sided noise power spectral density N0, W/Hz.
        distance: Transmitter-receiver separation, meters.
        tx_gain: Transmit antenna gain, dimensionless (ISL only).
        rx_gain: Receive antenna gain, dimensionless (ISL only).
        reference_gain: Channel amplitude gain at 1 m, dimensionless.
        pathloss_exponent: Amplitude decay exponent of the fading channel.
        free_space_pathloss: Free-space path loss C of the ISL budget.
        channel_mode: MODE_RAYLEIGH or MODE_FREE_SPACE for device links.
    """

    bandwidth: float
    noise_density: float
    distance: float
    tx_gain: float = 1.0
    rx_gain: float = 1.0
    reference_gain: float = 1.0
    pathloss_exponent: float = 3.0
    free_space_pathloss: float = 1.0
    channel_mode: str = MODE_RAYLEIGH

    def __post_init__(self):
        positive = (self.bandwidth, self.noise_density, self.distance,
                    self.tx_gain, self.rx_gain, self.reference_gain,
                    self.free_space_pathloss)
        if any(v <= 0 for v in positive):
            raise LinkConfigError("all link parameters must be positive")
        if self.pathloss_exponent < 2.0:
            raise LinkConfigError("pathloss exponent below free-space value")
        if self.channel_mode not in (MODE_RAYLEIGH, MODE_FREE_SPACE):
            raise LinkConfigError(f"unknown channel mode {self.channel_mode}")


@dataclass(frozen=True)
class PayloadSizes:
    """Bit sizes moved by the protocol."""

    model_bits: float        # Q(w), bits per model upload
    sample_bits: float       # q, bits per training sample

    def __post_init__(self):
        if self.model_bits <= 0 or self.sample_bits <= 0:
            raise LinkConfigError("payload sizes must be positive")


def rayleigh_expected_log2(mean_snr: float) -> float:
    """E[log2(1 + mean_snr * X)] for X ~ Exp(1), by fixed-node quadrature.

    The integrand is rewritten with u = ln(1 + snr * x) and integrated by
    the module's 64-node Gauss-Legendre rule over [0, ln(1 + snr * cutoff)].
    """
    if mean_snr <= 0.0:
        return 0.0
    u_max = np.log1p(mean_snr * _QUAD_CUTOFF)
    u = 0.5 * u_max * (_QUAD_X + 1.0)
    w = 0.5 * u_max * _QUAD_W
    x = np.expm1(u) / mean_snr
    integrand = u * np.exp(u - x) / mean_snr
    return float(np.sum(w * integrand) / np.log(2.0))


def isl_rate(params: LinkParams, tx_power: float) -> float:
    """Shannon rate of the inter-satellite link, bits/second.

    Z = B * log2(1 + p * A_tx * A_rx / (C * N0)), with the SNR argument
    exactly as the budget is written (no bandwidth factor inside).
    """
    if tx_power < 0:
        raise LinkConfigError("negative transmit power")
    snr = (tx_power * params.tx_gain * params.rx_gain
           / (params.free_space_pathloss * params.noise_density))
    return params.bandwidth * float(np.log2(1.0 + snr))


def _device_link_rate(params: LinkParams, tx_power: float) -> float:
    if tx_power < 0:
        raise LinkConfigError("negative transmit power")
    if tx_power == 0.0:
        return 0.0
    b = params.bandwidth
    if params.channel_mode == MODE_FREE_SPACE:
        # h = beta0 / d^2, no fading
        gain = params.reference_gain / params.distance**2
        snr = tx_power * gain**2 / (b * params.noise_density)
        return b * float(np.log2(1.0 + snr))
    amp = params.reference_gain / params.distance**params.pathloss_exponent
    mean_snr = tx_power * amp**2 / (b * params.noise_density)
    return b * rayleigh_expected_log2(mean_snr)


def g2a_rate(params: LinkParams, tx_power: float) -> float:
    """Ground-to-air (or air-to-ground) rate, bits/second.

    Rayleigh mode returns b * E[log2(1 + snr * |g|^2)] with the mean SNR
    p * (beta0 / d^gamma)^2 / (b * N0); free-space mode drops the fading
    and uses h = beta0 / d^2.
    """
    return _device_link_rate(params, tx_power)


def a2s_rate(params: LinkParams, tx_power: float) -> float:
    """Air-to-satellite (or satellite-to-air) rate; same channel family as
    g2a_rate evaluated at slant-range geometry."""
    return _device_link_rate(params, tx_power)


def transfer_delay(bits: float, rate: float) -> float:
    """Seconds to move `bits` over a link of `rate` bits/second.

    An empty transfer costs nothing whatever the rate; a nonempty transfer
    over a dead link is infeasible.
    """
    if bits < 0:
        raise LinkConfigError("negative payload")
    if bits == 0.0:
        return 0.0
    if rate <= 0.0:
        raise InfeasibleLinkError(f"transfer of {bits:.0f} bits over a "
                                  f"{rate:.3g} b/s link")
    return bits / rate
