"""Walker-Star constellation geometry and coverage-window extraction.

Builds a polar-style Walker constellation (planes spread over 180 degrees of
right ascension), propagates each satellite on a circular two-body orbit over
a rotating spherical Earth, extracts the intervals during which a satellite
sits above a site's elevation mask, and chains those intervals into the
ordered sequence of serving passes consumed by the latency model.

Orbit model: circular Keplerian motion plus Earth sidereal rotation. No J2,
no drag. Coverage geometry at these altitudes is first order in both.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

MU_EARTH = 3.986004418e14      # standard gravitational parameter, m^3/s^2
EARTH_RADIUS = 6371.0e3        # mean spherical radius, m
EARTH_ROT_RATE = 7.2921159e-5  # sidereal rotation rate, rad/s


class ConstellationConfigError(ValueError):
    """Raised when a shell or site violates its structural invariants."""


class NoServingSatelliteError(RuntimeError):
    """Raised when the serving chain hits a coverage gap.

    Attributes:
        gap_start: Time at which no satellite covers the site, seconds.
        gap_end: Entry time of the next coverage window, seconds
            (``math.inf`` when no later window exists).
    """

    def __init__(self, gap_start: float, gap_end: float):
        self.gap_start = gap_start
        self.gap_end = gap_end
        super().__init__(
            f"no serving satellite in [{gap_start:.1f} s, {gap_end:.1f} s]"
        )


@dataclass(frozen=True)
class OrbitalShell:
    """One-altitude Walker-Star shell.

    Attributes:
        satellite_count: Total number of satellites, divisible by plane_count.
        plane_count: Number of orbital planes, spread over 180 deg of RAAN.
        altitude: Orbit altitude above the spherical Earth, meters.
        inclination: Orbital inclination, radians.
        phasing_offset: Walker phasing factor F (i:T/P/F); satellite j of
            plane p starts at anomaly 2*pi*(j/S + F*p/T).
        epoch: Epoch offset of Earth rotation, seconds.
    """

    satellite_count: int
    plane_count: int
    altitude: float
    inclination: float
    phasing_offset: int = 1
    epoch: float = 0.0

    def __post_init__(self):
        if self.plane_count < 1 or self.satellite_count < 1:
            raise ConstellationConfigError("counts must be positive")
        if self.satellite_count % self.plane_count != 0:
            raise ConstellationConfigError(
                f"{self.satellite_count} satellites not divisible into "
                f"{self.plane_count} planes"
            )
        if self.altitude <= 0:
            raise ConstellationConfigError("altitude must be positive")
        if not 0.0 <= self.inclination <= math.pi:
            raise ConstellationConfigError("inclination outside [0, pi]")


@dataclass(frozen=True)
class GroundSite:
    """Target site on the spherical Earth with an elevation mask."""

    latitude: float        # radians
    longitude: float       # radians
    min_elevation: float   # radians

    def __post_init__(self):
        if abs(self.latitude) > math.pi / 2:
            raise ConstellationConfigError("latitude outside [-pi/2, pi/2]")
        if not 0.0 < self.min_elevation < math.pi / 2:
            raise ConstellationConfigError("min_elevation outside (0, pi/2)")


@dataclass(frozen=True)
class OrbitalElements:
    """Circular-orbit elements of one satellite."""

    satellite_id: int
    semi_major_axis: float   # meters
    inclination: float       # radians
    raan: float              # radians
    anomaly0: float          # argument of latitude at t = 0, radians
    epoch: float = 0.0

    @property
    def angular_rate(self) -> float:
        return math.sqrt(MU_EARTH / self.semi_major_axis**3)


@dataclass(frozen=True)
class SatellitePass:
    """One satellite's service interval over the site.

    coverage_windows leaves the compute-side fields at None; pass_sequence
    fills them and stamps t_limit, the exit time measured from round start
    (math.inf when the pass outlives the requested horizon).
    """

    satellite_id: int
    t_enter: float
    t_exit: float
    cpu_rate: float | None = None            # f_S,i, cycles/s
    cycles_per_sample: float | None = None    # m_S,i, cycles/sample
    isl_rate_to_next: float | None = None     # Z_ISL to the successor, b/s
    t_limit: float | None = None              # T_i, seconds from round start

    def __post_init__(self):
        if not self.t_exit > self.t_enter:
            raise ConstellationConfigError("t_exit must exceed t_enter")

    @property
    def duration(self) -> float:
        return self.t_exit - self.t_enter


def build_walker_star(shell: OrbitalShell) -> list[OrbitalElements]:
    """Lays out the shell's satellites on evenly phased circular orbits.

    Planes sit at RAAN p * (pi / plane_count); within a plane the arguments
    of latitude are evenly spaced, shifted plane to plane by the Walker
    phasing term 2*pi*F*p / satellite_count.

    Args:
        shell: Validated shell configuration.

    Returns:
        One OrbitalElements per satellite, plane-major order.
    """
    per_plane = shell.satellite_count // shell.plane_count
    a = EARTH_RADIUS + shell.altitude
    out = []
    for p in range(shell.plane_count):
        raan = p * math.pi / shell.plane_count
        for s in range(per_plane):
            u0 = 2.0 * math.pi * (
                s / per_plane
                + shell.phasing_offset * p / shell.satellite_count
            )
            out.append(OrbitalElements(
                satellite_id=p * per_plane + s,
                semi_major_axis=a,
                inclination=shell.inclination,
                raan=raan,
                anomaly0=u0 % (2.0 * math.pi),
                epoch=shell.epoch,
            ))
    return out


def eci_position(elem: OrbitalElements, t: np.ndarray) -> np.ndarray:
    """ECI position of one satellite at times t (seconds). Shape (..., 3)."""
    t = np.asarray(t, dtype=float)
    u = elem.anomaly0 + elem.angular_rate * t
    cu, su = np.cos(u), np.sin(u)
    co, so = math.cos(elem.raan), math.sin(elem.raan)
    ci, si = math.cos(elem.inclination), math.sin(elem.inclination)
    a = elem.semi_major_axis
    x = a * (cu * co - su * ci * so)
    y = a * (cu * so + su * ci * co)
    z = a * su * si
    return np.stack([x, y, z], axis=-1)


def site_eci_position(site: GroundSite, t: np.ndarray,
                      epoch: float = 0.0) -> np.ndarray:
    """ECI position of the rotating site at times t. Shape (..., 3)."""
    t = np.asarray(t, dtype=float)
    theta = site.longitude + EARTH_ROT_RATE * (t + epoch)
    cl = math.cos(site.latitude)
    x = EARTH_RADIUS * cl * np.cos(theta)
    y = EARTH_RADIUS * cl * np.sin(theta)
    z = np.full_like(t, EARTH_RADIUS * math.sin(site.latitude))
    return np.stack([x, y, z], axis=-1)


def elevation(elem: OrbitalElements, site: GroundSite,
              t: np.ndarray) -> np.ndarray:
    """Elevation of the satellite above the site's horizon, radians."""
    r_sat = eci_position(elem, t)
    r_site = site_eci_position(site, t, elem.epoch)
    rho = r_sat - r_site
    zenith = r_site / EARTH_RADIUS
    sin_el = np.sum(rho * zenith, axis=-1) / np.linalg.norm(rho, axis=-1)
    return np.arcsin(np.clip(sin_el, -1.0, 1.0))


def slant_range(elem: OrbitalElements, site: GroundSite, t: float) -> float:
    """Distance from the site to the satellite at time t, meters."""
    r_sat = eci_position(elem, np.asarray(t))
    r_site = site_eci_position(site, np.asarray(t), elem.epoch)
    return float(np.linalg.norm(r_sat - r_site))


def _refine_crossing(elem: OrbitalElements, site: GroundSite,
                     t_lo: float, t_hi: float, rising: bool,
                     tol: float = 0.05) -> float:
    """Bisects the mask crossing bracketed by [t_lo, t_hi] to tol seconds."""
    mask = site.min_elevation
    while t_hi - t_lo > tol:
        mid = 0.5 * (t_lo + t_hi)
        above = float(elevation(elem, site, np.asarray(mid))) >= mask
        if above == rising:
            # rising edge: above at mid means the crossing is earlier
            t_hi = mid
        else:
            t_lo = mid
    return 0.5 * (t_lo + t_hi)


def coverage_windows(elements: list[OrbitalElements], site: GroundSite,
                     horizon: float, step: float = 1.0,
                     start: float = 0.0) -> list[SatellitePass]:
    """Extracts every interval with elevation >= the site mask.

    Scans a coarse time grid per satellite, then refines each edge by
    bisection on the elevation function to within 0.1 s.

    Args:
        elements: Satellites to scan.
        site: Ground site with elevation mask.
        horizon: Scan length, seconds.
        step: Coarse grid spacing, seconds.
        start: Scan start time, seconds.

    Returns:
        Passes sorted by t_enter (compute fields unset). Windows are clipped
        to [start, start + horizon]; an empty list is a valid result.
    """
    if horizon <= 0 or step <= 0:
        raise ConstellationConfigError("horizon and step must be positive")
    t = np.arange(start, start + horizon + step, step)
    t[-1] = min(t[-1], start + horizon)
    windows: list[SatellitePass] = []
    for elem in elements:
        above = elevation(elem, site, t) >= site.min_elevation
        if not above.any():
            continue
        edges = np.flatnonzero(np.diff(above.astype(np.int8)))
        rises = [float(t[i]) for i in edges if not above[i]]
        falls = [float(t[i]) for i in edges if above[i]]
        if above[0]:
            starts = [float(t[0])] + [
                _refine_crossing(elem, site, r, r + step, rising=True)
                for r in rises
            ]
        else:
            starts = [
                _refine_crossing(elem, site, r, r + step, rising=True)
                for r in rises
            ]
        ends = [
            _refine_crossing(elem, site, f, f + step, rising=False)
            for f in falls
        ]
        if above[-1]:
            ends.append(float(t[-1]))
        for t_en, t_ex in zip(starts, ends):
            if t_ex > t_en:
                windows.append(SatellitePass(
                    satellite_id=elem.satellite_id,
                    t_enter=t_en, t_exit=t_ex,
                ))
    windows.sort(key=lambda w: (w.t_enter, -w.t_exit, w.satellite_id))
    return windows


def pass_sequence(windows: list[SatellitePass], round_start: float,
                  cpu_sampler, isl_rate, cycles_per_sample: float,
                  horizon: float | None = None,
                  overlap_tolerance: float = 0.5) -> list[SatellitePass]:
    """Chains coverage windows into the consecutive serving passes.

    The serving satellite at any instant is the covering window with the
    earliest entry time; at each exit the chain hands over to the next
    window active at that moment. Passes ending at or before round_start are
    dropped. T_i (stored as t_limit) is the exit time measured from
    round_start; a pass whose window outlives ``round_start + horizon``
    carries t_limit = +inf and terminates the chain.

    Args:
        windows: Coverage windows sorted by t_enter.
        round_start: Chain start time, seconds.
        cpu_sampler: Callable (pass_index) -> f_S,i in cycles/s.
        isl_rate: Constant b/s, or callable (pass_index) -> b/s, for the
            ISL toward the successor satellite.
        cycles_per_sample: m_S,i, cycles per training sample.
        horizon: Serving horizon beyond round_start; None chains until the
            windows run out.
        overlap_tolerance: Max gap, in seconds, still treated as continuous.

    Returns:
        Serving passes in order, compute fields and t_limit filled.

    Raises:
        NoServingSatelliteError: A gap larger than overlap_tolerance occurs
            before the horizon (or before the last window when horizon is
            None).
    """
    live = sorted(
        (w for w in windows if w.t_exit > round_start),
        key=lambda w: (w.t_enter, -w.t_exit, w.satellite_id),
    )
    if not live:
        raise NoServingSatelliteError(round_start, math.inf)
    end_time = math.inf if horizon is None else round_start + horizon
    chain: list[SatellitePass] = []
    cursor = round_start
    used: set[int] = set()
    while True:
        chosen = None
        for i, w in enumerate(live):
            if i in used:
                continue
            if w.t_enter > cursor + overlap_tolerance:
                break
            if w.t_exit > cursor:
                chosen = i
                break
        if chosen is None:
            upcoming = [w.t_enter for i, w in enumerate(live)
                        if i not in used and w.t_exit > cursor]
            if horizon is None and not upcoming:
                break  # windows exhausted, chain complete
            raise NoServingSatelliteError(
                cursor, min(upcoming) if upcoming else math.inf)
        used.add(chosen)
        w = live[chosen]
        idx = len(chain)
        rate = isl_rate(idx) if callable(isl_rate) else isl_rate
        covers_horizon = w.t_exit >= end_time
        chain.append(replace(
            w,
            cpu_rate=float(cpu_sampler(idx)),
            cycles_per_sample=cycles_per_sample,
            isl_rate_to_next=float(rate),
            t_limit=math.inf if covers_horizon else w.t_exit - round_start,
        ))
        if covers_horizon:
            break
        cursor = w.t_exit
        if cursor >= end_time:
            break
    return chain


def passes_to_csv(windows: list[SatellitePass], path) -> None:
    """Writes a pass table as CSV (satellite_id, t_enter_s, t_exit_s, duration_s)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["satellite_id", "t_enter_s", "t_exit_s", "duration_s"])
        for w in windows:
            writer.writerow([w.satellite_id, f"{w.t_enter:.3f}",
                             f"{w.t_exit:.3f}", f"{w.duration:.3f}"])
