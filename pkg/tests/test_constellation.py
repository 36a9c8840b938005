"""Constellation geometry and coverage-window tests.

Covers:
 Group 1 - Walker layout
   1.  80/5 shell: 5 planes x 16 satellites, RAANs at 0/36/72/108/144 deg
   2.  Single-satellite shell: one element at anomaly 0
   3.  8/2 shell: 90 deg in-plane spacing, 90 deg RAAN gap
   4.  Non-divisible satellite count raises a configuration error

 Group 2 - Propagator
   5.  Orbital radius conserved to 1e-6 relative over 24 h
   6.  Elevation stays within [-pi/2, pi/2] and is finite

 Group 3 - Coverage windows
   7.  Per-satellite windows are disjoint and maximal on 100 random sites
   8.  Every non-clipped window edge brackets a mask crossing
   9.  Window midpoints sit above the elevation mask
  10.  Pass durations never exceed the closed-form overhead-pass maximum
  11.  Equatorial satellite and polar site share no coverage
  12.  Rotating the site longitude by one plane gap permutes pass durations

 Group 4 - Serving chain
  13.  Single all-horizon window collapses to one pass with t_limit = inf
  14.  Constant cpu sampler stamps every pass with the same rate
  15.  Chained passes are consecutive and t_limit is measured from start
  16.  A coverage hole raises NoServingSatelliteError carrying the gap
  17.  Seeded cpu sampler replays bit-exactly across two chains
  18.  Pass table CSV has the declared header and one row per pass
"""

from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from sagfed.constellation import (
    EARTH_RADIUS,
    ConstellationConfigError,
    GroundSite,
    NoServingSatelliteError,
    OrbitalElements,
    OrbitalShell,
    SatellitePass,
    build_walker_star,
    coverage_windows,
    eci_position,
    elevation,
    pass_sequence,
    passes_to_csv,
)

from oracles import max_overhead_pass_duration

_REFERENCE_SHELL = OrbitalShell(
    satellite_count=80,
    plane_count=5,
    altitude=800e3,
    inclination=math.radians(85.0),
)

_SITE = GroundSite(
    latitude=math.radians(40.0),
    longitude=math.radians(-86.0),
    min_elevation=math.radians(15.0),
)


# ---------------------------------------------------------------------------
# Group 1 - Walker layout


def test_reference_shell_layout():
    """80 satellites over 5 planes: 16 per plane, RAANs spread over 180 deg."""
    elements = build_walker_star(_REFERENCE_SHELL)
    assert len(elements) == 80, f"expected 80 elements, got {len(elements)}"
    raans = sorted({round(math.degrees(e.raan), 9) for e in elements})
    assert raans == [0.0, 36.0, 72.0, 108.0, 144.0], f"RAANs {raans}"
    for plane in range(5):
        members = [e for e in elements if round(math.degrees(e.raan)) == 36 * plane]
        assert len(members) == 16, f"plane {plane} holds {len(members)} satellites"
        gaps = np.diff(sorted(e.anomaly0 for e in members))
        assert np.allclose(gaps, 2 * math.pi / 16), (
            f"plane {plane} anomaly gaps {np.degrees(gaps)} deg are uneven"
        )


def test_single_satellite_shell():
    """A 1/1 shell is one satellite starting at anomaly 0."""
    elements = build_walker_star(
        OrbitalShell(satellite_count=1, plane_count=1, altitude=800e3,
                     inclination=math.radians(85.0))
    )
    assert len(elements) == 1
    assert elements[0].anomaly0 == 0.0
    assert elements[0].raan == 0.0


def test_two_plane_spacing():
    """8/2 shell: 90 deg between in-plane slots, 90 deg between planes."""
    elements = build_walker_star(
        OrbitalShell(satellite_count=8, plane_count=2, altitude=800e3,
                     inclination=math.radians(85.0))
    )
    plane0 = sorted(e.anomaly0 for e in elements if e.raan == 0.0)
    assert np.allclose(np.diff(plane0), math.pi / 2), f"in-plane gaps {plane0}"
    raans = sorted({e.raan for e in elements})
    assert np.allclose(raans, [0.0, math.pi / 2]), f"RAANs {raans}"


def test_indivisible_count_rejected():
    """7 satellites cannot spread over 2 planes."""
    with pytest.raises(ConstellationConfigError):
        OrbitalShell(satellite_count=7, plane_count=2, altitude=800e3,
                     inclination=math.radians(85.0))


# ---------------------------------------------------------------------------
# Group 2 - Propagator


def test_radius_conserved_over_24h():
    """Circular propagation keeps |r| at the semi-major axis for a day."""
    elem = build_walker_star(_REFERENCE_SHELL)[17]
    t = np.linspace(0.0, 86400.0, 8641)
    radius = np.linalg.norm(eci_position(elem, t), axis=-1)
    rel = np.abs(radius - elem.semi_major_axis) / elem.semi_major_axis
    assert float(rel.max()) < 1e-6, f"radius drifted by {rel.max():.3e} relative"


def test_elevation_bounded_and_finite():
    """Elevation samples stay in [-pi/2, pi/2] with no NaNs."""
    elem = build_walker_star(_REFERENCE_SHELL)[3]
    t = np.linspace(0.0, 7200.0, 7201)
    el = elevation(elem, _SITE, t)
    assert np.all(np.isfinite(el)), "non-finite elevation sample"
    assert float(np.abs(el).max()) <= math.pi / 2 + 1e-12


# ---------------------------------------------------------------------------
# Group 3 - Coverage windows


def _small_shell():
    return build_walker_star(
        OrbitalShell(satellite_count=8, plane_count=2, altitude=800e3,
                     inclination=math.radians(85.0))
    )


def test_windows_disjoint_and_maximal_on_random_sites():
    """Per satellite, windows never overlap and gaps dip below the mask.

    100 random sites; the inter-window midpoint of the same satellite must
    sit under the mask, otherwise two windows should have been merged.
    """
    elements = _small_shell()
    rng = np.random.default_rng(11)
    for trial in range(100):
        site = GroundSite(
            latitude=float(rng.uniform(-1.2, 1.2)),
            longitude=float(rng.uniform(-math.pi, math.pi)),
            min_elevation=float(rng.uniform(0.1, 0.6)),
        )
        windows = coverage_windows(elements, site, horizon=7200.0, step=5.0)
        per_sat: dict[int, list] = {}
        for w in windows:
            per_sat.setdefault(w.satellite_id, []).append(w)
        for sat_id, ws in per_sat.items():
            ws.sort(key=lambda w: w.t_enter)
            for a, b in zip(ws, ws[1:]):
                assert a.t_exit < b.t_enter, (
                    f"site {trial} sat {sat_id}: windows "
                    f"[{a.t_enter:.1f},{a.t_exit:.1f}] and "
                    f"[{b.t_enter:.1f},{b.t_exit:.1f}] overlap"
                )
                elem = next(e for e in elements if e.satellite_id == sat_id)
                mid = 0.5 * (a.t_exit + b.t_enter)
                below = float(elevation(elem, site, np.asarray(mid)))
                assert below < site.min_elevation + 1e-9, (
                    f"site {trial} sat {sat_id}: gap midpoint at elevation "
                    f"{math.degrees(below):.2f} deg is above the mask; the "
                    "windows are not maximal"
                )


def test_window_edges_bracket_mask_crossings():
    """Elevation minus mask changes sign within 0.2 s of each refined edge."""
    elements = _small_shell()
    windows = coverage_windows(elements, _SITE, horizon=7200.0, step=5.0)
    assert windows, "expected some coverage in two hours"
    for w in windows:
        elem = next(e for e in elements if e.satellite_id == w.satellite_id)
        if w.t_enter > 0.0:
            lo = float(elevation(elem, _SITE, np.asarray(w.t_enter - 0.2)))
            hi = float(elevation(elem, _SITE, np.asarray(w.t_enter + 0.2)))
            assert lo < _SITE.min_elevation < hi + 1e-12, (
                f"entry edge {w.t_enter:.2f} s of sat {w.satellite_id} does "
                f"not bracket the mask: {math.degrees(lo):.3f} / "
                f"{math.degrees(hi):.3f} deg"
            )
        if w.t_exit < 7200.0:
            lo = float(elevation(elem, _SITE, np.asarray(w.t_exit - 0.2)))
            hi = float(elevation(elem, _SITE, np.asarray(w.t_exit + 0.2)))
            assert hi < _SITE.min_elevation < lo + 1e-12, (
                f"exit edge {w.t_exit:.2f} s of sat {w.satellite_id} does "
                "not bracket the mask"
            )


def test_window_midpoints_above_mask():
    """The midpoint of every reported window clears the elevation mask."""
    elements = _small_shell()
    windows = coverage_windows(elements, _SITE, horizon=7200.0, step=5.0)
    for w in windows:
        elem = next(e for e in elements if e.satellite_id == w.satellite_id)
        mid = float(elevation(elem, _SITE, np.asarray(0.5 * (w.t_enter + w.t_exit))))
        assert mid >= _SITE.min_elevation - 1e-9, (
            f"sat {w.satellite_id} window midpoint at "
            f"{math.degrees(mid):.2f} deg below the mask"
        )


def test_durations_below_overhead_maximum():
    """No pass outlives the analytic zenith-pass duration for the shell."""
    elements = build_walker_star(_REFERENCE_SHELL)
    windows = coverage_windows(elements, _SITE, horizon=10800.0, step=2.0)
    assert windows, "reference shell should cover the site within 3 h"
    t_max = max_overhead_pass_duration(800e3, math.radians(15.0))
    for w in windows:
        assert w.duration <= t_max + 0.5, (
            f"sat {w.satellite_id} pass lasts {w.duration:.1f} s, above the "
            f"overhead bound {t_max:.1f} s"
        )


def test_no_coverage_is_empty_not_error():
    """An equatorial satellite never rises over a polar site."""
    equatorial = build_walker_star(
        OrbitalShell(satellite_count=1, plane_count=1, altitude=800e3,
                     inclination=0.0)
    )
    polar_site = GroundSite(latitude=math.radians(89.0), longitude=0.0,
                            min_elevation=math.radians(60.0))
    windows = coverage_windows(equatorial, polar_site, horizon=86400.0, step=10.0)
    assert windows == [], f"expected no coverage, got {len(windows)} windows"


def test_longitude_rotation_permutes_durations():
    """Shifting the site by one plane gap only relabels the passes.

    Uses a full-circle shell with zero phasing offset, which maps exactly
    onto itself under a rotation by 2 pi / plane_count; the half-circle
    reference shell lacks that symmetry (its seam breaks it).  The window
    extraction must then report an identical duration multiset.
    """
    planes, per_plane = 4, 5
    elements = [
        OrbitalElements(
            satellite_id=p * per_plane + s,
            semi_major_axis=EARTH_RADIUS + 800e3,
            inclination=math.radians(85.0),
            raan=p * 2.0 * math.pi / planes,
            anomaly0=2.0 * math.pi * s / per_plane,
        )
        for p in range(planes)
        for s in range(per_plane)
    ]
    gap = 2.0 * math.pi / planes

    def durations(site):
        ws = coverage_windows(elements, site, horizon=21600.0, step=2.0)
        return sorted(w.duration for w in ws)

    base = durations(_SITE)
    shifted = durations(
        GroundSite(latitude=_SITE.latitude,
                   longitude=_SITE.longitude + gap,
                   min_elevation=_SITE.min_elevation)
    )
    assert base, "symmetric shell should produce passes in six hours"
    assert len(base) == len(shifted), (
        f"pass counts diverge under rotation: {len(base)} vs {len(shifted)}"
    )
    assert np.allclose(base, shifted, atol=0.3), (
        "pass durations changed under a plane-gap rotation: max delta "
        f"{np.abs(np.array(base) - np.array(shifted)).max():.3f} s"
    )


# ---------------------------------------------------------------------------
# Group 4 - Serving chain


def _window(sat_id, t_enter, t_exit):
    return SatellitePass(satellite_id=sat_id, t_enter=t_enter, t_exit=t_exit)


def test_single_covering_window():
    """One window outliving the horizon yields one open-ended pass."""
    chain = pass_sequence(
        [_window(7, 0.0, 5000.0)], round_start=100.0,
        cpu_sampler=lambda i: 1e9, isl_rate=3.125e6, cycles_per_sample=1e6,
        horizon=600.0,
    )
    assert len(chain) == 1
    assert chain[0].satellite_id == 7
    assert chain[0].t_limit == math.inf, f"t_limit {chain[0].t_limit}"
    assert chain[0].cpu_rate == 1e9


def test_constant_sampler_stamps_all_passes():
    """Every chained pass carries the sampler's constant rate."""
    windows = [_window(0, 0.0, 100.0), _window(1, 95.0, 220.0),
               _window(2, 215.0, 400.0)]
    chain = pass_sequence(windows, 0.0, lambda i: 2.5e9, 3.125e6, 1e6,
                          horizon=390.0)
    assert [p.cpu_rate for p in chain] == [2.5e9] * 3


def test_chain_is_consecutive_with_round_relative_limits():
    """Passes chain at exits; t_limit counts from round start."""
    windows = [_window(0, 0.0, 150.0), _window(1, 140.0, 320.0),
               _window(2, 315.0, 900.0)]
    chain = pass_sequence(windows, 50.0, lambda i: 1e9, 3.125e6, 1e6,
                          horizon=600.0)
    assert [p.satellite_id for p in chain] == [0, 1, 2]
    assert chain[0].t_limit == pytest.approx(100.0), "T_1 = 150 - 50"
    assert chain[1].t_limit == pytest.approx(270.0), "T_2 = 320 - 50"
    assert chain[2].t_limit == math.inf, "last window outlives the horizon"
    for a, b in zip(chain, chain[1:]):
        assert b.t_enter <= a.t_exit + 0.5, (
            f"gap between passes {a.satellite_id} and {b.satellite_id}"
        )


def test_coverage_hole_raises_with_gap():
    """A hole before the horizon raises and reports the gap interval."""
    windows = [_window(0, 0.0, 100.0), _window(1, 400.0, 800.0)]
    with pytest.raises(NoServingSatelliteError) as err:
        pass_sequence(windows, 0.0, lambda i: 1e9, 3.125e6, 1e6, horizon=700.0)
    assert err.value.gap_start == pytest.approx(100.0)
    assert err.value.gap_end == pytest.approx(400.0)


def test_seeded_sampler_replays_bit_exact():
    """Two chains with the same seeded sampler agree on every field."""
    windows = [_window(0, 0.0, 150.0), _window(1, 145.0, 340.0),
               _window(2, 338.0, 700.0)]

    def sampled_chain():
        rng = np.random.default_rng(404)
        return pass_sequence(
            windows, 0.0,
            cpu_sampler=lambda i: rng.uniform(1e9, 1e10),
            isl_rate=3.125e6, cycles_per_sample=1e6, horizon=650.0,
        )

    first, second = sampled_chain(), sampled_chain()
    assert first == second, "seeded chains diverged"
    rates = [p.cpu_rate for p in first]
    assert all(1e9 <= f <= 1e10 for f in rates), f"rates {rates}"


def test_pass_table_csv(tmp_path):
    """CSV export lists the declared columns and one row per window."""
    windows = [_window(4, 12.25, 90.5), _window(2, 100.0, 160.0)]
    path = tmp_path / "passes.csv"
    passes_to_csv(windows, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["satellite_id", "t_enter_s", "t_exit_s", "duration_s"]
    assert len(rows) == 3, f"expected header + 2 rows, got {len(rows)}"
    assert float(rows[1][3]) == pytest.approx(90.5 - 12.25, abs=1e-3)
