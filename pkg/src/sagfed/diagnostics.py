"""Convergence constants, the learning-rate cap, and the theoretical bound.

The analysis behind the system guarantees that a weighted average of
squared global gradient norms stays below a four-term expression built
from a handful of constants: the smoothness L of every node loss, the
mini-batch gradient variance sigma_g^2, a per-round dissimilarity pair
(c_r, delta_r^2) relating node gradients to the global gradient, and the
global minimum F*.  This module estimates those constants on small
problems, evaluates the bound exactly, and runs the end-to-end check on
a quadratic task where every constant is known in closed form rather
than estimated, because only true constants make the bound falsifiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flcore import (
    LocalTrainConfig,
    ModelState,
    QuadraticMeanModel,
    local_sgd,
    node_rng,
)


class DiagnosticsError(ValueError):
    """Raised for invalid constants or malformed bound inputs."""


@dataclass(frozen=True)
class ConvergenceConstants:
    """The quantities the convergence analysis is parameterized by.

    ``c_r`` and ``delta_r2`` describe gradient dissimilarity in one round;
    when data moves between rounds the pair can be re-estimated and fed to
    the bound as a per-round schedule.
    """

    L: float
    sigma_g2: float
    c_r: float
    delta_r2: float
    F_star: float

    def __post_init__(self) -> None:
        for field in ("L", "sigma_g2", "c_r", "delta_r2", "F_star"):
            value = getattr(self, field)
            if not (math.isfinite(value) and value >= 0):
                raise DiagnosticsError(f"{field} must be finite and >= 0")


def max_learning_rate(constants: ConvergenceConstants, local_iterations: int) -> float:
    """Largest per-round learning rate the analysis admits.

    Doubling the local iteration count halves the cap; stronger
    dissimilarity (larger c_r) also shrinks it.
    """
    if local_iterations < 1:
        raise DiagnosticsError("local_iterations must be >= 1")
    denom = 2.0 * math.sqrt(1.0 + constants.c_r) * local_iterations * constants.L
    if denom <= 0:
        return math.inf
    return 1.0 / denom


def theorem1_bound(
    constants: ConvergenceConstants,
    eta_schedule: Sequence[float],
    lambda_trajectories: Sequence[Sequence[float]],
    local_iterations: int,
    initial_loss: float,
    delta_r2_schedule: Sequence[float] | None = None,
) -> float:
    """Upper bound on the eta-weighted average of squared gradient norms.

    Evaluates the four-term right-hand side exactly: an initial-gap term
    decaying with the learning-rate sum, a variance term carrying the
    per-round sum of squared aggregation weights (time-varying as data
    moves), a drift term cubic in eta, and a dissimilarity term.  Pass
    ``delta_r2_schedule`` when the dissimilarity was re-estimated per
    round; otherwise the pair in ``constants`` is used throughout.
    """
    eta = np.asarray(eta_schedule, dtype=float)
    rounds = eta.shape[0]
    if rounds < 1:
        raise DiagnosticsError("need at least one round")
    if np.any(eta <= 0) or not np.all(np.isfinite(eta)):
        raise DiagnosticsError("learning rates must be positive and finite")
    if len(lambda_trajectories) != rounds:
        raise DiagnosticsError("one weight vector per round required")
    if local_iterations < 1:
        raise DiagnosticsError("local_iterations must be >= 1")

    lambda_sq = np.empty(rounds)
    for r, lam in enumerate(lambda_trajectories):
        lam = np.asarray(lam, dtype=float)
        if np.any(lam < 0) or abs(float(lam.sum()) - 1.0) > 1e-9:
            raise DiagnosticsError(f"round {r} weights are not a convex combination")
        lambda_sq[r] = float(np.sum(lam**2))

    if delta_r2_schedule is None:
        delta2 = np.full(rounds, constants.delta_r2)
    else:
        delta2 = np.asarray(delta_r2_schedule, dtype=float)
        if delta2.shape[0] != rounds or np.any(delta2 < 0):
            raise DiagnosticsError("delta_r2_schedule must be nonnegative, one per round")

    gamma = float(eta.sum())
    H, L = local_iterations, constants.L
    gap = 4.0 * (initial_loss - constants.F_star) / (H * gamma)
    variance = 4.0 * L / gamma * float(np.sum(eta**2 * lambda_sq)) * constants.sigma_g2
    drift = 2.0 * H**2 * L**2 * constants.sigma_g2 / gamma * float(np.sum(eta**3))
    dissimilarity = 4.0 * H**2 * L**2 / gamma * float(np.sum(eta**3 * delta2))
    return gap + variance + drift + dissimilarity


def weighted_gradient_average(
    eta_schedule: Sequence[float], squared_grad_norms: Sequence[float]
) -> float:
    """The empirical statistic the bound constrains."""
    eta = np.asarray(eta_schedule, dtype=float)
    norms = np.asarray(squared_grad_norms, dtype=float)
    if eta.shape != norms.shape or eta.size == 0:
        raise DiagnosticsError("schedules must be equal-length and nonempty")
    return float(np.sum(eta * norms) / np.sum(eta))


# --------------------------------------------------------------------------
# Empirical constant estimation


def _node_grad(model, parameters, features, labels, indices):
    _, grad = model.loss_and_grad(parameters, features[indices], labels[indices])
    return grad


def estimate_constants(
    model,
    parameters: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    node_indices: Sequence[np.ndarray],
    probe_count: int = 100,
    probe_scale: float = 1.0,
    minibatch_draws: int = 16,
    batch_size: int = 32,
    seed: int = 0,
    f_star: float | None = None,
) -> ConvergenceConstants:
    """Estimate the convergence constants from gradient probes.

    L is the max finite-difference Lipschitz ratio over probe pairs, a
    lower bound that tightens as the probe budget grows.  sigma_g^2 is the
    worst per-node mini-batch gradient variance around the full-node
    gradient.  The dissimilarity pair is fit per probe point: the slope
    c_r by least squares of node-vs-global squared gradient gaps against
    the squared global norm, the intercept delta_r^2 lifted to cover every
    fit probe, so held-out violations stay rare.

    ``f_star`` overrides the minimum estimate when it is known exactly;
    otherwise the smallest loss seen across probes serves as an upper
    bound on F*, labeled approximate.
    """
    if probe_count < 2:
        raise DiagnosticsError("need at least two probe points")
    occupied = [np.asarray(idx) for idx in node_indices if len(idx) > 0]
    if not occupied:
        raise DiagnosticsError("all nodes are empty")
    rng = np.random.default_rng(seed)
    dim = parameters.shape[0]
    probes = parameters[None, :] + probe_scale * rng.standard_normal((probe_count, dim))

    counts = np.array([idx.size for idx in occupied], dtype=float)
    weights = counts / counts.sum()

    node_grads = np.empty((probe_count, len(occupied), dim))
    for p in range(probe_count):
        for k, idx in enumerate(occupied):
            node_grads[p, k] = _node_grad(model, probes[p], features, labels, idx)
    global_grads = np.einsum("k,pkd->pd", weights, node_grads)

    # L over consecutive probe pairs, per node and for the global loss.
    smoothness = 0.0
    for p in range(probe_count - 1):
        step = float(np.linalg.norm(probes[p + 1] - probes[p]))
        if step == 0:
            continue
        jumps = np.linalg.norm(node_grads[p + 1] - node_grads[p], axis=1)
        smoothness = max(smoothness, float(jumps.max()) / step)
        smoothness = max(
            smoothness,
            float(np.linalg.norm(global_grads[p + 1] - global_grads[p])) / step,
        )

    # Worst-node mini-batch variance at the anchor point.
    sigma_g2 = 0.0
    for k, idx in enumerate(occupied):
        full = _node_grad(model, parameters, features, labels, idx)
        size = min(batch_size, idx.size)
        gaps = []
        for _ in range(minibatch_draws):
            pick = rng.choice(idx, size=size, replace=False)
            _, grad = model.loss_and_grad(parameters, features[pick], labels[pick])
            gaps.append(float(np.sum((grad - full) ** 2)))
        sigma_g2 = max(sigma_g2, float(np.mean(gaps)))

    # Dissimilarity fit: pooled least-squares slope, envelope intercept.
    x = np.repeat(np.sum(global_grads**2, axis=1), len(occupied))
    y = np.sum((node_grads - global_grads[:, None, :]) ** 2, axis=2).ravel()
    denom = float(np.sum(x**2))
    c_fit = max(0.0, float(np.sum(x * (y - y.mean())) / denom)) if denom > 0 else 0.0
    delta2 = max(0.0, float(np.max(y - c_fit * x)))

    if f_star is None:
        losses = [
            sum(
                w * model.loss(probes[p], features[idx], labels[idx])
                for w, idx in zip(weights, occupied)
            )
            for p in range(probe_count)
        ]
        f_star = max(0.0, min(losses))
    return ConvergenceConstants(smoothness, sigma_g2, c_fit, delta2, f_star)


# --------------------------------------------------------------------------
# Exact constants and end-to-end check on the quadratic task


def _chunk_sizes(n: int, local_iterations: int) -> list[int]:
    # Mirrors the training batch plan: ceil(n/H) chunks of one permutation.
    size = math.ceil(n / local_iterations)
    sizes = []
    for h in range(local_iterations):
        lo, hi = h * size, min((h + 1) * size, n)
        if hi > lo:
            sizes.append(hi - lo)
    return sizes


def quadratic_constants(
    features: np.ndarray,
    node_indices: Sequence[np.ndarray],
    local_iterations: int,
) -> ConvergenceConstants:
    """Closed-form constants for the mean-quadratic loss.

    Every node Hessian is the identity, so L = 1.  Mini-batch gradients
    are batch means of the node's samples drawn without replacement, so
    their variance follows the finite-population formula evaluated at the
    smallest batch the chunked sweep produces.  Node-vs-global gradient
    gaps are constant in w, giving c_r = 0 exactly.
    """
    occupied = [np.asarray(idx) for idx in node_indices if len(idx) > 0]
    if not occupied:
        raise DiagnosticsError("all nodes are empty")
    mu_global = features.mean(axis=0)

    sigma_g2 = 0.0
    delta2 = 0.0
    for idx in occupied:
        pts = features[idx]
        mu = pts.mean(axis=0)
        delta2 = max(delta2, float(np.sum((mu - mu_global) ** 2)))
        n = pts.shape[0]
        if n < 2:
            continue
        spread = float(np.sum((pts - mu) ** 2)) / n
        for b in _chunk_sizes(n, local_iterations):
            # Without-replacement batch mean: Var = (S^2/b) * (n-b)/(n-1).
            sigma_g2 = max(sigma_g2, spread / b * (n - b) / (n - 1))

    f_star = 0.5 * float(np.mean(np.sum((features - mu_global) ** 2, axis=1)))
    return ConvergenceConstants(1.0, sigma_g2, 0.0, delta2, f_star)


def run_quadratic_trial(
    seed: int,
    rounds: int = 30,
    local_iterations: int = 4,
    node_count: int = 5,
    samples: int = 400,
    feature_dim: int = 8,
    eta_margin: float = 0.9,
) -> dict:
    """One seeded federated run on the quadratic task, checked vs the bound.

    Node datasets are deliberately uneven so the weight trajectories and
    the dissimilarity term are nontrivial.  The learning-rate schedule is
    eta_margin * cap / (r + 1), which respects the cap in every round.
    """
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((samples, feature_dim))
    features += rng.standard_normal((1, feature_dim)) * 2.0
    labels = np.zeros(samples, dtype=int)

    cuts = np.sort(rng.choice(np.arange(1, samples), node_count - 1, replace=False))
    node_idx = np.split(rng.permutation(samples), cuts)

    constants = quadratic_constants(features, node_idx, local_iterations)
    cap = max_learning_rate(constants, local_iterations)
    eta = np.array([eta_margin * cap / (r + 1) for r in range(rounds)])

    counts = np.array([len(i) for i in node_idx], dtype=float)
    weights = counts / counts.sum()
    lambda_traj = [weights] * rounds

    model = QuadraticMeanModel(feature_dim)
    state = ModelState(rng.standard_normal(feature_dim) * 3.0, 0)
    initial_loss, _ = model.loss_and_grad(state.parameters, features, labels)

    sq_norms = []
    from .flcore import aggregate  # local import keeps module load cheap

    for r in range(rounds):
        _, grad = model.loss_and_grad(state.parameters, features, labels)
        sq_norms.append(float(np.sum(grad**2)))
        config = LocalTrainConfig(local_iterations, float(eta[r]))
        locals_ = [
            local_sgd(
                model,
                state,
                features[idx],
                labels[idx],
                config,
                node_rng(seed, r, "ground", k),
            )
            for k, idx in enumerate(node_idx)
        ]
        state = aggregate(locals_, weights)

    empirical = weighted_gradient_average(eta, sq_norms)
    bound = theorem1_bound(constants, eta, lambda_traj, local_iterations, initial_loss)
    return {
        "seed": seed,
        "constants": constants,
        "learning_rate_cap": cap,
        "empirical": empirical,
        "bound": bound,
        "holds": bool(empirical <= bound),
    }


def validate_bound(
    seeds: Sequence[int] = tuple(range(20)),
    rounds: int = 30,
    local_iterations: int = 4,
) -> dict:
    """Run the quadratic bound check across seeds and summarize as JSON-ables."""
    trials = [run_quadratic_trial(s, rounds, local_iterations) for s in seeds]
    worst = max(t["empirical"] / t["bound"] for t in trials)
    first = trials[0]["constants"]
    return {
        "task": "quadratic-mean",
        "seeds": list(seeds),
        "rounds": rounds,
        "local_iterations": local_iterations,
        "constants": {
            "L": first.L,
            "sigma_g2": first.sigma_g2,
            "c_r": first.c_r,
            "delta_r2": first.delta_r2,
            "F_star": first.F_star,
        },
        "learning_rate_cap": first and trials[0]["learning_rate_cap"],
        "bound": trials[0]["bound"],
        "empirical": trials[0]["empirical"],
        "worst_ratio": worst,
        "all_hold": all(t["holds"] for t in trials),
    }
