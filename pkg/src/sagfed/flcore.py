"""Federated training mechanics for the three-layer hierarchy.

This module owns everything about the learning side of a round: generating
the synthetic classification task, partitioning it over ground devices,
running local SGD at each node, stitching satellite training across passes,
and aggregating the node models into the next global model.

The data lives in one place: a :class:`DatasetLedger` of index arrays into
the task's training set.  Offload plans move indices between nodes (see
``offload.apply_plan``); training then reads whatever the ledger says each
node holds.  Keeping indices instead of copies makes the global loss
trivially invariant under offloading, which is the property the whole
system leans on.

Randomness is split into named streams, one per (seed, round, layer, node),
so that execution order and planning decisions can never change a training
trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

MODE_IID = "iid"
MODE_SHARD_NONIID = "shard-noniid"

BATCH_DATASET_OVER_H = "dataset_over_H"
BATCH_FIXED = "fixed"

LAYER_SPACE = "space"
LAYER_AIR = "air"
LAYER_GROUND = "ground"

_LAYER_CODES = {LAYER_SPACE: 0, LAYER_AIR: 1, LAYER_GROUND: 2}


class PartitionConfigError(ValueError):
    """Raised when a partition request is internally inconsistent."""


class TrainConfigError(ValueError):
    """Raised when a training configuration fails validation."""


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient step produces NaN or infinity.

    Almost always a learning-rate misconfiguration; the message carries the
    step index so runs abort with a usable diagnostic instead of silently
    poisoning the global model.
    """


# --------------------------------------------------------------------------
# Synthetic task


@dataclass(frozen=True)
class SyntheticTask:
    """A classification dataset with a held-out test split."""

    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    n_classes: int
    feature_dim: int

    def __post_init__(self) -> None:
        if self.train_features.shape[0] != self.train_labels.shape[0]:
            raise PartitionConfigError("train features/labels length mismatch")
        if self.test_features.shape[0] != self.test_labels.shape[0]:
            raise PartitionConfigError("test features/labels length mismatch")
        if self.train_features.shape[1] != self.feature_dim:
            raise PartitionConfigError("feature_dim does not match features")

    @property
    def train_count(self) -> int:
        return int(self.train_labels.shape[0])


def make_blobs_task(
    n_train: int = 60_000,
    n_test: int = 10_000,
    n_classes: int = 10,
    feature_dim: int = 32,
    separation: float = 4.0,
    seed: int = 0,
) -> SyntheticTask:
    """Gaussian-blob classification task with unit within-class noise.

    Class centers are drawn on a sphere of radius ``separation`` so the
    Bayes error is controlled by a single knob.  Labels cycle through the
    classes so every class has within one sample of the same count.
    """
    if n_classes < 2 or feature_dim < 1:
        raise PartitionConfigError("need at least 2 classes and 1 feature")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, feature_dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(count: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(count) % n_classes
        labels = rng.permutation(labels)
        feats = centers[labels] + rng.standard_normal((count, feature_dim))
        return feats, labels

    train_x, train_y = draw(n_train)
    test_x, test_y = draw(n_test)
    return SyntheticTask(train_x, train_y, test_x, test_y, n_classes, feature_dim)


# --------------------------------------------------------------------------
# Models


class LogisticModel:
    """Multinomial logistic regression with a bias column."""

    def __init__(self, feature_dim: int, n_classes: int, l2: float = 0.0):
        if feature_dim < 1 or n_classes < 2:
            raise TrainConfigError("logistic model needs dim >= 1, classes >= 2")
        if l2 < 0:
            raise TrainConfigError("l2 penalty must be >= 0")
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.l2 = l2

    @property
    def parameter_count(self) -> int:
        return self.n_classes * (self.feature_dim + 1)

    def init_parameters(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.parameter_count)

    def _unpack(self, parameters: np.ndarray) -> np.ndarray:
        return parameters.reshape(self.n_classes, self.feature_dim + 1)

    def _logits(self, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
        return features @ weights[:, :-1].T + weights[:, -1]

    def loss_and_grad(
        self, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
    ) -> tuple[float, np.ndarray]:
        weights = self._unpack(parameters)
        logits = self._logits(weights, features)
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        n = features.shape[0]
        picked = logits[np.arange(n), labels] - np.log(exp.sum(axis=1))
        loss = -float(np.mean(picked))
        probs[np.arange(n), labels] -= 1.0
        grad_w = probs.T @ features / n
        grad_b = probs.mean(axis=0)
        grad = np.concatenate([grad_w, grad_b[:, None]], axis=1)
        if self.l2 > 0:
            loss += 0.5 * self.l2 * float(np.sum(weights[:, :-1] ** 2))
            grad[:, :-1] += self.l2 * weights[:, :-1]
        return loss, grad.ravel()

    def loss(
        self, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
    ) -> float:
        return self.loss_and_grad(parameters, features, labels)[0]

    def predict(self, parameters: np.ndarray, features: np.ndarray) -> np.ndarray:
        weights = self._unpack(parameters)
        return np.argmax(self._logits(weights, features), axis=1)


class TwoLayerNetModel:
    """One-hidden-layer tanh network, trained with plain backprop."""

    def __init__(self, feature_dim: int, hidden: int, n_classes: int):
        if feature_dim < 1 or hidden < 1 or n_classes < 2:
            raise TrainConfigError("invalid network shape")
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.n_classes = n_classes
        self._w1_size = hidden * (feature_dim + 1)

    @property
    def parameter_count(self) -> int:
        return self._w1_size + self.n_classes * (self.hidden + 1)

    def init_parameters(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng or np.random.default_rng(0)
        w1 = rng.standard_normal((self.hidden, self.feature_dim + 1))
        w1 /= math.sqrt(self.feature_dim + 1)
        w2 = rng.standard_normal((self.n_classes, self.hidden + 1))
        w2 /= math.sqrt(self.hidden + 1)
        return np.concatenate([w1.ravel(), w2.ravel()])

    def _unpack(self, parameters: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w1 = parameters[: self._w1_size].reshape(self.hidden, self.feature_dim + 1)
        w2 = parameters[self._w1_size :].reshape(self.n_classes, self.hidden + 1)
        return w1, w2

    def _forward(self, parameters, features):
        w1, w2 = self._unpack(parameters)
        pre = features @ w1[:, :-1].T + w1[:, -1]
        act = np.tanh(pre)
        logits = act @ w2[:, :-1].T + w2[:, -1]
        return w1, w2, act, logits

    def loss_and_grad(
        self, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
    ) -> tuple[float, np.ndarray]:
        w1, w2, act, logits = self._forward(parameters, features)
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        n = features.shape[0]
        picked = logits[np.arange(n), labels] - np.log(exp.sum(axis=1))
        loss = -float(np.mean(picked))
        delta2 = probs
        delta2[np.arange(n), labels] -= 1.0
        delta2 /= n
        grad_w2 = np.concatenate(
            [delta2.T @ act, delta2.sum(axis=0)[:, None]], axis=1
        )
        delta1 = (delta2 @ w2[:, :-1]) * (1.0 - act**2)
        grad_w1 = np.concatenate(
            [delta1.T @ features, delta1.sum(axis=0)[:, None]], axis=1
        )
        return loss, np.concatenate([grad_w1.ravel(), grad_w2.ravel()])

    def loss(
        self, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
    ) -> float:
        return self.loss_and_grad(parameters, features, labels)[0]

    def predict(self, parameters: np.ndarray, features: np.ndarray) -> np.ndarray:
        _, _, _, logits = self._forward(parameters, features)
        return np.argmax(logits, axis=1)


class QuadraticMeanModel:
    """Loss 0.5 * ||w - x||^2 averaged over the batch.

    Every convergence constant is known in closed form (L = 1, gradient
    w - mean(x)), which makes this the reference task for checking the
    theoretical bound with true rather than estimated constants.
    """

    def __init__(self, feature_dim: int):
        if feature_dim < 1:
            raise TrainConfigError("feature_dim must be >= 1")
        self.feature_dim = feature_dim
        self.n_classes = 1

    @property
    def parameter_count(self) -> int:
        return self.feature_dim

    def init_parameters(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.feature_dim)

    def loss_and_grad(
        self, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
    ) -> tuple[float, np.ndarray]:
        diff = parameters[None, :] - features
        loss = 0.5 * float(np.mean(np.sum(diff**2, axis=1)))
        return loss, diff.mean(axis=0)

    def loss(
        self, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
    ) -> float:
        return self.loss_and_grad(parameters, features, labels)[0]

    def predict(self, parameters: np.ndarray, features: np.ndarray) -> np.ndarray:
        return np.zeros(features.shape[0], dtype=int)


# --------------------------------------------------------------------------
# Model state, partition, and training configs


@dataclass(frozen=True)
class ModelState:
    """Immutable snapshot of the global (or a node's) parameter vector."""

    parameters: np.ndarray
    round_index: int

    def __post_init__(self) -> None:
        params = np.asarray(self.parameters, dtype=float)
        if params.ndim != 1:
            raise TrainConfigError("parameters must be a flat vector")
        if not np.all(np.isfinite(params)):
            raise TrainConfigError("parameters must be finite")
        if self.round_index < 0:
            raise TrainConfigError("round_index must be >= 0")
        object.__setattr__(self, "parameters", params)


@dataclass(frozen=True)
class PartitionSpec:
    """How the training set is spread over the ground devices.

    ``alpha`` is the offloadable fraction: within each device a uniformly
    random alpha share of its samples may leave the device, the rest are
    pinned for privacy.
    """

    mode: str
    shard_count: int = 200
    shards_per_device: int = 4
    alpha: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in (MODE_IID, MODE_SHARD_NONIID):
            raise PartitionConfigError(f"unknown partition mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise PartitionConfigError("alpha must lie in [0, 1]")
        if self.mode == MODE_SHARD_NONIID:
            if self.shard_count < 1 or self.shards_per_device < 1:
                raise PartitionConfigError("shard counts must be >= 1")
            if self.shard_count % self.shards_per_device != 0:
                raise PartitionConfigError(
                    "shard_count must be divisible by shards_per_device"
                )

    @property
    def device_count(self) -> int:
        if self.mode == MODE_SHARD_NONIID:
            return self.shard_count // self.shards_per_device
        raise PartitionConfigError("iid mode takes the device count from layout")


@dataclass(frozen=True)
class LocalTrainConfig:
    """Per-round local training knobs shared by every node."""

    local_iterations: int
    learning_rate: float
    batch_policy: str = BATCH_DATASET_OVER_H
    batch_size: int | None = None

    def __post_init__(self) -> None:
        if self.local_iterations < 1:
            raise TrainConfigError("local_iterations must be >= 1")
        if not self.learning_rate > 0:
            raise TrainConfigError("learning_rate must be > 0")
        if self.batch_policy not in (BATCH_DATASET_OVER_H, BATCH_FIXED):
            raise TrainConfigError(f"unknown batch policy {self.batch_policy!r}")
        if self.batch_policy == BATCH_FIXED:
            if self.batch_size is None or self.batch_size < 1:
                raise TrainConfigError("fixed policy needs batch_size >= 1")


class DatasetLedger:
    """Who holds which training samples, as index arrays into the task.

    Layout mirrors the network: one satellite pool, one pool per air node,
    and per ground device an offloadable pool plus a sensitive pool that
    never moves.  ``offload.apply_plan`` consumes this structure directly.
    """

    def __init__(
        self,
        space: np.ndarray,
        air: Sequence[np.ndarray],
        ground_offloadable: Sequence[Sequence[np.ndarray]],
        ground_sensitive: Sequence[Sequence[np.ndarray]],
    ):
        if len(ground_offloadable) != len(air) or len(ground_sensitive) != len(air):
            raise PartitionConfigError("cluster counts disagree across layers")
        for off, sens in zip(ground_offloadable, ground_sensitive):
            if len(off) != len(sens):
                raise PartitionConfigError("device counts disagree in a cluster")
        self.space = np.asarray(space, dtype=np.int64)
        self.air = [np.asarray(a, dtype=np.int64) for a in air]
        self.ground_offloadable = [
            [np.asarray(g, dtype=np.int64) for g in cluster]
            for cluster in ground_offloadable
        ]
        self.ground_sensitive = [
            [np.asarray(g, dtype=np.int64) for g in cluster]
            for cluster in ground_sensitive
        ]

    def copy(self) -> "DatasetLedger":
        return DatasetLedger(
            self.space.copy(),
            [a.copy() for a in self.air],
            [[g.copy() for g in cluster] for cluster in self.ground_offloadable],
            [[g.copy() for g in cluster] for cluster in self.ground_sensitive],
        )

    @property
    def cluster_count(self) -> int:
        return len(self.air)

    def device_indices(self, cluster: int, device: int) -> np.ndarray:
        """All samples a device holds, offloadable first."""
        return np.concatenate(
            [
                self.ground_offloadable[cluster][device],
                self.ground_sensitive[cluster][device],
            ]
        )

    def node_indices(self) -> list[np.ndarray]:
        """Per-node index arrays in aggregation order: space, air, devices."""
        pools = [self.space, *self.air]
        for k in range(self.cluster_count):
            for j in range(len(self.ground_offloadable[k])):
                pools.append(self.device_indices(k, j))
        return pools

    def node_counts(self) -> np.ndarray:
        """Sample counts in aggregation order: space, air nodes, devices."""
        return np.array([p.size for p in self.node_indices()], dtype=float)

    @property
    def total_samples(self) -> int:
        return int(self.node_counts().sum())

    def weights(self) -> np.ndarray:
        """Aggregation weights: post-offload counts over the total."""
        counts = self.node_counts()
        total = counts.sum()
        if total <= 0:
            raise PartitionConfigError("ledger holds no samples")
        return counts / total

    def all_indices(self) -> np.ndarray:
        """The union of every pool, for global-loss invariance checks."""
        parts = [self.space, *self.air]
        for k in range(self.cluster_count):
            parts.extend(self.ground_offloadable[k])
            parts.extend(self.ground_sensitive[k])
        return np.concatenate(parts)


def partition(
    dataset: SyntheticTask,
    spec: PartitionSpec,
    cluster_sizes: Sequence[int] | None = None,
) -> DatasetLedger:
    """Split the training set over ground devices per the partition spec.

    ``cluster_sizes`` lists how many devices each air node serves; the
    devices are filled in order.  Space and air pools start empty: those
    layers collect data only through offloading.
    """
    rng = np.random.default_rng(spec.seed)
    n = dataset.train_count
    if spec.mode == MODE_SHARD_NONIID:
        device_count = spec.device_count
        order = np.argsort(dataset.train_labels, kind="stable")
        shards = np.array_split(order, spec.shard_count)
        shard_order = rng.permutation(spec.shard_count)
        per_device = [
            np.concatenate(
                [
                    shards[s]
                    for s in shard_order[
                        j * spec.shards_per_device : (j + 1) * spec.shards_per_device
                    ]
                ]
            )
            for j in range(device_count)
        ]
    else:
        if cluster_sizes is None:
            raise PartitionConfigError("iid mode needs cluster_sizes for the count")
        device_count = int(sum(cluster_sizes))
        if device_count < 1:
            raise PartitionConfigError("need at least one device")
        per_device = np.array_split(rng.permutation(n), device_count)

    if cluster_sizes is None:
        cluster_sizes = [device_count]
    if sum(cluster_sizes) != device_count:
        raise PartitionConfigError(
            f"cluster_sizes sum to {sum(cluster_sizes)}, expected {device_count}"
        )

    offloadable: list[list[np.ndarray]] = []
    sensitive: list[list[np.ndarray]] = []
    cursor = 0
    for size in cluster_sizes:
        off_row: list[np.ndarray] = []
        sens_row: list[np.ndarray] = []
        for _ in range(size):
            held = per_device[cursor]
            cursor += 1
            shuffled = rng.permutation(held)
            cut = int(round(spec.alpha * shuffled.size))
            off_row.append(np.sort(shuffled[:cut]))
            sens_row.append(np.sort(shuffled[cut:]))
        offloadable.append(off_row)
        sensitive.append(sens_row)

    empty = np.empty(0, dtype=np.int64)
    return DatasetLedger(
        space=empty,
        air=[empty.copy() for _ in cluster_sizes],
        ground_offloadable=offloadable,
        ground_sensitive=sensitive,
    )


# --------------------------------------------------------------------------
# Training


def node_rng(seed: int, round_index: int, layer: str, index: int = 0) -> np.random.Generator:
    """The named random stream for one node in one round.

    Streams are keyed by (seed, round, layer, node index) so the trajectory
    of any node is independent of scheduling and of every other node.
    """
    try:
        code = _LAYER_CODES[layer]
    except KeyError:
        raise TrainConfigError(f"unknown layer {layer!r}") from None
    return np.random.default_rng((seed, round_index, code, index))


def _batch_plan(n: int, config: LocalTrainConfig, rng: np.random.Generator):
    """Index batches for the H local steps, drawn once up front."""
    if config.batch_policy == BATCH_DATASET_OVER_H:
        # One sweep: ceil(n / H) consecutive samples of a fresh permutation
        # per step, so every sample is visited exactly once per round.
        perm = rng.permutation(n)
        size = math.ceil(n / config.local_iterations)
        return [
            perm[h * size : (h + 1) * size]
            for h in range(config.local_iterations)
        ]
    size = min(config.batch_size, n)
    return [
        rng.choice(n, size=size, replace=False)
        for _ in range(config.local_iterations)
    ]


def _run_steps(model, parameters, features, labels, batches, learning_rate):
    w = parameters.copy()
    for step, batch in enumerate(batches):
        if batch.size == 0:
            continue
        _, grad = model.loss_and_grad(w, features[batch], labels[batch])
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(
                f"non-finite gradient at local step {step}; "
                "lower the learning rate"
            )
        w = w - learning_rate * grad
    return w


def local_sgd(
    model,
    state: ModelState,
    features: np.ndarray,
    labels: np.ndarray,
    config: LocalTrainConfig,
    rng: np.random.Generator,
) -> ModelState:
    """H mini-batch gradient steps from the current global model.

    An empty dataset returns the state unchanged; such a node carries zero
    aggregation weight anyway.
    """
    n = int(labels.shape[0])
    if n == 0:
        return state
    batches = _batch_plan(n, config, rng)
    w = _run_steps(model, state.parameters, features, labels, batches,
                   config.learning_rate)
    return ModelState(w, state.round_index)


def satellite_training_with_handover(
    model,
    state: ModelState,
    features: np.ndarray,
    labels: np.ndarray,
    config: LocalTrainConfig,
    rng: np.random.Generator,
    processed_per_pass: Sequence[float] | None = None,
) -> tuple[ModelState, tuple[int, ...]]:
    """Satellite-side SGD split across coverage passes.

    Each pass executes a contiguous block of the H steps, sized by the
    share of samples the latency layer says that pass absorbed.  The batch
    schedule is drawn once before the first pass, so the concatenated
    trajectory is the monolithic ``local_sgd`` trajectory bit for bit; the
    pass structure affects bookkeeping and latency, never the model.
    """
    n = int(labels.shape[0])
    if n == 0:
        count = len(processed_per_pass) if processed_per_pass else 1
        return state, (0,) * count
    batches = _batch_plan(n, config, rng)
    steps = len(batches)
    if not processed_per_pass:
        boundaries = [steps]
    else:
        done = np.cumsum(np.asarray(processed_per_pass, dtype=float))
        total = done[-1]
        if total <= 0:
            boundaries = [steps] + [steps] * (len(done) - 1)
        else:
            boundaries = [int(round(steps * frac / total)) for frac in done]
            boundaries[-1] = steps  # rounding must not drop the tail
    w = state.parameters
    segments: list[int] = []
    start = 0
    for stop in boundaries:
        stop = max(start, min(stop, steps))
        w = _run_steps(model, w, features, labels, batches[start:stop],
                       config.learning_rate)
        segments.append(stop - start)
        start = stop
    return ModelState(w, state.round_index), tuple(segments)


def aggregate(states: Sequence[ModelState], weights: Sequence[float]) -> ModelState:
    """Convex combination of node models into the next global model."""
    if len(states) == 0:
        raise TrainConfigError("nothing to aggregate")
    if len(states) != len(weights):
        raise TrainConfigError("one weight per model required")
    lam = np.asarray(weights, dtype=float)
    if np.any(lam < 0):
        raise TrainConfigError("aggregation weights must be >= 0")
    if abs(float(lam.sum()) - 1.0) > 1e-12:
        raise TrainConfigError(
            f"aggregation weights sum to {float(lam.sum())!r}, expected 1"
        )
    dim = states[0].parameters.shape[0]
    rounds = {s.round_index for s in states}
    if len(rounds) != 1:
        raise TrainConfigError("cannot aggregate models from different rounds")
    stacked = np.stack([s.parameters for s in states])
    if stacked.shape[1] != dim:
        raise TrainConfigError("parameter dimensions disagree")
    merged = lam @ stacked
    return ModelState(merged, states[0].round_index + 1)


class EvalResult(NamedTuple):
    accuracy: float
    loss: float


def evaluate(
    model, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> EvalResult:
    """Accuracy and mean loss on a held-out set."""
    if labels.shape[0] == 0:
        raise TrainConfigError("empty evaluation set")
    predictions = model.predict(parameters, features)
    accuracy = float(np.mean(predictions == labels))
    return EvalResult(accuracy, model.loss(parameters, features, labels))


def global_loss_and_grad(
    model, parameters: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Full-batch loss and gradient, the F(w) the theory reasons about."""
    return model.loss_and_grad(parameters, features, labels)
