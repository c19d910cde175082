"""Small capsule classifier and its training loop.

The model is deliberately minimal: one linear feature layer carves the
flattened image into primary capsules, and a single capsule layer routes
them to one output capsule per class.  The class whose output capsule has
the largest activation wins.  Everything trainable flows through the
:mod:`capsroute.autodiff` tape, so the training step is the tape's exact
reverse pass plus Adam.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from os import PathLike
from typing import Callable

import numpy as np

from . import capsnet, routing
from .autodiff import Tape, capsule_layer_op
from .data import LabeledImages

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainingDivergedError",
    "Adam",
    "CapsuleClassifier",
    "train_classifier",
    "accuracy",
    "write_metrics_csv",
    "METRICS_HEADER",
]

METRICS_HEADER = ["epoch", "train_loss", "train_accuracy", "test_accuracy", "seconds"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, batching, and architecture knobs for one training run."""

    algo: str = "fm"
    loss: str = "margin"
    epochs: int = 20
    learning_rate: float = 0.001
    batch_size: int = 128
    seed: int = 0
    n_primary: int = 16
    capsule_dim: int = 16
    n_classes: int = 10
    iterations: int = 3  # routing iterations (dynamic algorithm only)

    def __post_init__(self):
        if self.algo not in ("fm", "dynamic"):
            raise ValueError(f"algo must be 'fm' or 'dynamic', got {self.algo!r}")
        if self.loss not in ("margin", "softmax"):
            raise ValueError(f"loss must be 'margin' or 'softmax', got {self.loss!r}")
        if self.batch_size < 2:
            raise ValueError("batch norm needs batches of at least 2 samples")
        root = math.isqrt(self.capsule_dim)
        if root * root != self.capsule_dim:
            raise ValueError(f"capsule_dim must be a perfect square, got {self.capsule_dim}")


@dataclass(frozen=True)
class EpochStats:
    """One row of the training log."""

    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    seconds: float


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; the run cannot continue honestly."""


class Adam:
    """Adam over a named parameter dict, updating the arrays in place.

    In-place steps keep array identity stable, so checkpoint references and
    the batch-norm state view stay attached to the live parameters.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-7,
    ):
        self.params = params
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.steps = 0
        self._m = {name: np.zeros_like(p) for name, p in params.items()}
        self._v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        bias1 = 1.0 - self.beta1**self.steps
        bias2 = 1.0 - self.beta2**self.steps
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class CapsuleClassifier:
    """Linear features -> primary capsules -> one routed capsule layer."""

    def __init__(self, feature_w: np.ndarray, layer: capsnet.TransformWeights, config: TrainConfig):
        expected = config.n_primary * config.capsule_dim
        if feature_w.ndim != 2 or feature_w.shape[1] != expected:
            raise ValueError(
                f"feature weights must be (pixels, {expected}), got {feature_w.shape}"
            )
        self.feature_w = feature_w
        self.layer = layer
        self.config = config

    @classmethod
    def create(cls, in_features: int, config: TrainConfig, rng: np.random.Generator) -> "CapsuleClassifier":
        bound = 1.0 / math.sqrt(in_features)
        feature_w = rng.uniform(-bound, bound, size=(in_features, config.n_primary * config.capsule_dim))
        layer = capsnet.TransformWeights.initialize(
            config.n_primary, config.n_classes, config.capsule_dim, rng
        )
        return cls(feature_w, layer, config)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "feature_w": self.feature_w,
            "matrices": self.layer.matrices,
            "bn_gamma": self.layer.bn_gamma,
            "bn_beta": self.layer.bn_beta,
        }

    # -- forward passes ------------------------------------------------------

    def batch_loss(self, images: np.ndarray, labels: np.ndarray):
        """Training-mode forward on the tape.

        Returns (tape, loss node, per-sample predicted labels).  Side
        effects: the layer's batch-norm running statistics are updated.
        """
        cfg = self.config
        tape = Tape()
        x = tape.constant(images)
        feature_w = tape.parameter("feature_w", self.feature_w)
        matrices = tape.parameter("matrices", self.layer.matrices)
        gamma = tape.parameter("bn_gamma", self.layer.bn_gamma)
        beta = tape.parameter("bn_beta", self.layer.bn_beta)

        features = tape.matmul(x, feature_w)
        primary = tape.squash(
            tape.reshape(features, (images.shape[0], cfg.n_primary, cfg.capsule_dim))
        )
        _, _, activation = capsule_layer_op(
            tape,
            primary,
            matrices,
            gamma,
            beta,
            self.layer.bn_params(),
            algo=cfg.algo,
            training=True,
            iterations=cfg.iterations,
        )
        if cfg.loss == "margin":
            targets = np.zeros((labels.size, cfg.n_classes))
            targets[np.arange(labels.size), labels] = 1.0
            loss = tape.margin_loss(activation, targets)
        else:
            loss = tape.softmax_cross_entropy(activation, labels)
        return tape, loss, activation.value.argmax(axis=-1)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Inference labels (batch-norm uses the running statistics)."""
        cfg = self.config
        features = np.matmul(images, self.feature_w)
        primary = capsnet.primary_caps(features, cfg.n_primary, cfg.capsule_dim)
        result = capsnet.capsule_layer_forward(
            primary,
            self.layer,
            algo=cfg.algo,
            training=False,
            dynamic_config=routing.DynamicRoutingConfig(iterations=cfg.iterations),
        )
        return result.activation.argmax(axis=-1)

    # -- checkpointing ---------------------------------------------------------

    def to_arrays(self) -> list[np.ndarray]:
        return [self.feature_w] + self.layer.to_arrays()

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], config: TrainConfig) -> "CapsuleClassifier":
        if len(arrays) != 8:
            raise ValueError(f"expected 8 checkpoint tensors for a classifier, got {len(arrays)}")
        return cls(arrays[0], capsnet.TransformWeights.from_arrays(arrays[1:]), config)

    def save(self, path: str | PathLike) -> None:
        capsnet.save_checkpoint(path, self.to_arrays())

    @classmethod
    def load(cls, path: str | PathLike, config: TrainConfig) -> "CapsuleClassifier":
        return cls.from_arrays(capsnet.load_checkpoint(path), config)


def _flatten(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float((np.asarray(predicted) == np.asarray(labels)).mean())


def train_classifier(
    model: CapsuleClassifier,
    train_set: LabeledImages,
    test_set: LabeledImages,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> list[EpochStats]:
    """Adam + minibatch loop; returns one :class:`EpochStats` per epoch.

    Shuffling, the optimizer, and every forward pass draw only from the
    config seed, so runs are exactly repeatable.  A trailing batch of one
    sample is dropped (training-mode batch norm needs two).  A non-finite
    loss raises :class:`TrainingDivergedError` with the failing position.
    """
    cfg = model.config
    rng = np.random.default_rng(cfg.seed)
    train_x = _flatten(train_set.images)
    train_y = np.asarray(train_set.labels, dtype=np.int64)
    test_x = _flatten(test_set.images)
    test_y = np.asarray(test_set.labels, dtype=np.int64)
    adam = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(train_x.shape[0])
        loss_total = 0.0
        correct = 0
        seen = 0
        for start in range(0, order.size, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            if batch_idx.size < 2:
                continue
            xb = train_x[batch_idx]
            yb = train_y[batch_idx]
            try:
                tape, loss, predicted = model.batch_loss(xb, yb)
            except ValueError as exc:
                # the kernels reject non-finite inputs on sight; when the
                # parameters themselves went non-finite that is divergence,
                # not a usage error
                if any(not np.isfinite(p).all() for p in model.parameters().values()):
                    raise TrainingDivergedError(
                        f"non-finite parameters at epoch {epoch}, batch starting "
                        f"at sample {start} (seed {cfg.seed}): {exc}"
                    ) from exc
                raise
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"loss became {float(loss.value)!r} at epoch {epoch}, "
                    f"batch starting at sample {start} (seed {cfg.seed})"
                )
            adam.step(tape.backward(loss))
            loss_total += float(loss.value) * batch_idx.size
            correct += int((predicted == yb).sum())
            seen += batch_idx.size
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_total / seen,
            train_accuracy=correct / seen,
            test_accuracy=accuracy(model.predict(test_x), test_y),
            seconds=time.perf_counter() - started,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def write_metrics_csv(path: str | PathLike, history: list[EpochStats]) -> None:
    """One row per epoch under the ``METRICS_HEADER`` columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for s in history:
            writer.writerow(
                [s.epoch, f"{s.train_loss:.6f}", f"{s.train_accuracy:.4f}",
                 f"{s.test_accuracy:.4f}", f"{s.seconds:.3f}"]
            )
