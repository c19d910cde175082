"""Capsule layers around the routing core: transforms, batch norm, losses.

A capsule layer turns a batch of input capsules u (batch, n, k) into
predictions for every output capsule by reshaping each k-vector into a
√k × √k matrix and right-multiplying a per-(input, output) weight matrix —
n·m·k parameters instead of the n·m·k² a full linear map per pair would
need.  The predictions are batch-normalized per (output, feature) across
the batch and input-capsule axes, then routed (FM agreement by default,
dynamic routing as the baseline).

Margin loss and softmax cross entropy operate on the per-class activations.
Parameters persist in a small binary checkpoint format (magic ``CAPS``)
that round-trips bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from os import PathLike

import numpy as np

from . import routing
from .tensor import as_tensor, matmul_lastdims, reduce_sum

__all__ = [
    "TransformWeights",
    "BatchNormParams",
    "MarginLossParams",
    "batch_norm_forward",
    "batch_norm_backward",
    "matrix_transform",
    "primary_caps",
    "capsule_layer_forward",
    "margin_loss",
    "margin_loss_backward",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


@dataclass
class BatchNormParams:
    """Per-feature batch-norm state over a (samples, features) matrix.

    Training mode normalizes with the biased batch statistics and folds them
    into the running values as ``running = momentum * running +
    (1 - momentum) * batch``; inference mode normalizes with the running
    values only.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    def __post_init__(self):
        shapes = {
            self.gamma.shape,
            self.beta.shape,
            self.running_mean.shape,
            self.running_var.shape,
        }
        if len(shapes) != 1 or self.gamma.ndim != 1:
            raise ValueError("batch-norm parameter vectors must share one 1-D shape")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if (self.running_var < 0.0).any():
            raise ValueError("running variance must be non-negative")


@dataclass
class TransformWeights:
    """Weights of one capsule layer.

    ``matrices`` has shape (n_in, n_out, √k, √k): one small square matrix
    per (input, output) pair, applied to the input capsule reshaped
    row-major to √k × √k.  The batch-norm fields normalize the flattened
    predictions per (output, feature) pair, so their vectors have length
    n_out · k.
    """

    matrices: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.matrices.ndim != 4 or self.matrices.shape[2] != self.matrices.shape[3]:
            raise ValueError(
                f"transform matrices must be (n_in, n_out, root_k, root_k), got {self.matrices.shape}"
            )
        expected = (self.n_out * self.k,)
        for name in ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            if getattr(self, name).shape != expected:
                raise ValueError(f"{name} must have shape {expected} (n_out * k)")

    @property
    def n_in(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_out(self) -> int:
        return self.matrices.shape[1]

    @property
    def root_k(self) -> int:
        return self.matrices.shape[2]

    @property
    def k(self) -> int:
        return self.root_k * self.root_k

    @property
    def transform_param_count(self) -> int:
        """Transform parameters: n_in * n_out * k (k per pair, not k^2)."""
        return self.matrices.size

    @classmethod
    def initialize(cls, n_in: int, n_out: int, k: int, rng: np.random.Generator) -> "TransformWeights":
        """Fresh layer weights: matrices i.i.d. uniform on ±1/sqrt(root_k),
        batch norm at identity (gamma 1, beta 0, running stats (0, 1))."""
        root_k = math.isqrt(k)
        if root_k * root_k != k:
            raise ValueError(f"capsule feature count must be a perfect square, got k={k}")
        if min(n_in, n_out) < 1:
            raise ValueError("layer needs at least one input and one output capsule")
        bound = 1.0 / math.sqrt(root_k)
        matrices = rng.uniform(-bound, bound, size=(n_in, n_out, root_k, root_k))
        width = n_out * k
        return cls(
            matrices=matrices,
            bn_gamma=np.ones(width),
            bn_beta=np.zeros(width),
            bn_running_mean=np.zeros(width),
            bn_running_var=np.ones(width),
        )

    def bn_params(self) -> BatchNormParams:
        """Batch-norm view over the flattened (n_out * k) prediction features.

        The vectors are shared (not copied), so in-place running-stat
        updates made through the view land back on this object.
        """
        return BatchNormParams(
            gamma=self.bn_gamma,
            beta=self.bn_beta,
            running_mean=self.bn_running_mean,
            running_var=self.bn_running_var,
            momentum=self.bn_momentum,
            eps=self.bn_eps,
        )

    def to_arrays(self) -> list[np.ndarray]:
        """Checkpoint payload in declaration order (scalars as rank-0)."""
        return [
            self.matrices,
            self.bn_gamma,
            self.bn_beta,
            self.bn_running_mean,
            self.bn_running_var,
            np.asarray(self.bn_momentum),
            np.asarray(self.bn_eps),
        ]

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "TransformWeights":
        if len(arrays) != 7:
            raise ValueError(f"expected 7 checkpoint tensors for a capsule layer, got {len(arrays)}")
        return cls(
            matrices=arrays[0],
            bn_gamma=arrays[1],
            bn_beta=arrays[2],
            bn_running_mean=arrays[3],
            bn_running_var=arrays[4],
            bn_momentum=float(arrays[5]),
            bn_eps=float(arrays[6]),
        )


def batch_norm_forward(x, bn: BatchNormParams, training: bool) -> np.ndarray:
    """Normalize (samples, features) per feature column.

    Training uses the biased batch mean/variance (accumulated in ascending
    sample order) and updates the running statistics in place; it requires
    at least two samples.  Inference applies the running statistics as a
    fixed affine map.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"batch norm expects (samples, features), got rank {x.ndim}")
    if x.shape[1] != bn.gamma.shape[0]:
        raise ValueError(f"feature width {x.shape[1]} does not match parameters ({bn.gamma.shape[0]})")
    if training:
        count = x.shape[0]
        if count < 2:
            raise ValueError("training-mode batch norm needs a batch of at least 2 samples")
        mean = np.asarray(reduce_sum(x, 0)) / count
        centered = x - mean
        var = np.asarray(reduce_sum(centered * centered, 0)) / count
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise ValueError("batch statistics are non-finite")
        inv = 1.0 / np.sqrt(var + bn.eps)
        out = centered * inv * bn.gamma + bn.beta
        bn.running_mean[:] = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mean
        bn.running_var[:] = bn.momentum * bn.running_var + (1.0 - bn.momentum) * var
        return out
    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    return (x - bn.running_mean) * inv * bn.gamma + bn.beta


def batch_norm_backward(x, bn: BatchNormParams, d_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training-mode batch-norm gradient: returns (d_x, d_gamma, d_beta).

    Recomputes the batch statistics from ``x`` so it is independent of any
    running-stat updates the forward pass made.
    """
    x = as_tensor(x)
    d_out = as_tensor(d_out)
    count = x.shape[0]
    if count < 2:
        raise ValueError("training-mode batch norm needs a batch of at least 2 samples")
    mean = np.asarray(reduce_sum(x, 0)) / count
    centered = x - mean
    var = np.asarray(reduce_sum(centered * centered, 0)) / count
    inv = 1.0 / np.sqrt(var + bn.eps)
    x_hat = centered * inv
    d_gamma = np.asarray(reduce_sum(d_out * x_hat, 0))
    d_beta = np.asarray(reduce_sum(d_out, 0))
    d_xhat = d_out * bn.gamma
    d_x = (inv / count) * (
        count * d_xhat
        - np.asarray(reduce_sum(d_xhat, 0))
        - x_hat * np.asarray(reduce_sum(d_xhat * x_hat, 0))
    )
    return d_x, d_gamma, d_beta


def pair_predictions(u: np.ndarray, matrices: np.ndarray) -> np.ndarray:
    """Raw per-pair votes: (batch, n, k) x (n, m, √k, √k) -> (batch, n, m, k).

    Each input capsule is reshaped row-major to √k × √k and right-multiplied
    by every output's matrix, then flattened back.  Accumulation matches
    :func:`capsroute.tensor.matmul_small` bit-for-bit.
    """
    batch, n_in, k = u.shape
    root_k = matrices.shape[2]
    mats = u.reshape(batch, n_in, root_k, root_k)
    prod = matmul_lastdims(mats[:, :, np.newaxis], matrices[np.newaxis])
    return prod.reshape(batch, n_in, matrices.shape[1], k)


def matrix_transform(u, weights: TransformWeights, training: bool) -> np.ndarray:
    """Predictions of one capsule layer: transform every capsule, batch-norm.

    Input (batch, n_in, k) with k = root_k² matching ``weights``; output
    (batch, n_in, n_out, k).  Batch norm runs per (output, feature) over the
    batch × input-capsule samples; training mode therefore needs batch >= 2
    and updates the running statistics in place.
    """
    u = as_tensor(u)
    if u.ndim != 3:
        raise ValueError(f"capsule input must be (batch, n_in, k), got rank {u.ndim}")
    batch, n_in, k = u.shape
    if n_in != weights.n_in or k != weights.k:
        raise ValueError(
            f"input capsules {(n_in, k)} do not match weights ({weights.n_in}, {weights.k})"
        )
    if training and batch < 2:
        raise ValueError("training-mode transform needs a batch of at least 2 samples")
    pred = pair_predictions(u, weights.matrices)
    flat = pred.reshape(batch * n_in, weights.n_out * k)
    normed = batch_norm_forward(flat, weights.bn_params(), training)
    return normed.reshape(batch, n_in, weights.n_out, k)


def primary_caps(features, n: int, k: int) -> np.ndarray:
    """Carve a (batch, width) feature matrix into n squashed k-capsules."""
    features = as_tensor(features)
    if features.ndim != 2:
        raise ValueError(f"primary capsules expect (batch, features), got rank {features.ndim}")
    width = features.shape[1]
    if width != n * k:
        raise ValueError(f"feature width {width} is not divisible into {n} capsules of {k} features")
    return routing.squash(features.reshape(features.shape[0], n, k))


def capsule_layer_forward(
    u,
    weights: TransformWeights,
    algo: str = "fm",
    training: bool = False,
    dynamic_config: routing.DynamicRoutingConfig | None = None,
) -> routing.RoutingResult:
    """Full capsule layer: matrix transform, batch norm, then routing.

    ``algo`` selects "fm" (pairwise-product agreement) or "dynamic" (the
    iterative baseline, ``dynamic_config.iterations`` rounds).  Returns a
    batched :class:`RoutingResult` with leading batch axis; a following
    layer consumes ``result.s_hat``.
    """
    pred = matrix_transform(u, weights, training)
    if algo == "fm":
        return routing._fm_forward(pred)
    if algo == "dynamic":
        config = dynamic_config or routing.DynamicRoutingConfig()
        return routing._dynamic_forward(pred, config.iterations)
    raise ValueError(f"unknown routing algorithm {algo!r} (expected 'fm' or 'dynamic')")


@dataclass(frozen=True)
class MarginLossParams:
    """Two-sided hinge thresholds: present classes pushed above ``m_plus``,
    absent ones below ``m_minus``, the absent side weighted by ``lam``."""

    lam: float = 0.5
    m_plus: float = 0.9
    m_minus: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.m_minus < self.m_plus <= 1.0:
            raise ValueError(
                f"need 0 <= m_minus < m_plus <= 1, got m_minus={self.m_minus}, m_plus={self.m_plus}"
            )
        if self.lam <= 0.0:
            raise ValueError(f"lam must be positive, got {self.lam}")


def _check_margin_inputs(activations, targets):
    a = as_tensor(activations)
    t = as_tensor(targets)
    if a.shape != t.shape or a.ndim != 1:
        raise ValueError("activations and targets must be 1-D with matching length")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("targets must be binary membership indicators (0 or 1)")
    return a, t


def margin_loss(activations, targets, params: MarginLossParams = MarginLossParams()) -> float:
    """Sum over classes of the two-sided squared hinge.

    L_j = t_j * max(0, m_plus - a_j)^2 + lam * (1 - t_j) * max(0, a_j - m_minus)^2.
    """
    a, t = _check_margin_inputs(activations, targets)
    present = np.maximum(0.0, params.m_plus - a)
    absent = np.maximum(0.0, a - params.m_minus)
    per_class = t * present * present + params.lam * (1.0 - t) * absent * absent
    return float(np.asarray(reduce_sum(per_class, 0)))


def margin_loss_backward(
    activations, targets, params: MarginLossParams = MarginLossParams()
) -> np.ndarray:
    """d margin_loss / d activations (zero on the flat side of each hinge)."""
    a, t = _check_margin_inputs(activations, targets)
    present = np.maximum(0.0, params.m_plus - a)
    absent = np.maximum(0.0, a - params.m_minus)
    return -2.0 * t * present + 2.0 * params.lam * (1.0 - t) * absent


def softmax_cross_entropy(activations, label: int) -> float:
    """Cross entropy of softmax(activations) against one true class index.

    Uses the max-subtraction form, so arbitrarily large activations stay
    finite.  Uniform activations over m classes give exactly log(m).
    """
    a = as_tensor(activations)
    if a.ndim != 1 or a.shape[0] < 2:
        raise ValueError("softmax cross entropy needs a 1-D activation vector with >= 2 classes")
    label = int(label)
    if not 0 <= label < a.shape[0]:
        raise ValueError(f"label {label} out of range for {a.shape[0]} classes")
    shifted = a - a.max()
    log_total = math.log(float(np.asarray(reduce_sum(np.exp(shifted), 0))))
    return float(log_total - shifted[label])


def softmax_cross_entropy_backward(activations, label: int) -> np.ndarray:
    """d softmax_cross_entropy / d activations = softmax(a) - onehot(label)."""
    a = as_tensor(activations)
    label = int(label)
    shifted = a - a.max()
    exp = np.exp(shifted)
    probs = exp / np.asarray(reduce_sum(exp, 0))
    probs[label] -= 1.0
    return probs


# --- checkpoint format -------------------------------------------------------
#
# magic "CAPS" | u32 version | u32 tensor count
# per tensor:   u32 rank | rank * u32 dims
# payload:      all tensors' float64 values, little-endian, C order,
#               in the same declaration order as the headers.

CHECKPOINT_MAGIC = b"CAPS"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file (bad magic, wrong version, truncation)."""


def save_checkpoint(path: str | PathLike, arrays: list[np.ndarray]) -> None:
    """Write tensors to ``path`` in the CAPS binary format (bit-exact)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    parts = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(arrays))]
    for arr in arrays:
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for arr in arrays:
        parts.append(arr.astype("<f8", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str | PathLike) -> list[np.ndarray]:
    """Read tensors back from the CAPS binary format.

    Raises :class:`CheckpointError` on a bad magic number, an unsupported
    version, or a file shorter than its own headers promise.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError(f"checkpoint too short to hold a header ({len(blob)} bytes)")
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    shapes: list[tuple[int, ...]] = []
    for _ in range(count):
        if offset + 4 > len(blob):
            raise CheckpointError("checkpoint truncated inside shape metadata")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 4 * rank > len(blob):
            raise CheckpointError("checkpoint truncated inside shape metadata")
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        shapes.append(tuple(int(d) for d in shape))
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * size
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"checkpoint truncated: tensor of shape {shape} needs {nbytes} payload bytes"
            )
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        arrays.append(arr.astype(np.float64))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return arrays
