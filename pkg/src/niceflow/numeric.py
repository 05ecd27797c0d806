"""Dense float64 arithmetic and hand-derived gradients for ReLU MLPs.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Batches are laid
out with one example per row, so an MLP layer computes ``a @ W.T + b`` with
``W`` stored as ``[out, in]``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import DimensionError, NumericOverflowError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a 2-D float64 array (a 1-D input becomes one row)."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a vector or matrix, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, where: str, index=None) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite values in {where}", where=where, index=index)
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul")


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


@dataclass
class MlpParams:
    """Weights ``[out, in]`` and biases ``[out]`` of a ReLU MLP with linear output."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("an MLP needs one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} emits "
                    f"{self.weights[k - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> List[np.ndarray]:
        """Parameter arrays in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


def init_mlp(sizes: Sequence[int], rng: "RngStream", final_scale: float = 0.01) -> MlpParams:
    """Glorot-uniform weights, zero biases, last layer shrunk by ``final_scale``."""
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * a
        if k == n_layers - 1:
            w = w * final_scale
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=DTYPE))
    return MlpParams(weights, biases)


@dataclass
class GradientTape:
    """Forward intermediates of one MLP evaluation.

    ``activations[k]`` is the input to layer ``k``; ``preacts[k]`` its affine
    output before the nonlinearity.
    """

    params: MlpParams
    activations: List[np.ndarray] = field(default_factory=list)
    preacts: List[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, GradientTape]:
    a = as_tensor(x)
    if a.shape[1] != params.in_dim:
        raise DimensionError(f"MLP expects width {params.in_dim}, got {a.shape[1]}")
    tape = GradientTape(params)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.activations.append(a)
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ w.T + b
        tape.preacts.append(z)
        a = z if k == last else relu(z)
    return check_finite(a, "mlp output"), tape


def mlp_backward(tape: GradientTape, output_grad) -> tuple[MlpParams, np.ndarray]:
    """Reverse pass. ReLU'(0) is taken as 0."""
    params = tape.params
    g = as_tensor(output_grad)
    if g.shape != tape.preacts[-1].shape:
        raise DimensionError(
            f"output gradient shape {g.shape} does not match forward output {tape.preacts[-1].shape}"
        )
    n = len(params.weights)
    gw: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    for k in range(n - 1, -1, -1):
        gw[k] = g.T @ tape.activations[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * (tape.preacts[k - 1] > 0.0)
    return MlpParams(gw, gb), g


class RngStream:
    """Deterministic random stream on top of PCG64.

    Normal draws use the Box-Muller transform of two uniforms. ``child(label)``
    derives an independent stream keyed by a string, so adding a new consumer
    never shifts the draws of an existing one.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, self.key + (zlib.crc32(label.encode("utf-8")),))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else z[0]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


def seeded_rng(seed: int) -> RngStream:
    return RngStream(seed)
