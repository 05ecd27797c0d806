"""Coupling layers, the diagonal scaling layer and their composition."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DimensionError, NumericOverflowError, SingularityError
from .numeric import (
    GradientTape,
    MlpParams,
    as_tensor,
    init_mlp,
    mlp_backward,
    mlp_forward,
    seeded_rng,
)

SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class Partition:
    """Split of ``range(dim)`` into an unchanged block ``i1`` and a modified block ``i2``."""

    i1: tuple
    i2: tuple

    def __post_init__(self):
        object.__setattr__(self, "i1", tuple(int(i) for i in self.i1))
        object.__setattr__(self, "i2", tuple(int(i) for i in self.i2))
        if not self.i1 or not self.i2:
            raise DimensionError("both partition blocks must be nonempty")
        both = sorted(self.i1 + self.i2)
        if both != list(range(len(both))):
            raise DimensionError("partition blocks must be disjoint and cover 0..D-1")

    @property
    def dim(self) -> int:
        return len(self.i1) + len(self.i2)

    def swapped(self) -> "Partition":
        return Partition(self.i2, self.i1)

    @classmethod
    def parity(cls, dim: int, modify: str) -> "Partition":
        """Even/odd split of a flat vector; ``modify`` names the block that changes."""
        even = tuple(range(0, dim, 2))
        odd = tuple(range(1, dim, 2))
        if modify == "even":
            return cls(odd, even)
        if modify == "odd":
            return cls(even, odd)
        raise ValueError(f"modify must be 'even' or 'odd', got {modify!r}")


class CouplingLaw(enum.Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    AFFINE = "affine"

    def coupling_width(self, n_modified: int) -> int:
        """Output width the coupling function must produce."""
        return 2 * n_modified if self is CouplingLaw.AFFINE else n_modified

    def _multiplier(self, b: np.ndarray) -> np.ndarray:
        mult = b[:, : b.shape[1] // 2] if self is CouplingLaw.AFFINE else b
        if np.any(np.abs(mult) < SINGULAR_TOL):
            raise SingularityError(f"{self.value} coupling multiplier below {SINGULAR_TOL}")
        return mult

    def apply(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``g(a; b)`` and the per-row log|det dg/da|."""
        if self is CouplingLaw.ADDITIVE:
            return a + b, np.zeros(a.shape[0])
        mult = self._multiplier(b)
        logdet = np.log(np.abs(mult)).sum(axis=1)
        if self is CouplingLaw.MULTIPLICATIVE:
            return a * mult, logdet
        return a * mult + b[:, mult.shape[1]:], logdet

    def invert(self, y: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self is CouplingLaw.ADDITIVE:
            return y - b
        mult = self._multiplier(b)
        if self is CouplingLaw.MULTIPLICATIVE:
            return y / mult
        return (y - b[:, mult.shape[1]:]) / mult

    def backward(self, a, b, grad_y, grad_logdet) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``L(g(a; b), logdet)`` w.r.t. ``a`` and ``b``."""
        if self is CouplingLaw.ADDITIVE:
            return grad_y, grad_y
        mult = self._multiplier(b)
        g_mult = grad_y * a + grad_logdet[:, None] / mult
        if self is CouplingLaw.MULTIPLICATIVE:
            return grad_y * mult, g_mult
        return grad_y * mult, np.concatenate([g_mult, grad_y], axis=1)


@dataclass
class CouplingTape:
    x: np.ndarray
    b: np.ndarray
    mlp: GradientTape


@dataclass
class CouplingLayer:
    partition: Partition
    coupling_fn: MlpParams
    law: CouplingLaw = CouplingLaw.ADDITIVE

    def __post_init__(self):
        n1, n2 = len(self.partition.i1), len(self.partition.i2)
        if self.coupling_fn.in_dim != n1 or self.coupling_fn.out_dim != self.law.coupling_width(n2):
            raise DimensionError(
                f"coupling function maps {self.coupling_fn.in_dim}->{self.coupling_fn.out_dim}, "
                f"partition needs {n1}->{self.law.coupling_width(n2)}"
            )
        self._i1 = np.array(self.partition.i1)
        self._i2 = np.array(self.partition.i2)

    @property
    def dim(self) -> int:
        return self.partition.dim

    def _check(self, x):
        x = as_tensor(x)
        if x.shape[1] != self.dim:
            raise DimensionError(f"coupling layer expects width {self.dim}, got {x.shape[1]}")
        return x

    def forward(self, x) -> tuple[np.ndarray, np.ndarray, CouplingTape]:
        """Return ``(y, logdet_per_row, tape)``."""
        x = self._check(x)
        b, mtape = mlp_forward(self.coupling_fn, x[:, self._i1])
        with np.errstate(over="ignore", invalid="ignore"):
            y2, logdet = self.law.apply(x[:, self._i2], b)
        y = x.copy()
        y[:, self._i2] = y2
        return y, logdet, CouplingTape(x, b, mtape)

    def inverse(self, y) -> np.ndarray:
        y = self._check(y)
        b, _ = mlp_forward(self.coupling_fn, y[:, self._i1])
        x = y.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            x[:, self._i2] = self.law.invert(y[:, self._i2], b)
        return x

    def backward(self, tape: CouplingTape, grad_y, grad_logdet) -> tuple[MlpParams, np.ndarray]:
        grad_y = as_tensor(grad_y)
        if grad_y.shape != tape.x.shape:
            raise DimensionError(f"gradient shape {grad_y.shape} != layer output {tape.x.shape}")
        grad_logdet = np.broadcast_to(np.asarray(grad_logdet, dtype=float), (grad_y.shape[0],))
        ga, gb = self.law.backward(tape.x[:, self._i2], tape.b, grad_y[:, self._i2], grad_logdet)
        pgrads, g_in = mlp_backward(tape.mlp, gb)
        grad_x = grad_y.copy()
        grad_x[:, self._i2] = ga
        grad_x[:, self._i1] += g_in
        return pgrads, grad_x


def coupling_forward(layer: CouplingLayer, x):
    y, _, tape = layer.forward(x)
    return y, tape


def coupling_inverse(layer: CouplingLayer, y):
    return layer.inverse(y)


@dataclass
class ScalingLayer:
    """Top layer ``h = exp(s) * x``; log-det is ``sum(s)``."""

    log_scale: np.ndarray

    def __post_init__(self):
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(-1)


@dataclass
class FlowTape:
    couplings: List[CouplingTape] = field(default_factory=list)
    pre_scale: np.ndarray = None  # type: ignore[assignment]


@dataclass
class FlowGrads:
    couplings: List[MlpParams]
    log_scale: np.ndarray

    def arrays(self) -> List[np.ndarray]:
        out = []
        for g in self.couplings:
            out.extend(g.arrays())
        out.append(self.log_scale)
        return out


@dataclass
class FlowModel:
    couplings: List[CouplingLayer]
    scaling: ScalingLayer

    def __post_init__(self):
        if self.scaling.log_scale.shape != (self.dim,):
            raise DimensionError("scaling layer width does not match the data dimension")
        for k, layer in enumerate(self.couplings):
            if layer.dim != self.dim:
                raise DimensionError(f"coupling {k} has width {layer.dim}, expected {self.dim}")

    @property
    def dim(self) -> int:
        return self.scaling.log_scale.shape[0]

    @property
    def is_volume_preserving_stack(self) -> bool:
        return all(c.law is CouplingLaw.ADDITIVE for c in self.couplings)

    def parameters(self) -> List[np.ndarray]:
        """Live parameter arrays; updating them in place updates the model."""
        out = []
        for c in self.couplings:
            out.extend(c.coupling_fn.arrays())
        out.append(self.scaling.log_scale)
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "FlowModel":
        return FlowModel(
            [CouplingLayer(c.partition, c.coupling_fn.copy(), c.law) for c in self.couplings],
            ScalingLayer(self.scaling.log_scale.copy()),
        )

    def _input(self, x):
        x = as_tensor(x)
        if x.shape[1] != self.dim:
            raise DimensionError(f"flow expects width {self.dim}, got {x.shape[1]}")
        return x

    def forward(self, x) -> tuple[np.ndarray, np.ndarray, FlowTape]:
        """Encode ``x``; returns ``(h, log_det_per_row, tape)``."""
        h = self._input(x)
        log_det = np.zeros(h.shape[0])
        tape = FlowTape()
        for k, layer in enumerate(self.couplings):
            try:
                h, ld, ctape = layer.forward(h)
            except NumericOverflowError as exc:
                raise NumericOverflowError(f"non-finite output in coupling {k}", "coupling", k) from exc
            _raise_if_nonfinite(h, k)
            log_det = log_det + ld
            tape.couplings.append(ctape)
        tape.pre_scale = h
        s = self.scaling.log_scale
        h = h * np.exp(s)
        _raise_if_nonfinite(h, len(self.couplings))
        return h, log_det + s.sum(), tape

    def inverse(self, h) -> np.ndarray:
        x = self._input(h) * np.exp(-self.scaling.log_scale)
        _raise_if_nonfinite(x, len(self.couplings))
        for k in range(len(self.couplings) - 1, -1, -1):
            try:
                x = self.couplings[k].inverse(x)
            except NumericOverflowError as exc:
                raise NumericOverflowError(f"non-finite output in coupling {k}", "coupling", k) from exc
            _raise_if_nonfinite(x, k)
        return x

    def backward(self, tape: FlowTape, grad_h, grad_logdet) -> tuple[FlowGrads, np.ndarray]:
        """Gradients of a scalar ``L(h, log_det)`` given ``dL/dh`` and ``dL/dlog_det``.

        ``grad_logdet`` is a scalar or one value per row. Returns the parameter
        gradients and ``dL/dx``.
        """
        grad_h = as_tensor(grad_h)
        if grad_h.shape != tape.pre_scale.shape:
            raise DimensionError(f"grad_h shape {grad_h.shape} != latent shape {tape.pre_scale.shape}")
        if len(tape.couplings) != len(self.couplings):
            raise DimensionError("tape does not come from this model")
        grad_logdet = np.broadcast_to(np.asarray(grad_logdet, dtype=float), (grad_h.shape[0],))
        scale = np.exp(self.scaling.log_scale)
        g_s = (grad_h * tape.pre_scale).sum(axis=0) * scale + grad_logdet.sum()
        g = grad_h * scale
        grads: List[MlpParams] = [None] * len(self.couplings)  # type: ignore[list-item]
        for k in range(len(self.couplings) - 1, -1, -1):
            grads[k], g = self.couplings[k].backward(tape.couplings[k], g, grad_logdet)
        return FlowGrads(grads, g_s), g


def _raise_if_nonfinite(arr, index):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite intermediate after layer {index}", "flow", index)


def flow_forward(model: FlowModel, x):
    return model.forward(x)


def flow_inverse(model: FlowModel, h):
    return model.inverse(h)


def flow_backward(model: FlowModel, tape: FlowTape, grad_h, grad_logdet):
    return model.backward(tape, grad_h, grad_logdet)


def reference_partitions(dim: int, n_couplings: int = 4) -> List[Partition]:
    """Alternating parity partitions: layers 1, 3, ... modify the even block."""
    first = Partition.parity(dim, "even")
    return [first if k % 2 == 0 else first.swapped() for k in range(n_couplings)]


def make_reference_model(
    dim: int,
    hidden_layers: int,
    hidden_units: int,
    seed: int,
    n_couplings: int = 4,
    law: CouplingLaw = CouplingLaw.ADDITIVE,
) -> FlowModel:
    if dim < 2:
        raise DimensionError(f"a coupling flow needs D >= 2, got {dim}")
    rng = seeded_rng(seed)
    layers = []
    for k, part in enumerate(reference_partitions(dim, n_couplings)):
        sizes = [len(part.i1)] + [hidden_units] * hidden_layers + [law.coupling_width(len(part.i2))]
        mlp = init_mlp(sizes, rng.child(f"coupling{k}"))
        if law is not CouplingLaw.ADDITIVE:
            # start multiplicative parts at 1 so the layer begins near identity
            n2 = len(part.i2)
            mlp.biases[-1][:n2] = 1.0
        layers.append(CouplingLayer(part, mlp, law))
    return FlowModel(layers, ScalingLayer(np.zeros(dim)))

