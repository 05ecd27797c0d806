"""Dataset ingestion, dequantization, whitening and synthetic 2-D corpora."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DimensionError, DomainError, FormatError, NumericOverflowError
from .numeric import RngStream, as_tensor

LOG_2PI = math.log(2.0 * math.pi)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MATRIX_MAGIC = b"NICEMAT1"


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Example matrix with contiguous train/valid/test row ranges."""

    examples: np.ndarray
    splits: Dict[str, Tuple[int, int]]
    domain: Tuple[float, float] = (-math.inf, math.inf)
    whitening: Optional["WhiteningRecord"] = None
    density: Optional[object] = None  # generating density, known for synthetic data

    def __post_init__(self):
        self.examples = as_tensor(self.examples)
        n = self.examples.shape[0]
        spans = sorted(self.splits.values())
        pos = 0
        for lo, hi in spans:
            if lo != pos or hi < lo:
                raise DimensionError(f"splits must be disjoint and contiguous, got {self.splits}")
            pos = hi
        if pos != n:
            raise DimensionError(f"splits cover {pos} rows but dataset has {n}")

    @property
    def dim(self) -> int:
        return self.examples.shape[1]

    def split(self, name: str) -> np.ndarray:
        lo, hi = self.splits[name]
        view = self.examples[lo:hi]
        view.flags.writeable = False
        return view


def contiguous_splits(n: int, n_valid: int, n_test: int) -> Dict[str, Tuple[int, int]]:
    n_train = n - n_valid - n_test
    if n_train < 1 or n_valid < 0 or n_test < 0:
        raise DimensionError(f"cannot split {n} rows into valid={n_valid}, test={n_test}")
    return {
        "train": (0, n_train),
        "valid": (n_train, n_train + n_valid),
        "test": (n_train + n_valid, n),
    }


# --------------------------------------------------------------------------- dequantization


def dequantize(raw, rng: RngStream, target: str = "unit") -> np.ndarray:
    """Map 8-bit integers to a continuous density support.

    ``target="unit"`` gives ``(raw + u) / 256`` in [0, 1); ``"symmetric"``
    rescales that to [-1, 1). ``u`` is uniform on [0, 1).
    """
    raw = np.asarray(raw)
    if raw.size and (not np.all(np.equal(np.mod(raw, 1), 0)) or raw.min() < 0 or raw.max() > 255):
        raise DomainError("dequantize expects integer pixel values in 0..255")
    x = (raw.astype(np.float64) + rng.uniform(raw.shape)) / 256.0
    if target == "unit":
        return x
    if target == "symmetric":
        return 2.0 * x - 1.0
    raise ValueError(f"unknown dequantization target {target!r}")


def target_interval(target: str) -> Tuple[float, float]:
    return (0.0, 1.0) if target == "unit" else (-1.0, 1.0)


# --------------------------------------------------------------------------- whitening


@dataclass
class WhiteningRecord:
    """Affine map ``z = x @ matrix.T + offset`` with its log|det|.

    ``kind`` is ``"zca"``, ``"approximate"`` or ``"none"``.
    """

    kind: str
    matrix: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    log_abs_det: float = 0.0

    @classmethod
    def identity(cls) -> "WhiteningRecord":
        return cls("none")


def zca_fit(train, eps: float = 1e-5) -> WhiteningRecord:
    x = as_tensor(train)
    if x.shape[0] < 2:
        raise DimensionError("ZCA needs at least two examples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    try:
        lam, u = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericOverflowError(f"covariance eigensolve failed: {exc}", "zca") from exc
    lam = lam + eps
    if np.any(lam <= 0):
        raise NumericOverflowError("covariance is not positive definite; raise eps", "zca")
    w = (u / np.sqrt(lam)) @ u.T
    return WhiteningRecord("zca", w, -w @ mean, float(-0.5 * np.log(lam).sum()))


def _lower_from_params(strict: np.ndarray, log_diag: np.ndarray, sign: np.ndarray) -> np.ndarray:
    return np.tril(strict, -1) + np.diag(sign * np.exp(log_diag))


def approx_whitening_fit(
    train,
    rng: RngStream,
    epochs: int = 200,
    learning_rate: float = 1e-3,
    decay: float = 0.9,
    momentum: float = 0.9,
    batch_size: int = 256,
    patience: int = 10,
    valid_fraction: float = 0.1,
    history: Optional[list] = None,
) -> WhiteningRecord:
    """Fit ``z = L x + b`` (L lower triangular) under a standard Gaussian on ``z``.

    RMSProp with momentum on minibatches; the diagonal of L is stored as a fixed
    sign times ``exp(log_diag)`` so it never crosses zero. Training stops when
    the held-out NLL has not improved for ``patience`` epochs and the best
    parameters are returned. Per-epoch ``(train_nll, valid_nll)`` pairs are
    appended to ``history`` when given.
    """
    x = as_tensor(train)
    n, d = x.shape
    if n < 2:
        raise DimensionError("approximate whitening needs at least two examples")
    order = rng.permutation(n)
    n_valid = max(1, int(round(n * valid_fraction))) if n > 2 else 0
    valid = x[order[:n_valid]] if n_valid else x
    fit = x[order[n_valid:]]

    strict = np.zeros((d, d))
    log_diag = np.zeros(d)
    sign = np.ones(d)
    bias = np.zeros(d)
    params = [strict, log_diag, bias]
    cache = [np.zeros_like(p) for p in params]
    velocity = [np.zeros_like(p) for p in params]
    mask = np.tril(np.ones((d, d)), -1)

    def nll(data):
        z = data @ _lower_from_params(strict, log_diag, sign).T + bias
        return 0.5 * (z * z).sum(axis=1).mean() + 0.5 * d * LOG_2PI - log_diag.sum()

    best = (nll(valid), [p.copy() for p in params])
    stale = 0
    for _ in range(epochs):
        perm = rng.permutation(fit.shape[0])
        for start in range(0, fit.shape[0], batch_size):
            xb = fit[perm[start:start + batch_size]]
            lower = _lower_from_params(strict, log_diag, sign)
            z = xb @ lower.T + bias
            gz = z / xb.shape[0]
            g_lower = gz.T @ xb
            grads = [
                g_lower * mask,
                np.diag(g_lower) * sign * np.exp(log_diag) - 1.0,
                gz.sum(axis=0),
            ]
            for p, g, c, v in zip(params, grads, cache, velocity):
                c *= decay
                c += (1.0 - decay) * g * g
                v *= momentum
                v -= learning_rate * g / np.sqrt(c + 1e-8)
                p += v
        train_nll, valid_nll = nll(fit), nll(valid)
        if not (np.isfinite(train_nll) and np.isfinite(valid_nll)):
            raise NumericOverflowError("approximate whitening diverged", "approx_whitening")
        if history is not None:
            history.append((float(train_nll), float(valid_nll)))
        if valid_nll < best[0]:
            best = (valid_nll, [p.copy() for p in params])
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break

    strict, log_diag, bias = best[1]
    lower = _lower_from_params(strict, log_diag, sign)
    return WhiteningRecord("approximate", lower, bias, float(log_diag.sum()))


def apply_whitening(record: Optional[WhiteningRecord], x) -> np.ndarray:
    x = as_tensor(x)
    if record is None or record.kind == "none":
        return x
    return x @ record.matrix.T + record.offset


def invert_whitening(record: Optional[WhiteningRecord], z) -> np.ndarray:
    z = as_tensor(z)
    if record is None or record.kind == "none":
        return z
    rhs = (z - record.offset).T
    try:
        if record.kind == "approximate":
            from scipy.linalg import solve_triangular

            x = solve_triangular(record.matrix, rhs, lower=True)
        else:
            x = np.linalg.solve(record.matrix, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericOverflowError(f"whitening map is singular: {exc}", "whitening") from exc
    if not np.all(np.isfinite(x)):
        raise NumericOverflowError("whitening map is singular", "whitening")
    return x.T


# --------------------------------------------------------------------------- file formats


def _open_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(blob: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(blob) < 4:
        raise FormatError(f"{what}: file too short for an IDX header", offset=len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{what}: truncated IDX header", offset=len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) < header + count:
        raise FormatError(
            f"{what}: truncated payload, expected {header + count} bytes, got {len(blob)}",
            offset=len(blob),
        )
    if len(blob) > header + count:
        raise FormatError(f"{what}: {len(blob) - header - count} trailing bytes", offset=header + count)
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path=None):
    """Read an IDX image file (optionally gzipped) as an ``N x (rows*cols)`` uint8 matrix.

    With ``labels_path`` a ``(images, labels)`` pair is returned.
    """
    images = _parse_idx(_open_maybe_gzip(images_path), IDX_IMAGE_MAGIC, str(images_path))
    images = images.reshape(images.shape[0], -1).copy()
    if labels_path is None:
        return images
    labels = _parse_idx(_open_maybe_gzip(labels_path), IDX_LABEL_MAGIC, str(labels_path)).copy()
    if labels.shape[0] != images.shape[0]:
        raise FormatError(f"{labels.shape[0]} labels for {images.shape[0]} images")
    return images, labels


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (3-D arrays become image files, 1-D label files)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def save_matrix(path, matrix) -> None:
    """Write a float64 matrix as NICEMAT1 binary, or CSV when ``path`` ends in ``.csv``."""
    m = as_tensor(matrix)
    path = os.fspath(path)
    if path.endswith(".csv"):
        np.savetxt(path, m, delimiter=",", fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + struct.pack("<II", *m.shape))
        fh.write(m.astype("<f8").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] == MATRIX_MAGIC:
        if len(blob) < 16:
            raise FormatError("truncated NICEMAT1 header", offset=len(blob))
        rows, cols = struct.unpack("<II", blob[8:16])
        need = 16 + 8 * rows * cols
        if len(blob) != need:
            raise FormatError(f"NICEMAT1 payload should end at {need}", offset=len(blob))
        return np.frombuffer(blob, dtype="<f8", offset=16).astype(np.float64).reshape(rows, cols)
    try:
        m = np.loadtxt(blob.decode("utf-8").splitlines(), delimiter=",", ndmin=2)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: neither NICEMAT1 nor CSV ({exc})", offset=0) from exc
    return m.astype(np.float64)


# --------------------------------------------------------------------------- synthetic data


@dataclass
class GaussianMixture2D:
    means: np.ndarray
    std: float = 0.5
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        w = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        self.weights = w / w.sum()

    def log_density(self, x) -> np.ndarray:
        x = as_tensor(x)
        d2 = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        comp = np.log(self.weights) - d2 / (2 * self.std**2) - np.log(2 * np.pi * self.std**2)
        top = comp.max(axis=1, keepdims=True)
        return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0]

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        comp = np.searchsorted(np.cumsum(self.weights), rng.uniform(n), side="right")
        comp = np.minimum(comp, len(self.weights) - 1)
        return self.means[comp] + self.std * rng.normal((n, 2))


@dataclass
class Ring2D:
    """Radius ``|N(radius, width^2)|``, angle uniform."""

    radius: float = 2.0
    width: float = 0.2

    def log_density(self, x) -> np.ndarray:
        x = as_tensor(x)
        r = np.hypot(x[:, 0], x[:, 1])
        near = -0.5 * ((r - self.radius) / self.width) ** 2
        far = -0.5 * ((r + self.radius) / self.width) ** 2
        radial = np.logaddexp(near, far) - 0.5 * LOG_2PI - math.log(self.width)
        return radial - np.log(2 * np.pi * np.maximum(r, 1e-300))

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        r = np.abs(self.radius + self.width * rng.normal(n))
        theta = 2 * np.pi * rng.uniform(n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


TOY_DEFAULTS = {
    "gaussian-mixture": lambda: GaussianMixture2D([[-2.0, 0.0], [2.0, 0.0]], std=1.0),
    "ring": lambda: Ring2D(),
}


def make_toy2d(kind: str, n: int, rng: RngStream, density=None,
               valid_fraction: float = 0.1, test_fraction: float = 0.1) -> Dataset:
    if n < 100:
        raise ValueError("toy datasets need n >= 100")
    if density is None:
        if kind not in TOY_DEFAULTS:
            raise ValueError(f"unknown toy kind {kind!r}; choose from {sorted(TOY_DEFAULTS)}")
        density = TOY_DEFAULTS[kind]()
    x = density.sample(n, rng)
    n_valid, n_test = int(n * valid_fraction), int(n * test_fraction)
    return Dataset(x, contiguous_splits(n, n_valid, n_test), density=density)


WHITENING_MAGIC = b"NICEWHT1"
_KIND_CODES = {"none": 0, "zca": 1, "approximate": 2}


def save_whitening(path, record: WhiteningRecord, dim: int) -> None:
    """``NICEWHT1`` file: magic, u8 kind, u32 D, then float64 matrix, offset, log|det|."""
    matrix = np.eye(dim) if record.matrix is None else record.matrix
    offset = np.zeros(dim) if record.offset is None else record.offset
    with open(path, "wb") as fh:
        fh.write(WHITENING_MAGIC + struct.pack("<BI", _KIND_CODES[record.kind], dim))
        for arr in (matrix, offset, np.array([record.log_abs_det])):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_whitening(path) -> WhiteningRecord:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != WHITENING_MAGIC:
        raise FormatError(f"{path}: not a NICEWHT1 file", offset=0)
    if len(blob) < 13:
        raise FormatError("truncated whitening header", offset=len(blob))
    code, dim = struct.unpack("<BI", blob[8:13])
    need = 13 + 8 * (dim * dim + dim + 1)
    if len(blob) != need:
        raise FormatError(f"whitening payload should end at {need}", offset=len(blob))
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if code not in kinds:
        raise FormatError(f"unknown whitening kind code {code}", offset=8)
    vals = np.frombuffer(blob, dtype="<f8", offset=13).astype(np.float64)
    kind = kinds[code]
    if kind == "none":
        return WhiteningRecord.identity()
    return WhiteningRecord(kind, vals[: dim * dim].reshape(dim, dim), vals[dim * dim: dim * dim + dim],
                           float(vals[-1]))
