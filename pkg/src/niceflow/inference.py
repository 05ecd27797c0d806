"""Ancestral sampling, inpainting, spectrum and latent-sphere export."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .data import WhiteningRecord, apply_whitening, invert_whitening
from .errors import ConfigError, DimensionError
from .flow import FlowModel
from .numeric import RngStream, as_tensor
from .prior import Prior


def sample_model(model: FlowModel, prior: Prior, n: int, rng: RngStream,
                 whitening: Optional[WhiteningRecord] = None) -> np.ndarray:
    """Draw ``h`` from the prior and decode; undo whitening when a record is given."""
    h = prior.sample(n, model.dim, rng)
    return invert_whitening(whitening, model.inverse(h))


# ---------------------------------------------------------------------- inpainting


def step_size(i: int) -> float:
    return 10.0 / (100.0 + i)


@dataclass
class InpaintTask:
    observed_mask: np.ndarray
    observed_values: np.ndarray
    domain: Tuple[float, float] = (0.0, 1.0)
    iterations: int = 1000
    noise_scale: float = 1.0
    seed: int = 0
    init: str = "uniform"

    def __post_init__(self):
        self.observed_mask = np.asarray(self.observed_mask, dtype=bool).reshape(-1)
        self.observed_values = np.asarray(self.observed_values, dtype=np.float64).reshape(-1)
        if self.observed_values.shape != self.observed_mask.shape:
            raise DimensionError("observed_values must have one entry per mask position")
        if self.observed_mask.all():
            raise ValueError("inpainting needs at least one hidden dimension")
        if self.init not in ("uniform", "midpoint", "given"):
            raise ValueError(f"unknown init {self.init!r}")


def log_px_and_grad(model: FlowModel, prior: Prior, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-row log p_X(x) and its gradient w.r.t. ``x``."""
    h, log_det, tape = model.forward(x)
    _, grad_x = model.backward(tape, prior.log_density_grad(h), 1.0)
    return prior.log_density(h) + log_det, grad_x


def inpaint(model: FlowModel, prior: Prior, task: InpaintTask, whitening=None,
            trace: Optional[list] = None) -> np.ndarray:
    """Noisy projected gradient ascent on the hidden coordinates.

    ``x_H <- clip(x_H + a_i * (d log p_X / d x_H + noise_scale * eps))`` with
    ``a_i = 10 / (100 + i)``. Observed coordinates are never touched. With
    ``init="given"`` the hidden entries of ``observed_values`` are the starting
    point. ``trace`` receives ``log p_X`` after every iteration. A whitening
    record, when given, is composed in front of the flow (its log|det| is a
    constant and does not change the ascent direction).
    """
    rng = RngStream(task.seed)
    lo, hi = task.domain
    hidden = ~task.observed_mask
    x = task.observed_values.copy()
    if task.init == "uniform":
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("uniform init needs a bounded domain")
        x[hidden] = lo + (hi - lo) * rng.child("init").uniform(int(hidden.sum()))
    elif task.init == "midpoint":
        x[hidden] = 0.5 * (lo + hi) if np.isfinite(lo + hi) else 0.0
    x = np.clip(x, lo, hi, where=hidden, out=x)
    noise = rng.child("noise")
    jac = None if whitening is None or whitening.kind == "none" else whitening.matrix
    for i in range(task.iterations):
        ll, g = log_px_and_grad(model, prior, apply_whitening(whitening, x))
        g = g[0] if jac is None else (g @ jac)[0]
        eps = task.noise_scale * noise.normal(int(hidden.sum()))
        x[hidden] = np.clip(x[hidden] + step_size(i) * (g[hidden] + eps), lo, hi)
        if trace is not None:
            trace.append(float(log_px_and_grad(model, prior, apply_whitening(whitening, x))[0][0]))
    return x


MASK_PRESETS = (
    "top rows", "bottom rows", "odd pixels", "even pixels", "left side", "right side",
    "middle vertically", "middle horizontally", "75% random", "90% random",
)


def preset_mask(name: str, side: int = 28, rng: Optional[RngStream] = None) -> np.ndarray:
    """Observed-pixel mask (True = observed) for a square ``side x side`` image."""
    key = name.strip().lower().replace("_", " ")
    rows, cols = np.indices((side, side))
    half = side // 2
    quarter = side // 4
    hidden = {
        "top rows": rows < half,
        "bottom rows": rows >= half,
        "odd pixels": (np.arange(side * side) % 2 == 1).reshape(side, side),
        "even pixels": (np.arange(side * side) % 2 == 0).reshape(side, side),
        "left side": cols < half,
        "right side": cols >= half,
        "middle vertically": (cols >= quarter) & (cols < side - quarter),
        "middle horizontally": (rows >= quarter) & (rows < side - quarter),
    }.get(key)
    if hidden is None and key.endswith("% random"):
        frac = float(key.split("%")[0]) / 100.0
        if rng is None:
            raise ValueError("random masks need an rng")
        hidden = (rng.uniform(side * side) < frac).reshape(side, side)
    if hidden is None:
        raise ConfigError(f"unknown mask preset {name!r}; choose from {', '.join(MASK_PRESETS)}")
    return ~hidden.reshape(-1)


def read_task_file(text: str):
    """Parse an inpainting task description.

    Format (INI)::

        [task]
        mask = top rows        ; preset name, or "indices" with hidden = 0 5 9
        iterations = 1000
        noise_scale = 1.0
        seed = 0
        low = 0.0
        high = 1.0
        init = uniform
        side = 28

    Returns a dict of settings; pair it with observed rows via :func:`task_for_row`.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    if not cp.has_section("task"):
        raise ConfigError("task file needs a [task] section")
    sec = cp["task"]
    allowed = {"mask", "hidden", "iterations", "noise_scale", "seed", "low", "high", "init", "side"}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown task keys: {sorted(unknown)}")
    return {
        "mask": sec.get("mask", "top rows"),
        "hidden": [int(t) for t in sec.get("hidden", "").split()],
        "iterations": sec.getint("iterations", 1000),
        "noise_scale": sec.getfloat("noise_scale", 1.0),
        "seed": sec.getint("seed", 0),
        "domain": (sec.getfloat("low", 0.0), sec.getfloat("high", 1.0)),
        "init": sec.get("init", "uniform"),
        "side": sec.getint("side", 28),
    }


def task_for_row(settings: dict, row, index: int = 0) -> InpaintTask:
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    seed = settings["seed"] + index
    if settings["mask"].strip().lower() == "indices":
        mask = np.ones(row.size, dtype=bool)
        mask[settings["hidden"]] = False
    else:
        side = settings["side"]
        if side * side != row.size:
            raise DimensionError(f"preset masks need {side}x{side} rows, got width {row.size}")
        mask = preset_mask(settings["mask"], side, RngStream(seed).child("mask"))
    return InpaintTask(mask, row, settings["domain"], settings["iterations"],
                       settings["noise_scale"], seed, settings["init"])


# ---------------------------------------------------------------------- spectrum and manifold


def spectrum(model: FlowModel) -> np.ndarray:
    """Per-latent scales ``exp(-s)`` sorted in descending order."""
    return np.sort(np.exp(-model.scaling.log_scale))[::-1]


def spectrum_rows(sigma) -> np.ndarray:
    sigma = np.asarray(sigma)
    return np.column_stack([np.arange(1, sigma.size + 1), sigma])


def random_rotation(rng: RngStream, n: int = 3) -> np.ndarray:
    """Haar-distributed rotation from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sphere_points(resolution: int, radius: float = 1.0) -> np.ndarray:
    """``resolution**2`` points on a lat/long grid of the 2-sphere."""
    if resolution < 1:
        raise ValueError("grid resolution must be positive")
    theta = (np.arange(resolution) + 0.5) * math.pi / resolution
    phi = np.arange(resolution) * 2 * math.pi / resolution
    t, p = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
    return radius * pts.reshape(-1, 3)


def sphere_latents(dim: int, resolution: int, rng: Optional[RngStream], radius: float = 1.0) -> np.ndarray:
    if dim < 3:
        raise DimensionError(f"a latent sphere needs D >= 3, got {dim}")
    pts = sphere_points(resolution, radius)
    if rng is not None:
        pts = pts @ random_rotation(rng).T
    h = np.zeros((pts.shape[0], dim))
    h[:, :3] = pts
    return h


def sphere_manifold(model: FlowModel, prior: Prior, resolution: int, rotation_seed: Optional[int],
                    radius: Optional[float] = None, whitening=None) -> np.ndarray:
    """Decode a (randomly rotated) latent sphere of radius one prior std into data space."""
    rng = None if rotation_seed is None else RngStream(rotation_seed).child("rotation")
    r = prior.std if radius is None else radius
    h = sphere_latents(model.dim, resolution, rng, r)
    return invert_whitening(whitening, model.inverse(h))


# ---------------------------------------------------------------------- images


def image_grid(rows, side: int = 28, ncols: Optional[int] = None) -> np.ndarray:
    """Tile flat ``side*side`` rows into one image (row-major, ``ncols`` per row)."""
    rows = as_tensor(rows)
    n = rows.shape[0]
    ncols = ncols or int(math.ceil(math.sqrt(n)))
    nrows = int(math.ceil(n / ncols))
    grid = np.zeros((nrows * side, ncols * side))
    for k in range(n):
        r, c = divmod(k, ncols)
        grid[r * side:(r + 1) * side, c * side:(c + 1) * side] = rows[k].reshape(side, side)
    return grid


def write_pgm(path, image, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary 8-bit PGM (P5); values are mapped linearly from [lo, hi] and clipped."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError("PGM images must be 2-D")
    scaled = np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(scaled.tobytes())
