"""Maximum-likelihood training of a coupling flow."""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import persistence
from .data import (
    Dataset,
    WhiteningRecord,
    apply_whitening,
    approx_whitening_fit,
    contiguous_splits,
    dequantize,
    load_matrix,
    load_mnist_idx,
    make_toy2d,
    target_interval,
    zca_fit,
)
from .errors import ConfigError, DimensionError, NumericOverflowError
from .flow import FlowGrads, FlowModel, make_reference_model
from .numeric import RngStream, as_tensor
from .optim import AdamSettings, OptimizerState, adam_step, clip_global_norm
from .prior import Prior

log = logging.getLogger(__name__)


def _opt(section, default, help):
    return field(default=default, metadata={"section": section, "help": help})


@dataclass
class TrainConfig:
    prior: str = _opt("model", "logistic", "latent prior: logistic or gaussian")
    couplings: int = _opt("model", 4, "number of additive coupling layers")
    hidden_layers: int = _opt("model", 5, "hidden layers per coupling MLP")
    hidden_units: int = _opt("model", 1000, "units per hidden layer")

    learning_rate: float = _opt("optim", 1e-3, "AdaM step size")
    beta1: float = _opt("optim", 0.9, "first-moment decay (momentum)")
    beta2: float = _opt("optim", 0.01, "second-moment parameter, see beta2_convention")
    beta2_convention: str = _opt("optim", "paper", "paper: decay = 1 - beta2; decay: beta2 is the decay")
    epsilon: float = _opt("optim", 1e-4, "AdaM denominator offset")
    lam: float = _opt("optim", 1.0, "per-step beta1 decay factor (1 = constant beta1)")
    clip_norm: float = _opt("optim", 0.0, "global gradient-norm clip, 0 disables")

    batch_size: int = _opt("train", 256, "minibatch size")
    max_epochs: int = _opt("train", 50, "number of training epochs")
    seed: int = _opt("train", 0, "top-level random seed")
    workers: int = _opt("train", 1, "threads for batch-parallel loss evaluation")
    save_every: int = _opt("train", 1, "write epoch_<k>.ckpt every k epochs, 0 disables")
    checkpoint_dir: str = _opt("train", "runs/nice", "run output directory")

    source: str = _opt("data", "toy2d", "toy2d, mnist or matrix")
    path: str = _opt("data", "", "IDX image file (mnist) or NICEMAT1/CSV matrix (matrix)")
    test_path: str = _opt("data", "", "optional separate test file of the same kind")
    toy_kind: str = _opt("data", "gaussian-mixture", "toy2d generator: gaussian-mixture or ring")
    toy_n: int = _opt("data", 10000, "toy2d example count (80/10/10 split)")
    limit: int = _opt("data", 0, "keep only the first N rows of the file, 0 keeps all")
    valid_size: int = _opt("data", 10000, "validation rows taken from the end of the training file")
    test_size: int = _opt("data", 0, "test rows taken before the validation block when no test_path")
    dequantize: str = _opt("data", "auto", "auto, unit ([0,1]), symmetric ([-1,1]) or none")
    whitening: str = _opt("data", "none", "none, zca or approximate")
    zca_eps: float = _opt("data", 1e-5, "ZCA eigenvalue regularizer")

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        Prior.parse(self.prior)
        try:
            self.adam_settings()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for key, allowed in (("source", ("toy2d", "mnist", "matrix")),
                             ("dequantize", ("auto", "unit", "symmetric", "none")),
                             ("whitening", ("none", "zca", "approximate"))):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}")

    def adam_settings(self) -> AdamSettings:
        return AdamSettings(self.learning_rate, self.beta1, self.beta2, self.beta2_convention,
                            self.epsilon, self.lam)

    # ------------------------------------------------------------------ text form

    @classmethod
    def keys(cls) -> Dict[str, dataclasses.Field]:
        return {f.name: f for f in dataclasses.fields(cls)}

    def to_ini(self, exclude=()) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for f in dataclasses.fields(self):
            if f.name in exclude:
                continue
            sec = f.metadata["section"]
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, f.name, str(getattr(self, f.name)))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str = "", overrides: Optional[Dict[str, str]] = None) -> "TrainConfig":
        """Parse INI text plus ``section.key=value`` overrides; unknown keys are errors."""
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        fields = cls.keys()
        raw = {}
        for sec in cp.sections():
            for key, value in cp.items(sec):
                _check_key(fields, sec, key)
                raw[key] = value
        for dotted, value in (overrides or {}).items():
            sec, _, key = dotted.rpartition(".")
            _check_key(fields, sec or None, key)
            raw[key] = value
        kwargs = {}
        for key, value in raw.items():
            typ = type(fields[key].default)
            try:
                kwargs[key] = _parse_int(value) if typ is int else typ(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
        return cls(**kwargs)


def _parse_int(value: str) -> int:
    as_float = float(value)
    if not as_float.is_integer():
        raise ValueError(value)
    return int(as_float)


def _check_key(fields, section, key):
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    if section is not None and fields[key].metadata["section"] != section:
        raise ConfigError(f"key {key!r} belongs in section [{fields[key].metadata['section']}], not [{section}]")


# ---------------------------------------------------------------------- datasets


def build_dataset(cfg: TrainConfig, rng: RngStream) -> Dataset:
    """Load, dequantize and split the configured data (whitening happens in :func:`prepare`)."""
    if cfg.source == "toy2d":
        return make_toy2d(cfg.toy_kind, cfg.toy_n, rng.child("toy"))

    def read(path):
        if cfg.source == "mnist":
            return load_mnist_idx(path)
        return load_matrix(path)

    if not cfg.path:
        raise ConfigError(f"data source {cfg.source!r} needs data.path")
    main = read(cfg.path)
    if cfg.limit:
        main = main[: cfg.limit]
    extra = read(cfg.test_path) if cfg.test_path else None
    mode = cfg.dequantize
    if mode == "auto":
        mode = "unit" if cfg.source == "mnist" else "none"
    domain = (-np.inf, np.inf)
    if mode != "none":
        main = dequantize(main, rng.child("dequantize"), mode)
        if extra is not None:
            extra = dequantize(extra, rng.child("dequantize-test"), mode)
        domain = target_interval(mode)
    main = as_tensor(main)
    n = main.shape[0]
    if extra is not None:
        splits = contiguous_splits(n, cfg.valid_size, 0)
        splits["test"] = (n, n + extra.shape[0])
        return Dataset(np.vstack([main, as_tensor(extra)]), splits, domain)
    # validation is the tail of the file, test (if any) the block just before it
    n_train = n - cfg.valid_size - cfg.test_size
    if n_train < 1:
        raise ConfigError(f"{n} rows cannot hold valid_size={cfg.valid_size} and test_size={cfg.test_size}")
    splits = {"train": (0, n_train), "test": (n_train, n_train + cfg.test_size),
              "valid": (n_train + cfg.test_size, n)}
    return Dataset(main, splits, domain)


def prepare(cfg: TrainConfig, dataset: Dataset, rng: RngStream) -> Dataset:
    """Fit the configured whitening on the training split and apply it to every row."""
    if cfg.whitening == "none":
        return dataset
    train = dataset.split("train")
    if cfg.whitening == "zca":
        record = zca_fit(train, cfg.zca_eps)
    else:
        record = approx_whitening_fit(train, rng.child("approx-whitening"))
    return dataclasses.replace(dataset, examples=apply_whitening(record, dataset.examples), whitening=record)


# ---------------------------------------------------------------------- criterion


def log_likelihood(model: FlowModel, prior: Prior, x) -> np.ndarray:
    """Per-row log p_X(x) of the flow (no whitening correction)."""
    h, log_det, _ = model.forward(x)
    return prior.log_density(h) + log_det


def nice_loss(model: FlowModel, prior: Prior, batch, batch_index=None) -> tuple[float, FlowGrads]:
    """Negative mean log-likelihood of ``batch`` and its exact parameter gradients."""
    batch = as_tensor(batch)
    if batch.shape[1] != model.dim:
        raise DimensionError(f"batch width {batch.shape[1]} != model dimension {model.dim}")
    b = batch.shape[0]
    h, log_det, tape = model.forward(batch)
    loss = -float(np.mean(prior.log_density(h) + log_det))
    if not np.isfinite(loss):
        raise NumericOverflowError(f"non-finite loss on batch {batch_index}", "loss", batch_index)
    grads, _ = model.backward(tape, -prior.log_density_grad(h) / b, -1.0 / b)
    return loss, grads


def parallel_nice_loss(model, prior, batch, workers: int, pool=None, batch_index=None):
    """Split ``batch`` into ``workers`` fixed chunks and reduce in chunk order.

    Returns the loss and the gradient arrays in :meth:`FlowModel.parameters` order.
    """
    batch = as_tensor(batch)
    if workers <= 1 or batch.shape[0] < 2 * workers:
        loss, grads = nice_loss(model, prior, batch, batch_index)
        return loss, grads.arrays()
    chunks = np.array_split(batch, workers)
    run = pool.map if pool is not None else map
    parts = list(run(lambda c: nice_loss(model, prior, c, batch_index), chunks))
    b = batch.shape[0]
    loss = 0.0
    total = None
    for chunk, (l_c, g_c) in zip(chunks, parts):
        w = chunk.shape[0] / b
        loss += w * l_c
        arrays = [w * a for a in g_c.arrays()]
        total = arrays if total is None else [t + a for t, a in zip(total, arrays)]
    return loss, total


def evaluate(model: FlowModel, prior: Prior, x, whitening: Optional[WhiteningRecord] = None,
             chunk: int = 4096, already_whitened: bool = True) -> float:
    """Mean log-likelihood in the (dequantized) input space.

    ``x`` is in the model's space when ``already_whitened`` is true; otherwise
    the whitening map is applied first. Either way the whitening log|det| is
    added so the number refers to the unwhitened data.
    """
    x = as_tensor(x)
    if not already_whitened:
        x = apply_whitening(whitening, x)
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        total += float(log_likelihood(model, prior, x[start:start + chunk]).sum())
    shift = whitening.log_abs_det if whitening is not None else 0.0
    return total / x.shape[0] + shift


# ---------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    best: persistence.Checkpoint
    metrics: List[dict]
    best_epoch: int


def train(cfg: TrainConfig, dataset: Optional[Dataset] = None, run_dir=None,
          model: Optional[FlowModel] = None) -> TrainResult:
    """Run the epoch loop and keep the checkpoint with the best validation log-likelihood.

    Writes ``config``, ``metrics.log`` (one JSON object per epoch, deterministic),
    ``timing.log`` (wall-clock seconds per epoch), ``best.ckpt`` and, every
    ``save_every`` epochs, ``epoch_<k>.ckpt`` into ``run_dir`` when it is given.
    Epoch 0 is the initial model, evaluated before any update.
    """
    rng = RngStream(cfg.seed)
    prior = Prior.parse(cfg.prior)
    if dataset is None:
        dataset = prepare(cfg, build_dataset(cfg, rng.child("data")), rng.child("prep"))
    train_x = dataset.split("train")
    valid_x = dataset.split("valid")
    if valid_x.shape[0] == 0:
        raise ConfigError("training needs a nonempty validation split")
    if model is None:
        model = make_reference_model(dataset.dim, cfg.hidden_layers, cfg.hidden_units, cfg.seed,
                                     n_couplings=cfg.couplings)
    settings = cfg.adam_settings()
    state = OptimizerState.zeros_like(model.parameters())
    # the run location is left out so identical runs in different directories give identical checkpoints
    config_text = cfg.to_ini(exclude=("checkpoint_dir",))

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_ini())
        metrics_fh = open(os.path.join(run_dir, "metrics.log"), "w", encoding="utf-8")
        timing_fh = open(os.path.join(run_dir, "timing.log"), "w", encoding="utf-8")
    else:
        metrics_fh = timing_fh = None

    def snapshot(epoch, valid_ll, with_optimizer):
        opt = None
        if with_optimizer:
            opt = OptimizerState([m.copy() for m in state.first], [v.copy() for v in state.second],
                                 state.step, state.beta1_prod)
        meta = {"epoch": epoch, "valid_ll": valid_ll, "workers": cfg.workers}
        return persistence.Checkpoint(model.copy(), prior, dataset.whitening, opt, state.step, meta,
                                      config_text)

    def record(row, seconds):
        metrics.append(row)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            metrics_fh.flush()
            timing_fh.write(json.dumps({"epoch": row["epoch"], "seconds": round(seconds, 3)}) + "\n")
            timing_fh.flush()

    metrics: List[dict] = []
    shuffle_rng = rng.child("shuffle")
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        valid_ll = evaluate(model, prior, valid_x, dataset.whitening)
        if not np.isfinite(valid_ll):
            raise NumericOverflowError("initial model has non-finite validation likelihood", "valid", 0)
        row0 = {"epoch": 0, "train_nll": None, "valid_ll": valid_ll}
        if cfg.workers > 1:
            row0["bitwise_serial_equivalent"] = False
        record(row0, 0.0)
        best = snapshot(0, valid_ll, True)
        best_epoch, best_ll = 0, valid_ll

        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(train_x.shape[0])
            total, seen = 0.0, 0
            try:
                for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
                    batch = train_x[order[start:start + cfg.batch_size]]
                    loss, grads = parallel_nice_loss(model, prior, batch, cfg.workers, pool, bi)
                    if cfg.clip_norm > 0:
                        clip_global_norm(grads, cfg.clip_norm)
                    adam_step(state, model.parameters(), grads, settings)
                    total += loss * batch.shape[0]
                    seen += batch.shape[0]
                valid_ll = evaluate(model, prior, valid_x, dataset.whitening)
                if not np.isfinite(valid_ll):
                    raise NumericOverflowError(f"non-finite validation likelihood at epoch {epoch}", "valid", epoch)
            except NumericOverflowError:
                log.error("numeric failure in epoch %d; keeping epoch %d as best", epoch, best_epoch)
                if run_dir is not None:
                    persistence.save(best, os.path.join(run_dir, "best.ckpt"))
                raise
            record({"epoch": epoch, "train_nll": total / seen, "valid_ll": valid_ll},
                   time.perf_counter() - t0)
            log.info("epoch %d train_nll %.4f valid_ll %.4f", epoch, total / seen, valid_ll)
            if valid_ll > best_ll:
                best_epoch, best_ll = epoch, valid_ll
                best = snapshot(epoch, valid_ll, True)
            if run_dir is not None and cfg.save_every and epoch % cfg.save_every == 0:
                persistence.save(snapshot(epoch, valid_ll, True), os.path.join(run_dir, f"epoch_{epoch}.ckpt"))
    finally:
        if pool is not None:
            pool.shutdown()
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()

    if run_dir is not None:
        persistence.save(best, os.path.join(run_dir, "best.ckpt"))
    return TrainResult(best, metrics, best_epoch)
