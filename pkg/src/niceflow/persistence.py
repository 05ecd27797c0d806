"""Single-file ``NICECKP1`` checkpoints.

Layout (all integers little-endian)::

    0   8  magic  b"NICECKP1"
    8   1  format version (currently 1)
    9   1  flags: bit 0 = optimizer state present, bit 1 = whitening present
    10  2  reserved, zero
    12  4  u32 data dimension D
    16  8  u64 training step counter
    24  8  u64 body length in bytes
    32  .. body: sections ``tag[4] | u64 length | payload``

Sections, in order: ``ARCH`` (UTF-8 JSON architecture descriptor), ``PARM``
(float64 parameters in model order), ``WHTN`` (optional), ``OPTM`` (optional),
``META`` (UTF-8 JSON), ``CONF`` (UTF-8 config echo).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import WhiteningRecord
from .errors import FormatError, UnsupportedVersionError
from .flow import CouplingLaw, CouplingLayer, FlowModel, Partition, ScalingLayer
from .numeric import MlpParams
from .optim import OptimizerState
from .prior import Prior

MAGIC = b"NICECKP1"
VERSION = 1
HEADER = struct.Struct("<8sBBHIQQ")
SECTION = struct.Struct("<4sQ")
FLAG_OPTIMIZER = 1
FLAG_WHITENING = 2
WHITENING_KINDS = {"none": 0, "zca": 1, "approximate": 2}


@dataclass
class Checkpoint:
    model: FlowModel
    prior: Prior
    whitening: Optional[WhiteningRecord] = None
    optimizer: Optional[OptimizerState] = None
    step: int = 0
    meta: dict = field(default_factory=dict)
    config_text: str = ""


def _f8(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def _arch(model: FlowModel, prior: Prior) -> dict:
    return {
        "dim": model.dim,
        "prior": prior.value,
        "couplings": [
            {
                "law": c.law.value,
                "unchanged": list(c.partition.i1),
                "modified": list(c.partition.i2),
                "sizes": c.coupling_fn.layer_sizes,
            }
            for c in model.couplings
        ],
    }


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    sections = [(b"ARCH", _json(_arch(model, ckpt.prior))), (b"PARM", _f8(model.parameters()))]
    flags = 0
    w = ckpt.whitening
    if w is not None and w.kind != "none":
        flags |= FLAG_WHITENING
        payload = struct.pack("<BI", WHITENING_KINDS[w.kind], model.dim)
        payload += _f8([w.matrix, w.offset, np.array([w.log_abs_det])])
        sections.append((b"WHTN", payload))
    if ckpt.optimizer is not None:
        flags |= FLAG_OPTIMIZER
        opt = ckpt.optimizer
        payload = struct.pack("<Q", opt.step) + _f8([np.array([opt.beta1_prod])] + opt.first + opt.second)
        sections.append((b"OPTM", payload))
    sections.append((b"META", _json(ckpt.meta)))
    sections.append((b"CONF", ckpt.config_text.encode("utf-8")))
    body = b"".join(SECTION.pack(tag, len(p)) + p for tag, p in sections)
    head = HEADER.pack(MAGIC, VERSION, flags, 0, model.dim, ckpt.step, len(body))
    return head + body


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    blob = encode(ckpt)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, start: int, end: int):
        self.blob, self.pos, self.end = blob, start, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise FormatError("not a NICECKP1 checkpoint (bad magic)", offset=0)
    if len(blob) < 9:
        raise FormatError("truncated header", offset=len(blob))
    if blob[8] != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {blob[8]} (this build reads {VERSION})")
    if len(blob) < HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    _, _, flags, _, dim, step, body_len = HEADER.unpack_from(blob)
    end = HEADER.size + body_len
    if len(blob) != end:
        raise FormatError(f"body length field says {end} bytes, file has {len(blob)}", offset=len(blob))

    sections = {}
    r = _Reader(blob, HEADER.size, end)
    while r.pos < end:
        tag, length = SECTION.unpack(r.take(SECTION.size, "section header"))
        sections[tag] = (r.pos, r.pos + length)
        r.take(length, f"section {tag!r}")
    for tag in (b"ARCH", b"PARM", b"META", b"CONF"):
        if tag not in sections:
            raise FormatError(f"missing section {tag!r}")

    def section(tag):
        lo, hi = sections[tag]
        return _Reader(blob, lo, hi)

    arch = json.loads(blob[slice(*sections[b"ARCH"])].decode("utf-8"))
    if arch["dim"] != dim:
        raise FormatError("header dimension disagrees with architecture")
    pr = section(b"PARM")
    layers = []
    for k, spec in enumerate(arch["couplings"]):
        sizes = spec["sizes"]
        ws, bs = [], []
        for i in range(len(sizes) - 1):
            ws.append(pr.floats((sizes[i + 1], sizes[i]), f"coupling {k} weight {i}"))
            bs.append(pr.floats((sizes[i + 1],), f"coupling {k} bias {i}"))
        part = Partition(spec["unchanged"], spec["modified"])
        layers.append(CouplingLayer(part, MlpParams(ws, bs), CouplingLaw(spec["law"])))
    log_scale = pr.floats((dim,), "log scale")
    if pr.pos != pr.end:
        raise FormatError("parameter section longer than the architecture implies", offset=pr.pos)
    model = FlowModel(layers, ScalingLayer(log_scale))

    whitening = None
    if flags & FLAG_WHITENING:
        if b"WHTN" not in sections:
            raise FormatError("whitening flag set but section missing")
        wr = section(b"WHTN")
        code, wdim = struct.unpack("<BI", wr.take(5, "whitening header"))
        kind = {v: k for k, v in WHITENING_KINDS.items()}.get(code)
        if kind is None or wdim != dim:
            raise FormatError(f"bad whitening record (kind {code}, dim {wdim})")
        whitening = WhiteningRecord(kind, wr.floats((dim, dim), "whitening matrix"),
                                    wr.floats((dim,), "whitening offset"),
                                    float(wr.floats((1,), "whitening log-det")[0]))

    optimizer = None
    if flags & FLAG_OPTIMIZER:
        if b"OPTM" not in sections:
            raise FormatError("optimizer flag set but section missing")
        orr = section(b"OPTM")
        (ostep,) = struct.unpack("<Q", orr.take(8, "optimizer step"))
        prod = float(orr.floats((1,), "optimizer beta1 product")[0])
        shapes = [p.shape for p in model.parameters()]
        first = [orr.floats(s, "first moment") for s in shapes]
        second = [orr.floats(s, "second moment") for s in shapes]
        optimizer = OptimizerState(first, second, ostep, prod)

    meta = json.loads(blob[slice(*sections[b"META"])].decode("utf-8"))
    config_text = blob[slice(*sections[b"CONF"])].decode("utf-8")
    return Checkpoint(model, Prior(arch["prior"]), whitening, optimizer, step, meta, config_text)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob:
        raise FormatError(f"{path}: empty file", offset=0)
    return decode(blob)
