"""Self-describing binary container for checkpoints, task vectors, masks, datasets and reports.

Layout::

    b"DAM1" | u32 LE version (=1) | u64 LE header_len | header (UTF-8 JSON) | payload

The header is ``{"arch": ..., "tensors": [{name, shape, dtype, offset, byte_len}],
"meta": {kind, task_id, backdoored, trigger?, seed, created, ...}}``. Offsets are
relative to the payload start, 8-byte aligned and non-overlapping; tensors are
little-endian float64 in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .nn import ArchSpec, ParamVector

MAGIC = b"DAM1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
KINDS = ("checkpoint", "task_vector", "mask", "dataset", "report", "perturbation", "coefficients")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class OverlappingTensorsError(ContainerError):
    pass


class NonFiniteValueError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


def created_stamp() -> str:
    # reproducible-build convention: the timestamp is pinned unless SOURCE_DATE_EPOCH says otherwise
    import datetime as _dt

    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return _dt.datetime.fromtimestamp(epoch, _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class Container:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    arch: dict | None = None


def _encode(c: Container) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in c.tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"tensor {name!r} contains NaN or Inf")
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset, "byte_len": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"arch": c.arch, "tensors": entries, "meta": c.meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def _decode(buf: bytes) -> Container:
    if len(buf) < _PREFIX.size:
        raise TruncatedPayloadError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise TruncatedPayloadError("header extends past end of file")
    try:
        header = json.loads(buf[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable header: {exc}") from exc
    payload = memoryview(buf)[start:]
    spans = []
    tensors = {}
    for t in header.get("tensors", []):
        name, shape, off, blen = t["name"], tuple(t["shape"]), int(t["offset"]), int(t["byte_len"])
        if t.get("dtype") != "f64":
            raise HeaderError(f"tensor {name!r} has unsupported dtype {t.get('dtype')!r}")
        if blen != 8 * int(np.prod(shape, dtype=np.int64)):
            raise HeaderError(f"tensor {name!r}: byte_len {blen} does not match shape {list(shape)}")
        if off % 8 or off < 0:
            raise HeaderError(f"tensor {name!r}: offset {off} is not 8-byte aligned")
        if off + blen > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name!r} needs bytes [{off}, {off + blen}) but payload has {len(payload)}"
            )
        spans.append((off, off + blen, name))
        arr = np.frombuffer(payload[off : off + blen], dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"tensor {name!r} contains NaN or Inf")
        tensors[name] = arr
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OverlappingTensorsError(f"tensors {an!r} and {bn!r} overlap")
    return Container(tensors, header.get("meta") or {}, header.get("arch"))


def save(path, container: Container) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    data = _encode(container)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".dam")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Container:
    with open(path, "rb") as fh:
        return _decode(fh.read())


# typed wrappers -----------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParamVector
    meta: dict = field(default_factory=dict)

    @property
    def arch(self) -> ArchSpec:
        return self.params.arch

    @property
    def flat(self) -> np.ndarray:
        return self.params.flat


def _base_meta(kind, task_id=None, backdoored=False, trigger=None, seed=None, **extra) -> dict:
    meta = {"kind": kind, "task_id": task_id, "backdoored": bool(backdoored), "seed": seed, "created": created_stamp()}
    if trigger is not None:
        meta["trigger"] = trigger
    meta.update(extra)
    return meta


def params_container(params: ParamVector, meta: dict) -> Container:
    tensors = {name: params.flat[a:b].reshape(shape) for name, a, b, shape in params.arch.segments()}
    return Container(tensors, meta, params.arch.to_dict())


def params_from_container(c: Container) -> ParamVector:
    if c.arch is None:
        raise HeaderError("container has no architecture")
    arch = ArchSpec.from_dict(c.arch)
    parts = []
    for name, _, _, shape in arch.segments():
        if name not in c.tensors:
            raise HeaderError(f"missing parameter tensor {name!r}")
        if tuple(c.tensors[name].shape) != tuple(shape):
            raise HeaderError(f"tensor {name!r} has shape {list(c.tensors[name].shape)}, expected {list(shape)}")
        parts.append(c.tensors[name].reshape(-1))
    return ParamVector(arch, np.concatenate(parts))


def checkpoint_meta(kind="checkpoint", **kw) -> dict:
    return _base_meta(kind, **kw)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = dict(ckpt.meta)
    meta.setdefault("kind", "checkpoint")
    meta.setdefault("created", created_stamp())
    save(path, params_container(ckpt.params, meta))


def load_checkpoint(path) -> Checkpoint:
    c = load(path)
    return Checkpoint(params_from_container(c), c.meta)


def mask_container(logits: np.ndarray, temperature: float, arch: ArchSpec | None = None, **meta) -> Container:
    m = _base_meta("mask", temperature=float(temperature), **meta)
    return Container({"mask.logits": np.asarray(logits, dtype=np.float64)}, m, arch.to_dict() if arch else None)


def dataset_container(ds, **meta) -> Container:
    m = _base_meta("dataset", provenance=ds.provenance, **meta)
    return Container({"inputs": ds.inputs, "labels": ds.labels.astype(np.float64)}, m)


def dataset_from_container(c: Container):
    from .data import Dataset

    labels = c.tensors["labels"]
    if np.any(labels != np.round(labels)):
        raise HeaderError("dataset labels are not integral")
    return Dataset(c.tensors["inputs"], labels.astype(np.int64), c.meta.get("provenance", {}))
