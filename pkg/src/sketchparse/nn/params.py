"""Named parameter collections and the checkpoint file format.

Checkpoint layout::

    SKETCHPARSE-CHECKPOINT 1\\n
    <header length in bytes>\\n
    <JSON header>          # tensor manifest, optimizer state, config echo
    <payload>              # row-major little-endian float32 tensors

Manifest offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable

import numpy as np

from ..errors import CorruptCheckpoint
from .tensor import Tensor

MAGIC = b"SKETCHPARSE-CHECKPOINT 1\n"
INIT_SCALE = 0.08


class ParamSet:
    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape, init="uniform") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            data = init.astype(self.dtype).reshape(shape)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "uniform":
            data = self.rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; parameters the loss did not touch get zeros."""
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in self._params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, p in self._params.items():
            if n not in arrays:
                raise CorruptCheckpoint(f"missing tensor {n}")
            a = arrays[n]
            if a.shape != p.shape:
                raise CorruptCheckpoint(f"tensor {n}: shape {a.shape} != expected {p.shape}")
            p.data = a.astype(self.dtype)

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(dtype)
        for n, p in self._params.items():
            out.add(n, p.shape, init=p.data)
        return out

    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))


def _manifest(arrays: Iterable[tuple[str, np.ndarray]], start: int):
    entries, blobs, offset = [], [], start
    for name, a in arrays:
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(path, params: ParamSet, optimizer_state: dict | None = None,
                    config: dict | None = None, extra: dict | None = None) -> None:
    """Write atomically: a temp file in the same directory is renamed over ``path``."""
    entries, blobs, end = _manifest(params.arrays().items(), 0)
    header = {"format": 1, "dtype": "<f4", "tensors": entries, "config": config or {},
              "extra": extra or {}}
    if optimizer_state is not None:
        accs = optimizer_state.get("acc", {})
        opt_entries, opt_blobs, end = _manifest(accs.items(), end)
        blobs += opt_blobs
        header["optimizer"] = {k: v for k, v in optimizer_state.items() if k != "acc"}
        header["optimizer"]["acc"] = opt_entries
    head = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(f"{len(head)}\n".encode())
            f.write(head)
            for b in blobs:
                f.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_entries(entries, payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * n:
            raise CorruptCheckpoint(f"tensor {e['name']}: byte count does not match shape")
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if stop > len(payload):
            raise CorruptCheckpoint(f"tensor {e['name']}: payload truncated")
        out[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return out


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Return (header, parameter arrays, optimizer accumulators)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise CorruptCheckpoint("bad magic line")
    rest = blob[len(MAGIC):]
    line, sep, rest = rest.partition(b"\n")
    if not sep or not line.isdigit():
        raise CorruptCheckpoint("bad header length")
    n = int(line)
    if len(rest) < n:
        raise CorruptCheckpoint("header truncated")
    try:
        header = json.loads(rest[:n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    payload = rest[n:]
    arrays = _read_entries(header["tensors"], payload)
    opt = header.get("optimizer", {})
    accs = _read_entries(opt.get("acc", []), payload)
    expected = max([e["offset"] + e["nbytes"] for e in header["tensors"] + opt.get("acc", [])],
                   default=0)
    if len(payload) != expected:
        raise CorruptCheckpoint(f"payload has {len(payload)} bytes, manifest expects {expected}")
    return header, arrays, accs


def load_checkpoint(path, params: ParamSet) -> tuple[dict, dict[str, np.ndarray]]:
    """Fill ``params`` from ``path``; returns (header, optimizer accumulators)."""
    header, arrays, accs = read_checkpoint(path)
    extra = set(arrays) - set(params.names())
    if extra:
        raise CorruptCheckpoint(f"unexpected tensor {sorted(extra)[0]}")
    params.load_arrays(arrays)
    return header, accs
