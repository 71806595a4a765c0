"""Differentiable primitives, parameter storage and gradient checking.

The primitives are thin, shape-checked wrappers over torch double
precision operations; torch's reverse mode supplies the gradients and
``grad_check`` verifies them against central finite differences.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"AMSCKPT\x00"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.from_numpy(np.array(data, dtype=np.float64)).requires_grad_(requires_grad)


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def matmul(a, b):
    _check(a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", a.shape, b.shape)
    return a @ b


def add(a, b):
    try:
        return a + b
    except RuntimeError:
        _check(False, "add", a.shape, b.shape)


def scale(a, s):
    return a * s


def concat(tensors, dim: int = -1):
    ref = list(tensors[0].shape)
    d = dim % len(ref)
    for t in tensors[1:]:
        other = list(t.shape)
        _check(len(other) == len(ref) and all(x == y for k, (x, y) in enumerate(zip(ref, other)) if k != d),
               "concat", tensors[0].shape, t.shape)
    return torch.cat(tensors, dim=dim)


def row_gather(a, index):
    index = torch.as_tensor(index, dtype=torch.long)
    if index.numel():
        _check(int(index.max()) < a.shape[0] and int(index.min()) >= 0, "row_gather", a.shape, index.shape)
    return a.index_select(0, index)


def scatter_sum(a, index, n_rows: int):
    """Row ``r`` of the result is the sum of rows of ``a`` whose index is ``r``."""
    index = torch.as_tensor(index, dtype=torch.long)
    _check(index.dim() == 1 and index.shape[0] == a.shape[0], "scatter_sum", a.shape, index.shape)
    out = torch.zeros((n_rows,) + tuple(a.shape[1:]), dtype=a.dtype)
    return out.index_add(0, index, a)


def silu(a):
    return a * sigmoid(a)


def tanh(a):
    return torch.tanh(a)


def sigmoid(a):
    # torch's vectorised sigmoid rounds differently in its scalar tail loop, so the
    # result would depend on a row's position; the tanh form does not
    return 0.5 * (1.0 + torch.tanh(0.5 * a))


def layer_norm(a, gain=None, bias=None):
    if gain is not None:
        _check(gain.shape[-1] == a.shape[-1], "layer_norm", a.shape, gain.shape)
    return torch.nn.functional.layer_norm(a, (a.shape[-1],), gain, bias, eps=LAYER_NORM_EPS)


def mse(a, b):
    _check(a.shape == b.shape, "mse", a.shape, b.shape)
    return ((a - b) ** 2).mean()


def stop_gradient(a):
    return a.detach()


class ParamStore:
    """Named parameter tensors with a stable flat ordering (insertion order)."""

    def __init__(self, params=None):
        self._params = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = tensor(value if not torch.is_tensor(value) else value.detach().numpy(), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return list(self._params.values())

    def manifest(self):
        return [(name, tuple(t.shape)) for name, t in self._params.items()]

    @property
    def size(self) -> int:
        return sum(t.numel() for t in self._params.values())

    def flatten(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.detach().numpy().reshape(-1) for t in self._params.values()])

    def load_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeError(f"flat vector has {flat.size} entries, store holds {self.size}")
        pos = 0
        with torch.no_grad():
            for t in self._params.values():
                n = t.numel()
                t.copy_(torch.from_numpy(flat[pos:pos + n].reshape(t.shape).copy()))
                pos += n

    def grads_flat(self) -> np.ndarray:
        return np.concatenate([
            (t.grad.numpy() if t.grad is not None else np.zeros(t.shape)).reshape(-1)
            for t in self._params.values()
        ])

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, v.detach().numpy().copy()) for k, v in self._params.items()))


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Header (magic, version, JSON manifest) then little-endian float64 data."""
    header = json.dumps({
        "format": "amshortcut-params",
        "version": CHECKPOINT_VERSION,
        "params": [{"name": n, "shape": list(s)} for n, s in params.manifest()],
        "meta": meta or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(ParamStore, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an amshortcut checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    store = ParamStore()
    pos = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if pos + n > data.size:
            raise ValueError(f"{path}: truncated parameter data at {entry['name']}")
        store.add(entry["name"], data[pos:pos + n].reshape(shape))
        pos += n
    if pos != data.size:
        raise ValueError(f"{path}: {data.size - pos} trailing values after manifest")
    return store, header.get("meta", {})


def grad_check(f, params: ParamStore, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f(params)`` must return a scalar tensor and be deterministic. The
    relative error per entry is ``|g_fd - g_ad| / max(1e-8, |g_fd| + |g_ad|)``.
    ``indices`` restricts the finite-difference sweep to some flat entries.
    """
    params.zero_grad()
    loss = f(params)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {float(loss)}")
    loss.backward()
    g_ad = params.grads_flat()
    params.zero_grad()

    base = params.flatten()
    indices = range(base.size) if indices is None else indices
    worst = 0.0
    try:
        for k in indices:
            vals = []
            for sgn in (1.0, -1.0):
                trial = base.copy()
                trial[k] += sgn * eps
                params.load_flat(trial)
                with torch.no_grad():
                    v = float(f(params))
                if not np.isfinite(v):
                    raise FloatingPointError(f"loss is not finite at parameter {k}")
                vals.append(v)
            g_fd = (vals[0] - vals[1]) / (2 * eps)
            err = abs(g_fd - g_ad[k]) / max(1e-8, abs(g_fd) + abs(g_ad[k]))
            worst = max(worst, err)
    finally:
        params.load_flat(base)
    return worst
