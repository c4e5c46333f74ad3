"""Emission/background MLPs, the Adam optimizer, and checkpoint IO.

The MLP is a plain fully connected network with rectified hidden layers and
a logistic squash on the linear output so emissions stay in (0, 1). Forward
and backward passes are hand-written and verified against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class ModelError(Exception):
    pass


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp:
    """Fully connected scalar-output network: ReLU hidden, logistic output."""

    def __init__(self, layer_sizes: list[int], seed: int = 0):
        if len(layer_sizes) < 2 or layer_sizes[-1] != 1:
            raise ModelError("mlp needs >= 2 layer sizes ending in 1")
        self.layer_sizes = list(layer_sizes)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def set_params(self, params: dict[str, np.ndarray], prefix: str = "") -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[f"{prefix}w{i}"], dtype=np.float64)
            self.biases[i] = np.asarray(params[f"{prefix}b{i}"], dtype=np.float64)

    def forward(self, x: np.ndarray):
        """Batched forward pass; returns (outputs in (0,1), cache)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise ModelError(
                f"input dim {x.shape[1]} does not match first layer {self.input_dim}"
            )
        activations = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            activations.append(h)
        out = sigmoid(h[:, 0])
        return out, (activations, out)

    def backward(self, cache, dout: np.ndarray):
        """Gradients for a batched forward; returns (param grads, input grad)."""
        activations, out = cache
        dout = np.asarray(dout, dtype=np.float64)
        dh = (dout * out * (1.0 - out))[:, None]
        grads = {}
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                dh = dh * (activations[i + 1] > 0.0)
            grads[f"w{i}"] = activations[i].T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            dh = dh @ self.weights[i].T
        return grads, dh


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Convenience forward without cache; scalar for 1-D input."""
    out, _ = mlp.forward(x)
    return out[0] if np.asarray(x).ndim == 1 else out


@dataclass
class AdamState:
    """First/second moments plus step counter for a set of named parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)

    def drop(self, keys) -> None:
        for k in keys:
            self.m.pop(k, None)
            self.v.pop(k, None)

    def select_rows(self, key: str, mask: np.ndarray) -> None:
        """Keep only the rows of a moment pair selected by a boolean mask."""
        if key in self.m:
            self.m[key] = self.m[key][mask]
            self.v[key] = self.v[key][mask]


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr,
    weight_decay=0.0,
) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    `lr` and `weight_decay` may be scalars or dicts keyed like `params`
    (missing keys fall back to 0 decay / raise for lr).
    """
    state.ensure(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for parameter group '{k}'")
        step_lr = lr[k] if isinstance(lr, dict) else lr
        decay = weight_decay.get(k, 0.0) if isinstance(weight_decay, dict) else weight_decay
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if decay:
            update = update + decay * p
        p -= step_lr * update


# ---------------------------------------------------------------------------
# Checkpoint container: magic 'THSP', version, length-prefixed blocks
# ---------------------------------------------------------------------------

_MAGIC = b"THSP"
_VERSION = 1
_KIND_ARRAY = 0
_KIND_JSON = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays plus a JSON metadata block (little-endian)."""
    blocks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        payload = arr.tobytes()
        head = struct.pack("<H", len(name.encode())) + name.encode()
        head += struct.pack("<BI", _KIND_ARRAY, arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blocks.append(head + struct.pack("<Q", len(payload)) + payload)
    payload = json.dumps(meta, sort_keys=True).encode()
    head = struct.pack("<H", len(b"meta")) + b"meta"
    head += struct.pack("<BI", _KIND_JSON, 0)
    blocks.append(head + struct.pack("<Q", len(payload)) + payload)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(blocks)))
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ModelError(f"{path}: not a THSP checkpoint")
    version, nblocks = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(nblocks):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        kind, ndim = struct.unpack_from("<BI", data, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        payload = data[pos : pos + plen]
        pos += plen
        if kind == _KIND_ARRAY:
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        else:
            meta = json.loads(payload.decode())
    return arrays, meta
