"""Small float64 multilayer perceptrons with hand-written reverse mode.

Every learned object in the package (value networks, guide-policy, behavior
density, execute-policy) is an :class:`Mlp`. Gradients are computed by
``record`` (forward pass that keeps a tape) followed by ``backward`` with the
derivative of a scalar loss with respect to the network output.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

HEADS = ("scalar", "vector", "gaussian")
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LN_EPS = 1e-5
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CKPT_MAGIC = b"PORM"
CKPT_VERSION = 2


class CheckpointError(ValueError):
    pass


@dataclass
class Tape:
    """Intermediate values of one forward pass, consumed by ``Mlp.backward``."""

    x: np.ndarray
    layers: list = field(default_factory=list)
    squeeze: bool = False


class Mlp:
    """ReLU MLP with a scalar, vector or diagonal-Gaussian head.

    Parameters are held in ``self.params`` as a flat list of arrays in a fixed
    order: per layer ``W``, ``b`` (plus layer-norm gain and bias on hidden
    layers when enabled), then the log-std vector for Gaussian heads.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        head: str = "scalar",
        layer_norm: bool = False,
        rng: np.random.Generator | None = None,
        log_std_init: float = 0.0,
        final_scale: float = 1e-3,
    ):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be >= 2 positive ints, got {sizes}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if head == "scalar" and sizes[-1] != 1:
            raise ValueError("scalar head needs output size 1")
        self.sizes = sizes
        self.head = head
        self.layer_norm = bool(layer_norm)
        rng = np.random.default_rng() if rng is None else rng

        params = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == n_layers - 1
            bound = final_scale if last else math.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
            if self.layer_norm and not last:
                params.append(np.ones(fan_out))
                params.append(np.zeros(fan_out))
        if head == "gaussian":
            params.append(np.full(sizes[-1], float(log_std_init)))
        self.params: list[np.ndarray] = params
        # fixed (untrained) input standardization: x -> (x - shift) / scale
        self.in_shift: np.ndarray | None = None
        self.in_scale: np.ndarray | None = None

    def set_input_normalization(self, shift, scale) -> None:
        shift = np.asarray(shift, dtype=np.float64).reshape(-1)
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if shift.shape != (self.in_dim,) or scale.shape != (self.in_dim,):
            raise ValueError(f"normalization vectors must have length {self.in_dim}")
        if not np.all(scale > 0) or not np.all(np.isfinite(shift)):
            raise ValueError("normalization scale must be positive and shift finite")
        self.in_shift, self.in_scale = shift.copy(), scale.copy()

    # -- structure -------------------------------------------------------

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def expected_num_params(self) -> int:
        """Closed-form parameter count from the architecture alone."""
        total = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        if self.layer_norm:
            total += 2 * sum(self.sizes[1:-1])
        if self.head == "gaussian":
            total += self.sizes[-1]
        return total

    def same_architecture(self, other: "Mlp") -> bool:
        return (
            self.sizes == other.sizes
            and self.head == other.head
            and self.layer_norm == other.layer_norm
        )

    def _layer_params(self, i: int):
        found = [self.params[j] for j in self._layer_slots(i)]
        return tuple(found) if len(found) == 4 else (found[0], found[1], None, None)

    def _layer_slots(self, i: int) -> list[int]:
        per = 4 if self.layer_norm else 2
        base = i * per
        if self.layer_norm and i < self.n_layers - 1:
            return [base, base + 1, base + 2, base + 3]
        return [base, base + 1]

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone.head = self.head
        clone.layer_norm = self.layer_norm
        clone.params = [p.copy() for p in self.params]
        clone.in_shift = None if self.in_shift is None else self.in_shift.copy()
        clone.in_scale = None if self.in_scale is None else self.in_scale.copy()
        return clone

    def load_state(self, other: "Mlp") -> None:
        if not self.same_architecture(other):
            raise ValueError("architecture mismatch")
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params():
            raise ValueError("flat vector has the wrong length")
        offset = 0
        for p in self.params:
            p[...] = vec[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()

    # -- forward / backward ---------------------------------------------

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"input has shape {x.shape}, expected (*, {self.in_dim})"
            )
        return x, squeeze

    def log_std(self) -> np.ndarray:
        return np.clip(self.params[-1], LOG_STD_MIN, LOG_STD_MAX)

    def record(self, x):
        """Forward pass that also returns a :class:`Tape` for ``backward``."""
        x, squeeze = self._check_input(x)
        if self.in_shift is not None:
            x = (x - self.in_shift) / self.in_scale
        tape = Tape(x=x, squeeze=squeeze)
        h = x
        for i in range(self.n_layers):
            w, b, gain, bias = self._layer_params(i)
            z = h @ w + b
            if i == self.n_layers - 1:
                tape.layers.append((h, None, None))
                h = z
                break
            ln = None
            if gain is not None:
                mu = z.mean(axis=1, keepdims=True)
                inv = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
                zhat = (z - mu) * inv
                ln = (zhat, inv)
                z = zhat * gain + bias
            tape.layers.append((h, z, ln))
            h = np.maximum(z, 0.0)
        return self._head_output(h, squeeze), tape

    def _head_output(self, out: np.ndarray, squeeze: bool):
        if self.head == "scalar":
            out = out[:, 0]
            return out[0] if squeeze else out
        if squeeze:
            out = out[0]
        if self.head == "gaussian":
            return out, self.log_std()
        return out

    def forward(self, x):
        return self.record(x)[0]

    __call__ = forward

    def backward(self, tape: Tape, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Back-propagate ``grad_out`` (dLoss/dOutput) through the tape.

        For Gaussian heads ``grad_out`` is ``(d_mean, d_log_std)``; ``d_log_std``
        may be per-sample or already summed over the batch. Returns parameter
        gradients (same order as ``params``) and the gradient w.r.t. the input.
        """
        grads = [np.zeros_like(p) for p in self.params]
        batch = tape.x.shape[0]
        if self.head == "gaussian":
            d_out, d_log_std = grad_out
            d_log_std = np.asarray(d_log_std, dtype=np.float64)
            if d_log_std.ndim == 2:
                d_log_std = d_log_std.sum(axis=0)
            raw = self.params[-1]
            inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
            grads[-1] = np.where(inside, d_log_std, 0.0)
        else:
            d_out = grad_out
        d_out = np.asarray(d_out, dtype=np.float64)
        if self.head == "scalar":
            d_out = d_out.reshape(batch, 1)
        else:
            d_out = d_out.reshape(batch, self.out_dim)

        d = d_out
        for i in reversed(range(self.n_layers)):
            h_in, z, ln = tape.layers[i]
            slots = self._layer_slots(i)
            w = self.params[slots[0]]
            if i != self.n_layers - 1:
                d = d * (z > 0.0)
                if ln is not None:
                    zhat, inv = ln
                    gain = self.params[slots[2]]
                    grads[slots[2]] = (d * zhat).sum(axis=0)
                    grads[slots[3]] = d.sum(axis=0)
                    dzhat = d * gain
                    d = inv * (
                        dzhat
                        - dzhat.mean(axis=1, keepdims=True)
                        - zhat * (dzhat * zhat).mean(axis=1, keepdims=True)
                    )
            grads[slots[0]] = h_in.T @ d
            grads[slots[1]] = d.sum(axis=0)
            # (B,1) @ (1,H) is far slower than the equivalent broadcast
            d = d * w[:, 0] if w.shape[1] == 1 else d @ w.T
        if self.in_scale is not None:
            d = d / self.in_scale
        if tape.squeeze:
            d = d[0]
        return grads, d


def value_and_grad(
    model: Mlp, x, loss_fn: Callable
) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn(model(x))`` and its parameter gradients.

    ``loss_fn`` maps the model output to ``(loss, dloss/doutput)``.
    """
    out, tape = model.record(x)
    loss, g = loss_fn(out)
    if np.ndim(loss) != 0:
        raise ValueError(f"loss must be a scalar, got shape {np.shape(loss)}")
    grads, _ = model.backward(tape, g)
    return float(loss), grads


def grads_finite(grads: Sequence[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads)


def add_grads(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [x + y for x, y in zip(a, b)]


class Adam:
    """Bias-corrected Adam over one model's parameter list."""

    def __init__(
        self,
        model: Mlp,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in model.params]
        self.v = [np.zeros_like(p) for p in model.params]

    def step(self, model: Mlp, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(model.params) or any(
            g.shape != p.shape for g, p in zip(grads, model.params)
        ):
            raise ValueError("gradient shapes do not match parameters")
        if not grads_finite(grads):
            bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
            raise FloatingPointError(f"non-finite gradient in parameter slots {bad}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, g, m, v in zip(model.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def polyak_update(target: Mlp, online: Mlp, lam: float) -> None:
    """target <- lam * online + (1 - lam) * target, in place."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if not target.same_architecture(online):
        raise ValueError("architecture mismatch between target and online model")
    for t, o in zip(target.params, online.params):
        if lam == 1.0:
            t[...] = o
        elif lam != 0.0:
            t *= 1.0 - lam
            t += lam * o


def gaussian_log_prob(mean, log_std, x) -> np.ndarray | float:
    """Diagonal Gaussian log-density summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mean.shape[-1] != x.shape[-1] or log_std.shape[-1] != x.shape[-1]:
        raise ValueError("mean, log_std and x must share their last dimension")
    z = (x - mean) * np.exp(-log_std)
    out = np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def gaussian_log_prob_grads(mean, log_std, x):
    """Partial derivatives of ``gaussian_log_prob`` (per sample).

    Returns ``(d_mean, d_log_std, d_x)`` with the broadcast shape of the inputs.
    """
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    inv_var = np.exp(-2.0 * np.asarray(log_std, dtype=np.float64))
    diff = x - mean
    d_mean = diff * inv_var
    d_log_std = diff * diff * inv_var - 1.0
    return d_mean, d_log_std, -d_mean


# -- checkpoints -------------------------------------------------------------
#
# Binary layout (little endian):
#   magic "PORM" | u16 version | u8 head | u8 layer_norm | u32 n_sizes
#   | u32 sizes[n_sizes] | u8 normalized [| f64 shift[in] | f64 scale[in]]
#   | u32 n_params | per param: u8 ndim, u32 shape[ndim], f64 data
#   | u32 crc32 of everything before it
# Version 1 files lack the normalization block and still load.


def to_bytes(model: Mlp) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HBB", CKPT_VERSION, HEADS.index(model.head), int(model.layer_norm)))
    buf.write(struct.pack("<I", len(model.sizes)))
    buf.write(struct.pack(f"<{len(model.sizes)}I", *model.sizes))
    normalized = model.in_shift is not None
    buf.write(struct.pack("<B", int(normalized)))
    if normalized:
        buf.write(np.ascontiguousarray(model.in_shift, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(model.in_scale, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(model.params)))
    for p in model.params:
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated data: need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Mlp:
    if len(data) < 8:
        raise CheckpointError(f"truncated checkpoint at offset {len(data)}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError("bad magic at offset 0")
    version, head_code, ln = r.unpack("<HBB")
    if version not in (1, CKPT_VERSION):
        raise CheckpointError(f"unsupported version {version} at offset 4")
    if head_code >= len(HEADS):
        raise CheckpointError(f"bad head code {head_code} at offset 6")
    (n_sizes,) = r.unpack("<I")
    sizes = list(r.unpack(f"<{n_sizes}I"))
    norm = None
    if version >= 2:
        (flag,) = r.unpack("<B")
        if flag:
            k = sizes[0] if sizes else 0
            norm = (
                np.frombuffer(r.take(8 * k), dtype="<f8").astype(np.float64),
                np.frombuffer(r.take(8 * k), dtype="<f8").astype(np.float64),
            )
    (n_params,) = r.unpack("<I")
    params = []
    for _ in range(n_params):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        params.append(np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64))
    if r.pos != len(body):
        raise CheckpointError(f"trailing bytes at offset {r.pos}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checksum mismatch at offset {len(body)}")
    model = Mlp(sizes, head=HEADS[head_code], layer_norm=bool(ln), rng=np.random.default_rng(0))
    if [p.shape for p in params] != [p.shape for p in model.params]:
        raise CheckpointError("parameter shapes do not match the architecture")
    model.params = params
    if norm is not None:
        model.in_shift, model.in_scale = norm
    return model


def save_model(model: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_model(path) -> Mlp:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def to_text(model: Mlp) -> str:
    """Lossless JSON export (floats written as hex)."""
    doc = {
        "sizes": model.sizes,
        "head": model.head,
        "layer_norm": model.layer_norm,
        "input_normalization": None
        if model.in_shift is None
        else [[float(v).hex() for v in model.in_shift], [float(v).hex() for v in model.in_scale]],
        "params": [
            {"shape": list(p.shape), "data": [float(v).hex() for v in p.ravel()]}
            for p in model.params
        ],
    }
    return json.dumps(doc, indent=1)


def from_text(text: str) -> Mlp:
    doc = json.loads(text)
    model = Mlp(doc["sizes"], head=doc["head"], layer_norm=doc["layer_norm"], rng=np.random.default_rng(0))
    params = [
        np.array([float.fromhex(v) for v in p["data"]], dtype=np.float64).reshape(p["shape"])
        for p in doc["params"]
    ]
    if [p.shape for p in params] != [p.shape for p in model.params]:
        raise ValueError("parameter shapes do not match the architecture")
    model.params = params
    norm = doc.get("input_normalization")
    if norm is not None:
        model.set_input_normalization(*[[float.fromhex(v) for v in vec] for vec in norm])
    return model


BUNDLE_MAGIC = b"PORB"


def bundle_to_bytes(models: Sequence[Mlp]) -> bytes:
    """Several checkpoints in one blob: magic, u32 count, then u64-length-prefixed models."""
    parts = [BUNDLE_MAGIC, struct.pack("<I", len(models))]
    for m in models:
        blob = to_bytes(m)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def bundle_from_bytes(data: bytes) -> list[Mlp]:
    r = _Reader(data)
    if r.take(4) != BUNDLE_MAGIC:
        raise CheckpointError("bad bundle magic at offset 0")
    (count,) = r.unpack("<I")
    models = []
    for _ in range(count):
        (n,) = r.unpack("<Q")
        start = r.pos
        try:
            models.append(from_bytes(r.take(n)))
        except CheckpointError as exc:
            raise CheckpointError(f"model at offset {start}: {exc}") from None
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes at offset {r.pos}")
    return models
