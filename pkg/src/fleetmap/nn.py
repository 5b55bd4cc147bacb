"""Network building blocks on top of the autodiff core.

Layers here are plain functions over ``Tensor`` leaves owned by a
``ParamStore``, which also carries the Adam moment buffers and the
checkpoint (de)serializer.

Checkpoint layout (all integers little-endian, all floats little-endian
IEEE-754 binary64):

    magic   4 bytes  b"FMCK"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name utf-8 bytes, ndim u8, dims u64 * ndim,
        values f64 * prod(dims)
    opt_flag u8      1 when optimizer state follows
    if opt_flag:
        step u64, then per tensor in the same order:
        first-moment f64 * size, second-moment f64 * size

Round-trips are bit-exact: values are written with ndarray.tobytes and
read back with np.frombuffer.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor, add, matmul, mul, relu, sigmoid, tanh, transpose
from .ioutil import atomic_write_bytes

CHECKPOINT_MAGIC = b"FMCK"
CHECKPOINT_VERSION = 1


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = xW + b with the bias broadcast over rows."""
    if x.value.shape[-1] != W.value.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.value.shape} vs W {W.value.shape}")
    y = matmul(x, W)
    if b is not None:
        y = add(y, b)
    return y


def mlp_relu(x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Alternating linear / ReLU stack with no activation after the last layer."""
    for i, (W, b) in enumerate(layers):
        x = linear(x, W, b)
        if i + 1 < len(layers):
            x = relu(x)
    return x


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One step of a standard LSTM, batched over rows.

    ``params`` maps gate names to (input weight, recurrent weight, bias):
    keys ``i`` (input), ``f`` (forget), ``o`` (output), ``g`` (candidate).
    """
    if x.value.shape != h.value.shape or h.value.shape != c.value.shape:
        raise ValueError(
            f"lstm_cell shapes disagree: x {x.value.shape}, h {h.value.shape}, c {c.value.shape}"
        )

    def gate(key, activation):
        W, U, b = params[key]
        return activation(add(add(matmul(x, W), matmul(h, U)), b))

    i = gate("i", sigmoid)
    f = gate("f", sigmoid)
    o = gate("o", sigmoid)
    g = gate("g", tanh)
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def attention_scores(Q: Tensor, K: Tensor) -> Tensor:
    """Pairwise scores QK^T, deliberately unscaled."""
    if Q.value.shape[1] != K.value.shape[1]:
        raise ValueError(f"attention_scores shape mismatch: {Q.value.shape} vs {K.value.shape}")
    return matmul(Q, transpose(K))


def decayed_lr(base_lr: float, epoch: int, rate: float = 0.1, every: int = 2000) -> float:
    """Step-decay schedule: multiply by ``rate`` every ``every`` epochs."""
    return base_lr * rate ** (epoch // every)


class ParamStore:
    """Ordered collection of named parameter tensors plus Adam state."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self._rng = np.random.default_rng(seed)

    # -- construction -------------------------------------------------------

    def add(self, name: str, shape, fan_in: int | None = None) -> Tensor:
        """Register a parameter; uniform +-1/sqrt(fan_in) init for weights
        (fan_in defaulting to the first dimension of a matrix), zeros for
        vectors/biases."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if fan_in is None and len(shape) == 2:
            fan_in = shape[0]
        if fan_in:
            bound = 1.0 / np.sqrt(fan_in)
            value = self._rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape)
        t = Tensor(value, name=name)
        self.params[name] = t
        self.m[name] = np.zeros(shape)
        self.v[name] = np.zeros(shape)
        return t

    def add_value(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    # -- access -------------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return sum(t.value.size for t in self.params.values())

    @property
    def n_bytes(self) -> int:
        return sum(t.value.nbytes for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- checkpointing -------------------------------------------------------

    def save(self, path: str, with_optimizer: bool = True) -> None:
        chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        chunks.append(struct.pack("<I", len(self.params)))
        for name, t in self.params.items():
            raw_name = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw_name)))
            chunks.append(raw_name)
            chunks.append(struct.pack("<B", t.value.ndim))
            chunks.append(struct.pack(f"<{t.value.ndim}Q", *t.value.shape))
            chunks.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
        chunks.append(struct.pack("<B", 1 if with_optimizer else 0))
        if with_optimizer:
            chunks.append(struct.pack("<Q", self.t))
            for name in self.params:
                chunks.append(np.ascontiguousarray(self.m[name], dtype="<f8").tobytes())
                chunks.append(np.ascontiguousarray(self.v[name], dtype="<f8").tobytes())
        atomic_write_bytes(path, b"".join(chunks))

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        offset = 8
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        store = cls()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
            offset += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            value = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).copy()
            offset += 8 * size
            store.add_value(name, value.reshape(shape))
        (opt_flag,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        if opt_flag:
            (store.t,) = struct.unpack_from("<Q", raw, offset)
            offset += 8
            for name, t in store.params.items():
                size = t.value.size
                store.m[name] = (
                    np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
                    .copy()
                    .reshape(t.value.shape)
                )
                offset += 8 * size
                store.v[name] = (
                    np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
                    .copy()
                    .reshape(t.value.shape)
                )
                offset += 8 * size
        if offset != len(raw):
            raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
        return store


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam over every parameter with a recorded gradient.

    Parameters whose grad is None are treated as zero-gradient (their
    moments still decay).  Non-finite gradients abort before any update.
    """
    b1, b2 = betas
    for name, t in store.params.items():
        g = t.grad
        if g is not None and not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name!r}")
    store.t += 1
    t_step = store.t
    for name, tensor in store.params.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value)
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t_step)
        v_hat = v / (1.0 - b2**t_step)
        tensor.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
