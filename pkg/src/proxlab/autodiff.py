"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is 64-bit floats. Operations execute eagerly on numpy arrays;
when a :class:`Tape` is active, each primitive appends a node holding its
inputs and a backward closure. ``Tape.backward`` traverses the record in
exact reverse execution order and accumulates gradients additively into
the ``grad`` buffer of every tensor with ``requires_grad``.

A tape is single-threaded. Running forward passes with no active tape is
the inference mode: values are computed, nothing is recorded.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_TAPE_STACK: list = []

__all__ = [
    "Tensor",
    "Tape",
    "ParameterStore",
    "AdamW",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "absolute",
    "clamp",
    "arccos",
    "relu",
    "concat",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "linear",
    "sum_",
    "mean",
    "mse",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """Dense float64 tensor with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return _slice(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives; context manager activates it."""

    def __init__(self):
        self._nodes = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, output: Tensor, inputs, backward_fn):
        self._nodes.append((output, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad tensor reachable from loss.

        Repeated calls accumulate (gradients add across calls).
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if not self._nodes:
            raise ValueError("backward on an empty tape")
        flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for output, inputs, backward_fn in reversed(self._nodes):
            g_out = flow.get(id(output))
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in flow:
                    flow[key] = flow[key] + g_in
                else:
                    flow[key] = g_in
                    touched[key] = inp
        for key, t in touched.items():
            if t.requires_grad:
                t.grad = flow[key] if t.grad is None else t.grad + flow[key]


def _record(output: Tensor, inputs, backward_fn):
    output.requires_grad = any(t.requires_grad for t in inputs)
    if _TAPE_STACK and output.requires_grad:
        _TAPE_STACK[-1].record(output, inputs, backward_fn)
    return output


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(name: str, data: np.ndarray):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced a non-finite value")


# --- primitives ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast as in numpy."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}") from None
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}") from None
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        raise ValueError(f"div shape mismatch: {a.shape} vs {b.shape}") from None
    _check_finite("div", out.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    _check_finite("log", out.data)
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    _check_finite("sqrt", out.data)
    return _record(out, (a,), lambda g: (g / (2.0 * out.data),))


def square(a: Tensor) -> Tensor:
    return _record(Tensor(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,))


def absolute(a: Tensor) -> Tensor:
    return _record(Tensor(np.abs(a.data)), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the interval."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * inside,))


def arccos(a: Tensor) -> Tensor:
    out = Tensor(np.arccos(a.data))
    _check_finite("arccos", out.data)
    return _record(out, (a,), lambda g: (-g / np.sqrt(1.0 - a.data * a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(Tensor(np.where(mask, a.data, 0.0)), (a,), lambda g: (g * mask,))


def _slice(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(out, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    inverse = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise (last axis) stable softmax."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        gg = g * gain.data
        # standard layer-norm backward through mean and variance
        gx = inv / d * (d * gg - gg.sum(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).sum(axis=-1, keepdims=True))
        g_gain = _unbroadcast(g * xhat, gain.data.shape)
        g_bias = _unbroadcast(g, bias.data.shape)
        return gx, g_gain, g_bias

    return _record(out, (a, gain, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, with x of shape (..., fan_in)."""
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ValueError(f"linear fan-in mismatch: x {x.shape} vs weight {weight.shape}")
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    out = add(matmul(flat, weight), bias)
    if x.data.ndim != 2:
        out = reshape(out, lead + (weight.data.shape[1],))
    return out


def sum_(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())
    n = a.data.size
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.mean(diff * diff))
    n = a.data.size

    def backward(g):
        scaled = (2.0 * g / n) * diff
        return scaled, -scaled

    return _record(out, (a, b), backward)


# --- parameters, optimizer, checkpoints ---

class ParameterStore:
    """Named parameter map with uniform(-k, k), k = 1/sqrt(fan_in) init helpers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_linear(self, name: str, fan_in: int, fan_out: int, rng) -> tuple[Tensor, Tensor]:
        k = 1.0 / np.sqrt(fan_in)
        w = self.add(f"{name}.weight", rng.uniform(-k, k, size=(fan_in, fan_out)))
        b = self.add(f"{name}.bias", rng.uniform(-k, k, size=(fan_out,)))
        return w, b

    def add_layer_norm(self, name: str, dim: int) -> tuple[Tensor, Tensor]:
        gain = self.add(f"{name}.gain", np.ones(dim))
        bias = self.add(f"{name}.bias", np.zeros(dim))
        return gain, bias

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None


class AdamW:
    """Adam with decoupled weight decay (decay applied to weights, not gradients)."""

    def __init__(self, params: ParameterStore, lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def grad_check(fn, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `fn` maps a Tensor of `point`'s shape to a scalar Tensor. The error for
    each coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    with Tape() as tape:
        loss = fn(x)
    tape.backward(loss)
    g_ad = x.grad.reshape(-1)
    flat = point.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += eps
        hi = fn(Tensor(bump.reshape(point.shape))).item()
        bump[i] -= 2.0 * eps
        lo = fn(Tensor(bump.reshape(point.shape))).item()
        g_fd[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterStore, config: dict) -> Path:
    """One JSON header line (names, shapes, config) + little-endian float64 blob."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in params.items()],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {header.get('format_version')}")
    params = ParameterStore()
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        params.add(entry["name"], chunk.reshape(shape).copy())
    if offset != len(blob):
        raise ValueError(f"checkpoint blob size mismatch: read {offset}, file has {len(blob)}")
    return params, header["config"]


# --- per-primitive finite-difference suite ---

PRIMITIVE_CHECKS = {
    "matmul": lambda x: sum_(matmul(reshape(x, (3, 4)), reshape(x, (4, 3)))),
    "add": lambda x: sum_(square(add(x, Tensor(np.linspace(0, 1, 12))))),
    "sub": lambda x: sum_(square(sub(x, Tensor(np.linspace(0, 1, 12))))),
    "mul": lambda x: sum_(mul(x, Tensor(np.linspace(-1, 1, 12)))),
    "div": lambda x: sum_(div(x, Tensor(np.linspace(2, 3, 12)))),
    "exp": lambda x: sum_(exp(x)),
    "log": lambda x: sum_(log(add(square(x), Tensor(np.ones(12))))),
    "sqrt": lambda x: sum_(sqrt(add(square(x), Tensor(np.ones(12))))),
    "square": lambda x: sum_(square(x)),
    "absolute": lambda x: sum_(absolute(x)),
    "arccos": lambda x: sum_(arccos(mul(Tensor(np.full(12, 0.05)), x))),
    "relu": lambda x: sum_(relu(x)),
    "concat": lambda x: sum_(square(concat([x, mul(x, x)], axis=0))),
    "slice": lambda x: sum_(square(x[3:9])),
    "transpose": lambda x: sum_(
        matmul(reshape(x, (3, 4)), transpose(reshape(x, (3, 4))))
    ),
    "reshape": lambda x: mean(square(reshape(x, (2, 6)))),
    "softmax": lambda x: sum_(
        mul(softmax(reshape(x, (3, 4))), Tensor(np.arange(12.0).reshape(3, 4)))
    ),
    "layer_norm": lambda x: sum_(
        square(layer_norm(reshape(x, (3, 4)),
                          Tensor(np.linspace(0.5, 1.5, 4)),
                          Tensor(np.linspace(-0.2, 0.2, 4))))
    ),
    "linear": lambda x: sum_(
        square(linear(reshape(x, (2, 6)),
                      Tensor(np.linspace(-1, 1, 18).reshape(6, 3)),
                      Tensor(np.linspace(0, 1, 3))))
    ),
    "mean": lambda x: mean(square(x)),
    "mse": lambda x: mse(x, Tensor(np.linspace(-1, 1, 12))),
    "clamp": lambda x: sum_(square(clamp(x, -0.5, 0.5))),
    "broadcast_bias": lambda x: sum_(
        square(add(reshape(x, (3, 4)), Tensor(np.linspace(0, 1, 4))))
    ),
}


def primitive_check_point(name: str, rng: np.random.Generator) -> np.ndarray:
    """Random 12-vector test point, nudged off kinks for the non-smooth ops."""
    x = rng.normal(size=12)
    if name == "clamp":
        x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, x + 0.01, x)
    if name in ("absolute", "relu"):
        x = np.where(np.abs(x) < 1e-3, x + 0.01, x)
    return x


def primitive_grad_errors(trials: int = 5) -> dict[str, float]:
    """Max FD relative error per primitive over `trials` random points.

    Seeds derive from a CRC of the primitive name, so the suite is
    reproducible across processes.
    """
    import zlib

    out = {}
    for name, fn in PRIMITIVE_CHECKS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        out[name] = max(grad_check(fn, primitive_check_point(name, rng))
                        for _ in range(trials))
    return out
