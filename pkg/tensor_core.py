# tensor_core.py
"""
Dense float64 tensors with reverse-mode automatic differentiation, the Adam
optimizer, finite-difference gradient checks and a named-tensor checkpoint
format.

Every op records its parents and a closure that pushes the output gradient
back into them; backward() walks the graph in reverse topological order.
A graph can be back-propagated once; run a new forward for the next step.
Broadcasting is limited to what the model needs: trailing-shape parameters
(biases, gains, per-token weights) added to or multiplied into batched
activations.
"""
import logging
import struct
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from errors import DataError, GraphError, NumericError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-12


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True):
        self.data = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""
        self._released = False

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self._op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._op

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf. self must be a scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError("backward() called twice on the same graph; run a new forward pass")

        topo = _build_topo(self)
        for node in topo:
            if not node.is_leaf:
                if node._released:
                    raise GraphError(f"graph node {node._op!r} was already back-propagated")
                node.grad = None
        if not self.requires_grad:
            return

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in topo:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._released = True
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _build_topo(root: Tensor) -> list[Tensor]:
    topo, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, copy=False)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    """Elementwise product with trailing-shape broadcasting."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accumulate(x, g * c)

    return _make(x.data * c, (x,), "scale", backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; a 2-D right operand is shared across the batch."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make(np.transpose(x.data, axes), (x,), "transpose", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise GraphError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}")

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), "reshape", backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise GraphError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}")

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _make(data, (x,), "broadcast_to", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise GraphError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, part)

    return _make(data, tensors, "concat", backward)


def slice_(x: Tensor, key) -> Tensor:
    """x[key] for basic (slice / integer) keys."""
    try:
        data = x.data[key]
    except IndexError as e:
        raise GraphError(f"slice: {e}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] += g
        _accumulate(x, full)

    return _make(np.array(data), (x,), "slice", backward)


def sum_(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.array(x.data.sum()), (x,), "sum", backward)


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]

    def backward(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))

    return _make(x.data.mean(axis=axis), (x,), "mean", backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then gain * xhat + shift."""
    if gain.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise GraphError(f"layer_norm: gain/shift {gain.shape}/{shift.shape} do not match last dim of {x.shape}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        _accumulate(shift, _unbroadcast(g, shift.shape))
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        gx = g * gain.data
        _accumulate(
            x,
            inv_std / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)),
        )

    return _make(xhat * gain.data + shift.data, (x, gain, shift), "layer_norm", backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        _accumulate(x, g * positive)

    return _make(np.where(positive, x.data, 0.0), (x,), "relu", backward)


def reglu(x: Tensor) -> Tensor:
    """Split the last axis into halves a | b and return a * relu(b)."""
    if x.shape[-1] % 2:
        raise GraphError(f"reglu needs an even last dimension, got {x.shape[-1]}")
    half = x.shape[-1] // 2
    a, b = x.data[..., :half], x.data[..., half:]
    positive = b > 0
    rb = np.where(positive, b, 0.0)

    def backward(g):
        _accumulate(x, np.concatenate([g * rb, g * a * positive], axis=-1))

    return _make(a * rb, (x,), "reglu", backward)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise GraphError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise GraphError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "dropout", backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise GraphError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target

    def backward(g):
        _accumulate(pred, g * 2.0 * diff / diff.size)

    return _make(np.array((diff ** 2).mean()), (pred,), "mse_loss", backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise GraphError(f"adam: shape mismatch for parameter {p.name or i}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient for parameter {p.name or i}")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Optimizer wrapper: step() reads each parameter's accumulated .grad."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0, **kwargs):
        self.params = list(params)
        self.state = AdamState(self.params, lr, weight_decay, **kwargs)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

GRADCHECK_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| over max(||a||, ||n||, floor); gradients that are zero up to round-off compare as equal."""
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRADCHECK_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale_)


def gradcheck(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, corrupt: float = 1.0
) -> float:
    """Max relative error between backward() and central differences over all inputs.

    fn must rebuild the graph from `inputs` on every call and return a scalar.
    `corrupt` scales the analytic gradient (harness self-test).
    """
    for x in inputs:
        x.requires_grad = True
        x.zero_grad()
    fn().backward()
    analytic = [x.grad.copy() * corrupt for x in inputs]

    worst = 0.0
    for x, a in zip(inputs, analytic):
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        worst = max(worst, relative_error(a, numeric))
    return worst


def projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights): turns any op output into a gradcheck loss."""
    return sum_(mul(out, weights))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def op_gradcheck_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """One small random case per differentiable op: (name, loss builder, inputs)."""
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def w(*shape):
        return rng.normal(size=shape)

    cases = []

    a, b, wa = t(2, 3, 4), t(4), w(2, 3, 4)
    cases.append(("add", lambda a=a, b=b, wa=wa: projected(add(a, b), wa), [a, b]))

    a, b, wa = t(2, 3, 4), t(3, 4), w(2, 3, 4)
    cases.append(("mul", lambda a=a, b=b, wa=wa: projected(mul(a, b), wa), [a, b]))

    a, wa = t(3, 4), w(3, 4)
    cases.append(("scale", lambda a=a, wa=wa: projected(scale(a, -1.7), wa), [a]))

    a, b, wa = t(2, 3, 4), t(4, 5), w(2, 3, 5)
    cases.append(("matmul", lambda a=a, b=b, wa=wa: projected(matmul(a, b), wa), [a, b]))

    a, wa = t(2, 3, 4), w(3, 2, 4)
    cases.append(("transpose", lambda a=a, wa=wa: projected(transpose(a, (1, 0, 2)), wa), [a]))

    a, wa = t(2, 6), w(3, 4)
    cases.append(("reshape", lambda a=a, wa=wa: projected(reshape(a, (3, 4)), wa), [a]))

    a, wa = t(1, 1, 4), w(2, 3, 4)
    cases.append(("broadcast_to", lambda a=a, wa=wa: projected(broadcast_to(a, (2, 3, 4)), wa), [a]))

    a, b, wa = t(2, 3), t(2, 2), w(2, 5)
    cases.append(("concat", lambda a=a, b=b, wa=wa: projected(concat([a, b], axis=1), wa), [a, b]))

    a, wa = t(2, 5, 3), w(2, 3)
    cases.append(("slice", lambda a=a, wa=wa: projected(slice_(a, (slice(None), 0)), wa), [a]))

    a = t(3, 4)
    cases.append(("sum", lambda a=a: sum_(mul(a, a)), [a]))

    a, wa = t(2, 5, 3), w(2, 3)
    cases.append(("mean", lambda a=a, wa=wa: projected(mean(a, axis=1), wa), [a]))

    a, wa = t(2, 3, 5), w(2, 3, 5)
    cases.append(("softmax", lambda a=a, wa=wa: projected(softmax(a), wa), [a]))

    a, gain, shift, wa = t(2, 3, 6), t(6), t(6), w(2, 3, 6)
    cases.append(("layer_norm", lambda a=a, g=gain, s=shift, wa=wa: projected(layer_norm(a, g, s), wa), [a, gain, shift]))

    a, wa = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True), w(3, 4)
    cases.append(("relu", lambda a=a, wa=wa: projected(relu(a), wa), [a]))

    a, wa = Tensor(_away_from_zero(rng, (2, 3, 8)), requires_grad=True), w(2, 3, 4)
    cases.append(("reglu", lambda a=a, wa=wa: projected(reglu(a), wa), [a]))

    a, wa = t(3, 6), w(3, 6)
    cases.append((
        "dropout",
        lambda a=a, wa=wa: projected(dropout(a, 0.3, True, np.random.default_rng(7)), wa),
        [a],
    ))

    a, target = t(5, 1), w(5, 1)
    cases.append(("mse_loss", lambda a=a, y=target: mse_loss(a, y), [a]))

    return cases


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def checkpoint_bytes(named: dict[str, np.ndarray]) -> bytes:
    """Versioned binary: magic, version, count, then (name, shape, float64 payload) per tensor."""
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(named))]
    for name, arr in named.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8").copy(order="C")
        chunks += [_U16.pack(len(encoded)), encoded, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(d) for d in arr.shape]
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    def need(offset: int, size: int, what: str) -> None:
        if offset + size > len(data):
            raise DataError(f"Checkpoint truncated at byte {offset} while reading {what}")

    need(0, 12, "header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"Not a checkpoint (magic {data[:4]!r})")
    version, count = _U32.unpack_from(data, 4)[0], _U32.unpack_from(data, 8)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"Unsupported checkpoint version {version}")

    offset = 12
    named = {}
    for _ in range(count):
        need(offset, 2, "name length")
        size = _U16.unpack_from(data, offset)[0]
        offset += 2
        need(offset, size + 4, "name")
        name = data[offset:offset + size].decode("utf-8")
        offset += size
        ndim = _U32.unpack_from(data, offset)[0]
        offset += 4
        need(offset, 4 * ndim, f"shape of {name}")
        shape = tuple(_U32.unpack_from(data, offset + 4 * k)[0] for k in range(ndim))
        offset += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        need(offset, 8 * n, f"payload of {name}")
        named[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(data):
        raise DataError(f"Checkpoint has {len(data) - offset} trailing bytes")
    return named


def save_checkpoint(named: dict[str, np.ndarray], path: Path | str) -> None:
    Path(path).write_bytes(checkpoint_bytes(named))


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())
