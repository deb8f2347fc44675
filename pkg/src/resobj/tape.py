"""Tape-based reverse-mode differentiation over dense float64 tensors.

A Tape records one TapeNode per primitive application; node ids strictly
increase in creation order, so the backward sweep is a single reverse
walk. A node flagged stop_gradient passes its forward value through
unchanged and contributes exactly zero gradient to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from resobj import kernels
from resobj.errors import ContractError, DomainError, NumericError

PRIMITIVES = (
    "add",
    "subtract",
    "multiply",
    "matmul",
    "conv2d",
    "relu",
    "sigmoid",
    "log",
    "pow",
    "sum",
    "mean",
    "masked_select",
    "broadcast",
    "smooth_l1",
)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    saved: tuple = ()
    stop_grad: bool = False
    param_name: str | None = None


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.params: dict[str, int] = {}

    def _record(self, node: TapeNode) -> "Tensor":
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value) -> "Tensor":
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        value = np.asarray(value, dtype=np.float64, order="C")
        return self._record(TapeNode("leaf", (), value))

    def param(self, name: str, value) -> "Tensor":
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = self.leaf(value)
        self.nodes[t.nid].param_name = name
        self.params[name] = t.nid
        return t


class Tensor:
    __slots__ = ("tape", "nid")

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ContractError("operands live on different tapes")
            return other
        return self.tape.leaf(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return apply_primitive("add", self, self._coerce(other))

    def __radd__(self, other):
        return apply_primitive("add", self._coerce(other), self)

    def __sub__(self, other):
        return apply_primitive("subtract", self, self._coerce(other))

    def __rsub__(self, other):
        return apply_primitive("subtract", self._coerce(other), self)

    def __mul__(self, other):
        return apply_primitive("multiply", self, self._coerce(other))

    def __rmul__(self, other):
        return apply_primitive("multiply", self._coerce(other), self)

    def __matmul__(self, other):
        return apply_primitive("matmul", self, self._coerce(other))

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes numpy broadcasting expanded to reach shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(grad)


def _check_same_tape(inputs):
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _shapes(inputs):
    return ", ".join(str(t.shape) for t in inputs)


def apply_primitive(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply one primitive, record its TapeNode, and return the output."""
    if kind not in PRIMITIVES:
        raise ContractError(f"unknown primitive kind {kind!r}")
    tape = _check_same_tape(inputs)
    vals = [t.data for t in inputs]

    if kind in ("add", "subtract", "multiply"):
        a, b = vals
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ContractError(f"{kind}: shapes do not broadcast: {_shapes(inputs)}")
        if kind == "add":
            out, saved = a + b, ()
        elif kind == "subtract":
            out, saved = a - b, ()
        else:
            out, saved = a * b, (a, b)
    elif kind == "matmul":
        a, b = vals
        if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise ContractError(f"matmul: unsupported shapes {_shapes(inputs)}")
        out, saved = a @ b, (a, b)
    elif kind == "conv2d":
        x, w = vals
        if x.ndim != 3 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
            raise ContractError(f"conv2d: unsupported shapes {_shapes(inputs)}")
        out, saved = kernels.conv2d_forward(x, w), (x, w)
    elif kind == "relu":
        (x,) = vals
        out, saved = np.maximum(x, 0.0), ()
    elif kind == "sigmoid":
        (x,) = vals
        # Branch on sign so exp never overflows.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        saved = ()
    elif kind == "log":
        (x,) = vals
        if np.any(x <= 0):
            raise DomainError("log of non-positive value")
        out, saved = np.log(x), (x,)
    elif kind == "pow":
        (x,) = vals
        exponent = float(attrs["exponent"])
        if exponent < 0:
            raise ContractError("pow: exponent must be >= 0")
        if np.any(x < 0) or (exponent < 1 and np.any(x == 0)):
            raise DomainError("pow: base outside domain")
        out, saved = np.power(x, exponent), (x, exponent)
    elif kind == "sum":
        (x,) = vals
        out, saved = np.asarray(x.sum()), (x.shape,)
    elif kind == "mean":
        (x,) = vals
        out, saved = np.asarray(x.mean()), (x.shape,)
    elif kind == "masked_select":
        (x,) = vals
        mask = np.asarray(attrs["mask"], dtype=bool)
        if mask.shape != x.shape:
            raise ContractError(
                f"masked_select: mask shape {mask.shape} != input shape {x.shape}"
            )
        out, saved = np.ascontiguousarray(x[mask]), (mask,)
    elif kind == "broadcast":
        (x,) = vals
        shape = tuple(attrs["shape"])
        try:
            ok = np.broadcast_shapes(x.shape, shape) == shape
        except ValueError:
            ok = False
        if not ok:
            raise ContractError(f"broadcast: cannot broadcast {x.shape} to {shape}")
        out, saved = np.ascontiguousarray(np.broadcast_to(x, shape)), ()
    elif kind == "smooth_l1":
        (x,) = vals
        beta = float(attrs["beta"])
        if beta <= 0:
            raise ContractError("smooth_l1: beta must be > 0")
        ax = np.abs(x)
        out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
        saved = (x, beta)

    return tape._record(TapeNode(kind, tuple(t.nid for t in inputs), out, saved))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient to its inputs."""
    node = TapeNode("stop_gradient", (x.nid,), x.data, stop_grad=True)
    return x.tape._record(node)


def _backward_rules(node: TapeNode, g: np.ndarray, nodes) -> list[np.ndarray]:
    op = node.op
    if op == "add":
        sa, sb = (nodes[i].value.shape for i in node.inputs)
        return [_unbroadcast(g, sa), _unbroadcast(g, sb)]
    if op == "subtract":
        sa, sb = (nodes[i].value.shape for i in node.inputs)
        return [_unbroadcast(g, sa), _unbroadcast(-g, sb)]
    if op == "multiply":
        a, b = node.saved
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if op == "matmul":
        a, b = node.saved
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return [ga, gb]
    if op == "conv2d":
        x, w = node.saved
        return [kernels.conv2d_backward_x(g, w), kernels.conv2d_backward_w(x, g)]
    if op == "relu":
        return [g * (node.value > 0)]
    if op == "sigmoid":
        s = node.value
        return [g * s * (1.0 - s)]
    if op == "log":
        (x,) = node.saved
        return [g / x]
    if op == "pow":
        x, exponent = node.saved
        if exponent == 0:
            return [np.zeros_like(x)]
        return [g * exponent * np.power(x, exponent - 1.0)]
    if op == "sum":
        (shape,) = node.saved
        return [np.broadcast_to(g, shape).copy()]
    if op == "mean":
        (shape,) = node.saved
        n = int(np.prod(shape)) if shape else 1
        return [np.broadcast_to(g / n, shape).copy()]
    if op == "masked_select":
        (mask,) = node.saved
        gx = np.zeros(mask.shape)
        gx[mask] = g
        return [gx]
    if op == "broadcast":
        (inp,) = node.inputs
        return [_unbroadcast(g, nodes[inp].value.shape)]
    if op == "smooth_l1":
        x, beta = node.saved
        return [g * np.clip(x / beta, -1.0, 1.0)]
    raise AssertionError(f"no backward rule for {op}")


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every registered parameter.

    Parameters the loss does not reach get explicit zero tensors.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    nodes = tape.nodes
    adj: dict[int, np.ndarray] = {loss.nid: np.ones(())}
    for nid in range(loss.nid, -1, -1):
        g = adj.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.param_name is not None:
            adj[nid] = g  # keep parameter adjoints
            continue
        if node.stop_grad or not node.inputs:
            continue
        for inp, gi in zip(node.inputs, _backward_rules(node, g, nodes)):
            if inp in adj:
                adj[inp] = adj[inp] + gi
            else:
                adj[inp] = gi
    grads = {}
    for name, nid in tape.params.items():
        grads[name] = adj.get(nid, np.zeros(nodes[nid].value.shape))
    return grads


# Convenience wrappers used throughout the model and loss code.


def relu(x):
    return apply_primitive("relu", x)


def sigmoid(x):
    return apply_primitive("sigmoid", x)


def log(x):
    return apply_primitive("log", x)


def pow_const(x, exponent):
    return apply_primitive("pow", x, exponent=exponent)


def tsum(x):
    return apply_primitive("sum", x)


def tmean(x):
    return apply_primitive("mean", x)


def masked_select(x, mask):
    return apply_primitive("masked_select", x, mask=mask)


def broadcast(x, shape):
    return apply_primitive("broadcast", x, shape=shape)


def smooth_l1(x, beta):
    return apply_primitive("smooth_l1", x, beta=beta)


def conv2d(x, w):
    return apply_primitive("conv2d", x, w)


def finite_diff_check(scalar_fn, params: dict[str, np.ndarray], epsilon: float = 1e-5):
    """Max relative error between backward() and central differences.

    scalar_fn maps a params dict to a scalar Tensor on a fresh tape; it
    must be deterministic. Error per component is
    |analytic - central| / max(1, |central|).
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    loss = scalar_fn(params)
    analytic = backward(loss)

    def value(p):
        v = float(scalar_fn(p).data)
        if not np.isfinite(v):
            raise NumericError(f"scalar function returned non-finite value {v}")
        return v

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value(params)
            flat[i] = orig - epsilon
            down = value(params)
            flat[i] = orig
            central = (up - down) / (2 * epsilon)
            err = abs(analytic[name].reshape(-1)[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
