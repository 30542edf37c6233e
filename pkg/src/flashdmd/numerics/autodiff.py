"""Dense float64 tensors with a reverse-mode gradient tape.

The op set is deliberately small (see ``__all__``); everything the training
code needs is composed from these primitives. Broadcasting is supported only
for the bias-add pattern ``[B, n] + [n]`` and for Python scalar constants.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "sum",
    "mean",
    "relu",
    "silu",
    "tanh",
    "exp",
    "log",
    "softplus",
    "square",
    "bias_add",
    "detach",
    "active_tape",
    "no_grad",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, off-tape loss, nesting)."""


_ACTIVE: list["GradientTape"] = []


def active_tape() -> "GradientTape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class no_grad:
    """Suspend recording on the active tape (used for detached rollouts)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()
        return self

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


class Tensor:
    """Value-semantic wrapper around a contiguous float64 array.

    ``requires_grad`` marks a leaf (a trainable parameter). Non-leaf tensors
    produced under an active tape carry ``grad_id``, an index into that
    tape's node list.
    """

    __slots__ = ("data", "requires_grad", "grad_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_id: int | None = None
        self._tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all route through the primitive functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple[int, ...], backward: Callable[[np.ndarray], tuple]):
        self.parents = parents
        self.backward = backward


class GradientTape:
    """Records primitive ops executed inside ``with GradientTape() as tape:``.

    Nodes are appended in execution order, so walking the list backwards is
    a valid reverse topological order and visits each node exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node | None] = []
        self._leaves: dict[int, int] = {}  # id(param tensor) -> node index
        self._leaf_refs: list[Tensor] = []
        self._closed = False

    def __enter__(self) -> "GradientTape":
        if _ACTIVE:
            raise TapeError("nested gradient tapes are not supported")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()
        self._closed = True

    def __len__(self) -> int:
        return len(self._nodes)

    def _handle(self, t: Tensor) -> int | None:
        if t._tape is self and t.grad_id is not None:
            return t.grad_id
        if t.requires_grad:
            key = id(t)
            idx = self._leaves.get(key)
            if idx is None:
                idx = len(self._nodes)
                self._nodes.append(None)
                self._leaves[key] = idx
                self._leaf_refs.append(t)
            return idx
        return None

    def _record(self, out: Tensor, parents: tuple[int | None, ...], backward) -> None:
        out.grad_id = len(self._nodes)
        out._tape = self
        self._nodes.append(_Node(tuple(-1 if p is None else p for p in parents), backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(param) for each param; unreachable params get zeros."""
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced under this tape")
        if loss.grad_id is None:
            return [np.zeros_like(p.data) for p in params]
        grads: dict[int, np.ndarray] = {loss.grad_id: np.ones_like(loss.data)}
        for idx in range(loss.grad_id, -1, -1):
            g = grads.get(idx)
            node = self._nodes[idx]
            if g is None or node is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if p < 0 or pg is None:
                    continue
                prev = grads.get(p)
                grads[p] = pg if prev is None else prev + pg
        out = []
        for prm in params:
            idx = self._leaves.get(id(prm))
            g = grads.get(idx) if idx is not None else None
            out.append(np.zeros_like(prm.data) if g is None else g.reshape(prm.shape))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    # sum() propagates NaN/Inf; cheaper than isfinite().all() on hot paths
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(_check(value, op))
    tape = active_tape()
    if tape is not None:
        handles = tuple(tape._handle(t) for t in inputs)
        if any(h is not None for h in handles):
            tape._record(out, handles, backward)
        else:
            out._tape = tape  # computed on this tape, but independent of every parameter
    return out


def _participates(t: Tensor) -> bool:
    """Whether ``t`` will receive a gradient on the active tape (skips dead work)."""
    tape = active_tape()
    return tape is not None and (t.requires_grad or (t._tape is tape and t.grad_id is not None))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) >= 1 and int(np.prod(shape)) == 1 and g.ndim >= len(shape)):
        return np.asarray(g.sum()).reshape(shape)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (use bias_add for [B,n]+[n])")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = _participates(a), _participates(b)
    return _emit("matmul", ad @ bd, (a, b),
                 lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, max(a.size, 1)
    return _emit("mean", np.asarray(a.data.sum() / n), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
    return _emit("silu", x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit("softplus", y, (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))


def bias_add(x, b) -> Tensor:
    """``x[B, n] + b[n]`` broadcast over rows."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"bias_add: expected [B, n] + [n], got {x.shape} + {b.shape}")
    return _emit("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def detach(a) -> Tensor:
    """Copy of ``a`` that never participates in any tape."""
    return Tensor(_as_tensor(a).data.copy())


def zeros_like_params(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) for p in params]
