"""Dense tensors, a reverse-mode gradient tape and the Adam optimizer.

The engine is deliberately small: every primitive stores a closure that maps
the output cotangent to cotangents of its operands, and :meth:`Tape.backward`
replays those closures in exact reverse execution order. Operations executed
while no tape is active are plain numpy computations.

    >>> w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = matvec(w, Tensor([1.0, 1.0])).sum()
    >>> tape.backward(loss, [w])
    >>> w.grad
    array([[1., 1.],
           [1., 1.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, TapeStateError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    """The innermost tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array with an optional gradient slot.

    Only float32 and float64 element types are used; integer input is
    promoted to float64.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; operations on tensors that require gradients
    are recorded while the tape is active. A tape can be replayed once.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise TapeStateError("tape already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def consumed(self):
        return self._consumed

    def record(self, out, parents, vjp, op):
        if self._consumed:
            raise TapeStateError("tape already consumed")
        self._nodes.append((out, parents, vjp, op))

    def ops(self):
        """Names of the recorded primitives in execution order."""
        return [node[3] for node in self._nodes]

    def backward(self, loss, params=None):
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Tensors listed in ``params`` that did not participate receive zero
        gradients. Returns the list of visited op names (reverse order).
        """
        if self._consumed:
            raise TapeStateError("tape already consumed")
        if loss.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = {id(node[0]) for node in self._nodes}
        leaves = {}
        visited = []
        for out, parents, vjp, op in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            visited.append(op)
            for p, gp in zip(parents, vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
                if key not in produced:
                    leaves[key] = p
        for key, leaf in leaves.items():
            leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        for p in params or ():
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)
        self._consumed = True
        self._nodes = []
        return visited


def _make(data, parents, vjp, op):
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjp, op)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = _pair(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _pair(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def rational_activation(x):
    """Elementwise x / (1 + |x|)."""
    x = as_tensor(x)
    denom = 1.0 + np.abs(x.data)
    return _make(x.data / denom, (x,), lambda g: (g / (denom * denom),), "rational")


def relu_activation(x):
    """Elementwise max(x, 0); the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * mask,), "relu")


def identity_activation(x):
    return as_tensor(x)


ACTIVATIONS = {
    "identity": identity_activation,
    "rational": rational_activation,
    "relu": relu_activation,
}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}") from None


# reductions -----------------------------------------------------------------

def tsum(x, axis=None):
    x = as_tensor(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis), (x,), vjp, "sum")


def mean(x):
    x = as_tensor(x)
    n = x.size
    return _make(np.mean(x.data), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


# shape manipulation ---------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1=-1, a2=-2):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x, index):
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), vjp, "getitem")


def pad(x, axis, before, after):
    """Zero-pad ``x`` along one axis."""
    x = as_tensor(x)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    stop = x.shape[axis] + before

    def vjp(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, stop)
        return (g[tuple(sl)],)

    return _make(np.pad(x.data, widths), (x,), vjp, "pad")


def repeat(x, repeats, axis=0):
    """Repeat every slice along ``axis`` ``repeats`` times consecutively."""
    x = as_tensor(x)

    def vjp(g):
        shape = list(x.shape)
        shape.insert(axis + 1, repeats)
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make(np.repeat(x.data, repeats, axis=axis), (x,), vjp, "repeat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "stack")


# contractions ---------------------------------------------------------------

def matmul(a, b):
    """Broadcasting matrix product of operands with ndim >= 2."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions; use matvec")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def matvec(W, y):
    """z[i] = sum_j W[i, j] y[j] for a square matrix and a vector."""
    W, y = _pair(W, y)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or y.shape != (W.shape[1],):
        raise DimensionError(f"matvec expects [P,P] and [P], got {W.shape} and {y.shape}")
    return _make(W.data @ y.data, (W, y),
                 lambda g: (np.outer(g, y.data), W.data.T @ g), "matvec")


def contract2d(A, X, B):
    """Bilinear block transform A X B^T (batched over leading axes)."""
    A, X, B = as_tensor(A), as_tensor(X), as_tensor(B)
    for name, t in (("A", A), ("X", X), ("B", B)):
        if t.ndim < 2 or t.shape[-1] != t.shape[-2]:
            raise DimensionError(f"contract2d operand {name} must be square, got {t.shape}")
    if not A.shape[-1] == X.shape[-1] == B.shape[-1]:
        raise DimensionError(f"contract2d size mismatch {A.shape}, {X.shape}, {B.shape}")
    n = X.shape[0] if X.ndim == 4 else None
    if n is not None and A.shape == B.shape == (n, 1) + X.shape[2:]:
        return _contract2d_slab(A, X, B)
    return matmul(matmul(A, X), swapaxes(B))


def _contract2d_slab(A, X, B):
    # per-node weights shared across the batch axis: fold the batch into one
    # wide matrix per node so each product is a single (P x P) @ (P x bP)
    n, b, P, _ = X.shape
    a, bt = A.data[:, 0], B.data[:, 0]

    def rows(Y):  # (n, b, P, P) -> (n, bP, P), stacking row blocks
        return Y.reshape(n, b * P, P)

    def cols(Y):  # (n, b, P, P) -> (n, P, bP), stacking column blocks
        return Y.transpose(0, 2, 1, 3).reshape(n, P, b * P)

    def uncols(Y):
        return Y.reshape(n, P, b, P).transpose(0, 2, 1, 3)

    xb = (rows(X.data) @ np.swapaxes(bt, -1, -2)).reshape(n, b, P, P)
    out = np.ascontiguousarray(uncols(a @ cols(xb)))

    def vjp(g):
        ga = cols(g) @ np.swapaxes(cols(xb), -1, -2)
        atg = uncols(np.swapaxes(a, -1, -2) @ cols(g))
        gx = (np.ascontiguousarray(atg).reshape(n, b * P, P) @ bt).reshape(n, b, P, P)
        ax = uncols(a @ cols(X.data))
        gb = np.swapaxes(rows(g), -1, -2) @ np.ascontiguousarray(ax).reshape(n, b * P, P)
        return ga[:, None], gx, gb[:, None]

    return _make(out, (A, X, B), vjp, "contract2d")


def einsum(subscripts, *operands):
    """Explicit-output einsum with reverse-mode support.

    Every operand's subscripts must be distinct letters; no ellipsis.
    """
    ops = [as_tensor(o) for o in operands]
    if "->" not in subscripts or "." in subscripts:
        raise ContractError("einsum needs explicit '->' output and no ellipsis")
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ContractError("einsum operand count mismatch")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ContractError("repeated subscripts inside one operand are not supported")
    try:
        data = np.einsum(subscripts, *[o.data for o in ops])
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        grads = []
        for k, (sk, op) in enumerate(zip(in_subs, ops)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [(s, o.data) for j, (s, o) in enumerate(zip(in_subs, ops)) if j != k]
            present = set(out_subs).union(*[set(s) for s, _ in others])
            keep = "".join(c for c in sk if c in present)
            spec = ",".join([out_subs] + [s for s, _ in others]) + "->" + keep
            gk = np.einsum(spec, g, *[d for _, d in others])
            if keep != sk:
                shape = [op.shape[sk.index(c)] if c in keep else 1 for c in sk]
                order = [keep.index(c) for c in sk if c in keep]
                gk = np.transpose(gk, order).reshape(shape)
                gk = np.broadcast_to(gk, op.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _make(data, tuple(ops), vjp, "einsum")


def mse(pred, target):
    """Mean of squared differences, recorded on the tape."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One in-place Adam update of ``params`` (numpy arrays) given ``grads``."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam shape mismatch {p.shape}, {g.shape}, {m.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / p.dtype.type(bc1)
        vhat = v / p.dtype.type(bc2)
        p -= p.dtype.type(state.lr) * mhat / (np.sqrt(vhat) + p.dtype.type(state.eps))
    return params, state


class Adam:
    """Adam over a list of :class:`Tensor` parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


# verification ---------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    records: list

    def failures(self, tol):
        return [r for r in self.records if r[3] > tol]

    def passed(self, tol=1e-5):
        return self.max_rel_error <= tol


def grad_check(forward, params, probes=20, h=1e-6, rng=None, names=None, floor=1e-4):
    """Compare tape gradients to central differences at random scalar probes.

    ``forward`` is a zero-argument closure returning a scalar Tensor built
    from ``params``. The relative error of one probe is
    ``|g - fd| / max(|g|, |fd|, floor * max(1, |f|))``; the floor keeps
    gradients below the round-off level of the difference quotient
    (about eps * |f| / h) from dominating.
    """
    rng = np.random.default_rng(rng)
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    with Tape() as tape:
        loss = forward()
    tape.backward(loss, params)
    scale = floor * max(1.0, abs(float(loss.data)))
    analytic = [p.grad.copy() for p in params]
    sizes = np.array([p.size for p in params], dtype=float)
    records = []
    for _ in range(probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = int(rng.integers(params[k].size))
        view = params[k].data.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        fp = float(forward().data)
        view[flat] = orig - h
        fm = float(forward().data)
        view[flat] = orig
        fd = (fp - fm) / (2 * h)
        g = float(analytic[k].reshape(-1)[flat])
        err = abs(g - fd) / max(abs(g), abs(fd), scale)
        records.append((names[k], flat, g, err, fd))
    worst = max(records, key=lambda r: r[3]) if records else ("", 0, 0.0, 0.0, 0.0)
    return GradCheckResult(worst[3], worst[0], [r[:4] for r in records])
