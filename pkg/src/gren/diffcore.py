"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that sees at least one ``requires_grad`` operand records a node
holding its parents and a local backward rule. ``backward`` walks the
recorded nodes in reverse topological order, accumulates gradients into
leaf ``.grad`` buffers and then consumes the tape, so a second pass over
the same graph raises instead of double counting.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Raised on misuse of a recorded graph (non-scalar loss, reuse)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "_op")

    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> None:
        backward(self)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def log1mexp(a) -> Tensor:
    """log(1 - exp(a)) for a < 0, stable on both ends of the range."""
    a = as_tensor(a)
    ad = a.data
    if np.any(ad >= 0):
        raise ValueError("log1mexp needs strictly negative input")
    out = np.where(ad < -math.log(2.0), np.log1p(-np.exp(np.minimum(ad, -math.log(2.0)))),
                   np.log(-np.expm1(np.maximum(ad, -math.log(2.0)))))
    # d/da log(1 - e^a) = -e^a / (1 - e^a)
    return _record(out, (a,), lambda g: (g * np.exp(ad) / np.expm1(ad),), "log1mexp")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softplus(x) -> Tensor:
    """log(1 + exp(x)); note log(sigmoid(z)) = -softplus(-z)."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    e = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (_softplus_grad(sig, g),), "softplus")


def _softplus_grad(sig: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * sig


def _sigmoid_grad(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out * (1.0 - out)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (_sigmoid_grad(out, g),), "sigmoid")


class _GateTape:
    """Relu on/off patterns recorded on one pass and replayed on later passes."""

    def __init__(self):
        self.gates: list[np.ndarray] = []
        self.recording = True
        self.cursor = 0

    def rewind(self) -> None:
        self.cursor = 0

    def gate(self, pre: np.ndarray) -> np.ndarray:
        if self.recording:
            positive = pre > 0
            self.gates.append(positive)
            return positive
        if self.cursor >= len(self.gates) or self.gates[self.cursor].shape != pre.shape:
            raise GraphError("replayed graph does not match the recorded relu sequence")
        positive = self.gates[self.cursor]
        self.cursor += 1
        return positive


_gate_tape: _GateTape | None = None


@contextmanager
def frozen_relu_gates():
    """Freeze relu gating at the first evaluation inside the block.

    Later evaluations reuse the recorded on/off pattern (call ``rewind()`` on
    the yielded tape before each one), so nearby parameter values are scored
    on the same linear piece of the network, the piece whose derivative
    backward computes.
    """
    global _gate_tape
    if _gate_tape is not None:
        raise GraphError("relu gates are already frozen")
    _gate_tape = _GateTape()
    try:
        yield _gate_tape
    finally:
        _gate_tape = None


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0 if _gate_tape is None else _gate_tape.gate(x.data)
    return _record(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,), "relu")


# ------------------------------------------------------------------ structure


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.sum(a.data, axis=axis), (a,), rule, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def rule(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index]), (a,), rule, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tensors, rule, "stack")


def repeat_spatial(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by ``factor``."""
    a = as_tensor(a)
    shape = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)

    def rule(g):
        h, w = shape[-2], shape[-1]
        return (g.reshape(*shape[:-2], h, factor, w, factor).sum(axis=(-3, -1)),)

    return _record(out, (a,), rule, "repeat_spatial")


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dot needs two equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(np.dot(ad, bd), (a, b), lambda g: (g * bd, g * ad), "dot")


# -------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``weight[F,C,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: stride={stride}, padding={padding}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(
            f"output size not exact: ({hp}-{kh})/{stride} or ({wp}-{kw})/{stride} leaves a remainder"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ValueError(f"bias shape {bias.shape} does not match {f} filters")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            if stride == kh and stride == kw:
                # non-overlapping windows: col2im is a pure permutation
                gxp = gcols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, hp, wp)
            else:
                gxp = np.zeros((n, c, hp, wp))
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                            gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record(out, parents, rule, "conv2d")


# ------------------------------------------------------------ vector helpers


def masked_avg_pool(feature, mask) -> Tensor:
    """Per-channel mean of ``feature[C,H,W]`` over the nonzero cells of ``mask[H,W]``."""
    feature = as_tensor(feature)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if feature.ndim != 3 or m.shape != feature.shape[1:]:
        raise ValueError(f"mask {m.shape} does not match feature {feature.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    count = m.sum()
    if count == 0:
        raise ValueError("empty mask: region has no cells")
    out = (feature.data * m).sum(axis=(1, 2)) / count
    return _record(out, (feature,), lambda g: (g[:, None, None] * m / count,), "masked_avg_pool")


def l2_normalize(v, epsilon: float = 1e-12) -> Tensor:
    v = as_tensor(v)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    vd = v.data
    norm = float(np.sqrt(np.dot(vd, vd)))
    if norm >= epsilon:
        u = vd / norm
        return _record(u, (v,), lambda g: ((g - u * np.dot(u, g)) / norm,), "l2_normalize")
    return _record(vd / epsilon, (v,), lambda g: (g / epsilon,), "l2_normalize")


def euclidean_distance(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = float(np.sqrt(np.sum(diff * diff)))

    def rule(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return (z, z)
        ga = g * diff / d
        return (ga, -ga)

    return _record(np.asarray(d), (a, b), rule, "euclidean_distance")


def cosine_similarity(a, b, epsilon: float = 1e-12) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na, nb = float(np.linalg.norm(ad)), float(np.linalg.norm(bd))
    denom = na * nb
    if denom >= epsilon:
        c = float(np.dot(ad, bd)) / denom
        return _record(
            np.asarray(c),
            (a, b),
            lambda g: (g * (bd / denom - c * ad / (na * na)), g * (ad / denom - c * bd / (nb * nb))),
            "cosine_similarity",
        )
    return _record(
        np.asarray(np.dot(ad, bd) / epsilon),
        (a, b),
        lambda g: (g * bd / epsilon, g * ad / epsilon),
        "cosine_similarity",
    )


# ------------------------------------------------------------------ backward


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if loss._backward is None:
        raise GraphError("loss is not attached to a recorded graph")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must rebuild its graph on every call from the current values in
    ``params``. With ``max_coords`` set, that many coordinates per tensor
    are sampled (seeded) instead of checking every entry.
    """
    return grad_check_many(lambda: {"value": fn()}, params, step, max_coords, seed)["value"]


def grad_check_many(
    fn: Callable[[], Mapping[str, Tensor]],
    params: Sequence[Tensor],
    step: float | Mapping[str, float] = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    freeze_gates: bool = False,
) -> dict[str, float]:
    """``grad_check`` for several scalar outputs of one graph, sharing the sampled coordinates.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``step`` may be a mapping from output name to step size, since a large
    loss needs a wide step to clear roundoff while a sharply curved one
    needs a narrow step to keep truncation error down.
    With ``freeze_gates`` the relu pattern of the unperturbed point is held
    fixed, so a perturbation that pushes some unit across zero does not
    mix slopes from two linear pieces into the difference quotient.
    """
    if freeze_gates:
        with frozen_relu_gates() as tape:
            fn()
            tape.recording = False

            def replay():
                tape.rewind()
                return fn()

            return grad_check_many(replay, params, step, max_coords, seed)
    names = list(fn())
    steps = {n: step[n] if isinstance(step, Mapping) else step for n in names}
    if any(not h > 0 for h in steps.values()):
        raise ValueError("step must be positive")
    analytic = {}
    for name in names:
        zero_grad(params)
        out = fn()[name]
        if not np.isfinite(out.data).all():
            raise ValueError(f"fn returned a non-finite {name}")
        backward(out)
        analytic[name] = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    def values(group: list[str]) -> np.ndarray:
        outs = fn()
        v = np.array([outs[n].item() for n in group])
        if not np.isfinite(v).all():
            raise ValueError("fn returned a non-finite value")
        return v

    groups: dict[float, list[str]] = {}
    for n in names:
        groups.setdefault(steps[n], []).append(n)

    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(names, 0.0)
    for j, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            for h, group in groups.items():
                flat[idx] = orig + h
                up = values(group)
                flat[idx] = orig - h
                down = values(group)
                flat[idx] = orig
                numeric = (up - down) / (2.0 * h)
                for n, num in zip(group, numeric):
                    a = analytic[n][j].reshape(-1)[idx]
                    err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    worst[n] = max(worst[n], err)
    return {n: float(w) for n, w in worst.items()}
