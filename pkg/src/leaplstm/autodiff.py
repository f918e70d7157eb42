"""Minimal reverse-mode differentiation on top of numpy.

A :class:`Tape` records every differentiable op executed through it.  Values
are plain :class:`Tensor` wrappers around numpy arrays; parameters are
ordinary leaf tensors with ``requires_grad=True`` and may be shared by several
tapes at once, since gradients live in the tape's own slots and never on the
tensors themselves.

Only the operations the skip-LSTM needs are provided.  Broadcasting is
supported for elementwise ops in the numpy sense, nothing more.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12

_ACTIVATIONS = ("sigmoid", "tanh", "relu")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense array value tracked by a tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum out axes that numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_noise(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Standard Gumbel(0, 1) draws, ``-log(-log(u))`` with ``u ~ U(0, 1)``."""
    u = rng.random(shape)
    # rng.random is on [0, 1); keep u strictly inside (0, 1).
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return (-np.log(-np.log(u))).astype(dtype, copy=False)


class _IndexedGrad:
    """Gradient that is zero outside ``index``; accumulated in place by the tape."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Tape:
    """Ordered record of executed ops with their backward rules.

    Nodes are appended in execution order, which is already a topological
    order of the computation graph; :meth:`backward` walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs)
        if needs:
            self.nodes.append((out, tuple(inputs), backward_fn))
        return out

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """``a @ b`` for ``a`` of shape ``[..., k]`` and ``b`` of shape ``[k, n]``."""
        a, b = as_tensor(a), as_tensor(b)
        if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        av, bv = a.data, b.data

        def backward(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return self._record(av @ bv, (a, b), backward)

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
        """``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``."""
        x, weight = as_tensor(x), as_tensor(weight)
        if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
            raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
        xv, wv = x.data, weight.data
        out = xv @ wv.T
        if bias is None:
            def backward(g):
                gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
                return g @ wv, gw

            return self._record(out, (x, weight), backward)

        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

        def backward_b(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g @ wv, g2.T @ xv.reshape(-1, xv.shape[-1]), g2.sum(axis=0)

        return self._record(out, (x, weight, bias), backward_b)

    # -- elementwise ----------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        )

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        av, bv = a.data, b.data
        return self._record(
            av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a: Tensor, c: float) -> Tensor:
        a = as_tensor(a)
        return self._record(a.data * c, (a,), lambda g: (g * c,))

    def activation(self, x: Tensor, kind: str) -> Tensor:
        """Elementwise sigmoid, tanh or relu."""
        x = as_tensor(x)
        if kind == "sigmoid":
            y = sigmoid_np(x.data)
            return self._record(y, (x,), lambda g: (g * y * (1.0 - y),))
        if kind == "tanh":
            y = np.tanh(x.data)
            return self._record(y, (x,), lambda g: (g * (1.0 - y * y),))
        if kind == "relu":
            mask = x.data > 0
            return self._record(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False),
                                (x,), lambda g: (g * mask,))
        raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")

    def sigmoid(self, x: Tensor) -> Tensor:
        return self.activation(x, "sigmoid")

    def tanh(self, x: Tensor) -> Tensor:
        return self.activation(x, "tanh")

    def relu(self, x: Tensor) -> Tensor:
        return self.activation(x, "relu")

    def log(self, x: Tensor, floor: float = PROB_FLOOR) -> Tensor:
        """Natural log of ``max(x, floor)``; clamped entries get no gradient."""
        x = as_tensor(x)
        clipped = x.data < floor
        safe = np.maximum(x.data, floor)
        return self._record(np.log(safe), (x,), lambda g: (np.where(clipped, 0.0, g / safe),))

    def lstm_cell(self, gates: Tensor, c_prev: Tensor) -> Tensor:
        """Fused LSTM nonlinearity.

        ``gates`` holds pre-activations ``[..., 4h]`` in input, forget,
        output, candidate order.  Returns ``[..., 2h]``: the new hidden state
        followed by the new cell state.
        """
        gates, c_prev = as_tensor(gates), as_tensor(c_prev)
        h = gates.shape[-1] // 4
        if gates.shape[-1] != 4 * h or c_prev.shape[-1] != h:
            raise DimensionError(f"lstm_cell: gates {gates.shape} and cell {c_prev.shape} disagree")
        z = gates.data
        ifo = sigmoid_np(z[..., :3 * h])
        i, f, o = ifo[..., :h], ifo[..., h:2 * h], ifo[..., 2 * h:]
        g = np.tanh(z[..., 3 * h:])
        cp = c_prev.data
        c = f * cp + i * g
        tc = np.tanh(c)

        def backward(grad):
            gh, gc = grad[..., :h], grad[..., h:]
            dc = gc + gh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * cp * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=-1)
            return dz, _unbroadcast(dc * f, cp.shape)

        return self._record(np.concatenate([o * tc, c], axis=-1), (gates, c_prev), backward)

    # -- reductions and normalisation -----------------------------------

    def sum(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        shape, dtype = x.shape, x.dtype
        return self._record(np.asarray(x.data.sum()), (x,),
                            lambda g: (np.broadcast_to(g, shape).astype(dtype),))

    def mean(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        n = x.data.size
        return self.scale(self.sum(x), 1.0 / n)

    def softmax(self, x: Tensor) -> Tensor:
        """Softmax over the last axis, stabilised by max subtraction."""
        x = as_tensor(x)
        if x.data.ndim == 0 or x.shape[-1] < 1:
            raise DimensionError(f"softmax: needs a non-empty last axis, got {x.shape}")
        y = softmax_np(x.data)

        def backward(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._record(y, (x,), backward)

    # -- shape plumbing -------------------------------------------------

    def concat(self, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
        parts = [as_tensor(p) for p in parts]
        if not parts:
            raise DimensionError("concat: no parts given")
        ndim = parts[0].data.ndim
        if not -ndim <= axis < ndim:
            raise DimensionError(f"concat: axis {axis} out of range for {ndim}-d parts")
        ax = axis % ndim
        ref = parts[0].shape
        for p in parts[1:]:
            if p.data.ndim != ndim or any(
                    p.shape[i] != ref[i] for i in range(ndim) if i != ax):
                raise DimensionError(
                    f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}")
        if len(parts) == 1:
            return parts[0]
        bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=ax))

        return self._record(np.concatenate([p.data for p in parts], axis=ax), parts, backward)

    def slice(self, x: Tensor, axis: int, start: int, stop: int) -> Tensor:
        """``x[..., start:stop, ...]`` along ``axis``."""
        x = as_tensor(x)
        ax = axis % x.data.ndim
        index = [slice(None)] * x.data.ndim
        index[ax] = slice(start, stop)
        index = tuple(index)
        return self._record(x.data[index], (x,), lambda g: (_IndexedGrad(index, g),))

    def select(self, x: Tensor, axis: int, i: int) -> Tensor:
        """``x`` indexed at position ``i`` of ``axis``, dropping that axis."""
        x = as_tensor(x)
        ax = axis % x.data.ndim
        index = [slice(None)] * x.data.ndim
        index[ax] = i
        index = tuple(index)
        return self._record(x.data[index], (x,), lambda g: (_IndexedGrad(index, g),))

    def stack(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        parts = [as_tensor(p) for p in parts]
        shapes = {p.shape for p in parts}
        if len(shapes) != 1:
            raise DimensionError(f"stack: parts differ in shape: {sorted(shapes)}")
        ax = axis % (parts[0].data.ndim + 1)

        def backward(g):
            return tuple(np.moveaxis(g, ax, 0))

        return self._record(np.stack([p.data for p in parts], axis=ax), parts, backward)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        x = as_tensor(x)
        src = x.shape
        return self._record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))

    def expand(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        x = as_tensor(x)
        src = x.shape
        return self._record(np.broadcast_to(x.data, shape).copy(), (x,),
                            lambda g: (_unbroadcast(g, src),))

    def embedding(self, table: Tensor, ids: np.ndarray, pad_id: int | None = 0) -> Tensor:
        """Row lookup ``table[ids]``; ``pad_id`` positions read zeros and send no gradient."""
        table = as_tensor(table)
        ids = np.asarray(ids)
        shape, dtype = table.shape, table.dtype
        out = table.data[ids]
        if pad_id is not None:
            out = out * (ids != pad_id)[..., None]

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
            if pad_id is not None:
                full[pad_id] = 0.0
            return (full,)

        return self._record(out, (table,), backward)

    def windows(self, x: Tensor, width: int) -> Tensor:
        """Sliding windows over axis -2 of a ``[..., T, d]`` tensor.

        Returns ``[..., T, width * d]`` where row ``t`` holds
        ``x[t], x[t+1], ..., x[t+width-1]`` flattened; positions past the end
        are zero.
        """
        x = as_tensor(x)
        *lead, T, d = x.shape
        pad = [(0, 0)] * len(lead) + [(0, width - 1), (0, 0)]
        padded = np.pad(x.data, pad)
        out = np.concatenate([padded[..., j:j + T, :] for j in range(width)], axis=-1)

        def backward(g):
            gp = np.zeros(padded.shape, dtype=g.dtype)
            for j in range(width):
                gp[..., j:j + T, :] += g[..., j * d:(j + 1) * d]
            return (gp[..., :T, :],)

        return self._record(out, (x,), backward)

    # -- losses and sampling --------------------------------------------

    def cross_entropy(self, probs: Tensor, labels: Iterable[int]) -> Tensor:
        """Mean over the batch of ``-log(probs[label])`` (probabilities floored at 1e-12)."""
        probs = as_tensor(probs)
        labels = np.asarray(labels, dtype=np.int64)
        if probs.data.ndim != 2 or labels.shape != (probs.shape[0],):
            raise DimensionError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
        k = probs.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
        rows = np.arange(labels.size)
        picked = probs.data[rows, labels]
        safe = np.maximum(picked, PROB_FLOOR)
        n = labels.size
        shape, dtype = probs.shape, probs.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            full[rows, labels] = np.where(picked < PROB_FLOOR, 0.0, -g / (n * safe))
            return (full,)

        return self._record(np.asarray(-np.log(safe).mean()), (probs,), backward)

    def gumbel_softmax_sample(self, pi: Tensor, tau: float, rng: np.random.Generator | None = None,
                              noise: np.ndarray | None = None) -> Tensor:
        """Relaxed categorical sample ``softmax((log pi + g) / tau)``.

        ``g`` is fresh Gumbel noise from ``rng`` unless ``noise`` is given; it
        is a constant for differentiation.
        """
        if not tau > 0:
            raise ValueError(f"gumbel_softmax_sample: tau must be positive, got {tau}")
        pi = as_tensor(pi)
        if noise is None:
            if rng is None:
                raise ValueError("gumbel_softmax_sample: need rng or explicit noise")
            noise = gumbel_noise(rng, pi.shape, pi.dtype)
        logits = self.add(self.log(pi), Tensor(noise))
        return self.softmax(self.scale(logits, 1.0 / tau))

    # -- gradients ------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient slots keyed by ``id(tensor)`` for every recorded value."""
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # Slots allocated here may be updated in place; others may alias a
        # gradient array handed to several inputs.
        owned: set[int] = set()
        for out, inputs, fn in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if not inp.requires_grad or gi is None:
                    continue
                key = id(inp)
                if isinstance(gi, _IndexedGrad):
                    if key not in owned:
                        slot = grads.get(key)
                        slot = np.zeros(inp.shape, dtype=inp.dtype) if slot is None else np.array(slot)
                        grads[key] = slot
                        owned.add(key)
                    grads[key][gi.index] += gi.value
                elif key in grads:
                    if key in owned:
                        grads[key] += gi
                    else:
                        grads[key] = grads[key] + gi
                        owned.add(key)
                else:
                    grads[key] = gi
        return grads


def backward(tape: Tape, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run ``tape`` backward from ``loss``; zeros for unreachable parameters."""
    slots = tape.backward(loss)
    out = {}
    for name, p in params.items():
        g = slots.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out

