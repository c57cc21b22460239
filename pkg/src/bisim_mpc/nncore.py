"""Minimal dense-tensor reverse-mode differentiation.

Everything is float64. A ``Tensor`` wraps a numpy array and, when it is the
result of a recorded operation, a closure that propagates the upstream
gradient to its parents. ``Tensor.backward()`` runs one reverse sweep in
anti-topological order. The op vocabulary is exactly what the MLP stack
needs: affine, ELU, tanh, LayerNorm, elementwise arithmetic, row gather,
reductions, abs and elementwise minimum.

The module also provides ``ParamStore`` (named parameters plus Adam moments)
and a lossless checkpoint container.
"""

from __future__ import annotations

import io
import json

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LAYERNORM_DELTA = 1e-5


class ContractViolation(ValueError):
    """A caller broke an operation precondition (shape/NaN/scalar-ness)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("non-finite values at tensor creation")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- construction of recorded results -------------------------------
    @classmethod
    def _result(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray, owned: bool = False) -> None:
        # First gradient: adopt freshly allocated arrays outright; copy
        # aliases/views so later accumulations never write through them.
        if self.grad is None:
            self.grad = g if owned else np.array(g)
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            # The child's grad array is never touched again after its
            # backward runs, so one parent may adopt ``g`` outright; a
            # second recipient of the very same array must copy.
            taken = False
            if self.requires_grad:
                gs = _unbroadcast(g, self.data.shape)
                taken = gs is g
                self._accum(gs, owned=True)
            if other.requires_grad:
                go = _unbroadcast(g, other.data.shape)
                other._accum(go, owned=go is not g or not taken)

        return Tensor._result(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g, owned=True)

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape), owned=True)
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape), owned=True)

        return Tensor._result(out_data, (self, other), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape), owned=True)
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape), owned=True)

        return Tensor._result(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape), owned=True)
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.data.shape), owned=True)

        return Tensor._result(out_data, (self, other), backward)

    def square(self):
        def backward(g):
            self._accum(g * 2.0 * self.data, owned=True)

        return Tensor._result(self.data**2, (self,), backward)

    def sqrt(self):
        root = np.sqrt(self.data)

        def backward(g):
            self._accum(g * 0.5 / root, owned=True)

        return Tensor._result(root, (self,), backward)

    def abs(self):
        sign = np.sign(self.data)  # subgradient 0 at 0

        def backward(g):
            self._accum(g * sign, owned=True)

        return Tensor._result(np.abs(self.data), (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data, owned=True)

        return Tensor._result(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            self._accum(g * (1.0 - out_data**2), owned=True)

        return Tensor._result(out_data, (self,), backward)

    def matmul(self, other: "Tensor"):
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.data.shape[1] != other.data.shape[0]:
            raise ContractViolation(
                f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}"
            )
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accum(g @ other.data.T, owned=True)
            if other.requires_grad:
                other._accum(self.data.T @ g, owned=True)

        return Tensor._result(out_data, (self, other), backward)

    __matmul__ = matmul

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy(), owned=True)

        return Tensor._result(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def row_slice(self, start: int, stop: int):
        """Contiguous row slice; gradient pads back with zeros."""
        out_data = self.data[start:stop]

        def backward(g):
            acc = np.zeros_like(self.data)
            acc[start:stop] = g
            self._accum(acc, owned=True)

        return Tensor._result(out_data, (self,), backward)

    def take_rows(self, idx: np.ndarray):
        """Row gather; gradient scatter-adds back (rows may repeat)."""
        idx = np.asarray(idx, dtype=np.intp)
        out_data = self.data[idx]
        # Unique indices admit plain assignment; np.add.at is element-wise
        # and an order of magnitude slower.
        unique = np.unique(idx).size == idx.size

        def backward(g):
            acc = np.zeros_like(self.data)
            if unique:
                acc[idx] = g
            else:
                np.add.at(acc, idx, g)
            self._accum(acc, owned=True)

        return Tensor._result(out_data, (self,), backward)

    def concat(self, other: "Tensor"):
        """Concatenate along the last axis."""
        other = self._coerce(other)
        n_left = self.data.shape[-1]
        out_data = np.concatenate([self.data, other.data], axis=-1)

        def backward(g):
            # Disjoint views of the consumed child grad; safe to adopt.
            if self.requires_grad:
                self._accum(g[..., :n_left], owned=True)
            if other.requires_grad:
                other._accum(g[..., n_left:], owned=True)

        return Tensor._result(out_data, (self, other), backward)

    def minimum(self, other: "Tensor"):
        """Elementwise min; the gradient flows to the achieving side (ties -> self)."""
        other = self._coerce(other)
        take_self = self.data <= other.data
        out_data = np.where(take_self, self.data, other.data)

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(np.where(take_self, g, 0.0), self.data.shape), owned=True)
            if other.requires_grad:
                other._accum(_unbroadcast(np.where(take_self, 0.0, g), other.data.shape), owned=True)

        return Tensor._result(out_data, (self, other), backward)

    # -- reverse sweep --------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar loss")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


# -- layer primitives ----------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with b broadcast over rows."""
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[-1]:
        raise ContractViolation(
            f"affine shape mismatch: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
        )
    return x.matmul(w) + b


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1; derivative taken as 1 at exactly 0."""
    ex = np.exp(np.minimum(x.data, 0.0))  # == 1 wherever x >= 0
    out_data = np.where(x.data > 0, x.data, ex - 1.0)

    def backward(g):
        x._accum(g * ex, owned=True)

    return Tensor._result(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row standardization (population variance, delta = 1e-5), then
    gain/bias. Fused into one tape node with the analytic backward."""
    n = x.data.shape[-1]
    if n < 2:
        raise ContractViolation("layer_norm needs feature dim >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LAYERNORM_DELTA)
    xhat = xc / sigma  # same op order as layer_norm_np (bit-exact match)
    inv = 1.0 / sigma
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.data.shape), owned=True)
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accum((gx - m1 - xhat * m2) * inv, owned=True)

    return Tensor._result(out_data, (x, gain, bias), backward)


def elu_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.exp(np.minimum(x, 0.0)) - 1.0)


def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LAYERNORM_DELTA) * gain + bias


# -- parameters and Adam -------------------------------------------------

class ParamStore:
    """Named parameter tensors with per-parameter Adam moments.

    Target-network parameter sets are plain dicts of arrays elsewhere; only
    trainable parameters live here, so no optimizer state can ever exist for
    a target copy.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self, names=None) -> dict[str, np.ndarray]:
        sel = self.params if names is None else {n: self.params[n] for n in names}
        return {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in sel.items()
        }

    def grad_norm(self, names=None) -> float:
        g = self.grads(names)
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in g.values())))

    def adam_step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """One Adam update with bias correction. Rejects NaN gradients."""
        for name, g in grads.items():
            if name not in self.params:
                raise ContractViolation(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].data.shape:
                raise ContractViolation(f"gradient shape mismatch for {name!r}")
            if not np.all(np.isfinite(g)):
                raise ContractViolation(f"non-finite gradient for {name!r}")
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            self.params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# -- checkpoint container ------------------------------------------------

def save_checkpoint(path, store: ParamStore, extra_arrays=None, rng: np.random.Generator | None = None,
                    meta: dict | None = None) -> None:
    """Self-describing .npz with parameters, Adam moments, step counter and RNG state."""
    payload = {"__t__": np.array([store.t], dtype=np.int64)}
    for name, p in store.params.items():
        payload[f"p::{name}"] = p.data
        payload[f"m::{name}"] = store.m[name]
        payload[f"v::{name}"] = store.v[name]
    for name, arr in (extra_arrays or {}).items():
        payload[f"x::{name}"] = arr
    header = {"meta": meta or {}}
    if rng is not None:
        header["rng_state"] = rng.bit_generator.state
    payload["__header__"] = np.frombuffer(
        json.dumps(header, default=int).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns (ParamStore, extra_arrays, rng_state_or_None, meta)."""
    with np.load(path) as data:
        store = ParamStore()
        store.t = int(data["__t__"][0])
        extra = {}
        for key in data.files:
            if key.startswith("p::"):
                name = key[3:]
                p = Tensor(data[key].copy(), requires_grad=True)
                store.params[name] = p
                store.m[name] = data[f"m::{name}"].copy()
                store.v[name] = data[f"v::{name}"].copy()
            elif key.startswith("x::"):
                extra[key[3:]] = data[key].copy()
        header = json.loads(bytes(data["__header__"].tobytes()).decode())
    return store, extra, header.get("rng_state"), header.get("meta", {})


# -- MLP -----------------------------------------------------------------

class MLP:
    """Fixed-depth MLP: n_layers affine maps with ELU between them.

    With ``use_layer_norm`` every hidden pre-activation is LayerNormed before
    the ELU (the value-head variant). Weights init uniform +-sqrt(1/fan_in),
    biases zero.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, hidden_dim: int,
                 out_dim: int, rng: np.random.Generator, n_layers: int = 3,
                 use_layer_norm: bool = False):
        self.name = name
        self.n_layers = n_layers
        self.use_layer_norm = use_layer_norm
        self.param_names: list[str] = []
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        self.weights = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            lim = np.sqrt(1.0 / d_in)
            w = store.register(f"{name}.w{i}", rng.uniform(-lim, lim, size=(d_in, d_out)))
            b = store.register(f"{name}.b{i}", np.zeros(d_out))
            layer = {"w": w, "b": b}
            if use_layer_norm and i < n_layers - 1:
                layer["g"] = store.register(f"{name}.g{i}", np.ones(d_out))
                layer["n"] = store.register(f"{name}.n{i}", np.zeros(d_out))
            self.weights.append(layer)
        self.param_names = [k for k in store.params if k.startswith(name + ".")]

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        """Tape forward pass. ``frozen=True`` detaches all parameters so no
        gradient reaches them (used by the policy objective)."""
        h = x
        last = len(self.weights) - 1
        for i, layer in enumerate(self.weights):
            w = layer["w"].detach() if frozen else layer["w"]
            b = layer["b"].detach() if frozen else layer["b"]
            h = affine(h, w, b)
            if i < last:
                if self.use_layer_norm:
                    g = layer["g"].detach() if frozen else layer["g"]
                    n = layer["n"].detach() if frozen else layer["n"]
                    h = layer_norm(h, g, n)
                h = elu(h)
        return h

    def forward_np(self, x: np.ndarray, params: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Tape-free forward pass; ``params`` overrides (target copies)."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, layer in enumerate(self.weights):
            w = params[f"{self.name}.w{i}"] if params else layer["w"].data
            b = params[f"{self.name}.b{i}"] if params else layer["b"].data
            h = h @ w + b
            if i < last:
                if self.use_layer_norm:
                    g = params[f"{self.name}.g{i}"] if params else layer["g"].data
                    n = params[f"{self.name}.n{i}"] if params else layer["n"].data
                    h = layer_norm_np(h, g, n)
                h = elu_np(h)
        return h
