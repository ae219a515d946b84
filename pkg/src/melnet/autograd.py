"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly what the detector needs: convolution, batch norm, leaky ReLU,
nearest upsampling, channel concat, elementwise maps, slicing/reshaping, and
stable binary cross-entropy on logits. Graphs are recorded implicitly through
parent links and replayed once, in reverse topological order, by
``Tensor.backward``.

Default dtype is float32; gradient checking builds float64 graphs (pass
``dtype=np.float64`` at the leaves, every op preserves dtype).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense real array plus an optional gradient buffer and graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"tensor of shape {self.shape} is not a scalar")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- backward pass ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Every reachable requires-grad leaf receives d(root)/d(leaf); fan-out
        gradients accumulate additively. The traversed graph is released
        afterwards and a second call on the same root raises.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        if self._consumed:
            raise RuntimeError("backward graph already consumed")
        if not self.requires_grad:
            raise RuntimeError("root does not require grad; nothing to differentiate")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            node._consumed = True
            node._parents = ()
            node._backward = None

    # -- arithmetic -------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.data.shape != b.data.shape and b.data.size != 1 and a.data.size != 1:
            raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
        out_data = a.data + b.data

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g, b.data.shape))

        out = Tensor._from_op(out_data, (a, b), backward)
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.data.shape != b.data.shape and b.data.size != 1 and a.data.size != 1:
            raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
        out_data = a.data * b.data

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g * a.data, b.data.shape))

        out = Tensor._from_op(out_data, (a, b), backward)
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward():
            self._accumulate(out.grad.reshape(src_shape))

        out = Tensor._from_op(out_data, (self,), backward)
        return out

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]

        def backward():
            g = np.zeros_like(self.data)
            g[idx] = out.grad
            self._accumulate(g)

        out = Tensor._from_op(out_data, (self,), backward)
        return out

    # -- reductions ---------------------------------------------------------------

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum(), dtype=self.data.dtype)

        def backward():
            self._accumulate(np.broadcast_to(out.grad, self.data.shape))

        out = Tensor._from_op(out_data, (self,), backward)
        return out

    def mean(self) -> "Tensor":
        return self.sum() / self.data.size

    # -- elementwise maps -----------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        s = _sigmoid(self.data)

        def backward():
            self._accumulate(out.grad * s * (1.0 - s))

        out = Tensor._from_op(s, (self,), backward)
        return out

    def exp(self) -> "Tensor":
        e = np.exp(self.data)

        def backward():
            self._accumulate(out.grad * e)

        out = Tensor._from_op(e, (self,), backward)
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise ValueError("log requires strictly positive input")
        out_data = np.log(self.data)

        def backward():
            self._accumulate(out.grad / self.data)

        out = Tensor._from_op(out_data, (self,), backward)
        return out

    def square(self) -> "Tensor":
        out_data = self.data * self.data

        def backward():
            self._accumulate(out.grad * 2.0 * self.data)

        out = Tensor._from_op(out_data, (self,), backward)
        return out

    def leaky_relu(self, alpha: float = 0.1) -> "Tensor":
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
        pos = self.data > 0
        out_data = np.where(pos, self.data, self.data * alpha)

        def backward():
            self._accumulate(out.grad * np.where(pos, 1.0, alpha).astype(self.data.dtype))

        out = Tensor._from_op(out_data, (self,), backward)
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (covers the scalar-broadcast case)."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# -- free functions over tensors ------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    return x.leaky_relu(alpha)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over (n, c, h, w) with square kernels."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects rank-4 input and weight")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d kernels must be square")
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    oh = kernels.out_extent(h, k, stride, padding)
    ow = kernels.out_extent(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output extent is non-positive for input {h}x{w}, k={k}, "
            f"stride={stride}, pad={padding}"
        )
    out_data = kernels.conv2d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (co,):
            raise ValueError(f"conv2d bias must have shape ({co},), got {bias.shape}")
        out_data = out_data + bias.data.reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(kernels.conv2d_backward_input(weight.data, g, x.shape, stride, padding))
        if weight.requires_grad:
            weight._accumulate(kernels.conv2d_backward_weight(x.data, g, weight.shape, stride, padding))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out = Tensor._from_op(out_data, parents, backward)
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float = 0.1, eps: float = 1e-5,
               training: bool = True) -> Tensor:
    """Per-channel batch normalization over (n, c, h, w).

    Training mode normalizes by batch statistics and folds them into the
    running buffers in place; inference mode reads the running buffers only.
    The backward rule differentiates through the batch statistics.
    """
    if x.data.ndim != 4:
        raise ValueError("batch_norm expects rank-4 input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm parameter length {gamma.shape} does not match {c} channels")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError("batch_norm running statistics length mismatch")
    if eps <= 0:
        raise ValueError("batch_norm epsilon must be positive")

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("training-mode batch_norm needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                mean_gs = gs.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                mean_gs_xhat = (gs * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = inv_std.reshape(1, c, 1, 1) * (gs - mean_gs - xhat * mean_gs_xhat)
                del m
            else:
                dx = gs * inv_std.reshape(1, c, 1, 1)
            x._accumulate(dx.astype(x.data.dtype, copy=False))

    out = Tensor._from_op(out_data, (x, gamma, beta), backward)
    return out


def upsample_nearest_x2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums each block."""
    if x.data.ndim != 4:
        raise ValueError("upsample_nearest_x2 expects rank-4 input")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward():
        g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        x._accumulate(g.astype(x.data.dtype, copy=False))

    out = Tensor._from_op(out_data, (x,), backward)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects rank-4 inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g[:, :c1])
        if b.requires_grad:
            b._accumulate(g[:, c1:])

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, computed in a stable form.

    ``targets`` is a plain array (no gradient flows into it).
    """
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"bce_with_logits target shape {t.shape} != logits shape {logits.shape}")
    x = logits.data
    out_data = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward():
        logits._accumulate(out.grad * (_sigmoid(x) - t))

    out = Tensor._from_op(out_data, (logits,), backward)
    return out


# -- gradient checking -------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor],
               step: float = 1e-4, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must return a scalar tensor and must rebuild its graph from the
    given leaves on every call. Inputs are checked coordinate by coordinate
    (a seeded sample of at most ``max_coords`` per input when set); returns
    the worst relative error max|analytic - numeric| / max(1, |a|, |n|).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()

    y = f(*inputs)
    if y.size != 1:
        raise ValueError("grad_check target function must be scalar-valued")
    y.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            with no_grad():
                f_plus = f(*inputs).item()
            flat[idx] = orig - step
            with no_grad():
                f_minus = f(*inputs).item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = float(a.reshape(-1)[idx])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    return worst


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")
