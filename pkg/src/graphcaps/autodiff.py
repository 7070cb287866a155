"""Minimal dense-tensor kernel with reverse-mode gradients.

Just enough ops for the models in this project: elementwise arithmetic,
matmul, valid-padding 2-D convolution, reductions, softmax, and the capsule
prediction contraction.  Arrays are float64 row-major numpy; convolution is
implemented as one GEMM per kernel tap so the heavy lifting stays in BLAS.

Gradients are accumulated over a taped graph; ``Tensor.backward()`` walks the
tape in reverse topological order.  Ops performed inside :func:`no_grad` (or
on tensors that do not require gradients) record nothing.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray plus an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        # first contribution copies (g may be a view into another grad buffer
        # that is also handed to a second parent)
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray):
        # fast path for backward rules that pass a freshly allocated array (or
        # a view of one) given to this parent only; ownership transfers
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(-g)

        return Tensor._make(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate_owned(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g * exponent * a.data ** (exponent - 1))

        return Tensor._make(a.data**exponent, (a,), backward)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accumulate_owned(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return Tensor._make(a.data @ b.data, (a, b), backward)

    # -- elementwise functions ---------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g * out_data)

        return Tensor._make(out_data, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g / a.data)

        return Tensor._make(np.log(a.data), (a,), backward)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g * 0.5 / out_data)

        return Tensor._make(out_data, (a,), backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g * mask)

        return Tensor._make(np.where(mask, a.data, 0.0), (a,), backward)

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (a,), backward)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.data.shape

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g.reshape(old_shape))

        return Tensor._make(a.data.reshape(shape), (a,), backward)

    def transpose(self, axes):
        a = self
        inverse = np.argsort(axes)

        def backward(g):
            if a.requires_grad:
                a._accumulate_owned(g.transpose(inverse))

        return Tensor._make(a.data.transpose(axes), (a,), backward)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        in_shape = a.data.shape

        def backward(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate_owned(np.broadcast_to(g, in_shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate_owned(np.broadcast_to(g, in_shape).copy())

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- composite nonlinearity --------------------------------------------------

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if a.requires_grad:
                inner = (g * out_data).sum(axis=axis, keepdims=True)
                a._accumulate_owned(out_data * (g - inner))

        return Tensor._make(out_data, (a,), backward)

    # -- tape -----------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
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


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------


def conv2d(x, kernels, bias=None, stride=(1, 1)):
    """Valid-padding cross-correlation.

    x: (B, H, W, Cin); kernels: (fh, fw, Cin, Cout); bias: (Cout,) or None.
    Output: (B, Ho, Wo, Cout) with Ho = (H - fh)//sh + 1, Wo = (W - fw)//sw + 1.
    Patches are gathered once (im2col) so both directions are single GEMMs.
    """
    x = Tensor._lift(x)
    kernels = Tensor._lift(kernels)
    if isinstance(stride, int):
        stride = (stride, stride)
    sh, sw = stride
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError(
            f"conv2d expects x (B,H,W,Cin) and kernels (fh,fw,Cin,Cout), "
            f"got {x.data.shape} and {kernels.data.shape}"
        )
    B, H, W, Cin = x.data.shape
    fh, fw, kin, Cout = kernels.data.shape
    if kin != Cin:
        raise ValueError(f"input has {Cin} channels but kernels expect {kin}")
    if fh > H or fw > W:
        raise ValueError(f"kernel {fh}x{fw} larger than input {H}x{W}")
    Ho = (H - fh) // sh + 1
    Wo = (W - fw) // sw + 1

    cols = np.empty((B, Ho, Wo, fh, fw, Cin), dtype=np.float64)
    for p in range(fh):
        for q in range(fw):
            cols[:, :, :, p, q, :] = x.data[:, p : p + sh * Ho : sh, q : q + sw * Wo : sw, :]
    cols = cols.reshape(B * Ho * Wo, fh * fw * Cin)
    k2d = kernels.data.reshape(fh * fw * Cin, Cout)
    out_data = (cols @ k2d).reshape(B, Ho, Wo, Cout)

    parents = [x, kernels]
    b = None
    if bias is not None:
        b = Tensor._lift(bias)
        if b.data.shape != (Cout,):
            raise ValueError(f"bias shape {b.data.shape} != ({Cout},)")
        out_data += b.data
        parents.append(b)

    def backward(g):
        g2d = g.reshape(-1, Cout)
        if x.requires_grad:
            dcols = (g2d @ k2d.T).reshape(B, Ho, Wo, fh, fw, Cin)
            dx = np.zeros_like(x.data)
            for p in range(fh):
                for q in range(fw):
                    dx[:, p : p + sh * Ho : sh, q : q + sw * Wo : sw, :] += dcols[:, :, :, p, q, :]
            x._accumulate_owned(dx)
        if kernels.requires_grad:
            kernels._accumulate_owned((cols.T @ g2d).reshape(fh, fw, Cin, Cout))
        if b is not None and b.requires_grad:
            b._accumulate_owned(g2d.sum(axis=0))

    return Tensor._make(out_data, tuple(parents), backward)


def caps_predict(u, weights):
    """Per-pair linear maps from input to output capsule space.

    u: (B, n_in, d_in); weights: (n_in, n_out, d_in, d_out).
    Output predictions: (B, n_in, n_out, d_out).  Expressed as one batched
    GEMM over the n_in axis.
    """
    u = Tensor._lift(u)
    weights = Tensor._lift(weights)
    B, n_in, d_in = u.data.shape
    w_in, n_out, wd_in, d_out = weights.data.shape
    if (w_in, wd_in) != (n_in, d_in):
        raise ValueError(
            f"weights {weights.data.shape} incompatible with inputs {u.data.shape}"
        )
    # (n_in, B, d_in) @ (n_in, d_in, n_out*d_out) -> (n_in, B, n_out*d_out)
    w_flat = np.ascontiguousarray(
        weights.data.transpose(0, 2, 1, 3).reshape(n_in, d_in, n_out * d_out)
    )
    u_t = np.ascontiguousarray(u.data.transpose(1, 0, 2))
    out_data = (u_t @ w_flat).reshape(n_in, B, n_out, d_out).transpose(1, 0, 2, 3)

    def backward(g):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(n_in, B, n_out * d_out)
        if u.requires_grad:
            du = (g_t @ w_flat.transpose(0, 2, 1)).transpose(1, 0, 2)
            u._accumulate_owned(du)
        if weights.requires_grad:
            dw_flat = u_t.transpose(0, 2, 1) @ g_t  # (n_in, d_in, n_out*d_out)
            weights._accumulate_owned(
                dw_flat.reshape(n_in, d_in, n_out, d_out).transpose(0, 2, 1, 3)
            )

    return Tensor._make(np.ascontiguousarray(out_data), (u, weights), backward)


def route_weighted_sum(couplings, predictions):
    """s[b, o, d] = sum_n c[b, n, o] * u_hat[b, n, o, d] without materializing
    the full product.  couplings: (B, n_in, n_out); predictions: (B, n_in,
    n_out, d_out)."""
    c = Tensor._lift(couplings)
    u_hat = Tensor._lift(predictions)
    u_t = u_hat.data.transpose(0, 2, 1, 3)  # (B, n_out, n_in, d_out)
    out_data = (c.data.transpose(0, 2, 1)[:, :, None, :] @ u_t)[:, :, 0, :]

    def backward(g):
        if c.requires_grad:
            dc = (u_t @ g[:, :, :, None])[:, :, :, 0].transpose(0, 2, 1)
            c._accumulate_owned(np.ascontiguousarray(dc))
        if u_hat.requires_grad:
            u_hat._accumulate_owned(c.data[:, :, :, None] * g[:, None, :, :])

    return Tensor._make(np.ascontiguousarray(out_data), (c, u_hat), backward)


def route_agreement(predictions, outputs):
    """a[b, n, o] = sum_d u_hat[b, n, o, d] * v[b, o, d]; the logit update of
    routing-by-agreement."""
    u_hat = Tensor._lift(predictions)
    v = Tensor._lift(outputs)
    u_t = u_hat.data.transpose(0, 2, 1, 3)  # (B, n_out, n_in, d_out)
    out_data = (u_t @ v.data[:, :, :, None])[:, :, :, 0].transpose(0, 2, 1)

    def backward(g):
        g_t = g.transpose(0, 2, 1)  # (B, n_out, n_in)
        if u_hat.requires_grad:
            u_hat._accumulate_owned(g[:, :, :, None] * v.data[:, None, :, :])
        if v.requires_grad:
            dv = (g_t[:, :, None, :] @ u_t)[:, :, 0, :]
            v._accumulate_owned(np.ascontiguousarray(dv))

    return Tensor._make(np.ascontiguousarray(out_data), (u_hat, v), backward)


def squash_op(v, eps: float = 1e-9):
    """Fused capsule squash along the last axis.

    out = v * s(nsq) with nsq = |v|^2 and s(nsq) = nsq / ((1+nsq) sqrt(nsq+eps));
    the epsilon keeps the map differentiable at the zero vector.
    """
    v = Tensor._lift(v)
    nsq = (v.data * v.data).sum(axis=-1, keepdims=True)
    root = np.sqrt(nsq + eps)
    scale = nsq / ((1.0 + nsq) * root)
    out_data = v.data * scale

    def backward(g):
        if not v.requires_grad:
            return
        # d scale / d nsq, written to stay finite at nsq = 0
        denom = (1.0 + nsq) * root
        dscale = (
            1.0 / denom
            - nsq / ((1.0 + nsq) * denom)
            - 0.5 * nsq / (denom * (nsq + eps))
        )
        inner = (g * v.data).sum(axis=-1, keepdims=True)
        v._accumulate_owned(g * scale + v.data * (2.0 * inner * dscale))

    return Tensor._make(out_data, (v,), backward)


def concat(tensors, axis: int = 0):
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def grad_check(f, point, h: float = 1e-5, rel_floor: float = 1e-6) -> float:
    """Max elementwise relative error between reverse-mode and central
    finite-difference gradients of the scalar map ``f``.

    ``point`` is a sequence of arrays; ``f`` receives one Tensor per array and
    returns a scalar Tensor.  The error denominator is floored at
    ``rel_floor`` so elements whose true gradient is ~0 are compared
    absolutely at that scale.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    tensors = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in point]
    out = f(*tensors)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                hi = f(*tensors).item()
            flat[j] = orig - h
            with no_grad():
                lo = f(*tensors).item()
            flat[j] = orig
            fd[j] = (hi - lo) / (2.0 * h)
        ref = analytic[ti].reshape(-1)
        denom = np.maximum(np.abs(ref) + np.abs(fd), rel_floor)
        worst = max(worst, float(np.max(np.abs(ref - fd) / denom)))
    return worst
