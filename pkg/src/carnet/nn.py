"""Layers: convolutions, batch normalisation, activations, dense, GRU cell and
local self-attention, each with a fused numpy kernel where it pays off.

Image tensors are laid out ``(N, C, H, W)``.
"""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, _record


# ---------------------------------------------------------------------------
# module container
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container.

    Tensors assigned as attributes are registered as parameters when they
    require grad and as buffers otherwise; sub-modules are walked recursively
    in assignment order, which fixes the parameter naming used by checkpoints.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        for reg in (self._params, self._buffers, self._modules):
            reg.pop(name, None)
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor):
            (self._params if value.requires_grad else self._buffers)[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def state(self) -> dict[str, Tensor]:
        """Parameters then buffers, by dotted name."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextlib.contextmanager
    def evaluating(self):
        """Eval mode for the duration of a block; the previous mode is restored afterwards."""
        mode = self.training
        self.eval()
        try:
            yield self
        finally:
            self.train(mode)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of ``(N, C, H, W)`` as a contiguous ``(C, k, k, N, Ho, Wo)`` array."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add ``(C, k, k, N, Ho, Wo)`` patches into ``shape``."""
    out = np.zeros(shape, dtype=cols.dtype)
    ho, wo = cols.shape[4:]
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    return x, False


def conv2d(x, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight ``(C_out, C_in, k, k)``."""
    x = T.as_tensor(x)
    x, squeeze = _as_batch(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input channels {c} do not match weight {weight.shape}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size for input {x.shape}, kernel {k}, "
                         f"stride {stride}, padding {padding}")
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo).reshape(c * k * k, -1)
    w2 = wd.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gx = gw = gb = None
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = _col2im(gcols, xp.shape, k, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    y = _record("conv2d", out, parents, backward)
    return T.reshape(y, y.shape[1:]) if squeeze else y


def conv_transpose2d(x, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution with weight ``(C_in, C_out, k, k)``."""
    x = T.as_tensor(x)
    x, squeeze = _as_batch(x, "conv_transpose2d")
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv_transpose2d: input channels {c} do not match weight {weight.shape}")
    ho = conv_transpose_output_size(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, k, stride, padding, output_padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size for input {x.shape}")
    hf, wf = (h - 1) * stride + k + output_padding, (w - 1) * stride + k + output_padding
    xd, wd = x.data, weight.data
    x2 = xd.transpose(1, 0, 2, 3).reshape(c, -1)
    w2 = wd.reshape(c, -1)
    cols = (w2.T @ x2).reshape(co, k, k, n, h, w)
    full = _col2im(cols, (n, co, hf, wf), k, stride)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, co, hf, wf), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gcols = _im2col(gfull, k, stride, h, w).reshape(co * k * k, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((w2 @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (x2 @ gcols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    y = _record("conv_transpose2d", out, parents, backward)
    return T.reshape(y, y.shape[1:]) if squeeze else y


def batchnorm2d(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5, *, training: bool = True,
                running_mean: Tensor | None = None, running_var: Tensor | None = None,
                momentum: float = 0.1) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode batch statistics are used and the running buffers, when
    given, are updated in place; in eval mode the running buffers are used.
    """
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    xd = x.data
    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d: eval mode needs running statistics")
        inv = (1.0 / np.sqrt(running_var.data + eps)).astype(xd.dtype)
        scale = T.mul(gamma, Tensor(inv))
        shift = T.sub(beta, T.mul(scale, Tensor(running_mean.data.astype(xd.dtype))))
        return T.add(T.mul(x, T.reshape(scale, (c, 1, 1))), T.reshape(shift, (c, 1, 1)))
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data[:, None, None], beta.data[:, None, None]
    out = xhat * gd + bd
    if running_mean is not None and running_var is not None:
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu.reshape(c)).astype(running_mean.dtype)
        running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(running_var.dtype)

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return gx, gg, gb

    return _record("batchnorm2d", out, (x, gamma, beta), backward)


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped."""
    x = T.as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"avg_pool2d: input {x.shape} smaller than window {k}")
    xd = x.data[:, :, :ho * k, :wo * k]
    out = xd.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * k, :wo * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _record("avg_pool2d", out, (x,), backward)


def _band(n: int, taps: np.ndarray) -> np.ndarray:
    """``(n - len(taps) + 1, n)`` matrix whose rows apply the 'valid' correlation with ``taps``."""
    m = n - len(taps) + 1
    band = np.zeros((m, n), dtype=taps.dtype)
    for t, v in enumerate(taps):
        band[np.arange(m), np.arange(m) + t] = v
    return band


def separable_filter(x, kernel: np.ndarray) -> Tensor:
    """'Valid' depthwise filtering of each (H, W) plane with ``outer(kernel, kernel)``."""
    x = T.as_tensor(x)
    g1 = np.asarray(kernel, dtype=x.dtype)
    kk = g1.shape[0]
    n, c, h, w = x.shape
    if h < kk or w < kk:
        raise ShapeError(f"separable_filter: input {x.shape} smaller than window {kk}")
    bh, bw = _band(h, g1), _band(w, g1)
    out = bh @ x.data @ bw.T

    def backward(g):
        return (bh.T @ g @ bw,)

    return _record("separable_filter", np.ascontiguousarray(out), (x,), backward)


def unfold_neighborhoods(x, k: int) -> Tensor:
    """Zero-padded k×k neighbourhoods: ``(N, C, H, W) -> (N, H, W, k*k, C)``.

    Neighbour index ``a*k + b`` holds the pixel at offset ``(a - k//2, b - k//2)``.
    """
    x = T.as_tensor(x)
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(n, h, w, k * k, c)

    def backward(g):
        g6 = g.reshape(n, h, w, k, k, c)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                gxp[:, :, a:a + h, b:b + w] += g6[:, :, :, a, b, :].transpose(0, 3, 1, 2)
        return (gxp[:, :, p:p + h, p:p + w],)

    return _record("unfold_neighborhoods", out, (x,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def activation(kind: str, x, axis: int | None = None) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax needs an axis")
        return T.softmax(x, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _param(rng.uniform(-bound, bound, (n_out, n_in)), dtype)
        if bias:
            self.bias = _param(np.zeros(n_out), dtype)
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        y = T.matmul(x, T.transpose(self.weight))
        return y if self.bias is None else T.add(y, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.weight = _param(rng.uniform(-bound, bound, (c_out, c_in, k, k)), dtype)
        self.bias = _param(np.zeros(c_out), dtype)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "transposed", False)

    def output_size(self, n: int) -> int:
        return conv_output_size(n, self.weight.shape[2], self.stride, self.padding)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, output_padding: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        bound = 1.0 / np.sqrt(c_out * k * k)
        self.weight = _param(rng.uniform(-bound, bound, (c_in, c_out, k, k)), dtype)
        self.bias = _param(np.zeros(c_out), dtype)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "output_padding", output_padding)
        object.__setattr__(self, "transposed", True)

    def output_size(self, n: int) -> int:
        return conv_transpose_output_size(n, self.weight.shape[2], self.stride, self.padding, self.output_padding)

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = _param(np.ones(c), dtype)
        self.bias = _param(np.zeros(c), dtype)
        self.running_mean = Tensor(np.zeros(c, dtype=dtype))
        self.running_var = Tensor(np.ones(c, dtype=dtype))
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "momentum", momentum)

    def forward(self, x):
        return batchnorm2d(x, self.weight, self.bias, self.eps, training=self.training,
                           running_mean=self.running_mean, running_var=self.running_var,
                           momentum=self.momentum)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Sigmoid(Module):
    def forward(self, x):
        return T.sigmoid(x)


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

class GRUCell(Module):
    """GRU over the concatenation ``[h, x]`` with full (hidden, hidden+input) gate matrices."""

    def __init__(self, n_input: int, n_hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.W_z = _param(_orthogonal_rows(rng, n_hidden, n_hidden + n_input), dtype)
        self.W_r = _param(_orthogonal_rows(rng, n_hidden, n_hidden + n_input), dtype)
        self.W = _param(_orthogonal_rows(rng, n_hidden, n_hidden + n_input), dtype)
        self.b_z = _param(np.zeros(n_hidden), dtype)
        self.b_r = _param(np.zeros(n_hidden), dtype)
        self.b = _param(np.zeros(n_hidden), dtype)
        object.__setattr__(self, "n_input", n_input)
        object.__setattr__(self, "n_hidden", n_hidden)

    def forward(self, h_prev, x_in):
        return gru_step(h_prev, x_in, self)


def _orthogonal_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if rows <= cols else q


def gru_step(h_prev, x_in, p: GRUCell, *, return_gates: bool = False):
    """One GRU update; accepts unbatched ``(hidden,)`` or batched ``(B, hidden)`` states."""
    h_prev, x_in = T.as_tensor(h_prev), T.as_tensor(x_in)
    hid, n_in = p.W.shape[0], p.W.shape[1] - p.W.shape[0]
    if h_prev.shape[-1] != hid or x_in.shape[-1] != n_in or h_prev.shape[:-1] != x_in.shape[:-1]:
        raise ShapeError(f"gru_step: h_prev {h_prev.shape} / x_in {x_in.shape} do not match "
                         f"hidden={hid}, input={n_in}")
    hx = T.concat([h_prev, x_in], axis=-1)
    z = T.sigmoid(T.add(T.matmul(hx, T.transpose(p.W_z)), p.b_z))
    r = T.sigmoid(T.add(T.matmul(hx, T.transpose(p.W_r)), p.b_r))
    rhx = T.concat([T.mul(r, h_prev), x_in], axis=-1)
    h_tilde = T.tanh(T.add(T.matmul(rhx, T.transpose(p.W)), p.b))
    h = T.add(T.mul(T.sub(1.0, z), h_prev), T.mul(z, h_tilde))
    if return_gates:
        return h, {"z": z, "r": r, "h_tilde": h_tilde}
    return h


# ---------------------------------------------------------------------------
# local self-attention
# ---------------------------------------------------------------------------

class LocalSelfAttention(Module):
    """Single-head attention over a k×k zero-padded neighbourhood of every pixel,
    optionally with learned row/column relative-position embeddings."""

    def __init__(self, d_in: int, d_out: int, k: int, rng: np.random.Generator, relative: bool = True,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if k % 2 == 0 or k < 1:
            raise ValueError(f"neighbourhood extent must be odd and positive, got {k}")
        if relative and d_out % 2:
            raise ValueError(f"relative attention needs an even output dimension, got {d_out}")
        bound = 1.0 / np.sqrt(d_in)
        self.W_Q = _param(rng.uniform(-bound, bound, (d_out, d_in)), dtype)
        self.W_K = _param(rng.uniform(-bound, bound, (d_out, d_in)), dtype)
        self.W_V = _param(rng.uniform(-bound, bound, (d_out, d_in)), dtype)
        if relative:
            self.r_row = _param(rng.normal(0, 1 / np.sqrt(d_out), (k, d_out // 2)), dtype)
            self.r_col = _param(rng.normal(0, 1 / np.sqrt(d_out), (k, d_out // 2)), dtype)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "relative", relative)

    def forward(self, x):
        return local_self_attention(x, self, relative=self.relative)


def _pointwise(x: Tensor, w: Tensor) -> Tensor:
    """Apply ``w`` (d_out, d_in) to every pixel: (N, d_in, H, W) -> (N, H, W, d_out)."""
    return T.matmul(T.transpose(x, (0, 2, 3, 1)), T.transpose(w))


def local_self_attention(x, p: LocalSelfAttention, relative: bool = True, *, return_weights: bool = False):
    x = T.as_tensor(x)
    x, squeeze = _as_batch(x, "local_self_attention")
    k = p.k
    if k % 2 == 0:
        raise ValueError(f"neighbourhood extent must be odd, got {k}")
    d_out = p.W_Q.shape[0]
    if relative and d_out % 2:
        raise ValueError(f"relative attention needs an even output dimension, got {d_out}")
    n, _, h, w = x.shape
    q = _pointwise(x, p.W_Q)                                    # (N, H, W, d)
    # project once per pixel, then gather; zero padding commutes with the linear maps
    k_nb = unfold_neighborhoods(T.transpose(_pointwise(x, p.W_K), (0, 3, 1, 2)), k)   # (N, H, W, K, d)
    v_nb = unfold_neighborhoods(T.transpose(_pointwise(x, p.W_V), (0, 3, 1, 2)), k)
    q_e = T.reshape(q, (n, h, w, 1, d_out))
    scores = T.reduce_sum(T.mul(q_e, k_nb), axis=-1)            # (N, H, W, K)
    if relative:
        offs = np.arange(k * k)
        rel = T.concat([T.take(p.r_row, offs // k, axis=0), T.take(p.r_col, offs % k, axis=0)], axis=-1)
        scores = T.add(scores, T.reduce_sum(T.mul(q_e, rel), axis=-1))
    weights = T.softmax(scores, axis=-1)
    y = T.reduce_sum(T.mul(T.reshape(weights, (n, h, w, k * k, 1)), v_nb), axis=-2)  # (N, H, W, d)
    y = T.transpose(y, (0, 3, 1, 2))
    if squeeze:
        y = T.reshape(y, y.shape[1:])
    return (y, weights) if return_weights else y
