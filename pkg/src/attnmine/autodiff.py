"""Minimal reverse-mode autodiff on float64 numpy arrays.

Only the operations the mining pipeline needs are provided: 2-d
convolution with "same" zero padding, global average pooling, 2x
bilinear upsampling, ReLU, channel concatenation, elementwise
arithmetic and the numerically stable sigmoid cross-entropy.  Every
operation carries an analytic gradient; see gradcheck.finite_diff_check
for the verification harness.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "conv2d",
    "gap",
    "bilinear_upsample2x",
    "relu",
    "concat_channels",
    "sigmoid_bce",
    "l2_norm",
    "mean_of",
    "stack_vectors",
    "add",
    "scale",
    "sgd_step",
]


class Tensor:
    """A float64 array plus the tape machinery for backpropagation.

    Layout convention for feature maps is (N, W, H, D): batch, width,
    height, channels.  All values must stay finite; operations validate
    their inputs and raise ValueError on shape mismatches.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients into every reachable requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        # Topological order over the tape.
        order = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            if t._backward_fn is None:
                continue
            for parent, pg in zip(t._parents, t._backward_fn(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def _pad_same(x, kw, kh):
    pw0 = (kw - 1) // 2
    pw1 = kw - 1 - pw0
    ph0 = (kh - 1) // 2
    ph1 = kh - 1 - ph0
    return np.pad(x, ((0, 0), (pw0, pw1), (ph0, ph1), (0, 0))), (pw0, pw1, ph0, ph1)


def _im2col(xp, kw, kh, stride, ow, oh):
    n, _, _, d = xp.shape
    cols = np.empty((n, ow, oh, kw, kh, d), dtype=np.float64)
    for i in range(kw):
        for j in range(kh):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + ow * stride : stride, j : j + oh * stride : stride, :
            ]
    return cols.reshape(n, ow, oh, kw * kh * d)


def conv2d(x, kernel, bias=None, stride=1):
    """2-d convolution, zero "same" padding, output (N, ceil(W/s), ceil(H/s), d_out).

    kernel has shape (kw, kh, d_in, d_out); bias, when given, shape (d_out,).
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be rank 4, got shape {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, w, h, d_in = x.shape
    kw, kh, kd_in, d_out = kernel.shape
    if kd_in != d_in:
        raise ValueError(
            f"channel mismatch: input shape {x.shape} vs kernel shape {kernel.shape}"
        )
    ow = -(-w // stride)
    oh = -(-h // stride)
    xp, pads = _pad_same(x.data, kw, kh)
    if kw > xp.shape[1] or kh > xp.shape[2]:
        raise ValueError(
            f"kernel spatial dims {kernel.shape[:2]} exceed padded input {xp.shape[1:3]}"
        )
    cols = _im2col(xp, kw, kh, stride, ow, oh)
    kmat = kernel.data.reshape(kw * kh * d_in, d_out)
    out = cols @ kmat
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (d_out,):
            raise ValueError(f"bias shape {bias.shape} != ({d_out},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gc = g.reshape(n * ow * oh, d_out)
        colmat = cols.reshape(n * ow * oh, kw * kh * d_in)
        gk = (colmat.T @ gc).reshape(kernel.shape)
        gcols = (gc @ kmat.T).reshape(n, ow, oh, kw, kh, d_in)
        gxp = np.zeros_like(xp)
        for i in range(kw):
            for j in range(kh):
                gxp[
                    :, i : i + ow * stride : stride, j : j + oh * stride : stride, :
                ] += gcols[:, :, :, i, j, :]
        pw0, pw1, ph0, ph1 = pads
        gx = gxp[:, pw0 : xp.shape[1] - pw1, ph0 : xp.shape[2] - ph1, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return Tensor(out, parents=parents, backward_fn=backward)


def gap(x):
    """Global average pooling over the spatial dims: (N, W, H, D) -> (N, D)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"gap input must be rank 4, got shape {x.shape}")
    n, w, h, d = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        gx = np.broadcast_to(g[:, None, None, :], (n, w, h, d)) / (w * h)
        return [gx.copy()]

    return Tensor(out, parents=[x], backward_fn=backward)


def _upsample_indices(size):
    # Half-pixel source centers with edge clamping: for output pixel i the
    # source coordinate is (i + 0.5) / 2 - 0.5.
    src = (np.arange(2 * size, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample2x(x):
    """Double the spatial dims by bilinear interpolation (half-pixel centers)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"upsample input must be rank 4, got shape {x.shape}")
    n, w, h, d = x.shape
    wi0, wi1, wf = _upsample_indices(w)
    hi0, hi1, hf = _upsample_indices(h)
    wf = wf[:, None, None]
    hf = hf[None, :, None]

    def sample(arr):
        a = arr[:, wi0][:, :, hi0]
        b = arr[:, wi0][:, :, hi1]
        c = arr[:, wi1][:, :, hi0]
        e = arr[:, wi1][:, :, hi1]
        top = a * (1 - hf) + b * hf
        bot = c * (1 - hf) + e * hf
        return top * (1 - wf) + bot * wf

    out = sample(x.data)

    def backward(g):
        gx = np.zeros_like(x.data)
        ww = [(wi0, 1 - wf), (wi1, wf)]
        hh = [(hi0, 1 - hf), (hi1, hf)]
        for widx, wwt in ww:
            for hidx, hwt in hh:
                contrib = g * wwt * hwt
                np.add.at(gx, (slice(None), widx[:, None], hidx[None, :]), contrib)
        return [gx]

    return Tensor(out, parents=[x], backward_fn=backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return Tensor(
        x.data * mask,
        parents=[x],
        backward_fn=lambda g: [g * mask],
    )


def concat_channels(a, b):
    """Concatenate two (N, W, H, D) maps along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:3] != b.shape[:3]:
        raise ValueError(f"spatial mismatch: {a.shape} vs {b.shape}")
    da = a.shape[3]
    out = np.concatenate([a.data, b.data], axis=3)
    return Tensor(
        out,
        parents=[a, b],
        backward_fn=lambda g: [g[..., :da], g[..., da:]],
    )


def mul_const(x, const):
    """Multiply by a constant array (no gradient flows into the constant)."""
    x = _as_tensor(x)
    c = np.asarray(const, dtype=np.float64)
    return Tensor(x.data * c, parents=[x], backward_fn=lambda g: [g * c])


def matvec(x, w):
    """Per-sample dot product: (N, D) @ (D,) -> (N,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 1 or x.shape[1] != w.shape[0]:
        raise ValueError(f"matvec shape mismatch: {x.shape} vs {w.shape}")
    out = x.data @ w.data
    return Tensor(
        out,
        parents=[x, w],
        backward_fn=lambda g: [np.outer(g, w.data), x.data.T @ g],
    )


def sigmoid_bce(logits, labels):
    """Mean sigmoid cross-entropy over a batch of logits, stable form.

    loss_i = max(z, 0) - z*y + log(1 + exp(-|z|)); gradient sigma(z) - y.
    """
    logits = _as_tensor(logits)
    _check_finite("logits", logits.data)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"label shape {y.shape} != logit shape {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(loss.size, 1)
    out = loss.sum() / n

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return [g * (sig - y) / n]

    return Tensor(out, parents=[logits], backward_fn=backward)


def l2_norm(x, scale_factor=1.0):
    """scale * ||x||_2 over all elements, with zero subgradient at the origin."""
    x = _as_tensor(x)
    norm = float(np.sqrt(np.sum(x.data**2)))
    out = norm * scale_factor

    def backward(g):
        if norm == 0.0:
            return [np.zeros_like(x.data)]
        return [g * scale_factor * x.data / norm]

    return Tensor(out, parents=[x], backward_fn=backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(a.data - b.data, parents=[a, b], backward_fn=lambda g: [g, -g])


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, parents=[a, b], backward_fn=lambda g: [g, g])


def scale(x, alpha):
    x = _as_tensor(x)
    alpha = float(alpha)
    return Tensor(x.data * alpha, parents=[x], backward_fn=lambda g: [g * alpha])


def mean_of(tensors):
    """Arithmetic mean of equally shaped tensors (used for loss averaging)."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("mean_of requires at least one tensor")
    k = len(tensors)
    out = sum(t.data for t in tensors) / k
    return Tensor(
        out,
        parents=tensors,
        backward_fn=lambda g: [g / k for _ in tensors],
    )


def stack_vectors(tensors):
    """Stack K same-length (N,) tensors into an (N, K) matrix."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack_vectors requires at least one tensor")
    out = np.stack([t.data for t in tensors], axis=1)
    return Tensor(
        out,
        parents=tensors,
        backward_fn=lambda g: [g[:, k] for k in range(len(tensors))],
    )


def sgd_step(params, grads, lr):
    """In-place p <- p - lr*g over a list of Tensors and matching gradients."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if p.data.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape} vs grad {g.shape}")
        p.data -= lr * g
