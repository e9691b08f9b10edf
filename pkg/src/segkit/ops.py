"""Differentiable primitives over channels-last tensors.

Spatial ops take ``[N, H, W, C]`` inputs. Convolution is cross-correlation
(no kernel flip); stride-1 convolutions run one BLAS GEMM per kernel tap over
strided views of a padded buffer, other strides gather a column matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DimensionError, StateError
from .rng import RngStream
from .tensor import Tensor, as_tensor, check_same_dtype, record

TRAIN = "train"
INFER = "infer"


def _check_mode(mode):
    if mode not in (TRAIN, INFER):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")


def _check_rank(t: Tensor, rank: int, what: str):
    if t.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {list(t.shape)}")


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {list(a.shape)} and {list(b.shape)} differ")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return record("mul", (a, b), out, lambda g: (g * bd, g * ad))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    shape, dt = x.shape, x.data.dtype
    return record("sum", (x,), out, lambda g: (np.full(shape, g, dtype=dt),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))
    shape, dt = x.shape, x.data.dtype
    return record("mean", (x,), out, lambda g: (np.full(shape, g / n, dtype=dt),))


def weighted_sum(x, weights: np.ndarray) -> Tensor:
    """sum(x * w) for a constant array ``w``; handy for building test losses."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise DimensionError(f"weights shape {list(w.shape)} != input shape {list(x.shape)}")
    out = Tensor(np.asarray((x.data * w).sum(), dtype=x.data.dtype))
    return record("weighted_sum", (x,), out, lambda g: (g * w,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = Tensor(x.data.reshape(shape))
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv output size is not integral: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols


def _col2im(cols: np.ndarray, out_shape, stride: int) -> np.ndarray:
    n, ho, wo, kh, kw, c = cols.shape
    if kh == kw == stride:
        # non-overlapping windows: pure layout change
        return cols.transpose(0, 1, 3, 2, 4, 5).reshape(out_shape)
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input ``[N, H, W, Cin]``.
        kernel: ``[Kh, Kw, Cin, Cout]`` with odd ``Kh``, ``Kw``.
        bias: ``[Cout]`` or None.
        stride: step between windows, >= 1.
        padding: zero padding on each spatial border.

    Returns:
        ``[N, H', W', Cout]`` with ``H' = (H + 2*padding - Kh) / stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
    check_same_dtype(*inputs)
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: input channel axis (3) has {c}, kernel axis 2 expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {list(bias.shape)} != [{cout}] (kernel axis 3)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel must have odd spatial size, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        y, backward = _conv_pointwise(x.data, kernel.data)
    elif stride == 1 and cin > 4:
        y, backward = _conv_shifted(x.data, kernel.data, padding, ho, wo)
    else:
        y, backward = _conv_im2col(x.data, kernel.data, stride, padding, ho, wo)
    if bias is not None:
        y += bias.data

        def backward_b(g, _inner=backward):
            return (*_inner(g), g.sum(axis=(0, 1, 2)))

        return record("conv2d", inputs, Tensor(y), backward_b)
    return record("conv2d", inputs, Tensor(y), backward)


def _conv_pointwise(xd, kd):
    n, h, w, cin = xd.shape
    cout = kd.shape[3]
    x2 = xd.reshape(-1, cin)
    k2 = kd.reshape(cin, cout)
    y = (x2 @ k2).reshape(n, h, w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        return (g2 @ k2.T).reshape(xd.shape), (x2.T @ g2).reshape(kd.shape)

    return y, backward


def _tap_view(buf, offset, n, length, c):
    # [n, length, c] window of a padded [n, hp, wp, c] buffer, starting `offset`
    # elements into each image; rows of the view run across padded width.
    s = buf.strides
    return as_strided(buf.reshape(-1)[offset:], shape=(n, length, c), strides=(s[0], s[3] * c, s[3]))


# accumulator block size for the per-tap GEMMs; keeps partial sums in L2
_CHUNK_BYTES = 1 << 19


def _pad_flat(xd, padding):
    n, h, w, c = xd.shape
    # one spare bottom row so the last tap's view stays inside the buffer
    xp = np.zeros((n, h + 2 * padding + 1, w + 2 * padding, c), dtype=xd.dtype)
    xp[:, padding : padding + h, padding : padding + w] = xd
    return xp


def _shifted_forward(xp, kd, ho, wo):
    n, _, wp, c = xp.shape
    kh, kw, _, cout = kd.shape
    length = ho * wp
    views = [_tap_view(xp, (i * wp + j) * c, n, length, c) for i in range(kh) for j in range(kw)]
    taps = [kd[i, j] for i in range(kh) for j in range(kw)]
    y = np.empty((n, length, cout), dtype=xp.dtype)
    step = max(wp, _CHUNK_BYTES // (xp.itemsize * max(c, cout)))
    for a in range(n):
        for r0 in range(0, length, step):
            r1 = min(length, r0 + step)
            acc = views[0][a, r0:r1] @ taps[0]
            for v, k in zip(views[1:], taps[1:]):
                acc += v[a, r0:r1] @ k
            y[a, r0:r1] = acc
    return y.reshape(n, ho, wp, cout)[:, :, :wo]


def _conv_shifted(xd, kd, padding, ho, wo):
    """Stride-1 convolution as one GEMM per kernel tap.

    The input is zero padded and flattened so tap (i, j) is a strided view
    rather than a copy; outputs are produced on the padded width and
    cropped. The input gradient is the same kind of convolution applied to
    the output gradient with the flipped, channel-transposed kernel.
    """
    n, h, w, c = xd.shape
    kh, kw, _, cout = kd.shape
    xp = _pad_flat(xd, padding)
    y = np.ascontiguousarray(_shifted_forward(xp, kd, ho, wo))

    def backward(g):
        flipped = np.ascontiguousarray(kd[::-1, ::-1].transpose(0, 1, 3, 2))
        # gradient of a padding-p conv = full correlation cropped by p
        gpad = np.zeros((n, ho + 2 * (kh - 1) + 1, wo + 2 * (kw - 1), cout), dtype=g.dtype)
        gpad[:, kh - 1 : kh - 1 + ho, kw - 1 : kw - 1 + wo] = g
        full = _shifted_forward(gpad, flipped, ho + kh - 1, wo + kw - 1)
        gx = np.ascontiguousarray(full[:, padding : padding + h, padding : padding + w])

        wp = xp.shape[2]
        length = ho * wp
        gf = np.zeros((n, ho, wp, cout), dtype=g.dtype)
        gf[:, :, :wo] = g
        gf = gf.reshape(n, length, cout)
        gk = np.empty_like(kd)
        for i in range(kh):
            for j in range(kw):
                v = _tap_view(xp, (i * wp + j) * c, n, length, c)
                acc = v[0].T @ gf[0]
                for a in range(1, n):
                    acc += v[a].T @ gf[a]
                gk[i, j] = acc
        return gx, gk

    return y, backward


def _conv_im2col(xd, kd, stride, padding, ho, wo):
    n = xd.shape[0]
    kh, kw, cin, cout = kd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xd, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    k2 = kd.reshape(kh * kw * cin, cout)
    y = (cols @ k2).reshape(n, ho, wo, cout)
    padded_shape = xd.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kd.shape)
        gcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, cin)
        gx = _col2im_padded(gcols, padded_shape, stride)
        if padding:
            gx = gx[:, padding:-padding, padding:-padding, :]
        return gx, gk

    return y, backward


def _col2im_padded(gcols, padded_shape, stride):
    n, ho, wo, kh, kw, c = gcols.shape
    out = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
    return out


def conv_transpose2d(x, kernel, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` without padding.

    ``kernel`` is ``[Kh, Kw, Cout, Cin]``: read as a conv2d kernel it maps
    ``Cout`` channels to ``Cin``, and this op applies its adjoint. The output
    has spatial size ``(H - 1) * stride + Kh``, i.e. ``H * stride`` for the
    2x2 / stride-2 upsampling used by the networks.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank(x, 4, "conv_transpose2d input")
    _check_rank(kernel, 4, "conv_transpose2d kernel")
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
    check_same_dtype(*inputs)
    kh, kw, cout, cin = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise DimensionError(
            f"conv_transpose2d: input channel axis (3) has {c}, kernel axis 3 expects {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv_transpose2d: bias shape {list(bias.shape)} != [{cout}]")
    if stride < 1:
        raise ConfigError(f"conv_transpose2d needs stride >= 1, got {stride}")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    k2 = kernel.data.reshape(kh * kw * cout, cin)
    x2 = x.data.reshape(-1, cin)
    cols = (x2 @ k2.T).reshape(n, h, w, kh, kw, cout)
    y = _col2im(cols, (n, ho, wo, cout), stride)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    has_bias = bias is not None

    def backward(g):
        gcols = _im2col(g, kh, kw, stride, h, w).reshape(n * h * w, kh * kw * cout)
        gx = (gcols @ k2).reshape(x.shape)
        gk = (gcols.T @ x2).reshape(kernel.shape)
        if has_bias:
            return gx, gk, g.sum(axis=(0, 1, 2))
        return gx, gk

    return record("conv_transpose2d", inputs, out, backward)


def dense(x, weights, bias=None) -> Tensor:
    """Affine map ``x @ W + b`` for ``x`` of shape ``[N, D]``."""
    x, weights = as_tensor(x), as_tensor(weights)
    _check_rank(x, 2, "dense input")
    _check_rank(weights, 2, "dense weights")
    inputs = [x, weights]
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
    check_same_dtype(*inputs)
    d, m = weights.shape
    if x.shape[1] != d:
        raise DimensionError(f"dense: input axis 1 has {x.shape[1]}, weights axis 0 has {d}")
    if bias is not None and bias.shape != (m,):
        raise DimensionError(f"dense: bias shape {list(bias.shape)} != [{m}]")
    xd, wd = x.data, weights.data
    y = xd @ wd
    if bias is not None:
        y += bias.data
    out = Tensor(y)
    has_bias = bias is not None

    def backward(g):
        if has_bias:
            return g @ wd.T, xd.T @ g, g.sum(axis=0)
        return g @ wd.T, xd.T @ g

    return record("dense", inputs, out, backward)


# ---------------------------------------------------------------------------
# pooling, activations, normalization


def maxpool2d(x, window: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled tensor and the argmax index of each window (row-major
    position inside the window; ties resolve to the first position).
    """
    x = as_tensor(x)
    _check_rank(x, 4, "maxpool2d input")
    n, h, w, c = x.shape
    if h % window or w % window:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} (axes 1, 2) not divisible by {window}")
    ho, wo = h // window, w // window
    if window == 2:
        y, idx, backward = _maxpool2x2(x.data)
    else:
        y, idx, backward = _maxpool_general(x.data, window)
    out = Tensor(y)
    record("maxpool2d", (x,), out, backward, argmax=idx)
    return out, idx


def _maxpool2x2(xd):
    quads = (xd[:, 0::2, 0::2], xd[:, 0::2, 1::2], xd[:, 1::2, 0::2], xd[:, 1::2, 1::2])
    y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # first window position (row-major) holding the max
    idx = np.full(y.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        idx[quads[k] == y] = k

    def backward(g):
        gx = np.empty(xd.shape, dtype=g.dtype)
        gx[:, 0::2, 0::2] = g * (idx == 0)
        gx[:, 0::2, 1::2] = g * (idx == 1)
        gx[:, 1::2, 0::2] = g * (idx == 2)
        gx[:, 1::2, 1::2] = g * (idx == 3)
        return (gx,)

    return y, idx, backward


def _maxpool_general(xd, window):
    n, h, w, c = xd.shape
    ho, wo = h // window, w // window
    win = (
        xd.reshape(n, ho, window, wo, window, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, window * window)
    )
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, ho, wo, c, window * window), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return y, idx, backward


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0)
    out = Tensor(y)
    # y > 0 exactly where x > 0, so the gradient is 0 at the kink
    return record("relu", (x,), out, lambda g: (g * (y > 0),))


@dataclass
class BatchNormState:
    """Per-channel running statistics; ``None`` until the first train batch."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.9
    eps: float = 1e-5

    @property
    def populated(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
            self.momentum,
            self.eps,
        )


def batchnorm2d(x, gamma, beta, state: BatchNormState, mode: str = TRAIN) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with the (biased) batch variance and folds the
    batch statistics into ``state`` with ``momentum``; the first batch
    initializes the running statistics directly. Infer mode uses ``state``
    only.
    """
    _check_mode(mode)
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank(x, 4, "batchnorm2d input")
    check_same_dtype(x, gamma, beta)
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: gamma {list(gamma.shape)} / beta {list(beta.shape)} must be [{c}] (input axis 3)"
        )
    dt = x.data.dtype
    eps = dt.type(state.eps)
    x2 = x.data.reshape(-1, c)
    m_count = x2.shape[0]
    if mode == TRAIN:
        mu = _chan_mean(x2)
        xc = x2 - mu
        var = _chan_mean(xc * xc)
        if state.populated:
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(dt)
            state.running_var = (m * state.running_var + (1 - m) * var).astype(dt)
        else:
            state.running_mean = mu.copy()
            state.running_var = var.copy()
    else:
        if not state.populated:
            raise StateError("batchnorm2d in infer mode needs populated running statistics")
        mu = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
        xc = x2 - mu
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * inv_std
    gd, bd = gamma.data, beta.data
    out = Tensor((xhat * gd + bd).reshape(x.shape))

    def backward(g):
        g2 = g.reshape(-1, c)
        gbeta = _chan_sum(g2)
        ggamma = _chan_sum(g2 * xhat)
        if mode == TRAIN:
            # d/dx of gamma * (x - mean) / std with batch mean and variance
            scale = gd * inv_std
            gx = scale * (g2 - (gbeta + xhat * ggamma) / dt.type(m_count))
        else:
            gx = g2 * (gd * inv_std)
        return gx.reshape(x.shape).astype(dt, copy=False), ggamma, gbeta

    return record("batchnorm2d", (x, gamma, beta), out, backward, mean=mu, var=var)


def _chan_sum(a2: np.ndarray) -> np.ndarray:
    # column sums through BLAS; much faster than ufunc.reduce for few columns
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def _chan_mean(a2: np.ndarray) -> np.ndarray:
    return _chan_sum(a2) / a2.dtype.type(a2.shape[0])


def dropout(x, rate: float, rng: RngStream | None, mode: str = TRAIN) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    _check_mode(mode)
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == INFER or rate == 0:
        out = Tensor(x.data.copy())
        return record("dropout", (x,), out, lambda g: (g,))
    if rng is None:
        raise StateError("dropout in train mode needs an RngStream")
    dt = x.data.dtype
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(dt)
    out = Tensor(x.data * scale)
    return record("dropout", (x,), out, lambda g: (g * scale,), mask=keep)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rank(a, 4, "concat_channels first input")
    _check_rank(b, 4, "concat_channels second input")
    check_same_dtype(a, b)
    if a.shape[:3] != b.shape[:3]:
        bad = [ax for ax in range(3) if a.shape[ax] != b.shape[ax]]
        raise DimensionError(
            f"concat_channels: axes {bad} differ: {list(a.shape)} vs {list(b.shape)}"
        )
    ca = a.shape[3]
    out = Tensor(np.concatenate([a.data, b.data], axis=3))
    return record("concat_channels", (a, b), out, lambda g: (g[..., :ca], g[..., ca:]))


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    _check_rank(x, 4, "slice_channels input")
    shape, dt = x.shape, x.data.dtype
    out = Tensor(x.data[..., start:stop])

    def backward(g):
        gx = np.zeros(shape, dtype=dt)
        gx[..., start:stop] = g
        return (gx,)

    return record("slice_channels", (x,), out, backward)


def softmax_channels(x) -> Tensor:
    """Per-pixel softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise DimensionError(f"softmax_channels needs >= 2 channels on the last axis, got {x.shape[-1]}")
    s = softmax_array(x.data)
    out = Tensor(s)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax_channels", (x,), out, backward)


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
