"""Dense 4-D tensor ops: convolution, pooling, activation, dropout, loss.

Public ops take plain numpy arrays in (batch, channel, row, col) layout,
C-contiguous row-major; float64 on training paths, float32 permitted for
speed. Gradients are hand-derived per op and checked against central finite
differences (see gradcheck).

Internally the heavy kernels run channels-last (n, h, w, c): the im2col
gather then reads contiguous channel runs and one GEMM per convolution does
all the arithmetic, which is what keeps single-core training viable. The
public channels-first ops are thin adapters over the same core, so every
test of the public surface exercises the production kernels.

Ops never mutate their inputs; outputs are fresh arrays (dropout in eval
mode returns its input unchanged, which is the documented identity).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, EmptyResultError, InvalidConfigError, InvalidInputError

# Label code excluded from loss and gradients; matches nodata in u8 label rasters.
IGNORE = 255


def check_tensor4(x, name="tensor"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ContractError(f"{name} must be a 4-D (n,c,h,w) array, got {getattr(x, 'shape', None)}")


def to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


@dataclass
class ConvLayer:
    """Square-kernel 2-D convolution with zero same-padding, k in {1, 3}."""

    kernel: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray    # (out_c,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise InvalidConfigError(f"kernel must be (out_c, in_c, k, k), got {self.kernel.shape}")
        if self.k not in (1, 3):
            raise InvalidConfigError(f"kernel size must be 1 or 3, got {self.k}")
        if self.bias.shape != (self.out_c,):
            raise InvalidConfigError(
                f"bias shape {self.bias.shape} does not match out_c={self.out_c}")

    @property
    def out_c(self):
        return self.kernel.shape[0]

    @property
    def in_c(self):
        return self.kernel.shape[1]

    @property
    def k(self):
        return self.kernel.shape[2]

    def param_count(self):
        return self.kernel.size + self.bias.size


@dataclass
class DropoutLayer:
    """Inverted dropout: train mode scales survivors by 1/(1-rate), eval is identity."""

    rate: float
    mode: str = "eval"

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise InvalidConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise InvalidConfigError(f"dropout mode must be train|eval, got {self.mode!r}")


# --- channels-last cores -----------------------------------------------------

def conv_cols(x, k):
    """Unfold k x k same-padded windows of an NHWC tensor.

    Returns (n*h*w, k*k*c); row layout is tap-major (i, j, c) so each window
    row gathers k*k contiguous channel runs. k=1 is a zero-copy reshape.
    """
    n, h, w, c = x.shape
    if k == 1:
        return np.ascontiguousarray(x).reshape(n * h * w, c)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))        # (n,h,w,c,k,k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv_fwd(x, layer, want_cols=False, relu_fuse=False):
    """NHWC convolution; optionally fuses bias+ReLU and keeps the im2col
    matrix for the backward pass. Returns (out, cols-or-None)."""
    n, h, w, _ = x.shape
    cols = conv_cols(x, layer.k)
    wmat = layer.kernel.transpose(2, 3, 1, 0).reshape(-1, layer.out_c)
    out = cols @ wmat.astype(x.dtype, copy=False)
    out += layer.bias.astype(x.dtype, copy=False)
    if relu_fuse:
        np.maximum(out, 0.0, out=out)
    return out.reshape(n, h, w, layer.out_c), (cols if want_cols else None)


def conv_bwd(g, layer, cols):
    """Gradients of conv_fwd: (grad_input NHWC, grad_kernel, grad_bias).

    ``cols`` is the forward im2col matrix; grad wrt input is the same-padding
    correlation of g with the 180-degree rotated, channel-transposed kernel,
    done as one more unfold+GEMM.
    """
    n, h, w, _ = g.shape
    g2 = g.reshape(n * h * w, layer.out_c)
    gw = cols.T @ g2
    grad_kernel = gw.reshape(layer.k, layer.k, layer.in_c, layer.out_c).transpose(3, 2, 0, 1)
    grad_bias = g2.sum(axis=0)
    wrot = layer.kernel[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, layer.in_c)
    gcols = conv_cols(g, layer.k)
    grad_input = (gcols @ wrot.astype(g.dtype, copy=False)).reshape(n, h, w, layer.in_c)
    return grad_input, grad_kernel, grad_bias


def pool_fwd(x, kind):
    """NHWC non-overlapping 2x2 pooling; returns (out, argmax-or-None)."""
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5) \
           .reshape(n, h // 2, w // 2, 4, c)
    if kind == "max":
        idx = win.argmax(axis=3)
        out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        return out, idx
    return win.mean(axis=3), None


def pool_bwd(g, kind, idx, in_shape):
    """Inverse of pool_fwd; max routes to the argmax site, avg spreads g/4."""
    n, h, w, c = in_shape
    if kind == "avg":
        return 0.25 * np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
    gwin = np.zeros((n, h // 2, w // 2, 4, c), dtype=g.dtype)
    np.put_along_axis(gwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
    return np.ascontiguousarray(
        gwin.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h, w, c))


# --- public channels-first ops ----------------------------------------------

def conv2d_forward(x, layer, _cols_out=None):
    """Same-padding convolution; ReLU is not fused. Output (n, out_c, h, w).

    ``_cols_out``: optional 1-element list receiving the im2col matrix so a
    caller can reuse it in the backward pass.
    """
    check_tensor4(x, "conv input")
    if x.shape[1] != layer.in_c:
        raise ContractError(f"input has {x.shape[1]} channels, layer expects {layer.in_c}")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise InvalidInputError("zero-sized spatial dims")
    out, cols = conv_fwd(to_nhwc(x), layer, want_cols=_cols_out is not None)
    if _cols_out is not None:
        _cols_out.append(cols)
    return to_nchw(out)


def conv2d_backward(x, layer, grad_out, cols=None):
    """Analytic gradients of conv2d_forward.

    Returns (grad_input, grad_kernel, grad_bias). ``cols`` may pass the
    im2col matrix cached from the forward call; otherwise it is recomputed.
    """
    check_tensor4(grad_out, "grad_out")
    if grad_out.shape != (x.shape[0], layer.out_c, x.shape[2], x.shape[3]):
        raise ContractError(
            f"grad_out shape {grad_out.shape} inconsistent with input {x.shape} / out_c {layer.out_c}")
    if cols is None:
        cols = conv_cols(to_nhwc(x), layer.k)
    gi, gk, gb = conv_bwd(to_nhwc(grad_out), layer, cols)
    return to_nchw(gi), gk, gb


@dataclass
class PoolAux:
    """Bookkeeping from pool2_forward needed to route gradients back."""

    kind: str
    in_shape: tuple            # NCHW shape of the pooled input
    argmax: np.ndarray | None  # (n, h/2, w/2, c) window-local index, max kind only


def pool2_forward(x, kind):
    """Non-overlapping 2x2 max or average pooling. Requires even h, w."""
    check_tensor4(x, "pool input")
    if kind not in ("max", "avg"):
        raise InvalidConfigError(f"pool kind must be max|avg, got {kind!r}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidInputError(f"pool2 needs even spatial dims, got {h}x{w}")
    out, idx = pool_fwd(to_nhwc(x), kind)
    return to_nchw(out), PoolAux(kind, x.shape, idx)


def pool2_backward(aux, grad_out):
    """Max routes the gradient to the argmax site; avg spreads grad/4."""
    n, c, h, w = aux.in_shape
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise ContractError(f"grad_out shape {grad_out.shape} does not match pool aux {aux.in_shape}")
    gi = pool_bwd(to_nhwc(grad_out), aux.kind, aux.argmax, (n, h, w, c))
    return to_nchw(gi)


def concat_channels(a, b):
    """Stack b's channels after a's; spatial and batch dims must agree."""
    check_tensor4(a, "concat a")
    check_tensor4(b, "concat b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractError(f"concat operands disagree: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, c_a):
    """Slice the gradient back into the two operands' channel ranges."""
    return (np.ascontiguousarray(grad_out[:, :c_a]),
            np.ascontiguousarray(grad_out[:, c_a:]))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, pre_act):
    return grad_out * (pre_act > 0)


def dropout(x, layer, rng=None):
    """Apply a DropoutLayer; train mode draws the keep mask from ``rng``."""
    if layer.mode == "eval" or layer.rate == 0.0:
        return x
    if rng is None:
        raise InvalidInputError("dropout in train mode requires an rng")
    out, _ = dropout_train(x, layer.rate, rng)
    return out


def dropout_train(x, rate, rng):
    """Train-mode dropout returning (output, scale_mask) for the backward pass."""
    if not (0.0 <= rate < 1.0):
        raise InvalidConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    scale_mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * scale_mask, scale_mask


def softmax2_xent(logits, labels, class_weights=None):
    """Per-pixel 2-class softmax cross-entropy over non-ignored pixels.

    logits: (n, 2, h, w); labels: (n, h, w) with values {0, 1, IGNORE}.
    Returns (mean loss over counted pixels, grad wrt logits); the gradient is
    zero at ignored pixels. class_weights, if given, is (w0, w1) applied
    per-pixel by true class, with the mean taken over the weight total.
    """
    check_tensor4(logits, "logits")
    n, c, h, w = logits.shape
    if c != 2:
        raise ContractError(f"logits must have 2 channels, got {c}")
    if labels.shape != (n, h, w):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    lab = np.asarray(labels)
    if not np.isin(lab, (0, 1, IGNORE)).all():
        raise ContractError("labels must be 0, 1 or IGNORE")
    valid = lab != IGNORE
    if not valid.any():
        raise EmptyResultError("all pixels ignored: loss undefined")

    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse                                   # (n,2,h,w)
    cls = np.where(valid, lab, 0).astype(np.intp)

    if class_weights is None:
        wpix = valid.astype(logits.dtype)
    else:
        w0, w1 = class_weights
        wpix = (np.where(cls == 1, w1, w0) * valid).astype(logits.dtype)
    total = wpix.sum()

    picked = np.take_along_axis(logp, cls[:, None], axis=1)[:, 0]
    loss = float(-(picked * wpix).sum() / total)

    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, cls[:, None], 1.0, axis=1)
    grad = (np.exp(logp) - onehot) * (wpix / total)[:, None]
    return loss, grad


def he_init(shape, rng):
    """Zero-mean Gaussian kernel with std sqrt(2 / fan_in), fan_in = in_c*k*k."""
    out_c, in_c, kh, kw = shape
    fan_in = in_c * kh * kw
    if fan_in <= 0:
        raise InvalidInputError(f"fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
