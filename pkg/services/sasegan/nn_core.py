"""
Differentiable building blocks for raw-waveform GANs.

Every `*_vjp` function returns `(output, backward)`; `backward(grad_output)`
returns the gradients for the inputs in argument order. Feature maps are
`(L, C)` or batched `(B, L, C)` float arrays; time is always axis -2.
"""

import functools
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import structlog
from numpy.lib.stride_tricks import sliding_window_view

from errors import DegenerateKernel, ShapeMismatch, UninitializedState

logger = structlog.get_logger()

Backward = Callable[[np.ndarray], Tuple[np.ndarray, ...]]

PRELU_INIT = 0.25
LEAKY_ALPHA = 0.3
VBN_EPS = 1e-5


@dataclass
class ConvParams:
    """Kernel (width, c_in, c_out), bias (c_out,) and stride of one conv layer."""
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 3:
            raise ShapeMismatch(f"kernel must be (width, c_in, c_out), got {self.kernel.shape}")
        if self.width % 2 == 0:
            raise ShapeMismatch(f"kernel width must be odd, got {self.width}")
        if self.stride < 1:
            raise ShapeMismatch(f"stride must be at least 1, got {self.stride}")
        if self.bias.shape != (self.c_out,):
            raise ShapeMismatch(f"bias shape {self.bias.shape} does not match {self.c_out} filters")

    @property
    def width(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[2]


@dataclass
class SpectralState:
    """Persisted power-iteration vectors; u has c_out entries."""
    u: np.ndarray
    v: np.ndarray


@dataclass
class VbnState:
    """Frozen statistics of the reference batch."""
    ref_mean: Optional[np.ndarray] = None
    ref_var: Optional[np.ndarray] = None
    ref_count: int = 0

    @property
    def initialized(self) -> bool:
        return self.ref_mean is not None and self.ref_var is not None


def _batched(fn):
    """Let a vjp op take a single (L, C) map; the first gradient is the input's."""
    @functools.wraps(fn)
    def wrapper(x, *args, **kwargs):
        if x.ndim != 2:
            return fn(x, *args, **kwargs)
        y, backward = fn(x[None], *args, **kwargs)

        def backward_single(dy):
            grads = backward(dy[None])
            return (grads[0][0],) + tuple(grads[1:])

        return y[0], backward_single
    return wrapper


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def init_conv(rng: np.random.Generator, width: int, c_in: int, c_out: int, stride: int = 1) -> ConvParams:
    kernel = glorot_uniform(rng, (width, c_in, c_out), width * c_in, width * c_out)
    return ConvParams(kernel=kernel, bias=np.zeros(c_out), stride=stride)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv_geometry(length: int, width: int, stride: int) -> Tuple[int, int, int]:
    """
    "Same"-style padding for a strided convolution.

    Returns:
        (out_len, left_pad, total_pad) with out_len = ceil(length / stride)
    """
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    return out_len, total // 2, total


def _im2col(x: np.ndarray, width: int, stride: int, left: int, total: int, out_len: int) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (left, total - left), (0, 0)))
    windows = sliding_window_view(padded, width, axis=1)  # (B, positions, C, width)
    return np.ascontiguousarray(windows[:, ::stride][:, :out_len])


def _col2im(cols: np.ndarray, width: int, stride: int, left: int, total: int, length: int) -> np.ndarray:
    batch, out_len, channels, _ = cols.shape
    padded = np.zeros((batch, length + total, channels), dtype=cols.dtype)
    span = stride * (out_len - 1) + 1
    for w in range(width):
        padded[:, w:w + span:stride] += cols[:, :, :, w]
    return padded[:, left:left + length]


@_batched
def conv1d_vjp(x: np.ndarray, p: ConvParams) -> Tuple[np.ndarray, Backward]:
    """Strided cross-correlation; output length ceil(L / stride)."""
    batch, length, c_in = x.shape
    if c_in != p.c_in:
        raise ShapeMismatch(f"conv1d expects {p.c_in} input channels, got {c_in}")
    out_len, left, total = conv_geometry(length, p.width, p.stride)

    cols = _im2col(x, p.width, p.stride, left, total, out_len).reshape(batch * out_len, c_in * p.width)
    kmat = p.kernel.transpose(1, 0, 2).reshape(c_in * p.width, p.c_out)
    y = (cols @ kmat).reshape(batch, out_len, p.c_out) + p.bias

    def backward(dy):
        dy_flat = dy.reshape(-1, p.c_out)
        dkernel = (cols.T @ dy_flat).reshape(c_in, p.width, p.c_out).transpose(1, 0, 2)
        dcols = (dy_flat @ kmat.T).reshape(batch, out_len, c_in, p.width)
        dx = _col2im(dcols, p.width, p.stride, left, total, length)
        return dx, dkernel, dy_flat.sum(axis=0)

    return y, backward


@_batched
def deconv1d_vjp(x: np.ndarray, p: ConvParams) -> Tuple[np.ndarray, Backward]:
    """
    Transposed convolution, output length L * stride.

    The linear part is the exact adjoint of conv1d on the output length with the
    kernel's channel axes swapped.
    """
    batch, length, c_in = x.shape
    if c_in != p.c_in:
        raise ShapeMismatch(f"deconv1d expects {p.c_in} input channels, got {c_in}")
    out_len = length * p.stride
    _, left, total = conv_geometry(out_len, p.width, p.stride)

    x_flat = x.reshape(batch * length, c_in)
    kmat = p.kernel.transpose(1, 2, 0).reshape(c_in, p.c_out * p.width)
    cols = (x_flat @ kmat).reshape(batch, length, p.c_out, p.width)
    y = _col2im(cols, p.width, p.stride, left, total, out_len) + p.bias

    def backward(dy):
        dcols = _im2col(dy, p.width, p.stride, left, total, length).reshape(batch * length, p.c_out * p.width)
        dx = (dcols @ kmat.T).reshape(batch, length, c_in)
        dkernel = (x_flat.T @ dcols).reshape(c_in, p.c_out, p.width).transpose(2, 0, 1)
        return dx, dkernel, dy.sum(axis=(0, 1))

    return y, backward


def conv1d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    return conv1d_vjp(x, p)[0]


def deconv1d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    return deconv1d_vjp(x, p)[0]


def dense_vjp(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Backward]:
    """x @ w (+ b) over the last axis; a 1x1 convolution on feature maps."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"dense expects {w.shape[0]} features, got {x.shape[-1]}")
    y = x @ w
    if b is not None:
        y = y + b

    def backward(dy):
        x_flat = x.reshape(-1, x.shape[-1])
        dy_flat = dy.reshape(-1, w.shape[1])
        dw = x_flat.T @ dy_flat
        grads = (dy @ w.T, dw)
        if b is not None:
            grads += (dy_flat.sum(axis=0),)
        return grads

    return y, backward


# ---------------------------------------------------------------------------
# Activations, pooling, softmax
# ---------------------------------------------------------------------------

def prelu_vjp(x: np.ndarray, alpha: np.ndarray) -> Tuple[np.ndarray, Backward]:
    """Per-channel PReLU."""
    if alpha.shape != (x.shape[-1],):
        raise ShapeMismatch(f"prelu alpha shape {alpha.shape} does not match {x.shape[-1]} channels")
    negative = x < 0
    y = np.where(negative, alpha * x, x)

    def backward(dy):
        dx = np.where(negative, alpha * dy, dy)
        dalpha = np.where(negative, x * dy, 0.0).reshape(-1, x.shape[-1]).sum(axis=0)
        return dx, dalpha

    return y, backward


def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return prelu_vjp(x, alpha)[0]


def leaky_relu_vjp(x: np.ndarray, alpha: float = LEAKY_ALPHA) -> Tuple[np.ndarray, Backward]:
    negative = x < 0
    y = np.where(negative, alpha * x, x)

    def backward(dy):
        return (np.where(negative, alpha * dy, dy),)

    return y, backward


def leaky_relu(x: np.ndarray, alpha: float = LEAKY_ALPHA) -> np.ndarray:
    return leaky_relu_vjp(x, alpha)[0]


def tanh_vjp(x: np.ndarray) -> Tuple[np.ndarray, Backward]:
    y = np.tanh(x)

    def backward(dy):
        return (dy * (1.0 - y ** 2),)

    return y, backward


@_batched
def maxpool1d_vjp(x: np.ndarray, p: int) -> Tuple[np.ndarray, Backward]:
    """Non-overlapping max pooling over time; the last window may be shorter."""
    if p < 1:
        raise ValueError(f"pooling width must be at least 1, got {p}")
    batch, length, channels = x.shape
    out_len = -(-length // p)
    padded = np.pad(x, ((0, 0), (0, out_len * p - length), (0, 0)), constant_values=-np.inf)
    windows = padded.reshape(batch, out_len, p, channels)
    idx = windows.argmax(axis=2)[:, :, None, :]
    y = np.take_along_axis(windows, idx, axis=2)[:, :, 0, :]

    def backward(dy):
        dwindows = np.zeros_like(windows)
        np.put_along_axis(dwindows, idx, dy[:, :, None, :], axis=2)
        return (dwindows.reshape(batch, out_len * p, channels)[:, :length],)

    return y, backward


def maxpool1d(x: np.ndarray, p: int) -> np.ndarray:
    return maxpool1d_vjp(x, p)[0]


def softmax_rows_vjp(x: np.ndarray) -> Tuple[np.ndarray, Backward]:
    """Softmax along the last axis, shifted by the row max."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(dy):
        return (y * (dy - (dy * y).sum(axis=-1, keepdims=True)),)

    return y, backward


def softmax_rows(x: np.ndarray) -> np.ndarray:
    return softmax_rows_vjp(x)[0]


# ---------------------------------------------------------------------------
# Spectral normalisation
# ---------------------------------------------------------------------------

def _l2normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / (np.linalg.norm(v) + eps)


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(width, c_in, c_out) kernel as a c_out x (c_in * width) matrix."""
    return kernel.transpose(2, 1, 0).reshape(kernel.shape[2], -1)


def _matrix_to_kernel(mat: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    width, c_in, c_out = shape
    return mat.reshape(c_out, c_in, width).transpose(2, 1, 0)


def init_spectral_state(kernel: np.ndarray, rng: np.random.Generator) -> SpectralState:
    u = _l2normalize(rng.standard_normal(kernel.shape[2]))
    v = kernel_matrix(kernel).T @ u
    if not np.any(v):
        v = rng.standard_normal(v.shape[0])
    return SpectralState(u=u, v=_l2normalize(v))


def power_iteration(kernel: np.ndarray, state: SpectralState, iterations: int = 1) -> float:
    """Update u and v in place; returns the new estimate of sigma."""
    w = kernel_matrix(kernel)
    if not np.any(w):
        raise DegenerateKernel("spectral normalisation of an all-zero kernel")
    for _ in range(iterations):
        state.v = _l2normalize(w.T @ state.u)
        state.u = _l2normalize(w @ state.v)
    return float(state.u @ w @ state.v)


def spectral_normalize_vjp(kernel: np.ndarray, state: SpectralState) -> Tuple[np.ndarray, Backward]:
    """kernel / sigma with sigma = u^T W v; u and v are treated as constants."""
    w = kernel_matrix(kernel)
    if not np.any(w):
        raise DegenerateKernel("spectral normalisation of an all-zero kernel")
    sigma = float(state.u @ w @ state.v)
    normalized = kernel / sigma
    uv = _matrix_to_kernel(np.outer(state.u, state.v), kernel.shape)

    def backward(dy):
        return ((dy - np.sum(dy * normalized) * uv) / sigma,)

    return normalized, backward


def spectral_normalize(kernel: np.ndarray, state: SpectralState, update: bool = True) -> np.ndarray:
    """
    Divide a kernel by its power-iteration estimate of the largest singular value.

    Args:
        kernel: (width, c_in, c_out) kernel
        state: persisted u/v vectors, updated in place when `update` is set
        update: run one power-iteration step first

    Raises:
        DegenerateKernel: kernel is all zeros
    """
    if update:
        power_iteration(kernel, state)
    return spectral_normalize_vjp(kernel, state)[0]


# ---------------------------------------------------------------------------
# Virtual batch normalisation
# ---------------------------------------------------------------------------

def vbn_reference(batch: np.ndarray) -> VbnState:
    """Freeze per-channel statistics of a (B, L, C) reference batch."""
    return VbnState(
        ref_mean=batch.mean(axis=(0, 1)),
        ref_var=batch.var(axis=(0, 1)),
        ref_count=batch.shape[0],
    )


def vbn_apply_vjp(
    x: np.ndarray,
    state: VbnState,
    gamma: np.ndarray,
    beta_shift: np.ndarray,
    training: bool = True
) -> Tuple[np.ndarray, Backward]:
    """
    Virtual batch norm over (B, L, C) maps.

    In training mode every example is normalised with the reference statistics
    blended with its own, the example weighted 1 / (N_ref + 1). In inference mode
    the reference statistics are used alone.
    """
    if not state.initialized:
        raise UninitializedState("virtual batch norm used before its reference batch was set")
    length = x.shape[1]
    w = 1.0 / (state.ref_count + 1) if training else 0.0

    ref_meansq = state.ref_var + state.ref_mean ** 2
    mean = w * x.mean(axis=1, keepdims=True) + (1 - w) * state.ref_mean
    meansq = w * (x ** 2).mean(axis=1, keepdims=True) + (1 - w) * ref_meansq
    var = np.maximum(meansq - mean ** 2, 0.0)
    r = 1.0 / np.sqrt(var + VBN_EPS)
    centered = x - mean
    xhat = centered * r
    y = gamma * xhat + beta_shift

    def backward(dy):
        dgamma = (dy * xhat).sum(axis=(0, 1))
        dbeta = dy.sum(axis=(0, 1))
        dxhat = dy * gamma
        dx = dxhat * r
        if w > 0:
            dvar = -0.5 * r ** 3 * (dxhat * centered).sum(axis=1, keepdims=True)
            dmean = -(dxhat * r).sum(axis=1, keepdims=True) - 2.0 * mean * dvar
            dx = dx + (w / length) * (dmean + 2.0 * x * dvar)
        return dx, dgamma, dbeta

    return y, backward


def vbn_apply(x, state, gamma, beta_shift, training: bool = True) -> np.ndarray:
    return vbn_apply_vjp(x, state, gamma, beta_shift, training)[0]


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    op: Callable[..., Tuple[np.ndarray, Backward]],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: Optional[int] = None
) -> float:
    """
    Compare a vjp op's analytic gradients against central differences.

    The scalar checked is <g, op(*inputs)> for a fixed random g. With
    `max_coords`, only that many random coordinates per input are checked.

    Returns:
        max |analytic - numeric| / max(1, |numeric|)
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    y, backward = op(*inputs)
    weights = rng.standard_normal(np.shape(y))
    analytic = backward(weights)

    def scalar() -> float:
        return float(np.sum(weights * op(*inputs)[0]))

    worst = 0.0
    for arr, grad in zip(inputs, analytic):
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        flat, gflat = arr.reshape(-1), np.reshape(grad, -1)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            plus = scalar()
            flat[i] = saved - eps
            minus = scalar()
            flat[i] = saved
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def grad_check_params(
    loss_fn: Callable[[], float],
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    eps: float = 1e-5,
    coords_per_param: int = 5,
    seed: int = 0,
    kink_tol: Optional[float] = None
) -> Dict[str, float]:
    """
    Spot-check named parameter gradients of a scalar loss.

    `loss_fn` must read the arrays in `params` (they are perturbed in place).
    With `kink_tol`, a coordinate whose forward and backward one-sided
    differences disagree by more than kink_tol * max(1, |numeric|) straddles
    a non-differentiable point (PReLU, LeakyReLU, max-pool) and is skipped.

    Returns:
        worst relative error per parameter name
    """
    rng = np.random.default_rng(seed)
    base = loss_fn() if kink_tol is not None else 0.0
    errors = {}
    skipped = 0
    for name, arr in params.items():
        flat, gflat = arr.reshape(-1), grads[name].reshape(-1)
        coords = rng.choice(arr.size, size=min(coords_per_param, arr.size), replace=False)
        worst = 0.0
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            plus = loss_fn()
            flat[i] = saved - eps
            minus = loss_fn()
            flat[i] = saved
            numeric = (plus - minus) / (2 * eps)
            scale = max(1.0, abs(numeric))
            if kink_tol is not None and abs((plus - base) - (base - minus)) / eps > kink_tol * scale:
                skipped += 1
                continue
            worst = max(worst, abs(gflat[i] - numeric) / scale)
        errors[name] = worst
    logger.debug("gradient_spot_check", params=len(errors), skipped=skipped,
                 worst=max(errors.values(), default=0.0))
    return errors
