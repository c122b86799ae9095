"""Forward/backward passes for the fixed layer vocabulary of the network.

Every ``*_forward`` returns ``(output, tape)``; the matching ``*_backward``
consumes the upstream gradient and that tape.  Activations are laid out
``[N, C, D, H, W]`` for volumes and ``[N, F]`` for vectors.  Per-channel
parameters (bias, batchnorm affine) are the only broadcasts.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

KERNEL = 3
_OFFSETS = tuple(product(range(KERNEL), repeat=3))

TRAIN = "train"
INFER = "infer"


def check_mode(mode):
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


@dataclass
class Conv3dParams:
    kernels: np.ndarray  # [out, in, 3, 3, 3]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        if self.kernels.ndim != 5 or self.kernels.shape[2:] != (KERNEL,) * 3:
            raise ValueError(f"kernels must be [out, in, 3, 3, 3], got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias must have one entry per output channel")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels, dtype=np.float32, epsilon=1e-3, momentum=0.99):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            epsilon=epsilon,
            momentum=momentum,
        )


@dataclass
class DenseParams:
    weights: np.ndarray  # [in, out]
    bias: np.ndarray  # [out]


def he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_conv(rng, in_channels, out_channels, dtype=np.float32):
    fan_in = in_channels * KERNEL**3
    return Conv3dParams(
        he_normal(rng, (out_channels, in_channels, KERNEL, KERNEL, KERNEL), fan_in, dtype),
        np.zeros(out_channels, dtype),
    )


def init_dense(rng, n_in, n_out, dtype=np.float32):
    return DenseParams(he_normal(rng, (n_in, n_out), n_in, dtype), np.zeros(n_out, dtype))


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvTape:
    cols: np.ndarray  # [N, 27 * C, D * H * W]
    kmat: np.ndarray  # [C', 27 * C]
    in_shape: tuple


def _im2col(x):
    n, c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((n, len(_OFFSETS), c, d, h, w), dtype=x.dtype)
    for i, (a, b, e) in enumerate(_OFFSETS):
        cols[:, i] = xp[:, :, a : a + d, b : b + h, e : e + w]
    return cols.reshape(n, len(_OFFSETS) * c, d * h * w)


def conv3d_forward(x, p):
    """Stride-1 3x3x3 cross-correlation with one voxel of zero padding."""
    if x.ndim != 5:
        raise ValueError(f"expected [N, C, D, H, W] input, got shape {x.shape}")
    n, c, d, h, w = x.shape
    c_out, c_in = p.kernels.shape[:2]
    if c != c_in:
        raise ValueError(f"input has {c} channels, kernels expect {c_in}")
    cols = _im2col(x)
    # column index is offset * C + channel, matching the im2col layout
    kmat = p.kernels.reshape(c_out, c_in, -1).transpose(0, 2, 1).reshape(c_out, -1)
    y = np.matmul(kmat, cols)
    y += p.bias[None, :, None]
    return y.reshape(n, c_out, d, h, w), ConvTape(cols, kmat, x.shape)


def conv3d_backward(grad_out, tape, need_input_grad=True):
    """Return ``(grad_x, grad_kernels, grad_bias)``; ``grad_x`` is None when not needed."""
    n, c, d, h, w = tape.in_shape
    c_out = tape.kmat.shape[0]
    if grad_out.shape != (n, c_out, d, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    g = grad_out.reshape(n, c_out, -1)
    gk = np.zeros_like(tape.kmat)
    for i in range(n):
        gk += g[i] @ tape.cols[i].T
    grad_kernels = gk.reshape(c_out, len(_OFFSETS), c).transpose(0, 2, 1).reshape(c_out, c, 3, 3, 3)
    grad_bias = g.sum(axis=(0, 2))
    if not need_input_grad:
        return None, grad_kernels, grad_bias
    gcols = np.matmul(tape.kmat.T, g).reshape(n, len(_OFFSETS), c, d, h, w)
    gpad = np.zeros((n, c, d + 2, h + 2, w + 2), dtype=grad_out.dtype)
    for i, (a, b, e) in enumerate(_OFFSETS):
        gpad[:, :, a : a + d, b : b + h, e : e + w] += gcols[:, i]
    return gpad[:, :, 1:-1, 1:-1, 1:-1], grad_kernels, grad_bias


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormTape:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def _channel_view(vec, ndim):
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_sum(x):
    """Sum over every axis except the channel axis 1."""
    if x.ndim == 2:
        return x.sum(axis=0)
    return x.reshape(x.shape[0], x.shape[1], -1).sum(axis=2).sum(axis=0)


def batchnorm_forward(x, p, mode, update_running=True):
    """Per-channel normalization over batch and spatial axes (channel axis 1).

    Train mode uses batch statistics and, unless ``update_running`` is False,
    folds them into the running averages:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    check_mode(mode)
    count = x.size // x.shape[1]
    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ValueError("train-mode batch normalization needs a batch of at least 2")
        mean = _channel_sum(x) / count
        centered = x - _channel_view(mean, x.ndim)
        var = _channel_sum(centered * centered) / count
        inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype)
        xhat = centered
        xhat *= _channel_view(inv_std, x.ndim)
        if update_running:
            unbiased = var * (count / (count - 1))
            mom = p.momentum
            p.running_mean[...] = mom * p.running_mean + (1 - mom) * mean
            p.running_var[...] = mom * p.running_var + (1 - mom) * unbiased
    else:
        inv_std = (1.0 / np.sqrt(p.running_var + p.epsilon)).astype(x.dtype)
        xhat = (x - _channel_view(p.running_mean, x.ndim)) * _channel_view(inv_std, x.ndim)
    y = xhat * _channel_view(p.gamma, x.ndim)
    y += _channel_view(p.beta, x.ndim)
    return y, BatchNormTape(xhat, inv_std, p.gamma, mode)


def batchnorm_backward(grad_out, tape):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    if grad_out.shape != tape.xhat.shape:
        raise ValueError("grad_out shape does not match forward output")
    nd = grad_out.ndim
    xhat = tape.xhat
    grad_beta = _channel_sum(grad_out)
    grad_gamma = _channel_sum(grad_out * xhat)
    scale = _channel_view(tape.gamma * tape.inv_std, nd)
    if tape.mode == INFER:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    # dx = gamma / sigma * (g - mean(g) - xhat * mean(g * xhat))
    grad_x = xhat * _channel_view(-grad_gamma / m, nd)
    grad_x += grad_out
    grad_x -= _channel_view(grad_beta / m, nd)
    grad_x *= scale
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# activations, pooling, dense


def leaky_relu(x, alpha=0.01):
    """Returns ``(y, slope)``; ``slope`` is the local derivative (1 or alpha, 1 at 0)."""
    slope = np.where(x >= 0, x.dtype.type(1), x.dtype.type(alpha))
    return x * slope, slope


def leaky_relu_backward(grad_out, slope):
    return grad_out * slope


def avgpool3d_forward(x):
    """2x2x2 mean pooling with stride 2; odd trailing voxels are dropped."""
    n, c, d, h, w = x.shape
    if min(d, h, w) < 2:
        raise ValueError(f"spatial extents {x.shape[2:]} too small to pool")
    d2, h2, w2 = d // 2, h // 2, w // 2
    y = x[:, :, : 2 * d2 : 2] + x[:, :, 1 : 2 * d2 : 2]
    y = y[:, :, :, : 2 * h2 : 2] + y[:, :, :, 1 : 2 * h2 : 2]
    y = y[..., : 2 * w2 : 2] + y[..., 1 : 2 * w2 : 2]
    y *= x.dtype.type(0.125)
    return y, x.shape


def avgpool3d_backward(grad_out, in_shape):
    n, c, d, h, w = in_shape
    d2, h2, w2 = grad_out.shape[2:]
    grad_x = np.zeros(in_shape, dtype=grad_out.dtype)
    g = grad_out * grad_out.dtype.type(0.125)
    for a in (0, 1):
        for b in (0, 1):
            for e in (0, 1):
                grad_x[:, :, a : 2 * d2 : 2, b : 2 * h2 : 2, e : 2 * w2 : 2] = g
    return grad_x


def dense_forward(x, p):
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ValueError(f"input {x.shape} incompatible with weights {p.weights.shape}")
    return x @ p.weights + p.bias, x


def dense_backward(grad_out, x, p):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    return grad_out @ p.weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout.  Returns ``(y, mask)``; ``mask`` is None when inactive."""
    check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode == INFER or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out, probs):
    inner = (grad_out * probs).sum(axis=1, keepdims=True)
    return probs * (grad_out - inner)


@dataclass
class BlockTape:
    conv: ConvTape
    bn: BatchNormTape
    slope: np.ndarray
    pool_shape: tuple = field(default=())
