"""The siamese 3D CNN: one shared convolutional branch, subtract fusion, dense head.

Weight sharing is structural: the branch parameters exist once and both
scans of a pair are pushed through them as a single stacked batch, so the
shared-parameter gradient is the sum over both paths by construction.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import layers as L
from .layers import TRAIN, INFER
from .nifti import atomic_write_bytes

STAGES = ("input_concat", "branch_concat", "subtract_out", "dense2_out")

CHECKPOINT_MAGIC = b"LSIAMCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (102, 108, 75)
    block_filters: tuple = (4, 8, 16)
    dense_widths: tuple = (64, 16, 2)
    leaky_alpha: float = 0.01
    dropout_rate: float = 0.5
    l2_coeff: float = 1e-4
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    fusion: str = "subtract"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "block_filters", tuple(int(d) for d in self.block_filters))
        object.__setattr__(self, "dense_widths", tuple(int(d) for d in self.dense_widths))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must have three positive extents, got {self.input_shape}")
        if len(self.block_filters) != 3 or min(self.block_filters) < 1:
            raise ValueError("exactly three convolution blocks with >= 1 filter each")
        if len(self.dense_widths) != 3 or self.dense_widths[-1] != 2 or min(self.dense_widths) < 1:
            raise ValueError("three dense layers are required and the last must have width 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.fusion not in ("subtract", "concat"):
            raise ValueError("fusion must be 'subtract' or 'concat'")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be non-negative")
        shape = self.input_shape
        for _ in range(3):
            if min(shape) < 2:
                raise ValueError(f"input_shape {self.input_shape} too small for three pooling stages")
            shape = tuple(d // 2 for d in shape)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def stage_shapes(config):
    """Per-branch activation shapes ``(C, D, H, W)`` after each block."""
    shape = config.input_shape
    out = []
    for filters in config.block_filters:
        shape = tuple(d // 2 for d in shape)
        out.append((filters,) + shape)
    return out


def flat_size(config):
    return int(np.prod(stage_shapes(config)[-1]))


def fused_size(config):
    n = flat_size(config)
    return n if config.fusion == "subtract" else 2 * n


@dataclass
class Block:
    conv: L.Conv3dParams
    bn: L.BatchNormParams


@dataclass
class SiameseNet:
    config: ModelConfig
    branch: list
    dense: list
    head_bn: list
    dtype: type = field(default=np.float32)

    def named_parameters(self):
        """Trainable arrays in declaration order as ``(name, array)``."""
        for i, block in enumerate(self.branch):
            yield f"branch.{i}.conv.kernels", block.conv.kernels
            yield f"branch.{i}.conv.bias", block.conv.bias
            yield f"branch.{i}.bn.gamma", block.bn.gamma
            yield f"branch.{i}.bn.beta", block.bn.beta
        for j, dense in enumerate(self.dense):
            yield f"head.dense{j}.weights", dense.weights
            yield f"head.dense{j}.bias", dense.bias
            if j < len(self.head_bn):
                yield f"head.bn{j}.gamma", self.head_bn[j].gamma
                yield f"head.bn{j}.beta", self.head_bn[j].beta

    def named_buffers(self):
        for i, block in enumerate(self.branch):
            yield f"branch.{i}.bn.running_mean", block.bn.running_mean
            yield f"branch.{i}.bn.running_var", block.bn.running_var
        for j, bn in enumerate(self.head_bn):
            yield f"head.bn{j}.running_mean", bn.running_mean
            yield f"head.bn{j}.running_var", bn.running_var

    def parameters(self):
        return dict(self.named_parameters())

    def state(self):
        """Every stored array, parameters then running statistics."""
        return list(self.named_parameters()) + list(self.named_buffers())

    def parameter_count(self):
        return sum(a.size for _, a in self.named_parameters())


def is_kernel_weight(name):
    """Convolution kernels and dense weight matrices (the L2-regularized set)."""
    return name.endswith(".conv.kernels") or name.endswith(".weights")


def _skeleton(config, dtype, rng=None):
    def conv(c_in, c_out):
        if rng is None:
            return L.Conv3dParams(np.zeros((c_out, c_in, 3, 3, 3), dtype), np.zeros(c_out, dtype))
        return L.init_conv(rng, c_in, c_out, dtype)

    def dense(n_in, n_out):
        if rng is None:
            return L.DenseParams(np.zeros((n_in, n_out), dtype), np.zeros(n_out, dtype))
        return L.init_dense(rng, n_in, n_out, dtype)

    def bn(channels):
        return L.BatchNormParams.fresh(channels, dtype, config.bn_epsilon, config.bn_momentum)

    branch = []
    c_in = 1
    for filters in config.block_filters:
        branch.append(Block(conv(c_in, filters), bn(filters)))
        c_in = filters
    widths = (fused_size(config),) + config.dense_widths
    dense_layers = [dense(widths[k], widths[k + 1]) for k in range(3)]
    head_bn = [bn(w) for w in config.dense_widths[:2]]
    return SiameseNet(config, branch, dense_layers, head_bn, dtype)


def build(config, dtype=np.float32):
    """Fresh network with He-normal weights drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    return _skeleton(config, dtype, rng)


def closed_form_parameter_count(config):
    count = 0
    c_in = 1
    for f in config.block_filters:
        count += f * c_in * 27 + f + 2 * f
        c_in = f
    widths = (fused_size(config),) + config.dense_widths
    for k in range(3):
        count += widths[k] * widths[k + 1] + widths[k + 1]
    count += 2 * sum(config.dense_widths[:2])
    return count


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class FeatureTaps:
    input_concat: np.ndarray
    branch_concat: np.ndarray
    subtract_out: np.ndarray
    dense2_out: np.ndarray

    def stage(self, name):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
        return getattr(self, name)


@dataclass
class PairTape:
    n: int
    branch: list
    branch_shape: tuple
    dense: list
    head_bn: list
    head_act: list
    dropout_mask: object
    probs: np.ndarray


def _as_batch(x, config, dtype):
    x = np.asarray(x)
    if x.shape[1:] != config.input_shape:
        raise ValueError(f"inputs must be [N, {config.input_shape}], got {x.shape}")
    return x.astype(dtype, copy=False)


def branch_forward(net, x, mode):
    """Run ``[N, X, Y, Z]`` scans through the shared branch -> (flat features, tapes)."""
    L.check_mode(mode)
    h = x[:, None]
    tapes = []
    alpha = net.config.leaky_alpha
    for block in net.branch:
        h, conv_tape = L.conv3d_forward(h, block.conv)
        h, bn_tape = L.batchnorm_forward(h, block.bn, mode)
        h, slope = L.leaky_relu(h, alpha)
        h, pool_shape = L.avgpool3d_forward(h)
        tapes.append(L.BlockTape(conv_tape, bn_tape, slope, pool_shape))
    return h.reshape(h.shape[0], -1), tapes, h.shape[1:]


def branch_backward(net, tapes, grad_flat, branch_shape):
    """Backpropagate through the branch; returns parameter gradients by name."""
    grads = {}
    g = grad_flat.reshape((grad_flat.shape[0],) + tuple(branch_shape))
    for i in range(len(net.branch) - 1, -1, -1):
        tape = tapes[i]
        g = L.avgpool3d_backward(g, tape.pool_shape)
        g = L.leaky_relu_backward(g, tape.slope)
        g, grads[f"branch.{i}.bn.gamma"], grads[f"branch.{i}.bn.beta"] = L.batchnorm_backward(g, tape.bn)
        g, grads[f"branch.{i}.conv.kernels"], grads[f"branch.{i}.conv.bias"] = L.conv3d_backward(
            g, tape.conv, need_input_grad=i > 0
        )
    return grads


def head_forward(net, fused, mode, rng=None):
    alpha = net.config.leaky_alpha
    dense_in, bn_tapes, acts = [], [], []
    h = fused
    for j in range(2):
        h, x_in = L.dense_forward(h, net.dense[j])
        dense_in.append(x_in)
        h, bn_tape = L.batchnorm_forward(h, net.head_bn[j], mode)
        bn_tapes.append(bn_tape)
        h, slope = L.leaky_relu(h, alpha)
        acts.append(slope)
    dense2 = h
    h, mask = L.dropout(h, net.config.dropout_rate, mode, rng)
    logits, x_in = L.dense_forward(h, net.dense[2])
    dense_in.append(x_in)
    return L.softmax(logits), dense2, (dense_in, bn_tapes, acts, mask)


def forward_pair(net, baseline, followup, mode=INFER, rng=None):
    """Classify pairs -> ``(probs [N, 2], FeatureTaps, PairTape)``.

    ``rng`` drives dropout and is required in train mode.
    """
    L.check_mode(mode)
    cfg = net.config
    b = _as_batch(baseline, cfg, net.dtype)
    f = _as_batch(followup, cfg, net.dtype)
    if b.shape != f.shape:
        raise ValueError(f"baseline {b.shape} and follow-up {f.shape} batches differ")
    if mode == TRAIN and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    n = b.shape[0]
    flat, branch_tapes, branch_shape = branch_forward(net, np.concatenate([b, f]), mode)
    fb, ff = flat[:n], flat[n:]
    diff = fb - ff
    fused = diff if cfg.fusion == "subtract" else np.concatenate([fb, ff], axis=1)
    probs, dense2, (dense_in, bn_tapes, acts, mask) = head_forward(net, fused, mode, rng)
    taps = FeatureTaps(
        input_concat=np.concatenate([b.reshape(n, -1), f.reshape(n, -1)], axis=1),
        branch_concat=np.concatenate([fb, ff], axis=1),
        subtract_out=diff,
        dense2_out=dense2,
    )
    tape = PairTape(n, branch_tapes, branch_shape, dense_in, bn_tapes, acts, mask, probs)
    return probs, taps, tape


def backward_pair(net, tape, grad_probs=None, grad_logits=None):
    """Gradients of every trainable parameter, keyed like ``named_parameters``.

    Pass either the upstream gradient w.r.t. the softmax output or, for the
    fused softmax/cross-entropy path, directly w.r.t. the logits.
    """
    if (grad_probs is None) == (grad_logits is None):
        raise ValueError("pass exactly one of grad_probs / grad_logits")
    if grad_logits is None:
        if grad_probs.shape != tape.probs.shape:
            raise ValueError("grad_probs shape does not match the forward output")
        grad_logits = L.softmax_backward(grad_probs, tape.probs)
    elif grad_logits.shape != tape.probs.shape:
        raise ValueError("grad_logits shape does not match the forward output")
    grads = {}
    g, grads["head.dense2.weights"], grads["head.dense2.bias"] = L.dense_backward(
        grad_logits, tape.dense[2], net.dense[2]
    )
    g = L.dropout_backward(g, tape.dropout_mask)
    for j in (1, 0):
        g = L.leaky_relu_backward(g, tape.head_act[j])
        g, grads[f"head.bn{j}.gamma"], grads[f"head.bn{j}.beta"] = L.batchnorm_backward(g, tape.head_bn[j])
        g, grads[f"head.dense{j}.weights"], grads[f"head.dense{j}.bias"] = L.dense_backward(
            g, tape.dense[j], net.dense[j]
        )
    if net.config.fusion == "subtract":
        grad_flat = np.concatenate([g, -g])
    else:
        half = g.shape[1] // 2
        grad_flat = np.concatenate([g[:, :half], g[:, half:]])
    grads.update(branch_backward(net, tape.branch, grad_flat, tape.branch_shape))
    return {name: grads[name] for name, _ in net.named_parameters()}


def predict(net, baseline, followup, batch_size=40):
    """Infer-mode probabilities for stacked pairs, evaluated in chunks."""
    out = []
    for start in range(0, len(baseline), batch_size):
        probs, _, _ = forward_pair(net, baseline[start : start + batch_size], followup[start : start + batch_size], INFER)
        out.append(probs)
    return np.concatenate(out)


def extract_features(net, baseline, followup, stage, batch_size=40):
    """One flat infer-mode feature vector per pair at the requested stage."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = []
    for start in range(0, len(baseline), batch_size):
        _, taps, _ = forward_pair(net, baseline[start : start + batch_size], followup[start : start + batch_size], INFER)
        out.append(taps.stage(stage))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def dumps(net):
    """Serialize config and all stored arrays (little-endian float32)."""
    config = json.dumps(net.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    state = net.state()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(config)), config]
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(payload):
    view = memoryview(payload)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, config_len = struct.unpack_from("<II", view, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        config = ModelConfig.from_dict(json.loads(bytes(view[pos : pos + config_len]).decode("utf-8")))
        pos += config_len
        net = _skeleton(config, np.float32)
        expected = net.state()
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if count != len(expected):
            raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
        for name, target in expected:
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            stored = bytes(view[pos : pos + name_len]).decode("ascii")
            pos += name_len
            if stored != name:
                raise CheckpointError(f"expected tensor {name!r}, found {stored!r}")
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            if tuple(shape) != target.shape:
                raise CheckpointError(f"{name}: shape {shape} differs from {target.shape}")
            nbytes = 4 * target.size
            if pos + nbytes > len(view):
                raise CheckpointError("truncated checkpoint")
            target[...] = np.frombuffer(view, dtype="<f4", count=target.size, offset=pos).reshape(shape)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint data")
    return net


def save_checkpoint(path, net):
    atomic_write_bytes(path, dumps(net))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
