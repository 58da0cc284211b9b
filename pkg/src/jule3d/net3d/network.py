"""The fixed 3D patch network, its parameters and the SGD training loop.

Layer chain for a 27^3 patch::

    conv(50, 5^3) -> BN -> ReLU -> maxpool(2)     50 x 23^3 -> 50 x 11^3
    conv(50, 5^3) -> BN -> ReLU                   50 x 7^3
    conv(50, 5^3) -> BN -> ReLU                   50 x 3^3 = 1350
    fc(1350) -> ReLU -> fc(160) -> L2 normalize
"""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ShapeMismatch, SingleClass, WrongPatchSize
from . import layers as L
from .fused import block1_backward, block1_forward

PATCH_SIZE = 27
N_KERNELS = 50
KERNEL = 5
FC1_UNITS = 1350
FEATURE_DIM = 160

PARAM_SHAPES = {
    "conv1.weight": (N_KERNELS, 1, KERNEL, KERNEL, KERNEL),
    "conv1.bias": (N_KERNELS,),
    "bn1.gamma": (N_KERNELS,),
    "bn1.beta": (N_KERNELS,),
    "bn1.running_mean": (N_KERNELS,),
    "bn1.running_var": (N_KERNELS,),
    "conv2.weight": (N_KERNELS, N_KERNELS, KERNEL, KERNEL, KERNEL),
    "conv2.bias": (N_KERNELS,),
    "bn2.gamma": (N_KERNELS,),
    "bn2.beta": (N_KERNELS,),
    "bn2.running_mean": (N_KERNELS,),
    "bn2.running_var": (N_KERNELS,),
    "conv3.weight": (N_KERNELS, N_KERNELS, KERNEL, KERNEL, KERNEL),
    "conv3.bias": (N_KERNELS,),
    "bn3.gamma": (N_KERNELS,),
    "bn3.beta": (N_KERNELS,),
    "bn3.running_mean": (N_KERNELS,),
    "bn3.running_var": (N_KERNELS,),
    "fc1.weight": (FC1_UNITS, FC1_UNITS),
    "fc1.bias": (FC1_UNITS,),
    "fc2.weight": (FEATURE_DIM, FC1_UNITS),
    "fc2.bias": (FEATURE_DIM,),
}
BUFFERS = frozenset(k for k in PARAM_SHAPES if k.endswith(("running_mean", "running_var")))
TRAINABLE = tuple(k for k in PARAM_SHAPES if k not in BUFFERS)


@dataclass
class NetParams:
    """All tensors of the network, keyed by layer-qualified name.

    ``training`` selects batch statistics (True) or running statistics
    (False) in the batch-norm layers.
    """

    tensors: dict
    training: bool = False

    def __post_init__(self):
        missing = set(PARAM_SHAPES) - set(self.tensors)
        extra = set(self.tensors) - set(PARAM_SHAPES)
        if missing or extra:
            raise ShapeMismatch(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in PARAM_SHAPES.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return NetParams({k: v.copy() for k, v in self.tensors.items()}, self.training)

    def astype(self, dtype):
        return NetParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.training)

    def equals(self, other):
        return self.training == other.training and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in PARAM_SHAPES)


def _fan_in(shape):
    return int(np.prod(shape[1:]))


def init_params(seed=0, dtype=np.float32):
    """Random initial parameters.

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and
    batch-norm shifts start at 0, scales and running variances at 1.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("weight"):
            bound = 1.0 / np.sqrt(_fan_in(shape))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(("gamma", "running_var")):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetParams(tensors)


def _as_batch(patches, dtype):
    x = np.asarray(getattr(patches, "patches", patches))
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1:
        raise WrongPatchSize(f"expected patches shaped (n, w, w, w), got {x.shape}")
    if x.shape[2:] != (PATCH_SIZE,) * 3:
        raise WrongPatchSize(f"network takes {PATCH_SIZE}^3 patches, got {x.shape[2:]}")
    return x.astype(dtype, copy=False)


def _conv_block(params, idx, h, training, pool):
    p = f"conv{idx}"
    b = f"bn{idx}"
    h, c_conv = L.conv3d_forward(h, params[p + ".weight"], params[p + ".bias"])
    h, c_bn = L.batchnorm3d_forward(h, params[b + ".gamma"], params[b + ".beta"],
                                    params[b + ".running_mean"], params[b + ".running_var"], training)
    h, c_relu = L.relu_forward(h)
    c_pool = None
    if pool:
        h, c_pool = L.maxpool3d_forward(h, 2)
    return h, (c_conv, c_bn, c_relu, c_pool)


def forward(params, x, training=None, keep_cache=False, fused=True):
    """Run the network on a 5-D batch; returns ``(features, cache)``.

    ``training`` defaults to ``params.training``. In training mode the
    batch-norm running statistics inside ``params`` are updated.
    ``fused=False`` runs the first block through the reference layers.
    """
    if training is None:
        training = params.training
    caches = []
    if fused:
        h, c = block1_forward(x, params["conv1.weight"], params["conv1.bias"], params["bn1.gamma"],
                              params["bn1.beta"], params["bn1.running_mean"], params["bn1.running_var"],
                              training, keep_cache=keep_cache)
        caches.append(("fused", c))
    else:
        h, c = _conv_block(params, 1, x, training, pool=True)
        caches.append(c)
    for idx in (2, 3):
        h, c = _conv_block(params, idx, h, training, pool=False)
        caches.append(c)
    n = h.shape[0]
    conv_shape = h.shape
    h = h.reshape(n, -1)
    if h.shape[1] != FC1_UNITS:
        raise WrongPatchSize(f"flattened width {h.shape[1]} != {FC1_UNITS}")
    h, c_fc1 = L.fc_forward(h, params["fc1.weight"], params["fc1.bias"])
    h, c_relu = L.relu_forward(h)
    h, c_fc2 = L.fc_forward(h, params["fc2.weight"], params["fc2.bias"])
    out, c_l2 = L.l2normalize_forward(h)
    cache = (caches, conv_shape, c_fc1, c_relu, c_fc2, c_l2) if keep_cache else None
    return out, cache


def backward(params, cache, grad_out):
    """Gradients of all trainable tensors given d(loss)/d(features)."""
    caches, conv_shape, c_fc1, c_relu, c_fc2, c_l2 = cache
    grads = {}
    g = L.l2normalize_backward(grad_out, c_l2)
    g, grads["fc2.weight"], grads["fc2.bias"] = L.fc_backward(g, c_fc2)
    g = L.relu_backward(g, c_relu)
    g, grads["fc1.weight"], grads["fc1.bias"] = L.fc_backward(g, c_fc1)
    g = g.reshape(conv_shape)
    for idx in (3, 2, 1):
        if caches[idx - 1][0] == "fused":
            (grads["conv1.weight"], grads["conv1.bias"],
             grads["bn1.gamma"], grads["bn1.beta"]) = block1_backward(g, caches[0][1])
            break
        c_conv, c_bn, c_relu_blk, c_pool = caches[idx - 1]
        if c_pool is not None:
            g = L.maxpool3d_backward(g, c_pool)
        g = L.relu_backward(g, c_relu_blk)
        g, grads[f"bn{idx}.gamma"], grads[f"bn{idx}.beta"] = L.batchnorm3d_backward(g, c_bn)
        g, grads[f"conv{idx}.weight"], grads[f"conv{idx}.bias"] = L.conv3d_backward(
            g, c_conv, need_input_grad=(idx > 1))
    return grads


def forward_features(params, patches, batch_size=64):
    """160-d unit-norm features for each patch, computed in eval mode.

    Parameters
    ----------
    params : NetParams
    patches : PatchSet or ndarray of shape (n, 27, 27, 27)
        Already-normalized patches.

    Returns
    -------
    ndarray of shape (n, 160)
    """
    dtype = params["conv1.weight"].dtype
    x = _as_batch(patches, dtype)
    out = np.empty((x.shape[0], FEATURE_DIM), dtype=dtype)
    for s in range(0, x.shape[0], batch_size):
        out[s:s + batch_size], _ = forward(params, x[s:s + batch_size], training=False)
    return out


@dataclass
class TrainConfig:
    """SGD hyperparameters for one call of :func:`train_epochs`."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 128
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        from ..exceptions import ConfigInvalid
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigInvalid("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigInvalid("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigInvalid("epochs must be >= 0")


@dataclass
class TrainState:
    """Optimizer-side state that is not persisted with the network.

    Holds the linear classifier head used as the training loss and the
    momentum buffers. The head (and its buffers) is rebuilt whenever the
    number of classes changes.
    """

    head_weight: np.ndarray = None
    head_bias: np.ndarray = None
    velocity: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return 0 if self.head_weight is None else self.head_weight.shape[0]

    def reset_head(self, n_classes, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(FEATURE_DIM)
        self.head_weight = rng.uniform(-bound, bound, (n_classes, FEATURE_DIM)).astype(dtype)
        self.head_bias = np.zeros(n_classes, dtype=dtype)
        self.velocity.pop("head.weight", None)
        self.velocity.pop("head.bias", None)


def sgd_step(params, grads, cfg, velocity):
    """Momentum SGD with L2 weight decay, applied in place.

    ``v <- momentum * v - lr * (g + weight_decay * theta)``; ``theta <- theta + v``.
    ``params`` is a mapping name -> array; ``velocity`` is updated in place.
    """
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(theta)
        v *= cfg.momentum
        v -= cfg.learning_rate * (g + cfg.weight_decay * theta)
        theta += v
    return params


def train_epochs(params, patches, labels, cfg, state=None):
    """Mini-batch SGD on ``(patches, labels)`` through a softmax head.

    Returns ``(params, history)`` where ``history`` holds the mean loss of
    each epoch. ``params`` is updated in place. A fresh :class:`TrainState`
    is used when ``state`` is None; otherwise its head is kept if the class
    count is unchanged.
    """
    labels = np.asarray(labels, dtype=np.intp)
    dtype = params["conv1.weight"].dtype
    x = _as_batch(patches, dtype)
    if labels.shape != (x.shape[0],):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {x.shape[0]} patches")
    if np.unique(labels).size < 2:
        raise SingleClass("training needs at least two distinct labels")
    n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState()
    if state.n_classes != n_classes:
        state.reset_head(n_classes, rng, dtype)
    history = []
    params.training = True
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for s in range(0, x.shape[0], cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            feats, cache = forward(params, x[idx], training=True, keep_cache=True)
            loss, (g_feat, g_hw, g_hb) = L.softmax_xent(feats, labels[idx], state.head_weight, state.head_bias)
            grads = backward(params, cache, g_feat)
            del cache
            sgd_step(params.tensors, grads, cfg, state.velocity)
            sgd_step({"head.weight": state.head_weight, "head.bias": state.head_bias},
                     {"head.weight": g_hw, "head.bias": g_hb}, cfg, state.velocity)
            total += loss * idx.size
        history.append(total / x.shape[0])
    params.training = False
    return params, history
