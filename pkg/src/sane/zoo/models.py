"""Base-model architectures, checkpoints, forward passes and training."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ArgumentError, DimensionError, TrainingDivergedError
from ..numerics import AdamW
from ..numerics import autodiff as T
from ..numerics.autodiff import Tensor, no_grad

LEARNED_KINDS = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int
    out_features: int
    kernel: tuple = ()
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "batchnorm"):
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(self.kernel))

    @property
    def learned(self):
        return self.kind in LEARNED_KINDS

    @property
    def group(self):
        """Number of weight columns owned by one input unit."""
        return int(np.prod(self.kernel)) if self.kind == "conv2d" else 1

    @property
    def weight_shape(self):
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_features, self.in_features) + self.kernel
        return (self.out_features,)


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        self.layer_inputs()  # validates

    def layer_inputs(self):
        """Input shape seen by each layer; raises on incompatible consecutive layers."""
        shape = self.input_shape
        shapes = []
        prev_out = None
        for i, spec in enumerate(self.layers):
            shapes.append(shape)
            if spec.kind == "dense":
                if int(np.prod(shape)) != spec.in_features:
                    raise DimensionError(f"layer {i}: dense expects {spec.in_features} inputs, gets {shape}")
                shape = (spec.out_features,)
            elif spec.kind == "conv2d":
                if len(shape) != 3 or shape[0] != spec.in_features:
                    raise DimensionError(f"layer {i}: conv expects {spec.in_features} channels, gets {shape}")
                kh, kw = spec.kernel
                shape = (spec.out_features, shape[1] - kh + 1, shape[2] - kw + 1)
                if min(shape[1:]) < 1:
                    raise DimensionError(f"layer {i}: kernel larger than input")
            else:
                if prev_out is None or spec.out_features != prev_out or spec.in_features != prev_out:
                    raise DimensionError(f"layer {i}: batchnorm extent must equal preceding out extent")
            prev_out = spec.out_features
        return shapes

    @property
    def output_dim(self):
        return self.layers[-1].out_features

    @property
    def learned_indices(self):
        return [i for i, s in enumerate(self.layers) if s.learned]

    @property
    def has_batchnorm(self):
        return any(s.kind == "batchnorm" for s in self.layers)

    def to_dict(self):
        return {"input_shape": list(self.input_shape),
                "layers": [dict(asdict(l), kernel=list(l.kernel)) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]))


def mlp_arch(d_in=2, hidden=(16, 16), n_classes=2) -> Architecture:
    dims = (d_in,) + tuple(hidden) + (n_classes,)
    return Architecture((d_in,), tuple(LayerSpec("dense", a, b) for a, b in zip(dims, dims[1:])))


def cnn_arch(channels=(8, 8), n_classes=4, input_shape=(1, 8, 8), batchnorm=True, kernel=3) -> Architecture:
    layers = []
    c, h, w = input_shape
    for ch in channels:
        layers.append(LayerSpec("conv2d", c, ch, (kernel, kernel)))
        if batchnorm:
            layers.append(LayerSpec("batchnorm", ch, ch, has_bias=False))
        c, h, w = ch, h - kernel + 1, w - kernel + 1
    layers.append(LayerSpec("dense", c * h * w, n_classes))
    return Architecture(tuple(input_shape), tuple(layers))


@dataclass
class ModelCheckpoint:
    """Weights (``tensors``), non-learned batch-norm statistics (``buffers``) and metadata."""

    arch: Architecture
    tensors: dict
    buffers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.arch,
                               {k: v.copy() for k, v in self.tensors.items()},
                               {k: v.copy() for k, v in self.buffers.items()},
                               copy.deepcopy(self.meta))

    def row_matrix(self, i: int) -> np.ndarray:
        """Layer ``i`` as a c_out x c_r matrix, bias appended as the last column."""
        spec = self.arch.layers[i]
        w = self.tensors[f"{i}.weight"].reshape(spec.out_features, -1)
        if spec.has_bias:
            w = np.concatenate([w, self.tensors[f"{i}.bias"][:, None]], axis=1)
        return w

    def set_row_matrix(self, i: int, rows: np.ndarray):
        spec = self.arch.layers[i]
        rows = np.asarray(rows)
        n_w = int(np.prod(spec.weight_shape[1:]))
        dtype = self.tensors[f"{i}.weight"].dtype
        self.tensors[f"{i}.weight"] = rows[:, :n_w].reshape(spec.weight_shape).astype(dtype)
        if spec.has_bias:
            self.tensors[f"{i}.bias"] = rows[:, n_w].astype(dtype)

    def parameter_count(self) -> int:
        return sum(self.row_matrix(i).size for i in self.arch.learned_indices)

    def same_as(self, other: "ModelCheckpoint") -> bool:
        """Bit-exact equality of all tensors and buffers."""
        def eq(a, b):
            return a.keys() == b.keys() and all(
                a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
                for k in a)
        return self.arch == other.arch and eq(self.tensors, other.tensors) and eq(self.buffers, other.buffers)


def init_checkpoint(arch: Architecture, rng, dtype=np.float32) -> ModelCheckpoint:
    tensors, buffers = {}, {}
    for i, spec in enumerate(arch.layers):
        if spec.learned:
            fan_in = int(np.prod(spec.weight_shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            tensors[f"{i}.weight"] = rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype)
            if spec.has_bias:
                tensors[f"{i}.bias"] = rng.uniform(-bound, bound, size=spec.out_features).astype(dtype)
        else:
            if spec.has_bias:
                tensors[f"{i}.weight"] = np.ones(spec.out_features, dtype=dtype)
                tensors[f"{i}.bias"] = np.zeros(spec.out_features, dtype=dtype)
            buffers[f"{i}.running_mean"] = np.zeros(spec.out_features, dtype=dtype)
            buffers[f"{i}.running_var"] = np.ones(spec.out_features, dtype=dtype)
    return ModelCheckpoint(arch, tensors, buffers, {})


def _im2col_index(in_shape, kernel):
    c, h, w = in_shape
    kh, kw = kernel
    ho, wo = h - kh + 1, w - kw + 1
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    base = (ci * h * w + ki * w + kj).ravel()
    r, q = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    offsets = (r * w + q).ravel()
    return offsets[:, None] + base[None, :]


class BaseNet:
    """Differentiable view of a checkpoint (ReLU after every hidden layer)."""

    def __init__(self, ckpt: ModelCheckpoint, requires_grad=False):
        self.arch = ckpt.arch
        self.params = {k: Tensor(v.copy(), requires_grad=requires_grad) for k, v in ckpt.tensors.items()}
        self.buffers = {k: v.copy() for k, v in ckpt.buffers.items()}
        self.meta = copy.deepcopy(ckpt.meta)
        self._shapes = self.arch.layer_inputs()
        self._cols = {i: _im2col_index(self._shapes[i], s.kernel)
                      for i, s in enumerate(self.arch.layers) if s.kind == "conv2d"}

    def parameters(self):
        return list(self.params.values())

    def forward(self, x, bn_mode="eval", momentum=0.1):
        """``bn_mode``: ``eval`` uses running statistics, ``batch`` uses batch
        statistics, ``update`` uses batch statistics and refreshes the running ones
        (``momentum=None`` gives a cumulative average over calls)."""
        x = np.asarray(x)
        if x.shape[1:] != self.arch.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} != {self.arch.input_shape}")
        h = Tensor(x.reshape(len(x), -1).astype(next(iter(self.params.values())).dtype))
        layers = self.arch.layers
        last = len(layers) - 1
        for i, spec in enumerate(layers):
            if spec.kind == "dense":
                h = T.matmul(h, T.transpose(self.params[f"{i}.weight"], None))
                if spec.has_bias:
                    h = h + self.params[f"{i}.bias"]
            elif spec.kind == "conv2d":
                cols = T.take(h, self._cols[i])  # B x P x (c_in*kh*kw)
                wmat = T.reshape(self.params[f"{i}.weight"], (spec.out_features, -1))
                h = T.matmul(cols, T.transpose(wmat, None))
                if spec.has_bias:
                    h = h + self.params[f"{i}.bias"]
                h = T.reshape(T.transpose(h, (0, 2, 1)), (len(x), -1))
            else:
                h = self._batchnorm(i, spec, h, bn_mode, momentum)
            nxt = layers[i + 1] if i < last else None
            if i < last and nxt.kind != "batchnorm":
                h = T.relu(h)
        return h

    def _batchnorm(self, i, spec, h, mode, momentum, eps=1e-5):
        b = h.shape[0]
        c = spec.out_features
        h3 = T.reshape(h, (b, c, -1))
        rm, rv = self.buffers[f"{i}.running_mean"], self.buffers[f"{i}.running_var"]
        if mode == "eval":
            out = (h3 - rm[None, :, None].astype(h.dtype)) / np.sqrt(rv + eps)[None, :, None].astype(h.dtype)
        else:
            mu = T.mean(h3, axis=(0, 2), keepdims=True)
            xc = h3 - mu
            var = T.mean(T.mul(xc, xc), axis=(0, 2), keepdims=True)
            out = xc / T.sqrt(var + eps)
            if mode == "update":
                count = b * h3.shape[2]
                unbiased = var.data.ravel() * count / max(count - 1, 1)
                if momentum is None:
                    n = self.meta.get(f"bn_updates_{i}", 0) + 1
                    self.meta[f"bn_updates_{i}"] = n
                    f = 1.0 / n
                else:
                    f = momentum
                self.buffers[f"{i}.running_mean"] = ((1 - f) * rm + f * mu.data.ravel()).astype(rm.dtype)
                self.buffers[f"{i}.running_var"] = ((1 - f) * rv + f * unbiased).astype(rv.dtype)
        if spec.has_bias:
            out = out * T.reshape(self.params[f"{i}.weight"], (1, c, 1)) + T.reshape(self.params[f"{i}.bias"], (1, c, 1))
        return T.reshape(out, (b, -1))

    def to_checkpoint(self, meta=None) -> ModelCheckpoint:
        m = {k: v for k, v in self.meta.items() if not k.startswith("bn_updates_")}
        if meta:
            m.update(meta)
        return ModelCheckpoint(self.arch, {k: t.data.copy() for k, t in self.params.items()},
                               {k: v.copy() for k, v in self.buffers.items()}, m)


def predict_logits(ckpt: ModelCheckpoint, x, batch_size=1024) -> np.ndarray:
    net = BaseNet(ckpt)
    with no_grad():
        return np.concatenate([net.forward(x[s:s + batch_size]).data for s in range(0, len(x), batch_size)])


def evaluate(ckpt: ModelCheckpoint, data) -> tuple[float, float]:
    """Eval-mode accuracy and mean cross-entropy. Ties in argmax go to the lowest class."""
    logits = predict_logits(ckpt, data.x).astype(np.float64)
    if logits.shape[1] != data.n_classes and data.y.max() >= logits.shape[1]:
        raise DimensionError("model output dimension smaller than task class count")
    acc = float((np.argmax(logits, axis=1) == data.y).mean())
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(data.y)), data.y].mean())
    return acc, loss


def train_model(ckpt: ModelCheckpoint, data, epochs, rng, lr=1e-3, batch_size=32, weight_decay=0.0,
                snapshot_epochs=None, on_snapshot=None) -> ModelCheckpoint:
    """Supervised AdamW training from ``ckpt``'s weights.

    ``on_snapshot(epoch, checkpoint)`` is called for every epoch in
    ``snapshot_epochs`` (epoch 0 means before any update). Raises
    :class:`TrainingDivergedError` if the loss becomes non-finite.
    """
    net = BaseNet(ckpt, requires_grad=True)
    learned = [net.params[k] for k in net.params]
    opt = AdamW(learned, lr=lr, weight_decay=weight_decay)
    snaps = set(snapshot_epochs or ())
    if 0 in snaps and on_snapshot:
        on_snapshot(0, net.to_checkpoint({"epoch": 0}))
    for epoch in range(1, epochs + 1):
        for xb, yb in data.batches(batch_size, rng):
            opt.zero_grad()
            loss = T.cross_entropy(net.forward(xb, bn_mode="update"), yb)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
        if epoch in snaps and on_snapshot:
            on_snapshot(epoch, net.to_checkpoint({"epoch": epoch}))
    return net.to_checkpoint({"epoch": epochs})
