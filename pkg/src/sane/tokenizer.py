"""Weight tokenization: per-layer standardisation, row-wise slicing, windows.

Each learned layer is viewed as a ``c_out x c_r`` matrix (conv kernels
flattened in ``(c_in, kh, kw)`` order, bias appended as the last column).
Every row is cut into ``ceil(c_r / d_t)`` tokens of width ``d_t``; the last
part of a row is zero-padded and masked out. Positions are 1-based
``[n, l, k]``: global index, learned-layer index, index within the layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, FormatError
from .zoo.models import Architecture, ModelCheckpoint

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class LayerLayout:
    layer_index: int  # index into Architecture.layers
    rows: int
    parts: int
    width: int  # c_r
    pad: int  # zero entries in each row's final part

    @property
    def n_tokens(self):
        return self.rows * self.parts


@dataclass
class TokenSequence:
    tokens: np.ndarray  # N x d_t
    positions: np.ndarray  # N x 3, int64, 1-based
    mask: np.ndarray  # N x d_t, 1 on signal
    layout: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.tokens)

    @property
    def d_t(self):
        return self.tokens.shape[1]

    def slice(self, start: int, stop: int) -> "TokenSequence":
        return TokenSequence(self.tokens[start:stop], self.positions[start:stop], self.mask[start:stop], self.layout)


@dataclass
class PreprocessState:
    """Per-layer population statistics used to standardise weights."""

    mean: dict
    std: dict
    d_t: int
    reference_id: int | None = None

    def to_dict(self):
        return {"mean": {str(k): float(v) for k, v in self.mean.items()},
                "std": {str(k): float(v) for k, v in self.std.items()},
                "d_t": self.d_t, "reference_id": self.reference_id}

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): v for k, v in d["mean"].items()}, {int(k): v for k, v in d["std"].items()},
                   int(d["d_t"]), d.get("reference_id"))


def fit_preprocess(checkpoints, d_t: int, reference_id=None) -> PreprocessState:
    """Mean and std of every learned layer (weights and bias together) over a population."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ArgumentError("need at least one checkpoint")
    arch = checkpoints[0].arch
    mean, std = {}, {}
    for i in arch.learned_indices:
        vals = np.concatenate([c.row_matrix(i).astype(np.float64).ravel() for c in checkpoints])
        mean[i] = float(vals.mean())
        std[i] = max(float(vals.std()), STD_FLOOR)
    return PreprocessState(mean, std, d_t, reference_id)


def _check_state(m, state):
    missing = [i for i in m.arch.learned_indices if i not in state.mean or i not in state.std]
    if missing:
        raise ConfigError(f"no statistics for layers {missing}")


def standardize(m: ModelCheckpoint, state: PreprocessState) -> ModelCheckpoint:
    _check_state(m, state)
    out = m.copy()
    for i in m.arch.learned_indices:
        std = max(state.std[i], STD_FLOOR)
        out.set_row_matrix(i, (m.row_matrix(i).astype(np.float64) - state.mean[i]) / std)
    return out


def destandardize(m: ModelCheckpoint, state: PreprocessState) -> ModelCheckpoint:
    _check_state(m, state)
    out = m.copy()
    for i in m.arch.learned_indices:
        std = max(state.std[i], STD_FLOOR)
        out.set_row_matrix(i, m.row_matrix(i).astype(np.float64) * std + state.mean[i])
    return out


def layout_for(arch: Architecture, d_t: int) -> tuple:
    if d_t < 1:
        raise ArgumentError("d_t must be >= 1")
    out = []
    for i in arch.learned_indices:
        spec = arch.layers[i]
        c_r = int(np.prod(spec.weight_shape[1:])) + int(spec.has_bias)
        parts = math.ceil(c_r / d_t)
        out.append(LayerLayout(i, spec.out_features, parts, c_r, parts * d_t - c_r))
    return tuple(out)


def sequence_length(arch: Architecture, d_t: int) -> int:
    return sum(l.n_tokens for l in layout_for(arch, d_t))


def positions_for(arch: Architecture, d_t: int) -> np.ndarray:
    layout = layout_for(arch, d_t)
    pos = []
    n = 1
    for li, lay in enumerate(layout, start=1):
        for k in range(1, lay.n_tokens + 1):
            pos.append((n, li, k))
            n += 1
    return np.array(pos, dtype=np.int64).reshape(-1, 3)


def tokenize(m: ModelCheckpoint, d_t: int) -> TokenSequence:
    layout = layout_for(m.arch, d_t)
    if not layout:
        raise ArgumentError("model has no learned layers")
    toks, masks = [], []
    for lay in layout:
        rows = m.row_matrix(lay.layer_index)
        padded = np.zeros((lay.rows, lay.parts * d_t), dtype=rows.dtype)
        padded[:, :lay.width] = rows
        mask = np.zeros_like(padded)
        mask[:, :lay.width] = 1
        toks.append(padded.reshape(-1, d_t))
        masks.append(mask.reshape(-1, d_t))
    return TokenSequence(np.concatenate(toks), positions_for(m.arch, d_t), np.concatenate(masks), layout)


def detokenize(t: TokenSequence, arch: Architecture, template: ModelCheckpoint | None = None) -> ModelCheckpoint:
    """Rebuild a checkpoint from tokens; padded entries are ignored.

    Batch-norm tensors come from ``template`` when given, otherwise they are
    initialised to identity statistics (mean 0, var 1, unit gain, zero shift).
    """
    d_t = t.d_t
    layout = layout_for(arch, d_t)
    if t.layout and tuple(t.layout) != layout:
        raise FormatError("token layout does not match architecture")
    expected = sum(l.n_tokens for l in layout)
    if len(t.tokens) != expected:
        raise FormatError(f"sequence has {len(t.tokens)} tokens, architecture needs {expected}")
    dtype = t.tokens.dtype
    tensors, buffers = {}, {}
    for i, spec in enumerate(arch.layers):
        if not spec.learned:
            if template is not None:
                for k in (f"{i}.weight", f"{i}.bias"):
                    if k in template.tensors:
                        tensors[k] = template.tensors[k].copy()
                buffers[f"{i}.running_mean"] = template.buffers[f"{i}.running_mean"].copy()
                buffers[f"{i}.running_var"] = template.buffers[f"{i}.running_var"].copy()
            else:
                if spec.has_bias:
                    tensors[f"{i}.weight"] = np.ones(spec.out_features, dtype=dtype)
                    tensors[f"{i}.bias"] = np.zeros(spec.out_features, dtype=dtype)
                buffers[f"{i}.running_mean"] = np.zeros(spec.out_features, dtype=dtype)
                buffers[f"{i}.running_var"] = np.ones(spec.out_features, dtype=dtype)
    out = ModelCheckpoint(arch, tensors, buffers, {})
    start = 0
    for lay in layout:
        block = t.tokens[start:start + lay.n_tokens].reshape(lay.rows, lay.parts * d_t)[:, :lay.width]
        spec = arch.layers[lay.layer_index]
        n_w = int(np.prod(spec.weight_shape[1:]))
        out.tensors[f"{lay.layer_index}.weight"] = block[:, :n_w].reshape(spec.weight_shape).copy()
        if spec.has_bias:
            out.tensors[f"{lay.layer_index}.bias"] = block[:, n_w].copy()
        start += lay.n_tokens
    out.tensors = {k: out.tensors[k] for k in sorted(out.tensors, key=_tensor_order)}
    return out


def _tensor_order(name):
    idx, kind = name.split(".")
    return int(idx), kind != "weight"


def windows_per_model(n: int, ws: int) -> int:
    if n < 1 or ws < 1:
        raise ArgumentError("n and ws must be >= 1")
    return math.ceil(n / ws)


def draw_window_start(n: int, ws: int, rng) -> int:
    """0-based start of a uniformly drawn window of length ``min(ws, n)``."""
    if ws < 1:
        raise ArgumentError("ws must be >= 1")
    return int(rng.integers(0, max(1, n - ws + 1)))


def draw_window(t: TokenSequence, ws: int, rng):
    """Random consecutive window ``(tokens, positions, mask)``; positions stay absolute."""
    s = draw_window_start(len(t), ws, rng)
    e = s + min(ws, len(t))
    return t.tokens[s:e], t.positions[s:e], t.mask[s:e]
