"""Permutation alignment of hidden units to a reference model (weight matching).

A permutation ``p`` on a hidden boundary means "new unit ``i`` is old unit
``p[i]``": rows of the producing layer, any batch-norm statistics in between,
and the matching input column groups of the consuming layer are re-indexed
together, so the network computes the same function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError, DimensionError
from .hungarian import linear_sum_assignment
from .tokenizer import PreprocessState, standardize
from .zoo.models import Architecture, ModelCheckpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Boundary:
    producer: int  # layer index whose rows are permuted
    consumer: int  # layer index whose input column groups are permuted
    norms: tuple  # batch-norm layers in between
    width: int
    group: int  # consumer columns per unit


def boundaries(arch: Architecture) -> list:
    """Permutable hidden boundaries between consecutive learned layers."""
    learned = arch.learned_indices
    shapes = arch.layer_inputs()
    out = []
    for a, b in zip(learned, learned[1:]):
        spec_b = arch.layers[b]
        width = arch.layers[a].out_features
        if spec_b.kind == "conv2d":
            group = spec_b.group
        else:
            group = int(np.prod(shapes[b])) // width
        norms = tuple(i for i in range(a + 1, b) if arch.layers[i].kind == "batchnorm")
        out.append(Boundary(a, b, norms, width, group))
    return out


def identity_permutations(arch: Architecture) -> list:
    return [np.arange(b.width) for b in boundaries(arch)]


def invert(perms) -> list:
    return [np.argsort(p) for p in perms]


def random_permutations(arch: Architecture, rng) -> list:
    return [rng.permutation(b.width) for b in boundaries(arch)]


def _permute_inputs(weight, b: Boundary, p):
    out_f = weight.shape[0]
    w = weight.reshape(out_f, b.width, -1)[:, p, :]
    return w.reshape(weight.shape)


def apply_permutation(m: ModelCheckpoint, perms) -> ModelCheckpoint:
    bounds = boundaries(m.arch)
    if len(perms) != len(bounds):
        raise DimensionError(f"expected {len(bounds)} permutations, got {len(perms)}")
    out = m.copy()
    for b, p in zip(bounds, perms):
        p = np.asarray(p)
        if p.shape != (b.width,) or not np.array_equal(np.sort(p), np.arange(b.width)):
            raise DimensionError(f"boundary after layer {b.producer} needs a permutation of {b.width}")
        out.tensors[f"{b.producer}.weight"] = out.tensors[f"{b.producer}.weight"][p]
        if f"{b.producer}.bias" in out.tensors:
            out.tensors[f"{b.producer}.bias"] = out.tensors[f"{b.producer}.bias"][p]
        for i in b.norms:
            for store in (out.tensors, out.buffers):
                for k in [k for k in store if k.split(".")[0] == str(i)]:
                    store[k] = store[k][p]
        out.tensors[f"{b.consumer}.weight"] = _permute_inputs(out.tensors[f"{b.consumer}.weight"], b, p)
    return out


def vec_distance(a: ModelCheckpoint, b: ModelCheckpoint) -> float:
    """Squared L2 distance of all learned weights and biases."""
    return float(sum(((a.row_matrix(i).astype(np.float64) - b.row_matrix(i)) ** 2).sum()
                     for i in a.arch.learned_indices))


def _rows(m: ModelCheckpoint, i):
    return m.row_matrix(i).astype(np.float64)


def _producer_rows(m, b, prev_perm, prev_b):
    """Producer rows of ``m`` with their input groups permuted by the previous boundary."""
    rows = _rows(m, b.producer)
    if prev_perm is None:
        return rows
    spec = m.arch.layers[b.producer]
    n_w = rows.shape[1] - int(spec.has_bias)
    w = rows[:, :n_w].reshape(rows.shape[0], prev_b.width, -1)[:, prev_perm, :].reshape(rows.shape[0], n_w)
    return np.concatenate([w, rows[:, n_w:]], axis=1)


def _consumer_cols(m, b, next_perm):
    """Consumer weights of ``m`` as (out, width, group), rows permuted by the next boundary."""
    spec = m.arch.layers[b.consumer]
    w = m.tensors[f"{b.consumer}.weight"].astype(np.float64).reshape(spec.out_features, b.width, -1)
    return w if next_perm is None else w[next_perm]


def weight_matching(ref: ModelCheckpoint, other: ModelCheckpoint, max_sweeps: int = 50, return_trace=False):
    """Permutations ``p`` minimising ``||vec(ref) - vec(apply_permutation(other, p))||^2``.

    Coordinate descent over boundaries in architecture order; each step solves
    one linear assignment exactly, so the distance never increases. Stops after
    a sweep that changes nothing or after ``max_sweeps``.
    """
    if ref.arch != other.arch:
        raise ArgumentError("weight matching needs identical architectures")
    bounds = boundaries(ref.arch)
    perms = identity_permutations(ref.arch)
    trace = [vec_distance(ref, other)]
    for _ in range(max_sweeps):
        changed = False
        for k, b in enumerate(bounds):
            prev_perm = perms[k - 1] if k > 0 else None
            prev_b = bounds[k - 1] if k > 0 else None
            next_perm = perms[k + 1] if k + 1 < len(bounds) else None
            a_rows = _rows(ref, b.producer)
            b_rows = _producer_rows(other, b, prev_perm, prev_b)
            sim = a_rows @ b_rows.T
            a_cols = _consumer_cols(ref, b, None)
            b_cols = _consumer_cols(other, b, next_perm)
            sim += np.einsum("oig,ojg->ij", a_cols, b_cols)
            new = linear_sum_assignment(sim, maximize=True)
            if not np.array_equal(new, perms[k]):
                old_dist = vec_distance(ref, apply_permutation(other, perms))
                cand = perms[:k] + [new] + perms[k + 1:]
                if vec_distance(ref, apply_permutation(other, cand)) < old_dist:
                    perms = cand
                    changed = True
        trace.append(vec_distance(ref, apply_permutation(other, perms)))
        if not changed:
            break
    return (perms, trace) if return_trace else perms


def align_zoo(zoo, reference_id: int, state: PreprocessState | None = None, max_sweeps: int = 50):
    """Align every model to ``reference_id`` using each model's last snapshot.

    The same permutations are applied to all snapshots of a model and stored
    in the manifest. With ``state`` the matching runs on standardised weights.
    """
    from .zoo.population import Zoo, ZooManifest

    m = zoo.manifest
    if reference_id not in m.model_ids():
        raise DataError(f"reference model {reference_id} not in zoo")
    if m.split_of(reference_id) != "train":
        raise ArgumentError("reference model must be in the training split")

    def prep(c):
        return standardize(c, state) if state is not None else c

    ref = prep(zoo.get(reference_id))
    checkpoints = {}
    perms_out = {}
    for model_id in m.model_ids():
        epochs = m.epochs_of(model_id)
        last = (model_id, epochs[-1])
        if last not in zoo.checkpoints:
            raise DataError(f"missing last-epoch checkpoint of model {model_id}")
        perms = weight_matching(ref, prep(zoo.checkpoints[last]), max_sweeps)
        perms_out[model_id] = [p.tolist() for p in perms]
        for e in epochs:
            checkpoints[(model_id, e)] = apply_permutation(zoo.checkpoints[(model_id, e)], perms)
    manifest = ZooManifest.from_dict(m.to_dict())
    manifest.permutations = perms_out
    manifest.reference_id = reference_id
    return Zoo(manifest, checkpoints)
