"""Whole-model embeddings: haloed chunk encoding, stitching, summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autoencoder import SaneModel, decode_window, encode_window
from .container import save_container
from .errors import ArgumentError
from .tokenizer import PreprocessState, TokenSequence, standardize, tokenize


@dataclass
class EmbeddingSequence:
    z: np.ndarray  # N x d_z
    positions: np.ndarray  # N x 3
    model_id: object = None

    def __len__(self):
        return len(self.z)

    def layers(self):
        return sorted(int(l) for l in np.unique(self.positions[:, 1]))

    def layer_tokens(self, layer: int) -> np.ndarray:
        return self.z[self.positions[:, 1] == layer]


def chunk_bounds(n: int, chunk: int, halo: int):
    """``(content_start, content_stop, context_start, context_stop)`` per chunk, 0-based, half-open."""
    if chunk < 1 or halo < 0:
        raise ArgumentError("need chunk >= 1 and halo >= 0")
    out = []
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        out.append((s, e, max(0, s - halo), min(n, e + halo)))
    return out


def default_halo(ws: int) -> int:
    return ws // 4


def _haloed(fn, values, positions, chunk, halo, width):
    n = len(values)
    out = np.zeros((n, width), dtype=np.float32)
    for s, e, cs, ce in chunk_bounds(n, chunk, halo):
        res = fn(values[cs:ce], positions[cs:ce])
        out[s:e] = res[s - cs:e - cs]
    return out


def embed_model(model: SaneModel, t: TokenSequence, chunk: int | None = None, halo: int | None = None,
                model_id=None) -> EmbeddingSequence:
    """Encode a full token sequence chunk by chunk and stitch the content parts.

    Each chunk of ``chunk`` tokens is encoded together with up to ``halo``
    neighbouring tokens on either side; the halo outputs are dropped, so every
    token's latent comes from exactly one chunk.
    """
    chunk = model.cfg.ws if chunk is None else chunk
    halo = default_halo(model.cfg.ws) if halo is None else halo
    z = _haloed(lambda v, p: encode_window(model, v, p), t.tokens, t.positions, chunk, halo, model.cfg.d_z)
    return EmbeddingSequence(z, t.positions.copy(), model_id)


def decode_sequence(model: SaneModel, z, positions, chunk: int | None = None, halo: int | None = None) -> np.ndarray:
    """Decoder counterpart of :func:`embed_model`: token reconstructions ``N x d_t``."""
    chunk = model.cfg.ws if chunk is None else chunk
    halo = default_halo(model.cfg.ws) if halo is None else halo
    return _haloed(lambda v, p: decode_window(model, v, p), np.asarray(z, np.float32), positions, chunk, halo,
                   model.cfg.d_t)


def reconstruction_error(model: SaneModel, state: PreprocessState, ckpt, chunk=None, halo=None) -> float:
    """Masked MSE of encode-then-decode over a whole checkpoint, in standardized token space."""
    t = tokenize(standardize(ckpt, state), model.cfg.d_t)
    z = embed_model(model, t, chunk, halo).z
    recon = decode_sequence(model, z, t.positions, chunk, halo)
    diff = (recon.astype(np.float64) - t.tokens) * t.mask
    return float((diff ** 2).sum() / max(t.mask.sum(), 1.0))


def embed_checkpoint(model: SaneModel, state: PreprocessState, ckpt, chunk=None, halo=None, model_id=None):
    return embed_model(model, tokenize(standardize(ckpt, state), model.cfg.d_t), chunk, halo, model_id)


def embed_zoo(model: SaneModel, state: PreprocessState, zoo, split=None, chunk=None, halo=None) -> dict:
    """Embeddings of every (model_id, epoch) checkpoint of ``split`` (all splits if None)."""
    out = {}
    for e in zoo.manifest.rows(split):
        key = (e["model_id"], e["epoch"])
        out[key] = embed_checkpoint(model, state, zoo.checkpoints[key], chunk, halo, e["model_id"])
    return out


def aggregate_mean(e: EmbeddingSequence) -> np.ndarray:
    if len(e) == 0:
        raise ArgumentError("cannot average an empty embedding sequence")
    return e.z.astype(np.float64).mean(axis=0)


def layer_spread(e: EmbeddingSequence) -> dict:
    """Per layer: population std of each latent dimension over the layer's tokens, averaged over dimensions."""
    return {l: float(e.layer_tokens(l).astype(np.float64).std(axis=0).mean()) for l in e.layers()}


def pairwise_distances(e: EmbeddingSequence, layer: int) -> np.ndarray:
    """Euclidean distances of all unordered token pairs of one layer (row-major ``i < j`` order)."""
    z = e.layer_tokens(layer).astype(np.float64)
    if len(z) < 2:
        raise ArgumentError(f"layer {layer} has fewer than two tokens")
    i, j = np.triu_indices(len(z), k=1)
    return np.sqrt(((z[i] - z[j]) ** 2).sum(axis=1))


def distance_histogram(e: EmbeddingSequence, layer: int, bins=20):
    return np.histogram(pairwise_distances(e, layer), bins=bins)


def export_embeddings(path, embeddings: dict, meta: dict | None = None):
    """Write per-token latents to a container and a CSV of per-model summaries.

    ``embeddings`` maps ``(model_id, epoch)`` to :class:`EmbeddingSequence`.
    Returns the CSV path.
    """
    from pathlib import Path

    path = Path(path)
    keys = sorted(embeddings)
    tensors = {}
    for mid, ep in keys:
        e = embeddings[(mid, ep)]
        tensors[f"m{mid}_e{ep}/z"] = e.z.astype(np.float32)
        tensors[f"m{mid}_e{ep}/positions"] = e.positions.astype(np.int64)
    save_container(path, tensors, {"kind": "embeddings", "keys": [list(k) for k in keys], **(meta or {})})
    csv_path = path / "embeddings.csv"
    if not keys:
        csv_path.write_text("", encoding="utf-8")
        return csv_path
    first = embeddings[keys[0]]
    d_z = first.z.shape[1]
    layers = first.layers()
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "epoch"] + [f"zbar_{i}" for i in range(d_z)] + [f"spread_l{l}" for l in layers])
        for key in keys:
            e = embeddings[key]
            spread = layer_spread(e)
            w.writerow([key[0], key[1]] + [repr(float(v)) for v in aggregate_mean(e)]
                       + [repr(spread[l]) for l in layers])
    return csv_path
