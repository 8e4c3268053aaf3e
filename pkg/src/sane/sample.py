"""Model generation from latent space: KDE / Gaussian sampling, decoding,
batch-norm conditioning, keep-best-m selection, bootstrapping, fine-tuning,
ensembles.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .embed import EmbeddingSequence, decode_sequence
from .errors import ArgumentError, ConfigError, DataError, TrainingDivergedError
from .numerics import no_grad
from .tokenizer import PreprocessState, TokenSequence, destandardize, detokenize, layout_for, positions_for
from .zoo.models import Architecture, BaseNet, ModelCheckpoint, evaluate, init_checkpoint, predict_logits, train_model

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6


@dataclass
class SampleConfig:
    k: int = 50
    m: int = 5
    bootstrap_iters: int = 3
    bandwidth: str = "scott"  # or "fixed"
    h: float | None = None  # fixed bandwidth
    prior: str = "kde"  # or "gaussian"
    bn_batches: int = 10
    bn_batch_size: int = 32
    bn_momentum: float | None = None  # None: cumulative average over the conditioning batches
    halo: int | None = None  # None = decoder default (ws/4)
    chunk: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.m <= self.k:
            raise ConfigError("need 1 <= m <= k", key_path="sample.m")
        if self.bootstrap_iters < 1:
            raise ConfigError("bootstrap_iters must be >= 1", key_path="sample.bootstrap_iters")
        if self.bandwidth not in ("scott", "fixed"):
            raise ConfigError(f"unknown bandwidth rule {self.bandwidth!r}", key_path="sample.bandwidth")
        if self.bandwidth == "fixed" and not (self.h and self.h > 0):
            raise ConfigError("fixed bandwidth needs h > 0", key_path="sample.h")
        if self.prior not in ("kde", "gaussian"):
            raise ConfigError(f"unknown prior {self.prior!r}", key_path="sample.prior")
        if self.bn_batches < 1:
            raise ConfigError("bn_batches must be >= 1", key_path="sample.bn_batches")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown SampleConfig keys {sorted(unknown)}", key_path=f"sample.{sorted(unknown)[0]}")
        return cls(**d)


# -- distributions -------------------------------------------------------------
@dataclass
class TokenKDE:
    """Factorised Gaussian KDE: independent 1-D mixtures per token position and latent dimension.

    Positions without prompt support (``covered == False``) draw from N(0, 1).
    """

    points: np.ndarray  # E x N x d_z
    bandwidth: np.ndarray  # N x d_z
    covered: np.ndarray  # N bool
    positions: np.ndarray  # N x 3

    @property
    def shape(self):
        return self.points.shape[1:]


@dataclass
class GaussianPrior:
    positions: np.ndarray
    d_z: int

    @property
    def shape(self):
        return (len(self.positions), self.d_z)


def map_prompt(e: EmbeddingSequence, target_positions) -> tuple:
    """Align a prompt's latents to target positions by ``(layer, index-in-layer)``.

    Returns ``(z, covered)`` with rows of uncovered target positions set to 0.
    """
    lookup = {(int(l), int(k)): i for i, (_, l, k) in enumerate(e.positions)}
    z = np.zeros((len(target_positions), e.z.shape[1]), dtype=np.float64)
    covered = np.zeros(len(target_positions), dtype=bool)
    for j, (_, l, k) in enumerate(target_positions):
        i = lookup.get((int(l), int(k)))
        if i is not None:
            z[j] = e.z[i]
            covered[j] = True
    return z, covered


def fit_kde(prompts, target_positions=None, bandwidth="scott", h=None) -> TokenKDE:
    """KDE over prompt latents, one bandwidth per token position and dimension.

    Scott's rule ``h = std * E^(-1/5)`` (sample std, 0 for one prompt), floored at 1e-6.
    """
    prompts = list(prompts)
    if not prompts:
        raise ArgumentError("KDE needs at least one prompt embedding")
    if target_positions is None:
        target_positions = prompts[0].positions
    target_positions = np.asarray(target_positions)
    mapped = [map_prompt(p, target_positions) for p in prompts]
    points = np.stack([z for z, _ in mapped])
    covered = np.logical_and.reduce([c for _, c in mapped])
    e = len(prompts)
    if bandwidth == "fixed":
        if not (h and h > 0):
            raise ArgumentError("fixed bandwidth needs h > 0")
        bw = np.full(points.shape[1:], float(h))
    elif bandwidth == "scott":
        sd = points.std(axis=0, ddof=1) if e > 1 else np.zeros(points.shape[1:])
        bw = np.maximum(sd * e ** (-0.2), BANDWIDTH_FLOOR)
    else:
        raise ArgumentError(f"unknown bandwidth rule {bandwidth!r}")
    return TokenKDE(points, bw, covered, target_positions)


def draw_samples(dist, k: int, rng) -> np.ndarray:
    """``k x N x d_z`` independent draws per token position and latent dimension."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    n, d = dist.shape
    if isinstance(dist, GaussianPrior):
        return rng.standard_normal((k, n, d))
    e = dist.points.shape[0]
    pick = rng.integers(0, e, size=(k, n, d))
    centers = np.take_along_axis(np.broadcast_to(dist.points, (k, e, n, d)), pick[:, None], axis=1)[:, 0]
    out = centers + dist.bandwidth * rng.standard_normal((k, n, d))
    if not dist.covered.all():
        out[:, ~dist.covered] = rng.standard_normal((k, int((~dist.covered).sum()), d))
    return out


# -- decoding ------------------------------------------------------------------
def target_layout(arch: Architecture, d_t: int) -> TokenSequence:
    """Empty token sequence (zeros) carrying positions, mask and layout of ``arch``."""
    lay = layout_for(arch, d_t)
    n = sum(l.n_tokens for l in lay)
    mask = np.zeros((n, d_t), dtype=np.float32)
    row = 0
    for l in lay:
        per_row = np.ones(l.parts * d_t, dtype=np.float32)
        if l.pad:
            per_row[-l.pad:] = 0
        mask[row:row + l.n_tokens] = np.tile(per_row.reshape(l.parts, d_t), (l.rows, 1))
        row += l.n_tokens
    return TokenSequence(np.zeros((n, d_t), np.float32), positions_for(arch, d_t), mask, lay)


def decode_samples(model, z, arch: Architecture, state: PreprocessState, chunk=None, halo=None) -> list:
    """Decode ``k x N x d_z`` latents into de-standardised checkpoints (BN buffers at (0, 1))."""
    tpl = target_layout(arch, model.cfg.d_t)
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[1] != len(tpl):
        raise ArgumentError(f"latents {z.shape} do not match the {len(tpl)}-token target layout")
    out = []
    for zi in z:
        tok = decode_sequence(model, zi, tpl.positions, chunk, halo)
        seq = TokenSequence(tok * tpl.mask, tpl.positions, tpl.mask, tpl.layout)
        out.append(destandardize(detokenize(seq, arch), state))
    return out


# -- conditioning and evaluation -----------------------------------------------
def bn_condition(m: ModelCheckpoint, data, batches: int = 10, rng=None, batch_size: int = 32,
                 momentum: float | None = None) -> ModelCheckpoint:
    """Refresh batch-norm running statistics with forward passes; learned weights are untouched."""
    if not m.arch.has_batchnorm:
        return m
    if batches < 1:
        raise ArgumentError("batches must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    net = BaseNet(m)
    done = 0
    with no_grad():
        while done < batches:
            for xb, _ in data.batches(batch_size, rng):
                net.forward(xb, bn_mode="update", momentum=momentum)
                done += 1
                if done == batches:
                    break
    out = m.copy()
    out.buffers = {k: v.copy() for k, v in net.buffers.items()}
    return out


def weights_digest(m: ModelCheckpoint) -> str:
    h = hashlib.sha256()
    for k in sorted(m.tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(m.tensors[k]).tobytes())
    return h.hexdigest()


def accuracy(m: ModelCheckpoint, data) -> float:
    acc, _ = evaluate(m, data)
    return 0.0 if not np.isfinite(acc) else acc


def subsample(scores, m: int) -> list:
    """Indices of the best ``m`` scores: descending, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:m]


@dataclass
class Candidate:
    checkpoint: ModelCheckpoint
    z: np.ndarray
    score: float


@dataclass
class SampleResult:
    kept: list  # Candidate, best first
    trace: list = field(default_factory=list)  # per iteration: {"iteration", "best", "kept_scores", ...}


def _round(model, state, arch, dist, cfg: SampleConfig, eval_data, cond_data, rng, iteration):
    z = draw_samples(dist, cfg.k, rng)
    cands = []
    for ck, zi in zip(decode_samples(model, z, arch, state, cfg.chunk, cfg.halo), z):
        try:
            if cond_data is not None:
                ck = bn_condition(ck, cond_data, cfg.bn_batches, rng, cfg.bn_batch_size, cfg.bn_momentum)
            score = accuracy(ck, eval_data)
        except Exception as exc:
            raise DataError(f"evaluation failed in sampling iteration {iteration}: {exc}") from exc
        cands.append(Candidate(ck, zi, score))
    return cands


def _initial_dist(prompts, arch, model, cfg):
    positions = positions_for(arch, model.cfg.d_t)
    if cfg.prior == "gaussian":
        return GaussianPrior(positions, model.cfg.d_z)
    if not prompts:
        raise ArgumentError("KDE prior needs prompt embeddings")
    return fit_kde(prompts, positions, cfg.bandwidth, cfg.h)


def generate_subsampled(model, state, arch, prompts, cfg: SampleConfig, eval_data, cond_data=None, rng=None):
    """One draw-decode-condition-evaluate round followed by keep-best-m."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    cands = _round(model, state, arch, _initial_dist(prompts, arch, model, cfg), cfg, eval_data, cond_data, rng, 1)
    keep = [cands[i] for i in subsample([c.score for c in cands], cfg.m)]
    return SampleResult(keep, [_trace_row(1, cands, keep)])


def _trace_row(it, cands, keep):
    return {"iteration": it, "best": keep[0].score, "kept_scores": [c.score for c in keep],
            "candidate_mean": float(np.mean([c.score for c in cands]))}


def bootstrap(model, state, arch, prompts, cfg: SampleConfig, eval_data, cond_data=None, rng=None) -> SampleResult:
    """Iterated sampling: the latents of the kept models become the next prompt set.

    Kept models (elites) join the next round's candidate pool ahead of the new
    draws, so the best kept score can never decrease between iterations.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dist = _initial_dist(prompts, arch, model, cfg)
    positions = positions_for(arch, model.cfg.d_t)
    elites = []
    trace = []
    for it in range(1, cfg.bootstrap_iters + 1):
        new = _round(model, state, arch, dist, cfg, eval_data, cond_data, rng, it)
        pool = elites + new
        elites = [pool[i] for i in subsample([c.score for c in pool], cfg.m)]
        trace.append(_trace_row(it, new, elites))
        log.info("sampling iteration %d: best %.4f", it, elites[0].score)
        prompts_z = [EmbeddingSequence(c.z, positions) for c in elites]
        dist = fit_kde(prompts_z, positions, cfg.bandwidth, cfg.h)
    return SampleResult(elites, trace)


# -- downstream evaluation -----------------------------------------------------
@dataclass
class FinetuneResult:
    trajectory: list  # (epoch, accuracy)
    checkpoint: ModelCheckpoint
    diverged: bool = False


def finetune(m: ModelCheckpoint, train_data, eval_data, epochs: int, rng, lr=1e-3, batch_size=32,
             record_epochs=None) -> FinetuneResult:
    """Supervised training from ``m``'s weights; accuracy on ``eval_data`` at 0 and each recorded epoch."""
    record = sorted(set(record_epochs if record_epochs is not None else range(epochs + 1)) | {0})
    traj = []

    def on_snap(epoch, ck):
        traj.append((epoch, accuracy(ck, eval_data)))

    if epochs == 0:
        return FinetuneResult([(0, accuracy(m, eval_data))], m)
    try:
        final = train_model(m, train_data, epochs, rng, lr=lr, batch_size=batch_size,
                            snapshot_epochs=record, on_snapshot=on_snap)
    except TrainingDivergedError:
        return FinetuneResult(traj, m, diverged=True)
    return FinetuneResult(traj, final)


def from_scratch(arch: Architecture, train_data, eval_data, epochs: int, seed: int, lr=1e-3, batch_size=32):
    rng = np.random.default_rng([seed, 101])
    return finetune(init_checkpoint(arch, rng), train_data, eval_data, epochs, rng, lr, batch_size)


def ensemble_eval(models, data) -> float:
    """Accuracy of the averaged softmax of ``models`` (argmax ties go to the lowest class)."""
    models = list(models)
    if len(models) < 2:
        raise ArgumentError("an ensemble needs at least two models")
    dims = {m.arch.output_dim for m in models}
    if len(dims) != 1:
        raise ArgumentError(f"ensemble members disagree on output size: {sorted(dims)}")
    probs = 0.0
    for m in models:
        z = predict_logits(m, data.x).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs = probs + z / z.sum(axis=1, keepdims=True)
    return float((np.argmax(probs / len(models), axis=1) == data.y).mean())


def sampling_report(cfg: SampleConfig, result: SampleResult, paths=None, extra=None) -> dict:
    return {"config": cfg.to_dict(), "seed": cfg.seed, "iterations": result.trace,
            "kept": [{"rank": r, "score": c.score, "weights_sha256": weights_digest(c.checkpoint),
                      "path": (paths or [None] * len(result.kept))[r]} for r, c in enumerate(result.kept)],
            **(extra or {})}
