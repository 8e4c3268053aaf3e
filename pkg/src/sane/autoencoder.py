"""Sequential weight autoencoder: per-token transformer encoder/decoder.

Windows of weight tokens and their ``[n, l, k]`` positions are encoded into
one latent per token and decoded back. Training combines masked
reconstruction with an NT-Xent contrastive term between an anchored view and
a permuted view of the same window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .align import apply_permutation, random_permutations
from .container import load_container, save_container
from .errors import ArgumentError, CapacityError, ConfigError, FormatError, TrainingDivergedError
from .numerics import AdamW, clip_grad_norm, onecycle_lr
from .numerics import autodiff as T
from .numerics.autodiff import Tensor, no_grad
from .numerics.nn import Embedding, LayerNorm, Linear, Module, TransformerBlock
from .tokenizer import PreprocessState, fit_preprocess, standardize, tokenize, windows_per_model

log = logging.getLogger(__name__)


@dataclass
class SaneConfig:
    d_t: int = 17
    d_z: int = 16
    d_model: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ws: int = 16
    gamma: float = 0.05
    tau: float = 0.1
    noise: float = 0.05
    d_proj: int = 16
    lr_max: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    patience: int = 10
    batch_size: int = 32
    n_perms: int = 5
    grad_clip: float = 1.0
    capacity: tuple | None = None  # (n, l, k) table sizes; None = twice the zoo maximum
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.capacity is not None:
            self.capacity = tuple(int(c) for c in self.capacity)
        self.validate()

    def validate(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads", key_path="sane.heads")
        if not 0 < self.d_z <= 4 * self.d_t:
            raise ConfigError("d_z must lie in (0, 4*d_t]", key_path="sane.d_z")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]", key_path="sane.gamma")
        if self.ws < 1:
            raise ConfigError("ws must be >= 1", key_path="sane.ws")

    def to_dict(self):
        d = asdict(self)
        d["capacity"] = list(self.capacity) if self.capacity is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown SaneConfig keys {sorted(unknown)}", key_path=f"sane.{sorted(unknown)[0]}")
        return cls(**d)


class PositionEmbedder(Module):
    """Sum of learned tables for the global, layer and in-layer indices."""

    def __init__(self, capacity, d_model, rng, dtype):
        self.capacity = tuple(capacity)
        self.n = Embedding(capacity[0], d_model, rng, dtype)
        self.l = Embedding(capacity[1], d_model, rng, dtype)
        self.k = Embedding(capacity[2], d_model, rng, dtype)

    def forward(self, positions):
        positions = np.asarray(positions)
        for col, cap, name in zip(range(3), self.capacity, "nlk"):
            vals = positions[..., col]
            if vals.size and (vals.min() < 1 or vals.max() > cap):
                raise CapacityError(f"position {name}={int(vals.max())} exceeds capacity {cap}")
        return self.n(positions[..., 0] - 1) + self.l(positions[..., 1] - 1) + self.k(positions[..., 2] - 1)


class SaneModel(Module):
    def __init__(self, cfg: SaneConfig, capacity=None, seed=None):
        cfg.validate()
        capacity = tuple(capacity or cfg.capacity or ())
        if len(capacity) != 3:
            raise ConfigError("position capacity (n, l, k) must be known", key_path="sane.capacity")
        self.cfg = cfg
        self.capacity = capacity
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 7])
        dm = cfg.d_model
        self.tok_in = Linear(cfg.d_t, dm, rng, dtype=dtype)
        self.enc_pos = PositionEmbedder(capacity, dm, rng, dtype)
        self.encoder = [TransformerBlock(dm, cfg.heads, rng, dtype) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(dm, dtype)
        self.to_latent = Linear(dm, cfg.d_z, rng, dtype=dtype)
        self.from_latent = Linear(cfg.d_z, dm, rng, dtype=dtype)
        self.dec_pos = PositionEmbedder(capacity, dm, rng, dtype)
        self.decoder = [TransformerBlock(dm, cfg.heads, rng, dtype) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(dm, dtype)
        self.tok_out = Linear(dm, cfg.d_t, rng, dtype=dtype)
        self.proj1 = Linear(cfg.d_z, cfg.d_z, rng, dtype=dtype)
        self.proj2 = Linear(cfg.d_z, cfg.d_proj, rng, dtype=dtype)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def _batched(self, x, positions, width):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        positions = np.asarray(positions)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
            positions = positions[None]
        if x.shape[-1] != width:
            raise ArgumentError(f"expected feature width {width}, got {x.shape[-1]}")
        if positions.shape != x.shape[:2] + (3,):
            raise ArgumentError(f"positions {positions.shape} do not match input {x.shape}")
        return x, positions, single

    def encode(self, tokens, positions) -> Tensor:
        """Per-token latents ``(..., W, d_z)`` of a window (or batch of windows)."""
        x, positions, single = self._batched(tokens, positions, self.cfg.d_t)
        b, w = x.shape[:2]
        if w == 0:
            return Tensor(np.zeros((w, self.cfg.d_z) if single else (b, 0, self.cfg.d_z), dtype=self.dtype))
        h = self.tok_in(x) + self.enc_pos(positions)
        for block in self.encoder:
            h = block(h)
        z = self.to_latent(self.enc_ln(h))
        return T.reshape(z, z.shape[1:]) if single else z

    def decode(self, z, positions) -> Tensor:
        """Token reconstructions ``(..., W, d_t)`` from per-token latents."""
        x, positions, single = self._batched(z, positions, self.cfg.d_z)
        b, w = x.shape[:2]
        if w == 0:
            return Tensor(np.zeros((w, self.cfg.d_t) if single else (b, 0, self.cfg.d_t), dtype=self.dtype))
        h = self.from_latent(x) + self.dec_pos(positions)
        for block in self.decoder:
            h = block(h)
        out = self.tok_out(self.dec_ln(h))
        return T.reshape(out, out.shape[1:]) if single else out

    def project(self, z_pooled: Tensor) -> Tensor:
        return self.proj2(T.relu(self.proj1(z_pooled)))


def encode_window(model: SaneModel, tokens, positions) -> np.ndarray:
    with no_grad():
        return model.encode(tokens, positions).data


def decode_window(model: SaneModel, z, positions) -> np.ndarray:
    with no_grad():
        return model.decode(z, positions).data


# -- losses --------------------------------------------------------------------
def loss_reconstruction(tokens, recon: Tensor, mask) -> Tensor:
    return T.mse_masked(recon, tokens, mask)


def nt_xent(p_i: Tensor, p_j: Tensor, tau: float) -> Tensor:
    """NT-Xent over 2B L2-normalised projections; positives are ``(i, i+B)``."""
    b = p_i.shape[0]
    if b < 2:
        raise ArgumentError("NT-Xent needs a batch of at least 2 (no negatives otherwise)")
    z = T.concat([p_i, p_j], axis=0)
    z = z / T.sqrt(T.sum_(T.mul(z, z), axis=1, keepdims=True) + 1e-12)
    sim = T.scale(T.matmul(z, T.transpose(z, None)), 1.0 / tau)
    self_mask = np.where(np.eye(2 * b, dtype=bool), -1e9, 0.0).astype(sim.dtype)
    labels = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return T.cross_entropy(sim + self_mask, labels)


def loss_contrastive(z_i: Tensor, z_j: Tensor, model: SaneModel, tau: float) -> Tensor:
    """Window latents are mean-pooled over tokens, projected, then compared with NT-Xent."""
    return nt_xent(model.project(T.mean(z_i, axis=1)), model.project(T.mean(z_j, axis=1)), tau)


# -- augmentation --------------------------------------------------------------
def augment_noise(tokens, mask, sigma, rng):
    """Gaussian noise on signal entries only."""
    if sigma == 0:
        return np.array(tokens, copy=True)
    return tokens + (sigma * rng.standard_normal(tokens.shape)).astype(tokens.dtype) * mask


def augment_permute(ckpt, d_t, rng):
    """Token sequence of a randomly permuted, functionally equivalent copy of ``ckpt``."""
    return tokenize(apply_permutation(ckpt, random_permutations(ckpt.arch, rng)), d_t)


def augment(kind, rng, tokens=None, mask=None, ckpt=None, sigma=0.0, d_t=None):
    if kind == "noise":
        return augment_noise(tokens, mask, sigma, rng)
    if kind == "permute":
        if ckpt is None:
            raise ArgumentError("permutation needs the whole model, not a window")
        return augment_permute(ckpt, d_t, rng)
    raise ArgumentError(f"unknown augmentation {kind!r}")


# -- training data -------------------------------------------------------------
@dataclass
class PreparedZoo:
    """Standardised token sequences per checkpoint plus permuted views (shared permutation sets)."""

    state: PreprocessState
    keys: dict  # split -> list of (model_id, epoch)
    anchor: dict  # key -> TokenSequence
    views: dict  # key -> list of TokenSequence (permuted)
    capacity: tuple


def prepare_zoo(zoo, cfg: SaneConfig, state: PreprocessState | None = None) -> PreparedZoo:
    m = zoo.manifest
    train_keys = [(e["model_id"], e["epoch"]) for e in m.rows("train")]
    if state is None:
        state = fit_preprocess([zoo.checkpoints[k] for k in train_keys], cfg.d_t, m.reference_id)
    keys = {s: [(e["model_id"], e["epoch"]) for e in m.rows(s)] for s in ("train", "val", "test")}
    anchor, views = {}, {}
    # One set of permutations shared by every model: permuted views of an
    # aligned zoo stay aligned with each other, frame by frame.
    rng = np.random.default_rng([cfg.seed, 11])
    perm_sets = [random_permutations(zoo.arch, rng) for _ in range(max(cfg.n_perms, 1))]
    max_pos = np.zeros(3, dtype=np.int64)
    for split in ("train", "val", "test"):
        for key in keys[split]:
            std = standardize(zoo.checkpoints[key], state)
            anchor[key] = tokenize(std, cfg.d_t)
            views[key] = [tokenize(apply_permutation(std, p), cfg.d_t) for p in perm_sets]
            max_pos = np.maximum(max_pos, anchor[key].positions.max(axis=0))
    capacity = cfg.capacity or tuple(int(2 * c) for c in max_pos)
    return PreparedZoo(state, keys, anchor, views, capacity)


def _epoch_batches(prep: PreparedZoo, cfg: SaneConfig, rng):
    items = []
    for key in prep.keys["train"]:
        seq = prep.anchor[key]
        for _ in range(windows_per_model(len(seq), cfg.ws)):
            start = int(rng.integers(0, max(1, len(seq) - cfg.ws + 1)))
            items.append((key, start, int(rng.integers(len(prep.views[key]))), min(cfg.ws, len(seq))))
    order = rng.permutation(len(items))
    buckets = {}
    for i in order:
        buckets.setdefault(items[i][3], []).append(items[i])
    batches = []
    for length in sorted(buckets):
        group = buckets[length]
        for s in range(0, len(group), cfg.batch_size):
            chunk = group[s:s + cfg.batch_size]
            if len(chunk) >= 2:
                batches.append(chunk)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _assemble(prep: PreparedZoo, batch, view_of=None):
    """Stack anchor and permuted windows: returns clean tokens, positions, masks (2B rows)."""
    toks, poss, masks = [], [], []
    for which in ("anchor", "view"):
        for key, start, vi, length in batch:
            seq = prep.anchor[key] if which == "anchor" else prep.views[key][vi if view_of is None else view_of]
            sl = slice(start, start + length)
            toks.append(seq.tokens[sl])
            poss.append(seq.positions[sl])
            masks.append(seq.mask[sl])
    return np.stack(toks), np.stack(poss), np.stack(masks)


def compute_loss(model: SaneModel, tokens, positions, mask, cfg: SaneConfig, rng, with_contrastive=True):
    """Composite loss of a stacked (anchor, view) batch; returns (loss, rec, con)."""
    noisy = augment_noise(tokens, mask, cfg.noise, rng) if rng is not None else tokens
    z = model.encode(noisy, positions)
    recon = model.decode(z, positions)
    rec = loss_reconstruction(tokens, recon, mask)
    if not with_contrastive:
        return T.scale(rec, 1.0 - cfg.gamma), rec, None
    b = tokens.shape[0] // 2
    con = loss_contrastive(z[:b], z[b:], model, cfg.tau)
    loss = T.scale(rec, 1.0 - cfg.gamma) + T.scale(con, cfg.gamma)
    return loss, rec, con


def evaluate_split(model: SaneModel, prep: PreparedZoo, cfg: SaneConfig, split="val"):
    """Deterministic reconstruction (tiled anchor windows) and contrastive loss on a split."""
    keys = prep.keys[split]
    if not keys:
        return float("nan"), float("nan")
    sq, count = 0.0, 0.0
    con_sum, con_n = 0.0, 0
    items = []
    for key in keys:
        n = len(prep.anchor[key])
        for s in range(0, n, cfg.ws):
            items.append((key, s, 0, min(cfg.ws, n - s)))
    buckets = {}
    for it in items:
        buckets.setdefault(it[3], []).append(it)
    with no_grad():
        for length in sorted(buckets):
            group = buckets[length]
            for s in range(0, len(group), cfg.batch_size):
                chunk = group[s:s + cfg.batch_size]
                tok, pos, mask = _assemble(prep, chunk, view_of=0)
                b = len(chunk)
                z = model.encode(tok, pos)
                recon = model.decode(z[:b], pos[:b])
                diff = (recon.data - tok[:b]) * mask[:b]
                sq += float((diff.astype(np.float64) ** 2).sum())
                count += float(mask[:b].sum())
                if b >= 2:
                    con_sum += nt_xent(model.project(T.mean(z[:b], axis=1)),
                                       model.project(T.mean(z[b:], axis=1)), cfg.tau).item() * b
                    con_n += b
    return sq / max(count, 1.0), (con_sum / con_n if con_n else float("nan"))


@dataclass
class PretrainResult:
    model: SaneModel
    state: PreprocessState
    log: list = field(default_factory=list)
    best_epoch: int = 0
    prepared: PreparedZoo | None = None


def pretrain(zoo, cfg: SaneConfig, prepared: PreparedZoo | None = None, callback=None) -> PretrainResult:
    """Train on windows of the zoo's training split; keep the best validation weights.

    Each epoch draws ``ceil(N/ws)`` random windows per training checkpoint.
    Early stopping on validation reconstruction loss with ``cfg.patience``.
    """
    prep = prepared or prepare_zoo(zoo, cfg)
    model = SaneModel(cfg, capacity=prep.capacity)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 13])
    steps_per_epoch = len(_epoch_batches(prep, cfg, np.random.default_rng([cfg.seed, 17])))
    total = max(1, steps_per_epoch * cfg.epochs)
    step = 0
    best = (math.inf, None, 0)
    history = []
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        rec_sum = con_sum = 0.0
        n_batches = 0
        for batch in _epoch_batches(prep, cfg, rng):
            lr = onecycle_lr(min(step, total), total, cfg.lr_max)
            tok, pos, mask = _assemble(prep, batch)
            opt.zero_grad()
            loss, rec, con = compute_loss(model, tok, pos, mask, cfg, rng)
            if not np.isfinite(loss.data):
                ids = sorted({k for k, *_ in batch})
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}; checkpoints {ids}")
            loss.backward()
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr)
            step += 1
            rec_sum += rec.item()
            con_sum += con.item()
            n_batches += 1
        model.eval()
        val_rec, val_con = evaluate_split(model, prep, cfg, "val")
        if prep.keys["val"] and not np.isfinite(val_rec):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "lr": lr if n_batches else cfg.lr_max,
               "train_rec": rec_sum / max(n_batches, 1), "train_con": con_sum / max(n_batches, 1),
               "val_rec": val_rec, "val_con": val_con}
        history.append(row)
        log.info("epoch %d: %s", epoch, row)
        if callback:
            callback(row)
        if val_rec < best[0]:
            best = (val_rec, {k: v.copy() for k, v in model.state_dict().items()}, epoch)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return PretrainResult(model, prep.state, history, best[2], prep)


# -- persistence ---------------------------------------------------------------
def save_sane(path, model: SaneModel, state: PreprocessState, extra: dict | None = None):
    meta = {"kind": "sane", "config": model.cfg.to_dict(), "capacity": list(model.capacity),
            "preprocess": state.to_dict(), "extra": extra or {}}
    return save_container(path, model.state_dict(), meta)


def load_sane(path):
    tensors, meta = load_container(path)
    if meta.get("kind") != "sane":
        raise FormatError(f"{path} does not hold a SANE model")
    cfg = SaneConfig.from_dict(meta["config"])
    model = SaneModel(cfg, capacity=tuple(meta["capacity"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, PreprocessState.from_dict(meta["preprocess"])


def write_log_csv(path, rows):
    import csv

    cols = ["epoch", "lr", "train_rec", "train_con", "val_rec", "val_con"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])
