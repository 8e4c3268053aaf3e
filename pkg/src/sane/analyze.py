"""Spectral diagnostics of weight matrices, weight statistics and linear probes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError

EIG_FLOOR = -1e-8
QUANTILES = (0.0, 25.0, 50.0, 75.0, 100.0)


def layer_matrix(m, i) -> np.ndarray:
    """Weights of learned layer ``i`` as ``c_out x c_r`` (conv kernels flattened, bias excluded)."""
    w = m.tensors[f"{i}.weight"]
    return w.reshape(w.shape[0], -1)


# -- spectra -------------------------------------------------------------------
def esd(w) -> np.ndarray:
    """Eigenvalues of ``W^T W`` (squared singular values), descending.

    Computed from the smaller Gram matrix; round-off negatives are clipped to 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ArgumentError("esd needs a non-empty 2-D matrix")
    gram = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    eig = np.linalg.eigvalsh(gram)[::-1]
    if eig[-1] < EIG_FLOOR * max(1.0, eig[0]):
        raise ArgumentError(f"Gram matrix has negative eigenvalue {eig[-1]}")
    return np.maximum(eig, 0.0)


def log_spectral_norm(w) -> float:
    """``log10`` of the largest ESD eigenvalue (squared spectral norm)."""
    lam = esd(w)[0]
    if lam <= 0:
        raise ArgumentError("log spectral norm undefined for a zero matrix")
    return math.log10(lam)


@dataclass
class PowerLawFit:
    alpha: float
    xmin: float
    ks: float
    n_tail: int
    ok: bool


def _ks(tail, alpha, xmin):
    n = len(tail)
    fitted = 1.0 - (tail / xmin) ** (1.0 - alpha)
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(n) / n
    return float(max(np.abs(emp_hi - fitted).max(), np.abs(emp_lo - fitted).max()))


def power_law_alpha(eigs, xmin=None, min_tail: int = 10) -> PowerLawFit:
    """Continuous power-law fit ``p(x) ~ x^-alpha`` to the tail ``x >= xmin``.

    ``alpha`` is the maximum-likelihood (Hill) estimate. Without ``xmin`` every
    eigenvalue leaving at least ``min_tail`` tail points is tried and the one
    with the smallest Kolmogorov-Smirnov distance wins. Too few usable points
    give ``ok=False`` and NaN fields instead of an exception.
    """
    x = np.sort(np.asarray(eigs, dtype=np.float64))
    x = x[x > 0]
    fail = PowerLawFit(float("nan"), float("nan"), float("nan"), 0, False)
    if xmin is not None:
        tail = x[x >= xmin]
        if len(tail) < min_tail:
            return fail
        logs = np.log(tail / xmin).sum()
        if logs <= 0:
            return fail
        alpha = 1.0 + len(tail) / logs
        return PowerLawFit(float(alpha), float(xmin), _ks(tail, alpha, xmin), len(tail), True)
    n = len(x)
    if n < min_tail:
        return fail
    logx = np.log(x)
    suffix = np.cumsum(logx[::-1])[::-1]  # sum of log x[j] for j >= i
    best = None
    for i in range(n - min_tail + 1):
        if i and x[i] == x[i - 1]:
            continue
        k = n - i
        s = suffix[i] - k * logx[i]
        if s <= 0:
            continue
        alpha = 1.0 + k / s
        ks = _ks(x[i:], alpha, x[i])
        if best is None or ks < best.ks:
            best = PowerLawFit(float(alpha), float(x[i]), ks, k, True)
    return best or fail


def weighted_alpha(alpha: float, lam_max: float) -> float:
    return alpha * math.log10(lam_max)


@dataclass
class SpectralReport:
    layers: list = field(default_factory=list)  # dicts per learned layer
    means: dict = field(default_factory=dict)

    def to_dict(self):
        return {"layers": self.layers, "means": self.means}


def spectral_report(m, min_tail: int = 10, keep_eigenvalues: bool = False) -> SpectralReport:
    rows = []
    for i in m.arch.learned_indices:
        w = layer_matrix(m, i)
        ev = esd(w)
        lam = float(ev[0])
        fit = power_law_alpha(ev, min_tail=min_tail)
        row = {"layer": i, "lambda_max": lam,
               "log_spectral_norm": math.log10(lam) if lam > 0 else float("nan"),
               "alpha": fit.alpha, "xmin": fit.xmin, "ks": fit.ks, "fit_ok": fit.ok,
               "weighted_alpha": weighted_alpha(fit.alpha, lam) if fit.ok and lam > 0 else float("nan")}
        if keep_eigenvalues:
            row["eigenvalues"] = ev.tolist()
        rows.append(row)
    means = {}
    for key in ("log_spectral_norm", "alpha", "weighted_alpha"):
        vals = [r[key] for r in rows if np.isfinite(r[key])]
        means[key] = float(np.mean(vals)) if vals else float("nan")
    return SpectralReport(rows, means)


# -- weight statistics ---------------------------------------------------------
def percentile_sorted(s: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile of an ascending array."""
    pos = q / 100.0 * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    t = pos - lo
    d = s[hi] - s[lo]
    # interpolate from the nearer end so q and 100 - q are symmetric to the last bit
    return float(s[hi] - d * (1.0 - t) if t >= 0.5 else s[lo] + d * t)


def weight_statistics(m) -> np.ndarray:
    """Per learned layer: mean, std and the 0/25/50/75/100th percentiles of weights and bias."""
    feats = []
    for i in m.arch.learned_indices:
        v = m.row_matrix(i).astype(np.float64).ravel()
        s = np.sort(v)
        feats += [float(v.mean()), float(v.std())] + [percentile_sorted(s, q) for q in QUANTILES]
    return np.asarray(feats)


# -- probes --------------------------------------------------------------------
@dataclass
class ProbeReport:
    target: str
    source: str
    r2: float
    ok: bool
    lam: float
    coef: np.ndarray
    intercept: float
    n_train: int
    n_test: int
    reason: str = ""

    def to_dict(self):
        return {"target": self.target, "source": self.source, "r2": self.r2, "ok": self.ok, "lambda": self.lam,
                "n_train": self.n_train, "n_test": self.n_test, "reason": self.reason}


def ridge_fit(x, y, lam):
    xtx = x.T @ x + lam * np.eye(x.shape[1])
    return np.linalg.solve(xtx, x.T @ y)


def r2_score(y, pred) -> float:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(((y - pred) ** 2).sum()) / ss_tot


def linear_probe(x_train, y_train, x_test, y_test, lam=1e-3, target="", source="",
                 train_ids=None, test_ids=None) -> ProbeReport:
    """Ridge regression on standardised features; R^2 is reported on the test rows only."""
    x_train = np.asarray(x_train, dtype=np.float64)
    x_test = np.asarray(x_test, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_test = np.asarray(y_test, dtype=np.float64)
    if train_ids is not None and test_ids is not None and set(train_ids) & set(test_ids):
        raise DataError("probe train and test rows share model ids")
    if len(x_train) < 10:
        raise ArgumentError("linear probe needs at least 10 training rows")
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd == 0] = 1.0
    xs, xt = (x_train - mu) / sd, (x_test - mu) / sd
    y_mu = y_train.mean()
    n_tr, n_te = len(x_train), len(x_test)
    if np.ptp(y_train) == 0 or np.ptp(y_test) == 0:
        return ProbeReport(target, source, float("nan"), False, lam, np.zeros(x_train.shape[1]), y_mu,
                           n_tr, n_te, "constant target")
    coef = ridge_fit(xs - xs.mean(axis=0), y_train - y_mu, lam)
    intercept = y_mu - float(xs.mean(axis=0) @ coef)
    pred = xt @ coef + intercept
    return ProbeReport(target, source, r2_score(y_test, pred), True, lam, coef, intercept, n_tr, n_te)


TARGETS = {"acc": "test_acc", "ep": "epoch", "ggap": "ggap"}


def probe_rows(manifest, split, target):
    """Keys and target values of one split, in manifest order."""
    if target not in TARGETS:
        raise ArgumentError(f"unknown probe target {target!r}; expected one of {sorted(TARGETS)}")
    rows = manifest.rows(split)
    return [(r["model_id"], r["epoch"]) for r in rows], np.array([float(r[TARGETS[target]]) for r in rows])


def probe_features(features: dict, manifest, target, source="", lam=1e-3) -> ProbeReport:
    """Probe from a ``(model_id, epoch) -> feature vector`` mapping using the manifest splits."""
    k_tr, y_tr = probe_rows(manifest, "train", target)
    k_te, y_te = probe_rows(manifest, "test", target)
    x_tr = np.stack([features[k] for k in k_tr])
    x_te = np.stack([features[k] for k in k_te])
    return linear_probe(x_tr, y_tr, x_te, y_te, lam, target, source,
                        train_ids=[k[0] for k in k_tr], test_ids=[k[0] for k in k_te])


# -- plots ---------------------------------------------------------------------
def plot_layer_feature(path, values_by_model: dict, ylabel: str):
    """Feature per layer index, one line per model, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sane"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in sorted(values_by_model):
        vals = values_by_model[key]
        layers = sorted(vals)
        ax.plot(layers, [vals[l] for l in layers], lw=0.8, alpha=0.6)
    ax.set_xlabel("layer")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_scatter(path, x, y, xlabel: str, ylabel: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sane"
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.scatter(x, y, s=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
