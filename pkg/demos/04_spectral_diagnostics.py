"""
Spectral diagnostics of trained weights
=======================================

Eigenvalues of W^T W per layer, the power-law exponent of their tail and the
log spectral norm, tracked across training epochs of a small CNN zoo.
"""

import numpy as np

from sane.analyze import esd, power_law_alpha, spectral_report
from sane.zoo import TaskSpec, ZooConfig, cnn_arch, train_zoo

# a sanity check first: a synthetic Pareto sample with exponent 3
u = np.random.default_rng(0).uniform(size=10_000)
print("fitted exponent on Pareto(3):", round(power_law_alpha((1 - u) ** -0.5).alpha, 3))

task = TaskSpec("proc-digits", 4, (1, 8, 8), 0.1, 0)
zoo = train_zoo(cnn_arch((8, 8), 4), task, ZooConfig(n_models=8, epochs=10, snapshot_epochs=(1, 10),
                                                      n_train=256, n_val=128, n_test=256))

for epoch in (1, 10):
    reps = [spectral_report(c, min_tail=5) for (m, e), c in zoo.checkpoints.items() if e == epoch]
    accs = [r["test_acc"] for r in zoo.manifest.rows() if r["epoch"] == epoch]
    lsn = np.mean([r.means["log_spectral_norm"] for r in reps])
    print(f"epoch {epoch:2d}: mean test acc {np.mean(accs):.3f}, mean log10 lambda_max {lsn:.3f}")

ck = zoo.get(zoo.manifest.model_ids()[0])
w = ck.row_matrix(len(ck.arch.layers) - 1)[:, :-1]
print("last-layer eigenvalues:", np.round(esd(w), 3))
