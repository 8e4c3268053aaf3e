"""
Autoencoding weights and probing the latents
============================================

Pretrain a small weight autoencoder on an aligned zoo, embed every checkpoint
and check how well a linear probe on the mean latent predicts test accuracy
and training epoch. A probe on plain weight statistics is the baseline.
"""

import numpy as np

from sane.align import align_zoo
from sane.analyze import probe_features, weight_statistics
from sane.autoencoder import SaneConfig, pretrain
from sane.embed import aggregate_mean, embed_zoo, layer_spread
from sane.zoo import TaskSpec, ZooConfig, mlp_arch, train_zoo

task = TaskSpec("two-rings", 2, (2,), 0.1, 0)
zoo = train_zoo(mlp_arch(), task, ZooConfig(n_models=24, epochs=15, snapshot_epochs=(1, 3, 8, 15),
                                             n_train=256, n_val=128, n_test=256))
zoo = align_zoo(zoo, zoo.manifest.model_ids("train")[0])

cfg = SaneConfig(d_z=8, d_model=48, enc_layers=1, dec_layers=1, heads=2, ws=8, epochs=25, lr_max=3e-3)
run = pretrain(zoo, cfg, callback=lambda r: print(f"epoch {r['epoch']:2d}  val L_rec {r['val_rec']:.4f}"))
print("best epoch", run.best_epoch)

# %% one latent per token; the mean over tokens is the model-level feature
embs = embed_zoo(run.model, run.state, zoo)
key = next(iter(embs))
print("latent sequence of one checkpoint:", embs[key].z.shape)
print("per-layer spread:", {l: round(v, 3) for l, v in layer_spread(embs[key]).items()})

sources = {"mean latent": {k: aggregate_mean(e) for k, e in embs.items()},
           "weight stats": {k: weight_statistics(c) for k, c in zoo.checkpoints.items()}}
for target in ("acc", "ep", "ggap"):
    line = "  ".join(f"{name}: {probe_features(f, zoo.manifest, target, name).r2:6.3f}" for name, f in sources.items())
    print(f"R2 {target:4s}  {line}")
