"""
A small model zoo and weight matching
=====================================

Train a dozen tiny MLPs that differ only in their seed, then permute every
model's hidden units to line up with one reference model. The models compute
exactly the same functions afterwards; only the weight-space distances change.
"""

import numpy as np

from sane.align import align_zoo, vec_distance
from sane.zoo import TaskSpec, ZooConfig, mlp_arch, predict_logits, train_zoo

task = TaskSpec("two-rings", n_classes=2, input_shape=(2,), noise=0.1, seed=0)
zoo = train_zoo(mlp_arch(2, (16, 16), 2), task,
                ZooConfig(n_models=12, epochs=10, snapshot_epochs=(1, 10), n_train=256, n_val=128, n_test=256))

for row in zoo.manifest.rows("train")[:6]:
    print(f"model {row['model_id']:2d}  epoch {row['epoch']:2d}  test acc {row['test_acc']:.3f}")

# %% align everything to the first training model
ref = zoo.manifest.model_ids("train")[0]
aligned = align_zoo(zoo, ref)

others = [m for m in zoo.manifest.model_ids() if m != ref]
before = np.array([vec_distance(zoo.get(ref), zoo.get(m)) for m in others])
after = np.array([vec_distance(zoo.get(ref), aligned.get(m)) for m in others])
print(f"mean squared distance to the reference: {before.mean():.2f} -> {after.mean():.2f}")

# the permuted models are the same functions
x = np.random.default_rng(0).normal(size=(100, 2)).astype(np.float32)
dev = max(np.abs(predict_logits(zoo.get(m), x) - predict_logits(aligned.get(m), x)).max() for m in others)
print(f"largest logit change caused by alignment: {dev:.2e}")
