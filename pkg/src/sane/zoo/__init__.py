"""Desk-scale model zoos: synthetic tasks, base architectures, training and storage."""

from .models import (
    Architecture,
    BaseNet,
    LayerSpec,
    ModelCheckpoint,
    cnn_arch,
    evaluate,
    init_checkpoint,
    mlp_arch,
    predict_logits,
    train_model,
)
from .population import (
    Zoo,
    ZooConfig,
    ZooManifest,
    assign_splits,
    load_checkpoint,
    load_zoo,
    save_checkpoint,
    save_zoo,
    train_zoo,
)
from .tasks import Dataset, TaskSpec, generate_task, task_splits

__all__ = [
    "Architecture", "BaseNet", "Dataset", "LayerSpec", "ModelCheckpoint", "TaskSpec", "Zoo", "ZooConfig",
    "ZooManifest", "assign_splits", "cnn_arch", "evaluate", "generate_task", "init_checkpoint",
    "load_checkpoint", "load_zoo", "mlp_arch", "predict_logits", "save_checkpoint", "save_zoo",
    "task_splits", "train_model", "train_zoo",
]
