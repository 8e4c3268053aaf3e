import numpy as np
import pytest

from sane.zoo import TaskSpec, ZooConfig, cnn_arch, init_checkpoint, mlp_arch, train_zoo

DESK_ARCHS = {
    "mlp": mlp_arch(),
    "cnn": cnn_arch(),
    "cnn_nobn": cnn_arch(batchnorm=False),
    "mlp_wide": mlp_arch(3, (8, 5, 7), 4),
}


def random_checkpoint(arch, seed):
    rng = np.random.default_rng(seed)
    ckpt = init_checkpoint(arch, rng)
    for k in ckpt.buffers:
        ckpt.buffers[k] = rng.uniform(0.5, 2.0, size=ckpt.buffers[k].shape).astype(np.float32)
    return ckpt


@pytest.fixture(scope="session")
def small_mlp_zoo():
    return train_zoo(mlp_arch(), TaskSpec("two-rings", 2, (2,), 0.15, 0),
                     ZooConfig(n_models=10, epochs=5, snapshot_epochs=(1, 5), n_train=256, n_val=128, n_test=128))


TINY_SANE = dict(d_t=17, d_z=16, d_model=32, enc_layers=1, dec_layers=1, heads=2, ws=8,
                 batch_size=16, n_perms=2, seed=0)


@pytest.fixture(scope="session")
def small_aligned_zoo(small_mlp_zoo):
    from sane.align import align_zoo

    return align_zoo(small_mlp_zoo, small_mlp_zoo.manifest.model_ids("train")[0])


@pytest.fixture(scope="session")
def tiny_sane(small_aligned_zoo):
    from sane.autoencoder import SaneConfig, pretrain

    return pretrain(small_aligned_zoo, SaneConfig(epochs=30, lr_max=3e-3, **TINY_SANE))


def run_pipeline(root, config="smoke"):
    """Every CLI subcommand in order; returns the run directories by step name."""
    from sane.cli import main

    root.mkdir(parents=True, exist_ok=True)
    d = {k: root / k for k in ("zoo", "align", "pretrain", "embed", "probe", "analyze", "sample", "finetune", "report")}
    common = ["--config", config, "--workers", "1"]
    steps = [
        ["zoo-gen", "--out", d["zoo"]],
        ["align", "--out", d["align"], "--zoo", d["zoo"]],
        ["pretrain", "--out", d["pretrain"], "--zoo", d["align"]],
        ["embed", "--out", d["embed"], "--zoo", d["align"], "--sane", d["pretrain"]],
        ["probe", "--out", d["probe"], "--zoo", d["align"], "--embeddings", d["embed"]],
        ["analyze", "--out", d["analyze"], "--zoo", d["zoo"], "--plots"],
        ["sample", "--out", d["sample"], "--zoo", d["align"], "--sane", d["pretrain"]],
        ["finetune", "--out", d["finetune"], "--checkpoints", d["sample"] / "samples"],
        ["report", "--out", d["report"], *(d[k] for k in ("pretrain", "probe", "analyze", "sample", "finetune"))],
    ]
    for step in steps:
        argv = [str(a) for a in step[:1] + common + step[1:]]
        code = main(argv)
        assert code == 0, f"{step[0]} exited {code}"
    return d


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("smoke_a"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
