import json

import pytest

from sane import config as config_mod
from sane.cli import content_hash, main
from sane.errors import ConfigError


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_bundled_configs_resolve():
    names = config_mod.bundled_names()
    assert {"desk", "desk-cnn", "smoke"} <= set(names)
    for n in names:
        cfg = config_mod.load(n)
        config_mod.build_arch(cfg)
        config_mod.sane_config(cfg)


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError) as exc:
        config_mod.resolve({"sane": {"d_zz": 3}})
    assert exc.value.key_path == "sane.d_zz"


def test_wrong_type_rejected():
    with pytest.raises(ConfigError) as exc:
        config_mod.resolve({"zoo": {"n_models": "many"}})
    assert exc.value.key_path == "zoo.n_models"


def test_invalid_value_rejected():
    with pytest.raises(ConfigError):
        config_mod.resolve({"sane": {"gamma": 1.5}})


def test_snapshot_beyond_epochs_rejected():
    with pytest.raises(ConfigError) as exc:
        config_mod.resolve({"zoo": {"epochs": 3, "snapshot_epochs": [1, 5]}})
    assert exc.value.key_path == "zoo.snapshot_epochs"


def test_exit_code_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sane": {"d_zz": 3}}))
    assert main(["zoo-gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    line = _err(capsys)
    assert line["exit_code"] == 2 and line["key_path"] == "sane.d_zz"


def test_exit_code_invalid_json(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{nope")
    assert main(["zoo-gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_exit_code_missing_config(tmp_path, capsys):
    assert main(["zoo-gen", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 3


def test_exit_code_missing_input(tmp_path, capsys):
    assert main(["align", "--config", "smoke", "--out", str(tmp_path / "o"), "--zoo", str(tmp_path / "nozoo")]) == 3
    assert _err(capsys)["error"] == "MissingInputError"


def test_exit_code_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2


def test_exit_code_nonempty_out(tmp_path, capsys):
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "x").write_text("x")
    assert main(["zoo-gen", "--config", "smoke", "--out", str(tmp_path / "o")]) == 2


def test_exit_code_malformed_artifact(tmp_path, capsys):
    bad = tmp_path / "emb"
    bad.mkdir()
    (bad / "tensors.bin").write_bytes(b"\0garbage")
    (bad / "manifest.json").write_text("{}")
    code = main(["probe", "--config", "smoke", "--out", str(tmp_path / "o"), "--zoo", str(tmp_path),
                 "--embeddings", str(bad)])
    assert code in (3, 4)


def test_content_hash_tree(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "f.txt").write_text("one")
    (tmp_path / "g.txt").write_text("two")
    h1 = content_hash(tmp_path)
    assert h1 == content_hash(tmp_path)
    (tmp_path / "a" / "f.txt").write_text("uno")
    assert content_hash(tmp_path) != h1
    assert content_hash(tmp_path / "g.txt") == content_hash(tmp_path / "g.txt")


def test_pipeline_reports(smoke_run):
    for step, d in smoke_run.items():
        rep = json.loads((d / "report.json").read_text())
        assert rep["command"] == ("zoo-gen" if step == "zoo" else step)
        assert (d / "resolved_config.json").exists()
        text = (d / "report.json").read_text()
        assert str(d.parent) not in text
    probes = json.loads((smoke_run["probe"] / "report.json").read_text())["results"]["probes"]
    assert {(p["target"], p["source"]) for p in probes} >= {("acc", "sane"), ("acc", "weight_stats")}
    sample = json.loads((smoke_run["sample"] / "report.json").read_text())["results"]
    assert len(list((smoke_run["sample"] / "samples").iterdir())) == 2
    assert sample
    assert list(smoke_run["analyze"].glob("*.svg"))


def test_report_hashes_inputs(smoke_run):
    rep = json.loads((smoke_run["align"] / "report.json").read_text())
    assert rep["inputs"]["zoo"] == content_hash(smoke_run["zoo"] / "zoo")


def test_zoo_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("SANE_CACHE_DIR", str(tmp_path / "cache"))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"zoo": {"n_models": 4, "epochs": 2, "snapshot_epochs": [2], "n_train": 64,
                                       "n_val": 32, "n_test": 32}}))
    assert main(["zoo-gen", "--config", str(cfg), "--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert list((tmp_path / "cache").iterdir())
    assert main(["zoo-gen", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "1"]) == 0
    assert content_hash(tmp_path / "a") == content_hash(tmp_path / "b")
