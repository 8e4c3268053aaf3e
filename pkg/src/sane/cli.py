"""Command-line pipeline: ``sane <subcommand> --config CFG --out RUN_DIR [inputs]``.

Every subcommand writes into a fresh run directory: its artifacts, a copy of
the resolved config, and ``report.json`` carrying content hashes of all
inputs. Reports contain no timestamps or absolute paths, so reruns with the
same config and inputs are byte-identical.

Exit codes: 0 success, 2 bad config or arguments, 3 missing input artifact,
4 malformed artifact, 5 training diverged, 1 anything else. Failures print
one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .container import dumps_json, load_container
from .errors import ArgumentError, ConfigError, DataError, FormatError, SaneError, TrainingDivergedError

CACHE_ENV = "SANE_CACHE_DIR"
REPORT = "report.json"


class MissingInputError(SaneError):
    pass


EXIT_CODES = [(ConfigError, 2), (ArgumentError, 2), (MissingInputError, 3), (DataError, 3),
              (FileNotFoundError, 3), (FormatError, 4), (TrainingDivergedError, 5)]


# -- provenance ----------------------------------------------------------------
def content_hash(path) -> str:
    """SHA-256 over a file's bytes, or over ``relative path + file hash`` lines of a directory tree."""
    path = Path(path)
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f"{f.relative_to(path).as_posix()}\0{hashlib.sha256(f.read_bytes()).hexdigest()}\n".encode())
    return h.hexdigest()


def _input(path, what, inner=None) -> Path:
    """Existing input path; a run directory is resolved to its ``inner`` artifact."""
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {path}")
    if inner and (p / inner).is_dir():
        return p / inner
    return p


def _fresh(out) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise ArgumentError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, command: str, cfg: dict, inputs: dict, results: dict):
    (out / "resolved_config.json").write_text(dumps_json(cfg), encoding="utf-8")
    report = {"command": command, "config": cfg,
              "inputs": {k: content_hash(v) for k, v in sorted(inputs.items())}, "results": results}
    (out / REPORT).write_text(dumps_json(_jsonable(report)), encoding="utf-8")
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _splits(cfg):
    from .zoo import task_splits

    z = cfg["zoo"]
    return task_splits(config_mod.build_task(cfg), z["n_train"], z["n_val"], z["n_test"])


# -- subcommands ---------------------------------------------------------------
def cmd_zoo_gen(args, cfg):
    from .zoo import load_zoo, save_zoo, train_zoo

    out = _fresh(args.out)
    arch, task, zc = config_mod.build_arch(cfg), config_mod.build_task(cfg), config_mod.zoo_config(cfg)
    key = hashlib.sha256(dumps_json({"zoo": cfg["zoo"], "seed": cfg["seed"]}).encode()).hexdigest()[:16]
    cache = os.environ.get(CACHE_ENV)
    cached = Path(cache) / f"zoo-{key}" if cache else None
    if cached is not None and (cached / "zoo.json").exists():
        zoo = load_zoo(cached)
    else:
        zoo = train_zoo(arch, task, zc, workers=args.workers)
        if cached is not None:
            save_zoo(cached, zoo)
    save_zoo(out / "zoo", zoo)
    m = zoo.manifest
    per_epoch = {}
    for e in m.rows():
        per_epoch.setdefault(e["epoch"], []).append(e["test_acc"])
    results = {"n_models": len(m.model_ids()), "excluded": m.excluded,
               "splits": {s: len(m.model_ids(s)) for s in ("train", "val", "test")},
               "mean_test_acc_by_epoch": {str(k): float(np.mean(v)) for k, v in sorted(per_epoch.items())}}
    return _finish(out, "zoo-gen", cfg, {}, results)


def cmd_align(args, cfg):
    from .align import align_zoo, vec_distance
    from .tokenizer import fit_preprocess
    from .zoo import load_zoo, save_zoo

    src = _input(args.zoo, "zoo", "zoo")
    out = _fresh(args.out)
    zoo = load_zoo(src)
    a = cfg["align"]
    ref = a["reference"] if a["reference"] is not None else zoo.manifest.model_ids("train")[0]
    state = None
    if a["standardized"]:
        state = fit_preprocess([c for (mid, _), c in zoo.checkpoints.items() if zoo.manifest.split_of(mid) == "train"],
                               cfg["sane"]["d_t"], ref)
    aligned = align_zoo(zoo, ref, state, a["max_sweeps"])
    save_zoo(out / "zoo", aligned)
    others = [mid for mid in zoo.manifest.model_ids() if mid != ref]
    before = [vec_distance(zoo.get(ref), zoo.get(mid)) for mid in others]
    after = [vec_distance(zoo.get(ref), aligned.get(mid)) for mid in others]
    results = {"reference_id": ref, "mean_distance_before": float(np.mean(before)) if others else 0.0,
               "mean_distance_after": float(np.mean(after)) if others else 0.0,
               "fraction_decreased": float(np.mean([b < a0 for a0, b in zip(before, after)])) if others else 0.0}
    return _finish(out, "align", cfg, {"zoo": src}, results)


def cmd_pretrain(args, cfg):
    from .autoencoder import pretrain, save_sane, write_log_csv
    from .zoo import load_zoo

    src = _input(args.zoo, "zoo", "zoo")
    out = _fresh(args.out)
    zoo = load_zoo(src)
    res = pretrain(zoo, config_mod.sane_config(cfg))
    save_sane(out / "sane", res.model, res.state, {"best_epoch": res.best_epoch})
    write_log_csv(out / "train_log.csv", res.log)
    results = {"best_epoch": res.best_epoch, "epochs_run": len(res.log),
               "best_val_rec": min(r["val_rec"] for r in res.log), "first_val_rec": res.log[0]["val_rec"],
               "capacity": list(res.model.capacity), "log": res.log}
    return _finish(out, "pretrain", cfg, {"zoo": src}, results)


def _load_sane(path):
    from .autoencoder import load_sane

    return load_sane(path)


def cmd_embed(args, cfg):
    from .embed import embed_zoo, export_embeddings
    from .zoo import load_zoo

    sane_path = _input(args.sane, "SANE model", "sane")
    zoo_path = _input(args.zoo, "zoo", "zoo")
    out = _fresh(args.out)
    model, state = _load_sane(sane_path)
    zoo = load_zoo(zoo_path)
    e = cfg["embed"]
    embs = embed_zoo(model, state, zoo, chunk=e["chunk"], halo=e["halo"])
    export_embeddings(out / "embeddings", embs, {"d_z": model.cfg.d_z})
    results = {"n_embedded": len(embs), "d_z": model.cfg.d_z,
               "chunk": e["chunk"] or model.cfg.ws, "halo": e["halo"] if e["halo"] is not None else model.cfg.ws // 4}
    return _finish(out, "embed", cfg, {"sane": sane_path, "zoo": zoo_path}, results)


def load_embeddings(path) -> dict:
    from .embed import EmbeddingSequence

    tensors, meta = load_container(path)
    if meta.get("kind") != "embeddings":
        raise FormatError(f"{path} does not hold embeddings")
    out = {}
    for mid, ep in meta["keys"]:
        out[(mid, ep)] = EmbeddingSequence(tensors[f"m{mid}_e{ep}/z"], tensors[f"m{mid}_e{ep}/positions"], mid)
    return out


def cmd_probe(args, cfg):
    from .analyze import probe_features, weight_statistics
    from .embed import aggregate_mean
    from .zoo import load_zoo

    emb_path = _input(args.embeddings, "embeddings", "embeddings")
    zoo_path = _input(args.zoo, "zoo", "zoo")
    out = _fresh(args.out)
    embs = load_embeddings(emb_path)
    zoo = load_zoo(zoo_path)
    sources = {"sane": {k: aggregate_mean(e) for k, e in embs.items()},
               "weight_stats": {k: weight_statistics(c) for k, c in zoo.checkpoints.items()}}
    probes = []
    for target in cfg["probe"]["targets"]:
        for name, feats in sources.items():
            probes.append(probe_features(feats, zoo.manifest, target, name, cfg["probe"]["lambda"]).to_dict())
    with open(out / "probes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "source", "r2", "ok"])
        for p in probes:
            w.writerow([p["target"], p["source"], repr(p["r2"]), p["ok"]])
    return _finish(out, "probe", cfg, {"embeddings": emb_path, "zoo": zoo_path}, {"probes": probes})


def cmd_analyze(args, cfg):
    from .analyze import plot_layer_feature, plot_scatter, spectral_report
    from .zoo import load_zoo

    zoo_path = _input(args.zoo, "zoo", "zoo")
    out = _fresh(args.out)
    zoo = load_zoo(zoo_path)
    rows, per_model = [], {}
    for e in zoo.manifest.rows():
        key = (e["model_id"], e["epoch"])
        rep = spectral_report(zoo.checkpoints[key], cfg["analyze"]["min_tail"])
        per_model[key] = (rep, e["test_acc"])
        for r in rep.layers:
            rows.append([e["model_id"], e["epoch"], r["layer"], repr(r["lambda_max"]), repr(r["log_spectral_norm"]),
                         repr(r["alpha"]), repr(r["weighted_alpha"]), r["fit_ok"]])
    with open(out / "spectral.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "epoch", "layer", "lambda_max", "log_spectral_norm", "alpha", "weighted_alpha", "fit_ok"])
        w.writerows(rows)
    acc = np.array([a for _, a in per_model.values()])
    correlations = {}
    for metric in ("log_spectral_norm", "alpha", "weighted_alpha"):
        vals = np.array([r.means[metric] for r, _ in per_model.values()])
        ok = np.isfinite(vals)
        if ok.sum() > 2 and np.ptp(vals[ok]) > 0 and np.ptp(acc[ok]) > 0:
            correlations[metric] = float(np.corrcoef(vals[ok], acc[ok])[0, 1])
        else:
            correlations[metric] = None
    if args.plots:
        plot_layer_feature(out / "log_spectral_norm_by_layer.svg",
                           {k: {r["layer"]: r["log_spectral_norm"] for r in rep.layers} for k, (rep, _) in per_model.items()},
                           "log10 lambda_max")
        plot_scatter(out / "log_spectral_norm_vs_acc.svg", [r.means["log_spectral_norm"] for r, _ in per_model.values()],
                     acc, "mean log10 lambda_max", "test accuracy")
    results = {"n_checkpoints": len(per_model), "correlation_with_test_acc": correlations}
    return _finish(out, "analyze", cfg, {"zoo": zoo_path}, results)


def cmd_sample(args, cfg):
    from .embed import embed_checkpoint
    from .sample import accuracy, bootstrap, ensemble_eval, sampling_report
    from .zoo import load_zoo, save_checkpoint

    sane_path = _input(args.sane, "SANE model", "sane")
    zoo_path = _input(args.zoo, "zoo", "zoo")
    out = _fresh(args.out)
    model, state = _load_sane(sane_path)
    zoo = load_zoo(zoo_path)
    p = cfg["prompts"]
    ids = zoo.manifest.model_ids(p["split"])[:p["count"]]
    prompts = [embed_checkpoint(model, state, zoo.get(mid, p["epoch"]), cfg["embed"]["chunk"], cfg["embed"]["halo"])
               for mid in ids]
    scfg = config_mod.sample_config(cfg)
    data = _splits(cfg)
    cond = data["train"] if zoo.arch.has_batchnorm else None
    res = bootstrap(model, state, zoo.arch, prompts, scfg, data["val"], cond, np.random.default_rng([cfg["seed"], 31]))
    paths = []
    for r, c in enumerate(res.kept):
        rel = f"samples/rank_{r:02d}"
        save_checkpoint(out / rel, c.checkpoint)
        paths.append(rel)
    test_acc = [accuracy(c.checkpoint, data["test"]) for c in res.kept]
    extra = {"prompt_ids": ids, "test_accuracy": test_acc,
             "ensemble_test_accuracy": ensemble_eval([c.checkpoint for c in res.kept], data["test"])
             if len(res.kept) > 1 else None}
    return _finish(out, "sample", cfg, {"sane": sane_path, "zoo": zoo_path}, sampling_report(scfg, res, paths, extra))


def _checkpoint_dirs(path: Path):
    if (path / "manifest.json").exists():
        return [path]
    dirs = sorted(d for d in path.rglob("*") if d.is_dir() and (d / "manifest.json").exists())
    if not dirs:
        raise MissingInputError(f"no checkpoints under {path}")
    return dirs


def cmd_finetune(args, cfg):
    from .sample import finetune, from_scratch
    from .zoo import load_checkpoint

    src = _input(args.checkpoints, "checkpoints")
    out = _fresh(args.out)
    data = _splits(cfg)
    f = cfg["finetune"]
    runs = []
    for i, d in enumerate(_checkpoint_dirs(src)):
        ck = load_checkpoint(d)
        r = finetune(ck, data["train"], data["test"], f["epochs"], np.random.default_rng([cfg["seed"], 41, i]),
                     f["lr"], f["batch_size"])
        runs.append({"checkpoint": d.relative_to(src).as_posix() if d != src else ".", "trajectory": r.trajectory,
                     "diverged": r.diverged})
    arch = config_mod.build_arch(cfg)
    scratch = [from_scratch(arch, data["train"], data["test"], f["epochs"], cfg["seed"] * 1000 + s, f["lr"],
                            f["batch_size"]).trajectory for s in range(f["scratch_seeds"])]
    final = [r["trajectory"][-1][1] for r in runs if r["trajectory"]]
    results = {"finetuned": runs, "scratch": scratch,
               "mean_final_finetuned": float(np.mean(final)) if final else None,
               "mean_final_scratch": float(np.mean([t[-1][1] for t in scratch])) if scratch else None}
    return _finish(out, "finetune", cfg, {"checkpoints": src}, results)


def cmd_report(args, cfg):
    from .analyze import plot_layer_feature

    out = _fresh(args.out)
    runs = {}
    inputs = {}
    for i, r in enumerate(args.runs):
        p = _input(Path(r) / REPORT, "run report")
        rep = json.loads(p.read_text(encoding="utf-8"))
        name = f"{i:02d}_{rep['command']}"
        runs[name] = {"results": rep["results"], "inputs": rep["inputs"]}
        inputs[name] = p
        csv_path = Path(r) / "embeddings" / "embeddings.csv"
        if args.plots and csv_path.exists():
            with open(csv_path, encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            spread = {(row["model_id"], row["epoch"]): {int(k[len("spread_l"):]): float(v)
                                                         for k, v in row.items() if k.startswith("spread_l")}
                      for row in rows}
            plot_layer_feature(out / f"{name}_layer_spread.svg", spread, "token spread")
    return _finish(out, "report", cfg, inputs, {"runs": runs})


COMMANDS = {
    "zoo-gen": (cmd_zoo_gen, "train a population of base models"),
    "align": (cmd_align, "permutation-align a zoo to a reference model"),
    "pretrain": (cmd_pretrain, "train the weight autoencoder on an aligned zoo"),
    "embed": (cmd_embed, "embed every checkpoint of a zoo"),
    "probe": (cmd_probe, "linear probes on embeddings and weight statistics"),
    "analyze": (cmd_analyze, "spectral diagnostics of zoo weights"),
    "sample": (cmd_sample, "generate models by sampling the latent space"),
    "finetune": (cmd_finetune, "fine-tune checkpoints and compare to training from scratch"),
    "report": (cmd_report, "collect run reports into one summary"),
}


def build_parser():
    from .zoo.population import default_workers

    parser = argparse.ArgumentParser(prog="sane", description="Weight-space autoencoder pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default="desk",
                       help="JSON config file or bundled config name (%s)" % ", ".join(config_mod.bundled_names()))
        p.add_argument("--out", required=True, help="fresh run directory")
        p.add_argument("--workers", type=int, default=default_workers(), help="worker processes (default: all cores)")
        if name in ("align", "pretrain", "embed", "probe", "analyze", "sample"):
            p.add_argument("--zoo", required=True, help="zoo directory (zoo.json + checkpoints)")
        if name in ("embed", "sample"):
            p.add_argument("--sane", required=True, help="trained autoencoder directory")
        if name == "probe":
            p.add_argument("--embeddings", required=True, help="embed run directory or embeddings container")
        if name == "finetune":
            p.add_argument("--checkpoints", required=True, help="checkpoint directory, or a directory of them")
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories to summarise")
        if name in ("analyze", "report"):
            p.add_argument("--plots", action="store_true", help="also write SVG figures")
    return parser


def _fail(exc, code):
    line = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    if getattr(exc, "key_path", None):
        line["key_path"] = exc.key_path
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg_path = args.config
        if not Path(cfg_path).exists() and cfg_path not in config_mod.bundled_names():
            raise MissingInputError(f"config not found: {cfg_path}")
        cfg = config_mod.load(cfg_path)
        COMMANDS[args.command][0](args, cfg)
    except Exception as exc:  # mapped to exit codes, reported as one line
        for kind, code in EXIT_CODES:
            if isinstance(exc, kind):
                return _fail(exc, code)
        if args.verbose:
            raise
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
