"""Command-line driver for the full protocol.

Everything lives under one ``--workdir``::

    config.json            resolved config written by gen-data
    manifest.json          append-only record of every stage
    data/<role>/           datasets (phantomgen on-disk format)
    models/<role>/         original / oracle: model.ckpt, log.csv, lineage.json, timing.json
    runs/<name>/           unlearning runs: per-epoch checkpoints, log.csv, lineage.json, timing.json
    reports/               eval.json, ablation.json and the emitted report files

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import copy
import csv
import fcntl
import hashlib
import io
import json
import math
import os
import platform
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from . import evalkit as ek
from . import phantomgen as pg
from . import reconnet as rn
from . import unlearn as ul
from .errors import ConfigError, DataError, ReconUnlearnError

CONFIG_VERSION = 1
DEFAULT_SEED = 1234
ENV_SEED = "UNLEARN_RECON_SEED"
ROLES = ("retain", "forget", "retain_test", "forget_test")
TABLE1_ORDER = ("G", "oracle", "zero-filled", "FT", "FullFT", "GA_L1", "NL", "GA_L1_FT", "NL_FT")
ABLATION_METHODS = ("FT", "NL_FT", "GA_L1_FT")
ABLATION_FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.50, 1.00)

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "seed": DEFAULT_SEED,
    "corpus": asdict(pg.CorpusConfig()),
    "model": {"n_cascades": 3, "channels": 8},
    "train": {"epochs": 30, "lr": 1e-3, "batch_size": 4},
    "unlearn": {
        "budget_fraction": 0.10,
        "retain_fraction": 0.10,
        "gamma": ul.DEFAULT_GAMMA,
        "lam": ul.DEFAULT_LAMBDA,
        "lr": 1e-3,
        "batch_size": 4,
    },
    "ablation": {"methods": list(ABLATION_METHODS), "fractions": list(ABLATION_FRACTIONS)},
}

METHOD_ALIASES = {
    "ft": "FT", "fullft": "FullFT", "full_ft": "FullFT", "ga_l1": "GA_L1", "nl": "NL",
    "ga_l1_ft": "GA_L1_FT", "nl_ft": "NL_FT",
}


# -- config -------------------------------------------------------------------

def _merge(defaults: dict, given: dict, where="config") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(defaults[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with the JSON file at ``path``; unknown keys are errors."""
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object")
        if given.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {given.get('version')}")
    cfg = _merge(DEFAULT_CONFIG, given)
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}") from exc
    corpus_cfg(cfg).validate()
    arch(cfg).validate()
    train_cfg(cfg).validate()
    for m in cfg["ablation"]["methods"]:
        _method(m)
    for f in cfg["ablation"]["fractions"]:
        if not 0 < f <= 1:
            raise ConfigError(f"ablation fraction {f} outside (0, 1]")
    return cfg


def corpus_cfg(cfg) -> pg.CorpusConfig:
    return pg.CorpusConfig(**cfg["corpus"])


def arch(cfg) -> rn.ArchConfig:
    return rn.ArchConfig(**cfg["model"])


def train_cfg(cfg) -> ul.TrainConfig:
    return ul.TrainConfig(seed=cfg["seed"], **cfg["train"])


def unlearn_cfg(cfg, method, retain_fraction=None, budget=None, gamma=None, lam=None) -> ul.UnlearnConfig:
    u = cfg["unlearn"]
    uses_gamma = method in ("GA_L1", "GA_L1_FT")
    uses_lam = method in ("NL", "NL_FT")
    out = ul.UnlearnConfig(
        method=method,
        gamma=(u["gamma"] if gamma is None else gamma) if uses_gamma else None,
        lam=(u["lam"] if lam is None else lam) if uses_lam else None,
        retain_fraction=1.0 if method == "FullFT" else (u["retain_fraction"] if retain_fraction is None
                                                         else retain_fraction),
        budget_fraction=u["budget_fraction"] if budget is None else budget,
        seed=cfg["seed"],
        lr=u["lr"],
        batch_size=u["batch_size"],
    )
    out.validate()
    return out


def _method(name: str) -> str:
    if name in ul.METHODS:
        return name
    key = name.lower().replace("-", "_")
    if key not in METHOD_ALIASES:
        raise ConfigError(f"unknown method {name!r}; expected one of {sorted(METHOD_ALIASES)}")
    return METHOD_ALIASES[key]


# -- workdir ------------------------------------------------------------------

class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.json")
    manifest = property(lambda self: self.root / "manifest.json")
    reports = property(lambda self: self.root / "reports")
    runs = property(lambda self: self.root / "runs")

    def data(self, role):
        return self.root / "data" / role

    def model(self, role):
        return self.root / "models" / role

    def rel(self, path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def load_config(self, override=None) -> dict:
        if override is not None:
            return load_config(override)
        if self.config.exists():
            return load_config(self.config)
        return load_config(None)

    def dataset(self, role) -> pg.Dataset:
        return pg.read_dataset(self.data(role))

    def append_manifest(self, entry: dict):
        self.root.mkdir(parents=True, exist_ok=True)
        entry = {"tool_version": __version__, "host": host_description(), **entry}
        # ablation workers append concurrently
        with open(self.root / ".manifest.lock", "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            if self.manifest.exists():
                try:
                    doc = json.loads(self.manifest.read_text(encoding="utf-8"))
                except json.JSONDecodeError as exc:
                    raise DataError(f"corrupt manifest {self.manifest}: {exc}") from exc
            else:
                doc = {"format": 1, "entries": []}
            doc["entries"].append(entry)
            _write_json(self.manifest, doc)


def host_description() -> str:
    return f"{platform.system()} {platform.machine()} python {platform.python_version()} torch {torch.__version__}"


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"missing {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt {path}: {exc}") from exc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = ek.EPOCH_HEADER.split(",")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fields])
    return buf.getvalue()


def _load_checkpoint(path) -> rn.ModelParams:
    try:
        return rn.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint {path}") from exc


def load_model(wd: Workdir, role: str) -> ul.TrainedModel:
    d = wd.model(role)
    params = _load_checkpoint(d / "model.ckpt")
    lineage = _read_json(d / "lineage.json")
    timing = _read_json(d / "timing.json")
    return ul.TrainedModel(params, role, lineage, [], [], timing["wall_seconds"])


# -- commands -----------------------------------------------------------------

def cmd_gen_data(wd: Workdir, args) -> int:
    cfg = wd.load_config(args.config)
    existing = [r for r in ROLES if wd.data(r).exists()]
    if existing and not args.force:
        raise ReconUnlearnError(f"{wd.data(existing[0])} already exists; pass --force to overwrite")
    corpus = pg.build_corpus(corpus_cfg(cfg), cfg["seed"])
    checksums = {}
    for role in ROLES:
        if wd.data(role).exists():
            shutil.rmtree(wd.data(role))
        pg.write_dataset(corpus[role], wd.data(role))
        checksums[role] = pg.dataset_checksum(wd.data(role))
    _write_json(wd.config, cfg)
    wd.append_manifest({"stage": "gen-data", "master_seed": cfg["seed"], "config_hash": ul.config_hash(cfg),
                        "datasets": {r: {"path": wd.rel(wd.data(r)), "checksum": c} for r, c in checksums.items()}})
    for role in ROLES:
        print(f"{role}: {len(corpus[role])} samples, checksum {checksums[role]}")
    return 0


def _dataset_entries(wd, roles):
    return {r: {"path": wd.rel(wd.data(r)), "checksum": pg.dataset_checksum(wd.data(r))} for r in roles}


def cmd_train(wd: Workdir, args) -> int:
    cfg = wd.load_config(args.config)
    roles = ["retain", "forget"] if args.role == "original" else ["retain"]
    data = [wd.dataset(r) for r in roles]
    init = rn.init_params(arch(cfg), cfg["seed"])
    tcfg = train_cfg(cfg)
    model = ul.train(init, data, tcfg, args.role)
    out = wd.model(args.role)
    out.mkdir(parents=True, exist_ok=True)
    rn.save_checkpoint(model.params, out / "model.ckpt")
    (out / "log.csv").write_text(_log_csv(model.log), encoding="utf-8")
    _write_json(out / "lineage.json", model.lineage)
    _write_json(out / "timing.json", {"wall_seconds": model.wall_seconds, "epochs": tcfg.epochs})
    cid = ul.checkpoint_id(model.params)
    wd.append_manifest({"stage": "train", "role": args.role, "master_seed": cfg["seed"],
                        "checkpoint": {"id": cid, "path": wd.rel(out / "model.ckpt")},
                        "config_hash": model.lineage["config_hash"], "datasets": _dataset_entries(wd, roles),
                        "wall_seconds": model.wall_seconds})
    final = model.log[-1]["loss"] if model.log else float("nan")
    print(f"trained {args.role} ({tcfg.epochs} epochs, {model.wall_seconds:.1f}s, final loss {final:.5f}) -> {cid}")
    return 0


def run_name(ucfg: ul.UnlearnConfig) -> str:
    return f"{ucfg.method}-f{ucfg.retain_fraction:g}-{ul.config_hash(ucfg)[:8]}"


def _completed(run_dir: Path, ucfg) -> bool:
    """True when ``run_dir`` holds a finished run of exactly this config."""
    try:
        lineage = json.loads((run_dir / "lineage.json").read_text(encoding="utf-8"))
        rn.load_checkpoint(run_dir / "model.ckpt")
    except (OSError, ValueError, DataError):
        return False
    return lineage.get("config_hash") == ul.config_hash(ucfg)


def _split_datasets(wd: Workdir, require_ua=False):
    splits = {}
    for label, role in ek.SPLITS.items():
        if wd.data(role).exists():
            splits[label] = wd.dataset(role)
        elif label != "UA" or require_ua:
            raise DataError(f"missing {role} dataset for split {label}")
    return splits


def execute_unlearn(workdir, ucfg: ul.UnlearnConfig, quiet=False) -> dict:
    """Run (or reuse) one unlearning cell and return its summary."""
    wd = Workdir(workdir)
    run_dir = wd.runs / run_name(ucfg)
    if _completed(run_dir, ucfg):
        if not quiet:
            print(f"{run_dir.name}: already complete, skipped")
        return {"name": run_dir.name, "skipped": True}
    if run_dir.exists():
        print(f"{run_dir.name}: incomplete or corrupt prior run, recomputing", file=sys.stderr)
        shutil.rmtree(run_dir)
    G = load_model(wd, "original")
    d_r, d_f = wd.dataset("retain"), wd.dataset("forget")
    splits = {k: v for k, v in _split_datasets(wd).items() if k in ("BTA", "KTA")}

    def evaluator(params):
        recs = ek.evaluate(params, splits, "epoch")
        return [{"split": s, "psnr_mean": r.psnr_mean, "psnr_std": r.psnr_std,
                 "ssim_mean": r.ssim_mean, "ssim_std": r.ssim_std} for s, r in recs.items()]

    model = ul.run_method(G, ucfg, d_r, d_f, evaluator)
    tmp = run_dir.with_name(run_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    epochs = [r["epoch"] for r in model.log if r["split"] == "BTA"] or list(range(1, len(model.checkpoints) + 1))
    ckpts = {}
    for epoch, params in zip(epochs, model.checkpoints):
        name = f"epoch_{epoch:03d}.ckpt"
        rn.save_checkpoint(params, tmp / name)
        ckpts[name] = ul.checkpoint_id(params)
    rn.save_checkpoint(model.params, tmp / "model.ckpt")
    (tmp / "log.csv").write_text(_log_csv(model.log), encoding="utf-8")
    _write_json(tmp / "config.json", asdict(ucfg))
    _write_json(tmp / "timing.json", {"wall_seconds": model.wall_seconds, "epochs": model.epochs_run})
    _write_json(tmp / "lineage.json", model.lineage)  # written last: marks completion
    tmp.rename(run_dir)
    cid = ul.checkpoint_id(model.params)
    wd.append_manifest({"stage": "unlearn", "run": run_dir.name, "method": ucfg.method,
                        "retain_fraction": ucfg.retain_fraction, "master_seed": ucfg.seed,
                        "parent": model.lineage["parent"], "config_hash": model.lineage["config_hash"],
                        "checkpoint": {"id": cid, "path": wd.rel(run_dir / "model.ckpt")},
                        "epoch_checkpoints": ckpts, "wall_seconds": model.wall_seconds})
    if not quiet:
        print(f"{run_dir.name}: {model.epochs_run} epochs in {model.wall_seconds:.2f}s -> {cid}")
    return {"name": run_dir.name, "skipped": False}


def cmd_unlearn(wd: Workdir, args) -> int:
    cfg = wd.load_config(args.config)
    method = _method(args.method)
    if method == "FT" and args.retain_fraction == 1.0:
        method = "FullFT"
    ucfg = unlearn_cfg(cfg, method, args.retain_fraction, args.budget, args.gamma, args.lam)
    if not (wd.model("original") / "model.ckpt").exists():
        raise DataError("no original model G; run `train --role original` first")
    execute_unlearn(wd.root, ucfg)
    return 0


def _ablate_cell(workdir, ucfg):
    torch.set_num_threads(1)
    return execute_unlearn(workdir, ucfg, quiet=True)


def cmd_ablate(wd: Workdir, args) -> int:
    cfg = wd.load_config(args.config)
    if not (wd.model("original") / "model.ckpt").exists():
        raise DataError("no original model G; run `train --role original` first")
    cells = [unlearn_cfg(cfg, _method(m), retain_fraction=f)
             for m in cfg["ablation"]["methods"] for f in cfg["ablation"]["fractions"]]
    if args.jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_cell, [wd.root] * len(cells), cells))
    else:
        results = [execute_unlearn(wd.root, c, quiet=True) for c in cells]
    skipped = sum(r["skipped"] for r in results)
    print(f"ablation: {len(cells)} cells, {len(cells) - skipped} run, {skipped} reused")

    splits = _split_datasets(wd)
    n_retain = len(wd.dataset("retain"))
    table3, points, time_points = {}, {}, {}
    for ucfg in cells:
        run_dir = wd.runs / run_name(ucfg)
        params = _load_checkpoint(run_dir / "model.ckpt")
        recs = ek.evaluate(params, splits, ul.checkpoint_id(params))
        key = f"{ucfg.retain_fraction:g}"
        table3.setdefault(key, {})[ucfg.method] = {s: asdict(r) for s, r in recs.items()}
        used = math.ceil(round(ucfg.retain_fraction * n_retain, 9))
        points.setdefault(ucfg.method, []).append([used, recs["BTA"].psnr_mean])
        secs = _read_json(run_dir / "timing.json")["wall_seconds"]
        time_points.setdefault(ucfg.method, []).append([secs, recs["BTA"].psnr_mean])
    _write_json(wd.reports / "ablation.json", {"table3": table3, "fig3_points": points,
                                               "x": "retain samples used", "y": "BTA PSNR"})
    _write_json(wd.reports / "ablation_timing.json", {"fig3_points": time_points,
                                                      "x": "wall seconds", "y": "BTA PSNR"})
    for m, pts in points.items():
        try:
            fit = ek.pareto_fit(pts)
            print(f"{m}: BTA = {fit.a:.3e} n^2 + {fit.b:.3e} n + {fit.c:.3f}")
        except ValueError as exc:
            print(f"{m}: no fit ({exc})")
    wd.append_manifest({"stage": "ablate", "master_seed": cfg["seed"],
                        "runs": [run_name(c) for c in cells],
                        "report": {"path": wd.rel(wd.reports / "ablation.json"),
                                   "sha256": _sha256(wd.reports / "ablation.json")}})
    return 0


def _headline_runs(wd: Workdir, cfg) -> dict:
    """Table-1 label -> run directory for the configured retain fraction."""
    out = {}
    for method in ul.METHODS:
        ucfg = unlearn_cfg(cfg, method)
        run_dir = wd.runs / run_name(ucfg)
        if (run_dir / "lineage.json").exists():
            out[method] = run_dir
    return out


def cmd_eval(wd: Workdir, args) -> int:
    cfg = wd.load_config(args.config)
    splits = _split_datasets(wd)
    models = {}
    for role, label in (("original", "G"), ("oracle", "oracle")):
        if (wd.model(role) / "model.ckpt").exists():
            models[label] = (_load_checkpoint(wd.model(role) / "model.ckpt"), wd.model(role))
    models["zero-filled"] = (rn.ModelParams(rn.ArchConfig(0, arch(cfg).channels), []), None)
    for label, run_dir in _headline_runs(wd, cfg).items():
        models[label] = (_load_checkpoint(run_dir / "model.ckpt"), run_dir)
    if args.models:
        unknown = set(args.models) - set(models)
        if unknown:
            raise DataError(f"no checkpoint for: {', '.join(sorted(unknown))}")
        models = {k: v for k, v in models.items() if k in args.models}
    records, sources = {}, {}
    for label, (params, where) in models.items():
        cid = ul.checkpoint_id(params)
        records[label] = {s: asdict(r) for s, r in ek.evaluate(params, splits, cid).items()}
        sources[label] = {"checkpoint": cid, "path": None if where is None else wd.rel(where)}
    doc = {"records": records, "sources": sources,
           "datasets": _dataset_entries(wd, [ek.SPLITS[s] for s in splits])}
    if "UA" not in splits:
        doc["warnings"] = ["forget set missing: UA columns omitted"]
        print("warning: forget set missing, UA columns omitted", file=sys.stderr)
    _write_json(wd.reports / "eval.json", doc)
    for label in records:
        cells = "  ".join(f"{s} {r['psnr_mean']:7.3f} dB / {r['ssim_mean']:.4f}" for s, r in records[label].items())
        print(f"{label:<12} {cells}")
    wd.append_manifest({"stage": "eval", "models": sources,
                        "report": {"path": wd.rel(wd.reports / "eval.json"),
                                   "sha256": _sha256(wd.reports / "eval.json")}})
    return 0


def _records(d: dict) -> dict:
    return {s: ek.MetricsRecord(**r) for s, r in d.items()}


def _read_log(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (r[k] if k == "split" else (int(r[k]) if k == "epoch" else
                                                       (float(r[k]) if r[k] != "" else None))) for k in r})
    return rows


def cmd_report(wd: Workdir, args) -> int:
    cfg = wd.load_config(args.config)
    ev = _read_json(wd.reports / "eval.json")
    order = [m for m in TABLE1_ORDER if m in ev["records"]] + sorted(set(ev["records"]) - set(TABLE1_ORDER))
    table1 = {m: _records(ev["records"][m]) for m in order}
    table2 = {}
    for method, run_dir in _headline_runs(wd, cfg).items():
        rows = [r for r in _read_log(run_dir / "log.csv") if r["split"] in ("BTA", "KTA")]
        if rows:
            table2[method] = rows
    table3, fig3 = {}, {}
    abl_path = wd.reports / "ablation.json"
    if abl_path.exists():
        abl = _read_json(abl_path)
        table3 = {f: {m: _records(d) for m, d in md.items()} for f, md in abl["table3"].items()}
        fig3 = abl["fig3_points"]
    rep = ek.build_report(table1, table2, table3, fig3, required=args.require or ())
    rep.warnings.extend(ev.get("warnings", []))
    if not table3:
        rep.warnings.append("no ablation results: table 3 and fig3 omitted")
    formats = tuple(args.formats)
    written = ek.emit_report(rep, wd.reports, formats)

    rte = []
    for label in table1:
        src = ev["sources"].get(label, {}).get("path")
        if src and (wd.root / src / "timing.json").exists():
            t = _read_json(wd.root / src / "timing.json")
            rte.append(ek.measure_rte(label, t["wall_seconds"], t["epochs"]))
    t_path = wd.reports / "ablation_timing.json"
    time_points = _read_json(t_path)["fig3_points"] if t_path.exists() else {}
    written += ek.emit_timing_report(table1, rte, time_points, wd.reports)
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    wd.append_manifest({"stage": "report", "files": {wd.rel(p): _sha256(p) for p in written}})
    for p in written:
        print(wd.rel(p))
    return 0


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reconunlearn", description="Machine unlearning for MRI reconstruction on synthetic phantoms.")
    p.add_argument("--workdir", default="work", help="directory holding all inputs and outputs (default: ./work)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, helptext):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="JSON config (default: <workdir>/config.json, else built-in defaults)")
        return sp

    g = add("gen-data", "generate the four phantom datasets")
    g.add_argument("--force", action="store_true", help="overwrite existing datasets")

    t = add("train", "train the original model G or the oracle")
    t.add_argument("--role", choices=("original", "oracle"), required=True)

    u = add("unlearn", "run one unlearning method on G")
    u.add_argument("--method", required=True, help="ft, fullft, ga_l1, nl, ga_l1_ft or nl_ft")
    u.add_argument("--retain-fraction", type=float, help="share of D_r used for fine-tuning")
    u.add_argument("--budget", type=float, help="unlearning epochs as a fraction of training epochs")
    u.add_argument("--gamma", type=float, help="l1 weight for GA methods")
    u.add_argument("--lam", type=float, help="label-noise scale for NL methods")

    a = add("ablate", "retain-fraction grid for FT, NL_FT and GA_L1_FT")
    a.add_argument("--jobs", type=int, default=1, help="grid cells run concurrently")

    e = add("eval", "evaluate G, the oracle and the headline unlearning runs")
    e.add_argument("--models", nargs="*", help="restrict to these labels")

    r = add("report", "emit the report files")
    r.add_argument("--formats", nargs="+", choices=("csv", "json"), default=["csv", "json"])
    r.add_argument("--require", nargs="*", help="fail unless these methods were evaluated")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "unlearn": cmd_unlearn,
            "ablate": cmd_ablate, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else 1
    wd = Workdir(args.workdir)
    try:
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        return COMMANDS[args.command](wd, args)
    except ReconUnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
