"""
Command-line experiment runner.

Subcommands::

    fedfac gen-data --config CFG --out data.csv
    fedfac train    --config CFG --data data.csv --out RUN_DIR [--workers N]
    fedfac analyze  --run RUN_DIR --mode {entropy,gram,new-client} [--config CFG]
    fedfac compare  RUN_DIR RUN_DIR [...] --out cmp.csv
    fedfac compare  --sweep SWEEP_CFG --data data.csv --out SWEEP_DIR

Configuration files are flat ``key = value`` text with ``#`` comments. Every
key is listed in :data:`CONFIG_KEYS`; unknown keys are rejected. A sweep file
additionally holds ``sweep.<key> = v1, v2, ...`` lines whose cartesian product
is run in order.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .analysis import neuron_entropy_report, write_entropy_csv
from .datagen import (
    ClientDataset,
    SynthConfig,
    dirichlet_partition,
    federate_pool,
    generate_synthetic_federation,
    iid_partition,
    read_federation_csv,
    write_federation_csv,
)
from .facsplit import FactorConfig
from .federation import (
    FederationConfig,
    predict_new_client_ensemble,
    predict_new_client_localtrain,
    run_experiment,
    write_clients_csv,
    write_metrics_csv,
    write_partition_json,
    write_stability_csv,
)
from .model import gram_matrices, load_checkpoint, ntk_limit_estimate, save_checkpoint
from .numerics import ContractError, derive_rng

log = logging.getLogger("fedfac")


class ConfigError(ContractError):
    """A configuration key is unknown, malformed or out of range."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


def _bool(text: str) -> bool:
    s = text.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple:
    s = text.strip()
    if not s:
        return ()
    return tuple(int(v) for v in s.replace(";", ",").split(","))


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (parser, default)
CONFIG_KEYS: Dict[str, tuple] = {
    "seed": (int, 0),
    # data generation
    "data.source": (str, "synthetic"),
    "synth.C": (int, 100),
    "synth.d": (int, 100),
    "synth.m": (int, 200),
    "synth.alpha": (float, 0.4),
    "synth.p": (float, 0.5),
    "synth.n_train": (int, 200),
    "synth.n_test": (int, 50),
    "synth.noise_sd": (float, 1.0),
    "synth.center_labels": (_bool, True),
    "pool.path": (str, ""),
    "pool.C": (int, 10),
    "pool.partition": (str, "dirichlet"),
    "pool.pi": (float, 0.5),
    "pool.train_ratio": (float, 0.8),
    # federation
    "algorithm": (str, "fedfac_dynamic"),
    "T": (int, 30),
    "clients_per_round": (_opt_int, None),
    "participation_rate": (float, 1.0),
    "local_epochs": (int, 1),
    "batch_size": (int, 50),
    "eta_l": (float, 0.1),
    "eta_g": (float, 1.0),
    "split_layers": (_int_list, (1,)),
    "weighting": (str, "sample_size"),
    "init_local_epochs": (int, 5),
    "fa_input": (str, "weights"),
    "workers": (int, 1),
    "holdout": (int, 0),
    "true_partition": (str, ""),
    "model.hidden_widths": (_int_list, (200,)),
    "model.loss": (str, "binary_cross_entropy"),
    "model.init_scale": (float, 0.1),
    "model.scale_by_sqrt_width": (_bool, True),
    "model.train_output_weights": (_bool, False),
    "factor.kappa": (float, 0.9),
    "factor.tau": (str, "q0.5"),
    "factor.max_iter": (int, 100),
    "factor.tol": (float, 1e-4),
    # analysis
    "analyze.k": (int, 3),
    "analyze.statistic": (str, "mean"),
    "analyze.layer": (int, 1),
    "analyze.epochs": (int, 20),
    "analyze.eta_l": (float, 0.1),
    "analyze.gram_clients": (int, 5),
    "analyze.gram_points": (int, 4),
    "analyze.mc_samples": (int, 4000),
}

CHOICES = {
    "data.source": ("synthetic", "pool"),
    "pool.partition": ("dirichlet", "iid"),
    "algorithm": ("fedavg", "fedsplit_true", "fedfac_static", "fedfac_dynamic", "random_split", "local_only"),
    "weighting": ("sample_size", "uniform"),
    "fa_input": ("weights", "deltas"),
    "model.loss": ("quadratic", "binary_cross_entropy"),
    "analyze.statistic": ("mean", "median"),
}


def parse_config_text(text: str, source: str = "<config>", allow_sweep: bool = False) -> tuple:
    """Parse ``key = value`` lines into ``(values, sweep_grid)``; raw strings, no defaults."""
    values: Dict[str, str] = {}
    sweep: Dict[str, List[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if allow_sweep and key.startswith("sweep."):
            target = key[len("sweep."):]
            if target not in CONFIG_KEYS:
                raise ConfigError(key, "unknown key")
            sweep[target] = [v.strip() for v in value.split(",") if v.strip()]
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown key")
        values[key] = value
    return values, sweep


def resolve_config(raw: Dict[str, str]) -> Dict[str, object]:
    """Apply defaults and type conversion; errors name the offending key."""
    out = {}
    for key, (conv, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        else:
            out[key] = default
        if key in CHOICES and out[key] not in CHOICES[key]:
            raise ConfigError(key, f"must be one of {CHOICES[key]}, got {out[key]!r}")
    return out


def load_config(path: Optional[str], allow_sweep: bool = False):
    text = Path(path).read_text() if path else ""
    raw, sweep = parse_config_text(text, str(path), allow_sweep)
    return (resolve_config(raw), sweep) if allow_sweep else resolve_config(raw)


def synth_config(cfg: dict) -> SynthConfig:
    sc = SynthConfig(
        C=cfg["synth.C"], d=cfg["synth.d"], m=cfg["synth.m"], alpha=cfg["synth.alpha"], p=cfg["synth.p"],
        n_train=cfg["synth.n_train"], n_test=cfg["synth.n_test"], noise_sd=cfg["synth.noise_sd"],
        seed=cfg["seed"], center_labels=cfg["synth.center_labels"],
    )
    _checked(sc.validate, "synth")
    return sc


def federation_config(cfg: dict) -> FederationConfig:
    try:
        factor = FactorConfig(kappa=cfg["factor.kappa"], tau=cfg["factor.tau"],
                              max_iter=cfg["factor.max_iter"], tol=cfg["factor.tol"])
    except ContractError as exc:
        key = "factor.tau" if "threshold" in str(exc) or "quantile" in str(exc) else "factor.kappa"
        raise ConfigError(key, str(exc)) from None
    fc = FederationConfig(
        algorithm=cfg["algorithm"], T=cfg["T"], clients_per_round=cfg["clients_per_round"],
        participation_rate=cfg["participation_rate"], local_epochs=cfg["local_epochs"],
        batch_size=cfg["batch_size"], eta_l=cfg["eta_l"], eta_g=cfg["eta_g"],
        split_layers=cfg["split_layers"], factor=factor, weighting=cfg["weighting"], seed=cfg["seed"],
        init_local_epochs=cfg["init_local_epochs"], fa_input=cfg["fa_input"], workers=cfg["workers"],
        hidden_widths=cfg["model.hidden_widths"], loss=cfg["model.loss"], init_scale=cfg["model.init_scale"],
        scale_by_sqrt_width=cfg["model.scale_by_sqrt_width"],
        train_output_weights=cfg["model.train_output_weights"],
    )
    _checked(fc.validate, "")
    return fc


def _checked(fn, prefix: str):
    try:
        fn()
    except ContractError as exc:
        msg = str(exc)
        name = msg.split(" ", 1)[0]
        key = f"{prefix}.{name}" if prefix else name
        raise ConfigError(key, msg) from None


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(path, command: str, cfg: dict, outputs: Dict[str, Path], started: str, extra=None) -> None:
    """Record config, version, digests; re-hash every output to verify it."""
    digests = {}
    for name, p in sorted(outputs.items()):
        p = Path(p)
        if not p.is_file():
            raise OSError(f"expected output {p} was not written")
        digests[name] = {"path": str(p), "sha256": sha256_file(p)}
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg.get("seed"),
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "started": started,
        "finished": _now(),
        "outputs": digests,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name, entry in digests.items():
        if sha256_file(entry["path"]) != entry["sha256"]:
            raise OSError(f"digest mismatch for {entry['path']}")


# ---------------------------------------------------------------------------
# data bundles kept inside run directories
# ---------------------------------------------------------------------------


def save_data_npz(path, clients: Sequence[ClientDataset]) -> None:
    arrays = {}
    for ds in clients:
        c = ds.client_id
        arrays[f"c{c}_Xtr"], arrays[f"c{c}_ytr"] = ds.X_train, ds.y_train
        arrays[f"c{c}_Xte"], arrays[f"c{c}_yte"] = ds.X_test, ds.y_test
    arrays["ids"] = np.array([ds.client_id for ds in clients], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_data_npz(path) -> List[ClientDataset]:
    with np.load(path) as z:
        return [
            ClientDataset(int(c), z[f"c{c}_Xtr"], z[f"c{c}_ytr"], z[f"c{c}_Xte"], z[f"c{c}_yte"])
            for c in z["ids"]
        ]


def _write_config_echo(path, cfg: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        for k in sorted(cfg):
            v = cfg[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k} = {'none' if v is None else v}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(config_path: Optional[str], out_path: str) -> int:
    started = _now()
    cfg = load_config(config_path)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = {"data": out}
    if cfg["data.source"] == "synthetic":
        clients, truth = generate_synthetic_federation(synth_config(cfg))
        truth_path = out.with_name(out.name + ".truth.json")
        with open(truth_path, "w", newline="\n") as fh:
            json.dump({"1": [int(v) for v in truth.shared_mask]}, fh)
            fh.write("\n")
        outputs["true_partition"] = truth_path
    else:
        if not cfg["pool.path"]:
            raise ConfigError("pool.path", "required when data.source = pool")
        pool = np.loadtxt(cfg["pool.path"], delimiter=",", skiprows=1, ndmin=2)
        y, X = pool[:, 0], pool[:, 1:]
        rng = derive_rng(cfg["seed"], [("partition", 0)])
        if cfg["pool.partition"] == "dirichlet":
            try:
                parts = dirichlet_partition(y, cfg["pool.C"], cfg["pool.pi"], rng)
            except ContractError as exc:
                raise ConfigError("pool.pi" if "pi" in str(exc) else "pool.C", str(exc)) from None
        else:
            parts = iid_partition(len(y), cfg["pool.C"], rng)
        clients = federate_pool(X, y, [p for p in parts if len(p) >= 2], cfg["pool.train_ratio"], cfg["seed"])
    write_federation_csv(out, clients)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", cfg, outputs, started)
    return 0


def _split_holdout(clients: List[ClientDataset], holdout: int):
    if holdout < 0 or holdout >= len(clients):
        raise ConfigError("holdout", f"must lie in [0, {len(clients) - 1}]")
    cut = len(clients) - holdout
    return clients[:cut], clients[cut:]


def run_training(cfg: dict, clients: List[ClientDataset], out_dir: Path, true_path: Optional[str] = None) -> Dict[str, Path]:
    fc = federation_config(cfg)
    train, held = _split_holdout(clients, cfg["holdout"])
    truth = None
    tp = cfg["true_partition"] or true_path
    if fc.algorithm == "fedsplit_true":
        if not tp:
            raise ConfigError("true_partition", "required by algorithm fedsplit_true")
        with open(tp) as fh:
            truth = {int(k): np.asarray(v, dtype=bool) for k, v in json.load(fh).items()}
    result = run_experiment(fc, train, true_partition=truth)
    out_dir.mkdir(parents=True, exist_ok=True)
    ck = out_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    outputs = {
        "metrics": out_dir / "metrics.csv",
        "clients": out_dir / "clients.csv",
        "stability": out_dir / "stability.csv",
        "partition": out_dir / "partition.json",
        "config": out_dir / "config.txt",
        "data": out_dir / "data.npz",
        "server": ck / "server.json",
    }
    write_metrics_csv(outputs["metrics"], result)
    write_clients_csv(outputs["clients"], result)
    write_stability_csv(outputs["stability"], result)
    write_partition_json(outputs["partition"], result)
    _write_config_echo(outputs["config"], cfg)
    save_data_npz(outputs["data"], clients)
    save_checkpoint(outputs["server"], result.model, result.server)
    for cid, params in sorted(result.clients.items()):
        p = ck / f"client_{cid}.json"
        save_checkpoint(p, result.model, params)
        outputs[f"client_{cid}"] = p
    with open(out_dir / "heldout.json", "w", newline="\n") as fh:
        json.dump({"train": [d.client_id for d in train], "heldout": [d.client_id for d in held]}, fh)
        fh.write("\n")
    outputs["heldout"] = out_dir / "heldout.json"
    return outputs


def cmd_train(config_path: Optional[str], data_path: str, out_dir: str, workers: Optional[int] = None) -> int:
    started = _now()
    cfg = load_config(config_path)
    if workers is not None:
        cfg["workers"] = int(workers)
    if not data_path or not Path(data_path).is_file():
        raise FileNotFoundError(f"data file not found: {data_path}")
    clients = read_federation_csv(data_path)
    truth_guess = data_path + ".truth.json"
    out = Path(out_dir)
    outputs = run_training(cfg, clients, out, truth_guess if Path(truth_guess).is_file() else None)
    write_manifest(out / "manifest.json", "train", cfg, outputs, started,
                   extra={"data_source": {"path": str(data_path), "sha256": sha256_file(data_path)}})
    return 0


def _read_run(run_dir: Path, need_clients: bool = True):
    required = [run_dir / "config.txt", run_dir / "data.npz", run_dir / "checkpoints" / "server.json",
                run_dir / "heldout.json"]
    missing = [str(p) for p in required if not p.is_file()]
    if missing:
        raise FileNotFoundError("missing run artifacts: " + ", ".join(missing))
    cfg = load_config(str(run_dir / "config.txt"))
    with open(run_dir / "heldout.json") as fh:
        split = json.load(fh)
    data = {d.client_id: d for d in load_data_npz(run_dir / "data.npz")}
    mcfg, server = load_checkpoint(run_dir / "checkpoints" / "server.json")
    models = {}
    if need_clients:
        paths = {cid: run_dir / "checkpoints" / f"client_{cid}.json" for cid in split["train"]}
        missing = [str(p) for p in paths.values() if not p.is_file()]
        if missing:
            raise FileNotFoundError("missing run artifacts: " + ", ".join(missing[:5]))
        models = {cid: load_checkpoint(p)[1] for cid, p in paths.items()}
    return cfg, split, data, mcfg, server, models


def cmd_analyze(run_dir: str, mode: str, config_path: Optional[str] = None) -> int:
    started = _now()
    run = Path(run_dir)
    cfg, split, data, mcfg, server, models = _read_run(run, need_clients=mode != "gram")
    if config_path:
        raw, _ = parse_config_text(Path(config_path).read_text(), config_path)
        bad = [k for k in raw if not k.startswith("analyze.")]
        if bad:
            raise ConfigError(bad[0], "only analyze.* keys may be overridden at analysis time")
        resolved = resolve_config(raw)
        cfg.update({k: resolved[k] for k in raw})
    outputs = {}
    if mode == "entropy":
        ids = split["train"]
        rep = neuron_entropy_report(mcfg, [models[c] for c in ids], [data[c].X_test for c in ids],
                                    layer=cfg["analyze.layer"], k=cfg["analyze.k"],
                                    statistic=cfg["analyze.statistic"])
        outputs["entropy"] = run / "entropy.csv"
        write_entropy_csv(outputs["entropy"], rep)
    elif mode == "gram":
        outputs["gram"] = run / "gram.json"
        _write_json(outputs["gram"], gram_report(cfg, split, data, mcfg, server))
    elif mode == "new-client":
        if not split["heldout"]:
            raise ConfigError("holdout", "run has no held-out clients; retrain with holdout >= 1")
        outputs["newclient"] = run / "newclient.csv"
        new_client_report(outputs["newclient"], cfg, split, data, mcfg, server, models)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    write_manifest(run / f"manifest.analyze-{mode}.json", f"analyze {mode}", cfg, outputs, started)
    return 0


def _write_json(path, doc) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def gram_report(cfg: dict, split: dict, data: dict, mcfg, server) -> dict:
    """Gram diagnostics on a small unit-norm probe drawn from the first training clients."""
    ids = split["train"][: cfg["analyze.gram_clients"]]
    rows, sets, start = [], [], 0
    for cid in ids:
        X = data[cid].X_test[: cfg["analyze.gram_points"]]
        X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)
        rows.append(X)
        sets.append(list(range(start, start + len(X))))
        start += len(X)
    X = np.vstack(rows)
    rng = derive_rng(cfg["seed"], [("gram", 0)])
    limit = ntk_limit_estimate(X, sets, cfg["analyze.mc_samples"], rng)
    mask = server.shared.get(1, np.ones(server.weights[0].shape[0], bool))
    finite = gram_matrices(X, sets, server.weights[0], mask)
    # the ordering holds for the limit kernels; the finite matrices use
    # different unit sets and are reported for information only
    return {
        "lambda_p_ge_lambda_s": bool(limit.lambda_p >= limit.lambda_s),
        "points": int(X.shape[0]),
        "clients": [int(c) for c in ids],
        "mc_samples": int(limit.mc_samples),
        "limit": {
            "lambda_s": limit.lambda_s, "lambda_p": limit.lambda_p,
            "se_lambda_s": limit.se_lambda_s, "se_lambda_p": limit.se_lambda_p,
            "lambda_p_ge_lambda_s": bool(limit.lambda_p >= limit.lambda_s),
        },
        "trained_server": {
            "lambda_s": finite.lambda_s, "lambda_p": finite.lambda_p,
        },
    }


def new_client_report(path, cfg: dict, split: dict, data: dict, mcfg, server, models: dict) -> None:
    members = [models[c] for c in split["train"]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "n_c", "baseline_acc", "localtrain_acc", "ensemble_acc"])
        for cid in split["heldout"]:
            ds = data[cid]
            base, _ = predict_new_client_localtrain(mcfg, server, ds, 0, cfg["analyze.eta_l"],
                                                    derive_rng(cfg["seed"], [("new-client", cid)]))
            lt, _ = predict_new_client_localtrain(mcfg, server, ds, cfg["analyze.epochs"], cfg["analyze.eta_l"],
                                                  derive_rng(cfg["seed"], [("new-client", cid)]),
                                                  batch_size=cfg["batch_size"])
            en = predict_new_client_ensemble(mcfg, members, ds)
            w.writerow([cid, ds.n_c, repr(base.accuracy), repr(lt.accuracy), repr(en.accuracy)])


def _read_metrics(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "round" not in reader.fieldnames:
            raise ContractError(f"{path}: not a metrics file")
        return list(reader)


METRIC_COLUMNS = ["train_loss", "weighted_acc", "min_client_acc", "max_client_acc"]


def cmd_compare(run_dirs: Sequence[str], out_path: str) -> int:
    started = _now()
    if len(run_dirs) < 2:
        raise ContractError("compare needs at least 2 run directories")
    tables = []
    for rd in run_dirs:
        p = Path(rd) / "metrics.csv"
        if not p.is_file():
            raise FileNotFoundError(f"missing run artifacts: {p}")
        rows = _read_metrics(p)
        header = list(rows[0].keys()) if rows else []
        tables.append((rd, header, rows))
    schema = tables[0][1]
    for rd, header, _ in tables[1:]:
        if header != schema:
            raise ContractError(f"{rd}: metrics schema {header} differs from {schema}")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "algorithm", "seed", "round"] + METRIC_COLUMNS + [f"diff_{c}" for c in METRIC_COLUMNS])
        base = {r["round"]: r for r in tables[0][2]}
        for i, (rd, _, rows) in enumerate(tables):
            for r in rows:
                ref = base.get(r["round"])
                diffs = [repr(float(r[c]) - float(ref[c])) if ref else "" for c in METRIC_COLUMNS]
                w.writerow([i, r["algorithm"], r["seed"], r["round"]] + [r[c] for c in METRIC_COLUMNS] + diffs)
    write_manifest(out.with_name(out.name + ".manifest.json"), "compare", {"runs": list(run_dirs)},
                   {"comparison": out}, started)
    return 0


def cmd_sweep(sweep_path: str, data_path: str, out_dir: str, workers: Optional[int] = None) -> int:
    """Run the cartesian product of ``sweep.*`` grids and tabulate final metrics."""
    started = _now()
    base, grid = load_config(sweep_path, allow_sweep=True)
    if not grid:
        raise ConfigError("sweep", "no sweep.<key> lines found")
    if not Path(data_path).is_file():
        raise FileNotFoundError(f"data file not found: {data_path}")
    clients = read_federation_csv(data_path)
    keys = list(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "sweep.csv"
    truth_guess = data_path + ".truth.json"
    rows = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        raw = {k: v for k, v in zip(keys, combo)}
        cfg = dict(base)
        cfg.update({k: resolve_config(raw)[k] for k in keys})
        if workers is not None:
            cfg["workers"] = int(workers)
        run_dir = out / f"run_{i:03d}"
        run_training(cfg, clients, run_dir, truth_guess if Path(truth_guess).is_file() else None)
        last = _read_metrics(run_dir / "metrics.csv")
        final = last[-1] if last else {c: "nan" for c in METRIC_COLUMNS}
        rows.append([i] + list(combo) + [final[c] for c in METRIC_COLUMNS])
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + keys + METRIC_COLUMNS)
        w.writerows(rows)
    write_manifest(out / "manifest.json", "compare --sweep", base, {"sweep": table}, started,
                   extra={"grid": grid})
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedfac", description=__doc__.split("\n\n")[0].strip())
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate or partition a federated dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output CSV path")

    t = sub.add_parser("train", help="run a federated experiment")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--workers", type=int)

    a = sub.add_parser("analyze", help="diagnostics on a finished run")
    a.add_argument("--run", required=True)
    a.add_argument("--mode", required=True, choices=["entropy", "gram", "new-client"])
    a.add_argument("--config", help="overrides for analyze.* keys")

    c = sub.add_parser("compare", help="merge runs or execute a sweep")
    c.add_argument("runs", nargs="*")
    c.add_argument("--out", required=True)
    c.add_argument("--sweep", help="sweep config with sweep.<key> grids")
    c.add_argument("--data", help="dataset for --sweep")
    c.add_argument("--workers", type=int)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args.config, args.out)
        if args.command == "train":
            return cmd_train(args.config, args.data, args.out, args.workers)
        if args.command == "analyze":
            return cmd_analyze(args.run, args.mode, args.config)
        if args.sweep:
            if not args.data:
                raise ContractError("--sweep needs --data")
            return cmd_sweep(args.sweep, args.data, args.out, args.workers)
        return cmd_compare(args.runs, args.out)
    except (ContractError, OSError, ValueError) as exc:
        print(f"fedfac {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
