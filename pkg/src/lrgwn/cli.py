"""Command-line front end: ``lrgwn <command> [flags]``.

Settings resolve in three layers: built-in defaults (plus a per-task preset
for ``train``/``ablate``), then an optional ``--config`` JSON file, then
explicit flags. Each invocation writes into ``<out>/<command>-<hash>/`` where
the hash covers the resolved settings, so reruns with the same settings land
in the same place and produce the same bytes.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import eigsh

from . import filters as F
from .graph import (GraphError, LAMBDA_MAX, build_normalized_laplacian, load_graph,
                    path_graph)
from .network import ModelConfig, init_params, save_checkpoint
from .spectral import ConvergenceError, cached_partial_evd, dense_evd, partial_evd, save_evd
from .training import (AdamWConfig, ToyTask, ablation_configs, make_local_degree_task,
                       make_path_localization_task, trace_to_csv, train, prepare_samples)

log = logging.getLogger("lrgwn")

OUT_ENV = "LRGWN_OUT"
DEFAULT_OUT = "lrgwn-runs"

COMMANDS = ("laplacian", "evd", "filter-response", "propagate", "fit-cheb", "train", "ablate")

DEFAULTS = {
    "graph": None,
    "format": "edge-list",
    "features": None,
    "k": 8,
    "tol": 1e-8,
    "rho": 3,
    "z": 8,
    "lambda_cut": LAMBDA_MAX,
    "window": "cosine",
    "scales": 2,
    "mode": "independent",
    "aggregation": "sum",
    "residual": "standard",
    "admissible": False,
    "activation": "relu",
    "d": 16,
    "layers": 2,
    "pe_dim": 0,
    "seed": 0,
    "seeds": 1,
    "epochs": 100,
    "lr": 1e-2,
    "weight_decay": 0.0,
    "schedule": "cosine",
    "batch_size": None,
    "patience": 20,
    "task": "path-localization",
    "task_file": None,
    "filter": None,
    "channels": 1,
    "grid_size": None,
    "kernel": "mexican-hat",
    "kernel_scale": 8.0,
    "rhos": "1,2,4,8,12,16,20,30,40,50",
    "node": None,
    "n_nodes": 200,
    "evd_cache": None,
}

# settings under which the toy tasks are learnable within a few minutes on one core
TASK_PRESETS = {
    "path-localization": {
        "pe_dim": 4, "lambda_cut": 0.12, "aggregation": "concat", "admissible": True,
        "epochs": 400, "batch_size": 4, "patience": None, "seeds": 5,
    },
    "local-degree": {
        "aggregation": "concat", "admissible": True, "epochs": 60, "batch_size": 4,
        "patience": None, "seeds": 5,
    },
}

# keys that locate files rather than define the computation
_LOCATION_KEYS = ("out", "config", "evd_cache", "verbose")

KERNELS = {
    "mexican-hat": F.mexican_hat,
    "heat": lambda s: F.Kernel(lambda lam: np.exp(-s * lam), name=f"heat(s={s:g})"),
    "constant": lambda s: F.Kernel(lambda lam: np.ones_like(lam), name="constant"),
}


class UsageError(ValueError):
    """Invalid settings; maps to exit code 2."""


# -- settings -------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="lrgwn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    a = common.add_argument
    a("--config", help="JSON file of settings; flags override it")
    a("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    a("--graph", help="graph file")
    a("--format", choices=["edge-list", "json"])
    a("--features", help="CSV of node features (one row per node)")
    a("--k", type=int, help="retained eigenpairs")
    a("--tol", type=float, help="eigen-residual tolerance")
    a("--rho", type=int, help="Chebyshev order")
    a("--z", type=int, help="Gaussian smearing centres")
    a("--lambda-cut", dest="lambda_cut", type=float)
    a("--window", choices=list(F.WINDOWS))
    a("--scales", type=int, help="number of wavelet scales J")
    a("--mode", choices=["independent", "shared"])
    a("--aggregation", choices=["sum", "concat"])
    a("--residual", choices=["standard", "wavelet", "none"])
    a("--admissible", action=argparse.BooleanOptionalAction)
    a("--activation", choices=["relu", "identity"])
    a("--d", type=_positive_int, help="hidden width")
    a("--layers", type=_positive_int)
    a("--pe-dim", dest="pe_dim", type=int)
    a("--seed", type=int)
    a("--seeds", type=_positive_int, help="number of seeds for ablate")
    a("--epochs", type=int)
    a("--lr", type=float)
    a("--weight-decay", dest="weight_decay", type=float)
    a("--schedule", choices=["cosine", "constant"])
    a("--batch-size", dest="batch_size", type=_positive_int)
    a("--patience", type=_positive_int)
    a("--task", choices=sorted(TASK_PRESETS))
    a("--task-file", dest="task_file", help="serialized task JSON (overrides --task data)")
    a("--filter", help="filter JSON for filter-response")
    a("--channels", type=_positive_int, help="channels of a random filter")
    a("--grid-size", dest="grid_size", type=int)
    a("--kernel", choices=sorted(KERNELS))
    a("--kernel-scale", dest="kernel_scale", type=float)
    a("--rhos", help="comma-separated Chebyshev orders for fit-cheb")
    a("--node", type=int, help="seed node for propagate (default: middle)")
    a("--n-nodes", dest="n_nodes", type=_positive_int, help="path length when no --graph")
    a("--evd-cache", dest="evd_cache", help="decomposition cache file")
    a("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run {name}")
    return p


def resolve_settings(command, flags):
    """Merge defaults, task preset, config file and explicit flags."""
    cfg = dict(DEFAULTS)
    from_file = {}
    if "config" in flags:
        try:
            from_file = json.loads(Path(flags["config"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {flags['config']}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(from_file) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if command in ("train", "ablate"):
        task = flags.get("task", from_file.get("task", cfg["task"]))
        cfg.update(TASK_PRESETS.get(task, {}))
    cfg.update(from_file)
    cfg.update({k: v for k, v in flags.items() if k in DEFAULTS})
    cfg["command"] = command
    validate(cfg)
    return cfg


def validate(cfg):
    cmd = cfg["command"]
    if cfg["k"] < 1:
        raise UsageError("k must be >= 1")
    if cfg["rho"] < 0:
        raise UsageError("rho must be >= 0")
    if cfg["z"] < 1:
        raise UsageError("z must be >= 1")
    if not 0.0 < cfg["lambda_cut"] <= LAMBDA_MAX:
        raise UsageError("lambda_cut must lie in (0, 2]")
    if cfg["scales"] < 0:
        raise UsageError("scales must be >= 0")
    if cfg["epochs"] < 0:
        raise UsageError("epochs must be >= 0")
    if cfg["lr"] < 0 or cfg["weight_decay"] < 0:
        raise UsageError("lr and weight_decay must be >= 0")
    if cfg["tol"] <= 0:
        raise UsageError("tol must be positive")
    if cmd in ("laplacian", "evd") and cfg["graph"] is None:
        raise UsageError(f"{cmd} needs --graph")
    for key in ("graph", "features", "config", "filter", "task_file"):
        if cfg.get(key) is not None and not Path(cfg[key]).is_file():
            raise UsageError(f"{key} file not found: {cfg[key]}")
    if cmd == "fit-cheb":
        cfg["rho_list"] = _parse_rhos(cfg["rhos"])
        if cfg["grid_size"] is not None:
            need = 4 * (max(cfg["rho_list"]) + 1)
            if cfg["grid_size"] < need:
                raise UsageError(f"grid_size {cfg['grid_size']} too small; need >= {need}")
        if cfg["kernel_scale"] <= 0:
            raise UsageError("kernel_scale must be positive")
    if cmd == "filter-response" and cfg["grid_size"] is not None and cfg["grid_size"] < 2:
        raise UsageError("grid_size must be >= 2")


def _parse_rhos(text):
    try:
        rhos = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"rhos must be comma-separated integers, got {text!r}") from None
    if not rhos or min(rhos) < 0:
        raise UsageError("rhos must be non-empty and non-negative")
    return rhos


def settings_hash(cfg):
    core = {k: v for k, v in cfg.items() if k not in _LOCATION_KEYS}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:12]


def output_dir(cfg, flags):
    root = flags.get("out") or os.environ.get(OUT_ENV) or DEFAULT_OUT
    out = Path(root) / f"{cfg['command']}-{settings_hash(cfg)}"
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- writers ----------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows, cfg):
    buf = _io.StringIO()
    buf.write(f"# config {settings_hash(cfg)} command={cfg['command']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load(cfg):
    g = load_graph(cfg["graph"], format=cfg["format"], features_csv=cfg["features"])
    return g, build_normalized_laplacian(g)


# -- commands ---------------------------------------------------------------------

def largest_eigenvalue(lap):
    if lap.n <= 64:
        return float(np.linalg.eigvalsh(lap.toarray())[-1])
    # fixed start vector keeps the estimate reproducible
    v0 = np.linspace(1.0, 2.0, lap.n)
    return float(eigsh(lap.matrix, k=1, which="LA", v0=v0, tol=1e-12,
                       return_eigenvectors=False)[0])


def cmd_laplacian(cfg, out):
    g, lap = _load(cfg)
    deg = g.degrees
    mat = lap.matrix
    sym = float(abs(mat - mat.T).max()) if mat.nnz else 0.0
    lam_top = largest_eigenvalue(lap)
    doc = {
        "n": g.n,
        "m": g.m,
        "nnz": lap.nnz,
        "degree": {"min": int(deg.min()), "max": int(deg.max()), "mean": float(deg.mean())},
        "lambda_max_bound": lap.lambda_max_bound,
        "lambda_max_estimate": lam_top,
        "spectral_bound_ok": bool(lam_top <= LAMBDA_MAX + 1e-10),
        "max_asymmetry": sym,
        "graph_hash": g.content_hash(),
    }
    write_json(out / "laplacian.json", doc)
    return [out / "laplacian.json"]


def cmd_evd(cfg, out):
    g, lap = _load(cfg)
    if cfg["k"] > g.n:
        raise UsageError(f"k={cfg['k']} exceeds n={g.n}")
    path = Path(cfg["evd_cache"]) if cfg["evd_cache"] else out / "evd.json"
    evd, hit = cached_partial_evd(lap, g, cfg["k"], path, tol=cfg["tol"], seed=cfg["seed"])
    print(f"evd cache {'hit' if hit else 'miss'}: {path}")
    rows = [(i, lam, r) for i, (lam, r) in enumerate(zip(evd.lambdas, evd.residual_norms))]
    print(f"{'index':>5}  {'lambda':>22}  {'residual':>10}")
    for i, lam, r in rows:
        print(f"{i:>5}  {lam:>22.15e}  {r:>10.2e}")
    write_csv(out / "residuals.csv", ["index", "lambda", "residual_norm"], rows, cfg)
    files = [out / "residuals.csv"]
    if path != out / "evd.json":
        save_evd(evd, out / "evd.json")
    files.append(out / "evd.json")
    return files


def _random_filter(cfg):
    rng = np.random.default_rng(cfg["seed"])
    cheb = F.ChebyshevCoefficients(rng.standard_normal(cfg["rho"] + 1))
    spec = F.SpectralFilterParams(rng.standard_normal((cfg["z"], cfg["channels"])),
                                  lambda_cut=cfg["lambda_cut"], window=cfg["window"])
    return F.WaveletFilterParams(cheb=cheb, spec=spec, admissible=cfg["admissible"], role="wavelet")


def cmd_filter_response(cfg, out):
    f = F.load_filter(cfg["filter"]) if cfg["filter"] else _random_filter(cfg)
    size = cfg["grid_size"] or 201
    lam = np.linspace(0.0, LAMBDA_MAX, size)
    total, poly, spec = F.response_parts(f, lam)
    d = total.shape[1]
    spec_cols = ["spectral_part"] if spec.shape[1] == 1 else [f"spectral_part_{c}" for c in range(spec.shape[1])]
    header = ["lambda"] + [f"response_channel_{c}" for c in range(d)] + ["polynomial_part"] + spec_cols
    rows = [[lam[i], *total[i], poly[i], *spec[i]] for i in range(size)]
    write_csv(out / "response.csv", header, rows, cfg)
    write_json(out / "filter.json", F.filter_to_dict(f))
    return [out / "response.csv", out / "filter.json"]


def propagation_profiles(g, lap, kernel, rho, k, lambda_cut, z, node, tol=1e-8, seed=0):
    """Per-hop output energy of a delta at ``node`` for the three approximations."""
    dense = dense_evd(lap)
    evd = partial_evd(lap, min(k, g.n), tol=tol, seed=seed, graph=g)
    poly, _ = F.fit_chebyshev_ls(kernel, rho)
    hybrid = F.fit_hybrid_filter(kernel, rho, evd.lambdas, z=z, lambda_cut=lambda_cut, window="none")
    return {
        f"poly-{rho}": F.propagation_energy_profile(lambda x: F.chebyshev_apply(poly, lap, x), g, node),
        "dense-evd": F.propagation_energy_profile(lambda x: F.exact_filter_apply(kernel, dense, x), g, node),
        "hybrid": F.propagation_energy_profile(lambda x: F.hybrid_apply(hybrid, lap, evd, x), g, node),
    }


def cmd_propagate(cfg, out):
    if cfg["graph"]:
        g, lap = _load(cfg)
    else:
        g = path_graph(cfg["n_nodes"])
        lap = build_normalized_laplacian(g)
    node = g.n // 2 if cfg["node"] is None else cfg["node"]
    if not 0 <= node < g.n:
        raise UsageError(f"node {node} outside [0, {g.n})")
    kernel = KERNELS[cfg["kernel"]](cfg["kernel_scale"])
    profiles = propagation_profiles(g, lap, kernel, cfg["rho"], cfg["k"], cfg["lambda_cut"],
                                    cfg["z"], node, tol=cfg["tol"], seed=cfg["seed"])
    rows = [(name, h, e) for name, prof in profiles.items() for h, e in enumerate(prof)]
    write_csv(out / "propagation.csv", ["method", "hop", "energy"], rows, cfg)
    return [out / "propagation.csv"]


def cmd_fit_cheb(cfg, out):
    kernel = KERNELS[cfg["kernel"]](cfg["kernel_scale"])
    rows = []
    for rho in cfg["rho_list"]:
        _, err = F.fit_chebyshev_ls(kernel, rho, grid_size=cfg["grid_size"])
        rows.append((rho, err))
    write_csv(out / "fit.csv", ["rho", "sup_error"], rows, cfg)
    return [out / "fit.csv"]


def _task(cfg):
    if cfg["task_file"]:
        return ToyTask.load(cfg["task_file"])
    if cfg["task"] == "path-localization":
        return make_path_localization_task(seed=cfg["seed"])
    return make_local_degree_task(seed=cfg["seed"])


def model_config(cfg, task):
    feats = task.graphs[0].features
    d_in = 0 if feats is None else feats.shape[1]
    classify = task.kind != "node-regression"
    d_out = max(task.n_classes, 2) if classify else int(np.asarray(task.targets[0]).reshape(task.graphs[0].n, -1).shape[1])
    return ModelConfig(
        d_in=d_in, pe_dim=cfg["pe_dim"], d=cfg["d"], d_out=d_out, n_layers=cfg["layers"],
        J=cfg["scales"], rho=cfg["rho"], z=cfg["z"], lambda_cut=cfg["lambda_cut"],
        window=cfg["window"], mode=cfg["mode"], aggregation=cfg["aggregation"],
        residual=cfg["residual"], activation=cfg["activation"], admissible=cfg["admissible"],
        readout="mean" if task.kind == "graph-classification" else "node",
    )


def _opt(cfg):
    return AdamWConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"], schedule=cfg["schedule"])


def _fit(mcfg, cfg, task, seed, cache, trace_path):
    samples = prepare_samples(task, mcfg, k=cfg["k"], tol=cfg["tol"], seed=0, cache=cache)
    m = init_params(mcfg, seed=seed)
    patience = cfg["patience"] or max(cfg["epochs"], 1)
    res = train(m, samples, task.splits, task.kind, opt=_opt(cfg), epochs=cfg["epochs"], seed=seed,
                batch_size=cfg["batch_size"], patience=patience)
    Path(trace_path).write_text(trace_to_csv(res.trace, comment=f"config {settings_hash(cfg)} "
                                             f"model {mcfg.hash()} seed={seed}"), encoding="utf-8")
    return res


def _best(res):
    if not res.trace:
        return None, None
    row = res.trace[res.best_epoch]
    return row["val_loss"], row["val_metric"]


def cmd_train(cfg, out):
    task = _task(cfg)
    mcfg = model_config(cfg, task)
    res = _fit(mcfg, cfg, task, cfg["seed"], {}, out / "trace.csv")
    save_checkpoint(res.params, out / "checkpoint.json")
    task.save(out / "task.json")
    loss, metric = _best(res)
    write_json(out / "summary.json", {"best_epoch": res.best_epoch, "val_loss": loss,
                                      "val_metric": metric, "epochs_run": len(res.trace),
                                      "model_hash": mcfg.hash()})
    return [out / "trace.csv", out / "checkpoint.json", out / "task.json", out / "summary.json"]


def cmd_ablate(cfg, out):
    task = _task(cfg)
    base = model_config(cfg, task)
    cache = {}
    rows, files = [], []
    for name, mcfg in ablation_configs(base).items():
        for seed in range(cfg["seed"], cfg["seed"] + cfg["seeds"]):
            trace = out / f"trace-{name}-seed{seed}.csv"
            res = _fit(mcfg, cfg, task, seed, cache, trace)
            loss, metric = _best(res)
            rows.append((name, seed, res.best_epoch, loss, metric))
            files.append(trace)
            log.info("%s seed %d: val_loss %.6g val_metric %.6g", name, seed, loss, metric)
    write_csv(out / "ablation.csv", ["variant", "seed", "best_epoch", "val_loss", "val_metric"], rows, cfg)
    means = {}
    for name in ablation_configs(base):
        sel = [r for r in rows if r[0] == name]
        means[name] = {"val_loss": float(np.mean([r[3] for r in sel])),
                       "val_metric": float(np.mean([r[4] for r in sel]))}
    write_json(out / "ablation-summary.json", {"task": task.name, "seeds": cfg["seeds"], "means": means})
    return [out / "ablation.csv", out / "ablation-summary.json", *files]


HANDLERS = {
    "laplacian": cmd_laplacian,
    "evd": cmd_evd,
    "filter-response": cmd_filter_response,
    "propagate": cmd_propagate,
    "fit-cheb": cmd_fit_cheb,
    "train": cmd_train,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    logging.basicConfig(level=logging.INFO if flags.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_settings(args.command, flags)
        out = output_dir(cfg, flags)
        write_json(out / "config.json", {k: v for k, v in cfg.items() if k not in _LOCATION_KEYS})
        files = HANDLERS[args.command](cfg, out)
    except (UsageError, GraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConvergenceError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    print(out)
    for f in files:
        log.info("wrote %s", f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
