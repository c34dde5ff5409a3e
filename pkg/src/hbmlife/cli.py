"""Command-line entry point: ``hbmlife <stage> [options]``.

Every stage writes its artifacts plus ``manifest.json`` into ``--out``. The
manifest holds the effective config, the seed, SHA-256 hashes of the inputs
and the package version; its own hash is stamped into every artifact so
outputs of different runs cannot be silently mixed. Paths, timestamps and
``--threads`` are kept out of the hashed manifest because they do not affect
results.

Config precedence: command-line flags, then ``--config`` JSON (flat or
under a key named after the stage), then built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__, baseline, clustering, dataset, evaluation, features, hbm, mcmc

log = logging.getLogger("hbmlife")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Small I/O helpers


def _dump_json(doc: Any, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.iterdir() if p.is_file()):
            h.update(f.name.encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"missing required input --{what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} input {p} does not exist")
    return p


class Manifest:
    def __init__(self, command: str, config: dict, seed: int | None, inputs: dict[str, Path]):
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": {k: _sha256_path(v) for k, v in sorted(inputs.items())},
            "version": __version__,
        }
        canon = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        self.hash = hashlib.sha256(canon.encode()).hexdigest()

    @property
    def comments(self) -> list[str]:
        return [f"manifest_hash={self.hash}", f"seed={self.doc['seed']}"]

    def stamp(self, doc: dict) -> dict:
        return {**doc, "manifest_hash": self.hash, "seed": self.doc["seed"]}

    def write(self, out: Path) -> None:
        _dump_json({**self.doc, "manifest_hash": self.hash}, out / "manifest.json")


def _manifest_hash_of(path: Path) -> str | None:
    if path.suffix == ".json":
        try:
            return json.loads(path.read_text(encoding="utf-8")).get("manifest_hash")
        except (json.JSONDecodeError, AttributeError):
            return None
    for line in dataset.read_comment_header(path):
        if line.startswith("manifest_hash="):
            return line.split("=", 1)[1].strip()
    return None


def _write_csv(path: Path, header: Sequence[str], rows, comments: Sequence[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _read_assignment(csv_path: Path, centroids_path: Path | None) -> clustering.GroupAssignment:
    membership: dict[str, int] = {}
    with csv_path.open(encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header != ["cell_id", "group"]:
            raise CliError(f"{csv_path}: expected header cell_id,group, got {header}")
        for row in reader:
            membership[row[0]] = int(row[1])
    if centroids_path is None:
        centroids_path = csv_path.with_name("centroids.json")
    if not centroids_path.exists():
        raise CliError(f"centroids file {centroids_path} not found")
    doc = json.loads(centroids_path.read_text(encoding="utf-8"))
    return clustering.GroupAssignment.from_json({**doc, "membership": membership})


def _write_assignment(a: clustering.GroupAssignment, out: Path, man: Manifest) -> None:
    _write_csv(out / "assignment.csv", ["cell_id", "group"], sorted(a.membership.items()), man.comments)
    doc = a.to_json()
    doc.pop("membership")
    _dump_json(man.stamp(doc), out / "centroids.json")


# ---------------------------------------------------------------------------
# Stage options and config resolution

# default values of every option that enters the config snapshot
DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {"groups": 8, "cells": 15, "g_min": 2.0, "g_max": 6.0, "label_transform": "log10",
              "with_cycles": 0},
    "extract": {"vmin": 2.0, "vmax": 3.5, "grid_points": 1000, "log_clamp": 1e-12, "label_transform": "log10"},
    "cluster": {"k": 8, "min_size": 10, "max_size": 100, "restarts": 10, "seed": 0},
    "fit": {"k": 8, "min_size": 10, "max_size": 100, "restarts": 10, "chains": 4, "warmup": 1000,
            "samples": 1000, "sigma_y": 1.0, "sigma_y_prior": None, "label_transform": "log10",
            "scheme": "collapsed", "standardize": True},
    "predict": {"alpha": 0.1},
    "evaluate": {"models": "hbm,ridge3,ridge4", "k": 5, "repeats": 4, "clusters": 8, "min_size": 10,
                 "max_size": 100, "restarts": 10, "chains": 4, "warmup": 1000, "samples": 1000,
                 "sigma_y": 1.0, "label_transform": "log10", "reference": "ridge3"},
    "report": {"target": "hbm"},
    "baseline": {"features": "f1,f2,f3", "lambda_grid": None, "inner_folds": 5, "seed": 0,
                 "label_transform": "log10"},
}


def _resolve(cmd: str, args: argparse.Namespace) -> dict[str, Any]:
    cfg = dict(DEFAULTS[cmd])
    if "seed" in vars(args) and "seed" not in cfg:
        cfg["seed"] = None
    if args.config:
        path = _existing(args.config, "config")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from None
        section = doc.get(cmd, doc) if isinstance(doc.get(cmd), dict) else doc
        for key, value in section.items():
            key = key.replace("-", "_")
            if key in DEFAULTS:
                continue  # another stage's section
            if key not in cfg:
                raise CliError(f"config key {key!r} is not an option of {cmd}")
            cfg[key] = value
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    if seed_required:
        p.add_argument("--seed", type=int, required=True)
    else:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hbmlife", description="Hierarchical Bayesian battery lifetime pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fleet")
    _common(p, seed_required=True)
    p.add_argument("--groups", type=int)
    p.add_argument("--cells", type=int, help="cells per group")
    p.add_argument("--g-min", type=float)
    p.add_argument("--g-max", type=float)
    p.add_argument("--label-transform", choices=("identity", "log10"))
    p.add_argument("--synth-config", help="JSON with SyntheticConfig fields (overrides the flags above)")
    p.add_argument("--with-cycles", type=int, metavar="N", help="also write N toy cells as cycle data")

    p = sub.add_parser("extract", help="compute features from cycle data")
    _common(p)
    p.add_argument("--cycles", required=True, help="directory of <id>.meta.json + <id>.cycles.csv")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--grid-points", type=int)
    p.add_argument("--log-clamp", type=float)
    p.add_argument("--label-transform", choices=("identity", "log10"))

    p = sub.add_parser("cluster", help="group cells by average C-rate")
    _common(p)
    p.add_argument("--table", required=True, help="feature CSV")
    p.add_argument("--k", type=int)
    p.add_argument("--min-size", type=int)
    p.add_argument("--max-size", type=int)
    p.add_argument("--restarts", type=int)

    p = sub.add_parser("fit", help="sample the hierarchical posterior")
    _common(p, seed_required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--assignment", help="assignment.csv (centroids.json alongside); clustered here if absent")
    p.add_argument("--k", type=int)
    p.add_argument("--min-size", type=int)
    p.add_argument("--max-size", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--sigma-y", type=float)
    p.add_argument("--sigma-y-prior", type=float, help="sample sigma_y under a half-normal prior of this scale")
    p.add_argument("--label-transform", choices=("identity", "log10"))
    p.add_argument("--scheme", choices=("collapsed", "joint"))
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False)

    p = sub.add_parser("predict", help="posterior predictive for feature rows")
    _common(p)
    p.add_argument("--posterior", required=True, help="posterior.json from fit")
    p.add_argument("--table", required=True)
    p.add_argument("--alpha", type=float, help="interval miscoverage (0.1 gives 90%% intervals)")

    p = sub.add_parser("evaluate", help="repeated k-fold cross-validation")
    _common(p, seed_required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--models", help="comma list from hbm,ridge3,ridge4,mean")
    p.add_argument("--k", type=int, help="folds")
    p.add_argument("--repeats", type=int)
    p.add_argument("--clusters", type=int, help="number of usage groups")
    p.add_argument("--min-size", type=int)
    p.add_argument("--max-size", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--sigma-y", type=float)
    p.add_argument("--label-transform", choices=("identity", "log10"))
    p.add_argument("--reference", help="model tag improvements are measured against")

    p = sub.add_parser("report", help="format evaluation results as a summary table")
    p.add_argument("inputs", nargs="+", help="report.json plus any artifacts to cross-check")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=1, help=argparse.SUPPRESS)
    p.add_argument("--target", help="model whose improvement is shown")

    p = sub.add_parser("baseline", help="fit the pooled ridge baseline")
    _common(p)
    p.add_argument("--table", required=True)
    p.add_argument("--features", help="comma list, e.g. f1,f2,f3,g")
    p.add_argument("--lambda-grid", help="comma list of penalties")
    p.add_argument("--inner-folds", type=int)
    p.add_argument("--label-transform", choices=("identity", "log10"))
    return parser


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Stages


def cmd_synth(args, cfg) -> None:
    out = _outdir(args.out)
    inputs = {}
    if args.synth_config:
        path = _existing(args.synth_config, "synth-config")
        inputs["synth_config"] = path
        sc = dataset.SyntheticConfig.from_json(json.loads(path.read_text(encoding="utf-8")))
    else:
        sc = dataset.SyntheticConfig(
            n_groups=cfg["groups"],
            cells_per_group=cfg["cells"],
            g_range=(cfg["g_min"], cfg["g_max"]),
            label_transform=cfg["label_transform"],
        )
    man = Manifest("synth", {**cfg, "synthetic": sc.to_json()}, cfg["seed"], inputs)
    table, truth = dataset.generate_synthetic(sc, cfg["seed"])
    dataset.write_feature_table(table, out / "features.csv", man.comments)
    _dump_json(man.stamp(truth.to_json()), out / "truth.json")
    if cfg["with_cycles"]:
        cells = dataset.synthetic_cycle_fleet(int(cfg["with_cycles"]), cfg["seed"])
        dataset.write_cycle_data(cells, out / "cycles", man.comments)
    man.write(out)


def cmd_extract(args, cfg) -> None:
    src = _existing(args.cycles, "cycles")
    out = _outdir(args.out)
    man = Manifest("extract", cfg, None, {"cycles": src})
    cells = dataset.load_cycle_data(src)
    grid = features.GridConfig(vmax=cfg["vmax"], vmin=cfg["vmin"], points=cfg["grid_points"])
    table, skipped = features.extract_table(cells, grid, cfg["log_clamp"], cfg["label_transform"])
    dataset.write_feature_table(table, out / "features.csv", man.comments)
    _dump_json(man.stamp({"skipped": list(skipped)}), out / "skipped.json")
    man.write(out)


def _cluster_table(table, cfg, seed, threads, k_key="k"):
    return clustering.constrained_kmeans(
        dict(zip(table.cell_ids, table.column("g"))),
        cfg[k_key], cfg["min_size"], cfg["max_size"], cfg["restarts"], seed=seed, threads=threads,
    )


def cmd_cluster(args, cfg) -> None:
    src = _existing(args.table, "table")
    out = _outdir(args.out)
    man = Manifest("cluster", cfg, cfg["seed"], {"table": src})
    table = dataset.load_feature_table(src, "identity")
    assignment = _cluster_table(table, cfg, cfg["seed"], args.threads)
    _write_assignment(assignment, out, man)
    man.write(out)


def cmd_fit(args, cfg) -> None:
    src = _existing(args.table, "table")
    out = _outdir(args.out)
    inputs = {"table": src}
    if args.assignment:
        inputs["assignment"] = _existing(args.assignment, "assignment")
        inputs["centroids"] = _existing(str(Path(args.assignment).with_name("centroids.json")), "centroids")
    man = Manifest("fit", cfg, cfg["seed"], inputs)
    table = dataset.load_feature_table(src, cfg["label_transform"]).labeled()
    if args.assignment:
        assignment = _read_assignment(inputs["assignment"], inputs["centroids"])
    else:
        assignment = _cluster_table(table, cfg, cfg["seed"], args.threads)
    model = hbm.ModelConfig(
        sigma_y=cfg["sigma_y"],
        sigma_y_prior_scale=cfg["sigma_y_prior"],
        label_transform=cfg["label_transform"],
        standardize=bool(cfg["standardize"]),
    )
    mc = hbm.McmcConfig(n_chains=cfg["chains"], n_warmup=cfg["warmup"], n_samples=cfg["samples"])
    post = hbm.fit(table, assignment, model, mc, cfg["seed"], args.threads, cfg["scheme"])
    doc = post.to_json()
    doc["assignment"] = assignment.to_json()
    _dump_json(man.stamp(doc), out / "posterior.json")
    _write_assignment(assignment, out, man)
    rhat = np.asarray(post.diagnostics.get("rhat", []), dtype=float)
    if rhat.size and np.nanmax(rhat) > 1.05:
        log.warning("max R-hat %.3f exceeds 1.05; consider more warmup or samples", np.nanmax(rhat))
    man.write(out)


def cmd_predict(args, cfg) -> None:
    post_path = _existing(args.posterior, "posterior")
    src = _existing(args.table, "table")
    out = _outdir(args.out)
    man = Manifest("predict", cfg, None, {"posterior": post_path, "table": src})
    doc = json.loads(post_path.read_text(encoding="utf-8"))
    post = hbm.HbmPosterior.from_json(doc)
    assignment = clustering.GroupAssignment.from_json(doc["assignment"]) if "assignment" in doc else None
    table = dataset.load_feature_table(src, post.config.label_transform)
    rows = []
    for row in table.rows:
        group = assignment.membership.get(row.cell_id) if assignment else None
        pred = hbm.predict(row, post, group=group, g_value=row.g, assignment=assignment)
        (_, _), (lo, hi) = pred.interval(cfg["alpha"])
        rows.append([row.cell_id, -1 if pred.group is None else pred.group, pred.mean,
                     float(np.sqrt(pred.variance)), pred.point_estimate_days, lo, hi])
    _write_csv(
        out / "predictions.csv",
        ["cell_id", "group", "mean_transformed", "sd_transformed", "point_days", "lower_days", "upper_days"],
        rows,
        man.comments,
    )
    man.write(out)


def cmd_evaluate(args, cfg) -> None:
    src = _existing(args.table, "table")
    out = _outdir(args.out)
    man = Manifest("evaluate", cfg, cfg["seed"], {"table": src})
    table = dataset.load_feature_table(src, cfg["label_transform"]).labeled()
    mc = hbm.McmcConfig(n_chains=cfg["chains"], n_warmup=cfg["warmup"], n_samples=cfg["samples"])
    known = evaluation.default_models(mc, cfg["sigma_y"])
    tags = [t.strip() for t in str(cfg["models"]).split(",") if t.strip()]
    unknown = [t for t in tags if t not in known]
    if unknown:
        raise CliError(f"unknown model tag(s) {unknown}; choose from {sorted(known)}")
    cc = evaluation.ClusterConfig(cfg["clusters"], cfg["min_size"], cfg["max_size"], cfg["restarts"])
    report = evaluation.run_cv(
        table, [known[t] for t in tags], cfg["k"], cfg["repeats"], cc, cfg["seed"], cfg["reference"], args.threads
    )
    _dump_json(man.stamp(report.to_json()), out / "report.json")
    evaluation.write_trials_csv(report, out / "trials.csv", man.comments)
    evaluation.emit_plot_data(report, out_dir=out, comments=man.comments)
    man.write(out)


def cmd_report(args, cfg) -> None:
    paths = [_existing(p, "inputs") for p in args.inputs]
    hashes = {p.name: _manifest_hash_of(p) for p in paths}
    missing = [n for n, h in hashes.items() if h is None]
    if missing:
        raise CliError(f"no manifest hash found in {missing}")
    if len(set(hashes.values())) > 1:
        raise CliError(f"inputs come from different runs (mixed manifest hashes): {hashes}")
    reports = [p for p in paths if p.suffix == ".json" and "per_trial" in json.loads(p.read_text(encoding="utf-8"))]
    if not reports:
        raise CliError("no evaluation report.json among the inputs")
    report = evaluation.EvalReport.from_json(json.loads(reports[0].read_text(encoding="utf-8")))
    text = evaluation.format_table(report, target=cfg["target"])
    counts = ", ".join(f"{m}: {len(report.trials(m))}" for m in report.models)
    text += f"\nTrials per model: {counts}. VPC = {report.vpc:.4f}. manifest_hash={next(iter(hashes.values()))}\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_baseline(args, cfg) -> None:
    src = _existing(args.table, "table")
    out = _outdir(args.out)
    man = Manifest("baseline", cfg, cfg["seed"], {"table": src})
    table = dataset.load_feature_table(src, cfg["label_transform"]).labeled()
    names = tuple(t.strip() for t in str(cfg["features"]).split(",") if t.strip())
    grid = cfg["lambda_grid"]
    if grid is None:
        grid = baseline.DEFAULT_LAMBDA_GRID
    elif isinstance(grid, str):
        grid = [float(v) for v in grid.split(",") if v.strip()]
    x = table.matrix(names)
    y = table.transformed_labels()
    lam = baseline.select_lambda(x, y, grid, cfg["inner_folds"], cfg["seed"])
    model = baseline.fit_ridge(x, y, lam)
    pred = dataset.inverse_transform(model.predict(x), table.label_transform)
    _dump_json(
        man.stamp({
            "features": list(names),
            "lambda": lam,
            "coefficients": model.coefficients.tolist(),
            "raw_coefficients": model.raw_coefficients.tolist(),
            "intercept": model.intercept,
            "mean": model.mean.tolist(),
            "scale": model.scale.tolist(),
            "label_transform": table.label_transform,
            "train_rmse_days": evaluation.rmse(pred, table.labels()),
            "train_mape_percent": evaluation.mape(pred, table.labels()),
        }),
        out / "ridge.json",
    )
    man.write(out)


STAGES: dict[str, Callable] = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "cluster": cmd_cluster,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "baseline": cmd_baseline,
}

_STAGE_ERRORS = (
    CliError,
    dataset.DataError,
    clustering.InfeasibleClustering,
    hbm.ModelError,
    mcmc.SamplerDivergence,
    baseline.RidgeError,
    evaluation.EvalError,
    ValueError,
    KeyError,
    OSError,
)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        cfg = _resolve(args.command, args)
        STAGES[args.command](args, cfg)
    except _STAGE_ERRORS as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        if module in ("builtins", "cli"):
            module = args.command
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"hbmlife {args.command}: {module}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
