"""Metrics, repeated k-fold cross-validation and report / plot-data output."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import baseline, hbm
from .clustering import GroupAssignment, InfeasibleClustering, assign_group, constrained_kmeans
from .dataset import FeatureTable, forward_transform, inverse_transform

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics


def _pair(pred, truth):
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size != t.size:
        raise EvalError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise EvalError("need at least one prediction")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def mape(pred, truth) -> float:
    """Mean absolute percentage error, in percent."""
    p, t = _pair(pred, truth)
    if np.any(t == 0):
        raise EvalError("MAPE is undefined when a true value is zero")
    return float(100.0 * np.mean(np.abs((t - p) / t)))


def vpc_arrays(labels, groups) -> float:
    y = np.asarray(labels, dtype=float).ravel()
    g = np.asarray(groups).ravel()
    if y.size != g.size:
        raise EvalError("labels and group ids differ in length")
    ids = np.unique(g)
    if ids.size < 2 or y.size < 2:
        raise EvalError("VPC needs at least two groups and two cells (sample variances undefined)")
    grand = y.mean()
    group_means = {j: y[g == j].mean() for j in ids}
    dev = np.array([group_means[j] - grand for j in ids])
    resid = y - np.array([group_means[j] for j in g])
    var_group = dev.var(ddof=1)
    var_ind = resid.var(ddof=1)
    total = var_group + var_ind
    if total == 0:
        raise EvalError("VPC is undefined when all labels are equal")
    return float(var_group / total)


def vpc(labels: Mapping[str, float], membership: Mapping[str, int]) -> float:
    """Share of label variance explained by group membership.

    Between-group term: sample variance of the per-group mean deviations
    (one term per group). Within-group term: sample variance of every cell's
    residual from its group mean.
    """
    ids = list(labels)
    missing = [c for c in ids if c not in membership]
    if missing:
        raise EvalError(f"cell {missing[0]!r} has no group")
    return vpc_arrays([labels[c] for c in ids], [membership[c] for c in ids])


# ---------------------------------------------------------------------------
# Model specs


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 8
    min_size: int = 10
    max_size: int = 100
    n_restarts: int = 10


@dataclass(frozen=True)
class MeanSpec:
    """Predicts the training-set mean lifetime (days) for every cell."""

    tag: str = "mean"

    def fit_predict(self, train: FeatureTable, test: FeatureTable, assignment, seed, threads=1):
        return np.full(len(test), train.labels().mean()), {}


@dataclass(frozen=True)
class RidgeSpec:
    tag: str = "ridge3"
    features: tuple[str, ...] = ("f1", "f2", "f3")
    lambda_grid: tuple[float, ...] = baseline.DEFAULT_LAMBDA_GRID
    inner_folds: int = 5

    def fit_predict(self, train: FeatureTable, test: FeatureTable, assignment, seed, threads=1):
        x = train.matrix(self.features)
        y = train.transformed_labels()
        lam = baseline.select_lambda(x, y, self.lambda_grid, min(self.inner_folds, len(train)), seed)
        model = baseline.fit_ridge(x, y, lam)
        pred = model.predict(test.matrix(self.features))
        return inverse_transform(pred, train.label_transform), {"lambda": lam}


@dataclass(frozen=True)
class HbmSpec:
    tag: str = "hbm"
    model: hbm.ModelConfig = field(default_factory=hbm.ModelConfig)
    mcmc: hbm.McmcConfig = field(default_factory=hbm.McmcConfig)

    def fit_predict(self, train: FeatureTable, test: FeatureTable, assignment, seed, threads=1):
        post = hbm.fit(train, assignment, self.model, self.mcmc, seed, threads)
        means = []
        for row in test.rows:
            j = assign_group(row.g, assignment)
            means.append(hbm.predict(row, post, group=j, g_value=row.g).mean)
        info = {
            "standardization": post.standardization.to_json(),
            "rhat_max": float(np.nanmax(post.diagnostics["rhat"])),
        }
        return inverse_transform(np.array(means), post.config.label_transform), info


def default_models(mcmc: hbm.McmcConfig | None = None, sigma_y: float = 1.0) -> dict:
    """Model specs known to the CLI by tag."""
    mcfg = hbm.ModelConfig(sigma_y=sigma_y)
    return {
        "hbm": HbmSpec("hbm", mcfg, mcmc or hbm.McmcConfig()),
        "ridge3": RidgeSpec("ridge3", ("f1", "f2", "f3")),
        "ridge4": RidgeSpec("ridge4", ("f1", "f2", "f3", "g")),
        "mean": MeanSpec("mean"),
    }


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class TrialResult:
    model: str
    repeat: int
    fold: int
    rmse_days: float
    mape_percent: float


METRIC_KEYS = ("rmse_median", "rmse_mean", "mape_median", "mape_mean")


def aggregate(per_trial: Sequence[TrialResult]) -> dict:
    out: dict[str, dict[str, float]] = {}
    models = list(dict.fromkeys(t.model for t in per_trial))
    for m in models:
        r = np.array([t.rmse_days for t in per_trial if t.model == m])
        a = np.array([t.mape_percent for t in per_trial if t.model == m])
        out[m] = {
            "rmse_median": float(np.median(r)),
            "rmse_mean": float(np.mean(r)),
            "mape_median": float(np.median(a)),
            "mape_mean": float(np.mean(a)),
        }
    return out


def improvement(aggregates: Mapping[str, Mapping[str, float]], reference: str) -> dict:
    """Percent reduction of each metric relative to ``reference``."""
    if reference not in aggregates:
        return {}
    ref = aggregates[reference]
    return {
        m: {k: float((ref[k] - v[k]) / ref[k] * 100.0) if ref[k] != 0 else float("nan") for k in METRIC_KEYS}
        for m, v in aggregates.items()
    }


@dataclass
class EvalReport:
    per_trial: list[TrialResult]
    aggregates: dict
    improvement_percent: dict
    reference: str
    vpc: float
    folds: list[dict] = field(default_factory=list)
    predictions: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for t in self.per_trial:
            if t.rmse_days < 0 or t.mape_percent < 0:
                raise EvalError("metrics must be non-negative")
        if not (0.0 <= self.vpc <= 1.0) and not np.isnan(self.vpc):
            raise EvalError("vpc must lie in [0, 1]")

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(t.model for t in self.per_trial))

    def trials(self, model: str) -> list[TrialResult]:
        return [t for t in self.per_trial if t.model == model]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "reference": self.reference,
            "vpc": self.vpc,
            "aggregates": self.aggregates,
            "improvement_percent": self.improvement_percent,
            "per_trial": [asdict(t) for t in self.per_trial],
            "folds": self.folds,
            "predictions": self.predictions,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "EvalReport":
        return cls(
            per_trial=[TrialResult(**t) for t in doc["per_trial"]],
            aggregates=dict(doc["aggregates"]),
            improvement_percent=dict(doc["improvement_percent"]),
            reference=doc["reference"],
            vpc=float(doc["vpc"]),
            folds=list(doc.get("folds", [])),
            predictions=list(doc.get("predictions", [])),
            config=dict(doc.get("config", {})),
            seed=int(doc.get("seed", 0)),
        )


def _subseed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def run_cv(
    table: FeatureTable,
    models: Sequence,
    k: int = 5,
    repeats: int = 4,
    cluster_config: ClusterConfig = ClusterConfig(),
    seed: int = 0,
    reference: str = "ridge3",
    threads: int = 1,
) -> EvalReport:
    """Repeated k-fold CV of every model spec, scored in days.

    Each repeat shuffles with its own sub-seed. Inside a fold the clusters,
    feature standardization and model fits all see training cells only;
    test cells join the nearest training centroid.
    """
    if k < 2 or repeats < 1:
        raise EvalError("need k >= 2 and repeats >= 1")
    if not models:
        raise EvalError("no models to evaluate")
    table.labels()  # raises on unlabeled cells
    n = len(table)
    if n < k:
        raise EvalError(f"{n} cells cannot fill {k} folds")
    tags = [m.tag for m in models]
    if len(set(tags)) != len(tags):
        raise EvalError(f"duplicate model tags {tags}")
    smallest_train = n - int(np.ceil(n / k))
    if cluster_config.min_size * cluster_config.k > smallest_train:
        raise EvalError(
            f"training folds hold as few as {smallest_train} cells but clustering needs "
            f"min_size*k = {cluster_config.min_size}*{cluster_config.k} = "
            f"{cluster_config.min_size * cluster_config.k}; lower min_size or k"
        )

    splits = []
    for r in range(repeats):
        perm = np.random.default_rng([seed, r]).permutation(n)
        for f, test_idx in enumerate(np.array_split(perm, k)):
            splits.append((r, f, np.sort(test_idx)))

    def run_fold(split):
        r, f, test_idx = split
        train_idx = np.setdiff1d(np.arange(n), test_idx)
        train, test = table.subset(train_idx), table.subset(test_idx)
        cluster_seed = _subseed(seed, r, f, 0)
        try:
            assignment = constrained_kmeans(
                dict(zip(train.cell_ids, train.column("g"))),
                cluster_config.k,
                cluster_config.min_size,
                cluster_config.max_size,
                cluster_config.n_restarts,
                seed=cluster_seed,
            )
        except InfeasibleClustering as exc:
            raise EvalError(f"repeat {r} fold {f}: {exc}; lower min_size or k") from None
        truth = test.labels()
        rows, preds, infos = [], [], {}
        for mi, spec in enumerate(models):
            pred, info = spec.fit_predict(train, test, assignment, _subseed(seed, r, f, mi + 1), 1)
            rows.append(TrialResult(spec.tag, r, f, rmse(pred, truth), mape(pred, truth)))
            infos[spec.tag] = info
            preds.extend(
                {"repeat": r, "fold": f, "model": spec.tag, "cell_id": cid, "actual_days": float(a), "predicted_days": float(p)}
                for cid, a, p in zip(test.cell_ids, truth, pred)
            )
        fold_log = {
            "repeat": r,
            "fold": f,
            "test_ids": test.cell_ids,
            "cluster_seed": cluster_seed,
            "centroids": assignment.centroids.ravel().tolist(),
            "sizes": assignment.sizes.tolist(),
            "models": infos,
        }
        return rows, preds, fold_log

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run_fold, splits))
    else:
        results = [run_fold(s) for s in splits]

    per_trial, predictions, folds = [], [], []
    # stable order: (model, repeat, fold)
    order = {t: i for i, t in enumerate(tags)}
    for rows, preds, fold_log in results:
        per_trial.extend(rows)
        predictions.extend(preds)
        folds.append(fold_log)
    per_trial.sort(key=lambda t: (order[t.model], t.repeat, t.fold))
    predictions.sort(key=lambda p: (order[p["model"]], p["repeat"], p["fold"]))

    try:
        full = constrained_kmeans(
            dict(zip(table.cell_ids, table.column("g"))),
            cluster_config.k,
            cluster_config.min_size,
            cluster_config.max_size,
            cluster_config.n_restarts,
            seed=_subseed(seed, 999_999),
        )
        v = vpc(dict(zip(table.cell_ids, table.labels())), full.membership)
    except (InfeasibleClustering, EvalError) as exc:
        log.warning("VPC not computed: %s", exc)
        v = float("nan")

    aggs = aggregate(per_trial)
    ref = reference if reference in aggs else tags[0]
    return EvalReport(
        per_trial=per_trial,
        aggregates=aggs,
        improvement_percent=improvement(aggs, ref),
        reference=ref,
        vpc=v,
        folds=folds,
        predictions=predictions,
        config={
            "k": k,
            "repeats": repeats,
            "cluster": asdict(cluster_config),
            "models": [_spec_json(m) for m in models],
            "label_transform": table.label_transform,
        },
        seed=seed,
    )


def _spec_json(spec) -> dict:
    # round-trip through JSON so nested tuples become lists
    return json.loads(json.dumps({"type": type(spec).__name__, **asdict(spec)}))


# ---------------------------------------------------------------------------
# Output


def format_table(report: EvalReport, models: Sequence[str] | None = None, target: str = "hbm") -> str:
    """Markdown table in the layout metric x statistic, one column per model."""
    models = list(models or report.models)
    header = ["Metric", "Stat", *models]
    show_imp = target in report.improvement_percent and target != report.reference
    if show_imp:
        header.append(f"Improvement ({target} vs {report.reference})")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for metric, unit in (("rmse", " d"), ("mape", " %")):
        for stat in ("median", "mean"):
            key = f"{metric}_{stat}"
            cells = [metric.upper(), stat.capitalize()]
            cells += [f"{report.aggregates[m][key]:.3f}{unit}" for m in models]
            if show_imp:
                cells.append(f"{report.improvement_percent[target][key]:.1f}%")
            lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _svg_scatter(points: Sequence[tuple[float, float, str]]) -> str:
    size, pad = 400.0, 40.0
    vals = [v for p in points for v in p[:2]] or [0.0, 1.0]
    lo, hi = min(vals), max(vals)
    if hi == lo:
        hi = lo + 1.0

    def sx(v):
        return pad + (v - lo) / (hi - lo) * (size - 2 * pad)

    def sy(v):
        return size - pad - (v - lo) / (hi - lo) * (size - 2 * pad)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    colors = {m: palette[i % len(palette)] for i, m in enumerate(dict.fromkeys(p[2] for p in points))}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" height="{size:g}" viewBox="0 0 {size:g} {size:g}">',
        f'<line x1="{sx(lo):.3f}" y1="{sy(lo):.3f}" x2="{sx(hi):.3f}" y2="{sy(hi):.3f}" stroke="#555" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2:g}" y="{size - 8:g}" text-anchor="middle" font-size="12">actual EoL (days)</text>',
        f'<text x="12" y="{size / 2:g}" transform="rotate(-90 12 {size / 2:g})" text-anchor="middle" font-size="12">predicted EoL (days)</text>',
    ]
    for actual, predicted, model in points:
        out.append(
            f'<circle cx="{sx(actual):.3f}" cy="{sy(predicted):.3f}" r="3" fill="{colors[model]}" fill-opacity="0.6"/>'
        )
    for i, (m, c) in enumerate(colors.items()):
        out.append(f'<text x="{pad + 4:g}" y="{pad + 14 * i:g}" font-size="11" fill="{c}">{m}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot_data(
    report: EvalReport, predictions: Sequence[Mapping] | None = None, out_dir=".", comments: Sequence[str] = ()
) -> list[Path]:
    """Write ``scatter.csv``, ``hist.csv`` and ``scatter.svg`` into ``out_dir``.

    The scatter uses the first repeat, in which every cell is predicted once
    per model.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise EvalError(f"cannot write to {out}: {exc}") from None
    preds = list(report.predictions if predictions is None else predictions)
    first = min((p.get("repeat", 0) for p in preds), default=0)
    scatter = [p for p in preds if p.get("repeat", 0) == first]

    paths = [out / "scatter.csv", out / "hist.csv", out / "scatter.svg"]
    with paths[0].open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "actual_days", "predicted_days", "model"])
        for p in scatter:
            w.writerow([p["cell_id"], repr(float(p["actual_days"])), repr(float(p["predicted_days"])), p["model"]])
    with paths[1].open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "value"])
        for t in report.per_trial:
            w.writerow([t.model, "rmse_days", repr(t.rmse_days)])
            w.writerow([t.model, "mape_percent", repr(t.mape_percent)])
    svg = _svg_scatter([(float(p["actual_days"]), float(p["predicted_days"]), p["model"]) for p in scatter])
    if comments:
        svg = "".join(f"<!-- {c} -->\n" for c in comments) + svg
    paths[2].write_text(svg, encoding="utf-8")
    return paths


def write_trials_csv(report: EvalReport, path, comments: Sequence[str] = ()) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "repeat", "fold", "rmse_days", "mape_percent"])
        for t in report.per_trial:
            w.writerow([t.model, t.repeat, t.fold, repr(t.rmse_days), repr(t.mape_percent)])


def training_mean_check(table: FeatureTable, test_ids: Sequence[str]) -> float:
    """RMSE of predicting the training mean on ``test_ids``, computed directly."""
    ids = set(test_ids)
    y = dict(zip(table.cell_ids, table.labels()))
    train = np.array([v for c, v in y.items() if c not in ids])
    test = np.array([y[c] for c in test_ids])
    return float(np.sqrt(np.mean((test - train.mean()) ** 2)))


__all__ = [
    "ClusterConfig",
    "EvalReport",
    "HbmSpec",
    "MeanSpec",
    "RidgeSpec",
    "TrialResult",
    "aggregate",
    "default_models",
    "emit_plot_data",
    "format_table",
    "improvement",
    "mape",
    "rmse",
    "run_cv",
    "vpc",
    "write_trials_csv",
    "forward_transform",
]
