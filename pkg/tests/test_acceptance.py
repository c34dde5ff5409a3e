"""Acceptance suite: one test class per criterion, summarised as PASS/FAIL lines.

Run alone with ``pytest tests/test_acceptance.py``. Criterion 10 uses a
169-cell synthetic stand-in unless ``HBMLIFE_REAL_FEATURES`` points at a
feature CSV extracted from the real fleet.
"""

import itertools
import json
import os
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from hbmlife import evaluation, mcmc
from hbmlife.cli import main
from hbmlife.clustering import GroupAssignment, constrained_kmeans
from hbmlife.dataset import ChargeProtocol, SyntheticConfig, generate_synthetic, write_feature_table
from hbmlife.evaluation import ClusterConfig, HbmSpec, RidgeSpec, run_cv, vpc, vpc_arrays
from hbmlife.features import average_charge_crate
from hbmlife.hbm import GroupData, McmcConfig, ModelConfig, fit, marginal_log_likelihood, sample_posterior, theta_conditional


@pytest.mark.criterion(1, "average C-rate of (5.4C/40%, 3.6C/40%, 1C/20%) is 3.8C")
class TestC1AverageCrate:
    def test_exact(self):
        assert average_charge_crate(ChargeProtocol(((5.4, 0.4), (3.6, 0.4), (1.0, 0.2)), "c")) == 3.8


@pytest.mark.criterion(2, "VPC endpoints and 4-cell hand case")
class TestC2Vpc:
    def test_equal_group_means(self):
        assert vpc_arrays([1.0, 3.0, 1.0, 3.0, 2.0, 2.0], [0, 0, 1, 1, 2, 2]) == pytest.approx(0.0, abs=1e-9)

    def test_zero_within_variance(self):
        assert vpc_arrays([4.0, 4.0, 7.0, 7.0, 1.0], [0, 0, 1, 1, 2]) == pytest.approx(1.0, abs=1e-9)

    def test_hand_case(self):
        got = vpc({"a": 1.0, "b": 3.0, "c": 11.0, "d": 13.0}, {"a": 0, "b": 0, "c": 1, "d": 1})
        assert got == pytest.approx(50.0 / (50.0 + 4.0 / 3.0), abs=1e-9)
        assert got == pytest.approx(0.9740, abs=5e-5)


def _three_cell_group():
    x = np.array([[1.0, 0.3, -0.5], [1.0, -1.0, 0.2], [1.0, 0.8, 0.9]])
    return GroupData(0, x, np.array([0.4, -0.2, 1.1]), np.array([1.0, 2.5]))


@pytest.mark.criterion(3, "closed-form marginal likelihood vs Monte Carlo (0.05) and dense log-pdf (1e-8)")
class TestC3Marginal:
    gamma = np.array([[0.1, 0.05], [0.3, -0.1], [-0.2, 0.0]])
    sigma = np.array([0.5, 0.4, 0.3])
    sigma_y = 0.5

    def test_monte_carlo(self):
        gr = _three_cell_group()
        rng = np.random.default_rng(2024)
        theta = self.gamma @ gr.g_vec + self.sigma * rng.standard_normal((1_000_000, 3))
        ll = norm.logpdf(gr.labels, theta @ gr.design.T, self.sigma_y).sum(axis=1)
        estimate = logsumexp(ll) - np.log(ll.size)
        assert abs(marginal_log_likelihood(gr, self.gamma, self.sigma, self.sigma_y) - estimate) < 0.05

    def test_dense_gaussian(self):
        gr = _three_cell_group()
        x = gr.design
        for jitter in (0.0, 1e-9):
            cov = (self.sigma_y**2 + jitter) * np.eye(3) + x @ np.diag(self.sigma**2) @ x.T
            dense = multivariate_normal(x @ (self.gamma @ gr.g_vec), cov).logpdf(gr.labels)
            got = marginal_log_likelihood(gr, self.gamma, self.sigma, self.sigma_y, jitter=jitter)
            assert abs(got - dense) < 1e-8


@pytest.mark.criterion(4, "theta conditional vs grid quadrature (mean 1e-3 abs, cov 1e-2 rel)")
class TestC4Conditional:
    def test_grid(self):
        rng = np.random.default_rng(8)
        x = np.column_stack([np.ones(5), rng.normal(size=5)])
        gr = GroupData(0, x, rng.normal(size=5), np.array([1.0, 3.0]))
        gamma = np.array([[0.1, -0.05], [0.4, 0.02]])
        sigma = np.array([0.7, 0.5])
        sigma_y = 0.8
        axes = np.linspace(-4.0, 4.0, 1001)
        t0, t1 = np.meshgrid(axes, axes, indexing="ij")
        pts = np.column_stack([t0.ravel(), t1.ravel()])
        logp = norm.logpdf(gr.labels, pts @ x.T, sigma_y).sum(axis=1)
        logp += norm.logpdf(pts, gamma @ gr.g_vec, sigma).sum(axis=1)
        w = np.exp(logp - logp.max())
        w /= w.sum()
        mean = w @ pts
        cov = (pts - mean).T @ ((pts - mean) * w[:, None])
        got = theta_conditional(gr, gamma, sigma, sigma_y)
        assert np.max(np.abs(got.mean - mean)) < 1e-3
        assert np.max(np.abs(got.cov - cov) / np.abs(cov)) < 1e-2


@pytest.mark.criterion(5, "sampler matches a known Gaussian posterior within 3 MCSE, R-hat < 1.05")
class TestC5Sampler:
    def _check(self, chains, mean, var):
        flat = chains.reshape(-1, chains.shape[2])
        assert np.all(np.abs(flat.mean(axis=0) - mean) < 3 * mcmc.mcse_mean(chains))
        assert np.all(np.abs(flat.var(axis=0, ddof=1) - var) < 3 * mcmc.mcse_variance(chains))
        assert np.all(mcmc.split_rhat(chains) < 1.05)

    def test_bayesian_linear_regression(self):
        rng = np.random.default_rng(5)
        x = np.column_stack([np.ones(20), rng.normal(size=20)])
        y = x @ np.array([0.5, -1.0]) + 0.7 * rng.normal(size=20)
        prec = np.eye(2) / 4.0 + x.T @ x / 0.49
        cov = np.linalg.inv(prec)
        mean = cov @ (x.T @ y / 0.49)

        def log_post(b):
            r = y - x @ b
            return -0.5 * (r @ r) / 0.49 - 0.5 * (b @ b) / 4.0

        run = mcmc.sample(log_post, rng.normal(size=(4, 2)), 1000, 4000, seed=1)
        self._check(run.samples, mean, np.diag(cov))

    def test_hbm_pinned_scale_submodel(self):
        # intercept-only groups with pinned scales: the two entries of gamma
        # have an exact Gaussian posterior with theta integrated out
        rng = np.random.default_rng(6)
        groups = []
        for j, g in enumerate((2.0, 3.5, 5.0)):
            y = 0.2 + 0.1 * g + 0.3 * rng.normal() + 0.5 * rng.normal(size=8)
            groups.append(GroupData(j, np.ones((8, 1)), y, np.array([1.0, g])))
        sigma, sigma_y = 0.3, 0.5
        cfg = ModelConfig(features=(), fixed_sigma=(sigma,), sigma_y=sigma_y)
        post = sample_posterior(groups, cfg, McmcConfig(n_chains=4, n_warmup=1000, n_samples=4000), seed=3, scheme="joint")
        prec = np.eye(2) / 100.0
        eta = np.zeros(2)
        for gr in groups:
            a = np.outer(np.ones(gr.n), gr.g_vec)
            ci = np.linalg.inv((sigma_y**2 + 1e-9) * np.eye(gr.n) + sigma**2 * np.ones((gr.n, gr.n)))
            prec += a.T @ ci @ a
            eta += a.T @ ci @ gr.labels
        cov = np.linalg.inv(prec)
        self._check(post.gamma_samples.reshape(4, 4000, 2), cov @ eta, np.diag(cov))


@pytest.mark.criterion(6, "SBC: 90% gamma intervals cover truth in 80-98% of >= 50 replicates")
class TestC6Calibration:
    REPLICATES = 100

    @pytest.mark.slow
    def test_coverage(self):
        hits = np.zeros((4, 2))
        for r in range(self.REPLICATES):
            rng = np.random.default_rng([99, r])
            gamma = 10.0 * rng.standard_normal((4, 2))  # hyper-prior N(0, 10^2)
            sigma = np.abs(rng.standard_normal(4))  # half-normal(1)
            cfg = SyntheticConfig(
                n_groups=8,
                cells_per_group=15,
                gamma=tuple(map(tuple, gamma)),
                sigma=tuple(sigma),
                sigma_y=1.0,
                label_transform="identity",
            )
            table, truth = generate_synthetic(cfg, seed=r)
            sizes = np.bincount(list(truth.membership.values()))
            groups = GroupAssignment(8, np.zeros((8, 1)), truth.membership, sizes, 0, 100)
            post = fit(
                table,
                groups,
                ModelConfig(label_transform="identity", standardize=False),
                McmcConfig(n_chains=4, n_warmup=500, n_samples=500),
                seed=r,
            )
            lo, hi = np.percentile(post.gamma_samples, [5, 95], axis=0)
            hits += (lo <= gamma) & (gamma <= hi)
        coverage = hits / self.REPLICATES
        print("gamma 90% interval coverage:\n", coverage)
        assert np.all((coverage >= 0.80) & (coverage <= 0.98))


@pytest.mark.criterion(7, "HBM beats pooled 3-feature ridge in >= 16 of 20 CV trials on strong-group data")
class TestC7HierarchicalAdvantage:
    @pytest.mark.slow
    def test_trials(self):
        table, truth = generate_synthetic(SyntheticConfig(), seed=0)
        strength = vpc(dict(zip(table.cell_ids, table.transformed_labels())), truth.membership)
        assert strength >= 0.5
        models = [HbmSpec("hbm", ModelConfig(), McmcConfig()), RidgeSpec("ridge3")]
        report = run_cv(table, models, k=5, repeats=4, cluster_config=ClusterConfig(), seed=1)
        hbm_rmse = np.array([t.rmse_days for t in report.trials("hbm")])
        ridge_rmse = np.array([t.rmse_days for t in report.trials("ridge3")])
        assert hbm_rmse.size == ridge_rmse.size == 20
        wins = int(np.sum(hbm_rmse < ridge_rmse))
        print(f"VPC {strength:.3f}; HBM wins {wins}/20; median RMSE {np.median(hbm_rmse):.3f} vs {np.median(ridge_rmse):.3f} days")
        assert wins >= 16
        assert np.median(hbm_rmse) < np.median(ridge_rmse)


def _brute_force(x, k, lo, hi):
    best = np.inf
    for labels in itertools.product(range(k), repeat=x.size):
        lab = np.array(labels)
        sizes = np.bincount(lab, minlength=k)
        if sizes.min() < lo or sizes.max() > hi:
            continue
        best = min(best, sum(((x[lab == j] - x[lab == j].mean()) ** 2).sum() for j in range(k) if sizes[j]))
    return best


@pytest.mark.criterion(8, "constrained clustering: exact vs enumeration, size bounds on 1000 instances")
class TestC8Clustering:
    def test_exhaustive_enumeration(self):
        rng = np.random.default_rng(88)
        for trial in range(40):
            n = int(rng.integers(4, 9))
            k = int(rng.integers(2, 4))
            lo = int(rng.integers(0, n // k + 1))
            hi = int(rng.integers(max(lo, -(-n // k)), n + 1))
            x = rng.normal(0, 2, n) if trial % 2 else rng.uniform(0, 10, n)
            a = constrained_kmeans({f"c{i}": v for i, v in enumerate(x)}, k, lo, hi, n_restarts=5, seed=trial)
            assert a.objective == pytest.approx(_brute_force(x, k, lo, hi), rel=1e-12, abs=1e-12)

    def test_size_bounds_random(self):
        rng = np.random.default_rng(1000)
        for trial in range(1000):
            n = int(rng.integers(5, 60))
            k = int(rng.integers(1, 6))
            lo = int(rng.integers(0, n // k + 1))
            hi = int(rng.integers(max(lo, -(-n // k), 1), n + 1))
            x = rng.uniform(2, 6, n)
            a = constrained_kmeans({f"c{i}": v for i, v in enumerate(x)}, k, lo, hi, n_restarts=1, seed=trial)
            assert a.sizes.sum() == n
            assert a.sizes.min() >= lo and a.sizes.max() <= hi


def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _pipeline(root: Path) -> None:
    fast = ["--chains", "2", "--warmup", "200", "--samples", "200"]
    s = root / "synth"
    steps = [
        ["synth", "--seed", "1", "--groups", "8", "--cells", "15", "--with-cycles", "12", "--out", str(s)],
        ["extract", "--cycles", str(s / "cycles"), "--out", str(root / "extract")],
        ["cluster", "--table", str(s / "features.csv"), "--seed", "2", "--out", str(root / "cluster")],
        ["fit", "--table", str(s / "features.csv"), "--assignment", str(root / "cluster" / "assignment.csv"), "--seed", "3", *fast, "--out", str(root / "fit")],
        ["predict", "--posterior", str(root / "fit" / "posterior.json"), "--table", str(s / "features.csv"), "--out", str(root / "predict")],
        ["baseline", "--table", str(s / "features.csv"), "--seed", "4", "--out", str(root / "baseline")],
        ["evaluate", "--table", str(s / "features.csv"), "--models", "hbm,ridge3,ridge4", "--repeats", "1", "--seed", "5", *fast, "--out", str(root / "evaluate")],
        ["report", str(root / "evaluate" / "report.json"), "--out", str(root / "table.md")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


@pytest.mark.criterion(9, "every seeded subcommand is byte-identical across two runs")
class TestC9Determinism:
    @pytest.mark.slow
    def test_two_runs(self, tmp_path, monkeypatch):
        snaps = []
        for run in ("a", "b"):
            # identical relative layout so any embedded relative names match too
            root = tmp_path / run
            root.mkdir()
            monkeypatch.chdir(root)
            _pipeline(Path("."))
            snaps.append(_snapshot(root))
        assert snaps[0].keys() == snaps[1].keys()
        assert len(snaps[0]) > 20
        differing = [name for name in snaps[0] if snaps[0][name] != snaps[1][name]]
        assert differing == []


@pytest.mark.criterion(10, "protocol fidelity on a 169-cell table: 5-fold x 4 repeats, summary table layout")
class TestC10Protocol:
    @pytest.mark.slow
    def test_protocol(self, tmp_path, capsys):
        real = os.environ.get("HBMLIFE_REAL_FEATURES")
        if real:
            table_path = Path(real)
            mcmc_flags = []
        else:
            cfg = SyntheticConfig(n_groups=13, cells_per_group=13)
            table, _ = generate_synthetic(cfg, seed=169)
            table_path = tmp_path / "features.csv"
            write_feature_table(table, table_path)
            mcmc_flags = ["--warmup", "300", "--samples", "300"]
        out = tmp_path / "eval"
        argv = ["evaluate", "--table", str(table_path), "--models", "hbm,ridge3,ridge4", "--seed", "0", "--out", str(out), *mcmc_flags]
        assert main(argv) == 0
        doc = json.loads((out / "report.json").read_text())
        report = evaluation.EvalReport.from_json(doc)
        n = sum(len(f["test_ids"]) for f in report.folds if f["repeat"] == 0)
        if not real:
            assert n == 169
        assert report.config["k"] == 5 and report.config["repeats"] == 4
        for m in ("hbm", "ridge3", "ridge4"):
            assert len(report.trials(m)) == 20
        # test folds of 169 cells are 34 or 33; training folds 135 or 136
        assert {len(f["test_ids"]) for f in report.folds} <= {n // 5, n // 5 + 1}
        assert report.reference == "ridge3"
        for m in ("hbm", "ridge4"):
            for key in evaluation.METRIC_KEYS:
                ref = report.aggregates["ridge3"][key]
                expected = (ref - report.aggregates[m][key]) / ref * 100
                assert report.improvement_percent[m][key] == pytest.approx(expected, rel=1e-12)
        capsys.readouterr()
        assert main(["report", str(out / "report.json"), str(out / "trials.csv")]) == 0
        text = capsys.readouterr().out
        lines = [ln for ln in text.splitlines() if ln.startswith("|")]
        assert lines[0] == "| Metric | Stat | hbm | ridge3 | ridge4 | Improvement (hbm vs ridge3) |"
        assert [ln.split("|")[1:3] for ln in lines[2:]] == [
            [" RMSE ", " Median "],
            [" RMSE ", " Mean "],
            [" MAPE ", " Median "],
            [" MAPE ", " Mean "],
        ]
        print(text)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
