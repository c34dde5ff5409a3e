"""Two-level hierarchical Bayesian linear model.

Level 1, cell ``i`` in group ``j``: ``y_ji ~ N(theta_j . x_ji, sigma_y^2)``
with ``x_ji = [1, features...]``. Level 2: ``theta_j ~ N(gamma @ g_j,
diag(sigma^2))`` with ``g_j = [1, mean g of the group]``. Hyper-prior
``gamma ~ N(0, hyper_prior_scale^2 I)``; one level-2 scale per coefficient,
shared across groups.

``theta_j`` is integrated out analytically, so MCMC only explores
``(gamma, log sigma[, log sigma_y])``. Given a draw of those, each group's
``theta_j`` posterior is a conjugate Gaussian.

Shapes: ``p`` coefficients per group (4 for F1-F3), ``gamma`` is ``(p, 2)``
with columns (intercept, g-slope).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from . import mcmc
from .clustering import GroupAssignment, assign_group
from .dataset import FeatureTable, forward_transform, inverse_transform

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_FEATURES = ("f1", "f2", "f3")


class ModelError(ValueError):
    pass


class Gaussian(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class ScalePrior:
    """Prior on each level-2 scale: ``halfnormal`` or ``halfcauchy``."""

    kind: str = "halfnormal"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("halfnormal", "halfcauchy"):
            raise ModelError(f"unknown scale prior {self.kind!r}")
        if not self.scale > 0:
            raise ModelError("scale prior needs scale > 0")

    def logpdf(self, s: np.ndarray) -> float:
        z = s / self.scale
        if self.kind == "halfnormal":
            return float(np.sum(0.5 * math.log(2.0 / math.pi) - math.log(self.scale) - 0.5 * z * z))
        return float(np.sum(math.log(2.0 / (math.pi * self.scale)) - np.log1p(z * z)))


@dataclass(frozen=True)
class ModelConfig:
    sigma_y: float = 1.0
    # when set, sigma_y gets a half-normal prior of this scale and is sampled
    sigma_y_prior_scale: float | None = None
    hyper_prior_scale: float = 10.0
    scale_prior: ScalePrior = field(default_factory=ScalePrior)
    # pins the level-2 scales instead of sampling them
    fixed_sigma: tuple[float, ...] | None = None
    label_transform: str = "log10"
    standardize: bool = True
    features: tuple[str, ...] = DEFAULT_FEATURES
    jitter: float = 1e-9

    def __post_init__(self):
        if not (self.sigma_y > 0 and self.hyper_prior_scale > 0):
            raise ModelError("sigma_y and hyper_prior_scale must be > 0")
        if self.sigma_y_prior_scale is not None and not self.sigma_y_prior_scale > 0:
            raise ModelError("sigma_y_prior_scale must be > 0")
        if self.fixed_sigma is not None and any(s <= 0 for s in self.fixed_sigma):
            raise ModelError("fixed_sigma entries must be > 0")
        if self.fixed_sigma is not None and len(self.fixed_sigma) != len(self.features) + 1:
            raise ModelError("fixed_sigma needs one entry per coefficient")

    def to_json(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        if self.fixed_sigma is not None:
            d["fixed_sigma"] = list(self.fixed_sigma)
        return d

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelConfig":
        doc = dict(doc)
        doc["scale_prior"] = ScalePrior(**doc.get("scale_prior", {}))
        doc["features"] = tuple(doc.get("features", DEFAULT_FEATURES))
        if doc.get("fixed_sigma") is not None:
            doc["fixed_sigma"] = tuple(doc["fixed_sigma"])
        return cls(**doc)


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    target_accept: float = 0.234
    adapt_every: int = 50
    # "natural": walk on the scales themselves, reflected at zero; "log": walk on log-scales
    scale_space: str = "natural"

    def __post_init__(self):
        if self.n_chains < 1 or self.n_samples < 1 or self.n_warmup < 0:
            raise ModelError("mcmc counts must be >= 1 (warmup >= 0)")
        if self.scale_space not in ("natural", "log"):
            raise ModelError(f"scale_space must be 'natural' or 'log', got {self.scale_space!r}")


@dataclass(frozen=True)
class GroupData:
    index: int
    design: np.ndarray  # (n, p), first column ones
    labels: np.ndarray  # (n,)
    g_vec: np.ndarray  # (2,) = (1, mean g)
    cell_ids: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.design, dtype=float)
        y = np.asarray(self.labels, dtype=float).ravel()
        g = np.asarray(self.g_vec, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ModelError(f"group {self.index}: design rows {x.shape} do not match {y.size} labels")
        if x.shape[0] and not np.all(x[:, 0] == 1.0):
            raise ModelError(f"group {self.index}: first design column must be all ones")
        if g.shape != (2,) or g[0] != 1.0:
            raise ModelError(f"group {self.index}: g_vec must be (1, mean g)")
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "g_vec", g)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def p(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class Standardization:
    names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, names: Sequence[str]) -> "Standardization":
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(tuple(names), mean, scale)

    @classmethod
    def identity(cls, names: Sequence[str]) -> "Standardization":
        return cls(tuple(names), np.zeros(len(names)), np.ones(len(names)))

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def to_json(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, doc) -> "Standardization":
        return cls(tuple(doc["names"]), np.asarray(doc["mean"], float), np.asarray(doc["scale"], float))


# ---------------------------------------------------------------------------
# Closed-form pieces


class _Stats(NamedTuple):
    xtx: np.ndarray  # (J, p, p)
    xty: np.ndarray  # (J, p)
    yty: np.ndarray  # (J,)
    n: np.ndarray  # (J,)
    g: np.ndarray  # (J, 2)


def _stats(groups: Sequence[GroupData]) -> _Stats:
    return _Stats(
        np.stack([gr.design.T @ gr.design for gr in groups]),
        np.stack([gr.design.T @ gr.labels for gr in groups]),
        np.array([gr.labels @ gr.labels for gr in groups]),
        np.array([gr.n for gr in groups], dtype=float),
        np.stack([gr.g_vec for gr in groups]),
    )


def _marginal_terms(st: _Stats, prior_mean: np.ndarray, s: np.ndarray, sy2: float) -> np.ndarray:
    """Per-group log N(y; X m, sy2 I + X diag(s^2) X^T) from sufficient statistics.

    Woodbury with ``U = X diag(s)``: the n x n solve collapses to a p x p
    Cholesky of ``A = sy2 I + U^T U``.
    """
    p = s.size
    if not sy2 > 0:
        # sy2 I + X S^2 X^T is singular or indefinite once n exceeds rank(X)
        raise ModelError(
            f"marginal covariance not positive definite after jitter: noise variance {sy2:.3e} <= 0 "
            "(condition number inf)"
        )
    a = sy2 * np.eye(p) + s[:, None] * st.xtx * s[None, :]
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        conds = [np.linalg.cond(ai) for ai in a]
        raise ModelError(
            f"marginal covariance not positive definite after jitter (condition number {max(conds):.3e})"
        ) from None
    xtx_m = np.einsum("jab,jb->ja", st.xtx, prior_mean)
    rtr = st.yty - 2.0 * np.einsum("ja,ja->j", prior_mean, st.xty) + np.einsum("ja,ja->j", prior_mean, xtx_m)
    b = s * (st.xty - xtx_m)
    w = np.linalg.solve(chol, b[..., None])[..., 0]
    quad = (rtr - np.einsum("ja,ja->j", w, w)) / sy2
    logdet = (st.n - p) * math.log(sy2) + 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return -0.5 * (st.n * LOG_2PI + logdet + quad)


def marginal_log_likelihood(
    group: GroupData, gamma, sigma, sigma_y: float, jitter: float = 1e-9
) -> float:
    """log P(Y_j | gamma, sigma) with theta_j integrated out.

    Equals ``log N(y; X gamma g_j, sigma_y^2 I + X diag(sigma^2) X^T)``;
    ``jitter`` is added to the covariance diagonal.
    """
    gamma = np.asarray(gamma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or sigma_y <= 0:
        raise ModelError("scales must be > 0")
    if gamma.shape != (group.p, 2) or sigma.shape != (group.p,):
        raise ModelError(f"gamma must be ({group.p}, 2) and sigma ({group.p},)")
    st = _stats([group])
    m = st.g @ gamma.T
    return float(_marginal_terms(st, m, sigma, sigma_y**2 + jitter)[0])


def theta_conditional(group: GroupData, gamma, sigma, sigma_y: float) -> Gaussian:
    """Conjugate posterior of theta_j given the hyper-parameters and the group's data.

    Precision ``X^T X / sigma_y^2 + diag(sigma)^-2``; with no cells this is
    the level-2 prior itself.
    """
    gamma = np.asarray(gamma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or sigma_y <= 0:
        raise ModelError("scales must be > 0")
    st = _stats([group])
    means, covs = _conditionals(st, gamma[None], sigma[None], np.array([sigma_y]))
    return Gaussian(means[0, 0], covs[0, 0])


def _conditionals(st: _Stats, gammas, sigmas, sigma_ys, chunk: int = 2048):
    """Batched conditionals; returns means (J, S, p) and covariances (J, S, p, p)."""
    n_s, p = sigmas.shape
    n_j = st.xtx.shape[0]
    means = np.empty((n_j, n_s, p))
    covs = np.empty((n_j, n_s, p, p))
    eye = np.eye(p)
    for lo in range(0, n_s, chunk):
        sl = slice(lo, lo + chunk)
        s = sigmas[sl]  # (S, p)
        sy2 = sigma_ys[sl] ** 2  # (S,)
        m = np.einsum("sab,jb->jsa", gammas[sl], st.g)  # (J, S, p)
        # cov = S (I + S XtX S / sy2)^-1 S, stable for tiny and huge scales
        inner = eye + s[None, :, :, None] * st.xtx[:, None] * s[None, :, None, :] / sy2[None, :, None, None]
        try:
            inv = np.linalg.inv(inner)
        except np.linalg.LinAlgError:
            raise ModelError("singular conditional precision") from None
        cov = s[None, :, :, None] * inv * s[None, :, None, :]
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        resid = st.xty[:, None, :] - np.einsum("jab,jsb->jsa", st.xtx, m)
        means[:, sl] = m + np.einsum("jsab,jsb->jsa", cov, resid) / sy2[None, :, None]
        covs[:, sl] = cov
    return means, covs


# ---------------------------------------------------------------------------
# Posterior over hyper-parameters


class _GammaPosterior(NamedTuple):
    mean: np.ndarray  # (2p,), row-major vec of gamma (p, 2)
    chol_prec: np.ndarray  # lower Cholesky factor of the precision
    log_evidence: float  # log p(Y | sigma, sigma_y), gamma integrated out


def _gamma_posterior(st: _Stats, s: np.ndarray, sy2: float, h: float) -> _GammaPosterior:
    """Exact Gaussian posterior of gamma given the scales.

    Every group mean ``X_j gamma g_j`` is linear in ``vec(gamma)`` with rows
    ``kron(x, g_j)``, so with Sigma_j the group's marginal covariance the
    precision is ``I/h^2 + sum_j kron(X_j^T Sigma_j^-1 X_j, g_j g_j^T)``.
    The evidence follows from Bayes' rule evaluated at gamma = 0.
    """
    p = s.size
    a = sy2 * np.eye(p) + s[:, None] * st.xtx * s[None, :]
    b = s[None, :, None] * st.xtx  # S XtX, (J, p, p)
    chol_a = np.linalg.cholesky(a)
    c = np.linalg.solve(chol_a, b)
    k_mat = (st.xtx - np.swapaxes(c, 1, 2) @ c) / sy2
    w = np.linalg.solve(chol_a, (s * st.xty)[..., None])
    k_vec = (st.xty - (np.swapaxes(c, 1, 2) @ w)[..., 0]) / sy2
    gg = st.g[:, :, None] * st.g[:, None, :]
    prec = np.eye(2 * p) / (h * h) + np.einsum("jac,jbd->abcd", k_mat, gg).reshape(2 * p, 2 * p)
    eta = np.einsum("ja,jb->ab", k_vec, st.g).ravel()
    chol = np.linalg.cholesky(prec)
    z = np.linalg.solve(chol, eta)
    mean = np.linalg.solve(chol.T, z)
    # sum_j log N(y_j; 0, Sigma_j), reusing the factor of A
    quad0 = (st.yty - np.einsum("jai,jai->j", w, w)) / sy2
    logdet0 = (st.n - p) * math.log(sy2) + 2.0 * np.log(np.diagonal(chol_a, axis1=1, axis2=2)).sum(axis=1)
    ll0 = float(np.sum(-0.5 * (st.n * LOG_2PI + logdet0 + quad0)))
    log_ev = ll0 - 2 * p * math.log(h) - np.log(np.diag(chol)).sum() + 0.5 * float(z @ z)
    return _GammaPosterior(mean, chol, float(log_ev))


class _Target:
    """Log posterior over the unconstrained MCMC vector.

    ``collapsed``: (sigma[, sigma_y]) with gamma integrated out.
    ``joint``: (vec gamma, sigma[, sigma_y]).
    Scales are stored as logs when ``space == "log"`` (with the log-Jacobian
    added) and as themselves otherwise. Pinned scales drop out of the vector.
    """

    def __init__(self, groups: Sequence[GroupData], config: ModelConfig, scheme: str, space: str = "log"):
        if scheme not in ("collapsed", "joint"):
            raise ModelError(f"unknown sampling scheme {scheme!r}")
        self.groups = groups
        self.space = space
        self.st = _stats(groups)
        self.p = groups[0].p
        self.config = config
        self.scheme = scheme
        self.n_gamma = 2 * self.p if scheme == "joint" else 0
        self.sample_sigma = config.fixed_sigma is None
        self.sample_sigma_y = config.sigma_y_prior_scale is not None
        self.dim = self.n_gamma + (self.p if self.sample_sigma else 0) + int(self.sample_sigma_y)

    @property
    def scale_slice(self) -> slice:
        return slice(self.n_gamma, self.dim)

    def scales(self, v: np.ndarray):
        """(log sigma, log sigma_y) for a state vector."""
        v = np.asarray(v, dtype=float)
        sc = v[self.scale_slice]
        if self.space == "natural":
            with np.errstate(divide="ignore"):
                sc = np.log(sc)
        if self.sample_sigma:
            log_s, sc = sc[: self.p], sc[self.p :]
        else:
            log_s = np.log(np.asarray(self.config.fixed_sigma, dtype=float))
        log_sy = float(sc[0]) if self.sample_sigma_y else math.log(self.config.sigma_y)
        return log_s, log_sy

    def _scale_prior(self, log_s, log_sy) -> float:
        cfg = self.config
        jac = self.space == "log"
        lp = 0.0
        if self.sample_sigma:
            lp += cfg.scale_prior.logpdf(np.exp(log_s)) + (float(np.sum(log_s)) if jac else 0.0)
        if self.sample_sigma_y:
            t = cfg.sigma_y_prior_scale
            lp += 0.5 * math.log(2 / math.pi) - math.log(t) - 0.5 * (math.exp(log_sy) / t) ** 2
            lp += log_sy if jac else 0.0
        return lp

    def __call__(self, v: np.ndarray) -> float:
        log_s, log_sy = self.scales(v)
        if not (np.all(np.isfinite(log_s)) and math.isfinite(log_sy)):
            return -np.inf
        if np.any(np.abs(log_s) > 50) or abs(log_sy) > 50:
            return -np.inf
        s, sy2 = np.exp(log_s), math.exp(2 * log_sy) + self.config.jitter
        h = self.config.hyper_prior_scale
        try:
            if self.scheme == "collapsed":
                lp = _gamma_posterior(self.st, s, sy2, h).log_evidence
            else:
                gamma = v[: self.n_gamma].reshape(self.p, 2)
                lp = float(_marginal_terms(self.st, self.st.g @ gamma.T, s, sy2).sum())
                lp += -0.5 * float(np.sum(gamma * gamma)) / (h * h) - gamma.size * (math.log(h) + 0.5 * LOG_2PI)
        except (ModelError, np.linalg.LinAlgError):
            return -np.inf
        out = lp + self._scale_prior(log_s, log_sy)
        return out if math.isfinite(out) else -np.inf

    def draw_gamma(self, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.scheme == "joint":
            return np.asarray(v[: self.n_gamma]).reshape(self.p, 2)
        key = np.asarray(v, dtype=float).tobytes()
        if getattr(self, "_cache_key", None) != key:  # RWM repeats states often
            log_s, log_sy = self.scales(v)
            self._cache = _gamma_posterior(
                self.st, np.exp(log_s), math.exp(2 * log_sy) + self.config.jitter, self.config.hyper_prior_scale
            )
            self._cache_key = key
        post = self._cache
        z = rng.standard_normal(2 * self.p)
        return (post.mean + np.linalg.solve(post.chol_prec.T, z)).reshape(self.p, 2)


@dataclass
class HbmPosterior:
    gamma_samples: np.ndarray  # (S, p, 2)
    sigma_samples: np.ndarray  # (S, p)
    sigma_y_samples: np.ndarray  # (S,)
    groups: list[GroupData]
    config: ModelConfig
    standardization: Standardization
    diagnostics: dict = field(default_factory=dict)
    chains: np.ndarray | None = field(default=None, repr=False)  # (chains, draws, dim) for diagnostics
    theta_means: np.ndarray = field(init=False, repr=False)  # (J, S, p)
    theta_covs: np.ndarray = field(init=False, repr=False)  # (J, S, p, p)

    def __post_init__(self):
        if self.gamma_samples.shape[0] < 1:
            raise ModelError("posterior needs at least one sample")
        self.theta_means, self.theta_covs = _conditionals(
            _stats(self.groups), self.gamma_samples, self.sigma_samples, self.sigma_y_samples
        )
        self._index = {gr.index: k for k, gr in enumerate(self.groups)}

    @property
    def n_samples(self) -> int:
        return self.gamma_samples.shape[0]

    @property
    def group_indices(self) -> list[int]:
        return [gr.index for gr in self.groups]

    def theta_conditional(self, group: int, s: int) -> Gaussian:
        k = self._index[group]
        return Gaussian(self.theta_means[k, s], self.theta_covs[k, s])

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "standardization": self.standardization.to_json(),
            "groups": [
                {
                    "index": gr.index,
                    "cell_ids": list(gr.cell_ids),
                    "g_vec": gr.g_vec.tolist(),
                    "design": gr.design.tolist(),
                    "labels": gr.labels.tolist(),
                }
                for gr in self.groups
            ],
            "gamma_samples": self.gamma_samples.tolist(),
            "sigma_samples": self.sigma_samples.tolist(),
            "sigma_y_samples": self.sigma_y_samples.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "HbmPosterior":
        cfg = ModelConfig.from_json(doc["config"])
        p = len(cfg.features) + 1
        groups = [
            GroupData(
                g["index"],
                np.asarray(g["design"], float).reshape(-1, p),
                np.asarray(g["labels"], float),
                np.asarray(g["g_vec"], float),
                tuple(g["cell_ids"]),
            )
            for g in doc["groups"]
        ]
        return cls(
            np.asarray(doc["gamma_samples"], float).reshape(-1, p, 2),
            np.asarray(doc["sigma_samples"], float).reshape(-1, p),
            np.asarray(doc["sigma_y_samples"], float),
            groups,
            cfg,
            Standardization.from_json(doc["standardization"]),
            dict(doc.get("diagnostics", {})),
        )


def _hessian(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    d = x.size
    h = np.empty((d, d))
    f0 = f(x)
    e = np.eye(d) * step
    for i in range(d):
        h[i, i] = (f(x + e[i]) - 2 * f0 + f(x - e[i])) / step**2
        for j in range(i):
            h[i, j] = h[j, i] = (
                f(x + e[i] + e[j]) - f(x + e[i] - e[j]) - f(x - e[i] + e[j]) + f(x - e[i] - e[j])
            ) / (4 * step**2)
    return h


def _find_mode(target: _Target) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode and a Laplace covariance (eigenvalues clipped to [1e-8, 25])."""

    def neg(v):
        lp = target(v)
        return -lp if np.isfinite(lp) else 1e300

    res = optimize.minimize(neg, np.zeros(target.dim), method="BFGS", options={"gtol": 1e-6, "maxiter": 2000})
    hess = _hessian(neg, res.x)
    w, v = np.linalg.eigh(0.5 * (hess + hess.T))
    if not np.all(np.isfinite(w)):
        return res.x, np.eye(target.dim)
    var = 1.0 / np.clip(w, 1.0 / 25.0, 1e8)
    return res.x, (v * var) @ v.T


def sample_posterior(
    groups: Sequence[GroupData],
    config: ModelConfig = ModelConfig(),
    mcmc_config: McmcConfig = McmcConfig(),
    seed: int = 0,
    standardization: Standardization | None = None,
    threads: int = 1,
    scheme: str = "collapsed",
) -> HbmPosterior:
    """Draw (gamma, sigma[, sigma_y]) from the hyper-parameter posterior.

    The default ``collapsed`` scheme runs adaptive random-walk Metropolis on
    the scales (reflected at zero, or on their logs when
    ``scale_space="log"``) with gamma integrated out, then draws gamma exactly from
    its Gaussian conditional for every retained state. ``joint`` walks over
    gamma and the log-scales together. Chains start from independent draws
    of a Laplace approximation at the mode; chain ``c`` is seeded by
    ``(seed, c)``.
    """
    groups = list(groups)
    if not groups:
        raise ModelError("need at least one group of data")
    p = groups[0].p
    if any(gr.p != p for gr in groups):
        raise ModelError("all groups must share the design width")
    if len(config.features) + 1 != p:
        raise ModelError(f"config lists {len(config.features)} features but design has {p - 1}")
    space = mcmc_config.scale_space
    target = _Target(groups, config, scheme, space)
    n_chains, n_draws = mcmc_config.n_chains, mcmc_config.n_samples

    if target.dim == 0:
        states = np.zeros((n_chains, n_draws, 0))
        accept = np.ones(n_chains)
    else:
        # Laplace approximation in log-scale coordinates, mapped across if needed
        log_target = target if space == "log" else _Target(groups, config, scheme, "log")
        mode, cov = _find_mode(log_target)
        init_rng = np.random.default_rng([seed, 10_000])
        chol = np.linalg.cholesky(cov)
        inits = []
        for _ in range(n_chains):
            for _attempt in range(100):
                cand = mode + chol @ init_rng.standard_normal(target.dim)
                if np.isfinite(log_target(cand)):
                    break
            else:
                cand = mode
            inits.append(cand)
        inits = np.array(inits)
        reflect = None
        if space == "natural":
            sl = target.scale_slice
            jac = np.ones(target.dim)
            jac[sl] = np.exp(mode[sl])
            cov = cov * np.outer(jac, jac)
            inits[:, sl] = np.exp(inits[:, sl])
            reflect = np.arange(target.dim)[sl]
        run = mcmc.sample(
            target,
            inits,
            mcmc_config.n_warmup,
            n_draws,
            seed,
            init_cov=cov * (2.38**2 / target.dim),
            target_accept=mcmc_config.target_accept,
            adapt_every=mcmc_config.adapt_every,
            reflect=reflect,
            threads=threads,
        )
        if np.all(run.accept_rate < 0.01):
            raise mcmc.SamplerDivergence(
                f"all chains accepted < 1% of proposals ({run.accept_rate.round(4).tolist()}); "
                "increase n_warmup or adjust target_accept"
            )
        states, accept = run.samples, run.accept_rate

    gammas = np.empty((n_chains, n_draws, p, 2))
    log_s = np.empty((n_chains, n_draws, p))
    log_sy = np.empty((n_chains, n_draws))
    for c in range(n_chains):
        rng = np.random.default_rng([seed, c, 1])
        for i in range(n_draws):
            v = states[c, i]
            gammas[c, i] = target.draw_gamma(v, rng)
            log_s[c, i], log_sy[c, i] = target.scales(v)

    names = [f"gamma[{a},{b}]" for a in range(p) for b in range(2)]
    tracked = [gammas.reshape(n_chains, n_draws, 2 * p)]
    if target.sample_sigma:
        names += [f"log_sigma[{a}]" for a in range(p)]
        tracked.append(log_s)
    if target.sample_sigma_y:
        names.append("log_sigma_y")
        tracked.append(log_sy[..., None])
    chains = np.concatenate(tracked, axis=2)
    diagnostics = {
        "scheme": scheme,
        "scale_space": space,
        "parameters": names,
        "rhat": mcmc.split_rhat(chains).tolist(),
        "ess": mcmc.effective_sample_size(chains).tolist(),
        "accept_rate": np.asarray(accept).tolist(),
        "n_chains": n_chains,
        "n_warmup": mcmc_config.n_warmup,
        "n_samples": n_draws,
        "seed": seed,
    }
    if standardization is None:
        standardization = Standardization.identity(config.features)
    return HbmPosterior(
        gammas.reshape(-1, p, 2),
        np.exp(log_s).reshape(-1, p),
        np.exp(log_sy).ravel(),
        groups,
        config,
        standardization,
        diagnostics,
        chains,
    )


# ---------------------------------------------------------------------------
# Data plumbing


def build_groups(
    table: FeatureTable,
    assignment: GroupAssignment,
    config: ModelConfig,
    standardization: Standardization | None = None,
) -> tuple[list[GroupData], Standardization]:
    """Group a labeled table by ``assignment`` membership.

    Feature standardization is fitted on ``table`` unless one is supplied
    (or ``config.standardize`` is off). Empty groups are dropped.
    """
    names = config.features
    raw = table.matrix(names)
    if standardization is None:
        standardization = (
            Standardization.fit(raw, names) if config.standardize else Standardization.identity(names)
        )
    z = standardization.apply(raw)
    y = forward_transform(table.labels(), config.label_transform)
    g = table.column("g")
    members: dict[int, list[int]] = {}
    for i, cid in enumerate(table.cell_ids):
        try:
            j = assignment.membership[cid]
        except KeyError:
            raise ModelError(f"cell {cid!r} is not in the group assignment") from None
        members.setdefault(j, []).append(i)
    groups = []
    for j in sorted(members):
        idx = members[j]
        design = np.column_stack([np.ones(len(idx)), z[idx]])
        groups.append(
            GroupData(j, design, y[idx], np.array([1.0, g[idx].mean()]), tuple(table.cell_ids[i] for i in idx))
        )
    return groups, standardization


def fit(
    table: FeatureTable,
    assignment: GroupAssignment,
    config: ModelConfig = ModelConfig(),
    mcmc_config: McmcConfig = McmcConfig(),
    seed: int = 0,
    threads: int = 1,
    scheme: str = "collapsed",
) -> HbmPosterior:
    if table.label_transform != config.label_transform:
        config = ModelConfig.from_json({**config.to_json(), "label_transform": table.label_transform})
    groups, std = build_groups(table, assignment, config)
    return sample_posterior(groups, config, mcmc_config, seed, std, threads, scheme)


# ---------------------------------------------------------------------------
# Prediction


@dataclass(frozen=True)
class PredictiveDistribution:
    """Gaussian mixture over posterior draws, in transformed label units."""

    mean: float
    variance: float
    point_estimate_days: float
    label_transform: str
    component_means: np.ndarray = field(repr=False)
    component_sds: np.ndarray = field(repr=False)
    group: int | None = None

    def __post_init__(self):
        if not self.variance > 0:
            raise ModelError("predictive variance must be > 0")

    def cdf(self, q: float) -> float:
        return float(ndtr((q - self.component_means) / self.component_sds).mean())

    def quantile(self, prob: float) -> float:
        if not 0 < prob < 1:
            raise ValueError("prob must be in (0, 1)")
        lo = float(np.min(self.component_means - 12 * self.component_sds))
        hi = float(np.max(self.component_means + 12 * self.component_sds))
        return float(optimize.brentq(lambda q: self.cdf(q) - prob, lo, hi, xtol=1e-12))

    def interval(self, alpha: float = 0.1):
        """Central ``1 - alpha`` interval: ((lo, hi) transformed, (lo, hi) days)."""
        lo, hi = self.quantile(alpha / 2), self.quantile(1 - alpha / 2)
        days = inverse_transform([lo, hi], self.label_transform)
        return (lo, hi), (float(days[0]), float(days[1]))


def _design_row(x, posterior: HbmPosterior) -> np.ndarray:
    if hasattr(x, "individual"):
        raw = x.individual()
    elif hasattr(x, "value"):
        raw = np.array([x.value(n) for n in posterior.config.features])
    else:
        raw = np.asarray(x, dtype=float)
    return np.concatenate([[1.0], posterior.standardization.apply(raw)])


def predict(
    x,
    posterior: HbmPosterior,
    *,
    group: int | None = None,
    g_value: float | None = None,
    assignment: GroupAssignment | None = None,
) -> PredictiveDistribution:
    """Posterior predictive for one cell.

    ``x`` is a FeatureVector, FeatureRow or raw feature array (unstandardized).
    The group comes from ``group`` or, failing that, from the nearest
    ``assignment`` centroid to ``g_value``. A group the posterior never saw
    falls back to its level-2 prior ``N(gamma_s @ [1, g_value], diag(sigma_s^2))``,
    which needs ``g_value``.
    """
    xv = _design_row(x, posterior)
    if group is None:
        if g_value is None:
            raise ModelError("need a group index or a g_value")
        group = assign_group(g_value, assignment) if assignment is not None else None
    sy2 = posterior.sigma_y_samples**2
    if group is not None and group in posterior._index:
        k = posterior._index[group]
        means = posterior.theta_means[k] @ xv
        var = np.einsum("a,sab,b->s", xv, posterior.theta_covs[k], xv) + sy2
    else:
        if g_value is None:
            raise ModelError(f"group {group} was not fitted; supply g_value for a level-2 prior prediction")
        m = posterior.gamma_samples @ np.array([1.0, g_value])  # (S, p)
        means = m @ xv
        var = (posterior.sigma_samples**2) @ (xv * xv) + sy2
    mix_mean = float(means.mean())
    mix_var = float(var.mean() + means.var())
    transform = posterior.config.label_transform
    return PredictiveDistribution(
        mix_mean,
        mix_var,
        float(inverse_transform(mix_mean, transform)),
        transform,
        means,
        np.sqrt(var),
        group,
    )
