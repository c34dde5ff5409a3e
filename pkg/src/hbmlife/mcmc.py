"""Adaptive random-walk Metropolis and convergence diagnostics.

The proposal is a Gaussian random walk whose covariance is learned from the
chain's own warmup draws and whose global scale is tuned by Robbins-Monro
toward a target acceptance rate. A small fraction of proposals always use
the initial covariance so a chain whose adapted proposal has collapsed can
still move. Coordinates flagged in ``reflect`` live on (0, inf) and
proposals are folded back through zero, which keeps the kernel symmetric.
Adaptation stops at the end of warmup, so the retained draws
come from a fixed, reversible kernel.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np


class SamplerDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainResult:
    samples: np.ndarray  # (chains, draws, dim)
    log_prob: np.ndarray  # (chains, draws)
    accept_rate: np.ndarray  # (chains,) over the retained draws
    proposal_scale: np.ndarray  # (chains,)

    @property
    def flat(self) -> np.ndarray:
        c, n, d = self.samples.shape
        return self.samples.reshape(c * n, d)


def _chol_psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    floor = max(w.max(), 1e-300) * 1e-10
    w = np.maximum(w, floor)
    return np.linalg.cholesky((v * w) @ v.T)


def _run_chain(
    log_prob: Callable[[np.ndarray], float],
    x0: np.ndarray,
    n_warmup: int,
    n_samples: int,
    rng: np.random.Generator,
    init_cov: np.ndarray,
    target_accept: float,
    adapt_start: float,
    adapt_every: int,
    p_fixed: float,
    reflect: np.ndarray,
):
    d = x0.size
    x = np.array(x0, dtype=float)
    lp = log_prob(x)
    if not np.isfinite(lp):
        raise ValueError("initial point has non-finite log density")
    chol = chol_fixed = _chol_psd(init_cov)
    log_scale = 0.0
    start = int(adapt_start * n_warmup)
    # Welford accumulators for the warmup covariance
    count, mean, m2 = 0, np.zeros(d), np.zeros((d, d))

    out = np.empty((n_samples, d))
    out_lp = np.empty(n_samples)
    accepted = 0
    for t in range(n_warmup + n_samples):
        z = rng.standard_normal(d)
        if rng.uniform() < p_fixed:
            prop = x + chol_fixed @ z
        else:
            prop = x + np.exp(log_scale) * (chol @ z)
        prop[reflect] = np.abs(prop[reflect])
        lp_prop = log_prob(prop)
        log_alpha = lp_prop - lp if np.isfinite(lp_prop) else -np.inf
        accept = np.log(rng.uniform()) < log_alpha
        if accept:
            x, lp = prop, lp_prop
        if t < n_warmup:
            alpha = float(np.exp(min(0.0, log_alpha)))
            log_scale += (alpha - target_accept) / (t + 1) ** 0.6
            if t >= start:
                count += 1
                delta = x - mean
                mean += delta / count
                m2 += np.outer(delta, x - mean)
                if count >= 2 * d + 2 and count % adapt_every == 0:
                    emp = m2 / (count - 1)
                    chol = _chol_psd(emp * (2.38**2 / d) + 1e-12 * np.eye(d))
        else:
            i = t - n_warmup
            out[i], out_lp[i] = x, lp
            accepted += bool(accept)
    return out, out_lp, accepted / max(n_samples, 1), float(np.exp(log_scale))


def sample(
    log_prob: Callable[[np.ndarray], float],
    init: np.ndarray,
    n_warmup: int,
    n_samples: int,
    seed: int,
    init_cov: np.ndarray | None = None,
    target_accept: float = 0.234,
    adapt_start: float = 0.2,
    adapt_every: int = 50,
    p_fixed: float = 0.05,
    reflect=None,
    threads: int = 1,
) -> ChainResult:
    """Run one adaptive RWM chain per row of ``init``.

    Chain ``c`` draws from ``np.random.default_rng([seed, c])``, so results
    do not depend on execution order or on ``threads``.
    """
    init = np.atleast_2d(np.asarray(init, dtype=float))
    n_chains, d = init.shape
    if n_chains < 1 or n_samples < 1 or n_warmup < 0:
        raise ValueError("need >= 1 chain, >= 1 sample and n_warmup >= 0")
    if init_cov is None:
        init_cov = np.eye(d) * (2.38**2 / d)
    mask = np.zeros(d, dtype=bool)
    if reflect is not None:
        mask[np.asarray(reflect)] = True
    if np.any(init[:, mask] <= 0):
        raise ValueError("reflected coordinates must start positive")

    def run(c):
        rng = np.random.default_rng([seed, c])
        return _run_chain(
            log_prob, init[c], n_warmup, n_samples, rng, init_cov,
            target_accept, adapt_start, adapt_every, p_fixed, mask,
        )

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(n_chains)))
    else:
        results = [run(c) for c in range(n_chains)]
    return ChainResult(
        samples=np.stack([r[0] for r in results]),
        log_prob=np.stack([r[1] for r in results]),
        accept_rate=np.array([r[2] for r in results]),
        proposal_scale=np.array([r[3] for r in results]),
    )


# ---------------------------------------------------------------------------
# Diagnostics


def _as_chains(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("samples must be (chains, draws) or (chains, draws, dim)")
    return x


def split_rhat(samples) -> np.ndarray:
    """Split-chain potential scale reduction factor, one value per dimension."""
    x = _as_chains(samples)
    n = x.shape[1] // 2
    if n < 2:
        return np.full(x.shape[2], np.nan)
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / w)
    return np.where(w > 0, r, 1.0)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance along axis 1 of a (chains, draws) array, via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n]
    return ac / n


def effective_sample_size(samples) -> np.ndarray:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation."""
    x = _as_chains(samples)
    m, n, d = x.shape
    out = np.empty(d)
    for k in range(d):
        chains = x[:, :, k]
        acov = _autocov(chains)
        w = chains.var(axis=1, ddof=1).mean()
        if w <= 0:
            out[k] = m * n
            continue
        var_hat = (n - 1) / n * w
        if m > 1:
            var_hat += chains.mean(axis=1).var(ddof=1)
        rho = 1.0 - (w - acov.mean(axis=0)) / var_hat
        rho[0] = 1.0
        tau = -1.0
        prev = np.inf
        for t in range(0, n - 1, 2):
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            tau += 2.0 * pair
            prev = pair
        out[k] = m * n / max(tau, 1.0 / np.log10(max(m * n, 10)))
    return out


def mcse_mean(samples) -> np.ndarray:
    """Monte Carlo standard error of the posterior mean, per dimension."""
    x = _as_chains(samples)
    sd = x.reshape(-1, x.shape[2]).std(axis=0, ddof=1)
    return sd / np.sqrt(effective_sample_size(x))


def mcse_variance(samples) -> np.ndarray:
    """MCSE of the posterior variance, via the ESS of squared deviations."""
    x = _as_chains(samples)
    flat = x.reshape(-1, x.shape[2])
    dev2 = (x - flat.mean(axis=0)) ** 2
    sd = dev2.reshape(-1, x.shape[2]).std(axis=0, ddof=1)
    return sd / np.sqrt(effective_sample_size(dev2))
