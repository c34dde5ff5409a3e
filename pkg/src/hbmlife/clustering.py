"""Size-constrained K-means over usage descriptors.

Lloyd iterations in which the assignment step is the exact transportation
problem: every point goes to one cluster, every cluster receives between
``min_size`` and ``max_size`` points, total squared distance minimal. The
constraint matrix is totally unimodular, so a simplex vertex of the LP
relaxation is already integral.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix, vstack


class InfeasibleClustering(ValueError):
    pass


@dataclass(frozen=True)
class GroupAssignment:
    k: int
    centroids: np.ndarray  # (k, d)
    membership: dict[str, int]
    sizes: np.ndarray
    min_size: int
    max_size: int
    objective: float = float("nan")
    history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        sizes = np.asarray(self.sizes)
        if np.any(sizes < self.min_size) or np.any(sizes > self.max_size):
            raise ValueError(f"cluster sizes {sizes.tolist()} violate [{self.min_size}, {self.max_size}]")
        if sizes.sum() != len(self.membership):
            raise ValueError("sizes do not sum to the number of assigned cells")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroid")

    def __eq__(self, other):
        if not isinstance(other, GroupAssignment):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None

    def groups(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for cell_id, j in self.membership.items():
            out[j].append(cell_id)
        return out

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "sizes": self.sizes.tolist(),
            "min_size": self.min_size,
            "max_size": self.max_size,
            "objective": self.objective,
            "membership": dict(self.membership),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "GroupAssignment":
        return cls(
            k=int(doc["k"]),
            centroids=np.asarray(doc["centroids"], dtype=float).reshape(int(doc["k"]), -1),
            membership={str(k): int(v) for k, v in doc["membership"].items()},
            sizes=np.asarray(doc["sizes"], dtype=int),
            min_size=int(doc["min_size"]),
            max_size=int(doc["max_size"]),
            objective=float(doc.get("objective", float("nan"))),
        )


def _as_points(values) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("values must be scalars or equal-length vectors")
    return x


def check_feasible(n: int, k: int, min_size: int, max_size: int) -> None:
    if k < 1:
        raise InfeasibleClustering("k must be >= 1")
    if min_size < 0 or max_size < min_size or max_size < 1:
        raise InfeasibleClustering(f"need 0 <= min_size <= max_size, got {min_size}, {max_size}")
    if not (min_size * k <= n <= max_size * k):
        raise InfeasibleClustering(
            f"infeasible size bounds: need min_size*k <= n <= max_size*k, "
            f"but {min_size}*{k} = {min_size * k}, n = {n}, {max_size}*{k} = {max_size * k}"
        )


def objective(points, labels, centroids) -> float:
    x = _as_points(points)
    c = np.asarray(centroids, dtype=float).reshape(-1, x.shape[1])
    return float(np.sum((x - c[np.asarray(labels)]) ** 2))


def constrained_assignment(points, centroids, min_size: int, max_size: int) -> np.ndarray:
    """Exact min-cost assignment of points to centroids under size bounds."""
    x = _as_points(points)
    c = np.asarray(centroids, dtype=float).reshape(-1, x.shape[1])
    n, k = x.shape[0], c.shape[0]
    check_feasible(n, k, min_size, max_size)
    cost = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    if k == 1:
        return np.zeros(n, dtype=int)
    # variable (i, j) lives at column i*k + j
    cols = np.arange(n * k)
    a_eq = csr_matrix((np.ones(n * k), (np.repeat(np.arange(n), k), cols)), shape=(n, n * k))
    per_cluster = csr_matrix((np.ones(n * k), (np.tile(np.arange(k), n), cols)), shape=(k, n * k))
    a_ub = vstack([per_cluster, -per_cluster]).tocsr()
    b_ub = np.concatenate([np.full(k, max_size), np.full(k, -min_size)])
    res = linprog(
        cost.ravel(),
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=np.ones(n),
        bounds=(0, 1),
        method="highs-ds",
    )
    if res.status != 0:
        raise InfeasibleClustering(f"assignment LP failed: {res.message}")
    sol = res.x.reshape(n, k)
    labels = sol.argmax(axis=1)
    if not np.allclose(sol.max(axis=1), 1.0, atol=1e-6):
        raise RuntimeError("assignment LP returned a fractional solution")
    return labels


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def optimal_interval_partition(values, k: int, min_size: int, max_size: int) -> np.ndarray:
    """Globally optimal size-bounded partition of 1-D values (labels by rank).

    In one dimension an optimal partition under squared loss is contiguous
    once the values are sorted: swapping a crossing pair between two
    clusters strictly lowers the cost. Dynamic programming over split
    points then finds the optimum exactly in O(k n^2).
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    check_feasible(n, k, min_size, max_size)
    order = np.argsort(v, kind="stable")
    s = v[order]
    c1 = np.concatenate([[0.0], np.cumsum(s)])
    c2 = np.concatenate([[0.0], np.cumsum(s * s)])

    def seg_cost(i, j):  # segment s[i:j], vectorised over i
        m = j - i
        return c2[j] - c2[i] - (c1[j] - c1[i]) ** 2 / np.where(m > 0, m, 1)

    lo = max(min_size, 1)
    best = np.full((k + 1, n + 1), np.inf)
    arg = np.zeros((k + 1, n + 1), dtype=int)
    best[0, 0] = 0.0
    for c in range(1, k + 1):
        for j in range(n + 1):
            i = np.arange(max(0, j - max_size), j - lo + 1)
            if i.size == 0:
                continue
            cand = best[c - 1, i] + seg_cost(i, j)
            t = int(np.argmin(cand))
            best[c, j], arg[c, j] = cand[t], i[t]
    if not np.isfinite(best[k, n]):
        raise InfeasibleClustering("no feasible interval partition")
    labels_sorted = np.empty(n, dtype=int)
    j = n
    for c in range(k, 0, -1):
        i = arg[c, j]
        labels_sorted[i:j] = c - 1
        j = i
    labels = np.empty(n, dtype=int)
    labels[order] = labels_sorted
    return labels


def _update_centroids(x, labels, old):
    new = old.copy()
    for j in range(old.shape[0]):
        members = labels == j
        if members.any():
            new[j] = x[members].mean(axis=0)
    return new


def lloyd_constrained(x, init_centroids, min_size, max_size, max_iter=100):
    """One constrained Lloyd run; returns (labels, centroids, objective history)."""
    x = _as_points(x)
    c = np.array(init_centroids, dtype=float).reshape(-1, x.shape[1])
    labels = constrained_assignment(x, c, min_size, max_size)
    c = _update_centroids(x, labels, c)
    history = [objective(x, labels, c)]
    for _ in range(max_iter):
        new = constrained_assignment(x, c, min_size, max_size)
        # keep the incumbent on ties so the loop terminates
        if np.array_equal(new, labels) or objective(x, new, c) >= history[-1]:
            break
        labels = new
        c = _update_centroids(x, labels, c)
        history.append(objective(x, labels, c))
    return labels, c, history


def _canonical(labels, centroids):
    """Relabel clusters by ascending centroid (lexicographic for vectors)."""
    order = np.lexsort(centroids.T[::-1])
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return remap[labels], centroids[order]


def constrained_kmeans(
    values: Mapping[str, float],
    k: int = 8,
    min_size: int = 10,
    max_size: int = 100,
    n_restarts: int = 10,
    seed: int = 0,
    max_iter: int = 100,
    threads: int = 1,
) -> GroupAssignment:
    """Cluster cells by their usage descriptor under size bounds.

    Each restart draws its own k-means++ seeding from ``(seed, restart)``;
    the best objective wins, ties to the lowest restart index. Groups are
    numbered by ascending centroid.
    """
    ids = list(values)
    x = _as_points([values[i] for i in ids])
    check_feasible(len(ids), k, min_size, max_size)
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")

    def run(r):
        rng = np.random.default_rng([seed, r])
        init = _kmeanspp(x, k, rng)
        labels, c, hist = lloyd_constrained(x, init, min_size, max_size, max_iter)
        return objective(x, labels, c), labels, c, hist

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(n_restarts)))
    else:
        results = [run(r) for r in range(n_restarts)]
    if x.shape[1] == 1 and k <= len(ids):
        # extra start from the exact interval optimum; Lloyd cannot worsen it
        seed_labels = optimal_interval_partition(x[:, 0], k, min_size, max_size)
        init = np.array([x[seed_labels == j].mean(axis=0) for j in range(k)])
        labels, c, hist = lloyd_constrained(x, init, min_size, max_size, max_iter)
        results.append((objective(x, labels, c), labels, c, hist))
    best = min(range(len(results)), key=lambda r: (results[r][0], r))
    obj, labels, c, hist = results[best]
    labels, c = _canonical(labels, c)
    sizes = np.bincount(labels, minlength=k)
    return GroupAssignment(
        k=k,
        centroids=c,
        membership={cid: int(j) for cid, j in zip(ids, labels)},
        sizes=sizes,
        min_size=min_size,
        max_size=max_size,
        objective=obj,
        history=tuple(hist),
    )


def assign_group(g_value, assignment: GroupAssignment) -> int:
    """Nearest centroid; ties go to the lowest index."""
    q = np.atleast_1d(np.asarray(g_value, dtype=float))
    d = ((assignment.centroids - q[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d))
