"""Potts random field on a 2D lattice with an 8-neighbour system.

The prior is ``f(z | beta) = exp(beta * U(z)) / C(beta)`` where ``U`` counts the
neighbouring pairs sharing a label.  ``log C`` is tabulated on a beta grid by
thermodynamic integration: ``d log C / d beta = E[U | beta]``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import InvalidArgumentError

MAX_ENUMERATION = 10**7
_OFFSETS = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]


class NeighborGraph:
    """8-neighbourhood adjacency for an ``nx`` by ``ny`` raster-ordered lattice."""

    def __init__(self, nx: int, ny: int):
        if nx < 1 or ny < 1:
            raise InvalidArgumentError("lattice dims must be positive")
        self.nx, self.ny = int(nx), int(ny)
        n = self.nx * self.ny
        nbrs = np.full((n, 8), -1, dtype=np.int64)
        counts = np.zeros(n, dtype=np.int64)
        for i in range(n):
            y, x = divmod(i, self.nx)
            for dx, dy in _OFFSETS:
                xx, yy = x + dx, y + dy
                if 0 <= xx < self.nx and 0 <= yy < self.ny:
                    nbrs[i, counts[i]] = yy * self.nx + xx
                    counts[i] += 1
        self.neighbors = nbrs
        self.counts = counts
        rows = np.repeat(np.arange(n), 8).reshape(n, 8)
        sel = (nbrs > rows)
        self.edges = np.column_stack([rows[sel], nbrs[sel]])

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neighbors[i, : self.counts[i]]


def _check_labels(z, n, G=None):
    z = np.asarray(z)
    if z.shape != (n,):
        raise InvalidArgumentError(f"label map has shape {z.shape}, expected ({n},)")
    if z.size and (z.min() < 1 or (G is not None and z.max() > G)):
        raise InvalidArgumentError(f"labels must lie in 1..{G if G is not None else 'G'}")
    return z


def potts_energy(z, graph: NeighborGraph, G: int | None = None) -> int:
    """Number of neighbouring pairs with equal labels."""
    z = _check_labels(z, graph.n, G)
    return int(np.count_nonzero(z[graph.edges[:, 0]] == z[graph.edges[:, 1]]))


def neighbor_label_counts(z, graph: NeighborGraph, G: int) -> np.ndarray:
    """(n, G) matrix: how many neighbours of voxel i carry label g (1-based labels)."""
    z = _check_labels(z, graph.n, G)
    out = np.zeros((graph.n, G), dtype=np.int64)
    valid = graph.neighbors >= 0
    rows = np.repeat(np.arange(graph.n), 8).reshape(graph.n, 8)[valid]
    np.add.at(out, (rows, z[graph.neighbors[valid]] - 1), 1)
    return out


def brute_force_log_partition(G: int, graph: NeighborGraph, beta: float) -> float:
    """``log sum_z exp(beta * U(z))`` by exhaustive enumeration (tiny lattices only)."""
    n = graph.n
    if G ** n > MAX_ENUMERATION:
        raise InvalidArgumentError(f"{G}^{n} configurations exceed the enumeration limit {MAX_ENUMERATION}")
    if beta == 0:
        return n * math.log(G)
    hist = energy_histogram(G, graph)
    u = np.nonzero(hist)[0]
    e = beta * u + np.log(hist[u])
    m = e.max()
    return float(m + math.log(np.exp(e - m).sum()))


def energy_histogram(G: int, graph: NeighborGraph) -> np.ndarray:
    """Number of configurations at each agreement count ``U = 0..n_edges``."""
    n = graph.n
    if G ** n > MAX_ENUMERATION:
        raise InvalidArgumentError(f"{G}^{n} configurations exceed the enumeration limit {MAX_ENUMERATION}")
    configs = np.array(list(itertools.product(range(G), repeat=n)), dtype=np.int8)
    same = configs[:, graph.edges[:, 0]] == configs[:, graph.edges[:, 1]]
    return np.bincount(same.sum(axis=1), minlength=graph.n_edges + 1).astype(float)


# --------------------------------------------------------------------------
# single-site Gibbs sampling from the prior


@numba.njit(cache=True)
def _gibbs_sweep(z, neighbors, counts, G, boltz, uniforms):
    """One raster sweep; ``boltz[k] = exp(beta * k)``; labels are 0-based here."""
    n = z.size
    w = np.empty(G)
    cnt = np.zeros(G, dtype=np.int64)
    for i in range(n):
        for g in range(G):
            cnt[g] = 0
        for k in range(counts[i]):
            cnt[z[neighbors[i, k]]] += 1
        tot = 0.0
        for g in range(G):
            tot += boltz[cnt[g]]
            w[g] = tot
        u = uniforms[i] * tot
        g = 0
        while g < G - 1 and w[g] <= u:
            g += 1
        z[i] = g


@numba.njit(cache=True)
def _conditional_energy(z, neighbors, counts, G, boltz):
    """Rao-Blackwellised U: half the sum over sites of E[agreeing neighbours | other labels]."""
    n = z.size
    cnt = np.zeros(G, dtype=np.int64)
    tot = 0.0
    for i in range(n):
        for g in range(G):
            cnt[g] = 0
        for k in range(counts[i]):
            cnt[z[neighbors[i, k]]] += 1
        s = 0.0
        a = 0.0
        for g in range(G):
            w = boltz[cnt[g]]
            s += w
            a += w * cnt[g]
        tot += a / s
    return 0.5 * tot


def _mean_energy(args):
    graph_dims, G, beta, burnin, sweeps, seed = args
    graph = NeighborGraph(*graph_dims)
    rng = np.random.default_rng(seed)
    # cold start: the ordered state is the dominant basin at large beta
    z = np.zeros(graph.n, dtype=np.int64)
    boltz = np.exp(beta * np.arange(9))
    total = 0.0
    block = 50
    done = 0
    while done < burnin + sweeps:
        m = min(block, burnin + sweeps - done)
        u = rng.random((m, graph.n))
        for s in range(m):
            _gibbs_sweep(z, graph.neighbors, graph.counts, G, boltz, u[s])
            if done + s >= burnin:
                total += _conditional_energy(z, graph.neighbors, graph.counts, G, boltz)
        done += m
    return total / sweeps


def sample_prior(G: int, graph: NeighborGraph, beta: float, sweeps: int, rng, z0=None):
    """Run ``sweeps`` Gibbs sweeps from the Potts prior and yield 1-based label maps."""
    z = np.zeros(graph.n, dtype=np.int64) if z0 is None else np.asarray(z0, dtype=np.int64) - 1
    boltz = np.exp(beta * np.arange(9))
    for _ in range(sweeps):
        _gibbs_sweep(z, graph.neighbors, graph.counts, G, boltz, rng.random(graph.n))
        yield z + 1


# --------------------------------------------------------------------------


@dataclass
class MCSettings:
    burnin: int = 500
    sweeps: int = 2000
    seed: int = 12345


@dataclass
class PartitionTable:
    nx: int
    ny: int
    G: int
    beta_grid: np.ndarray
    log_c: np.ndarray
    mean_energy: np.ndarray | None = None
    mc: MCSettings = field(default_factory=MCSettings)
    exact: bool = False

    @property
    def beta_max(self) -> float:
        return float(self.beta_grid[-1])

    def log_c_at(self, beta: float) -> float:
        if not (0.0 <= beta <= self.beta_max):
            raise InvalidArgumentError(f"beta={beta} outside partition table range [0, {self.beta_max}]")
        return float(np.interp(beta, self.beta_grid, self.log_c))

    def matches(self, nx, ny, G) -> bool:
        return (self.nx, self.ny, self.G) == (nx, ny, G)

    def header(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "G": self.G, "beta_max": self.beta_max,
                "n_grid": int(self.beta_grid.size), "burnin": self.mc.burnin, "sweeps": self.mc.sweeps,
                "seed": self.mc.seed, "exact": self.exact}

    def save(self, path):
        """Write ``<path>`` as CSV ``beta,log_c`` and ``<path>.json`` with the header."""
        path = Path(path)
        lines = ["beta,log_c"] + [f"{b!r},{c!r}" for b, c in zip(self.beta_grid.tolist(), self.log_c.tolist())]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        hdr = self.header()
        if self.mean_energy is not None:
            hdr["mean_energy"] = self.mean_energy.tolist()
        Path(str(path) + ".json").write_text(json.dumps(hdr, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        hdr_path = Path(str(path) + ".json")
        if not path.exists() or not hdr_path.exists():
            raise InvalidArgumentError(f"partition table {path} (and its .json header) not found")
        hdr = json.loads(hdr_path.read_text(encoding="utf-8"))
        rows = path.read_text(encoding="utf-8").strip().split("\n")
        if rows[0].strip() != "beta,log_c":
            raise InvalidArgumentError(f"{path}: expected header beta,log_c")
        vals = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        me = hdr.get("mean_energy")
        return cls(hdr["nx"], hdr["ny"], hdr["G"], vals[:, 0], vals[:, 1],
                   None if me is None else np.asarray(me),
                   MCSettings(hdr["burnin"], hdr["sweeps"], hdr["seed"]), hdr.get("exact", False))


def _grid(beta_max, grid_step):
    if not (beta_max > 0 and grid_step > 0):
        raise InvalidArgumentError("beta_max and grid_step must be positive")
    n = int(round(beta_max / grid_step))
    if not math.isclose(n * grid_step, beta_max, rel_tol=1e-9):
        raise InvalidArgumentError("beta_max must be a multiple of grid_step")
    return np.linspace(0.0, beta_max, n + 1)


def estimate_partition(G: int, graph: NeighborGraph, beta_max: float = 1.0, grid_step: float = 0.01,
                       mc: MCSettings | None = None, workers: int = 1) -> PartitionTable:
    """Thermodynamic integration of Monte Carlo estimates of E[U | beta] (trapezoid rule).

    Each grid point runs its own chain seeded from ``(mc.seed, grid index)``, so
    Monte Carlo errors are independent and largely cancel in the integral.
    """
    if G < 2:
        raise InvalidArgumentError("G must be >= 2")
    mc = mc or MCSettings()
    grid = _grid(beta_max, grid_step)
    jobs = [((graph.nx, graph.ny), G, float(b), mc.burnin, mc.sweeps, [mc.seed, k])
            for k, b in enumerate(grid[1:], start=1)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            means = list(ex.map(_mean_energy, jobs))
    else:
        means = [_mean_energy(j) for j in jobs]
    # E[U] at beta = 0 is exact: each edge agrees with probability 1/G
    eu = np.concatenate([[graph.n_edges / G], means])
    increments = 0.5 * (eu[1:] + eu[:-1]) * np.diff(grid)
    log_c = graph.n * math.log(G) + np.concatenate([[0.0], np.cumsum(increments)])
    log_c[0] = graph.n * math.log(G)
    return PartitionTable(graph.nx, graph.ny, G, grid, log_c, eu, mc)


def exact_partition_table(G: int, graph: NeighborGraph, beta_max: float = 1.0,
                          grid_step: float = 0.01) -> PartitionTable:
    """Table from enumeration, for lattices small enough to enumerate."""
    grid = _grid(beta_max, grid_step)
    hist = energy_histogram(G, graph)
    u = np.nonzero(hist)[0]
    e = grid[:, None] * u[None, :] + np.log(hist[u])[None, :]
    m = e.max(axis=1, keepdims=True)
    p = np.exp(e - m)
    log_c = (m[:, 0] + np.log(p.sum(axis=1)))
    log_c[0] = graph.n * math.log(G)
    eu = (p * u).sum(axis=1) / p.sum(axis=1)
    return PartitionTable(graph.nx, graph.ny, G, grid, log_c, eu, MCSettings(0, 0, 0), exact=True)


def log_potts_prior(z, beta: float, table: PartitionTable, graph: NeighborGraph) -> float:
    """``beta * U(z) - log C(beta)`` with ``log C`` interpolated from the table."""
    if not table.matches(graph.nx, graph.ny, table.G):
        raise InvalidArgumentError("partition table was built for a different lattice")
    return beta * potts_energy(z, graph, table.G) - table.log_c_at(beta)


# bump when the estimator changes so stale cached tables are not reused
ESTIMATOR_VERSION = 2


def cache_key(nx, ny, G, beta_max, grid_step, mc: MCSettings) -> str:
    raw = json.dumps([ESTIMATOR_VERSION, nx, ny, G, round(beta_max, 12), round(grid_step, 12), mc.burnin, mc.sweeps, mc.seed])
    return f"potts_{nx}x{ny}_G{G}_" + hashlib.sha1(raw.encode()).hexdigest()[:10] + ".csv"


def cached_partition(G: int, graph: NeighborGraph, cache_dir, beta_max=1.0, grid_step=0.01,
                     mc: MCSettings | None = None, workers: int = 1) -> PartitionTable:
    """Load a table from ``cache_dir`` or compute and store it."""
    mc = mc or MCSettings()
    path = Path(cache_dir) / cache_key(graph.nx, graph.ny, G, beta_max, grid_step, mc)
    if path.exists() and Path(str(path) + ".json").exists():
        return PartitionTable.load(path)
    table = estimate_partition(G, graph, beta_max, grid_step, mc, workers)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.save(path)
    return table
