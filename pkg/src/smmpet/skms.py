"""Spatially regularised K-means with per-cluster kinetic fits.

The loop alternates three steps: fit a one-tissue curve to every cluster mean,
reassign voxels in raster order to the cluster with the smallest squared
residual minus ``beta`` per agreeing neighbour, and recompute the cluster
means.  The combined objective is ``sum ||y_i - C(k_{z_i})||^2 - beta * U(z)``,
where ``U`` counts agreeing neighbour pairs; with warm-started refits every
refit and reassignment leaves it unchanged or lower.  Reseeding an empty
cluster moves one voxel and may raise it; such entries are tagged in the trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InvalidArgumentError
from .kinetics import FrameModel, FrameScheme, InputFunction
from .phantom import DynamicImage
from .potts import NeighborGraph, potts_energy
from .scf import FitConfig, lm_fit_voxel


@dataclass
class SkmsConfig:
    G: int = 17
    beta: float = 0.2
    max_iter: int = 100
    conv_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.G < 2:
            raise InvalidArgumentError("SKMS needs G >= 2")
        if not self.beta >= 0:
            raise InvalidArgumentError("beta must be >= 0")
        if not self.conv_tol > 0:
            raise InvalidArgumentError("conv_tol must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")


@dataclass
class SkmsResult:
    labels: np.ndarray  # (n,) 1..G
    cluster_params: list  # G KineticParams
    objective: list  # value after every refit, reassignment and reseed
    iterations: int
    converged: bool
    reseeded: list = field(default_factory=list)  # (iteration, cluster) pairs
    steps: list = field(default_factory=list)  # "refit" | "reassign" | "reseed", one per objective entry

    def voxel_params(self):
        k1 = np.array([p.K1 for p in self.cluster_params])
        k2 = np.array([p.k2 for p in self.cluster_params])
        return k1[self.labels - 1], k2[self.labels - 1]


@numba.njit(cache=True)
def _reassign(z, dist, neighbors, counts, beta):
    n, G = dist.shape
    cnt = np.zeros(G)
    for i in range(n):
        for g in range(G):
            cnt[g] = 0.0
        for k in range(counts[i]):
            cnt[z[neighbors[i, k]]] += 1.0
        best = 0
        best_cost = dist[i, 0] - beta * cnt[0]
        for g in range(1, G):
            c = dist[i, g] - beta * cnt[g]
            if c < best_cost:
                best, best_cost = g, c
        z[i] = best


def _kmeanspp(data, G, rng):
    n = data.shape[0]
    centers = np.empty((G, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for g in range(1, G):
        tot = d2.sum()
        idx = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[g] = data[idx]
        d2 = np.minimum(d2, np.sum((data - centers[g]) ** 2, axis=1))
    return centers


def _sq_dist(data, curves):
    return ((data[:, None, :] - curves[None, :, :]) ** 2).sum(axis=2)


def skms_fit(img: DynamicImage, inp: InputFunction, frames: FrameScheme, cfg: SkmsConfig,
             fit_cfg: FitConfig | None = None) -> SkmsResult:
    if img.n_frames != frames.n_frames:
        raise InvalidArgumentError("image frame count does not match the frame scheme")
    if cfg.G > img.n_voxels:
        raise InvalidArgumentError(f"G={cfg.G} exceeds the number of voxels ({img.n_voxels})")
    data = img.data
    graph = NeighborGraph(img.nx, img.ny)
    model = FrameModel(frames, inp)
    base = fit_cfg or FitConfig()
    rng = np.random.default_rng(cfg.seed)
    G = cfg.G

    means = _kmeanspp(data, G, rng)
    z = _sq_dist(data, means).argmin(axis=1)
    means = _cluster_means(data, z, means)
    params = [base.init] * G
    curves = np.zeros_like(means)
    objective = []
    steps = []
    reseeded = []
    converged = False
    it = 0

    def total(zz, cc):
        d = data - cc[zz]
        return float(np.sum(d * d) - cfg.beta * potts_energy(zz + 1, graph))

    for it in range(1, cfg.max_iter + 1):
        old = curves.copy()
        for g in range(G):
            fit = lm_fit_voxel(means[g], model, FitConfig(
                weights=base.weights, lower=base.lower, upper=base.upper, init=params[g],
                max_iter=base.max_iter, grad_tol=base.grad_tol, step_tol=base.step_tol))
            cand = model.tissue(fit.params.K1, fit.params.k2)
            # keep the previous fit if a restart would not improve this cluster
            if it == 1 or np.sum((means[g] - cand) ** 2) <= np.sum((means[g] - curves[g]) ** 2):
                params[g] = fit.params
                curves[g] = cand
        objective.append(total(z, curves))
        steps.append("refit")
        _reassign(z, _sq_dist(data, curves), graph.neighbors, graph.counts, float(cfg.beta))
        objective.append(total(z, curves))
        steps.append("reassign")
        for g in range(G):
            if not np.any(z == g):
                worst = np.argmax(np.sum((data - curves[z]) ** 2, axis=1))
                z[worst] = g
                reseeded.append((it, g + 1))
                objective.append(total(z, curves))
                steps.append("reseed")
        means = _cluster_means(data, z, means)
        if it > 1 and np.max(np.abs(curves - old)) < cfg.conv_tol:
            converged = True
            break
    return SkmsResult(z + 1, list(params), objective, it, converged, reseeded, steps)


def _cluster_means(data, z, previous):
    out = previous.copy()
    for g in range(previous.shape[0]):
        members = data[z == g]
        if members.size:
            out[g] = members.mean(axis=0)
    return out


def write_labels_csv(path, labels, nx, ny):
    labels = np.asarray(labels)
    if labels.size != nx * ny:
        raise InvalidArgumentError("label count does not match the lattice")
    with open(path, "w", newline="\n") as fh:
        fh.write("x,y,cluster_id\n")
        for i, lab in enumerate(labels):
            fh.write(f"{i % nx},{i // nx},{int(lab)}\n")


def read_labels_csv(path, nx, ny) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    with open(path) as fh:
        if fh.readline().strip() != "x,y,cluster_id":
            raise InvalidArgumentError(f"{path}: expected header x,y,cluster_id")
    out = np.zeros(nx * ny, dtype=np.int64)
    out[rows[:, 1] * nx + rows[:, 0]] = rows[:, 2]
    return out

