"""Bayesian spatial mixture model for dynamic PET curves.

Voxel curves follow a G-component Gaussian mixture with a shared diagonal
covariance.  Components ``1..G-1`` have one-tissue kinetic means; component ``G``
is the noise component with a free non-negative mean vector.  Labels carry a
Potts prior with spatial strength ``beta``.  Sampling alternates random-walk
Metropolis updates (K1, k2, noise mean, beta) with Gibbs updates (variances and
labels).  Labels are 1-based in every public structure.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import gammaln

from .errors import InvalidArgumentError, NumericalError
from .kinetics import FrameModel
from .phantom import DynamicImage
from .potts import NeighborGraph, PartitionTable, potts_energy
from .kinetics import KineticParams
from .scf import FitConfig, lm_fit_voxel

# finite stand-in for an unbounded upper prior limit
UNBOUNDED_CAP = 1e3
# global multiplier on the default proposal scales for the built-in 32 x 32 phantom
PHANTOM_SCALE_MULTIPLIER = 8.5
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Priors:
    k1_bounds: tuple = (0.3, UNBOUNDED_CAP)
    k2_bounds: tuple = (0.0, UNBOUNDED_CAP)
    noise_mean_bounds: tuple = (0.0, math.inf)
    sigma_ig: tuple = (0.001, 0.001)  # (shape a, scale b)
    beta_bounds: tuple = (0.0, 1.0)
    f_lv_bounds: tuple = (0.0, 1.0)
    f_rv_bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not self.k1_bounds[0] > 0:
            raise InvalidArgumentError("the K1 lower limit must be > 0 to separate kinetic and noise components")
        if not (self.sigma_ig[0] > 0 and self.sigma_ig[1] > 0):
            raise InvalidArgumentError("inverse-gamma shape and scale must be positive")
        for name in ("k1_bounds", "k2_bounds", "noise_mean_bounds", "beta_bounds", "f_lv_bounds", "f_rv_bounds"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidArgumentError(f"{name}: lower limit exceeds upper limit")
        if self.beta_bounds[0] < 0:
            raise InvalidArgumentError("beta must be non-negative")

    @classmethod
    def spillover_preset(cls, **kw):
        kw.setdefault("k1_bounds", (0.1, 1.0))
        return cls(**kw)


@dataclass
class ProposalScales:
    sd_k1: float = 0.006
    sd_k2: float = 0.001
    sd_noise_mean: float = 0.00013
    sd_beta: float = 0.002
    sd_flv: float = 0.01
    sd_frv: float = 0.01

    def __post_init__(self):
        if min(self.sd_k1, self.sd_k2, self.sd_noise_mean, self.sd_beta, self.sd_flv, self.sd_frv) <= 0:
            raise InvalidArgumentError("proposal standard deviations must be positive")

    def scaled(self, factor: float) -> "ProposalScales":
        """All scales multiplied by one global factor."""
        if not factor > 0:
            raise InvalidArgumentError("scale multiplier must be positive")
        return ProposalScales(*(factor * v for v in (self.sd_k1, self.sd_k2, self.sd_noise_mean,
                                                     self.sd_beta, self.sd_flv, self.sd_frv)))

    @classmethod
    def in_vivo_preset(cls):
        return cls(0.005, 0.003, 0.001, 0.004, 0.01, 0.01)


class Mode(str, enum.Enum):
    FULL_POSTERIOR = "full"
    MAP_ONLY = "map"


@dataclass
class MCMCConfig:
    G: int = 3
    iterations: int = 10000
    burn_in: int = 4000
    thin: int = 10
    seed: int = 0
    mode: Mode = Mode.FULL_POSTERIOR
    beta_init: float = 0.1
    fix_beta: float | None = None  # hold beta constant (0 gives the non-spatial mixture)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.G < 2:
            raise InvalidArgumentError("G must be >= 2 (at least one kinetic and the noise component)")
        if self.thin < 1:
            raise InvalidArgumentError("thin must be >= 1")
        if self.mode is Mode.FULL_POSTERIOR and not (0 <= self.burn_in < self.iterations):
            raise InvalidArgumentError("burn_in must be smaller than iterations")
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")

    @classmethod
    def map_only(cls, G, iterations=6000, **kw):
        return cls(G=G, iterations=iterations, burn_in=0, mode=Mode.MAP_ONLY, **kw)


@dataclass
class ChainState:
    z: np.ndarray  # (n,) labels 1..G, noise component is G
    K1: np.ndarray  # (G-1,)
    k2: np.ndarray  # (G-1,)
    noise_mean: np.ndarray  # (T,)
    sigma2: np.ndarray  # (T,)
    beta: float
    f_lv: np.ndarray | None = None
    f_rv: np.ndarray | None = None

    @property
    def G(self) -> int:
        return self.K1.size + 1

    @property
    def spillover(self) -> bool:
        return self.f_lv is not None

    def copy(self) -> "ChainState":
        return ChainState(self.z.copy(), self.K1.copy(), self.k2.copy(), self.noise_mean.copy(),
                          self.sigma2.copy(), float(self.beta),
                          None if self.f_lv is None else self.f_lv.copy(),
                          None if self.f_rv is None else self.f_rv.copy())

    def component_mean(self, g: int, model: FrameModel) -> np.ndarray:
        """Mean curve of 0-based kinetic component ``g``."""
        if self.spillover:
            return model(self.K1[g], self.k2[g], self.f_lv[g], self.f_rv[g])
        return model.tissue(self.K1[g], self.k2[g])

    def means(self, model: FrameModel) -> np.ndarray:
        """(G, T) component means, noise component last."""
        rows = [self.component_mean(g, model) for g in range(self.G - 1)]
        return np.vstack(rows + [self.noise_mean])

    def voxel_params(self):
        """Per-voxel (K1, k2); noise-component voxels get zeros."""
        k1 = np.concatenate([self.K1, [0.0]])
        k2 = np.concatenate([self.k2, [0.0]])
        return k1[self.z - 1], k2[self.z - 1]


@dataclass
class SMMContext:
    """Everything the transition kernels need besides the state."""

    data: np.ndarray  # (n, T)
    model: FrameModel
    graph: NeighborGraph
    table: PartitionTable | None
    priors: Priors = field(default_factory=Priors)
    scales: ProposalScales = field(default_factory=ProposalScales)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.graph.n, self.model.n_frames):
            raise InvalidArgumentError(f"data shape {self.data.shape} does not match lattice and frames")
        self.data_sq = self.data ** 2

    def log_c(self, beta: float, G: int) -> float:
        if self.table is None:
            if beta == 0.0:
                return self.graph.n * math.log(G)
            raise InvalidArgumentError("a partition table is required for beta > 0")
        if self.table.G != G or not self.table.matches(self.graph.nx, self.graph.ny, G):
            raise InvalidArgumentError(
                f"partition table is for {self.table.nx}x{self.table.ny}, G={self.table.G}; "
                f"need {self.graph.nx}x{self.graph.ny}, G={G}")
        return self.table.log_c_at(beta)


class AcceptanceStats:
    KINDS = ("K1", "k2", "noise_mean", "beta", "f_lv", "f_rv")

    def __init__(self):
        self.proposed = dict.fromkeys(self.KINDS, 0)
        self.accepted = dict.fromkeys(self.KINDS, 0)

    def add(self, kind, proposed, accepted):
        self.proposed[kind] += int(proposed)
        self.accepted[kind] += int(accepted)

    def rates(self) -> dict:
        return {k: self.accepted[k] / self.proposed[k] for k in self.KINDS if self.proposed[k]}


# --------------------------------------------------------------------------
# densities


def _in(v, bounds):
    return bounds[0] <= v <= bounds[1]


def log_ig_density(x, a, b):
    """Inverse-gamma(shape a, scale b) log density."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):  # x -> 0 gives -inf, which callers reject
        return a * math.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def gaussian_loglik(data, means, z, sigma2) -> float:
    """Sum over voxels of diagonal-covariance normal log densities."""
    resid = data - means[z - 1]
    T = data.shape[1]
    return float(-0.5 * data.shape[0] * (T * _LOG_2PI + np.log(sigma2).sum())
                 - 0.5 * np.sum(resid ** 2 / sigma2))


def log_likelihood(ctx: SMMContext, state: ChainState) -> float:
    """Complete-data log likelihood: Gaussian terms plus the Potts log density of the labels."""
    means = state.means(ctx.model)
    potts = state.beta * potts_energy(state.z, ctx.graph, state.G) - ctx.log_c(state.beta, state.G)
    return gaussian_loglik(ctx.data, means, state.z, state.sigma2) + potts


def log_prior(ctx: SMMContext, state: ChainState) -> float:
    """Uniform priors add zero inside their support; inverse-gamma terms are exact."""
    p = ctx.priors
    if not all(_in(v, p.k1_bounds) for v in state.K1):
        return -math.inf
    if not all(_in(v, p.k2_bounds) for v in state.k2):
        return -math.inf
    if not all(_in(v, p.noise_mean_bounds) for v in state.noise_mean):
        return -math.inf
    if not _in(state.beta, p.beta_bounds):
        return -math.inf
    if state.spillover:
        if not all(_in(v, p.f_lv_bounds) for v in state.f_lv) or not all(_in(v, p.f_rv_bounds) for v in state.f_rv):
            return -math.inf
        if np.any(state.f_lv + state.f_rv > 1.0):
            return -math.inf
    if np.any(state.sigma2 <= 0):
        return -math.inf
    return float(np.sum(log_ig_density(state.sigma2, *p.sigma_ig)))


def log_posterior(ctx: SMMContext, state: ChainState) -> float:
    lp = log_prior(ctx, state)
    if lp == -math.inf:
        return -math.inf
    if ctx.table is not None and state.beta > ctx.table.beta_max:
        return -math.inf
    return log_likelihood(ctx, state) + lp


# --------------------------------------------------------------------------
# transition kernels


def sufficient_stats(ctx: SMMContext, z, G):
    """Per-component voxel counts and per-frame sums of the data."""
    onehot = np.zeros((z.size, G))
    onehot[np.arange(z.size), z - 1] = 1.0
    return onehot.sum(axis=0), onehot.T @ ctx.data


def _loglik_change(old, new, count, s1, sigma2):
    """Change of the component's Gaussian log likelihood when its mean goes old -> new."""
    return float(-0.5 * np.sum((new - old) * (count * (new + old) - 2.0 * s1) / sigma2))


def _kinetic_update(ctx, state, rng, stats, suff, name, sd, bounds):
    counts, s1 = suff
    vals = getattr(state, name)
    steps = rng.standard_normal(vals.size)
    logu = np.log(rng.random(vals.size))
    for g in range(vals.size):
        prop = vals[g] + sd * steps[g]
        ok = _in(prop, bounds)
        if ok and name in ("f_lv", "f_rv"):
            other = state.f_rv[g] if name == "f_lv" else state.f_lv[g]
            ok = prop + other <= 1.0
        accepted = False
        if ok:
            old_mean = state.component_mean(g, ctx.model)
            cur = vals[g]
            vals[g] = prop
            new_mean = state.component_mean(g, ctx.model)
            log_alpha = _loglik_change(old_mean, new_mean, counts[g], s1[g], state.sigma2)
            if logu[g] < log_alpha:
                accepted = True
            else:
                vals[g] = cur
        if stats is not None:
            stats.add(name, 1, accepted)
    return state


def update_k1(state, ctx, rng, stats=None, suff=None):
    """Random-walk Metropolis step for each kinetic component's K1."""
    suff = suff or sufficient_stats(ctx, state.z, state.G)
    return _kinetic_update(ctx, state, rng, stats, suff, "K1", ctx.scales.sd_k1, ctx.priors.k1_bounds)


def update_k2(state, ctx, rng, stats=None, suff=None):
    """Random-walk step for k2, then for the spill-over fractions when present."""
    suff = suff or sufficient_stats(ctx, state.z, state.G)
    _kinetic_update(ctx, state, rng, stats, suff, "k2", ctx.scales.sd_k2, ctx.priors.k2_bounds)
    if state.spillover:
        _kinetic_update(ctx, state, rng, stats, suff, "f_lv", ctx.scales.sd_flv, ctx.priors.f_lv_bounds)
        _kinetic_update(ctx, state, rng, stats, suff, "f_rv", ctx.scales.sd_frv, ctx.priors.f_rv_bounds)
    return state


def update_noise_mean(state, ctx, rng, stats=None, suff=None):
    """Per-frame random-walk steps on the noise-component mean.

    With a diagonal covariance the frames are conditionally independent, so all
    T proposals are drawn and accepted or rejected in one pass.
    """
    counts, s1 = suff or sufficient_stats(ctx, state.z, state.G)
    n_g, s_g = counts[-1], s1[-1]
    cur = state.noise_mean
    prop = cur + ctx.scales.sd_noise_mean * rng.standard_normal(cur.size)
    logu = np.log(rng.random(cur.size))
    lo, hi = ctx.priors.noise_mean_bounds
    ok = (prop >= lo) & (prop <= hi)
    log_alpha = -0.5 * (prop - cur) * (n_g * (prop + cur) - 2.0 * s_g) / state.sigma2
    acc = ok & (logu < log_alpha)
    state.noise_mean = np.where(acc, prop, cur)
    if stats is not None:
        stats.add("noise_mean", cur.size, acc.sum())
    return state


def update_sigma(state, ctx, rng):
    """Exact inverse-gamma draw for every frame variance."""
    a, b = ctx.priors.sigma_ig
    means = state.means(ctx.model)
    resid = ctx.data - means[state.z - 1]
    shape = ctx.data.shape[0] / 2.0 + a
    rate = 0.5 * np.sum(resid ** 2, axis=0) + b
    state.sigma2 = sample_inverse_gamma(shape, rate, rng)
    return state


def sample_inverse_gamma(shape, rate, rng):
    draws = rate / rng.standard_gamma(shape, size=np.shape(rate))
    # guard the measure-zero underflow of a gamma variate
    return np.maximum(draws, np.finfo(float).tiny)


def label_log_weights(ctx, means, sigma2):
    """(n, G) Gaussian log densities up to a per-voxel constant."""
    inv = 1.0 / sigma2
    return ctx.data @ (means * inv).T - 0.5 * ((means ** 2) * inv).sum(axis=1)[None, :]


@numba.njit(cache=True)
def _label_sweep(z, loglik, neighbors, counts, beta, uniforms):
    n, G = loglik.shape
    w = np.empty(G)
    cnt = np.zeros(G)
    for i in range(n):
        for g in range(G):
            cnt[g] = 0.0
        for k in range(counts[i]):
            cnt[z[neighbors[i, k]]] += 1.0
        m = -np.inf
        for g in range(G):
            w[g] = loglik[i, g] + beta * cnt[g]
            if w[g] > m:
                m = w[g]
        tot = 0.0
        for g in range(G):
            tot += math.exp(w[g] - m)
            w[g] = tot
        u = uniforms[i] * tot
        g = 0
        while g < G - 1 and w[g] <= u:
            g += 1
        z[i] = g


def update_z(state, ctx, rng):
    """Sequential raster sweep drawing each label from its full conditional.

    Each voxel sees the labels its neighbours hold at that moment in the sweep.
    """
    means = state.means(ctx.model)
    loglik = label_log_weights(ctx, means, state.sigma2)
    z0 = (state.z - 1).astype(np.int64)
    _label_sweep(z0, loglik, ctx.graph.neighbors, ctx.graph.counts, float(state.beta), rng.random(z0.size))
    state.z = z0 + 1
    return state


def update_beta(state, ctx, rng, stats=None):
    """Random-walk step on beta using tabulated log C(beta)."""
    prop = state.beta + ctx.scales.sd_beta * rng.standard_normal()
    logu = math.log(rng.random())
    lo, hi = ctx.priors.beta_bounds
    accepted = False
    if lo <= prop <= hi and (ctx.table is None or prop <= ctx.table.beta_max):
        U = potts_energy(state.z, ctx.graph)
        log_alpha = (prop - state.beta) * U - (ctx.log_c(prop, state.G) - ctx.log_c(state.beta, state.G))
        if logu < log_alpha:
            state.beta = float(prop)
            accepted = True
    if stats is not None:
        stats.add("beta", 1, accepted)
    return state


def mcmc_iteration(state, ctx, rng, stats=None, fix_beta=False):
    """One sweep: K1, k2 (and fractions), noise mean, variances, labels, beta."""
    suff = sufficient_stats(ctx, state.z, state.G)
    update_k1(state, ctx, rng, stats, suff)
    update_k2(state, ctx, rng, stats, suff)
    update_noise_mean(state, ctx, rng, stats, suff)
    update_sigma(state, ctx, rng)
    update_z(state, ctx, rng)
    if not fix_beta:
        update_beta(state, ctx, rng, stats)
    return state


# --------------------------------------------------------------------------
# initialisation


def _kmeans(data, G, rng, n_init=10, n_iter=100):
    """Best of ``n_init`` k-means++ seeded Lloyd runs (smallest within-cluster sum of squares)."""
    best = None
    for _ in range(n_init):
        labels, centers = _lloyd(data, G, rng, n_iter)
        sse = float(np.sum((data - centers[labels]) ** 2))
        if best is None or sse < best[0]:
            best = (sse, labels, centers)
    return best[1], best[2]


def _lloyd(data, G, rng, n_iter):
    n = data.shape[0]
    centers = np.empty((G, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for g in range(1, G):
        tot = d2.sum()
        idx = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[g] = data[idx]
        d2 = np.minimum(d2, np.sum((data - centers[g]) ** 2, axis=1))
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        dist = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        for g in range(G):
            members = data[new == g]
            if members.size:
                centers[g] = members.mean(axis=0)
            else:
                far = dist.min(axis=1).argmax()
                centers[g] = data[far]
                new[far] = g
        if np.array_equal(new, labels):
            break
        labels = new
    for g in range(G):
        if np.any(labels == g):
            centers[g] = data[labels == g].mean(axis=0)
    return labels, centers


def initial_state(ctx: SMMContext, G: int, rng, beta_init: float = 0.1, spillover: bool = False) -> ChainState:
    """K-means labels, per-cluster least-squares kinetics, pooled within-cluster variances."""
    data = ctx.data
    labels, centers = _kmeans(data, G, rng)
    order = np.argsort(centers.sum(axis=1))
    noise_cluster = order[0]
    pr = ctx.priors
    lo = [pr.k1_bounds[0], pr.k2_bounds[0]] + ([0.0, 0.0] if spillover else [])
    hi = [pr.k1_bounds[1], pr.k2_bounds[1]] + ([1.0, 1.0] if spillover else [])
    cfg = FitConfig(lower=tuple(lo), upper=tuple(hi), spillover=spillover,
                    init=KineticParams(max(0.5, pr.k1_bounds[0]), 0.1))
    kin = []
    for c in order[1:]:
        fit = lm_fit_voxel(centers[c], ctx.model, cfg)
        fl = fit.fractions
        kin.append((fit.params.K1, fit.params.k2, fl.f_lv if fl else 0.0, fl.f_rv if fl else 0.0, c))
    kin.sort(key=lambda r: (r[0], r[1]))
    remap = np.empty(G, dtype=int)
    for new_idx, row in enumerate(kin):
        remap[row[4]] = new_idx + 1
    remap[noise_cluster] = G
    z = remap[labels]
    K1 = np.clip(np.array([r[0] for r in kin]), *pr.k1_bounds)
    k2 = np.clip(np.array([r[1] for r in kin]), *pr.k2_bounds)
    noise_mean = np.clip(centers[noise_cluster], *pr.noise_mean_bounds)
    resid = data - np.vstack([centers[row[4]] for row in kin] + [centers[noise_cluster]])[z - 1]
    sigma2 = np.maximum(np.mean(resid ** 2, axis=0), 1e-12 * max(np.mean(data ** 2), 1e-300))
    beta = float(np.clip(beta_init, *pr.beta_bounds))
    f_lv = np.array([r[2] for r in kin]) if spillover else None
    f_rv = np.array([r[3] for r in kin]) if spillover else None
    return ChainState(z, K1, k2, noise_mean, sigma2, beta, f_lv, f_rv)


# --------------------------------------------------------------------------
# driver and summaries


@dataclass
class Samples:
    iteration: np.ndarray
    K1: np.ndarray  # (S, G-1)
    k2: np.ndarray
    noise_mean: np.ndarray  # (S, T)
    sigma2: np.ndarray
    beta: np.ndarray
    z: np.ndarray  # (S, n) int8/int16
    f_lv: np.ndarray | None = None
    f_rv: np.ndarray | None = None

    def __len__(self):
        return self.iteration.size


@dataclass
class PosteriorSummary:
    G: int
    map_state: ChainState
    map_log_posterior: float
    map_iteration: int
    acceptance: dict
    samples: Samples | None = None  # relabelled
    k1_mean: np.ndarray | None = None
    k1_interval: np.ndarray | None = None  # (G-1, 2) central 95 %
    k2_mean: np.ndarray | None = None
    k2_interval: np.ndarray | None = None
    membership: np.ndarray | None = None  # (n, G) frequencies
    beta_trace: np.ndarray | None = None  # every iteration
    log_posterior_trace: np.ndarray | None = None

    def map_loglik(self, ctx: SMMContext) -> float:
        return log_likelihood(ctx, self.map_state)


def run_mcmc(ctx: SMMContext, cfg: MCMCConfig, init: ChainState | None = None,
             spillover: bool = False, keep_traces: bool = True) -> PosteriorSummary:
    """Run the sampler; returns MAP state and, in full mode, relabelled posterior summaries."""
    if ctx.table is None and not (cfg.fix_beta is not None and cfg.fix_beta == 0.0):
        raise InvalidArgumentError("a Potts partition table is required (run the partition step first)")
    if ctx.table is not None:
        ctx.log_c(0.0, cfg.G)  # validates the table against lattice and G
        if ctx.table.beta_max < ctx.priors.beta_bounds[1]:
            raise InvalidArgumentError(
                f"partition table covers beta <= {ctx.table.beta_max}, prior needs {ctx.priors.beta_bounds[1]}")
    if spillover and ctx.model.spillover is None:
        raise InvalidArgumentError("spill-over model requested but the frame model has no blood curves")
    rng = np.random.default_rng(cfg.seed)
    state = init.copy() if init is not None else initial_state(ctx, cfg.G, rng, cfg.beta_init, spillover)
    if cfg.fix_beta is not None:
        state.beta = float(cfg.fix_beta)
    lp = log_posterior(ctx, state)
    if not math.isfinite(lp):
        raise NumericalError(f"log posterior at initialisation is not finite ({lp}); "
                             "check priors against the data scale")
    stats = AcceptanceStats()
    best, best_lp, best_it = state.copy(), lp, 0
    full = cfg.mode is Mode.FULL_POSTERIOR
    keep = []
    beta_trace = np.empty(cfg.iterations)
    lp_trace = np.empty(cfg.iterations)
    for it in range(1, cfg.iterations + 1):
        mcmc_iteration(state, ctx, rng, stats, fix_beta=cfg.fix_beta is not None)
        lp = log_posterior(ctx, state)
        if not math.isfinite(lp):
            raise NumericalError(f"log posterior became non-finite at iteration {it}")
        if lp > best_lp:
            best, best_lp, best_it = state.copy(), lp, it
        beta_trace[it - 1] = state.beta
        lp_trace[it - 1] = lp
        if full and it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            keep.append((it, state.copy()))
    summary = PosteriorSummary(cfg.G, canonical_state(best), best_lp, best_it, stats.rates())
    if keep_traces:
        summary.beta_trace = beta_trace
        summary.log_posterior_trace = lp_trace
    if full and keep:
        samples = relabel(_stack(keep))
        summary.samples = samples
        summary.k1_mean = samples.K1.mean(axis=0)
        summary.k2_mean = samples.k2.mean(axis=0)
        summary.k1_interval = np.percentile(samples.K1, [2.5, 97.5], axis=0).T
        summary.k2_interval = np.percentile(samples.k2, [2.5, 97.5], axis=0).T
        summary.membership = membership_frequencies(samples.z, cfg.G)
    return summary


def _stack(keep) -> Samples:
    states = [s for _, s in keep]
    dtype = np.int16
    spill = states[0].spillover
    return Samples(
        np.array([i for i, _ in keep]),
        np.array([s.K1 for s in states]),
        np.array([s.k2 for s in states]),
        np.array([s.noise_mean for s in states]),
        np.array([s.sigma2 for s in states]),
        np.array([s.beta for s in states]),
        np.array([s.z for s in states], dtype=dtype),
        np.array([s.f_lv for s in states]) if spill else None,
        np.array([s.f_rv for s in states]) if spill else None,
    )


def membership_frequencies(z_samples, G) -> np.ndarray:
    z = np.asarray(z_samples)
    out = np.zeros((z.shape[1], G))
    for g in range(1, G + 1):
        out[:, g - 1] = np.mean(z == g, axis=0)
    return out


def relabel(samples: Samples) -> Samples:
    """Order kinetic components by ascending K1 (then k2) in every sample.

    The noise component keeps label G; label maps are permuted consistently.
    """
    S, Gk = samples.K1.shape
    order = np.lexsort((samples.k2, samples.K1), axis=1) if Gk > 1 else np.zeros((S, 1), dtype=int)
    rows = np.arange(S)[:, None]
    # inverse permutation maps an old 0-based label to its new position
    inv = np.empty_like(order)
    inv[rows, order] = np.arange(Gk)[None, :]
    lut = np.concatenate([inv + 1, np.full((S, 1), Gk + 1)], axis=1)
    z = np.take_along_axis(lut, samples.z.astype(np.int64) - 1, axis=1).astype(samples.z.dtype)
    take = lambda a: None if a is None else a[rows, order]  # noqa: E731
    return replace(samples, K1=take(samples.K1), k2=take(samples.k2), z=z,
                   f_lv=take(samples.f_lv), f_rv=take(samples.f_rv))


def canonical_state(state: ChainState) -> ChainState:
    """Copy of ``state`` with kinetic components in ascending (K1, k2) order."""
    order = np.lexsort((state.k2, state.K1))
    out = state.copy()
    out.K1, out.k2 = state.K1[order], state.k2[order]
    if state.spillover:
        out.f_lv, out.f_rv = state.f_lv[order], state.f_rv[order]
    lut = np.empty(state.G, dtype=np.int64)
    lut[order] = np.arange(order.size)
    lut[state.G - 1] = state.G - 1
    out.z = lut[state.z - 1] + 1
    return out


# --------------------------------------------------------------------------
# outputs


def write_samples_csv(path, samples: Samples):
    """One row per retained iteration and kinetic component."""
    spill = samples.f_lv is not None
    with open(path, "w", newline="\n") as fh:
        fh.write("iter,component,K1,k2" + (",f_lv,f_rv" if spill else "") + "\n")
        for s, it in enumerate(samples.iteration):
            for g in range(samples.K1.shape[1]):
                row = f"{int(it)},{g + 1},{float(samples.K1[s, g])!r},{float(samples.k2[s, g])!r}"
                if spill:
                    row += f",{float(samples.f_lv[s, g])!r},{float(samples.f_rv[s, g])!r}"
                fh.write(row + "\n")


def write_beta_trace_csv(path, beta_trace):
    with open(path, "w", newline="\n") as fh:
        fh.write("iter,beta\n")
        for i, b in enumerate(beta_trace, start=1):
            fh.write(f"{i},{float(b)!r}\n")


def write_bic_csv(path, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write("G,loglik,DF,BIC\n")
        for r in rows:
            fh.write(f"{r.G},{float(r.loglik)!r},{r.df},{float(r.bic)!r}\n")


def read_bic_csv(path):
    with open(path) as fh:
        if fh.readline().strip() != "G,loglik,DF,BIC":
            raise InvalidArgumentError(f"{path}: expected header G,loglik,DF,BIC")
        rows = []
        for line in fh:
            G, ll, df, b = line.strip().split(",")
            rows.append(SelectionRow(int(G), float(ll), int(df), float(b)))
    return rows


# --------------------------------------------------------------------------
# model selection


def degrees_of_freedom(G: int, T: int, spillover: bool = False) -> int:
    """Kinetic parameters, noise means, variances and beta."""
    per_component = 4 if spillover else 2
    return per_component * (G - 1) + T + T + 1


def bic_value(loglik: float, n: int, df: int) -> float:
    return -2.0 * loglik + df * (math.log(n) - math.log(2.0 * math.pi))


def bic(ctx: SMMContext, map_state: ChainState) -> float:
    """BIC at the MAP state, with the Potts term included in the likelihood."""
    return bic_value(log_likelihood(ctx, map_state), ctx.graph.n,
                     degrees_of_freedom(map_state.G, ctx.model.n_frames, map_state.spillover))


@dataclass
class SelectionRow:
    G: int
    loglik: float
    df: int
    bic: float
    summary: PosteriorSummary = field(repr=False, default=None)


def _selection_job(args):
    data, model, graph, table, priors, scales, G, iterations, seed, spillover = args
    ctx = SMMContext(data, model, graph, table, priors, scales)
    summ = run_mcmc(ctx, MCMCConfig.map_only(G, iterations=iterations, seed=seed), spillover=spillover,
                    keep_traces=False)
    ll = log_likelihood(ctx, summ.map_state)
    df = degrees_of_freedom(G, model.n_frames, spillover)
    return SelectionRow(G, ll, df, bic_value(ll, graph.n, df), summ)


def select_components(img: DynamicImage, model: FrameModel, g_range, table_for, priors: Priors | None = None,
                      scales: ProposalScales | None = None, iterations: int = 6000, seed: int = 0,
                      spillover: bool = False, workers: int = 1):
    """Run a MAP-only chain for every G and keep the smallest BIC.

    ``table_for(G)`` returns the partition table for this lattice and G; it is
    called in this process before any chain starts.  Chains for different G run
    on up to ``workers`` processes with the same seed, so the result does not
    depend on the worker count.  Returns ``(best_G, rows)``.
    """
    g_values = sorted(set(int(G) for G in g_range))
    if not g_values:
        raise InvalidArgumentError("empty G range")
    if g_values[0] < 2:
        raise InvalidArgumentError("G must be >= 2")
    graph = NeighborGraph(img.nx, img.ny)
    priors = priors or Priors()
    scales = scales or ProposalScales()
    jobs = [(img.data, model, graph, table_for(G), priors, scales, G, iterations, seed, spillover)
            for G in g_values]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            rows = list(ex.map(_selection_job, jobs))
    else:
        rows = [_selection_job(j) for j in jobs]
    best = min(rows, key=lambda r: r.bic)
    return best.G, rows
