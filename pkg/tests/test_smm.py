import itertools
import math

import numpy as np
import pytest
from scipy.special import gammaln
from scipy.stats import multivariate_normal

from smmpet.errors import InvalidArgumentError, NumericalError
from smmpet.kinetics import FrameModel, FrameScheme, KineticParams, default_frames, default_input
from smmpet.phantom import (APEX, MIDINFEROSEPTAL, PHANTOM_INPUT_PEAK, PHANTOM_NOISE_LEVEL, NoiseModel, PhantomSpec,
                            Region, add_noise, rect_mask, render_noise_free)
from smmpet.potts import MCSettings, NeighborGraph, estimate_partition, exact_partition_table, potts_energy
from smmpet.scf import FitConfig, lm_fit_voxel
from smmpet.smm import (PHANTOM_SCALE_MULTIPLIER, AcceptanceStats, ChainState, MCMCConfig, Mode, Priors,
                        ProposalScales, Samples, SMMContext, _loglik_change, bic_value, canonical_state,
                        degrees_of_freedom, gaussian_loglik, initial_state, label_log_weights, log_ig_density,
                        log_likelihood, log_posterior, log_prior, mcmc_iteration, membership_frequencies,
                        read_bic_csv, relabel, run_mcmc, sample_inverse_gamma, select_components,
                        sufficient_stats, update_beta, update_k1, update_k2, update_noise_mean, update_sigma,
                        update_z, write_bic_csv, write_samples_csv)

FRAMES = default_frames()
INPUT = default_input(scale=PHANTOM_INPUT_PEAK)
MODEL = FrameModel(FRAMES, INPUT)
SCALES = ProposalScales().scaled(PHANTOM_SCALE_MULTIPLIER)


def _small_spec():
    """8 x 8: a normal block, a defect block and background."""
    normal = rect_mask(8, 8, 1, 1, 4, 4)
    abnormal = rect_mask(8, 8, 5, 4, 7, 7)
    return PhantomSpec(8, 8, [Region(1, normal, MIDINFEROSEPTAL), Region(2, abnormal, APEX),
                              Region(3, ~(normal | abnormal), None)], FRAMES, INPUT)


@pytest.fixture(scope="module")
def small():
    spec = _small_spec()
    img = add_noise(render_noise_free(spec), NoiseModel("gaussian", PHANTOM_NOISE_LEVEL, 11), FRAMES)
    graph = NeighborGraph(8, 8)
    table = estimate_partition(3, graph, 1.0, 0.01, MCSettings(100, 400, 1))
    return img, graph, table


def _ctx(small, **kw):
    img, graph, table = small
    return SMMContext(img.data, MODEL, graph, table, kw.get("priors", Priors()), kw.get("scales", SCALES))


def _state_for(ctx, rng, G=3):
    st = initial_state(ctx, G, rng)
    return st


class FixedRng:
    """Stand-in generator returning preset normal steps and uniforms."""

    def __init__(self, normal, uniform):
        self.normal, self.uniform = normal, uniform

    def standard_normal(self, size=None):
        return self.normal if size is None else np.full(size, self.normal)

    def random(self, size=None):
        return self.uniform if size is None else np.full(size, self.uniform)


def _batch_se(x, batches=50):
    x = np.asarray(x)
    m = x.size // batches
    means = x[: m * batches].reshape(batches, m).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(batches)


# --------------------------------------------------------------------------
# densities


def test_single_voxel_likelihood_example():
    k = KineticParams(0.6, 0.1)
    y = MODEL.tissue(k.K1, k.k2)
    ctx = SMMContext(y[None, :], MODEL, NeighborGraph(1, 1), None)
    T = MODEL.n_frames
    st = ChainState(np.array([1]), np.array([k.K1]), np.array([k.k2]), np.zeros(T), np.ones(T), 0.0)
    assert log_likelihood(ctx, st) == pytest.approx(-(T / 2) * math.log(2 * math.pi) - math.log(2), rel=1e-13)
    doubled = st.copy()
    doubled.sigma2 = 2 * st.sigma2
    assert log_likelihood(ctx, doubled) < log_likelihood(ctx, st)


def test_likelihood_matches_dense_mvn(rng):
    n, T = 12, MODEL.n_frames
    for _ in range(5):
        G = 3
        st = ChainState(rng.integers(1, G + 1, n), rng.uniform(0.3, 1, G - 1), rng.uniform(0, 0.3, G - 1),
                        rng.uniform(0, 0.01, T), rng.uniform(1e-5, 1e-3, T), 0.0)
        data = st.means(MODEL)[st.z - 1] + rng.normal(0, 0.02, (n, T))
        ctx = SMMContext(data, MODEL, NeighborGraph(4, 3), None)
        cov = np.diag(st.sigma2)
        dense = sum(multivariate_normal(st.means(MODEL)[st.z[i] - 1], cov).logpdf(data[i]) for i in range(n))
        assert gaussian_loglik(data, st.means(MODEL), st.z, st.sigma2) == pytest.approx(dense, rel=1e-10)
        assert log_likelihood(ctx, st) == pytest.approx(dense - n * math.log(G), rel=1e-10)


def test_likelihood_includes_potts_term(small, rng):
    ctx = _ctx(small)
    st = _state_for(ctx, rng)
    st.beta = 0.37
    gauss = gaussian_loglik(ctx.data, st.means(MODEL), st.z, st.sigma2)
    potts = 0.37 * potts_energy(st.z, ctx.graph) - ctx.table.log_c_at(0.37)
    assert log_likelihood(ctx, st) == pytest.approx(gauss + potts, rel=1e-13)
    st.beta = 1.5
    with pytest.raises(InvalidArgumentError):
        log_likelihood(ctx, st)


def test_ig_density_exact():
    a = b = 0.001
    assert log_ig_density(1.0, a, b) == pytest.approx(a * math.log(b) - gammaln(a) - b, rel=1e-14)
    from scipy.stats import invgamma
    for x in (0.01, 0.5, 3.0):
        assert log_ig_density(x, 2.5, 0.7) == pytest.approx(invgamma(2.5, scale=0.7).logpdf(x), rel=1e-12)


def test_log_prior_support(small, rng):
    ctx = _ctx(small)
    st = _state_for(ctx, rng)
    base = log_prior(ctx, st)
    assert base == pytest.approx(float(np.sum(log_ig_density(st.sigma2, 0.001, 0.001))))
    bad = st.copy()
    bad.K1[0] = 0.2
    assert log_posterior(ctx, bad) == -math.inf
    bad = st.copy()
    bad.noise_mean[3] = -1e-9
    assert log_posterior(ctx, bad) == -math.inf
    bad = st.copy()
    bad.beta = 1.01
    assert log_posterior(ctx, bad) == -math.inf


def test_flat_beta_prior_differences_unchanged(small, rng):
    img, graph, table = small
    a = _state_for(_ctx(small), rng)
    b = a.copy()
    b.beta, b.K1 = 0.4, b.K1 * 1.01
    for hi in (1.0, 0.8):
        ctx = _ctx(small, priors=Priors(beta_bounds=(0.0, hi)))
        assert log_posterior(ctx, b) - log_posterior(ctx, a) == pytest.approx(
            log_posterior(_ctx(small), b) - log_posterior(_ctx(small), a), rel=1e-12)


# --------------------------------------------------------------------------
# kernels


def test_k1_out_of_support_always_rejected(small, rng):
    ctx = _ctx(small, priors=Priors(k1_bounds=(0.3, 0.3 + 1e-12)), scales=ProposalScales(sd_k1=50.0))
    st = _state_for(ctx, rng)
    st.K1[:] = 0.3
    stats = AcceptanceStats()
    for _ in range(50):
        update_k1(st, ctx, rng, stats)
    assert stats.accepted["K1"] == 0 and np.all(st.K1 == 0.3)


def test_zero_step_always_accepted(small, rng):
    ctx = _ctx(small, scales=ProposalScales(1e-300, 1e-300, 1e-300, 1e-300))
    st = _state_for(ctx, rng)
    stats = AcceptanceStats()
    for _ in range(20):
        update_k1(st, ctx, rng, stats)
        update_k2(st, ctx, rng, stats)
        update_noise_mean(st, ctx, rng, stats)
        update_beta(st, ctx, rng, stats)
    assert stats.rates() == {"K1": 1.0, "k2": 1.0, "noise_mean": 1.0, "beta": 1.0}


def test_k1_chain_concentrates_on_least_squares():
    rng = np.random.default_rng(2)
    n, T = 40, MODEL.n_frames
    truth = MODEL.tissue(0.7, 0.12)
    data = truth + rng.normal(0, 0.002, (n, T))
    ctx = SMMContext(data, MODEL, NeighborGraph(8, 5), None, Priors(), ProposalScales(0.004, 0.001))
    sigma2 = np.full(T, 0.002 ** 2)
    st = ChainState(np.ones(n, dtype=int), np.array([0.7]), np.array([0.12]), np.zeros(T), sigma2, 0.0)
    ls = lm_fit_voxel(data.mean(axis=0), MODEL, FitConfig())
    k1 = []
    for it in range(30000):
        suff = sufficient_stats(ctx, st.z, 2)
        update_k1(st, ctx, rng, None, suff)
        update_k2(st, ctx, rng, None, suff)
        if it >= 2000:
            k1.append(st.K1[0])
    assert abs(np.mean(k1) - ls.params.K1) < 3 * _batch_se(k1)


def test_noise_mean_negative_rejected_and_empty_cluster(small):
    ctx = _ctx(small, scales=ProposalScales(sd_noise_mean=0.5))
    rng = np.random.default_rng(0)
    st = _state_for(ctx, np.random.default_rng(1))
    st.noise_mean[:] = 0.0
    st.z[:] = 1  # noise component empty
    T = st.noise_mean.size
    probe = np.random.default_rng(7)
    steps = probe.standard_normal(T)
    update_noise_mean(st, ctx, np.random.default_rng(7))
    expected = np.where(steps * 0.5 >= 0, steps * 0.5, 0.0)
    assert np.array_equal(st.noise_mean, expected)
    assert np.all(st.noise_mean >= 0)


def test_noise_mean_converges_to_data_mean():
    rng = np.random.default_rng(3)
    n, T = 30, MODEL.n_frames
    data = np.abs(rng.normal(0.01, 0.003, (n, T)))
    sigma2 = data.var(axis=0)
    ctx = SMMContext(data, MODEL, NeighborGraph(6, 5), None, Priors(), ProposalScales(sd_noise_mean=0.001))
    st = ChainState(np.full(n, 2), np.array([0.5]), np.array([0.1]), np.full(T, 0.01), sigma2, 0.0)
    trace = []
    for it in range(20000):
        update_noise_mean(st, ctx, rng)
        if it >= 1000:
            trace.append(st.noise_mean.copy())
    trace = np.array(trace)
    target = data.mean(axis=0)
    for t in (0, 8, 16):
        assert abs(trace[:, t].mean() - target[t]) < 3 * _batch_se(trace[:, t])


def test_update_sigma_moments():
    n, a = 100, 0.001
    frames = FrameScheme([0.0], [1.0])
    model = FrameModel(frames, INPUT)
    r = np.random.default_rng(0).standard_normal(n)
    r *= math.sqrt(50.0 / np.sum(r ** 2))
    ctx = SMMContext(r[:, None], model, NeighborGraph(10, 10), None)
    st = ChainState(np.full(n, 2), np.array([0.5]), np.array([0.1]), np.zeros(1), np.ones(1), 0.0)
    rng = np.random.default_rng(1)
    N = 100_000
    draws = np.empty(N)
    for k in range(N):
        update_sigma(st, ctx, rng)
        draws[k] = st.sigma2[0]
    shape, rate = n / 2 + a, 25.0 + a
    assert (shape, rate) == pytest.approx((50.001, 25.001))
    mean = rate / (shape - 1)
    var = rate ** 2 / ((shape - 1) ** 2 * (shape - 2))
    assert abs(draws.mean() - mean) < 3 * math.sqrt(var / N)
    assert abs(draws.var() - var) < 3 * np.std((draws - mean) ** 2) / math.sqrt(N)
    assert np.all(draws > 0)


def test_sigma_zero_residuals_concentrate():
    rng = np.random.default_rng(0)
    d = sample_inverse_gamma(5000 + 0.001, np.full(1000, 0.001), rng)
    assert np.all(d > 0) and d.mean() < 1e-6


def _z_oracle_setup(beta):
    frames = FrameScheme([0.0], [1.0])
    model = FrameModel(frames, INPUT)
    m1 = float(model.tissue(0.5, 0.1)[0])
    data = np.array([[m1 * 0.9], [m1 * 0.4], [m1 * 0.7], [m1 * 0.2]])
    graph = NeighborGraph(2, 2)
    table = exact_partition_table(2, graph)
    ctx = SMMContext(data, model, graph, table)
    st = ChainState(np.array([1, 2, 1, 2]), np.array([0.5]), np.array([0.1]), np.array([m1 * 0.3]),
                    np.array([(0.3 * m1) ** 2]), beta)
    return ctx, st


def test_update_z_stationary_distribution():
    beta = 0.7
    ctx, st = _z_oracle_setup(beta)
    means = st.means(ctx.model)
    configs = list(itertools.product([1, 2], repeat=4))
    logp = np.array([gaussian_loglik(ctx.data, means, np.array(c), st.sigma2)
                     + beta * potts_energy(np.array(c), ctx.graph) for c in configs])
    p = np.exp(logp - logp.max())
    p /= p.sum()
    index = {c: k for k, c in enumerate(configs)}
    rng = np.random.default_rng(4)
    N = 100_000
    hits = np.zeros((N, 16), dtype=bool)
    for k in range(N):
        update_z(st, ctx, rng)
        hits[k, index[tuple(st.z)]] = True
    freq = hits.mean(axis=0)
    for c in range(16):
        se = max(_batch_se(hits[:, c].astype(float), 100), math.sqrt(p[c] * (1 - p[c]) / N))
        assert abs(freq[c] - p[c]) < 3 * se + 1e-12


def test_label_weights_limits(small, rng):
    ctx = _ctx(small)
    st = _state_for(ctx, rng)
    means = np.vstack([st.means(MODEL)[0]] * 3)
    w = label_log_weights(ctx, means, st.sigma2)
    assert np.allclose(w, w[:, :1])
    # beta = 0: weights are the Gaussian log densities up to a per-voxel constant
    means = st.means(MODEL)
    w = label_log_weights(ctx, means, st.sigma2)
    full = np.array([[multivariate_normal(means[g], np.diag(st.sigma2)).logpdf(ctx.data[i]) for g in range(3)]
                     for i in range(5)])
    diff = full - w[:5]
    assert np.allclose(diff, diff[:, :1], rtol=0, atol=1e-8 * np.abs(full).max())


def test_update_beta_examples(small, rng):
    ctx = _ctx(small)
    st = _state_for(ctx, rng)
    st.beta = 1.0
    update_beta(st, ctx, FixedRng(0.5, 1e-12))
    assert st.beta == 1.0  # proposal above the bound
    st.beta = 0.3
    update_beta(st, ctx, FixedRng(0.0, 0.999999))
    assert st.beta == 0.3


def test_update_beta_acceptance_matches_brute_force():
    graph = NeighborGraph(2, 2)
    table = exact_partition_table(2, graph, 1.0, 0.01)
    from smmpet.potts import brute_force_log_partition
    ctx = SMMContext(np.zeros((4, 1)), FrameModel(FrameScheme([0.0], [1.0]), INPUT), graph, table,
                     scales=ProposalScales(sd_beta=1.0))
    z = np.array([1, 1, 1, 2])
    beta, prop = 0.2, 0.55
    alpha = math.exp((prop - beta) * potts_energy(z, graph)
                     - brute_force_log_partition(2, graph, prop) + brute_force_log_partition(2, graph, beta))
    assert alpha < 1
    for u, accept in ((alpha * 0.999, True), (alpha * 1.001, False)):
        st = ChainState(z.copy(), np.array([0.5]), np.array([0.1]), np.zeros(1), np.ones(1), beta)
        update_beta(st, ctx, FixedRng(prop - beta, u))
        assert (st.beta == pytest.approx(prop)) is accept


def test_mh_ratios_match_log_posterior(small):
    rng = np.random.default_rng(9)
    ctx = _ctx(small)
    st = _state_for(ctx, rng)
    for _ in range(20):
        mcmc_iteration(st, ctx, rng)
        counts, s1 = sufficient_stats(ctx, st.z, st.G)
        base = log_posterior(ctx, st)
        g = rng.integers(0, st.G - 1)
        for name, sd in (("K1", 0.01), ("k2", 0.002)):
            new = st.copy()
            getattr(new, name)[g] += sd * rng.standard_normal()
            fast = _loglik_change(st.component_mean(g, MODEL), new.component_mean(g, MODEL), counts[g], s1[g],
                                  st.sigma2)
            assert fast == pytest.approx(log_posterior(ctx, new) - base, rel=1e-7, abs=1e-9)
        new = st.copy()
        t = rng.integers(0, MODEL.n_frames)
        new.noise_mean[t] += 1e-4
        fast = _loglik_change(st.noise_mean[t:t + 1], new.noise_mean[t:t + 1], counts[-1], s1[-1, t:t + 1],
                              st.sigma2[t:t + 1])
        assert fast == pytest.approx(log_posterior(ctx, new) - base, rel=1e-7, abs=1e-9)
        new = st.copy()
        new.beta = min(1.0, st.beta + 0.01)
        want = (new.beta - st.beta) * potts_energy(st.z, ctx.graph) - (
            ctx.log_c(new.beta, 3) - ctx.log_c(st.beta, 3))
        assert want == pytest.approx(log_posterior(ctx, new) - base, rel=1e-9, abs=1e-9)


# --------------------------------------------------------------------------
# joint correctness


def test_geweke_prior_invariance():
    """Alternate data regeneration and transition kernels; parameter marginals must stay at the prior."""
    graph = NeighborGraph(3, 2)
    G, n = 3, 6
    frames = FrameScheme([0.0, 1.0], [1.0, 3.0])
    model = FrameModel(frames, default_input())
    table = exact_partition_table(G, graph, 1.0, 0.01)
    priors = Priors(k1_bounds=(0.3, 1.0), k2_bounds=(0.0, 0.5), noise_mean_bounds=(0.0, 1.0),
                    sigma_ig=(3.0, 2.0), beta_bounds=(0.0, 1.0))
    scales = ProposalScales(0.25, 0.15, 0.3, 0.35)
    rng = np.random.default_rng(2024)
    configs = np.array(list(itertools.product(range(1, G + 1), repeat=n)))
    energies = np.array([potts_energy(c, graph) for c in configs])

    def draw_z(beta):
        w = np.exp(beta * energies - beta * energies.max())
        return configs[rng.choice(len(configs), p=w / w.sum())].copy()

    beta = rng.uniform()
    st = ChainState(draw_z(beta), rng.uniform(0.3, 1.0, G - 1), rng.uniform(0, 0.5, G - 1), rng.uniform(0, 1, 2),
                    2.0 / rng.standard_gamma(3.0, 2), beta)
    M = 40_000
    k1 = np.empty(M)
    betas = np.empty(M)
    s2 = np.empty(M)
    for m in range(M):
        means = st.means(model)
        y = means[st.z - 1] + np.sqrt(st.sigma2) * rng.standard_normal((n, 2))
        ctx = SMMContext(y, model, graph, table, priors, scales)
        mcmc_iteration(st, ctx, rng)
        k1[m], betas[m], s2[m] = st.K1[0], st.beta, st.sigma2[0]
    assert abs(k1.mean() - 0.65) < 3 * _batch_se(k1)
    assert abs(betas.mean() - 0.5) < 3 * _batch_se(betas)
    assert abs(s2.mean() - 1.0) < 3 * _batch_se(s2)
    # second moments too
    assert abs(np.mean(k1 ** 2) - (0.7 ** 2 / 12 + 0.65 ** 2)) < 3 * _batch_se(k1 ** 2)
    assert abs(np.mean(betas ** 2) - 1 / 3) < 3 * _batch_se(betas ** 2)


def _independent_mixture_sampler(data, model, state, scales, priors, iterations, rng):
    """Reference sampler for beta = 0: dense likelihood, labels drawn independently per voxel."""
    st = state.copy()
    G = st.G

    def loglik(s):
        means = s.means(model)
        r = data - means[s.z - 1]
        return -0.5 * np.sum(np.log(2 * np.pi * s.sigma2)) * data.shape[0] - 0.5 * np.sum(r ** 2 / s.sigma2)

    out = []
    for _ in range(iterations):
        for name, sd, bounds in (("K1", scales.sd_k1, priors.k1_bounds), ("k2", scales.sd_k2, priors.k2_bounds)):
            for g in range(G - 1):
                prop = st.copy()
                getattr(prop, name)[g] += sd * rng.standard_normal()
                if bounds[0] <= getattr(prop, name)[g] <= bounds[1]:
                    if math.log(rng.random()) < loglik(prop) - loglik(st):
                        st = prop
        for t in range(data.shape[1]):
            prop = st.copy()
            prop.noise_mean[t] += scales.sd_noise_mean * rng.standard_normal()
            if prop.noise_mean[t] >= 0 and math.log(rng.random()) < loglik(prop) - loglik(st):
                st = prop
        means = st.means(model)
        r = data - means[st.z - 1]
        a, b = priors.sigma_ig
        st.sigma2 = (0.5 * np.sum(r ** 2, axis=0) + b) / rng.standard_gamma(data.shape[0] / 2 + a, data.shape[1])
        lw = np.array([multivariate_normal(means[g], np.diag(st.sigma2)).logpdf(data) for g in range(G)]).T
        p = np.exp(lw - lw.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(data.shape[0])
        st.z = 1 + np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), G - 1)
        out.append(st.K1.copy())
    return np.array(out)


def test_beta_zero_matches_independent_mixture(small):
    img, graph, _ = small
    ctx = SMMContext(img.data, MODEL, graph, None, Priors(), SCALES)
    init = initial_state(ctx, 3, np.random.default_rng(0), beta_init=0.0)
    cfg = MCMCConfig(G=3, iterations=6000, burn_in=1000, thin=1, seed=5, fix_beta=0.0)
    summ = run_mcmc(ctx, cfg, init=init)
    assert np.all(summ.beta_trace == 0.0)
    ref = _independent_mixture_sampler(img.data, MODEL, init, SCALES, Priors(), 3000, np.random.default_rng(6))[500:]
    ref.sort(axis=1)
    for g in range(2):
        se = math.hypot(_batch_se(summ.samples.K1[:, g]), _batch_se(ref[:, g]))
        assert abs(summ.k1_mean[g] - ref[:, g].mean()) < 3 * se + 1e-12


# --------------------------------------------------------------------------
# driver


def test_run_requires_table(small):
    img, graph, _ = small
    ctx = SMMContext(img.data, MODEL, graph, None)
    with pytest.raises(InvalidArgumentError):
        run_mcmc(ctx, MCMCConfig(G=3, iterations=10, burn_in=2))


def test_table_mismatch(small):
    img, graph, table = small
    ctx = SMMContext(img.data, MODEL, graph, table)
    with pytest.raises(InvalidArgumentError):
        run_mcmc(ctx, MCMCConfig(G=4, iterations=10, burn_in=2))


def test_non_finite_init_aborts(small, rng):
    ctx = _ctx(small)
    st = _state_for(ctx, rng)
    st.K1[0] = 0.1
    with pytest.raises(NumericalError):
        run_mcmc(ctx, MCMCConfig(G=3, iterations=10, burn_in=2), init=st)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        MCMCConfig(G=1)
    with pytest.raises(InvalidArgumentError):
        MCMCConfig(iterations=100, burn_in=100)
    with pytest.raises(InvalidArgumentError):
        MCMCConfig(thin=0)
    with pytest.raises(InvalidArgumentError):
        Priors(k1_bounds=(0.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        ProposalScales(sd_k1=0.0)


def test_map_and_full_chains_agree(small):
    ctx = _ctx(small)
    full = run_mcmc(ctx, MCMCConfig(G=3, iterations=400, burn_in=100, seed=3))
    mp = run_mcmc(ctx, MCMCConfig.map_only(3, iterations=250, seed=3))
    assert full.log_posterior_trace[:250].tobytes() == mp.log_posterior_trace.tobytes()
    assert full.beta_trace[:250].tobytes() == mp.beta_trace.tobytes()
    assert mp.samples is None and full.samples is not None
    assert len(full.samples) == 30


def test_run_deterministic_and_summaries(small):
    ctx = _ctx(small)
    cfg = MCMCConfig(G=3, iterations=1500, burn_in=500, seed=8)
    a = run_mcmc(ctx, cfg)
    b = run_mcmc(ctx, cfg)
    assert a.log_posterior_trace.tobytes() == b.log_posterior_trace.tobytes()
    assert np.array_equal(a.samples.z, b.samples.z)
    assert np.allclose(a.membership.sum(axis=1), 1.0)
    assert np.all(np.diff(a.samples.K1, axis=1) >= 0)
    assert np.all(a.k1_interval[:, 0] <= a.k1_mean) and np.all(a.k1_mean <= a.k1_interval[:, 1])
    assert a.map_log_posterior == pytest.approx(log_posterior(ctx, a.map_state), rel=1e-12)
    assert a.map_log_posterior == a.log_posterior_trace.max() or a.map_iteration == 0
    # contiguous regions: the spatial term is active
    assert a.samples.beta.mean() > 0
    assert set(a.acceptance) == {"K1", "k2", "noise_mean", "beta"}


def test_map_state_recovers_regions(small):
    img = small[0]
    ctx = _ctx(small)
    summ = run_mcmc(ctx, MCMCConfig.map_only(3, iterations=1500, seed=1))
    st = summ.map_state
    # compare with least-squares fits of each region's mean curve
    ls = [lm_fit_voxel(img.data[img.truth_region == r].mean(axis=0), MODEL, FitConfig()).params.K1 for r in (2, 1)]
    assert st.K1[1] == pytest.approx(ls[1], rel=0.1)
    # the defect block has six voxels and a wide posterior; both estimates must sit inside its 95 % interval
    full = run_mcmc(ctx, MCMCConfig(G=3, iterations=6000, burn_in=2000, seed=1))
    lo, hi = full.k1_interval[0]
    assert lo <= st.K1[0] <= hi and lo <= ls[0] <= hi
    assert hi - lo < 0.5
    k1, _ = st.voxel_params()
    assert np.mean(k1[img.noise_mask()] == 0.0) > 0.95


# --------------------------------------------------------------------------
# relabelling


def _samples(K1, k2, z):
    S = K1.shape[0]
    T = 2
    return Samples(np.arange(S), K1, k2, np.zeros((S, T)), np.ones((S, T)), np.zeros(S), z)


def test_relabel_identity_and_permutation(rng):
    S, n = 20, 10
    K1 = np.sort(rng.uniform(0.3, 1, (S, 3)), axis=1)
    k2 = rng.uniform(0, 0.3, (S, 3))
    z = rng.integers(1, 5, (S, n)).astype(np.int16)
    s = _samples(K1, k2, z)
    out = relabel(s)
    assert np.array_equal(out.K1, K1) and np.array_equal(out.z, z)
    perm = np.array([2, 0, 1])
    lut = np.concatenate([np.argsort(perm) + 1, [4]])
    shuffled = _samples(K1[:, perm], k2[:, perm], lut[z - 1].astype(np.int16))
    back = relabel(shuffled)
    assert np.array_equal(back.K1, K1) and np.array_equal(back.k2, k2) and np.array_equal(back.z, z)


def test_relabel_restores_swapped_halves(rng):
    S = 2000
    K1 = np.column_stack([rng.normal(0.4, 0.01, S), rng.normal(0.9, 0.01, S)])
    base_var = K1[:, 0].var()
    swapped = K1.copy()
    swapped[S // 2:] = swapped[S // 2:, ::-1]
    z = np.ones((S, 4), dtype=np.int16)
    out = relabel(_samples(swapped, np.zeros((S, 2)), z))
    assert out.K1[:, 0].var() < 1.1 * base_var
    assert np.all(out.z[S // 2:] == 2) and np.all(out.z[: S // 2] == 1)


def test_canonical_state_keeps_noise_label(rng):
    st = ChainState(np.array([1, 2, 3, 3, 1]), np.array([0.9, 0.4]), np.array([0.07, 0.05]), np.zeros(2),
                    np.ones(2), 0.1)
    c = canonical_state(st)
    assert c.K1.tolist() == [0.4, 0.9] and c.z.tolist() == [2, 1, 3, 3, 2]


def test_membership_frequencies():
    z = np.array([[1, 2], [1, 3], [2, 3], [1, 3]])
    f = membership_frequencies(z, 3)
    assert f.tolist() == [[0.75, 0.25, 0.0], [0.0, 0.25, 0.75]]


# --------------------------------------------------------------------------
# model selection


def test_bic_examples():
    assert bic_value(-500.0, 100, 10) == pytest.approx(1027.673, abs=1e-3)
    assert bic_value(-500.0, 100, 0) == 1000.0
    step = math.log(100) - math.log(2 * math.pi)
    assert bic_value(-500.0, 100, 11) - bic_value(-500.0, 100, 10) == pytest.approx(step, rel=1e-12)
    assert degrees_of_freedom(3, 17) == 2 * 2 + 17 + 17 + 1
    assert degrees_of_freedom(3, 17, spillover=True) == 4 * 2 + 17 + 17 + 1


def test_select_components_single_and_table(small, tmp_path):
    img, graph, table = small
    best, rows = select_components(img, MODEL, [3], lambda G: table, Priors(), SCALES, iterations=200)
    assert best == 3 and len(rows) == 1 and rows[0].df == degrees_of_freedom(3, MODEL.n_frames)
    write_bic_csv(tmp_path / "bic.csv", rows)
    back = read_bic_csv(tmp_path / "bic.csv")
    assert (back[0].G, back[0].loglik, back[0].df, back[0].bic) == (3, rows[0].loglik, rows[0].df, rows[0].bic)


def test_select_components_workers_identical(small):
    img, graph, _ = small
    tables = {G: estimate_partition(G, graph, 1.0, 0.05, MCSettings(20, 60, 2)) for G in (2, 3)}
    a = select_components(img, MODEL, [2, 3], tables.__getitem__, Priors(), SCALES, iterations=150, workers=1)
    b = select_components(img, MODEL, [2, 3], tables.__getitem__, Priors(), SCALES, iterations=150, workers=2)
    assert a[0] == b[0]
    assert [r.bic for r in a[1]] == [r.bic for r in b[1]]


def test_samples_csv(tmp_path, rng):
    s = _samples(np.array([[0.4, 0.9], [0.41, 0.89]]), np.array([[0.05, 0.07], [0.06, 0.08]]),
                 np.ones((2, 3), dtype=np.int16))
    write_samples_csv(tmp_path / "s.csv", s)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines == ["iter,component,K1,k2", "0,1,0.4,0.05", "0,2,0.9,0.07", "1,1,0.41,0.06", "1,2,0.89,0.08"]
