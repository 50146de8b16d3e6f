import numpy as np
import pytest

from tcx import ebm, nn
from tcx.data import make_synthetic_classification


def fd_vector(fn, x, step=1e-5):
    g = np.zeros_like(x)
    flat = x.ravel()
    out = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        v1 = fn()
        flat[i] = old - step
        v2 = fn()
        flat[i] = old
        out[i] = (v1 - v2) / (2 * step)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# --- prior -------------------------------------------------------------------

def test_prior_logq_endpoints():
    prior = ebm.PriorConfig.from_rates([0.3, 0.8])
    assert np.isclose(ebm.prior_logq(np.array([1.0, 1.0]), prior),
                      np.log(0.3) + np.log(0.8))
    assert np.isclose(ebm.prior_logq(np.array([0.0, 0.0]), prior),
                      np.log(0.7) + np.log(0.2))


def test_prior_logq_midpoint_symmetric():
    prior = ebm.PriorConfig.from_rates([0.5])
    assert np.isclose(ebm.prior_logq(np.array([0.5]), prior), np.log(0.5))


def test_prior_logq_monotone_with_rate_sign():
    for p in (0.2, 0.5, 0.9):
        prior = ebm.PriorConfig.from_rates([p])
        vals = [ebm.prior_logq(np.array([s]), prior)
                for s in np.linspace(0, 1, 9)]
        diffs = np.diff(vals)
        if p > 0.5:
            assert np.all(diffs > 0)
        elif p < 0.5:
            assert np.all(diffs < 0)
        else:
            assert np.allclose(diffs, 0)


def test_prior_rates_clamped():
    prior = ebm.PriorConfig.from_rates([0.0, 1.0])
    assert prior.rates[0] == 1e-3
    assert prior.rates[1] == 1 - 1e-3


# --- energy --------------------------------------------------------------

def test_energy_zero_f_is_neg_logq(rng):
    prior = ebm.PriorConfig.from_rates(rng.uniform(0.2, 0.8, 6))
    enet = ebm.EnergyNet.zero(6)
    s = rng.uniform(0, 1, 6)
    assert np.isclose(ebm.energy(s, enet, prior), -ebm.prior_logq(s, prior))


def test_energy_shift_linearity(rng):
    enet = ebm.make_energy_net(5, widths=(8,), seed=0)
    prior = ebm.PriorConfig.uniform(5)
    s = rng.uniform(0, 1, (3, 5))
    e0 = ebm.energy(s, enet, prior)
    c = 2.5
    enet.net.biases[-1][:] += c      # f -> f + c uniformly
    e1 = ebm.energy(s, enet, prior)
    assert np.allclose(e1, e0 - c)


def test_energy_grad_matches_fd(rng):
    enet = ebm.make_energy_net(8, widths=(12, 12), seed=4)
    prior = ebm.PriorConfig.from_rates(rng.uniform(0.2, 0.8, 8))
    s = rng.uniform(0.05, 0.95, (4, 8))
    _, grad = ebm.energy_and_grad(s, enet, prior)
    fd = fd_vector(lambda: float(np.sum(ebm.energy(s, enet, prior))), s)
    assert rel_err(grad, fd) < 1e-4


# --- langevin -------------------------------------------------------------

def test_langevin_zero_gradient_zero_noise_fixed_point():
    cfg = ebm.LangevinConfig(step_size=0.1, steps=25, noise_scale=0.0)
    x0 = np.array([[0.3, 0.7]])
    out = ebm.langevin_sample(x0, lambda x: np.zeros_like(x), cfg)
    assert np.array_equal(out, x0)


def test_langevin_same_seed_identical(rng):
    enet = ebm.make_energy_net(4, widths=(6,), seed=1)
    prior = ebm.PriorConfig.uniform(4)
    init = rng.uniform(0, 1, (5, 4))
    cfg = ebm.LangevinConfig(step_size=0.01, steps=15, noise_seed=123)
    a = ebm.langevin_chain(init, enet, prior, cfg)
    b = ebm.langevin_chain(init, enet, prior, cfg)
    assert np.array_equal(a, b)


def test_langevin_zero_noise_descends_convex_energy():
    # quadratic bowl, smoothness 1/s^2; dt at the 0.1/L limit
    s2 = 0.5
    mu = 1.3

    def grad(x):
        return (x - mu) / s2

    def energy(x):
        return float(np.sum((x - mu) ** 2) / (2 * s2))

    cfg = ebm.LangevinConfig(step_size=0.1 * s2, steps=1, noise_scale=0.0)
    x = np.array([[0.0]])
    prev = energy(x)
    for _ in range(30):
        x = ebm.langevin_sample(x, grad, cfg)
        cur = energy(x)
        assert cur < prev
        prev = cur


def test_langevin_gaussian_stationary_moments():
    # 10^4 parallel scalar chains, burn-in long past the mixing time
    mu, s2 = 2.0, 1.0
    n_chains = 10_000
    cfg = ebm.LangevinConfig(step_size=0.02, steps=1500, noise_seed=77)
    samples = ebm.langevin_sample(
        np.zeros((n_chains, 1)), lambda x: (x - mu) / s2, cfg)
    assert abs(samples.mean() - mu) / mu < 0.05
    assert abs(samples.var() - s2) / s2 < 0.05


def test_langevin_divergence_aborts():
    cfg = ebm.LangevinConfig(step_size=1.0, steps=50, noise_scale=0.0,
                             divergence_limit=1e3)
    with pytest.raises(ebm.LangevinDivergence):
        # anti-gradient: pushes x away from 0 exponentially
        ebm.langevin_sample(np.array([[1.0]]), lambda x: -10.0 * x, cfg)


# --- MLE -------------------------------------------------------------------

def test_mle_gradient_zero_when_synth_equals_data(rng):
    enet = ebm.make_energy_net(6, widths=(8,), seed=2)
    data = rng.uniform(0, 1, (10, 6))
    grads = ebm.ebm_mle_gradient(enet, data, data.copy())
    for g in grads.d_weights + grads.d_biases:
        assert np.allclose(g, 0.0, atol=1e-15)


def test_mle_gradient_matches_fd_frozen_chains(rng):
    enet = ebm.make_energy_net(5, widths=(7,), seed=3)
    prior = ebm.PriorConfig.uniform(5)
    data = rng.uniform(0, 1, (8, 5))
    synth = rng.uniform(0, 1, (8, 5))
    grads = ebm.ebm_mle_gradient(enet, data, synth, prior)
    analytic = np.concatenate([g.ravel() for g in
                               grads.d_weights + grads.d_biases])

    def objective():
        return float(np.mean(ebm.energy(data, enet, prior))
                     - np.mean(ebm.energy(synth, enet, prior)))

    fd = []
    for arr in enet.net.weights + enet.net.biases:
        fd.append(fd_vector(lambda: objective(), arr).ravel())
    assert rel_err(analytic, np.concatenate(fd)) < 1e-4


def test_mle_step_zero_capacity_f_noop(rng):
    enet = ebm.EnergyNet.zero(4)
    prior = ebm.PriorConfig.uniform(4)
    data = rng.uniform(0, 1, (6, 4))
    cfg = ebm.LangevinConfig(step_size=0.01, steps=3, noise_seed=1)
    ebm.ebm_mle_step(data, enet, prior, cfg, lr=0.1)
    assert enet.net is None     # nothing to update, nothing crashed


def test_mle_step_empty_batch_rejected():
    enet = ebm.EnergyNet.zero(4)
    with pytest.raises(ValueError):
        ebm.ebm_mle_step(np.zeros((0, 4)), enet, ebm.PriorConfig.uniform(4),
                         ebm.LangevinConfig(), lr=0.1)


# --- complexity loss --------------------------------------------------------

def _relaxed_trace(net, x, beta=6.0):
    return nn.forward(net, x, mode="train", capture=True, relaxed=True,
                      beta=beta)


def test_complexity_loss_uniform_prior_value(rng):
    net = nn.init_network([nn.dense(4, 10), nn.relu(), nn.dense(10, 2)], 0)
    x = rng.normal(size=(7, 4))
    _, trace = _relaxed_trace(net, x)
    li = 1
    ebms = {li: ebm.EnergyNet.zero(10)}
    priors = {li: ebm.PriorConfig.uniform(10)}
    value, gate_grads = ebm.complexity_loss_terms(trace, ebms, priors)
    # q == 0.5 everywhere regardless of sigma: loss is D*log 2
    assert np.isclose(value, 10 * np.log(2))
    assert li in gate_grads


def test_complexity_loss_requires_relaxed_trace(rng):
    net = nn.init_network([nn.dense(4, 6), nn.relu(), nn.dense(6, 2)], 0)
    _, trace = nn.forward(net, rng.normal(size=(5, 4)), capture=True)
    with pytest.raises(ValueError):
        ebm.complexity_loss_terms(trace, {1: ebm.EnergyNet.zero(6)},
                                  {1: ebm.PriorConfig.uniform(6)})


def test_complexity_loss_full_pipeline_gradient(rng):
    net = nn.init_network([nn.dense(6, 8), nn.relu(), nn.dense(8, 8),
                           nn.relu(), nn.dense(8, 2)], 9)
    x = rng.normal(size=(5, 6))
    pen = ebm.penalized_layer_indices(net.spec, 2)
    ebms = {li: ebm.make_energy_net(8, widths=(6,), seed=li) for li in pen}
    priors = {li: ebm.PriorConfig.from_rates(rng.uniform(0.3, 0.7, 8))
              for li in pen}

    def value():
        _, trace = _relaxed_trace(net, x)
        v, _ = ebm.complexity_loss_terms(trace, ebms, priors)
        return v

    _, trace = _relaxed_trace(net, x)
    _, grads = ebm.complexity_loss(net, trace, ebms, priors)
    analytic = np.concatenate([g.ravel() for g in
                               grads.d_weights + grads.d_biases])
    fd = []
    for arr in net.weights + net.biases:
        fd.append(fd_vector(lambda: value(), arr).ravel())
    assert rel_err(analytic, np.concatenate(fd)) < 1e-4


def test_complexity_loss_reduces_to_bernoulli_cross_entropy(rng):
    net = nn.init_network([nn.dense(3, 5), nn.relu(), nn.dense(5, 2)], 1)
    x = rng.normal(size=(9, 3))
    _, trace = _relaxed_trace(net, x)
    prior = ebm.PriorConfig.from_rates(rng.uniform(0.2, 0.8, 5))
    value, _ = ebm.complexity_loss_terms(trace, {1: ebm.EnergyNet.zero(5)},
                                         {1: prior})
    s = trace.layers[1].s
    expected = -np.mean(np.log(
        1 - prior.rates + s * (2 * prior.rates - 1)).sum(axis=1))
    assert np.isclose(value, expected)


# --- alternating training ---------------------------------------------------

def _toy_problem(seed=0):
    ds = make_synthetic_classification(seed=seed, n=64, d=6, n_classes=3,
                                       separation=2.0)
    spec = nn.stacked_mlp_spec([6, 12, 10, 3])
    return ds, spec


def test_lambda_zero_bitwise_equals_plain_training():
    ds, spec = _toy_problem()

    def train(lam):
        net = nn.init_network(spec, 5)
        sched = ebm.TrainSchedule(lam=lam, epochs=3, batch_size=16,
                                  shuffle_seed=2)
        net, _ = ebm.alternating_train(net, ds.features, ds.labels, sched)
        return net

    a = train(0.0)
    # reference: hand-rolled task-only loop with the same seeds
    net = nn.init_network(spec, 5)
    state = nn.OptState()
    cfg = nn.OptConfig(kind="adam", lr=1e-3)
    rng = np.random.default_rng(2)
    for _ in range(3):
        idx = rng.permutation(64)
        for i in range(0, 64, 16):
            bi = idx[i:i + 16]
            out, trace = nn.forward(net, ds.features[bi], capture=True)
            _, og = nn.loss("cross_entropy", out, ds.labels[bi])
            grads, _ = nn.backward(net, trace, og)
            nn.optimizer_step(net, grads, state, cfg)
    for wa, wb in zip(a.weights + a.biases, net.weights + net.biases):
        assert np.array_equal(wa, wb)


def test_ebm_only_step_leaves_network_unchanged(rng):
    ds, spec = _toy_problem(3)
    net = nn.init_network(spec, 7)
    before = [w.copy() for w in net.weights] + [b.copy() for b in net.biases]
    _, trace = _relaxed_trace(net, ds.features[:16])
    li = ebm.penalized_layer_indices(net.spec, 1)[0]
    enet = ebm.make_energy_net(trace.layers[li].s.shape[1], widths=(6,), seed=0)
    prior = ebm.PriorConfig.uniform(trace.layers[li].s.shape[1])
    ebm.ebm_mle_step(trace.layers[li].s, enet, prior,
                     ebm.LangevinConfig(steps=3), lr=0.05)
    after = net.weights + net.biases
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_alternating_train_runs_and_logs(rng):
    ds, spec = _toy_problem(1)
    net = nn.init_network(spec, 11)
    sched = ebm.TrainSchedule(lam=0.05, epochs=2, batch_size=32,
                              ebm_widths=(8,),
                              langevin=ebm.LangevinConfig(steps=5))
    net, log = ebm.alternating_train(net, ds.features, ds.labels, sched,
                                     test_x=ds.features, test_y=ds.labels)
    assert [r["epoch"] for r in log.records] == [0, 1, 2]
    assert log.records[0]["loss_complexity"] is None
    assert log.records[-1]["loss_complexity"] is not None
    for rec in log.records:
        assert rec["gap"] == rec["test_loss"] - rec["train_loss"]
