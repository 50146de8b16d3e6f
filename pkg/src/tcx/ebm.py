"""Energy-based prior over gate vectors and minimum-complexity training.

The model is p(sigma) = exp[f(sigma)] * q(sigma) / Z with q an independent
Bernoulli prior over gate dimensions, relaxed to q(s_d) = 1 - p_d + s_d*(2p_d
- 1) so it stays defined on [0,1].  f is a small dense net trained by MCMC
maximum likelihood (Langevin chains initialized at data gates), and the
complexity loss -(1/n) sum_i [f(s_i) + log q(s_i)] flows into the network
through the relaxed Swish gates.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from tcx import nn
from tcx.reporting import RunLog


class LangevinDivergence(RuntimeError):
    pass


@dataclass
class PriorConfig:
    rates: np.ndarray          # per-dimension pass rates, clamped away from 0/1

    CLAMP = 1e-3

    @classmethod
    def from_rates(cls, rates):
        r = np.clip(np.asarray(rates, dtype=np.float64),
                    cls.CLAMP, 1.0 - cls.CLAMP)
        return cls(rates=r)

    @classmethod
    def uniform(cls, dim, p=0.5):
        return cls.from_rates(np.full(dim, p))


@dataclass
class LangevinConfig:
    step_size: float = 0.01
    steps: int = 20
    noise_seed: int = 0
    noise_scale: float = 1.0
    divergence_limit: float = 1e3

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class EnergyNet:
    """Scalar-output dense net f(sigma; theta_f) over a D-dim gate vector.

    net=None is the zero-capacity energy f == 0 (no parameters), which turns
    the EBM into the plain independent-Bernoulli prior.
    """
    net: nn.Network = None
    zero_dim: int = 0

    @classmethod
    def zero(cls, dim):
        return cls(net=None, zero_dim=dim)

    @property
    def dim(self):
        return self.zero_dim if self.net is None else self.net.in_dim


def make_energy_net(dim, widths=(32, 32), seed=0):
    spec = []
    prev = dim
    for w in widths:
        spec += [nn.dense(prev, w), nn.swish(1.0)]
        prev = w
    spec.append(nn.dense(prev, 1))
    return EnergyNet(net=nn.init_network(spec, seed))


def _as_batch(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    return (s[None, :], True) if s.ndim == 1 else (s, False)


def prior_logq(sigma, prior):
    """log q(sigma) = sum_d log(1 - p_d + sigma_d (2 p_d - 1)); rowwise."""
    s, squeezed = _as_batch(sigma)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite gate values")
    q = 1.0 - prior.rates + s * (2.0 * prior.rates - 1.0)
    out = np.log(q).sum(axis=1)
    return float(out[0]) if squeezed else out


def prior_logq_grad(sigma, prior):
    """d log q / d sigma_d = (2 p_d - 1) / q(sigma_d)."""
    s, squeezed = _as_batch(sigma)
    q = 1.0 - prior.rates + s * (2.0 * prior.rates - 1.0)
    out = (2.0 * prior.rates - 1.0) / q
    return out[0] if squeezed else out


def f_value(enet, sigma):
    s, squeezed = _as_batch(sigma)
    if enet.net is None:
        vals = np.zeros(s.shape[0])
    else:
        out, _ = nn.forward(enet.net, s, mode="eval")
        vals = out[:, 0]
    return float(vals[0]) if squeezed else vals


def f_value_and_input_grad(enet, sigma_batch):
    if enet.net is None:
        return np.zeros(sigma_batch.shape[0]), np.zeros_like(sigma_batch)
    out, trace = nn.forward(enet.net, sigma_batch, mode="eval", capture=True)
    ones = np.ones_like(out)
    _, input_grad = nn.backward(enet.net, trace, ones)
    return out[:, 0], input_grad


def energy(sigma, enet, prior):
    """E(sigma) = -log q(sigma) - f(sigma); rowwise for batches."""
    return -prior_logq(sigma, prior) - f_value(enet, sigma)


def energy_and_grad(sigma_batch, enet, prior):
    """Energies and dE/dsigma for a batch of gate vectors."""
    s = np.asarray(sigma_batch, dtype=np.float64)
    fv, fg = f_value_and_input_grad(enet, s)
    e = -prior_logq(s, prior) - fv
    return e, -prior_logq_grad(s, prior) - fg


def langevin_sample(init, grad_fn, config, clip=None):
    """Generic chain: x <- x - (dt/2) grad E(x) + sqrt(dt) eps, optional clip."""
    x = np.array(init, dtype=np.float64, copy=True)
    rng = np.random.default_rng(config.noise_seed)
    sqrt_dt = np.sqrt(config.step_size)
    for _ in range(config.steps):
        g = grad_fn(x)
        x = x - 0.5 * config.step_size * g
        if config.noise_scale:
            x += config.noise_scale * sqrt_dt * rng.standard_normal(x.shape)
        if np.any(np.abs(x) > config.divergence_limit) or not np.all(np.isfinite(x)):
            worst = float(np.nanmax(np.abs(x)))
            raise LangevinDivergence(
                f"chain diverged (max |x| = {worst:.3g} > "
                f"{config.divergence_limit:.3g})")
        if clip is not None:
            np.clip(x, clip[0], clip[1], out=x)
    return x


def langevin_chain(init_sigma, enet, prior, config):
    """EBM chain over gate space; entries clipped to [0,1] after each step."""
    return langevin_sample(
        init_sigma, lambda s: energy_and_grad(s, enet, prior)[1], config,
        clip=(0.0, 1.0))


def ebm_mle_gradient(enet, data_sigma, synth_sigma, prior=None):
    """Gradient of [mean E(data) - mean E(synth)] w.r.t. theta_f.

    E depends on theta_f only through -f, so this is the usual MLE contrast:
    raise f on data gates, lower it on synthesized ones.
    """
    if enet.net is None:
        return nn.GradientSet([], [])
    n = data_sigma.shape[0]
    _, trace_d = nn.forward(enet.net, data_sigma, mode="eval", capture=True)
    grads, _ = nn.backward(enet.net, trace_d,
                           np.full((n, 1), -1.0 / n))
    m = synth_sigma.shape[0]
    _, trace_s = nn.forward(enet.net, synth_sigma, mode="eval", capture=True)
    g_synth, _ = nn.backward(enet.net, trace_s, np.full((m, 1), 1.0 / m))
    grads.add_(g_synth)
    return grads


def ebm_mle_step(data_gates, enet, prior, langevin_config, lr,
                 opt_state=None):
    """One MLE ascent step; synthesized gates come from a data-initialized
    Langevin chain.  Returns (opt_state, info)."""
    data = np.asarray(data_gates, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty gate batch")
    synth = langevin_chain(data, enet, prior, langevin_config)
    grads = ebm_mle_gradient(enet, data, synth, prior)
    if opt_state is None:
        opt_state = nn.OptState()
    if enet.net is not None:
        nn.optimizer_step(enet.net, grads, opt_state,
                          nn.OptConfig(kind="sgd", lr=lr))
    e_data = float(np.mean(energy(data, enet, prior)))
    e_synth = float(np.mean(energy(synth, enet, prior)))
    return opt_state, {"energy_data": e_data, "energy_synth": e_synth}


def penalized_layer_indices(spec, last_k=4):
    """Spec indices of the last k differentiable gating layers (ReLU/Swish)."""
    soft = [i for i, l in enumerate(spec) if l.kind in nn.SOFT_GATING_KINDS]
    return soft[-last_k:] if last_k else []


def complexity_loss_terms(trace, ebms, priors):
    """Loss -(1/n) sum_l sum_i [f(s_li) + log q(s_li)] and dL/ds per layer.

    ebms/priors map spec layer index -> EnergyNet / PriorConfig.  The trace
    must come from a relaxed forward pass so gate values are in (0,1).
    """
    total = 0.0
    gate_grads = {}
    for li, enet in ebms.items():
        t = trace.layers[li]
        if t.s is None:
            raise ValueError(
                f"layer {li} has hard gates; complexity loss needs relaxed=True")
        s = t.s
        n = s.shape[0]
        prior = priors[li]
        fv, fg = f_value_and_input_grad(enet, s)
        lq = prior_logq(s, prior)
        total += float(-(fv + lq).sum() / n)
        gate_grads[li] = -(fg + prior_logq_grad(s, prior)) / n
    return total, gate_grads


def complexity_loss(net, trace, ebms, priors):
    """(value, GradientSet on the network) for the spec-facing contract."""
    value, gate_grads = complexity_loss_terms(trace, ebms, priors)
    out_dim = trace.layers[-1].out.shape
    grads, _ = nn.backward(net, trace, np.zeros(out_dim), gate_grads)
    return value, grads


@dataclass
class TrainSchedule:
    lam: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    task_loss: str = "cross_entropy"
    opt: nn.OptConfig = field(default_factory=lambda: nn.OptConfig(
        kind="adam", lr=1e-3))
    swish_beta: float = 10.0
    penalized_last_k: int = 4
    ebm_widths: tuple = (32, 32)
    ebm_lr: float = 0.01
    ebm_steps_per_batch: int = 1
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    shuffle_seed: int = 0
    reg_kind: str = None          # "l1_reg" / "l2_reg" baselines
    reg_lambda: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def _epoch_batches(n, batch_size, rng):
    idx = rng.permutation(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def _eval_task_loss(net, x, y, kind):
    out, _ = nn.forward(net, x, mode="eval")
    val, _ = nn.loss(kind, out, y)
    return val


def alternating_train(net, train_x, train_y, schedule, test_x=None,
                      test_y=None, analysis_fn=None, analysis_every=0,
                      run_id="run", log_priors=False):
    """Alternating EBM / network training (plain training when lambda=0).

    Per batch with lambda>0: (1) one relaxed forward, EBM MLE updates with the
    network frozen; (2) network update on task loss + lambda * complexity loss
    with the EBMs frozen.  lambda=0 takes the hard-gate path and touches no
    EBM state, so it is bitwise identical to task-only training.
    """
    log = RunLog(run_id=run_id, seed=net.seed, lam=schedule.lam)
    opt_state = nn.OptState()
    use_ebm = schedule.lam > 0
    pen = penalized_layer_indices(net.spec, schedule.penalized_last_k)
    ebms, priors, ebm_states = {}, {}, {}
    rate_acc = {}

    if use_ebm:
        if not pen:
            raise ValueError("no differentiable gating layers to penalize")
        # prime priors with the untrained activation rates
        _, tr0 = nn.forward(net, train_x, mode="eval", capture=True)
        dims = {}
        for li in pen:
            h = tr0.layers[li].x
            priors[li] = PriorConfig.from_rates((h > 0).mean(axis=0))
            dims[li] = h.shape[1]
        for k, li in enumerate(pen):
            ebms[li] = make_energy_net(dims[li], widths=schedule.ebm_widths,
                                       seed=net.seed + 1000 + k)
            ebm_states[li] = nn.OptState()

    def epoch_record(epoch, closs):
        # both losses in eval mode so the gap is on one footing
        train_loss = _eval_task_loss(net, train_x, train_y, schedule.task_loss)
        test_loss = (None if test_x is None else
                     _eval_task_loss(net, test_x, test_y, schedule.task_loss))
        rec = {"epoch": epoch, "train_loss": train_loss,
               "test_loss": test_loss,
               "gap": None if test_loss is None else test_loss - train_loss,
               "loss_complexity": closs}
        if log_priors and priors:
            rec["prior_rates"] = {li: priors[li].rates.copy() for li in pen}
        if analysis_fn is not None and (
                epoch == 0 or (analysis_every and epoch % analysis_every == 0)
                or epoch == schedule.epochs):
            rec.update(analysis_fn(net, epoch))
        log.records.append(rec)

    epoch_record(0, None)

    shuffle_rng = np.random.default_rng(schedule.shuffle_seed)
    chain_seed = schedule.langevin.noise_seed
    for epoch in range(1, schedule.epochs + 1):
        closs_sum = 0.0
        n_batches = 0
        for batch_idx in _epoch_batches(train_x.shape[0],
                                        schedule.batch_size, shuffle_rng):
            xb, yb = train_x[batch_idx], train_y[batch_idx]
            if use_ebm:
                out, trace = nn.forward(net, xb, mode="train", capture=True,
                                        relaxed=True, beta=schedule.swish_beta)
                # EBM updates, network frozen
                for li in pen:
                    s = trace.layers[li].s
                    for _ in range(schedule.ebm_steps_per_batch):
                        chain_seed += 1
                        cfg = replace(schedule.langevin, noise_seed=chain_seed)
                        ebm_states[li], _ = ebm_mle_step(
                            s, ebms[li], priors[li], cfg, schedule.ebm_lr,
                            ebm_states[li])
                    rate_acc.setdefault(li, []).append(
                        (trace.layers[li].x > 0).mean(axis=0))
                # network update, EBMs frozen
                _, out_grad = nn.loss(schedule.task_loss, out, yb)
                closs, gate_grads = complexity_loss_terms(trace, ebms, priors)
                scaled = {li: schedule.lam * g for li, g in gate_grads.items()}
                grads, _ = nn.backward(net, trace, out_grad, scaled)
                closs_sum += closs
            else:
                out, trace = nn.forward(net, xb, mode="train", capture=True)
                _, out_grad = nn.loss(schedule.task_loss, out, yb)
                grads, _ = nn.backward(net, trace, out_grad)
                if schedule.reg_kind:
                    grads.add_(nn.regularizer_grads(schedule.reg_kind, net),
                               scale=schedule.reg_lambda)
            opt_state = nn.optimizer_step(net, grads, opt_state, schedule.opt)
            n_batches += 1
        if use_ebm:
            for li in pen:
                priors[li] = PriorConfig.from_rates(
                    np.mean(rate_acc.pop(li), axis=0))
        epoch_record(epoch, closs_sum / n_batches if use_ebm else None)
    if use_ebm:
        log.extras["ebms"] = ebms
        log.extras["priors"] = priors
    return net, log
