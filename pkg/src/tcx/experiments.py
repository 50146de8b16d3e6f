"""Comparative studies: tracking, layerwise decrease, disentanglement,
distillation ceiling, lambda sweeps, and PGD robustness/transfer."""

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from tcx import ebm, estimators, nn
from tcx.gating import (DETERMINISTIC_PASS, STOCHASTIC_PASS, capture_record)
from tcx.reporting import RunLog, SweepResult, report_rows


@dataclass
class AttackConfig:
    step_size: float = 0.5 / 255
    max_iters: int = 500
    utility_target: float = 40.0
    norm: str = "l2"

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


def estimator_config_hash(config):
    text = f"{config.kappa_fc}|{config.kappa_conv_like}|{sorted(config.per_layer.items())}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def analyze_network(net, analysis_x, labels=None, config=None,
                    estimator_kind="kde", dropout_seed=0):
    """Capture both passes and build a report; never perturbs training state."""
    config = config or estimators.KernelConfig()
    checksum = net.param_checksum()
    stoch = capture_record(net, analysis_x, STOCHASTIC_PASS, seed=dropout_seed)
    det = capture_record(net, analysis_x, DETERMINISTIC_PASS)
    report = estimators.build_report(stoch, det, labels=labels, config=config,
                                     estimator_kind=estimator_kind)
    if net.param_checksum() != checksum:
        raise RuntimeError("analysis perturbed network parameters")
    return report


def train_with_tracking(net, train_ds, test_ds, schedule, analysis_every=1,
                        analysis_seed=0, analysis_k=2000, config=None,
                        estimator_kind="kde", run_id="run", labels_for_ixsy=True):
    """Train while logging per-layer complexities on a fixed analysis subset."""
    from tcx.data import subsample_analysis_set

    config = config or estimators.KernelConfig()
    analysis_ds, analysis_idx = subsample_analysis_set(train_ds, k=analysis_k,
                                                       seed=analysis_seed)
    labels = analysis_ds.labels if labels_for_ixsy else None

    def analysis_fn(current_net, epoch):
        report = analyze_network(current_net, analysis_ds.features, labels,
                                 config, estimator_kind,
                                 dropout_seed=analysis_seed)
        rows = report_rows(report, run_id, epoch)
        return {"metric_rows": rows, "report": report}

    net, log = ebm.alternating_train(
        net, train_ds.features, train_ds.labels, schedule,
        test_x=test_ds.features if test_ds is not None else None,
        test_y=test_ds.labels if test_ds is not None else None,
        analysis_fn=analysis_fn, analysis_every=analysis_every, run_id=run_id)
    log.config_hash = estimator_config_hash(config)
    log.extras["analysis_indices"] = analysis_idx
    return net, log


def layerwise_study(net, analysis_x, config=None, dropout_seed=0):
    """Suffix joint entropies H(layers l..L): exact curve plus KDE curve."""
    config = config or estimators.KernelConfig()
    record = capture_record(net, analysis_x, STOCHASTIC_PASS, seed=dropout_seed)
    return {
        "layer_ids": [g.layer_id for g in record.layers],
        "suffix_exact": estimators.suffix_entropies(record, "exact", config),
        "suffix_kde": estimators.suffix_entropies(record, "kde", config),
    }


def disentanglement_study(spec, n_models, train_ds, test_ds, schedule,
                          layer_pos=-2, base_seed=0, config=None):
    """Same-architecture models from different seeds: H vs TC at one layer.

    layer_pos indexes the gating layers (default: penultimate).  Exact
    estimators keep the per-model identity H + TC = C intact.
    """
    if n_models < 3:
        raise ValueError("need at least 3 models for a correlation study")
    rows = []
    for m in range(n_models):
        net = nn.init_network(spec, base_seed + m)
        net, _ = ebm.alternating_train(
            net, train_ds.features, train_ds.labels, schedule,
            test_x=None, test_y=None, run_id=f"model{m}")
        record = capture_record(net, train_ds.features, STOCHASTIC_PASS)
        g = record.layers[layer_pos]
        h = estimators.exact_entropy(g)
        tc = estimators.exact_tc(g)
        _, _, c = estimators.marginal_entropies(g)
        rows.append({"model": m, "seed": base_seed + m, "H": h, "TC": tc,
                     "C": c, "layer_id": g.layer_id})
    hs = np.array([r["H"] for r in rows])
    tcs = np.array([r["TC"] for r in rows])
    r, _ = stats.pearsonr(hs, tcs)
    return {"rows": rows, "pearson_r": float(r),
            "mean_C": float(np.mean([r_["C"] for r_ in rows]))}


def _final_mse(net, x, y):
    out, _ = nn.forward(net, x, mode="eval")
    val, _ = nn.loss("mse", out, y)
    return val


def distillation_ceiling(task_ns, target_builders, trials, input_gray,
                         task_width=64, schedule=None, base_seed=0,
                         config=None):
    """Distill frozen task nets of rising depth into target nets; grid of
    final joint gate entropy per (task_n, target).

    input_gray: (n, d) grayscale inputs shared by every task; targets train
    with MSE on the frozen task output.
    """
    from tcx.data import make_task_mlp

    config = config or estimators.KernelConfig()
    if schedule is None:
        schedule = ebm.TrainSchedule(task_loss="mse", epochs=30)
    d = input_gray.shape[1]
    rows = []
    for task_n in task_ns:
        task = make_task_mlp(task_n, task_width, seed=base_seed + 7919 * task_n,
                             in_dim=d)
        targets_y, _ = nn.forward(task, input_gray, mode="eval")
        for name, builder in target_builders.items():
            for trial in range(trials):
                spec = builder(d, targets_y.shape[1])
                net = nn.init_network(spec, base_seed + 31 * trial + task_n)
                sched = replace(schedule, task_loss="mse",
                                shuffle_seed=base_seed + trial)
                net, _ = ebm.alternating_train(net, input_gray, targets_y,
                                               sched)
                record = capture_record(net, input_gray, STOCHASTIC_PASS)
                if record.layers:
                    cat = record.concat()
                    try:
                        s2 = estimators.compute_sigma0_sq(cat, config.kappa_fc)
                        h = estimators.kde_entropy(cat, s2)
                    except estimators.DegenerateVarianceError:
                        h = 0.0
                else:
                    h = 0.0
                rows.append({"task_n": task_n, "target": name, "trial": trial,
                             "final_H": h,
                             "final_mse": _final_mse(net, input_gray, targets_y)})
    return rows


def _final_sweep_metrics(net, train_ds, test_ds, config, dropout_seed=0):
    record = capture_record(net, train_ds.features, STOCHASTIC_PASS,
                            seed=dropout_seed)
    cat = record.concat()
    try:
        s2 = estimators.compute_sigma0_sq(cat, config.kappa_fc)
        h_joint = estimators.kde_entropy(cat, s2)
    except estimators.DegenerateVarianceError:
        h_joint = 0.0
    h_sum = 0.0
    ixsy_sum = 0.0
    for g in record.layers:
        kappa = config.kappa_for(g)
        try:
            s2 = estimators.compute_sigma0_sq(g, kappa)
        except estimators.DegenerateVarianceError:
            continue
        h_sum += estimators.kde_entropy(g, s2)
        ixsy_sum += estimators.estimate_I_XSY(g, train_ds.labels, "kde", kappa)
    train_loss = ebm._eval_task_loss(net, train_ds.features, train_ds.labels,
                                     "cross_entropy")
    test_loss = ebm._eval_task_loss(net, test_ds.features, test_ds.labels,
                                    "cross_entropy")
    return {"final_H": h_joint, "final_H_sum": h_sum, "final_I_XSY": ixsy_sum,
            "train_loss": train_loss, "test_loss": test_loss,
            "gap": test_loss - train_loss}


def _sweep_trial(args):
    spec, train_ds, test_ds, schedule, config, regularizer, lam, seed = args
    net = nn.init_network(spec, seed)
    if regularizer == "complexity":
        sched = replace(schedule, lam=lam, shuffle_seed=seed)
        run_id = f"lam{lam:g}_s{seed}"
    else:
        reg = {"l1": "l1_reg", "l2": "l2_reg"}[regularizer]
        sched = replace(schedule, lam=0.0, reg_kind=reg, reg_lambda=lam,
                        shuffle_seed=seed)
        run_id = f"{regularizer}{lam:g}_s{seed}"
    net, log = ebm.alternating_train(
        net, train_ds.features, train_ds.labels, sched,
        test_x=test_ds.features, test_y=test_ds.labels, run_id=run_id)
    row = {"run_id": run_id, "regularizer": regularizer, "lambda": lam,
           "seed": seed}
    row.update(_final_sweep_metrics(net, train_ds, test_ds, config))
    log.extras.pop("ebms", None)      # keep worker results light
    log.extras.pop("priors", None)
    return row, log


def lambda_sweep(spec, train_ds, test_ds, lambdas, seeds, schedule,
                 baselines=None, config=None, jobs=1):
    """Train per (lambda, seed) plus optional L1/L2 baselines; returns
    SweepResult rows with final complexity and loss-gap summaries.

    Trials are independent; jobs > 1 fans them out to processes, with the
    merge order fixed by the trial list either way.
    """
    config = config or estimators.KernelConfig()
    trials = [("complexity", lam, seed) for lam in lambdas for seed in seeds]
    for kind, grid in (baselines or {}).items():
        if kind not in ("l1", "l2"):
            raise ValueError(f"unknown baseline kind {kind!r}")
        trials += [(kind, lam, seed) for lam in grid for seed in seeds]
    args = [(spec, train_ds, test_ds, schedule, config, reg, lam, seed)
            for reg, lam, seed in trials]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_sweep_trial, args))
    else:
        outs = [_sweep_trial(a) for a in args]
    result = SweepResult(rows=[row for row, _ in outs])
    logs = {row["run_id"]: log for row, log in outs}
    return result, logs


def sweep_spearman(result, regularizer="complexity"):
    rows = [r for r in result.rows if r["regularizer"] == regularizer]
    lams = [r["lambda"] for r in rows]
    hs = [r["final_H"] for r in rows]
    rho, _ = stats.spearmanr(lams, hs)
    return float(rho)


def pgd_min_perturbation(net, x, y, attack):
    """Minimum-norm untargeted PGD: ascend U = max_{y'!=y} h_y' - h_y with
    L2-normalized steps, tracking the smallest-norm iterate reaching the
    utility target.  Returns (epsilon, norm); norm = inf when unreached."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    y = int(y)
    out, _ = nn.forward(net, x, mode="eval")
    if int(np.argmax(out[0])) != y:
        return np.zeros(x.shape[1]), 0.0
    eps = np.zeros_like(x)
    best_eps, best_norm = None, np.inf
    for it in range(attack.max_iters + 1):
        out, trace = nn.forward(net, x + eps, mode="eval", capture=True)
        logits = out[0]
        rival = int(np.argmax(np.where(np.arange(logits.size) == y, -np.inf,
                                       logits)))
        utility = logits[rival] - logits[y]
        if utility >= attack.utility_target:
            norm = float(np.linalg.norm(eps))
            if norm < best_norm:
                best_norm, best_eps = norm, eps[0].copy()
        if it == attack.max_iters:
            break
        out_grad = np.zeros_like(out)
        out_grad[0, rival] = 1.0
        out_grad[0, y] = -1.0
        _, gx = nn.backward(net, trace, out_grad)
        gn = np.linalg.norm(gx)
        if gn == 0:
            break
        eps = eps + attack.step_size * gx / gn
    if best_eps is None:
        return np.full(x.shape[1], np.nan), np.inf
    return best_eps, best_norm


def transferability_matrix(models, attack, eval_x, eval_y):
    """entry (i, j): fraction of source-i adversarial examples (target utility
    reached on correctly-classified inputs) that flip model j's prediction."""
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    n_models = len(models)
    adv_pairs = []
    for net in models:
        pairs = []
        for x, y in zip(eval_x, eval_y):
            out, _ = nn.forward(net, x.reshape(1, -1), mode="eval")
            if int(np.argmax(out[0])) != int(y):
                continue
            eps, norm = pgd_min_perturbation(net, x, y, attack)
            if np.isfinite(norm) and norm > 0:
                pairs.append((x, x + eps))
        adv_pairs.append(pairs)
    matrix = np.full((n_models, n_models), np.nan)
    for i, pairs in enumerate(adv_pairs):
        if not pairs:
            continue
        clean = np.array([p[0] for p in pairs])
        adv = np.array([p[1] for p in pairs])
        for j, net in enumerate(models):
            flipped = nn.predict_classes(net, clean) != nn.predict_classes(net, adv)
            matrix[i, j] = float(np.mean(flipped))
    return matrix
