"""Entropy / mutual-information / total-correlation estimates on gate matrices.

Two estimator families over the same quantities:

* "exact": plug-in values over the empirical distribution of observed gate
  patterns (row hashing).  These satisfy the algebraic identities exactly and
  serve as the oracle for the KDE bounds.
* "kde": pairwise-kernel upper bounds with bandwidth sigma0^2 = kappa *
  Var(gates).  For binary rows the squared distance is the Hamming distance,
  so kernels reduce to a table lookup over popcounts.

All values are in nats.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from tcx import kernels
from tcx.gating import GateMatrix, GateRecord, DETERMINISTIC_PASS


class DegenerateVarianceError(ValueError):
    """All gate rows identical: Var = 0, the KDE bandwidth is undefined."""


class EstimatorError(ValueError):
    pass


@dataclass
class KernelConfig:
    kappa_fc: float = 0.01
    kappa_conv_like: float = 0.04
    per_layer: dict = field(default_factory=dict)   # layer_id -> kappa

    def kappa_for(self, g: GateMatrix):
        if g.layer_id in self.per_layer:
            return self.per_layer[g.layer_id]
        if g.layer_kind == "maxpool":
            return self.kappa_conv_like
        return self.kappa_fc

    def __post_init__(self):
        if self.kappa_fc <= 0 or self.kappa_conv_like <= 0:
            raise ValueError("kappa must be positive")


def compute_sigma0_sq(g: GateMatrix, kappa: float) -> float:
    """kappa * E||sigma - mu||^2 over rows; raises on zero variance."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    dense = g.toarray().astype(np.float64)
    mu = dense.mean(axis=0)
    var = float(((dense - mu) ** 2).sum(axis=1).mean())
    if var == 0.0:
        raise DegenerateVarianceError(
            f"layer {g.layer_id}: all gate rows identical")
    return kappa * var


def _kernel_table(sigma0_sq, max_dist):
    d = np.arange(max_dist + 1, dtype=np.float64)
    return np.exp(-d / (2.0 * sigma0_sq))


def kde_entropy(g: GateMatrix, sigma0_sq: float) -> float:
    """Pairwise-kernel upper bound -(1/n) sum_j log (1/n) sum_k k(d_jk)."""
    if g.n == 0:
        raise EstimatorError("empty gate matrix")
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be positive")
    words = g.packed_words()
    table = _kernel_table(sigma0_sq, g.D)
    sums = kernels.kernel_row_sums(words, words, table)
    val = math.log(g.n) - float(np.mean(np.log(sums)))
    return max(val, 0.0)


def _row_counts(g: GateMatrix):
    _, inverse, counts = np.unique(g.bits, axis=0, return_inverse=True,
                                   return_counts=True)
    return counts, inverse


def exact_entropy(g: GateMatrix) -> float:
    """Plug-in entropy over distinct observed rows."""
    counts, _ = _row_counts(g)
    p = counts / g.n
    return float(-(p * np.log(p)).sum())


def marginal_entropies(g: GateMatrix):
    """Per-dimension activation rates a_d, binary entropies H_d, and their sum."""
    rates = g.toarray().mean(axis=0)
    h = np.zeros_like(rates)
    inner = (rates > 0) & (rates < 1)
    a = rates[inner]
    h[inner] = -a * np.log(a) - (1 - a) * np.log(1 - a)
    return rates, h, float(h.sum())


def exact_tc(g: GateMatrix) -> float:
    """Plug-in total correlation: sum of marginal entropies minus joint."""
    _, _, c = marginal_entropies(g)
    return c - exact_entropy(g)


def kde_tc(g: GateMatrix, sigma0_sq: float, synth_seed: int) -> float:
    """KDE bound on TC against independently resampled Bernoulli columns."""
    if g.n == 0:
        raise EstimatorError("empty gate matrix")
    rates = g.toarray().mean(axis=0)
    rng = np.random.default_rng(synth_seed)
    synth = GateMatrix.from_dense(g.layer_id, rng.random((g.n, g.D)) < rates,
                                  g.layer_kind)
    words = g.packed_words()
    table = _kernel_table(sigma0_sq, g.D)
    num = kernels.kernel_row_sums(words, words, table)
    den = kernels.kernel_row_sums(words, synth.packed_words(), table)
    if np.any(den == 0.0):
        raise EstimatorError("kernel underflow against synthesized gates; "
                             "increase kappa")
    return float(np.mean(np.log(num) - np.log(den)))


def _validate_labels(labels, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise EstimatorError(f"labels shape {y.shape} != ({n},)")
    if y.min() < 0:
        raise EstimatorError("negative class index")
    m = int(y.max()) + 1
    counts = np.bincount(y, minlength=m)
    if np.any(counts == 0):
        raise EstimatorError(f"empty class among 0..{m - 1}")
    return y, m


def _entropy_of(g, estimator_kind, kappa, degenerate_zero=True):
    if estimator_kind == "exact":
        return exact_entropy(g)
    try:
        s2 = compute_sigma0_sq(g, kappa)
    except DegenerateVarianceError:
        if degenerate_zero:
            return 0.0
        raise
    return kde_entropy(g, s2)


def class_conditional_entropy(g, labels, estimator_kind="exact", kappa=None):
    """sum_m p_m H(gates | class m); KDE bandwidth recomputed per class."""
    y, m = _validate_labels(labels, g.n)
    if estimator_kind == "kde" and kappa is None:
        raise ValueError("kappa required for the kde estimator")
    total = 0.0
    for cls in range(m):
        idx = np.flatnonzero(y == cls)
        total += (len(idx) / g.n) * _entropy_of(g.select_rows(idx),
                                                estimator_kind, kappa)
    return total


def class_conditional_budget(g, labels):
    """C_{l|Y}: class-weighted sum of per-class marginal entropies (exact)."""
    y, m = _validate_labels(labels, g.n)
    total = 0.0
    for cls in range(m):
        idx = np.flatnonzero(y == cls)
        _, _, c = marginal_entropies(g.select_rows(idx))
        total += (len(idx) / g.n) * c
    return total


def class_conditional_tc(g, labels, estimator_kind="exact", kappa=None,
                         synth_seed=0):
    """TC(gates | Y): class-weighted total correlation."""
    y, m = _validate_labels(labels, g.n)
    total = 0.0
    for cls in range(m):
        idx = np.flatnonzero(y == cls)
        sub = g.select_rows(idx)
        p = len(idx) / g.n
        if estimator_kind == "exact":
            total += p * exact_tc(sub)
        else:
            try:
                s2 = compute_sigma0_sq(sub, kappa)
            except DegenerateVarianceError:
                continue
            total += p * kde_tc(sub, s2, synth_seed + cls)
    return total


def estimate_I_XSY(g, labels, estimator_kind="exact", kappa=None,
                   stochastic_correction=0.0):
    """H(gates) - H(gates|Y) - correction; correction is 0 for deterministic
    nets (no sampling layers)."""
    h = _entropy_of(g, estimator_kind, kappa)
    h_cond = class_conditional_entropy(g, labels, estimator_kind, kappa)
    return h - h_cond - stochastic_correction


def estimate_I_XS(record: GateRecord, config: KernelConfig):
    """Per-layer I(X; gates): KDE entropy of the sampling-free pass."""
    if record.provenance != DETERMINISTIC_PASS:
        raise EstimatorError("I_XS needs a deterministic_pass record, got "
                             f"{record.provenance}")
    return [_entropy_of(g, "kde", config.kappa_for(g)) for g in record.layers]


def joint_entropy(record: GateRecord, layer_set, estimator_kind="exact",
                  config=None, kappa=None):
    """Entropy of the concatenated gates of a contiguous layer range."""
    layer_set = list(layer_set)
    if not layer_set:
        raise EstimatorError("empty layer set")
    if layer_set != list(range(layer_set[0], layer_set[-1] + 1)):
        raise EstimatorError("layer set must be contiguous")
    cat = record.concat(layer_set)
    if estimator_kind == "exact":
        return exact_entropy(cat)
    if kappa is None:
        kappa = (config or KernelConfig()).kappa_fc
    return _entropy_of(cat, "kde", kappa)


def prefix_entropies(record, estimator_kind="exact", config=None):
    L = len(record.layers)
    return [joint_entropy(record, range(0, l + 1), estimator_kind, config)
            for l in range(L)]


def suffix_entropies(record, estimator_kind="exact", config=None):
    L = len(record.layers)
    return [joint_entropy(record, range(l, L), estimator_kind, config)
            for l in range(L)]


@dataclass
class LayerComplexity:
    layer_id: int
    layer_kind: str
    H: float
    I_XS: float
    I_XSY: float            # None for stochastic nets
    TC: float
    TC_Y: float
    rates: np.ndarray
    marginal_H: np.ndarray
    C: float
    C_Y: float


@dataclass
class ComplexityReport:
    estimator: str
    layers: list                 # LayerComplexity per gating layer
    prefix_H: list
    suffix_H: list
    stochastic_net: bool

    def layer_ids(self):
        return [lc.layer_id for lc in self.layers]


def build_report(stochastic_record, deterministic_record=None, labels=None,
                 config=None, estimator_kind="kde", synth_seed=0):
    """Aggregate every per-layer and joint quantity into one report.

    deterministic_record defaults to the stochastic one (dropout-free nets).
    I_XSY is left as None when the net has sampling layers; the conditional
    term I(gates;Y|X) has no estimator there.
    """
    config = config or KernelConfig()
    det = deterministic_record or stochastic_record
    if estimator_kind == "exact":
        i_xs_values = [exact_entropy(g) for g in det.layers]
    elif det.provenance == DETERMINISTIC_PASS:
        i_xs_values = estimate_I_XS(det, config)
    else:
        i_xs_values = [_entropy_of(g, "kde", config.kappa_for(g))
                       for g in det.layers]
    stochastic_net = (stochastic_record.provenance != DETERMINISTIC_PASS
                      and any(g.layer_kind == "dropout"
                              for g in stochastic_record.layers))
    layers = []
    for pos, g in enumerate(stochastic_record.layers):
        kappa = config.kappa_for(g)
        h = _entropy_of(g, estimator_kind, kappa)
        rates, marg, c = marginal_entropies(g)
        if estimator_kind == "exact":
            tc = exact_tc(g)
        else:
            try:
                s2 = compute_sigma0_sq(g, kappa)
                tc = kde_tc(g, s2, synth_seed + g.layer_id)
            except DegenerateVarianceError:
                tc = 0.0
        if labels is not None:
            tc_y = class_conditional_tc(g, labels, estimator_kind, kappa,
                                        synth_seed + g.layer_id)
            c_y = class_conditional_budget(g, labels)
            if stochastic_net:
                i_xsy = None
            else:
                i_xsy = estimate_I_XSY(g, labels, estimator_kind, kappa)
        else:
            tc_y = c_y = i_xsy = None
        layers.append(LayerComplexity(
            layer_id=g.layer_id, layer_kind=g.layer_kind, H=h,
            I_XS=i_xs_values[pos], I_XSY=i_xsy, TC=tc, TC_Y=tc_y,
            rates=rates, marginal_H=marg, C=c, C_Y=c_y))
    return ComplexityReport(
        estimator=estimator_kind,
        layers=layers,
        prefix_H=prefix_entropies(stochastic_record, estimator_kind, config),
        suffix_H=suffix_entropies(stochastic_record, estimator_kind, config),
        stochastic_net=stochastic_net)
