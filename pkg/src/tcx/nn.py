"""Minimal reverse-mode engine for dense feedforward and residual nets.

Layer kinds: Dense, ReLU, Swish, Dropout, MaxPool, SkipStart/SkipEnd.
ReLU layers can run "relaxed" (x * sigmoid(beta x)) so that gate values stay
differentiable; the relaxed gates are what the complexity loss differentiates
through.  Everything is float64 and deterministic under a seed.
"""

from dataclasses import dataclass, field, replace

import numpy as np

GATING_KINDS = ("relu", "swish", "dropout", "maxpool")
# gating layers whose relaxed gates are differentiable (penalizable)
SOFT_GATING_KINDS = ("relu", "swish")


class SpecError(ValueError):
    pass


class FrozenNetworkError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    beta: float = 0.0
    rate: float = 0.0
    regions: tuple = ()
    tag: str = ""


def dense(in_dim, out_dim):
    return LayerSpec("dense", in_dim=int(in_dim), out_dim=int(out_dim))


def relu():
    return LayerSpec("relu")


def swish(beta):
    if not beta > 0:
        raise SpecError(f"swish beta must be positive, got {beta}")
    return LayerSpec("swish", beta=float(beta))


def dropout(rate):
    if not (0.0 <= rate < 1.0):
        raise SpecError(f"dropout rate must be in [0,1), got {rate}")
    return LayerSpec("dropout", rate=float(rate))


def maxpool(regions):
    regions = tuple(tuple(int(i) for i in r) for r in regions)
    if any(len(r) == 0 for r in regions):
        raise SpecError("maxpool region must be non-empty")
    return LayerSpec("maxpool", regions=regions)


def skip_start(tag):
    return LayerSpec("skip_start", tag=str(tag))


def skip_end(tag):
    return LayerSpec("skip_end", tag=str(tag))


def validate_spec(spec):
    """Check dim chaining, skip tags and parameter ranges; return the I/O dims."""
    spec = list(spec)
    if not spec:
        raise SpecError("empty layer spec")
    if spec[0].kind != "dense":
        raise SpecError("spec must start with a Dense layer")
    cur = spec[0].in_dim
    if cur <= 0:
        raise SpecError("input dim must be positive")
    open_skips = {}
    for i, layer in enumerate(spec):
        if layer.kind == "dense":
            if layer.in_dim != cur:
                raise SpecError(
                    f"layer {i}: Dense in_dim {layer.in_dim} != incoming dim {cur}"
                )
            if layer.out_dim <= 0:
                raise SpecError(f"layer {i}: Dense out_dim must be positive")
            cur = layer.out_dim
        elif layer.kind == "relu":
            pass
        elif layer.kind == "swish":
            if not layer.beta > 0:
                raise SpecError(f"layer {i}: swish beta must be positive")
        elif layer.kind == "dropout":
            if not (0.0 <= layer.rate < 1.0):
                raise SpecError(f"layer {i}: dropout rate must be in [0,1)")
        elif layer.kind == "maxpool":
            flat = [d for r in layer.regions for d in r]
            if sorted(flat) != list(range(cur)):
                raise SpecError(
                    f"layer {i}: maxpool regions must partition 0..{cur - 1}"
                )
            cur = len(layer.regions)
        elif layer.kind == "skip_start":
            if layer.tag in open_skips:
                raise SpecError(f"layer {i}: skip tag {layer.tag!r} already open")
            open_skips[layer.tag] = cur
        elif layer.kind == "skip_end":
            if layer.tag not in open_skips:
                raise SpecError(f"layer {i}: skip tag {layer.tag!r} has no start")
            if open_skips.pop(layer.tag) != cur:
                raise SpecError(
                    f"layer {i}: skip tag {layer.tag!r} dims differ at start/end"
                )
        else:
            raise SpecError(f"layer {i}: unknown kind {layer.kind!r}")
    if open_skips:
        raise SpecError(f"unclosed skip tags: {sorted(open_skips)}")
    return spec[0].in_dim, cur


def gating_layer_indices(spec):
    return [i for i, l in enumerate(spec) if l.kind in GATING_KINDS]


@dataclass
class Network:
    spec: list
    weights: list
    biases: list
    seed: int
    frozen: bool = False
    _rng: np.random.Generator = field(default=None, repr=False)

    @property
    def in_dim(self):
        return self.spec[0].in_dim

    @property
    def out_dim(self):
        return validate_spec(self.spec)[1]

    def param_checksum(self):
        h = 0
        for arr in self.weights + self.biases:
            h ^= hash(arr.tobytes())
        return h

    def copy(self):
        net = Network(
            spec=list(self.spec),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            seed=self.seed,
            frozen=self.frozen,
        )
        net._rng = np.random.default_rng(self.seed)
        return net


def init_network(spec, seed, frozen=False):
    """Fan-in-scaled Gaussian weights, zero biases, deterministic under seed."""
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec:
        if layer.kind == "dense":
            std = 1.0 / np.sqrt(layer.in_dim)
            weights.append(rng.normal(0.0, std, size=(layer.out_dim, layer.in_dim)))
            biases.append(np.zeros(layer.out_dim))
    net = Network(spec=list(spec), weights=weights, biases=biases, seed=int(seed),
                  frozen=frozen)
    net._rng = np.random.default_rng(seed)
    return net


@dataclass
class TraceLayer:
    index: int
    kind: str
    x: np.ndarray              # layer input (pre-activation h for gating layers)
    out: np.ndarray
    gates: np.ndarray = None   # hard gates {0,1}, gating layers only
    s: np.ndarray = None       # relaxed gates (0,1), relu/swish in relaxed mode
    beta: float = None
    scale_mask: np.ndarray = None   # dropout: kept/(1-rate), train mode
    argmax: np.ndarray = None       # maxpool: per-region argmax column index


@dataclass
class ForwardTrace:
    layers: list
    mode: str
    relaxed: bool
    capture: bool
    n: int

    def gating_layers(self):
        return [t for t in self.layers if t.kind in GATING_KINDS]

    def soft_gating_layers(self):
        return [t for t in self.layers if t.kind in SOFT_GATING_KINDS]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(net, batch, mode="train", capture=False, relaxed=False, beta=10.0,
            rng=None):
    """Run the net; returns (outputs, ForwardTrace).

    relaxed=True computes ReLU layers as x*sigmoid(beta*x); Swish layers always
    use their own beta.  Dropout samples masks in train mode only (inverted
    dropout, so eval needs no rescale).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"batch shape {x.shape} incompatible with input dim "
                         f"{net.in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input batch")
    if rng is None:
        rng = net._rng
    records = [] if capture else None
    skip_saved = {}
    dense_i = 0
    for li, layer in enumerate(net.spec):
        x_in = x
        gates = s = scale_mask = argmax = None
        layer_beta = None
        if layer.kind == "dense":
            x = x_in @ net.weights[dense_i].T + net.biases[dense_i]
            dense_i += 1
        elif layer.kind in ("relu", "swish"):
            if layer.kind == "swish":
                layer_beta = layer.beta
                s = _sigmoid(layer_beta * x_in)
                x = x_in * s
            elif relaxed:
                layer_beta = beta
                s = _sigmoid(layer_beta * x_in)
                x = x_in * s
            else:
                gates = x_in > 0
                x = np.where(gates, x_in, 0.0)
            if capture and gates is None:
                gates = x_in > 0
        elif layer.kind == "dropout":
            if mode == "train":
                kept = rng.random(x_in.shape) >= layer.rate
                scale_mask = kept / (1.0 - layer.rate)
                x = x_in * scale_mask
                gates = kept
            else:
                x = x_in
                gates = np.ones(x_in.shape, dtype=bool)
        elif layer.kind == "maxpool":
            cols = [np.asarray(r) for r in layer.regions]
            pooled = np.empty((x_in.shape[0], len(cols)))
            argmax = np.empty((x_in.shape[0], len(cols)), dtype=np.intp)
            for ri, r in enumerate(cols):
                sub = x_in[:, r]
                am = np.argmax(sub, axis=1)
                argmax[:, ri] = r[am]
                pooled[:, ri] = sub[np.arange(sub.shape[0]), am]
            x = pooled
        elif layer.kind == "skip_start":
            skip_saved[layer.tag] = x_in
            x = x_in
        elif layer.kind == "skip_end":
            x = x_in + skip_saved.pop(layer.tag)
        else:
            raise SpecError(f"unknown layer kind {layer.kind!r}")
        if capture:
            records.append(TraceLayer(index=li, kind=layer.kind, x=x_in, out=x,
                                      gates=gates, s=s, beta=layer_beta,
                                      scale_mask=scale_mask, argmax=argmax))
    trace = ForwardTrace(layers=records, mode=mode, relaxed=relaxed,
                         capture=capture, n=x.shape[0])
    return x, trace


@dataclass
class GradientSet:
    d_weights: list
    d_biases: list

    def scaled(self, c):
        return GradientSet([c * g for g in self.d_weights],
                           [c * g for g in self.d_biases])

    def add_(self, other, scale=1.0):
        for a, b in zip(self.d_weights, other.d_weights):
            a += scale * b
        for a, b in zip(self.d_biases, other.d_biases):
            a += scale * b
        return self


def zero_gradients(net):
    return GradientSet([np.zeros_like(w) for w in net.weights],
                       [np.zeros_like(b) for b in net.biases])


def backward(net, trace, out_grad, gate_grads=None):
    """Reverse pass over a captured trace.

    gate_grads maps spec layer index -> dL/ds for relaxed gating layers,
    letting losses defined on gate values (the complexity loss) flow into the
    network parameters via ds/dh = beta*s*(1-s).  Returns (GradientSet,
    gradient w.r.t. the input batch).
    """
    if not trace.capture or trace.layers is None:
        raise ValueError("backward needs a capture=True trace")
    if len(trace.layers) != len(net.spec):
        raise ValueError("trace does not match network spec")
    gate_grads = gate_grads or {}
    g = np.asarray(out_grad, dtype=np.float64)
    n_dense = len(net.weights)
    d_weights = [None] * n_dense
    d_biases = [None] * n_dense
    dense_i = n_dense
    skip_acc = {}
    for t in reversed(trace.layers):
        if t.kind == "dense":
            dense_i -= 1
            d_weights[dense_i] = g.T @ t.x
            d_biases[dense_i] = g.sum(axis=0)
            g = g @ net.weights[dense_i]
        elif t.kind in ("relu", "swish"):
            if t.s is not None:
                ds_dh = t.beta * t.s * (1.0 - t.s)
                new_g = g * (t.s + t.x * ds_dh)
                if t.index in gate_grads:
                    new_g = new_g + gate_grads[t.index] * ds_dh
                g = new_g
            else:
                if t.index in gate_grads:
                    raise ValueError(
                        "gate gradients supplied for a hard-gate layer; "
                        "run forward with relaxed=True")
                g = g * t.gates
        elif t.kind == "dropout":
            if t.scale_mask is not None:
                g = g * t.scale_mask
        elif t.kind == "maxpool":
            gx = np.zeros_like(t.x)
            rows = np.arange(t.x.shape[0])
            for ri in range(t.argmax.shape[1]):
                np.add.at(gx, (rows, t.argmax[:, ri]), g[:, ri])
            g = gx
        elif t.kind == "skip_start":
            if t.index in skip_acc:
                g = g + skip_acc.pop(t.index)
        elif t.kind == "skip_end":
            # locate the matching start index once per end layer
            tag = net.spec[t.index].tag
            start = max(i for i in range(t.index)
                        if net.spec[i].kind == "skip_start"
                        and net.spec[i].tag == tag)
            skip_acc[start] = skip_acc.get(start, 0.0) + g
    return GradientSet(d_weights, d_biases), g


# ---------------------------------------------------------------------------
# losses

def loss(kind, outputs, targets, net=None):
    """Return (scalar, out_grad); out_grad is None for the weight-norm kinds."""
    if kind == "mse":
        outputs = np.asarray(outputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if outputs.shape != targets.shape:
            raise ValueError("mse shape mismatch")
        diff = outputs - targets
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    if kind == "cross_entropy":
        logits = np.asarray(outputs, dtype=np.float64)
        y = np.asarray(targets)
        n, m = logits.shape
        if y.shape != (n,):
            raise ValueError("cross_entropy targets must be class indices")
        if y.min() < 0 or y.max() >= m:
            raise ValueError(f"label out of range [0,{m})")
        zmax = logits.max(axis=1, keepdims=True)
        logz = zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
        logp = logits - logz
        value = -float(np.mean(logp[np.arange(n), y]))
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        return value, grad / n
    if kind == "l1_reg":
        return float(sum(np.abs(w).sum() for w in net.weights)), None
    if kind == "l2_reg":
        return float(sum((w ** 2).sum() for w in net.weights)), None
    raise ValueError(f"unknown loss kind {kind!r}")


def regularizer_grads(kind, net):
    """Parameter gradients of l1_reg / l2_reg (biases untouched)."""
    if kind == "l1_reg":
        dw = [np.sign(w) for w in net.weights]
    elif kind == "l2_reg":
        dw = [2.0 * w for w in net.weights]
    else:
        raise ValueError(f"not a regularizer kind: {kind!r}")
    return GradientSet(dw, [np.zeros_like(b) for b in net.biases])


def predict_classes(net, batch):
    out, _ = forward(net, batch, mode="eval")
    return np.argmax(out, axis=1)


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class OptState:
    t: int = 0
    m: list = None
    v: list = None


def optimizer_step(net, grads, state, config):
    """One in-place SGD/Adam update; returns the updated state."""
    if net.frozen:
        raise FrozenNetworkError("network is frozen")
    if config.lr <= 0:
        raise ValueError("lr must be positive")
    params = net.weights + net.biases
    gs = grads.d_weights + grads.d_biases
    if len(params) != len(gs) or any(p.shape != g.shape for p, g in zip(params, gs)):
        raise ValueError("gradient shapes do not match parameters")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
    if config.kind == "sgd":
        for p, g, m in zip(params, gs, state.m):
            if config.momentum > 0:
                m *= config.momentum
                m += g
                p -= config.lr * m
            else:
                p -= config.lr * g
    elif config.kind == "adam":
        if state.v is None:
            state.v = [np.zeros_like(p) for p in params]
        state.t += 1
        b1, b2 = config.betas
        bc1 = 1.0 - b1 ** state.t
        bc2 = 1.0 - b2 ** state.t
        for p, g, m, v in zip(params, gs, state.m, state.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    else:
        raise ValueError(f"unknown optimizer kind {config.kind!r}")
    return state


# ---------------------------------------------------------------------------
# textual layer format (checkpoint sidecar files and manifests)

def format_spec_text(spec):
    lines = []
    for layer in spec:
        if layer.kind == "dense":
            lines.append(f"Dense {layer.in_dim} {layer.out_dim}")
        elif layer.kind == "relu":
            lines.append("ReLU")
        elif layer.kind == "swish":
            lines.append(f"Swish {layer.beta!r}")
        elif layer.kind == "dropout":
            lines.append(f"Dropout {layer.rate!r}")
        elif layer.kind == "maxpool":
            regs = "|".join(",".join(str(i) for i in r) for r in layer.regions)
            lines.append(f"MaxPool {regs}")
        elif layer.kind == "skip_start":
            lines.append(f"SkipStart {layer.tag}")
        elif layer.kind == "skip_end":
            lines.append(f"SkipEnd {layer.tag}")
        else:
            raise SpecError(f"unknown kind {layer.kind!r}")
    return lines


def parse_spec_text(lines):
    """Parse layer lines; 'MaxPool K' shorthand means contiguous regions of K."""
    spec = []
    cur = None
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0].lower()
        try:
            if kind == "dense":
                spec.append(dense(int(parts[1]), int(parts[2])))
                cur = int(parts[2])
            elif kind == "relu":
                spec.append(relu())
            elif kind == "swish":
                spec.append(swish(float(parts[1])))
            elif kind == "dropout":
                spec.append(dropout(float(parts[1])))
            elif kind == "maxpool":
                arg = parts[1]
                if "," in arg or "|" in arg:
                    regions = tuple(tuple(int(i) for i in grp.split(","))
                                    for grp in arg.split("|"))
                else:
                    k = int(arg)
                    if cur is None or cur % k != 0:
                        raise SpecError(
                            f"MaxPool {k} does not divide current dim {cur}")
                    regions = tuple(tuple(range(i, i + k))
                                    for i in range(0, cur, k))
                spec.append(maxpool(regions))
                cur = len(spec[-1].regions)
            elif kind == "skipstart":
                spec.append(skip_start(parts[1]))
            elif kind == "skipend":
                spec.append(skip_end(parts[1]))
            else:
                raise SpecError(f"unknown layer line {line!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"bad layer line {line!r}: {exc}") from exc
    return spec


def stacked_mlp_spec(widths):
    """Dense/ReLU chain from a width list, e.g. [784, 1024, ..., 10]."""
    spec = []
    for i in range(len(widths) - 1):
        spec.append(dense(widths[i], widths[i + 1]))
        if i < len(widths) - 2:
            spec.append(relu())
    return spec


def residual_mlp_spec(widths):
    """Like stacked_mlp_spec but each hidden Dense+ReLU block is skip-wrapped
    when its input and output dims agree."""
    spec = [dense(widths[0], widths[1])]
    tag_i = 0
    for i in range(1, len(widths) - 1):
        spec.append(relu())
        if widths[i] == widths[i + 1]:
            tag = f"r{tag_i}"
            tag_i += 1
            spec.extend([skip_start(tag), dense(widths[i], widths[i + 1]),
                         skip_end(tag)])
        else:
            spec.append(dense(widths[i], widths[i + 1]))
    return spec
