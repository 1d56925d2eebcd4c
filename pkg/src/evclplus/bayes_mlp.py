"""Mean-field Gaussian MLP with a shared body and task-specific heads.

Every weight and bias tensor carries a mean and a log-variance.  A forward
pass draws theta = mu + exp(0.5 * log_var) * eps with eps ~ N(0,1) (the
reparameterization trick); the hand-derived backward pass then yields
gradients for both halves of each tensor:

    d_mu      = d_theta
    d_log_var = d_theta * eps * 0.5 * exp(0.5 * log_var)

Passing rng=None to the sampling entry points forces eps = 0, which turns
the network into a plain deterministic MLP evaluated at the means.  That
path is used by the deterministic baselines and by tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import Array, SeededRng, log_softmax, relu

INIT_LOG_VAR = -6.0


@dataclass
class NetworkSpec:
    """Architecture: input -> hidden (relu) -> per-task linear head.

    hidden_dims may be empty, giving a bare linear softmax model.
    """

    input_dim: int
    hidden_dims: list
    head_dim: int
    n_heads: int = 1
    single_head: bool = False

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.head_dim < 2:
            raise ValueError("head_dim must be >= 2")
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.single_head and self.n_heads != 1:
            raise ValueError("single_head networks have exactly one head")

    @property
    def head_fan_in(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass
class GaussianLayer:
    """Variational parameters of one affine layer: weight (din, dout), bias (dout,)."""

    w_mu: Array
    w_log_var: Array
    b_mu: Array
    b_log_var: Array

    def tensors(self):
        """Iterate the (mu, log_var) pairs: weight first, then bias."""
        yield self.w_mu, self.w_log_var
        yield self.b_mu, self.b_log_var

    def copy(self) -> "GaussianLayer":
        return GaussianLayer(self.w_mu.copy(), self.w_log_var.copy(),
                             self.b_mu.copy(), self.b_log_var.copy())


@dataclass
class LayerGrads:
    """Gradients matching a GaussianLayer's four arrays."""

    w_mu: Array
    w_log_var: Array
    b_mu: Array
    b_log_var: Array

    @staticmethod
    def zeros_like(layer: GaussianLayer) -> "LayerGrads":
        return LayerGrads(np.zeros_like(layer.w_mu), np.zeros_like(layer.w_log_var),
                          np.zeros_like(layer.b_mu), np.zeros_like(layer.b_log_var))

    def arrays(self):
        yield self.w_mu
        yield self.w_log_var
        yield self.b_mu
        yield self.b_log_var


@dataclass
class Gradients:
    """Per-tensor gradients for the whole network (body plus every head)."""

    body: list
    heads: list

    @staticmethod
    def zeros_like(net: "BayesMlp") -> "Gradients":
        return Gradients([LayerGrads.zeros_like(l) for l in net.body],
                         [LayerGrads.zeros_like(l) for l in net.heads])

    def layers(self):
        yield from self.body
        yield from self.heads

    def add_(self, other: "Gradients", scale: float = 1.0) -> "Gradients":
        """In-place accumulate `scale * other`."""
        for mine, theirs in zip(self.layers(), other.layers()):
            for a, b in zip(mine.arrays(), theirs.arrays()):
                a += scale * b
        return self

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for l in self.layers() for a in l.arrays())


@dataclass
class SnapshotLayer:
    """Frozen (mu, variance) copies of one layer; variance, not log-variance."""

    w_mu: Array
    w_var: Array
    b_mu: Array
    b_var: Array


@dataclass
class PosteriorSnapshot:
    """Immutable copy of a network's posterior, used as the next task's prior."""

    body: list
    heads: list


@dataclass
class BayesMlp:
    spec: NetworkSpec
    body: list = field(default_factory=list)
    heads: list = field(default_factory=list)

    def all_layers(self):
        yield from self.body
        yield from self.heads

    @property
    def n_heads(self) -> int:
        return len(self.heads)


def _init_layer(din: int, dout: int, rng: SeededRng) -> GaussianLayer:
    # fan-in scaled Gaussian means; tight initial uncertainty
    std = 1.0 / np.sqrt(din)
    return GaussianLayer(
        w_mu=rng.standard_normal((din, dout)) * std,
        w_log_var=np.full((din, dout), INIT_LOG_VAR),
        b_mu=rng.standard_normal(dout) * std,
        b_log_var=np.full(dout, INIT_LOG_VAR),
    )


def init_network(spec: NetworkSpec, rng: SeededRng) -> BayesMlp:
    """Fresh network: means ~ N(0, 1/fan_in), log-variances all INIT_LOG_VAR."""
    dims = [spec.input_dim] + list(spec.hidden_dims)
    body = [_init_layer(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
    heads = [_init_layer(spec.head_fan_in, spec.head_dim, rng)
             for _ in range(spec.n_heads)]
    return BayesMlp(spec=spec, body=body, heads=heads)


def add_head(net: BayesMlp, rng: SeededRng) -> int:
    """Append a freshly initialized head; existing parameters are untouched."""
    if net.spec.single_head:
        raise RuntimeError("cannot add a head to a single-head network")
    net.heads.append(_init_layer(net.spec.head_fan_in, net.spec.head_dim, rng))
    return len(net.heads) - 1


def parameter_count(net: BayesMlp) -> int:
    """Number of distinct weights/biases (mu entries; log_var mirrors them)."""
    return sum(l.w_mu.size + l.b_mu.size for l in net.all_layers())


@dataclass
class LayerCache:
    inp: Array      # (B, din) input to the affine
    eps_w: Array
    eps_b: Array
    theta_w: Array  # sampled weights, shared across the batch
    theta_b: Array
    pre: Array      # (B, dout) pre-activation


@dataclass
class SampleCache:
    layers: list    # body caches then the head cache (last entry)
    head: int
    single: bool    # original input was a single vector


def _sample_theta(layer: GaussianLayer, rng):
    """One theta draw for a layer; rng=None forces eps = 0 (theta = mu)."""
    if rng is None:
        eps_w = np.zeros_like(layer.w_mu)
        eps_b = np.zeros_like(layer.b_mu)
    else:
        eps_w = rng.standard_normal(layer.w_mu.shape)
        eps_b = rng.standard_normal(layer.b_mu.shape)
    theta_w = layer.w_mu + np.exp(0.5 * layer.w_log_var) * eps_w
    theta_b = layer.b_mu + np.exp(0.5 * layer.b_log_var) * eps_b
    return eps_w, eps_b, theta_w, theta_b


def sample_forward(net: BayesMlp, x: Array, head: int, rng):
    """Sampled forward pass; one theta draw shared by all rows of x.

    x may be a single input vector or a (B, input_dim) batch.  Returns
    (logits, cache); logits match x's arity.
    """
    if not 0 <= head < len(net.heads):
        raise ValueError(f"head {head} out of range ({len(net.heads)} heads)")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    act = x[None, :] if single else x
    if act.shape[1] != net.spec.input_dim:
        raise ValueError(f"input dim {act.shape[1]} != {net.spec.input_dim}")

    caches = []
    for layer in net.body:
        eps_w, eps_b, theta_w, theta_b = _sample_theta(layer, rng)
        pre = act @ theta_w + theta_b
        caches.append(LayerCache(act, eps_w, eps_b, theta_w, theta_b, pre))
        act = relu(pre)
    hlayer = net.heads[head]
    eps_w, eps_b, theta_w, theta_b = _sample_theta(hlayer, rng)
    logits = act @ theta_w + theta_b
    caches.append(LayerCache(act, eps_w, eps_b, theta_w, theta_b, logits))
    cache = SampleCache(layers=caches, head=head, single=single)
    return (logits[0] if single else logits), cache


def _layer_grads(layer: GaussianLayer, lc: LayerCache, dpre: Array):
    """Affine-layer gradients given d(pre-activation); returns (grads, dinput)."""
    d_theta_w = lc.inp.T @ dpre
    d_theta_b = dpre.sum(axis=0)
    dinp = dpre @ lc.theta_w.T
    g = LayerGrads(
        w_mu=d_theta_w,
        w_log_var=d_theta_w * lc.eps_w * 0.5 * np.exp(0.5 * layer.w_log_var),
        b_mu=d_theta_b,
        b_log_var=d_theta_b * lc.eps_b * 0.5 * np.exp(0.5 * layer.b_log_var),
    )
    return g, dinp


def backprop(net: BayesMlp, cache: SampleCache, dlogits: Array, head: int) -> Gradients:
    """Backward pass through a cached sample_forward.

    Gradients cover every body tensor and the routed head; other heads get
    zeros.  dlogits must match the cached batch arity.
    """
    if head != cache.head:
        raise RuntimeError(f"cache was built for head {cache.head}, not {head}")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if cache.single and dlogits.ndim == 1:
        dlogits = dlogits[None, :]
    hcache = cache.layers[-1]
    if dlogits.shape != hcache.pre.shape:
        raise RuntimeError(f"dlogits shape {dlogits.shape} != logits shape {hcache.pre.shape}")
    if len(cache.layers) != len(net.body) + 1:
        raise RuntimeError("cache does not match network depth")

    grads = Gradients.zeros_like(net)
    grads.heads[head], dinp = _layer_grads(net.heads[head], hcache, dlogits)
    for i in reversed(range(len(net.body))):
        lc = cache.layers[i]
        dpre = dinp * (lc.pre > 0)  # relu subgradient, 0 at the kink
        grads.body[i], dinp = _layer_grads(net.body[i], lc, dpre)
    return grads


def posterior_predict(net: BayesMlp, x: Array, head: int, n_samples: int, rng) -> Array:
    """Predictive class probabilities: mean softmax over n_samples theta draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    total = None
    for _ in range(n_samples):
        logits, _ = sample_forward(net, x, head, rng)
        p = np.exp(log_softmax(logits))
        total = p if total is None else total + p
    return total / n_samples


def snapshot(net: BayesMlp) -> PosteriorSnapshot:
    """Deep, frozen copy of (mu, sigma^2) for all body tensors and heads."""

    def freeze(layer: GaussianLayer) -> SnapshotLayer:
        s = SnapshotLayer(layer.w_mu.copy(), np.exp(layer.w_log_var),
                          layer.b_mu.copy(), np.exp(layer.b_log_var))
        for a in (s.w_mu, s.w_var, s.b_mu, s.b_var):
            a.flags.writeable = False
        return s

    return PosteriorSnapshot(body=[freeze(l) for l in net.body],
                             heads=[freeze(l) for l in net.heads])


def unit_prior(net: BayesMlp) -> PosteriorSnapshot:
    """N(0, 1) prior over every tensor: the anchor before any task is seen."""

    def unit(layer: GaussianLayer) -> SnapshotLayer:
        s = SnapshotLayer(np.zeros_like(layer.w_mu), np.ones_like(layer.w_mu),
                          np.zeros_like(layer.b_mu), np.ones_like(layer.b_mu))
        for a in (s.w_mu, s.w_var, s.b_mu, s.b_var):
            a.flags.writeable = False
        return s

    return PosteriorSnapshot(body=[unit(l) for l in net.body],
                             heads=[unit(l) for l in net.heads])


def restore(net: BayesMlp, snap: PosteriorSnapshot) -> None:
    """Load a snapshot's (mu, var) back into the network's (mu, log_var)."""
    if len(snap.body) != len(net.body) or len(snap.heads) != len(net.heads):
        raise RuntimeError("snapshot does not match network layout")
    for layer, s in zip(net.all_layers(), list(snap.body) + list(snap.heads)):
        layer.w_mu[...] = s.w_mu
        layer.w_log_var[...] = np.log(s.w_var)
        layer.b_mu[...] = s.b_mu
        layer.b_log_var[...] = np.log(s.b_var)


def clone_network(net: BayesMlp) -> BayesMlp:
    return BayesMlp(spec=net.spec,
                    body=[l.copy() for l in net.body],
                    heads=[l.copy() for l in net.heads])


def get_flat_params(net: BayesMlp) -> Array:
    """Concatenate every (mu, log_var) pair into one vector (fixed order)."""
    parts = []
    for layer in net.all_layers():
        for mu, lv in layer.tensors():
            parts.append(mu.ravel())
            parts.append(lv.ravel())
    return np.concatenate(parts)


def set_flat_params(net: BayesMlp, vec: Array) -> None:
    """Inverse of get_flat_params."""
    expected = 2 * parameter_count(net)
    if vec.size != expected:
        raise RuntimeError(f"flat vector length {vec.size} != parameter count {expected}")
    pos = 0
    for layer in net.all_layers():
        for mu, lv in layer.tensors():
            for arr in (mu, lv):
                n = arr.size
                arr[...] = vec[pos:pos + n].reshape(arr.shape)
                pos += n


def flatten_grads(grads: Gradients) -> Array:
    """Flatten Gradients in the same order as get_flat_params."""
    parts = []
    for lg in grads.layers():
        parts.append(lg.w_mu.ravel())
        parts.append(lg.w_log_var.ravel())
        parts.append(lg.b_mu.ravel())
        parts.append(lg.b_log_var.ravel())
    return np.concatenate(parts)
