"""Attribute-switched noisy top-k routing over a shared expert pool.

Each attribute label owns its own router (gate weights + noise weights);
the expert MLPs are shared across attributes. The layer output is the
token stream plus the gate-weighted sum of the selected experts, so a
zero-initialized layer is the identity.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor


class RoutingError(KeyError):
    pass


@dataclass
class DMoEConfig:
    d_model: int
    d_hidden: int = 128
    n_experts: int = 8
    top_k: int = 2
    dropout_p: float = 0.1
    attributes: tuple = ()

    def __post_init__(self):
        self.attributes = tuple(self.attributes)
        if self.n_experts < 1:
            raise ConfigError("n_experts must be positive")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("top_k must be in [1, n_experts], got %d" % self.top_k)
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if not self.attributes:
            raise ConfigError("attribute list must be nonempty")
        if len(set(self.attributes)) != len(self.attributes):
            raise ConfigError("attribute labels must be unique")


@dataclass
class GatingDecision:
    """Per-token top-k expert indices and normalized weights."""
    indices: np.ndarray   # [N, k] int
    weights: np.ndarray   # [N, k] float, each row sums to 1

    @property
    def n_tokens(self):
        return self.indices.shape[0]


def param_rng(seed, name):
    """Deterministic per-parameter stream so shared parameters match across
    model variants regardless of how many other parameters exist."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _linear_init(seed, name, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(param_rng(seed, name).uniform(-bound, bound, size=shape),
                  requires_grad=True)


class Expert:
    """Two linear layers with a ReLU in between and dropout on the output."""

    def __init__(self, name, cfg, seed):
        d, h = cfg.d_model, cfg.d_hidden
        self.dropout_p = cfg.dropout_p
        self.w1 = _linear_init(seed, name + ".w1", (d, h), d)
        self.b1 = _linear_init(seed, name + ".b1", (h,), d)
        self.w2 = _linear_init(seed, name + ".w2", (h, d), h)
        self.b2 = _linear_init(seed, name + ".b2", (d,), h)
        self.name = name

    def parameters(self):
        return {self.name + ".w1": self.w1, self.name + ".b1": self.b1,
                self.name + ".w2": self.w2, self.name + ".b2": self.b2}

    def __call__(self, tokens, training=False, rng=None):
        h = T.relu(tokens @ self.w1 + self.b1)
        out = h @ self.w2 + self.b2
        return T.dropout(out, self.dropout_p, training, rng)


class Router:
    """Per-attribute gate/noise weight pair. Zero init gives uniform gating."""

    def __init__(self, name, cfg):
        d, n = cfg.d_model, cfg.n_experts
        self.w = Tensor(np.zeros((d, n)), requires_grad=True)
        self.w_noise = Tensor(np.zeros((d, n)), requires_grad=True)
        self.name = name

    def parameters(self):
        return {self.name + ".w": self.w, self.name + ".w_noise": self.w_noise}


class DMoELayer:
    def __init__(self, cfg, seed=0, name="dmoe"):
        self.cfg = cfg
        self.name = name
        self.routers = {a: Router("%s.router.%s" % (name, a), cfg) for a in cfg.attributes}
        self.experts = [Expert("%s.expert%d" % (name, i), cfg, seed)
                        for i in range(cfg.n_experts)]

    def parameters(self):
        params = {}
        for a in self.cfg.attributes:
            params.update(self.routers[a].parameters())
        for e in self.experts:
            params.update(e.parameters())
        return params

    def _router(self, attr):
        try:
            return self.routers[attr]
        except KeyError:
            raise RoutingError("unknown attribute %r; known: %s"
                               % (attr, sorted(self.routers)))

    def gate_dense(self, tokens, attr, training=False, rng=None, force_noise=False):
        """Dense [N, n_experts] gate tensor: softmax over kept top-k scores.

        Gaussian noise scaled by softplus(x @ w_noise) is applied while
        training (or when forced); evaluation gating is deterministic.
        """
        router = self._router(attr)
        scores = tokens @ router.w
        if (training or force_noise) and rng is not None:
            eps = rng.standard_normal(scores.shape)
            scores = scores + T.mul(Tensor(eps), T.softplus(tokens @ router.w_noise))
        kept = T.keep_top_k(scores, self.cfg.top_k)
        return T.softmax(kept, axis=1), kept

    def gate(self, tokens, attr, training=False, rng=None, force_noise=False):
        dense, kept = self.gate_dense(tokens, attr, training, rng, force_noise)
        selected = np.isfinite(kept.data)
        # stable argsort puts the k selected columns first, in ascending index order
        indices = np.argsort(~selected, axis=1, kind="stable")[:, :self.cfg.top_k]
        indices = np.sort(indices, axis=1)
        weights = np.take_along_axis(dense.data, indices, axis=1)
        return GatingDecision(indices=indices, weights=weights)

    def __call__(self, tokens, attr, training=False, rng=None, force_noise=False):
        """tokens + sum over selected experts of gate_weight * expert(tokens).

        Only selected experts run (sparse dispatch): each expert sees the
        subset of token rows that routed to it.
        """
        dense, kept = self.gate_dense(tokens, attr, training, rng, force_noise)
        selected = np.isfinite(kept.data)  # [N, n] bool
        n_tokens = tokens.shape[0]
        out = tokens
        for i in range(self.cfg.n_experts):
            rows = np.nonzero(selected[:, i])[0]
            if rows.size == 0:
                continue
            w_i = T.reshape(T.gather_pairs(dense, rows, np.full(rows.shape, i)),
                            (rows.size, 1))
            y_i = self.experts[i](T.take_rows(tokens, rows), training, rng)
            out = out + T.scatter_rows(T.mul(w_i, y_i), rows, n_tokens)
        return out


def patchify(feature_map):
    """Flatten a [H, W, (D,) C] feature map to [N, C] tokens, row-major.

    Inputs already shaped [N, C] pass through unchanged.
    """
    t = T.as_tensor(feature_map)
    if t.data.ndim == 2:
        return t
    if t.data.ndim not in (3, 4):
        raise T.ShapeError("patchify expects rank 2-4, got shape %s" % (t.shape,))
    c = t.shape[-1]
    n = int(np.prod(t.shape[:-1]))
    return T.reshape(t, (n, c))


def unpatchify(tokens, spatial_dims):
    """Inverse of patchify: [N, C] back to [*spatial_dims, C]."""
    t = T.as_tensor(tokens)
    spatial_dims = tuple(int(d) for d in spatial_dims)
    n = int(np.prod(spatial_dims))
    if t.data.ndim != 2 or t.shape[0] != n:
        raise T.ShapeError("cannot unpatchify %s into spatial dims %s"
                           % (t.shape, spatial_dims))
    return T.reshape(t, spatial_dims + (t.shape[1],))


def count_expert_load(decisions, n_experts):
    """Selection frequency per expert over a stream of gating decisions."""
    counts = np.zeros(n_experts, dtype=np.int64)
    for d in decisions:
        idx, c = np.unique(d.indices, return_counts=True)
        counts[idx] += c
    return counts
