"""Residual token-mixing segmentation network with optional MoE blocks.

The pipeline is: linear patch embedding -> L residual MLP blocks (each
optionally followed by a routed expert layer) -> linear per-token decode
back to per-pixel class logits. Blocks [0, L/2) count as the encoder,
[L/2, L) as the decoder; by default the expert layers sit in the encoder
only and share one parameter set across insertion points.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .moe import DMoEConfig, DMoELayer, RoutingError, _linear_init
from .tensor import ConfigError, Tensor


def default_placement(n_blocks):
    """Encoder-only: every block in the first half."""
    return tuple(range(n_blocks // 2))


@dataclass
class BackboneConfig:
    image_size: tuple = (32, 32)
    patch_size: int = 8
    in_channels: int = 1
    d_model: int = 64
    d_mlp: int = 128
    n_blocks: int = 6
    n_classes: int = 2
    mode: str = "dmoe"                  # plain | moe | dmoe
    dmoe_placement: tuple = None        # block indices; None -> encoder half
    dmoe_sharing: str = "shared"        # shared | layer_wise
    dmoe: DMoEConfig = None
    attr_map: dict = field(default_factory=dict)  # sample attr -> router key

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError("patch_size %d must divide image size %s"
                              % (self.patch_size, self.image_size))
        if self.mode not in ("plain", "moe", "dmoe"):
            raise ConfigError("mode must be plain, moe, or dmoe, got %r" % self.mode)
        if self.dmoe_placement is None:
            self.dmoe_placement = default_placement(self.n_blocks)
        self.dmoe_placement = tuple(sorted(set(int(i) for i in self.dmoe_placement)))
        if any(i < 0 or i >= self.n_blocks for i in self.dmoe_placement):
            raise ConfigError("dmoe_placement indices must be < n_blocks=%d" % self.n_blocks)
        if self.dmoe_sharing not in ("shared", "layer_wise"):
            raise ConfigError("dmoe_sharing must be shared or layer_wise")
        if self.mode != "plain":
            if self.dmoe is None:
                raise ConfigError("mode=%s requires a dmoe config" % self.mode)
            if self.dmoe.d_model != self.d_model:
                raise ConfigError("dmoe d_model %d != backbone d_model %d"
                                  % (self.dmoe.d_model, self.d_model))
            if not self.attr_map:
                # dmoe: identity routing; moe: every attribute shares one router
                if self.mode == "dmoe":
                    self.attr_map = {a: a for a in self.dmoe.attributes}
                else:
                    shared = self.dmoe.attributes[0]
                    self.attr_map = {a: shared for a in self.dmoe.attributes}

    @property
    def n_patches(self):
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    def router_keys(self):
        return tuple(sorted(set(self.attr_map.values())))


class ResidualBlock:
    """tokens + two-layer ReLU MLP(tokens); zero weights give the identity."""

    def __init__(self, name, d_model, d_mlp, seed):
        self.name = name
        self.w1 = _linear_init(seed, name + ".w1", (d_model, d_mlp), d_model)
        self.b1 = _linear_init(seed, name + ".b1", (d_mlp,), d_model)
        self.w2 = _linear_init(seed, name + ".w2", (d_mlp, d_model), d_mlp)
        self.b2 = _linear_init(seed, name + ".b2", (d_model,), d_mlp)

    def parameters(self):
        return {self.name + ".w1": self.w1, self.name + ".b1": self.b1,
                self.name + ".w2": self.w2, self.name + ".b2": self.b2}

    def __call__(self, tokens):
        return tokens + (T.relu(tokens @ self.w1 + self.b1) @ self.w2 + self.b2)


class SegmentationModel:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        p2c = cfg.patch_size * cfg.patch_size * cfg.in_channels
        self.embed_w = _linear_init(seed, "embed.w", (p2c, cfg.d_model), p2c)
        self.embed_b = _linear_init(seed, "embed.b", (cfg.d_model,), p2c)
        self.blocks = [ResidualBlock("block%d" % i, cfg.d_model, cfg.d_mlp, seed)
                       for i in range(cfg.n_blocks)]
        out_dim = cfg.patch_size * cfg.patch_size * cfg.n_classes
        self.decode_w = _linear_init(seed, "decode.w", (cfg.d_model, out_dim), cfg.d_model)
        self.decode_b = _linear_init(seed, "decode.b", (out_dim,), cfg.d_model)

        self.moe_layers = {}
        if cfg.mode != "plain" and cfg.dmoe is not None:
            routed_cfg = DMoEConfig(
                d_model=cfg.dmoe.d_model, d_hidden=cfg.dmoe.d_hidden,
                n_experts=cfg.dmoe.n_experts, top_k=cfg.dmoe.top_k,
                dropout_p=cfg.dmoe.dropout_p, attributes=cfg.router_keys())
            if cfg.dmoe_sharing == "shared":
                layer = DMoELayer(routed_cfg, seed, name="dmoe")
                self.moe_layers = {i: layer for i in cfg.dmoe_placement}
            else:
                self.moe_layers = {i: DMoELayer(routed_cfg, seed, name="dmoe%d" % i)
                                   for i in cfg.dmoe_placement}

    def parameters(self):
        params = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for b in self.blocks:
            params.update(b.parameters())
        params["decode.w"] = self.decode_w
        params["decode.b"] = self.decode_b
        seen = set()
        for i in sorted(self.moe_layers):
            layer = self.moe_layers[i]
            if id(layer) in seen:
                continue
            seen.add(id(layer))
            params.update(layer.parameters())
        return params

    def _route_key(self, attr):
        if not self.cfg.attr_map:
            return None
        try:
            return self.cfg.attr_map[attr]
        except KeyError:
            raise RoutingError("unknown attribute %r; known: %s"
                               % (attr, sorted(self.cfg.attr_map)))

    def _extract_patches(self, images):
        """[B, H, W, C] -> [B * n_patches, P*P*C], row-major patch order."""
        cfg = self.cfg
        h, w = cfg.image_size
        p = cfg.patch_size
        b = images.shape[0]
        x = images.reshape(b, h // p, p, w // p, p, cfg.in_channels)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b * cfg.n_patches, p * p * cfg.in_channels)

    def forward_batch(self, images, attr, training=False, rng=None, force_noise=False):
        """images: [B, H, W, C] array, all sharing one attribute flag.

        Returns logits as a Tensor [B, H, W, n_classes].
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[..., None]
        if not np.all(np.isfinite(images)):
            raise ValueError("input images must be finite")
        b = images.shape[0]
        key = self._route_key(attr) if cfg.mode != "plain" else None

        tokens = Tensor(self._extract_patches(images)) @ self.embed_w + self.embed_b
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in self.moe_layers:
                tokens = self.moe_layers[i](tokens, key, training, rng, force_noise)
        flat = tokens @ self.decode_w + self.decode_b

        h, w = cfg.image_size
        p = cfg.patch_size
        logits = T.reshape(flat, (b, h // p, w // p, p, p, cfg.n_classes))
        logits = T.transpose(logits, (0, 1, 3, 2, 4, 5))
        return T.reshape(logits, (b, h, w, cfg.n_classes))

    def forward(self, image, attr, training=False, rng=None, force_noise=False):
        """Single image [H, W, C] -> logits Tensor [H, W, n_classes]."""
        out = self.forward_batch(np.asarray(image)[None], attr, training, rng, force_noise)
        cfg = self.cfg
        return T.reshape(out, cfg.image_size + (cfg.n_classes,))

    def zero_grads(self):
        for p in self.parameters().values():
            p.zero_grad()
