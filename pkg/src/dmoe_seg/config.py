"""Flat key=value config files with dotted keys and # comments.

Two schemas live here: the dataset spec (gen-data) and the run config
(train). Flags override file values; unknown keys are rejected.
"""

import os

from .data import AttrProfile, DatasetSpec, SpecError
from .backbone import BackboneConfig
from .moe import DMoEConfig
from .tensor import ConfigError
from .training import TrainConfig


def parse_kv_file(path):
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s: line %d: expected key = value" % (path, lineno))
            key, val = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError("%s: line %d: empty key" % (path, lineno))
            if key in values:
                raise ConfigError("%s: line %d: duplicate key %r" % (path, lineno, key))
            values[key] = val
    return values


def _coerce(key, raw, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError("key %r: cannot parse %r as %s" % (key, raw, kind.__name__))


_DATASET_KEYS = {
    "n_samples": int, "image_height": int, "image_width": int,
    "noise_std": float, "seed": int, "attrs": str,
}
_ATTR_FIELDS = {
    "proportion": float, "radius_mean": float, "radius_std": float,
    "blob_count": int, "contrast": float, "polarity": float,
}


def dataset_spec_from_kv(values):
    values = dict(values)
    attrs_raw = values.pop("attrs", None)
    simple = {}
    for key in list(values):
        if key in _DATASET_KEYS:
            simple[key] = _coerce(key, values.pop(key), _DATASET_KEYS[key])

    attr_profiles = None
    if attrs_raw is not None:
        labels = [a.strip() for a in attrs_raw.split(",") if a.strip()]
        attr_profiles = {}
        for label in labels:
            fields = {}
            prefix = "attr.%s." % label
            for key in list(values):
                if key.startswith(prefix):
                    name = key[len(prefix):]
                    if name not in _ATTR_FIELDS:
                        raise ConfigError("unknown attribute field %r" % key)
                    fields[name] = _coerce(key, values.pop(key), _ATTR_FIELDS[name])
            if "proportion" not in fields:
                raise ConfigError("attribute %r needs a proportion" % label)
            attr_profiles[label] = AttrProfile(**fields)
    if values:
        raise ConfigError("unknown config keys: %s" % sorted(values))

    kwargs = {}
    if "n_samples" in simple:
        kwargs["n_samples"] = simple["n_samples"]
    if "image_height" in simple or "image_width" in simple:
        kwargs["image_size"] = (simple.get("image_height", 32),
                                simple.get("image_width", 32))
    if "noise_std" in simple:
        kwargs["noise_std"] = simple["noise_std"]
    if "seed" in simple:
        kwargs["seed"] = simple["seed"]
    if attr_profiles is not None:
        kwargs["attrs"] = attr_profiles
    return DatasetSpec(**kwargs)


def load_dataset_spec(path):
    return dataset_spec_from_kv(parse_kv_file(path))


_TRAIN_KEYS = {
    "train.lr0": float, "train.decay_gamma": float, "train.epochs": int,
    "train.batch_size": int, "train.weight_decay": float,
    "train.beta1": float, "train.beta2": float, "train.eps": float,
    "train.seed": int, "train.val_frac": float,
    "model.patch_size": int, "model.d_model": int, "model.d_mlp": int,
    "model.n_blocks": int, "model.n_classes": int,
    "model.dmoe_placement": str, "model.dmoe_sharing": str,
    "dmoe.n_experts": int, "dmoe.top_k": int, "dmoe.d_hidden": int,
    "dmoe.dropout_p": float,
}


def run_config_from_kv(values, mode, attrs, image_size, in_channels=1, overrides=None):
    """Build (TrainConfig, BackboneConfig) for a dataset with the given
    attribute vocabulary. overrides (same dotted keys) win over the file."""
    merged = dict(values)
    for k, v in (overrides or {}).items():
        merged[k] = v
    unknown = set(merged) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError("unknown config keys: %s" % sorted(unknown))
    cv = {k: (_coerce(k, v, _TRAIN_KEYS[k]) if isinstance(v, str) else v)
          for k, v in merged.items()}

    tc = TrainConfig(
        lr0=cv.get("train.lr0", 1e-3),
        decay_gamma=cv.get("train.decay_gamma", 0.98),
        epochs=cv.get("train.epochs", 30),
        batch_size=cv.get("train.batch_size", 16),
        weight_decay=cv.get("train.weight_decay", 0.01),
        betas=(cv.get("train.beta1", 0.9), cv.get("train.beta2", 0.999)),
        eps=cv.get("train.eps", 1e-8),
        seed=cv.get("train.seed", 0),
        mode=mode,
        val_frac=cv.get("train.val_frac", 0.15),
    )

    d_model = cv.get("model.d_model", 64)
    dmoe = None
    if mode != "plain":
        dmoe = DMoEConfig(
            d_model=d_model,
            d_hidden=cv.get("dmoe.d_hidden", 128),
            n_experts=cv.get("dmoe.n_experts", 8),
            top_k=cv.get("dmoe.top_k", 2),
            dropout_p=cv.get("dmoe.dropout_p", 0.1),
            attributes=tuple(attrs),
        )
    placement = None
    if "model.dmoe_placement" in cv:
        placement = tuple(int(i) for i in str(cv["model.dmoe_placement"]).split(";") if i != "")
    bc = BackboneConfig(
        image_size=image_size,
        patch_size=cv.get("model.patch_size", 8),
        in_channels=in_channels,
        d_model=d_model,
        d_mlp=cv.get("model.d_mlp", 128),
        n_blocks=cv.get("model.n_blocks", 6),
        n_classes=cv.get("model.n_classes", 2),
        mode=mode,
        dmoe_placement=placement,
        dmoe_sharing=cv.get("model.dmoe_sharing", "shared"),
        dmoe=dmoe,
    )
    return tc, bc


def env_seed(default=0):
    raw = os.environ.get("DMOE_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("DMOE_SEED must be an integer, got %r" % raw)
