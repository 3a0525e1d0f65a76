"""Optimization, checkpointing, and evaluation orchestration.

Training minimizes mean per-pixel cross-entropy with AdamW under an
exponential learning-rate schedule. Checkpoints are a JSON header (name ->
offset/shape map plus a config echo) followed by a NUL byte and a flat
little-endian float64 payload, so round-trips are byte-exact.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import tensor as T
from .backbone import BackboneConfig, SegmentationModel
from .metrics import FormatError, SampleScore
from .moe import DMoEConfig
from .tensor import ConfigError, Tensor


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, batch):
        super().__init__("non-finite loss at epoch %d, batch %d" % (epoch, batch))
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_gamma: float = 0.98
    epochs: int = 30
    batch_size: int = 16
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    mode: str = "dmoe"
    val_frac: float = 0.15

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0.0 < self.decay_gamma <= 1.0:
            raise ConfigError("decay_gamma must be in (0, 1]")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ConfigError("betas must be in (0, 1)")
        if self.mode not in ("plain", "moe", "dmoe"):
            raise ConfigError("mode must be plain, moe, or dmoe")


def seg_loss(logits, mask):
    """Mean over pixels of the negative log-probability of the true class.

    logits: Tensor [..., n_classes]; mask: integer array of class ids with
    matching leading shape.
    """
    mask = np.asarray(mask)
    n_classes = logits.shape[-1]
    if mask.shape != logits.shape[:-1]:
        raise T.ShapeError("mask shape %s does not match logits %s"
                           % (mask.shape, logits.shape))
    if mask.min() < 0 or mask.max() >= n_classes:
        raise IndexError("class index out of range [0, %d)" % n_classes)
    n_pix = mask.size
    flat = T.reshape(logits, (n_pix, n_classes))
    lp = T.log_softmax(flat, axis=1)
    picked = T.gather_pairs(lp, np.arange(n_pix), mask.reshape(-1))
    return T.scale(T.reduce_mean(picked), -1.0)


class AdamW:
    """AdamW with decoupled weight decay applied before the moment update."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint format

def _dmoe_cfg_to_dict(cfg):
    if cfg is None:
        return None
    return {"d_model": cfg.d_model, "d_hidden": cfg.d_hidden,
            "n_experts": cfg.n_experts, "top_k": cfg.top_k,
            "dropout_p": cfg.dropout_p, "attributes": list(cfg.attributes)}


def backbone_cfg_to_dict(cfg):
    # mode is deliberately not echoed: attr_map fully determines routing,
    # so equivalent moe/dmoe models serialize identically
    return {"image_size": list(cfg.image_size), "patch_size": cfg.patch_size,
            "in_channels": cfg.in_channels, "d_model": cfg.d_model,
            "d_mlp": cfg.d_mlp, "n_blocks": cfg.n_blocks,
            "n_classes": cfg.n_classes,
            "dmoe_placement": list(cfg.dmoe_placement),
            "dmoe_sharing": cfg.dmoe_sharing,
            "dmoe": _dmoe_cfg_to_dict(cfg.dmoe),
            "attr_map": dict(sorted(cfg.attr_map.items()))}


def backbone_cfg_from_dict(d):
    dmoe = None
    if d.get("dmoe") is not None:
        dd = d["dmoe"]
        dmoe = DMoEConfig(d_model=dd["d_model"], d_hidden=dd["d_hidden"],
                          n_experts=dd["n_experts"], top_k=dd["top_k"],
                          dropout_p=dd["dropout_p"],
                          attributes=tuple(dd["attributes"]))
    attr_map = dict(d.get("attr_map") or {})
    if dmoe is None:
        mode = "plain"
    elif attr_map and all(k == v for k, v in attr_map.items()):
        mode = "dmoe"
    else:
        mode = "moe"
    return BackboneConfig(image_size=tuple(d["image_size"]), patch_size=d["patch_size"],
                          in_channels=d["in_channels"], d_model=d["d_model"],
                          d_mlp=d["d_mlp"], n_blocks=d["n_blocks"],
                          n_classes=d["n_classes"], mode=mode,
                          dmoe_placement=tuple(d["dmoe_placement"]),
                          dmoe_sharing=d["dmoe_sharing"], dmoe=dmoe,
                          attr_map=attr_map)


def save_checkpoint(path, model, epoch=0, rng_state=None):
    params = model.parameters()
    names = sorted(params)
    index = {}
    offset = 0
    for name in names:
        shape = list(params[name].data.shape)
        index[name] = {"offset": offset, "shape": shape}
        offset += params[name].data.size
    header = {"format": "DMOE-CKPT1", "params": index,
              "config": backbone_cfg_to_dict(model.cfg),
              "epoch": epoch, "rng": rng_state}
    payload = b"".join(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes()
                       for n in names)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\0")
        fh.write(payload)


def load_checkpoint(path):
    """Returns (model, header dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\0")
    if sep < 0:
        raise FormatError("%s: missing header separator" % path)
    try:
        header = json.loads(blob[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("%s: unparseable checkpoint header" % path)
    if header.get("format") != "DMOE-CKPT1":
        raise FormatError("%s: bad checkpoint magic" % path)
    payload = np.frombuffer(blob[sep + 1:], dtype="<f8")
    total = sum(int(np.prod(v["shape"])) if v["shape"] else 1
                for v in header["params"].values())
    if payload.size != total:
        raise FormatError("%s: payload has %d values, header expects %d"
                          % (path, payload.size, total))
    model = SegmentationModel(backbone_cfg_from_dict(header["config"]), seed=0)
    params = model.parameters()
    if sorted(params) != sorted(header["params"]):
        raise FormatError("%s: parameter names do not match the model config" % path)
    for name, entry in header["params"].items():
        o = entry["offset"]
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        params[name].data = payload[o:o + n].reshape(shape).copy()
    return model, header


# ---------------------------------------------------------------------------
# train / evaluate

def _group_by_attr(batch):
    groups = {}
    for s in batch:
        groups.setdefault(s.attr, []).append(s)
    return groups


def batch_loss(model, batch, training, rng, force_noise=False):
    """Pixel-weighted mean cross-entropy over a mixed-attribute batch."""
    if model.cfg.mode == "plain":
        groups = {None: list(batch)}
    else:
        groups = _group_by_attr(batch)
    total = None
    n_pix = 0
    for attr in sorted(groups, key=lambda a: (a is None, a)):
        samples = groups[attr]
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples]).astype(np.intp)
        logits = model.forward_batch(images, attr, training, rng, force_noise)
        nc = logits.shape[-1]
        flat = T.reshape(logits, (masks.size, nc))
        lp = T.log_softmax(flat, axis=1)
        picked = T.gather_pairs(lp, np.arange(masks.size), masks.reshape(-1))
        part = T.reduce_sum(picked)
        total = part if total is None else total + part
        n_pix += masks.size
    return T.scale(total, -1.0 / n_pix)


def predict_mask(model, sample):
    """Argmax class map for one sample, evaluation mode."""
    logits = model.forward(sample.image, sample.attr if model.cfg.mode != "plain" else None,
                           training=False)
    return np.argmax(logits.data, axis=-1)


def evaluate(model, dataset):
    """Score every sample (no noise, no dropout) and aggregate per subgroup."""
    scores = []
    if model.cfg.mode == "plain":
        groups = {None: list(dataset)}
    else:
        groups = _group_by_attr(dataset)
    for attr in sorted(groups, key=lambda a: (a is None, a)):
        samples = groups[attr]
        for start in range(0, len(samples), 64):
            chunk = samples[start:start + 64]
            images = np.stack([s.image for s in chunk])
            logits = model.forward_batch(images, attr, training=False)
            pred = np.argmax(logits.data, axis=-1)
            for s, p in zip(chunk, pred):
                per_class_dice = []
                per_class_iou = []
                for c in range(1, model.cfg.n_classes):
                    per_class_dice.append(metrics_mod.dice(p == c, s.mask == c))
                    per_class_iou.append(metrics_mod.iou(p == c, s.mask == c))
                scores.append(SampleScore(s.id, s.attr,
                                          float(np.mean(per_class_dice)),
                                          float(np.mean(per_class_iou))))
    scores.sort(key=lambda s: s.sample_id)
    report = metrics_mod.aggregate(scores, dataset.attrs)
    return scores, report


def train(model, train_set, cfg, val_set=None):
    """Run the optimization loop; returns the per-epoch log.

    When a validation set is given, per-epoch subgroup Dice is logged and
    the parameters of the best-overall-Dice epoch are restored at the end.
    """
    if model.cfg.mode != "plain":
        unknown = set(a for a in train_set.attrs) - set(model.cfg.attr_map)
        if unknown:
            raise ConfigError("dataset attributes %s not covered by the model"
                              % sorted(unknown))
    opt = AdamW(model.parameters(), betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    log = []
    best = None
    rng_state = None
    for epoch in range(cfg.epochs):
        lr_t = cfg.lr0 * cfg.decay_gamma ** epoch
        rng = np.random.default_rng([cfg.seed, epoch, 0xD0E5])
        epoch_losses = []
        for bi, batch in enumerate(data_mod.batches(train_set, cfg.batch_size,
                                                    cfg.seed, epoch)):
            model.zero_grads()
            loss = batch_loss(model, batch, training=True, rng=rng)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, bi)
            loss.backward()
            opt.step(lr_t)
            epoch_losses.append(float(loss.data))
        rng_state = rng.bit_generator.state
        row = {"epoch": epoch, "lr": lr_t, "loss": float(np.mean(epoch_losses))}
        if val_set is not None and len(val_set):
            _, report = evaluate(model, val_set)
            row["dice_overall"] = report.overall["dice"]
            for a in val_set.attrs:
                row["dice_%s" % a] = report.per_attr.get(a, {}).get("dice", float("nan"))
            if best is None or row["dice_overall"] > best[0]:
                best = (row["dice_overall"], epoch,
                        {k: p.data.copy() for k, p in model.parameters().items()})
        log.append(row)
    if best is not None:
        for k, p in model.parameters().items():
            p.data = best[2][k]
    return log, rng_state


def write_train_log(path, log, attrs):
    cols = ["epoch", "lr", "loss"]
    if any("dice_overall" in row for row in log):
        cols.append("dice_overall")
        cols.extend("dice_%s" % a for a in attrs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in log:
            cells = []
            for c in cols:
                v = row.get(c)
                cells.append("" if v is None else
                             (str(v) if c == "epoch" else "%.10g" % v))
            fh.write(",".join(cells) + "\n")
