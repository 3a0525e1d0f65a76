"""Synthetic attribute-imbalanced segmentation data and its on-disk format.

Each attribute subgroup draws blobs from its own size/contrast
distribution, so subgroups are genuinely distribution-shifted. Images are
stored in a bit-exact binary format (magic DSEG1 for float32 rasters,
DMSK1 for byte masks) next to a manifest CSV.
"""

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .metrics import FormatError

IMG_MAGIC = b"DSEG1\0"
MSK_MAGIC = b"DMSK1\0"


class SpecError(ValueError):
    pass


@dataclass
class AttrProfile:
    proportion: float
    radius_mean: float = 5.0
    radius_std: float = 1.0
    blob_count: int = 2
    contrast: float = 0.6
    # -1 draws dark blobs on a bright background instead of bright-on-dark
    polarity: float = 1.0


def default_attr_profiles():
    """Three subgroups mirroring a 9/15/76 percent imbalance, with the
    minority drawing small, inverted-contrast targets."""
    return {
        "grp_a": AttrProfile(proportion=0.09, radius_mean=3.5, radius_std=0.6,
                             blob_count=1, contrast=0.45, polarity=-1.0),
        "grp_b": AttrProfile(proportion=0.15, radius_mean=4.5, radius_std=0.8,
                             blob_count=2, contrast=0.55, polarity=1.0),
        "grp_c": AttrProfile(proportion=0.76, radius_mean=6.0, radius_std=1.0,
                             blob_count=2, contrast=0.8, polarity=1.0),
    }


@dataclass
class DatasetSpec:
    n_samples: int = 100
    image_size: tuple = (32, 32)
    attrs: dict = field(default_factory=default_attr_profiles)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.n_samples < 1:
            raise SpecError("n_samples must be positive")
        if not self.attrs:
            raise SpecError("attribute map must be nonempty")
        total = sum(p.proportion for p in self.attrs.values())
        if abs(total - 1.0) > 1e-9:
            raise SpecError("attribute proportions must sum to 1, got %.12g" % total)
        for a, p in self.attrs.items():
            if p.radius_mean <= 0 or p.radius_std < 0:
                raise SpecError("attribute %r: radii must be positive" % a)

    @property
    def attr_names(self):
        return tuple(self.attrs)


@dataclass
class Sample:
    id: str
    image: np.ndarray   # [H, W, 1] float64 in [0, 1]
    mask: np.ndarray    # [H, W] uint8 in {0, 1}
    attr: str


class Dataset:
    def __init__(self, samples, attrs):
        self.samples = list(samples)
        self.attrs = tuple(attrs)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def counts(self):
        c = {a: 0 for a in self.attrs}
        for s in self.samples:
            c[s.attr] += 1
        return c


def largest_remainder_counts(proportions, n):
    """Integer counts summing to n that best match the given fractions."""
    raw = np.asarray(proportions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    short = n - counts.sum()
    for i in np.argsort(-remainder, kind="stable")[:short]:
        counts[i] += 1
    return counts


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def _render_sample(spec, attr, sample_index):
    rng = np.random.default_rng(splitmix64((spec.seed & 0xFFFFFFFFFFFFFFFF) ^ sample_index))
    h, w = spec.image_size
    prof = spec.attrs[attr]

    base = 0.5 - 0.3 * prof.polarity
    image = base + rng.normal(0.0, spec.noise_std, size=(h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(prof.blob_count):
        r = max(1.5, rng.normal(prof.radius_mean, prof.radius_std))
        r = min(r, (min(h, w) - 1) / 2.0)  # blobs must fit in small images
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[disk] = 1
        image[disk] = base + prof.polarity * prof.contrast + rng.normal(
            0.0, spec.noise_std, size=int(disk.sum()))
    image = np.clip(image, 0.0, 1.0)
    # quantize through the on-disk float32 format so round-trips are exact
    image = image.astype("<f4").astype(np.float64)
    if mask.sum() == 0:
        raise SpecError("generated an empty mask for attribute %r" % attr)
    return image[..., None], mask


def generate(spec):
    counts = largest_remainder_counts(
        [spec.attrs[a].proportion for a in spec.attr_names], spec.n_samples)
    if (counts == 0).any():
        raise SpecError("n_samples=%d too small for every subgroup to get >= 1 sample"
                        % spec.n_samples)
    samples = []
    index = 0
    for a, c in zip(spec.attr_names, counts):
        for _ in range(c):
            image, mask = _render_sample(spec, a, index)
            samples.append(Sample(id="s%05d" % index, image=image, mask=mask, attr=a))
            index += 1
    return Dataset(samples, spec.attr_names)


# ---------------------------------------------------------------------------
# on-disk format

def _write_image(path, image):
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.tobytes())


def _read_image(path):
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != IMG_MAGIC:
            raise FormatError("%s: bad image magic %r" % (path, magic))
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError("%s: truncated image header" % path)
        h, w, c = struct.unpack("<III", header)
        payload = fh.read(h * w * c * 4)
        if len(payload) != h * w * c * 4:
            raise FormatError("%s: truncated image payload" % path)
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)


def _write_mask(path, mask):
    arr = np.asarray(mask, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(MSK_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(arr.tobytes())


def _read_mask(path):
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != MSK_MAGIC:
            raise FormatError("%s: bad mask magic %r" % (path, magic))
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError("%s: truncated mask header" % path)
        h, w = struct.unpack("<II", header)
        payload = fh.read(h * w)
        if len(payload) != h * w:
            raise FormatError("%s: truncated mask payload" % path)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if not np.isin(arr, (0, 1)).all():
        raise FormatError("%s: mask bytes outside {0, 1}" % path)
    return arr.copy()


def save(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rows = []
    for s in dataset:
        img_rel = "images/%s.img" % s.id
        msk_rel = "masks/%s.msk" % s.id
        _write_image(os.path.join(out_dir, img_rel), s.image)
        _write_mask(os.path.join(out_dir, msk_rel), s.mask)
        rows.append((s.id, img_rel, msk_rel, s.attr))
    with open(os.path.join(out_dir, "manifest.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,image_path,mask_path,attr\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    with open(os.path.join(out_dir, "attrs.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("attr\n")
        for a in dataset.attrs:
            fh.write(a + "\n")


def load(in_dir):
    manifest = os.path.join(in_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise FormatError("%s: manifest.csv missing" % in_dir)
    samples = []
    with open(manifest, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "image_path", "mask_path", "attr"]:
            raise FormatError("%s: bad manifest header" % manifest)
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise FormatError("%s: malformed manifest row %r" % (manifest, row))
            sid, img_rel, msk_rel, attr = row
            image = _read_image(os.path.join(in_dir, img_rel))
            mask = _read_mask(os.path.join(in_dir, msk_rel))
            if mask.shape != image.shape[:2]:
                raise FormatError("%s: mask/image shape mismatch for %s" % (in_dir, sid))
            samples.append(Sample(id=sid, image=image, mask=mask, attr=attr))
    attrs_path = os.path.join(in_dir, "attrs.csv")
    if os.path.exists(attrs_path):
        with open(attrs_path, "r", encoding="utf-8") as fh:
            attrs = [line.strip() for line in fh.read().splitlines()[1:] if line.strip()]
    else:
        attrs = list(dict.fromkeys(s.attr for s in samples))
    for s in samples:
        if s.attr not in attrs:
            raise FormatError("%s: sample %s has attr %r outside the manifest vocabulary"
                              % (in_dir, s.id, s.attr))
    return Dataset(samples, attrs)


def split(dataset, train_frac, seed):
    """Stratified-by-attribute split into (train, test)."""
    if not 0.0 < train_frac < 1.0:
        raise SpecError("train_frac must be in (0, 1)")
    rng = np.random.default_rng([seed, 0x5917])
    train, test = [], []
    for a in dataset.attrs:
        group = [s for s in dataset if s.attr == a]
        if len(group) < 2:
            raise SpecError("attribute %r has %d sample(s); cannot stratify"
                            % (a, len(group)))
        order = rng.permutation(len(group))
        n_train = int(round(train_frac * len(group)))
        n_train = min(max(n_train, 1), len(group) - 1)
        picked = set(order[:n_train])
        for i, s in enumerate(group):
            (train if i in picked else test).append(s)
    return Dataset(train, dataset.attrs), Dataset(test, dataset.attrs)


def batches(dataset, batch_size, seed, epoch):
    """Seeded per-epoch shuffle; the final partial batch is kept."""
    if batch_size < 1:
        raise SpecError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch, 0xBA7C])
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield [dataset[i] for i in order[start:start + batch_size]]
