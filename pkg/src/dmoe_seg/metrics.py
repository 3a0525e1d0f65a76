"""Segmentation overlap metrics, subgroup aggregation, and equity scaling.

The equity-scaled score divides the overall score by (1 + sum of absolute
deviations of each subgroup mean from the overall mean), so it can never
exceed the overall score and equals it only under perfect parity.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


class FormatError(ValueError):
    pass


VIOLIN_QUANTILES = (5, 25, 50, 75, 95)
VIOLIN_BINS = 32


@dataclass
class SampleScore:
    sample_id: str
    attr: str
    dice: float
    iou: float


@dataclass
class SubgroupReport:
    overall: dict                 # {"dice": .., "iou": ..}
    per_attr: dict                # label -> {"n": .., "dice": .., "iou": ..}
    delta_dice: float
    delta_iou: float
    es_dice: float
    es_iou: float
    attrs: tuple = field(default_factory=tuple)


def _check_masks(pred, true):
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    if pred.shape != true.shape:
        raise ShapeError("mask shapes differ: %s vs %s" % (pred.shape, true.shape))
    return pred, true


def dice(pred_mask, true_mask):
    pred, true = _check_masks(pred_mask, true_mask)
    denom = pred.sum() + true.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, true).sum() / denom


def iou(pred_mask, true_mask):
    pred, true = _check_masks(pred_mask, true_mask)
    union = np.logical_or(pred, true).sum()
    if union == 0:
        return 1.0
    return np.logical_and(pred, true).sum() / union


def essp(overall_score, per_attr_scores):
    """Return (delta, equity-scaled score) from an overall score and a map
    of per-subgroup scores."""
    if not per_attr_scores:
        raise ValueError("per_attr_scores must be nonempty")
    delta = sum(abs(overall_score - s) for s in per_attr_scores.values())
    return delta, overall_score / (1.0 + delta)


def aggregate(scores, attrs=None):
    """Build a SubgroupReport from per-sample scores.

    The overall score is the mean over all samples (not the mean of group
    means). attrs, when given, fixes the group vocabulary and ordering;
    scores carrying labels outside it are an error.
    """
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    if attrs is None:
        attrs = tuple(dict.fromkeys(s.attr for s in scores))
    else:
        attrs = tuple(attrs)
        unknown = {s.attr for s in scores} - set(attrs)
        if unknown:
            raise ValueError("scores carry unknown attributes: %s" % sorted(unknown))

    all_dice = np.array([s.dice for s in scores])
    all_iou = np.array([s.iou for s in scores])
    overall = {"dice": float(all_dice.mean()), "iou": float(all_iou.mean())}

    per_attr = {}
    for a in attrs:
        group = [s for s in scores if s.attr == a]
        if not group:
            continue
        per_attr[a] = {"n": len(group),
                       "dice": float(np.mean([s.dice for s in group])),
                       "iou": float(np.mean([s.iou for s in group]))}

    delta_dice, es_dice = essp(overall["dice"], {a: v["dice"] for a, v in per_attr.items()})
    delta_iou, es_iou = essp(overall["iou"], {a: v["iou"] for a, v in per_attr.items()})
    return SubgroupReport(overall=overall, per_attr=per_attr,
                          delta_dice=delta_dice, delta_iou=delta_iou,
                          es_dice=es_dice, es_iou=es_iou, attrs=attrs)


def violin_summary(scores_by_attr):
    """Quantiles and a fixed-bin histogram on [0, 1] per nonempty group."""
    summary = {}
    for attr, values in scores_by_attr.items():
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            warnings.warn("violin_summary: group %r is empty, omitting" % attr)
            continue
        quantiles = {q: float(np.percentile(values, q)) for q in VIOLIN_QUANTILES}
        hist, _ = np.histogram(values, bins=VIOLIN_BINS, range=(0.0, 1.0))
        summary[attr] = {"n": int(values.size), "quantiles": quantiles,
                         "hist": hist.tolist()}
    return summary


# ---------------------------------------------------------------------------
# CSV interfaces

def read_scores_csv(path):
    scores = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "attr", "dice", "iou"]:
            raise FormatError("%s: expected header sample_id,attr,dice,iou" % path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError("%s: line %d: expected 4 fields, got %d"
                                  % (path, lineno, len(row)))
            try:
                scores.append(SampleScore(row[0], row[1], float(row[2]), float(row[3])))
            except ValueError:
                raise FormatError("%s: line %d: non-numeric score" % (path, lineno))
    if not scores:
        raise FormatError("%s: no score rows" % path)
    return scores


def write_scores_csv(path, scores):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id,attr,dice,iou\n")
        for s in scores:
            fh.write("%s,%s,%.17g,%.17g\n" % (s.sample_id, s.attr, s.dice, s.iou))


def write_report_csv(path, report):
    """One row per report, columns mirroring the benchmark-table order:
    ES-Dice, Dice, ES-IoU, IoU, then per-group Dice/IoU."""
    attrs = [a for a in report.attrs if a in report.per_attr]
    header = ["es_dice", "dice", "es_iou", "iou"]
    values = [report.es_dice, report.overall["dice"], report.es_iou, report.overall["iou"]]
    for a in attrs:
        header += ["dice_%s" % a, "iou_%s" % a]
        values += [report.per_attr[a]["dice"], report.per_attr[a]["iou"]]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        fh.write(",".join("%.17g" % v for v in values) + "\n")


def write_violin_csv(path, summary):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        qcols = ",".join("q%d" % q for q in VIOLIN_QUANTILES)
        bcols = ",".join("bin%d" % i for i in range(VIOLIN_BINS))
        fh.write("attr,n,%s,%s\n" % (qcols, bcols))
        for attr, s in summary.items():
            qs = ",".join("%.17g" % s["quantiles"][q] for q in VIOLIN_QUANTILES)
            bs = ",".join(str(c) for c in s["hist"])
            fh.write("%s,%d,%s,%s\n" % (attr, s["n"], qs, bs))
