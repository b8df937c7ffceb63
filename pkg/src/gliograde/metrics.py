"""Segmentation and grading metrics, and report emission.

GBM is the positive class. Confusion-count ratios are computed as exact
fractions so that half-up rounding to two decimals is exact; MCC and AUC are
floats rounded from their shortest decimal representation.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from .errors import NoTumourError, ShapeError, ValidationError
from .volumes import Volume

log = logging.getLogger(__name__)

MODALITY_MODES = {
    "all": (),
    "t1ce+flair": ("T1", "T2"),
    "t1ce+t2": ("T1", "FLAIR"),
}
SUMMARY_COLUMNS = ["dataset", "auc", "mcc", "acc", "sens", "spec"]
CASE_COLUMNS = ["case_id", "p_gbm", "label", "truth", "dice", "note"]


def dice(pred, truth):
    """``2|P n G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p = np.asarray(pred.values if isinstance(pred, Volume) else pred) > 0
    g = np.asarray(truth.values if isinstance(truth, Volume) else truth) > 0
    if p.shape != g.shape:
        raise ShapeError(f"dice: mask shapes differ, {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def _positive(labels):
    out = []
    for lab in labels:
        if isinstance(lab, str):
            if lab not in ("GBM", "LGG"):
                raise ValidationError(f"label must be GBM or LGG, got {lab!r}")
            out.append(lab == "GBM")
        else:
            out.append(bool(lab))
    return np.array(out, dtype=bool)


def mid_ranks(values):
    """1-based ranks with ties given the average of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def auc(scores, labels):
    """Mann-Whitney AUC: ``P(score_pos > score_neg) + P(tie) / 2``."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = _positive(labels)
    if scores.shape != pos.shape:
        raise ShapeError(f"auc: {scores.size} scores for {pos.size} labels")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("auc is undefined unless both GBM and LGG cases are present")
    u = mid_ranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_labels(cls, predicted, truth):
        p, t = _positive(predicted), _positive(truth)
        return cls(int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum()), int((~p & ~t).sum()))

    def accuracy(self):
        return Fraction(self.tp + self.tn, self.total) if self.total else None

    def sensitivity(self):
        return Fraction(self.tp, self.tp + self.fn) if self.tp + self.fn else None

    def specificity(self):
        return Fraction(self.tn, self.tn + self.fp) if self.tn + self.fp else None


def mcc(c):
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def percent(value):
    """Half-up percentage with two decimals, e.g. ``Fraction(73, 80) -> '91.25'``."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    if isinstance(value, Fraction):
        exact = Decimal(value.numerator * 100) / Decimal(value.denominator)
    else:
        exact = Decimal(repr(float(value))) * 100
    return str(exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class CaseRow:
    case_id: str
    p_gbm: float
    label: str
    truth: str
    dice: float = None
    note: str = ""


@dataclass
class EvalReport:
    dataset: str
    counts: ConfusionCounts
    auc: float
    mcc: float
    rows: list = field(default_factory=list)

    @property
    def accuracy(self):
        return self.counts.accuracy()

    @property
    def sensitivity(self):
        return self.counts.sensitivity()

    @property
    def specificity(self):
        return self.counts.specificity()

    @property
    def mean_dice(self):
        values = [r.dice for r in self.rows if r.dice is not None]
        return float(np.mean(values)) if values else None

    def summary(self):
        """Summary row: dataset, auc, mcc, acc, sens, spec as percentages."""
        return {
            "dataset": self.dataset,
            "auc": percent(self.auc),
            "mcc": percent(self.mcc),
            "acc": percent(self.accuracy),
            "sens": percent(self.sensitivity),
            "spec": percent(self.specificity),
        }

    def summary_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.summary())
        return buf.getvalue()

    def cases_csv(self):
        return cases_csv(self.rows)


def cases_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CASE_COLUMNS)
    for r in rows:
        writer.writerow([r.case_id, repr(float(r.p_gbm)), r.label, r.truth,
                         "" if r.dice is None else repr(float(r.dice)), r.note])
    return buf.getvalue()


def read_cases_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CASE_COLUMNS:
        raise ValidationError(f"prediction table header must be {','.join(CASE_COLUMNS)}")
    return [
        CaseRow(r["case_id"], float(r["p_gbm"]), r["label"], r["truth"],
                float(r["dice"]) if r["dice"] else None, r["note"])
        for r in reader
    ]


def report_from_rows(rows, dataset="phantom"):
    if not rows:
        raise ValidationError("cannot evaluate an empty case list")
    unlabeled = [r.case_id for r in rows if r.truth not in ("GBM", "LGG")]
    if unlabeled:
        raise ValidationError(f"cases without a grade label: {unlabeled[:5]}")
    truths = [r.truth for r in rows]
    counts = ConfusionCounts.from_labels([r.label for r in rows], truths)
    try:
        area = auc([r.p_gbm for r in rows], truths)
    except ValidationError:
        area = float("nan")
    return EvalReport(dataset, counts, area, mcc(counts), list(rows))


def evaluate_grading(cases, pipeline, modality_mode="all", dataset="phantom"):
    """Grade every case with ``pipeline.grade(case, exclude)`` under a modality mode.

    A case whose segmentation comes back empty is recorded as LGG with
    ``p_gbm = 0`` and the note ``no tumour found``.
    """
    if modality_mode not in MODALITY_MODES:
        raise ValidationError(f"modality mode must be one of {sorted(MODALITY_MODES)}, got {modality_mode!r}")
    if not cases:
        raise ValidationError("cannot evaluate an empty case list")
    unlabeled = [c.case_id for c in cases if c.grade is None]
    if unlabeled:
        raise ValidationError(f"cases without a grade label: {unlabeled[:5]}")
    exclude = MODALITY_MODES[modality_mode]
    rows = []
    for case in cases:
        try:
            result = pipeline.grade(case, exclude)
        except NoTumourError:
            log.warning("case %s: no tumour found", case.case_id)
            seg_dice = dice(np.zeros(case.dims), case.segmentation) if case.segmentation is not None else None
            rows.append(CaseRow(case.case_id, 0.0, "LGG", case.grade, seg_dice, "no tumour found"))
            continue
        seg_dice = dice(result.mask, case.segmentation) if case.segmentation is not None else None
        rows.append(CaseRow(case.case_id, result.p_gbm, result.label, case.grade, seg_dice))
    return report_from_rows(rows, dataset)
