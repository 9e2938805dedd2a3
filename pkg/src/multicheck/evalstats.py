"""Classification reports and paired model-comparison statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.special import gammaincc

from .data import LABEL_NAMES, NUM_CLASSES, EncodedBatch, Sample, batch_iter, encode_samples
from .errors import CompatibilityError, InputError, UndefinedTestError

SHORT_NAMES = ("Sup_Text", "Sup_MM", "Insuf_Text", "Insuf_MM", "Refute")


def predict(checkpoint, dataset: Sequence[Sample] | EncodedBatch, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax labels for ``dataset`` in its original order.

    ``dataset`` is either raw samples (tokenized with the checkpoint's own
    vocabulary and max length) or an already-encoded batch.
    """
    model = checkpoint.build_model()
    if isinstance(dataset, EncodedBatch):
        data = dataset
        if data.claim_ids.shape[1] != checkpoint.max_len:
            raise CompatibilityError(
                f"dataset encoded with max_len {data.claim_ids.shape[1]}, checkpoint expects {checkpoint.max_len}"
            )
    else:
        data = encode_samples(list(dataset), checkpoint.vocab, checkpoint.max_len)
    if len(data) and tuple(data.claim_image.shape[1:]) != tuple(checkpoint.image_shape):
        raise CompatibilityError(
            f"dataset images have shape {tuple(data.claim_image.shape[1:])}, "
            f"checkpoint expects {tuple(checkpoint.image_shape)}"
        )
    out = []
    with torch.no_grad():
        for batch in batch_iter(data, batch_size):
            out.append(torch.argmax(model.logits(batch), dim=-1).numpy())
    return np.concatenate(out).astype(np.int64) if out else np.zeros(0, dtype=np.int64)


@dataclass
class ClassificationReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    macro_f1: float
    weighted_f1: float
    # classes whose precision or recall had a zero denominator (reported as 0)
    zero_division: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(LABEL_NAMES[: len(self.f1)])
        return d


def weighted_f1(f1: Sequence[float], support: Sequence[float]) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    total = support.sum()
    return float((support * f1).sum() / total) if total > 0 else 0.0


def confusion_matrix(golds: Sequence[int], preds: Sequence[int], k: int = NUM_CLASSES) -> np.ndarray:
    """``m[i, j]`` counts gold ``i`` predicted as ``j``."""
    g = np.asarray(golds, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if g.shape != p.shape:
        raise InputError(f"length mismatch: {g.shape[0]} golds vs {p.shape[0]} preds")
    for name, arr in (("gold", g), ("pred", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise InputError(f"{name} labels must lie in [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (g, p), 1)
    return m


def classification_report(preds: Sequence[int], golds: Sequence[int], k: int = NUM_CLASSES) -> ClassificationReport:
    m = confusion_matrix(golds, preds, k)
    tp = np.diag(m).astype(np.float64)
    pred_tot = m.sum(axis=0).astype(np.float64)
    gold_tot = m.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(gold_tot > 0, tp / gold_tot, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    zero_div = [i for i in range(k) if pred_tot[i] == 0 or gold_tot[i] == 0]
    n = m.sum()
    return ClassificationReport(
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=gold_tot.astype(int).tolist(),
        accuracy=float(tp.sum() / n) if n else 0.0,
        macro_f1=float(f1.mean()),
        weighted_f1=weighted_f1(f1, gold_tot),
        zero_division=zero_div,
    )


def discordant_pairs(preds_a, preds_b, golds) -> tuple[int, int, int, int]:
    """2x2 correctness partition ``(a, b, c, d)`` with system A as the baseline.

    a: both correct, b: only A correct, c: only B correct, d: both wrong.
    """
    pa, pb, g = (np.asarray(x, dtype=np.int64) for x in (preds_a, preds_b, golds))
    if not (pa.shape == pb.shape == g.shape):
        raise InputError(f"length mismatch: {pa.shape[0]}, {pb.shape[0]}, {g.shape[0]}")
    ca, cb = pa == g, pb == g
    return (
        int(np.sum(ca & cb)),
        int(np.sum(ca & ~cb)),
        int(np.sum(~ca & cb)),
        int(np.sum(~ca & ~cb)),
    )


def chi2_sf(x: float, df: float) -> float:
    """Chi-square survival function, Q(df/2, x/2)."""
    if df <= 0:
        raise ValueError(f"df must be positive, got {df}")
    if x <= 0:
        return 1.0
    return float(gammaincc(0.5 * df, 0.5 * x))


def mcnemar(b: int, c: int, correction: bool = False) -> tuple[float, float]:
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    if b + c == 0:
        raise UndefinedTestError("McNemar's test is undefined with no discordant pairs (b = c = 0)")
    diff = abs(b - c)
    if correction:
        diff = max(diff - 1, 0)
    chi2 = diff * diff / (b + c)
    return float(chi2), chi2_sf(chi2, 1)


def cross_table(preds_a, preds_b, k: int = NUM_CLASSES) -> np.ndarray:
    """``n[i, j]``: A predicts ``i`` while B predicts ``j``."""
    return confusion_matrix(preds_a, preds_b, k)


@dataclass
class BowkerResult:
    chi2: float
    df: int
    p: float
    nominal_df: int


def bowker(preds_a, preds_b, k: int = NUM_CLASSES) -> BowkerResult:
    """Symmetry test on the k x k cross-prediction table.

    Off-diagonal pairs with ``n_ij + n_ji = 0`` are dropped; ``df`` counts the
    pairs kept, ``nominal_df`` is k(k-1)/2.
    """
    n = cross_table(preds_a, preds_b, k)
    chi2 = 0.0
    df = 0
    for i in range(k):
        for j in range(i + 1, k):
            s = n[i, j] + n[j, i]
            if s > 0:
                chi2 += (n[i, j] - n[j, i]) ** 2 / s
                df += 1
    p = chi2_sf(chi2, df) if df > 0 else 1.0
    return BowkerResult(chi2=float(chi2), df=df, p=p, nominal_df=k * (k - 1) // 2)


@dataclass
class PairedComparison:
    n: int
    a: int
    b: int
    c: int
    d: int
    mcnemar_chi2: float | None
    mcnemar_p: float | None
    bowker_chi2: float
    bowker_df: int
    bowker_nominal_df: int
    bowker_p: float
    cross_table: list[list[int]]
    correction: bool = False
    notice: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def compare_predictions(preds_a, preds_b, golds, k: int = NUM_CLASSES, correction: bool = False) -> PairedComparison:
    """Full comparison of baseline A against model B on the same samples."""
    a, b, c, d = discordant_pairs(preds_a, preds_b, golds)
    notice = None
    try:
        m_chi2, m_p = mcnemar(b, c, correction)
    except UndefinedTestError:
        m_chi2 = m_p = None
        notice = "identical systems: no discordant pairs, McNemar's test undefined"
    bw = bowker(preds_a, preds_b, k)
    return PairedComparison(
        n=a + b + c + d,
        a=a,
        b=b,
        c=c,
        d=d,
        mcnemar_chi2=m_chi2,
        mcnemar_p=m_p,
        bowker_chi2=bw.chi2,
        bowker_df=bw.df,
        bowker_nominal_df=bw.nominal_df,
        bowker_p=bw.p,
        cross_table=cross_table(preds_a, preds_b, k).tolist(),
        correction=correction,
        notice=notice,
    )


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def format_p(p: float | None) -> str:
    if p is None:
        return "n/a"
    if p < 1e-15:
        return "<1e-15"
    return f"{p:.3g}"


def render_report(report: ClassificationReport) -> str:
    lines = [f"{'class':<26}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
    for i, name in enumerate(LABEL_NAMES[: len(report.f1)]):
        mark = "*" if i in report.zero_division else " "
        lines.append(
            f"{name:<25}{mark}{report.precision[i]:>10.4f}{report.recall[i]:>10.4f}"
            f"{report.f1[i]:>10.4f}{report.support[i]:>9d}"
        )
    n = sum(report.support)
    lines.append(f"{'accuracy':<26}{'':>20}{report.accuracy:>10.4f}{n:>9d}")
    lines.append(f"{'macro f1':<26}{'':>20}{report.macro_f1:>10.4f}{n:>9d}")
    lines.append(f"{'weighted f1':<26}{'':>20}{report.weighted_f1:>10.4f}{n:>9d}")
    if report.zero_division:
        lines.append("* zero denominator in precision or recall; reported as 0")
    return "\n".join(lines)


def render_comparison(cmp: PairedComparison) -> str:
    k = len(cmp.cross_table)
    names = list(SHORT_NAMES[:k])
    lines = ["McNemar 2x2 (rows: baseline, cols: model)"]
    lines.append(f"{'':>16}{'correct':>10}{'wrong':>10}")
    lines.append(f"{'correct':>16}{cmp.a:>10d}{cmp.b:>10d}")
    lines.append(f"{'wrong':>16}{cmp.c:>10d}{cmp.d:>10d}")
    if cmp.notice:
        lines.append(cmp.notice)
    else:
        lines.append(f"McNemar chi2 = {cmp.mcnemar_chi2:.4f}, p = {format_p(cmp.mcnemar_p)}")
    lines.append("")
    lines.append("Cross-prediction table (rows: baseline pred, cols: model pred)")
    lines.append(f"{'':>14}" + "".join(f"{n:>14}" for n in names))
    for name, row in zip(names, cmp.cross_table):
        lines.append(f"{name:>14}" + "".join(f"{v:>14d}" for v in row))
    lines.append(
        f"Bowker chi2 = {cmp.bowker_chi2:.4f} (df = {cmp.bowker_df}, nominal df = {cmp.bowker_nominal_df}), "
        f"p = {format_p(cmp.bowker_p)}"
    )
    return "\n".join(lines)


def cross_table_csv(cmp: PairedComparison) -> str:
    k = len(cmp.cross_table)
    rows = ["baseline\\model," + ",".join(LABEL_NAMES[:k])]
    for name, row in zip(LABEL_NAMES, cmp.cross_table):
        rows.append(name + "," + ",".join(str(v) for v in row))
    return "\n".join(rows) + "\n"


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
