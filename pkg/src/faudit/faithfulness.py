"""Perturbation-based faithfulness metrics for saliency heatmaps.

Deletion/insertion curves progressively replace pixels (highest heatmap rank
first, stable row-major tie-break) with a fill reference and track the
model's probability for its originally predicted class; AUCs are trapezoids
over 21 fractions.  Stability re-explains augmented copies of the input and
averages cosine similarity over the on-wafer region.  IoU, Spearman defect
alignment and top-k confidence drops compare heatmaps against ground-truth
defect masks.

Every metric is a pure function of its inputs.  Degenerate heatmaps are
processed, not rejected: the tie-break ordering applies and a note lands in
the record's annotations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .explainers import DEGENERATE_EPS, Heatmap
from .imageops import gaussian_blur, rotate_nearest, translate

ZERO_FILL = "zero_fill"
BLUR_FILL = "blur_fill"
K_PERCENT_CHOICES = (5, 10, 20)


class FaithfulnessError(RuntimeError):
    pass


# -- fill operators -----------------------------------------------------------


@dataclass(frozen=True)
class FillOperator:
    """Provides the per-sample reference image pixels are swapped with."""

    kind: str
    sigma: float = 3.0

    def __post_init__(self):
        if self.kind not in (ZERO_FILL, BLUR_FILL):
            raise FaithfulnessError(f"unknown fill kind {self.kind!r}")
        if self.kind == BLUR_FILL and self.sigma <= 0:
            raise FaithfulnessError(f"blur sigma must be positive, got {self.sigma}")

    def reference(self, image: np.ndarray) -> np.ndarray:
        if self.kind == ZERO_FILL:
            return np.zeros_like(image)
        return gaussian_blur(image, self.sigma)


# -- curves ---------------------------------------------------------------------


@dataclass
class PerturbationCurve:
    direction: str  # "deletion" | "insertion"
    fractions: np.ndarray  # ascending, starting at 0.0 and ending at 1.0
    probabilities: np.ndarray  # predicted-class probability at each fraction
    target_class: int  # argmax on the unperturbed image
    degenerate: bool = False  # heatmap had no dynamic range; tie-break order used


def default_fractions(points: int = 21) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def ranking(values: np.ndarray) -> np.ndarray:
    """Descending pixel order with stable row-major tie-break."""
    return np.argsort(-values.reshape(-1), kind="stable")


def _heatmap_values(heatmap) -> tuple[np.ndarray, bool]:
    if isinstance(heatmap, Heatmap):
        return heatmap.values, heatmap.degenerate
    arr = np.asarray(heatmap, dtype=np.float64)
    return arr, float(arr.max() - arr.min()) < DEGENERATE_EPS


def _predict_many(predict, images: np.ndarray) -> np.ndarray:
    batch_fn = getattr(predict, "predict_batch", None)
    if batch_fn is not None:
        return np.asarray(batch_fn(images))
    return np.stack([np.asarray(predict(img)) for img in images])


def _staged_images(
    start: np.ndarray, source: np.ndarray, order: np.ndarray, ks: np.ndarray
) -> np.ndarray:
    """Snapshot images after cumulatively copying source pixels into start."""
    c = start.shape[0]
    work = start.copy()
    flat_work = work.reshape(c, -1)
    flat_src = source.reshape(c, -1)
    out = np.empty((len(ks),) + start.shape)
    done = 0
    for i, k in enumerate(ks):
        idx = order[done:k]
        flat_work[:, idx] = flat_src[:, idx]
        done = k
        out[i] = work
    return out


def _curve(
    predict, image, heatmap, fill: FillOperator, direction: str, fractions
) -> PerturbationCurve:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    values, degenerate = _heatmap_values(heatmap)
    h, w = arr.shape[-2:]
    if values.shape != (h, w):
        raise FaithfulnessError(
            f"heatmap shape {values.shape} does not match image {(h, w)}"
        )
    fr = default_fractions() if fractions is None else np.asarray(fractions, dtype=np.float64)
    if len(fr) < 2 or np.any(np.diff(fr) < 0):
        raise FaithfulnessError("fractions must be ascending with >= 2 points")

    n = h * w
    order = ranking(values)
    ks = np.array([math.ceil(f * n) for f in fr])
    reference = fill.reference(arr)
    if direction == "deletion":
        staged = _staged_images(arr, reference, order, ks)
    else:
        staged = _staged_images(reference, arr, order, ks)

    target = int(np.asarray(predict(arr)).argmax())
    probs = _predict_many(predict, staged)[:, target]
    return PerturbationCurve(
        direction=direction,
        fractions=fr,
        probabilities=probs,
        target_class=target,
        degenerate=degenerate,
    )


def deletion_curve(predict, image, heatmap, fill: FillOperator, fractions=None) -> PerturbationCurve:
    """Probability of the originally predicted class while the top-ranked
    ceil(f*H*W) pixels are progressively replaced by the fill reference."""
    return _curve(predict, image, heatmap, fill, "deletion", fractions)


def insertion_curve(predict, image, heatmap, fill: FillOperator, fractions=None) -> PerturbationCurve:
    """Mirror of deletion: start from the fill reference and restore the
    top-ranked original pixels."""
    return _curve(predict, image, heatmap, fill, "insertion", fractions)


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def curve_auc(curve: PerturbationCurve) -> float:
    if len(curve.fractions) < 2:
        raise FaithfulnessError("AUC needs at least two curve points")
    return float(_trapezoid(curve.probabilities, curve.fractions))


# -- stability ------------------------------------------------------------------
#
# A transform sampler is called with an rng and returns a (forward, inverse)
# pair of array->array functions; forward is applied to the image right after
# drawing, inverse optionally realigns the augmented heatmap.


def rotation_sampler(max_degrees: float = 15.0):
    def draw(rng: np.random.Generator):
        angle = float(rng.uniform(-max_degrees, max_degrees))
        return (
            lambda im: rotate_nearest(im, angle),
            lambda im: rotate_nearest(im, -angle),
        )

    return draw


def translation_sampler(max_shift: int = 3):
    def draw(rng: np.random.Generator):
        dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        return (
            lambda im: translate(im, dy, dx),
            lambda im: translate(im, -dy, -dx),
        )

    return draw


def noise_sampler(sigma: float = 0.02):
    def draw(rng: np.random.Generator):
        return (
            lambda im: im + rng.normal(0.0, sigma, size=im.shape),
            lambda im: im,
        )

    return draw


DEFAULT_TRANSFORMS = (rotation_sampler(), translation_sampler(), noise_sampler())


def stability(
    explain_fn,
    image,
    k: int = 5,
    transforms=DEFAULT_TRANSFORMS,
    region_mask: np.ndarray | None = None,
    seed: int = 0,
    align: bool = False,
    annotations: list | None = None,
) -> float:
    """Mean cosine similarity between the heatmap of the image and heatmaps
    of K augmented copies, restricted to the on-wafer region.

    Heatmaps are compared in place by default; ``align=True`` applies the
    inverse transforms to each augmented heatmap first.  A zero-norm heatmap
    over the region contributes 0 to the mean, with a note.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if region_mask is None:
        region_mask = (arr > 0).any(axis=0)
    region = np.asarray(region_mask, dtype=bool).reshape(-1)
    if not region.any():
        raise FaithfulnessError("empty comparison region")

    base = explain_fn(arr).values.reshape(-1)[region]
    base_norm = float(np.sqrt((base * base).sum()))
    rng = np.random.default_rng(seed)
    total = 0.0
    for i in range(k):
        aug = arr
        inverses = []
        for sampler in transforms:
            fwd, inv = sampler(rng)
            aug = fwd(aug)
            inverses.append(inv)
        heat = explain_fn(aug).values
        if align:
            for inv in reversed(inverses):
                heat = inv(heat)
        other = heat.reshape(-1)[region]
        other_norm = float(np.sqrt((other * other).sum()))
        if base_norm < DEGENERATE_EPS or other_norm < DEGENERATE_EPS:
            if annotations is not None:
                annotations.append(f"stability term {i}: zero-norm heatmap on region")
            continue
        total += float((base * other).sum()) / (base_norm * other_norm)
    return total / k


# -- mask-alignment metrics -------------------------------------------------------


def iou(
    heatmap, mask: np.ndarray, threshold_percentile: float = 50.0,
    annotations: list | None = None,
) -> float:
    """IoU between the heatmap binarized at its own percentile and the mask.

    Degenerate heatmaps binarize by taking the top half (or the percentile
    share) of pixels in stable row-major order instead.
    """
    values, degenerate = _heatmap_values(heatmap)
    m = np.asarray(mask).astype(bool)
    if m.shape != values.shape:
        raise FaithfulnessError(f"mask shape {m.shape} != heatmap {values.shape}")
    if not m.any():
        raise FaithfulnessError("empty defect mask")
    if degenerate:
        n = values.size
        top = ranking(values)[: math.ceil(n * (100.0 - threshold_percentile) / 100.0)]
        hot = np.zeros(n, dtype=bool)
        hot[top] = True
        hot = hot.reshape(values.shape)
        if annotations is not None:
            annotations.append("iou: degenerate heatmap, row-major tie-break half used")
    else:
        hot = values > np.percentile(values, threshold_percentile)
    union = float(np.logical_or(hot, m).sum())
    if union == 0.0:
        if annotations is not None:
            annotations.append("iou: empty union")
        return 0.0
    return float(np.logical_and(hot, m).sum()) / union


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their positions."""
    flat = values.reshape(-1)
    sorter = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.float64)
    sorted_vals = flat[sorter]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [flat.size]))
    for s, e in zip(starts, ends):
        ranks[sorter[s:e]] = (s + e - 1) / 2.0 + 1.0
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation with average ranks for ties; NaN when a side is constant."""
    ra = average_ranks(np.asarray(a, dtype=np.float64))
    rb = average_ranks(np.asarray(b, dtype=np.float64))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    if denom == 0.0:
        return float("nan")
    return float((ra * rb).sum() / denom)


def spearman_defect(heatmap, mask: np.ndarray, annotations: list | None = None) -> float:
    """Spearman rho between heatmap values and the binary defect mask over all
    pixels.  A constant heatmap has no defined ordering: reported as 0."""
    values, _ = _heatmap_values(heatmap)
    m = np.asarray(mask).astype(np.float64)
    if m.shape != values.shape:
        raise FaithfulnessError(f"mask shape {m.shape} != heatmap {values.shape}")
    on = int((m > 0).sum())
    if on == 0 or on == m.size:
        raise FaithfulnessError("mask must contain defect and non-defect pixels")
    rho = spearman(values.reshape(-1), m.reshape(-1))
    if math.isnan(rho):
        if annotations is not None:
            annotations.append("spearman_defect: constant heatmap, reported 0")
        return 0.0
    return rho


def topk_drop(
    predict, image, heatmap, k_percent: int, fill: FillOperator
) -> float:
    """Confidence drop p(original) - p(top-k%-filled) for the predicted class."""
    if k_percent not in K_PERCENT_CHOICES:
        raise FaithfulnessError(
            f"k_percent must be one of {K_PERCENT_CHOICES}, got {k_percent}"
        )
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    values, _ = _heatmap_values(heatmap)
    n = values.size
    k = math.ceil(k_percent / 100.0 * n)
    order = ranking(values)
    reference = fill.reference(arr)
    filled = _staged_images(arr, reference, order, np.array([k]))[0]
    base = np.asarray(predict(arr))
    target = int(base.argmax())
    return float(base[target] - np.asarray(predict(filled))[target])


# -- per-sample record --------------------------------------------------------------


@dataclass
class AuditRecord:
    sample_id: str
    true_class: int
    predicted_class: int
    correct: bool
    explainer: str
    fill: str
    del_auc: float
    ins_auc: float
    stability: float
    iou: float
    spearman_defect: float
    topk_drop_5: float
    topk_drop_10: float
    topk_drop_20: float
    model_family: str = ""
    seed: int = -1
    degenerate: bool = False
    annotations: list = field(default_factory=list)
    error: str = ""


def compute_audit_record(
    predict,
    explain_fn,
    image,
    mask: np.ndarray,
    true_class: int,
    sample_id: str,
    fill: FillOperator,
    stability_k: int = 5,
    stability_seed: int = 0,
    stability_explain_fn=None,
    model_family: str = "",
    seed: int = -1,
    fractions=None,
    with_curves: bool = False,
):
    """Run the full metric battery for one (sample, explainer, fill) cell.

    ``stability_explain_fn`` lets callers use a cheaper explainer variant for
    the K re-explanations (e.g. fewer sampling masks); defaults to
    ``explain_fn``.  With ``with_curves`` the return value is
    ``(record, deletion, insertion)`` so callers can export the curves without
    recomputing them.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    notes: list[str] = []
    hm = explain_fn(arr)
    if hm.degenerate:
        notes.append("degenerate heatmap")
    has_defect = mask is not None and np.asarray(mask).astype(bool).any()
    if has_defect:
        iou_val = iou(hm, mask, annotations=notes)
        spearman_val = spearman_defect(hm, mask, annotations=notes)
    else:
        # defect-free classes have no localization ground truth
        iou_val = float("nan")
        spearman_val = float("nan")
        notes.append("localization skipped: empty defect mask")

    dele = deletion_curve(predict, arr, hm, fill, fractions)
    ins = insertion_curve(predict, arr, hm, fill, fractions)
    stab = stability(
        stability_explain_fn or explain_fn,
        arr,
        k=stability_k,
        seed=stability_seed,
        annotations=notes,
    )
    record = AuditRecord(
        sample_id=sample_id,
        true_class=int(true_class),
        predicted_class=dele.target_class,
        correct=dele.target_class == int(true_class),
        explainer=hm.explainer,
        fill=fill.kind,
        del_auc=curve_auc(dele),
        ins_auc=curve_auc(ins),
        stability=stab,
        iou=iou_val,
        spearman_defect=spearman_val,
        topk_drop_5=topk_drop(predict, arr, hm, 5, fill),
        topk_drop_10=topk_drop(predict, arr, hm, 10, fill),
        topk_drop_20=topk_drop(predict, arr, hm, 20, fill),
        model_family=model_family,
        seed=seed,
        degenerate=hm.degenerate,
        annotations=notes,
    )
    return (record, dele, ins) if with_curves else record


# -- persistence ----------------------------------------------------------------------

_CSV_FIELDS = [
    "sample_id", "true_class", "predicted_class", "correct", "explainer", "fill",
    "del_auc", "ins_auc", "stability", "iou", "spearman_defect",
    "topk_drop_5", "topk_drop_10", "topk_drop_20",
    "model_family", "seed", "degenerate", "annotations", "error",
]


def records_to_jsonl(path, records: list[AuditRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def records_from_jsonl(path) -> list[AuditRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(AuditRecord(**json.loads(line)))
    return records


def records_to_csv(path, records: list[AuditRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            row = asdict(rec)
            row["annotations"] = ";".join(rec.annotations)
            row["correct"] = int(rec.correct)
            row["degenerate"] = int(rec.degenerate)
            writer.writerow(row)


def records_from_csv(path) -> list[AuditRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                AuditRecord(
                    sample_id=row["sample_id"],
                    true_class=int(row["true_class"]),
                    predicted_class=int(row["predicted_class"]),
                    correct=bool(int(row["correct"])),
                    explainer=row["explainer"],
                    fill=row["fill"],
                    del_auc=float(row["del_auc"]),
                    ins_auc=float(row["ins_auc"]),
                    stability=float(row["stability"]),
                    iou=float(row["iou"]),
                    spearman_defect=float(row["spearman_defect"]),
                    topk_drop_5=float(row["topk_drop_5"]),
                    topk_drop_10=float(row["topk_drop_10"]),
                    topk_drop_20=float(row["topk_drop_20"]),
                    model_family=row["model_family"],
                    seed=int(row["seed"]),
                    degenerate=bool(int(row["degenerate"])),
                    annotations=[a for a in row["annotations"].split(";") if a],
                    error=row["error"],
                )
            )
    return records


def curve_rows(sample_id: str, curve: PerturbationCurve) -> list[tuple]:
    return [
        (sample_id, curve.direction, float(f), float(p))
        for f, p in zip(curve.fractions, curve.probabilities)
    ]


def curves_to_csv(path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "direction", "fraction", "probability"])
        writer.writerows(rows)
