"""Aggregation of audit records: effect sizes, bootstrap CIs, grouped tables.

A *family* is one (model_family, explainer, fill) cell pooled across seeds.
All functions are pure and permutation-invariant in record order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .faithfulness import AuditRecord

METRIC_FIELDS = (
    "del_auc",
    "ins_auc",
    "stability",
    "iou",
    "spearman_defect",
    "topk_drop_5",
    "topk_drop_10",
    "topk_drop_20",
)

# Bootstrap intervals resample the fixed pool of per-sample measurements; they
# say nothing about variation across independently trained runs, which the
# seed-level table covers separately.
CI_CAVEAT = (
    "95% bootstrap intervals quantify resampling variability of the evaluated "
    "sample pool only; run-to-run training variability is reported separately "
    "at seed level."
)


class StatsError(RuntimeError):
    pass


def cohens_d(group_a, group_b) -> float:
    """Pooled-standard-deviation effect size (sample std, n-1)."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatsError(f"each group needs n >= 2, got {a.size} and {b.size}")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    pooled = np.sqrt(
        ((a.size - 1) * var_a + (b.size - 1) * var_b) / (a.size + b.size - 2)
    )
    if pooled == 0.0:
        raise StatsError("zero pooled standard deviation: d is undefined")
    return float((a.mean() - b.mean()) / pooled)


def bootstrap_ci(
    values, n_resamples: int = 2000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile interval of resampled means, deterministic per seed."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise StatsError(f"bootstrap needs n >= 2, got {arr.size}")
    if not 0.0 < level < 1.0:
        raise StatsError(f"level must be in (0,1), got {level}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(n_resamples, arr.size))
    means = arr[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(means, [alpha, 100.0 - alpha])
    return float(low), float(high)


# -- grouping -----------------------------------------------------------------


def family_key(rec: AuditRecord) -> tuple[str, str, str]:
    return (rec.model_family, rec.explainer, rec.fill)


def family_label(key: tuple[str, str, str]) -> str:
    return "/".join(key)


def group_by_family(records) -> dict[tuple[str, str, str], list[AuditRecord]]:
    groups: dict[tuple[str, str, str], list[AuditRecord]] = {}
    for rec in records:
        groups.setdefault(family_key(rec), []).append(rec)
    return groups


def per_class_table(records, metric: str = "del_auc") -> dict:
    """{true_class: {family_label: mean metric}}; absent cells stay absent."""
    table: dict[int, dict[str, list[float]]] = {}
    for rec in records:
        cell = table.setdefault(rec.true_class, {}).setdefault(
            family_label(family_key(rec)), []
        )
        cell.append(getattr(rec, metric))
    return {
        cls: {fam: float(np.mean(vals)) for fam, vals in fams.items()}
        for cls, fams in table.items()
    }


def commonly_correct_filter(records) -> set[str]:
    """Sample ids classified correctly by every family covering them.

    Requires every family to have been run on the same sample set.
    """
    coverage: dict[tuple[str, str, str], set[str]] = {}
    for rec in records:
        coverage.setdefault(family_key(rec), set()).add(rec.sample_id)
    sets = list(coverage.values())
    if not sets:
        return set()
    if any(s != sets[0] for s in sets[1:]):
        raise StatsError("families cover different sample sets")
    good = set(sets[0])
    for rec in records:
        if not rec.correct:
            good.discard(rec.sample_id)
    return good


def exclude_class(records, cls: int) -> list[AuditRecord]:
    return [rec for rec in records if rec.true_class != cls]


# -- summaries ----------------------------------------------------------------


@dataclass
class FamilySummary:
    family: tuple[str, str, str]
    n: int
    means: dict[str, float]
    stds: dict[str, float]
    per_class_del_auc: dict[int, float]
    del_auc_ci: tuple[float, float]

    @property
    def label(self) -> str:
        return family_label(self.family)


def _nanmean(v: np.ndarray) -> float:
    """Mean over finite entries; NaN marks metrics undefined for a sample
    (e.g. localization on defect-free classes) and must not poison the pool."""
    kept = v[~np.isnan(v)]
    return float(kept.mean()) if kept.size else float("nan")


def _nanstd(v: np.ndarray) -> float:
    kept = v[~np.isnan(v)]
    return float(kept.std(ddof=1)) if kept.size > 1 else 0.0


def summarize(
    records, n_resamples: int = 2000, seed: int = 0
) -> list[FamilySummary]:
    """One FamilySummary per (model_family, explainer, fill), sorted by label."""
    out = []
    for key, recs in sorted(group_by_family(records).items()):
        # canonical value order: summaries must not depend on record order
        values = {
            m: np.sort([getattr(r, m) for r in recs]) for m in METRIC_FIELDS
        }
        per_class: dict[int, list[float]] = {}
        for r in recs:
            per_class.setdefault(r.true_class, []).append(r.del_auc)
        for v in per_class.values():
            v.sort()
        ci = (
            bootstrap_ci(values["del_auc"], n_resamples=n_resamples, seed=seed)
            if len(recs) >= 2
            else (float(values["del_auc"][0]), float(values["del_auc"][0]))
        )
        out.append(
            FamilySummary(
                family=key,
                n=len(recs),
                means={m: _nanmean(v) for m, v in values.items()},
                stds={m: _nanstd(v) for m, v in values.items()},
                per_class_del_auc={
                    c: float(np.mean(v)) for c, v in sorted(per_class.items())
                },
                del_auc_ci=ci,
            )
        )
    return out


def summaries_to_csv(path, summaries: list[FamilySummary]) -> None:
    fields = ["family", "n"]
    for m in METRIC_FIELDS:
        fields += [f"{m}_mean", f"{m}_std"]
    fields += ["del_auc_ci_low", "del_auc_ci_high"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for s in summaries:
            row = [s.label, s.n]
            for m in METRIC_FIELDS:
                row += [repr(s.means[m]), repr(s.stds[m])]
            row += [repr(s.del_auc_ci[0]), repr(s.del_auc_ci[1])]
            writer.writerow(row)


def report_document(
    summaries: list[FamilySummary],
    per_class: dict,
    effect_sizes: dict[str, float] | None = None,
    extra: dict | None = None,
) -> dict:
    """Single JSON-serializable report with the caveat attached."""
    doc = {
        "ci_method": "percentile bootstrap of the mean",
        "ci_caveat": CI_CAVEAT,
        "families": [
            {
                "family": s.label,
                "n": s.n,
                "means": s.means,
                "stds": s.stds,
                "per_class_del_auc": {str(k): v for k, v in s.per_class_del_auc.items()},
                "del_auc_ci": list(s.del_auc_ci),
            }
            for s in summaries
        ],
        "per_class_del_auc": {
            str(cls): fams for cls, fams in sorted(per_class.items())
        },
    }
    if effect_sizes:
        doc["cohens_d"] = effect_sizes
    if extra:
        doc.update(extra)
    return doc


def write_report_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
