"""Release acceptance gate: one test per release criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v`` for one pass/fail line per
criterion.  The trained-model criteria share a single session-scoped CLI run
(generate -> train -> explain -> audit -> report) on the pinned config below;
everything else is self-contained.  The pipeline takes a few minutes on one
CPU — its own runtime budget is asserted inside the test that owns it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
import zlib

import numpy as np
import pytest
import yaml

from faudit import cli
from faudit import explainers as ex
from faudit import tensor as T
from faudit.explainers import Heatmap, RiseConfig, random_baseline, rise
from faudit.faithfulness import (
    FillOperator,
    compute_audit_record,
    curve_auc,
    default_fractions,
    deletion_curve,
    insertion_curve,
    records_from_jsonl,
    spearman,
)
from faudit.models import Predictor, build_model, load_model
from faudit.stats import bootstrap_ci, cohens_d
from faudit.synthwafer import (
    DatasetSpec,
    balanced_eval_subset,
    generate,
    load_dataset,
    split_of,
)
from oracles import (
    DefectCountModel,
    curve_bruteforce,
    gradcheck,
    planted_linear_scorer,
    rollout_naive,
    random_softmax_stack,
    spearman_naive,
)

# ======================================================================================
# criterion 1 -- every autodiff op and both reference models pass central
# finite-difference checks (h=1e-3, rel err < 1e-4) on >= 20 random instances,
# in under two minutes.
# ======================================================================================


def _param(rng, *shape, lo=-1.0, hi=1.0) -> T.Tensor:
    return T.tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, *shape, lo=0.5, hi=1.5) -> T.Tensor:
    mag = rng.uniform(lo, hi, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return T.tensor(mag * sign, requires_grad=True)


def _weighted(seed: int, out: T.Tensor) -> T.Tensor:
    """Scalarize with fixed random weights so index-shuffling bugs change the loss.

    The weights are rebuilt from ``seed`` on every call: finite differencing
    evaluates the loss closure repeatedly, so it must be a pure function of
    the parameters.
    """
    w = T.tensor(np.random.default_rng(seed).normal(size=out.data.shape))
    return T.sum_(T.mul(out, w))


def _op_cases(rng):
    """One (make_loss, params) instance per public differentiable op."""
    a = _param(rng, 3, 4)
    b = _param(rng, 3, 4)
    denom = _away_from_zero(rng, 3, 4)
    pos = _param(rng, 3, 4, lo=0.2, hi=2.0)
    wide = _param(rng, 3, 4, lo=-3.0, hi=3.0)
    flat = _param(rng, 2, 6)
    cube = _param(rng, 2, 3, 4)
    col = _param(rng, 3, 1)
    grid = _param(rng, 4, 5)
    m1 = _param(rng, 3, 4)
    m2 = _param(rng, 4, 2)
    img = _param(rng, 2, 2, 6, 6)
    ker = _param(rng, 3, 2, 3, 3)
    logits = _param(rng, 4, 5, lo=-2.0, hi=2.0)
    target = rng.integers(0, 5, 4)
    wseed = int(rng.integers(0, 2**31))
    return {
        "add": (lambda: _weighted(wseed, T.add(a, b)), [a, b]),
        "mul": (lambda: _weighted(wseed, T.mul(a, b)), [a, b]),
        "div": (lambda: _weighted(wseed, T.div(a, denom)), [a, denom]),
        "relu": (lambda: _weighted(wseed, T.relu(wide)), [wide]),
        "exp": (lambda: _weighted(wseed, T.exp(a)), [a]),
        "log": (lambda: _weighted(wseed, T.log(pos)), [pos]),
        "sigmoid": (lambda: _weighted(wseed, T.sigmoid(wide)), [wide]),
        "reshape": (lambda: _weighted(wseed, T.reshape(flat, (3, 4))), [flat]),
        "transpose": (lambda: _weighted(wseed, T.transpose(cube, (2, 0, 1))), [cube]),
        "broadcast_to": (lambda: _weighted(wseed, T.broadcast_to(col, (3, 4))), [col]),
        "getitem": (lambda: _weighted(wseed, T.getitem(grid, (slice(1, 3), slice(None, None, 2)))), [grid]),
        "concat": (lambda: _weighted(wseed, T.concat([a, b], axis=1)), [a, b]),
        "sum_": (lambda: _weighted(wseed, T.sum_(a, axis=1)), [a]),
        "mean": (lambda: _weighted(wseed, T.mean(a, axis=0)), [a]),
        "max_": (lambda: _weighted(wseed, T.max_(grid, axis=1)), [grid]),
        "matmul": (lambda: _weighted(wseed, T.matmul(m1, m2)), [m1, m2]),
        "conv2d": (lambda: _weighted(wseed, T.conv2d(img, ker, stride=1, padding=1)), [img, ker]),
        "pool2d_max": (lambda: _weighted(wseed, T.pool2d(img, kind="max", size=2)), [img]),
        "pool2d_avg": (lambda: _weighted(wseed, T.pool2d(img, kind="avg", size=2)), [img]),
        "softmax": (lambda: _weighted(wseed, T.softmax(logits, axis=-1)), [logits]),
        "cross_entropy": (lambda: T.cross_entropy(logits, target), [logits]),
    }


def test_every_op_and_both_models_match_finite_differences():
    start = time.monotonic()
    instances = 20
    for i in range(instances):
        rng = np.random.default_rng(1000 + i)
        for name, (make_loss, params) in _op_cases(rng).items():
            try:
                gradcheck(make_loss, params, rng, h=1e-3, tol=1e-4)
            except AssertionError as err:  # pragma: no cover - diagnostic only
                raise AssertionError(f"op {name}, instance {i}: {err}") from err

    for family in ("cnn_cbam", "vit"):
        for i in range(instances):
            rng = np.random.default_rng(5000 + i)
            model = build_model({"family": family, "image_size": 32, "seed": 6000 + i})
            x = rng.uniform(0.0, 1.0, (2, 1, 32, 32))
            y = rng.integers(0, 5, 2)
            make_loss = lambda: T.cross_entropy(  # noqa: E731
                model.forward(x, record_attn=False).logits, y
            )
            gradcheck(make_loss, list(model.params.values()), rng,
                      coords_per_param=1, h=1e-3, tol=1e-4)

    assert time.monotonic() - start < 120.0


# ======================================================================================
# criterion 2 -- 100 random softmax attention stacks (depth <= 6, tokens <= 16):
# every cumulative rollout matrix is row-stochastic to 1e-6 and the CLS row of
# the final matrix matches a naive matrix-product oracle to 1e-12.
# ======================================================================================


def test_rollout_rows_stochastic_and_cls_row_matches_naive_product():
    rng = np.random.default_rng(42)
    for _ in range(100):
        layers = int(rng.integers(1, 7))
        heads = int(rng.integers(1, 5))
        t = int(rng.integers(2, 17))
        attn = random_softmax_stack(rng, layers, heads, t)
        mats = ex.rollout_matrices(attn)
        assert mats.shape == (layers, t, t)
        sums = mats.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-6
        naive = rollout_naive(attn)
        assert np.abs(mats[-1][0] - naive[0]).max() < 1e-12


# ======================================================================================
# criterion 3 -- a model whose confidence literally counts surviving defect
# pixels: deletion and insertion curves match pixel-by-pixel brute-force
# simulation to 1e-9 under both fill operators.
# ======================================================================================


def test_counting_model_curves_match_bruteforce_for_both_fills():
    model = DefectCountModel()
    rng = np.random.default_rng(7)
    fractions = default_fractions(21)
    for trial in range(10):
        image = rng.uniform(0.0, 0.9, (1, 8, 8))
        defects = rng.choice(64, size=int(rng.integers(4, 16)), replace=False)
        image.reshape(1, -1)[:, defects] = 1.0
        heat = rng.random((8, 8))
        for kind in ("zero_fill", "blur_fill"):
            fill = FillOperator(kind)
            reference = fill.reference(image)
            for make, direction in ((deletion_curve, "deletion"), (insertion_curve, "insertion")):
                got = make(model, image, heat, fill, fractions)
                want = curve_bruteforce(model, image, heat, reference, fractions, direction)
                assert np.abs(got.probabilities - want).max() <= 1e-9, (
                    f"trial {trial}, {kind}, {direction}"
                )


# ======================================================================================
# criterion 4 -- cubing every heatmap (a strictly monotone transform) changes
# no audit-record metric, bit for bit: 50 samples x all five explainers.
# ======================================================================================


def _records_bit_equal(a, b) -> list[str]:
    diffs = []
    for field, av in dataclasses.asdict(a).items():
        bv = getattr(b, field)
        if isinstance(av, float) and isinstance(bv, float):
            same = (math.isnan(av) and math.isnan(bv)) or av == bv
        else:
            same = av == bv
        if not same:
            diffs.append(f"{field}: {av!r} != {bv!r}")
    return diffs


def test_cubed_heatmaps_leave_audit_records_bit_identical():
    spec = DatasetSpec(image_size=32, counts={"train": 1, "val": 1, "test": 10}, seed=9)
    samples = split_of(generate(spec), "test")
    assert len(samples) == 50

    cnn = build_model({"family": "cnn_cbam", "image_size": 32, "seed": 70})
    vit = build_model({"family": "vit", "image_size": 32, "seed": 71})
    pred_cnn, pred_vit = Predictor(cnn), Predictor(vit)
    rise_cfg = RiseConfig(n_masks=100, grid=4, seed=11)
    rise_stab = RiseConfig(n_masks=50, grid=4, seed=12)

    def explainer_table(sid: str):
        seed = zlib.crc32(sid.encode()) & 0x7FFFFFFF
        return {
            "grad_cam": (pred_cnn, lambda img: ex.grad_cam(cnn, img, sample_id=sid),
                         lambda img: ex.grad_cam(cnn, img, sample_id=sid)),
            "attention_rollout": (pred_vit, lambda img: ex.attention_rollout(vit, img, sample_id=sid),
                                  lambda img: ex.attention_rollout(vit, img, sample_id=sid)),
            "cls_attention": (pred_vit, lambda img: ex.cls_attention_last(vit, img, sample_id=sid),
                              lambda img: ex.cls_attention_last(vit, img, sample_id=sid)),
            "rise": (pred_cnn, lambda img: rise(pred_cnn, img, cfg=rise_cfg, sample_id=sid),
                     lambda img: rise(pred_cnn, img, cfg=rise_stab, sample_id=sid)),
            "random": (pred_cnn, lambda img: random_baseline(img, seed=seed, sample_id=sid),
                       lambda img: random_baseline(img, seed=seed, sample_id=sid)),
        }

    fill = FillOperator("zero_fill")
    fractions = default_fractions(11)
    for s in samples:
        for name, (predict, make, stab_fn) in explainer_table(s.sample_id).items():
            hm = make(s.image)
            cubed = dataclasses.replace(hm, values=hm.values**3)
            records = []
            for artifact in (hm, cubed):
                records.append(compute_audit_record(
                    predict,
                    lambda img, art=artifact: art,
                    s.image,
                    s.mask,
                    s.label_index,
                    s.sample_id,
                    fill,
                    stability_k=2,
                    stability_explain_fn=stab_fn,
                    fractions=fractions,
                ))
            diffs = _records_bit_equal(records[0], records[1])
            assert not diffs, f"{s.sample_id}/{name}: {diffs}"


# ======================================================================================
# criterion 5 -- randomized-mask probing recovers a planted linear weight
# field: Spearman >= 0.9 at 4000 masks, 8x8 grid, keep probability 0.5, on
# 16x16 inputs, for three seeds.
# ======================================================================================


def test_randomized_masking_recovers_planted_linear_weights():
    for seed in (0, 1, 2):
        w, predict = planted_linear_scorer(seed=seed)
        hm = rise(predict, np.ones((1, 16, 16)), target_class=0,
                  cfg=RiseConfig(n_masks=4000, grid=8, p=0.5, seed=100 + seed))
        rho = spearman_naive(hm.values.reshape(-1), w.reshape(-1))
        assert rho >= 0.9, f"seed {seed}: rho={rho:.4f}"


# ======================================================================================
# shared end-to-end pipeline for the trained-model criteria
# ======================================================================================

PIPELINE_CONFIG = {
    "dataset": {
        "image_size": 32,
        "counts": {"train": 150, "val": 30, "test": 60},
        "noise_rate": 0.05,
        "seed": 0,
    },
    "models": [
        {"family": "cnn_cbam", "seeds": [0, 1, 2], "epochs": 30, "lr": 2e-3},
        {"family": "vit", "seeds": [0, 1, 2], "epochs": 30, "lr": 3e-4,
         "weight_decay": 0.01, "clip_norm": 1.0},
    ],
    "explainers": ["grad_cam", "attention_rollout", "cls_attention", "rise", "random"],
    "fills": ["zero_fill"],
    "audit": {
        "n_per_class": 10,
        "curve_points": 21,
        "stability_k": 5,
        "stability_rise_masks": 250,
        "rise": {"n_masks": 1000, "grid": 8, "p": 0.5, "seed": 0},
    },
    "report": {"n_resamples": 2000},
}


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_pipeline")
    raw = dict(PIPELINE_CONFIG, out_dir=str(root / "out"))
    cfg_path = root / "audit.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))

    start = time.monotonic()
    for stage, jobs in (("generate", 1), ("train", 1), ("explain", 4),
                        ("audit", 4), ("report", 1)):
        rc = cli.main([stage, "--config", str(cfg_path), "--jobs", str(jobs)])
        assert rc == 0, f"stage {stage} exited {rc}"
    elapsed = time.monotonic() - start

    cfg = cli.load_config(cfg_path)
    return {
        "elapsed": elapsed,
        "generate": cli.stage_dir(cfg, "generate"),
        "train": cli.stage_dir(cfg, "train"),
        "audit": cli.stage_dir(cfg, "audit"),
        "report": cli.stage_dir(cfg, "report"),
    }


def _pipeline_records(pipeline):
    records = records_from_jsonl(pipeline["audit"] / "records.jsonl")
    good = [r for r in records if not r.error]
    assert len(good) == len(records), "audit stage reported error rows"
    return good


def _mean_del_auc(records, family, explainer, seed=None):
    vals = [r.del_auc for r in records
            if r.model_family == family and r.explainer == explainer
            and r.fill == "zero_fill" and (seed is None or r.seed == seed)]
    assert vals
    return float(np.mean(vals)), vals


# ======================================================================================
# criterion 6 -- random-baseline sanity on a trained classifier: mean deletion
# and insertion AUCs agree to within 0.05 over 200 class-balanced samples.
# ======================================================================================


def test_random_baseline_deletion_insertion_gap_small_on_trained_cnn(pipeline):
    samples, _ = load_dataset(pipeline["generate"])
    subset = balanced_eval_subset(split_of(samples, "test"), n_per_class=40, seed=123)
    assert len(subset) == 200
    predict = Predictor(load_model(pipeline["train"] / "cnn_cbam-s0.ckpt"))
    fill = FillOperator("zero_fill")
    del_aucs, ins_aucs = [], []
    for s in subset:
        hm = random_baseline(s.image, seed=zlib.crc32(s.sample_id.encode()) & 0x7FFFFFFF)
        del_aucs.append(curve_auc(deletion_curve(predict, s.image, hm, fill)))
        ins_aucs.append(curve_auc(insertion_curve(predict, s.image, hm, fill)))
    gap = abs(float(np.mean(del_aucs)) - float(np.mean(ins_aucs)))
    assert gap < 0.05, f"random-baseline del/ins gap {gap:.4f}"


# ======================================================================================
# criterion 7 -- both model families train to >= 0.90 balanced accuracy (three
# seeds each) and the native-method deletion AUCs separate: rollout-on-ViT
# below Grad-CAM-on-CNN by > 0.05 with pooled |d| > 0.5, all inside the
# runtime budget.
# ======================================================================================


def test_trained_families_separate_native_deletion_aucs(pipeline):
    assert pipeline["elapsed"] < 1500.0, f"pipeline took {pipeline['elapsed']:.0f}s"

    summary = json.loads((pipeline["train"] / "train_summary.json").read_text())
    assert len(summary["models"]) == 6
    for entry in summary["models"]:
        acc = entry["test_balanced_acc"]
        assert acc >= 0.90, f"{entry['family']} seed {entry['seed']}: {acc:.3f}"

    records = _pipeline_records(pipeline)
    vit_mean, vit_vals = _mean_del_auc(records, "vit", "attention_rollout")
    cnn_mean, cnn_vals = _mean_del_auc(records, "cnn_cbam", "grad_cam")
    assert vit_mean + 0.05 < cnn_mean, (
        f"rollout-on-ViT {vit_mean:.3f} vs Grad-CAM-on-CNN {cnn_mean:.3f}"
    )
    d = cohens_d(vit_vals, cnn_vals)
    assert abs(d) > 0.5, f"pooled effect size {d:.3f}"


# ======================================================================================
# criterion 8 -- a shared model-agnostic probe compresses the family gap: the
# between-family spread of randomized-masking deletion AUCs is smaller than
# the spread of the families' native methods.
# ======================================================================================


def test_shared_probe_compresses_family_gap_versus_native_methods(pipeline):
    records = _pipeline_records(pipeline)
    rise_cnn, _ = _mean_del_auc(records, "cnn_cbam", "rise")
    rise_vit, _ = _mean_del_auc(records, "vit", "rise")
    gc_cnn, _ = _mean_del_auc(records, "cnn_cbam", "grad_cam")
    roll_vit, _ = _mean_del_auc(records, "vit", "attention_rollout")
    probe_spread = abs(rise_cnn - rise_vit)
    native_spread = abs(gc_cnn - roll_vit)
    assert probe_spread < native_spread, (
        f"probe spread {probe_spread:.3f} vs native spread {native_spread:.3f}"
    )


# ======================================================================================
# criterion 9 -- the statistics layer reproduces analytic and simulated
# ground truth: an exact effect size, degenerate and calibrated bootstrap
# intervals, and exact rank-correlation endpoints.
# ======================================================================================


def test_statistics_reproduce_analytic_and_simulated_values():
    assert abs(cohens_d([0.0, 2.0], [2.0, 4.0]) - (-math.sqrt(2.0))) < 1e-12

    assert bootstrap_ci([5.0, 5.0, 5.0, 5.0]) == (5.0, 5.0)

    hits = 0
    trials = 1000
    rng = np.random.default_rng(5)
    for t in range(trials):
        vals = rng.normal(0.0, 1.0, 25)
        low, high = bootstrap_ci(vals, n_resamples=2000, seed=t)
        hits += low <= 0.0 <= high
    assert 0.92 <= hits / trials <= 0.97, f"coverage {hits / trials:.3f}"

    x = np.arange(20, dtype=np.float64)
    assert spearman(x, x**3) == pytest.approx(1.0, abs=1e-12)
    assert spearman(x, -x) == pytest.approx(-1.0, abs=1e-12)


# ======================================================================================
# criterion 10 -- the extended configurations all run through the CLI and land
# in the report: Grad-CAM on the ViT, last-layer CLS attention, the
# commonly-correct filter, and the top-k drop table; and per seed, CLS
# attention's deletion AUC sits between rollout's and Grad-CAM-on-ViT's in at
# least two of three seeds.
# ======================================================================================


def test_extended_configurations_present_and_ordered(pipeline):
    report = pipeline["report"]
    with open(report / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    combos = {tuple(r["family"].split("/")[:2]) for r in rows}
    assert ("vit", "grad_cam") in combos
    assert ("vit", "cls_attention") in combos

    with open(report / "topk.csv", newline="") as fh:
        topk_rows = list(csv.DictReader(fh))
    assert topk_rows and {
        "topk_drop_5_mean",
        "topk_drop_10_mean",
        "topk_drop_20_mean",
    } <= set(topk_rows[0])

    assert (report / "commonly_correct.csv").exists()
    doc = json.loads((report / "report.json").read_text())
    assert "commonly_correct" in doc

    records = _pipeline_records(pipeline)
    between = 0
    for seed in (0, 1, 2):
        roll, _ = _mean_del_auc(records, "vit", "attention_rollout", seed)
        gc, _ = _mean_del_auc(records, "vit", "grad_cam", seed)
        cls_attn, _ = _mean_del_auc(records, "vit", "cls_attention", seed)
        between += min(roll, gc) <= cls_attn <= max(roll, gc)
    assert between >= 2, f"CLS attention between native methods in {between}/3 seeds"
