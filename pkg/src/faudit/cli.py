"""Pipeline CLI: generate -> train -> explain -> audit -> report.

Each stage writes into a content-addressed directory
``<out_dir>/<stage>-<hash12>`` where the hash covers exactly the resolved
config sections the stage (and its upstream chain) depends on, so stale
artifacts from edited configs can never be mixed into a run.  Every stage
directory carries the full resolved configuration as ``config.yaml``.

Exit codes: 0 success, 2 config/precondition error, 3 completed with
per-sample failures (error rows are always recorded, never dropped).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .blackbox import ProtocolError, spawn_adapter
from .explainers import (
    ATTENTION_ROLLOUT,
    CLS_ATTENTION,
    EXPLAINER_NAMES,
    GRAD_CAM,
    RANDOM,
    RISE,
    RiseConfig,
    attention_rollout,
    cls_attention_last,
    grad_cam,
    load_heatmap,
    random_baseline,
    rise,
    save_heatmap,
)
from .faithfulness import (
    AuditRecord,
    BLUR_FILL,
    FillOperator,
    ZERO_FILL,
    compute_audit_record,
    curve_rows,
    default_fractions,
    records_from_jsonl,
    records_to_csv,
    records_to_jsonl,
)
from .models import FAMILIES, Predictor, build_model, load_model
from .stats import (
    CI_CAVEAT,
    METRIC_FIELDS,
    StatsError,
    cohens_d,
    commonly_correct_filter,
    family_label,
    group_by_family,
    per_class_table,
    report_document,
    summaries_to_csv,
    summarize,
    write_report_json,
)
from .svg import write_line_chart
from .synthwafer import (
    SPLITS,
    DatasetSpec,
    balanced_eval_subset,
    generate,
    load_dataset,
    save_dataset,
    split_of,
    stack_images,
)
from .training import TrainConfig, evaluate, macro_f1, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

_VIT_ONLY = (ATTENTION_ROLLOUT, CLS_ATTENTION)
_FORWARD_ONLY = (RISE, RANDOM)
_FILL_CHOICES = (ZERO_FILL, BLUR_FILL)
_TOP_KEYS = ("out_dir", "dataset", "models", "explainers", "fills", "audit", "report")
_STAGE_KEYS = {
    "generate": ("dataset",),
    "train": ("dataset", "models"),
    "explain": ("dataset", "models", "explainers", "audit"),
    "audit": ("dataset", "models", "explainers", "fills", "audit"),
    "report": ("dataset", "models", "explainers", "fills", "audit", "report"),
}
_TRAIN_DEFAULTS = {
    "cnn_cbam": {"lr": 2e-3, "weight_decay": 0.0, "clip_norm": None},
    "vit": {"lr": 3e-4, "weight_decay": 0.01, "clip_norm": 1.0},
}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


# -- config resolution ---------------------------------------------------------


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping, got {type(value).__name__}")
    return dict(value)


def _reject_unknown(leftover: dict, where: str) -> None:
    if leftover:
        raise ConfigError(f"unknown {where} keys: {sorted(leftover)}")


def _int(value, where: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where} must be >= {minimum}, got {value}")
    return value


def _float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _resolve_model_entry(entry, index: int) -> dict:
    if not isinstance(entry, dict):
        raise ConfigError(f"models[{index}] must be a mapping")
    entry = dict(entry)
    kind = entry.pop("kind", None)  # present when re-resolving a stored config
    if kind not in (None, "refmodel", "adapter"):
        raise ConfigError(f"models[{index}].kind must be refmodel or adapter")
    if "adapter" in entry:
        if kind == "refmodel":
            raise ConfigError(f"models[{index}]: refmodel entries cannot set adapter")
        command = entry.pop("adapter")
        name = entry.pop("name", None)
        _reject_unknown(entry, f"models[{index}]")
        if not isinstance(command, str) or not command.strip():
            raise ConfigError(f"models[{index}].adapter must be a command string")
        if not isinstance(name, str) or not name.replace("-", "").replace("_", "").isalnum():
            raise ConfigError(
                f"models[{index}].name must be a filesystem-safe label, got {name!r}"
            )
        return {"kind": "adapter", "name": name, "command": command}
    if kind == "adapter":
        raise ConfigError(f"models[{index}]: adapter entries need an adapter command")
    family = entry.pop("family", None)
    if family not in FAMILIES:
        raise ConfigError(
            f"models[{index}].family must be one of {sorted(FAMILIES)}, got {family!r}"
        )
    seeds = entry.pop("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError(f"models[{index}].seeds must be a non-empty list")
    seeds = [_int(s, f"models[{index}].seeds[*]") for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"models[{index}].seeds must be distinct, got {seeds}")
    defaults = _TRAIN_DEFAULTS[family]
    resolved = {
        "kind": "refmodel",
        "family": family,
        "seeds": seeds,
        "epochs": _int(entry.pop("epochs", 30), f"models[{index}].epochs", 1),
        "batch_size": _int(entry.pop("batch_size", 32), f"models[{index}].batch_size", 1),
        "lr": _float(entry.pop("lr", defaults["lr"]), f"models[{index}].lr"),
        "weight_decay": _float(
            entry.pop("weight_decay", defaults["weight_decay"]),
            f"models[{index}].weight_decay",
        ),
        "patience": _int(entry.pop("patience", 6), f"models[{index}].patience", 1),
        "aug_d4": bool(entry.pop("aug_d4", False)),
        "aug_dropout": _float(entry.pop("aug_dropout", 0.0), f"models[{index}].aug_dropout"),
        "aug_noise": _float(entry.pop("aug_noise", 0.0), f"models[{index}].aug_noise"),
    }
    clip = entry.pop("clip_norm", defaults["clip_norm"])
    resolved["clip_norm"] = None if clip is None else _float(
        clip, f"models[{index}].clip_norm"
    )
    _reject_unknown(entry, f"models[{index}]")
    return resolved


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    """Fill every default explicitly and validate; the result is what gets
    hashed, so two configs meaning the same run collide on purpose."""
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a mapping")
    _reject_unknown({k: v for k, v in raw.items() if k not in _TOP_KEYS}, "config")

    d = _section(raw, "dataset")
    counts_raw = d.pop("counts", None) or {"train": 40, "val": 10, "test": 10}
    if not isinstance(counts_raw, dict) or set(counts_raw) - set(SPLITS):
        raise ConfigError(f"dataset.counts keys must be from {SPLITS}")
    counts = {
        split: _int(counts_raw.get(split, 10), f"dataset.counts.{split}", 1)
        for split in SPLITS
    }
    dataset = {
        "image_size": _int(d.pop("image_size", 32), "dataset.image_size", 16),
        "counts": counts,
        "noise_rate": _float(d.pop("noise_rate", 0.05), "dataset.noise_rate"),
        "dead_rate": _float(d.pop("dead_rate", 0.0), "dataset.dead_rate"),
        "seed": _int(d.pop("seed", 0), "dataset.seed"),
    }
    _reject_unknown(d, "dataset")

    if "models" in raw:
        models_raw = raw["models"]
    else:
        models_raw = [{"family": "cnn_cbam"}, {"family": "vit"}]
    if not isinstance(models_raw, list) or not models_raw:
        raise ConfigError("models must be a non-empty list")
    models = [_resolve_model_entry(e, i) for i, e in enumerate(models_raw)]
    if seed_override is not None:
        for entry in models:
            if entry["kind"] == "refmodel":
                entry["seeds"] = [seed_override]

    explainers = raw["explainers"] if "explainers" in raw else list(EXPLAINER_NAMES)
    if not isinstance(explainers, list) or not explainers:
        raise ConfigError("explainers must be a non-empty list")
    for name in explainers:
        if name not in EXPLAINER_NAMES:
            raise ConfigError(
                f"unknown explainer {name!r}; choices: {sorted(EXPLAINER_NAMES)}"
            )
    if len(set(explainers)) != len(explainers):
        raise ConfigError("explainers must be distinct")

    fills = raw["fills"] if "fills" in raw else list(_FILL_CHOICES)
    if not isinstance(fills, list) or not fills:
        raise ConfigError("fills must be a non-empty list")
    for kind in fills:
        if kind not in _FILL_CHOICES:
            raise ConfigError(f"unknown fill {kind!r}; choices: {_FILL_CHOICES}")
    if len(set(fills)) != len(fills):
        raise ConfigError("fills must be distinct")

    a = _section(raw, "audit")
    rise_raw = a.pop("rise", None) or {}
    if not isinstance(rise_raw, dict):
        raise ConfigError("audit.rise must be a mapping")
    rise_raw = dict(rise_raw)
    rise_cfg = {
        "n_masks": _int(rise_raw.pop("n_masks", 1000), "audit.rise.n_masks", 1),
        "grid": _int(rise_raw.pop("grid", 8), "audit.rise.grid", 1),
        "p": _float(rise_raw.pop("p", 0.5), "audit.rise.p"),
        "seed": _int(rise_raw.pop("seed", 0), "audit.rise.seed"),
        "offsets": bool(rise_raw.pop("offsets", True)),
    }
    _reject_unknown(rise_raw, "audit.rise")
    if not 0.0 < rise_cfg["p"] < 1.0:
        raise ConfigError(f"audit.rise.p must be in (0,1), got {rise_cfg['p']}")
    split = a.pop("split", "test")
    if split not in SPLITS:
        raise ConfigError(f"audit.split must be one of {SPLITS}, got {split!r}")
    audit = {
        "split": split,
        "n_per_class": _int(a.pop("n_per_class", 0), "audit.n_per_class", 0),
        "subset_seed": _int(a.pop("subset_seed", 0), "audit.subset_seed"),
        "curve_points": _int(a.pop("curve_points", 21), "audit.curve_points", 2),
        "stability_k": _int(a.pop("stability_k", 5), "audit.stability_k", 1),
        "stability_seed": _int(a.pop("stability_seed", 0), "audit.stability_seed"),
        "stability_rise_masks": _int(
            a.pop("stability_rise_masks", 300), "audit.stability_rise_masks", 1
        ),
        "blur_sigma": _float(a.pop("blur_sigma", 3.0), "audit.blur_sigma"),
        "rise": rise_cfg,
    }
    if audit["blur_sigma"] <= 0:
        raise ConfigError(f"audit.blur_sigma must be > 0, got {audit['blur_sigma']}")
    _reject_unknown(a, "audit")

    rep = _section(raw, "report")
    report = {
        "n_resamples": _int(rep.pop("n_resamples", 2000), "report.n_resamples", 100),
        "bootstrap_seed": _int(rep.pop("bootstrap_seed", 0), "report.bootstrap_seed"),
    }
    _reject_unknown(rep, "report")

    out_dir = raw.get("out_dir", "runs")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError(f"out_dir must be a non-empty string, got {out_dir!r}")

    return {
        "out_dir": out_dir,
        "dataset": dataset,
        "models": models,
        "explainers": list(explainers),
        "fills": list(fills),
        "audit": audit,
        "report": report,
    }


def load_config(path, seed_override: int | None = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return resolve_config(raw if raw is not None else {}, seed_override)


# -- content-addressed stage directories --------------------------------------------


def _hash12(obj) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def stage_dir(cfg: dict, stage: str) -> Path:
    subset = {key: cfg[key] for key in _STAGE_KEYS[stage]}
    return Path(cfg["out_dir"]) / f"{stage}-{_hash12(subset)}"


def _write_stage_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(
        yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
    )


# -- shared stage plumbing ------------------------------------------------------


def _load_samples(cfg: dict):
    gen_dir = stage_dir(cfg, "generate")
    if not (gen_dir / "manifest.json").exists():
        raise PipelineError(
            f"missing dataset artifacts at {gen_dir}; run `faudit generate` first"
        )
    samples, _ = load_dataset(gen_dir)
    return samples


def _eval_subset(cfg: dict, samples):
    pool = split_of(samples, cfg["audit"]["split"])
    if not pool:
        raise PipelineError(f"no samples in split {cfg['audit']['split']!r}")
    n = cfg["audit"]["n_per_class"]
    if n:
        pool = balanced_eval_subset(pool, n, cfg["audit"]["subset_seed"])
    return pool


def _model_labels(cfg: dict) -> list[tuple[str, int, dict]]:
    """Deterministic (label, seed, entry) rows in config order."""
    rows = []
    for entry in cfg["models"]:
        if entry["kind"] == "adapter":
            rows.append((f"adapter-{entry['name']}", -1, entry))
        else:
            rows.extend((entry["family"], seed, entry) for seed in entry["seeds"])
    return rows


def _checkpoint_path(cfg: dict, family: str, seed: int) -> Path:
    return stage_dir(cfg, "train") / f"{family}-s{seed}.ckpt"


def _applicable_explainers(cfg: dict, entry: dict) -> tuple[list[str], list[str]]:
    """(usable, skipped) explainer names for one model entry."""
    names = cfg["explainers"]
    if entry["kind"] == "adapter":
        usable = [n for n in names if n in _FORWARD_ONLY]
    elif entry["family"] == "vit":
        usable = list(names)
    else:
        usable = [n for n in names if n not in _VIT_ONLY]
    return usable, [n for n in names if n not in usable]


def _random_seed_for(sample_id: str) -> int:
    # stable across processes, unlike hash()
    return zlib.crc32(sample_id.encode()) & 0x7FFFFFFF


class _ModelContext:
    """One audited model: a label, a predict callable, and explainer closures."""

    def __init__(self, cfg: dict, label: str, seed: int, entry: dict):
        self.label = label
        self.seed = seed
        self.entry = entry
        self._handle = None
        if entry["kind"] == "adapter":
            try:
                self._handle = spawn_adapter(entry["command"])
            except ProtocolError as exc:
                raise PipelineError(f"adapter {entry['name']!r}: {exc}") from exc
            self.model = None
            self.predict = self._handle
        else:
            path = _checkpoint_path(cfg, label, seed)
            if not path.exists():
                raise PipelineError(
                    f"missing checkpoint {path}; run `faudit train` first"
                )
            self.model = load_model(path)
            self.predict = Predictor(self.model)
        rc = cfg["audit"]["rise"]
        self._rise_cfg = RiseConfig(**rc)
        self._rise_stab_cfg = RiseConfig(
            n_masks=cfg["audit"]["stability_rise_masks"],
            grid=rc["grid"], p=rc["p"], seed=rc["seed"], offsets=rc["offsets"],
        )

    def explain_fn(self, name: str, sample_id: str, stability: bool = False):
        """Closure image -> Heatmap for one explainer on one sample."""
        if name == GRAD_CAM:
            return lambda img: grad_cam(self.model, img, sample_id=sample_id)
        if name == ATTENTION_ROLLOUT:
            return lambda img: attention_rollout(self.model, img, sample_id=sample_id)
        if name == CLS_ATTENTION:
            return lambda img: cls_attention_last(self.model, img, sample_id=sample_id)
        if name == RISE:
            cfg = self._rise_stab_cfg if stability else self._rise_cfg
            return lambda img: rise(self.predict, img, cfg=cfg, sample_id=sample_id)
        if name == RANDOM:
            seed = _random_seed_for(sample_id)
            return lambda img: random_baseline(img, seed=seed, sample_id=sample_id)
        raise PipelineError(f"no explainer closure for {name!r}")

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()


# -- stages --------------------------------------------------------------------


def cmd_generate(cfg: dict, jobs: int = 1) -> int:
    out = stage_dir(cfg, "generate")
    ds = cfg["dataset"]
    spec = DatasetSpec(
        image_size=ds["image_size"],
        counts=dict(ds["counts"]),
        noise_rate=ds["noise_rate"],
        dead_rate=ds["dead_rate"],
        seed=ds["seed"],
    )
    samples = generate(spec)
    _write_stage_config(out, cfg)
    save_dataset(out, samples, spec)
    print(f"generate: {len(samples)} samples -> {out}")
    return EXIT_OK


def cmd_train(cfg: dict, jobs: int = 1) -> int:
    samples = _load_samples(cfg)
    out = stage_dir(cfg, "train")
    _write_stage_config(out, cfg)
    train_x, train_y = stack_images(split_of(samples, "train"))
    val_x, val_y = stack_images(split_of(samples, "val"))
    test_x, test_y = stack_images(split_of(samples, "test"))
    summary = []
    for entry in cfg["models"]:
        if entry["kind"] == "adapter":
            print(f"train: skipping adapter {entry['name']!r} (externally owned)")
            continue
        for seed in entry["seeds"]:
            model = build_model(
                {
                    "family": entry["family"],
                    "image_size": cfg["dataset"]["image_size"],
                    "seed": seed,
                }
            )
            result = train(
                model,
                train_x,
                train_y,
                val_x,
                val_y,
                TrainConfig(
                    epochs=entry["epochs"],
                    batch_size=entry["batch_size"],
                    lr=entry["lr"],
                    weight_decay=entry["weight_decay"],
                    clip_norm=entry["clip_norm"],
                    patience=entry["patience"],
                    seed=seed,
                    aug_d4=entry["aug_d4"],
                    aug_dropout=entry["aug_dropout"],
                    aug_noise=entry["aug_noise"],
                ),
            )
            bal, acc = evaluate(model, test_x, test_y)
            preds = Predictor(model).predict_batch(test_x).argmax(axis=1)
            f1 = macro_f1(test_y, preds)
            path = _checkpoint_path(cfg, entry["family"], seed)
            model.save(path)
            summary.append(
                {
                    "family": entry["family"],
                    "seed": seed,
                    "best_val_balanced_acc": result.best_val_balanced_acc,
                    "best_epoch": result.best_epoch,
                    "stopped_epoch": result.stopped_epoch,
                    "test_balanced_acc": bal,
                    "test_acc": acc,
                    "test_macro_f1": f1,
                    "checkpoint": path.name,
                }
            )
            print(
                f"train: {entry['family']} seed {seed}: "
                f"val {result.best_val_balanced_acc:.3f} @ epoch "
                f"{result.best_epoch}, test balanced acc {bal:.3f}"
            )
    (out / "train_summary.json").write_text(
        json.dumps({"models": summary}, indent=2, sort_keys=True)
    )
    print(f"train: {len(summary)} checkpoints -> {out}")
    return EXIT_OK


def cmd_explain(cfg: dict, jobs: int = 1) -> int:
    samples = _load_samples(cfg)
    subset = _eval_subset(cfg, samples)
    out = stage_dir(cfg, "explain")
    _write_stage_config(out, cfg)
    cells: list[dict] = []
    skipped: list[dict] = []
    failures = 0
    for label, seed, entry in _model_labels(cfg):
        ctx = _ModelContext(cfg, label, seed, entry)
        try:
            usable, inapplicable = _applicable_explainers(cfg, entry)
            for name in inapplicable:
                skipped.append({"model": label, "seed": seed, "explainer": name})
            work = [(name, s) for name in usable for s in subset]

            def one(item):
                name, s = item
                base = out / f"{label}-s{seed}" / name / s.sample_id
                base.parent.mkdir(parents=True, exist_ok=True)
                hm = ctx.explain_fn(name, s.sample_id)(s.image)
                save_heatmap(base, hm)
                return {
                    "model": label,
                    "seed": seed,
                    "explainer": name,
                    "sample_id": s.sample_id,
                    "degenerate": hm.degenerate,
                }

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    futures = [pool.submit(one, item) for item in work]
                    results = []
                    for item, fut in zip(work, futures):
                        try:
                            results.append(fut.result())
                        except Exception as exc:
                            failures += 1
                            results.append(_explain_error(label, seed, item, exc))
            else:
                results = []
                for item in work:
                    try:
                        results.append(one(item))
                    except Exception as exc:
                        failures += 1
                        results.append(_explain_error(label, seed, item, exc))
            cells.extend(results)
        finally:
            ctx.close()
    cells.sort(key=lambda c: (c["model"], c["seed"], c["explainer"], c["sample_id"]))
    skipped.sort(key=lambda c: (c["model"], c["seed"], c["explainer"]))
    manifest = {
        "n_samples": len(subset),
        "cells": cells,
        "skipped_incompatible": skipped,
        "failures": failures,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(
        f"explain: {len(cells)} heatmaps ({failures} failed, "
        f"{len(skipped)} incompatible combos skipped) -> {out}"
    )
    return EXIT_PARTIAL if failures else EXIT_OK


def _explain_error(label: str, seed: int, item, exc: Exception) -> dict:
    name, s = item
    return {
        "model": label,
        "seed": seed,
        "explainer": name,
        "sample_id": s.sample_id,
        "error": f"{type(exc).__name__}: {exc}",
    }


def _error_record(s, name: str, fill: FillOperator, label: str, seed: int, exc) -> AuditRecord:
    nan = float("nan")
    return AuditRecord(
        sample_id=s.sample_id,
        true_class=s.label_index,
        predicted_class=-1,
        correct=False,
        explainer=name,
        fill=fill.kind,
        del_auc=nan,
        ins_auc=nan,
        stability=nan,
        iou=nan,
        spearman_defect=nan,
        topk_drop_5=nan,
        topk_drop_10=nan,
        topk_drop_20=nan,
        model_family=label,
        seed=seed,
        degenerate=False,
        annotations=[],
        error=f"{type(exc).__name__}: {exc}",
    )


def cmd_audit(cfg: dict, jobs: int = 1) -> int:
    samples = _load_samples(cfg)
    subset = _eval_subset(cfg, samples)
    explain_dir = stage_dir(cfg, "explain")
    if not (explain_dir / "manifest.json").exists():
        raise PipelineError(
            f"missing heatmap artifacts at {explain_dir}; run `faudit explain` first"
        )
    out = stage_dir(cfg, "audit")
    _write_stage_config(out, cfg)
    audit_cfg = cfg["audit"]
    fills = [FillOperator(kind, sigma=audit_cfg["blur_sigma"]) for kind in cfg["fills"]]
    fractions = default_fractions(audit_cfg["curve_points"])

    records: list[AuditRecord] = []
    curve_lines: list[tuple] = []
    failures = 0
    for label, seed, entry in _model_labels(cfg):
        ctx = _ModelContext(cfg, label, seed, entry)
        try:
            usable, _ = _applicable_explainers(cfg, entry)
            work = [(name, fill, s) for name in usable for fill in fills for s in subset]

            def one(item):
                name, fill, s = item
                base = explain_dir / f"{label}-s{seed}" / name / s.sample_id
                hm = load_heatmap(base)
                record, dele, ins = compute_audit_record(
                    ctx.predict,
                    lambda img, hm=hm: hm,
                    s.image,
                    s.mask,
                    s.label_index,
                    s.sample_id,
                    fill,
                    stability_k=audit_cfg["stability_k"],
                    stability_seed=audit_cfg["stability_seed"],
                    stability_explain_fn=ctx.explain_fn(
                        name, s.sample_id, stability=True
                    ),
                    model_family=label,
                    seed=seed,
                    fractions=fractions,
                    with_curves=True,
                )
                rows = []
                for curve in (dele, ins):
                    for sid, direction, frac, prob in curve_rows(s.sample_id, curve):
                        rows.append(
                            (label, seed, name, fill.kind, sid, direction, frac, prob)
                        )
                return record, rows

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    futures = [pool.submit(one, item) for item in work]
                    outcomes = []
                    for item, fut in zip(work, futures):
                        try:
                            outcomes.append(fut.result())
                        except Exception as exc:
                            outcomes.append((item, exc))
            else:
                outcomes = []
                for item in work:
                    try:
                        outcomes.append(one(item))
                    except Exception as exc:
                        outcomes.append((item, exc))
            for outcome in outcomes:
                first, second = outcome
                if isinstance(second, Exception):
                    name, fill, s = first
                    failures += 1
                    records.append(_error_record(s, name, fill, label, seed, second))
                else:
                    records.append(first)
                    curve_lines.extend(second)
        finally:
            ctx.close()

    records.sort(
        key=lambda r: (r.model_family, r.seed, r.explainer, r.fill, r.sample_id)
    )
    curve_lines.sort(key=lambda row: (row[0], row[1], row[2], row[3], row[4], row[5]))
    records_to_jsonl(out / "records.jsonl", records)
    records_to_csv(out / "records.csv", records)
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "model_family",
                "seed",
                "explainer",
                "fill",
                "sample_id",
                "direction",
                "fraction",
                "probability",
            ]
        )
        for row in curve_lines:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    print(
        f"audit: {len(records)} records ({failures} error rows) -> {out}"
    )
    return EXIT_PARTIAL if failures else EXIT_OK


# -- report -------------------------------------------------------------------


def _read_curves(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean_curves(rows: list[dict]) -> dict:
    """(explainer-family label, fill, direction) -> (fractions, mean probs),
    pooled over samples and seeds."""
    acc: dict = {}
    for row in rows:
        key = (
            f"{row['model_family']}/{row['explainer']}",
            row["fill"],
            row["direction"],
        )
        frac = float(row["fraction"])
        acc.setdefault(key, {}).setdefault(frac, []).append(float(row["probability"]))
    out = {}
    for key, by_frac in acc.items():
        fracs = sorted(by_frac)
        out[key] = (fracs, [float(np.mean(by_frac[f])) for f in fracs])
    return out


def _effect_size_rows(ok_records: list[AuditRecord]) -> list[dict]:
    """Pairwise pooled Cohen's d on deletion AUC between family cells that
    share a fill operator."""
    groups = group_by_family(ok_records)
    rows = []
    by_fill: dict = {}
    for key, recs in groups.items():
        by_fill.setdefault(key[2], []).append((key, recs))
    for fill, members in sorted(by_fill.items()):
        members.sort(key=lambda kv: kv[0])
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                key_a, recs_a = members[i]
                key_b, recs_b = members[j]
                row = {
                    "fill": fill,
                    "family_a": family_label(key_a),
                    "family_b": family_label(key_b),
                    "n_a": len(recs_a),
                    "n_b": len(recs_b),
                }
                try:
                    row["cohens_d_del_auc"] = cohens_d(
                        [r.del_auc for r in recs_a], [r.del_auc for r in recs_b]
                    )
                except StatsError as exc:
                    row["cohens_d_del_auc"] = float("nan")
                    row["note"] = str(exc)
                rows.append(row)
    return rows


def _seed_level_rows(ok_records: list[AuditRecord]) -> list[dict]:
    by_run: dict = {}
    for r in ok_records:
        by_run.setdefault((r.model_family, r.explainer, r.fill, r.seed), []).append(r)
    rows = []
    for (fam, expl, fill, seed), recs in sorted(by_run.items()):
        row = {
            "model_family": fam,
            "explainer": expl,
            "fill": fill,
            "seed": seed,
            "n": len(recs),
        }
        for metric in ("del_auc", "ins_auc", "stability"):
            vals = np.sort([getattr(r, metric) for r in recs])
            vals = vals[~np.isnan(vals)]
            row[f"{metric}_mean"] = float(vals.mean()) if vals.size else float("nan")
        rows.append(row)
    return rows


def _write_dict_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(
                [
                    repr(v) if isinstance(v, float) else ("" if v is None else v)
                    for v in (row.get(f) for f in fields)
                ]
            )


def cmd_report(cfg: dict, jobs: int = 1) -> int:
    audit_dir = stage_dir(cfg, "audit")
    records_path = audit_dir / "records.jsonl"
    if not records_path.exists():
        raise PipelineError(
            f"missing audit records at {audit_dir}; run `faudit audit` first"
        )
    out = stage_dir(cfg, "report")
    _write_stage_config(out, cfg)
    records = records_from_jsonl(records_path)
    ok = [r for r in records if not r.error]
    n_errors = len(records) - len(ok)
    if not ok:
        raise PipelineError("no successful audit records to report on")

    rep = cfg["report"]
    summaries = summarize(ok, n_resamples=rep["n_resamples"], seed=rep["bootstrap_seed"])
    summaries_to_csv(out / "summary.csv", summaries)

    per_class = per_class_table(ok)
    labels = sorted({lbl for fams in per_class.values() for lbl in fams})
    with open(out / "per_class_del_auc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_class"] + labels)
        for cls in sorted(per_class):
            row = [cls] + [
                repr(per_class[cls][lbl]) if lbl in per_class[cls] else ""
                for lbl in labels
            ]
            writer.writerow(row)

    effect_rows = _effect_size_rows(ok)
    _write_dict_csv(
        out / "cohens_d.csv",
        effect_rows,
        ["fill", "family_a", "family_b", "n_a", "n_b", "cohens_d_del_auc", "note"],
    )

    topk_rows = [
        {
            "family": s.label,
            "n": s.n,
            "topk_drop_5_mean": s.means["topk_drop_5"],
            "topk_drop_10_mean": s.means["topk_drop_10"],
            "topk_drop_20_mean": s.means["topk_drop_20"],
        }
        for s in summaries
    ]
    _write_dict_csv(
        out / "topk.csv",
        topk_rows,
        ["family", "n", "topk_drop_5_mean", "topk_drop_10_mean", "topk_drop_20_mean"],
    )

    cc_note = ""
    cc_summaries = []
    try:
        cc_ids = commonly_correct_filter(ok)
        cc_records = [r for r in ok if r.sample_id in cc_ids]
        if cc_records:
            cc_summaries = summarize(
                cc_records, n_resamples=rep["n_resamples"], seed=rep["bootstrap_seed"]
            )
            summaries_to_csv(out / "commonly_correct.csv", cc_summaries)
        else:
            cc_note = "no commonly-correct samples"
    except StatsError as exc:
        cc_note = f"commonly-correct filter not applicable: {exc}"

    seed_rows = _seed_level_rows(ok)
    _write_dict_csv(
        out / "seed_summary.csv",
        seed_rows,
        [
            "model_family",
            "explainer",
            "fill",
            "seed",
            "n",
            "del_auc_mean",
            "ins_auc_mean",
            "stability_mean",
        ],
    )

    curves = _mean_curves(_read_curves(audit_dir / "curves.csv"))
    with open(out / "curves_mean.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "fill", "direction", "fraction", "mean_probability"])
        for (fam, fill, direction), (fracs, probs) in sorted(curves.items()):
            for frac, prob in zip(fracs, probs):
                writer.writerow([fam, fill, direction, repr(frac), repr(prob)])
    for fill in cfg["fills"]:
        for direction in ("deletion", "insertion"):
            series = [
                (fam, fracs, probs)
                for (fam, f, d), (fracs, probs) in sorted(curves.items())
                if f == fill and d == direction
            ]
            if not series:
                continue
            write_line_chart(
                out / f"curves_{fill}_{direction}.svg",
                series,
                title=f"{direction} curves ({fill}), mean over samples and seeds",
                x_label="fraction of pixels",
                y_label="target-class probability",
            )

    effect_map = {
        f"{row['family_a']} vs {row['family_b']}": row["cohens_d_del_auc"]
        for row in effect_rows
    }
    doc = report_document(
        summaries,
        per_class,
        effect_sizes=effect_map,
        extra={
            "n_records": len(records),
            "n_error_rows": n_errors,
            "topk": topk_rows,
            "seed_level": seed_rows,
            "commonly_correct": {
                "note": cc_note,
                "families": [
                    {"family": s.label, "n": s.n, "del_auc_mean": s.means["del_auc"]}
                    for s in cc_summaries
                ],
            },
        },
    )
    write_report_json(out / "report.json", doc)

    lines = [
        "faithfulness audit summary",
        "==========================",
        f"records: {len(ok)} ok, {n_errors} error rows",
        "",
        f"{'family':<42} {'n':>5} {'del_auc':>9} {'ins_auc':>9} {'stability':>9}",
    ]
    for s in summaries:
        lines.append(
            f"{s.label:<42} {s.n:>5} {s.means['del_auc']:>9.4f} "
            f"{s.means['ins_auc']:>9.4f} {s.means['stability']:>9.4f}"
        )
    lines.append("")
    lines.append("pairwise Cohen's d on deletion AUC: see cohens_d.csv")
    if cc_note:
        lines.append(f"commonly-correct subset: {cc_note}")
    lines.append("")
    lines.append(f"note: {CI_CAVEAT}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")

    print(f"report: {len(summaries)} family summaries -> {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


_DISPATCH = {
    "generate": cmd_generate,
    "train": cmd_train,
    "explain": cmd_explain,
    "audit": cmd_audit,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="faudit",
        description="Perturbation-based faithfulness audit pipeline for "
        "saliency explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "synthesize the labelled wafer-map dataset"),
        ("train", "train reference classifiers and save checkpoints"),
        ("explain", "compute and store heatmaps for the audited subset"),
        ("audit", "run the perturbation metric battery, emit AuditRecords"),
        ("report", "aggregate records into tables, charts, and a JSON report"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument(
            "--jobs", type=int, default=1, help="worker threads for explain/audit"
        )
        p.add_argument(
            "--seed",
            type=int,
            default=None,
            help="restrict refmodel entries to this single training seed",
        )
    args = parser.parse_args(argv)
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed_override=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _DISPATCH[args.command](cfg, jobs=args.jobs)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
