"""Config resolution, stage addressing, and an end-to-end micro pipeline run."""

import hashlib
import json
import shutil
import subprocess
from pathlib import Path

import pytest
import yaml

from faudit.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    ConfigError,
    load_config,
    main,
    resolve_config,
    stage_dir,
)
from faudit.faithfulness import records_from_jsonl
from faudit.svg import line_chart

MICRO = {
    "dataset": {"image_size": 32, "counts": {"train": 3, "val": 2, "test": 2}, "seed": 1},
    "models": [{"family": "cnn_cbam", "seeds": [0], "epochs": 2}],
    "explainers": ["grad_cam", "attention_rollout", "rise", "random"],
    "fills": ["zero_fill"],
    "audit": {
        "n_per_class": 2,
        "curve_points": 5,
        "stability_k": 2,
        "stability_rise_masks": 8,
        "rise": {"n_masks": 16, "grid": 4},
    },
    "report": {"n_resamples": 200},
}


def write_config(path: Path, overrides: dict | None = None, out_dir: str = "out") -> Path:
    raw = json.loads(json.dumps(MICRO))  # deep copy
    raw["out_dir"] = out_dir
    for key, value in (overrides or {}).items():
        raw[key] = value
    path.write_text(yaml.safe_dump(raw))
    return path


# -- config resolution -------------------------------------------------------------


def test_defaults_fully_populated():
    cfg = resolve_config({})
    assert cfg["dataset"]["counts"] == {"train": 40, "val": 10, "test": 10}
    assert [m["family"] for m in cfg["models"]] == ["cnn_cbam", "vit"]
    assert cfg["models"][0]["lr"] == 2e-3 and cfg["models"][1]["lr"] == 3e-4
    assert cfg["models"][1]["clip_norm"] == 1.0
    assert cfg["audit"]["rise"]["n_masks"] == 1000
    assert cfg["fills"] == ["zero_fill", "blur_fill"]
    assert cfg["report"]["n_resamples"] == 2000


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"dataset": {"bogus": 1}},
        {"dataset": {"counts": {"extra_split": 5}}},
        {"models": []},
        {"models": [{"family": "resnet50"}]},
        {"models": [{"family": "vit", "seeds": []}]},
        {"models": [{"family": "vit", "seeds": [1, 1]}]},
        {"models": [{"family": "vit", "bogus": 2}]},
        {"models": [{"adapter": "cmd", "name": "../evil"}]},
        {"models": [{"adapter": "", "name": "x"}]},
        {"explainers": ["grad_cam", "lime"]},
        {"explainers": ["grad_cam", "grad_cam"]},
        {"fills": ["mean_fill"]},
        {"audit": {"split": "holdout"}},
        {"audit": {"rise": {"p": 1.5}}},
        {"audit": {"curve_points": 1}},
        {"audit": {"blur_sigma": 0}},
        {"report": {"n_resamples": 10}},
        {"out_dir": ""},
        [],
    ],
)
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        resolve_config(raw)


def test_seed_override_restricts_refmodels():
    cfg = resolve_config(
        {"models": [{"family": "vit", "seeds": [0, 1, 2]}, {"adapter": "x", "name": "a"}]},
        seed_override=7,
    )
    assert cfg["models"][0]["seeds"] == [7]
    assert cfg["models"][1] == {"kind": "adapter", "name": "a", "command": "x"}


def test_stage_dirs_invalidate_only_downstream(tmp_path):
    base = write_config(tmp_path / "a.yaml")
    cfg_a = load_config(base)
    cfg_b = load_config(write_config(tmp_path / "b.yaml", {"fills": ["blur_fill"]}))
    cfg_c = load_config(
        write_config(tmp_path / "c.yaml", {"report": {"n_resamples": 300}})
    )
    # fills affect audit but not dataset/heatmap artifacts
    assert stage_dir(cfg_a, "generate") == stage_dir(cfg_b, "generate")
    assert stage_dir(cfg_a, "explain") == stage_dir(cfg_b, "explain")
    assert stage_dir(cfg_a, "audit") != stage_dir(cfg_b, "audit")
    # report params affect only the report stage
    assert stage_dir(cfg_a, "audit") == stage_dir(cfg_c, "audit")
    assert stage_dir(cfg_a, "report") != stage_dir(cfg_c, "report")
    cfg_d = load_config(write_config(tmp_path / "d.yaml", {"dataset": {"seed": 9}}))
    assert stage_dir(cfg_a, "generate") != stage_dir(cfg_d, "generate")


# -- exit codes without artifacts ------------------------------------------------------


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_invalid_yaml_exits_2(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("models: [unclosed\n")
    assert main(["generate", "--config", str(p)]) == EXIT_CONFIG


def test_unknown_key_exits_2(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("bogus_section: 1\n")
    assert main(["audit", "--config", str(p)]) == EXIT_CONFIG


def test_stage_without_upstream_artifacts_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", out_dir=str(tmp_path / "out"))
    assert main(["audit", "--config", str(cfg)]) == EXIT_CONFIG
    assert "faudit generate" in capsys.readouterr().err


def test_bad_jobs_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["explain", "--config", str(cfg), "--jobs", "0"]) == EXIT_CONFIG


# -- micro pipeline -----------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = write_config(root / "micro.yaml", out_dir=str(root / "out"))
    for command in ("generate", "train", "explain", "audit", "report"):
        assert main([command, "--config", str(cfg_path)]) == EXIT_OK, command
    return cfg_path, load_config(cfg_path)


def test_pipeline_record_coverage(pipeline):
    cfg_path, cfg = pipeline
    records = records_from_jsonl(stage_dir(cfg, "audit") / "records.jsonl")
    # 3 applicable explainers (rollout skipped on the CNN) x 1 fill x 10 samples
    assert len(records) == 30
    assert {r.explainer for r in records} == {"grad_cam", "rise", "random"}
    assert all(not r.error for r in records)
    assert len({r.sample_id for r in records}) == 10


def test_pipeline_manifest_notes_incompatible_combo(pipeline):
    _, cfg = pipeline
    manifest = json.loads((stage_dir(cfg, "explain") / "manifest.json").read_text())
    assert manifest["skipped_incompatible"] == [
        {"model": "cnn_cbam", "seed": 0, "explainer": "attention_rollout"}
    ]
    assert manifest["failures"] == 0
    assert len(manifest["cells"]) == 30


def test_pipeline_report_sections(pipeline):
    _, cfg = pipeline
    report_dir = stage_dir(cfg, "report")
    for name in (
        "summary.csv",
        "per_class_del_auc.csv",
        "cohens_d.csv",
        "topk.csv",
        "seed_summary.csv",
        "curves_mean.csv",
        "summary.txt",
        "report.json",
        "curves_zero_fill_deletion.svg",
        "curves_zero_fill_insertion.svg",
    ):
        assert (report_dir / name).exists(), name
    doc = json.loads((report_dir / "report.json").read_text())
    assert doc["n_error_rows"] == 0
    assert len(doc["families"]) == 3
    assert doc["cohens_d"]  # pairwise section present
    assert "sample pool" in doc["ci_caveat"]
    assert "commonly_correct" in doc
    per_class = (report_dir / "per_class_del_auc.csv").read_text().splitlines()
    assert len(per_class) == 6  # header + all five classes
    curve_lines = (report_dir / "curves_mean.csv").read_text().splitlines()
    assert len(curve_lines) == 1 + 3 * 2 * 5  # families x directions x fractions


def test_pipeline_stage_configs_reproducible(pipeline):
    cfg_path, cfg = pipeline
    for stage in ("generate", "train", "explain", "audit", "report"):
        stored = stage_dir(cfg, stage) / "config.yaml"
        assert load_config(stored) == cfg


def test_pipeline_rerun_byte_identical(pipeline):
    cfg_path, cfg = pipeline

    def digest(stage):
        out = {}
        for p in sorted(stage_dir(cfg, stage).rglob("*")):
            if p.is_file():
                out[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return out

    before = {stage: digest(stage) for stage in ("audit", "report")}
    assert main(["audit", "--config", str(cfg_path), "--jobs", "3"]) == EXIT_OK
    assert main(["report", "--config", str(cfg_path)]) == EXIT_OK
    for stage in ("audit", "report"):
        assert digest(stage) == before[stage], f"{stage} rerun changed bytes"


def test_pipeline_partial_failure_sets_exit_3(pipeline, capsys):
    cfg_path, cfg = pipeline
    heat_dir = stage_dir(cfg, "explain") / "cnn_cbam-s0" / "grad_cam"
    victim = sorted(heat_dir.glob("*.f64"))[0]
    sidecar = victim.with_suffix(".json")
    saved = {victim: victim.read_bytes(), sidecar: sidecar.read_bytes()}
    victim.unlink()
    sidecar.unlink()
    try:
        assert main(["audit", "--config", str(cfg_path)]) == EXIT_PARTIAL
        records = records_from_jsonl(stage_dir(cfg, "audit") / "records.jsonl")
        errors = [r for r in records if r.error]
        assert len(errors) == 1 and len(records) == 30  # recorded, not dropped
        assert errors[0].explainer == "grad_cam"
        # report still succeeds and carries the error count
        assert main(["report", "--config", str(cfg_path)]) == EXIT_OK
        doc = json.loads((stage_dir(cfg, "report") / "report.json").read_text())
        assert doc["n_error_rows"] == 1
    finally:
        for path, blob in saved.items():
            path.write_bytes(blob)
        # restore clean artifacts for any later test
        assert main(["audit", "--config", str(cfg_path)]) == EXIT_OK
        assert main(["report", "--config", str(cfg_path)]) == EXIT_OK


def test_console_script_installed():
    exe = shutil.which("faudit")
    assert exe, "faudit console script missing from PATH"
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "generate" in proc.stdout and "report" in proc.stdout


# -- svg helper ---------------------------------------------------------------


def test_line_chart_deterministic_and_wellformed():
    series = [("a", [0.0, 0.5, 1.0], [0.2, 0.6, 0.3])]
    one = line_chart(series, title="t")
    two = line_chart(series, title="t")
    assert one == two
    assert one.startswith("<svg ") and one.rstrip().endswith("</svg>")
    assert one.count("<polyline") == 1


def test_line_chart_scales_into_plot_box():
    svg = line_chart([("a", [0.0, 1.0], [0.0, 1.0])], width=640, height=400)
    line = [ln for ln in svg.splitlines() if ln.startswith("<polyline")][0]
    points = line.split('points="')[1].split('"')[0].split()
    (x0, y0), (x1, y1) = (tuple(map(float, p.split(","))) for p in points)
    assert y0 > y1  # larger value plotted higher (smaller SVG y)
    assert 0 <= x0 < x1 <= 640
