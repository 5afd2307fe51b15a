import io
import json
import shutil
from pathlib import Path

import pytest

import corpus
from vlcurate.cli import main
from vlcurate.manifest import load_manifest
from vlcurate.scoring import EQUAL_WEIGHTS, ComplexityReport

DATA = Path(__file__).parent / "data"


@pytest.fixture
def built(tmp_path):
    return corpus.build(tmp_path / "in")


def manifest_args(paths):
    out = []
    for p in paths:
        out += ["--manifest", str(p)]
    return out


def test_filter_repetitive_corpus(tmp_path, capsys):
    assert main(["filter", "--manifest", str(DATA / "repetitive_captions.jsonl"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "filter" / "repetitive_captions.report.json").read_text())
    assert report["rejected"] == 2 and len(report["rejections"]) == 2
    assert report["run"]["seed"] == 0
    assert "kept 0/2" in capsys.readouterr().out


def test_filter_clean_corpus_keeps_everything(tmp_path):
    src = tmp_path / "clean.jsonl"
    recs = [{"id": f"s{i}", "prompt": "Describe.", "response": "A calm lake under a clear sky."} for i in range(4)]
    src.write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert main(["filter", "--manifest", str(src), "--out", str(tmp_path / "o")]) == 0
    assert load_manifest(tmp_path / "o" / "filter" / "clean.jsonl").samples == load_manifest(src).samples


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["filter", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)])
    assert e.value.code == 2
    assert "no such file" in capsys.readouterr().err


def test_score_summary_and_determinism(built, tmp_path):
    args = ["score", "--sidecar", built["sidecar"]] + manifest_args(built["manifests"][:2])
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    summary = json.loads((tmp_path / "a" / "score" / "summary.json").read_text())
    scores = [d["S"] for d in summary["datasets"]]
    assert len(scores) == 2 and scores == sorted(scores, reverse=True)
    assert [d["rank"] for d in summary["datasets"]] == [1, 2]
    for f in ("summary.json", "summary.md", "reports/cap_plain.json", "reports/cap_street.json"):
        assert (tmp_path / "a" / "score" / f).read_bytes() == (tmp_path / "b" / "score" / f).read_bytes()
    report = json.loads((tmp_path / "a" / "score" / "reports" / "cap_plain.json").read_text())
    assert report["config"]["beta"] == 1.2 and report["run"]["seed"] == 0


def test_score_without_image_annotations_fails(built, tmp_path, caplog):
    # no sidecar: OCR/object counts are missing while the image weight is 1/3
    assert main(["score", "--manifest", built["manifests"][0], "--out", str(tmp_path)]) == 1
    assert "image axis" in caplog.text
    assert not (tmp_path / "score").exists()


def write_subsets(tmp_path, rows):
    paths = []
    for i, (t, im, tk) in enumerate(rows):
        rep = ComplexityReport(
            name=f"sub{i}", category=None, n_samples=1, raw={}, normalized={},
            axis_scores={"S_text": t, "S_image": im, "S_task": tk}, weights=EQUAL_WEIGHTS, score=(t + im + tk) / 3,
        )
        p = tmp_path / f"sub{i}.json"
        p.write_text(json.dumps(rep.to_dict()))
        paths.append(str(p))
    return paths


def calibrate_args(paths, weights):
    args = ["calibrate", "--category", "caption", "--weights", str(weights)]
    for p in paths:
        args += ["--subset", p]
    return args


def test_calibrate_writes_entry(tmp_path):
    weights = tmp_path / "weights.json"
    paths = write_subsets(tmp_path, [(0.5, 0.5, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)])
    assert main(calibrate_args(paths, weights)) == 0
    entry = json.loads(weights.read_text())["caption"]
    assert (entry["lambda_text"], entry["lambda_image"], entry["lambda_task"]) == (0.0, 0.0, 1.0)
    assert entry["feasible"] is True and entry["min_margin"] == pytest.approx(0.2)


def test_calibrate_infeasible_and_wrong_count(tmp_path):
    weights = tmp_path / "weights.json"
    weights.write_text(json.dumps({"ocr": {"lambda_text": 1, "lambda_image": 0, "lambda_task": 0}}))
    paths = write_subsets(tmp_path, [(0.5, 0.5, 0.5)] * 5)
    assert main(calibrate_args(paths, weights)) == 0
    table = json.loads(weights.read_text())
    assert table["caption"]["feasible"] is False and "ocr" in table
    assert main(calibrate_args(paths[:4], weights)) == 1


def test_plan_tiles_table(monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO("940 479\n"))
    assert main(["plan-tiles", "--format", "table"]) == 0
    out = capsys.readouterr().out
    row = [l for l in out.splitlines() if l.startswith("| 940")][0]
    assert [c.strip() for c in row.strip("|").split("|")] == ["940", "479", "435", "1152", "432"]


def test_plan_tiles_single_and_empty(monkeypatch, capsys, tmp_path):
    assert main(["plan-tiles", "--size", "384", "384", "--scheme", "nearest_cell"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["budgets"]["nearest_cell"]["tokens"] == 144 and doc["plan"]["padded_tokens"] == 0
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["plan-tiles", "--batch", str(empty), "--format", "table"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and lines[0].startswith("| width")


def test_plan_tiles_pad_up_only(capsys):
    assert main(["plan-tiles", "--size", "940", "479", "--pad-up-only", "--mask"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["plan"]["snapped"] == [960, 480] and len(doc["plan"]["mask"]) == 24


def stage_doc(out):
    return json.loads((Path(out) / "schedule" / "training_config.json").read_text())


def test_schedule_full_and_tiny_scale(built, tmp_path):
    base = ["schedule", "--sidecar", built["sidecar"]] + manifest_args(built["manifests"])
    assert main(base + ["--out", str(tmp_path / "full")]) == 0
    assert main(base + ["--scale", "1e-5", "--out", str(tmp_path / "tiny")]) == 0
    full, tiny = stage_doc(tmp_path / "full"), stage_doc(tmp_path / "tiny")
    assert [s["sample_budget"] for s in full["stages"]] == [10_000_000, 23_000_000, 54_000_000, 66_000_000]
    assert [s["sample_budget"] for s in tiny["stages"]] == [100, 230, 540, 660]
    assert [s["trainable"] for s in tiny["stages"]] == [s["trainable"] for s in full["stages"]]
    packs = (tmp_path / "tiny" / "schedule" / "stage1_packs.jsonl").read_text().splitlines()
    assert json.loads(packs[0]) == {"seed": 0, "stage": 1}
    assert all(json.loads(l)["total_tokens"] <= 16384 for l in packs[1:])


def test_schedule_needs_caption_data(built, tmp_path, caplog):
    non_caption = [m for m in built["manifests"] if "cap_" not in m]
    args = ["schedule", "--sidecar", built["sidecar"], "--out", str(tmp_path)] + manifest_args(non_caption)
    assert main(args) == 1
    assert "caption-category" in caplog.text
    assert "24 id(s) match no manifest" in caplog.text


def test_config_file_with_flag_override(built, tmp_path):
    cfg = tmp_path / "run.json"
    (tmp_path / "filter.json").write_text(json.dumps({"max_abnormal_char_ratio": 0.05}))
    cfg.write_text(json.dumps({
        "manifests": built["manifests"][:1], "sidecars": [built["sidecar"]], "filter": "filter.json",
        "beta": 1.5, "seed": 9,
    }))
    assert main(["score", "--config", str(cfg), "--delta", "0.25", "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "score" / "reports" / "cap_plain.json").read_text())
    assert (rep["config"]["beta"], rep["config"]["delta"], rep["run"]["seed"]) == (1.5, 0.25, 9)
    assert rep["run"]["filter"] == {"max_abnormal_char_ratio": 0.05}


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifests": [], "colour": 1}))
    assert main(["plan-tiles", "--config", str(cfg), "--size", "10", "10"]) == 1


def test_report_subcommand(built, tmp_path, capsys):
    args = ["score", "--sidecar", built["sidecar"], "--out", str(tmp_path)] + manifest_args(built["manifests"][:3])
    assert main(args) == 0
    capsys.readouterr()
    reports = sorted(str(p) for p in (tmp_path / "score" / "reports").glob("*.json"))
    assert main(["report", *reports, "--out", str(tmp_path / "table.md")]) == 0
    out = capsys.readouterr().out
    assert out == (tmp_path / "table.md").read_text() == (tmp_path / "score" / "summary.md").read_text()


def test_label_map_splits_mixed_manifest(tmp_path, built):
    # strip the header so the category must come from the label map
    src = Path(built["manifests"][3])
    lines = src.read_text().splitlines()[1:]
    bare = tmp_path / "receipts.jsonl"
    bare.write_text("\n".join(lines) + "\n")
    shutil.copytree(Path(built["manifests"][0]).parent / "images", tmp_path / "images")
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"label_map": {"receipts": "ocr"}}))
    args = ["score", "--config", str(cfg), "--manifest", str(bare), "--sidecar", built["sidecar"],
            "--out", str(tmp_path / "o")]
    assert main(args) == 0
    rep = json.loads((tmp_path / "o" / "score" / "reports" / "receipts.json").read_text())
    assert rep["category"] == "ocr"
