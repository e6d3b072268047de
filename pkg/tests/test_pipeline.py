import json
import shutil

import numpy as np
import pytest
import yaml

from lidarvote import synth
from lidarvote.cli import main
from lidarvote.errors import MissingGroundTruthError, MissingResultError, ParseError, StageError
from lidarvote.pipeline import Pipeline, PipelineConfig, run_pipeline
from lidarvote.pointcloud import UNLABELED, read_labels, save_sequence


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = synth.default_scene(0, n_beams=12, n_azimuth=180, trajectory=synth.straight_trajectory(20.0, 6, 1.8))
    return save_sequence(synth.generate(spec), root)


def base_values(dataset, work):
    return {
        "paths.scans": str(dataset["scans"]),
        "paths.poses": str(dataset["poses"]),
        "paths.labels": str(dataset["labels"]),
        "paths.classes": str(dataset["classes"]),
        "paths.work_dir": str(work),
        "views.K": 6,
        "camera.width": 160,
        "camera.height": 80,
        "eval.class_merge": [[4, 1]],
    }


def write_config(tmp_path, values, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(values))
    return path


def mtimes(directory):
    return {p.name: p.stat().st_mtime_ns for p in sorted(directory.iterdir())}


def test_run_end_to_end(tmp_path, dataset):
    cfg = write_config(tmp_path, base_values(dataset, tmp_path / "work"))
    assert main(["run", "--config", str(cfg)]) == 0
    work = tmp_path / "work"
    for sub in ("views", "seg", "votes", "labels"):
        assert (work / sub).is_dir()
    assert len(list((work / "views").glob("view_*.png"))) == 6
    labels = read_labels(work / "labels" / "pseudo_labels_hard_sum.bin")
    report = json.loads((work / "report.json").read_text())
    assert report["miou"] > 0 and 0 < report["coverage"] <= 1
    assert np.any(labels != UNLABELED)
    assert (work / "report.txt").exists() and (work / "report_iou.csv").exists()


def test_noiseless_run_is_exact_on_voted_points(tmp_path, dataset):
    values = base_values(dataset, tmp_path / "work")
    values["eval.unlabeled_policy"] = "exclude"
    out = run_pipeline(PipelineConfig(values))
    assert out["report"].miou == 1.0


def test_stages_standalone_and_cache_reuse(tmp_path, dataset, capsys):
    cfg = str(write_config(tmp_path, base_values(dataset, tmp_path / "work")))
    work = tmp_path / "work"
    assert main(["align", "--config", cfg]) == 0
    assert (work / "cloud.npz").exists()
    assert main(["render", "--config", cfg]) == 0
    assert len(list((work / "views").glob("view_*.png"))) == 6
    assert main(["vote", "--config", cfg]) == 0
    views_before = mtimes(work / "views")
    seg_before = mtimes(work / "seg")
    assert main(["vote", "--config", cfg, "--estimator", "soft_sum"]) == 0
    assert mtimes(work / "views") == views_before and mtimes(work / "seg") == seg_before
    names = sorted(p.name for p in (work / "labels").glob("*.bin"))
    assert names == ["pseudo_labels_hard_sum.bin", "pseudo_labels_soft_sum.bin"]
    # --force recomputes
    assert main(["render", "--config", cfg, "--force"]) == 0
    assert mtimes(work / "views") != views_before


def test_upstream_change_invalidates_downstream(tmp_path, dataset):
    values = base_values(dataset, tmp_path / "work")
    p1 = Pipeline(PipelineConfig(values))
    p1.vote()
    vote_key = p1._cached_key("vote")
    seg_before = mtimes(tmp_path / "work" / "seg")
    values["views.theta"] = 10.0
    p2 = Pipeline(PipelineConfig(values))
    p2.vote()
    assert p2._cached_key("vote") != vote_key
    assert mtimes(tmp_path / "work" / "seg") != seg_before
    # a vote-only change leaves render and segment alone
    values["vote.dedup"] = True
    views_before = mtimes(tmp_path / "work" / "views")
    Pipeline(PipelineConfig(values)).vote()
    assert mtimes(tmp_path / "work" / "views") == views_before


def test_eval_without_ground_truth(tmp_path, dataset, capsys):
    # segment with the oracle on labeled data, then reuse its output externally without gt
    run_pipeline(base_values(dataset, tmp_path / "labeled"))
    values = base_values(dataset, tmp_path / "work")
    del values["paths.labels"]
    values.update({"segmenter.kind": "external", "segmenter.result_dir": str(tmp_path / "labeled" / "seg")})
    cfg = write_config(tmp_path, values)
    assert main(["eval", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "[eval]" in err and "MissingGroundTruthError" in err
    with pytest.raises(StageError) as info:
        Pipeline(PipelineConfig(values)).evaluate()
    assert isinstance(info.value.cause, MissingGroundTruthError)
    # run without gt still writes labels, skips the report
    out = Pipeline(PipelineConfig(values)).run()
    assert out["report"] is None and out["labels"].exists()
    # the oracle cannot run without gt at all
    del values["segmenter.kind"], values["segmenter.result_dir"]
    values["paths.work_dir"] = str(tmp_path / "oracle")
    with pytest.raises(StageError) as info:
        Pipeline(PipelineConfig(values)).segment()
    assert info.value.stage == "segment" and isinstance(info.value.cause, MissingGroundTruthError)


def test_external_segmenter_empty_results(tmp_path, dataset, capsys):
    values = base_values(dataset, tmp_path / "work")
    (tmp_path / "results").mkdir()
    values.update({"segmenter.kind": "external", "segmenter.result_dir": str(tmp_path / "results")})
    cfg = write_config(tmp_path, values)
    assert main(["run", "--config", str(cfg)]) == 1
    assert "[segment]" in capsys.readouterr().err
    with pytest.raises(StageError) as info:
        Pipeline(PipelineConfig(values)).run()
    assert info.value.stage == "segment" and isinstance(info.value.cause, MissingResultError)


def test_external_segmenter_uses_provided_results(tmp_path, dataset):
    # produce results with an oracle run, then feed them back as external output
    oracle = base_values(dataset, tmp_path / "w1")
    first = run_pipeline(oracle)
    ext = base_values(dataset, tmp_path / "w2")
    ext.update({"segmenter.kind": "external", "segmenter.result_dir": str(tmp_path / "w1" / "seg")})
    second = run_pipeline(ext)
    assert first["labels"].read_bytes() == second["labels"].read_bytes()


def test_unknown_key_rejected(tmp_path, dataset, capsys):
    values = base_values(dataset, tmp_path / "work")
    values["views.kappa"] = 3
    with pytest.raises(ValueError, match="views.kappa"):
        PipelineConfig(values)
    assert main(["run", "--config", str(write_config(tmp_path, values))]) == 2
    assert "views.kappa" in capsys.readouterr().err


def test_nested_config_and_parse_error(tmp_path):
    cfg = PipelineConfig({"views": {"K": 5, "theta": 0}, "eval": {"class_merge": [[4, 1]]}})
    assert cfg["views.K"] == 5 and cfg["eval.class_merge"] == [[4, 1]]
    bad = tmp_path / "bad.yaml"
    bad.write_text("views.K: 5\n  oops: [\n")
    with pytest.raises(ParseError):
        PipelineConfig.from_file(bad)
    with pytest.raises(ValueError):
        PipelineConfig({"render.d_min": 0})


def test_default_experiment_knobs():
    cfg = PipelineConfig({})
    n = cfg.noise_params()
    assert (n.K, n.theta, n.lam, n.gamma) == (600, 30.0, 1.0, 1.0)
    assert (cfg["render.d_min"], cfg["render.d_max"]) == (1.0, 30.0)


def test_byte_identical_across_runs_and_workers(tmp_path, dataset):
    values = base_values(dataset, tmp_path / "a")
    values.update({"segmenter.noise_rate": 0.3, "segmenter.mode": "calibrated", "segmenter.margin": 1.0})
    outs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        values["paths.work_dir"] = str(tmp_path / name)
        for est in ("hard_sum", "soft_sum", "soft_compound"):
            values["vote.estimator"] = est
            outs.append((est, Pipeline(PipelineConfig(values), workers=workers).elect().read_bytes()))
    by_est = {}
    for est, data in outs:
        by_est.setdefault(est, set()).add(data)
    assert all(len(v) == 1 for v in by_est.values())
    table = {n: np.load(tmp_path / n / "votes" / "table.npz") for n in "abc"}
    for key in table["a"].files:
        assert table["a"][key].tobytes() == table["c"][key].tobytes()


def test_seed_override(tmp_path, dataset):
    values = base_values(dataset, tmp_path / "work")
    values["segmenter.noise_rate"] = 0.3
    cfg = str(write_config(tmp_path, values))
    assert main(["vote", "--config", cfg]) == 0
    a = (tmp_path / "work" / "labels" / "pseudo_labels_hard_sum.bin").read_bytes()
    assert main(["vote", "--config", cfg, "--seed-override", "7"]) == 0
    b = (tmp_path / "work" / "labels" / "pseudo_labels_hard_sum.bin").read_bytes()
    assert a != b
    sidecar = (tmp_path / "work" / "views" / "stage.json").read_text()
    assert json.loads(sidecar)["key"]


def test_synth_stage(tmp_path):
    values = {
        "paths.work_dir": str(tmp_path / "work"),
        "views.K": 3,
        "camera.width": 64,
        "camera.height": 32,
    }
    cfg = str(write_config(tmp_path, values))
    assert main(["synth", "--config", cfg]) == 0
    synth_dir = tmp_path / "work" / "synth"
    assert len(list((synth_dir / "scans").glob("*.bin"))) == 20
    assert (synth_dir / "classes.txt").read_text().split() == list(synth.CLASS_NAMES)
    before = mtimes(synth_dir / "scans")
    assert main(["align", "--config", cfg]) == 0
    assert mtimes(synth_dir / "scans") == before
    # a new synth seed regenerates the scene and the cloud
    cloud_before = (tmp_path / "work" / "cloud.npz").read_bytes()
    assert main(["align", "--config", cfg, "--seed-override", "3"]) == 0
    assert (tmp_path / "work" / "cloud.npz").read_bytes() != cloud_before
    shutil.rmtree(tmp_path / "work")
