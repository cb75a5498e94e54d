import copy
import json

import numpy as np
import pytest

from depthpose.cli import main
from depthpose.config import ConfigError, RunConfig
from depthpose.depthcam import DepthImage, camera_from_manifest, directory_digest, read_dataset, read_poses, write_dpt
from depthpose.evaluation import evaluate
from depthpose.persistence import load_model
from depthpose.cascade import CascadedPoseRegressor


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse rejections
        return exc.code


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A small dataset and a model trained on it through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"n_descriptors": 150, "n_trees": 2, "max_depth": 5, "stage_counts": [2, 2, 1]}))
    assert run("synth", "--out", root / "data", "--frames", 12, "--seed", 7) == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "m.cprm", "--seed", 3) == 0
    return root, cfg


def test_defaults_encode_reference_settings():
    c = RunConfig()
    assert (c.stage_counts, c.n_trees, c.max_depth, c.probe_offset_mm) == ((5, 10, 5), 16, 15, 100.0)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"n_trees": 3, "colour": "red"})
    with pytest.raises(ConfigError):
        RunConfig(stage_counts=(1, 2))


def test_synth_deterministic(tmp_path, skeleton):
    assert run("synth", "--out", tmp_path / "a", "--frames", 5, "--seed", 7) == 0
    assert run("synth", "--out", tmp_path / "b", "--frames", 5, "--seed", 7, "--workers", 2) == 0
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["skeleton_hash"] == skeleton.config_hash


def test_synth_zero_frames(tmp_path):
    assert run("synth", "--out", tmp_path / "z", "--frames", 0) == 2


def test_train_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("train", "--data", tmp_path / "empty", "--out", tmp_path / "m.cprm") == 2


def test_bad_config_is_usage_error(tmp_path, work):
    root, _ = work
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert run("train", "--config", bad, "--data", root / "data", "--out", tmp_path / "m.cprm") == 2


def test_bad_model_file(tmp_path, work):
    root, _ = work
    (tmp_path / "junk.cprm").write_bytes(b"not a model at all")
    assert run("infer", "--model", tmp_path / "junk.cprm", "--data", root / "data", "--out", tmp_path / "p.json") == 2


def test_train_trace_non_increasing(tmp_path, work, capsys):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "m.cprm", "--seed", 3) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("stage")]
    assert len(lines) == 2 + 2 + 4
    for l in lines:
        before, after = (float(x) for x in l.split("loss")[1].split("->"))
        assert after <= before
    assert (tmp_path / "m.cprm").read_bytes() == (root / "m.cprm").read_bytes()


def test_train_workers_do_not_change_bytes(tmp_path, work):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "w.cprm", "--seed", 3,
               "--workers", 3) == 0
    assert (tmp_path / "w.cprm").read_bytes() == (root / "m.cprm").read_bytes()


def test_cli_matches_api(tmp_path, work, skeleton):
    root, _ = work
    assert run("infer", "--model", root / "m.cprm", "--data", root / "data", "--out", tmp_path / "p.json") == 0
    ids, poses = read_poses(tmp_path / "p.json")
    ds = read_dataset(root / "data")
    est = CascadedPoseRegressor(skeleton, camera_from_manifest(ds.manifest), stage_counts=(2, 2, 1),
                                n_trees=2, max_depth=5, n_descriptors=150, random_state=3)
    est.fit(ds.images, ds.truths)
    assert np.array_equal(poses, est.predict(ds.images))
    assert np.array_equal(poses, est.train_estimates_)

    assert run("eval", "--data", root / "data", "--poses", tmp_path / "p.json", "--out", tmp_path / "r.json",
               "--curve-csv", tmp_path / "c.csv") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["mean_rmse_cm"] == evaluate(est.train_estimates_, ds.truths, skeleton).mean_rmse_cm
    assert (tmp_path / "c.csv").read_text().startswith("threshold_cm,fraction\n")
    assert run("eval", "--data", root / "data", "--model", root / "m.cprm", "--out", tmp_path / "r2.json") == 0
    assert json.loads((tmp_path / "r2.json").read_text())["rmse_cm"] == rep["rmse_cm"]


def test_eval_perfect_input(tmp_path, work):
    root, _ = work
    assert run("eval", "--data", root / "data", "--poses", root / "data" / "poses.json", "--out",
               tmp_path / "r.json") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["mean_rmse_cm"] == 0 and all(v == 0 for v in rep["rmse_cm"])
    assert run("eval", "--data", root / "data", "--out", tmp_path / "r.json") == 2


def test_bench(work, capsys):
    root, _ = work
    assert run("bench", "--model", root / "m.cprm", "--data", root / "data", "--frames", 4) == 0
    assert "fps" in capsys.readouterr().out


def test_hash_mismatch_names_both(tmp_path, work, skeleton, capsys):
    root, _ = work
    cfg = copy.deepcopy(skeleton.config)
    cfg["name"] = "renamed"
    (tmp_path / "sk.json").write_text(json.dumps(cfg))
    (tmp_path / "c.json").write_text(json.dumps({"skeleton": str(tmp_path / "sk.json")}))
    code = run("train", "--config", tmp_path / "c.json", "--data", root / "data", "--out", tmp_path / "m.cprm")
    err = capsys.readouterr().err
    assert code == 2 and skeleton.config_hash in err and "hash mismatch" in err
    assert load_model(root / "m.cprm").skeleton_hash == skeleton.config_hash


def test_render(tmp_path, work):
    root, _ = work
    out = tmp_path / "f.pgm"
    assert run("render", "--data", root / "data", "--frame", 0, "--out", out) == 0
    blob = out.read_bytes()
    head, _, body = blob.partition(b"\n255\n")
    assert head.startswith(b"P5\n")
    w, h = (int(x) for x in head.split(b"\n")[1].split())
    img = np.frombuffer(body, np.uint8).reshape(h, w)
    assert np.any(img == 128) and np.any(img == 0)
    assert run("render", "--data", root / "data", "--frame", 999, "--out", out) == 2


def test_render_background_frame(tmp_path, work, caplog):
    root, _ = work
    assert run("synth", "--out", tmp_path / "d", "--frames", 1, "--seed", 7) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    rec = manifest["frames"][0]
    write_dpt(tmp_path / "d" / rec["file"], DepthImage.background(manifest["camera"]["width"],
                                                                   manifest["camera"]["height"]))
    with caplog.at_level("WARNING"):
        assert run("render", "--data", tmp_path / "d", "--frame", rec["id"], "--out", tmp_path / "e.pgm") == 0
    assert "no foreground" in caplog.text
    body = (tmp_path / "e.pgm").read_bytes().partition(b"\n255\n")[2]
    assert set(np.frombuffer(body, np.uint8)) == {0}
