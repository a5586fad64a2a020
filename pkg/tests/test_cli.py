import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from coatinspect.cli import (EXIT_BAD_FOUND, EXIT_CALIBRATION, EXIT_ERROR, EXIT_INPUT,
                             EXIT_MODEL, EXIT_OK, EXIT_USAGE, histogram_csv, main,
                             score_histogram)
from coatinspect.config import RunConfig
from coatinspect.flow import load_model

FAST = {"flow": {"epochs": 2, "lr": 2e-3, "depth": 3, "hidden": 16}, "eval": {"val_fraction": 0.2}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


def read_pgm16(path):
    raw = path.read_bytes()
    magic, w, h, maxval, body = raw.split(maxsplit=4)
    assert magic == b"P5" and maxval == b"65535"
    return np.frombuffer(body, dtype=">u2").reshape(int(h), int(w))


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data plus a model trained once through the CLI."""
    import contextlib
    import io

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(FAST))

    def call(*argv):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main([str(a) for a in argv])
        return code, json.loads(buf.getvalue().strip().splitlines()[-1])

    assert call("synth", "--good", 50, "--bad", 0, "--seed", 1, "--out", root / "goods")[0] == 0
    assert call("synth", "--good", 0, "--bad", 8, "--seed", 2, "--out", root / "calib")[0] == 0
    assert call("synth", "--good", 4, "--bad", 8, "--seed", 3, "--out", root / "test")[0] == 0
    before = tree_digest(root / "goods")
    code, doc = call("train", "--manifest", root / "goods" / "manifest.json",
                     "--calib-manifest", root / "calib" / "manifest.json",
                     "--config", cfg, "--seed", 5, "--out", root / "model")
    assert code == 0 and doc["calibrated"]
    assert tree_digest(root / "goods") == before
    return root


def test_train_outputs(workspace):
    m = load_model(workspace / "model" / "model.cfm")
    assert m.thresholds is not None
    log = json.loads((workspace / "model" / "train_log.json").read_text())
    assert log["seed"] == 5 and len(log["config_hash"]) == 64
    assert len(log["training_nll"]) == 3 and len(log["training_nll"][0]) == 3
    assert log["schema_version"] == 1 and "calibration" in log["split"]


def test_train_deterministic(workspace, capsys):
    code, _ = run(capsys, "train", "--manifest", workspace / "goods" / "manifest.json",
                  "--calib-manifest", workspace / "calib" / "manifest.json",
                  "--config", workspace / "cfg.json", "--seed", 5, "--out", workspace / "model2")
    assert code == 0
    assert (workspace / "model" / "model.cfm").read_bytes() == \
        (workspace / "model2" / "model.cfm").read_bytes()


def test_train_refuses_bad_entries(workspace, capsys):
    code, _ = run(capsys, "train", "--manifest", workspace / "test" / "manifest.json",
                  "--out", workspace / "nope")
    assert code == EXIT_ERROR
    assert not (workspace / "nope" / "model.cfm").exists()


def test_score_batch_and_exit_codes(workspace, capsys, tmp_path):
    model = workspace / "model" / "model.cfm"
    goods = sorted((workspace / "test" / "good").glob("*.ppm"))
    code, doc = run(capsys, "score", "--model", model, "--images", *goods, "--out", tmp_path)
    assert code == EXIT_OK and len(doc["results"]) == len(goods)
    code, doc = run(capsys, "score", "--model", model, "--manifest",
                    workspace / "test" / "manifest.json", "--out", tmp_path, "--save-maps",
                    "--threads", 2, "--fail-on-bad")
    assert len(doc["results"]) == 12
    any_bad = any(r["decision"] == "bad" for r in doc["results"])
    assert code == (EXIT_BAD_FOUND if any_bad else EXIT_OK)
    rec = doc["results"][0]
    assert set(rec) >= {"path", "score", "decision", "threshold", "detections"}
    stem = Path(rec["path"]).stem
    raw = read_pgm16(tmp_path / "maps" / f"{stem}_map.pgm")
    side = json.loads((tmp_path / "maps" / f"{stem}_map.json").read_text())
    assert raw.shape == (256, 256) and raw.max() == 65535 and raw.min() == 0
    # the image score is a smoothed peak, so it never exceeds the decoded map maximum
    assert side["offset"] + side["scale"] * 65535 >= rec["score"] - 1e-9
    assert (tmp_path / "maps" / f"{stem}_overlay.svg").exists()


def test_score_threads_match_serial(workspace, capsys, tmp_path):
    model = workspace / "model" / "model.cfm"
    man = workspace / "test" / "manifest.json"
    _, a = run(capsys, "score", "--model", model, "--manifest", man, "--out", tmp_path)
    _, b = run(capsys, "score", "--model", model, "--manifest", man, "--out", tmp_path, "--threads", 3)
    assert a == b


def test_score_model_errors(workspace, capsys, tmp_path):
    img = sorted((workspace / "test" / "good").glob("*.ppm"))[0]
    code, _ = run(capsys, "score", "--model", tmp_path / "missing.cfm", "--images", img, "--out", tmp_path)
    assert code == EXIT_MODEL
    junk = tmp_path / "junk.cfm"
    junk.write_bytes(b"NOPE" + bytes(40))
    code, _ = run(capsys, "score", "--model", junk, "--images", img, "--out", tmp_path)
    assert code == EXIT_MODEL
    code, _ = run(capsys, "score", "--model", workspace / "model" / "model.cfm",
                  "--images", tmp_path / "none.ppm", "--out", tmp_path)
    assert code == EXIT_INPUT


def test_calibrate_histogram_and_idempotence(workspace, capsys, tmp_path):
    man = workspace / "test" / "manifest.json"
    code, doc = run(capsys, "calibrate", "--model", workspace / "model" / "model.cfm",
                    "--manifest", man, "--out", tmp_path / "c1")
    assert code == EXIT_OK
    rows = (tmp_path / "c1" / "histogram.csv").read_text().strip().split("\n")
    assert rows[0] == "bin,lower,upper,good_count,bad_count"
    counts = np.array([[int(v) for v in r.split(",")[3:]] for r in rows[1:]])
    assert counts[:, 0].sum() == 4 and counts[:, 1].sum() == 8
    code, doc2 = run(capsys, "calibrate", "--model", tmp_path / "c1" / "model.cfm",
                     "--manifest", man, "--out", tmp_path / "c2")
    assert doc2["thresholds"] == doc["thresholds"]
    assert (tmp_path / "c1" / "model.cfm").read_bytes() == (tmp_path / "c2" / "model.cfm").read_bytes()


def test_calibrate_single_class(workspace, capsys, tmp_path):
    code, _ = run(capsys, "calibrate", "--model", workspace / "model" / "model.cfm",
                  "--manifest", workspace / "calib" / "manifest.json", "--out", tmp_path)
    assert code == EXIT_CALIBRATION


def test_histogram_helpers():
    edges, good, bad = score_histogram([0.1, 0.2, 0.9, 1.0, 0.15], [0, 0, 1, 1, 0], 4)
    assert good.sum() == 3 and bad.sum() == 2 and len(edges) == 5
    assert histogram_csv(edges, good, bad).count("\n") == 5


def test_eval_report(workspace, capsys, tmp_path):
    code, doc = run(capsys, "eval", "--model", workspace / "model" / "model.cfm", "--manifest",
                    workspace / "test" / "manifest.json", "--report", "r.json", "--out", tmp_path)
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["schema_version"] == 1 and rep["n_images"] == 12
    assert sum(rep["confusion"].values()) == 12
    assert rep["mean_inference_seconds"] > 0


def test_preprocess_features_augment(workspace, capsys, tmp_path):
    man = workspace / "test" / "manifest.json"
    code, doc = run(capsys, "preprocess", "--manifest", man, "--out", tmp_path / "p")
    assert code == EXIT_OK and doc["n_ok"] == 12
    code, doc = run(capsys, "features", "--roi", tmp_path / "p", "--out", tmp_path / "f")
    assert code == EXIT_OK and doc["n_images"] == 12
    meta = json.loads((tmp_path / "f" / "features.json").read_text())
    assert [lv["cell"] for lv in meta["levels"]] == [8, 16, 32]
    code, doc = run(capsys, "preprocess", "--in", workspace / "test" / "good", "--out", tmp_path / "q")
    assert doc["n_ok"] == 4
    code, doc = run(capsys, "augment", "--manifest", man, "--policy", "train", "--copies", 1,
                    "--out", tmp_path / "a")
    assert code == EXIT_OK and doc["n_images"] == 16


def test_cluster_command(workspace, capsys, tmp_path):
    code, doc = run(capsys, "cluster", "--model", workspace / "model" / "model.cfm", "--manifest",
                    workspace / "test" / "manifest.json", "--out", tmp_path)
    assert code == EXIT_OK
    rows = (tmp_path / "embedding.csv").read_text().strip().split("\n")
    assert len(rows) - 1 == 8 - len(doc["skipped"])
    assert (tmp_path / "scatter.svg").read_text().startswith("<svg")


def test_config_rejections(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"flow": {"epochz": 3}}))
    code, _ = run(capsys, "synth", "--config", bad, "--out", tmp_path / "s")
    assert code == EXIT_USAGE
    with pytest.raises(ValueError):
        RunConfig.from_dict({"telemetry": {}})
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_config_round_trip_and_seed():
    cfg = RunConfig.from_dict({"flow": {"epochs": 7}, "seed": 9})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.flow.seed == cfg.eval.seed == cfg.cluster.seed == 9
    assert RunConfig().to_dict()["schema_version"] == 1
