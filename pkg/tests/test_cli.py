import json

import numpy as np
import pytest

from nrsfm.cli import main
from nrsfm.formats import load_checkpoint, load_dataset, read_ply

SMALL_TRAIN = ["--epochs", "2", "--batch-size", "32", "--lr", "0.01", "-D", "3",
               "--blocks", "1", "--width", "16", "--bottleneck", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture
def dataset(tmp_path, capsys):
    path = tmp_path / "data.json"
    code, _ = run(capsys, "generate", "-K", 10, "--rank", 2, "--shapes", 8, "--views-per-shape", 4,
                  "--p-occ", 0.1, "--seed", 3, "-o", path)
    assert code == 0
    return path


@pytest.fixture
def checkpoint(tmp_path, dataset, capsys):
    path = tmp_path / "model.json"
    code, _ = run(capsys, "train", dataset, *SMALL_TRAIN, "-o", path)
    assert code == 0
    return path


def test_generate_summary_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    code, out = run(capsys, "generate", "-K", 100, "--rank", 3, "--shapes", 100,
                    "--views-per-shape", 10, "--p-occ", 0.3, "--seed", 5, "-o", a)
    assert code == 0
    summary = json.loads(out)
    assert summary["N"] == 1000 and summary["K"] == 100
    assert abs(summary["visible_fraction"] - 0.7) < 0.01
    run(capsys, "generate", "-K", 100, "--rank", 3, "--shapes", 100, "--views-per-shape", 10,
        "--p-occ", 0.3, "--seed", 5, "-o", b)
    assert a.read_bytes() == b.read_bytes()


def test_generate_variants(tmp_path, capsys):
    code, _ = run(capsys, "generate", "--rigid", "-K", 8, "--views-per-shape", 5, "-o",
                  tmp_path / "r.json")
    assert code == 0
    assert len(load_dataset(tmp_path / "r.json")) == 5
    code, _ = run(capsys, "generate", "--classes", "6,9", "-K", 6, "--rank", 2, "--shapes", 2,
                  "--views-per-shape", 2, "-o", tmp_path / "m.json")
    assert code == 0
    assert load_dataset(tmp_path / "m.json").K == 15


@pytest.mark.parametrize("variant", ["base", "equiv", "full"])
def test_train_accepts_variants(variant, tmp_path, dataset, capsys):
    code, out = run(capsys, "train", dataset, *SMALL_TRAIN, "--variant", variant, "-o",
                    tmp_path / f"{variant}.json")
    assert code == 0
    assert json.loads(out)["epochs"] == 2
    report = json.loads((tmp_path / f"{variant}.json.report.json").read_text())
    assert report["config"]["variant"] == variant


def test_train_is_bit_deterministic(tmp_path, dataset, capsys):
    for name in ("a.json", "b.json"):
        assert run(capsys, "train", dataset, *SMALL_TRAIN, "--variant", "full", "-o",
                   tmp_path / name)[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_resume_continues_epoch_count(tmp_path, dataset, checkpoint, capsys):
    code, out = run(capsys, "train", dataset, "--resume", checkpoint, "--epochs", 3, "-o",
                    tmp_path / "more.json")
    assert code == 0
    assert json.loads(out)["epochs"] == 3
    assert load_checkpoint(tmp_path / "more.json").epoch == 3


def test_lr_trace_drops_only_at_plateaus(tmp_path, dataset, capsys):
    code, _ = run(capsys, "train", dataset, "--epochs", 12, "--batch-size", 64, "--lr", 1e-9,
                  "--patience", 2, "--min-lr", 1e-30, "-D", 3, "--blocks", 1, "--width", 8,
                  "--bottleneck", 4, "-o", tmp_path / "p.json")
    assert code == 0
    report = json.loads((tmp_path / "p.json.report.json").read_text())
    trace, decays = report["lr_trace"], report["lr_decays"]
    assert decays, "a near-frozen model should plateau"
    for epoch in range(1, len(trace)):
        if epoch - 1 in decays:
            assert trace[epoch] == pytest.approx(trace[epoch - 1] / 10, rel=1e-12)
        else:
            assert trace[epoch] == trace[epoch - 1]


def test_eval_report_and_ablation_table(tmp_path, dataset, checkpoint, capsys):
    code, out = run(capsys, "eval", dataset, "-c", checkpoint, "-o", tmp_path / "m.json",
                    "--csv", tmp_path / "m.csv")
    assert code == 0
    report = json.loads((tmp_path / "m.json").read_text())
    assert report["kind"] == "nrsfm.metrics"
    assert set(report["summary"]) >= {"mpjpe", "stress", "reprojection_rmse", "flip_rate"}
    code, again = run(capsys, "eval", dataset, "-c", checkpoint)
    assert again == out

    paths = []
    for variant in ("base", "equiv", "full"):
        p = tmp_path / f"{variant}.json"
        run(capsys, "train", dataset, *SMALL_TRAIN, "--variant", variant, "-o", p)
        paths += ["-c", p]
    code, table = run(capsys, "eval", dataset, *paths)
    rows = table.strip().splitlines()
    assert code == 0 and len(rows) == 4
    assert [r.split()[0] for r in rows[1:]] == ["base", "equiv", "full"]


def test_reconstruct_writes_ply(tmp_path, dataset, checkpoint, capsys):
    code, out = run(capsys, "reconstruct", checkpoint, "--dataset", dataset, "--index", 2,
                    "--ply", tmp_path / "x.ply")
    assert code == 0
    result = json.loads(out)
    ply = read_ply(tmp_path / "x.ply")
    assert len(ply["x"]) == 10
    ds = load_dataset(dataset)
    vis = ds.v[2] > 0
    cam = np.array(result["camera"])
    rms = np.sqrt(((cam[:2, vis] - ds.Y[2][:, vis]) ** 2).sum() / vis.sum())
    assert rms == pytest.approx(result["reprojection_rmse"], rel=1e-9)


def test_reconstruct_rejects_wrong_keypoint_count(tmp_path, checkpoint, capsys):
    view = tmp_path / "v.json"
    view.write_text(json.dumps({"Y": np.zeros((2, 7)).tolist()}))
    assert run(capsys, "reconstruct", checkpoint, "--view", view)[0] == 3


def test_sweep_matrix_shape(tmp_path, capsys):
    code, _ = run(capsys, "sweep", "-K", 10, "--rank", 2, "--shapes", 6, "--views-per-shape", 4,
                  "--sigmas", "0,0.01", "--p-occs", "0,0.2,0.4", *SMALL_TRAIN,
                  "-o", tmp_path / "s.json", "--csv", tmp_path / "s.csv")
    assert code == 0
    doc = json.loads((tmp_path / "s.json").read_text())
    matrix = doc["mpjpe"]["10"]
    assert len(matrix) == 2 and all(len(row) == 3 for row in matrix)
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 7


def test_single_cell_sweep_equals_train_and_eval(tmp_path, capsys):
    flags = ["-K", 10, "--rank", 2, "--shapes", 6, "--views-per-shape", 4, "--sigma", 0.01,
             "--p-occ", 0.2, "--seed", 1]
    run(capsys, "sweep", *flags, "--sigmas", "0.01", "--p-occs", "0.2", *SMALL_TRAIN,
        "-o", tmp_path / "s.json")
    cell = json.loads((tmp_path / "s.json").read_text())["mpjpe"]["10"][0][0]
    run(capsys, "generate", *flags, "-o", tmp_path / "d.json")
    run(capsys, "train", tmp_path / "d.json", *SMALL_TRAIN, "-o", tmp_path / "c.json")
    run(capsys, "eval", tmp_path / "d.json", "-c", tmp_path / "c.json", "-o", tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["summary"]["mpjpe"] == cell


def test_oracles_and_feasibility(tmp_path, capsys):
    rigid = tmp_path / "r.json"
    run(capsys, "generate", "--rigid", "-K", 10, "--views-per-shape", 5, "--test-fraction", 0,
        "-o", rigid)
    code, out = run(capsys, "oracle-rigid", rigid, "--ply", tmp_path / "r.ply")
    assert code == 0 and json.loads(out)["residual"] < 1e-8
    data = tmp_path / "d.json"
    run(capsys, "generate", "-K", 20, "--rank", 4, "--shapes", 2, "--views-per-shape", 3, "-o", data)
    code, out = run(capsys, "oracle-fit", data, "--indices", "0,1,2")
    assert code == 0 and json.loads(out)["median_residual"] < 1e-10
    code, out = run(capsys, "feasibility", "-N", 2, "-K", 3)
    assert code == 0 and json.loads(out)["feasible"]
    code, out = run(capsys, "feasibility", "-N", 5, "-K", 7, "-D", 10)
    assert not json.loads(out)["feasible"]


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "train")[0] == 2
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "generate", "-K", 3, "--rank", 10, "-o", tmp_path / "x.json")[0] == 2
    missing = tmp_path / "missing.json"
    assert run(capsys, "train", missing, "-o", tmp_path / "c.json")[0] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 7}))
    assert run(capsys, "eval", bad, "-c", bad)[0] == 3
    assert run(capsys, "oracle-rigid", missing)[0] == 3


def test_divergence_exit_code(tmp_path, dataset, capsys):
    code, _ = run(capsys, "train", dataset, *SMALL_TRAIN, "--lr", 1e250, "-o", tmp_path / "c.json")
    assert code == 4
    assert (tmp_path / "c.json.diverged").exists()


def test_output_dir_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NRSFM_OUTPUT_DIR", str(tmp_path / "out"))
    monkeypatch.setenv("NRSFM_THREADS", "1")
    code, _ = run(capsys, "generate", "-K", 8, "--rank", 2, "--shapes", 2, "--views-per-shape", 2,
                  "-o", "rel.json")
    assert code == 0
    assert (tmp_path / "out" / "rel.json").exists()
