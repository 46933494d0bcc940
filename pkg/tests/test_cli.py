import csv
import json

import numpy as np
import pytest

from vastopo.cli import main
from vastopo.graph import load_graph_json
from vastopo.volume import Volume, load_rvol, save_rvol


@pytest.fixture(scope="module")
def prefix(tmp_path_factory):
    p = str(tmp_path_factory.mktemp("ph") / "p")
    assert main(["phantom", "--dims", "16", "--seed", "2", "--radius", "1,1.5", "--out-prefix", p]) == 0
    return p


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "phantom" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["phantom"],
    ["phantom", "--out-prefix", "x", "--bogus"],
    ["phantom", "--out-prefix", "x", "--dims", "4,4"],
    ["train", "--phantom-prefix", "p", "--out", "o", "--fusion", "sideways"],
    ["--threads", "0", "edt", "--mask", "m", "--out", "o"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    captured = capsys.readouterr()
    assert "error" in captured.err and captured.out == ""


def test_missing_file_exits_two(tmp_path, capsys):
    assert main(["edt", "--mask", str(tmp_path / "nope.rvol"), "--out", str(tmp_path / "d.rvol")]) == 2
    assert "nope.rvol" in capsys.readouterr().err


def test_phantom_files(prefix):
    ct, vessel, labels = (load_rvol(f"{prefix}.{s}.rvol") for s in ("ct", "vessel", "labels"))
    assert ct.dims == vessel.dims == labels.dims == (16, 16, 16)
    assert ct.dtype_code == "f32" and vessel.dtype_code == "u8"
    assert set(np.unique(labels.array)) == {0, 1, 2, 3}


def test_phantom_is_deterministic(tmp_path, prefix):
    other = str(tmp_path / "q")
    main(["phantom", "--dims", "16", "--seed", "2", "--radius", "1,1.5", "--out-prefix", other])
    for s in ("ct", "vessel", "labels"):
        assert open(f"{prefix}.{s}.rvol", "rb").read() == open(f"{other}.{s}.rvol", "rb").read()


def test_encode_and_edt(tmp_path, prefix):
    out = tmp_path / "g.json"
    assert main(["--seed", "1", "encode", "--mask", f"{prefix}.vessel.rvol", "--n", "6", "--k", "2",
                 "--d0", "4", "--out", str(out)]) == 0
    g = load_graph_json(out)
    assert g.n == 6 and g.node_features.shape == (6, 4)
    d = tmp_path / "d.rvol"
    assert main(["edt", "--mask", f"{prefix}.vessel.rvol", "--out", str(d)]) == 0
    dist = load_rvol(d).array
    vessel = load_rvol(f"{prefix}.vessel.rvol").array
    assert np.all(dist[vessel == 0] == 0) and np.all(dist[vessel == 1] >= 1)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--fusion", "concat", "--mode", "with_positive"]) == 0
    assert capsys.readouterr().out.startswith("PASS fusion=concat mode=with_positive")


def test_train_infer_eval(tmp_path, prefix, capsys):
    ckpt, log, pred, rep = (tmp_path / n for n in ("m.vgnp", "log.csv", "pred.rvol", "r.json"))
    assert main(["train", "--phantom-prefix", prefix, "--iters", "5", "--seed", "7",
                 "--out", str(ckpt), "--log", str(log)]) == 0
    rows = list(csv.reader(open(log)))
    assert rows[0] == ["iter", "ce", "scl", "total"] and len(rows) == 6
    assert main(["infer", "--ckpt", str(ckpt), "--ct", f"{prefix}.ct.rvol",
                 "--vessel", f"{prefix}.vessel.rvol", "--out", str(pred)]) == 0
    assert load_rvol(pred).dims == (16, 16, 16)
    assert main(["eval", "--pred", str(pred), "--gt", f"{prefix}.labels.rvol", "--json", str(rep)]) == 0
    assert set(json.load(open(rep))) == {"macro_dsc", "miou", "mean_rvd", "classes"}
    assert "DSC" in capsys.readouterr().out


def test_infer_needs_vessel_for_topology_fusion(tmp_path, prefix, capsys):
    ckpt = tmp_path / "m.vgnp"
    main(["train", "--phantom-prefix", prefix, "--iters", "1", "--out", str(ckpt)])
    assert main(["infer", "--ckpt", str(ckpt), "--ct", f"{prefix}.ct.rvol", "--out", str(tmp_path / "p")]) == 2
    assert "vessel mask" in capsys.readouterr().err


def test_eval_dims_mismatch_names_both(tmp_path, capsys):
    a, b = tmp_path / "a.rvol", tmp_path / "b.rvol"
    save_rvol(Volume(np.zeros((4, 4, 4), np.uint8)), a)
    save_rvol(Volume(np.zeros((4, 4, 8), np.uint8)), b)
    assert main(["eval", "--pred", str(a), "--gt", str(b)]) == 2
    err = capsys.readouterr().err
    assert "(4, 4, 4)" in err and "(4, 4, 8)" in err


def test_corrupt_checkpoint_exits_two(tmp_path, prefix):
    bad = tmp_path / "bad.vgnp"
    bad.write_bytes(b"not a checkpoint")
    assert main(["infer", "--ckpt", str(bad), "--ct", f"{prefix}.ct.rvol", "--out", str(tmp_path / "p")]) == 2


def test_ablate_all_rows(tmp_path, prefix):
    out = tmp_path / "ab.csv"
    assert main(["ablate", "--phantom-prefix", prefix, "--iters", "2", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["fusion", "scl", "dsc", "miou", "rvd"]
    assert len(rows) == 13
    assert {(r[0], r[1]) for r in rows[1:]} == {
        (f, s) for f in ("none", "concat", "distance_bias", "cross_attention") for s in ("none", "fifo", "cats")
    }


def test_ablate_none_rows_ignore_vessel(tmp_path, prefix):
    rng = np.random.default_rng(0)
    noisy = tmp_path / "noisy.rvol"
    save_rvol(Volume((rng.random((16, 16, 16)) < 0.2).astype(np.uint8)), noisy)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["ablate", "--phantom-prefix", prefix, "--fusions", "none", "--iters", "3"]
    assert main(base + ["--out", str(a)]) == 0
    assert main(base + ["--vessel", str(noisy), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_ablate_rejects_unknown_variant(tmp_path, prefix):
    assert main(["ablate", "--phantom-prefix", prefix, "--fusions", "none,warp", "--out", str(tmp_path / "x")]) == 1


def test_ablate_none_rows_unchanged_when_mask_is_read(tmp_path, prefix):
    vessel = load_rvol(f"{prefix}.vessel.rvol").array.copy()
    vessel[0:3, 0:3, 0:3] = 1
    moved = tmp_path / "moved.rvol"
    save_rvol(Volume(vessel), moved)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["ablate", "--phantom-prefix", prefix, "--fusions", "none,cross_attention", "--iters", "3"]
    assert main(base + ["--out", str(a)]) == 0
    assert main(base + ["--vessel", str(moved), "--out", str(b)]) == 0
    rows_a, rows_b = a.read_text().splitlines(), b.read_text().splitlines()
    assert rows_a[1:4] == rows_b[1:4]
    assert all(r.startswith("none,") for r in rows_a[1:4])
