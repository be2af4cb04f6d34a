import csv
import json
from pathlib import Path

import numpy as np
import pytest

from manifold_sde.cli import main
from manifold_sde.graph_ops import load_field
from manifold_sde.manifolds import load_cloud


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def pipeline(ws, seed="5"):
    assert main(["sample", "--manifold", "sphere", "--dim", "2", "--n", "600", "--seed", seed, "-o", "run/cloud.csv"]) == 0
    assert main(["build", "run/cloud.csv", "-o", "run/field.csv"]) == 0
    assert main(["simulate", "run/cloud.csv", "run/field.csv", "--drift", "vmf", "--kappa", "10", "--paths", "4",
                 "--steps", "50", "--seed", seed, "-o", "run/traj"]) == 0
    assert main(["evaluate", "run/cloud.csv", "run/traj", "-o", "run/report.json"]) == 0
    assert main(["export", "run/traj", "-o", "run/long.csv"]) == 0


def test_sample_sphere(ws):
    assert main(["sample", "--manifold", "sphere", "--dim", "2", "--n", "10000", "--seed", "7", "-o", "cloud.csv"]) == 0
    c = load_cloud("cloud.csv")
    assert c.points.shape == (10000, 3) and c.latent is None
    assert (ws / "manifest.json").exists()


def test_sample_swiss_roll(ws):
    assert main(["sample", "--manifold", "swiss-roll", "--t-lo", "1.5", "--t-hi", "15.5", "--height", "20",
                 "--n", "100", "-o", "roll.csv"]) == 0
    assert rows("roll.csv")[2] == ["x1", "x2", "x3", "lat1", "lat2"]


def test_missing_flag_exit_2(ws, capsys):
    assert main(["sample", "--n", "10", "-o", "x.csv"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_param_exit_2(ws, capsys):
    assert main(["sample", "--manifold", "torus", "--major", "1", "--minor", "2", "--n", "10", "-o", "t.csv"]) == 2
    assert "minor" in capsys.readouterr().err


def test_build_default_and_summary(ws, capsys):
    main(["sample", "--manifold", "sphere", "--n", "500", "-o", "c.csv"])
    capsys.readouterr()
    assert main(["build", "c.csv", "-o", "f.csv"]) == 0
    out = capsys.readouterr().out
    for key in ("edges=", "mean_degree=", "bandwidth=", "degenerate_neighborhoods="):
        assert key in out
    assert load_field("f.csv").n_nodes == 500


def test_build_connectivity_exit_3(ws, capsys):
    main(["sample", "--manifold", "sphere", "--n", "50", "-o", "c.csv"])
    assert main(["build", "c.csv", "--bandwidth", "1e-6", "-o", "f.csv"]) == 3
    assert "--bandwidth" in capsys.readouterr().err


def test_build_gaussian_psd(ws):
    main(["sample", "--manifold", "sphere", "--n", "300", "-o", "c.csv"])
    assert main(["build", "c.csv", "--kernel", "gaussian", "--bandwidth", "0.3", "-o", "f.csv"]) == 0
    assert np.linalg.eigvalsh(load_field("f.csv").cdc).min() >= 0


def test_simulate_files_and_zero_steps(ws):
    main(["sample", "--manifold", "sphere", "--n", "400", "-o", "c.csv"])
    main(["build", "c.csv", "-o", "f.csv"])
    assert main(["simulate", "c.csv", "f.csv", "--paths", "3", "--start-nodes", "0,5", "--steps", "0", "-o", "out"]) == 0
    files = sorted((ws / "out").glob("path_*.csv"))
    assert len(files) == 6
    r = rows(files[0])
    assert r[0] == ["step", "t", "x1", "x2", "x3", "radial_err", "nn_dist"] and len(r) == 2
    assert len(list((ws / "out").glob("manifest.json"))) == 1


def test_simulate_concat_and_evaluate(ws):
    main(["sample", "--manifold", "sphere", "--n", "400", "-o", "c.csv"])
    main(["build", "c.csv", "-o", "f.csv"])
    assert main(["simulate", "c.csv", "f.csv", "--drift", "vmf", "--kappa", "5", "--paths", "3", "--steps", "20",
                 "--concat", "-o", "all.csv"]) == 0
    r = rows("all.csv")
    assert r[0][0] == "path" and len(r) == 1 + 3 * 21
    assert main(["evaluate", "c.csv", "all.csv", "-o", "rep.json"]) == 0
    rep = json.loads(Path("rep.json").read_text())
    assert {"mean_radial_err", "max_radial_err", "ks_statistic"} <= rep.keys()
    assert "avg_nn_dist" not in rep
    h = rows("rep_hist.csv")
    assert h[0] == ["bin_left", "bin_right", "count", "target_density"] and len(h) == 41


def test_simulate_divergence_exit_4(ws, capsys):
    main(["sample", "--manifold", "sphere", "--n", "200", "-o", "c.csv"])
    main(["build", "c.csv", "-o", "f.csv"])
    code = main(["simulate", "c.csv", "f.csv", "--drift", "quadratic", "--z-star", "1e4,0,0", "--beta", "10",
                 "--step", "1", "--steps", "3", "--paths", "2", "-o", "out"])
    assert code == 4
    err = capsys.readouterr().err
    assert "path 0" in err and "step 1" in err
    assert all(np.isfinite(np.array(rows(f)[1:], dtype=float)).all() for f in (ws / "out").glob("path_*.csv"))


def test_simulate_bad_drift_params(ws):
    main(["sample", "--manifold", "sphere", "--n", "200", "-o", "c.csv"])
    main(["build", "c.csv", "-o", "f.csv"])
    assert main(["simulate", "c.csv", "f.csv", "--drift", "vmf", "-o", "o"]) == 2
    assert main(["simulate", "c.csv", "f.csv", "--drift", "quadratic", "--z-star", "1,2", "-o", "o"]) == 2


def test_evaluate_swiss_roll(ws):
    main(["sample", "--manifold", "swiss-roll", "--n", "800", "-o", "r.csv"])
    main(["build", "r.csv", "-o", "f.csv"])
    assert main(["simulate", "r.csv", "f.csv", "--paths", "2", "--start-nodes", "0,1", "--steps", "20",
                 "--speedup", "100", "--drgd", "-o", "out"]) == 0
    assert main(["evaluate", "r.csv", "out", "-o", "rep.json"]) == 0
    rep = json.loads(Path("rep.json").read_text())
    assert {"avg_nn_dist", "avg_nn_dist_sd", "max_latent_jump", "spread", "msd", "msd_se"} <= rep.keys()
    assert "mean_radial_err" not in rep and "ks_statistic" not in rep
    assert main(["evaluate", "r.csv", "out", "--kappa", "3", "-o", "rep2.json"]) == 2


def test_evaluate_torus_mismatch(ws):
    main(["sample", "--manifold", "torus", "--n", "300", "-o", "t.csv"])
    main(["build", "t.csv", "-o", "f.csv"])
    main(["simulate", "t.csv", "f.csv", "--steps", "5", "-o", "out"])
    assert main(["evaluate", "t.csv", "out", "-o", "rep.json"]) == 2


def test_export_long_and_idempotent(ws):
    pipeline(ws)
    r = rows("run/long.csv")
    assert r[0] == ["path", "step", "t", "coord", "value"] and len(r) == 1 + 4 * 51 * 3
    assert main(["export", "run/long.csv", "-o", "run/long2.csv"]) == 0
    assert Path("run/long.csv").read_bytes() == Path("run/long2.csv").read_bytes()
    assert main(["export", "run/field.csv", "-o", "run/flong.csv"]) == 0
    fr = rows("run/flong.csv")
    assert fr[0] == ["node", "quantity", "i", "j", "value"] and len(fr) == 1 + 600 * (3 + 9)
    assert main(["export", "run/flong.csv", "-o", "run/flong2.csv"]) == 0
    assert Path("run/flong.csv").read_bytes() == Path("run/flong2.csv").read_bytes()
    assert main(["export", "run/field.csv", "--format", "wide", "-o", "x.csv"]) == 2


def test_config_file_and_override(ws):
    Path("s.cfg").write_text("# sampler\nmanifold = sphere\nn = 40\ndim = 3\n")
    assert main(["sample", "--config", "s.cfg", "--n", "25", "-o", "c.csv"]) == 0
    assert load_cloud("c.csv").points.shape == (25, 4)
    man = json.loads(Path("manifest.json").read_text())["runs"][0]
    assert "--config" not in man["argv"] and man["params"]["n"] == 25
    Path("bad.cfg").write_text("colour = blue\n")
    assert main(["sample", "--config", "bad.cfg", "--n", "5", "-o", "d.csv"]) == 2


def test_threads_env(ws, monkeypatch):
    main(["sample", "--manifold", "sphere", "--n", "300", "-o", "c.csv"])
    main(["build", "c.csv", "-o", "f.csv"])
    main(["simulate", "c.csv", "f.csv", "--paths", "6", "--steps", "30", "--threads", "1", "-o", "a"])
    monkeypatch.setenv("IMD_THREADS", "3")
    main(["simulate", "c.csv", "f.csv", "--paths", "6", "--steps", "30", "-o", "b"])
    assert json.loads(Path("b/manifest.json").read_text())["runs"][0]["params"]["threads"] is None
    for f in sorted(Path("a").glob("path_*.csv")):
        assert f.read_bytes() == (Path("b") / f.name).read_bytes()
    monkeypatch.setenv("IMD_THREADS", "many")
    assert main(["simulate", "c.csv", "f.csv", "--steps", "3", "-o", "c"]) == 2


def test_replay_bit_exact(ws):
    pipeline(ws)
    files = sorted(p for p in ws.rglob("*") if p.is_file() and p.name != "manifest.json")
    before = {p: p.read_bytes() for p in files}
    for p in files:
        p.unlink()
    assert main(["replay", "run/manifest.json", "run/traj/manifest.json"]) == 0
    for p, data in before.items():
        assert p.read_bytes() == data, p
    # one manifest per output directory
    assert sorted(str(p.relative_to(ws)) for p in ws.rglob("manifest.json")) == ["run/manifest.json", "run/traj/manifest.json"]


def test_seed_changes_output(ws):
    main(["sample", "--manifold", "sphere", "--n", "30", "--seed", "1", "-o", "a.csv"])
    main(["sample", "--manifold", "sphere", "--n", "30", "--seed", "2", "-o", "b.csv"])
    assert Path("a.csv").read_bytes() != Path("b.csv").read_bytes()
