import csv
import json

import numpy as np
import pytest

from conftest import CONFIGS, SMALL_SHAPE
from swelltopo import cli, driver, network
from swelltopo.config import loads
from swelltopo.errors import AdjointError


def read_vtk(path):
    """Points, point vectors and cell scalars of an ASCII legacy VTK file written by the package."""
    lines = path.read_text().splitlines()
    out = {"cells": {}}
    i = 0
    while i < len(lines):
        tok = lines[i].split()
        if tok and tok[0] == "POINTS":
            n = int(tok[1])
            out["points"] = np.array([[float(v) for v in ln.split()[:2]] for ln in lines[i + 1:i + 1 + n]])
            i += n
        elif tok and tok[0] == "VECTORS":
            n = len(out["points"])
            out["u"] = np.array([[float(v) for v in ln.split()[:2]] for ln in lines[i + 1:i + 1 + n]])
            i += n
        elif tok and tok[0] == "CELL_DATA":
            out["n_cells"] = int(tok[1])
        elif tok and tok[0] == "SCALARS":
            n = out["n_cells"]
            out["cells"][tok[1]] = np.array([float(v) for v in lines[i + 2:i + 2 + n]])
            i += n + 1
        i += 1
    return out


def summary_rows(path):
    with open(path) as fh:
        return {(r["case"], r["node_set"]): r for r in csv.DictReader(fh)}


def write_cfg(tmp_path, text, name="case.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run_cli(*args):
    return cli.main(list(map(str, args)))


# ---------------------------------------------------------------- forward runs


def test_bilayer_bends_toward_the_elastomer(tmp_path):
    assert run_cli("run", CONFIGS / "bilayer.cfg", "--output-root", tmp_path) == 0
    out = tmp_path / "out" / "bilayer"
    cfg = loads((CONFIGS / "bilayer.cfg").read_text())
    mesh = driver.build_mesh(cfg)
    vtk = read_vtk(out / "forward_water.vtk")
    np.testing.assert_array_equal(vtk["points"], mesh.nodes + vtk["u"])
    assert np.abs(vtk["u"]).max() > 0
    tip = summary_rows(out / "forward_summary.csv")[("water", "tip")]
    # gel on top, elastomer below: the free end curls downward
    assert float(tip["mean_uy_m"]) < 0


def test_trilayer_reverses_with_the_solvent(tmp_path):
    assert run_cli("run", CONFIGS / "trilayer.cfg", "--output-root", tmp_path) == 0
    out = tmp_path / "out" / "trilayer"
    assert (out / "forward_water.vtk").exists() and (out / "forward_organic.vtk").exists()
    rows = summary_rows(out / "forward_summary.csv")
    uw = float(rows[("water", "tip")]["mean_uy_m"])
    uo = float(rows[("organic", "tip")]["mean_uy_m"])
    assert uw * uo < 0


def test_every_run_echoes_its_defaults(tmp_path):
    assert run_cli("run", CONFIGS / "free_swell.cfg", "--output-root", tmp_path) == 0
    out = tmp_path / "out" / "free_swell"
    echoed = loads((out / "config.echo.cfg").read_text())
    assert echoed.projection.enabled is False
    logged = (out / "config_defaults.log").read_text().split("\n")
    assert "defaulted: projection" in logged


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(driver.OUTPUT_ROOT_ENV, str(tmp_path))
    assert run_cli("run", CONFIGS / "free_swell.cfg") == 0
    assert (tmp_path / "out" / "free_swell" / "forward_water.vtk").exists()


# ---------------------------------------------------------------- optimization runs


def one_iteration_cfg(tmp_path, every=25):
    text = SMALL_SHAPE.replace("max_iterations = 4", "max_iterations = 1").replace(
        "snapshot_every = 0", f"snapshot_every = {every}")
    return write_cfg(tmp_path, text)


@pytest.mark.parametrize("every", [0, 25])
def test_single_iteration_run(tmp_path, every):
    assert run_cli("run", one_iteration_cfg(tmp_path, every), "--output-root", tmp_path) == 0
    out = tmp_path / "small_shape"
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert sorted(p.name for p in (out / "snapshots").glob("snapshot_*.txt")) == ["snapshot_0000.txt"]
    s = json.loads((out / "summary.json").read_text())
    assert s["iterations"] == 1 and s["status"] == "max_iterations"
    for name in ("final_weights.txt", "final_water.vtk", "timing.csv", "config.echo.cfg"):
        assert (out / name).exists()


def test_history_is_byte_identical_across_runs(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_SHAPE)
    blobs = []
    for k in range(2):
        root = tmp_path / f"r{k}"
        assert run_cli("run", cfg, "--output-root", root) == 0
        blobs.append((root / "small_shape" / "history.csv").read_bytes())
    assert blobs[0] == blobs[1]
    assert len(blobs[0].splitlines()) == 5


# ---------------------------------------------------------------- resampling


@pytest.fixture
def snapshot(tmp_path):
    assert run_cli("run", one_iteration_cfg(tmp_path), "--output-root", tmp_path) == 0
    return tmp_path / "small_shape" / "final_weights.txt"


def test_resample_at_mesh_resolution_hits_centroids(snapshot, small_shape_cfg):
    net = network.load_snapshot(snapshot)
    mesh = driver.build_mesh(small_shape_cfg)
    pts = driver.resample_grid(net.box_lo, net.box_hi, 4, 2)
    np.testing.assert_allclose(pts, mesh.centroids(), atol=1e-12)
    assert run_cli("resample", snapshot, "--res", "4x2") == 0
    with open(snapshot.parent / "final_weights_resampled_4x2.csv") as fh:
        data = np.array([[float(v) for v in r.values()] for r in csv.DictReader(fh)])
    rho = network.evaluate(net, mesh.centroids())["rho"]
    np.testing.assert_allclose(data[:, 2:], rho, atol=1e-12)


def test_tripled_raster_contains_the_coarse_one(snapshot):
    net = network.load_snapshot(snapshot)
    coarse = network.evaluate(net, driver.resample_grid(net.box_lo, net.box_hi, 4, 2))["rho"].reshape(2, 4, -1)
    fine = network.evaluate(net, driver.resample_grid(net.box_lo, net.box_hi, 12, 6))["rho"].reshape(6, 12, -1)
    # cell centres of the coarse raster are the middle sub-cells of the tripled one
    np.testing.assert_array_equal(fine[1::3, 1::3], coarse)


def test_one_hot_area_fraction_matches_logged_volume(tmp_path):
    # a finer mesh and fast continuation give a crisp trained field in a few dozen iterations
    text = (SMALL_SHAPE.replace("nx = 4", "nx = 12").replace("ny = 2", "ny = 6")
            .replace("max_iterations = 4", "max_iterations = 60")) + """
[[constraints]]
kind = "volume"
name = "gel_volume"
phases = ["gel"]
bound = 0.5

[schedules]
p_step = 0.25
xi_step = 0.25
"""
    assert run_cli("run", write_cfg(tmp_path, text), "--output-root", tmp_path) == 0
    out = tmp_path / "small_shape"
    with open(out / "history.csv") as fh:
        row = list(csv.DictReader(fh))[-1]
    assert float(row["grayness"]) <= 0.05
    logged = float(row["g_gel_volume"]) + 0.5
    net = network.load_snapshot(out / "final_weights.txt")
    rho = network.evaluate(net, driver.resample_grid(net.box_lo, net.box_hi, 120, 60))["rho"]
    one_hot = np.mean(np.argmax(rho, axis=1) == 0)
    assert abs(one_hot - logged) <= 0.02


# ---------------------------------------------------------------- exit codes


def test_config_error_exit_code(tmp_path, capsys):
    bad = write_cfg(tmp_path, SMALL_SHAPE.replace("nx = 4", "nx = 0"))
    assert run_cli("run", bad, "--output-root", tmp_path) == 2
    assert "mesh.nx" in capsys.readouterr().err


def test_forward_failure_exit_code(tmp_path):
    text = SMALL_SHAPE.replace('mode = "optimize"', 'mode = "forward"') + """
[solver]
newton_max_iterations = 1
load_steps = 1
"""
    assert run_cli("run", write_cfg(tmp_path, text), "--output-root", tmp_path) == 3


def test_adjoint_failure_exit_code(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise AdjointError("adjoint residual too large")
    monkeypatch.setattr(driver, "run", broken)
    assert run_cli("run", write_cfg(tmp_path, SMALL_SHAPE)) == 4


def test_io_error_exit_codes(tmp_path):
    assert run_cli("resample", tmp_path / "missing.txt", "--res", "8x4") == 5
    assert run_cli("run", tmp_path / "missing.cfg") == 5
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert run_cli("run", write_cfg(tmp_path, SMALL_SHAPE), "--output-root", blocker) == 5


@pytest.mark.parametrize("res", ["8", "0x4", "axb", "-2x3"])
def test_bad_resolution(res, snapshot):
    assert run_cli("resample", snapshot, f"--res={res}") == 2
