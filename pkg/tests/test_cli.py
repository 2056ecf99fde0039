import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from crossfill.cli import RunConfig, _prepare, auto_l_init, main, top_skins
from crossfill.geometry import box_mesh, polygon_set_area, save_stl


@pytest.fixture()
def workspace(tmp_path):
    save_stl(box_mesh(4.0), tmp_path / "cube.stl")
    save_stl(box_mesh(48.64), tmp_path / "big.stl")
    for k in range(4):
        Image.fromarray(np.full((4, 4), 60 + 20 * k, dtype=np.uint8)).save(tmp_path / f"d{k}.png")
    return tmp_path


def run(args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def slice_args(ws, out, *extra):
    return ["slice", "--model", ws / "cube.stl", "--density", str(ws / "d*.png"), "--voxel-size", 1, 1, 1,
            "--out", out, *extra]


def test_auto_l_init():
    assert auto_l_init(48.64, 0.38) == pytest.approx(48.64)
    assert auto_l_init(48.65, 0.38) == pytest.approx(97.28)
    assert auto_l_init(4.0, 0.38) == pytest.approx(6.08)


def test_prepare_sizes_forest_to_model(workspace):
    cfg = RunConfig.load(None, {"model": str(workspace / "big.stl"), "density": str(workspace / "d*.png")})
    layers, l_init, offset, field = _prepare(cfg)
    assert l_init == pytest.approx(48.64)
    assert offset[:2] == pytest.approx((0.0, 0.0))
    assert field.origin == pytest.approx(offset)


def test_slice_writes_outputs_and_is_deterministic(workspace):
    a, b = workspace / "a", workspace / "b"
    assert run(slice_args(workspace, a)).exit_code == 0
    assert run(slice_args(workspace, b, "--threads", 3)).exit_code == 0
    assert (a / "print.gcode").read_bytes() == (b / "print.gcode").read_bytes()
    assert (a / "stats.json").read_bytes() == (b / "stats.json").read_bytes()
    stats = json.loads((a / "stats.json").read_text())
    assert stats["l_init"] == pytest.approx(6.08)
    assert stats["layers"] == len(list((a / "layers").iterdir())) == 39
    g = stats["grading"]
    assert g["target_mass"] - g["realized_mass"] == pytest.approx(g["dropped_error"], rel=1e-6)


def test_slice_without_svg(workspace):
    out = workspace / "o"
    assert run(slice_args(workspace, out, "--no-svg", "--walls", 1)).exit_code == 0
    assert not (out / "layers").exists()


def test_missing_density_is_usage_error(workspace):
    result = run(["slice", "--model", workspace / "cube.stl", "--out", workspace / "o"])
    assert result.exit_code == 2 and "density" in result.output
    result = run(["slice", "--model", workspace / "cube.stl", "--density", str(workspace / "none*.png")])
    assert result.exit_code == 2


def test_missing_model_is_usage_error(workspace):
    assert run(["slice", "--model", workspace / "nope.stl", "--density", "x"]).exit_code == 2


def test_bad_l_init(workspace):
    result = run(slice_args(workspace, workspace / "o", "--l-init", 3.04))
    assert result.exit_code == 2 and "enclose" in result.output


def test_config_file(workspace):
    cfg_path = workspace / "run.toml"
    cfg_path.write_text('[print]\nw = 0.4\nlayer_height = 0.2\n[infill]\nwalls = 1\n')
    cfg = RunConfig.load(str(cfg_path), {"walls": 3})
    assert cfg.profile.w == 0.4 and cfg.profile.layer_height == 0.2 and cfg.walls == 3
    cfg_path.write_text("colour = 'red'\n")
    result = run(["slice", "--config", cfg_path, "--model", workspace / "cube.stl"])
    assert result.exit_code == 2 and "colour" in result.output


def test_dump_forest(workspace):
    out = workspace / "f"
    result = run(["dump-forest", "--model", workspace / "cube.stl", "--density", str(workspace / "d*.png"),
                  "--voxel-size", 1, 1, 1, "--out", out])
    assert result.exit_code == 0
    doc = json.loads((out / "forest.json").read_text())
    assert doc["l_init"] == pytest.approx(6.08) and len(doc["roots"]) == 4


def test_calibrate_and_accuracy(workspace):
    out = workspace / "c"
    assert run(["calibrate", "--exponent", 3, "--samples", 3, "--out", out]).exit_code == 0
    curve = json.loads((out / "compensation.json").read_text())
    assert curve["simplified"][0] == 0.0 and len(curve["simplified"]) == 4
    assert run(slice_args(workspace, workspace / "s", "--compensation", out / "compensation.json")).exit_code == 0
    acc = workspace / "acc"
    assert run(["accuracy", "--spec", "homogeneous_20", "--exponent", 3, "--out", acc]).exit_code == 0
    rows = (acc / "local_error.csv").read_text().splitlines()
    assert rows[0] == "name,kernel,mean_abs_error" and len(rows) == 1 + 5


def test_top_skins():
    sq = [np.array([[0, 0], [4, 0], [4, 4], [0, 4]], dtype=float)]
    small = [np.array([[0, 0], [2, 0], [2, 4], [0, 4]], dtype=float)]
    layers = [(0.1, sq), (0.2, sq), (0.3, small), (0.4, small)]
    skins = top_skins(layers, 0.15)
    # 0.2 loses its right half above; layers near the top are skin entirely
    assert [z for z, _ in skins] == [0.2, 0.3, 0.4]
    assert polygon_set_area(skins[0][1]) == pytest.approx(8.0)
