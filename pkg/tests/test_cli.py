import json

import numpy as np
import pytest

from dentatlas import io
from dentatlas.cli import main
from dentatlas.shape import CorrespondedShapeSet
from dentatlas.volgrid import bounding_box_of_labels, crop_with_margin


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert main(["phantom", "make", "--seed", "0", "--n", "2", "--dims", "64", "--spacing", "0.6",
                 "--amplitude", "1.5", "--out", str(out)]) == 0
    return out


def test_phantom_make_layout(phantom_dir):
    manifest = io.read_json(phantom_dir / "manifest.json")
    assert [m["sign"] for m in manifest] == [1, -1]
    assert len(list((phantom_dir / "template" / "meshes").glob("*.ply"))) == 28
    prov = io.read_json(phantom_dir / "provenance.json")
    assert prov["command"] == "phantom make" and prov["seeds"][0] == 0
    assert "timestamp" not in json.dumps(prov)
    f = io.read_field(phantom_dir / "subjects" / "subject000" / "forward_field.mhd")
    g = io.read_field(phantom_dir / "subjects" / "subject001" / "forward_field.mhd")
    assert np.abs(f.vectors + g.vectors).max() < 1e-5


def test_enhance_crop_matches_margin_arithmetic(phantom_dir, tmp_path):
    vol = phantom_dir / "template" / "intensity.mhd"
    lab = phantom_dir / "template" / "labels.mhd"
    assert main(["enhance", "--volume", str(vol), "--labels", str(lab), "--out", str(tmp_path)]) == 0
    labels = io.read_labels(lab)
    want = crop_with_margin(labels, bounding_box_of_labels(labels), 30)
    got = io.read_labels(tmp_path / "labels.mhd")
    assert got.geometry == want.geometry
    assert np.array_equal(got.data, want.data)
    crop = io.read_json(tmp_path / "crop.json")
    assert crop["margin_voxels"] == 30 and crop["dims"] == list(want.geometry.dims)


def test_atlas_refuses_single_subject(phantom_dir, tmp_path, capsys):
    manifest = io.read_json(phantom_dir / "manifest.json")[:1]
    for m in manifest:
        for k in ("volume", "labels"):
            m[k] = str(phantom_dir / m[k])
    io.write_json(tmp_path / "one.json", manifest)
    assert main(["atlas", "build", "--manifest", str(tmp_path / "one.json"), "--out", str(tmp_path / "a")]) == 3
    assert "atlas build" in capsys.readouterr().err


def test_mesh_writes_every_tooth(phantom_dir, tmp_path):
    assert main(["mesh", "--input", str(phantom_dir / "template" / "labels.mhd"), "--label", "11",
                 "--out", str(tmp_path)]) == 0
    m = io.read_ply(tmp_path / "tooth_11.ply")
    assert m.is_closed()


@pytest.fixture
def one_mode_shapes(tmp_path, rng):
    mean = rng.normal(size=(30, 3))
    mode = rng.normal(size=(30, 3))
    shapes = np.stack([mean + c * mode for c in rng.normal(size=8)])
    tris = np.array([[0, 1, 2], [1, 2, 3]])
    io.write_shape_set(tmp_path / "shapes.json", CorrespondedShapeSet(tris, shapes))
    return tmp_path / "shapes.json"


def test_pca_reports_one_mode(one_mode_shapes, tmp_path, capsys):
    out = tmp_path / "model"
    assert main(["pca", "--shapes", str(one_mode_shapes), "--threshold", "0.85", "--out", str(out)]) == 0
    assert "k = 1 " in capsys.readouterr().out
    assert io.read_json(out / "report.json")["k"] == 1
    assert main(["synth", "--model", str(out / "model.json"), "--pc", "1", "--steps", "3",
                 "--out", str(tmp_path / "synth")]) == 0
    assert len(list((tmp_path / "synth").glob("*.ply"))) == 3
    assert main(["shape", "synth", "--model", str(out / "model.json"), "--pc", "2",
                 "--out", str(tmp_path / "bad")]) == 3


def test_unknown_config_key_exits_2(one_mode_shapes, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"shape": {"pca_treshold": 0.9}}))
    assert main(["pca", "--shapes", str(one_mode_shapes), "--config", str(cfg)]) == 2
    assert "shape.pca_treshold" in capsys.readouterr().err


def test_config_init_roundtrip(tmp_path):
    assert main(["config", "init", "--out", str(tmp_path / "c.json")]) == 0
    assert main(["pca", "--shapes", str(tmp_path / "missing.json"), "--config", str(tmp_path / "c.json")]) == 3


def test_bad_sd_range_is_config_error(one_mode_shapes, tmp_path):
    out = tmp_path / "m"
    assert main(["pca", "--shapes", str(one_mode_shapes), "--out", str(out)]) == 0
    assert main(["synth", "--model", str(out / "model.json"), "--sd", "abc", "--out", str(tmp_path)]) == 2
