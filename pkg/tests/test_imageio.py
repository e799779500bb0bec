from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dg3d.imageio import read_obj, read_pgm, read_ppm, to_u8, write_obj, write_pgm, write_pgm_u16, write_ppm


def test_ppm_quantizes_and_clamps(tmp_path: Path) -> None:
    pixels = np.array([[[-0.2, 0.5, 1.7], [0.2, 0.0, 1.0]]])
    write_ppm(tmp_path / "a.ppm", pixels)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")
    back = read_ppm(tmp_path / "a.ppm")
    assert (back * 255.0).round().astype(int).tolist() == [[[0, 128, 255], [51, 0, 255]]]
    assert to_u8(np.array([0.5])).tolist() == [128]


def test_gray_ppm_is_replicated(tmp_path: Path) -> None:
    write_ppm(tmp_path / "g.ppm", np.array([[0.0, 1.0]]))
    assert read_ppm(tmp_path / "g.ppm").tolist() == [[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]]


def test_read_ppm_rejects_other_formats(tmp_path: Path) -> None:
    from PIL import Image

    Image.new("RGB", (2, 2)).save(tmp_path / "x.png")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "x.png")


def test_pgm_levels(tmp_path: Path) -> None:
    write_pgm_u16(tmp_path / "d.pgm", np.array([[0.0, 1234.0, 70000.0]]))
    data = (tmp_path / "d.pgm").read_bytes()
    assert data.startswith(b"P5")
    assert b"65535" in data[:20]
    assert read_pgm(tmp_path / "d.pgm").tolist() == [[0, 1234, 65535]]
    write_pgm(tmp_path / "m.pgm", np.array([[0.0, 1.0]]), bits=8)
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 255]]
    write_pgm(tmp_path / "h.pgm", np.array([[0.5]]), bits=16)
    assert read_pgm(tmp_path / "h.pgm").tolist() == [[32768]]


def test_obj_round_trip(tmp_path: Path) -> None:
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.5], [0.0, 1.0, 0.25]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    write_obj(tmp_path / "mesh.obj", vertices, faces, uv, material="texture")
    assert "map_Kd texture.ppm" in (tmp_path / "texture.mtl").read_text()
    got_vertices, got_faces, got_uv, texture = read_obj(tmp_path / "mesh.obj")
    assert got_vertices.tolist() == vertices.tolist()
    assert got_faces.tolist() == faces.tolist()
    assert got_uv is not None and got_uv.tolist() == uv.tolist()
    assert texture == str(tmp_path / "texture.ppm")


def test_obj_without_uv(tmp_path: Path) -> None:
    (tmp_path / "q.obj").write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    vertices, faces, uv, texture = read_obj(tmp_path / "q.obj")
    assert vertices.shape == (4, 3)
    assert faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    assert uv is None and texture is None


def test_obj_splits_seam_vertices(tmp_path: Path) -> None:
    (tmp_path / "s.obj").write_text(
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvt 0.5 0.5\nf 1/1 2/2 3/3\nf 1/4 3/3 2/2\n"
    )
    vertices, faces, uv, _ = read_obj(tmp_path / "s.obj")
    assert vertices.shape == (4, 3)
    assert uv is not None and uv[faces[1, 0]].tolist() == [0.5, 0.5]


def test_empty_obj(tmp_path: Path) -> None:
    (tmp_path / "e.obj").write_text("# nothing\n")
    with pytest.raises(ValueError):
        read_obj(tmp_path / "e.obj")
