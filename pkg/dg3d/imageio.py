"""Netpbm image files and Wavefront OBJ meshes."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
import numpy.typing as npt
from PIL import Image

from .numgrad import Array


def to_u8(pixels: Array) -> npt.NDArray[np.uint8]:
    """round(clamp(v, 0, 1) * 255)."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: Path, pixels: Array) -> None:
    """P6, 8-bit; single-channel input is replicated to RGB."""
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.shape[-1] == 1:
        pixels = np.repeat(pixels, 3, axis=-1)
    Image.fromarray(to_u8(pixels)).save(path, format="PPM")


def read_ppm(path: Path) -> Array:
    with Image.open(path) as image:
        if image.format != "PPM":
            raise ValueError(f"{path} is {image.format}, not PPM")
        rgb = np.asarray(image.convert("RGB"), dtype=np.float64)
    out: Array = rgb / 255.0
    return out


def write_pgm(path: Path, values: Array, bits: Literal[8, 16] = 8) -> None:
    """P5; ``values`` in [0, 1] are scaled to the full range of ``bits``."""
    if bits == 8:
        Image.fromarray(to_u8(values)).save(path, format="PPM")
    else:
        write_pgm_u16(path, np.round(np.clip(values, 0.0, 1.0) * 65535.0))


def write_pgm_u16(path: Path, values: Array) -> None:
    """P5, 16-bit, from raw integer levels in [0, 65535]."""
    # Pillow writes mode "I" as big-endian 16-bit P5 with maxval 65535
    levels = np.clip(values, 0, 65535).astype(np.int32)
    Image.fromarray(levels).save(path, format="PPM")


def read_pgm(path: Path) -> npt.NDArray[np.int64]:
    """Raw integer levels of an 8- or 16-bit P5 file."""
    with Image.open(path) as image:
        return np.asarray(image, dtype=np.int64)


def write_obj(
    path: Path,
    vertices: Array,
    faces: npt.NDArray[np.int64],
    uv: Optional[Array] = None,
    material: Optional[str] = None,
) -> None:
    lines = []
    if material is not None:
        lines.append(f"mtllib {material}.mtl")
        lines.append(f"usemtl {material}")
    lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in vertices.tolist())
    if uv is not None:
        lines.extend(f"vt {u!r} {v!r}" for u, v in uv.tolist())
        lines.extend(
            "f " + " ".join(f"{i + 1}/{i + 1}" for i in face) for face in faces.tolist()
        )
    else:
        lines.extend("f " + " ".join(str(i + 1) for i in face) for face in faces.tolist())
    path.write_text("\n".join(lines) + "\n")
    if material is not None:
        (path.parent / f"{material}.mtl").write_text(
            f"newmtl {material}\nKa 1 1 1\nKd 1 1 1\nmap_Kd {material}.ppm\n"
        )


def read_obj(path: Path) -> tuple[Array, npt.NDArray[np.int64], Optional[Array], Optional[str]]:
    """Vertices, faces, per-vertex uv, and the diffuse texture file named by the material.

    Faces whose uv index differs from the vertex index get their vertex
    duplicated so that every vertex carries one uv.
    """
    positions: list[list[float]] = []
    coords: list[list[float]] = []
    corners: list[list[tuple[int, Optional[int]]]] = []
    library: Optional[str] = None
    for raw in path.read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            positions.append([float(p) for p in parts[1:4]])
        elif parts[0] == "vt":
            coords.append([float(p) for p in parts[1:3]])
        elif parts[0] == "f":
            face = []
            for item in parts[1:]:
                fields = item.split("/")
                vt = int(fields[1]) - 1 if len(fields) > 1 and fields[1] else None
                face.append((int(fields[0]) - 1, vt))
            for i in range(1, len(face) - 1):
                corners.append([face[0], face[i], face[i + 1]])
        elif parts[0] == "mtllib":
            library = parts[1]
    if not positions:
        raise ValueError(f"{path} holds no vertices")
    texture = _diffuse_texture(path.parent / library) if library else None
    if not coords:
        faces = np.array([[v for v, _ in face] for face in corners], dtype=np.int64)
        return np.array(positions), faces.reshape(-1, 3), None, texture
    index: dict[tuple[int, Optional[int]], int] = {}
    vertices: list[list[float]] = []
    uv: list[list[float]] = []
    faces_list = []
    for face in corners:
        row = []
        for corner in face:
            if corner not in index:
                index[corner] = len(vertices)
                vertices.append(positions[corner[0]])
                uv.append(coords[corner[1]] if corner[1] is not None else [0.0, 0.0])
            row.append(index[corner])
        faces_list.append(row)
    return (
        np.array(vertices),
        np.array(faces_list, dtype=np.int64).reshape(-1, 3),
        np.array(uv),
        texture,
    )


def _diffuse_texture(library: Path) -> Optional[str]:
    if not library.exists():
        return None
    for raw in library.read_text().splitlines():
        parts = raw.split()
        if parts and parts[0] == "map_Kd":
            return str(library.parent / parts[-1])
    return None
