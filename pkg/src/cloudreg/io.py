"""ASCII XYZ / PLY readers and writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud


class CloudFormatError(ValueError):
    pass


def read_xyz(path) -> PointCloud:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise CloudFormatError(f"{path}:{lineno}: expected 'x y z'")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, fmt="%.17g")


def read_ply(path) -> PointCloud:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.readline().strip() != b"ply":
            raise CloudFormatError(f"{path}: missing 'ply' magic")
        n_vertex = None
        props: list[str] = []
        in_vertex = False
        fmt = None
        while True:
            raw = fh.readline()
            if not raw:
                raise CloudFormatError(f"{path}: unterminated header")
            tokens = raw.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
                if fmt != "ascii":
                    raise CloudFormatError(f"{path}: binary PLY ({fmt}) is not supported")
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                props.append(tokens[-1])
            elif tokens[0] == "end_header":
                break
        if fmt is None or n_vertex is None:
            raise CloudFormatError(f"{path}: header lacks format or vertex element")
        missing = {"x", "y", "z"} - set(props)
        if missing:
            raise CloudFormatError(f"{path}: vertex lacks properties {sorted(missing)}")
        body = fh.read().decode("ascii").splitlines()
    lines = [ln for ln in body if ln.strip()][:n_vertex]
    if len(lines) < n_vertex:
        raise CloudFormatError(f"{path}: expected {n_vertex} vertices, found {len(lines)}")
    data = np.array([[float(v) for v in ln.split()[:len(props)]] for ln in lines]).reshape(n_vertex, len(props))
    col = {name: i for i, name in enumerate(props)}
    points = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if {"nx", "ny", "nz"} <= set(props):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points, normals)


def write_ply(path, cloud: PointCloud) -> None:
    has_n = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    if has_n:
        header += ["property double nx", "property double ny", "property double nz"]
    header.append("end_header")
    data = np.hstack([cloud.points, cloud.normals]) if has_n else cloud.points
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, data, fmt="%.17g")


def read_cloud(path) -> PointCloud:
    """Dispatch on file suffix (.ply, anything else read as XYZ)."""
    if Path(path).suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)
