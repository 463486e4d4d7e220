"""PLY reader/writer (ASCII and binary little-endian).

Supports vertex clouds with optional per-point normals and uchar colors,
triangular faces, and edge elements (used for match visualization).
Coordinates are written as float64 so datasets round-trip losslessly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_SCALAR_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_ASCII_CASTERS = {"i1": int, "u1": int, "i2": int, "u2": int, "i4": int, "u4": int,
                  "f4": float, "f8": float}


class PlyParseError(ValueError):
    """Malformed or unsupported PLY content."""


@dataclass
class PlyContents:
    points: np.ndarray                     # (n, 3) float64
    normals: np.ndarray | None = None      # (n, 3) float64
    colors: np.ndarray | None = None       # (n, 3) uint8
    faces: np.ndarray | None = None        # (f, 3) int32
    edges: np.ndarray | None = None        # (e, 2) int32


def write_ply(path, contents: PlyContents, binary: bool = False) -> None:
    path = Path(path)
    pts = np.asarray(contents.points, dtype=np.float64)
    n = pts.shape[0]
    has_normals = contents.normals is not None
    has_colors = contents.colors is not None

    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property double x", "property double y", "property double z"]
    if has_normals:
        header += ["property double nx", "property double ny", "property double nz"]
    if has_colors:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if contents.faces is not None:
        header.append(f"element face {len(contents.faces)}")
        header.append("property list uchar int vertex_indices")
    if contents.edges is not None:
        header.append(f"element edge {len(contents.edges)}")
        header += ["property int vertex1", "property int vertex2"]
    header.append("end_header")

    cols: list[np.ndarray] = [pts]
    if has_normals:
        cols.append(np.asarray(contents.normals, dtype=np.float64))
    if has_colors:
        cols.append(np.asarray(contents.colors, dtype=np.uint8))

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if has_normals:
                fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
            if has_colors:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            if has_normals:
                nm = np.asarray(contents.normals, dtype=np.float64)
                rec["nx"], rec["ny"], rec["nz"] = nm[:, 0], nm[:, 1], nm[:, 2]
            if has_colors:
                cl = np.asarray(contents.colors, dtype=np.uint8)
                rec["red"], rec["green"], rec["blue"] = cl[:, 0], cl[:, 1], cl[:, 2]
            fh.write(rec.tobytes())
            if contents.faces is not None:
                for face in np.asarray(contents.faces, dtype=np.int32):
                    fh.write(struct.pack("<B3i", 3, *face))
            if contents.edges is not None:
                for edge in np.asarray(contents.edges, dtype=np.int32):
                    fh.write(struct.pack("<2i", *edge))
        else:
            for row in range(n):
                parts = [repr(float(v)) for v in pts[row]]
                if has_normals:
                    parts += [repr(float(v)) for v in contents.normals[row]]
                if has_colors:
                    parts += [str(int(v)) for v in contents.colors[row]]
                fh.write((" ".join(parts) + "\n").encode("ascii"))
            if contents.faces is not None:
                for face in np.asarray(contents.faces, dtype=np.int64):
                    fh.write(f"3 {face[0]} {face[1]} {face[2]}\n".encode("ascii"))
            if contents.edges is not None:
                for edge in np.asarray(contents.edges, dtype=np.int64):
                    fh.write(f"{edge[0]} {edge[1]}\n".encode("ascii"))


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if end < 0:
        raise PlyParseError("missing end_header")
    end = raw.find(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError("not a PLY file")
    fmt = None
    elements: list[dict] = []
    for line in lines[1:]:
        tok = line.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported format {tok[1]}")
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before element")
            if tok[1] == "list":
                elements[-1]["props"].append(("list", tok[2], tok[3], tok[4]))
            else:
                if tok[1] not in _SCALAR_TYPES:
                    raise PlyParseError(f"unsupported property type {tok[1]}")
                elements[-1]["props"].append(("scalar", tok[1], tok[2]))
        elif tok[0] == "end_header":
            break
    if fmt is None:
        raise PlyParseError("missing format line")
    return fmt, elements, end


def _read_ascii_element(rows: list[str], element) -> dict:
    out: dict[str, list] = {}
    lists: dict[str, list] = {}
    for p in element["props"]:
        if p[0] == "scalar":
            out[p[2]] = []
        else:
            lists[p[3]] = []
    for line in rows:
        tok = line.split()
        pos = 0
        for p in element["props"]:
            if p[0] == "scalar":
                out[p[2]].append(_ASCII_CASTERS[_SCALAR_TYPES[p[1]]](tok[pos]))
                pos += 1
            else:
                cnt = int(tok[pos])
                pos += 1
                lists[p[3]].append([int(v) for v in tok[pos:pos + cnt]])
                pos += cnt
    return {"scalars": out, "lists": lists}


def read_ply(path) -> PlyContents:
    raw = Path(path).read_bytes()
    fmt, elements, offset = _parse_header(raw)

    parsed: dict[str, dict] = {}
    if fmt == "ascii":
        lines = raw[offset:].decode("ascii").splitlines()
        cursor = 0
        for el in elements:
            rows = lines[cursor:cursor + el["count"]]
            if len(rows) < el["count"]:
                raise PlyParseError(f"truncated {el['name']} data")
            parsed[el["name"]] = _read_ascii_element(rows, el)
            cursor += el["count"]
    else:
        cursor = offset
        for el in elements:
            scalars: dict[str, list] = {p[2]: [] for p in el["props"] if p[0] == "scalar"}
            lists: dict[str, list] = {p[3]: [] for p in el["props"] if p[0] == "list"}
            if all(p[0] == "scalar" for p in el["props"]):
                dt = np.dtype([(p[2], "<" + _SCALAR_TYPES[p[1]]) for p in el["props"]])
                block = raw[cursor:cursor + dt.itemsize * el["count"]]
                if len(block) < dt.itemsize * el["count"]:
                    raise PlyParseError(f"truncated {el['name']} data")
                rec = np.frombuffer(block, dtype=dt)
                cursor += dt.itemsize * el["count"]
                parsed[el["name"]] = {
                    "scalars": {name: rec[name] for name in rec.dtype.names},
                    "lists": {},
                }
                continue
            for _ in range(el["count"]):
                for p in el["props"]:
                    if p[0] == "scalar":
                        code = "<" + _SCALAR_TYPES[p[1]]
                        size = np.dtype(code).itemsize
                        (val,) = np.frombuffer(raw[cursor:cursor + size], dtype=code)
                        scalars[p[2]].append(val)
                        cursor += size
                    else:
                        ccode = "<" + _SCALAR_TYPES[p[1]]
                        csize = np.dtype(ccode).itemsize
                        (cnt,) = np.frombuffer(raw[cursor:cursor + csize], dtype=ccode)
                        cursor += csize
                        icode = "<" + _SCALAR_TYPES[p[2]]
                        isize = np.dtype(icode).itemsize
                        vals = np.frombuffer(raw[cursor:cursor + isize * int(cnt)], dtype=icode)
                        cursor += isize * int(cnt)
                        lists[p[3]].append([int(v) for v in vals])
            parsed[el["name"]] = {"scalars": scalars, "lists": lists}

    if "vertex" not in parsed:
        raise PlyParseError("PLY file has no vertex element")
    v = parsed["vertex"]["scalars"]
    for axis in ("x", "y", "z"):
        if axis not in v:
            raise PlyParseError(f"vertex element missing property {axis}")
    points = np.column_stack(
        [np.asarray(v["x"], dtype=np.float64),
         np.asarray(v["y"], dtype=np.float64),
         np.asarray(v["z"], dtype=np.float64)]
    )
    normals = None
    if all(name in v for name in ("nx", "ny", "nz")):
        normals = np.column_stack(
            [np.asarray(v[n], dtype=np.float64) for n in ("nx", "ny", "nz")]
        )
    colors = None
    if all(name in v for name in ("red", "green", "blue")):
        colors = np.column_stack(
            [np.asarray(v[c], dtype=np.uint8) for c in ("red", "green", "blue")]
        )
    faces = None
    if "face" in parsed and parsed["face"]["lists"]:
        rows = next(iter(parsed["face"]["lists"].values()))
        if rows:
            if any(len(r) != 3 for r in rows):
                raise PlyParseError("only triangular faces are supported")
            faces = np.asarray(rows, dtype=np.int32)
    edges = None
    if "edge" in parsed:
        e = parsed["edge"]["scalars"]
        if "vertex1" in e and "vertex2" in e:
            edges = np.column_stack(
                [np.asarray(e["vertex1"], dtype=np.int32),
                 np.asarray(e["vertex2"], dtype=np.int32)]
            )
    return PlyContents(points=points, normals=normals, colors=colors,
                       faces=faces, edges=edges)
