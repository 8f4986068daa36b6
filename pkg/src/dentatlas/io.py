"""File formats: MetaImage volumes and fields, ASCII PLY meshes, JSON transforms
and shape models, CSV traces.

MetaImage headers are written with exactly these keys, in this order::

    ObjectType NDims DimSize ElementSpacing Offset [ElementNumberOfChannels]
    ElementType ElementByteOrderMSB ElementDataFile

Unknown keys are ignored on read. Payloads are little-endian with x varying
fastest; vector fields interleave their three components per voxel.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .register.fields import DisplacementField
from .register.transforms import transform_from_dict
from .shape.mesh import SurfaceMesh
from .shape.pca import CorrespondedShapeSet, ShapeModel
from .volgrid import Geometry, LabelGrid, VolumeGrid

_MET_TYPES = {"MET_FLOAT": "<f4", "MET_USHORT": "<u2", "MET_DOUBLE": "<f8", "MET_UCHAR": "u1",
              "MET_SHORT": "<i2"}


def _fmt(values):
    return " ".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in values)


def _write_mhd(path, geom: Geometry, payload: np.ndarray, met_type: str, channels: int = 1):
    path = Path(path)
    raw = path.with_suffix(".raw")
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {_fmt(geom.dims)}",
        f"ElementSpacing = {_fmt(geom.spacing)}",
        f"Offset = {_fmt(geom.origin)}",
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [f"ElementType = {met_type}", "ElementByteOrderMSB = False", f"ElementDataFile = {raw.name}"]
    path.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(payload).tobytes())
    path.write_text("\n".join(lines) + "\n")


def read_header(path) -> dict:
    header = {}
    for line in Path(path).read_text().splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _read_mhd(path):
    path = Path(path)
    h = read_header(path)
    try:
        if int(h.get("NDims", "3")) != 3:
            raise DataError(f"{path}: only 3-D images are supported")
        dims = tuple(int(x) for x in h["DimSize"].split())
        spacing = tuple(float(x) for x in h.get("ElementSpacing", "1 1 1").split())
        origin = tuple(float(x) for x in h.get("Offset", h.get("Origin", "0 0 0")).split())
        channels = int(h.get("ElementNumberOfChannels", "1"))
        dtype = np.dtype(_MET_TYPES[h["ElementType"]])
        data_file = h["ElementDataFile"]
    except KeyError as exc:
        raise DataError(f"{path}: missing or unsupported MetaImage key {exc}") from None
    if h.get("ElementByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    if data_file == "LOCAL":
        raise DataError(f"{path}: embedded (LOCAL) payloads are not supported")
    raw = np.fromfile(path.parent / data_file, dtype=dtype)
    expected = int(np.prod(dims)) * channels
    if raw.size != expected:
        raise DataError(f"{path}: payload holds {raw.size} values, header implies {expected}")
    geom = Geometry(dims, spacing, origin)
    if channels == 1:
        return geom, raw.reshape(dims, order="F"), h
    # (x, y, z, c) with c fastest, then x
    arr = raw.reshape((channels,) + dims, order="F")
    return geom, arr, h


def write_volume(path, v: VolumeGrid):
    _write_mhd(path, v.geometry, np.asarray(v.data, dtype="<f4").ravel(order="F"), "MET_FLOAT")


def write_labels(path, labels: LabelGrid):
    _write_mhd(path, labels.geometry, np.asarray(labels.data, dtype="<u2").ravel(order="F"), "MET_USHORT")


def read_volume(path) -> VolumeGrid:
    geom, arr, _ = _read_mhd(path)
    if arr.ndim != 3:
        raise DataError(f"{path}: expected a scalar image")
    return VolumeGrid(geom, arr.astype(np.float32))


def read_labels(path) -> LabelGrid:
    geom, arr, _ = _read_mhd(path)
    if arr.ndim != 3:
        raise DataError(f"{path}: expected a scalar label image")
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(arr == np.round(arr)):
            raise DataError(f"{path}: label image holds non-integer values")
    return LabelGrid(geom, arr.astype(np.uint16))


def read_image(path):
    """Volume or label grid depending on the stored element type."""
    h = read_header(path)
    return read_labels(path) if h.get("ElementType") == "MET_USHORT" else read_volume(path)


def write_field(path, f: DisplacementField):
    payload = np.asarray(f.vectors, dtype="<f4").reshape(3, -1, order="F")
    _write_mhd(path, f.geometry, payload.T.ravel(), "MET_FLOAT", channels=3)


def read_field(path) -> DisplacementField:
    geom, arr, _ = _read_mhd(path)
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise DataError(f"{path}: expected a 3-channel displacement field")
    return DisplacementField(geom, arr.astype(np.float64))


# ---- meshes ----------------------------------------------------------------

def write_ply(path, mesh: SurfaceMesh):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_labels = mesh.labels is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
             "property double x", "property double y", "property double z"]
    if with_labels:
        lines.append("property int label")
    lines += [f"element face {mesh.n_triangles}", "property list uchar int vertex_indices", "end_header"]
    for i, v in enumerate(mesh.vertices):
        row = f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}"
        if with_labels:
            row += f" {int(mesh.labels[i])}"
        lines.append(row)
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")


def read_ply(path) -> SurfaceMesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    props = []
    i = 1
    element = None
    while i < len(text):
        tok = text[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise DataError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            element = tok[1]
            if element == "vertex":
                n_vert = int(tok[2])
            elif element == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and element == "vertex":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    rows = [ln.split() for ln in text[i:i + n_vert]]
    verts = np.array([[float(r[props.index(k)]) for k in "xyz"] for r in rows]).reshape(-1, 3)
    labels = np.array([int(r[props.index("label")]) for r in rows]) if "label" in props else None
    faces = []
    for ln in text[i + n_vert:i + n_vert + n_face]:
        r = ln.split()
        k = int(r[0])
        idx = [int(x) for x in r[1:1 + k]]
        faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, k - 1))
    return SurfaceMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), labels)


# ---- JSON ------------------------------------------------------------------

def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def write_transform(path, t):
    write_json(path, t.to_dict())


def read_transform(path):
    return transform_from_dict(read_json(path))


def _write_blob(path, arr):
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(path, shape):
    a = np.fromfile(path, dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise DataError(f"{path}: blob size {a.size} does not match {shape}")
    return a.reshape(shape)


def write_shape_model(path, model: ShapeModel):
    """JSON header plus ``<stem>.mean.bin`` / ``<stem>.modes.bin`` / ``<stem>.triangles.bin``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    names = {k: f"{stem.name}.{k}.bin" for k in ("mean", "modes", "triangles")}
    _write_blob(path.parent / names["mean"], model.mean)
    _write_blob(path.parent / names["modes"], model.modes)
    _write_blob(path.parent / names["triangles"], model.triangles)
    write_json(path, {
        "format": "dentatlas-shape-model",
        "n_vertices": model.n_vertices,
        "n_modes": model.n_modes,
        "n_subjects": model.n_subjects,
        "n_triangles": int(model.triangles.shape[0]),
        "eigenvalues": [float(x) for x in model.eigenvalues],
        "explained_variance_ratio": [float(x) for x in model.explained_variance_ratio],
        "total_variance": float(model.total_variance),
        "blobs": names,
        "dtype": "float64-le",
    })


def read_shape_model(path) -> ShapeModel:
    path = Path(path)
    h = read_json(path)
    m, k = int(h["n_vertices"]), int(h["n_modes"])
    blobs = h["blobs"]
    mean = _read_blob(path.parent / blobs["mean"], (3 * m,))
    modes = _read_blob(path.parent / blobs["modes"], (3 * m, k))
    tris = _read_blob(path.parent / blobs["triangles"], (int(h["n_triangles"]), 3)).astype(np.int64)
    return ShapeModel(mean, modes, np.asarray(h["eigenvalues"], dtype=float),
                      np.asarray(h["explained_variance_ratio"], dtype=float), float(h["total_variance"]),
                      int(h["n_subjects"]), tris)


def write_shape_set(path, shapes: CorrespondedShapeSet):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    names = {"shapes": f"{stem.name}.shapes.bin", "triangles": f"{stem.name}.triangles.bin"}
    _write_blob(path.parent / names["shapes"], shapes.shapes)
    _write_blob(path.parent / names["triangles"], shapes.triangles)
    write_json(path, {
        "format": "dentatlas-shape-set",
        "n_subjects": shapes.n_subjects,
        "n_vertices": shapes.n_vertices,
        "n_triangles": int(shapes.triangles.shape[0]),
        "source_ids": list(shapes.source_ids),
        "blobs": names,
        "dtype": "float64-le",
    })


def read_shape_set(path) -> CorrespondedShapeSet:
    path = Path(path)
    h = read_json(path)
    n, m = int(h["n_subjects"]), int(h["n_vertices"])
    shapes = _read_blob(path.parent / h["blobs"]["shapes"], (n, m, 3))
    tris = _read_blob(path.parent / h["blobs"]["triangles"], (int(h["n_triangles"]), 3)).astype(np.int64)
    return CorrespondedShapeSet(tris, shapes, tuple(h["source_ids"]))


# ---- CSV -------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "mean_metric", "mean_field_norm")


def write_trace(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.iteration, repr(float(r.mean_metric)), repr(float(r.mean_field_norm))])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"iteration": int(r["iteration"]), "mean_metric": float(r["mean_metric"]),
                 "mean_field_norm": float(r["mean_field_norm"])} for r in csv.DictReader(fh)]


def resolve(base, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def relpath(p, base) -> str:
    return os.path.relpath(p, base)
