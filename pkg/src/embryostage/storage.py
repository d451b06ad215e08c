"""On-disk formats: embryo CSV files, model checkpoints, manifests, reports.

Embryo CSV: header ``frame,id,x_um,y_um,z_um,dx_um,dy_um,dz_um``, one row per
point per frame, frames contiguous from 0, empty displacement fields meaning
"absent". Floats are written with ``repr`` so they read back bit-exact.

Checkpoint: ``<name>`` is a JSON manifest (format version, layer names and
shapes, normalization, training config) and ``<name>.bin`` holds all layers
as little-endian float64, concatenated in manifest order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .core import Embryo4D, Frame, StageLabelMap, validate_embryo
from .pointnet import NormalizationSpec, PointNetRegressor

CSV_HEADER = ["frame", "id", "x_um", "y_um", "z_um", "dx_um", "dy_um", "dz_um"]
CHECKPOINT_FORMAT = "embryostage-pointnet"
CHECKPOINT_VERSION = 1


class EmbryoParseError(ValueError):
    """A row of an embryo CSV could not be parsed."""


class EmbryoStructureError(ValueError):
    """The CSV parsed but does not describe a valid embryo."""


# -- embryo CSV --------------------------------------------------------------


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def save_embryo_csv(embryo: Embryo4D, path) -> None:
    report = validate_embryo(embryo)
    if not report.ok:
        raise EmbryoStructureError(f"refusing to write invalid embryo: {report.failures[0]}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for frame in embryo.frames:
            rows = np.hstack([frame.points, frame.displacements])
            fh.writelines(
                f"{frame.index},{i}," + ",".join(map(_fmt, row)) + "\n" for i, row in enumerate(rows.tolist())
            )


def load_embryo_csv(path, label_map: Optional[StageLabelMap] = None, hpf_start: float = 4.7,
                    hpf_end: float = 10.0) -> Embryo4D:
    """Read and validate an embryo; labels span ``hpf_start..hpf_end`` unless a map is given."""
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n").split(",")
    if header != CSV_HEADER:
        raise EmbryoParseError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
    try:
        df = pd.read_csv(path, dtype={c: np.float64 for c in CSV_HEADER[2:]} | {"frame": np.int64, "id": np.int64},
                         float_precision="round_trip", keep_default_na=False, na_values=[""], engine="c")
    except (ValueError, pd.errors.ParserError) as exc:
        _locate_bad_row(path)
        raise EmbryoParseError(f"{path}: {exc}") from exc
    if len(df) == 0:
        raise EmbryoStructureError(f"{path}: no data rows")
    _check_nan_rows(path, df)

    frame_col = df["frame"].to_numpy()
    if np.any(np.diff(frame_col) < 0):
        raise EmbryoStructureError(f"{path}: rows are not grouped by ascending frame")
    present = np.unique(frame_col)
    if present[0] != 0 or np.any(np.diff(present) != 1):
        raise EmbryoStructureError(f"{path}: frame numbers must run 0..{len(present) - 1} without gaps")
    ids = df["id"].to_numpy()
    coords = df[CSV_HEADER[2:5]].to_numpy()
    disp = df[CSV_HEADER[5:]].to_numpy()
    bounds = np.searchsorted(frame_col, np.arange(len(present) + 1))
    frames = []
    for k in range(len(present)):
        sl = slice(bounds[k], bounds[k + 1])
        if np.any(ids[sl] != np.arange(sl.stop - sl.start)):
            raise EmbryoStructureError(f"{path}: frame {k}: point ids must run 0..n-1 in order")
        frames.append(Frame(k, coords[sl], disp[sl]))
    lm = label_map or StageLabelMap(hpf_start, hpf_end, len(frames))
    embryo = Embryo4D(frames, lm)
    report = validate_embryo(embryo)
    if not report.ok:
        raise EmbryoStructureError(f"{path}: {report.failures[0]}")
    return embryo


def _check_nan_rows(path, df):
    bad = df[CSV_HEADER[:5]].isna().any(axis=1).to_numpy()
    if bad.any():
        line = int(np.flatnonzero(bad)[0]) + 2
        raise EmbryoParseError(f"{path}: line {line}: missing frame, id or coordinate")


def _locate_bad_row(path):
    """Slow pass that names the first malformed line."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise EmbryoParseError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                int(row[0]), int(row[1])
                [float(x) for x in row[2:5]]
                [float(x) for x in row[5:] if x != ""]
            except ValueError as exc:
                raise EmbryoParseError(f"{path}: line {lineno}: {exc}") from None


def load_cloud_csv(path) -> np.ndarray:
    """A single point cloud: either an embryo CSV's single frame or bare ``x_um,y_um,z_um`` columns."""
    df = pd.read_csv(path, float_precision="round_trip")
    cols = ["x_um", "y_um", "z_um"]
    if not set(cols) <= set(df.columns):
        raise EmbryoParseError(f"{path}: expected columns {','.join(cols)}")
    pts = df[cols].to_numpy(dtype=np.float64)
    if len(pts) == 0 or not np.all(np.isfinite(pts)):
        raise EmbryoParseError(f"{path}: empty cloud or non-finite coordinates")
    return pts


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: PointNetRegressor, path, normalization: NormalizationSpec,
                    training: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    layers, chunks, offset = [], [], 0
    for name, arr in model.state_dict().items():
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "blob": blob_path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "ortho_weight": model.ortho_weight,
        "normalization": {"mode": normalization.mode, "scale": normalization.scale},
        "training": training or {},
        "layers": layers,
    }
    if extra:
        manifest["extra"] = extra
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    model: PointNetRegressor
    normalization: NormalizationSpec
    training: dict
    manifest: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    blob = path.with_name(manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{path}: weight blob checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8")
    state = {}
    for layer in manifest["layers"]:
        start = layer["offset"]
        state[layer["name"]] = flat[start:start + layer["count"]].reshape(layer["shape"]).astype(np.float64)
    model = PointNetRegressor(seed=0, ortho_weight=manifest.get("ortho_weight", 0.001))
    model.load_state_dict(state)
    return Checkpoint(model, NormalizationSpec(**manifest["normalization"]), manifest.get("training", {}), manifest)


# -- manifests and reports -----------------------------------------------------


@dataclass
class ManifestEntry:
    embryo_id: str
    path: Path
    label_map: StageLabelMap
    role: str = "simulated"


def load_manifest(path) -> List[ManifestEntry]:
    """JSON list of embryos: ``{"embryos": [{"id", "path", "hpf_start", "hpf_end", "role"}]}``.

    Relative paths resolve against the manifest's directory. The frame count
    of each label map is taken from the CSV when loading.
    """
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    entries, seen = [], set()
    for item in data["embryos"]:
        eid = str(item["id"])
        if eid in seen:
            raise ValueError(f"{path}: duplicate embryo id {eid!r}")
        seen.add(eid)
        p = Path(item["path"])
        p = p if p.is_absolute() else path.parent / p
        if not p.exists():
            raise FileNotFoundError(f"{path}: {eid}: {p} does not exist")
        role = item.get("role", "simulated")
        if role not in ("real", "simulated"):
            raise ValueError(f"{path}: {eid}: role must be 'real' or 'simulated'")
        lm = StageLabelMap(float(item.get("hpf_start", 4.7)), float(item.get("hpf_end", 10.0)), 2)
        entries.append(ManifestEntry(eid, p, lm, role))
    return entries


def load_dataset(entries: List[ManifestEntry]) -> Dict[str, Embryo4D]:
    return {
        e.embryo_id: load_embryo_csv(e.path, hpf_start=e.label_map.hpf_start, hpf_end=e.label_map.hpf_end)
        for e in entries
    }


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def write_loss_csv(losses: Dict[str, List[float]], path) -> None:
    """Long format: ``run,epoch,mse_h2``."""
    buf = io.StringIO()
    buf.write("run,epoch,mse_h2\n")
    for run, curve in losses.items():
        for epoch, value in enumerate(curve, start=1):
            buf.write(f"{run},{epoch},{value!r}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def default_blob_path(path) -> str:
    return os.fspath(path) + ".bin"
