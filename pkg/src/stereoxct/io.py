"""File formats: raw f32le arrays with JSON sidecars, PNG/PGM masks, JSON records."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .detector import FeatureMask
from .geometry import GridSpec, ViewGeometry
from .mapper import Feature3D
from .matcher import FeatureCandidate, LineMatch, Match
from .phantom import FeatureSetTruth, Volume3D
from .projector import ProjectionImage

DTYPE = "f32le"


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _write_raw(path, arr) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_raw(path, count: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != count:
        raise ValueError(f"{path}: expected {count} values, found {data.size}")
    return data.astype(np.float64)


def save_volume(path, volume: Volume3D) -> None:
    """Raw float32 little-endian with x fastest, plus ``<path>.json``."""
    _write_raw(path, np.ravel(volume.data, order="F"))
    g = volume.grid
    _write_json(sidecar_path(path), {"dims": list(g.dims), "voxel_size": list(g.voxel),
                                     "origin": list(g.origin), "dtype": DTYPE})


def load_volume(path) -> Volume3D:
    meta = _read_json(sidecar_path(path))
    if meta.get("dtype", DTYPE) != DTYPE:
        raise ValueError(f"unsupported dtype {meta['dtype']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    grid = GridSpec(tuple(meta["origin"]), tuple(meta["voxel_size"]), dims)
    data = _read_raw(path, int(np.prod(dims))).reshape(dims, order="F")
    return Volume3D(grid, data)


def save_projection(path, proj: ProjectionImage, view_id: int | None = None) -> None:
    """Raw float32 row-major ``[v, u]`` plus a sidecar holding the view."""
    _write_raw(path, proj.data)
    _write_json(sidecar_path(path), {"size": [proj.n_u, proj.n_v], "n_u": proj.n_u,
                                     "n_v": proj.n_v, "dtype": DTYPE, "view_id": view_id,
                                     "view": proj.view.to_dict()})


def export_projection_image(path, proj: ProjectionImage, bits: int = 8, window=None) -> tuple:
    """Linearly windowed 8/16-bit PNG or PGM; the window goes into the sidecar."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    data = np.asarray(proj.data, dtype=np.float64)
    lo, hi = (float(data.min()), float(data.max())) if window is None else map(float, window)
    span = hi - lo if hi > lo else 1.0
    top = (1 << bits) - 1
    q = np.round(np.clip((data - lo) / span, 0.0, 1.0) * top)
    img = Image.fromarray(q.astype(np.uint8 if bits == 8 else np.uint16))
    img.save(path)
    _write_json(sidecar_path(path), {"size": [proj.n_u, proj.n_v], "bits": bits,
                                     "window": [lo, hi]})
    return lo, hi


def load_projection(path, view: ViewGeometry | None = None) -> ProjectionImage:
    meta = _read_json(sidecar_path(path))
    view = view or ViewGeometry.from_dict(meta["view"])
    data = _read_raw(path, meta["n_u"] * meta["n_v"]).reshape(meta["n_v"], meta["n_u"])
    return ProjectionImage(data, view)


def save_mask(path, mask: FeatureMask, score_path=None) -> None:
    """1-bit PNG (or PGM by suffix); optional raw score map with sidecar."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        Image.fromarray(np.asarray(mask.bits, dtype=np.uint8) * 255).save(path)
    else:
        Image.fromarray(np.asarray(mask.bits, dtype=bool)).save(path)
    if score_path is not None and mask.score is not None:
        _write_raw(score_path, mask.score)
        _write_json(sidecar_path(score_path), {"n_u": mask.n_u, "n_v": mask.n_v,
                                               "dtype": DTYPE, "threshold": mask.threshold,
                                               "range": [0.0, 1.0]})


def load_mask(path, score_path=None) -> FeatureMask:
    bits = np.asarray(Image.open(path).convert("L")) > 127
    score, thr = None, None
    if score_path is not None:
        meta = _read_json(sidecar_path(score_path))
        score = _read_raw(score_path, meta["n_u"] * meta["n_v"]).reshape(meta["n_v"], meta["n_u"])
        thr = meta.get("threshold")
    return FeatureMask(bits, score, thr)


def save_truth(path, truth: FeatureSetTruth) -> None:
    _write_json(path, truth.to_dict())


def load_truth(path) -> FeatureSetTruth:
    return FeatureSetTruth.from_dict(_read_json(path))


def save_candidates(path, cands_by_view) -> None:
    _write_json(path, {"views": [[c.to_dict() for c in cs] for cs in cands_by_view]})


def load_candidates(path):
    d = _read_json(path)
    return [[FeatureCandidate.from_dict(c) for c in cs] for cs in d["views"]]


def save_matches(path, points, lines) -> None:
    _write_json(path, {"points": [m.to_dict() for m in points],
                       "lines": [m.to_dict() for m in lines]})


def load_matches(path):
    d = _read_json(path)
    return ([Match.from_dict(m) for m in d["points"]],
            [LineMatch.from_dict(m) for m in d["lines"]])


def save_features(path, features, grid: GridSpec | None = None) -> None:
    _write_json(path, {"features": [f.to_dict(grid) for f in features]})


def load_features(path):
    return [Feature3D.from_dict(f) for f in _read_json(path)["features"]]


def save_polylines_csv(path, features) -> None:
    """One row per vertex: feature index, vertex index, x, y, z (mm)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "vertex", "x", "y", "z"])
        for i, f in enumerate(features):
            if f.kind != "polyline":
                continue
            for j, p in enumerate(f.positions):
                w.writerow([i, j, *(repr(float(x)) for x in p)])
