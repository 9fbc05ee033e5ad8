"""Command line interface: pipeline stages as subcommands plus a chained run."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .detector import DetectorParams, calibrate, detect
from .errors import StereoXCTError
from .evaluation import (
    confusion, detection_table, localization_error, roc, write_csv, write_json, write_roc_csv,
)
from .geometry import GridSpec, StereoRig, default_rig, project_points
from .io import (
    load_candidates, load_features, load_mask, load_matches, load_projection, load_truth, load_volume,
    save_candidates, save_features, save_mask, save_matches, save_polylines_csv,
    save_projection, save_truth, save_volume,
)
from .mapper import VolumetricParams, reconstruct_line, triangulate, volumetric_map
from .matcher import (
    DEFAULT_LINE_TOL_PX, DEFAULT_TOL_PX, extract_candidates, match_lines, match_points,
)
from .phantom import PhantomRecipe, generate_phantom, item_seed, truth_mask
from .projector import forward_project

OUT_ROOT_ENV = "STEREOXCT_OUT_ROOT"
SCALES = {"desk": (128, 1.0), "full": (512, 0.25)}


class StageError(Exception):
    def __init__(self, stage: str, message: str, path=None):
        super().__init__(message)
        self.stage = stage
        self.path = None if path is None else str(path)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    scale: str = "desk"
    n_volumes: int = 1
    n_views: int = 2
    intensity_scale: float = 1.0
    recipe: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    calibrate_n_train: int = 0
    tol_px: float = DEFAULT_TOL_PX
    line_tol_px: float = DEFAULT_LINE_TOL_PX
    volumetric: bool = True
    relative_threshold: float = 0.5
    figures: bool = True

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {sorted(SCALES)}")
        if self.n_volumes < 1:
            raise ValueError("n_volumes must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @property
    def grid(self) -> GridSpec:
        n, vox = SCALES[self.scale]
        return GridSpec.centered(n, vox)

    def rig(self) -> StereoRig:
        return default_rig(self.grid, self.n_views)

    def recipe_for(self, index: int) -> PhantomRecipe:
        seed = self.seed if self.n_volumes == 1 else item_seed(self.seed, index)
        d = dict(self.recipe)
        d.update(seed=seed, intensity_scale=self.intensity_scale, grid=self.grid)
        return PhantomRecipe(**d)

    def detector_params(self) -> DetectorParams:
        return DetectorParams.from_dict(self.detector) if self.detector else DetectorParams()


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        return PipelineConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError) as e:
        raise StageError("config", str(e), path) from e


def resolve_out(out) -> Path:
    p = Path(out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stages (file in, file out)
# ---------------------------------------------------------------------------

def stage_phantom(recipe: PhantomRecipe, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    vol, truth = generate_phantom(recipe)
    save_volume(out / "volume.raw", vol)
    save_truth(out / "truth.json", truth)
    write_json(out / "recipe.json", recipe.to_dict())
    return {"volume": out / "volume.raw", "truth": out / "truth.json"}


def stage_project(volume_path, rig: StereoRig, view: int, out: Path) -> Path:
    vol = load_volume(volume_path)
    if not 0 <= view < len(rig.views):
        raise StageError("project", f"view {view} not in rig", volume_path)
    save_projection(out, forward_project(vol, rig.views[view]), view)
    return out


def stage_detect(proj_path, params: DetectorParams, mask_out: Path, score_out: Path | None):
    mask = detect(load_projection(proj_path), params)
    save_mask(mask_out, mask, score_out)
    return mask_out


def stage_match(mask_paths, score_paths, rig: StereoRig, tol_px: float, line_tol_px: float,
                out_dir: Path) -> Path:
    score_paths = score_paths or [None] * len(mask_paths)
    masks = [load_mask(m, s) for m, s in zip(mask_paths, score_paths)]
    cands = [extract_candidates(m, k) for k, m in enumerate(masks)]
    save_candidates(out_dir / "candidates.json", cands)
    points = match_points(cands, rig, tol_px)
    try:
        lines = match_lines(cands, rig, line_tol_px)
    except StereoXCTError as e:
        lines = getattr(e, "partial", [])
    save_matches(out_dir / "matches.json", points, lines)
    return out_dir / "matches.json"


def stage_map(matches_path, rig: StereoRig, out_dir: Path, mask_paths=None,
              relative_threshold: float = 0.5) -> dict:
    points, lines = load_matches(matches_path)
    feats = [triangulate(m, rig) for m in points]
    for lm in lines:
        try:
            feats.append(reconstruct_line(lm, rig))
        except StereoXCTError:
            continue
    save_features(out_dir / "features.json", feats, rig.world_grid)
    save_polylines_csv(out_dir / "polylines.csv", feats)
    out = {"features": out_dir / "features.json"}
    if mask_paths:
        masks = [load_mask(m) for m in mask_paths]
        vol, vfeats = volumetric_map(masks, rig, rig.world_grid,
                                     params=VolumetricParams(relative_threshold=relative_threshold))
        save_volume(out_dir / "volumetric.raw", vol)
        save_features(out_dir / "volumetric_features.json", vfeats, rig.world_grid)
        out["volumetric"] = out_dir / "volumetric_features.json"
    return out


def stage_eval(pred_path, truth_path, out_dir: Path, voxel_size: float = 1.0) -> dict:
    report = localization_error(load_features(pred_path), load_truth(truth_path), voxel_size)
    d = report.to_dict()
    stem = Path(pred_path).stem
    write_json(out_dir / f"{stem}_metrics.json", d)
    write_csv(out_dir / f"{stem}_errors.csv", d["pairs"], header=["kind", "truth", "pred", "error"])
    return d


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _calibrated(cfg: PipelineConfig, rig: StereoRig) -> DetectorParams:
    pairs = []
    for j in range(cfg.calibrate_n_train):
        d = dict(cfg.recipe)
        d.update(seed=item_seed(cfg.seed, 1_000_000 + j), grid=cfg.grid)
        vol, truth = generate_phantom(PhantomRecipe(**d))
        for v in rig.views:
            pairs.append((forward_project(vol, v), truth_mask(truth, v)))
    return calibrate(pairs)


def run_pipeline(cfg: PipelineConfig, out: Path) -> dict:
    """Chain every stage for ``cfg.n_volumes`` volumes and write a manifest."""
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    rig = cfg.rig()
    rig.save(out / "geometry.json")
    write_json(out / "config.json", cfg.to_dict())
    params = _calibrated(cfg, rig) if cfg.calibrate_n_train else cfg.detector_params()
    write_json(out / "detector_params.json", params.to_dict())
    timings["setup"] = time.perf_counter() - t0

    vox = float(np.mean(cfg.grid.voxel))
    det_rows, loc_rows = [], []
    scores, truths = [], []
    totals = None
    for i in range(cfg.n_volumes):
        vdir = out / f"vol{i:03d}"
        t = time.perf_counter()
        paths = stage_phantom(cfg.recipe_for(i), vdir)
        truth = load_truth(paths["truth"])
        mask_paths, score_paths = [], []
        for k in range(len(rig.views)):
            proj = stage_project(paths["volume"], rig, k, vdir / f"proj{k}.raw")
            mask_paths.append(vdir / f"mask{k}.png")
            score_paths.append(vdir / f"score{k}.raw")
            stage_detect(proj, params, mask_paths[-1], score_paths[-1])
            mask = load_mask(mask_paths[-1], score_paths[-1])
            tm = truth_mask(truth, rig.views[k])
            c = confusion(mask.bits, tm)
            totals = c if totals is None else totals + c
            det_rows.append({"volume": i, "view": k, **detection_table(c)})
            scores.append(mask.score.ravel())
            truths.append(tm.ravel())
        matches = stage_match(mask_paths, score_paths, rig, cfg.tol_px, cfg.line_tol_px, vdir)
        mapped = stage_map(matches, rig, vdir, mask_paths if cfg.volumetric else None,
                           cfg.relative_threshold)
        for name, fpath in mapped.items():
            d = stage_eval(fpath, paths["truth"], vdir, vox)
            loc_rows.append({"volume": i, "pathway": name, "mean_error": d["mean_error"],
                             "mean_point_error": d["mean_point_error"],
                             "mean_endpoint_error": d["mean_endpoint_error"],
                             "matched": d["matched"], "recall": d["recall"],
                             "spurious": sum(d["spurious"].values())})
        timings[f"vol{i:03d}"] = time.perf_counter() - t

    t = time.perf_counter()
    pooled = roc(np.concatenate(scores), np.concatenate(truths)) if any(
        x.any() for x in truths) else None
    write_csv(out / "detection.csv", det_rows)
    write_csv(out / "localization.csv", loc_rows)
    if pooled is not None:
        write_roc_csv(out / "roc.csv", pooled)
    metrics = {"detection": detection_table(totals, pooled.auc if pooled else None)}
    if pooled is not None:
        metrics["detection"]["TPR_at_FPR_0.005"] = pooled.tpr_at(0.005)
    for name in ("features", "volumetric"):
        rows = [r for r in loc_rows if r["pathway"] == name]
        errs = [r["mean_error"] for r in rows if r["mean_error"] is not None]
        if rows:
            metrics[name] = {
                "mean_error": float(np.mean(errs)) if errs else None,
                "matched": int(sum(r["matched"] for r in rows)),
                "spurious": int(sum(r["spurious"] for r in rows)),
            }
    write_json(out / "metrics.json", metrics)
    if cfg.figures:
        _figures(out, rig, pooled)
    timings["report"] = time.perf_counter() - t

    outputs = {str(p.relative_to(out)): sha256(p)
               for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": {"config_sha256": hashlib.sha256(
            json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()},
        "outputs": outputs,
        "metrics": metrics,
        "timings": timings,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def _figures(out: Path, rig: StereoRig, pooled) -> None:
    from .plotting import plot_features_3d, plot_projection, plot_roc
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    if pooled is not None:
        plot_roc(fig_dir / "roc.png", {"detector": pooled}, "pixelwise detection")
    vdir = out / "vol000"
    truth = load_truth(vdir / "truth.json")
    cands = load_candidates(vdir / "candidates.json")
    for k, view in enumerate(rig.views):
        proj = load_projection(vdir / f"proj{k}.raw", view)
        uv = project_points(view, truth.point_centers) if truth.points else None
        plot_projection(fig_dir / f"projection{k}.png", proj, load_mask(vdir / f"mask{k}.png"),
                        cands[k], uv, f"view {k}")
    plot_features_3d(fig_dir / "features3d.png", load_features(vdir / "features.json"), truth,
                     "triangulated features")


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="cap worker threads")
    p.add_argument("--scale", choices=sorted(SCALES), help="grid/detector scale")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stereoxct", description="Stereo X-ray feature localization")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom volume and its truth")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("project", help="forward project a volume for one view")
    _common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="feature mask from a projection")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.add_argument("--score")

    p = sub.add_parser("calibrate", help="grid-search detector parameters")
    _common(p)
    p.add_argument("--n-train", type=int, default=95)
    p.add_argument("--out", required=True)

    p = sub.add_parser("match", help="extract candidates and match them across views")
    _common(p)
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--scores", nargs="+")
    p.add_argument("--geometry", required=True)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL_PX)
    p.add_argument("--line-tol", type=float, default=DEFAULT_LINE_TOL_PX)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("map", help="triangulate matches (and optionally map volumetrically)")
    _common(p)
    p.add_argument("--matches", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--masks", nargs="+", help="masks for the volumetric pathway")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="localization error against truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--voxel", type=float, default=1.0)
    p.add_argument("--out", default=None, help="output directory (default: next to --pred)")

    p = sub.add_parser("pipeline", help="run every stage and write a manifest")
    _common(p)
    p.add_argument("--out", required=True)
    return ap


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scale is not None:
        cfg.scale = args.scale
    return cfg


def _dispatch(args) -> dict:
    cmd = args.command
    cfg = _config(args)
    if cmd == "phantom":
        paths = stage_phantom(cfg.recipe_for(0), resolve_out(args.out))
        return {k: str(v) for k, v in paths.items()}
    if cmd == "project":
        rig = StereoRig.load(args.geometry)
        out = resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        return {"projection": str(stage_project(args.volume, rig, args.view, out))}
    if cmd == "detect":
        params = (DetectorParams.from_dict(json.loads(Path(args.params).read_text()))
                  if args.params else cfg.detector_params())
        out = resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        score = resolve_out(args.score) if args.score else None
        return {"mask": str(stage_detect(args.input, params, out, score))}
    if cmd == "calibrate":
        cfg.calibrate_n_train = args.n_train
        params = _calibrated(cfg, cfg.rig())
        out = resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, params.to_dict())
        return {"params": str(out)}
    if cmd == "match":
        out = resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rig = StereoRig.load(args.geometry)
        return {"matches": str(stage_match(args.masks, args.scores, rig, args.tol,
                                           args.line_tol, out))}
    if cmd == "map":
        out = resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rig = StereoRig.load(args.geometry)
        return {k: str(v) for k, v in stage_map(args.matches, rig, out, args.masks,
                                                 cfg.relative_threshold).items()}
    if cmd == "eval":
        out = resolve_out(args.out) if args.out else Path(args.pred).parent
        out.mkdir(parents=True, exist_ok=True)
        d = stage_eval(args.pred, args.truth, out, args.voxel)
        return {"mean_error": d["mean_error"], "matched": d["matched"]}
    if cmd == "pipeline":
        m = run_pipeline(cfg, resolve_out(args.out))
        return {"manifest": str(resolve_out(args.out) / "manifest.json"), "metrics": m["metrics"]}
    raise StageError(cmd, "unknown command")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba
        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        result = _dispatch(args)
    except StageError as e:
        print(json.dumps({"error": type(e).__name__, "stage": e.stage, "file": e.path,
                          "message": str(e)}), file=sys.stderr)
        return 2
    except (StereoXCTError, OSError, ValueError, KeyError) as e:
        path = getattr(e, "filename", None)
        print(json.dumps({"error": type(e).__name__, "stage": args.command,
                          "file": None if path is None else str(path), "message": str(e)}),
              file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
