"""Command-line entry point.

Subcommands: labels (depth-map + sampling-point artifacts), disparity
(block-matched ground truth), eval (AP tables), viz (overlay figures only),
bench (kernel timings).  Options come from an optional JSON config file plus
flags; flags win.  Frame work parallelizes over --jobs processes; artifacts
are written atomically and are byte-identical regardless of scheduling.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .depth_label import (
    DepthBinSpec,
    bin_target_map,
    center_sample_point,
    lid_encode,
    one_hot_logit_map,
    projected_center,
    render_object_depth_map,
    sample_object_depth,
    save_depth_png16,
    visible_sample_point,
)
from .disparity_bm import block_match, downsample_disparity, save_disparity_png16
from .evaluation import METRICS, evaluate_benchmark, format_ap_table
from .kitti_io import frame_paths, list_frame_ids, parse_calib_file, parse_label_file
from .stereo_core import (
    correlation_volume,
    decoder_forward,
    msf_forward,
    random_decoder_weights,
    random_msf_weights,
)

log = logging.getLogger("stereo3dkit")

ENV_LOG_LEVEL = "STEREO3DKIT_LOG"
SCALE_CHOICES = {4: 0.25, 16: 0.0625}
SAMPLING_MODES = ("center", "offset")


@dataclass
class RunConfig:
    """Everything a run needs; JSON config keys match these field names."""

    dataset_root: str = "."
    data_subdir: str = "training"
    split_file: str | None = None
    depth_map_scale: float = 0.25
    sampling_mode: str = "offset"
    min_depth: float = 1.0
    max_depth: float = 60.0
    n_bins: int = 80
    block: int = 9
    max_disp: int = 192
    lr_tolerance: float = 1.0
    texture_ratio: float = 0.02
    subpixel: bool = False
    disparity_factor: int = 4
    classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    iou_thresholds: dict = field(default_factory=dict)
    output_dir: str = "out"
    jobs: int = 1
    bench_iters: int = 20

    def __post_init__(self) -> None:
        self.classes = tuple(self.classes)
        if self.depth_map_scale not in SCALE_CHOICES.values():
            raise ValueError(
                f"depth_map_scale must be one of {sorted(SCALE_CHOICES.values())}"
            )
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.bench_iters < 1:
            raise ValueError("bench_iters must be >= 1")

    def bin_spec(self) -> DepthBinSpec:
        return DepthBinSpec(self.min_depth, self.max_depth, self.n_bins)


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        names = {f.name for f in fields(RunConfig)}
        unknown = set(raw) - names
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    if getattr(args, "root", None) is not None:
        values["dataset_root"] = args.root
    if getattr(args, "split", None) is not None:
        values["split_file"] = args.split
    if getattr(args, "scale", None) is not None:
        values["depth_map_scale"] = SCALE_CHOICES[args.scale]
    if getattr(args, "sampling", None) is not None:
        values["sampling_mode"] = args.sampling
    if getattr(args, "jobs", None) is not None:
        values["jobs"] = args.jobs
    if getattr(args, "out", None) is not None:
        values["output_dir"] = args.out
    return RunConfig(**values)


def resolve_frame_ids(cfg: RunConfig) -> list[str]:
    if cfg.split_file:
        path = Path(cfg.split_file)
        if not path.is_file():
            raise SystemExit(f"split file not found: {path}")
        return [line.strip() for line in path.read_text().splitlines() if line.strip()]
    try:
        return list_frame_ids(cfg.dataset_root, cfg.data_subdir)
    except FileNotFoundError as exc:
        raise SystemExit(str(exc)) from exc


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _image_hw(path) -> tuple[int, int]:
    with Image.open(path) as img:
        return (img.size[1], img.size[0])


def _labels_frame(
    cfg: RunConfig,
    frame_id: str,
    write_json: bool,
    write_depth: bool,
    write_overlay: bool,
) -> str | None:
    """Process one frame; returns an error message or None."""
    paths = frame_paths(cfg.dataset_root, cfg.data_subdir, frame_id)
    try:
        calib = parse_calib_file(paths.calib)
        labels = parse_label_file(paths.label)
        image_hw = _image_hw(paths.left)
        spec = cfg.bin_spec()
        dmap = render_object_depth_map(labels, image_hw, cfg.depth_map_scale)
        logit_map = one_hot_logit_map(bin_target_map(dmap, spec), spec.n_bins)

        objects = []
        points = []
        centers = []
        for idx, lb in enumerate(labels):
            if lb.is_dontcare or lb.depth <= 0.0:
                continue
            if cfg.sampling_mode == "offset":
                pt = visible_sample_point(lb, labels, calib, image_hw, cfg.depth_map_scale)
            else:
                pt = center_sample_point(lb, calib, image_hw)
            proj = projected_center(lb, calib)
            objects.append(
                {
                    "id": idx,
                    "class": lb.class_name,
                    "center_depth_m": lb.depth,
                    "depth_bin": lid_encode(spec, lb.depth),
                    "decoded_depth_m": sample_object_depth(logit_map, pt, spec),
                    "sample_uv": list(pt.uv),
                    "offset": list(pt.offset),
                    "image_xy": list(pt.image_xy),
                    "projected_center": list(proj),
                    "visible_rect": None if pt.visible_rect is None else list(pt.visible_rect),
                    "fallback_flag": pt.fallback,
                }
            )
            points.append(pt)
            centers.append(proj)

        out = Path(cfg.output_dir)
        if write_json:
            _write_json_atomic(
                out / "labels" / f"{frame_id}.json",
                {
                    "frame": frame_id,
                    "image_hw": list(image_hw),
                    "scale": cfg.depth_map_scale,
                    "sampling_mode": cfg.sampling_mode,
                    "objects": objects,
                },
            )
        if write_depth:
            png = out / "depth_maps" / f"{frame_id}.png"
            tmp = png.with_name(png.name + ".tmp")
            save_depth_png16(dmap, tmp)
            os.replace(tmp, png)
        if write_overlay:
            from .report import save_depth_overlay

            save_depth_overlay(
                out / "overlays" / f"{frame_id}.png",
                dmap,
                points,
                centers,
                depth_range=(spec.min_depth, spec.max_depth),
            )
        return None
    except Exception as exc:
        return f"{frame_id}: {exc}"


def _labels_worker(task) -> tuple[str, str | None]:
    cfg, frame_id, write_json, write_depth, write_overlay = task
    return frame_id, _labels_frame(cfg, frame_id, write_json, write_depth, write_overlay)


def _disparity_frame(cfg: RunConfig, frame_id: str):
    paths = frame_paths(cfg.dataset_root, cfg.data_subdir, frame_id)
    try:
        with Image.open(paths.left) as img:
            left = np.asarray(img.convert("L"), dtype=np.float64)
        with Image.open(paths.right) as img:
            right = np.asarray(img.convert("L"), dtype=np.float64)
        dmap = block_match(
            left,
            right,
            block=cfg.block,
            max_disp=cfg.max_disp,
            lr_tolerance=cfg.lr_tolerance,
            texture_ratio=cfg.texture_ratio,
            subpixel=cfg.subpixel,
        )
        f = cfg.disparity_factor
        if f > 1:
            h, w = dmap.disp.shape
            h2, w2 = h - h % f, w - w % f
            dmap.disp = dmap.disp[:h2, :w2]
            dmap.valid = dmap.valid[:h2, :w2]
            dmap = downsample_disparity(dmap, f)
        png = Path(cfg.output_dir) / "disparity" / f"{frame_id}.png"
        tmp = png.with_name(png.name + ".tmp")
        save_disparity_png16(dmap, tmp)
        os.replace(tmp, png)
        frac = float(dmap.valid.mean())
        mean = float(dmap.disp[dmap.valid].mean()) if dmap.valid.any() else 0.0
        return None, frac, mean
    except Exception as exc:
        return str(exc), 0.0, 0.0


def _disparity_worker(task):
    cfg, frame_id = task
    err, frac, mean = _disparity_frame(cfg, frame_id)
    return frame_id, (f"{frame_id}: {err}" if err else None), frac, mean


def _run_tasks(worker, tasks, jobs: int) -> list:
    if jobs <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def _report_failures(failures: list[str]) -> int:
    for msg in failures:
        log.error("frame failed: %s", msg)
    if failures:
        log.error("%d frame(s) failed", len(failures))
        return 1
    return 0


def cmd_labels(cfg: RunConfig, overlay_only: bool = False) -> int:
    ids = resolve_frame_ids(cfg)
    if not ids:
        log.warning("no frames selected; nothing to do")
        return 0
    out = Path(cfg.output_dir)
    if overlay_only:
        (out / "overlays").mkdir(parents=True, exist_ok=True)
    else:
        for sub in ("labels", "depth_maps", "overlays"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, fid, not overlay_only, not overlay_only, True) for fid in ids]
    results = _run_tasks(_labels_worker, tasks, cfg.jobs)
    return _report_failures([msg for _, msg in results if msg])


def cmd_disparity(cfg: RunConfig) -> int:
    ids = resolve_frame_ids(cfg)
    if not ids:
        log.warning("no frames selected; nothing to do")
        return 0
    out = Path(cfg.output_dir)
    (out / "disparity").mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, fid) for fid in ids]
    results = _run_tasks(_disparity_worker, tasks, cfg.jobs)
    rows = ["frame,valid_fraction,mean_disparity"]
    for fid, msg, frac, mean in sorted(results, key=lambda r: r[0]):
        if msg is None:
            rows.append(f"{fid},{frac:.6f},{mean:.6f}")
    _write_text_atomic(out / "disparity_summary.csv", "\n".join(rows) + "\n")
    return _report_failures([msg for _, msg, _, _ in results if msg])


def cmd_eval(cfg: RunConfig, pred_dir: str) -> int:
    from .report import save_ap_figure, write_ap_csv

    gt_dir = Path(cfg.dataset_root) / cfg.data_subdir / "label_2"
    if not gt_dir.is_dir():
        raise SystemExit(f"ground-truth directory not found: {gt_dir}")
    result, skipped = evaluate_benchmark(
        pred_dir, gt_dir, cfg.classes, METRICS, cfg.iou_thresholds or None
    )
    table = format_ap_table(result)
    print(table)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json_atomic(out / "ap_results.json", result.to_json_dict())
    write_ap_csv(out / "ap_results.csv", result)
    _write_text_atomic(out / "ap_table.txt", table + "\n")
    save_ap_figure(out / "ap_summary.png", result)
    for fid in skipped:
        log.error("frame id present in only one directory, skipped: %s", fid)
    return 1 if skipped else 0


def _time_kernel(fn, iters: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(statistics.median(times))


def cmd_bench(cfg: RunConfig) -> int:
    rng = np.random.default_rng(0)
    iters = cfg.bench_iters
    fl = rng.normal(size=(72, 320, 64))
    fr = rng.normal(size=(72, 320, 64))
    cv4 = rng.normal(size=(72, 320, 48))
    cv8 = rng.normal(size=(36, 160, 24))
    cv16 = rng.normal(size=(18, 80, 12))
    msf_w = random_msf_weights(rng)
    feat = rng.normal(size=(18, 80, 512))
    dec_w = random_decoder_weights(rng, 512, 128, 80)

    entries = [
        ("correlation_volume", lambda: correlation_volume(fl, fr, 48)),
        ("msf_forward", lambda: msf_forward(cv4, cv8, cv16, msf_w)),
        ("decoder_forward", lambda: decoder_forward(feat, dec_w, 80)),
    ]
    rows = []
    for name, fn in entries:
        median = _time_kernel(fn, iters)
        rows.append({"kernel": name, "median_s": median, "iters": iters})
        print(f"{name:<20} median {median * 1000.0:9.2f} ms over {iters} iterations")

    from .report import write_bench_csv

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json_atomic(out / "bench.json", {"results": rows})
    write_bench_csv(out / "bench.csv", rows)
    return 0


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--root", help="dataset root directory")
    common.add_argument("--split", help="text file of frame ids (default: all frames)")
    common.add_argument(
        "--scale", type=int, choices=sorted(SCALE_CHOICES), help="depth-map downscale denominator"
    )
    common.add_argument("--sampling", choices=SAMPLING_MODES, help="sample-point mode")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="stereo3dkit",
        description="Depth-label generation, disparity ground truth, and AP evaluation "
        "for KITTI-style stereo detection datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("labels", parents=[common], help="render depth maps and sample points")
    sub.add_parser("disparity", parents=[common], help="block-match disparity ground truth")
    p_eval = sub.add_parser("eval", parents=[common], help="AP@R40 evaluation")
    p_eval.add_argument("--pred", required=True, help="directory of prediction files")
    sub.add_parser("bench", parents=[common], help="time the numeric kernels")
    sub.add_parser("viz", parents=[common], help="overlay figures only")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(ENV_LOG_LEVEL, "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except (ValueError, json.JSONDecodeError) as exc:
        log.error("bad configuration: %s", exc)
        return 2
    if args.command == "labels":
        return cmd_labels(cfg)
    if args.command == "viz":
        return cmd_labels(cfg, overlay_only=True)
    if args.command == "disparity":
        return cmd_disparity(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.pred)
    if args.command == "bench":
        return cmd_bench(cfg)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
