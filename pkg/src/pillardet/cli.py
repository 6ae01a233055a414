"""Command-line front end.

Subcommands: generate, pillarize, encode, fuse, flops, detect, bench,
train-step. Exit codes: 0 success, 1 validation error, 2 internal invariant
violation. All randomness is confined to explicit --seed flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .backbone import count_macs, count_params
from .encoder import encode_pillar
from .errors import InvariantViolation, PillarDetError, ValidationError
from .geometry import Box3D
from .head import load_head_output, write_detections
from .losses import diou_loss, focal_loss, iou_branch_loss, reg_l1_loss, render_gaussian_targets, total_loss
from .pillars import assign_pillars, augment_points, scatter
from .pipeline import StageTimes, fusion_discrepancy, network_forward, run_detect
from .pointcloud import SceneSpec, crop_to_range, generate_scene, load_cloud, save_cloud
from .profiles import BUILTIN, flops_config, load_profile

FUSION_PROBE_BOUND = 1e-4

BOX_FIELDS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "class")


def write_boxes(boxes: list[Box3D], path) -> None:
    lines = [",".join(BOX_FIELDS)]
    for b in boxes:
        vals = [repr(float(v)) for v in (b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)]
        lines.append(",".join(vals + [str(b.class_id)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_boxes(path) -> list[Box3D]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(BOX_FIELDS):
        raise ValidationError(f"{path}: missing or unexpected box header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(BOX_FIELDS):
            raise ValidationError(f"{path}: malformed box record: {ln!r}")
        out.append(Box3D(*(float(v) for v in parts[:7]), class_id=int(parts[7])))
    return out


def _emit(rows: list[dict], fmt: str, out_path: str | None, stream) -> None:
    """Render homogeneous records as text, csv, or json-lines."""
    if not rows:
        text = ""
    elif fmt == "csv":
        cols = list(rows[0])
        lines = [",".join(cols)]
        lines += [",".join(_cell(r[c]) for c in cols) for r in rows]
        text = "\n".join(lines) + "\n"
    elif fmt == "json-lines":
        text = "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n"
    else:
        widths = {c: max(len(c), *(len(_cell(r[c])) for r in rows)) for c in rows[0]}
        lines = ["  ".join(c.ljust(widths[c]) for c in rows[0])]
        lines += ["  ".join(_cell(r[c]).ljust(widths[c]) for c in rows[0]) for r in rows]
        text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        stream.write(text)


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "/".join(str(x) for x in v)
    return str(v)


def _load_params(path: str, profile):
    params, arch, mode = ckpt.load_checkpoint(path)
    if arch != profile.arch():
        raise ValidationError(
            f"checkpoint architecture {arch.as_dict()} does not match profile {profile.name!r}"
        )
    return params, mode


def cmd_generate(args) -> int:
    profile = load_profile(args.profile)
    r = profile.grid.range
    extent = min(r.x_max - r.x_min, r.y_max - r.y_min)
    scale = min(1.0, extent / 40.0)  # shrink objects for small desk scenes
    spec = SceneSpec(
        range=r,
        n_objects=args.objects,
        points_per_object=args.points_per_object,
        n_background=args.background,
        length_range=(2.0 * scale, 5.0 * scale),
        width_range=(1.2 * scale, 2.4 * scale),
        height_range=(1.2 * scale, min(2.2 * scale, (r.z_max - r.z_min) * 0.8)),
        n_classes=profile.n_classes,
    )
    cloud, boxes = generate_scene(spec, args.seed)
    save_cloud(cloud, args.out)
    write_boxes(boxes, str(args.out) + ".boxes.csv")
    print(f"wrote {len(cloud)} points, {len(boxes)} boxes to {args.out}")
    return 0


def cmd_pillarize(args) -> int:
    profile = load_profile(args.profile)
    cloud = load_cloud(args.cloud)
    if args.crop:
        cloud = crop_to_range(cloud, profile.grid.range)
    pillars = assign_pillars(cloud, profile.grid)
    counts = np.array([p.count for p in pillars], dtype=np.int64)
    hist: dict[int, int] = {}
    for c in counts:
        hist[int(c)] = hist.get(int(c), 0) + 1
    summary = {
        "points": len(cloud),
        "pillars": len(pillars),
        "max_points_per_pillar": int(counts.max()) if len(pillars) else 0,
        "occupancy_histogram": {str(k): v for k, v in sorted(hist.items())},
    }
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    if args.per_pillar and args.out:
        rows = [{"ix": p.ix, "iy": p.iy, "count": p.count} for p in pillars]
        _emit(rows, "csv", str(args.out) + ".pillars.csv", sys.stdout)
    return 0


def cmd_encode(args) -> int:
    profile = load_profile(args.profile)
    cloud = crop_to_range(load_cloud(args.cloud), profile.grid.range)
    if args.checkpoint:
        params, _ = _load_params(args.checkpoint, profile)
    else:
        params = ckpt.new_params(profile.arch(), mode="identity")
    pillars = assign_pillars(cloud, profile.grid)
    rows = []
    for p in pillars:
        feat = encode_pillar(augment_points(cloud, p, profile.grid), params.encoder, keep_intermediates=False).f
        rows.append(
            {
                "ix": p.ix,
                "iy": p.iy,
                "count": p.count,
                "feature_l2": float(np.linalg.norm(feat)),
                "feature_max": float(feat.max()) if feat.size else 0.0,
            }
        )
    _emit(rows, args.format, args.out, sys.stdout)
    return 0


def cmd_fuse(args) -> int:
    params, arch, mode = ckpt.load_checkpoint(args.checkpoint_in)
    if mode != "train":
        raise ValidationError("fusion needs a train-mode checkpoint")
    worst = fusion_discrepancy(params, arch, n_probes=args.probes, seed=args.seed)
    fused = ckpt.fuse_params(params)
    ckpt.save_checkpoint(args.checkpoint_out, fused, arch)
    report = {"probes": args.probes, "max_relative_discrepancy": worst, "bound": FUSION_PROBE_BOUND}
    print(json.dumps(report, sort_keys=True))
    if worst >= FUSION_PROBE_BOUND:
        raise InvariantViolation(
            f"fused network deviates from the three-branch one: {worst:.3e} >= {FUSION_PROBE_BOUND}"
        )
    return 0


def cmd_flops(args) -> int:
    profile = load_profile(args.profile)
    ratio_sets = [tuple(int(v) for v in r.split(",")) for r in args.ratios] if args.ratios else [
        (0, 2, 2, 2), (2, 2, 2, 2), (4, 2, 2, 2), (6, 2, 2, 2), (3, 4, 6, 3), (6, 6, 3, 1),
    ]
    rows = []
    for ratios in ratio_sets:
        if len(ratios) != 4:
            raise ValidationError(f"a ratio needs 4 entries, got {ratios}")
        cfg = flops_config(ratios, profile)
        mac = count_macs(cfg)
        par = count_params(cfg)
        rows.append(
            {
                "ratio": "-".join(str(b) for b in ratios),
                "blocks": sum(ratios),
                "gmacs": mac.total / 1e9,
                "slope_gmacs_per_block": mac.per_block[0] / 1e9,
                "params_m": par.total / 1e6,
                "input_hw": f"{cfg.input_hw[0]}x{cfg.input_hw[1]}",
            }
        )
    _emit(rows, args.format, args.out, sys.stdout)
    totals = {r["ratio"]: r["gmacs"] for r in rows}
    if "6-6-3-1" in totals and "3-4-6-3" in totals:
        print(f"equal-16-block totals: {totals['6-6-3-1'] == totals['3-4-6-3']}")
    return 0


def cmd_detect(args) -> int:
    profile = load_profile(args.profile)
    cloud = load_cloud(args.cloud)
    params, _ = _load_params(args.checkpoint, profile)
    inject = load_head_output(args.inject_head) if args.inject_head else None
    dets = run_detect(cloud, params, profile, inject_head=inject)
    write_detections(dets, args.out)
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


def cmd_bench(args) -> int:
    profile = load_profile(args.profile)
    params = ckpt.new_params(profile.arch(), mode="random", seed=args.seed)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = []
    for size in sizes:
        r = profile.grid.range
        extent = min(r.x_max - r.x_min, r.y_max - r.y_min)
        scale = min(1.0, extent / 40.0)
        spec = SceneSpec(
            range=r,
            n_objects=0,
            n_background=size,
            length_range=(2.0 * scale, 5.0 * scale),
            width_range=(1.2 * scale, 2.4 * scale),
            height_range=(1.2 * scale, min(2.2 * scale, (r.z_max - r.z_min) * 0.8)),
        )
        cloud, _ = generate_scene(spec, args.seed)
        samples = {k: [] for k in ("encode", "backbone", "head", "post")}
        for _ in range(args.repeats):
            times = StageTimes()
            run_detect(cloud, params, profile, times=times)
            for k, v in times.as_dict().items():
                samples[k].append(v * 1e3)
        for stage, vals in samples.items():
            arr = np.array(vals)
            rows.append(
                {
                    "points": size,
                    "stage": stage,
                    "p50": float(np.percentile(arr, 50)),
                    "p90": float(np.percentile(arr, 90)),
                    "mean": float(arr.mean()),
                }
            )
    _emit(rows, args.format, args.out, sys.stdout)
    return 0


def cmd_train_step(args) -> int:
    profile = load_profile(args.profile)
    cloud = load_cloud(args.cloud)
    boxes = read_boxes(args.boxes)
    if args.checkpoint:
        params, _ = _load_params(args.checkpoint, profile)
    else:
        params = ckpt.new_params(profile.arch(), mode="random", seed=args.seed)
    targets = render_gaussian_targets(boxes, profile.grid, profile.out_stride, profile.n_classes)
    cropped = crop_to_range(cloud, profile.grid.range)
    pillars = assign_pillars(cropped, profile.grid)
    feats = [
        encode_pillar(augment_points(cropped, p, profile.grid), params.encoder, keep_intermediates=False).f
        for p in pillars
    ]
    canvas = scatter(zip(pillars, feats), profile.grid, dim=profile.encoder_dim)
    out = network_forward(canvas.data, params, profile)

    cls_loss, _ = focal_loss(out.heatmap, targets.heatmap)
    m = targets.mask
    reg_loss, _ = reg_l1_loss(
        np.concatenate([out.offset[:, m], out.z[:, m], out.size[:, m], out.yaw[:, m]], axis=0),
        targets.reg[:, m],
    )
    iou_loss, _ = iou_branch_loss(out.iou[:, m], targets.iou[:, m])
    # regression-branch box overlap term, on the decoded center cells
    diou_vals = []
    cell_x = profile.out_stride * profile.grid.pillar_x
    cell_y = profile.out_stride * profile.grid.pillar_y
    for (row, col, _cls), gt in zip(targets.centers, boxes):
        pred = Box3D(
            profile.grid.range.x_min + (col + 0.5 + out.offset[0, row, col]) * cell_x,
            profile.grid.range.y_min + (row + 0.5 + out.offset[1, row, col]) * cell_y,
            float(out.z[0, row, col]),
            *(float(v) for v in np.exp(out.size[:, row, col])),
            float(np.arctan2(out.yaw[0, row, col], out.yaw[1, row, col])),
        )
        diou_vals.append(diou_loss(pred, gt)[0])
    diou_val = float(np.mean(diou_vals)) if diou_vals else 0.0
    total = total_loss(cls_loss, iou_loss, diou_val, reg_loss, profile.loss_weights)
    breakdown = {
        "cls": cls_loss,
        "iou_branch": iou_loss,
        "diou": diou_val,
        "reg": reg_loss,
        "total": total,
        "weights": [profile.loss_weights.cls, profile.loss_weights.iou, profile.loss_weights.reg],
    }
    text = json.dumps(breakdown, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_init(args) -> int:
    profile = load_profile(args.profile)
    params = ckpt.new_params(profile.arch(), mode=args.mode, seed=args.seed)
    ckpt.save_checkpoint(args.out, params, profile.arch())
    print(f"wrote {args.mode} checkpoint to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pillardet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt=True):
        p.add_argument("--profile", default="desk", help=f"built-in {sorted(BUILTIN)} or a JSON file")
        p.add_argument("--seed", type=int, default=0)
        if fmt:
            p.add_argument("--format", choices=("text", "csv", "json-lines"), default="text")
            p.add_argument("--out", default=None)

    p = sub.add_parser("generate", help="write a synthetic scene (cloud + boxes)")
    common(p, fmt=False)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--points-per-object", type=int, default=120)
    p.add_argument("--background", type=int, default=400)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pillarize", help="pillar summary of a cloud")
    common(p, fmt=False)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--crop", action="store_true", help="crop to the profile range first")
    p.add_argument("--per-pillar", action="store_true")
    p.set_defaults(func=cmd_pillarize)

    p = sub.add_parser("encode", help="per-pillar encoded feature summary")
    common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fuse", help="fuse a train-mode checkpoint; verify equivalence")
    common(p, fmt=False)
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")
    p.add_argument("--probes", type=int, default=8)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("flops", help="analytic MAC/params table for block ratios")
    common(p)
    p.add_argument("--ratios", action="append", default=None, metavar="B1,B2,B3,B4")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("detect", help="run the full pipeline on a cloud")
    common(p, fmt=False)
    p.add_argument("--cloud", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inject-head", default=None, help="npz head-output fixture replacing the network")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="per-stage wall-clock percentiles")
    common(p)
    p.add_argument("--sizes", default="2000")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-step", help="loss breakdown diagnostic on a scene")
    common(p, fmt=False)
    p.add_argument("--cloud", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_step)

    p = sub.add_parser("init", help="write a fresh train-mode checkpoint")
    common(p, fmt=False)
    p.add_argument("--mode", choices=("random", "identity"), default="random")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 2
    except PillarDetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
