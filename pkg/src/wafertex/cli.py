"""Command-line pipelines over the toolkit.

Subcommands: ``gen`` (synthesize a scene), ``enhance`` (periodic-disturbance
enhancement), ``muse`` (context block forward), ``fuse`` (high-resolution
branch fusion), ``eval-seg`` / ``eval-det`` (metric reports from detection
record files), ``gradcheck`` (derivative verification report), ``count``
(parameter / FLOP accounting).

Configs are strict ``key=value`` files: unknown keys are errors.  Every
subcommand is a pure function of its config and input files; outputs are
written atomically.  Exit codes: 0 success, 1 validation failure, 2 I/O or
file-format failure.  Diagnostics go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from wafertex import formats, metrics, mptce, muse, synthgen, tensor
from wafertex.formats import FormatError, atomic_write_text, format_float
from wafertex.fusion import FusionConfig, p2_fuse
from wafertex.tensor import ConvSpec, Tensor


def _as_bool(value: str, key: str) -> bool:
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"config key {key}: expected a boolean, got {value!r}")


def _load_config(path, schema: dict[str, str], patterns: tuple[str, ...] = ()) -> dict[str, str]:
    merged = dict(schema)
    if path is None:
        return merged
    with open(path, "r", encoding="utf-8") as fh:
        raw = formats.parse_config(fh.read())
    for key, value in raw.items():
        if key in schema or any(re.fullmatch(p, key) for p in patterns):
            merged[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return merged


def _parse_fields(value: str, key: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in value.split(","):
        if ":" not in part:
            raise ValueError(f"config key {key}: expected name:value fields, got {part!r}")
        name, val = part.split(":", 1)
        out[name.strip()] = val.strip()
    return out


def _take(fields: dict[str, str], key: str, names: set[str]):
    unknown = set(fields) - names
    if unknown:
        raise ValueError(f"config key {key}: unknown fields {sorted(unknown)}")


def _load_tensor_any(path) -> Tensor:
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head == b"WTB1\n":
        return formats.load_tensor(path)
    return formats.read_image(path)


def _write_tensor_auto(path_base: str, x: Tensor, out_dir: str) -> str:
    if x.channels == 1:
        path = os.path.join(out_dir, path_base + ".pfm")
        formats.write_image(path, x, "pfm")
    else:
        path = os.path.join(out_dir, path_base + ".wtb")
        formats.save_tensor(path, x)
    return path


def _write_preview(out_dir: str, stem: str, values: np.ndarray) -> None:
    """8-bit min-max normalized PGM plus the normalization sidecar."""
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        scaled = np.rint((values.astype(np.float64) - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(values, dtype=np.float64)
    formats.atomic_write(os.path.join(out_dir, stem + ".pgm"),
                         formats.encode_pgm(scaled, maxval=255))
    sidecar = f"min={lo!r}\nmax={hi!r}\nlevels=256\n"
    atomic_write_text(os.path.join(out_dir, stem + "_norm.txt"), sidecar)


# ---------------------------------------------------------------------------
# gen

_GEN_SCHEMA = {
    "height": "256",
    "width": "256",
    "seed": "0",
    "noise_sigma": "0.0",
    "image_id": "scene",
}

_GRATING_FIELDS = {"period", "orientation", "amplitude", "phase", "waveform", "fx", "fy"}
_ANOMALY_FIELDS = {"kind", "cx", "cy", "contrast", "radius", "length",
                   "thickness", "angle", "softness"}


def _numbered(cfg: dict[str, str], prefix: str) -> list[tuple[str, str]]:
    pat = re.compile(rf"{prefix}(\d+)")
    found = [(int(m.group(1)), k) for k in cfg for m in [pat.fullmatch(k)] if m]
    return [(k, cfg[k]) for _, k in sorted(found)]


def _scene_from_config(cfg: dict[str, str]) -> synthgen.SceneSpec:
    height = int(cfg["height"])
    width = int(cfg["width"])
    gratings = []
    for key, value in _numbered(cfg, "grating"):
        fields = _parse_fields(value, key)
        _take(fields, key, _GRATING_FIELDS)
        if "fx" in fields or "fy" in fields:
            g = synthgen.GratingSpec.from_frequency(
                int(fields.get("fx", "0")), int(fields.get("fy", "0")),
                height, width,
                amplitude=float(fields["amplitude"]),
                phase=float(fields.get("phase", "0")),
                waveform=fields.get("waveform", "sine"))
        else:
            g = synthgen.GratingSpec(
                period=float(fields["period"]),
                orientation=float(fields.get("orientation", "0")),
                amplitude=float(fields["amplitude"]),
                phase=float(fields.get("phase", "0")),
                waveform=fields.get("waveform", "sine"))
        gratings.append(g)
    anomalies = []
    for key, value in _numbered(cfg, "anomaly"):
        fields = _parse_fields(value, key)
        _take(fields, key, _ANOMALY_FIELDS)
        kind = fields["kind"]
        center = (float(fields["cx"]), float(fields["cy"]))
        contrast = float(fields["contrast"])
        if kind == "disk":
            spec = synthgen.AnomalySpec(kind, center, contrast,
                                        size=float(fields["radius"]))
        elif kind == "scratch":
            spec = synthgen.AnomalySpec(
                kind, center, contrast,
                size=(float(fields["length"]), float(fields["thickness"])),
                angle=float(fields.get("angle", "0")))
        else:
            spec = synthgen.AnomalySpec(kind, center, contrast,
                                        softness=float(fields["softness"]))
        anomalies.append(spec)
    return synthgen.SceneSpec(
        height=height, width=width, gratings=tuple(gratings),
        anomalies=tuple(anomalies), noise_sigma=float(cfg["noise_sigma"]),
        seed=int(cfg["seed"]))


def _echo_scene(spec: synthgen.SceneSpec, image_id: str) -> str:
    pairs = {
        "image_id": image_id,
        "height": str(spec.height),
        "width": str(spec.width),
        "seed": str(spec.seed),
        "noise_sigma": repr(spec.noise_sigma),
    }
    for i, g in enumerate(spec.gratings, start=1):
        pairs[f"grating{i}"] = (
            f"period:{g.period!r},orientation:{g.orientation!r},"
            f"amplitude:{g.amplitude!r},phase:{g.phase!r},waveform:{g.waveform}"
        )
    for i, a in enumerate(spec.anomalies, start=1):
        core = f"kind:{a.kind},cx:{a.center[0]!r},cy:{a.center[1]!r},contrast:{a.contrast!r}"
        if a.kind == "disk":
            core += f",radius:{a.size!r}"
        elif a.kind == "scratch":
            core += f",length:{a.size[0]!r},thickness:{a.size[1]!r},angle:{a.angle!r}"
        else:
            core += f",softness:{a.softness!r}"
        pairs[f"anomaly{i}"] = core
    return formats.render_config(pairs)


def _cmd_gen(args) -> int:
    cfg = _load_config(args.config, _GEN_SCHEMA, patterns=(r"grating\d+", r"anomaly\d+"))
    spec = _scene_from_config(cfg)
    image, mask, records = synthgen.gen_scene(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    formats.write_image(os.path.join(args.out_dir, "image.pfm"), image, "pfm")
    _write_preview(args.out_dir, "preview", image.data[0])
    formats.atomic_write(os.path.join(args.out_dir, "mask.pgm"),
                         formats.encode_pgm(mask.astype(np.uint8) * 255))
    truth = metrics.render_detection_records([(cfg["image_id"], d) for d in records])
    atomic_write_text(os.path.join(args.out_dir, "truth.txt"), truth)
    atomic_write_text(os.path.join(args.out_dir, "scene.txt"),
                      _echo_scene(spec, cfg["image_id"]))
    return 0


# ---------------------------------------------------------------------------
# enhance

_ENHANCE_SCHEMA = {
    "alpha": "1.0",
    "top_k": "8",
    "tile": "none",
    "include_dc": "1",
    "gradient_kernel": "sobel",
    "emit_disturbance": "0",
    "emit_attention": "0",
}


def _mptce_config(cfg: dict[str, str]) -> mptce.MptceConfig:
    tile = None if cfg["tile"] in ("none", "") else int(cfg["tile"])
    kernel = cfg["gradient_kernel"]
    if kernel == "central-difference":
        kernel = "central"
    return mptce.MptceConfig(
        top_k=int(cfg["top_k"]),
        tile=tile,
        alpha=float(cfg["alpha"]),
        gradient_kernel=kernel,
        include_dc=_as_bool(cfg["include_dc"], "include_dc"),
    )


def _cmd_enhance(args) -> int:
    cfg_raw = _load_config(args.config, _ENHANCE_SCHEMA)
    cfg = _mptce_config(cfg_raw)
    emit_d = _as_bool(cfg_raw["emit_disturbance"], "emit_disturbance")
    emit_a = _as_bool(cfg_raw["emit_attention"], "emit_attention")
    f = _load_tensor_any(args.input)
    os.makedirs(args.out_dir, exist_ok=True)

    d_map = attention = None
    if emit_d or emit_a or cfg.alpha != 0.0:
        d_map, attention = mptce.enhancement_fields(f, cfg, workers=args.threads)
    if cfg.alpha == 0.0:
        out = f.copy()
    else:
        out = Tensor(f.data + np.float32(cfg.alpha) * (attention.data * f.data),
                     dtype=f.dtype)
    _write_tensor_auto("enhanced", out, args.out_dir)
    if emit_d:
        formats.write_image(os.path.join(args.out_dir, "disturbance.pfm"), d_map, "pfm")
        _write_preview(args.out_dir, "disturbance", d_map.data[0])
    if emit_a:
        formats.write_image(os.path.join(args.out_dir, "attention.pfm"), attention, "pfm")
        _write_preview(args.out_dir, "attention", attention.data[0])
    return 0


# ---------------------------------------------------------------------------
# muse / fuse

_MUSE_SCHEMA = {
    "out_channels": "8",
    "seed": "0",
    "se_groups": "0",
    "project_channels": "0",
}


def _cmd_muse(args) -> int:
    cfg = _load_config(args.config, _MUSE_SCHEMA)
    x = _load_tensor_any(args.input)
    if args.weights:
        block = muse.MuseBlock.from_arrays(formats.load_named_arrays(args.weights))
    else:
        se_groups = int(cfg["se_groups"]) or None
        project = int(cfg["project_channels"]) or None
        block = muse.MuseBlock.seeded(x.channels, int(cfg["out_channels"]),
                                      seed=int(cfg["seed"]), se_groups=se_groups,
                                      project_channels=project)
    out = muse.muse_forward(x, block)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    formats.save_tensor(args.out, out)
    if args.save_weights:
        formats.save_named_arrays(args.save_weights, block.weight_arrays())
    return 0


_FUSE_SCHEMA = {
    "upsample_factor": "2",
    "combine": "add",
    "seed": "0",
    "out_channels": "0",
}


def _cmd_fuse(args) -> int:
    cfg = _load_config(args.config, _FUSE_SCHEMA)
    c2 = _load_tensor_any(args.c2)
    p3 = _load_tensor_any(args.p3)
    out_channels = int(cfg["out_channels"]) or p3.channels
    align = ConvSpec.seeded(c2.channels, out_channels, 1, 1, seed=int(cfg["seed"]))
    fused = p2_fuse(c2, p3, FusionConfig(align, int(cfg["upsample_factor"]),
                                         cfg["combine"]))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    formats.save_tensor(args.out, fused)
    return 0


# ---------------------------------------------------------------------------
# eval

_EVAL_SCHEMA = {
    "num_classes": "3",
    "iou": "0.5",
    "nms": "0",
    "nms_iou": "0.7",
    "max_det": "300",
}


def _read_records(path):
    with open(path, "r", encoding="utf-8") as fh:
        return metrics.parse_detection_records(fh.read())


def _cmd_eval(args, use_mask_iou: bool) -> int:
    cfg = _load_config(args.config, _EVAL_SCHEMA)
    preds = metrics.records_by_image(_read_records(args.pred))
    truths = metrics.records_by_image(_read_records(args.truth))
    image_ids = sorted(set(preds) | set(truths))
    samples = []
    for image_id in image_ids:
        p = preds.get(image_id, [])
        if _as_bool(cfg["nms"], "nms"):
            p = metrics.nms(p, float(cfg["nms_iou"]), int(cfg["max_det"]))
        samples.append((p, truths.get(image_id, [])))
    report = metrics.evaluate_detections(
        samples, int(cfg["num_classes"]), use_mask_iou=use_mask_iou,
        base_iou=float(cfg["iou"]), workers=args.threads)
    atomic_write_text(args.out, report.to_text())
    if args.dump:
        lines = [
            f"map50 {format_float(report.map50)}",
            f"map50_95 {format_float(report.map50_95)}",
            f"precision {format_float(report.precision)}",
            f"recall {format_float(report.recall)}",
            f"mean_iou {format_float(report.mean_iou)}",
            f"mean_dice {format_float(report.mean_dice)}",
        ]
        for (c, t), ap in sorted(report.per_class_ap.items()):
            val = "excluded" if ap is None else format_float(ap)
            lines.append(f"ap {c} {t:.2f} {val}")
        atomic_write_text(args.dump, "".join(line + "\n" for line in lines))
    return 0


# ---------------------------------------------------------------------------
# gradcheck / count

_GRADCHECK_SCHEMA = {
    "seeds": "10",
    "samples": "6",
    "tolerance": "1e-4",
}


def _cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config, _GRADCHECK_SCHEMA)
    n_seeds = int(cfg["seeds"])
    samples = int(cfg["samples"])
    tolerance = float(cfg["tolerance"])

    def conv_case(seed):
        spec = ConvSpec.seeded(2, 3, 3, 3, seed=seed, padding=2, dilation=2)
        return tensor.ConvOp(spec), Tensor.random_uniform(2, 6, 7, seed=seed + 50)

    def cases(name, seed):
        x = Tensor.random_uniform(2, 6, 7, seed=seed + 50)
        other = Tensor.random_uniform(2, 6, 7, seed=seed + 90)
        table = {
            "conv2d": conv_case,
            "pointwise_add": lambda s: (tensor.PointwiseOp(other, "add"), x),
            "pointwise_mul": lambda s: (tensor.PointwiseOp(other, "mul"), x),
            "sigmoid_map": lambda s: (tensor.SigmoidOp(), x),
            "global_avg_pool": lambda s: (tensor.GapOp(), x),
            "upsample_nearest": lambda s: (tensor.UpsampleOp(2), x),
            "muse_forward": lambda s: (
                muse.MuseOp(muse.MuseBlock.seeded(2, 4, seed=s)), x),
        }
        return table[name](seed)

    ops = ["conv2d", "pointwise_add", "pointwise_mul", "sigmoid_map",
           "global_avg_pool", "upsample_nearest", "muse_forward"]
    eps_by_op = {"sigmoid_map": 1e-4, "muse_forward": 1e-4}
    lines = []
    failed = False
    for name in ops:
        worst = 0.0
        for seed in range(n_seeds):
            op, x = cases(name, seed)
            err = tensor.grad_check(op, x, eps_by_op.get(name, 1e-3),
                                    samples=samples, seed=seed)
            worst = max(worst, err)
        ok = worst <= tolerance
        failed = failed or not ok
        lines.append(f"{name} max_error={worst:.3e} {'PASS' if ok else 'FAIL'}")
    atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    if failed:
        print("gradcheck: at least one op exceeded the tolerance", file=sys.stderr)
        return 1
    return 0


def _cmd_count(args) -> int:
    with open(args.layers, "r", encoding="utf-8") as fh:
        layers = metrics.parse_layers(fh.read())
    params, flops = metrics.count_params_flops(layers)
    text = (
        f"layers={len(layers)}\n"
        f"params={params}\n"
        f"flops={flops}\n"
        f"params_millions={format_float(params / 1e6)}\n"
        f"flops_giga={format_float(flops / 1e9)}\n"
    )
    atomic_write_text(args.out, text)
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wafertex",
        description="Periodic-texture defect enhancement, synthesis, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a scene with ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("enhance", help="periodic-disturbance enhancement")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("muse", help="context block forward pass")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--save-weights")
    p.set_defaults(func=_cmd_muse)

    p = sub.add_parser("fuse", help="high-resolution branch fusion")
    p.add_argument("--c2", required=True)
    p.add_argument("--p3", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_fuse)

    for name, mask in (("eval-seg", True), ("eval-det", False)):
        p = sub.add_parser(name, help=f"evaluate detections ({'mask' if mask else 'box'} IoU)")
        p.add_argument("--pred", required=True)
        p.add_argument("--truth", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--dump")
        p.add_argument("--config")
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(func=lambda args, m=mask: _cmd_eval(args, m))

    p = sub.add_parser("gradcheck", help="derivative verification report")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("count", help="parameter / FLOP accounting")
    p.add_argument("--layers", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_count)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"wafertex: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"wafertex: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"wafertex: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
