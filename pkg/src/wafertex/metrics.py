"""Detection and segmentation evaluation.

Boxes are ``(x1, y1, x2, y2)`` in pixels with the half-open convention
(area ``(x2-x1)*(y2-y1)``); masks are binary maps carried as run-length
payloads.  Matching is greedy in descending score: a prediction is a true
positive iff it shares the class of an unmatched ground truth with overlap at
or above the threshold (best-overlap ground truth wins, each matched once).
Average precision integrates the monotone precision envelope over every
recall breakpoint (all-points interpolation).  Empty-set conventions: with
zero predictions precision is 1, with zero ground truths recall is 1, and an
empty-vs-empty mask pair scores IoU = Dice = 1.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from wafertex.formats import RleMask, format_float, rle_from_token, rle_to_token

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    """One scored, classed prediction (or ground-truth entry)."""

    class_id: int
    score: float
    box: tuple[float, float, float, float]
    mask: RleMask | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2, got {self.box}")
        if self.mask is not None:
            w, h = self.mask.width, self.mask.height
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise ValueError(f"box {self.box} outside {w}x{h} image bounds")


def box_iou(a: tuple[float, float, float, float],
            b: tuple[float, float, float, float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def mask_iou_dice(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """IoU and Dice of two binary maps (both-empty counts as perfect)."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = int(np.logical_and(p, g).sum())
    p_count = int(p.sum())
    g_count = int(g.sum())
    union = p_count + g_count - inter
    if union == 0:
        return 1.0, 1.0
    iou = inter / union
    dice = 2.0 * inter / (p_count + g_count)
    return iou, dice


def _score_order(dets: list[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def nms(dets: list[Detection], iou_threshold: float, max_det: int) -> list[Detection]:
    """Greedy per-class suppression of boxes with IoU above the threshold.

    Survivors come back in descending score (ties by input order), at most
    ``max_det`` of them.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if max_det < 0:
        raise ValueError(f"max_det must be >= 0, got {max_det}")
    kept: list[int] = []
    for i in _score_order(dets):
        suppressed = any(
            dets[j].class_id == dets[i].class_id
            and box_iou(dets[j].box, dets[i].box) > iou_threshold
            for j in kept
        )
        if not suppressed:
            kept.append(i)
    return [dets[i] for i in kept[:max_det]]


def _decoded_masks(dets: list[Detection], role: str) -> list[np.ndarray]:
    out = []
    for i, det in enumerate(dets):
        if det.mask is None:
            raise ValueError(f"{role} #{i} has no mask but mask IoU was requested")
        out.append(det.mask.decode())
    return out


@dataclass(frozen=True)
class MatchResult:
    """Greedy assignment: ``tp`` holds (pred index, gt index, overlap)."""

    tp: tuple[tuple[int, int, float], ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp), len(self.fp), len(self.fn)


def _greedy_match(preds, gts, iou_threshold, overlap, same_class):
    taken = [False] * len(gts)
    tp: list[tuple[int, int, float]] = []
    fp: list[int] = []
    for i in _score_order(preds):
        best_j, best_iou = -1, -1.0
        for j in range(len(gts)):
            if taken[j]:
                continue
            if same_class and preds[i].class_id != gts[j].class_id:
                continue
            v = overlap(i, j)
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            tp.append((i, best_j, best_iou))
        else:
            fp.append(i)
    fn = [j for j in range(len(gts)) if not taken[j]]
    return tp, fp, fn


def match_detections(preds: list[Detection], gts: list[Detection],
                     iou_threshold: float, use_mask_iou: bool = False) -> MatchResult:
    """Assign predictions to ground truths (greedy, descending score)."""
    if use_mask_iou:
        pm = _decoded_masks(preds, "prediction")
        gm = _decoded_masks(gts, "ground truth")

        def overlap(i, j):
            return mask_iou_dice(pm[i], gm[j])[0]
    else:
        def overlap(i, j):
            return box_iou(preds[i].box, gts[j].box)

    tp, fp, fn = _greedy_match(preds, gts, iou_threshold, overlap, same_class=True)
    return MatchResult(tuple(tp), tuple(fp), tuple(fn))


def precision_recall(counts: tuple[int, int, int]) -> tuple[float, float]:
    """Precision and recall from (TP, FP, FN); 0/0 counts as 1.0."""
    tp, fp, fn = counts
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError(f"counts must be >= 0, got {counts}")
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


@dataclass(frozen=True)
class PRCurve:
    points: tuple[tuple[float, float], ...]  # (recall, precision)
    iou_threshold: float
    class_id: int

    def __post_init__(self):
        recalls = [r for r, _ in self.points]
        if any(b < a for a, b in zip(recalls, recalls[1:])):
            raise ValueError("recall must be non-decreasing along the curve")


def pr_curve(scored: list[tuple[float, bool]], num_gts: int,
             iou_threshold: float, class_id: int) -> PRCurve:
    return PRCurve(tuple(pr_points(scored, num_gts)), iou_threshold, class_id)


def pr_points(scored: list[tuple[float, bool]], num_gts: int) -> list[tuple[float, float]]:
    """Cumulative (recall, precision) along descending score."""
    if num_gts < 1:
        raise ValueError("AP is undefined with zero ground truths")
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    points = []
    tp = fp = 0
    for i in order:
        if scored[i][1]:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gts, tp / (tp + fp)))
    if tp > num_gts:
        raise ValueError(f"{tp} true positives exceed {num_gts} ground truths")
    return points


def average_precision(scored: list[tuple[float, bool]], num_gts: int) -> float:
    """Area under the monotone precision envelope over all recall breakpoints."""
    points = pr_points(scored, num_gts)
    ap = 0.0
    prev_recall = 0.0
    env = 0.0
    # sweep backwards for the envelope, then integrate forward
    envs = [0.0] * len(points)
    for k in range(len(points) - 1, -1, -1):
        env = max(env, points[k][1])
        envs[k] = env
    for k, (recall, _) in enumerate(points):
        ap += (recall - prev_recall) * envs[k]
        prev_recall = recall
    return ap


@dataclass(frozen=True)
class MetricsReport:
    """Full evaluation bundle; every rate lies in [0, 1]."""

    num_classes: int
    iou_thresholds: tuple[float, ...]
    per_class_ap: dict[tuple[int, float], float | None]
    map50: float
    map50_95: float
    precision: float
    recall: float
    mean_iou: float
    mean_dice: float
    counts: tuple[int, int, int]
    confusion: np.ndarray  # (N+1) x (N+1), GT classes in columns, normalized

    def to_text(self) -> str:
        pairs: list[tuple[str, str]] = [
            ("classes", str(self.num_classes)),
            ("tp", str(self.counts[0])),
            ("fp", str(self.counts[1])),
            ("fn", str(self.counts[2])),
            ("precision", format_float(self.precision)),
            ("recall", format_float(self.recall)),
            ("mean_iou", format_float(self.mean_iou)),
            ("mean_dice", format_float(self.mean_dice)),
            ("map50", format_float(self.map50)),
            ("map50_95", format_float(self.map50_95)),
        ]
        for (c, t), ap in sorted(self.per_class_ap.items()):
            pairs.append((f"ap_class{c}_iou{t:.2f}",
                          "excluded" if ap is None else format_float(ap)))
        for i, row in enumerate(self.confusion):
            pairs.append((f"confusion_row{i}", " ".join(format_float(v) for v in row)))
        width = max(len(k) for k, _ in pairs)
        return "".join(f"{k.ljust(width)} = {v}\n" for k, v in pairs)


def evaluate_detections(samples: list[tuple[list[Detection], list[Detection]]],
                        num_classes: int, use_mask_iou: bool = False,
                        base_iou: float = 0.5,
                        thresholds: tuple[float, ...] = MAP_THRESHOLDS,
                        workers: int = 1) -> MetricsReport:
    """Evaluate (predictions, ground truths) pairs, one entry per image.

    Per-class AP is computed at every threshold; classes with no ground truth
    anywhere are excluded from the means.  Precision, recall, mean overlap,
    and the confusion matrix are taken at ``base_iou``.  ``workers`` only
    parallelizes the per-image matching; aggregation order is fixed.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")

    def match_all(t):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(
                    lambda s: match_detections(s[0], s[1], t, use_mask_iou), samples))
        return [match_detections(p, g, t, use_mask_iou) for p, g in samples]

    gt_counts = np.zeros(num_classes, dtype=np.int64)
    for preds, gts in samples:
        for det in preds:
            if det.class_id >= num_classes:
                raise ValueError(
                    f"prediction class {det.class_id} >= num_classes {num_classes}")
        for det in gts:
            if det.class_id >= num_classes:
                raise ValueError(
                    f"ground-truth class {det.class_id} >= num_classes {num_classes}")
            gt_counts[det.class_id] += 1

    per_class_ap: dict[tuple[int, float], float | None] = {}
    map_at: dict[float, float] = {}
    base_matches = None
    for t in thresholds:
        matches = match_all(t)
        if t == base_iou:
            base_matches = matches
        aps = []
        for c in range(num_classes):
            if gt_counts[c] == 0:
                per_class_ap[(c, t)] = None
                continue
            scored: list[tuple[float, bool]] = []
            for (preds, _), m in zip(samples, matches):
                tp_preds = {i for i, _, _ in m.tp}
                for i, det in enumerate(preds):
                    if det.class_id == c:
                        scored.append((det.score, i in tp_preds))
            ap = average_precision(scored, int(gt_counts[c]))
            per_class_ap[(c, t)] = ap
            aps.append(ap)
        map_at[t] = float(np.mean(aps)) if aps else 0.0
    if base_matches is None:
        base_matches = match_all(base_iou)

    tp = sum(len(m.tp) for m in base_matches)
    fp = sum(len(m.fp) for m in base_matches)
    fn = sum(len(m.fn) for m in base_matches)
    precision, recall = precision_recall((tp, fp, fn))

    overlaps = [iou for m in base_matches for (_, _, iou) in m.tp]
    mean_iou = float(np.mean(overlaps)) if overlaps else 0.0
    # Dice = 2*IoU/(1+IoU) holds identically for set overlaps
    mean_dice = float(np.mean([2.0 * v / (1.0 + v) for v in overlaps])) if overlaps else 0.0

    confusion = confusion_matrix(samples, num_classes, iou_threshold=base_iou,
                                 use_mask_iou=use_mask_iou, normalize=True)

    map50 = map_at.get(0.5, 0.0)
    map50_95 = float(np.mean([map_at[t] for t in thresholds]))
    return MetricsReport(
        num_classes=num_classes,
        iou_thresholds=tuple(thresholds),
        per_class_ap=per_class_ap,
        map50=map50,
        map50_95=map50_95,
        precision=precision,
        recall=recall,
        mean_iou=mean_iou,
        mean_dice=mean_dice,
        counts=(tp, fp, fn),
        confusion=confusion,
    )


def map_range(samples: list[tuple[list[Detection], list[Detection]]],
              num_classes: int, use_mask_iou: bool = False,
              thresholds: tuple[float, ...] = MAP_THRESHOLDS,
              workers: int = 1) -> tuple[float, float]:
    """(mAP50, mAP50-95): class-mean AP at 0.5 and the mean over thresholds."""
    report = evaluate_detections(samples, num_classes, use_mask_iou=use_mask_iou,
                                 thresholds=thresholds, workers=workers)
    return report.map50, report.map50_95


def confusion_matrix(samples, num_classes: int, iou_threshold: float = 0.5,
                     use_mask_iou: bool = False, normalize: bool = True) -> np.ndarray:
    """(N+1) x (N+1) tally: entry (i, j) counts GT class j predicted as i.

    Matching here is class-agnostic (greedy by score) so cross-class mistakes
    land off the diagonal.  Unmatched ground truths fall into the background
    row, false positives into the background column.  With ``normalize`` each
    nonzero column is scaled to sum to one.
    """
    n = num_classes
    mat = np.zeros((n + 1, n + 1), dtype=np.float64)
    for preds, gts in samples:
        for det in [*preds, *gts]:
            if det.class_id >= n:
                raise ValueError(f"class {det.class_id} >= num_classes {n}")
        if use_mask_iou:
            pm = _decoded_masks(preds, "prediction")
            gm = _decoded_masks(gts, "ground truth")

            def overlap(i, j):
                return mask_iou_dice(pm[i], gm[j])[0]
        else:
            def overlap(i, j):
                return box_iou(preds[i].box, gts[j].box)

        tp, fp, fn = _greedy_match(preds, gts, iou_threshold, overlap, same_class=False)
        for i, j, _ in tp:
            mat[preds[i].class_id, gts[j].class_id] += 1
        for i in fp:
            mat[preds[i].class_id, n] += 1
        for j in fn:
            mat[n, gts[j].class_id] += 1
    if normalize:
        sums = mat.sum(axis=0)
        nonzero = sums > 0
        mat[:, nonzero] /= sums[nonzero]
    return mat


def pixel_auroc(scores: np.ndarray, mask: np.ndarray) -> float:
    """Area under the ROC of a score map against a binary truth map.

    Rank-based (Mann-Whitney) with average ranks on ties; needs at least one
    positive and one negative pixel.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    m = np.asarray(mask).astype(bool).ravel()
    if s.shape != m.shape:
        raise ValueError(f"score/mask sizes differ: {s.shape} vs {m.shape}")
    n_pos = int(m.sum())
    n_neg = m.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative pixels")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = (cum - counts + 1 + cum) / 2.0
    ranks = avg_rank[inverse]
    rank_sum = float(ranks[m].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Parameter / FLOP accounting

_LAYER_KINDS = ("conv", "dwconv", "effective_se", "upsample", "concat", "maxpool")


@dataclass(frozen=True)
class LayerSpec:
    """One line of a layer table; each entry carries its own input size."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True
    in_h: int = 0
    in_w: int = 0

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def count_params_flops(layers: list[LayerSpec]) -> tuple[int, int]:
    """Totals over the layer list.

    Convolution: ``params = out * (in/groups) * kh * kw + out[bias]``;
    ``flops = 2 * out * (in/groups) * kh * kw * OH * OW + out * OH * OW
    [bias]`` (multiply-add counted as 2).  ``effective_se`` counts its pooled
    grouped 1x1 conv plus the pooling adds and sigmoid.  ``upsample``,
    ``concat``, and ``maxpool`` are bookkeeping rows: zero params and FLOPs.
    """
    params = 0
    flops = 0
    for layer in layers:
        kind = layer.kind
        if kind in ("upsample", "concat", "maxpool"):
            continue
        if kind == "dwconv":
            layer = LayerSpec("conv", layer.in_channels, layer.in_channels,
                              layer.kernel_h, layer.kernel_w, layer.stride,
                              layer.padding, layer.in_channels, layer.bias,
                              layer.in_h, layer.in_w)
            kind = "conv"
        if kind == "conv":
            cin_g = layer.in_channels // layer.groups
            p_mul = layer.out_channels * cin_g * layer.kernel_h * layer.kernel_w
            params += p_mul + (layer.out_channels if layer.bias else 0)
            oh = (layer.in_h + 2 * layer.padding - (layer.kernel_h - 1) - 1) // layer.stride + 1
            ow = (layer.in_w + 2 * layer.padding - (layer.kernel_w - 1) - 1) // layer.stride + 1
            if layer.in_h and layer.in_w:
                flops += 2 * p_mul * oh * ow
                if layer.bias:
                    flops += layer.out_channels * oh * ow
        elif kind == "effective_se":
            c = layer.in_channels
            cin_g = c // layer.groups
            params += c * cin_g + c
            flops += c * layer.in_h * layer.in_w  # pooling adds
            flops += 2 * c * cin_g + c  # 1x1 conv on the pooled vector + bias
            flops += c  # sigmoid
    return params, flops


def parse_layers(text: str) -> list[LayerSpec]:
    """Parse a layer table: one layer per line, ``kind key=value ...``.

    Keys: ``in out k kh kw stride pad groups bias size h w``.  ``size`` sets
    both spatial dims, ``k`` both kernel dims.  Unknown kinds and keys raise.
    """
    layers = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        kind = tokens[0]
        fields: dict[str, int] = {}
        for tok in tokens[1:]:
            if "=" not in tok:
                raise ValueError(f"line {lineno}: expected key=value, got {tok!r}")
            key, value = tok.split("=", 1)
            if key not in ("in", "out", "k", "kh", "kw", "stride", "pad",
                           "groups", "bias", "size", "h", "w"):
                raise ValueError(f"line {lineno}: unknown layer key {key!r}")
            fields[key] = int(value)
        try:
            layers.append(LayerSpec(
                kind=kind,
                in_channels=fields.get("in", 0),
                out_channels=fields.get("out", fields.get("in", 0)),
                kernel_h=fields.get("kh", fields.get("k", 1)),
                kernel_w=fields.get("kw", fields.get("k", 1)),
                stride=fields.get("stride", 1),
                padding=fields.get("pad", 0),
                groups=fields.get("groups", 1),
                bias=bool(fields.get("bias", 1)),
                in_h=fields.get("h", fields.get("size", 0)),
                in_w=fields.get("w", fields.get("size", 0)),
            ))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return layers


# ---------------------------------------------------------------------------
# Detection record wire format

def render_detection_records(records: list[tuple[str, Detection]]) -> str:
    """One detection per line: image-id, class, score, box, optional rle."""
    lines = []
    for image_id, det in records:
        if any(ch.isspace() for ch in image_id):
            raise ValueError(f"image id may not contain whitespace: {image_id!r}")
        parts = [image_id, str(det.class_id), repr(float(det.score))]
        parts += [repr(float(v)) for v in det.box]
        if det.mask is not None:
            parts.append("rle=" + rle_to_token(det.mask))
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def parse_detection_records(text: str) -> list[tuple[str, Detection]]:
    from wafertex.formats import FormatError

    records: list[tuple[str, Detection]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) not in (7, 8):
            raise FormatError(
                f"line {lineno}: expected 7 fields plus optional rle, got {len(parts)}")
        try:
            image_id = parts[0]
            class_id = int(parts[1])
            score = float(parts[2])
            box = tuple(float(v) for v in parts[3:7])
            mask = None
            if len(parts) == 8:
                if not parts[7].startswith("rle="):
                    raise ValueError(f"unexpected trailing field {parts[7]!r}")
                mask = rle_from_token(parts[7][4:])
            records.append((image_id, Detection(class_id, score, box, mask)))
        except (ValueError, FormatError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    return records


def records_by_image(records: list[tuple[str, Detection]]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for image_id, det in records:
        out.setdefault(image_id, []).append(det)
    return out
