"""Tracking metrics (accuracy, robustness, mIoU), reports, and run config."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from .labels import BBox


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def mask_iou(pred, gt) -> float:
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(pred_masks, gt_masks) -> float:
    """Mean over frames of binary mask IoU."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError(
            f"miou: length mismatch {len(pred_masks)} vs {len(gt_masks)}")
    return float(np.mean([mask_iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


def evaluate(boxes, seq, reset=False, skip=10, burn_in=5, seq_id="seq"):
    """Per-sequence record from tracked boxes aligned to frames 2..L.

    A failure is a tracked frame with zero overlap.  Under the reset
    protocol ``boxes`` may contain None for the frames skipped between a
    failure and the re-initialization; the first ``burn_in`` tracked frames
    after each gap are excluded from accuracy.
    """
    gts = seq.boxes[1:]
    if len(boxes) != len(gts):
        raise ValueError(f"evaluate: {len(boxes)} results vs {len(gts)} frames")
    total = len(gts)
    failures = 0
    kept = []
    burn = 0
    prev_none = False
    for b, gt in zip(boxes, gts):
        if b is None:
            if not reset:
                raise ValueError("evaluate: missing result outside reset mode")
            prev_none = True
            continue
        if prev_none:
            burn = burn_in
            prev_none = False
        v = iou(b, gt)
        if v == 0.0:
            failures += 1
            continue
        if burn > 0:
            burn -= 1
            continue
        kept.append(v)
    return {
        "id": seq_id,
        "mean_iou_while_tracking": float(np.mean(kept)) if kept else 0.0,
        "failures": failures,
        "frames": total,
    }


@dataclass
class EvalReport:
    per_sequence: list
    accuracy: float
    robustness: float
    miou: float | None
    config_hash: str


def aggregate(per_sequence, mious=None, config_hash=""):
    acc = float(np.mean([r["mean_iou_while_tracking"] for r in per_sequence]))
    total_frames = sum(r["frames"] for r in per_sequence)
    total_fail = sum(r["failures"] for r in per_sequence)
    rob = 100.0 * total_fail / total_frames if total_frames else 0.0
    mi = float(np.mean(mious)) if mious else None
    return EvalReport(per_sequence=list(per_sequence), accuracy=acc,
                      robustness=rob, miou=mi, config_hash=config_hash)


def render_report(report: EvalReport) -> str:
    lines = [f"config_hash = {report.config_hash}",
             f"aggregate.accuracy = {report.accuracy:.6f}",
             f"aggregate.miou = "
             f"{'nan' if report.miou is None else f'{report.miou:.6f}'}",
             f"aggregate.robustness = {report.robustness:.6f}"]
    for k, r in enumerate(report.per_sequence):
        p = f"seq.{k:03d}"
        lines.append(f"{p}.id = {r['id']}")
        lines.append(f"{p}.frames = {r['frames']}")
        lines.append(f"{p}.failures = {r['failures']}")
        lines.append(f"{p}.mean_iou = {r['mean_iou_while_tracking']:.6f}")
    return "\n".join(lines) + "\n"


def human_table(report: EvalReport) -> str:
    rows = [f"{'sequence':<16}{'frames':>8}{'failures':>10}{'mean IoU':>10}"]
    for r in report.per_sequence:
        rows.append(f"{r['id']:<16}{r['frames']:>8}{r['failures']:>10}"
                    f"{r['mean_iou_while_tracking']:>10.3f}")
    rows.append("-" * 44)
    rows.append(f"accuracy={report.accuracy:.4f}  "
                f"robustness={report.robustness:.3f}"
                + ("" if report.miou is None else f"  miou={report.miou:.4f}"))
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# run configuration: line-oriented "key = value" files
# ---------------------------------------------------------------------------

def parse_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


def apply_config(obj, conf: dict, prefix: str):
    """Apply ``prefix.field`` entries to a dataclass; unknown keys error."""
    names = {f.name: f for f in fields(obj)}
    for key, val in conf.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in names:
            raise KeyError(f"config: unknown key {key!r}")
        cur = getattr(obj, name)
        if isinstance(cur, bool):
            setattr(obj, name, val.lower() in ("1", "true", "yes", "on"))
        elif isinstance(cur, int):
            setattr(obj, name, int(val))
        elif isinstance(cur, float):
            setattr(obj, name, float(val))
        elif isinstance(cur, tuple):
            setattr(obj, name, tuple(type(c)(v) for c, v in
                                     zip(cur, val.split(","))))
        else:
            setattr(obj, name, val)
    return obj


KNOWN_PREFIXES = ("meta", "track", "synth", "net")


def check_config_keys(conf: dict, objs: dict):
    """Reject keys that target no known dataclass field (typo safety)."""
    for key in conf:
        parts = key.split(".", 1)
        if len(parts) != 2 or parts[0] not in KNOWN_PREFIXES:
            raise KeyError(f"config: unknown key {key!r}")
        prefix, name = parts
        if prefix in objs:
            if name not in {f.name for f in fields(objs[prefix])}:
                raise KeyError(f"config: unknown key {key!r}")


def config_hash(conf: dict) -> str:
    blob = "\n".join(f"{k} = {conf[k]}" for k in sorted(conf)).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
