"""Deterministic synthetic video: moving, deforming target with distractors.

Stand-in for a real video corpus.  Everything is a pure function of
(seed, params); sequences round-trip through the binary "MTSQ" file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .labels import (AnchorSpec, BBox, anchor_labels, augment,
                     grid_location, make_support_example)


@dataclass
class SynthParams:
    L: int = 16
    H: int = 96
    W: int = 96
    n_distractors: int = 2
    motion: float = 2.0
    deform: float = 0.2
    occlusion_p: float = 0.2


@dataclass
class Sequence:
    frames: np.ndarray          # (L,H,W) float64 in [0,1]
    masks: np.ndarray           # (L,H,W) uint8 in {0,1}
    boxes: list                 # L tight BBoxes
    seed: int


@dataclass
class QueryExample:
    template: np.ndarray
    search: np.ndarray
    gt_mask: np.ndarray         # (n,n) binary, search-patch grid
    gt_box: BBox                # search-patch coords
    cls_label: np.ndarray
    box_target: np.ndarray
    mask_location: tuple
    frame: int


@dataclass
class Task:
    support: list               # K SupportExamples
    query: list                 # N QueryExamples
    source_frame: int


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

class _Shape:
    """Radial shape: ellipse or harmonic-perturbed (rounded) polygon."""

    def __init__(self, rng, radius):
        self.a = radius * rng.uniform(0.8, 1.2)
        self.b = radius * rng.uniform(0.6, 1.0)
        self.angle = rng.uniform(0, np.pi)
        if rng.random() < 0.5:
            self.harm = (int(rng.integers(3, 6)), rng.uniform(0.1, 0.25),
                         rng.uniform(0, 2 * np.pi))
        else:
            self.harm = None

    def raster(self, H, W, cx, cy, scale=1.0):
        ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        dx, dy = xs - cx, ys - cy
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = (ca * dx + sa * dy) / (self.a * scale)
        v = (-sa * dx + ca * dy) / (self.b * scale)
        r = np.sqrt(u * u + v * v)
        lim = np.ones_like(r)
        if self.harm is not None:
            k, amp, ph = self.harm
            theta = np.arctan2(v, u)
            lim = 1.0 + amp * np.cos(k * theta + ph)
        return r <= lim


class _Walker:
    """Bounded random-walk motion inside a margin."""

    def __init__(self, rng, W, H, margin, motion):
        self.W, self.H, self.m = W, H, margin
        self.x = rng.uniform(margin, W - margin)
        self.y = rng.uniform(margin, H - margin)
        ang = rng.uniform(0, 2 * np.pi)
        self.vx = motion * np.cos(ang)
        self.vy = motion * np.sin(ang)
        self.motion = motion

    def step(self, rng):
        self.vx += rng.normal(0, 0.3) * self.motion
        self.vy += rng.normal(0, 0.3) * self.motion
        speed = np.hypot(self.vx, self.vy)
        if self.motion == 0:
            self.vx = self.vy = 0.0
        elif speed > self.motion:
            self.vx *= self.motion / speed
            self.vy *= self.motion / speed
        self.x += self.vx
        self.y += self.vy
        if not self.m <= self.x <= self.W - self.m:
            self.vx = -self.vx
            self.x = np.clip(self.x, self.m, self.W - self.m)
        if not self.m <= self.y <= self.H - self.m:
            self.vy = -self.vy
            self.y = np.clip(self.y, self.m, self.H - self.m)


def _background(rng, H, W):
    coarse = rng.uniform(0.0, 1.0, (H // 8 + 2, W // 8 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, H)
    xs = np.linspace(0, coarse.shape[1] - 1.001, W)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    up = (coarse[y0][:, x0] * (1 - fy) * (1 - fx)
          + coarse[y0][:, x0 + 1] * (1 - fy) * fx
          + coarse[y0 + 1][:, x0] * fy * (1 - fx)
          + coarse[y0 + 1][:, x0 + 1] * fy * fx)
    return 0.2 + 0.2 * up


def _tight_box(mask):
    ys, xs = np.where(mask)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    return BBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0 + 1.0, y1 - y0 + 1.0)


def generate_sequence(seed, params: SynthParams | None = None) -> Sequence:
    p = params or SynthParams()
    if p.L < 2 or p.H < 96 or p.W < 96:
        raise ValueError(f"generate_sequence: invalid params L={p.L} H={p.H} W={p.W}")
    rng = np.random.default_rng(seed)

    bg = _background(rng, p.H, p.W)
    radius = rng.uniform(8, 14)
    margin = radius * 1.6
    target_shape = _Shape(rng, radius)
    target_walk = _Walker(rng, p.W, p.H, margin, p.motion)
    target_val = rng.uniform(0.7, 0.9)
    deform_phase = rng.uniform(0, 2 * np.pi)

    distractors = []
    for _ in range(p.n_distractors):
        distractors.append((_Shape(rng, radius * rng.uniform(0.7, 1.1)),
                            _Walker(rng, p.W, p.H, margin * 0.7, p.motion),
                            rng.uniform(0.6, 0.8)))
    occluder = None
    if p.n_distractors > 0 and rng.random() < p.occlusion_p:
        occluder = int(rng.integers(p.n_distractors))
        occ_window = (p.L // 3, 2 * p.L // 3)

    frames = np.empty((p.L, p.H, p.W))
    masks = np.empty((p.L, p.H, p.W), dtype=np.uint8)
    boxes = []
    for t in range(p.L):
        scale = 1.0 + p.deform * np.sin(2 * np.pi * t / p.L + deform_phase)
        frame = bg.copy()
        tgt = target_shape.raster(p.H, p.W, target_walk.x, target_walk.y, scale)
        occluding = []
        for di, (shape, walk, val) in enumerate(distractors):
            if occluder == di and occ_window[0] <= t < occ_window[1]:
                # force a crossing pass over the target
                frac = (t - occ_window[0]) / max(1, occ_window[1] - occ_window[0] - 1)
                ox = target_walk.x + (frac - 0.5) * 4 * radius
                oy = target_walk.y
                occluding.append((shape.raster(p.H, p.W, ox, oy), val))
            else:
                frame[shape.raster(p.H, p.W, walk.x, walk.y)] = val
        frame[tgt] = target_val
        for om, val in occluding:
            frame[om] = val
        frames[t] = np.clip(frame, 0.0, 1.0)
        masks[t] = tgt.astype(np.uint8)
        boxes.append(_tight_box(tgt))
        target_walk.step(rng)
        for _, walk, _ in distractors:
            walk.step(rng)
    return Sequence(frames=frames, masks=masks, boxes=boxes, seed=int(seed))


# ---------------------------------------------------------------------------
# file format "MTSQ"
# ---------------------------------------------------------------------------

def write_sequence(seq: Sequence, path):
    L, H, W = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(b"MTSQ")
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<III", L, H, W))
        for t in range(L):
            fh.write(seq.frames[t].astype("<f4").tobytes())
            fh.write(seq.masks[t].astype(np.uint8).tobytes())
            b = seq.boxes[t]
            fh.write(struct.pack("<4f", b.cx, b.cy, b.w, b.h))
        fh.write(struct.pack("<Q", seq.seed))


def read_sequence(path) -> Sequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"MTSQ":
        raise ValueError(f"sequence file: bad magic {blob[:4]!r} at offset 0")
    if blob[4] != 1:
        raise ValueError(f"sequence file: unsupported version {blob[4]} at offset 4")
    L, H, W = struct.unpack_from("<III", blob, 5)
    per = H * W * 4 + H * W + 16
    expect = 17 + L * per + 8
    if len(blob) != expect:
        raise ValueError(
            f"sequence file: truncated, expected {expect} bytes, got {len(blob)}")
    off = 17
    frames = np.empty((L, H, W))
    masks = np.empty((L, H, W), dtype=np.uint8)
    boxes = []
    for t in range(L):
        frames[t] = np.frombuffer(blob, "<f4", H * W, off).reshape(H, W)
        off += H * W * 4
        masks[t] = np.frombuffer(blob, np.uint8, H * W, off).reshape(H, W)
        off += H * W
        boxes.append(BBox(*struct.unpack_from("<4f", blob, off)))
        off += 16
    (seed,) = struct.unpack_from("<Q", blob, off)
    return Sequence(frames=frames, masks=masks, boxes=boxes, seed=seed)


def write_corpus(seqs_paths, manifest_path):
    with open(manifest_path, "w") as fh:
        for rel in seqs_paths:
            fh.write(f"{rel}\n")


def read_manifest(manifest_path):
    with open(manifest_path) as fh:
        return [line.strip() for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# crops and task construction
# ---------------------------------------------------------------------------

def crop_resize(img, cx, cy, side, out, fill, binary=False):
    """Resample a square window (center, side) to ``out``x``out`` pixels."""
    # pixel centers sit at integer coordinates; sample output-cell midpoints
    idx = (np.arange(out) + 0.5) * side / out
    xs = cx - side / 2.0 + idx
    ys = cy - side / 2.0 + idx
    H, W = img.shape
    if binary:
        xi = np.clip(np.round(xs).astype(int), -1, W)
        yi = np.clip(np.round(ys).astype(int), -1, H)
        valid = (xi[None, :] >= 0) & (xi[None, :] < W) & (yi[:, None] >= 0) & (yi[:, None] < H)
        xi2 = np.clip(xi, 0, W - 1)
        yi2 = np.clip(yi, 0, H - 1)
        out_img = img[yi2[:, None], xi2[None, :]].astype(np.float64)
        out_img[~valid] = 0.0
        return out_img
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    y0c = np.clip(y0, 0, H - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)
    v = (img[y0c[:, None], x0c[None, :]] * ((1 - fy)[:, None] * (1 - fx)[None, :])
         + img[y0c[:, None], x1c[None, :]] * ((1 - fy)[:, None] * fx[None, :])
         + img[y1c[:, None], x0c[None, :]] * (fy[:, None] * (1 - fx)[None, :])
         + img[y1c[:, None], x1c[None, :]] * (fy[:, None] * fx[None, :]))
    inside = ((xs >= 0)[None, :] & (xs <= W - 1)[None, :]
              & (ys >= 0)[:, None] & (ys <= H - 1)[:, None])
    v = np.where(inside, v, fill)
    return v


def _context_side(box, factor):
    return factor * np.sqrt(box.w * box.h)


def _to_patch_box(box, center, side, out):
    # inverse of the crop_resize sampling map
    f = out / side
    return BBox((box.cx - center[0] + side / 2.0) * f - 0.5,
                (box.cy - center[1] + side / 2.0) * f - 0.5,
                max(box.w * f, 1.0), max(box.h * f, 1.0))


def make_task(seq: Sequence, K, N, rng, spec: AnchorSpec | None = None,
              template_size=32, search_size=64, mask_grid=16) -> Task:
    L = len(seq.boxes)
    if L < N + 1:
        raise ValueError(f"make_task: need L >= N+1, got L={L}, N={N}")
    spec = spec or AnchorSpec()
    S = (search_size // 4) - (template_size // 4) + 1
    k = int(rng.integers(L))
    bk = seq.boxes[k]
    fill = float(np.mean(seq.frames[k]))
    side_z = _context_side(bk, 2.0)
    side_x = _context_side(bk, 4.0)
    template = crop_resize(seq.frames[k], bk.cx, bk.cy, side_z, template_size, fill)
    search = crop_resize(seq.frames[k], bk.cx, bk.cy, side_x, search_size, fill)
    pbox = _to_patch_box(bk, (bk.cx, bk.cy), side_x, search_size)
    base = make_support_example(template, search, pbox, spec, S)
    support = [base]
    for _ in range(K - 1):
        support.append(augment(base, rng, spec))

    others = [t for t in range(L) if t != k]
    pick = rng.choice(len(others), size=N, replace=False)
    query = []
    for qi in sorted(int(i) for i in pick):
        t = others[qi]
        qsearch = crop_resize(seq.frames[t], bk.cx, bk.cy, side_x, search_size, fill)
        qbox = _to_patch_box(seq.boxes[t], (bk.cx, bk.cy), side_x, search_size)
        qmask = crop_resize(seq.masks[t].astype(np.float64), bk.cx, bk.cy,
                            side_x, mask_grid, fill=0.0, binary=True)
        cls, target = anchor_labels(qbox, spec, S)
        query.append(QueryExample(template=template, search=qsearch,
                                  gt_mask=(qmask > 0.5).astype(np.float64),
                                  gt_box=qbox, cls_label=cls, box_target=target,
                                  mask_location=grid_location(qbox, spec, S),
                                  frame=t))
    return Task(support=support, query=query, source_frame=k)
