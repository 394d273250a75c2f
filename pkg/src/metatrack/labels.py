"""Training signals: soft mask labels, anchor targets, and augmentation.

The soft mask label follows the partial-information scheme: inside the
ground-truth box the label comes from the generator network (values in
(0,1)); every pixel outside the box is exactly -1 so it pushes the mask
logits negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import generator_forward


@dataclass
class BBox:
    """Axis-aligned box: center (cx, cy) and extents (w, h), in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox: non-positive extent {self.w}x{self.h}")

    @property
    def x0(self):
        return self.cx - self.w / 2.0

    @property
    def x1(self):
        return self.cx + self.w / 2.0

    @property
    def y0(self):
        return self.cy - self.h / 2.0

    @property
    def y1(self):
        return self.cy + self.h / 2.0

    def corners(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class AnchorSpec:
    count: int = 1
    size: float = 16.0
    stride: int = 4
    offset: float = 16.0  # pixel center of grid cell (0,0) in the search patch
    pos_iou: float = 0.6
    neg_iou: float = 0.3


@dataclass
class SupportExample:
    """One (template, search) pair with its labels, in search-patch coords."""

    template: np.ndarray
    search: np.ndarray
    box: BBox
    cls_label: np.ndarray     # (A,S,S) in {-1,0,+1}
    box_target: np.ndarray    # (4A,S,S)
    mask_location: tuple      # (row, col) grid index of the target center
    soft_mask: Tensor | None = None


def box_iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# soft mask label
# ---------------------------------------------------------------------------

def _grid_centers(n, patch):
    # cell centers in pixel-index coordinates (pixel centers at integers)
    step = patch / n
    c = (np.arange(n) + 0.5) * step - 0.5
    return np.meshgrid(c, c)  # px (n,n) varying along axis 1, py along axis 0


def gaussian_prior(box: BBox, n: int, patch: float = 64.0) -> Tensor:
    """n x n Gaussian bump centred on the box, sigma = extent / 4."""
    step = patch / n
    if box.w < step or box.h < step:
        raise ValueError(f"gaussian_prior: box {box.w}x{box.h} below one grid cell ({step})")
    px, py = _grid_centers(n, patch)
    sx, sy = box.w / 4.0, box.h / 4.0
    g = np.exp(-((px - box.cx) ** 2 / (2 * sx ** 2) + (py - box.cy) ** 2 / (2 * sy ** 2)))
    return Tensor(g)


def generator_input(box: BBox, n: int, patch: float = 64.0, offsets: bool = True) -> Tensor:
    """Stack of generator input channels: prior and normalized center offsets."""
    prior = gaussian_prior(box, n, patch).data
    if not offsets:
        return Tensor(prior[None])
    px, py = _grid_centers(n, patch)
    dx = (px - box.cx) / box.w
    dy = (py - box.cy) / box.h
    return Tensor(np.stack([prior, dx, dy]))


def inside_box_mask(box: BBox, n: int, patch: float = 64.0) -> np.ndarray:
    px, py = _grid_centers(n, patch)
    return ((np.abs(px - box.cx) <= box.w / 2.0)
            & (np.abs(py - box.cy) <= box.h / 2.0)).astype(np.float64)


def make_soft_mask_label(zeta, box: BBox, n: int, patch: float = 64.0,
                         offsets: bool = True) -> Tensor:
    """Generator output inside the box, exactly -1 outside.

    The result carries gradients back to the generator parameters.
    """
    gen = generator_forward(zeta, generator_input(box, n, patch, offsets))
    m = Tensor(inside_box_mask(box, n, patch))
    ones = Tensor(np.ones((n, n)))
    return ad.sub(ad.mul(gen, m), ad.sub(ones, m))


# ---------------------------------------------------------------------------
# anchor labels
# ---------------------------------------------------------------------------

def anchor_boxes(spec: AnchorSpec, S: int):
    """List of (A,S,S) anchor BBoxes; A=1 square anchors on the score grid."""
    out = np.empty((spec.count, S, S), dtype=object)
    for a in range(spec.count):
        for i in range(S):
            for j in range(S):
                out[a, i, j] = BBox(spec.offset + spec.stride * j,
                                    spec.offset + spec.stride * i,
                                    spec.size, spec.size)
    return out


def anchor_labels(box: BBox, spec: AnchorSpec, S: int):
    """RPN-style targets: cls in {-1,0,+1} and box regression offsets."""
    anchors = anchor_boxes(spec, S)
    ious = np.zeros((spec.count, S, S))
    for idx in np.ndindex(*ious.shape):
        ious[idx] = box_iou(anchors[idx], box)
    cls = np.zeros((spec.count, S, S))
    cls[ious >= spec.pos_iou] = 1.0
    cls[ious <= spec.neg_iou] = -1.0
    if not (cls == 1.0).any():
        cls[np.unravel_index(np.argmax(ious), ious.shape)] = 1.0
    target = np.zeros((4 * spec.count, S, S))
    for a, i, j in zip(*np.where(cls == 1.0)):
        an = anchors[a, i, j]
        target[4 * a + 0, i, j] = (box.cx - an.cx) / an.w
        target[4 * a + 1, i, j] = (box.cy - an.cy) / an.h
        target[4 * a + 2, i, j] = np.log(box.w / an.w)
        target[4 * a + 3, i, j] = np.log(box.h / an.h)
    return cls, target


def grid_location(box: BBox, spec: AnchorSpec, S: int):
    """Score-grid cell closest to the box center, clamped to the grid."""
    j = int(round((box.cx - spec.offset) / spec.stride))
    i = int(round((box.cy - spec.offset) / spec.stride))
    return (min(max(i, 0), S - 1), min(max(j, 0), S - 1))


def make_support_example(template, search, box: BBox, spec: AnchorSpec, S: int):
    cls, target = anchor_labels(box, spec, S)
    return SupportExample(template=template, search=search, box=box,
                          cls_label=cls, box_target=target,
                          mask_location=grid_location(box, spec, S))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _box_blur(img, k):
    if k <= 1:
        return img
    pad = k // 2
    padded = np.pad(img, pad, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.mean(axis=(-2, -1))


def _warp(img, scale, tx, ty, flip, fill):
    """Inverse-resample for the forward map: scale about center, translate,
    then horizontal flip."""
    H, W = img.shape
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    sx = xs.astype(np.float64)
    if flip:
        sx = (W - 1) - sx
    srcx = (sx - (W - 1) / 2.0 - tx) / scale + (W - 1) / 2.0
    srcy = (ys - (H - 1) / 2.0 - ty) / scale + (H - 1) / 2.0
    x0 = np.floor(srcx).astype(int)
    y0 = np.floor(srcy).astype(int)
    fx = srcx - x0
    fy = srcy - y0
    out = np.full((H, W), fill)
    valid = (x0 >= 0) & (x0 < W - 1) & (y0 >= 0) & (y0 < H - 1)
    xv, yv = x0[valid], y0[valid]
    fxv, fyv = fx[valid], fy[valid]
    out[valid] = (img[yv, xv] * (1 - fxv) * (1 - fyv)
                  + img[yv, xv + 1] * fxv * (1 - fyv)
                  + img[yv + 1, xv] * (1 - fxv) * fyv
                  + img[yv + 1, xv + 1] * fxv * fyv)
    return out


def _transform_box(box: BBox, W, H, scale, tx, ty, flip):
    cx = (box.cx - (W - 1) / 2.0) * scale + (W - 1) / 2.0 + tx
    cy = (box.cy - (H - 1) / 2.0) * scale + (H - 1) / 2.0 + ty
    if flip:
        cx = (W - 1) - cx
    return BBox(cx, cy, box.w * scale, box.h * scale)


def augment(example: SupportExample, rng, spec: AnchorSpec | None = None,
            max_shift: float = 8.0):
    """Random flip / translation / scale / blur with consistent labels.

    Anchor and box labels are regenerated from the transformed box, which is
    equivalent to transforming them; the soft mask is left for the caller to
    regenerate from the transformed box with the live generator weights.
    """
    spec = spec or AnchorSpec()
    H, W = example.search.shape
    S = example.cls_label.shape[-1]
    for _ in range(10):
        flip = rng.random() < 0.5
        tx = rng.uniform(-max_shift, max_shift)
        ty = rng.uniform(-max_shift, max_shift)
        scl = rng.uniform(0.8, 1.2)
        nb = _transform_box(example.box, W, H, scl, tx, ty, flip)
        if 0 <= nb.cx < W and 0 <= nb.cy < H:
            break
    else:
        flip, tx, ty, scl = False, 0.0, 0.0, 1.0
        nb = example.box
    fill = float(np.mean(example.search))
    img = _warp(example.search, scl, tx, ty, flip, fill)
    if rng.random() < 0.3:
        img = _box_blur(img, 3)
    nb = BBox(min(max(nb.cx, 0.0), W - 1.0), min(max(nb.cy, 0.0), H - 1.0),
              min(nb.w, W), min(nb.h, H))
    return make_support_example(example.template, img, nb, spec, S)
