"""Online tracking: first-frame adaptation, then frame-by-frame inference.

The first frame's box drives a support-set build (augmented copies plus
generated soft mask labels); the heads take a fixed number of gradient
steps, and tracking then runs with the adapted weights: cosine-windowed
score argmax for position, mask-derived boxes for extent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .labels import AnchorSpec, BBox, augment, make_support_example
from .meta import inner_update, support_soft_masks
from .nets import FastWeights, backbone_forward, channel_correlation, heads_forward
from .synthdata import Sequence, _context_side, _to_patch_box, crop_resize

HEAD_MODES = {"all": ("phi", "rho", "omega"), "mask_only": ("omega",)}


@dataclass
class TrackConfig:
    n_aug: int = 40
    adapt_steps: int = 20
    adapt_alpha: float = 0.001
    mask_threshold: float = 0.5
    cosine_influence: float = 0.4
    scale_damping: float = 0.3       # fraction of the new measurement per frame
    adapt_heads: str = "all"
    loss_weights: tuple = (1.0, 1.0, 2.0)
    low_confidence: float = 0.3


@dataclass
class TrackState:
    p: tuple                      # target center, frame coords (x, y)
    box: BBox                     # frame coords
    score_map: np.ndarray = None  # (A,S,S) raw scores
    mask: np.ndarray = None       # (n,n) sigmoid output
    adapted: FastWeights = None
    low_confidence: bool = False
    crop_center: tuple = None     # search-crop geometry that produced this state
    crop_side: float = 0.0


def _patch_to_frame(i_patch, center, side, out):
    return center - side / 2.0 + (i_patch + 0.5) * side / out


def _grid_to_patch(g, n, patch):
    return (g + 0.5) * patch / n - 0.5


def build_support(model, frame, b_gt: BBox, n_aug, rng, spec=None):
    """Base support example from the first frame plus augmented copies."""
    H, W = frame.shape
    if not (0 <= b_gt.cx < W and 0 <= b_gt.cy < H) or b_gt.w < 2 or b_gt.h < 2:
        raise ValueError(f"build_support: degenerate init box {b_gt}")
    spec = spec or AnchorSpec()
    cfg = model.cfg
    fill = float(np.mean(frame))
    side_z = _context_side(b_gt, 2.0)
    side_x = _context_side(b_gt, 4.0)
    template = crop_resize(frame, b_gt.cx, b_gt.cy, side_z, cfg.template_size, fill)
    search = crop_resize(frame, b_gt.cx, b_gt.cy, side_x, cfg.search_size, fill)
    pbox = _to_patch_box(b_gt, (b_gt.cx, b_gt.cy), side_x, cfg.search_size)
    base = make_support_example(template, search, pbox, spec, cfg.score_size)
    support = [base]
    for _ in range(n_aug - 1):
        support.append(augment(base, rng, spec))
    return support, template


def online_adapt(model, frame, b_gt: BBox, cfg: TrackConfig, rng) -> FastWeights:
    """Adapt the heads to the first frame; backbone and generator frozen."""
    support, _ = build_support(model, frame, b_gt, cfg.n_aug, rng)
    if cfg.adapt_steps == 0 or cfg.adapt_heads == "none":
        heads = {h: {k: v.detach() for k, v in getattr(model, h).items()}
                 for h in ("phi", "rho", "omega")}
        return FastWeights(phi=heads["phi"], rho=heads["rho"],
                           omega=heads["omega"], graph_attached=False)
    soft_masks = support_soft_masks(model, support, attach_graph=False)
    return inner_update(model, support, cfg.adapt_alpha, steps=cfg.adapt_steps,
                        create_graph=False, adapt_heads=HEAD_MODES[cfg.adapt_heads],
                        soft_masks=soft_masks, loss_weights=cfg.loss_weights)


def mask_to_box(mask, threshold):
    """Tight box around the largest 4-connected component above threshold.

    Returns the box in mask-grid coordinates, or None when the component
    covers fewer than 4 cells.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"mask_to_box: threshold {threshold} outside (0,1)")
    binary = mask >= threshold
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    lab, count = ndimage.label(binary, structure=structure)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=range(1, count + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < 4:
        return None
    ys, xs = np.where(lab == best)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    return BBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0 + 1.0, y1 - y0 + 1.0)


def _cosine_window(S):
    h = np.hanning(S + 2)[1:-1]
    return np.outer(h, h)


@ad.no_grad()
def track_step(model, fast: FastWeights, frame, state: TrackState,
               cfg: TrackConfig, z_feat=None, template=None):
    """One tracking step: crop at the previous position, score, pick mask."""
    ncfg = model.cfg
    S = ncfg.score_size
    n = ncfg.mask_grid
    H, W = frame.shape
    side = _context_side(state.box, 4.0)
    cx, cy = state.p
    fill = float(np.mean(frame))
    patch = crop_resize(frame, cx, cy, side, ncfg.search_size, fill)
    if z_feat is None:
        z = Tensor(template[None])
        z_feat = backbone_forward(model.theta, z)
    x_feat = backbone_forward(model.theta, Tensor(patch[None]))
    r = channel_correlation(z_feat, x_feat)
    score, _boxreg, mask_logits = heads_forward(fast.heads(), r)

    prob = 1.0 / (1.0 + np.exp(-score.data))
    w = cfg.cosine_influence
    blended = (1 - w) * prob + w * _cosine_window(S)[None]
    a, i, j = np.unravel_index(np.argmax(blended), blended.shape)
    spec = AnchorSpec()
    px = spec.offset + spec.stride * j
    py = spec.offset + spec.stride * i
    new_cx = _patch_to_frame(px, cx, side, ncfg.search_size)
    new_cy = _patch_to_frame(py, cy, side, ncfg.search_size)

    logits = mask_logits.data.reshape(n * n, S, S)[:, i, j].reshape(n, n)
    mask = 1.0 / (1.0 + np.exp(-logits))
    mb = mask_to_box(mask, cfg.mask_threshold)
    if mb is None:
        box = BBox(new_cx, new_cy, state.box.w, state.box.h)
    else:
        bx = _patch_to_frame(_grid_to_patch(mb.cx, n, ncfg.search_size), cx, side,
                             ncfg.search_size)
        by = _patch_to_frame(_grid_to_patch(mb.cy, n, ncfg.search_size), cy, side,
                             ncfg.search_size)
        scale = side / n  # one mask-grid cell in frame pixels
        bw = mb.w * scale
        bh = mb.h * scale
        d = cfg.scale_damping
        box = BBox(bx, by, (1 - d) * state.box.w + d * bw,
                   (1 - d) * state.box.h + d * bh)
    box = BBox(min(max(box.cx, 0.0), W - 1.0), min(max(box.cy, 0.0), H - 1.0),
               min(box.w, W), min(box.h, H))
    return TrackState(p=(new_cx, new_cy), box=box, score_map=score.data.copy(),
                      mask=mask, adapted=fast,
                      low_confidence=float(blended.max()) < cfg.low_confidence,
                      crop_center=(cx, cy), crop_side=side)


def track_sequence(model, seq: Sequence, cfg: TrackConfig, seed=0):
    """Adapt on the first frame, then track frames 2..L."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    b0 = seq.boxes[0]
    fast = online_adapt(model, seq.frames[0], b0, cfg, rng)
    _, template = build_support(model, seq.frames[0], b0, 1, rng)
    with ad.no_grad():
        z_feat = backbone_forward(model.theta, Tensor(template[None]))
    state = TrackState(p=(b0.cx, b0.cy), box=b0, adapted=fast)
    out = []
    for t in range(1, len(seq.frames)):
        state = track_step(model, fast, seq.frames[t], state, cfg, z_feat=z_feat)
        out.append(state)
    return out


def track_sequence_reset(model, seq: Sequence, cfg: TrackConfig, seed=0,
                         skip=10, burn_in=5):
    """VOT-style reset run: reinitialize from ground truth after failures.

    Returns one record per frame 2..L: a box, or None for frames skipped
    between a failure and the next initialization.
    """
    from .evalcli import iou

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    L = len(seq.frames)
    boxes = [None] * (L - 1)
    t = 0  # init frame index
    while t < L - 1:
        b0 = seq.boxes[t]
        fast = online_adapt(model, seq.frames[t], b0, cfg, rng)
        _, template = build_support(model, seq.frames[t], b0, 1, rng)
        with ad.no_grad():
            z_feat = backbone_forward(model.theta, Tensor(template[None]))
        state = TrackState(p=(b0.cx, b0.cy), box=b0, adapted=fast)
        f = t + 1
        failed_at = None
        while f < L:
            state = track_step(model, fast, seq.frames[f], state, cfg, z_feat=z_feat)
            boxes[f - 1] = state.box
            if iou(state.box, seq.boxes[f]) == 0.0:
                failed_at = f
                break
            f += 1
        if failed_at is None:
            break
        t = failed_at + skip
    return boxes


def grid_mask_to_frame(mask, center, side, shape, threshold=0.5):
    """Nearest-neighbor paste of a patch-grid mask into frame coordinates."""
    H, W = shape
    n = mask.shape[0]
    out = np.zeros((H, W), dtype=np.uint8)
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    gj = np.floor((xs - (center[0] - side / 2.0)) * n / side).astype(int)
    gi = np.floor((ys - (center[1] - side / 2.0)) * n / side).astype(int)
    valid = (gi >= 0) & (gi < n) & (gj >= 0) & (gj < n)
    gi_c = np.clip(gi, 0, n - 1)
    gj_c = np.clip(gj, 0, n - 1)
    out[valid & (mask[gi_c, gj_c] >= threshold)] = 1
    return out


RESULT_COLUMNS = ("frame", "cx", "cy", "w", "h", "max_score", "iou_gt",
                  "mask_iou_gt")


def write_results(path, states, seq: Sequence | None = None, mask_path=None):
    from .evalcli import iou, mask_iou

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for t, st in enumerate(states, start=1):
            gt = mi = float("nan")
            if seq is not None:
                gt = iou(st.box, seq.boxes[t])
                if st.crop_center is not None:
                    fm = grid_mask_to_frame(st.mask, st.crop_center, st.crop_side,
                                            seq.frames[t].shape)
                    mi = mask_iou(fm, seq.masks[t])
            w.writerow([t, f"{st.box.cx:.6f}", f"{st.box.cy:.6f}",
                        f"{st.box.w:.6f}", f"{st.box.h:.6f}",
                        f"{float(st.score_map.max()):.6f}", f"{gt:.6f}",
                        f"{mi:.6f}"])
    if mask_path is not None:
        with open(mask_path, "wb") as fh:
            for st in states:
                fh.write(st.mask.astype("<f4").tobytes())
