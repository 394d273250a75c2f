"""Bi-level training: inner-loop head adaptation and meta-updates.

Heads get exact second-order outer gradients (the adaptation step stays on
the graph); the backbone gets a first-order outer gradient, realized by
detaching the support-set features from the backbone before the inner loop.
The label generator is trained purely through the inner loop: its output
enters the adaptation loss of the mask head and nothing else.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .labels import AnchorSpec, make_soft_mask_label
from .nets import FastWeights, backbone_forward, channel_correlation, heads_forward
from .synthdata import make_task

ADAPTED_KEYS = ("conv1.w", "conv2.w", "conv2.b")  # affine (BN stand-in) stays frozen


@dataclass
class MetaConfig:
    alpha: float = 0.001            # inner step size
    gamma: float = 0.001            # outer learning rate (backbone + heads)
    momentum: float = 0.9
    eta: float = 0.001              # generator outer learning rate
    inner_steps_train: int = 1
    tasks_per_batch: int = 4
    K: int = 10
    N: int = 10
    loss_weights: tuple = (1.0, 1.0, 2.0)   # (cls, box, mask)
    adapt_heads: tuple = ("phi", "rho", "omega")


@dataclass
class LossBundle:
    cls: Tensor
    box: Tensor
    mask: Tensor
    total: Tensor = None
    n_positive: int = 0

    def values(self):
        return {k: getattr(self, k).item() for k in ("cls", "box", "mask", "total")}


def seg_adaptation_loss(mask_logits, c):
    """Mean over pixels of log(1 + exp(-c * logits))."""
    if mask_logits.shape != c.shape:
        raise ValueError(
            f"seg_adaptation_loss: shape mismatch {mask_logits.shape} vs {c.shape}")
    return ad.reduce_mean(ad.softplus(-ad.mul(c, mask_logits)))


def _smooth_l1(diff):
    absd = ad.add(ad.relu(diff), ad.relu(-diff))
    near = Tensor((np.abs(diff.data) < 1.0).astype(np.float64))
    quad = ad.scale(ad.mul(diff, diff), 0.5)
    lin = absd - 0.5
    return ad.add(ad.mul(near, quad), ad.mul(Tensor(1.0 - near.data), lin))


def _select_mask(mask_out, k, loc, n):
    i, j = loc
    sl = ad.tslice(mask_out, (slice(k, k + 1), slice(None),
                              slice(i, i + 1), slice(j, j + 1)))
    return ad.reshape(sl, (n, n))


def batch_loss(model, heads, examples, mask_labels, *, z_feat=None, feats=None,
               detach_backbone=True, loss_weights=(1.0, 1.0, 2.0)):
    """Weighted cls/box/mask loss over a batch of (template, search) examples.

    ``mask_labels`` holds one (n,n) label tensor per example: generated soft
    masks on a support set, {-1,+1} ground-truth masks on a query set.
    """
    n = model.cfg.mask_grid
    if z_feat is None:
        z = Tensor(examples[0].template[None])
        z_feat = backbone_forward(model.theta, z)
    if feats is None:
        stack = Tensor(np.stack([ex.search for ex in examples])[:, None])
        feats = backbone_forward(model.theta, stack)
    if detach_backbone:
        z_feat = z_feat.detach()
        feats = feats.detach()
    r = channel_correlation(z_feat, feats)
    score, box_pred, mask_out = heads_forward(heads, r)

    cls_lab = np.stack([ex.cls_label for ex in examples])
    scored = (cls_lab != 0).astype(np.float64)
    w_cls = scored / max(scored.sum(), 1.0)
    cls_loss = ad.reduce_sum(ad.mul(ad.softplus(ad.mul(Tensor(-cls_lab), score)),
                                    Tensor(w_cls)))

    pos = (cls_lab == 1).astype(np.float64)
    pos4 = np.repeat(pos, 4, axis=1)
    n_pos = pos4.sum()
    targets = np.stack([ex.box_target for ex in examples])
    if n_pos > 0:
        diff = ad.mul(ad.sub(box_pred, Tensor(targets)), Tensor(pos4))
        box_loss = ad.scale(ad.reduce_sum(_smooth_l1(diff) * Tensor(pos4)), 1.0 / n_pos)
    else:
        box_loss = Tensor(0.0)

    terms = []
    for k, ex in enumerate(examples):
        logits = _select_mask(mask_out, k, ex.mask_location, n)
        terms.append(seg_adaptation_loss(logits, mask_labels[k]))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    mask_loss = ad.scale(acc, 1.0 / len(terms))

    lc, lb, lm = loss_weights
    total = ad.add(ad.add(ad.scale(cls_loss, lc), ad.scale(box_loss, lb)),
                   ad.scale(mask_loss, lm))
    return LossBundle(cls=cls_loss, box=box_loss, mask=mask_loss, total=total,
                      n_positive=int(n_pos // 4))


def support_soft_masks(model, support, attach_graph=True):
    """Generated soft mask labels for every support example, from the live
    generator weights."""
    n = model.cfg.mask_grid
    patch = model.cfg.search_size
    out = []
    for ex in support:
        c = make_soft_mask_label(model.zeta, ex.box, n, patch,
                                 offsets=model.cfg.generator_offsets)
        out.append(c if attach_graph else c.detach())
    return out


def query_mask_labels(query):
    """Ground-truth masks mapped to {-1,+1} label tensors."""
    return [Tensor(2.0 * q.gt_mask - 1.0) for q in query]


def support_loss(model, heads, support, soft_masks=None, *, z_feat=None,
                 feats=None, loss_weights=(1.0, 1.0, 2.0)):
    if not support:
        raise ValueError("support_loss: empty support set")
    if soft_masks is None:
        soft_masks = support_soft_masks(model, support)
    return batch_loss(model, heads, support, soft_masks, z_feat=z_feat,
                      feats=feats, detach_backbone=True, loss_weights=loss_weights)


def inner_update(model, support, alpha, steps=1, create_graph=False,
                 adapt_heads=("phi", "rho", "omega"), soft_masks=None,
                 loss_weights=(1.0, 1.0, 2.0)) -> FastWeights:
    """Gradient steps on the head parameters against the support set.

    The backbone and the generator are never stepped.  With
    ``create_graph=True`` the full differentiable path from slow weights (and
    from the generated labels) to the fast weights is retained.
    """
    if steps < 1:
        raise ValueError("inner_update: steps must be >= 1")
    if soft_masks is None:
        soft_masks = support_soft_masks(model, support, attach_graph=create_graph)
    # support features are computed once and detached: the backbone is
    # updated first-order only, and it is frozen during the inner loop
    z = Tensor(support[0].template[None])
    z_feat = backbone_forward(model.theta, z).detach()
    stack = Tensor(np.stack([ex.search for ex in support])[:, None])
    feats = backbone_forward(model.theta, stack).detach()

    heads = {h: dict(getattr(model, h)) for h in ("phi", "rho", "omega")}
    for _ in range(steps):
        lb = batch_loss(model, heads, support, soft_masks, z_feat=z_feat,
                        feats=feats, detach_backbone=False,
                        loss_weights=loss_weights)
        params = [heads[h][k] for h in adapt_heads for k in ADAPTED_KEYS]
        gm = ad.grad(lb.total, params, create_graph=create_graph)
        for h in adapt_heads:
            for k in ADAPTED_KEYS:
                g = gm[heads[h][k]]
                if not np.all(np.isfinite(g.data)):
                    raise FloatingPointError(
                        f"inner_update: non-finite gradient for {h}.{k}, "
                        f"norm={np.linalg.norm(g.data)}")
                heads[h][k] = ad.sub(heads[h][k], ad.scale(g, alpha))
    if not create_graph:
        heads = {h: {k: v.detach() if v.requires_grad else v
                     for k, v in d.items()} for h, d in heads.items()}
    return FastWeights(phi=heads["phi"], rho=heads["rho"], omega=heads["omega"],
                       graph_attached=create_graph)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

class SGDMomentum:
    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads, lr):
        for name, p in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - lr * v


def _grad_norm(grads, prefix):
    sq = sum(float(np.sum(g ** 2)) for n, g in grads.items() if n.startswith(prefix))
    return float(np.sqrt(sq))


def _task_grads(model, task, cfg: MetaConfig):
    """Gradients of the query loss through one adapted task."""
    fw = inner_update(model, task.support, cfg.alpha,
                      steps=cfg.inner_steps_train, create_graph=True,
                      adapt_heads=cfg.adapt_heads,
                      loss_weights=cfg.loss_weights)
    qlabels = query_mask_labels(task.query)
    qlb = batch_loss(model, fw.heads(), task.query, qlabels,
                     detach_backbone=False, loss_weights=cfg.loss_weights)
    params = model.named_params()
    gm = ad.grad(qlb.total, list(params.values()), create_graph=False)
    grads = {name: gm[p].data for name, p in params.items()}
    return qlb, grads


def outer_step(model, tasks, cfg: MetaConfig, opt: SGDMomentum):
    """One meta-update over a batch of tasks; returns the mean query loss."""
    if not tasks:
        raise ValueError("outer_step: empty task batch")
    params = model.named_params()
    acc = {name: np.zeros_like(p.data) for name, p in params.items()}
    bundles = []
    used = 0
    for task in tasks:
        qlb, grads = _task_grads(model, task, cfg)
        if not np.isfinite(qlb.total.item()):
            continue
        for name in acc:
            acc[name] += grads[name]
        bundles.append(qlb)
        used += 1
    if used == 0:
        raise FloatingPointError("outer_step: every task produced a non-finite loss")
    for name in acc:
        acc[name] /= used

    slow = {n: p for n, p in params.items() if not n.startswith("zeta.")}
    opt.step(slow, acc, cfg.gamma)
    gen = {n: p for n, p in params.items() if n.startswith("zeta.")}
    opt.step(gen, acc, cfg.eta)

    def m(attr):
        return float(np.mean([getattr(b, attr).item() for b in bundles]))

    out = LossBundle(cls=Tensor(m("cls")), box=Tensor(m("box")),
                     mask=Tensor(m("mask")), total=Tensor(m("total")))
    out.grad_norms = {g: _grad_norm(acc, g) for g in ("theta", "phi", "zeta")}
    out.grad_norms["heads"] = float(np.sqrt(sum(
        _grad_norm(acc, g) ** 2 for g in ("phi", "rho", "omega"))))
    return out


def pretrain_step(model, tasks, cfg: MetaConfig, opt: SGDMomentum):
    """Plain supervised step on query examples with slow weights.

    No inner loop; the generator is frozen (it only acts through adaptation).
    """
    params = {n: p for n, p in model.named_params().items()
              if not n.startswith("zeta.")}
    acc = {name: np.zeros_like(p.data) for name, p in params.items()}
    bundles = []
    used = 0
    for task in tasks:
        qlabels = query_mask_labels(task.query)
        lb = batch_loss(model, model.heads(), task.query, qlabels,
                        detach_backbone=False, loss_weights=cfg.loss_weights)
        if not np.isfinite(lb.total.item()):
            continue
        gm = ad.grad(lb.total, list(params.values()), create_graph=False)
        for name, p in params.items():
            acc[name] += gm[p].data
        bundles.append(lb)
        used += 1
    if used == 0:
        raise FloatingPointError("pretrain_step: every task produced a non-finite loss")
    for name in acc:
        acc[name] /= used
    opt.step(params, acc, cfg.gamma)

    def m(attr):
        return float(np.mean([getattr(b, attr).item() for b in bundles]))

    out = LossBundle(cls=Tensor(m("cls")), box=Tensor(m("box")),
                     mask=Tensor(m("mask")), total=Tensor(m("total")))
    out.grad_norms = {"theta": _grad_norm(acc, "theta"),
                      "heads": float(np.sqrt(sum(_grad_norm(acc, g) ** 2
                                                 for g in ("phi", "rho", "omega")))),
                      "zeta": 0.0}
    return out


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "cls", "box", "mask", "total", "query_total",
               "grad_norm_theta", "grad_norm_heads", "grad_norm_zeta")


def train(model, sequences, cfg: MetaConfig, steps, seed, mode="meta",
          log_path=None, spec: AnchorSpec | None = None, progress=None):
    """Run ``steps`` outer iterations of pre- or meta-training."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    opt = SGDMomentum(cfg.momentum)
    spec = spec or AnchorSpec()
    rows = []
    for step in range(steps):
        idx = rng.choice(len(sequences), size=min(cfg.tasks_per_batch, len(sequences)),
                         replace=False)
        tasks = [make_task(sequences[int(i)], cfg.K, cfg.N, rng, spec,
                           model.cfg.template_size, model.cfg.search_size,
                           model.cfg.mask_grid) for i in idx]
        if mode == "meta":
            lb = outer_step(model, tasks, cfg, opt)
        else:
            lb = pretrain_step(model, tasks, cfg, opt)
        gn = lb.grad_norms
        rows.append((step, lb.cls.item(), lb.box.item(), lb.mask.item(),
                     lb.total.item(), lb.total.item(),
                     gn["theta"], gn["heads"], gn["zeta"]))
        if progress is not None:
            progress(step, rows[-1])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for row in rows:
                w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])
    return rows
