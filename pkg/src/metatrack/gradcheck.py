"""Numerical verification of the autodiff engine against finite differences.

Every primitive gets a first-order check (analytic gradient vs. central
differences) across many random seeds; composites get second-order checks
(Hessian-vector products vs. differenced gradients).  Inputs for kinked or
singular primitives (relu, max, log, reciprocal) are sampled away from the
non-smooth set so the finite-difference oracle is valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_oracle

FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self):
        return self.max_rel_err <= self.tol


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    return float(np.max(np.abs(got - want)) / max(1e-8, np.max(np.abs(want))))


def _smooth(rng, shape, low=-2.0, high=2.0, margin=0.05):
    """Random array with every entry at least ``margin`` away from zero."""
    x = rng.uniform(low, high, size=shape)
    small = np.abs(x) < margin
    x[small] = margin * np.where(x[small] >= 0, 1.0, -1.0)
    return x


def _project(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.reduce_sum(ad.mul(out, Tensor(w)))


def _check(f, x_data, w) -> float:
    """Max rel err of d(sum(w * f(x)))/dx against finite differences."""
    x = Tensor(x_data, requires_grad=True)
    g = ad.grad(_project(f(x), w), [x])[x]
    fd = finite_difference_oracle(lambda t: _project(f(t), w), x)
    return _rel_err(g.data, fd.data)


def _first_order_cases(rng):
    """(name, fn, input) triples; fn maps one Tensor to a Tensor."""
    a = _smooth(rng, (3, 4))
    b = _smooth(rng, (3, 4))
    pos = rng.uniform(0.2, 2.0, size=(3, 4))
    x_img = _smooth(rng, (2, 3, 8, 8))
    w_cv = _smooth(rng, (4, 3, 3, 3), low=-1.0, high=1.0)
    zc = _smooth(rng, (3, 4, 4))
    xc = _smooth(rng, (3, 7, 7))
    x4 = _smooth(rng, (2, 3, 7, 7))
    z4 = _smooth(rng, (2, 3, 4, 4))
    m1 = _smooth(rng, (3, 5))
    m2 = _smooth(rng, (5, 2))
    maxin = rng.permutation(np.linspace(-2.0, 2.0, 24)).reshape(4, 6)
    return [
        ("add.lhs", lambda t: ad.add(t, Tensor(b)), a),
        ("sub.rhs", lambda t: ad.sub(Tensor(b), t), a),
        ("mul.lhs", lambda t: ad.mul(t, Tensor(b)), a),
        ("mul.rhs", lambda t: ad.mul(Tensor(b), t), a),
        ("scale", lambda t: ad.scale(t, -1.7), a),
        ("relu", ad.relu, a),
        ("sigmoid", ad.sigmoid, a),
        ("tanh", ad.tanh, a),
        ("exp", ad.exp, a),
        ("log", ad.log, pos),
        ("reciprocal", ad.reciprocal, pos),
        ("softplus", ad.softplus, a),
        ("reshape", lambda t: ad.reshape(t, (2, 6)), a),
        ("transpose", lambda t: ad.transpose(t, (1, 0)), a),
        ("flip", lambda t: ad.flip(t, (0, 1)), a),
        ("slice", lambda t: ad.tslice(t, (slice(1, 3), slice(0, 2))), a),
        ("slice_scatter",
         lambda t: ad.slice_scatter(t, (5, 6), (slice(1, 4), slice(2, 6))), a),
        ("pad2d", lambda t: ad.pad2d(t, (1, 2, 2, 1)), a),
        ("dilate2d", lambda t: ad.dilate2d(t, 2), a),
        ("concat", lambda t: ad.concat([t, Tensor(b)], axis=1), a),
        ("broadcast_to",
         lambda t: ad.broadcast_to(ad.reshape(t, (3, 1, 4)), (3, 5, 4)), a),
        ("reduce_sum", lambda t: ad.reshape(ad.reduce_sum(t, axis=1), (3,)), a),
        ("reduce_mean", lambda t: ad.reduce_mean(t, axis=0), a),
        ("reduce_max", lambda t: ad.reduce_max(t, axis=1), maxin),
        ("matmul.lhs", lambda t: ad.matmul(t, Tensor(m2)), m1),
        ("matmul.rhs", lambda t: ad.matmul(Tensor(m1), t), m2),
        ("conv2d.x.s1", lambda t: ad.conv2d(t, Tensor(w_cv)), x_img),
        ("conv2d.w.s1", lambda t: ad.conv2d(Tensor(x_img), t), w_cv),
        ("conv2d.x.s2p1", lambda t: ad.conv2d(t, Tensor(w_cv), stride=2, pad=1),
         x_img),
        ("conv2d.w.s2p1", lambda t: ad.conv2d(Tensor(x_img), t, stride=2, pad=1),
         w_cv),
        ("xcorr.z.3d", lambda t: ad.depthwise_xcorr(t, Tensor(xc)), zc),
        ("xcorr.x.3d", lambda t: ad.depthwise_xcorr(Tensor(zc), t), xc),
        ("xcorr.z.shared", lambda t: ad.depthwise_xcorr(t, Tensor(x4)), zc),
        ("xcorr.x.shared", lambda t: ad.depthwise_xcorr(Tensor(zc), t), x4),
        ("xcorr.z.pair", lambda t: ad.depthwise_xcorr(t, Tensor(x4)), z4),
        ("xcorr.x.pair", lambda t: ad.depthwise_xcorr(Tensor(z4), t), x4),
    ]


def first_order_checks(seeds=20) -> list[CheckResult]:
    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([1000, seed]))
        for name, fn, x in _first_order_cases(rng):
            w = rng.standard_normal(fn(Tensor(x)).shape)
            err = _check(fn, x, w)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"grad.{k}", v, FIRST_ORDER_TOL)
            for k, v in worst.items()]


# ---------------------------------------------------------------------------
# second order
# ---------------------------------------------------------------------------

def _hvp(loss_fn, x_data, v, h=1e-5):
    """Analytic Hessian-vector product vs. differenced analytic gradients."""
    x = Tensor(x_data, requires_grad=True)
    g = ad.grad(loss_fn(x), [x], create_graph=True)[x]
    hv = ad.grad(ad.reduce_sum(ad.mul(g, Tensor(v))), [x])[x].data

    def grad_at(data):
        t = Tensor(data, requires_grad=True)
        return ad.grad(loss_fn(t), [t])[t].data

    fd = (grad_at(x_data + h * v) - grad_at(x_data - h * v)) / (2.0 * h)
    return _rel_err(hv, fd)


def _second_order_cases(rng):
    b = _smooth(rng, (3, 4))
    m2 = _smooth(rng, (5, 3))
    x_img = _smooth(rng, (1, 2, 8, 8), low=-1.0, high=1.0)
    w_cv = _smooth(rng, (3, 2, 3, 3), low=-0.7, high=0.7)
    zc = _smooth(rng, (3, 2, 2), low=-0.7, high=0.7)
    tgt = rng.standard_normal((3, 3, 3))

    def mlp(t):
        h = ad.tanh(ad.matmul(Tensor(m2), t))
        return ad.reduce_sum(ad.mul(ad.sigmoid(h), ad.exp(ad.scale(h, 0.3))))

    def convnet(t):
        y = ad.tanh(ad.conv2d(t, Tensor(w_cv), stride=2, pad=1))
        r = ad.depthwise_xcorr(zc_t, ad.reshape(y, y.shape[1:]))
        return ad.reduce_mean(ad.mul(ad.sub(r, Tensor(tgt)),
                                     ad.sub(r, Tensor(tgt))))

    def convnet_w(t):
        y = ad.tanh(ad.conv2d(Tensor(x_img), t, stride=2, pad=1))
        r = ad.depthwise_xcorr(zc_t, ad.reshape(y, y.shape[1:]))
        return ad.reduce_mean(ad.mul(ad.sub(r, Tensor(tgt)),
                                     ad.sub(r, Tensor(tgt))))

    zc_t = Tensor(zc)
    return [
        ("hvp.mlp", mlp, b),
        ("hvp.convnet.x", convnet, x_img),
        ("hvp.convnet.w", convnet_w, w_cv),
    ]


def second_order_checks(seeds=5) -> list[CheckResult]:
    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([2000, seed]))
        for name, fn, x in _second_order_cases(rng):
            v = rng.standard_normal(x.shape)
            err = _hvp(fn, x, v)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, v, SECOND_ORDER_TOL) for k, v in worst.items()]


# ---------------------------------------------------------------------------
# model forwards and adaptation paths
# ---------------------------------------------------------------------------

def _tiny_cfg():
    from .nets import NetConfig

    return NetConfig(backbone_channels=(1, 2, 2, 2, 2), feat_channels=2,
                     mask_grid=16, gen_hidden=4)


def model_checks(seeds=20) -> list[CheckResult]:
    """First-order checks of the head and label-generator forwards."""
    from .labels import BBox, generator_input
    from .nets import generator_forward, heads_forward, init_model

    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([3000, seed]))
        model = init_model(_tiny_cfg(), seed=seed)
        S = model.cfg.score_size
        r = _smooth(rng, (model.cfg.feat_channels, S, S), low=-1.0, high=1.0)

        def head_out(which, idx):
            def fn(t):
                heads = model.heads()
                heads = {h: dict(d) for h, d in heads.items()}
                heads[which] = dict(heads[which])
                heads[which]["conv1.w"] = t
                return heads_forward(heads, Tensor(r))[idx]
            return fn

        for idx, which in enumerate(("phi", "rho", "omega")):
            fn = head_out(which, idx)
            x = model.heads()[which]["conv1.w"].data
            w = rng.standard_normal(fn(Tensor(x)).shape)
            err = _check(fn, x, w)
            worst[f"head.{which}"] = max(worst.get(f"head.{which}", 0.0), err)

        box = BBox(32.0 + rng.uniform(-6, 6), 32.0 + rng.uniform(-6, 6),
                   rng.uniform(14, 26), rng.uniform(14, 26))
        gin = generator_input(box, model.cfg.mask_grid, model.cfg.search_size)

        def gen_fn(t):
            z = dict(model.zeta)
            z["w1"] = t
            return generator_forward(z, gin)

        x = model.zeta["w1"].data
        w = rng.standard_normal(gen_fn(Tensor(x)).shape)
        worst["generator"] = max(worst.get("generator", 0.0),
                                 _check(gen_fn, x, w))
    return [CheckResult(f"forward.{k}", v, FIRST_ORDER_TOL)
            for k, v in worst.items()]


def _tiny_task(seed):
    from .labels import AnchorSpec
    from .nets import init_model
    from .synthdata import SynthParams, generate_sequence, make_task

    cfg = _tiny_cfg()
    model = init_model(cfg, seed=seed)
    seq = generate_sequence(seed + 50, SynthParams())
    rng = np.random.default_rng(np.random.SeedSequence([4000, seed]))
    task = make_task(seq, 2, 1, rng, AnchorSpec(), cfg.template_size,
                     cfg.search_size, cfg.mask_grid)
    return model, task


def _query_loss_through_adaptation(model, task, alpha):
    from .meta import batch_loss, inner_update, query_mask_labels

    fw = inner_update(model, task.support, alpha, steps=1, create_graph=True)
    return batch_loss(model, fw.heads(), task.query,
                      query_mask_labels(task.query), detach_backbone=False).total


def _directional(loss_fn, param, v, h=1e-3):
    # larger h than elsewhere: the adaptation-path derivative can be ~1e-8,
    # where subtractive cancellation at small h swamps the truncation error
    """Analytic directional derivative vs. central differences on one param."""
    g = ad.grad(loss_fn(), [param], create_graph=False)[param].data
    analytic = float(np.sum(g * v))
    base = param.data.copy()
    param.data = base + h * v
    lp = loss_fn().item()
    param.data = base - h * v
    lm = loss_fn().item()
    param.data = base
    fd = (lp - lm) / (2.0 * h)
    return abs(analytic - fd) / max(1e-8, abs(fd))


def meta_path_checks(seeds=10, alpha=0.01) -> list[CheckResult]:
    """Differentiation through the inner loop: slow head weights pick up
    second-order terms; the generator is reached only via the adaptation
    step it shaped."""
    worst = {}
    for seed in range(seeds):
        model, task = _tiny_task(seed)
        rng = np.random.default_rng(np.random.SeedSequence([5000, seed]))
        loss_fn = lambda: _query_loss_through_adaptation(model, task, alpha)
        for name, param in (("inner_loop.head", model.omega["conv1.w"]),
                            ("inner_loop.generator", model.zeta["w1"])):
            v = rng.standard_normal(param.shape)
            v /= np.linalg.norm(v)
            err = _directional(loss_fn, param, v)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, v, SECOND_ORDER_TOL) for k, v in worst.items()]


def run_gradcheck(seeds=20, second_order_seeds=5) -> list[CheckResult]:
    return (first_order_checks(seeds) + model_checks(seeds)
            + second_order_checks(second_order_seeds)
            + meta_path_checks(max(2, second_order_seeds)))
