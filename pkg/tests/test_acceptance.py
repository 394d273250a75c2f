"""Acceptance gate: nine numbered criteria, one pass/fail line each.

Criteria 6 and 7 exercise the full pipeline (training + tracking on a
50-sequence held-out corpus) and dominate the runtime; everything else is
analytic or small.
"""

import time

import numpy as np
import pytest

from metatrack import autodiff as ad
from metatrack.autodiff import Tensor
from metatrack.cli import main
from metatrack.evalcli import aggregate, evaluate, iou, mask_iou, miou
from metatrack.gradcheck import _tiny_task, run_gradcheck
from metatrack.labels import BBox
from metatrack.meta import (MetaConfig, _task_grads, batch_loss, inner_update,
                            query_mask_labels, seg_adaptation_loss,
                            support_loss, support_soft_masks, train)
from metatrack.nets import NetConfig, init_model, load_checkpoint, save_checkpoint
from metatrack.synthdata import SynthParams, generate_sequence
from metatrack.tracker import (HEAD_MODES, TrackConfig, build_support,
                               track_sequence)

# training schedule for the trained-model criteria (6 and 7)
N_TRAIN_SEQUENCES = 20
PRETRAIN_STEPS = 400
META_STEPS = 400
N_EVAL_SEQUENCES = 50


_CAPMAN = None


@pytest.fixture(autouse=True)
def _grab_capture_manager(request):
    global _CAPMAN
    _CAPMAN = request.config.pluginmanager.getplugin("capturemanager")


def _verdict(num, ok, detail):
    # emit past pytest's capture so every criterion line lands in the
    # terminal / tee'd log regardless of pass/fail
    line = f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    if _CAPMAN is not None:
        with _CAPMAN.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="session")
def corpus():
    return [generate_sequence(2000 + s, SynthParams())
            for s in range(N_EVAL_SEQUENCES)]


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory):
    """Pretrained and meta-trained models on sequences disjoint from the
    evaluation corpus."""
    root = tmp_path_factory.mktemp("ckpt")
    train_seqs = [generate_sequence(1000 + s, SynthParams())
                  for s in range(N_TRAIN_SEQUENCES)]
    cfg = MetaConfig()
    pre = init_model(NetConfig(), seed=0)
    train(pre, train_seqs, cfg, steps=PRETRAIN_STEPS, seed=0, mode="pretrain")
    save_checkpoint(pre, root / "pre.mtck")
    meta = pre.clone()
    train(meta, train_seqs, cfg, steps=META_STEPS, seed=1, mode="meta")
    save_checkpoint(meta, root / "meta.mtck")
    return {"pretrained": pre, "meta": meta, "dir": root}


def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = run_gradcheck(seeds=20, second_order_seeds=5)
    elapsed = time.time() - t0
    bad = [r for r in results if not r.ok]
    worst = max(results, key=lambda r: r.max_rel_err / r.tol)
    ok = not bad and elapsed <= 300.0
    _verdict(1, ok,
             f"{len(results) - len(bad)}/{len(results)} gradient checks pass "
             f"(worst {worst.name} at {worst.max_rel_err:.2e}), "
             f"{elapsed:.0f}s <= 300s")


def test_criterion_2_one_dimensional_meta_gradient_oracle():
    phi = Tensor(np.array(0.0), requires_grad=True)

    def half_sq(pred, target):
        d = ad.sub(pred, Tensor(np.array(target)))
        return ad.scale(ad.mul(d, d), 0.5)

    g_in = ad.grad(half_sq(phi, 1.0), [phi], create_graph=True)[phi]
    fast = ad.sub(phi, ad.scale(g_in, 0.1))
    outer = ad.grad(half_sq(fast, 2.0), [phi])[phi].item()
    err = abs(outer - (-1.71))
    _verdict(2, err <= 1e-12,
             f"outer gradient {outer:.15f} vs -1.71 (|err| {err:.1e} <= 1e-12)")


def test_criterion_3_adaptation_loss_gradient_semantics():
    checks = []
    for c_val, y_val, expect in ((0.0, 0.3, 0.0), (1.0, 0.0, -0.5)):
        y = Tensor(np.full((1, 1), y_val), requires_grad=True)
        loss = seg_adaptation_loss(y, Tensor(np.full((1, 1), c_val)))
        g = ad.grad(loss, [y])[y].data[0, 0]
        checks.append(g == expect)
    y = Tensor(np.zeros((1, 2)), requires_grad=True)
    c = Tensor(np.array([[1.0, -1.0]]))
    g = ad.grad(seg_adaptation_loss(y, c), [y])[y].data
    checks.append(g[0, 0] < 0.0 < g[0, 1])
    _verdict(3, all(checks),
             "per-pixel gradients: 0 at c=0, -0.5 at (c=1,y=0), "
             "outside pixels push the opposite way")


def test_criterion_4_generator_path_liveness():
    live = dead = 0
    for seed in range(10):
        model, task = _tiny_task(seed)
        _, grads = _task_grads(model, task, MetaConfig(alpha=0.01))
        gz = sum(np.abs(grads[n]).sum() for n in grads if n.startswith("zeta."))
        live += gz > 0.0
        _, grads0 = _task_grads(model, task, MetaConfig(alpha=0.0))
        gz0 = sum(np.abs(grads0[n]).sum() for n in grads0
                  if n.startswith("zeta."))
        dead += gz0 == 0.0
    _verdict(4, live == 10 and dead == 10,
             f"generator gradient nonzero with adaptation on {live}/10 tasks, "
             f"exactly zero without adaptation on {dead}/10")


def test_criterion_5_first_order_backbone_contract():
    identical = 0
    for seed in range(3):
        model, task = _tiny_task(seed)
        fw = inner_update(model, task.support, 0.01, steps=1, create_graph=True)
        qlabels = query_mask_labels(task.query)
        theta = [model.theta[k] for k in sorted(model.theta)]
        qa = batch_loss(model, fw.heads(), task.query, qlabels,
                        detach_backbone=False)
        ga = ad.grad(qa.total, theta)
        cut = {h: {k: v.detach() for k, v in d.items()}
               for h, d in fw.heads().items()}
        qb = batch_loss(model, cut, task.query, qlabels, detach_backbone=False)
        gb = ad.grad(qb.total, theta)
        identical += all(np.array_equal(ga[p].data, gb[p].data) for p in theta)
    _verdict(5, identical == 3,
             f"backbone gradients bit-identical with and without explicit "
             f"fast-weight detachment on {identical}/3 seeded tasks")


def _run_cell(model, seqs, tcfg):
    records = []
    for k, seq in enumerate(seqs):
        states = track_sequence(model, seq, tcfg, seed=k)
        records.append(evaluate([s.box for s in states], seq,
                               seq_id=f"seq_{k:03d}"))
    return aggregate(records)


def test_criterion_6_ablation_direction(checkpoints, corpus):
    t0 = time.time()
    grid = {}
    for name in ("pretrained", "meta"):
        heads = "all" if name == "pretrained" else "mask_only"
        grid[(name, "off")] = _run_cell(checkpoints[name], corpus,
                                        TrackConfig(adapt_steps=0))
        grid[(name, "on")] = _run_cell(checkpoints[name], corpus,
                                       TrackConfig(adapt_heads=heads))
    elapsed = time.time() - t0
    acc = {k: v.accuracy for k, v in grid.items()}
    rob = {k: v.robustness for k, v in grid.items()}
    a = acc[("meta", "on")] >= acc[("meta", "off")] + 0.02
    b = rob[("pretrained", "on")] >= rob[("pretrained", "off")]
    c = all(acc[("meta", "on")] > acc[k] for k in acc if k != ("meta", "on"))
    ok = a and b and c and elapsed <= 1800.0
    _verdict(6, ok,
             "mean IoU grid "
             + ", ".join(f"{m}/{s}={acc[(m, s)]:.3f}" for m, s in acc)
             + f"; robustness pretrained off={rob[('pretrained', 'off')]:.2f}"
             f" on={rob[('pretrained', 'on')]:.2f}"
             f"; adapt gain {acc[('meta', 'on')] - acc[('meta', 'off')]:.3f}"
             f" >= 0.02: {a}; no robustness gain w/o meta-training: {b}; "
             f"meta+adapt strictly best: {c}; {elapsed:.0f}s <= 1800s")


def test_criterion_7_online_adaptation_improvement(checkpoints, corpus):
    model = checkpoints["meta"]
    cfg = TrackConfig()  # defaults: 20 steps, step size 0.001, 40 copies
    improved = 0
    ratios = []
    for k, seq in enumerate(corpus):
        rng = np.random.default_rng(np.random.SeedSequence([k, 11]))
        support, _ = build_support(model, seq.frames[0], seq.boxes[0],
                                   cfg.n_aug, rng)
        masks = support_soft_masks(model, support, attach_graph=False)
        before = support_loss(model, model.heads(), support, masks).total.item()
        fw = inner_update(model, support, cfg.adapt_alpha,
                          steps=cfg.adapt_steps, soft_masks=masks,
                          adapt_heads=HEAD_MODES[cfg.adapt_heads],
                          loss_weights=cfg.loss_weights)
        after = support_loss(model, fw.heads(), support, masks).total.item()
        ratios.append(after / before)
        improved += after <= 0.7 * before
    # diagnostic: how much of the loss is reducible at all (long, aggressive
    # adaptation on two sequences approximates the attainable floor)
    floors = []
    for k in (0, 1):
        seq = corpus[k]
        rng = np.random.default_rng(np.random.SeedSequence([k, 11]))
        support, _ = build_support(model, seq.frames[0], seq.boxes[0],
                                   cfg.n_aug, rng)
        masks = support_soft_masks(model, support, attach_graph=False)
        before = support_loss(model, model.heads(), support, masks).total.item()
        fw = inner_update(model, support, 10 * cfg.adapt_alpha, steps=200,
                          soft_masks=masks)
        floors.append(
            support_loss(model, fw.heads(), support, masks).total.item()
            / before)
    _verdict(7, improved >= 45,
             f"support loss reduced to <=0.7x initial on {improved}/"
             f"{len(corpus)} sequences (median ratio "
             f"{float(np.median(ratios)):.3f}; floor ratio under 200 steps "
             f"at 10x step size ~{float(np.mean(floors)):.3f})")


def test_criterion_8_byte_identical_reruns(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("synth.L = 6\nmeta.tasks_per_batch = 1\nmeta.K = 3\n"
                    "meta.N = 3\ntrack.n_aug = 4\ntrack.adapt_steps = 2\n")
    blobs = {"gen-data": [], "meta-train": [], "track": []}
    for run in ("a", "b"):
        corpus = tmp_path / f"corpus_{run}"
        ckpt = tmp_path / f"m_{run}.mtck"
        res = tmp_path / f"res_{run}"
        assert main(["gen-data", "--out", str(corpus), "--n", "2",
                     "--seed", "3", "--config", str(conf)]) == 0
        assert main(["meta-train", "--corpus", str(corpus / "manifest.txt"),
                     "--out", str(ckpt), "--steps", "2", "--seed", "3",
                     "--config", str(conf)]) == 0
        assert main(["track", "--corpus", str(corpus / "manifest.txt"),
                     "--ckpt", str(ckpt), "--out", str(res), "--seed", "3",
                     "--config", str(conf)]) == 0
        blobs["gen-data"].append(
            b"".join(p.read_bytes() for p in sorted(corpus.iterdir())))
        blobs["meta-train"].append(ckpt.read_bytes())
        blobs["track"].append(
            b"".join(p.read_bytes() for p in sorted(res.iterdir())))
    same = {k: v[0] == v[1] for k, v in blobs.items()}
    _verdict(8, all(same.values()),
             "byte-identical reruns: "
             + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_criterion_9_metric_arithmetic():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        def qbox():
            return BBox(rng.integers(8, 40) * 0.25, rng.integers(8, 40) * 0.25,
                        rng.integers(2, 16) * 0.5, rng.integers(2, 16) * 0.5)
        a, b = qbox(), qbox()
        worst = max(worst, abs(iou(a, b) - _raster_iou(a, b)))
    # miou against per-pixel set arithmetic
    preds = [rng.random((8, 8)) > 0.5 for _ in range(20)]
    gts = [rng.random((8, 8)) > 0.5 for _ in range(20)]
    ref = np.mean([(p & g).sum() / (p | g).sum() for p, g in zip(preds, gts)])
    worst = max(worst, abs(miou(preds, gts) - ref))
    # accuracy / robustness against a direct reimplementation
    gt = BBox(10.0, 10.0, 4.0, 4.0)
    recs = []
    for fails, total in ((1, 50), (1, 50)):
        seq = type("S", (), {"boxes": [gt] * (total + 1)})()
        tracked = [BBox(60.0, 60.0, 4, 4)] * fails + [gt] * (total - fails)
        recs.append(evaluate(tracked, seq))
    rep = aggregate(recs)
    worst = max(worst, abs(rep.robustness - 100.0 * 2 / 100.0),
                abs(rep.accuracy - 1.0))
    _verdict(9, worst <= 1e-9,
             f"iou/miou/accuracy/robustness vs brute force, "
             f"max |err| {worst:.2e} <= 1e-9")


def _raster_iou(a, b, cell=0.25):
    x0, y0 = min(a.x0, b.x0), min(a.y0, b.y0)
    x1, y1 = max(a.x1, b.x1), max(a.y1, b.y1)
    xs = x0 + (np.arange(int(round((x1 - x0) / cell))) + 0.5) * cell
    ys = y0 + (np.arange(int(round((y1 - y0) / cell))) + 0.5) * cell

    def inside(box):
        return ((xs[None, :] > box.x0) & (xs[None, :] < box.x1)
                & (ys[:, None] > box.y0) & (ys[:, None] < box.y1))

    ia, ib = inside(a), inside(b)
    union = np.logical_or(ia, ib).sum()
    return np.logical_and(ia, ib).sum() / union if union else 0.0
