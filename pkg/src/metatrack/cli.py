"""Command-line entry points: data generation, training, tracking, eval."""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from .evalcli import (aggregate, apply_config, check_config_keys, config_hash,
                      evaluate, human_table, parse_config, render_report)
from .labels import BBox
from .meta import MetaConfig, train
from .nets import NetConfig, init_model, load_checkpoint, save_checkpoint
from .synthdata import (SynthParams, generate_sequence, read_manifest,
                        read_sequence, write_corpus, write_sequence)
from .tracker import (TrackConfig, track_sequence, track_sequence_reset,
                      write_results)


def _sub_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def _load_conf(args):
    conf = parse_config(args.config) if args.config else {}
    check_config_keys(conf, {"meta": MetaConfig(), "track": TrackConfig(),
                             "synth": SynthParams(), "net": NetConfig()})
    return conf


def _load_corpus(manifest):
    base = os.path.dirname(os.path.abspath(manifest))
    paths = [os.path.join(base, rel) for rel in read_manifest(manifest)]
    return [read_sequence(p) for p in paths], paths


def cmd_gen_data(args):
    conf = _load_conf(args)
    params = apply_config(SynthParams(), conf, "synth")
    os.makedirs(args.out, exist_ok=True)
    rels = []
    for k in range(args.n):
        seq = generate_sequence(_sub_seed(args.seed, k), params)
        rel = f"seq_{k:03d}.mtsq"
        write_sequence(seq, os.path.join(args.out, rel))
        rels.append(rel)
    write_corpus(rels, os.path.join(args.out, "manifest.txt"))
    print(f"wrote {args.n} sequences to {args.out}")
    return 0


def _run_training(args, mode):
    conf = _load_conf(args)
    mcfg = apply_config(MetaConfig(), conf, "meta")
    ncfg = apply_config(NetConfig(), conf, "net")
    seqs, _ = _load_corpus(args.corpus)
    if getattr(args, "init", None):
        model = load_checkpoint(args.init, ncfg)
    else:
        model = init_model(ncfg, seed=args.seed)
    every = max(1, args.steps // 10)

    def progress(step, row):
        if step % every == 0 or step == args.steps - 1:
            print(f"step {step:5d}  loss {row[4]:.4f}", flush=True)

    train(model, seqs, mcfg, args.steps, args.seed, mode=mode,
          log_path=args.log, progress=progress)
    save_checkpoint(model, args.out)
    print(f"saved {args.out}")
    return 0


def cmd_pretrain(args):
    return _run_training(args, "pretrain")


def cmd_meta_train(args):
    return _run_training(args, "meta")


def _track_config(args, conf):
    tcfg = apply_config(TrackConfig(), conf, "track")
    if args.adapt_steps is not None:
        tcfg.adapt_steps = args.adapt_steps
    if args.adapt_heads is not None:
        tcfg.adapt_heads = args.adapt_heads
    return tcfg


def cmd_track(args):
    conf = _load_conf(args)
    ncfg = apply_config(NetConfig(), conf, "net")
    tcfg = _track_config(args, conf)
    model = load_checkpoint(args.ckpt, ncfg)
    seqs, paths = _load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    for k, (seq, path) in enumerate(zip(seqs, paths)):
        stem = os.path.splitext(os.path.basename(path))[0]
        seed_k = _sub_seed(args.seed, k)
        if args.reset:
            boxes = track_sequence_reset(model, seq, tcfg, seed=seed_k)
            _write_reset_boxes(os.path.join(args.out, stem + ".csv"), boxes)
        else:
            states = track_sequence(model, seq, tcfg, seed=seed_k)
            mask_path = (os.path.join(args.out, stem + ".masks")
                         if args.dump_masks else None)
            write_results(os.path.join(args.out, stem + ".csv"), states,
                          seq, mask_path=mask_path)
    print(f"tracked {len(seqs)} sequences into {args.out}")
    return 0


def _write_reset_boxes(path, boxes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("frame", "cx", "cy", "w", "h"))
        for t, b in enumerate(boxes, start=1):
            if b is None:
                w.writerow((t, "nan", "nan", "nan", "nan"))
            else:
                w.writerow((t, f"{b.cx:.6f}", f"{b.cy:.6f}",
                            f"{b.w:.6f}", f"{b.h:.6f}"))


def _read_result_boxes(path):
    boxes, mask_ious = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cx = float(row["cx"])
            if math.isnan(cx):
                boxes.append(None)
            else:
                boxes.append(BBox(cx, float(row["cy"]),
                                  float(row["w"]), float(row["h"])))
            mi = row.get("mask_iou_gt")
            if mi is not None and not math.isnan(float(mi)):
                mask_ious.append(float(mi))
    return boxes, mask_ious


def cmd_eval(args):
    conf = _load_conf(args)
    seqs, paths = _load_corpus(args.corpus)
    records, mious = [], []
    for seq, path in zip(seqs, paths):
        stem = os.path.splitext(os.path.basename(path))[0]
        boxes, mi = _read_result_boxes(os.path.join(args.results, stem + ".csv"))
        records.append(evaluate(boxes, seq, reset=args.reset, seq_id=stem))
        if mi:
            mious.append(float(np.mean(mi)))
    report = aggregate(records, mious or None,
                       config_hash=config_hash({**conf, "seed": args.seed}))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(render_report(report))
    print(human_table(report))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    results = run_gradcheck(seeds=args.seeds)
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status}  {r.name:24s} max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tol:.0e}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


ABLATE_CELLS = ("pretrained.noadapt", "pretrained.adapt",
                "meta.noadapt", "meta.adapt")


def cmd_ablate(args):
    conf = _load_conf(args)
    ncfg = apply_config(NetConfig(), conf, "net")
    seqs, _ = _load_corpus(args.corpus)
    models = {"pretrained": load_checkpoint(args.pretrained, ncfg),
              "meta": load_checkpoint(args.meta, ncfg)}
    adapt_heads = {"pretrained": args.pretrained_adapt_heads,
                   "meta": args.meta_adapt_heads}
    lines = []
    for cell in ABLATE_CELLS:
        name, mode = cell.split(".")
        tcfg = apply_config(TrackConfig(), conf, "track")
        if mode == "noadapt":
            tcfg.adapt_steps = 0
        else:
            tcfg.adapt_heads = adapt_heads[name]
        records = []
        for k, seq in enumerate(seqs):
            states = track_sequence(models[name], seq, tcfg,
                                    seed=_sub_seed(args.seed, k))
            records.append(evaluate([s.box for s in states], seq,
                                    seq_id=f"seq_{k:03d}"))
        rep = aggregate(records)
        lines.append(f"{cell}.accuracy = {rep.accuracy:.6f}")
        lines.append(f"{cell}.robustness = {rep.robustness:.6f}")
        print(f"{cell:22s} accuracy={rep.accuracy:.4f} "
              f"robustness={rep.robustness:.3f}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    if args.log:
        with open(args.log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        steps = [int(r["step"]) for r in rows]
        for col in ("cls", "box", "mask", "total"):
            ax.plot(steps, [float(r[col]) for r in rows], label=col)
        ax.set_xlabel("outer step")
        ax.set_ylabel("loss")
    else:
        for name in sorted(os.listdir(args.results)):
            if not name.endswith(".csv"):
                continue
            boxes, _ = _read_result_boxes(os.path.join(args.results, name))
            ys = [b.w * b.h if b else float("nan") for b in boxes]
            ax.plot(range(1, len(ys) + 1), ys, label=name[:-4])
        ax.set_xlabel("frame")
        ax.set_ylabel("box area (px^2)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    print(f"wrote {args.out}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None,
                        help="path to a 'key = value' run configuration file")

    p = argparse.ArgumentParser(prog="metatrack",
                                description="meta-learned siamese tracking on "
                                            "synthetic video")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic sequence corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=50)
    g.set_defaults(fn=cmd_gen_data)

    for name, fn in (("pretrain", cmd_pretrain), ("meta-train", cmd_meta_train)):
        t = sub.add_parser(name, parents=[common])
        t.add_argument("--corpus", required=True, help="manifest file")
        t.add_argument("--out", required=True, help="output checkpoint")
        t.add_argument("--steps", type=int, default=200)
        t.add_argument("--log", default=None, help="CSV training log")
        if name == "meta-train":
            t.add_argument("--init", default=None,
                           help="checkpoint to initialize from")
        t.set_defaults(fn=fn)

    t = sub.add_parser("track", parents=[common])
    t.add_argument("--corpus", required=True)
    t.add_argument("--ckpt", required=True)
    t.add_argument("--out", required=True, help="results directory")
    t.add_argument("--adapt-steps", type=int, default=None)
    t.add_argument("--adapt-heads", choices=("all", "mask_only", "none"),
                   default=None)
    t.add_argument("--reset", action="store_true",
                   help="reinitialize from ground truth after failures")
    t.add_argument("--dump-masks", action="store_true")
    t.set_defaults(fn=cmd_track)

    e = sub.add_parser("eval", parents=[common])
    e.add_argument("--results", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--reset", action="store_true")
    e.add_argument("--out", default=None, help="report file")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common])
    c.add_argument("--seeds", type=int, default=20)
    c.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", parents=[common])
    a.add_argument("--corpus", required=True)
    a.add_argument("--pretrained", required=True, help="pretrained checkpoint")
    a.add_argument("--meta", required=True, help="meta-trained checkpoint")
    a.add_argument("--meta-adapt-heads", default="mask_only",
                   choices=("all", "mask_only"))
    a.add_argument("--pretrained-adapt-heads", default="all",
                   choices=("all", "mask_only"))
    a.add_argument("--out", default=None, help="table file")
    a.set_defaults(fn=cmd_ablate)

    pl = sub.add_parser("plot", parents=[common])
    src = pl.add_mutually_exclusive_group(required=True)
    src.add_argument("--log", default=None, help="training log CSV")
    src.add_argument("--results", default=None, help="tracking results dir")
    pl.add_argument("--out", required=True, help="output SVG")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
