"""Unit tests for metrics, reports, run configs, and the CLI."""

import numpy as np
import pytest

from metatrack.cli import main
from metatrack.evalcli import (EvalReport, aggregate, apply_config,
                               check_config_keys, config_hash, evaluate,
                               human_table, iou, mask_iou, miou, parse_config,
                               render_report)
from metatrack.labels import BBox
from metatrack.meta import MetaConfig
from metatrack.synthdata import SynthParams, generate_sequence
from metatrack.tracker import TrackConfig


def test_iou_known_values():
    a = BBox(5.0, 5.0, 10.0, 10.0)
    assert iou(a, a) == pytest.approx(1.0)
    # half-overlapping congruent squares: inter 50, union 150
    b = BBox(10.0, 5.0, 10.0, 10.0)
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou(a, BBox(50.0, 50.0, 10.0, 10.0)) == 0.0


def _raster_iou(a, b, cell=0.25):
    """Pixel-rasterization oracle; exact when box edges align to the grid."""
    x0 = min(a.x0, b.x0)
    y0 = min(a.y0, b.y0)
    x1 = max(a.x1, b.x1)
    y1 = max(a.y1, b.y1)
    nx = int(round((x1 - x0) / cell))
    ny = int(round((y1 - y0) / cell))
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    def inside(box):
        return ((xs[None, :] > box.x0) & (xs[None, :] < box.x1)
                & (ys[:, None] > box.y0) & (ys[:, None] < box.y1))
    ia, ib = inside(a), inside(b)
    union = np.logical_or(ia, ib).sum()
    return np.logical_and(ia, ib).sum() / union if union else 0.0


def test_iou_matches_rasterization_oracle_on_100_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        # quarter-unit coordinates keep the rasterization exact
        def qbox():
            # quarter-unit centers, half-unit extents: edges align to the
            # quarter-unit raster grid, so the oracle count is exact
            return BBox(rng.integers(8, 40) * 0.25, rng.integers(8, 40) * 0.25,
                        rng.integers(2, 16) * 0.5, rng.integers(2, 16) * 0.5)
        a, b = qbox(), qbox()
        assert iou(a, b) == pytest.approx(_raster_iou(a, b), abs=1e-9)


def test_mask_iou_and_miou_against_set_arithmetic():
    rng = np.random.default_rng(1)
    preds, gts = [], []
    for _ in range(10):
        p = rng.random((8, 8)) > 0.5
        g = rng.random((8, 8)) > 0.5
        inter = sum(1 for i in range(8) for j in range(8) if p[i, j] and g[i, j])
        union = sum(1 for i in range(8) for j in range(8) if p[i, j] or g[i, j])
        assert mask_iou(p, g) == pytest.approx(inter / union, abs=1e-12)
        preds.append(p)
        gts.append(g)
    expect = np.mean([mask_iou(p, g) for p, g in zip(preds, gts)])
    assert miou(preds, gts) == pytest.approx(expect, abs=1e-12)


def test_miou_rejects_length_mismatch():
    with pytest.raises(ValueError):
        miou([np.zeros((2, 2))], [])


def _const_seq(n_frames, box):
    class Seq:
        boxes = [box] * n_frames
    return Seq()


def test_evaluate_counts_failures_and_skips_them_in_accuracy():
    gt = BBox(10.0, 10.0, 4.0, 4.0)
    seq = _const_seq(5, gt)
    tracked = [gt, BBox(50.0, 50.0, 4.0, 4.0), gt, gt]
    rec = evaluate(tracked, seq)
    assert rec["failures"] == 1
    assert rec["frames"] == 4
    assert rec["mean_iou_while_tracking"] == pytest.approx(1.0)


def test_evaluate_reset_burn_in_exclusion():
    gt = BBox(10.0, 10.0, 4.0, 4.0)
    near = BBox(11.0, 10.0, 4.0, 4.0)
    seq = _const_seq(9, gt)
    # fail, two skipped frames, then 5 tracked: first 2 are burn-in
    tracked = [BBox(50.0, 50.0, 4, 4), None, None, near, near, gt, gt, gt]
    rec = evaluate(tracked, seq, reset=True, burn_in=2)
    assert rec["failures"] == 1
    assert rec["mean_iou_while_tracking"] == pytest.approx(1.0)


def test_evaluate_rejects_missing_results_outside_reset():
    seq = _const_seq(3, BBox(1, 1, 2, 2))
    with pytest.raises(ValueError):
        evaluate([None, BBox(1, 1, 2, 2)], seq)


def test_robustness_is_failures_per_hundred_frames():
    gt = BBox(10.0, 10.0, 4.0, 4.0)
    far = BBox(60.0, 60.0, 4.0, 4.0)
    recs = []
    for fails in (1, 1):
        seq = _const_seq(51, gt)
        tracked = [far] * fails + [gt] * (50 - fails)
        recs.append(evaluate(tracked, seq))
    rep = aggregate(recs)
    assert rep.robustness == pytest.approx(100.0 * 2 / 100.0)  # == 2.0
    assert rep.accuracy == pytest.approx(1.0)


def test_report_rendering_is_stable_and_parseable():
    rep = EvalReport(per_sequence=[{"id": "s0", "frames": 10, "failures": 1,
                                    "mean_iou_while_tracking": 0.5}],
                     accuracy=0.5, robustness=10.0, miou=None,
                     config_hash="abcd")
    text = render_report(rep)
    lines = text.splitlines()
    assert lines[0] == "config_hash = abcd"
    assert lines[1].startswith("aggregate.accuracy = ")
    assert "seq.000.id = s0" in lines
    assert human_table(rep)  # renders without error


def test_config_parse_apply_and_unknown_keys(tmp_path):
    conf_path = tmp_path / "run.conf"
    conf_path.write_text(
        "# comment\nmeta.alpha = 0.5\ntrack.adapt_steps = 7  # inline\n")
    conf = parse_config(conf_path)
    assert conf == {"meta.alpha": "0.5", "track.adapt_steps": "7"}
    check_config_keys(conf, {"meta": MetaConfig(), "track": TrackConfig()})
    mcfg = apply_config(MetaConfig(), conf, "meta")
    tcfg = apply_config(TrackConfig(), conf, "track")
    assert mcfg.alpha == 0.5 and tcfg.adapt_steps == 7
    with pytest.raises(KeyError, match="unknown key"):
        check_config_keys({"meta.bogus": "1"}, {"meta": MetaConfig()})
    with pytest.raises(KeyError, match="unknown key"):
        check_config_keys({"nonsense": "1"}, {})
    bad = tmp_path / "bad.conf"
    bad.write_text("just words\n")
    with pytest.raises(ValueError, match="expected 'key = value'"):
        parse_config(bad)


def test_config_hash_is_order_independent():
    a = config_hash({"x": "1", "y": "2"})
    b = config_hash({"y": "2", "x": "1"})
    assert a == b and len(a) == 12
    assert config_hash({"x": "1"}) != a


def test_cli_end_to_end_smoke(tmp_path):
    corpus = tmp_path / "corpus"
    res = tmp_path / "res"
    ckpt = tmp_path / "m.mtck"
    report = tmp_path / "report.txt"
    svg = tmp_path / "curves.svg"
    log = tmp_path / "log.csv"
    conf = tmp_path / "run.conf"
    conf.write_text("synth.L = 6\nmeta.tasks_per_batch = 1\nmeta.N = 4\n"
                    "meta.K = 3\ntrack.n_aug = 4\n")
    assert main(["gen-data", "--out", str(corpus), "--n", "2", "--seed", "1",
                 "--config", str(conf)]) == 0
    manifest = corpus / "manifest.txt"
    assert main(["meta-train", "--corpus", str(manifest), "--out", str(ckpt),
                 "--steps", "1", "--seed", "1", "--log", str(log),
                 "--config", str(conf)]) == 0
    assert main(["track", "--corpus", str(manifest), "--ckpt", str(ckpt),
                 "--out", str(res), "--seed", "1", "--adapt-steps", "1",
                 "--config", str(conf)]) == 0
    assert main(["eval", "--results", str(res), "--corpus", str(manifest),
                 "--out", str(report), "--seed", "1"]) == 0
    assert report.read_text().startswith("config_hash = ")
    assert main(["plot", "--log", str(log), "--out", str(svg)]) == 0
    assert svg.read_bytes().lstrip().startswith(b"<?xml")


def test_cli_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["track", "--no-such-flag"])
    assert exc.value.code == 2


def test_cli_bad_config_exits_1(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("track.bogus = 1\n")
    rc = main(["gen-data", "--out", str(tmp_path / "c"), "--n", "1",
               "--config", str(conf)])
    assert rc == 1
