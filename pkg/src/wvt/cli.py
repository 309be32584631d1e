"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, selftest, stats,
dump-attn, sweep, bench. Every run is deterministic given --seed, logs
its fully resolved config, and writes artifacts only under --out.
Exit codes: 0 success, 1 runtime failure (one diagnostic line on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import (SceneSpec, back_row_area_threshold, dataset_stats,
                   default_workers, generate_dataset, read_manifest,
                   split_train_test)
from .errors import ConfigError, InputError, WvtError
from .evaluate import frame_map, read_gt_csv, write_detections_csv
from .figures import save_curve, save_stats_figures, write_pgm
from .gradcheck import DEFAULT_TOL, gradient_suite
from .head import Detector, make_proposals, multilabel_loss
from .model import (ModelConfig, PRESETS, config_from_lines, count_params_flops,
                    load_checkpoint, resolve_config, restore_params,
                    save_checkpoint)
from .tensor import Tensor
from .train import (TrainSettings, evaluate_detector, load_dataset,
                    train_detector)
from .wea import attention_heatmaps


def _seeded(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _apply_sets(cfg: ModelConfig, sets) -> ModelConfig:
    for kv in sets or []:
        cfg = config_from_lines([kv], base=cfg)
    return cfg


def _resolved_config(args) -> ModelConfig:
    cfg = _apply_sets(resolve_config(args.config), getattr(args, "set", None))
    for line in cfg.to_lines():
        print(f"config {line}")
    return cfg


def _ensure_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _load_split(args, cfg: ModelConfig):
    data = Path(args.data)
    entries = read_manifest(data / "manifest.txt")
    gt = read_gt_csv(data / "gt.csv")
    train_e, test_e = split_train_test(entries, seed=args.split_seed)
    return (load_dataset(train_e, gt, cfg, data),
            load_dataset(test_e, gt, cfg, data))


def _area(box) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def _gap_area_threshold(gt_rows):
    """Two-cluster split of log box areas; None if areas look unimodal.

    Minimizes within-cluster variance over all split points, which keeps
    the boundary near the middle of an evenly spaced size ladder instead
    of at its widest single gap.
    """
    logs = np.sort(np.log([max(_area(g.box), 1e-12) for g in gt_rows]))
    uniq = np.unique(np.round(logs, 9))
    if len(uniq) < 2 or uniq[-1] - uniq[0] < np.log(1.15):
        return None
    best = None
    for cut in uniq[:-1]:
        lo, hi = logs[logs <= cut], logs[logs > cut]
        ss = lo.var() * len(lo) + hi.var() * len(hi)
        if best is None or ss < best[0]:
            best = (ss, lo.max(), hi.min())
    return float(np.exp(0.5 * (best[1] + best[2])))


def _eval_and_report(model, test_ds, out: Path, back_area, label="test"):
    result, dets = evaluate_detector(model, test_ds)
    write_detections_csv(out / "detections.csv", dets)
    rows = [("all", "map", f"{result.map:.6f}")]
    for k, v in enumerate(result.per_class_ap):
        if not np.isnan(v):
            rows.append(("all", f"ap_class_{k}", f"{v:.6f}"))
    print(f"{label} mAP@0.5 {result.map:.4f}")
    thr = back_area if back_area is not None else _gap_area_threshold(test_ds.gt_rows())
    if thr is not None:
        back = frame_map(dets, test_ds.gt_rows(), test_ds.num_classes,
                         box_filter=lambda b: _area(b) < thr)
        rows.append(("back", "map", f"{back.map:.6f}"))
        rows.append(("back", "area_threshold", f"{thr:.6f}"))
        print(f"back-row mAP@0.5 {back.map:.4f} (area < {thr:.4f})")
    _write_csv(out / "result.csv", ["subset", "metric", "value"], rows)
    return result


def cmd_gen_data(args) -> int:
    out = _ensure_out(args)
    spec = SceneSpec(seed=args.seed, rows=args.rows, cols=args.cols,
                     frames=args.frames, height=args.size, width=args.size,
                     num_classes=args.classes, max_labels=args.max_labels,
                     back_scale=args.back_scale, occlusion=args.occlusion,
                     camera=args.camera)
    ds = generate_dataset(spec, args.clips, out, workers=args.workers)
    n_boxes = sum(len(r.annotations) for r in ds.records)
    print(f"wrote {len(ds.records)} clips, {n_boxes} boxes -> {ds.manifest_path}")
    print(f"back-row area threshold {back_row_area_threshold(spec):.6f}")
    return 0


def cmd_train(args) -> int:
    out = _ensure_out(args)
    cfg = _resolved_config(args)
    (out / "config.txt").write_text("\n".join(cfg.to_lines()) + "\n")
    train_ds, test_ds = _load_split(args, cfg)
    settings = TrainSettings(epochs=args.epochs, batch_clips=args.batch,
                             lr=args.lr, weight_decay=args.weight_decay,
                             seed=args.seed)
    t0 = time.perf_counter()
    model, history = train_detector(cfg, train_ds, settings, log=print)
    print(f"trained {len(train_ds)} clips in {time.perf_counter() - t0:.1f}s")
    _write_csv(out / "metrics.csv", ["epoch", "loss"],
               [(i + 1, f"{v:.6f}") for i, v in enumerate(history)])
    save_curve(range(1, len(history) + 1), history, "epoch", "train loss",
               out / "loss_curve.png")
    save_checkpoint(out / "model.ckpt", cfg, model)
    _eval_and_report(model, test_ds, out, args.back_area)
    return 0


def cmd_eval(args) -> int:
    out = _ensure_out(args)
    cfg, state = load_checkpoint(args.ckpt)
    cfg = _apply_sets(cfg, args.set)
    for line in cfg.to_lines():
        print(f"config {line}")
    model = Detector(cfg, _seeded(args.seed, 0x6576))
    restore_params(model, state)
    train_ds, test_ds = _load_split(args, cfg)
    ds = {"train": train_ds, "test": test_ds}[args.split]
    if args.jitter > 0:
        proposals = [make_proposals(anns, "jitter", args.jitter, args.seed)
                     for anns in ds.annotations]
        result, dets = evaluate_detector(model, ds, proposals=proposals)
        write_detections_csv(out / "detections.csv", dets)
        _write_csv(out / "result.csv", ["subset", "metric", "value"],
                   [("all", "map", f"{result.map:.6f}")])
        print(f"{args.split} mAP@0.5 {result.map:.4f} (jitter {args.jitter})")
    else:
        _eval_and_report(model, ds, out, args.back_area, label=args.split)
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gradient_suite(seeds=args.seeds)
    worst = max(results.values())
    for name in sorted(results):
        print(f"gradcheck {name}: {results[name]:.3e}")
    print(f"gradcheck max rel err {worst:.3e} over {args.seeds} seeds "
          f"({time.perf_counter() - t0:.1f}s)")
    if worst > args.tol:
        print(f"FAIL: {worst:.3e} exceeds tolerance {args.tol:.1e}",
              file=sys.stderr)
        return 1
    return 0


def cmd_selftest(args) -> int:
    from .evaluate import DetRow, GtRow, average_precision
    from .wea import score_windows, select_window

    def check_shapes():
        cfg = PRESETS["full"]
        assert cfg.grid == (8, 14, 14), cfg.grid
        scored = score_windows(np.zeros((1, 8, 14, 14)), np.ones((7, 7)))
        assert scored.shape[-2:] == (8, 8), scored.shape

    def check_window_oracle():
        rng = _seeded(args.seed, 1)
        for _ in range(200):
            m = rng.standard_normal((1, 3, 8, 8))
            scored = score_windows(m, np.ones((3, 3)))
            sel = select_window(scored, 3)
            for t in range(3):
                sums = [(m[0, t, y : y + 3, x : x + 3].sum(), y * 6 + x)
                        for y in range(6) for x in range(6)]
                best = max(sums, key=lambda p: (p[0], -p[1]))[1]
                assert best == sel.idx[0, t], (best, sel.idx[0, t])
        for u in range(1, 17):
            idx = np.arange(u * u)
            x, y = idx % u, idx // u
            assert np.array_equal(y * u + x, idx)

    def check_evaluator():
        gts = [("c1", (0.1, 0.1, 0.3, 0.3)), ("c2", (0.4, 0.4, 0.6, 0.6))]
        dets = [("c1", (0.1, 0.1, 0.3, 0.3), 0.9),
                ("c1", (0.6, 0.6, 0.8, 0.8), 0.8),
                ("c2", (0.4, 0.4, 0.6, 0.6), 0.7)]
        ap = average_precision(dets, gts)
        assert abs(ap - (0.5 + 0.5 * (2.0 / 3.0))) < 1e-9, ap
        gt_rows = [GtRow("c", (0.2, 0.2, 0.5, 0.5), 0, 0)]
        det_rows = [DetRow("c", (0.2, 0.2, 0.5, 0.5), 0, 1.0)]
        assert frame_map(det_rows, gt_rows, 2).map == 1.0

    def check_loss():
        logits = Tensor(np.zeros((3, 15)))
        loss = multilabel_loss(logits, np.zeros((3, 15)))
        assert abs(loss.item() - 15 * np.log(2)) < 1e-6, loss.item()

    def check_identity():
        cfg = PRESETS["tiny"]
        model = Detector(cfg, _seeded(args.seed, 2)).backbone
        for blk in model.blocks:
            for p in (blk.attn.wo.weight, blk.attn.wo.bias, blk.mlp.fc2.weight,
                      blk.mlp.fc2.bias, blk.wea.mha.wo.weight, blk.wea.mha.wo.bias):
                p.data = np.zeros_like(p.data)
        x = Tensor(_seeded(args.seed, 3).standard_normal((1, 4, 4, 4, 32))
                   .astype(np.float32))
        with tt.no_grad():
            y = model.forward_tokens(x)
        assert np.abs(y.data - x.data).max() < 1e-6

    def check_determinism():
        cfg = PRESETS["tiny"]
        clip = Tensor(_seeded(args.seed, 4).standard_normal((1, 3, 8, 32, 32))
                      .astype(np.float32))
        outs = []
        for _ in range(2):
            model = Detector(cfg, _seeded(args.seed, 5))
            with tt.no_grad():
                outs.append(model.backbone(clip).data.copy())
        assert np.array_equal(outs[0], outs[1])

    checks = [("shape contract", check_shapes),
              ("window selection oracle", check_window_oracle),
              ("evaluator", check_evaluator),
              ("loss at zero logits", check_loss),
              ("zero-residual identity", check_identity),
              ("deterministic forward", check_determinism)]
    for name, fn in checks:
        try:
            fn()
        except AssertionError as e:
            print(f"FAIL {name}: {e}", file=sys.stderr)
            return 1
        print(f"ok {name}")
    return 0


def cmd_stats(args) -> int:
    out = _ensure_out(args)
    gt = read_gt_csv(args.gt)
    entries = read_manifest(args.manifest)
    res = {e.clip_id: (e.height, e.width) for e in entries}
    stats = dataset_stats(gt, res)
    _write_csv(out / "class_counts.csv", ["class_id", "count"],
               stats["class_counts"])
    for key, name in (("area_hist", "area_hist.csv"),
                      ("aspect_hist", "aspect_hist.csv")):
        hist, edges = stats[key]
        _write_csv(out / name, ["bin_lo", "bin_hi", "count"],
                   [(f"{edges[i]:.6f}", f"{edges[i + 1]:.6f}", int(hist[i]))
                    for i in range(len(hist))])
    save_stats_figures(stats, out)
    print(f"{stats['num_boxes']} boxes, "
          f"{sum(c for _, c in stats['class_counts'])} labels -> {out}")
    return 0


def cmd_dump_attn(args) -> int:
    out = _ensure_out(args)
    if args.ckpt:
        cfg, state = load_checkpoint(args.ckpt)
        model = Detector(cfg, _seeded(args.seed, 0x6461))
        restore_params(model, state)
    else:
        cfg = _resolved_config(args)
        model = Detector(cfg, _seeded(args.seed, 0x6461))
    if not cfg.use_wea:
        raise ConfigError("model has window attention disabled; nothing to dump")
    data = Path(args.data)
    entries = read_manifest(data / "manifest.txt")
    if not 0 <= args.clip < len(entries):
        raise InputError(f"clip index {args.clip} outside [0, {len(entries)})")
    ds = load_dataset([entries[args.clip]], [], cfg, data)
    backbone = model.backbone
    if not 0 <= args.block < len(backbone.blocks):
        raise InputError(f"block index {args.block} outside "
                         f"[0, {len(backbone.blocks)})")
    with tt.no_grad():
        x = backbone.tokens(Tensor(ds.clips[0][None]))
        for blk in backbone.blocks[: args.block]:
            x = blk(x)
        blk = backbone.blocks[args.block]
        n, tp, gh, gw, c = x.shape
        seq = x.reshape(n, tp * gh * gw, c)
        y = (seq + blk.attn(blk.norm1(seq))).reshape(n, tp, gh, gw, c)
    sel = blk.wea.select(y.data)
    heat = attention_heatmaps(y.data, sel, blk.wea.mha, cfg.scheme)
    _write_csv(out / "windows.csv", ["frame", "x", "y", "window"],
               [(t, int(sel.x[0, t]), int(sel.y[0, t]), sel.window)
                for t in range(tp)])
    for t in range(tp):
        write_pgm(out / f"attn_f{t:03d}.pgm", heat[0, t])
    print(f"wrote windows.csv and {tp} heatmaps -> {out}")
    return 0


def cmd_sweep(args) -> int:
    out = _ensure_out(args)
    cfg = _resolved_config(args)
    values = [int(v) for v in args.values.split(",")]
    field = {"frames": "frames", "window": "window"}[args.axis]
    rows = []
    for v in values:
        cfg_v = cfg.replace(**{field: v})
        train_ds, test_ds = _load_split(args, cfg_v)
        settings = TrainSettings(epochs=args.epochs, batch_clips=args.batch,
                                 lr=args.lr, seed=args.seed)
        model, _ = train_detector(cfg_v, train_ds, settings)
        result, _ = evaluate_detector(model, test_ds)
        rows.append((v, result.map))
        print(f"{args.axis} {v}: mAP {result.map:.4f}")
    _write_csv(out / "sweep.csv", [args.axis, "map"],
               [(v, f"{m:.6f}") for v, m in rows])
    save_curve([v for v, _ in rows], [m for _, m in rows], args.axis,
               "test mAP@0.5", out / "sweep.png")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolved_config(args)
    info = count_params_flops(cfg)
    print(f"params {info['params']:,}")
    print(f"flops {info['flops']:,} (one clip, multiply-accumulate x2)")
    if args.skip_forward:
        return 0
    model = Detector(cfg, _seeded(args.seed, 0x62))
    clip = Tensor(_seeded(args.seed, 0x63).standard_normal(
        (1, 3, cfg.frames, cfg.height, cfg.width)).astype(np.float32))
    boxes = np.array([[0.1, 0.1, 0.6, 0.6]])
    with tt.no_grad():
        model(clip, boxes, np.zeros(1, dtype=int))  # warmup
        times = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            model(clip, boxes, np.zeros(1, dtype=int))
            times.append(time.perf_counter() - t0)
    print(f"forward latency {np.median(times):.4f}s "
          f"(median of {args.runs}, batch 1)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="wvt", description="dense-scene video action detection workbench")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True, data=False):
        p.add_argument("--seed", type=int, default=0)
        if config:
            p.add_argument("--config", default="tiny",
                           help="preset (tiny, full) or key=value file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset dir with manifest.txt and gt.csv")
            p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, config=False)
    p.add_argument("--clips", type=int, default=240)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32, help="frame height == width")
    p.add_argument("--max-labels", type=int, default=3)
    p.add_argument("--back-scale", type=float, default=0.6)
    p.add_argument("--occlusion", type=float, default=0.25)
    p.add_argument("--camera", default="front")
    p.add_argument("--workers", type=int, default=None,
                   help=f"default WVT_THREADS ({default_workers()})")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector and evaluate the test split")
    common(p, data=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--back-area", type=float, default=None,
                   help="area threshold for the back-row subset metric")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--jitter", type=float, default=0.0,
                   help="proposal corner noise in relative units")
    p.add_argument("--back-area", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("stats", help="dataset statistics report")
    common(p, config=False)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("dump-attn", help="window coordinates and attention heatmaps")
    common(p, data=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--clip", type=int, default=0, help="clip index in the manifest")
    p.add_argument("--block", type=int, default=0, help="backbone block to inspect")
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("sweep", help="train/eval over frames or window values")
    common(p, data=True)
    p.add_argument("--axis", choices=("frames", "window"), required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-3)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="parameter/FLOP counts and forward latency")
    common(p, out=False)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--skip-forward", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (WvtError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
