"""Command line entry point: ``fi3det {mine,imprint,eval,simulate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .container import read_fi3d, write_fi3d
from .errors import Fi3detError, FormatError
from .evaluation import IOU_THRESH, map_report, read_jsonl
from .gating import SupportScene
from .geometry import Box3
from .presets import get_preset
from .session import (
    ProtocolConfig,
    json_safe,
    load_state,
    report_csv,
    run_incremental_session,
    run_protocol,
    save_state,
    write_report,
)
from .vlm_ingest import MiningConfig, MiningStats, frames_in_dir, mine_unknown_objects, save_pseudo_objects
from .weighting import combined_weights

log = logging.getLogger("fi3det")


def _scene_files(path) -> list[Path]:
    d = Path(path)
    if not d.is_dir():
        raise FormatError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix == ".fi3d")


def _boxes(blocks) -> list[Box3]:
    return [Box3.from_array(r) for r in np.asarray(blocks.get("gt_boxes", np.zeros((0, 7)))).reshape(-1, 7)]


def _label_names(directory: Path) -> dict:
    """Label index to category name, from an optional ``labels.json`` list."""
    f = directory / "labels.json"
    if f.exists():
        return dict(enumerate(json.loads(f.read_text())))
    return {}


def cmd_mine(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_labels = {int(x) for x in args.base_labels.split(",") if x.strip()} if args.base_labels else set()
    cfg = MiningConfig(min_points=args.min_points, fit_mode=args.fit_mode)
    summary = {}
    for path in _scene_files(args.scenes):
        name = path.stem
        blocks = read_fi3d(path)
        frame_dir = Path(args.frames) / name
        frames = frames_in_dir(frame_dir) if frame_dir.is_dir() else []
        if not frames:
            log.warning("scene %s: no frames under %s", name, frame_dir)
        labels = np.asarray(blocks.get("gt_labels", np.zeros(0)), dtype=np.int64)
        base_gt = [b for b, c in zip(_boxes(blocks), labels) if int(c) in base_labels]
        stats = MiningStats()
        objs = mine_unknown_objects(frames, base_gt, cfg, stats)
        save_pseudo_objects(out / f"{name}.pseudo.json", objs)
        points = blocks["points"]
        feats = blocks.get("feat2d")
        use_box = feats is not None
        if not use_box:
            log.warning("scene %s has no feat2d block; box weights disabled", name)
            feats = np.zeros((len(points), 1))
        fld = combined_weights(points, objs, feats, args.sigma, use_box=use_box)
        write_fi3d(out / f"{name}.weights.fi3d", fld.to_blocks())
        summary[name] = {"frames": len(frames), "candidates": stats.candidates, "merged": stats.merged,
                         "suppressed": stats.suppressed, "skipped": stats.skipped, "pseudo": len(objs),
                         "weight_entries": len(fld), "boxes_dropped": fld.n_dropped}
        print(f"{name}: {len(objs)} pseudo objects, {len(fld)} weighted points")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_imprint(args) -> int:
    state = load_state(args.state)
    state.store.momentum = args.mu
    support_dir = Path(args.support)
    names = _label_names(support_dir)
    scenes, present = [], []
    for path in _scene_files(support_dir):
        blocks = read_fi3d(path)
        if "feat3d" not in blocks or "feat2d" not in blocks:
            raise FormatError(f"{path.name}: support scenes need feat3d and feat2d blocks")
        labels = [names.get(int(c), str(int(c))) for c in blocks.get("gt_labels", [])]
        boxes = list(zip(_boxes(blocks), labels))
        present += [c for c in labels if c not in present]
        scenes.append(SupportScene(blocks["points"][:, :3], blocks["feat3d"], blocks["feat2d"], boxes, path.stem))
    novel = args.novel.split(",") if args.novel else [c for c in present if c not in state.c_all]
    scenes = [SupportScene(s.locations, s.feat3d, s.feat2d, [(b, c) for b, c in s.boxes if c in novel], s.scene_id)
              for s in scenes]
    scenes = [s for s in scenes if s.boxes]
    cfg = ProtocolConfig(epochs=args.epochs, lr=args.lr, k=args.k, momentum=args.mu, mine=False)
    new = run_incremental_session(state, scenes, novel, cfg)
    save_state(args.out, new)
    trace = new.gate_trace
    print(f"session {new.t}: imprinted {', '.join(novel)} from {len(scenes)} scenes"
          + (f"; gate loss {trace[0]:.4f} -> {trace[-1]:.4f}" if trace else ""))
    if new.missing:
        print(f"warning: no positives for {', '.join(new.missing)}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    preset = get_preset(args.split)
    preds, gts = read_jsonl(args.pred), read_jsonl(args.gt)
    report = map_report(preds, gts, preset.base, preset.novel, args.iou, preset.aligned_iou,
                        meta={"split": preset.name, "iou": args.iou})
    doc = json_safe({"format": "fi3det-report", "version": 1, "split": preset.name,
                     "sessions": [{"session": 0, "metrics": report.to_dict()}], "complete": True})
    write_report(args.out, doc)
    print("Base / Novel / All:", " / ".join(report.row()))
    return 0


def cmd_simulate(args) -> int:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.protocol:
        d["protocol"] = args.protocol
    cfg = ProtocolConfig.from_dict(d)
    result = run_protocol(cfg, args.seed)
    write_report(args.out, result.document)
    if args.save_state:
        save_state(args.save_state, result.states[-1])
    sys.stdout.write(report_csv(result.document))
    return 0 if result.document["complete"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fi3det", description="Few-shot incremental 3D detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mine", help="lift VLM masks to pseudo objects and weight them")
    m.add_argument("--scenes", required=True, help="directory of scene .fi3d files")
    m.add_argument("--frames", required=True, help="directory holding one subdirectory of frames per scene")
    m.add_argument("--sigma", type=float, default=0.5)
    m.add_argument("--out", required=True)
    m.add_argument("--base-labels", default="", help="comma separated base label ids used for suppression")
    m.add_argument("--min-points", type=int, default=20)
    m.add_argument("--fit-mode", choices=["axis_aligned", "min_area_yaw"], default="axis_aligned")
    m.set_defaults(func=cmd_mine)

    i = sub.add_parser("imprint", help="run one incremental session on a support directory")
    i.add_argument("--state", required=True)
    i.add_argument("--support", required=True, help="directory of support scene .fi3d files")
    i.add_argument("--mu", type=float, default=0.999)
    i.add_argument("--epochs", type=int, default=200)
    i.add_argument("--lr", type=float, default=0.01)
    i.add_argument("--k", type=int, default=6)
    i.add_argument("--novel", default="", help="comma separated novel categories (default: all new ones)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_imprint)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--pred", required=True, help="JSON lines detections")
    e.add_argument("--gt", required=True, help="JSON lines ground truth")
    e.add_argument("--iou", type=float, default=IOU_THRESH)
    e.add_argument("--split", required=True, help="preset name")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="run the full protocol on the synthetic world")
    s.add_argument("--config", help="JSON protocol config (defaults when omitted)")
    s.add_argument("--protocol", choices=["batch", "sequential"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--save-state", help="also write the final session state here")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (Fi3detError, KeyError, ValueError, OSError) as exc:
        print(f"fi3det {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
