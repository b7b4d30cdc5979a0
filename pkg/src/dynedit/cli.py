"""Command-line front end: synth, edit, train, render, eval.

A project directory holds everything one edit needs::

    project.yaml            merged configuration (written by synth)
    cameras.json            per-view, per-frame intrinsics and poses
    frames/<view>/<t>.png   observed frames
    gt/flow_<t>.bin         forward optical flow t -> t+1 (u, v, valid) of view 0
    gt/corr_<t>.bin         reference-frame pixel -> frame t pixel (u, v, valid)
    edit/edited.png, edit/mask.png   synthetic edit described by the config
    surface.ply, session.json        lifted edit (written by edit)
    checkpoints/            training checkpoints, losses.csv
    metrics.csv             correspondence accuracy (written by train and eval)
    renders/<view>/<t>.png  edited frames (written by render)
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io
from .autodiff import NonFiniteError
from .evaluation import EvalError, evaluate, write_metrics_csv
from .geometry import GeometryError, write_ply
from .localsurface import EditError
from .motion import load_models
from .scenefield import ConfigError, gt_correspondence, make_scene
from .session import DEFAULT_CONFIG, attach_edit, build_session, merge, render_edited, synth_edit, validate_config
from .training import ABLATIONS, LossError, LossWeights, TrainConfig, TrainingDiverged, train

PROJECT_FILE = "project.yaml"
SESSION_FILE = "session.json"


class CommandError(RuntimeError):
    pass


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(p) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return data


def full_config(cfg, base_dir=None):
    """Merge with defaults and validate everything a later command will need."""
    cfg = merge(DEFAULT_CONFIG, cfg)
    validate_config(cfg)
    make_scene(cfg["scene"], base_dir)
    TrainConfig.from_dict(cfg.get("train"))
    LossWeights.from_dict(cfg.get("weights"))
    return cfg


def _project(path):
    p = Path(path)
    if not (p / PROJECT_FILE).exists():
        raise CommandError(f"{p} is not a project directory (no {PROJECT_FILE})")
    with open(p / PROJECT_FILE) as fh:
        return p, yaml.safe_load(fh)


def _session(proj, cfg, need_edit=True):
    sess = build_session(cfg, base_dir=cfg.get("base_dir"), with_edit=False)
    if need_edit:
        manifest = proj / SESSION_FILE
        if not manifest.exists():
            raise CommandError("no lifted edit; run the edit command first")
        with open(manifest) as fh:
            info = json.load(fh)
        sess.ref_frame, sess.ref_view = int(info["frame"]), int(info["view"])
        image = io.read_png(proj / info["image"])[..., :3]
        mask = io.read_mask(proj / info["mask"])
        attach_edit(sess, image, mask, info.get("edge_threshold"))
    return sess


def _camera_dict(cam):
    return {"K": cam.K.tolist(), "R": cam.R.tolist(), "center": cam.center.tolist(),
            "width": cam.width, "height": cam.height}


def _frame_list(spec, n_frames):
    """Parse '3', '0,5,9' or '0-29' into frame indices."""
    if spec is None:
        return list(range(n_frames))
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    bad = [t for t in out if not 0 <= t < n_frames]
    if not out or bad:
        raise ConfigError(f"frames must lie in [0, {n_frames - 1}]")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = load_config(args.config)
    base_dir = str(Path(args.config).resolve().parent) if args.config else None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.frames is not None:
        cfg["frames"] = int(args.frames)
        if "frame" not in cfg.get("edit", {}):
            cfg.setdefault("edit", {})["frame"] = max(int(args.frames) // 2, 0)
    cfg = full_config(cfg, base_dir)
    if base_dir:
        cfg["base_dir"] = base_dir
    sess = build_session(cfg, base_dir=base_dir, with_edit=False)

    out = Path(args.project)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / PROJECT_FILE, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    cams = {str(v): [_camera_dict(c) for c in sess.cameras[v]] for v in range(sess.n_views)}
    with open(out / "cameras.json", "w") as fh:
        json.dump(cams, fh, indent=1)
    for v in range(sess.n_views):
        for t in range(sess.n_frames):
            io.write_png(out / "frames" / str(v) / f"{t}.png", sess.frames[v][t])
    ref_cam = sess.reference_camera()
    pix = ref_cam.pixel_centers()
    H, W = ref_cam.height, ref_cam.width
    for t in range(sess.n_frames):
        if t + 1 < sess.n_frames:
            fl, ok = sess.flow(0, t, 1)
            io.write_grid(out / "gt" / f"flow_{t}.bin", np.concatenate([fl, ok[..., None]], axis=-1))
        corr, ok = gt_correspondence(sess.field, ref_cam, sess.cameras[sess.ref_view][t],
                                     float(sess.ref_frame), float(t), pix)
        io.write_grid(out / "gt" / f"corr_{t}.bin",
                      np.concatenate([corr, ok[:, None]], axis=1).reshape(H, W, 3))
    img, mask = synth_edit(sess.frames[sess.ref_view][sess.ref_frame], cfg["edit"], cfg.get("seed", 0))
    io.write_png(out / "edit" / "edited.png", img)
    io.write_png(out / "edit" / "mask.png", mask.astype(np.float64))
    return {"project": str(out), "frames": sess.n_frames, "views": sess.n_views}


def cmd_edit(args):
    proj, cfg = _project(args.project)
    frame = cfg["edit"]["frame"] if args.frame is None else args.frame
    view = cfg["edit"].get("view", 0) if args.view is None else args.view
    cfg = merge(cfg, {"edit": {"frame": int(frame), "view": int(view)}})
    validate_config(cfg)
    image_path = Path(args.image) if args.image else proj / "edit" / "edited.png"
    mask_path = Path(args.mask) if args.mask else proj / "edit" / "mask.png"
    image = io.read_png(image_path)[..., :3]
    mask = io.read_mask(mask_path)
    sess = _session(proj, cfg, need_edit=False)
    if image.shape[:2] != (sess.height, sess.width) or mask.shape != (sess.height, sess.width):
        raise EditError(f"edited image {image.shape[:2]} / mask {mask.shape} do not match "
                        f"frames {(sess.height, sess.width)}")
    edge = cfg.get("surface", {}).get("edge_threshold")
    surf = attach_edit(sess, image, mask, edge)
    # keep copies inside the project so later commands are self-contained
    io.write_png(proj / "edit" / "lifted_image.png", image)
    io.write_png(proj / "edit" / "lifted_mask.png", mask.astype(np.float64))
    write_ply(proj / "surface.ply", surf.mesh)
    info = {"frame": int(frame), "view": int(view), "image": "edit/lifted_image.png",
            "mask": "edit/lifted_mask.png", "edge_threshold": edge,
            "vertices": int(len(surf.vertices)), "faces": int(len(surf.mesh.faces))}
    with open(proj / SESSION_FILE, "w") as fh:
        json.dump(info, fh, indent=1)
    with open(proj / PROJECT_FILE, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return {"vertices": info["vertices"], "faces": info["faces"]}


def _train_setup(cfg, args):
    tcfg = dict(cfg.get("train") or {})
    if args.seed is not None:
        tcfg["seed"] = args.seed
    else:
        tcfg.setdefault("seed", int(cfg.get("seed", 0)))
    if args.iterations is not None:
        tcfg["iterations"] = args.iterations
        tcfg["warmup"] = min(int(tcfg.get("warmup", TrainConfig.warmup)), args.iterations)
    weights = LossWeights.from_dict(cfg.get("weights"))
    if args.ablate:
        weights = weights.ablate(*args.ablate)
    return TrainConfig.from_dict(tcfg), weights


def cmd_train(args):
    proj, cfg = _project(args.project)
    if args.config:
        cfg = merge(cfg, load_config(args.config))
    validate_config(cfg)
    tcfg, weights = _train_setup(cfg, args)
    sess = _session(proj, cfg)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = train(sess, tcfg, weights, out_dir=proj / "checkpoints", log=log)
    rows, summary = evaluate(sess, result.net)
    write_metrics_csv(proj / "metrics.csv", rows, summary)
    return {"seconds": round(result.seconds, 2), **{k: summary[k] for k in ("epe", "pck1", "pck2")},
            "max_cycle_error": max([c for _, c in result.cycle_errors], default=0.0)}


def _checkpoint(proj, path):
    p = Path(path) if path else proj / "checkpoints" / "final"
    if not p.with_suffix(".json").exists():
        raise CommandError(f"checkpoint not found: {p}")
    net, _, _ = load_models(p)
    return net


def cmd_render(args):
    proj, cfg = _project(args.project)
    sess = _session(proj, cfg)
    net = None if args.identity else _checkpoint(proj, args.checkpoint)
    frames = _frame_list(args.frames, sess.n_frames)
    view = 0 if args.view is None else args.view
    if not 0 <= view < sess.n_views:
        raise ConfigError(f"view must lie in [0, {sess.n_views - 1}]")
    out = Path(args.out) if args.out else proj / "renders"
    seed = int(cfg.get("seed", 0))
    for t in frames:
        img = render_edited(sess, net, t, view, mask_field=not args.no_mask_field,
                            occlusion=not args.no_occlusion, seed=seed)
        io.write_png(out / str(view) / f"{t}.png", img)
    return {"rendered": len(frames), "out": str(out)}


def cmd_eval(args):
    proj, cfg = _project(args.project)
    sess = _session(proj, cfg)
    net = _checkpoint(proj, args.checkpoint)
    frames = None if args.frames is None else _frame_list(args.frames, sess.n_frames)
    rows, summary = evaluate(sess, net, frames)
    write_metrics_csv(proj / "metrics.csv", rows, summary)
    return {k: summary[k] for k in ("epe", "pck1", "pck2")}


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dynedit", description="Local appearance editing of dynamic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render an analytic scene into a new project directory")
    s.add_argument("project")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int, help="number of frames")

    e = sub.add_parser("edit", help="lift an edited frame onto a local surface")
    e.add_argument("project")
    e.add_argument("--image", help="edited PNG (default: the synthetic edit)")
    e.add_argument("--mask", help="mask PNG (default: the synthetic mask)")
    e.add_argument("--frame", type=int, help="reference frame index")
    e.add_argument("--view", type=int)

    t = sub.add_parser("train", help="train the scene-flow field and the invertible motion network")
    t.add_argument("project")
    t.add_argument("--config", help="extra config merged over project.yaml")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--verbose", action="store_true")

    r = sub.add_parser("render", help="render the edited sequence")
    r.add_argument("project")
    r.add_argument("--checkpoint")
    r.add_argument("--frames", help="e.g. 5, 0,3,7 or 0-29")
    r.add_argument("--view", type=int)
    r.add_argument("--out")
    r.add_argument("--identity", action="store_true", help="skip the checkpoint and keep the surface static")
    r.add_argument("--no-mask-field", action="store_true")
    r.add_argument("--no-occlusion", action="store_true")

    v = sub.add_parser("eval", help="correspondence accuracy against analytic ground truth")
    v.add_argument("project")
    v.add_argument("--checkpoint")
    v.add_argument("--frames")
    return p


COMMANDS = {"synth": cmd_synth, "edit": cmd_edit, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval}

EXPECTED_ERRORS = (CommandError, ConfigError, EditError, EvalError, LossError, GeometryError,
                   io.FormatError, TrainingDiverged, NonFiniteError, FileNotFoundError, KeyError,
                   ValueError, OSError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        out = COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": msg}),
              file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "command": args.command, **out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
