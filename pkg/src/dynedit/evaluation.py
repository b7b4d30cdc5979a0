"""Correspondence accuracy of the warped edit against analytic ground truth."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import project, unproject
from .scenefield import gt_correspondence, render_rays


class EvalError(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    ref_pixels: np.ndarray
    pixels: np.ndarray
    valid: np.ndarray
    frame: int
    source: str = "analytic"


def _pairs(pred, gt, valid=None):
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise EvalError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    ok = np.ones(len(pred), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not ok.any():
        raise EvalError("no valid correspondence pairs")
    return np.linalg.norm(pred[ok] - gt[ok], axis=1)


def epe(pred, gt, valid=None):
    """Mean end-point error in pixels over valid pairs."""
    return float(np.mean(_pairs(pred, gt, valid)))


def pck(pred, gt, threshold, valid=None):
    """Fraction of valid pairs with error below ``threshold`` pixels."""
    return float(np.mean(_pairs(pred, gt, valid) < threshold))


def edit_pixels(sess):
    """Pixel centres of the user mask in the reference view."""
    ii, jj = np.nonzero(sess.edit.mask)
    return np.stack([jj + 0.5, ii + 0.5], axis=1)


def predict_correspondence(sess, net, ref_pixels, t, view=None):
    """Where the edit content at ``ref_pixels`` of the reference frame appears at frame ``t``."""
    ref_pixels = np.atleast_2d(np.asarray(ref_pixels, dtype=np.float64))
    mask = sess.edit.mask
    H, W = mask.shape
    jj = np.floor(ref_pixels[:, 0]).astype(np.int64)
    ii = np.floor(ref_pixels[:, 1]).astype(np.int64)
    inside = (jj >= 0) & (jj < W) & (ii >= 0) & (ii < H)
    if not inside.all() or not mask[ii, jj].all():
        raise EvalError("pixel outside the edit region")
    cam_r = sess.reference_camera()
    _, depth, valid, _ = render_rays(sess.field, cam_r, float(sess.ref_frame), sess.settings,
                                     pixels=ref_pixels)
    if not valid.all():
        raise EvalError("edit pixel without valid depth")
    pts = unproject(cam_r, ref_pixels, depth)
    if net is not None and t != sess.ref_frame:
        pts = net.warp(pts, float(sess.ref_frame), float(t))
    view = sess.ref_view if view is None else view
    pix, _ = project(sess.cameras[view][t], pts)
    return pix


def ground_truth(sess, ref_pixels, t, view=None):
    view = sess.ref_view if view is None else view
    pix, valid = gt_correspondence(sess.field, sess.reference_camera(), sess.cameras[view][t],
                                   float(sess.ref_frame), float(t), ref_pixels)
    return CorrespondenceSet(np.asarray(ref_pixels), pix, valid, t)


def evaluate(sess, net, frames=None, include_reference=False):
    """Per-frame (frame, epe, pck1, pck2) rows plus a pooled summary dict."""
    ref = edit_pixels(sess)
    if frames is None:
        frames = [t for t in range(sess.n_frames) if include_reference or t != sess.ref_frame]
    rows, errs = [], []
    for t in frames:
        gt = ground_truth(sess, ref, t)
        pred = predict_correspondence(sess, net, ref, t)
        e = _pairs(pred, gt.pixels, gt.valid)
        errs.append(e)
        rows.append({"frame": t, "epe": float(e.mean()), "pck1": float(np.mean(e < 1)),
                     "pck2": float(np.mean(e < 2))})
    e = np.concatenate(errs)
    summary = {"frame": "all", "epe": float(e.mean()), "pck1": float(np.mean(e < 1)),
               "pck2": float(np.mean(e < 2))}
    return rows, summary


def write_metrics_csv(path, rows, summary):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["frame", "epe", "pck1", "pck2"])
        w.writeheader()
        w.writerows(rows)
        w.writerow(summary)
