"""Pose and surface error metrics, and split-wise checkpoint evaluation.

All values are reported in millimeters: model units times 1000, mirroring
the usual table convention.  Ground-truth joints come from the stored
labels; ground-truth surfaces are recomputed from the stored pose and
centered on the stored root so label noise cannot leak into PVE.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from . import featurepipe as fp
from . import losses as ls
from . import numcore as nc
from . import training as tr

MM = 1000.0
ROOT = ls.ROOT_JOINT
EVAL_SPLITS = ("test_clean", "test_object", "test_person")
CSV_HEADER = "split,mpjpe,pa_mpjpe,pve,n,seed"


def config_hash(cfg):
    """Short stable digest of a run configuration."""
    blob = json.dumps(tr.config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def mpjpe(pred_joints, gt_joints):
    """Mean per-joint distance after root-centering both sets, in mm."""
    p = np.asarray(pred_joints, float)
    g = np.asarray(gt_joints, float)
    d = (p - p[ROOT]) - (g - g[ROOT])
    return float(np.linalg.norm(d, axis=1).mean() * MM)


def similarity_align(pred, gt):
    """Best similarity transform (rotation, scale, translation) of pred
    onto gt in the least-squares sense.

    Returns (aligned pred, degenerate flag).  A collapsed or collinear
    prediction leaves scale or rotation underdetermined; those fall back
    to centroid translation only and raise the flag.
    """
    x = np.asarray(pred, float)
    y = np.asarray(gt, float)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    vx = float((xc * xc).sum())
    a = yc.T @ xc
    u, s, vt = np.linalg.svd(a)
    if vx < 1e-18 or s[0] < 1e-18 or s[1] <= s[0] * 1e-9:
        return xc + my, True
    d = np.sign(np.linalg.det(u @ vt))
    dd = np.array([1.0, 1.0, d])
    r = (u * dd) @ vt
    scale = float((s * dd).sum()) / vx
    return scale * xc @ r.T + my, False


def pa_mpjpe(pred_joints, gt_joints):
    """MPJPE after Procrustes alignment, in mm."""
    aligned, _ = similarity_align(pred_joints, gt_joints)
    g = np.asarray(gt_joints, float)
    return float(np.linalg.norm(aligned - g, axis=1).mean() * MM)


def pve(pred_verts, gt_verts):
    """Mean per-vertex distance in mm; callers center the meshes first."""
    p = np.asarray(pred_verts, float)
    g = np.asarray(gt_verts, float)
    if p.shape != g.shape:
        raise ValueError("pve: vertex sets differ in shape, %r vs %r"
                         % (p.shape, g.shape))
    return float(np.linalg.norm(p - g, axis=1).mean() * MM)


# ---------------------------------------------------------------------------
# evaluation


def _predict_with_pipe(pipe, model, sample, small):
    with nc.no_grad():
        out, _ = fp.forward_sample(pipe, sample.image, sample.iuv, iuv_small=small)
        th, be, _ = fp.split_param_vector(out.params)
        verts, joints = bm.forward_batch(model, nc.reshape(th, (1, 24, 3)),
                                         nc.reshape(be, (1, 10)))
    return joints.data[0], verts.data[0]


def _resolve(checkpoint, dataset_root, model, predict):
    man = tr.load_manifest(dataset_root)
    if checkpoint is None:
        if predict is None:
            raise ValueError("evaluate needs a checkpoint or a predict function")
        return None, tr.config_from_dict(man["config"]), man
    pipe, extra = fp.pipeline_from_checkpoint(checkpoint, model)
    if "train_config" in extra:
        cfg = tr.config_from_dict(extra["train_config"])
    else:
        cfg = tr.config_from_dict(man["config"])
    tr.check_dataset(cfg, dataset_root)
    if pipe.config != cfg.pipeline_config():
        raise ValueError(
            "checkpoint %s pipeline %r does not match run config %r"
            % (checkpoint, pipe.config, cfg.pipeline_config())
        )
    return pipe, cfg, man


def evaluate(checkpoint, dataset_root, splits=EVAL_SPLITS, out_dir=None,
             predict=None):
    """Per-split MPJPE / PA-MPJPE / PVE for one checkpoint.

    predict overrides the network: a callable sample -> (joints (24, 3),
    verts (V, 3)), used for oracle and baseline evaluations.  Writes
    report.json and metrics.csv when out_dir is given.  Returns the
    report dict.
    """
    model = bm.build_default_model()
    pipe, cfg, man = _resolve(checkpoint, dataset_root, model, predict)
    # no paths in the report: the same run in a different directory must
    # produce byte-identical output
    report = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "splits": {},
    }
    for split in splits:
        n = man["splits"][split]
        samples, smalls = tr.load_split(dataset_root, split, n, downscale=True)
        sums = np.zeros(3)
        degenerate = 0
        for sample, small in zip(samples, smalls):
            if predict is not None:
                pj, pv = predict(sample)
            else:
                pj, pv = _predict_with_pipe(pipe, model, sample, small)
            gj = sample.joints_3d
            gv, _ = bm.forward(model, sample.pose)
            aligned, bad = similarity_align(pj, gj)
            degenerate += bad
            sums += (
                mpjpe(pj, gj),
                float(np.linalg.norm(aligned - gj, axis=1).mean() * MM),
                pve(pv - pj[ROOT], gv - gj[ROOT]),
            )
        m = sums / n
        report["splits"][split] = {
            "mpjpe": float(m[0]),
            "pa_mpjpe": float(m[1]),
            "pve": float(m[2]),
            "n": n,
            "degenerate_alignments": degenerate,
        }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
    rows = [CSV_HEADER]
    for split, r in report["splits"].items():
        rows.append("%s,%r,%r,%r,%d,%d"
                    % (split, r["mpjpe"], r["pa_mpjpe"], r["pve"], r["n"],
                       report["seed"]))
    (out_dir / "metrics.csv").write_text("\n".join(rows) + "\n")


def load_report(out_dir):
    with open(Path(out_dir) / "report.json") as f:
        return json.load(f)


def phi_cosine(checkpoint, dataset_root, split="test_object", n=None):
    """Mean per-part cosine between occluded and clean part features.

    Re-renders each occluded sample's clean base deterministically and
    forwards both through the checkpoint.  Higher is better; 1 means the
    completion fully recovers the unoccluded features.
    """
    model = bm.build_default_model()
    pipe, cfg, man = _resolve(checkpoint, dataset_root, model, None)
    if n is None:
        n = man["splits"][split]
    total = 0.0
    for i in range(n):
        occ, base = tr.synthesize_pair(model, pipe.atlas, cfg, split, i)
        with nc.no_grad():
            phi_occ = fp.forward_sample(pipe, occ.image, occ.iuv)[0].phi
            phi_base = fp.forward_sample(pipe, base.image, base.iuv)[0].phi.data
            total += 1.0 - ls.sim_loss(phi_occ, phi_base).item()
    return total / n
