"""Training losses over predicted body parameters and part features.

Every function here takes numcore Tensors (or arrays, coerced) and returns a
scalar Tensor, so losses compose with the tape and backpropagate into the
pipeline. Ground-truth arguments can stay plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bodymodel as bm
from . import numcore as nc

ROOT_JOINT = 0


@dataclass(frozen=True)
class LossWeights:
    smpl: float = 1.0
    joints_3d: float = 5.0
    joints_2d: float = 5.0
    sim: float = 1.0

    def __post_init__(self):
        for name in ("smpl", "joints_3d", "joints_2d", "sim"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError("loss weight %s must be finite and >= 0, got %r"
                                 % (name, v))


def _tensor(x):
    return x if isinstance(x, nc.Tensor) else nc.Tensor(np.asarray(x, dtype=float))


def smpl_loss(pred_theta, pred_beta, gt_theta, gt_beta):
    """MSE over (rotation-matrix elements of theta, beta), one scalar.

    Comparing rotation matrices instead of axis-angle vectors sidesteps the
    2*pi wraparound: two axis-angle codes for the same rotation score 0.
    """
    pred_theta, gt_theta = _tensor(pred_theta), _tensor(gt_theta)
    pred_beta, gt_beta = _tensor(pred_beta), _tensor(gt_beta)
    if pred_theta.shape != (bm.N_JOINTS, 3) or gt_theta.shape != (bm.N_JOINTS, 3):
        raise nc.ShapeError("smpl_loss: theta must be (%d, 3)" % bm.N_JOINTS)
    if pred_beta.shape != (bm.N_SHAPE,) or gt_beta.shape != (bm.N_SHAPE,):
        raise nc.ShapeError("smpl_loss: beta must be (%d,)" % bm.N_SHAPE)
    dr = nc.sub(bm.rodrigues_batch(pred_theta), bm.rodrigues_batch(gt_theta))
    db = nc.sub(pred_beta, gt_beta)
    flat = nc.concat([nc.reshape(dr, (bm.N_JOINTS * 9,)),
                      nc.reshape(db, (bm.N_SHAPE,))])
    return nc.mean(nc.square(flat))


def keypoint_losses(pred_j3d, pred_j2d, gt_j3d, gt_j2d):
    """(L_3D, L_2D) mean squared errors; 3D sets are root-centered first."""
    pred_j3d, gt_j3d = _tensor(pred_j3d), _tensor(gt_j3d)
    pred_j2d, gt_j2d = _tensor(pred_j2d), _tensor(gt_j2d)
    if pred_j3d.shape != (bm.N_JOINTS, 3) or gt_j3d.shape != (bm.N_JOINTS, 3):
        raise nc.ShapeError("keypoint_losses: 3-D joints must be (%d, 3)" % bm.N_JOINTS)
    if pred_j2d.shape != (bm.N_JOINTS, 2) or gt_j2d.shape != (bm.N_JOINTS, 2):
        raise nc.ShapeError("keypoint_losses: 2-D joints must be (%d, 2)" % bm.N_JOINTS)
    root = np.array([ROOT_JOINT])
    pc = nc.sub(pred_j3d, nc.gather(pred_j3d, root, axis=0))
    gc = nc.sub(gt_j3d, nc.gather(gt_j3d, root, axis=0))
    l3d = nc.mean(nc.square(nc.sub(pc, gc)))
    l2d = nc.mean(nc.square(nc.sub(pred_j2d, gt_j2d)))
    return l3d, l2d


def sim_loss(phi_occ, phi_clean):
    """1 - mean per-part cosine similarity; supervises phi_occ only.

    phi_clean is detached here, so its producing branch receives no gradient.
    A zero-norm row on either side counts as cosine 0 for that part rather
    than poisoning the mean with a division by zero.
    """
    phi_occ = _tensor(phi_occ)
    phi_clean = nc.stop_gradient(_tensor(phi_clean))
    if phi_occ.shape != phi_clean.shape or phi_occ.ndim != 2:
        raise nc.ShapeError("sim_loss: need matching (P, D) feature sets, got %r and %r"
                            % (phi_occ.shape, phi_clean.shape))
    p = phi_occ.shape[0]
    dot = nc.sum_(nc.mul(phi_occ, phi_clean), axis=1)
    qa = nc.sum_(nc.square(phi_occ), axis=1)
    qb = nc.sum_(nc.square(phi_clean), axis=1)
    dead = (qa.data == 0.0) | (qb.data == 0.0)
    ones = np.ones(p)
    denom = nc.mul(nc.sqrt(nc.where(dead, ones, qa)),
                   nc.sqrt(nc.where(dead, ones, qb)))
    cos = nc.where(dead, np.zeros(p), nc.div(dot, denom))
    return nc.sub(1.0, nc.mean(cos))


def total_loss(l_smpl, l_3d, l_2d, l_sim=None, weights=LossWeights()):
    """Weighted sum; pass l_sim only when training the inpainting stage."""
    out = nc.add(nc.mul(weights.smpl, l_smpl),
                 nc.add(nc.mul(weights.joints_3d, l_3d),
                        nc.mul(weights.joints_2d, l_2d)))
    if l_sim is not None:
        out = nc.add(out, nc.mul(weights.sim, l_sim))
    return out
