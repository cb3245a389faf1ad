"""Loss values against scipy oracles plus gradient and contract checks."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from uvhmr import bodymodel as bm
from uvhmr import losses as ls
from uvhmr import numcore as nc
from uvhmr.numcore import Tensor


def random_thetas(rng, scale=0.6):
    return rng.normal(0.0, scale, (24, 3))


# ---------------------------------------------------------------------------
# weights


def test_default_weights_match_published_values():
    w = ls.LossWeights()
    assert (w.smpl, w.joints_3d, w.joints_2d, w.sim) == (1.0, 5.0, 5.0, 1.0)


@pytest.mark.parametrize("bad", [dict(smpl=-0.1), dict(sim=float("nan")),
                                 dict(joints_2d=float("inf"))])
def test_invalid_weights_rejected(bad):
    with pytest.raises(ValueError, match="weight"):
        ls.LossWeights(**bad)


# ---------------------------------------------------------------------------
# smpl loss


def test_smpl_loss_zero_on_match_and_symmetric():
    rng = np.random.default_rng(0)
    ta, be = random_thetas(rng), rng.normal(0, 1, 10)
    assert ls.smpl_loss(ta, be, ta, be).item() == 0.0
    tb, bb = random_thetas(rng), rng.normal(0, 1, 10)
    ab = ls.smpl_loss(ta, be, tb, bb).item()
    ba = ls.smpl_loss(tb, bb, ta, be).item()
    assert ab == ba > 0.0


def test_smpl_loss_matches_rotation_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        ta, tb = random_thetas(rng), random_thetas(rng)
        ba, bb = rng.normal(0, 1, 10), rng.normal(0, 1, 10)
        ra = Rotation.from_rotvec(ta).as_matrix()
        rb = Rotation.from_rotvec(tb).as_matrix()
        want = np.concatenate([(ra - rb).ravel(), ba - bb])
        want = np.mean(want * want)
        got = ls.smpl_loss(ta, ba, tb, bb).item()
        assert got == pytest.approx(want, abs=1e-12)


def test_smpl_loss_ignores_axis_angle_wraparound():
    axis = np.array([0.0, 1.0, 0.0])
    ta = np.zeros((24, 3))
    tb = np.zeros((24, 3))
    ta[5] = 0.4 * axis
    tb[5] = (0.4 - 2.0 * np.pi) * axis  # same rotation, different code
    assert ls.smpl_loss(ta, np.zeros(10), tb, np.zeros(10)).item() < 1e-25


def test_smpl_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    gt_t, gt_b = random_thetas(rng), rng.normal(0, 1, 10)

    def fn(theta, beta):
        return ls.smpl_loss(theta, beta, gt_t, gt_b)

    err = nc.finite_difference_check(fn, [random_thetas(rng), rng.normal(0, 1, 10)])
    assert err < 1e-4


def test_smpl_loss_shape_validation():
    with pytest.raises(nc.ShapeError):
        ls.smpl_loss(np.zeros((23, 3)), np.zeros(10), np.zeros((24, 3)), np.zeros(10))
    with pytest.raises(nc.ShapeError):
        ls.smpl_loss(np.zeros((24, 3)), np.zeros(9), np.zeros((24, 3)), np.zeros(10))


# ---------------------------------------------------------------------------
# keypoint losses


def test_keypoint_losses_zero_on_match():
    rng = np.random.default_rng(3)
    j3, j2 = rng.normal(0, 1, (24, 3)), rng.normal(0, 1, (24, 2))
    l3, l2 = ls.keypoint_losses(j3, j2, j3, j2)
    assert l3.item() == 0.0 and l2.item() == 0.0


def test_l3d_invariant_to_independent_translations():
    rng = np.random.default_rng(4)
    pj, gj = rng.normal(0, 1, (24, 3)), rng.normal(0, 1, (24, 3))
    j2 = rng.normal(0, 1, (24, 2))
    base, _ = ls.keypoint_losses(pj, j2, gj, j2)
    moved, _ = ls.keypoint_losses(pj + np.array([3.0, -1.0, 7.0]), j2,
                                  gj + np.array([-2.0, 0.5, 1.0]), j2)
    assert moved.item() == pytest.approx(base.item(), rel=1e-12)


def test_keypoint_losses_match_direct_mse():
    rng = np.random.default_rng(5)
    pj, gj = rng.normal(0, 1, (24, 3)), rng.normal(0, 1, (24, 3))
    p2, g2 = rng.normal(0, 1, (24, 2)), rng.normal(0, 1, (24, 2))
    l3, l2 = ls.keypoint_losses(pj, p2, gj, g2)
    pc, gc = pj - pj[0], gj - gj[0]
    assert l3.item() == pytest.approx(np.mean((pc - gc) ** 2), abs=1e-15)
    assert l2.item() == pytest.approx(np.mean((p2 - g2) ** 2), abs=1e-15)


def test_keypoint_losses_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    gj, g2 = rng.normal(0, 1, (24, 3)), rng.normal(0, 1, (24, 2))

    def fn(pj, p2):
        l3, l2 = ls.keypoint_losses(pj, p2, gj, g2)
        return nc.add(l3, nc.mul(2.0, l2))

    err = nc.finite_difference_check(fn, [rng.normal(0, 1, (24, 3)),
                                          rng.normal(0, 1, (24, 2))])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# similarity loss


def test_sim_loss_zero_on_equal_one_on_orthogonal():
    rng = np.random.default_rng(7)
    phi = rng.normal(0, 1, (24, 8))
    assert ls.sim_loss(phi, phi).item() == 0.0
    a = np.zeros((2, 2))
    b = np.zeros((2, 2))
    a[0] = [1.0, 0.0]
    b[0] = [0.0, 3.0]
    a[1] = [0.0, -2.0]
    b[1] = [5.0, 0.0]
    assert ls.sim_loss(a, b).item() == 1.0


def test_sim_loss_matches_loop_oracle():
    rng = np.random.default_rng(8)
    occ, cln = rng.normal(0, 1, (24, 8)), rng.normal(0, 1, (24, 8))
    cs = [np.dot(o, c) / (np.linalg.norm(o) * np.linalg.norm(c))
          for o, c in zip(occ, cln)]
    assert ls.sim_loss(occ, cln).item() == pytest.approx(1.0 - np.mean(cs), abs=1e-12)


def test_sim_loss_zero_norm_rows_count_as_dissimilar():
    occ = np.array([[1.0, 0.0], [0.0, 0.0]])
    cln = np.array([[2.0, 0.0], [1.0, 1.0]])
    # part 0 cosine 1, part 1 cosine 0 -> mean 0.5 -> loss 0.5
    assert ls.sim_loss(occ, cln).item() == 0.5
    assert np.isfinite(ls.sim_loss(np.zeros((3, 4)), np.zeros((3, 4))).item())


def test_sim_loss_gradient_only_reaches_occluded_branch():
    rng = np.random.default_rng(9)
    occ = Tensor(rng.normal(0, 1, (6, 4)), requires_grad=True)
    cln = Tensor(rng.normal(0, 1, (6, 4)), requires_grad=True)
    with nc.Tape() as tape:
        loss = ls.sim_loss(occ, cln)
    grads = tape.gradients(loss)
    g_cln = grads.get(cln)
    assert g_cln is None or np.all(g_cln == 0.0)
    assert np.any(grads[occ] != 0.0)

    cln_fixed = rng.normal(0, 1, (6, 4))

    def fn(phi):
        return ls.sim_loss(phi, cln_fixed)

    assert nc.finite_difference_check(fn, [rng.normal(0, 1, (6, 4))]) < 1e-4


def test_sim_loss_dead_rows_do_not_break_gradients():
    rng = np.random.default_rng(10)
    cln = rng.normal(0, 1, (3, 4))

    def fn(phi):
        return ls.sim_loss(phi, np.vstack([cln[:2], np.zeros(4)]))

    occ = rng.normal(0, 1, (3, 4))
    assert nc.finite_difference_check(fn, [occ]) < 1e-4


# ---------------------------------------------------------------------------
# combination


def test_total_loss_weighted_sum_and_sim_gating():
    comps = [Tensor(np.asarray(v)) for v in (0.3, 0.7, 0.2, 0.11)]
    full = ls.total_loss(*comps).item()
    assert full == pytest.approx(1.0 * 0.3 + 5.0 * 0.7 + 5.0 * 0.2 + 1.0 * 0.11)
    stage1 = ls.total_loss(comps[0], comps[1], comps[2]).item()
    assert stage1 == pytest.approx(1.0 * 0.3 + 5.0 * 0.7 + 5.0 * 0.2)
    zero = Tensor(np.asarray(0.0))
    assert ls.total_loss(zero, zero, zero, zero).item() == 0.0


def test_total_loss_linear_in_each_weight():
    comps = [Tensor(np.asarray(v)) for v in (0.4, 0.9, 0.15, 0.6)]
    base = ls.total_loss(*comps, weights=ls.LossWeights()).item()
    bumped = ls.total_loss(*comps, weights=ls.LossWeights(joints_3d=6.0)).item()
    assert bumped - base == pytest.approx(0.9)
    no_sim = ls.total_loss(*comps, weights=ls.LossWeights(sim=0.0)).item()
    assert base - no_sim == pytest.approx(0.6)


def test_total_loss_is_differentiable():
    rng = np.random.default_rng(11)
    gt_t, gt_b = rng.normal(0, 0.4, (24, 3)), rng.normal(0, 1, 10)
    gt_j, gt_2 = rng.normal(0, 0.5, (24, 3)), rng.normal(0, 0.5, (24, 2))
    model = bm.build_default_model()

    def fn(theta, beta):
        _, joints = bm.forward_batch(model, nc.reshape(theta, (1, 24, 3)),
                                     nc.reshape(beta, (1, 10)))
        j3 = nc.reshape(joints, (24, 3))
        j2 = nc.reshape(bm.project_batch(joints, np.array([[1.0, 0.1, -0.2]])),
                        (24, 2))
        l_smpl = ls.smpl_loss(theta, beta, gt_t, gt_b)
        l3, l2 = ls.keypoint_losses(j3, j2, gt_j, gt_2)
        return ls.total_loss(l_smpl, l3, l2)

    err = nc.finite_difference_check(fn, [rng.normal(0, 0.3, (24, 3)),
                                          rng.normal(0, 0.7, 10)])
    assert err < 1e-4
