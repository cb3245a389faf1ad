"""Rasterizer against a per-pixel brute-force reference, plus occlusion."""

import numpy as np
import pytest

from uvhmr import bodymodel as bm
from uvhmr import iuvrender as ir
from uvhmr import uvatlas as ua


@pytest.fixture(scope="module")
def model():
    return bm.build_default_model()


@pytest.fixture(scope="module")
def atlas(model):
    return ua.build_atlas(model, "neighboring")


def random_pose(rng):
    theta = rng.normal(0.0, 0.25, (24, 3))
    theta[0] = [0.0, rng.uniform(-np.pi, np.pi), 0.0]
    return bm.Pose(theta, rng.normal(0.0, 0.8, 10))


def brute_force_raster(xy, z, faces, vert_uv, face_part, h, w):
    """Per-pixel reference: test every face at every pixel center."""
    xs, ys = ir.pixel_centers(h, w)
    part = np.zeros((h, w), dtype=np.uint16)
    umap = np.zeros((h, w))
    vmap = np.zeros((h, w))
    depth = np.full((h, w), -np.inf)
    for r in range(h):
        for c in range(w):
            px, py = xs[c], ys[r]
            for fi in range(faces.shape[0]):
                ia, ib, ic = faces[fi]
                ax, ay = xy[ia]
                bx, by = xy[ib]
                cx, cy = xy[ic]
                area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
                if area <= 0.0:
                    continue
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                zi = (w0 * z[ia] + w1 * z[ib] + w2 * z[ic]) / area
                if zi > depth[r, c]:
                    depth[r, c] = zi
                    part[r, c] = face_part[fi]
                    umap[r, c] = (
                        w0 * vert_uv[ia, 0] + w1 * vert_uv[ib, 0] + w2 * vert_uv[ic, 0]
                    ) / area
                    vmap[r, c] = (
                        w0 * vert_uv[ia, 1] + w1 * vert_uv[ib, 1] + w2 * vert_uv[ic, 1]
                    ) / area
    return part, umap, vmap, depth


def test_raster_matches_per_pixel_reference(model, atlas):
    rng = np.random.default_rng(404)
    vert_uv = atlas.vertex_global
    face_part = ir._face_parts(model)
    for trial in range(3):
        pose = random_pose(rng)
        cam = bm.Camera(s=0.9, tx=rng.uniform(-0.05, 0.05), ty=rng.uniform(-0.05, 0.05))
        verts, _ = bm.forward(model, pose)
        xy, z = ir._project_verts(verts, cam)
        got = ir._rasterize_mesh(xy, z, model.faces, vert_uv, face_part, 16, 16)
        part, u, v, depth = brute_force_raster(xy, z, model.faces, vert_uv, face_part, 16, 16)
        assert np.array_equal(got.iuv.part, part), "trial %d part mismatch" % trial
        assert np.max(np.abs(got.iuv.u - u)) < 1e-9
        assert np.max(np.abs(got.iuv.v - v)) < 1e-9
        fg = part > 0
        assert np.max(np.abs(got.depth[fg] - depth[fg])) < 1e-9


def test_core_depth_and_culling_rules():
    """Handmade geometry: nearer wins, ties keep the earlier face,
    clockwise and zero-area faces are skipped and counted."""
    xy = np.array([
        [-0.8, -0.8], [0.8, -0.8], [0.0, 0.8],     # big ccw triangle
        [-0.8, -0.6], [0.6, -0.6], [0.0, 0.6],     # nearer ccw triangle
        [-0.5, -0.5], [0.5, -0.5], [0.0, 0.5],     # cw (listed backward)
        [-0.9, 0.0], [0.0, 0.9], [0.9, 0.0],       # degenerate via dup row
    ])
    xy[11] = xy[10]
    z = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 0.0, 0.0, 0.0])
    faces = np.array([[0, 1, 2], [3, 4, 5], [6, 8, 7], [9, 10, 11]], dtype=np.uint32)
    uv = np.zeros((12, 2))
    fp = np.array([1, 2, 3, 4], dtype=np.uint16)
    res = ir._rasterize_mesh(xy, z, faces, uv, fp, 32, 32)
    assert res.n_front == 2
    assert res.n_backface == 1
    assert res.n_degenerate == 1
    assert 3 not in np.unique(res.iuv.part)
    assert 4 not in np.unique(res.iuv.part)
    # the z=1 triangle must cover the interior over the z=0 one
    assert res.iuv.part[16, 16] == 2
    assert (res.iuv.part == 2).sum() > 50

    # exact tie: identical triangle twice, first one keeps every pixel
    res2 = ir._rasterize_mesh(
        xy[:3], np.zeros(3), np.array([[0, 1, 2], [0, 1, 2]], dtype=np.uint32),
        uv[:3], np.array([7, 9], dtype=np.uint16), 16, 16,
    )
    present = np.unique(res2.iuv.part)
    assert 7 in present and 9 not in present


def test_diagnostic_counts_partition_faces(model, atlas):
    rng = np.random.default_rng(5)
    res, _, _ = ir.rasterize(model, atlas, random_pose(rng), bm.Camera(), 32, 32)
    assert res.n_front + res.n_backface + res.n_degenerate == model.faces.shape[0]
    assert res.n_front > 0 and res.n_backface > 0


def test_frame_below_minimum_rejected(model, atlas):
    with pytest.raises(ValueError, match="16"):
        ir.rasterize(model, atlas, bm.Pose(np.zeros((24, 3)), np.zeros(10)),
                     bm.Camera(), 8, 64)


def test_interpolated_uv_stays_inside_part_chart(model, atlas):
    rng = np.random.default_rng(6)
    iuv = ir.rasterize_iuv(model, atlas, random_pose(rng), bm.Camera(), 64, 64)
    fg = iuv.part > 0
    assert fg.sum() > 200
    idx = iuv.part[fg].astype(int) - 1
    lo = atlas.offset[idx]
    hi = atlas.offset[idx] + atlas.scale[idx]
    uvs = np.stack([iuv.u[fg], iuv.v[fg]], axis=1)
    assert np.all(uvs >= lo - 1e-9) and np.all(uvs <= hi + 1e-9)


def test_body_outside_frame_renders_background_only(model, atlas):
    pose = bm.Pose(np.zeros((24, 3)), np.zeros(10))
    cam = bm.Camera(s=0.9, tx=8.0, ty=0.0)
    iuv = ir.rasterize_iuv(model, atlas, pose, cam, 32, 32)
    assert np.all(iuv.part == 0)
    assert np.all(iuv.u == 0.0) and np.all(iuv.v == 0.0)


def test_vertex_texels_distinct_at_reference_resolution(model, atlas):
    uv = ua.chart_coords(model)
    tex = ua.texel_of(atlas, model.vertex_part, uv, ua.REFERENCE_RESOLUTION)
    assert len(np.unique(tex)) == model.n_verts


def test_render_image_part_colors_and_background(model, atlas):
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    cam = bm.Camera()
    img = ir.render_image(model, atlas, pose, cam, 64, 64, seed=3)
    iuv = ir.rasterize_iuv(model, atlas, pose, cam, 64, 64)
    assert img.shape == (3, 64, 64)
    assert img.min() >= 0.0 and img.max() <= 1.0
    # each sufficiently visible part renders near its palette hue
    for p in np.unique(iuv.part):
        if p == 0:
            continue
        m = iuv.part == p
        if m.sum() < 12:
            continue
        mean_rgb = np.array([img[ch][m].mean() for ch in range(3)])
        base = ir.PALETTE[p]
        cossim = mean_rgb @ base / (np.linalg.norm(mean_rgb) * np.linalg.norm(base) + 1e-12)
        assert cossim > 0.98, "part %d drifted from its color" % p
    # background is noise: changes with seed while geometry stays put
    img2 = ir.render_image(model, atlas, pose, cam, 64, 64, seed=4)
    bg = iuv.part == 0
    assert not np.allclose(img[:, bg], img2[:, bg])
    assert np.array_equal(img[:, ~bg], img2[:, ~bg])


def test_palette_colors_are_separated():
    pal = ir.PALETTE[1:]
    d = np.linalg.norm(pal[:, None, :] - pal[None, :, :], axis=-1)
    d += np.eye(24) * 10.0
    assert d.min() > 0.1


def test_render_sample_deterministic_and_labeled(model, atlas):
    rng = np.random.default_rng(8)
    pose = random_pose(rng)
    cam = bm.Camera(s=0.85, tx=0.03, ty=-0.02)
    a = ir.render_sample(model, atlas, pose, cam, 48, 48, seed=11)
    b = ir.render_sample(model, atlas, pose, cam, 48, 48, seed=11)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.iuv.part, b.iuv.part)
    assert np.array_equal(a.iuv.u, b.iuv.u)
    assert np.array_equal(a.depth, b.depth)
    # fresh sample carries consistent labels and an empty occluder mask
    _, joints = bm.forward(model, pose)
    assert np.array_equal(a.joints_3d, joints)
    assert np.array_equal(a.joints_2d, bm.project(joints, cam))
    assert a.occluder_mask.shape == (48, 48) and not a.occluder_mask.any()
    assert a.occluded_fraction == 0.0


@pytest.mark.parametrize("kind", ["rect", "ellipse"])
@pytest.mark.parametrize("frac", [0.1, 0.3, 0.5])
def test_occluder_mask_area(kind, frac):
    rng = np.random.default_rng(int(frac * 100) + ord(kind[0]))
    spec = ir.OccluderSpec(kind=kind, size_range=(frac, frac))
    for _ in range(4):
        mask = ir.occluder_mask(spec, 64, 64, rng)
        got = mask.sum() / (64 * 64)
        assert abs(got - frac) / frac < 0.10, "%s %g got %g" % (kind, frac, got)


def test_occluder_size_range_drawn_within_bounds():
    rng = np.random.default_rng(71)
    spec = ir.OccluderSpec(kind="rect", size_range=(0.2, 0.5))
    for _ in range(8):
        got = ir.occluder_mask(spec, 64, 64, rng).sum() / (64 * 64)
        assert 0.2 * 0.9 < got < 0.5 * 1.1


def test_occluder_size_range_validation():
    with pytest.raises(ValueError, match="size_range"):
        ir.OccluderSpec(size_range=(0.2, 0.7))
    with pytest.raises(ValueError, match="size_range"):
        ir.OccluderSpec(size_range=(-0.1, 0.3))
    with pytest.raises(ValueError, match="size_range"):
        ir.OccluderSpec(size_range=(0.4, 0.2))


def test_occluder_zero_size_is_noop(model, atlas):
    rng = np.random.default_rng(9)
    sample = ir.render_sample(model, atlas, random_pose(rng), bm.Camera(), 32, 32, seed=1)
    out, mask = ir.apply_occlusion(sample, ir.OccluderSpec(size_range=(0.0, 0.0)), seed=5)
    assert not mask.any()
    assert np.array_equal(out.image, sample.image)
    assert np.array_equal(out.iuv.part, sample.iuv.part)
    assert out.occluded_fraction == 0.0
    assert not out.occluder_mask.any()


def test_apply_occlusion_erases_only_under_mask(model, atlas):
    rng = np.random.default_rng(10)
    sample = ir.render_sample(model, atlas, random_pose(rng), bm.Camera(), 64, 64, seed=2)
    spec = ir.OccluderSpec(kind="rect", size_range=(0.3, 0.3))
    out, mask = ir.apply_occlusion(sample, spec, seed=6)
    assert np.all(out.iuv.part[mask] == 0)
    assert np.all(out.iuv.u[mask] == 0.0)
    assert np.array_equal(out.iuv.part[~mask], sample.iuv.part[~mask])
    assert np.array_equal(out.iuv.u[~mask], sample.iuv.u[~mask])
    assert np.array_equal(out.image[:, ~mask], sample.image[:, ~mask])
    assert not np.array_equal(out.image[:, mask], sample.image[:, mask])
    assert np.array_equal(out.occluder_mask, mask)
    was_fg = sample.iuv.part > 0
    want = (was_fg & mask).sum() / was_fg.sum()
    assert abs(out.occluded_fraction - want) < 1e-12
    # labels untouched
    assert out.pose is sample.pose and out.cam is sample.cam
    assert np.array_equal(out.joints_3d, sample.joints_3d)
    assert np.array_equal(out.joints_2d, sample.joints_2d)
    # determinism
    out2, mask2 = ir.apply_occlusion(sample, spec, seed=6)
    assert np.array_equal(mask, mask2)
    assert np.array_equal(out.image, out2.image)


def test_unknown_occluder_kind_rejected():
    with pytest.raises(ValueError, match="kind"):
        ir.occluder_mask(ir.OccluderSpec(kind="blob", size_range=(0.2, 0.2)), 32, 32,
                         np.random.default_rng(0))


def test_overlap_person_erases_covered_target_iuv(model, atlas):
    rng = np.random.default_rng(12)
    target = ir.render_sample(model, atlas, random_pose(rng), bm.Camera(), 64, 64, seed=3)
    cam_b = bm.Camera(s=0.9, tx=0.35, ty=0.0)
    # occluder rendered nearer by a depth offset the projection ignores
    front = ir.render_sample(model, atlas, random_pose(rng), cam_b, 64, 64,
                             seed=4, z_offset=2.0)
    out, covers = ir.overlap_person(target, front)
    assert covers.sum() > 0
    # b's silhouette wins everywhere it has surface
    assert np.array_equal(covers, front.iuv.part > 0)
    # covered pixels lose correspondence and show b's image
    assert np.all(out.iuv.part[covers] == 0)
    assert np.array_equal(out.image[:, covers], front.image[:, covers])
    # everything else is untouched
    assert np.array_equal(out.iuv.part[~covers], target.iuv.part[~covers])
    assert np.array_equal(out.image[:, ~covers], target.image[:, ~covers])
    assert np.array_equal(out.occluder_mask, covers)
    was_fg = target.iuv.part > 0
    want = (was_fg & covers).sum() / was_fg.sum()
    assert abs(out.occluded_fraction - want) < 1e-12
    # labels stay the target's
    assert out.pose is target.pose
    assert np.array_equal(out.joints_3d, target.joints_3d)


def test_overlap_person_behind_leaves_target_body_intact(model, atlas):
    rng = np.random.default_rng(15)
    pose = random_pose(rng)
    target = ir.render_sample(model, atlas, pose, bm.Camera(), 64, 64, seed=5)
    behind = ir.render_sample(model, atlas, random_pose(rng),
                              bm.Camera(s=0.9, tx=0.1, ty=0.0), 64, 64,
                              seed=6, z_offset=-2.0)
    out, covers = ir.overlap_person(target, behind)
    # the far person never wins over the target's surface...
    fg = target.iuv.part > 0
    assert not (covers & fg).any()
    assert np.array_equal(out.iuv.part[fg], target.iuv.part[fg])
    assert out.occluded_fraction == 0.0
    # ...but still shows where the target is background
    assert covers.sum() > 0
    assert np.all(out.iuv.part[covers] == 0)


def test_overlap_person_requires_depth_and_matching_frames(model, atlas):
    rng = np.random.default_rng(16)
    a = ir.render_sample(model, atlas, random_pose(rng), bm.Camera(), 32, 32, seed=1)
    b = ir.render_sample(model, atlas, random_pose(rng), bm.Camera(), 48, 48, seed=2)
    with pytest.raises(ValueError, match="frame"):
        ir.overlap_person(a, b)
    from dataclasses import replace
    c = replace(ir.render_sample(model, atlas, random_pose(rng), bm.Camera(), 32, 32, seed=3),
                depth=None)
    with pytest.raises(ValueError, match="depth"):
        ir.overlap_person(a, c)


def test_ppm_roundtrip(model, atlas, tmp_path):
    rng = np.random.default_rng(13)
    img = rng.uniform(0, 1, (3, 20, 31))
    p = tmp_path / "x.ppm"
    ir.write_ppm(img, p)
    back = ir.read_ppm(p)
    q = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
    assert back.shape == (3, 20, 31)
    assert np.array_equal(back, q)
    # second write of the read-back image is byte-stable
    p2 = tmp_path / "y.ppm"
    ir.write_ppm(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_ppm_rejects_other_formats(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n2 2\n255\n0 0 0")
    with pytest.raises(ValueError, match="PPM"):
        ir.read_ppm(p)


def test_iuv_file_roundtrip(model, atlas, tmp_path):
    rng = np.random.default_rng(14)
    iuv = ir.rasterize_iuv(model, atlas, random_pose(rng), bm.Camera(), 32, 32)
    p = tmp_path / "x.iuv"
    ir.write_iuv(iuv, p)
    back = ir.read_iuv(p)
    assert np.array_equal(back.part, iuv.part)
    # u, v survive the declared f32 storage precision exactly
    assert np.array_equal(back.u, iuv.u.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.v, iuv.v.astype(np.float32).astype(np.float64))


def test_iuv_file_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.iuv"
    p.write_bytes(b"NOTANIUV1" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        ir.read_iuv(p)
    iuv = ir.IUVImage(
        part=np.zeros((4, 4), dtype=np.uint16), u=np.zeros((4, 4)), v=np.zeros((4, 4))
    )
    good = tmp_path / "good.iuv"
    ir.write_iuv(iuv, good)
    data = good.read_bytes()
    good.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        ir.read_iuv(good)
