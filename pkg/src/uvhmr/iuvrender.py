"""Software rasterization of the posed body into IUV maps and images.

The IUV map gives, per pixel, the body part index i (0 = background) and
the atlas-space correspondence coordinates (u, v) of the surface point
seen there.  Rendering is orthographic after the weak-perspective camera:
x right, y up in normalized [-1, 1] coordinates, larger z is nearer.  The
y flip to raster rows happens only at the pixel-center mapping, so all
geometry stays in the y-up frame.

Rasterization rules, which the per-pixel reference in the tests mirrors
exactly: inclusive edge functions (>= 0), front faces are counterclockwise
(positive signed area) in the y-up normalized frame, depth test is strict
so the earlier face wins ties, zero-area triangles are skipped and
counted.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .bodymodel import Camera, Pose, forward, project

MAGIC_IUV = b"DIMRIUV1"

LIGHT_DIR = np.array([0.35, 0.45, 0.82])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35
DIFFUSE = 0.65
BG_LEVEL = 0.10
BG_AMPLITUDE = 0.25


def build_palette():
    """Distinct flat colors for the 24 parts; index 0 unused."""
    pal = np.zeros((25, 3))
    for k in range(24):
        h = (k * 0.618033988749895 + 0.11) % 1.0
        s = 0.55 + 0.35 * ((k * 7) % 3) / 2.0
        v = 0.50 + 0.45 * ((k * 5) % 2)
        pal[k + 1] = colorsys.hsv_to_rgb(h, s, v)
    return pal


PALETTE = build_palette()


@dataclass
class IUVImage:
    part: np.ndarray  # (H, W) uint16, 0 = background
    u: np.ndarray     # (H, W) float64, atlas coordinates
    v: np.ndarray     # (H, W) float64


@dataclass
class RasterResult:
    iuv: IUVImage
    depth: np.ndarray     # (H, W) float64, -inf at background
    face_id: np.ndarray   # (H, W) int32, -1 at background
    n_front: int
    n_backface: int
    n_degenerate: int


@dataclass
class RenderedSample:
    image: np.ndarray     # (3, H, W) float64 in [0, 1]
    iuv: IUVImage
    pose: Pose
    cam: Camera
    seed: int
    joints_3d: np.ndarray = None   # (24, 3)
    joints_2d: np.ndarray = None   # (24, 2)
    occluder_mask: np.ndarray = None  # (H, W) bool, true = occluded
    occluded_fraction: float = 0.0
    depth: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.occluder_mask is None:
            self.occluder_mask = np.zeros(self.iuv.part.shape, dtype=bool)


@dataclass
class OccluderSpec:
    """Scripted occluder: shape, covered-area range, center spread.

    size_range bounds the fraction of the frame area the occluder covers;
    one value is drawn uniformly from it per application.  Centers are
    uniform in a disc of center_radius * frame side around the middle.  A
    (0, 0) size range is the explicit no-occluder case.
    """

    kind: str = "rect"                 # "rect" or "ellipse"
    size_range: tuple = (0.1, 0.4)
    center_radius: float = 0.25

    def __post_init__(self):
        lo, hi = self.size_range
        if not (0.0 <= lo <= hi <= 0.6):
            raise ValueError(
                "occluder size_range must sit inside [0, 0.6], got %r"
                % (self.size_range,)
            )


def pixel_centers(h, w):
    """Normalized coordinates of pixel centers: x per column, y per row."""
    xs = (np.arange(w) + 0.5) * 2.0 / w - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) * 2.0 / h
    return xs, ys


def _rasterize_mesh(xy, z, faces, vert_uv, face_part, h, w):
    """Core scanline-free rasterizer over normalized [-1, 1] coordinates."""
    xs, ys = pixel_centers(h, w)
    part = np.zeros((h, w), dtype=np.uint16)
    umap = np.zeros((h, w))
    vmap = np.zeros((h, w))
    depth = np.full((h, w), -np.inf)
    face_id = np.full((h, w), -1, dtype=np.int32)
    n_front = n_back = n_degen = 0

    for fi in range(faces.shape[0]):
        ia, ib, ic = faces[fi]
        ax, ay = xy[ia]
        bx, by = xy[ib]
        cx, cy = xy[ic]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            n_degen += 1
            continue
        if area < 0.0:
            n_back += 1
            continue
        n_front += 1

        minx, maxx = min(ax, bx, cx), max(ax, bx, cx)
        miny, maxy = min(ay, by, cy), max(ay, by, cy)
        c0 = max(0, int(np.ceil((minx + 1.0) * w / 2.0 - 0.5)))
        c1 = min(w - 1, int(np.floor((maxx + 1.0) * w / 2.0 - 0.5)))
        r0 = max(0, int(np.ceil((1.0 - maxy) * h / 2.0 - 0.5)))
        r1 = min(h - 1, int(np.floor((1.0 - miny) * h / 2.0 - 0.5)))
        if c0 > c1 or r0 > r1:
            continue

        px = xs[c0 : c1 + 1][None, :]
        py = ys[r0 : r1 + 1][:, None]
        w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        zi = (w0 * z[ia] + w1 * z[ib] + w2 * z[ic]) / area
        win = inside & (zi > depth[r0 : r1 + 1, c0 : c1 + 1])
        if not win.any():
            continue
        ui = (w0 * vert_uv[ia, 0] + w1 * vert_uv[ib, 0] + w2 * vert_uv[ic, 0]) / area
        vi = (w0 * vert_uv[ia, 1] + w1 * vert_uv[ib, 1] + w2 * vert_uv[ic, 1]) / area
        sub = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        depth[sub] = np.where(win, zi, depth[sub])
        part[sub] = np.where(win, face_part[fi], part[sub])
        umap[sub] = np.where(win, ui, umap[sub])
        vmap[sub] = np.where(win, vi, vmap[sub])
        face_id[sub] = np.where(win, fi, face_id[sub])

    return RasterResult(
        iuv=IUVImage(part=part, u=umap, v=vmap),
        depth=depth,
        face_id=face_id,
        n_front=n_front,
        n_backface=n_back,
        n_degenerate=n_degen,
    )


def _project_verts(verts, cam):
    xy = verts[:, :2] * cam.s + np.array([cam.tx, cam.ty])
    return xy, verts[:, 2].copy()


def _face_parts(model):
    return model.vertex_part[model.faces[:, 0]].astype(np.uint16)


def _check_frame(h, w):
    if h < 16 or w < 16:
        raise ValueError("frame too small: %dx%d (need at least 16)" % (h, w))


def rasterize(model, atlas, pose, cam, h, w, z_offset=0.0):
    """Full rasterization; returns (RasterResult, posed verts, joints)."""
    _check_frame(h, w)
    verts, joints = forward(model, pose)
    xy, z = _project_verts(verts, cam)
    if z_offset:
        z = z + z_offset
    res = _rasterize_mesh(
        xy, z, model.faces, atlas.vertex_global, _face_parts(model), h, w
    )
    return res, verts, joints


def rasterize_iuv(model, atlas, pose, cam, h, w):
    """Dense part/uv correspondence map for one posed body."""
    res, _, _ = rasterize(model, atlas, pose, cam, h, w)
    return res.iuv


def _shade(model, verts, raster, rng):
    h, w = raster.depth.shape
    fn = np.cross(
        verts[model.faces[:, 1]] - verts[model.faces[:, 0]],
        verts[model.faces[:, 2]] - verts[model.faces[:, 0]],
    )
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-12)
    intensity = AMBIENT + DIFFUSE * np.maximum(fn @ LIGHT_DIR, 0.0)

    img = BG_LEVEL + BG_AMPLITUDE * rng.uniform(0.0, 1.0, size=(3, h, w))
    fg = raster.face_id >= 0
    shade = np.zeros((h, w))
    shade[fg] = intensity[raster.face_id[fg]]
    base = PALETTE[raster.iuv.part]  # (H, W, 3)
    for ch in range(3):
        img[ch][fg] = base[..., ch][fg] * shade[fg]
    return np.clip(img, 0.0, 1.0)


def render_image(model, atlas, pose, cam, h, w, seed):
    """Flat-shaded color render over a noise background, (3, H, W)."""
    raster, verts, _ = rasterize(model, atlas, pose, cam, h, w)
    rng = np.random.default_rng(seed)
    return _shade(model, verts, raster, rng)


def render_sample(model, atlas, pose, cam, h, w, seed, z_offset=0.0):
    """One rasterization shared by the IUV map and the shaded image."""
    raster, verts, joints = rasterize(model, atlas, pose, cam, h, w, z_offset=z_offset)
    rng = np.random.default_rng(seed)
    img = _shade(model, verts, raster, rng)
    return RenderedSample(
        image=img,
        iuv=raster.iuv,
        pose=pose,
        cam=cam,
        seed=seed,
        joints_3d=joints,
        joints_2d=project(joints, cam),
        depth=raster.depth,
    )


# ---------------------------------------------------------------------------
# occlusion


def occluder_mask(spec, h, w, rng):
    """Boolean (H, W) mask for one scripted occluder near the frame center.

    The covered-area fraction is drawn from spec.size_range, the center
    uniformly from a disc around the frame middle, then clamped so the
    shape lies fully inside the frame.
    """
    frac = rng.uniform(spec.size_range[0], spec.size_range[1])
    if frac <= 0.0:
        return np.zeros((h, w), dtype=bool)
    area = frac * h * w
    aspect = rng.uniform(0.6, 1.7)
    if spec.kind == "rect":
        bw = np.sqrt(area * aspect)
        bh = area / bw
    elif spec.kind == "ellipse":
        bw = 2.0 * np.sqrt(area * aspect / np.pi)
        bh = 4.0 * area / (np.pi * bw)
    else:
        raise ValueError("unknown occluder kind %r" % spec.kind)
    bw = min(bw, w - 2.0)
    bh = min(bh, h - 2.0)
    rad = spec.center_radius * min(h, w) * np.sqrt(rng.uniform())
    ang = rng.uniform(0.0, 2.0 * np.pi)
    cx = w / 2.0 + rad * np.cos(ang)
    cy = h / 2.0 + rad * np.sin(ang)
    cx = float(np.clip(cx, bw / 2.0, w - bw / 2.0))
    cy = float(np.clip(cy, bh / 2.0, h - bh / 2.0))

    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    dx = (cols[None, :] - cx)
    dy = (rows[:, None] - cy)
    if spec.kind == "rect":
        return (np.abs(dx) <= bw / 2.0) & (np.abs(dy) <= bh / 2.0)
    return (dx / (bw / 2.0)) ** 2 + (dy / (bh / 2.0)) ** 2 <= 1.0


def apply_occlusion(sample, spec, seed):
    """Paint an occluder over a sample; correspondence is erased under it.

    Returns (new sample, mask).  Labels are untouched; only the evidence
    changes.  occluded_fraction records the share of formerly-visible body
    pixels the occluder removed.
    """
    h, w = sample.iuv.part.shape
    rng = np.random.default_rng(seed)
    mask = occluder_mask(spec, h, w, rng)

    img = sample.image.copy()
    color = rng.uniform(0.1, 0.9, size=3)
    noise = rng.normal(0.0, 0.03, size=(3, h, w))
    for ch in range(3):
        img[ch][mask] = np.clip(color[ch] + noise[ch][mask], 0.0, 1.0)

    part = sample.iuv.part.copy()
    u = sample.iuv.u.copy()
    v = sample.iuv.v.copy()
    was_fg = part > 0
    part[mask] = 0
    u[mask] = 0.0
    v[mask] = 0.0

    n_body = int(was_fg.sum())
    n_lost = int((was_fg & mask).sum())
    frac = n_lost / n_body if n_body else 0.0
    out = replace(
        sample,
        image=img,
        iuv=IUVImage(part=part, u=u, v=v),
        occluder_mask=sample.occluder_mask | mask,
        occluded_fraction=frac,
    )
    return out, mask


def overlap_person(sample_a, sample_b):
    """Composite person b over person a's sample by per-pixel depth.

    Pure function of the two samples: wherever b's surface is nearer (or a
    shows background), b's pixels win the image and a's correspondence is
    erased there, exactly like object occlusion.  Labels stay person a's.
    To guarantee b occludes rather than interleaves, render b with a depth
    offset (render_sample's z_offset; weak perspective ignores z).
    """
    if sample_a.iuv.part.shape != sample_b.iuv.part.shape:
        raise ValueError(
            "overlap_person: frame sizes differ, %r vs %r"
            % (sample_a.iuv.part.shape, sample_b.iuv.part.shape)
        )
    if sample_a.depth is None or sample_b.depth is None:
        raise ValueError("overlap_person needs samples with depth buffers")
    covers = (sample_b.iuv.part > 0) & (sample_b.depth > sample_a.depth)

    img = sample_a.image.copy()
    for ch in range(3):
        img[ch][covers] = sample_b.image[ch][covers]

    part = sample_a.iuv.part.copy()
    u = sample_a.iuv.u.copy()
    v = sample_a.iuv.v.copy()
    was_fg = part > 0
    part[covers] = 0
    u[covers] = 0.0
    v[covers] = 0.0

    n_body = int(was_fg.sum())
    n_lost = int((was_fg & covers).sum())
    frac = n_lost / n_body if n_body else 0.0
    out = replace(
        sample_a,
        image=img,
        iuv=IUVImage(part=part, u=u, v=v),
        occluder_mask=sample_a.occluder_mask | covers,
        occluded_fraction=frac,
        depth=np.where(covers, sample_b.depth, sample_a.depth),
    )
    return out, covers


# ---------------------------------------------------------------------------
# file formats


def write_ppm(image, path):
    """Binary PPM (P6), expects (3, H, W) floats in [0, 1]."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError("write_ppm: expected 3 channels, got %d" % c)
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("unsupported PPM maxval %d" % maxval)
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_iuv(iuv, path):
    h, w = iuv.part.shape
    with open(path, "wb") as f:
        f.write(MAGIC_IUV)
        f.write(struct.pack("<2I", h, w))
        f.write(iuv.part.astype("<u2").tobytes())
        f.write(iuv.u.astype("<f4").tobytes())
        f.write(iuv.v.astype("<f4").tobytes())


def read_iuv(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC_IUV))
        if magic != MAGIC_IUV:
            raise ValueError("not an IUV file: bad magic %r" % magic)
        h, w = struct.unpack("<2I", f.read(8))
        n = h * w

        def arr(dtype, shape):
            count = int(np.prod(shape))
            buf = f.read(np.dtype(dtype).itemsize * count)
            if len(buf) != np.dtype(dtype).itemsize * count:
                raise ValueError("truncated IUV file")
            return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()

        part = arr("<u2", (h, w))
        u = arr("<f4", (h, w)).astype(np.float64)
        v = arr("<f4", (h, w)).astype(np.float64)
    return IUVImage(part=part, u=u, v=v)
