"""Part-chart UV atlas: packs 24 per-part charts into the unit square.

Within a chart, a vertex's local coordinates come from a cylindrical
unwrap along the part's bone axis (angle -> u, axial position -> v).  Tube
triangles that straddle the angular seam interpolate through chart
interior instead of wrapping; that distorts u on one third of each tube
but never leaks outside the chart, which is what the texel mapping relies
on.

Two layouts share the same splitting machinery.  "neighboring" orders
parts by a depth-first walk of the kinematic tree so limb chains end up in
contiguous blocks next to their torso anchors; "randomized" shuffles the
order by seed.  The split allocates rectangles in exact proportion to
rest-pose surface area; each chart's affine placement then shrinks its
allocation by a fixed relative factor, which preserves the area shares
exactly while opening gutters wide enough that floor-quantized texel
ranges of different charts stay disjoint at the reference resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bodymodel import N_JOINTS, _part_axes, _tube_frame

REFERENCE_RESOLUTION = 64
# each chart keeps this fraction of its allocated width/height as gutter
# (half on each side); verified at build time to separate texel ranges
GUTTER_FRACTION = 0.15

LAYOUTS = ("neighboring", "randomized")


def _dfs_order(parents):
    children = [[] for _ in range(len(parents))]
    for j in range(1, len(parents)):
        children[parents[j]].append(j)
    order = []
    stack = [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    return order


@dataclass
class UVAtlas:
    """Chart placement plus the per-vertex chart coordinates.

    rects are the allocated partition of [0,1]^2; the affine placement of
    chart-local coordinates is offset/scale, the allocation shrunk by the
    gutter fraction.  vertex_local holds cylindrical chart coordinates,
    vertex_global their affine images.
    """

    layout: str
    seed: int
    rects: np.ndarray                   # (24, 4): u0, v0, w, h allocated
    vertex_part: np.ndarray             # (V,) ints 1..24
    vertex_local: np.ndarray            # (V, 2) in [0, 1]
    gutter_fraction: float = GUTTER_FRACTION
    offset: np.ndarray = field(default=None, repr=False)   # (24, 2)
    scale: np.ndarray = field(default=None, repr=False)    # (24, 2)
    vertex_global: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.rects = np.asarray(self.rects, dtype=np.float64).reshape(N_JOINTS, 4)
        if self.offset is None:
            q = self.gutter_fraction
            self.offset = self.rects[:, :2] + 0.5 * q * self.rects[:, 2:]
            self.scale = (1.0 - q) * self.rects[:, 2:]
        if self.vertex_global is None and self.vertex_part is not None:
            self.vertex_global = atlas_coords(self, self.vertex_part, self.vertex_local)


@dataclass
class UVGrid:
    """Discretized atlas: texel ownership at one resolution."""

    resolution: int
    ownership: np.ndarray   # (R, R) int16, 0 = unowned
    valid: np.ndarray       # (R, R) bool, texel belongs to some chart


def part_surface_areas(model):
    """Rest-pose triangle area summed per part, (24,)."""
    areas = np.zeros(N_JOINTS)
    v = model.template
    for f in model.faces:
        a, b, c = v[f[0]], v[f[1]], v[f[2]]
        pid = model.vertex_part[f[0]] - 1
        areas[pid] += 0.5 * np.linalg.norm(np.cross(b - a, c - a))
    return areas


def _split(order, areas, rect, out):
    """Recursive proportional kd split; fills out[part] = rect."""
    if len(order) == 1:
        out[order[0]] = rect
        return
    total = areas[order].sum()
    # choose the contiguous split whose left share is closest to one half,
    # keeping the ordering intact so neighbors stay adjacent
    shares = np.cumsum(areas[order][:-1]) / total
    k = int(np.argmin(np.abs(shares - 0.5))) + 1
    f = areas[order[:k]].sum() / total
    u0, v0, w, h = rect
    if w >= h:
        left = (u0, v0, w * f, h)
        right = (u0 + w * f, v0, w * (1.0 - f), h)
    else:
        left = (u0, v0, w, h * f)
        right = (u0, v0 + h * f, w, h * (1.0 - f))
    _split(order[:k], areas, left, out)
    _split(order[k:], areas, right, out)


def chart_coords(model):
    """Chart-local (u, v) in [0, 1]^2 for every vertex, (V, 2).

    u is the cylindrical angle about the part axis, v the axial position.
    """
    axes = _part_axes()
    uv = np.zeros((model.n_verts, 2))
    for vi in range(model.n_verts):
        pid = model.vertex_part[vi] - 1
        origin, d, length = axes[pid]
        _, uax, wax = _tube_frame(d)
        rel = model.template[vi] - origin
        a = np.clip((rel @ d) / length, 0.0, 1.0)
        phi = np.arctan2(rel @ wax, rel @ uax)
        uv[vi] = ((phi / (2.0 * np.pi)) % 1.0, a)
    return uv


def build_atlas(model, layout="neighboring", seed=0):
    if layout not in LAYOUTS:
        raise ValueError("unknown layout %r, expected one of %r" % (layout, LAYOUTS))
    areas = part_surface_areas(model)
    if layout == "neighboring":
        order = _dfs_order(model.parents)
    else:
        order = list(np.random.default_rng(seed).permutation(N_JOINTS))
    out = {}
    _split(order, areas, (0.0, 0.0, 1.0, 1.0), out)
    rects = np.zeros((N_JOINTS, 4))
    for part, rect in out.items():
        rects[part] = rect
    atlas = UVAtlas(
        layout=layout,
        seed=seed,
        rects=rects,
        vertex_part=model.vertex_part.astype(int).copy(),
        vertex_local=chart_coords(model),
    )
    counts = _claimed_counts(atlas, REFERENCE_RESOLUTION)
    if counts.max() > 1:
        n = int((counts > 1).sum())
        raise ValueError(
            "atlas packing failed: %d texels claimed by multiple charts at "
            "resolution %d" % (n, REFERENCE_RESOLUTION)
        )
    tex = texel_of(atlas, atlas.vertex_part, atlas.vertex_local,
                   REFERENCE_RESOLUTION)
    if len(np.unique(tex)) != len(tex):
        raise ValueError(
            "atlas packing failed: %d vertices collide in texel space at "
            "resolution %d" % (len(tex) - len(np.unique(tex)), REFERENCE_RESOLUTION)
        )
    return atlas


def atlas_coords(atlas, part_ids, uv):
    """Map chart-local uv to atlas coordinates.

    part_ids: (N,) ints in 1..24; uv: (N, 2) in [0, 1].  Vectorized.
    """
    idx = np.asarray(part_ids, dtype=int) - 1
    return atlas.offset[idx] + np.asarray(uv) * atlas.scale[idx]


def vertex_uv(atlas, vertex_id):
    """Global atlas (u, v) of one vertex."""
    return atlas.vertex_global[vertex_id].copy()


def texel_of(atlas, part_ids, uv, resolution):
    """Flat texel index (v-major) for each (part, chart uv) pair."""
    a = atlas_coords(atlas, part_ids, uv)
    t = np.clip(np.floor(a * resolution).astype(np.int64), 0, resolution - 1)
    return t[:, 1] * resolution + t[:, 0]


def _texel_bounds(atlas, part, resolution):
    u0, v0 = atlas.offset[part]
    du, dv = atlas.scale[part]
    tu0 = int(np.clip(np.floor(u0 * resolution), 0, resolution - 1))
    tu1 = int(np.clip(np.floor((u0 + du) * resolution), 0, resolution - 1))
    tv0 = int(np.clip(np.floor(v0 * resolution), 0, resolution - 1))
    tv1 = int(np.clip(np.floor((v0 + dv) * resolution), 0, resolution - 1))
    return tu0, tu1, tv0, tv1


def build_grid(atlas, resolution):
    """Texel -> part ownership at one resolution.

    A chart owns the full floor-quantized range its placement can map
    into, i.e. exactly the texels texel_of can produce for it.  Ownership
    is exact at the reference resolution (ranges are disjoint there);
    coarser grids resolve boundary texels by paint order.
    """
    grid = np.zeros((resolution, resolution), dtype=np.int16)
    for part in range(N_JOINTS):
        tu0, tu1, tv0, tv1 = _texel_bounds(atlas, part, resolution)
        grid[tv0 : tv1 + 1, tu0 : tu1 + 1] = part + 1
    return UVGrid(resolution=resolution, ownership=grid, valid=grid > 0)


def ownership(atlas, resolution):
    return build_grid(atlas, resolution).ownership


def _claimed_counts(atlas, resolution):
    counts = np.zeros((resolution, resolution), dtype=np.int32)
    for part in range(N_JOINTS):
        tu0, tu1, tv0, tv1 = _texel_bounds(atlas, part, resolution)
        counts[tv0 : tv1 + 1, tu0 : tu1 + 1] += 1
    return counts


def save_atlas(atlas, path):
    doc = {
        "layout": atlas.layout,
        "seed": atlas.seed,
        "gutter_fraction": atlas.gutter_fraction,
        "charts": [
            {"part": p + 1, "rect": [float(x) for x in atlas.rects[p]]}
            for p in range(N_JOINTS)
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_atlas(path, model=None):
    """Read a layout file; vertex tables are rebuilt from the model.

    Without a model the atlas still maps (part, uv) pairs, but vertex_uv
    is unavailable.
    """
    with open(path) as f:
        doc = json.load(f)
    rects = np.zeros((N_JOINTS, 4))
    seen = set()
    for ch in doc["charts"]:
        p = ch["part"] - 1
        if p in seen or not 0 <= p < N_JOINTS:
            raise ValueError("atlas file: bad or duplicate part id %d" % ch["part"])
        seen.add(p)
        rects[p] = ch["rect"]
    if len(seen) != N_JOINTS:
        raise ValueError("atlas file: expected %d charts, got %d" % (N_JOINTS, len(seen)))
    vp = model.vertex_part.astype(int).copy() if model is not None else None
    vl = chart_coords(model) if model is not None else None
    return UVAtlas(
        layout=doc["layout"],
        seed=doc["seed"],
        rects=rects,
        vertex_part=vp,
        vertex_local=vl,
        gutter_fraction=doc["gutter_fraction"],
    )
