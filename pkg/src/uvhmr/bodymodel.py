"""Procedural parametric body: capsule limbs posed by linear blend skinning.

The model mirrors the structure of a statistical body model (rest template,
linear shape basis, joint regressor, skinning weights over a kinematic
tree) but its geometry is constructed procedurally: each of the 24 joints
owns a short 3-ring tube aimed at its child, 9 vertices per part, 216
vertices total.  That keeps every property of the posing math testable
without shipping learned assets.

Conventions: y is up, x is the body's left, z points toward the viewer.
The root (pelvis) joint sits at the origin in the rest pose and the shape
basis is root-neutralized, so a pure root rotation spins the posed mesh
about the origin exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc

N_JOINTS = 24
N_SHAPE = 10
RINGS = 3
RING_VERTS = 3
VERTS_PER_PART = RINGS * RING_VERTS
N_VERTS = N_JOINTS * VERTS_PER_PART  # 216

PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int32,
)

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]

# T-pose skeleton, meters-ish.  Left is +x.
_REST_JOINTS = np.array(
    [
        [0.00, 0.00, 0.00],    # pelvis
        [0.09, -0.05, 0.00],   # l_hip
        [-0.09, -0.05, 0.00],  # r_hip
        [0.00, 0.12, 0.00],    # spine1
        [0.10, -0.45, 0.00],   # l_knee
        [-0.10, -0.45, 0.00],  # r_knee
        [0.00, 0.25, 0.00],    # spine2
        [0.11, -0.85, 0.00],   # l_ankle
        [-0.11, -0.85, 0.00],  # r_ankle
        [0.00, 0.38, 0.00],    # spine3
        [0.11, -0.90, 0.10],   # l_foot
        [-0.11, -0.90, 0.10],  # r_foot
        [0.00, 0.55, 0.00],    # neck
        [0.07, 0.47, 0.00],    # l_collar
        [-0.07, 0.47, 0.00],   # r_collar
        [0.00, 0.65, 0.00],    # head
        [0.18, 0.48, 0.00],    # l_shoulder
        [-0.18, 0.48, 0.00],   # r_shoulder
        [0.43, 0.48, 0.00],    # l_elbow
        [-0.43, 0.48, 0.00],   # r_elbow
        [0.67, 0.48, 0.00],    # l_wrist
        [-0.67, 0.48, 0.00],   # r_wrist
        [0.75, 0.48, 0.00],    # l_hand
        [-0.75, 0.48, 0.00],   # r_hand
    ]
)

_PART_RADIUS = np.array(
    [
        0.105,  # pelvis
        0.070, 0.070,          # hips (thighs)
        0.100,                 # spine1
        0.055, 0.055,          # knees (calves)
        0.105,                 # spine2
        0.040, 0.040,          # ankles
        0.095,                 # spine3 (chest)
        0.040, 0.040,          # feet
        0.045,                 # neck
        0.050, 0.050,          # collars
        0.085,                 # head
        0.045, 0.045,          # shoulders (upper arms)
        0.040, 0.040,          # elbows (forearms)
        0.035, 0.035,          # wrists
        0.032, 0.032,          # hands
    ]
)

# Leaf parts extend past their joint by a stub in the inherited direction.
_LEAF_STUB = {10: 0.09, 11: 0.09, 15: 0.16, 22: 0.09, 23: 0.09}

MAGIC_BODY = b"DIMRBODY1"


@dataclass
class Pose:
    """Axis-angle joint rotations (24, 3) plus shape coefficients (10,)."""

    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(N_JOINTS, 3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(N_SHAPE)


@dataclass
class Camera:
    """Weak-perspective camera: x_2d = s * x_3d_xy + (tx, ty)."""

    s: float = 0.9
    tx: float = 0.0
    ty: float = 0.0

    def as_array(self):
        return np.array([self.s, self.tx, self.ty], dtype=np.float64)


@dataclass
class BodyModel:
    template: np.ndarray        # (V, 3)
    shapedirs: np.ndarray       # (N_SHAPE, V, 3)
    joint_regressor: np.ndarray  # (24, V)
    skin_weights: np.ndarray    # (V, 24), rows sum to 1
    parents: np.ndarray         # (24,) int32, parents[0] == -1
    faces: np.ndarray           # (F, 3) uint32, outward winding
    vertex_part: np.ndarray     # (V,) uint16, part ids 1..24
    # flattened copies kept for the hot path
    _shapedirs_flat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._shapedirs_flat is None:
            self._shapedirs_flat = self.shapedirs.reshape(N_SHAPE, -1).copy()

    @property
    def n_verts(self):
        return self.template.shape[0]


def _tube_frame(d):
    d = d / np.linalg.norm(d)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(d @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(ref, d)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    return d, u, w


def _part_axes(joints=None):
    """Per part: (origin, unit direction, length) of its tube in rest pose."""
    if joints is None:
        joints = _REST_JOINTS
    children = [[] for _ in range(N_JOINTS)]
    for j in range(1, N_JOINTS):
        children[PARENTS[j]].append(j)
    axes = []
    for j in range(N_JOINTS):
        if children[j]:
            # aim at the farthest child so flat multi-child hubs (pelvis,
            # chest) still get a usable axis
            far = max(children[j], key=lambda c: np.linalg.norm(joints[c] - joints[j]))
            vec = joints[far] - joints[j]
        else:
            vec = joints[j] - joints[PARENTS[j]]
            vec = vec / np.linalg.norm(vec) * _LEAF_STUB[j]
        length = np.linalg.norm(vec)
        axes.append((joints[j].copy(), vec / length, length))
    return axes


def build_default_model():
    """Construct the procedural body.  Fully deterministic, no RNG."""
    axes = _part_axes()
    template = np.zeros((N_VERTS, 3))
    vertex_part = np.zeros(N_VERTS, dtype=np.uint16)
    phases = 2.0 * np.pi * (np.arange(RING_VERTS) + 0.37) / RING_VERTS
    for j in range(N_JOINTS):
        origin, d, length = axes[j]
        _, u, w = _tube_frame(d)
        r = _PART_RADIUS[j]
        for ring in range(RINGS):
            center = origin + d * (length * ring / (RINGS - 1))
            for i, ph in enumerate(phases):
                vi = j * VERTS_PER_PART + ring * RING_VERTS + i
                template[vi] = center + r * (np.cos(ph) * u + np.sin(ph) * w)
                vertex_part[vi] = j + 1

    faces = []
    for j in range(N_JOINTS):
        base = j * VERTS_PER_PART
        for ring in range(RINGS - 1):
            for i in range(RING_VERTS):
                k = (i + 1) % RING_VERTS
                a, a2 = base + ring * 3 + i, base + ring * 3 + k
                b, b2 = base + (ring + 1) * 3 + i, base + (ring + 1) * 3 + k
                faces.append((a, b2, b))
                faces.append((a, a2, b2))
        # end caps close the tube; near cap faces backward along the axis
        faces.append((base + 0, base + 2, base + 1))
        faces.append((base + 6, base + 7, base + 8))
    faces = np.array(faces, dtype=np.uint32)

    joint_regressor = np.zeros((N_JOINTS, N_VERTS))
    for j in range(N_JOINTS):
        ring0 = j * VERTS_PER_PART + np.arange(RING_VERTS)
        joint_regressor[j, ring0] = 1.0 / RING_VERTS

    skin_weights = np.zeros((N_VERTS, N_JOINTS))
    for j in range(N_JOINTS):
        base = j * VERTS_PER_PART
        p = PARENTS[j]
        for ring in range(RINGS):
            for i in range(RING_VERTS):
                vi = base + ring * 3 + i
                if ring == 0 and p >= 0:
                    skin_weights[vi, j] = 0.7
                    skin_weights[vi, p] = 0.3
                else:
                    skin_weights[vi, j] = 1.0

    shapedirs = _build_shape_basis(template, vertex_part, axes)
    # root-neutralize: keep the regressed pelvis at the origin for every
    # shape, so global rotations act about a fixed point
    for k in range(N_SHAPE):
        root_shift = joint_regressor[0] @ shapedirs[k]
        shapedirs[k] -= root_shift

    return BodyModel(
        template=template,
        shapedirs=shapedirs,
        joint_regressor=joint_regressor,
        skin_weights=skin_weights,
        parents=PARENTS.copy(),
        faces=faces,
        vertex_part=vertex_part,
    )


def _build_shape_basis(template, vertex_part, axes):
    """Ten fixed per-vertex displacement fields (linear shape space)."""
    V = template.shape[0]
    dirs = np.zeros((N_SHAPE, V, 3))
    part = vertex_part.astype(int) - 1

    radial = np.zeros((V, 3))
    for vi in range(V):
        origin, d, length = axes[part[vi]]
        rel = template[vi] - origin
        rad = rel - (rel @ d) * d
        n = np.linalg.norm(rad)
        radial[vi] = rad / n if n > 1e-12 else 0.0

    legs = {1, 2, 4, 5, 7, 8, 10, 11}
    arms = {16, 17, 18, 19, 20, 21, 22, 23}
    torso = {0, 3, 6, 9}
    leg_depth = {1: 1, 2: 1, 4: 2, 5: 2, 7: 3, 8: 3, 10: 3, 11: 3}
    arm_depth = {16: 1, 17: 1, 18: 2, 19: 2, 20: 3, 21: 3, 22: 3, 23: 3}

    dirs[0] = 0.06 * template                       # overall scale
    dirs[1][:, 1] = 0.08 * template[:, 1]           # height
    dirs[2][:, 0] = 0.05 * template[:, 0]           # width
    dirs[3] = 0.012 * radial                        # girth everywhere
    for vi in range(V):
        p = part[vi]
        if p in legs:
            dirs[4][vi, 1] = -0.045 * leg_depth[p]  # leg length
        if p in arms:
            sx = 1.0 if template[vi, 0] >= 0 else -1.0
            dirs[5][vi, 0] = sx * 0.04 * arm_depth[p]  # arm length
        if p in torso:
            dirs[6][vi, 2] = 0.45 * template[vi, 2]    # torso depth
        if p == 15:
            dirs[7][vi] = 0.45 * (template[vi] - axes[15][0])  # head size
        if p in arms or p in (13, 14):
            sx = 1.0 if template[vi, 0] >= 0 else -1.0
            dirs[8][vi, 0] = sx * 0.035                # shoulder width
        if p in (3, 6):
            dirs[9][vi] = 0.035 * radial[vi]           # belly girth
    return dirs


# ---------------------------------------------------------------------------
# posing


def rodrigues_batch(r):
    """Axis-angle (N, 3) Tensor -> rotation matrices (N, 3, 3) Tensor.

    Uses R = I + f1 K + f2 K^2 with f1 = sin t / t, f2 = (1 - cos t) / t^2.
    Near t = 0 both factors switch to Taylor forms, and the where-branches
    are fed a guarded t^2 so no NaN leaks through the non-selected branch
    in either the value or the gradient.
    """
    n = r.shape[0]
    theta2 = nc.sum_(nc.square(r), axis=1)
    small = theta2.data < 1e-16
    safe2 = nc.where(small, nc.Tensor(np.ones(n)), theta2)
    t = nc.sqrt(safe2)
    f1 = nc.where(small, 1.0 - theta2 / 6.0, nc.div(nc.sin(t), t))
    f2 = nc.where(small, 0.5 - theta2 / 24.0, nc.div(1.0 - nc.cos(t), safe2))

    x = nc.gather(r, np.array([0]), axis=1)
    y = nc.gather(r, np.array([1]), axis=1)
    z = nc.gather(r, np.array([2]), axis=1)
    zero = nc.Tensor(np.zeros((n, 1)))
    row0 = nc.concat([zero, nc.neg(z), y], axis=1)
    row1 = nc.concat([z, zero, nc.neg(x)], axis=1)
    row2 = nc.concat([nc.neg(y), x, zero], axis=1)
    K = nc.stack([row0, row1, row2], axis=1)
    K2 = nc.matmul(K, K)

    eye = nc.Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)).copy())
    f1b = nc.reshape(f1, (n, 1, 1))
    f2b = nc.reshape(f2, (n, 1, 1))
    return nc.add(eye, nc.add(nc.mul(f1b, K), nc.mul(f2b, K2)))


def forward_batch(model, theta, beta):
    """Differentiable pose: Tensors (B, 24, 3), (B, 10) -> verts (B, V, 3),
    joints (B, 24, 3)."""
    theta = theta if isinstance(theta, nc.Tensor) else nc.Tensor(theta)
    beta = beta if isinstance(beta, nc.Tensor) else nc.Tensor(beta)
    if theta.ndim != 3 or theta.shape[1:] != (N_JOINTS, 3):
        raise nc.ShapeError("forward_batch: theta must be (B, 24, 3), got %r" % (theta.shape,))
    if beta.ndim != 2 or beta.shape[1] != N_SHAPE:
        raise nc.ShapeError("forward_batch: beta must be (B, 10), got %r" % (beta.shape,))
    b = theta.shape[0]
    V = model.n_verts

    offsets = nc.matmul(beta, nc.Tensor(model._shapedirs_flat))
    v_rest = nc.add(nc.Tensor(model.template), nc.reshape(offsets, (b, V, 3)))
    j_rest = nc.matmul(nc.Tensor(model.joint_regressor), v_rest)

    R = rodrigues_batch(nc.reshape(theta, (b * N_JOINTS, 3)))
    R = nc.reshape(R, (b, N_JOINTS, 3, 3))

    # kinematic chain kept as (rotation, translation) pairs per joint
    world_R = [None] * N_JOINTS
    world_t = [None] * N_JOINTS
    rest_cols = []
    for j in range(N_JOINTS):
        jr = nc.gather(j_rest, np.array([j]), axis=1)        # (B, 1, 3)
        rest_cols.append(nc.transpose(jr, (0, 2, 1)))        # (B, 3, 1)
    for j in range(N_JOINTS):
        Rj = nc.reshape(nc.gather(R, np.array([j]), axis=1), (b, 3, 3))
        p = model.parents[j]
        if p < 0:
            world_R[j] = Rj
            world_t[j] = rest_cols[j]
        else:
            off = nc.sub(rest_cols[j], rest_cols[p])
            world_R[j] = nc.matmul(world_R[p], Rj)
            world_t[j] = nc.add(world_t[p], nc.matmul(world_R[p], off))

    joints = nc.reshape(nc.concat(world_t, axis=2), (b, 3, N_JOINTS))
    joints = nc.transpose(joints, (0, 2, 1))

    # skinning transforms relative to the rest pose
    skin_R = nc.stack(world_R, axis=1)                       # (B, 24, 3, 3)
    skin_t = []
    for j in range(N_JOINTS):
        skin_t.append(nc.sub(world_t[j], nc.matmul(world_R[j], rest_cols[j])))
    skin_t = nc.reshape(nc.concat(skin_t, axis=2), (b, 3, N_JOINTS))
    skin_t = nc.transpose(skin_t, (0, 2, 1))                 # (B, 24, 3)

    Wmat = nc.Tensor(model.skin_weights)                     # (V, 24)
    TR = nc.matmul(Wmat, nc.reshape(skin_R, (b, N_JOINTS, 9)))
    TR = nc.reshape(TR, (b, V, 3, 3))
    Tt = nc.matmul(Wmat, skin_t)                             # (B, V, 3)
    v_col = nc.reshape(v_rest, (b, V, 3, 1))
    verts = nc.add(nc.reshape(nc.matmul(TR, v_col), (b, V, 3)), Tt)
    return verts, joints


def forward(model, pose):
    """Convenience single pose -> plain arrays (V, 3), (24, 3)."""
    with nc.no_grad():
        v, j = forward_batch(model, pose.theta[None], pose.beta[None])
    return v.data[0], j.data[0]


def project_batch(joints_3d, cam):
    """Weak perspective: (B, J, 3) Tensor, cam (B, 3) Tensor -> (B, J, 2)."""
    joints_3d = joints_3d if isinstance(joints_3d, nc.Tensor) else nc.Tensor(joints_3d)
    cam = cam if isinstance(cam, nc.Tensor) else nc.Tensor(cam)
    b = cam.shape[0]
    xy = nc.gather(joints_3d, np.array([0, 1]), axis=2)
    s = nc.reshape(nc.gather(cam, np.array([0]), axis=1), (b, 1, 1))
    t = nc.reshape(nc.gather(cam, np.array([1, 2]), axis=1), (b, 1, 2))
    return nc.add(nc.mul(xy, s), t)


def project(joints_3d, cam):
    """Single set of joints (J, 3) with a Camera -> (J, 2) array."""
    with nc.no_grad():
        out = project_batch(np.asarray(joints_3d)[None], cam.as_array()[None])
    return out.data[0]


# ---------------------------------------------------------------------------
# serialization


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(MAGIC_BODY)
        V = model.n_verts
        F = model.faces.shape[0]
        f.write(struct.pack("<4I", V, N_SHAPE, N_JOINTS, F))
        f.write(model.parents.astype("<i4").tobytes())
        f.write(model.faces.astype("<u4").tobytes())
        f.write(model.vertex_part.astype("<u2").tobytes())
        f.write(model.template.astype("<f8").tobytes())
        f.write(model.shapedirs.astype("<f8").tobytes())
        f.write(model.joint_regressor.astype("<f8").tobytes())
        f.write(model.skin_weights.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC_BODY))
        if magic != MAGIC_BODY:
            raise ValueError("not a body model file: bad magic %r" % magic)
        V, ns, nj, F = struct.unpack("<4I", f.read(16))
        if ns != N_SHAPE or nj != N_JOINTS:
            raise ValueError("unsupported body dimensions: %d shapes, %d joints" % (ns, nj))

        def arr(dtype, count, shape):
            n = np.dtype(dtype).itemsize * count
            buf = f.read(n)
            if len(buf) != n:
                raise ValueError("truncated body model file")
            return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()

        parents = arr("<i4", nj, (nj,))
        faces = arr("<u4", F * 3, (F, 3))
        vertex_part = arr("<u2", V, (V,))
        template = arr("<f8", V * 3, (V, 3))
        shapedirs = arr("<f8", ns * V * 3, (ns, V, 3))
        joint_regressor = arr("<f8", nj * V, (nj, V))
        skin_weights = arr("<f8", V * nj, (V, nj))
    return BodyModel(
        template=template,
        shapedirs=shapedirs,
        joint_regressor=joint_regressor,
        skin_weights=skin_weights,
        parents=parents.astype(np.int32),
        faces=faces,
        vertex_part=vertex_part,
    )
