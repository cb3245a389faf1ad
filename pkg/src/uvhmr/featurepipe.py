"""Learnable pipeline from image to body parameters.

Four stages: a small strided encoder producing an image feature map at
1/8 resolution, a scatter of those features into UV texel space guided
by the per-pixel correspondence map, an attention-based completion that
reads one feature vector per body part out of the (partially empty) UV
map, and an iterative regressor that refines a flat parameter vector
[rotations 72, shape 10, scale 1, translation 2].

Each named ablation variant disables one design element, except the
avgpool variant, which stacks the masked-mean readout on top of the
pooling trunk to mirror the weakest published completion setting.

All learnable state lives in a flat name -> Tensor dict so checkpoints
are a plain named-array table.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor
from .iuvrender import IUVImage
from .uvatlas import build_atlas, build_grid, ownership

MAGIC_CKPT = b"DIMRCKPT1"

ENCODER_STRIDE = 8
N_PARAMS = 85           # 72 joint rotations + 10 shape + scale + 2 translation
HIDDEN = 256

THETA_SLICE = slice(0, 72)
BETA_SLICE = slice(72, 82)
CAM_SLICE = slice(82, 85)

VARIANTS = (
    "full",
    "raw_image_wrap",         # wrap the pooled raw image instead of features
    "image_grid_completion",  # no wrap; correspondence channels on the image grid
    "randomized_atlas",       # shuffled chart placement, same computation
    "masked_mean",            # per-part masked mean instead of attention
    "avgpool_completion",     # avg pooling instead of convs, and no attention
)

# variants whose readout is the constant per-part masked mean
MEAN_READOUT_VARIANTS = ("masked_mean", "avgpool_completion")

# a randomized layout that passes the packing check for the default model
DEFAULT_RANDOM_ATLAS_SEED = 2


@dataclass
class PipelineConfig:
    feat_dim: int = 32        # D, encoder output channels
    n_parts: int = 24         # P
    uv_resolution: int = 32   # R, texels per UV map side
    t_iters: int = 3          # regressor refinement steps
    variant: str = "full"
    atlas_layout: str = "neighboring"
    atlas_seed: int = 0


@dataclass
class UVFeatureMap:
    f_uv: Tensor              # (D, R, R), zero at texels never written
    validity: np.ndarray      # (R, R) bool, texel received at least one write


@dataclass
class PartFeatureSet:
    phi: Tensor               # (P, D)
    global_feature: Tensor    # (D,)
    params: Tensor            # (85,) final estimate


@dataclass
class Pipeline:
    config: PipelineConfig
    atlas: object
    grid: object
    params: dict
    # constant (P, (R/4)^2) row-stochastic readout for the masked-mean
    # variant; rows of parts owning no texel fall back to the global mean
    masked_mean_weights: np.ndarray = field(default=None, repr=False)


def init_param_vector():
    """Mean-pose starting point: zero rotations and shape, scale 0.9."""
    v = np.zeros(N_PARAMS)
    v[82] = 0.9
    return v


def split_param_vector(vec):
    """Split an (85,) parameter Tensor into (theta (24,3), beta, cam)."""
    th = nc.reshape(nc.gather(vec, np.arange(72)), (24, 3))
    be = nc.gather(vec, np.arange(72, 82))
    cam = nc.gather(vec, np.arange(82, 85))
    return th, be, cam


# ---------------------------------------------------------------------------
# parameters


def _completion_in_channels(config):
    if config.variant == "raw_image_wrap":
        return 3
    if config.variant == "image_grid_completion":
        return config.feat_dim + 3
    return config.feat_dim


def init_pipeline_params(config, seed=0):
    """He-initialized parameter table; the final regressor layer starts at
    zero so the first estimate equals the initialization."""
    rng = np.random.default_rng(seed)
    params = {}

    def conv(name, o, c, k):
        std = np.sqrt(2.0 / (c * k * k))
        params[name + ".w"] = Tensor(rng.normal(0.0, std, (o, c, k, k)),
                                     requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(o), requires_grad=True)

    def fc(name, o, i, zero=False):
        w = np.zeros((o, i)) if zero else rng.normal(0.0, np.sqrt(2.0 / i), (o, i))
        params[name + ".w"] = Tensor(w, requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(o), requires_grad=True)

    d, p = config.feat_dim, config.n_parts
    conv("enc.c1", 16, 3, 3)
    conv("enc.c2", 32, 16, 3)
    conv("enc.c3", d, 32, 3)
    conv("enc.c4", d, d, 3)
    if config.variant != "avgpool_completion":
        conv("comp.c1", d, _completion_in_channels(config), 3)
        conv("comp.c2", d, d, 3)
    if config.variant not in MEAN_READOUT_VARIANTS:
        conv("comp.attn", p, d, 1)
        conv("comp.value", d, d, 1)
    fc("reg.fc1", HIDDEN, p * d + d + N_PARAMS)
    fc("reg.fc2", HIDDEN, HIDDEN)
    fc("reg.out", N_PARAMS, HIDDEN, zero=True)
    return params


def build_pipeline(config, model, init_seed=0):
    """Wire atlas, texel grid, and fresh parameters for one config."""
    if config.variant not in VARIANTS:
        raise ValueError(
            "unknown pipeline variant %r, expected one of %r"
            % (config.variant, VARIANTS)
        )
    atlas = build_atlas(model, config.atlas_layout, config.atlas_seed)
    grid = build_grid(atlas, config.uv_resolution)
    pipe = Pipeline(
        config=config,
        atlas=atlas,
        grid=grid,
        params=init_pipeline_params(config, init_seed),
    )
    if config.variant in MEAN_READOUT_VARIANTS:
        r4 = config.uv_resolution // 4
        own = ownership(atlas, r4).ravel()
        m = np.zeros((config.n_parts, r4 * r4))
        for i in range(config.n_parts):
            sel = own == i + 1
            if sel.any():
                m[i, sel] = 1.0 / sel.sum()
            else:
                m[i, :] = 1.0 / (r4 * r4)
        pipe.masked_mean_weights = m
    return pipe


def canonical_config(config):
    """Resolve a variant's implied atlas choice.

    The randomized-atlas variant left at the default neighboring layout
    gets the canonical shuffled layout swapped in; every other config is
    returned verbatim, so explicit layout choices stay reproducible and a
    randomized-atlas config pinned to the neighboring layout reproduces
    the full pipeline's computation exactly.
    """
    if config.variant not in VARIANTS:
        raise ValueError(
            "unknown pipeline variant %r, expected one of %r"
            % (config.variant, VARIANTS)
        )
    if config.variant == "randomized_atlas" and config.atlas_layout == "neighboring":
        return replace(config, atlas_layout="randomized",
                       atlas_seed=DEFAULT_RANDOM_ATLAS_SEED)
    return config


def ablation_variants(config, model, init_seed=0):
    """Build the pipeline the config's variant names, atlas included."""
    return build_pipeline(canonical_config(config), model, init_seed)


# ---------------------------------------------------------------------------
# stages


def encode(params, image):
    """Strided feature extraction: 3 halving blocks and one preserving
    block, channels 3 -> 16 -> 32 -> D, output at 1/8 resolution."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, float))
    single = x.ndim == 3
    if single:
        x = nc.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError("encode: expected (3, H, W) image, got %r" % (image.shape,))
    h, w = x.shape[2], x.shape[3]
    if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
        raise ValueError(
            "encode: spatial size %dx%d not divisible by %d" % (h, w, ENCODER_STRIDE)
        )
    y = nc.relu(nc.strided_conv2d(x, params["enc.c1.w"], params["enc.c1.b"]))
    y = nc.relu(nc.strided_conv2d(y, params["enc.c2.w"], params["enc.c2.b"]))
    y = nc.relu(nc.strided_conv2d(y, params["enc.c3.w"], params["enc.c3.b"]))
    y = nc.relu(nc.conv2d(y, params["enc.c4.w"], params["enc.c4.b"]))
    if single:
        y = nc.reshape(y, y.shape[1:])
    return y


def downscale_iuv(iuv, factor=ENCODER_STRIDE):
    """Reduce a correspondence map to the feature grid.

    Nearest-neighbor on the part id: the block-center pixel decides each
    cell, so thin structures survive where a block-majority vote would
    drown them in background.  u, v are the area mean over the block's
    pixels that carry the chosen id (the center pixel always matches, so
    a body cell never averages over an empty set).
    """
    h, w = iuv.part.shape
    if h % factor or w % factor:
        raise ValueError(
            "downscale_iuv: %dx%d not divisible by %d" % (h, w, factor)
        )
    hh, ww = h // factor, w // factor
    off = factor // 2
    part = iuv.part[off::factor, off::factor].copy()
    pb = iuv.part.reshape(hh, factor, ww, factor)
    ub = iuv.u.reshape(hh, factor, ww, factor)
    vb = iuv.v.reshape(hh, factor, ww, factor)
    match = pb == part[:, None, :, None]
    cnt = match.sum(axis=(1, 3))
    body = part > 0
    u = np.where(body, (ub * match).sum(axis=(1, 3)) / cnt, 0.0)
    v = np.where(body, (vb * match).sum(axis=(1, 3)) / cnt, 0.0)
    return IUVImage(part=part, u=u, v=v)


def wrap(f_img, iuv_small, grid):
    """Scatter feature cells onto their UV texels, averaging collisions.

    f_img: (C, H', W') Tensor; iuv_small: correspondence map at the same
    H' x W'; grid supplies the texel resolution R.  A cell with part 0
    contributes nothing.  Each contributing cell lands on the texel
    (floor(u R), floor(v R)); texels hit more than once average their
    inputs, and the gradient routes back to every contributing cell.
    """
    f = f_img if isinstance(f_img, Tensor) else Tensor(np.asarray(f_img, float))
    if f.ndim != 3:
        raise ShapeError("wrap: f_img must be (C, H', W'), got %r" % (f.shape,))
    c, hh, ww = f.shape
    if iuv_small.part.shape != (hh, ww):
        raise ShapeError(
            "wrap: correspondence map %r does not match feature grid %r"
            % (iuv_small.part.shape, (hh, ww))
        )
    r = grid.resolution
    mask = iuv_small.part > 0
    validity = np.zeros((r, r), dtype=bool)
    if not mask.any():
        return UVFeatureMap(f_uv=Tensor(np.zeros((c, r, r))), validity=validity)

    uu = iuv_small.u[mask]
    vv = iuv_small.v[mask]
    if uu.min() < 0.0 or uu.max() > 1.0 or vv.min() < 0.0 or vv.max() > 1.0:
        raise ValueError(
            "wrap: u, v outside [0, 1] at valid cells (u in [%g, %g], v in "
            "[%g, %g]); the correspondence map disagrees with its atlas"
            % (uu.min(), uu.max(), vv.min(), vv.max())
        )
    tu = np.minimum((uu * r).astype(np.int64), r - 1)
    tv = np.minimum((vv * r).astype(np.int64), r - 1)
    texel = tv * r + tu
    validity.ravel()[texel] = True

    cells = nc.transpose(nc.reshape(f, (c, hh * ww)))       # (H'W', C)
    src = nc.gather(cells, np.flatnonzero(mask.ravel()))    # (M, C)
    scat = nc.scatter_mean(src, texel, r * r)               # (R^2, C)
    f_uv = nc.reshape(nc.transpose(scat), (c, r, r))
    return UVFeatureMap(f_uv=f_uv, validity=validity)


def attention_readout(logits, values):
    """Spatial-softmax pooling: one vector per attention channel.

    logits: (P, h, w); values: (D, h, w).  Each channel's softmax over
    all h*w positions weights a sum of value vectors, giving (P, D),
    plus the normalized maps.
    """
    p = logits.shape[0]
    d = values.shape[0]
    hw = logits.shape[1] * logits.shape[2]
    maps = nc.softmax_over_spatial(logits)
    phi = nc.matmul(nc.reshape(maps, (p, hw)),
                    nc.transpose(nc.reshape(values, (d, hw))))
    return phi, maps


def _completion_trunk(params, x):
    """Two halving conv blocks: (1, C, R, R) -> (1, D, R/4, R/4)."""
    y = nc.relu(nc.strided_conv2d(x, params["comp.c1.w"], params["comp.c1.b"]))
    return nc.relu(nc.strided_conv2d(y, params["comp.c2.w"], params["comp.c2.b"]))


def _avgpool4(x):
    """Mean over 4x4 blocks: (1, C, R, R) -> (1, C, R/4, R/4)."""
    _, c, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeError("average pooling needs sides divisible by 4, got %r"
                         % (x.shape,))
    y = nc.reshape(x, (c, h // 4, 4, w // 4, 4))
    y = nc.mean(nc.mean(y, axis=4), axis=2)
    return nc.reshape(y, (1, c, h // 4, w // 4))


def complete(params, f_uv, n_parts):
    """Condense a UV feature map into per-part vectors.

    Two halving conv blocks summarize the map, then a 1x1 attention head
    (one channel per part) and a 1x1 value head read it out by spatial
    softmax.  Returns (phi (P, D), attention maps (P, R/4, R/4)).
    """
    x = nc.reshape(f_uv, (1,) + f_uv.shape)
    fd = _completion_trunk(params, x)
    return _head_readout(params, fd, n_parts)


def _head_readout(params, fd, n_parts):
    _, d, h, w = fd.shape
    logits = nc.conv2d(fd, params["comp.attn.w"], params["comp.attn.b"])
    values = nc.conv2d(fd, params["comp.value.w"], params["comp.value.b"])
    return attention_readout(nc.reshape(logits, (n_parts, h, w)),
                             nc.reshape(values, (d, h, w)))


def _linear(params, name, x):
    w = params[name + ".w"]
    b = params[name + ".b"]
    return nc.add(nc.matmul(w, x), nc.reshape(b, (b.shape[0], 1)))


def regress(params, phi, global_feature, init_params, t_iters):
    """Iteratively refine the parameter vector.

    Each step feeds [flattened phi, global feature, current estimate]
    through two hidden layers and adds the predicted correction.
    """
    if t_iters < 1:
        raise ValueError("regress: need at least one iteration, got %d" % t_iters)
    cur = init_params if isinstance(init_params, Tensor) else Tensor(
        np.asarray(init_params, float))
    flat_phi = nc.reshape(phi, (phi.size,))
    for _ in range(t_iters):
        x = nc.reshape(nc.concat([flat_phi, global_feature, cur]),
                       (flat_phi.size + global_feature.size + N_PARAMS, 1))
        h = nc.relu(_linear(params, "reg.fc1", x))
        h = nc.relu(_linear(params, "reg.fc2", h))
        delta = _linear(params, "reg.out", h)
        cur = nc.add(cur, nc.reshape(delta, (N_PARAMS,)))
    return cur


def _pool_image(image, factor):
    """Plain area mean of an image over factor x factor blocks."""
    c, h, w = image.shape
    return np.asarray(image, float).reshape(
        c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def forward_sample(pipe, image, iuv, iuv_small=None):
    """Run one sample through the configured pipeline.

    image: (3, H, W) array; iuv: full-resolution correspondence map of
    the same frame.  Pass iuv_small to reuse a precomputed downscale
    (training caches these).  Returns (PartFeatureSet, aux) where aux
    carries the intermediate feature map, UV map, attention, and the
    downscaled iuv actually used.
    """
    cfg = pipe.config
    img = np.asarray(image, float)
    if img.shape[1:] != iuv.part.shape:
        raise ShapeError(
            "forward_sample: image %r vs correspondence map %r"
            % (img.shape, iuv.part.shape)
        )
    f_img = encode(pipe.params, img)
    glob = nc.mean(nc.reshape(f_img, (cfg.feat_dim, f_img.shape[1] * f_img.shape[2])),
                   axis=1)
    small = downscale_iuv(iuv, ENCODER_STRIDE) if iuv_small is None else iuv_small
    if small.part.shape != f_img.shape[1:]:
        raise ShapeError(
            "forward_sample: downscaled correspondence %r vs feature grid %r"
            % (small.part.shape, f_img.shape[1:])
        )

    f_uv = None
    attention = None
    if cfg.variant == "image_grid_completion":
        chans = np.stack([small.part / cfg.n_parts, small.u, small.v])
        trunk_in = nc.concat([f_img, Tensor(chans)], axis=0)
    elif cfg.variant == "raw_image_wrap":
        f_uv = wrap(Tensor(_pool_image(img, ENCODER_STRIDE)), small, pipe.grid)
        trunk_in = f_uv.f_uv
    else:
        f_uv = wrap(f_img, small, pipe.grid)
        trunk_in = f_uv.f_uv

    x = nc.reshape(trunk_in, (1,) + trunk_in.shape)
    if cfg.variant == "avgpool_completion":
        fd = _avgpool4(x)
    else:
        fd = _completion_trunk(pipe.params, x)

    if cfg.variant in MEAN_READOUT_VARIANTS:
        d = fd.shape[1]
        n = fd.shape[2] * fd.shape[3]
        phi = nc.matmul(Tensor(pipe.masked_mean_weights),
                        nc.transpose(nc.reshape(fd, (d, n))))
    else:
        phi, attention = _head_readout(pipe.params, fd, cfg.n_parts)

    est = regress(pipe.params, phi, glob, init_param_vector(), cfg.t_iters)
    out = PartFeatureSet(phi=phi, global_feature=glob, params=est)
    aux = {
        "f_img": f_img,
        "f_uv": f_uv,
        "f_down": fd,
        "attention": attention,
        "iuv_small": small,
    }
    return out, aux


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config, extra=None):
    """Versioned named-array table with the config embedded as JSON."""
    meta = {"config": asdict(config), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC_CKPT)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode()
            arr = p.data if isinstance(p, Tensor) else np.asarray(p, float)
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf


def pipeline_from_checkpoint(path, model):
    """Rebuild a runnable Pipeline around a checkpoint's stored weights."""
    params, config, extra = load_checkpoint(path)
    pipe = build_pipeline(config, model)
    if set(params) != set(pipe.params):
        raise ValueError(
            "checkpoint parameter table does not match variant %r" % config.variant
        )
    pipe.params = params
    return pipe, extra


def load_checkpoint(path):
    """Returns (params dict, PipelineConfig, extra dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC_CKPT))
        if magic != MAGIC_CKPT:
            raise ValueError("not a checkpoint file: bad magic %r" % magic)
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, blob_len))
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        params = {}
        for _ in range(n):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack("<%dI" % ndim, _read_exact(f, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
            params[name] = Tensor(data.reshape(shape).copy(), requires_grad=True)
    config = PipelineConfig(**meta["config"])
    return params, config, meta.get("extra", {})
