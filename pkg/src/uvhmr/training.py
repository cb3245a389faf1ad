"""Dataset synthesis and the two-stage training schedule.

Stage 1 trains the pipeline on clean renders with parameter and keypoint
losses.  Stage 2 fine-tunes with paired inputs: each sample is forwarded
clean (gradient-free, giving target part features) and occluded, and a
similarity loss pulls the occluded features toward the clean ones while
the task losses keep supervising the occluded branch.

Everything is deterministic in (config, seed): dataset bytes, batch
order, augmentation draws, and final checkpoint bytes.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from . import featurepipe as fp
from . import iuvrender as ir
from . import losses as ls
from . import numcore as nc

SPLITS = ("train", "val", "test_clean", "test_object", "test_person")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}
_MAX_OCCLUSION_TRIES = 20

# zoom-out border filled with the renderer's mean background level
BG_FILL = ir.BG_LEVEL + 0.5 * ir.BG_AMPLITUDE
STAGE1_STREAM = 101         # rng stream tags, keep stages decorrelated
STAGE2_STREAM = 202


@dataclass
class TrainConfig:
    seed: int = 0
    n_train: int = 2048
    n_val: int = 256
    n_test: int = 64                    # per test split
    image_size: int = 48
    uv_resolution: int = 16
    feat_dim: int = 16
    n_parts: int = 24
    t_iters: int = 3
    batch_size: int = 8
    stage1_iters: int = 3000
    stage2_iters: int = 1000
    lr: float = 1e-3
    stage2_lr: float = 1e-4
    aug_zoom: float = 0.1               # zoom factor drawn from [1-z, 1+z]
    aug_noise: float = 0.02             # per-channel gaussian sigma
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    occluder: ir.OccluderSpec = field(default_factory=ir.OccluderSpec)
    variant: str = "full"
    inpaint_sim: bool = True            # stage 2: include the similarity term

    def __post_init__(self):
        if self.image_size % fp.ENCODER_STRIDE:
            raise ValueError("image_size must be divisible by %d, got %d"
                             % (fp.ENCODER_STRIDE, self.image_size))
        for name in ("n_train", "n_val", "n_test", "batch_size", "t_iters"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be > 0, got %r" % (name, getattr(self, name)))
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")

    def pipeline_config(self):
        return fp.canonical_config(fp.PipelineConfig(
            feat_dim=self.feat_dim,
            n_parts=self.n_parts,
            uv_resolution=self.uv_resolution,
            t_iters=self.t_iters,
            variant=self.variant,
        ))


def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(d):
    d = dict(d)
    d["weights"] = ls.LossWeights(**d["weights"])
    occ = dict(d["occluder"])
    occ["size_range"] = tuple(occ["size_range"])
    d["occluder"] = ir.OccluderSpec(**occ)
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# synthesis


def sample_pose_camera(rng):
    """Joint angles uniform per component, upright body, mild camera jitter."""
    theta = rng.uniform(-0.6, 0.6, (24, 3))
    theta[0] = (0.0, rng.uniform(-np.pi, np.pi), 0.0)
    beta = rng.uniform(-2.0, 2.0, 10)
    cam = bm.Camera(s=rng.uniform(0.7, 1.1),
                    tx=rng.uniform(-0.1, 0.1),
                    ty=rng.uniform(-0.1, 0.1))
    return bm.Pose(theta=theta, beta=beta), cam


def synthesize_pair(model, atlas, cfg, split, index):
    """One deterministic sample plus its unoccluded base.

    For the clean splits the two are the same object.  Occluded splits
    retry occluder placement until the body is actually hit.
    """
    rng = np.random.default_rng([cfg.seed, _SPLIT_IDS[split], index])
    pose, cam = sample_pose_camera(rng)
    n = cfg.image_size
    base = ir.render_sample(model, atlas, pose, cam, n, n,
                            seed=int(rng.integers(2 ** 31)))
    if split == "test_object":
        for _ in range(_MAX_OCCLUSION_TRIES):
            occ, _ = ir.apply_occlusion(base, cfg.occluder,
                                        seed=int(rng.integers(2 ** 31)))
            if occ.occluded_fraction > 0.0:
                return occ, base
        raise RuntimeError(
            "no occluder hit the body in %d tries for %s sample %d; "
            "check the occluder size range" % (_MAX_OCCLUSION_TRIES, split, index)
        )
    if split == "test_person":
        for _ in range(_MAX_OCCLUSION_TRIES):
            pose2, cam2 = sample_pose_camera(rng)
            front = ir.render_sample(model, atlas, pose2, cam2, n, n,
                                     seed=int(rng.integers(2 ** 31)), z_offset=2.0)
            merged, _ = ir.overlap_person(base, front)
            if merged.occluded_fraction > 0.0:
                return merged, base
        raise RuntimeError(
            "no overlapping person occluded the body in %d tries for %s sample %d"
            % (_MAX_OCCLUSION_TRIES, split, index)
        )
    return base, base


def synthesize_sample(model, atlas, cfg, split, index):
    return synthesize_pair(model, atlas, cfg, split, index)[0]


def _labels_dict(sample):
    return {
        "theta": sample.pose.theta.tolist(),
        "beta": sample.pose.beta.tolist(),
        "cam": [sample.cam.s, sample.cam.tx, sample.cam.ty],
        "joints_3d": sample.joints_3d.tolist(),
        "joints_2d": sample.joints_2d.tolist(),
        "occluded_fraction": sample.occluded_fraction,
        "seed": sample.seed,
    }


def synthesize_dataset(cfg, root):
    """Render every split to disk; same config gives byte-identical trees."""
    root = Path(root)
    model = bm.build_default_model()
    pcfg = cfg.pipeline_config()
    atlas = fp.build_atlas(model, pcfg.atlas_layout, pcfg.atlas_seed)
    counts = {"train": cfg.n_train, "val": cfg.n_val,
              "test_clean": cfg.n_test, "test_object": cfg.n_test,
              "test_person": cfg.n_test}
    try:
        root.mkdir(parents=True, exist_ok=True)
        for split, n in counts.items():
            d = root / split
            d.mkdir(exist_ok=True)
            for i in range(n):
                sample = synthesize_sample(model, atlas, cfg, split, i)
                stem = d / ("%06d" % i)
                ir.write_ppm(sample.image, stem.with_suffix(".ppm"))
                ir.write_iuv(sample.iuv, stem.with_suffix(".iuv"))
                with open(stem.with_suffix(".json"), "w") as f:
                    json.dump(_labels_dict(sample), f, sort_keys=True)
        manifest = {
            "format": 1,
            "config": config_to_dict(cfg),
            "atlas_layout": pcfg.atlas_layout,
            "atlas_seed": pcfg.atlas_seed,
            "splits": counts,
        }
        with open(root / "manifest.json", "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=1)
    except OSError as e:
        raise OSError("dataset write failed under %s: %s" % (root, e)) from e
    return root


# ---------------------------------------------------------------------------
# loading


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError("no dataset manifest at %s" % path)
    with open(path) as f:
        return json.load(f)


def check_dataset(cfg, root):
    """Fail loudly when a dataset was synthesized for a different geometry."""
    man = load_manifest(root)
    stored = man["config"]
    pcfg = cfg.pipeline_config()
    checks = {
        "seed": (stored["seed"], cfg.seed),
        "n_train": (stored["n_train"], cfg.n_train),
        "n_test": (stored["n_test"], cfg.n_test),
        "image_size": (stored["image_size"], cfg.image_size),
        "atlas_layout": (man["atlas_layout"], pcfg.atlas_layout),
        "atlas_seed": (man["atlas_seed"], pcfg.atlas_seed),
    }
    for name, (got, want) in checks.items():
        if got != want:
            raise ValueError(
                "dataset at %s was built with %s=%r but the run wants %r"
                % (root, name, got, want)
            )
    return man


def load_sample(root, split, index):
    stem = Path(root) / split / ("%06d" % index)
    image = ir.read_ppm(stem.with_suffix(".ppm"))
    iuv = ir.read_iuv(stem.with_suffix(".iuv"))
    with open(stem.with_suffix(".json")) as f:
        lab = json.load(f)
    return ir.RenderedSample(
        image=image,
        iuv=iuv,
        pose=bm.Pose(theta=np.array(lab["theta"]), beta=np.array(lab["beta"])),
        cam=bm.Camera(*lab["cam"]),
        seed=lab["seed"],
        joints_3d=np.array(lab["joints_3d"]),
        joints_2d=np.array(lab["joints_2d"]),
        occluded_fraction=lab["occluded_fraction"],
    )


def load_split(root, split, n, downscale=False):
    """Samples, plus cached downscaled correspondence maps when asked.

    The cache only helps consumers that forward samples unmodified
    (stage-2 clean branch, evaluation); augmented or occluded copies
    must re-downscale.
    """
    samples = [load_sample(root, split, i) for i in range(n)]
    smalls = [fp.downscale_iuv(s.iuv) for s in samples] if downscale else None
    return samples, smalls


# ---------------------------------------------------------------------------
# augmentation


def _zoom_indices(n, z):
    src = (np.arange(n) + 0.5 - n / 2.0) / z + n / 2.0
    idx = np.floor(src).astype(np.int64)
    valid = (idx >= 0) & (idx < n)
    return np.clip(idx, 0, n - 1), valid


def augment_sample(sample, rng, zoom, noise):
    """Center zoom with consistent relabeling, then channel noise.

    Always draws the same number of random values so the training stream
    stays aligned across samples.  Returns a relabeled RenderedSample.
    """
    z = rng.uniform(1.0 - zoom, 1.0 + zoom)
    eta = rng.normal(0.0, 1.0, sample.image.shape)
    h, w = sample.iuv.part.shape
    ri, rv = _zoom_indices(h, z)
    ci, cv = _zoom_indices(w, z)
    inside = rv[:, None] & cv[None, :]

    img = sample.image[:, ri[:, None], ci[None, :]].copy()
    img[:, ~inside] = BG_FILL
    if noise > 0.0:
        img = np.clip(img + noise * eta, 0.0, 1.0)
    part = sample.iuv.part[ri[:, None], ci[None, :]].copy()
    u = sample.iuv.u[ri[:, None], ci[None, :]].copy()
    v = sample.iuv.v[ri[:, None], ci[None, :]].copy()
    part[~inside] = 0
    u[~inside] = 0.0
    v[~inside] = 0.0

    cam = replace(sample.cam, s=z * sample.cam.s,
                  tx=z * sample.cam.tx, ty=z * sample.cam.ty)
    return replace(
        sample,
        image=img,
        iuv=ir.IUVImage(part=part, u=u, v=v),
        cam=cam,
        joints_2d=z * sample.joints_2d,
        depth=None,
    )


# ---------------------------------------------------------------------------
# loss plumbing


def sample_losses(pipe, model, sample, iuv_small=None):
    """Forward one sample and return (output, l_smpl, l_3d, l_2d)."""
    out, _ = fp.forward_sample(pipe, sample.image, sample.iuv, iuv_small=iuv_small)
    th, be, camv = fp.split_param_vector(out.params)
    _, joints = bm.forward_batch(model, nc.reshape(th, (1, 24, 3)),
                                 nc.reshape(be, (1, 10)))
    j3 = nc.reshape(joints, (24, 3))
    j2 = nc.reshape(bm.project_batch(joints, nc.reshape(camv, (1, 3))), (24, 2))
    l_smpl = ls.smpl_loss(th, be, sample.pose.theta, sample.pose.beta)
    l3, l2 = ls.keypoint_losses(j3, j2, sample.joints_3d, sample.joints_2d)
    return out, l_smpl, l3, l2


def batch_losses(pipe, model, batch, smalls=None):
    """Minibatch task losses with one batched body pass.

    Matches the mean of the per-sample sample_losses values up to
    floating-point summation order; every loss averages over the same
    per-sample element count, so samples stay equally weighted.  One
    skinning call instead of B keeps the tape a fraction of the length.
    """
    outs, ths, bes, cams = [], [], [], []
    for i, s in enumerate(batch):
        out, _ = fp.forward_sample(pipe, s.image, s.iuv,
                                   iuv_small=None if smalls is None else smalls[i])
        outs.append(out)
        th, be, camv = fp.split_param_vector(out.params)
        ths.append(th)
        bes.append(be)
        cams.append(camv)
    b = len(batch)
    th_b, be_b = nc.stack(ths), nc.stack(bes)
    _, joints = bm.forward_batch(model, th_b, be_b)        # (B, 24, 3)
    j2 = bm.project_batch(joints, nc.stack(cams))          # (B, 24, 2)

    gt_th = np.stack([s.pose.theta for s in batch]).reshape(b * 24, 3)
    gt_be = np.stack([s.pose.beta for s in batch])
    gt_j3 = np.stack([s.joints_3d for s in batch])
    gt_j2 = np.stack([s.joints_2d for s in batch])

    dr = nc.sub(bm.rodrigues_batch(nc.reshape(th_b, (b * 24, 3))),
                bm.rodrigues_batch(gt_th))
    flat = nc.concat([nc.reshape(dr, (b * 24 * 9,)),
                      nc.reshape(nc.sub(be_b, gt_be), (b * 10,))])
    l_smpl = nc.mean(nc.square(flat))

    root = np.array([ls.ROOT_JOINT])
    pc = nc.sub(joints, nc.gather(joints, root, axis=1))
    gc = gt_j3 - gt_j3[:, root]
    l3 = nc.mean(nc.square(nc.sub(pc, gc)))
    l2 = nc.mean(nc.square(nc.sub(j2, gt_j2)))
    return outs, l_smpl, l3, l2


def _mean(parts):
    total = parts[0]
    for p in parts[1:]:
        total = nc.add(total, p)
    return nc.mul(1.0 / len(parts), total)


def _finite_or_raise(stage, it, comps):
    vals = {k: float(v) for k, v in comps.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        detail = ", ".join("%s=%g" % kv for kv in sorted(vals.items()))
        raise FloatingPointError(
            "%s iteration %d produced a non-finite loss (%s)" % (stage, it, detail)
        )


class _Logger:
    def __init__(self, path):
        self.f = open(path, "w") if path else None

    def write(self, record):
        if self.f:
            json.dump(record, self.f, sort_keys=True)
            self.f.write("\n")

    def close(self):
        if self.f:
            self.f.close()


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(cfg, dataset_root, out_dir):
    """Clean-data training; writes checkpoint and JSON-lines log, returns a
    summary dict.  stage1_iters=0 saves the untouched initialization, which
    serves as the mean-pose baseline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    check_dataset(cfg, dataset_root)
    model = bm.build_default_model()
    pipe = fp.build_pipeline(cfg.pipeline_config(), model, init_seed=cfg.seed)
    samples, _ = load_split(dataset_root, "train", cfg.n_train)
    opt = nc.AdamState(pipe.params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, STAGE1_STREAM])
    log = _Logger(out_dir / "stage1_log.jsonl")
    first = final = None
    t_start = time.perf_counter()
    try:
        for it in range(cfg.stage1_iters):
            t0 = time.perf_counter()
            idx = rng.integers(0, cfg.n_train, cfg.batch_size)
            batch = [augment_sample(samples[i], rng, cfg.aug_zoom, cfg.aug_noise)
                     for i in idx]
            try:
                with nc.Tape() as tape:
                    _, l_smpl, l3, l2 = batch_losses(pipe, model, batch)
                    total = ls.total_loss(l_smpl, l3, l2, weights=cfg.weights)
            except FloatingPointError as e:
                raise FloatingPointError("stage-1 iteration %d: %s" % (it, e)) from e
            comps = {"L_smpl": l_smpl.item(), "L_3d": l3.item(),
                     "L_2d": l2.item(), "L_sim": 0.0, "L_total": total.item()}
            _finite_or_raise("stage-1", it, comps)
            nc.adam_step(pipe.params, tape.gradients(total), opt)
            log.write(dict(comps, iter=it,
                           wall_ms=(time.perf_counter() - t0) * 1000.0))
            final = comps["L_total"]
            if first is None:
                first = final
    finally:
        log.close()
    ckpt = out_dir / "stage1.ckpt"
    fp.save_checkpoint(ckpt, pipe.params, pipe.config,
                       extra={"stage": 1, "iterations": cfg.stage1_iters,
                              "train_config": config_to_dict(cfg)})
    return {"checkpoint": str(ckpt), "log": str(out_dir / "stage1_log.jsonl"),
            "iterations": cfg.stage1_iters, "first_loss": first,
            "final_loss": final, "wall_s": time.perf_counter() - t_start}


# ---------------------------------------------------------------------------
# stage 2


def occluded_copy(sample, spec, seed):
    occ, _ = ir.apply_occlusion(sample, spec, seed)
    return occ


def train_stage2_inpaint(cfg, checkpoint, dataset_root, out_dir):
    """Parallel fine-tuning from a stage-1 checkpoint.

    Per step each drawn sample is forwarded twice: the clean version under
    no_grad (its part features become similarity targets) and an occluded
    copy on the tape.  Task losses read the occluded branch; the clean
    branch steers optimization only through those frozen targets, and only
    when cfg.inpaint_sim is set (off = plain occlusion augmentation).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    check_dataset(cfg, dataset_root)
    model = bm.build_default_model()
    pipe, _ = fp.pipeline_from_checkpoint(checkpoint, model)
    if pipe.config != cfg.pipeline_config():
        raise ValueError(
            "checkpoint %s was trained with %r, run config wants %r"
            % (checkpoint, pipe.config, cfg.pipeline_config())
        )
    samples, smalls = load_split(dataset_root, "train", cfg.n_train,
                                 downscale=True)
    opt = nc.AdamState(pipe.params, lr=cfg.stage2_lr)
    rng = np.random.default_rng([cfg.seed, STAGE2_STREAM])
    log = _Logger(out_dir / "stage2_log.jsonl")
    first = final = None
    t_start = time.perf_counter()
    try:
        for it in range(cfg.stage2_iters):
            t0 = time.perf_counter()
            idx = rng.integers(0, cfg.n_train, cfg.batch_size)
            occ_batch = [occluded_copy(samples[i], cfg.occluder,
                                       int(rng.integers(2 ** 31)))
                         for i in idx]
            phi_targets = None
            if cfg.inpaint_sim:
                with nc.no_grad():
                    phi_targets = [
                        fp.forward_sample(pipe, samples[i].image, samples[i].iuv,
                                          iuv_small=smalls[i])[0].phi.data
                        for i in idx
                    ]
            try:
                with nc.Tape() as tape:
                    outs, l_smpl, l3, l2 = batch_losses(pipe, model, occ_batch)
                    l_sim = None
                    if cfg.inpaint_sim:
                        l_sim = _mean([ls.sim_loss(out.phi, phi_targets[k])
                                       for k, out in enumerate(outs)])
                    total = ls.total_loss(l_smpl, l3, l2, l_sim, weights=cfg.weights)
            except FloatingPointError as e:
                raise FloatingPointError("stage-2 iteration %d: %s" % (it, e)) from e
            comps = {"L_smpl": l_smpl.item(), "L_3d": l3.item(), "L_2d": l2.item(),
                     "L_sim": l_sim.item() if l_sim is not None else 0.0,
                     "L_total": total.item()}
            _finite_or_raise("stage-2", it, comps)
            nc.adam_step(pipe.params, tape.gradients(total), opt)
            log.write(dict(comps, iter=it,
                           wall_ms=(time.perf_counter() - t0) * 1000.0))
            final = comps["L_total"]
            if first is None:
                first = final
    finally:
        log.close()
    ckpt = out_dir / "stage2.ckpt"
    fp.save_checkpoint(ckpt, pipe.params, pipe.config,
                       extra={"stage": 2, "iterations": cfg.stage2_iters,
                              "inpaint_sim": cfg.inpaint_sim,
                              "train_config": config_to_dict(cfg)})
    return {"checkpoint": str(ckpt), "log": str(out_dir / "stage2_log.jsonl"),
            "iterations": cfg.stage2_iters, "first_loss": first,
            "final_loss": final, "wall_s": time.perf_counter() - t_start}
