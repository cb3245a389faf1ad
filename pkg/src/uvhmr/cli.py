"""Command-line surface: synthesis, training, evaluation, and demos.

Every command takes its run configuration from a flat TOML-style
``key = value`` file plus repeatable ``--set key=value`` overrides;
nested fields use dotted keys (``occluder.kind``, ``weights.sim``).
Exit codes: 0 success, 1 validation error (bad flags, bad config,
incompatible inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import colorsys
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from . import featurepipe as fp
from . import iuvrender as ir
from . import losses as ls
from . import metrics as mx
from . import numcore as nc
from . import training as tr
from . import uvatlas as ua

ABLATION_CSV_HEADER = "variant,mpjpe,pa_mpjpe,pve"


# ---------------------------------------------------------------------------
# config files


def parse_config_text(text):
    """Flat key = value lines into a nested dict.  # starts a comment."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError("config line %d: expected key = value, got %r"
                             % (ln, raw.strip()))
        key, _, val = line.partition("=")
        _assign(out, key.strip(), _parse_value(val.strip(), ln))
    return out


def _parse_value(text, ln=None):
    if not text:
        raise ValueError("config line %s: empty value" % ln)
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare string, e.g. variant = full


def _assign(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValueError("config key %r indexes into a scalar" % dotted)
    node[keys[-1]] = value


def _merge(base, updates, prefix=""):
    for k, v in updates.items():
        if k not in base:
            raise ValueError("unknown config key %r" % (prefix + k))
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def build_config(path=None, overrides=()):
    """TrainConfig from an optional file plus --set overrides."""
    d = tr.config_to_dict(tr.TrainConfig())
    updates = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ValueError("--set expects KEY=VALUE, got %r" % item)
        key, _, val = item.partition("=")
        _assign(updates, key.strip(), _parse_value(val.strip(), item))
    _merge(d, updates)
    return tr.config_from_dict(d)


def dataset_hash(root):
    """Digest over every file in a dataset tree, order-independent."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args):
    cfg = build_config(args.config, args.overrides)
    tr.synthesize_dataset(cfg, args.out)
    print("dataset %s  hash %s" % (args.out, dataset_hash(args.out)))
    return 0


def _cmd_train(args):
    cfg = build_config(args.config, args.overrides)
    res = tr.train_stage1(cfg, args.data, args.out)
    print("stage 1: %d iterations, loss %.4f -> %.4f (%.1f s)"
          % (res["iterations"], res["first_loss"], res["final_loss"],
             res["wall_s"]))
    print("checkpoint %s" % res["checkpoint"])
    return 0


def _cmd_finetune(args):
    cfg = build_config(args.config, args.overrides)
    res = tr.train_stage2_inpaint(cfg, args.checkpoint, args.data, args.out)
    print("stage 2: %d iterations, loss %.4f -> %.4f (%.1f s)"
          % (res["iterations"], res["first_loss"], res["final_loss"],
             res["wall_s"]))
    print("checkpoint %s" % res["checkpoint"])
    return 0


def _cmd_eval(args):
    splits = tuple(s for s in args.splits.split(",") if s)
    for s in splits:
        if s not in tr.SPLITS:
            raise ValueError("unknown split %r (have %s)"
                             % (s, ", ".join(tr.SPLITS)))
    report = mx.evaluate(args.checkpoint, args.data, splits=splits,
                         out_dir=args.out)
    for split, r in report["splits"].items():
        flag = "  [%d degenerate]" % r["degenerate_alignments"] \
            if r["degenerate_alignments"] else ""
        print("%-12s mpjpe %8.2f  pa-mpjpe %8.2f  pve %8.2f  (n=%d)%s"
              % (split, r["mpjpe"], r["pa_mpjpe"], r["pve"], r["n"], flag))
    print("report %s" % (Path(args.out) / "report.json"))
    return 0


def _variant_dataset(vcfg, base_data, out_dir):
    """Reuse the base dataset when the variant's atlas matches it,
    otherwise synthesize a sibling dataset (the correspondence maps bake
    in the atlas layout, so a different atlas needs different data)."""
    try:
        tr.check_dataset(vcfg, base_data)
        return base_data
    except ValueError:
        pass
    alt = Path(out_dir) / ("data-" + vcfg.variant)
    if (alt / "manifest.json").exists():
        tr.check_dataset(vcfg, alt)
        return alt
    tr.synthesize_dataset(vcfg, alt)
    return alt


def _cmd_ablate(args):
    cfg = build_config(args.config, args.overrides)
    variants = tuple(v for v in args.variants.split(",") if v)
    for v in variants:
        if v not in fp.VARIANTS:
            raise ValueError("unknown variant %r (have %s)"
                             % (v, ", ".join(fp.VARIANTS)))
    out = Path(args.out)
    rows = [ABLATION_CSV_HEADER]
    for v in variants:
        vcfg = dataclasses.replace(cfg, variant=v)
        data = _variant_dataset(vcfg, args.data, out)
        run = tr.train_stage1(vcfg, data, out / v)
        report = mx.evaluate(run["checkpoint"], data, splits=(args.split,))
        r = report["splits"][args.split]
        rows.append("%s,%r,%r,%r" % (v, r["mpjpe"], r["pa_mpjpe"], r["pve"]))
        print("%-22s mpjpe %8.2f  pa-mpjpe %8.2f  pve %8.2f"
              % (v, r["mpjpe"], r["pa_mpjpe"], r["pve"]))
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    csv_path.write_text("\n".join(rows) + "\n")
    print("table %s" % csv_path)
    return 0


def part_palette(n_parts):
    """(n_parts + 1, 3) colors, black background, hue-spread parts."""
    cols = [(0.0, 0.0, 0.0)]
    for i in range(n_parts):
        cols.append(colorsys.hsv_to_rgb(i / n_parts, 0.65,
                                        1.0 - 0.35 * (i % 2)))
    return np.array(cols)


def _demo_scene(cfg):
    model = bm.build_default_model()
    pcfg = cfg.pipeline_config()
    atlas = ua.build_atlas(model, pcfg.atlas_layout, pcfg.atlas_seed)
    return model, atlas


def _cmd_render_iuv(args):
    cfg = build_config(args.config, args.overrides)
    model, atlas = _demo_scene(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    palette = part_palette(cfg.n_parts)
    for i in range(args.n):
        sample = tr.synthesize_sample(model, atlas, cfg, "train", i)
        ir.write_ppm(sample.image, out / ("sample_%03d_image.ppm" % i))
        parts = palette[sample.iuv.part].transpose(2, 0, 1)
        ir.write_ppm(parts, out / ("sample_%03d_parts.ppm" % i))
    print("wrote %d renders to %s" % (args.n, out))
    return 0


def _cmd_wrap_demo(args):
    cfg = build_config(args.config, args.overrides)
    model, atlas = _demo_scene(cfg)
    pipe = fp.build_pipeline(cfg.pipeline_config(), model, init_seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        sample = tr.synthesize_sample(model, atlas, cfg, "test_object", i)
        with nc.no_grad():
            _, aux = fp.forward_sample(pipe, sample.image, sample.iuv)
        if aux["f_uv"] is None:
            raise ValueError("variant %r does not build a UV map" % cfg.variant)
        mask = np.repeat(aux["f_uv"].validity[None].astype(float), 3, axis=0)
        ir.write_ppm(mask, out / ("validity_%03d.ppm" % i))
        ir.write_ppm(sample.image, out / ("occluded_%03d.ppm" % i))
    print("wrote %d validity masks to %s" % (args.n, out))
    return 0


def _cmd_gradcheck(args):
    rows = run_gradcheck(tolerance=args.tolerance)
    width = max(len(name) for name, _, _ in rows)
    ok = True
    for name, err, tol in rows:
        good = err < tol
        ok &= good
        print("%-*s  %9.3e  (tol %7.1e)  %s"
              % (width, name, err, tol, "ok" if good else "FAIL"))
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# gradient audit

# Small shapes throughout: the checks perturb every tensor element (or a
# pinned sample of them for the larger compositions).


def _spot_fd(build_loss, tensor, entries, h=1e-5):
    """Central differences on selected flat entries of one tensor."""
    with nc.Tape() as tape:
        loss = build_loss()
    grad = tape.gradients(loss)[tensor]
    worst = 0.0
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in entries:
        keep = flat[idx]
        flat[idx] = keep + h
        hi = build_loss().item()
        flat[idx] = keep - h
        lo = build_loss().item()
        flat[idx] = keep
        num = (hi - lo) / (2 * h)
        den = max(abs(num), abs(gflat[idx]), 1e-8)
        worst = max(worst, abs(num - gflat[idx]) / den)
    return worst


def run_gradcheck(tolerance=1e-4):
    """Finite-difference audit of every gradient path.

    Returns (name, worst relative error, tolerance) rows; the end-to-end
    composition gets a looser bound, everything else uses `tolerance`.
    """
    rows = []
    rng = np.random.default_rng(0)
    t = lambda *shape: rng.normal(size=shape)

    def primitives(a, b, c):
        y = nc.matmul(a, b)
        z = nc.add(nc.relu(y), nc.exp(nc.mul(c, -0.5)))
        return nc.mean(nc.add(nc.square(z), nc.sqrt(nc.add(nc.square(c), 1.0))))

    rows.append(("primitives", nc.finite_difference_check(
        primitives, [t(3, 4), t(4, 2), t(3, 2)]), tolerance))

    conv_in = [t(1, 2, 6, 6), t(3, 2, 3, 3) * 0.5, t(3)]
    rows.append(("conv2d", nc.finite_difference_check(
        lambda i, k, kb: nc.mean(nc.square(nc.conv2d(i, k, kb))), conv_in),
        tolerance))
    rows.append(("strided_conv2d", nc.finite_difference_check(
        lambda i, k, kb: nc.mean(nc.square(nc.strided_conv2d(i, k, kb))),
        conv_in), tolerance))

    idx = np.array([0, 2, 0, 1, 2])
    w_sc = t(3, 3)
    rows.append(("scatter_mean", nc.finite_difference_check(
        lambda s: nc.mean(nc.square(nc.mul(nc.scatter_mean(s, idx, 3), w_sc))),
        [t(5, 3)]), tolerance))
    rows.append(("gather", nc.finite_difference_check(
        lambda s: nc.mean(nc.square(nc.gather(s, np.array([4, 0, 4]), axis=0))),
        [t(5, 3)]), tolerance))

    wv = t(3, 5)
    rows.append(("attention_readout", nc.finite_difference_check(
        lambda lo, va: nc.mean(nc.square(nc.mul(
            fp.attention_readout(lo, va)[0], wv))),
        [t(3, 4, 4), t(5, 4, 4)]), tolerance))

    model = bm.build_default_model()
    wj = t(24, 3)

    def lbs(th, be):
        _, joints = bm.forward_batch(model, th, be)
        return nc.mean(nc.square(nc.mul(joints, wj)))

    rows.append(("lbs_forward", nc.finite_difference_check(
        lbs, [t(2, 24, 3) * 0.3, t(2, 10)]), tolerance))

    cam0 = np.array([[0.9, 0.02, -0.03], [1.1, -0.05, 0.01]])
    rows.append(("projection", nc.finite_difference_check(
        lambda j, cam: nc.mean(nc.square(bm.project_batch(j, cam))),
        [t(2, 24, 3), cam0]), tolerance))

    gth, gbe = t(24, 3) * 0.4, t(10)
    rows.append(("loss_smpl", nc.finite_difference_check(
        lambda pth, pbe: ls.smpl_loss(pth, pbe, gth, gbe),
        [t(24, 3), t(10)]), tolerance))

    gj3, gj2 = t(24, 3), t(24, 2)
    pj2_fixed, pj3_fixed = t(24, 2), t(24, 3)
    rows.append(("loss_joints_3d", nc.finite_difference_check(
        lambda pj3: ls.keypoint_losses(pj3, pj2_fixed, gj3, gj2)[0],
        [t(24, 3)]), tolerance))
    rows.append(("loss_joints_2d", nc.finite_difference_check(
        lambda pj2: ls.keypoint_losses(pj3_fixed, pj2, gj3, gj2)[1],
        [t(24, 2)]), tolerance))

    cln = t(6, 5)
    cln[2] = 0.0  # a dead row must not break the gradient
    rows.append(("loss_sim", nc.finite_difference_check(
        lambda occ: ls.sim_loss(occ, cln), [t(6, 5)]), tolerance))

    # pipeline stages on a real tiny render, spot-checked entries; the
    # frame-filling camera keeps body cells alive in the 8x8 feature grid,
    # and nudging the zero-initialized output layer off zero keeps the
    # regressor path from vanishing at init
    cfg = tr.TrainConfig(seed=0, n_train=1, n_val=1, n_test=1, image_size=64,
                         uv_resolution=16, feat_dim=8, t_iters=2,
                         batch_size=1, stage1_iters=0, stage2_iters=0)
    pipe = fp.build_pipeline(cfg.pipeline_config(), model, init_seed=3)
    for name in ("reg.out.w", "reg.out.b"):
        pipe.params[name].data[:] = rng.normal(size=pipe.params[name].shape) * 0.05
    pose = bm.Pose(theta=np.concatenate([np.zeros((1, 3)),
                                         t(23, 3) * 0.15]),
                   beta=t(10) * 0.5)
    sample = ir.render_sample(model, pipe.atlas, pose,
                              bm.Camera(s=1.05, tx=0.0, ty=0.0), 64, 64, seed=5)
    ws = t(24, 8)

    small = fp.downscale_iuv(sample.iuv)
    w_uv = t(8, 16, 16)
    rows.append(("wrap", nc.finite_difference_check(
        lambda f: nc.mean(nc.square(nc.mul(
            fp.wrap(f, small, pipe.grid).f_uv, w_uv))),
        [t(8, small.part.shape[0], small.part.shape[1])]), tolerance))

    f_uv_in = nc.Tensor(t(8, 16, 16))
    rows.append(("complete", _spot_fd(
        lambda: nc.mean(nc.square(nc.mul(
            fp.complete(pipe.params, f_uv_in, cfg.n_parts)[0], ws))),
        f_uv_in, rng.choice(f_uv_in.size, size=6, replace=False)), tolerance))

    def pipeline_loss():
        out, _ = fp.forward_sample(pipe, sample.image, sample.iuv)
        return nc.add(nc.mean(nc.square(nc.mul(out.phi, ws))),
                      nc.mean(nc.square(out.params)))

    picks = lambda name, n: rng.choice(pipe.params[name].size, size=n,
                                       replace=False)
    for name, label in [("enc.c1.w", "encoder"),
                        ("comp.c1.w", "completion_trunk"),
                        ("comp.attn.w", "attention_head"),
                        ("reg.fc1.w", "regressor")]:
        rows.append(("pipeline/" + label, _spot_fd(
            pipeline_loss, pipe.params[name], picks(name, 4)), tolerance))

    gt_j3 = sample.joints_3d
    gt_j2 = sample.joints_2d

    def end_to_end():
        out, _ = fp.forward_sample(pipe, sample.image, sample.iuv)
        pth_, pbe_, pcam = fp.split_param_vector(out.params)
        _, joints = bm.forward_batch(model, nc.reshape(pth_, (1, 24, 3)),
                                     nc.reshape(pbe_, (1, 10)))
        j3_ = nc.reshape(joints, (24, 3))
        j2_ = nc.reshape(bm.project_batch(joints, nc.reshape(pcam, (1, 3))),
                         (24, 2))
        l3, l2 = ls.keypoint_losses(j3_, j2_, gt_j3, gt_j2)
        ltot = ls.total_loss(ls.smpl_loss(pth_, pbe_, sample.pose.theta,
                                          sample.pose.beta), l3, l2)
        return ltot

    rows.append(("end_to_end", _spot_fd(
        end_to_end, pipe.params["enc.c2.w"],
        picks("enc.c2.w", 3)), 1e-3))
    return rows


# ---------------------------------------------------------------------------
# argument plumbing


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "finetune-inpaint": _cmd_finetune,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "render-iuv": _cmd_render_iuv,
    "wrap-demo": _cmd_wrap_demo,
    "gradcheck": _cmd_gradcheck,
}


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="uvhmr",
        description="occlusion-robust human mesh recovery on synthetic data")
    sub = ap.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", default=None, metavar="FILE",
                       help="key = value run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config entry")

    p = sub.add_parser("synth", help="render a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train", help="stage-1 training on clean renders")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune-inpaint",
                       help="stage-2 occlusion fine-tune with feature inpainting")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="split-wise metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default=",".join(mx.EVAL_SPLITS),
                   help="comma-separated split names")

    p = sub.add_parser("ablate", help="train and evaluate pipeline variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(fp.VARIANTS),
                   help="comma-separated variant names")
    p.add_argument("--split", default="test_clean",
                   help="split the comparison table reports")

    p = sub.add_parser("render-iuv",
                       help="write part-palette correspondence images")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)

    p = sub.add_parser("wrap-demo", help="write UV validity masks")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--tolerance", type=float, default=1e-4)

    return ap


def cli(argv=None):
    """Returns the exit code instead of raising SystemExit."""
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage / help
        return 0 if e.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, TypeError, KeyError, FileNotFoundError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1
    except Exception as e:
        print("failure: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return 2


def main():
    sys.exit(cli())
