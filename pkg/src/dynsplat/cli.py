"""Command-line interface: train, render, bench, edit, pose, distill, toys.

NumPy and the engine are imported inside each command, not at module scope,
so --threads can pin the BLAS pool size in the environment before NumPy
first loads; an already-imported NumPy cannot be re-threaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

def build_parser():
    top = argparse.ArgumentParser(prog="dynsplat", description=__doc__.splitlines()[0])
    top.add_argument("--seed", type=int, default=None, help="override the config seed")
    top.add_argument("--threads", type=int, default=None, help="BLAS/OMP thread count (set before NumPy loads)")
    top.add_argument("--deterministic", action="store_true", help="single-threaded math for reproducible runs")
    top.add_argument("--config", default=None, help="JSON file layered over the training defaults")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model to a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--iters", type=int, default=None, help="total iterations (profile default: 40000)")
    p.add_argument("--warmup", type=int, default=None, help="static warm-up iterations (profile default: 3000)")
    p.add_argument("--sp", type=int, default=None, help="superpoint count")
    p.add_argument("--knn", type=int, default=None, help="association candidates per Gaussian")
    p.add_argument("--sh", type=int, default=None, help="spherical-harmonics degree")
    p.add_argument("--profile", choices=("synthetic", "real"), default="synthetic")
    p.add_argument("--no-warmup", action="store_true", help="skip the static warm-up stage")
    p.add_argument("--no-prop-loss", action="store_true", help="drop the property reconstruction terms")
    p.add_argument("--init-ply", default=None, help="initialize Gaussians from this point cloud")
    p.add_argument("--init-points", type=int, default=None, help="random init point count")
    p.add_argument("--nonrigid", type=int, default=0, help="iterations of the non-rigid second stage (0 = off)")
    p.set_defaults(func=cmd_train, train_flags=True)

    p = sub.add_parser("render", help="render a checkpoint against a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--t", default="all", help="'all' renders each frame at its own time; a number fixes it")
    p.add_argument("--path-mode", choices=("network", "interp"), default="network")
    p.add_argument("--out", required=True, help="directory for PNGs and metrics.json")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="frames/sec for both deformation paths plus MLP microbenchmarks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--data", default=None, help="use this dataset's test cameras instead of an orbit")
    p.add_argument("--size", type=int, default=64, help="orbit camera resolution")
    p.add_argument("--out", default=None, help="write the bench JSON here as well")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("edit", help="apply a JSON edit script to a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render", default=None, help="also render the edited model into this directory")
    p.add_argument("--data", default=None, help="dataset supplying cameras for --render")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("pose", help="recover per-frame rigid transforms on a frozen model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV of per-frame PSNR")
    p.add_argument("--iters", type=int, default=None, help="optimizer steps per frame")
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("distill", help="fit a superpoint student to a teacher trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--cloud", required=True, help="teacher canonical cloud PLY")
    p.add_argument("--data", default=None, help="optional dataset for the image term")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--sp", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("gen-toy", help="generate a deterministic dynamic scene with known motion")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--per-cluster", type=int, default=100)
    p.add_argument("--motion", choices=("translate", "rotate", "hinge", "mixed"), default="translate")
    p.add_argument("--timesteps", type=int, default=20)
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--test-cameras", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("inspect", help="summarize a checkpoint; optionally export a superpoint-tinted PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None, help="tinted PLY path")
    p.set_defaults(func=cmd_inspect)
    return top


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None and args.deterministic:
        threads = 1
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(int(threads))
    try:
        return int(args.func(args) or 0)
    except (ValueError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# -- shared helpers ------------------------------------------------------------


def _load_config_file(path, field_names):
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(field_names))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    if "betas" in data:
        data["betas"] = tuple(data["betas"])
    return data


def _build_train_config(args, tr):
    import dataclasses

    fields = [f.name for f in dataclasses.fields(tr.TrainConfig)]
    kw = {}
    if args.config:
        kw.update(_load_config_file(args.config, fields))
    if args.seed is not None:
        kw["seed"] = args.seed
    for flag, key in (("sp", "num_superpoints"), ("knn", "knn"), ("sh", "sh_degree"), ("init_points", "init_points")):
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    if getattr(args, "no_prop_loss", False):
        kw.update(lambda_mu_t=0.0, lambda_rot_t=0.0, lambda_trans_t=0.0)
    profile = getattr(args, "profile", "synthetic")
    base = tr.TrainConfig.real if profile == "real" else tr.TrainConfig.synthetic
    if not getattr(args, "train_flags", False):
        return base(**kw)  # pose/distill --iters mean their own loop counts
    if args.iters is not None:
        total = args.iters
        warmup = args.warmup if args.warmup is not None else round(total * 3000 / 40000)
        if args.no_warmup:
            warmup = 0
        return tr.TrainConfig.scaled(total, min(warmup, total - 1), **kw)
    if args.warmup is not None:
        kw["warmup_iters"] = args.warmup
    if args.no_warmup:
        kw["warmup_iters"] = 0
    return base(**kw)


def _clamped(image):
    import numpy as np

    from . import autodiff as ad

    return np.clip(ad.data_of(image), 0.0, 1.0)


def _frame_metrics(name, render, gt, tr):
    import numpy as np

    from . import autodiff as ad

    return {
        "name": name,
        "psnr": float(min(tr.psnr(render, gt), tr.PSNR_CAP)),
        "ssim": float(ad.data_of(tr.ssim(np.clip(render, 0, 1), np.clip(gt, 0, 1)))),
    }


# -- commands ------------------------------------------------------------------


def cmd_train(args):
    import numpy as np

    from . import autodiff as ad
    from . import io
    from . import train as tr
    from .pipeline import SceneModel, params_to_cloud, render_at_time, render_view
    from .scene import SH_C0

    ds = io.load_dataset(args.data)
    cfg = _build_train_config(args, tr)
    init_points = init_colors = None
    if args.init_ply:
        seed_cloud = io.load_ply(args.init_ply)
        init_points = seed_cloud.means
        init_colors = np.clip(seed_cloud.sh[:, 0, :] * SH_C0 + 0.5, 0.0, 1.0)

    log_every = max(1, cfg.total_iters // 20)
    eval_every = max(1, cfg.total_iters // 5)
    times = ds.train.times()
    psnr_rows = []

    def report(it, loss, params, sp, net):
        if it % log_every == 0 or it == cfg.total_iters:
            print(f"[train {it}/{cfg.total_iters}] loss {loss:.5f}")
        if ds.test.frames and (it % eval_every == 0 or it == cfg.total_iters):
            frame = ds.test.frames[0]
            with ad.no_grad():
                if sp is None:
                    img = render_view(params, frame.camera, ds.test.background).image
                else:
                    probe = SceneModel(params_to_cloud(params), sp, net, times)
                    img = render_at_time(probe, frame.camera, ds.test.background, frame.time).image
            score = float(min(tr.psnr(ad.data_of(img), frame.image), tr.PSNR_CAP))
            psnr_rows.append((it, frame.name, score))
            print(f"[train {it}/{cfg.total_iters}] test {frame.name} psnr {score:.2f}")

    result = tr.train_spgs(ds.train, cfg, init_points=init_points, init_colors=init_colors, callback=report)
    model, losses = result.model, list(result.losses)
    if args.nonrigid > 0:
        import dataclasses

        stage_cfg = dataclasses.replace(cfg, nonrigid_iters=args.nonrigid)
        staged = tr.train_nonrigid_stage(model, ds.train, stage_cfg)
        model = staged.model
        losses += staged.losses
        print(f"[nonrigid] {args.nonrigid} iterations, final loss {losses[-1]:.5f}")

    io.save_checkpoint(args.out, model)
    with open(args.out + ".loss.csv", "w") as fh:
        fh.write("iter,loss\n")
        fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(losses))
    with open(args.out + ".test_psnr.csv", "w") as fh:
        fh.write("iter,frame,psnr\n")
        fh.writelines(f"{it},{name},{score}\n" for it, name, score in psnr_rows)
    print(f"wrote {args.out} ({model.cloud.means.shape[0]} Gaussians, "
          f"{model.superpoints.num_superpoints} superpoints)")


def cmd_render(args):
    import numpy as np

    from . import io
    from . import train as tr
    from .pipeline import render_at_time

    model = io.load_checkpoint(args.ckpt)
    ds = io.load_dataset(args.data)
    frames = ds.train if args.split == "train" else ds.test
    fixed_t = None
    if args.t != "all":
        try:
            fixed_t = float(args.t)
        except ValueError:
            raise ValueError(f"--t must be 'all' or a number, got {args.t!r}")
    os.makedirs(args.out, exist_ok=True)
    records = []
    for frame in frames.frames:
        t = frame.time if fixed_t is None else fixed_t
        out = render_at_time(model, frame.camera, frames.background, t, path=args.path_mode)
        img = _clamped(out.image)
        io.save_image(os.path.join(args.out, frame.name + ".png"), img)
        if frame.image is not None:
            records.append(_frame_metrics(frame.name, img, frame.image, tr))
    metrics = {
        "frames": records,
        "mean_psnr": float(np.mean([r["psnr"] for r in records])) if records else None,
        "mean_ssim": float(np.mean([r["ssim"] for r in records])) if records else None,
    }
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    if records:
        print(f"rendered {len(records)} frames: mean psnr {metrics['mean_psnr']:.2f} "
              f"ssim {metrics['mean_ssim']:.4f} ({args.path_mode} path)")
    else:
        print(f"rendered {len(frames.frames)} frames (no ground truth for metrics)")


def _orbit_cameras(model, n, size):
    import numpy as np

    from .scene import Camera

    lo = model.cloud.means.min(axis=0)
    hi = model.cloud.means.max(axis=0)
    center = (lo + hi) / 2.0
    dist = max(2.5 * float(np.linalg.norm(hi - lo)), 1e-3)
    cams = []
    for i in range(n):
        azim = 2.0 * np.pi * i / n
        pos = center + dist * np.array([np.sin(azim), 0.25, -np.cos(azim)])
        fwd = center - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross([0.0, 1.0, 0.0], fwd)
        right /= np.linalg.norm(right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, np.cross(fwd, right), fwd, pos
        cams.append(Camera.from_camera_angle(0.9, size, size, c2w))
    return cams


def run_bench(model, cameras, n_frames, *, micro_rows=None):
    """Frames/sec for both paths and per-call deformation cost in microseconds."""
    import time

    import numpy as np

    from . import autodiff as ad
    from . import deform as df
    from .pipeline import render_at_time

    times = np.linspace(0.0, 1.0, n_frames)
    background = np.ones(3)

    def fps(path):
        render_at_time(model, cameras[0], background, 0.0, path=path)  # warm up
        start = time.perf_counter()
        for i, t in enumerate(times):
            render_at_time(model, cameras[i % len(cameras)], background, float(t), path=path)
        return n_frames / (time.perf_counter() - start)

    model.ensure_cache()
    out = {"fps_interp": fps("interp")}
    out["fps_network"] = fps("network") if model.net is not None else None

    def per_call_us(points, reps):
        with ad.no_grad():
            df.predict_deformation(model.net, points, 0.5)  # warm up
            start = time.perf_counter()
            for _ in range(reps):
                df.predict_deformation(model.net, points, 0.5)
        return 1e6 * (time.perf_counter() - start) / reps

    if model.net is not None:
        rows = model.cloud.means if micro_rows is None else micro_rows
        out["deform_us_per_call_sp"] = per_call_us(model.superpoints.positions, 10)
        out["deform_us_per_call_per_gaussian"] = per_call_us(rows, 3)
    else:
        out["deform_us_per_call_sp"] = None
        out["deform_us_per_call_per_gaussian"] = None
    return out


def cmd_bench(args):
    from . import io

    model = io.load_checkpoint(args.ckpt)
    if args.data:
        ds = io.load_dataset(args.data, load_images=False)
        cameras = [f.camera for f in ds.test.frames] or [f.camera for f in ds.train.frames]
    else:
        cameras = _orbit_cameras(model, min(args.frames, 8), args.size)
    if not cameras:
        raise ValueError("no cameras available for benchmarking")
    report = run_bench(model, cameras, args.frames)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


def cmd_edit(args):
    from . import io

    model = io.load_checkpoint(args.ckpt)
    script = io.load_edit_script(args.script)
    edited = io.apply_edit_script(model, script, base_dir=os.path.dirname(os.path.abspath(args.script)))
    io.save_checkpoint(args.out, edited)
    print(f"applied {len(script)} operations: {edited.cloud.means.shape[0]} Gaussians, "
          f"{edited.superpoints.num_superpoints} superpoints -> {args.out}")
    if args.render:
        if not args.data:
            raise ValueError("--render needs --data for cameras")
        from . import train as tr
        from .pipeline import render_at_time

        ds = io.load_dataset(args.data, load_images=False)
        os.makedirs(args.render, exist_ok=True)
        for frame in ds.test.frames:
            out = render_at_time(edited, frame.camera, ds.test.background, frame.time, path="interp")
            io.save_image(os.path.join(args.render, frame.name + ".png"), _clamped(out.image))
        print(f"rendered {len(ds.test.frames)} edited views into {args.render}")


def cmd_pose(args):
    import dataclasses

    import numpy as np

    from . import io
    from . import train as tr

    model = io.load_checkpoint(args.ckpt)
    ds = io.load_dataset(args.data)
    cfg = _build_train_config(args, tr)
    overrides = {}
    if args.iters is not None:
        overrides["pose_iters"] = args.iters
    if args.lr is not None:
        overrides["pose_lr"] = args.lr
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    transforms, scores = tr.estimate_pose(model, ds.test, cfg)
    with open(args.out, "w") as fh:
        fh.write("frame,psnr\n")
        for frame, score in zip(ds.test.frames, scores):
            fh.write(f"{frame.name},{float(min(score, tr.PSNR_CAP))}\n")
    print(f"estimated {len(transforms)} poses, mean psnr {float(np.mean(scores)):.2f} -> {args.out}")


def cmd_distill(args):
    import dataclasses

    from . import io
    from . import train as tr

    trajectory = io.load_trajectories(args.traj)
    cloud = io.load_ply(args.cloud)
    frames = io.load_dataset(args.data).train if args.data else None
    cfg = _build_train_config(args, tr)
    overrides = {}
    if args.iters is not None:
        overrides["distill_iters"] = args.iters
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    result = tr.distill(trajectory, cloud, cfg, frames)
    io.save_checkpoint(args.out, result.model)
    residual = tr.distillation_residual(result.model, trajectory, cfg)
    print(f"distilled {cloud.means.shape[0]} Gaussians into "
          f"{result.model.superpoints.num_superpoints} superpoints, residual {residual:.3e} -> {args.out}")


def cmd_gen_toy(args):
    from . import io

    spec = io.ToySpec(
        clusters=args.clusters,
        per_cluster=args.per_cluster,
        motion=args.motion,
        timesteps=args.timesteps,
        cameras=args.cameras,
        test_cameras=args.test_cameras,
        size=args.size,
        seed=args.seed if args.seed is not None else 0,
    )
    paths = io.generate_toy_scene(spec, args.out)
    print(f"wrote {spec.motion} scene: {paths['train_json']}, {paths['test_json']}, "
          f"{paths['ply']}, {paths['motion']}")


def cmd_inspect(args):
    from . import io
    from .scene import sh_degree_from_bands

    model = io.load_checkpoint(args.ckpt)
    cloud, sp = model.cloud, model.superpoints
    print(f"gaussians: {cloud.means.shape[0]}")
    print(f"superpoints: {sp.num_superpoints} (k = {sp.k})")
    print(f"sh degree: {sh_degree_from_bands(cloud.sh.shape[1])}")
    print(f"train timesteps: {len(model.train_times)}")
    print("deformation net: " + ("none" if model.net is None else f"{len(model.net.hidden)} hidden layers"))
    print("nonrigid net: " + ("none" if model.nonrigid is None else f"{len(model.nonrigid.hidden)} hidden layers"))
    print(f"cache: {'none' if model.cache is None else len(model.cache.times)} timesteps")
    if args.out:
        io.export_superpoint_ply(args.out, model, seed=args.seed if args.seed is not None else 0)
        print(f"tinted ply -> {args.out}")


if __name__ == "__main__":
    sys.exit(main())
