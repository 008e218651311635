"""Acceptance suite: one test per shipping criterion, toy scale, CPU only.

The expensive fixtures (full training runs on the generated scene) are
session-scoped and shared across tests. Every test prints the measured
number next to its requirement so the verbose output reads as a scorecard.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from dynsplat import autodiff as ad
from dynsplat import deform as df
from dynsplat import geom, io
from dynsplat import train as tr
from dynsplat.pipeline import (
    SceneModel,
    cloud_params,
    collect_trajectory,
    render_at_time,
    render_view,
)
from dynsplat.rasterizer import backend
from dynsplat.rasterizer.blending import rasterize_reference
from dynsplat.rasterizer.projection import RasterConfig
from dynsplat.scene import Camera, Frame, FrameSet, GaussianCloud
from dynsplat.superpoint import (
    association_probabilities,
    hard_assignment,
    init_association_logits,
    nearest_superpoints,
    update_canonical_positions,
)

# -- shared scene and training runs -------------------------------------------

TOY = io.ToySpec(
    clusters=2, per_cluster=100, motion="mixed", timesteps=20,
    cameras=8, test_cameras=2, size=64, seed=0,
)
TOTAL_ITERS = 8000
WARMUP_ITERS = 600


def make_scene(root):
    io.generate_toy_scene(TOY, str(root))
    with open(f"{root}/motion_gt.json") as fh:
        gt = json.load(fh)
    return {
        "dataset": io.load_dataset(str(root)),
        "gt": gt,
        "gt_cloud": io.load_ply(f"{root}/canonical.ply"),
        "root": str(root),
    }


def train_toy(dataset, warmup=WARMUP_ITERS, **overrides):
    cfg = tr.TrainConfig.scaled(TOTAL_ITERS, warmup, **overrides)
    start = time.monotonic()
    result = tr.train_spgs(dataset.train, cfg)
    return result.model, time.monotonic() - start


@pytest.fixture(scope="session")
def toy_scene(tmp_path_factory):
    return make_scene(tmp_path_factory.mktemp("scene"))


@pytest.fixture(scope="session")
def default_run(toy_scene):
    model, seconds = train_toy(toy_scene["dataset"])
    return {"model": model, "seconds": seconds}


@pytest.fixture(scope="session")
def ablation_runs(toy_scene):
    ds = toy_scene["dataset"]
    nowarm, _ = train_toy(ds, warmup=0)
    noprop, _ = train_toy(ds, lambda_mu_t=0.0, lambda_rot_t=0.0, lambda_trans_t=0.0)
    return {"nowarm": nowarm, "noprop": noprop}


# -- motion recovery scoring ---------------------------------------------------


def superpoint_majority_clusters(model, gt_cloud, cluster_ids):
    """Map each superpoint to the ground-truth cluster most of its members sit in."""
    ids = np.asarray(cluster_ids)
    centers = np.stack([gt_cloud.means[ids == c].mean(axis=0) for c in range(ids.max() + 1)])
    gauss_cluster = np.argmin(
        np.linalg.norm(model.cloud.means[:, None, :] - centers[None], axis=2), axis=1
    )
    assignment = model.assignment()
    out = np.zeros(model.superpoints.num_superpoints, dtype=int)
    for j in range(out.size):
        members = gauss_cluster[assignment == j]
        if members.size:
            out[j] = np.bincount(members, minlength=centers.shape[0]).argmax()
        else:  # memberless superpoints fall back to their own position
            out[j] = np.argmin(np.linalg.norm(model.superpoints.positions[j] - centers, axis=1))
    return out


def recovery_errors(model, scene):
    """Per-(superpoint, timestep) rotation (deg) and translation errors vs ground truth.

    Recovered transforms are re-referenced to the first timestep before the
    comparison: the model's canonical space is internal, but its frame-0
    configuration is observable and shared with the ground truth, so motions
    are compared as frame-0 -> t maps on both sides.
    """
    gt = scene["gt"]
    model.ensure_cache()
    cache = model.cache
    np.testing.assert_allclose(cache.times, np.asarray(gt["times"]), atol=1e-12)
    sp_cluster = superpoint_majority_clusters(model, scene["gt_cloud"], gt["cluster_ids"])
    om_gt = np.asarray(gt["omegas"])  # (C, T, 3)
    tr_gt = np.asarray(gt["trans"])
    t_count, m_count = cache.omegas.shape[:2]
    rots = geom.so3_exp_many(cache.omegas.reshape(-1, 3)).reshape(t_count, m_count, 3, 3)
    rot0, trans0 = rots[0], cache.trans[0]
    rot_err = np.zeros((t_count, m_count))
    trans_err = np.zeros((t_count, m_count))
    for ti in range(t_count):
        gt_rots = geom.so3_exp_many(om_gt[:, ti])
        for j in range(m_count):
            rel_rot = rots[ti, j] @ rot0[j].T
            rel_trans = cache.trans[ti, j] - rel_rot @ trans0[j]
            c = sp_cluster[j]
            rot_err[ti, j] = np.degrees(geom.rotation_angle_between(rel_rot, gt_rots[c]))
            trans_err[ti, j] = np.linalg.norm(rel_trans - tr_gt[c, ti])
    return rot_err, trans_err


def recovery_pass_fraction(model, scene):
    rot_err, trans_err = recovery_errors(model, scene)
    ok = (rot_err <= 2.0) & (trans_err <= 0.02 * scene["gt"]["extent"])
    return float(ok.mean()), rot_err, trans_err


# -- A1: tiled rasterizer equals the brute-force reference ---------------------


def _random_cloud(rng, n, bands):
    return GaussianCloud(
        means=rng.uniform(-0.8, 0.8, (n, 3)),
        log_scales=np.log(rng.uniform(0.05, 0.2, (n, 3))),
        quats=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-1.0, 2.0, n),
        sh=rng.normal(0.2, 0.3, (n, bands, 3)),
    )


def _orbit_camera(azim, elev, dist=4.0, size=32):
    pos = dist * np.array([
        np.sin(azim) * np.cos(elev), np.sin(elev), -np.cos(azim) * np.cos(elev),
    ])
    fwd = -pos / np.linalg.norm(pos)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right /= np.linalg.norm(right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, np.cross(fwd, right), fwd, pos
    return Camera.from_camera_angle(0.9, size, size, c2w)


def test_a01_tiled_renderer_matches_brute_force():
    start = time.monotonic()
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        cloud = _random_cloud(rng, int(rng.integers(5, 51)), int(rng.integers(1, 3)) ** 2)
        camera = _orbit_camera(rng.uniform(0, 2 * np.pi), rng.uniform(-0.5, 0.5))
        bg = rng.uniform(0, 1, 3)
        res = render_view(cloud_params(cloud), camera, bg, cfg=RasterConfig.exact())
        ref, _ = rasterize_reference(res.proj, res.colors, res.opacities, 32, 32, bg)
        worst = max(worst, float(np.abs(res.image - ref).max()))
    elapsed = time.monotonic() - start
    print(f"A1: max |tiled - reference| {worst:.3e} over 30 scenes "
          f"in {elapsed:.1f}s (requirement: < 1e-6, < 30s)")
    assert worst < 1e-6
    assert elapsed < 30.0


# -- A2: analytic gradients match finite differences ---------------------------

_FD_STEP = 1e-4
_FD_REL = 1e-3
_FD_FLOOR = 1e-8


def _clear_relu_margins(net, points, t, margin=0.02):
    """Shift hidden biases until no preactivation sits within ``margin`` of zero.

    A ReLU corner within probe reach blends two slopes into the central
    difference, so the finite-difference scene must sit inside one linear
    region. Nudging biases moves the operating point without touching the
    gradient path under test. Layers are cleared in order because a shift in
    one layer moves the inputs of the next.
    """
    enc_t = geom.positional_encode(np.full((len(points), 1), float(t)), net.time_freqs)
    h = np.concatenate([geom.positional_encode(points, net.pos_freqs), enc_t], axis=-1)
    for w, b in net.hidden:
        pre = h @ ad.data_of(w) + ad.data_of(b)
        for unit in range(pre.shape[1]):
            rows = pre[:, unit]
            # Smallest bias shift with |row + s| >= margin for every row: the
            # feasible set is the line minus an interval around each -row, so
            # the optimum is 0 or an interval endpoint.
            candidates = np.concatenate([[0.0], -rows - margin, -rows + margin])
            ok = np.abs(rows[None, :] + candidates[:, None]).min(axis=1) >= margin - 1e-12
            if not ok.any():
                raise AssertionError("ReLU margins did not clear; adjust scene seed")
            s = candidates[ok][np.argmin(np.abs(candidates[ok]))]
            b.data[unit] += s
            pre[:, unit] = rows + s
        h = np.maximum(pre, 0.0)


def _a2_scene(seed=11):
    """20 Gaussians, 3 superpoints, 32x32, both networks perturbed off identity.

    Central differences only measure the gradient where the loss is smooth
    over the probe interval, so construction keeps every kink source out of
    reach: low encoding frequencies (at pos_freqs=10 the top band turns a
    1e-4 step into an O(0.1) feature swing), ReLU margins cleared by bias
    nudges, and asserted gaps for blend order, the alpha ceiling, and the
    hard assignment.
    """
    rng = np.random.default_rng(seed)
    cloud = _random_cloud(rng, 20, 4)
    masters = {k: v.copy() for k, v in cloud_params(cloud).items()}
    positions = rng.uniform(-0.6, 0.6, (3, 3))
    neighbors = nearest_superpoints(masters["means"], positions, 2)
    logits = init_association_logits(neighbors) + rng.normal(0.0, 0.3, neighbors.shape)
    fnet = df.init_deform_net(rng, depth=2, width=16, pos_freqs=2, time_freqs=2)
    gnet = df.init_nonrigid_net(rng, depth=2, width=16, pos_freqs=2, time_freqs=2)
    for net in (fnet, gnet):
        for _, p in df.net_parameters(net):
            p.data = p.data + rng.normal(0.0, 0.05, p.data.shape)

    t = 0.37
    camera = _orbit_camera(0.4, 0.2)
    _clear_relu_margins(fnet, positions, t)
    with ad.no_grad():
        omega, trans = df.predict_deformation(fnet, positions, t)
        probs = ad.data_of(association_probabilities(ad.Tensor(logits)))
        assignment = hard_assignment(probs, neighbors)
        moved, _ = df.deform_cloud(
            ad.Tensor(masters["means"]), masters["quats"], assignment, omega, trans,
        )
        moved = ad.data_of(moved)
    _clear_relu_margins(gnet, moved, t)
    with ad.no_grad():
        om2, tr2 = df.predict_deformation(gnet, moved, t)
    final = np.einsum("nij,nj->ni", geom.so3_exp_many(ad.data_of(om2)), moved)
    final = final + ad.data_of(tr2)

    # Remaining kink hazards, each asserted with a margin far above what a
    # 1e-4 probe can move: a blend-order swap needs a depth tie, the alpha
    # ceiling clamps at 0.99, and the hard assignment flips at a probability
    # tie. A failure here means the seed is unsuitable, not the gradients.
    depths = final @ camera.rotation[2] + camera.world_to_camera[2, 3]
    gaps = np.abs(depths[:, None] - depths[None, :])
    assert gaps[np.triu_indices(len(depths), 1)].min() > 1e-3, "depth tie"
    peak_opacity = 1.0 / (1.0 + np.exp(-masters["opacity_logits"].max()))
    assert peak_opacity < 0.985, "alpha ceiling in reach"
    ranked = np.sort(probs, axis=1)
    assert (ranked[:, -1] - ranked[:, -2]).min() > 1e-3, "assignment tie"

    # The L1 image term flips slope wherever a channel's residual crosses
    # zero, and against a random target some channel always sits within probe
    # reach of a flip. Offsetting the rendered image instead bounds every
    # residual away from zero.
    with ad.no_grad():
        res = render_view(
            {k: ad.Tensor(v) for k, v in masters.items()},
            camera, np.full(3, 0.4),
            motion=(omega, trans, assignment), nonrigid_net=gnet, t=t,
            cfg=RasterConfig.smooth(),
        )
        image = ad.data_of(res.image)
    offsets = rng.choice([-1.0, 1.0], image.shape) * rng.uniform(0.08, 0.2, image.shape)

    return {
        "masters": masters,
        "logits": logits.copy(),
        "positions": positions,
        "neighbors": neighbors,
        "fnet": fnet,
        "gnet": gnet,
        "camera": camera,
        "target": image - offsets,
        "cfg": tr.TrainConfig.synthetic(),
        "time": t,
    }


def _a2_loss(scene, requires_grad):
    """The full training objective; smooth footprint so every input is differentiable."""
    from dynsplat.superpoint import SuperpointModel

    params = {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in scene["masters"].items()}
    assoc = ad.Tensor(scene["logits"], requires_grad=requires_grad)
    sp = SuperpointModel(scene["positions"], scene["neighbors"], ad.data_of(assoc))
    omega, trans = df.predict_deformation(scene["fnet"], sp.positions, scene["time"])
    probs = association_probabilities(assoc)
    assignment = hard_assignment(probs, sp.neighbors)
    res = render_view(
        params, scene["camera"], np.full(3, 0.4),
        motion=(omega, trans, assignment),
        nonrigid_net=scene["gnet"], t=scene["time"],
        cfg=RasterConfig.smooth(),
    )
    cfg = scene["cfg"]
    loss = tr.image_loss(res.image, scene["target"], cfg.lambda_dssim)
    loss = tr.add_property_terms(loss, cfg, probs, sp, res.means, omega, trans, assignment)
    return loss, params, assoc


def _a2_analytic_grads(scene):
    for net in (scene["fnet"], scene["gnet"]):
        ad.zero_grads([p for _, p in df.net_parameters(net)])
    loss, params, assoc = _a2_loss(scene, requires_grad=True)
    loss.backward()
    grads = {k: params[k].grad.copy() for k in params}
    grads["assoc"] = assoc.grad.copy()
    for tag, net in (("deform", scene["fnet"]), ("nonrigid", scene["gnet"])):
        for name, p in df.net_parameters(net):
            grads[f"{tag}.{name}"] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    return grads


def _a2_class_arrays(scene):
    arrays = {k: scene["masters"][k] for k in scene["masters"]}
    arrays["assoc"] = scene["logits"]
    for tag, net in (("deform", scene["fnet"]), ("nonrigid", scene["gnet"])):
        for name, p in df.net_parameters(net):
            arrays[f"{tag}.{name}"] = p.data
    return arrays


_A2_CLASSES = {
    "means": ("means",),
    "log-scale": ("log_scales",),
    "quaternion": ("quats",),
    "opacity-logit": ("opacity_logits",),
    "sh": ("sh",),
    "association-logit": ("assoc",),
    "deform-net": None,  # filled by prefix below
    "nonrigid-net": None,
}


def a2_worst_errors(scene, coords_per_class=None, seed=5):
    """Worst FD-vs-analytic relative error per parameter class.

    Exhaustive over every coordinate by default; pass coords_per_class to
    subsample large arrays when iterating on the scene itself.
    """
    rng = np.random.default_rng(seed)
    analytic = _a2_analytic_grads(scene)
    arrays = _a2_class_arrays(scene)

    def fd(arr, idx):
        old = arr.flat[idx]
        arr.flat[idx] = old + _FD_STEP
        with ad.no_grad():
            hi, _, _ = _a2_loss(scene, requires_grad=False)
        arr.flat[idx] = old - _FD_STEP
        with ad.no_grad():
            lo, _, _ = _a2_loss(scene, requires_grad=False)
        arr.flat[idx] = old
        return (float(ad.data_of(hi)) - float(ad.data_of(lo))) / (2.0 * _FD_STEP)

    worst = {}
    for label, keys in _A2_CLASSES.items():
        if keys is None:
            prefix = "deform." if label == "deform-net" else "nonrigid."
            keys = [k for k in arrays if k.startswith(prefix)]
        err = 0.0
        for key in keys:
            arr = arrays[key]
            if coords_per_class is None:
                picks = range(arr.size)
            else:
                n = min(coords_per_class, arr.size)
                picks = rng.choice(arr.size, size=n, replace=False)
            for idx in picks:
                a = analytic[key].flat[idx]
                f = fd(arr, int(idx))
                diff = abs(a - f)
                if diff > _FD_FLOOR:
                    err = max(err, diff / max(abs(a), abs(f)))
        worst[label] = err
    return worst


def test_a02_gradients_match_finite_differences():
    start = time.monotonic()
    worst = a2_worst_errors(_a2_scene())
    elapsed = time.monotonic() - start
    report = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    print(f"A2: worst relative error per class: {report} "
          f"in {elapsed:.0f}s (requirement: < 1e-3 each, < 300s)")
    for label, err in worst.items():
        assert err < _FD_REL, f"{label} gradient off by {err:.3e}"
    assert elapsed < 300.0


# -- A3: end-to-end toy reconstruction -----------------------------------------


def test_a03_toy_reconstruction_psnr(default_run, toy_scene):
    report = tr.evaluate(default_run["model"], toy_scene["dataset"].test)
    minutes = default_run["seconds"] / 60.0
    print(f"A3: held-out mean PSNR {report['mean_psnr']:.2f} dB after {TOTAL_ITERS} iters "
          f"in {minutes:.1f} min (requirement: >= 30 dB, < 30 min)")
    assert report["mean_psnr"] >= 30.0
    assert default_run["seconds"] < 1800.0


# -- A4: superpoint motion recovery ---------------------------------------------


def test_a04_motion_recovery(default_run, toy_scene):
    fraction, rot_err, trans_err = recovery_pass_fraction(default_run["model"], toy_scene)
    print(f"A4: {100 * fraction:.1f}% of (superpoint, timestep) pairs within "
          f"2 deg / 2% extent; median rot {np.median(rot_err):.2f} deg, "
          f"median trans {np.median(trans_err):.4f} (requirement: >= 90%)")
    assert fraction >= 0.9


# -- A5: inference paths agree ---------------------------------------------------


def test_a05_inference_paths_agree(default_run, toy_scene):
    model = default_run["model"]
    ds = toy_scene["dataset"]
    camera = ds.test.frames[0].camera
    for t in model.train_times:
        net_img = ad.data_of(render_at_time(model, camera, ds.test.background, float(t), path="network").image)
        itp_img = ad.data_of(render_at_time(model, camera, ds.test.background, float(t), path="interp").image)
        assert np.array_equal(net_img, itp_img), f"paths diverge at t={t}"
    net_eval = tr.evaluate(model, ds.test, path="network")
    itp_eval = tr.evaluate(model, ds.test, path="interp")
    diff = abs(net_eval["mean_psnr"] - itp_eval["mean_psnr"])
    print(f"A5: bit-identical at all {len(model.train_times)} training timesteps; "
          f"mean PSNR difference {diff:.4f} dB (requirement: < 0.01)")
    assert diff < 0.01


# -- A6: speed orderings ----------------------------------------------------------


def _best_seconds(fn, reps):
    best = np.inf
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def test_a06_speed_ordering(default_run, toy_scene):
    from dynsplat.cli import run_bench

    model = default_run["model"]
    cameras = [f.camera for f in toy_scene["dataset"].test.frames[:4]]
    report = run_bench(model, cameras, 16)
    rng = np.random.default_rng(0)
    few = rng.uniform(-1, 1, (300, 3))
    many = rng.uniform(-1, 1, (50000, 3))
    with ad.no_grad():
        df.predict_deformation(model.net, few, 0.5)  # warm up
        t_few = _best_seconds(lambda: df.predict_deformation(model.net, few, 0.5), 5)
        t_many = _best_seconds(lambda: df.predict_deformation(model.net, many, 0.5), 3)
    ratio = t_many / t_few
    print(f"A6: interp {report['fps_interp']:.1f} fps vs network {report['fps_network']:.1f} fps; "
          f"50000-row call {ratio:.0f}x the 300-row call "
          f"(requirement: interp >= network, ratio >= 20)")
    assert report["fps_interp"] >= report["fps_network"]
    assert ratio >= 20.0


# -- A7: property-loss invariants -------------------------------------------------


def _dense_property_loss(probs, neighbors, values, m):
    """Independent dense P x M evaluation of the gather-scatter round trip."""
    p, k = neighbors.shape
    dense = np.zeros((p, m))
    dense[np.arange(p)[:, None], neighbors] = probs
    mass = dense.sum(axis=0)
    agg = np.zeros((m, values.shape[1]))
    filled = mass > 0
    agg[filled] = (dense.T @ values)[filled] / mass[filled, None]
    back = dense @ agg
    return float(np.mean((back - values) ** 2))


def test_a07_property_loss_invariants():
    from dynsplat.superpoint import property_reconstruction_loss

    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        p = int(rng.integers(2, 51))
        m = int(rng.integers(2, 51))
        k = int(rng.integers(1, min(m, 6) + 1))
        neighbors = np.stack([rng.choice(m, size=k, replace=False) for _ in range(p)])
        probs = ad.data_of(association_probabilities(rng.normal(0, 1, (p, k))))
        values = rng.normal(0, 1, (p, int(rng.integers(1, 5))))
        sparse = float(ad.data_of(property_reconstruction_loss(probs, neighbors, values, m)))
        dense = _dense_property_loss(probs, neighbors, values, m)
        worst = max(worst, abs(sparse - dense))

        uniform = np.tile(values[:1], (p, 1))
        flat = float(ad.data_of(property_reconstruction_loss(probs, neighbors, uniform, m)))
        assert flat < 1e-24, "uniform rows must reconstruct exactly"
        poked = uniform.copy()
        poked[int(rng.integers(p)), 0] += 0.5
        assert float(ad.data_of(property_reconstruction_loss(probs, neighbors, poked, m))) > 0.0
    print(f"A7: max |sparse - dense| {worst:.2e} over 20 instances "
          f"(requirement: < 1e-10); uniform-motion loss is zero, perturbed is positive")
    assert worst < 1e-10


# -- A8: ablation directions -------------------------------------------------------


def test_a08_ablation_directions(default_run, ablation_runs, toy_scene):
    ds = toy_scene["dataset"]
    base_psnr = tr.evaluate(default_run["model"], ds.test)["mean_psnr"]
    nowarm_psnr = tr.evaluate(ablation_runs["nowarm"], ds.test)["mean_psnr"]
    noprop_psnr = tr.evaluate(ablation_runs["noprop"], ds.test)["mean_psnr"]
    base_frac, base_rot, base_trans = recovery_pass_fraction(default_run["model"], toy_scene)
    ab_frac, ab_rot, ab_trans = recovery_pass_fraction(ablation_runs["noprop"], toy_scene)
    base_err = np.median(base_rot) + np.median(base_trans)
    ab_err = np.median(ab_rot) + np.median(ab_trans)
    print(f"A8: PSNR default {base_psnr:.2f}, no-warmup {nowarm_psnr:.2f} "
          f"(drop {base_psnr - nowarm_psnr:.2f} dB, requirement: >= 2); "
          f"no-prop-loss {noprop_psnr:.2f} (gain {noprop_psnr - base_psnr:.2f} dB, "
          f"requirement: <= 0.5); recovery pass {100 * base_frac:.1f}% -> {100 * ab_frac:.1f}%, "
          f"median error {base_err:.4f} -> {ab_err:.4f} (must not improve)")
    assert base_psnr - nowarm_psnr >= 2.0
    assert noprop_psnr - base_psnr <= 0.5
    # dropping the rigidity prior must not make motion recovery better, and
    # must hurt at least one of the two views of the A4 metric
    assert ab_frac <= base_frac
    assert ab_frac < base_frac or ab_err > base_err


# -- A9: application round trips -----------------------------------------------------

POSE_ITERS = 400


def test_a09a_pose_self_recovery(default_run, toy_scene):
    model = default_run["model"]
    ds = toy_scene["dataset"]
    camera = ds.test.frames[0].camera
    frames = []
    for t in (0.85, 0.6, 0.35):  # warm starts walk backwards from the last timestep
        img = ad.data_of(render_at_time(model, camera, ds.test.background, t, path="interp").image)
        frames.append(Frame(camera=camera, time=t, image=np.clip(img, 0.0, 1.0), name=f"t{t}"))
    frameset = FrameSet(frames, ds.test.background)
    cfg = dataclasses.replace(tr.TrainConfig.scaled(TOTAL_ITERS, WARMUP_ITERS), pose_iters=POSE_ITERS)
    _, scores = tr.estimate_pose(model, frameset, cfg)
    print(f"A9a: pose self-recovery PSNR {['%.1f' % s for s in scores]} dB "
          f"(requirement: mean > 40)")
    assert float(np.mean(scores)) > 40.0


def test_a09b_self_distillation(default_run):
    model = default_run["model"]
    trajectory = collect_trajectory(model)
    cfg = tr.TrainConfig.scaled(TOTAL_ITERS, WARMUP_ITERS)
    student = tr.distill(trajectory, model.cloud, cfg).model
    err = tr.distillation_residual(student, trajectory, cfg)
    print(f"A9b: self-distillation residual {err:.2e} (requirement: < 1e-4)")
    assert err < 1e-4


def test_a09c_edit_inverse_round_trip(default_run, toy_scene):
    model = default_run["model"]
    ds = toy_scene["dataset"]
    camera = ds.test.frames[0].camera
    omega = np.array([0.0, 0.4, 0.0])
    shift = np.array([0.1, -0.05, 0.2])
    rot = geom.so3_exp(omega)
    script = [
        {"op": "transform", "ids": [0, 1, 2], "omega": omega.tolist(), "t": shift.tolist()},
        {"op": "transform", "ids": [0, 1, 2], "omega": (-omega).tolist(),
         "t": (-(rot.T @ shift)).tolist()},
    ]
    edited = io.apply_edit_script(model, script)
    worst = 0.0
    for t in (0.0, 0.5, 1.0):
        before = ad.data_of(render_at_time(model, camera, ds.test.background, t, path="interp").image)
        after = ad.data_of(render_at_time(edited, camera, ds.test.background, t, path="interp").image)
        worst = max(worst, float(np.abs(before - after).max()))
    print(f"A9c: transform + inverse render difference {worst:.2e} "
          f"(requirement: <= 1/255 = {1 / 255:.2e})")
    assert worst <= 1.0 / 255.0


# -- A10: serialization round trips ---------------------------------------------------


def test_a10_serialization_round_trips(default_run, toy_scene, tmp_path):
    model = default_run["model"]
    camera = toy_scene["dataset"].test.frames[0].camera
    bg = toy_scene["dataset"].test.background

    ply_a, ply_b = str(tmp_path / "a.ply"), str(tmp_path / "b.ply")
    io.save_ply(ply_a, model.cloud)
    io.save_ply(ply_b, io.load_ply(ply_a))
    assert open(ply_a, "rb").read() == open(ply_b, "rb").read()

    ck_a, ck_b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    io.save_checkpoint(ck_a, model)
    io.save_checkpoint(ck_b, io.load_checkpoint(ck_a))
    assert open(ck_a, "rb").read() == open(ck_b, "rb").read()

    tj_a, tj_b = str(tmp_path / "a.traj"), str(tmp_path / "b.traj")
    io.save_trajectories(tj_a, *collect_trajectory(model))
    io.save_trajectories(tj_b, *io.load_trajectories(tj_a))
    assert open(tj_a, "rb").read() == open(tj_b, "rb").read()

    # two independent loads render bit-identically
    first = io.load_checkpoint(ck_a)
    second = io.load_checkpoint(ck_a)
    img1 = ad.data_of(render_at_time(first, camera, bg, 0.4, path="interp").image)
    img2 = ad.data_of(render_at_time(second, camera, bg, 0.4, path="interp").image)
    assert np.array_equal(img1, img2)

    # the kernel backends stand in for platform variation
    diff = 0.0
    if len(backend.available_backends()) == 2:
        original = backend.active_backend()
        try:
            backend.set_backend("python")
            py_img = ad.data_of(render_at_time(first, camera, bg, 0.4, path="interp").image)
            backend.set_backend("compiled")
            c_img = ad.data_of(render_at_time(first, camera, bg, 0.4, path="interp").image)
        finally:
            backend.set_backend(original)
        diff = float(np.abs(py_img - c_img).max())
    print(f"A10: PLY/checkpoint/trajectory saves byte-stable; reloads render "
          f"bit-identically; cross-backend render difference {diff:.2e} "
          f"(requirement: < 1e-6)")
    assert diff < 1e-6
