"""Losses, the optimizer, density control, and the training loops.

The image loss is the usual L1 + D-SSIM mix; the full objective adds three
property-reconstruction terms that push each Gaussian's deformed position and
its assigned superpoint transform to survive the gather/scatter round trip
through the association weights. Everything optimizes with a from-scratch
Adam whose per-parameter state can follow rows as Gaussians are cloned,
split, and pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import deform as df
from .geom import quat_conjugate, quat_multiply, quat_to_axis_angle, so3_exp_many
from .pipeline import SceneModel, cloud_params, motion_at_time, params_to_cloud, render_at_time, render_view
from .rasterizer import RasterConfig
from .scene import SH_C0, FrameSet, GaussianCloud, sh_band_count
from .superpoint import (
    SuperpointModel,
    association_probabilities,
    farthest_point_sampling,
    hard_assignment,
    init_association_logits,
    nearest_superpoints,
    property_reconstruction_loss,
    refresh_neighbors,
    update_canonical_positions,
)

# -- image losses ------------------------------------------------------------


def l1_loss(a, b):
    """Mean absolute difference over all entries."""
    if ad.data_of(a).shape != ad.data_of(b).shape:
        raise ValueError("image shapes disagree")
    return ad.mean(ad.absolute(a - b))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_SSIM_WINDOW = _gaussian_window()


def _blur_valid(img, kern):
    """Separable blur, valid region only; graph-capable via slice sums."""
    k = len(kern)
    h, w = ad.data_of(img).shape[:2]
    rows = kern[0] * img[0 : h - k + 1]
    for i in range(1, k):
        rows = rows + kern[i] * img[i : i + h - k + 1]
    out = kern[0] * rows[:, 0 : w - k + 1]
    for i in range(1, k):
        out = out + kern[i] * rows[:, i : i + w - k + 1]
    return out


def ssim(a, b, c1=0.01**2, c2=0.03**2):
    """Mean SSIM with an 11x11 Gaussian window, computed on valid positions."""
    h, w = ad.data_of(a).shape[:2]
    if h < 11 or w < 11:
        raise ValueError("image too small for the SSIM window")
    kern = _SSIM_WINDOW
    mu_a = _blur_valid(a, kern)
    mu_b = _blur_valid(b, kern)
    var_a = _blur_valid(a * a, kern) - mu_a * mu_a
    var_b = _blur_valid(b * b, kern) - mu_b * mu_b
    cov = _blur_valid(a * b, kern) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return ad.mean(num / den)


def dssim_loss(a, b):
    return (1.0 - ssim(a, b)) * 0.5


def image_loss(render, gt, lambda_dssim=0.2):
    """(1 - lambda) L1 + lambda D-SSIM; lambda 0 is exactly the L1 loss."""
    l1 = l1_loss(render, gt)
    if lambda_dssim == 0.0:
        return l1
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim_loss(render, gt)


PSNR_CAP = 99.99  # reported PSNR ceiling so exact matches stay JSON-serializable


def psnr(a, b):
    """PSNR in dB between two images clipped to [0, 1]."""
    a = np.clip(ad.data_of(a), 0.0, 1.0)
    b = np.clip(ad.data_of(b), 0.0, 1.0)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return -10.0 * np.log10(mse)


# -- full objective ----------------------------------------------------------


def add_property_terms(loss, cfg, probs, sp, means_t, omega, trans, assignment):
    """Add the property-reconstruction terms for the current frame.

    Zero-weight terms are skipped entirely so the all-zero setting returns
    the image loss bit-exactly.
    """
    m = sp.num_superpoints
    if cfg.lambda_mu_t != 0.0:
        loss = loss + cfg.lambda_mu_t * property_reconstruction_loss(
            probs, sp.neighbors, means_t, m
        )
    if cfg.lambda_rot_t != 0.0:
        rows = ad.take(omega, assignment)
        loss = loss + cfg.lambda_rot_t * property_reconstruction_loss(
            probs, sp.neighbors, rows, m
        )
    if cfg.lambda_trans_t != 0.0:
        rows = ad.take(trans, assignment)
        loss = loss + cfg.lambda_trans_t * property_reconstruction_loss(
            probs, sp.neighbors, rows, m
        )
    return loss


# -- optimizer ---------------------------------------------------------------


def expon_lr(init, final, total):
    """Log-linear decay from init to final over total iterations."""
    ratio = final / init

    def lr(it):
        return init * ratio ** (min(max(it, 0), total) / total)

    return lr


class Adam:
    """Named-parameter Adam whose state can follow parameter rows.

    Learning rates may be floats, arrays broadcastable to the parameter, or
    callables of the global iteration. ``replace`` swaps a parameter tensor
    and maps its moment arrays through ``carry`` so surviving rows keep their
    history while fresh rows start cold.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.groups = {}  # name -> [tensor, lr, m, v, step]

    def register(self, name, tensor, lr):
        self.groups[name] = [tensor, lr, np.zeros_like(tensor.data), np.zeros_like(tensor.data), 0]

    def zero_grads(self):
        for g in self.groups.values():
            g[0].grad = None

    def step(self, it=0):
        for g in self.groups.values():
            tensor, lr, m, v, _ = g
            grad = tensor.grad
            if grad is None:
                continue
            g[4] += 1
            m *= self.b1
            m += (1.0 - self.b1) * grad
            v *= self.b2
            v += (1.0 - self.b2) * grad * grad
            mhat = m / (1.0 - self.b1 ** g[4])
            vhat = v / (1.0 - self.b2 ** g[4])
            rate = lr(it) if callable(lr) else lr
            tensor.data -= rate * mhat / (np.sqrt(vhat) + self.eps)

    def replace(self, name, tensor, carry=None):
        g = self.groups[name]
        m = carry(g[2]) if carry is not None else np.zeros_like(tensor.data)
        v = carry(g[3]) if carry is not None else np.zeros_like(tensor.data)
        self.groups[name] = [tensor, g[1], m, v, g[4]]

    def reset_moments(self, name):
        g = self.groups[name]
        g[2][...] = 0.0
        g[3][...] = 0.0


def _carry_rows(row_map):
    """Moment mapper for row rebuilds; -1 rows start at zero."""
    row_map = np.asarray(row_map, dtype=np.int64)

    def carry(old):
        new = np.zeros((len(row_map),) + old.shape[1:])
        keep = row_map >= 0
        new[keep] = old[row_map[keep]]
        return new

    return carry


def _carry_slots(slot_map):
    """Moment mapper for neighbor refreshes; per-row slot permutation."""

    def carry(old):
        picked = np.take_along_axis(old, np.maximum(slot_map, 0), axis=1)
        return np.where(slot_map >= 0, picked, 0.0)

    return carry


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    """Every training constant, exposed so ablations can move them."""

    total_iters: int = 40000
    warmup_iters: int = 3000
    lambda_dssim: float = 0.2
    lambda_mu_t: float = 1e-3
    lambda_rot_t: float = 1.0
    lambda_trans_t: float = 1.0
    num_superpoints: int = 300
    knn: int = 5
    sh_degree: int = 1
    init_points: int = 2000
    net_depth: int = 8
    net_width: int = 256
    nonrigid_depth: int = 3
    nonrigid_width: int = 64
    net_lr_init: float = 1e-3
    net_lr_final: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    pos_lr_init: float = 1.6e-4  # scaled by scene extent
    pos_lr_final: float = 1.6e-6
    scale_lr: float = 5e-3
    quat_lr: float = 1e-3
    opacity_lr: float = 5e-2
    sh_lr: float = 2.5e-3  # bands above dc run at sh_lr / 20
    assoc_lr: float = 5e-3
    densify_from: int = 600
    densify_until: int = 15000
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    knn_refresh_interval: int = 100
    nonrigid_iters: int = 20000
    distill_iters: int = 2000
    distill_lambda_mu: float = 1.0
    distill_lambda_rot: float = 1.0
    pose_iters: int = 1000
    pose_lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_iters < self.total_iters:
            raise ValueError("warm-up must end before training does")
        for name in ("lambda_dssim", "lambda_mu_t", "lambda_rot_t", "lambda_trans_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def synthetic(cls, **kw):
        """Synthetic-dataset profile (the defaults)."""
        return cls(**kw)

    @classmethod
    def real(cls, **kw):
        """Real-scene profile: sparser density control, slower opacity resets."""
        kw.setdefault("densify_from", 1000)
        kw.setdefault("densify_interval", 1000)
        kw.setdefault("opacity_reset_interval", 6000)
        return cls(**kw)

    @classmethod
    def scaled(cls, total_iters, warmup_iters, **kw):
        """Shrink the schedule for small scenes, keeping phase proportions."""
        kw.setdefault("densify_from", warmup_iters)
        kw.setdefault("densify_until", total_iters // 2)
        kw.setdefault("opacity_reset_interval", total_iters + 1)  # never fires
        return cls(total_iters=total_iters, warmup_iters=warmup_iters, **kw)


# -- cloud initialization ----------------------------------------------------


def camera_extent(frames: FrameSet):
    """Scene size proxy: slightly padded camera spread around their centroid."""
    centers = np.stack([f.camera.center for f in frames.frames])
    avg = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - avg, axis=1)))
    return 1.1 * radius if radius > 0 else 1.0


def random_init_points(frames: FrameSet, n, rng):
    """Uniform cube around the camera centroid, sized from the camera spread."""
    centers = np.stack([f.camera.center for f in frames.frames])
    avg = centers.mean(axis=0)
    half = 0.4 * camera_extent(frames)
    return avg + rng.uniform(-half, half, (n, 3))


def logit(p):
    return float(np.log(p / (1.0 - p)))


def init_cloud_from_points(points, colors=None, sh_degree=1, opacity=0.1):
    """Starting cloud: isotropic scales from local point spacing, identity
    rotations, uniform low opacity, dc color from the point color (gray when
    absent)."""
    points = np.asarray(points, dtype=np.float64)
    p = len(points)
    if p >= 4:
        d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        near = np.sort(d2, axis=1)[:, :3]
        mean_d2 = np.maximum(near.mean(axis=1), 1e-7)
        scales = np.sqrt(mean_d2)
    else:
        scales = np.full(p, 0.1)
    quats = np.zeros((p, 4))
    quats[:, 0] = 1.0
    bands = sh_band_count(sh_degree)
    sh = np.zeros((p, bands, 3))
    if colors is not None:
        sh[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
    return GaussianCloud(
        means=points.copy(),
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        quats=quats,
        opacity_logits=np.full(p, logit(opacity)),
        sh=sh,
    )


# -- density control ---------------------------------------------------------


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient norms per Gaussian."""

    accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def empty(cls, p):
        return cls(np.zeros(p), np.zeros(p))

    def observe(self, proj, width, height):
        g = getattr(proj.means2d, "grad", None)
        if g is None:
            return
        scaled = g * np.array([width / 2.0, height / 2.0])  # half-image units
        norms = np.linalg.norm(scaled, axis=1)
        vis = proj.radii > 0
        self.accum[vis] += norms[vis]
        self.denom[vis] += 1.0


def densify_and_prune(params, sp, opt, stats, extent, cfg, rng):
    """Clone small high-gradient Gaussians, split big ones, prune transparent ones.

    Children copy the parent's association row; all changed tensors are
    re-registered with moment rows carried for survivors, zeroed for births.
    ``sp`` may be None during warm-up, before superpoints exist. Returns
    fresh stats plus a count summary.
    """
    means = params["means"].data
    log_scales = params["log_scales"].data
    quats = params["quats"].data
    p = len(means)

    avg = np.zeros(p)
    seen = stats.denom > 0
    avg[seen] = stats.accum[seen] / stats.denom[seen]
    hot = avg > cfg.densify_grad_threshold
    top_scale = np.exp(log_scales).max(axis=1)
    small = top_scale <= cfg.percent_dense * extent
    clone = hot & small
    split = hot & ~small

    keep = ~split  # split parents are replaced by their children
    order_old = np.flatnonzero(keep)
    clone_src = np.flatnonzero(clone)
    split_src = np.flatnonzero(split)

    def rebuild(arr):
        parts = [arr[keep], arr[clone_src]]
        for _ in range(2):
            parts.append(arr[split_src])
        return np.concatenate(parts, axis=0) if len(arr) else arr

    new_means = rebuild(means)
    new_scales = rebuild(log_scales)
    n_keep, n_clone, n_split = len(order_old), len(clone_src), len(split_src)
    if n_split:
        rot = np.stack([_rotmat(quats[i]) for i in split_src])
        sc = np.exp(log_scales[split_src])
        for c in range(2):
            offs = rng.normal(size=(n_split, 3)) * sc
            rows = slice(n_keep + n_clone + c * n_split, n_keep + n_clone + (c + 1) * n_split)
            new_means[rows] = means[split_src] + np.einsum("nij,nj->ni", rot, offs)
            new_scales[rows] = log_scales[split_src] - np.log(1.6)
    row_map = np.concatenate(
        [order_old, np.full(n_clone + 2 * n_split, -1, dtype=np.int64)]
    )
    src_map = np.concatenate([order_old, clone_src, split_src, split_src])

    opacity = 1.0 / (1.0 + np.exp(-params["opacity_logits"].data[src_map]))
    alive = opacity >= cfg.prune_opacity
    if not alive.any():
        alive[int(np.argmax(opacity))] = True  # never empty the cloud
    row_map = row_map[alive]
    src_map = src_map[alive]

    changed = n_clone or n_split or not alive.all()
    if not changed:
        return DensifyStats.empty(p), {"cloned": 0, "split": 0, "pruned": 0, "points": p}

    new_arrays = {
        "means": new_means[alive],
        "log_scales": new_scales[alive],
        "quats": quats[src_map],
        "opacity_logits": params["opacity_logits"].data[src_map],
        "sh": params["sh"].data[src_map],
    }
    for name, arr in new_arrays.items():
        tensor = ad.Tensor(np.ascontiguousarray(arr), requires_grad=True)
        params[name] = tensor
        opt.replace(name, tensor, _carry_rows(row_map))

    if sp is not None:
        sp.neighbors = sp.neighbors[src_map]
        sp.logits = np.ascontiguousarray(sp.logits[src_map])
        assoc = ad.Tensor(sp.logits, requires_grad=True)
        params["assoc"] = assoc
        opt.replace("assoc", assoc, _carry_rows(row_map))

    pruned = int((~alive).sum())
    counts = {"cloned": n_clone, "split": n_split, "pruned": pruned, "points": len(src_map)}
    return DensifyStats.empty(len(src_map)), counts


def _rotmat(q):
    from .geom import quat_to_rotmat_many

    return quat_to_rotmat_many(q[None])[0]


def reset_opacity(params, opt, ceiling=0.01):
    """Clamp every opacity to at most ``ceiling`` and cold-start its moments."""
    cap = logit(ceiling)
    np.minimum(params["opacity_logits"].data, cap, out=params["opacity_logits"].data)
    opt.reset_moments("opacity_logits")


def _refresh_associations(params, sp, opt, means):
    slot_map = refresh_neighbors(sp, means)
    assoc = ad.Tensor(sp.logits, requires_grad=True)
    params["assoc"] = assoc
    opt.replace("assoc", assoc, _carry_slots(slot_map))


# -- training loops ----------------------------------------------------------


@dataclass
class TrainResult:
    model: SceneModel
    losses: list = field(default_factory=list)
    events: list = field(default_factory=list)


def _register_cloud(opt, params, cfg, extent):
    opt.register("means", params["means"], _scaled_pos_lr(cfg, extent))
    opt.register("log_scales", params["log_scales"], cfg.scale_lr)
    opt.register("quats", params["quats"], cfg.quat_lr)
    opt.register("opacity_logits", params["opacity_logits"], cfg.opacity_lr)
    bands = params["sh"].data.shape[1]
    sh_lr = np.full((1, bands, 1), cfg.sh_lr / 20.0)
    sh_lr[0, 0, 0] = cfg.sh_lr
    opt.register("sh", params["sh"], sh_lr)


def _scaled_pos_lr(cfg, extent):
    return expon_lr(cfg.pos_lr_init * extent, cfg.pos_lr_final * extent, cfg.total_iters)


def _init_superpoints(params, cfg, rng):
    means = params["means"].data
    m = min(cfg.num_superpoints, len(means))
    idx = farthest_point_sampling(means, m, start=0)
    positions = means[idx].copy()
    k = min(cfg.knn, m)
    neighbors = nearest_superpoints(means, positions, k)
    sp = SuperpointModel(positions, neighbors, init_association_logits(neighbors))
    net = df.init_deform_net(rng, depth=cfg.net_depth, width=cfg.net_width)
    assoc = ad.Tensor(sp.logits, requires_grad=True)
    return sp, net, assoc


def _register_dynamics(opt, params, sp, net, cfg):
    opt.register("assoc", params["assoc"], cfg.assoc_lr)
    schedule = expon_lr(cfg.net_lr_init, cfg.net_lr_final, cfg.total_iters)
    for name, tensor in df.net_parameters(net):
        opt.register(f"net.{name}", tensor, schedule)


def train_spgs(frames: FrameSet, cfg: TrainConfig, *, init_points=None, init_colors=None, callback=None):
    """The two-phase training loop.

    Warm-up renders the canonical cloud against every frame so the static
    geometry settles; at its end superpoints are seeded by farthest point
    sampling and the deformation network joins. The main phase samples frames
    in seeded random order and optimizes the full objective, interleaving
    density control, neighbor refreshes, and superpoint position updates.
    """
    if len(frames) == 0:
        raise ValueError("dataset has no frames")
    rng = np.random.default_rng(cfg.seed)
    extent = camera_extent(frames)
    if init_points is None:
        init_points = random_init_points(frames, cfg.init_points, rng)
        init_colors = None
    cloud0 = init_cloud_from_points(init_points, init_colors, cfg.sh_degree)
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in cloud_params(cloud0).items()}
    opt = Adam(cfg.betas, cfg.eps)
    _register_cloud(opt, params, cfg, extent)

    sp = net = None
    stats = DensifyStats.empty(len(cloud0))
    raster_cfg = RasterConfig()
    bg = frames.background
    order = []
    losses, events = [], []

    for it in range(1, cfg.total_iters + 1):
        if sp is None and it > cfg.warmup_iters:
            sp, net, assoc = _init_superpoints(params, cfg, rng)
            params["assoc"] = assoc
            _register_dynamics(opt, params, sp, net, cfg)
            events.append((it, "superpoints", sp.num_superpoints))
        if not order:
            order = list(rng.permutation(len(frames)))
        frame = frames.frames[order.pop()]

        if sp is None:
            res = render_view(params, frame.camera, bg, cfg=raster_cfg)
            loss = image_loss(res.image, frame.image, cfg.lambda_dssim)
        else:
            update_canonical_positions(sp, params["means"].data)
            omega, trans = df.predict_deformation(net, sp.positions, frame.time)
            probs = association_probabilities(params["assoc"])
            assignment = hard_assignment(probs, sp.neighbors)
            res = render_view(
                params, frame.camera, bg, motion=(omega, trans, assignment), cfg=raster_cfg
            )
            loss = image_loss(res.image, frame.image, cfg.lambda_dssim)
            loss = add_property_terms(loss, cfg, probs, sp, res.means, omega, trans, assignment)

        loss.backward()
        stats.observe(res.proj, frame.camera.width, frame.camera.height)
        opt.step(it)
        opt.zero_grads()
        losses.append(float(ad.data_of(loss)))

        in_window = cfg.densify_from <= it <= cfg.densify_until
        if in_window and it % cfg.densify_interval == 0:
            stats, counts = densify_and_prune(params, sp, opt, stats, extent, cfg, rng)
            if sp is not None:
                _refresh_associations(params, sp, opt, params["means"].data)
            events.append((it, "densify", counts))
        elif sp is not None and it % cfg.knn_refresh_interval == 0:
            _refresh_associations(params, sp, opt, params["means"].data)
        if it % cfg.opacity_reset_interval == 0 and it <= cfg.densify_until:
            reset_opacity(params, opt)
            events.append((it, "opacity_reset", None))
        if callback is not None:
            callback(it, losses[-1], params, sp, net)

    if sp is None:
        raise ValueError("training ended during warm-up; raise total_iters")
    update_canonical_positions(sp, params["means"].data)
    model = SceneModel(params_to_cloud(params), sp, net, frames.times())
    model.ensure_cache()
    return TrainResult(model, losses, events)


def train_nonrigid_stage(model: SceneModel, frames: FrameSet, cfg: TrainConfig, *, callback=None):
    """Refinement stage: add the per-Gaussian residual network.

    Nothing freezes; the objective drops to the image loss alone. Neighbor
    lists stay fixed because the association logits receive no image
    gradient under the hard assignment.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    extent = camera_extent(frames)
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in cloud_params(model.cloud).items()}
    sp = model.superpoints
    net = model.net
    nonrigid = df.init_nonrigid_net(rng, depth=cfg.nonrigid_depth, width=cfg.nonrigid_width)

    opt = Adam(cfg.betas, cfg.eps)
    _register_cloud(opt, params, cfg, extent)
    assoc = ad.Tensor(sp.logits, requires_grad=True)
    params["assoc"] = assoc
    _register_dynamics(opt, params, sp, net, cfg)
    schedule = expon_lr(cfg.net_lr_init, cfg.net_lr_final, cfg.nonrigid_iters)
    for name, tensor in df.net_parameters(nonrigid):
        opt.register(f"res.{name}", tensor, schedule)

    bg = frames.background
    order = []
    losses = []
    for it in range(1, cfg.nonrigid_iters + 1):
        if not order:
            order = list(rng.permutation(len(frames)))
        frame = frames.frames[order.pop()]
        update_canonical_positions(sp, params["means"].data)
        omega, trans = df.predict_deformation(net, sp.positions, frame.time)
        assignment = hard_assignment(association_probabilities(params["assoc"]), sp.neighbors)
        res = render_view(
            params,
            frame.camera,
            bg,
            motion=(omega, trans, assignment),
            nonrigid_net=nonrigid,
            t=frame.time,
        )
        loss = image_loss(res.image, frame.image, cfg.lambda_dssim)
        loss.backward()
        opt.step(it)
        opt.zero_grads()
        losses.append(float(ad.data_of(loss)))
        if callback is not None:
            callback(it, losses[-1], params, sp, net)

    model.cloud = params_to_cloud(params)
    model.nonrigid = nonrigid
    model.cache = None  # rigid network weights moved
    return TrainResult(model, losses)


# -- distillation ------------------------------------------------------------


def distillation_error(mu_pred, omega_pred, mu_target, omega_target, cfg):
    """Mean squared trajectory mismatch: positions plus axis-angle rotations."""
    d = mu_pred - mu_target
    err = cfg.distill_lambda_mu * ad.mean(d * d)
    r = omega_pred - omega_target
    return err + cfg.distill_lambda_rot * ad.mean(r * r)


def _delta_axis_angles(traj_quat, canonical_quats):
    """Teacher rotation targets: the per-timestep delta from canonical, (T, P, 3)."""
    qc = canonical_quats / np.linalg.norm(canonical_quats, axis=1, keepdims=True)
    rows = []
    for q in traj_quat:
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        rows.append(quat_to_axis_angle(quat_multiply(qn, quat_conjugate(qc))))
    return np.stack(rows)


def distill(trajectory, cloud: GaussianCloud, cfg: TrainConfig, frames: FrameSet | None = None, *, callback=None):
    """Fit fresh associations and a deformation network to teacher trajectories.

    ``trajectory`` supplies (times, centers (T, P, 3), quaternions (T, P, 4))
    for the teacher's per-Gaussian motion; the canonical cloud is copied from
    the teacher and stays frozen. With frames present the image loss joins
    the trajectory error.
    """
    times, traj_mu, traj_quat = trajectory
    times = np.asarray(times, dtype=np.float64)
    if len(times) < 2:
        raise ValueError("need >= 2 timesteps")
    if traj_mu.shape[1] != len(cloud) or traj_quat.shape[1] != len(cloud):
        raise ValueError("trajectory and cloud row counts disagree")

    rng = np.random.default_rng(cfg.seed)
    sp, net, assoc = _init_superpoints({"means": ad.Tensor(cloud.means)}, cfg, rng)
    omega_targets = _delta_axis_angles(traj_quat, cloud.quats)

    opt = Adam(cfg.betas, cfg.eps)
    opt.register("assoc", assoc, cfg.assoc_lr)
    schedule = expon_lr(cfg.net_lr_init, cfg.net_lr_final, cfg.distill_iters)
    for name, tensor in df.net_parameters(net):
        opt.register(f"net.{name}", tensor, schedule)

    bg = frames.background if frames is not None else None
    order = []
    losses = []
    for it in range(1, cfg.distill_iters + 1):
        k = int(rng.integers(len(times)))
        t = float(times[k])
        update_canonical_positions(sp, cloud.means)
        omega, trans = df.predict_deformation(net, sp.positions, t)
        probs = association_probabilities(assoc)
        assignment = hard_assignment(probs, sp.neighbors)
        om_rows = ad.take(omega, assignment)
        tr_rows = ad.take(trans, assignment)
        R = so3_exp_many(om_rows)
        mu_pred = ad.reshape(ad.matmul(R, cloud.means[:, :, None]), (len(cloud), 3)) + tr_rows
        loss = distillation_error(mu_pred, om_rows, traj_mu[k], omega_targets[k], cfg)
        if frames is not None:
            if not order:
                order = list(rng.permutation(len(frames)))
            frame = frames.frames[order.pop()]
            omega_f, trans_f = df.predict_deformation(net, sp.positions, frame.time)
            res = render_view(
                cloud_params(cloud), frame.camera, bg, motion=(omega_f, trans_f, assignment)
            )
            img = image_loss(res.image, frame.image, cfg.lambda_dssim)
            loss = loss + add_property_terms(
                img, cfg, probs, sp, res.means, omega_f, trans_f, assignment
            )
        loss.backward()
        opt.step(it)
        opt.zero_grads()
        losses.append(float(ad.data_of(loss)))
        if callback is not None:
            callback(it, losses[-1], None, sp, net)

    update_canonical_positions(sp, cloud.means)
    clone = GaussianCloud(
        cloud.means.copy(),
        cloud.log_scales.copy(),
        cloud.quats.copy(),
        cloud.opacity_logits.copy(),
        cloud.sh.copy(),
    )
    model = SceneModel(clone, sp, net, times)
    model.ensure_cache()
    return TrainResult(model, losses)


def distillation_residual(model: SceneModel, trajectory, cfg: TrainConfig):
    """Mean trajectory error of a model against teacher targets (diagnostic)."""
    times, traj_mu, traj_quat = trajectory
    omega_targets = _delta_axis_angles(traj_quat, model.cloud.quats)
    assignment = model.assignment()
    total = 0.0
    for k, t in enumerate(times):
        omega, trans = motion_at_time(model, float(t), "network")
        om_rows = omega[assignment]
        mu = (so3_exp_many(om_rows) @ model.cloud.means[:, :, None]).reshape(-1, 3)
        mu = mu + trans[assignment]
        d = mu - traj_mu[k]
        r = om_rows - omega_targets[k]
        total += cfg.distill_lambda_mu * float(np.mean(d * d))
        total += cfg.distill_lambda_rot * float(np.mean(r * r))
    return total / len(times)


# -- pose estimation ---------------------------------------------------------


def estimate_pose(model: SceneModel, frames: FrameSet, cfg: TrainConfig, *, callback=None):
    """Fit per-frame superpoint transforms to new observations.

    Every model parameter stays frozen; only the M (omega, trans) rows move.
    Each frame starts from the previous solution; the first starts from the
    model's last training timestep.
    """
    params = cloud_params(model.cloud)
    assignment = model.assignment()
    om0, tr0 = motion_at_time(model, float(model.train_times[-1]), "interp")
    bg = frames.background
    transforms, scores = [], []
    for frame in frames.frames:
        omega = ad.Tensor(om0.copy(), requires_grad=True)
        trans = ad.Tensor(tr0.copy(), requires_grad=True)
        opt = Adam(cfg.betas, cfg.eps)
        opt.register("omega", omega, cfg.pose_lr)
        opt.register("trans", trans, cfg.pose_lr)
        for it in range(1, cfg.pose_iters + 1):
            res = render_view(
                params,
                frame.camera,
                bg,
                motion=(omega, trans, assignment),
                nonrigid_net=model.nonrigid,
                t=frame.time,
            )
            loss = image_loss(res.image, frame.image, cfg.lambda_dssim)
            loss.backward()
            opt.step(it)
            opt.zero_grads()
            if model.nonrigid is not None:
                ad.zero_grads([p for _, p in df.net_parameters(model.nonrigid)])
        with ad.no_grad():
            final = render_view(
                params,
                frame.camera,
                bg,
                motion=(omega.data, trans.data, assignment),
                nonrigid_net=model.nonrigid,
                t=frame.time,
            )
        score = psnr(final.image, frame.image)
        om0, tr0 = omega.data.copy(), trans.data.copy()
        transforms.append((om0.copy(), tr0.copy()))
        scores.append(score)
        if callback is not None:
            callback(len(transforms), score)
    return transforms, scores


# -- evaluation --------------------------------------------------------------


def evaluate(model: SceneModel, frames: FrameSet, *, path="network", cfg=None):
    """Per-frame PSNR/SSIM of the model against ground-truth frames."""
    rows = []
    for frame in frames.frames:
        res = render_at_time(model, frame.camera, frames.background, frame.time, path=path, cfg=cfg)
        img = ad.data_of(res.image)
        rows.append(
            {
                "name": frame.name,
                "psnr": float(min(psnr(img, frame.image), PSNR_CAP)),
                "ssim": float(ad.data_of(ssim(np.clip(img, 0.0, 1.0), frame.image))),
            }
        )
    mean_psnr = float(np.mean([r["psnr"] for r in rows])) if rows else 0.0
    mean_ssim = float(np.mean([r["ssim"] for r in rows])) if rows else 0.0
    return {"frames": rows, "mean_psnr": mean_psnr, "mean_ssim": mean_ssim}
