"""End-to-end differentiable rendering of the dynamic scene.

One render is: move the canonical Gaussians by their assigned superpoint's
rigid transform (plus an optional per-Gaussian residual from the non-rigid
network), rebuild covariances from the moved rotations, project, evaluate
view-dependent color, and blend. Every step between parameters and pixels is
graph-capable, so a single backward pass reaches the cloud, the association
logits, and the network weights.

Parameters travel as a plain dict (name -> Tensor or ndarray) so the training
loop, the optimizer, and checkpointing all address them the same way;
``cloud_params`` / ``params_to_cloud`` convert to and from storage form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import deform as df
from .geom import quat_to_rotmat_many
from .rasterizer import RasterConfig, project_gaussians, rasterize
from .scene import GaussianCloud, rotation_covariances, sh_degree_from_bands, sh_to_rgb
from .superpoint import SuperpointModel, association_probabilities, hard_assignment

PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh")


def cloud_params(cloud: GaussianCloud):
    """The cloud's arrays as a params dict (no copies; inference reads only)."""
    return {
        "means": cloud.means,
        "log_scales": cloud.log_scales,
        "quats": cloud.quats,
        "opacity_logits": cloud.opacity_logits,
        "sh": cloud.sh,
    }


def params_to_cloud(params):
    """Materialize a storage cloud from a params dict (detached copies)."""
    return GaussianCloud(*(ad.data_of(params[k]).copy() for k in PARAM_NAMES))


@dataclass
class RenderResult:
    """A render plus the graph handles training reads back.

    ``proj.means2d.grad`` carries the screen-space position gradient used by
    the densification statistics; ``means`` are the deformed world centers.
    """

    image: object  # (H, W, 3) Tensor or ndarray
    proj: object  # ProjectedSplats
    means: object  # (P, 3) deformed centers
    colors: object  # (P, 3) evaluated SH colors
    opacities: object  # (P,) blend opacities
    output: object  # RenderOutput with detached diagnostics


def render_view(
    params,
    camera,
    background,
    *,
    motion=None,
    nonrigid_net=None,
    t=None,
    cfg: RasterConfig | None = None,
    sh_degree=None,
):
    """Render a params dict from one camera.

    motion : None or (omega, trans, assignment)
        Per-superpoint axis-angle rows, translation rows, and the hard
        assignment mapping each Gaussian to its superpoint. None renders the
        canonical cloud.
    nonrigid_net : optional residual network evaluated at the moved centers;
        requires ``t``.
    """
    cfg = RasterConfig() if cfg is None else cfg
    means = params["means"]
    rots = quat_to_rotmat_many(params["quats"])
    if motion is not None:
        omega, trans, assignment = motion
        om = ad.take(omega, np.asarray(assignment, dtype=np.int64))
        tr = ad.take(trans, np.asarray(assignment, dtype=np.int64))
        means, rots = df.apply_rigid(means, rots, om, tr)
    if nonrigid_net is not None:
        if t is None:
            raise ValueError("the non-rigid residual needs the render time")
        om2, tr2 = df.predict_deformation(nonrigid_net, means, t)
        means, rots = df.apply_rigid(means, rots, om2, tr2)

    covs = rotation_covariances(rots, params["log_scales"])
    proj = project_gaussians(means, covs, camera, cfg)

    d = means - camera.center
    norm = ad.sqrt(ad.sum(d * d, axis=-1, keepdims=True))
    dirs = d / ad.maximum(norm, 1e-12)
    if sh_degree is None:
        sh_degree = sh_degree_from_bands(ad.data_of(params["sh"]).shape[1])
    colors = sh_to_rgb(params["sh"], dirs, sh_degree)
    opacities = ad.sigmoid(params["opacity_logits"])

    out = rasterize(proj, colors, opacities, camera.height, camera.width, background, cfg)
    return RenderResult(
        image=out.image, proj=proj, means=means, colors=colors, opacities=opacities, output=out
    )


@dataclass
class SceneModel:
    """Everything a trained dynamic scene carries.

    The cache tabulates the deformation network at the training timesteps;
    it is built on first use and must be dropped (``cache = None``) whenever
    the network or the superpoint positions change.
    """

    cloud: GaussianCloud
    superpoints: SuperpointModel
    net: df.DeformNet
    train_times: np.ndarray
    nonrigid: df.DeformNet | None = None
    cache: df.DeformationCache | None = field(default=None, repr=False)

    def __post_init__(self):
        self.train_times = np.asarray(self.train_times, dtype=np.float64).reshape(-1)

    def assignment(self):
        """Hard superpoint id per Gaussian from the association logits."""
        probs = association_probabilities(self.superpoints.logits)
        return hard_assignment(probs, self.superpoints.neighbors)

    def ensure_cache(self):
        if self.cache is None:
            self.cache = df.build_deformation_cache(
                self.net, self.superpoints.positions, self.train_times
            )
        return self.cache


def motion_at_time(model: SceneModel, t, path="network"):
    """Detached per-superpoint (omega, trans) at time t.

    "network" evaluates the deformation network; "interp" reads the cached
    tabulation (exact at training timesteps, interpolated between). At a
    training timestep both paths return bitwise equal arrays, because the
    cache rows are the network's own outputs stored unchanged.
    """
    if path == "network":
        if model.net is None:
            raise ValueError("model has no deformation network; use the interpolation path")
        with ad.no_grad():
            om, tr = df.predict_deformation(model.net, model.superpoints.positions, float(t))
        return ad.data_of(om), ad.data_of(tr)
    if path == "interp":
        return df.deform_at_time(model.ensure_cache(), float(t))
    raise ValueError(f"unknown deformation path {path!r}")


def render_at_time(
    model: SceneModel,
    camera,
    background,
    t,
    *,
    path="network",
    cfg: RasterConfig | None = None,
    sh_degree=None,
):
    """Render the model at time t through either deformation path."""
    omega, trans = motion_at_time(model, t, path)
    return render_view(
        cloud_params(model.cloud),
        camera,
        background,
        motion=(omega, trans, model.assignment()),
        nonrigid_net=model.nonrigid,
        t=t,
        cfg=cfg,
        sh_degree=sh_degree,
    )


def deformed_state(model: SceneModel, t, path="network"):
    """Detached per-Gaussian centers (P, 3) and quaternions (P, 4) at time t."""
    omega, trans = motion_at_time(model, t, path)
    assignment = model.assignment()
    with ad.no_grad():
        mu, quats = df.deform_cloud(
            model.cloud.means, model.cloud.quats, assignment, omega, trans
        )
        mu = ad.data_of(mu)
        if model.nonrigid is not None:
            om2, tr2 = df.predict_deformation(model.nonrigid, mu, float(t))
            mu2, _ = df.apply_rigid(mu, quat_to_rotmat_many(quats), om2, tr2)
            quats = df.transform_quats(om2, quats)
            mu = ad.data_of(mu2)
    return mu, quats


def collect_trajectory(model: SceneModel, times=None, path="network"):
    """Per-Gaussian deformed centers and quaternions at each time.

    Returns (times (T,), means (T, P, 3), quats (T, P, 4)); the trajectory a
    distillation student is trained to replicate.
    """
    times = model.train_times if times is None else times
    times = np.asarray(times, dtype=np.float64).reshape(-1).copy()
    mus, quats = [], []
    for t in times:
        mu, q = deformed_state(model, float(t), path)
        mus.append(mu)
        quats.append(q)
    return times, np.stack(mus), np.stack(quats)
