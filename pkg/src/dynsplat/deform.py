"""Deformation networks and the interpolation cache.

A DeformNet maps (encoded position, encoded time) to one axis-angle rotation
and one translation per input row. The same architecture serves both the
per-superpoint field (depth 8, width 256, input skip) and the per-Gaussian
non-rigid refinement (depth 3, width 64). Output heads start at zero, so a
fresh network deforms nothing: rendering at any time equals rendering the
canonical cloud.

The cache stores the field sampled at the training timesteps; between them
transforms are interpolated linearly in axis-angle space, which is both the
fast inference path and the editing/distillation substrate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geom


@dataclass
class DeformNet:
    hidden: list  # [(weight (n_in, n_out), bias (n_out,))], Tensors
    heads: tuple  # ((w, b) for the axis-angle head, (w, b) for translation)
    skip_at: int | None  # hidden index whose input re-concatenates the encoding
    pos_freqs: int
    time_freqs: int

    def input_width(self):
        return 6 * self.pos_freqs + 2 * self.time_freqs


def _hidden_layer(rng, n_in, n_out):
    w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
    return (
        ad.Tensor(w, requires_grad=True),
        ad.Tensor(np.zeros(n_out), requires_grad=True),
    )


def _zero_layer(n_in, n_out):
    return (
        ad.Tensor(np.zeros((n_in, n_out)), requires_grad=True),
        ad.Tensor(np.zeros(n_out), requires_grad=True),
    )


def init_deform_net(rng, depth=8, width=256, pos_freqs=10, time_freqs=6):
    """Superpoint deformation field; heads zero so it starts as the identity."""
    d_in = 6 * pos_freqs + 2 * time_freqs
    skip_at = 4 if depth > 4 else None
    hidden = []
    for i in range(depth):
        n_in = width if i else d_in
        if i == skip_at:
            n_in = width + d_in
        hidden.append(_hidden_layer(rng, n_in, width))
    heads = (_zero_layer(width, 3), _zero_layer(width, 3))
    return DeformNet(hidden, heads, skip_at, pos_freqs, time_freqs)


def init_nonrigid_net(rng, depth=3, width=64, pos_freqs=10, time_freqs=6):
    """Per-Gaussian residual field applied after the rigid motion."""
    return init_deform_net(rng, depth=depth, width=width, pos_freqs=pos_freqs, time_freqs=time_freqs)


def net_parameters(net):
    """Flat (name, tensor) pairs, ordered for optimizers and checkpoints."""
    out = []
    for i, (w, b) in enumerate(net.hidden):
        out.append((f"hidden{i}.w", w))
        out.append((f"hidden{i}.b", b))
    for name, (w, b) in zip(("omega", "trans"), net.heads):
        out.append((f"{name}.w", w))
        out.append((f"{name}.b", b))
    return out


def predict_deformation(net, points, t):
    """Axis-angle and translation rows, one per point, at scalar time t.

    Graph-capable in the points and the weights; used for superpoints
    (canonical positions) and for the non-rigid stage (deformed centers).
    """
    enc_p = geom.positional_encode(points, net.pos_freqs)
    n = ad.data_of(points).shape[0]
    enc_t = geom.positional_encode(np.full((n, 1), float(t)), net.time_freqs)
    x = ad.concatenate([enc_p, enc_t], axis=-1)
    h = x
    for i, (w, b) in enumerate(net.hidden):
        if i == net.skip_at:
            h = ad.concatenate([h, x], axis=-1)
        h = ad.relu(ad.matmul(h, w) + b)
    (wo, bo), (wt, bt) = net.heads
    return ad.matmul(h, wo) + bo, ad.matmul(h, wt) + bt


def apply_rigid(means, rots, omega, trans):
    """Move Gaussians rigidly: mu -> R mu + t, rotation -> R rot.

    ``rots`` are rotation matrices (..., 3, 3); omega rows turn into matrices
    through the exponential map, so a zero row is exactly the identity.
    """
    R = geom.so3_exp_many(omega)
    mu = ad.matmul(R, ad.reshape(means, ad.data_of(means).shape + (1,)))
    mu = ad.reshape(mu, ad.data_of(means).shape) + trans
    return mu, ad.matmul(R, rots)


def transform_quats(omega, quats):
    """Quaternion form of apply_rigid's rotation update (detached)."""
    dq = geom.axis_angle_to_quat(ad.data_of(omega))
    return geom.quat_multiply(dq, ad.data_of(quats))


def deform_cloud(means, quats, assignment, omega, trans):
    """Transform every Gaussian by its assigned superpoint's (omega, trans).

    Returns deformed centers (graph-capable) and quaternions (detached
    convenience representation; the differentiable rotation path composes
    matrices through apply_rigid instead).
    """
    om = ad.take(omega, assignment)
    tr = ad.take(trans, assignment)
    R = geom.so3_exp_many(om)
    mu = ad.matmul(R, ad.reshape(means, ad.data_of(means).shape + (1,)))
    mu = ad.reshape(mu, ad.data_of(means).shape) + tr
    return mu, transform_quats(om, quats)


def compose_full(means, rots, rigid, nonrigid):
    """Rigid motion then per-Gaussian residual: mu -> R_hat (R mu + t) + t_hat."""
    mu, rot = apply_rigid(means, rots, *rigid)
    return apply_rigid(mu, rot, *nonrigid)


@dataclass
class DeformationCache:
    """The deformation field tabulated at the training timesteps."""

    times: np.ndarray  # (T,) strictly increasing
    omegas: np.ndarray  # (T, M, 3)
    trans: np.ndarray  # (T, M, 3)

    def validate(self):
        if self.times.ndim != 1 or len(self.times) < 2:
            raise ValueError("cache needs at least two timesteps")
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("cache timesteps must be strictly increasing")
        t, m = self.omegas.shape[:2]
        if len(self.times) != t or self.trans.shape != (t, m, 3) or self.omegas.shape[2] != 3:
            raise ValueError("cache array shapes disagree")
        return self


def build_deformation_cache(net, positions, train_times):
    """Evaluate the network at every training timestep and freeze the result."""
    times = np.asarray(train_times, dtype=np.float64)
    omegas, trans = [], []
    with ad.no_grad():
        for t in times:
            o, tr = predict_deformation(net, ad.data_of(positions), float(t))
            omegas.append(ad.data_of(o))
            trans.append(ad.data_of(tr))
    return DeformationCache(times, np.stack(omegas), np.stack(trans)).validate()


def deform_at_time(cache, t):
    """Transforms at an arbitrary time: exact at stored timesteps, linear in
    axis-angle space between them, clamped outside the stored range."""
    t = float(min(max(t, cache.times[0]), cache.times[-1]))
    k = int(np.searchsorted(cache.times, t))
    if k < len(cache.times) and cache.times[k] == t:
        return cache.omegas[k].copy(), cache.trans[k].copy()
    w = (t - cache.times[k - 1]) / (cache.times[k] - cache.times[k - 1])
    return geom.interpolate_rigid_arrays(
        cache.omegas[k - 1], cache.trans[k - 1], cache.omegas[k], cache.trans[k], w
    )
