"""Sparse learnable association between Gaussians and superpoints.

Each Gaussian keeps K candidate superpoints (its nearest centers) and a logit
per candidate; a row softmax turns logits into association weights. Properties
flow both ways through the same weights: gathering averages Gaussian values
into superpoints (normalized per superpoint over incoming mass), scattering
redistributes superpoint values back per Gaussian. The round trip drives the
property-reconstruction loss; rendering uses the hard argmax assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class SuperpointModel:
    """Superpoint centers plus the sparse association state."""

    positions: np.ndarray  # (M, 3) canonical centers, refreshed from the association
    neighbors: np.ndarray  # (P, K) candidate superpoint ids, distance-sorted
    logits: np.ndarray  # (P, K) association logits

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.neighbors = np.ascontiguousarray(self.neighbors, dtype=np.int64)
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float64)

    @property
    def num_superpoints(self):
        return self.positions.shape[0]

    @property
    def k(self):
        return self.neighbors.shape[1]

    def validate(self):
        p, k = self.neighbors.shape
        if self.logits.shape != (p, k):
            raise ValueError("logits shape does not match neighbors")
        if self.neighbors.min(initial=0) < 0 or self.neighbors.max(initial=-1) >= self.num_superpoints:
            raise ValueError("neighbor ids out of range")
        for row in self.neighbors:
            if len(set(row.tolist())) != k:
                raise ValueError("neighbor rows must hold distinct superpoint ids")
        return self


def farthest_point_sampling(points, m, start=0):
    """Indices of m points chosen by iterative farthest-point coverage.

    Deterministic: starts at ``start`` and breaks argmax ties at the lowest
    index, so equal inputs give equal samples.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot pick {m} of {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    d2 = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def nearest_superpoints(points, centers, k, chunk=4096):
    """(P, k) ids of the k closest centers per point, ties to the lower id."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if k > centers.shape[0]:
        raise ValueError("k exceeds the number of superpoints")
    out = np.empty((points.shape[0], k), dtype=np.int64)
    for lo in range(0, points.shape[0], chunk):
        block = points[lo : lo + chunk]
        d2 = np.sum((block[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        out[lo : lo + len(block)] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def init_association_logits(neighbors):
    """Starting logits: 0.9 on the nearest candidate, 0.1 on the rest."""
    logits = np.full(neighbors.shape, 0.1, dtype=np.float64)
    logits[:, 0] = 0.9
    return logits


def association_probabilities(logits):
    """Row softmax of the candidate logits."""
    return ad.softmax(logits, axis=-1)


def _flat(probs, neighbors):
    p, k = neighbors.shape
    return ad.reshape(probs, (p * k, 1)), neighbors.reshape(p * k)


def gather_superpoint_values(probs, neighbors, values, num_superpoints, prev=None):
    """Weighted average of Gaussian rows into each superpoint.

    Weights are the association probabilities renormalized over each
    superpoint's incoming mass. Superpoints with zero mass keep their ``prev``
    row (zeros when absent) and receive no gradient.
    """
    p, k = neighbors.shape
    d = ad.data_of(values).shape[1]
    w, flat_ids = _flat(probs, neighbors)
    rows = ad.take(values, np.repeat(np.arange(p), k))
    mass = ad.segment_sum(w, flat_ids, num_superpoints)  # (M, 1)
    total = ad.segment_sum(w * rows, flat_ids, num_superpoints)  # (M, d)
    empty = ad.data_of(mass)[:, 0] == 0.0
    fallback = np.zeros((num_superpoints, d)) if prev is None else np.asarray(prev, dtype=np.float64)
    safe_mass = ad.where(empty[:, None], np.ones((num_superpoints, 1)), mass)
    return ad.where(empty[:, None], fallback, total / safe_mass)


def scatter_superpoint_values(probs, neighbors, sp_values):
    """Per-Gaussian convex combination of its candidates' superpoint rows."""
    p, k = neighbors.shape
    w, flat_ids = _flat(probs, neighbors)
    picked = ad.take(sp_values, flat_ids)  # (P*K, d)
    d = ad.data_of(sp_values).shape[1]
    return ad.sum(ad.reshape(w * picked, (p, k, d)), axis=1)


def property_reconstruction_loss(probs, neighbors, values, num_superpoints):
    """Mean squared error between Gaussian rows and their gather-scatter round trip."""
    u = gather_superpoint_values(probs, neighbors, values, num_superpoints)
    back = scatter_superpoint_values(probs, neighbors, u)
    diff = back - values
    return ad.mean(diff * diff)


def hard_assignment(probs, neighbors):
    """Argmax superpoint id per row; exact probability ties pick the lower id."""
    probs = ad.data_of(probs)
    best = probs.max(axis=1, keepdims=True)
    m = int(neighbors.max(initial=-1)) + 1
    candidates = np.where(probs == best, neighbors, m)
    return candidates.min(axis=1)


def update_canonical_positions(sp: SuperpointModel, means):
    """Refresh superpoint centers as the association-weighted mean of Gaussian centers.

    A buffer update, not a differentiable op: runs on raw arrays and keeps the
    previous center wherever a superpoint currently has no incoming mass.
    """
    probs = ad.data_of(association_probabilities(sp.logits))
    sp.positions = np.asarray(
        gather_superpoint_values(
            probs, sp.neighbors, np.asarray(means, dtype=np.float64), sp.num_superpoints, prev=sp.positions
        )
    )
    return sp.positions


def refresh_neighbors(sp: SuperpointModel, means, k=None, new_logit=0.1):
    """Recompute candidate lists from current geometry, carrying logits over.

    A (gaussian, superpoint) pair that survives the refresh keeps its logit;
    fresh candidates start at ``new_logit``. Returns an (P, k) integer map of
    each new slot's previous slot index (-1 for fresh slots) so optimizer
    state can follow the move.
    """
    k = sp.k if k is None else k
    new_nbrs = nearest_superpoints(means, sp.positions, k)
    p = new_nbrs.shape[0]
    new_logits = np.full((p, k), new_logit, dtype=np.float64)
    slot_map = np.full((p, k), -1, dtype=np.int64)
    for i in range(p):
        old = {int(j): slot for slot, j in enumerate(sp.neighbors[i])}
        for slot, j in enumerate(new_nbrs[i]):
            prev_slot = old.get(int(j), -1)
            if prev_slot >= 0:
                new_logits[i, slot] = sp.logits[i, prev_slot]
                slot_map[i, slot] = prev_slot
    sp.neighbors = new_nbrs
    sp.logits = new_logits
    return slot_map


# -- dense oracles (test support) -------------------------------------------


def dense_association(probs, neighbors, num_superpoints):
    """Dense (P, M) association matrix equivalent of the sparse representation."""
    probs = ad.data_of(probs)
    p, k = neighbors.shape
    dense = np.zeros((p, num_superpoints))
    np.add.at(dense, (np.repeat(np.arange(p), k), neighbors.reshape(-1)), probs.reshape(-1))
    return dense


def dense_gather(dense, values, prev=None):
    mass = dense.sum(axis=0)
    fallback = np.zeros((dense.shape[1], values.shape[1])) if prev is None else prev
    safe = np.where(mass == 0, 1.0, mass)
    u = dense.T @ values / safe[:, None]
    return np.where((mass == 0)[:, None], fallback, u)


def dense_scatter(dense, sp_values):
    return dense @ sp_values
