"""Tiled alpha blending with a hand-derived backward pass.

The blend is exposed as one autodiff node over (means2d, conics, colors,
opacities). Sorting and tile binning run on detached data: blend order is a
lexicographic key (depth, center, conic, opacity, color) so permuting the
input rows can never change the image; binning assigns a splat to every tile
its radius box touches, a conservative cover of the n-sigma footprint the
kernels test per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from . import backend
from .projection import ProjectedSplats, RasterConfig


@dataclass
class RenderOutput:
    """Blend results: image plus per-pixel diagnostics (detached)."""

    image: object  # (H, W, 3) Tensor or ndarray, background composited
    transmittance: np.ndarray  # (H, W) leftover transmittance
    n_contrib: np.ndarray  # (H, W) int32, number of blended splats
    order: np.ndarray  # blend order as indices into the input rows


def blend_order(depths, means2d, conics, opacities, colors, live):
    """Canonical front-to-back order over the live splats.

    Primary key is depth; the remaining keys only break exact ties so that
    input permutation cannot change the result.
    """
    keys = (
        colors[:, 2][live],
        colors[:, 1][live],
        colors[:, 0][live],
        opacities[live],
        conics[:, 2][live],
        conics[:, 1][live],
        conics[:, 0][live],
        means2d[:, 1][live],
        means2d[:, 0][live],
        depths[live],
    )
    return np.flatnonzero(live)[np.lexsort(keys)]


def bin_tiles(means2d, radii, h, w, tile):
    """Per-tile splat lists.

    Returns (tile_splats, tile_offsets): positions into the sorted arrays,
    grouped tile-major with blend order preserved inside each tile.
    """
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    n_tiles = ntx * nty
    mx, my = means2d[:, 0], means2d[:, 1]
    tx_lo = np.clip(np.floor((mx - radii) / tile).astype(np.int64), 0, ntx)
    tx_hi = np.clip(np.floor((mx + radii) / tile).astype(np.int64) + 1, 0, ntx)
    ty_lo = np.clip(np.floor((my - radii) / tile).astype(np.int64), 0, nty)
    ty_hi = np.clip(np.floor((my + radii) / tile).astype(np.int64) + 1, 0, nty)
    spans_x = np.maximum(tx_hi - tx_lo, 0)
    spans_y = np.maximum(ty_hi - ty_lo, 0)
    counts = np.where(radii > 0, spans_x * spans_y, 0)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64)
    owner = np.repeat(np.arange(len(mx), dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    lx = local % np.maximum(spans_x[owner], 1)
    ly = local // np.maximum(spans_x[owner], 1)
    tile_ids = (ty_lo[owner] + ly) * ntx + (tx_lo[owner] + lx)
    take = np.lexsort((owner, tile_ids))  # tile-major, blend order within tile
    tile_splats = owner[take]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_ids, minlength=n_tiles), out=offsets[1:])
    return tile_splats, offsets


def rasterize(proj: ProjectedSplats, colors, opacities, h, w, background, cfg: RasterConfig = RasterConfig()):
    """Blend projected splats into an (h, w, 3) image over a constant background.

    Differentiable in means2d, conics, colors, and opacities through a custom
    VJP; depths/radii act purely as ordering and binning structure.
    """
    m2d_d = ad.data_of(proj.means2d)
    con_d = ad.data_of(proj.conics)
    col_d = ad.data_of(colors)
    opa_d = ad.data_of(opacities)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    live = (proj.radii > 0) & (proj.depths > 0)
    order = blend_order(proj.depths, m2d_d, con_d, opa_d, col_d, live)

    s_m2d = np.ascontiguousarray(m2d_d[order], dtype=np.float64)
    s_con = np.ascontiguousarray(con_d[order], dtype=np.float64)
    s_col = np.ascontiguousarray(col_d[order], dtype=np.float64)
    s_opa = np.ascontiguousarray(opa_d[order], dtype=np.float64)
    if cfg.radius_cutoff:
        radii = np.ascontiguousarray(proj.radii[order], dtype=np.float64)
        power_floor = -0.5 * cfg.sigma_radius * cfg.sigma_radius
    else:
        # every live splat touches every tile, footprint unbounded
        radii = np.full(len(order), float(max(h, w) * 2 + 1))
        power_floor = -np.inf
    tile_splats, tile_offsets = bin_tiles(s_m2d, radii, h, w, cfg.tile_size)

    kern = backend.kernels()
    img, final_t, n_contrib, _last = kern.forward(
        s_m2d,
        s_con,
        s_col,
        s_opa,
        power_floor,
        tile_splats,
        tile_offsets,
        h,
        w,
        cfg.tile_size,
        bg,
        cfg.alpha_floor,
        cfg.alpha_ceil,
        cfg.min_transmittance,
    )

    parents = [p for p in (proj.means2d, proj.conics, colors, opacities) if ad.is_tensor(p)]
    if parents:

        def vjp(grad_img):
            gm, gc, gcol, go = kern.backward(
                s_m2d,
                s_con,
                s_col,
                s_opa,
                power_floor,
                tile_splats,
                tile_offsets,
                h,
                w,
                cfg.tile_size,
                bg,
                cfg.alpha_floor,
                cfg.alpha_ceil,
                final_t,
                _last,
                np.ascontiguousarray(grad_img, dtype=np.float64),
            )
            out = []
            for t, g_sorted, width in (
                (proj.means2d, gm, 2),
                (proj.conics, gc, 3),
                (colors, gcol, 3),
                (opacities, go, None),
            ):
                if not ad.is_tensor(t):
                    continue
                full = np.zeros(ad.data_of(t).shape)
                full[order] = g_sorted
                out.append(full)
            return tuple(out)

        image = ad.custom(img, parents, vjp)
    else:
        image = img
    return RenderOutput(image=image, transmittance=final_t, n_contrib=n_contrib, order=order)


def rasterize_reference(proj: ProjectedSplats, colors, opacities, h, w, background, alpha_ceil=0.99, sigma_radius=3.0):
    """Brute-force oracle: the literal front-to-back blend over every splat.

    O(P*H*W): no tiling, no alpha floor, no early termination. A splat's
    support is still the n-sigma level set of its Gaussian (that is
    footprint, not a threshold), so the tiled rasterizer with thresholds
    disabled must match this to machine precision. Kept free of the kernel
    machinery on purpose so the two can check each other.
    """
    m2d = ad.data_of(proj.means2d)
    con = ad.data_of(proj.conics)
    col = ad.data_of(colors)
    opa = ad.data_of(opacities)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    live = (proj.radii > 0) & (proj.depths > 0)
    order = np.flatnonzero(live)[
        np.lexsort(
            (
                col[:, 2][live],
                col[:, 1][live],
                col[:, 0][live],
                opa[live],
                con[:, 2][live],
                con[:, 1][live],
                con[:, 0][live],
                m2d[:, 1][live],
                m2d[:, 0][live],
                proj.depths[live],
            )
        )
    ]
    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    dx = px[None, None, :] - m2d[order, 0][:, None, None]  # (N, 1->H, W)
    dy = py[None, :, None] - m2d[order, 1][:, None, None]
    a = con[order, 0][:, None, None]
    b = con[order, 1][:, None, None]
    c = con[order, 2][:, None, None]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    alpha = np.minimum(opa[order][:, None, None] * np.exp(power), alpha_ceil)
    power_floor = -0.5 * sigma_radius * sigma_radius
    alpha = np.where((power >= power_floor) & (power <= 0.0), alpha, 0.0)
    trans = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.concatenate([np.ones((1, h, w)), trans[:-1]], axis=0)
    weights = alpha * t_before  # (N, H, W)
    image = np.einsum("nhw,nc->hwc", weights, col[order])
    t_final = trans[-1] if len(order) else np.ones((h, w))
    image += bg * t_final[..., None]
    return image, t_final
