"""Pure-NumPy blend kernels: the fallback backend.

Semantics contract shared with the compiled kernels: a splat influences
exactly the pixels where its Gaussian exponent stays above the footprint
floor (the n-sigma cutoff, -inf when disabled); per pixel, candidate splats
(those whose bounding box touches the pixel's tile) are blended front to
back; a splat is skipped when its exponent goes positive or its alpha falls
under the floor; a splat whose blend would push transmittance under the
termination threshold is dropped and the pixel closes. The backward pass
replays the same decisions from the recorded final transmittance and last
contributor.

Vectorization is per (tile, splat) over the tile's pixel block, which leaves
every per-pixel accumulation in the same order as the compiled per-pixel loop.
"""

from __future__ import annotations

import numpy as np


def forward(m2d, conics, colors, opac, power_floor, tile_splats, tile_offsets, h, w, tile, bg, floor, ceil, term_t):
    """Blend sorted splats; returns (image, transmittance, n_contrib, last_pos)."""
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    img = np.zeros((h, w, 3))
    T = np.ones((h, w))
    cnt = np.zeros((h, w), dtype=np.int32)
    last = np.full((h, w), -1, dtype=np.int32)
    done = np.zeros((h, w), dtype=bool)
    for ty in range(nty):
        y0, y1 = ty * tile, min((ty + 1) * tile, h)
        py = (np.arange(y0, y1) + 0.5)[:, None]
        for tx in range(ntx):
            s0, s1 = tile_offsets[ty * ntx + tx], tile_offsets[ty * ntx + tx + 1]
            if s1 == s0:
                continue
            x0, x1 = tx * tile, min((tx + 1) * tile, w)
            px = (np.arange(x0, x1) + 0.5)[None, :]
            Tb = T[y0:y1, x0:x1]
            Cb = img[y0:y1, x0:x1]
            cntb = cnt[y0:y1, x0:x1]
            lastb = last[y0:y1, x0:x1]
            doneb = done[y0:y1, x0:x1]
            for pos in tile_splats[s0:s1]:
                if doneb.all():
                    break
                A, B, C = conics[pos]
                dx = px - m2d[pos, 0]
                dy = py - m2d[pos, 1]
                power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                alpha = np.minimum(opac[pos] * np.exp(power), ceil)
                ok = (
                    ~doneb
                    & (power >= power_floor)
                    & (power <= 0.0)
                    & (alpha >= floor)
                )
                test_t = Tb * (1.0 - alpha)
                if term_t > 0.0:
                    closing = ok & (test_t < term_t)
                    doneb |= closing
                    ok &= ~closing
                if not ok.any():
                    continue
                weight = (alpha * Tb)[ok]
                Cb[ok] += colors[pos] * weight[:, None]
                cntb[ok] += 1
                lastb[ok] = pos
                Tb[ok] = test_t[ok]
    img += bg * T[..., None]
    return img, T, cnt, last


def backward(
    m2d,
    conics,
    colors,
    opac,
    power_floor,
    tile_splats,
    tile_offsets,
    h,
    w,
    tile,
    bg,
    floor,
    ceil,
    final_t,
    last,
    grad_img,
):
    """Gradients of the blended image w.r.t. sorted splat attributes."""
    n = m2d.shape[0]
    gm = np.zeros((n, 2))
    gc = np.zeros((n, 3))
    gcol = np.zeros((n, 3))
    go = np.zeros(n)
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    for ty in range(nty):
        y0, y1 = ty * tile, min((ty + 1) * tile, h)
        py = (np.arange(y0, y1) + 0.5)[:, None]
        for tx in range(ntx):
            s0, s1 = tile_offsets[ty * ntx + tx], tile_offsets[ty * ntx + tx + 1]
            if s1 == s0:
                continue
            x0, x1 = tx * tile, min((tx + 1) * tile, w)
            px = (np.arange(x0, x1) + 0.5)[None, :]
            gpix = grad_img[y0:y1, x0:x1]
            lastb = last[y0:y1, x0:x1]
            if not (lastb >= 0).any():
                continue
            t_run = final_t[y0:y1, x0:x1].copy()
            # color accumulated behind the current splat, background included
            S = bg[None, None, :] * t_run[..., None]
            for pos in tile_splats[s0:s1][::-1]:
                A, B, C = conics[pos]
                dx = px - m2d[pos, 0]
                dy = py - m2d[pos, 1]
                power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                g = np.exp(power)
                raw = opac[pos] * g
                alpha = np.minimum(raw, ceil)
                mask = (
                    (lastb >= pos)
                    & (power >= power_floor)
                    & (power <= 0.0)
                    & (alpha >= floor)
                )
                if not mask.any():
                    continue
                one_minus = 1.0 - alpha
                t_before = t_run / one_minus
                gdot = np.sum(gpix * (colors[pos] * t_before[..., None] - S / one_minus[..., None]), axis=-1)
                gcol[pos] += np.sum((gpix * (alpha * t_before)[..., None])[mask], axis=0)
                live = mask & (raw < ceil)  # clamped alphas pass no gradient upstream
                gdg = np.where(live, gdot * opac[pos] * g, 0.0)
                go[pos] += float(np.sum(np.where(live, gdot * g, 0.0)))
                gm[pos, 0] += float(np.sum(gdg * (A * dx + B * dy)))
                gm[pos, 1] += float(np.sum(gdg * (C * dy + B * dx)))
                gc[pos, 0] += float(np.sum(gdg * (-0.5 * dx * dx)))
                gc[pos, 1] += float(np.sum(gdg * (-dx * dy)))
                gc[pos, 2] += float(np.sum(gdg * (-0.5 * dy * dy)))
                S = np.where(
                    mask[..., None], S + colors[pos] * (alpha * t_before)[..., None], S
                )
                t_run = np.where(mask, t_before, t_run)
    return gm, gc, gcol, go
