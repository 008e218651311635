# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled blend kernels: per-pixel scalar twin of ``_kernels_py``.

Same tile walk, same footprint/floor/termination tests, same front-to-back
accumulation per pixel. Only the execution strategy differs (scalar loops
here, per-tile vectorization there), so the two backends agree to float
rounding, not bitwise: vectorized and libm ``exp`` can differ in the last ulp.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def forward(
    double[:, ::1] m2d,
    double[:, ::1] conics,
    double[:, ::1] colors,
    double[::1] opac,
    double power_floor,
    cnp.int64_t[::1] tile_splats,
    cnp.int64_t[::1] tile_offsets,
    int h,
    int w,
    int tile,
    double[::1] bg,
    double floor,
    double ceil,
    double term_t,
):
    """Blend sorted splats; returns (image, transmittance, n_contrib, last_pos)."""
    cdef int ntx = (w + tile - 1) // tile
    cdef int nty = (h + tile - 1) // tile
    img_arr = np.zeros((h, w, 3))
    t_arr = np.ones((h, w))
    cnt_arr = np.zeros((h, w), dtype=np.int32)
    last_arr = np.full((h, w), -1, dtype=np.int32)
    cdef double[:, :, ::1] img = img_arr
    cdef double[:, ::1] T = t_arr
    cdef cnp.int32_t[:, ::1] cnt = cnt_arr
    cdef cnp.int32_t[:, ::1] last = last_arr
    cdef Py_ssize_t ty, tx, y, x, k, s0, s1, pos
    cdef int y0, y1, x0, x1
    cdef double px, py, a, b, c, dx, dy, power, alpha, test_t, t, weight
    for ty in range(nty):
        y0 = ty * tile
        y1 = min((ty + 1) * tile, h)
        for tx in range(ntx):
            s0 = tile_offsets[ty * ntx + tx]
            s1 = tile_offsets[ty * ntx + tx + 1]
            if s1 == s0:
                continue
            x0 = tx * tile
            x1 = min((tx + 1) * tile, w)
            for y in range(y0, y1):
                py = y + 0.5
                for x in range(x0, x1):
                    px = x + 0.5
                    t = T[y, x]
                    for k in range(s0, s1):
                        pos = tile_splats[k]
                        a = conics[pos, 0]
                        b = conics[pos, 1]
                        c = conics[pos, 2]
                        dx = px - m2d[pos, 0]
                        dy = py - m2d[pos, 1]
                        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                        if power < power_floor or power > 0.0:
                            continue
                        alpha = opac[pos] * exp(power)
                        if alpha > ceil:
                            alpha = ceil
                        if alpha < floor:
                            continue
                        test_t = t * (1.0 - alpha)
                        if term_t > 0.0 and test_t < term_t:
                            break
                        weight = alpha * t
                        img[y, x, 0] += colors[pos, 0] * weight
                        img[y, x, 1] += colors[pos, 1] * weight
                        img[y, x, 2] += colors[pos, 2] * weight
                        cnt[y, x] += 1
                        last[y, x] = <cnp.int32_t> pos
                        t = test_t
                    T[y, x] = t
    for y in range(h):
        for x in range(w):
            img[y, x, 0] += bg[0] * T[y, x]
            img[y, x, 1] += bg[1] * T[y, x]
            img[y, x, 2] += bg[2] * T[y, x]
    return img_arr, t_arr, cnt_arr, last_arr


def backward(
    double[:, ::1] m2d,
    double[:, ::1] conics,
    double[:, ::1] colors,
    double[::1] opac,
    double power_floor,
    cnp.int64_t[::1] tile_splats,
    cnp.int64_t[::1] tile_offsets,
    int h,
    int w,
    int tile,
    double[::1] bg,
    double floor,
    double ceil,
    double[:, ::1] final_t,
    cnp.int32_t[:, ::1] last,
    double[:, :, ::1] grad_img,
):
    """Gradients of the blended image w.r.t. sorted splat attributes."""
    cdef Py_ssize_t n = m2d.shape[0]
    cdef int ntx = (w + tile - 1) // tile
    cdef int nty = (h + tile - 1) // tile
    gm_arr = np.zeros((n, 2))
    gc_arr = np.zeros((n, 3))
    gcol_arr = np.zeros((n, 3))
    go_arr = np.zeros(n)
    cdef double[:, ::1] gm = gm_arr
    cdef double[:, ::1] gc = gc_arr
    cdef double[:, ::1] gcol = gcol_arr
    cdef double[::1] go = go_arr
    cdef Py_ssize_t ty, tx, y, x, k, s0, s1, pos, lastpos
    cdef int y0, y1, x0, x1
    cdef double px, py, a, b, c, dx, dy, power, g, raw, alpha, one_minus
    cdef double t_run, t_before, gdot, wgt, gdg
    cdef double s_r, s_g, s_b, gp0, gp1, gp2
    for ty in range(nty):
        y0 = ty * tile
        y1 = min((ty + 1) * tile, h)
        for tx in range(ntx):
            s0 = tile_offsets[ty * ntx + tx]
            s1 = tile_offsets[ty * ntx + tx + 1]
            if s1 == s0:
                continue
            x0 = tx * tile
            x1 = min((tx + 1) * tile, w)
            for y in range(y0, y1):
                py = y + 0.5
                for x in range(x0, x1):
                    lastpos = last[y, x]
                    if lastpos < 0:
                        continue
                    px = x + 0.5
                    t_run = final_t[y, x]
                    # color accumulated behind the current splat, background included
                    s_r = bg[0] * t_run
                    s_g = bg[1] * t_run
                    s_b = bg[2] * t_run
                    gp0 = grad_img[y, x, 0]
                    gp1 = grad_img[y, x, 1]
                    gp2 = grad_img[y, x, 2]
                    for k in range(s1 - 1, s0 - 1, -1):
                        pos = tile_splats[k]
                        if pos > lastpos:
                            continue
                        a = conics[pos, 0]
                        b = conics[pos, 1]
                        c = conics[pos, 2]
                        dx = px - m2d[pos, 0]
                        dy = py - m2d[pos, 1]
                        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                        if power < power_floor or power > 0.0:
                            continue
                        g = exp(power)
                        raw = opac[pos] * g
                        alpha = raw
                        if alpha > ceil:
                            alpha = ceil
                        if alpha < floor:
                            continue
                        one_minus = 1.0 - alpha
                        t_before = t_run / one_minus
                        gdot = (
                            gp0 * (colors[pos, 0] * t_before - s_r / one_minus)
                            + gp1 * (colors[pos, 1] * t_before - s_g / one_minus)
                            + gp2 * (colors[pos, 2] * t_before - s_b / one_minus)
                        )
                        wgt = alpha * t_before
                        gcol[pos, 0] += gp0 * wgt
                        gcol[pos, 1] += gp1 * wgt
                        gcol[pos, 2] += gp2 * wgt
                        if raw < ceil:  # clamped alphas pass no gradient upstream
                            go[pos] += gdot * g
                            gdg = gdot * opac[pos] * g
                            gm[pos, 0] += gdg * (a * dx + b * dy)
                            gm[pos, 1] += gdg * (c * dy + b * dx)
                            gc[pos, 0] += gdg * (-0.5 * dx * dx)
                            gc[pos, 1] += gdg * (-dx * dy)
                            gc[pos, 2] += gdg * (-0.5 * dy * dy)
                        s_r += colors[pos, 0] * wgt
                        s_g += colors[pos, 1] * wgt
                        s_b += colors[pos, 2] * wgt
                        t_run = t_before
    return gm_arr, gc_arr, gcol_arr, go_arr
