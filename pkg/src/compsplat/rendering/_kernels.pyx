# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled splatting kernels; drop-in replacement for _kernels_py.

Rasterization accumulates in double precision regardless of the parameter
dtype and rounds once at the store, so REFERENCE and TILED agree bitwise:
they share the projected arrays, the sigma evaluation, and the per-pixel
compositing order (global depth order with source-index tie-break).
"""

import numpy as np

cimport cython
from libc.math cimport ceil, exp, floor, log, sqrt

COMPILED = True

cdef int TILE = 16


cdef inline int _clamp_px(double v, double hi) nogil:
    # clamp in double before the int cast; huge projected coordinates
    # would otherwise overflow the conversion
    if v < 0.0:
        v = 0.0
    if v > hi:
        v = hi
    return <int> v


cdef inline double _sigma_eval(double a, double b, double c, double alpha,
                               double dx, double dy, double sigma_max) nogil:
    cdef double quad = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    cdef double s = alpha * exp(-0.5 * quad)
    return s if s < sigma_max else sigma_max


def project(cython.floating[:, ::1] positions,
            cython.floating[:, ::1] rotations,
            cython.floating[:, ::1] log_scales,
            cython.floating[::1] opacities,
            double[:, ::1] cam_rot,
            double[::1] cam_t,
            double fx, double fy, double cx, double cy,
            double near, int width, int height,
            double sigma_min, double low_pass):
    """Per-Gaussian projection; see _kernels_py.project for the contract."""
    cdef Py_ssize_t n = positions.shape[0]
    if cython.floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    valid_arr = np.zeros(n, dtype=np.uint8)
    mean2d_arr = np.zeros((n, 2), dtype=dtype)
    conic_arr = np.zeros((n, 3), dtype=dtype)
    depth_arr = np.zeros(n, dtype=dtype)
    tview_arr = np.zeros((n, 3), dtype=dtype)
    bounds_arr = np.zeros((n, 4), dtype=np.int32)

    cdef unsigned char[::1] valid = valid_arr
    cdef cython.floating[:, ::1] mean2d = mean2d_arr
    cdef cython.floating[:, ::1] conic = conic_arr
    cdef cython.floating[::1] depth = depth_arr
    cdef cython.floating[:, ::1] tview = tview_arr
    cdef int[:, ::1] bounds = bounds_arr

    cdef Py_ssize_t i
    cdef int j, k, r
    cdef double px_, py_, tx, ty, tz, alpha
    cdef double qw, qx, qy, qz, qn
    cdef double r3[3][3]
    cdef double mm[3][3]
    cdef double cov3d[3][3]
    cdef double jac[2][3]
    cdef double u[2][3]
    cdef double tmp23[2][3]
    cdef double c00, c01, c11, det, chi2, half_x, half_y
    cdef double s0, s1, s2
    cdef int x0, x1, y0, y1

    with nogil:
        for i in range(n):
            tx = cam_rot[0, 0] * positions[i, 0] + cam_rot[0, 1] * positions[i, 1] + cam_rot[0, 2] * positions[i, 2] + cam_t[0]
            ty = cam_rot[1, 0] * positions[i, 0] + cam_rot[1, 1] * positions[i, 1] + cam_rot[1, 2] * positions[i, 2] + cam_t[1]
            tz = cam_rot[2, 0] * positions[i, 0] + cam_rot[2, 1] * positions[i, 1] + cam_rot[2, 2] * positions[i, 2] + cam_t[2]
            tview[i, 0] = <cython.floating> tx
            tview[i, 1] = <cython.floating> ty
            tview[i, 2] = <cython.floating> tz
            depth[i] = <cython.floating> tz
            if tz <= near:
                continue
            alpha = <double> opacities[i]
            if sigma_min > 0.0 and alpha <= sigma_min:
                continue

            qw = rotations[i, 0]
            qx = rotations[i, 1]
            qy = rotations[i, 2]
            qz = rotations[i, 3]
            qn = sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            if qn > 0.0:
                qw /= qn; qx /= qn; qy /= qn; qz /= qn
            else:
                qw = 1.0; qx = 0.0; qy = 0.0; qz = 0.0
            r3[0][0] = 1.0 - 2.0 * (qy * qy + qz * qz)
            r3[0][1] = 2.0 * (qx * qy - qw * qz)
            r3[0][2] = 2.0 * (qx * qz + qw * qy)
            r3[1][0] = 2.0 * (qx * qy + qw * qz)
            r3[1][1] = 1.0 - 2.0 * (qx * qx + qz * qz)
            r3[1][2] = 2.0 * (qy * qz - qw * qx)
            r3[2][0] = 2.0 * (qx * qz - qw * qy)
            r3[2][1] = 2.0 * (qy * qz + qw * qx)
            r3[2][2] = 1.0 - 2.0 * (qx * qx + qy * qy)

            s0 = exp(<double> log_scales[i, 0])
            s1 = exp(<double> log_scales[i, 1])
            s2 = exp(<double> log_scales[i, 2])
            for j in range(3):
                mm[j][0] = r3[j][0] * s0
                mm[j][1] = r3[j][1] * s1
                mm[j][2] = r3[j][2] * s2
            for j in range(3):
                for k in range(3):
                    cov3d[j][k] = mm[j][0] * mm[k][0] + mm[j][1] * mm[k][1] + mm[j][2] * mm[k][2]

            jac[0][0] = fx / tz
            jac[0][1] = 0.0
            jac[0][2] = -fx * tx / (tz * tz)
            jac[1][0] = 0.0
            jac[1][1] = fy / tz
            jac[1][2] = -fy * ty / (tz * tz)
            for j in range(2):
                for k in range(3):
                    u[j][k] = jac[j][0] * cam_rot[0, k] + jac[j][1] * cam_rot[1, k] + jac[j][2] * cam_rot[2, k]
            for j in range(2):
                for k in range(3):
                    tmp23[j][k] = u[j][0] * cov3d[0][k] + u[j][1] * cov3d[1][k] + u[j][2] * cov3d[2][k]
            c00 = tmp23[0][0] * u[0][0] + tmp23[0][1] * u[0][1] + tmp23[0][2] * u[0][2] + low_pass
            c01 = tmp23[0][0] * u[1][0] + tmp23[0][1] * u[1][1] + tmp23[0][2] * u[1][2]
            c11 = tmp23[1][0] * u[1][0] + tmp23[1][1] * u[1][1] + tmp23[1][2] * u[1][2] + low_pass

            det = c00 * c11 - c01 * c01
            if not (det > 0.0):  # also culls NaN from non-finite params
                continue
            conic[i, 0] = <cython.floating> (c11 / det)
            conic[i, 1] = <cython.floating> (-c01 / det)
            conic[i, 2] = <cython.floating> (c00 / det)

            px_ = fx * tx / tz + cx
            py_ = fy * ty / tz + cy
            mean2d[i, 0] = <cython.floating> px_
            mean2d[i, 1] = <cython.floating> py_

            if sigma_min > 0.0:
                chi2 = 2.0 * log(alpha / sigma_min)
                half_x = sqrt(chi2 * c00) if chi2 > 0.0 else 0.0
                half_y = sqrt(chi2 * c11) if chi2 > 0.0 else 0.0
                x0 = _clamp_px(floor(px_ - half_x) - 1.0, <double> width)
                x1 = _clamp_px(ceil(px_ + half_x) + 1.0, <double> width)
                y0 = _clamp_px(floor(py_ - half_y) - 1.0, <double> height)
                y1 = _clamp_px(ceil(py_ + half_y) + 1.0, <double> height)
                if x0 >= x1 or y0 >= y1:
                    continue
            else:
                x0 = 0; x1 = width; y0 = 0; y1 = height
            bounds[i, 0] = x0
            bounds[i, 1] = x1
            bounds[i, 2] = y0
            bounds[i, 3] = y1
            valid[i] = 1

    return valid_arr, mean2d_arr, conic_arr, depth_arr, tview_arr, bounds_arr


def rasterize_reference(int[::1] order,
                        cython.floating[:, ::1] mean2d,
                        cython.floating[:, ::1] conic,
                        cython.floating[::1] alphas,
                        cython.floating[:, ::1] colors,
                        int[:, ::1] bounds,
                        int width, int height,
                        double sigma_min, double sigma_max, double early_exit,
                        double[::1] background):
    """Per-pixel loop over every splat in global depth order."""
    if cython.floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    rgb_arr = np.zeros((height, width, 3), dtype=dtype)
    t_arr = np.ones((height, width), dtype=dtype)
    cdef cython.floating[:, :, ::1] rgb = rgb_arr
    cdef cython.floating[:, ::1] tbuf = t_arr

    cdef Py_ssize_t kk = order.shape[0]
    cdef int iy, ix, j, k
    cdef double px_, py_, sig, trans
    cdef double acc0, acc1, acc2, w

    with nogil:
        for iy in range(height):
            py_ = iy + 0.5
            for ix in range(width):
                px_ = ix + 0.5
                trans = 1.0
                acc0 = 0.0; acc1 = 0.0; acc2 = 0.0
                for j in range(kk):
                    if early_exit > 0.0 and trans < early_exit:
                        break
                    k = order[j]
                    sig = _sigma_eval(<double> conic[k, 0], <double> conic[k, 1], <double> conic[k, 2],
                                      <double> alphas[k], px_ - <double> mean2d[k, 0], py_ - <double> mean2d[k, 1],
                                      sigma_max)
                    if sig <= sigma_min:
                        continue
                    w = sig * trans
                    acc0 += <double> colors[k, 0] * w
                    acc1 += <double> colors[k, 1] * w
                    acc2 += <double> colors[k, 2] * w
                    trans *= 1.0 - sig
                acc0 += trans * background[0]
                acc1 += trans * background[1]
                acc2 += trans * background[2]
                rgb[iy, ix, 0] = <cython.floating> acc0
                rgb[iy, ix, 1] = <cython.floating> acc1
                rgb[iy, ix, 2] = <cython.floating> acc2
                tbuf[iy, ix] = <cython.floating> trans
    return rgb_arr, t_arr


cdef _bin_tiles(int[::1] order, int[:, ::1] bounds, int width, int height):
    """Per-tile splat lists in global order; returns (offsets, lists, tiles_x)."""
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef Py_ssize_t kk = order.shape[0]
    counts_arr = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef int j, k, bx0, bx1, by0, by1, tx, ty
    with nogil:
        for j in range(kk):
            k = order[j]
            bx0 = bounds[k, 0] // TILE
            bx1 = (bounds[k, 1] - 1) // TILE
            by0 = bounds[k, 2] // TILE
            by1 = (bounds[k, 3] - 1) // TILE
            for ty in range(by0, by1 + 1):
                for tx in range(bx0, bx1 + 1):
                    counts[ty * tiles_x + tx + 1] += 1
    offsets_arr = np.cumsum(counts_arr).astype(np.int64)
    lists_arr = np.zeros(int(offsets_arr[-1]), dtype=np.int32)
    cursor_arr = offsets_arr[:-1].copy()
    cdef long long[::1] offsets = offsets_arr
    cdef long long[::1] cursor = cursor_arr
    cdef int[::1] lists = lists_arr
    with nogil:
        for j in range(kk):
            k = order[j]
            bx0 = bounds[k, 0] // TILE
            bx1 = (bounds[k, 1] - 1) // TILE
            by0 = bounds[k, 2] // TILE
            by1 = (bounds[k, 3] - 1) // TILE
            for ty in range(by0, by1 + 1):
                for tx in range(bx0, bx1 + 1):
                    lists[cursor[ty * tiles_x + tx]] = k
                    cursor[ty * tiles_x + tx] += 1
    return offsets_arr, lists_arr, tiles_x, tiles_y


def rasterize_tiled(int[::1] order,
                    cython.floating[:, ::1] mean2d,
                    cython.floating[:, ::1] conic,
                    cython.floating[::1] alphas,
                    cython.floating[:, ::1] colors,
                    int[:, ::1] bounds,
                    int width, int height,
                    double sigma_min, double sigma_max, double early_exit,
                    double[::1] background):
    """16x16 tile binning with the same per-pixel compositing as REFERENCE."""
    if cython.floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    rgb_arr = np.zeros((height, width, 3), dtype=dtype)
    t_arr = np.ones((height, width), dtype=dtype)
    cdef cython.floating[:, :, ::1] rgb = rgb_arr
    cdef cython.floating[:, ::1] tbuf = t_arr

    offsets_arr, lists_arr, tiles_x, tiles_y = _bin_tiles(order, bounds, width, height)
    cdef long long[::1] offsets = offsets_arr
    cdef int[::1] lists = lists_arr
    cdef int ntx = tiles_x, nty = tiles_y

    cdef int iy, ix, ty, tx, k, y_end, x_end
    cdef long long j, lo, hi
    cdef double px_, py_, sig, trans
    cdef double acc0, acc1, acc2, w

    with nogil:
        for ty in range(nty):
            y_end = (ty + 1) * TILE
            if y_end > height: y_end = height
            for tx in range(ntx):
                x_end = (tx + 1) * TILE
                if x_end > width: x_end = width
                lo = offsets[ty * ntx + tx]
                hi = offsets[ty * ntx + tx + 1]
                for iy in range(ty * TILE, y_end):
                    py_ = iy + 0.5
                    for ix in range(tx * TILE, x_end):
                        px_ = ix + 0.5
                        trans = 1.0
                        acc0 = 0.0; acc1 = 0.0; acc2 = 0.0
                        for j in range(lo, hi):
                            if early_exit > 0.0 and trans < early_exit:
                                break
                            k = lists[j]
                            sig = _sigma_eval(<double> conic[k, 0], <double> conic[k, 1], <double> conic[k, 2],
                                              <double> alphas[k], px_ - <double> mean2d[k, 0], py_ - <double> mean2d[k, 1],
                                              sigma_max)
                            if sig <= sigma_min:
                                continue
                            w = sig * trans
                            acc0 += <double> colors[k, 0] * w
                            acc1 += <double> colors[k, 1] * w
                            acc2 += <double> colors[k, 2] * w
                            trans *= 1.0 - sig
                        acc0 += trans * background[0]
                        acc1 += trans * background[1]
                        acc2 += trans * background[2]
                        rgb[iy, ix, 0] = <cython.floating> acc0
                        rgb[iy, ix, 1] = <cython.floating> acc1
                        rgb[iy, ix, 2] = <cython.floating> acc2
                        tbuf[iy, ix] = <cython.floating> trans
    return rgb_arr, t_arr


def backward(int[::1] order,
             cython.floating[:, ::1] rotations,
             cython.floating[:, ::1] log_scales,
             cython.floating[::1] alphas,
             cython.floating[:, ::1] colors,
             cython.floating[:, ::1] mean2d,
             cython.floating[:, ::1] conic,
             cython.floating[:, ::1] tview,
             int[:, ::1] bounds,
             double[:, :, ::1] upstream,
             double[:, ::1] cam_rot,
             double fx, double fy,
             int width, int height,
             double sigma_min, double sigma_max, double early_exit,
             double[::1] background):
    """Adjoint of the rasterizer; returns float64 parameter gradients."""
    cdef Py_ssize_t n = mean2d.shape[0]

    g_mean2d_arr = np.zeros((n, 2), dtype=np.float64)
    g_conic_arr = np.zeros((n, 3), dtype=np.float64)
    g_alpha_arr = np.zeros(n, dtype=np.float64)
    g_color_arr = np.zeros((n, 3), dtype=np.float64)
    cdef double[:, ::1] g_mean2d = g_mean2d_arr
    cdef double[:, ::1] g_conic = g_conic_arr
    cdef double[::1] g_alpha = g_alpha_arr
    cdef double[:, ::1] g_color = g_color_arr

    offsets_arr, lists_arr, tiles_x, tiles_y = _bin_tiles(order, bounds, width, height)
    cdef long long[::1] offsets = offsets_arr
    cdef int[::1] lists = lists_arr
    cdef int ntx = tiles_x, nty = tiles_y

    # per-pixel scratch sized by the longest tile list
    cdef long long max_len = 0
    cdef Py_ssize_t ti
    for ti in range(ntx * nty):
        if offsets[ti + 1] - offsets[ti] > max_len:
            max_len = offsets[ti + 1] - offsets[ti]
    sc_idx_arr = np.zeros(max(int(max_len), 1), dtype=np.int32)
    sc_sig_arr = np.zeros(max(int(max_len), 1), dtype=np.float64)
    sc_gauss_arr = np.zeros(max(int(max_len), 1), dtype=np.float64)
    sc_tb_arr = np.zeros(max(int(max_len), 1), dtype=np.float64)
    sc_dx_arr = np.zeros(max(int(max_len), 1), dtype=np.float64)
    sc_dy_arr = np.zeros(max(int(max_len), 1), dtype=np.float64)
    cdef int[::1] sc_idx = sc_idx_arr
    cdef double[::1] sc_sig = sc_sig_arr
    cdef double[::1] sc_gauss = sc_gauss_arr
    cdef double[::1] sc_tb = sc_tb_arr
    cdef double[::1] sc_dx = sc_dx_arr
    cdef double[::1] sc_dy = sc_dy_arr

    cdef int iy, ix, ty, tx, k, y_end, x_end, m, count
    cdef long long j, lo, hi
    cdef double px_, py_, trans, alpha, quad, g_raw, sig
    cdef double a, b, c, dx, dy
    cdef double s0_, s1_, s2_, gw0, gw1, gw2
    cdef double d_sig, d_raw, d_quad, ddx, ddy, contrib

    with nogil:
        for ty in range(nty):
            y_end = (ty + 1) * TILE
            if y_end > height: y_end = height
            for tx in range(ntx):
                x_end = (tx + 1) * TILE
                if x_end > width: x_end = width
                lo = offsets[ty * ntx + tx]
                hi = offsets[ty * ntx + tx + 1]
                if lo == hi:
                    continue
                for iy in range(ty * TILE, y_end):
                    py_ = iy + 0.5
                    for ix in range(tx * TILE, x_end):
                        px_ = ix + 0.5
                        # forward replay for this pixel
                        trans = 1.0
                        count = 0
                        for j in range(lo, hi):
                            if early_exit > 0.0 and trans < early_exit:
                                break
                            k = lists[j]
                            alpha = <double> alphas[k]
                            dx = px_ - <double> mean2d[k, 0]
                            dy = py_ - <double> mean2d[k, 1]
                            a = <double> conic[k, 0]
                            b = <double> conic[k, 1]
                            c = <double> conic[k, 2]
                            quad = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                            g_raw = exp(-0.5 * quad)
                            sig = alpha * g_raw
                            if sig > sigma_max:
                                sig = sigma_max
                            if sig <= sigma_min:
                                continue
                            sc_idx[count] = k
                            sc_sig[count] = sig
                            sc_gauss[count] = g_raw
                            sc_tb[count] = trans
                            sc_dx[count] = dx
                            sc_dy[count] = dy
                            count += 1
                            trans *= 1.0 - sig
                        # reverse sweep: suffix color after the current splat
                        s0_ = trans * background[0]
                        s1_ = trans * background[1]
                        s2_ = trans * background[2]
                        gw0 = upstream[iy, ix, 0]
                        gw1 = upstream[iy, ix, 1]
                        gw2 = upstream[iy, ix, 2]
                        for m in range(count - 1, -1, -1):
                            k = sc_idx[m]
                            sig = sc_sig[m]
                            contrib = sig * sc_tb[m]
                            g_color[k, 0] += gw0 * contrib
                            g_color[k, 1] += gw1 * contrib
                            g_color[k, 2] += gw2 * contrib
                            d_sig = (gw0 * (<double> colors[k, 0] * sc_tb[m] - s0_ / (1.0 - sig))
                                     + gw1 * (<double> colors[k, 1] * sc_tb[m] - s1_ / (1.0 - sig))
                                     + gw2 * (<double> colors[k, 2] * sc_tb[m] - s2_ / (1.0 - sig)))
                            alpha = <double> alphas[k]
                            if alpha * sc_gauss[m] <= sigma_max:
                                d_raw = d_sig
                                g_alpha[k] += d_raw * sc_gauss[m]
                                d_quad = -0.5 * (alpha * sc_gauss[m]) * d_raw
                                dx = sc_dx[m]
                                dy = sc_dy[m]
                                a = <double> conic[k, 0]
                                b = <double> conic[k, 1]
                                c = <double> conic[k, 2]
                                g_conic[k, 0] += d_quad * dx * dx
                                g_conic[k, 1] += d_quad * 2.0 * dx * dy
                                g_conic[k, 2] += d_quad * dy * dy
                                ddx = d_quad * (2.0 * a * dx + 2.0 * b * dy)
                                ddy = d_quad * (2.0 * b * dx + 2.0 * c * dy)
                                g_mean2d[k, 0] -= ddx
                                g_mean2d[k, 1] -= ddy
                            s0_ += <double> colors[k, 0] * contrib
                            s1_ += <double> colors[k, 1] * contrib
                            s2_ += <double> colors[k, 2] * contrib

    return _chain_to_params(rotations, log_scales, tview, conic,
                            g_mean2d_arr, g_conic_arr, g_alpha_arr, g_color_arr,
                            cam_rot, fx, fy)


def _chain_to_params(cython.floating[:, ::1] rotations,
                     cython.floating[:, ::1] log_scales,
                     cython.floating[:, ::1] tview,
                     cython.floating[:, ::1] conic,
                     double[:, ::1] g_mean2d,
                     double[:, ::1] g_conic,
                     g_alpha_np,
                     g_color_np,
                     double[:, ::1] cam_rot,
                     double fx, double fy):
    """Image-plane gradients -> (position, rotation, log-scale) gradients."""
    cdef double[::1] g_alpha = g_alpha_np
    cdef double[:, ::1] g_color = g_color_np
    cdef Py_ssize_t n = rotations.shape[0]
    d_pos_arr = np.zeros((n, 3), dtype=np.float64)
    d_rot_arr = np.zeros((n, 4), dtype=np.float64)
    d_ls_arr = np.zeros((n, 3), dtype=np.float64)
    cdef double[:, ::1] d_pos = d_pos_arr
    cdef double[:, ::1] d_rot = d_rot_arr
    cdef double[:, ::1] d_ls = d_ls_arr

    cdef Py_ssize_t i
    cdef int r, k
    cdef double qw, qx, qy, qz, qn
    cdef double r3[3][3]
    cdef double mm[3][3]
    cdef double cov3d[3][3]
    cdef double jac[2][3]
    cdef double u[2][3]
    cdef double amat[2][2]
    cdef double ga[2][2]
    cdef double tmp22[2][2]
    cdef double gcov2d[2][2]
    cdef double gsym[2][2]
    cdef double gu[2][3]
    cdef double tmp23[2][3]
    cdef double gcov3d[3][3]
    cdef double gjac[2][3]
    cdef double gm[3][3]
    cdef double grot[3][3]
    cdef double sv[3]
    cdef double tx, ty, tz, tz2, tz3
    cdef double dtx, dty, dtz
    cdef double dnw, dnx, dny, dnz, dot

    with nogil:
        for i in range(n):
            if (g_mean2d[i, 0] == 0.0 and g_mean2d[i, 1] == 0.0
                    and g_conic[i, 0] == 0.0 and g_conic[i, 1] == 0.0 and g_conic[i, 2] == 0.0
                    and g_alpha[i] == 0.0
                    and g_color[i, 0] == 0.0 and g_color[i, 1] == 0.0 and g_color[i, 2] == 0.0):
                continue

            qw = rotations[i, 0]
            qx = rotations[i, 1]
            qy = rotations[i, 2]
            qz = rotations[i, 3]
            qn = sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            if qn > 0.0:
                qw /= qn; qx /= qn; qy /= qn; qz /= qn
            else:
                qw = 1.0; qx = 0.0; qy = 0.0; qz = 0.0
            r3[0][0] = 1.0 - 2.0 * (qy * qy + qz * qz)
            r3[0][1] = 2.0 * (qx * qy - qw * qz)
            r3[0][2] = 2.0 * (qx * qz + qw * qy)
            r3[1][0] = 2.0 * (qx * qy + qw * qz)
            r3[1][1] = 1.0 - 2.0 * (qx * qx + qz * qz)
            r3[1][2] = 2.0 * (qy * qz - qw * qx)
            r3[2][0] = 2.0 * (qx * qz - qw * qy)
            r3[2][1] = 2.0 * (qy * qz + qw * qx)
            r3[2][2] = 1.0 - 2.0 * (qx * qx + qy * qy)

            sv[0] = exp(<double> log_scales[i, 0])
            sv[1] = exp(<double> log_scales[i, 1])
            sv[2] = exp(<double> log_scales[i, 2])
            for r in range(3):
                for k in range(3):
                    mm[r][k] = r3[r][k] * sv[k]
            for r in range(3):
                for k in range(3):
                    cov3d[r][k] = mm[r][0] * mm[k][0] + mm[r][1] * mm[k][1] + mm[r][2] * mm[k][2]

            tx = <double> tview[i, 0]
            ty = <double> tview[i, 1]
            tz = <double> tview[i, 2]
            tz2 = tz * tz
            tz3 = tz2 * tz
            jac[0][0] = fx / tz
            jac[0][1] = 0.0
            jac[0][2] = -fx * tx / tz2
            jac[1][0] = 0.0
            jac[1][1] = fy / tz
            jac[1][2] = -fy * ty / tz2
            for r in range(2):
                for k in range(3):
                    u[r][k] = jac[r][0] * cam_rot[0, k] + jac[r][1] * cam_rot[1, k] + jac[r][2] * cam_rot[2, k]

            amat[0][0] = <double> conic[i, 0]
            amat[0][1] = <double> conic[i, 1]
            amat[1][0] = <double> conic[i, 1]
            amat[1][1] = <double> conic[i, 2]
            ga[0][0] = g_conic[i, 0]
            ga[0][1] = g_conic[i, 1] / 2.0
            ga[1][0] = g_conic[i, 1] / 2.0
            ga[1][1] = g_conic[i, 2]
            # d cov2d = -A dA A
            for r in range(2):
                for k in range(2):
                    tmp22[r][k] = ga[r][0] * amat[0][k] + ga[r][1] * amat[1][k]
            for r in range(2):
                for k in range(2):
                    gcov2d[r][k] = -(amat[r][0] * tmp22[0][k] + amat[r][1] * tmp22[1][k])
            gsym[0][0] = gcov2d[0][0] + gcov2d[0][0]
            gsym[0][1] = gcov2d[0][1] + gcov2d[1][0]
            gsym[1][0] = gsym[0][1]
            gsym[1][1] = gcov2d[1][1] + gcov2d[1][1]

            # gu = gsym @ U @ cov3d
            for r in range(2):
                for k in range(3):
                    tmp23[r][k] = gsym[r][0] * u[0][k] + gsym[r][1] * u[1][k]
            for r in range(2):
                for k in range(3):
                    gu[r][k] = tmp23[r][0] * cov3d[0][k] + tmp23[r][1] * cov3d[1][k] + tmp23[r][2] * cov3d[2][k]
            # gcov3d = U^T @ gcov2d @ U
            for r in range(3):
                for k in range(3):
                    gcov3d[r][k] = (u[0][r] * (gcov2d[0][0] * u[0][k] + gcov2d[0][1] * u[1][k])
                                    + u[1][r] * (gcov2d[1][0] * u[0][k] + gcov2d[1][1] * u[1][k]))
            # gjac = gu @ cam_rot^T
            for r in range(2):
                for k in range(3):
                    gjac[r][k] = gu[r][0] * cam_rot[k, 0] + gu[r][1] * cam_rot[k, 1] + gu[r][2] * cam_rot[k, 2]

            dtx = g_mean2d[i, 0] * fx / tz + gjac[0][2] * (-fx / tz2)
            dty = g_mean2d[i, 1] * fy / tz + gjac[1][2] * (-fy / tz2)
            dtz = (g_mean2d[i, 0] * (-fx * tx / tz2)
                   + g_mean2d[i, 1] * (-fy * ty / tz2)
                   + gjac[0][0] * (-fx / tz2)
                   + gjac[1][1] * (-fy / tz2)
                   + gjac[0][2] * (2.0 * fx * tx / tz3)
                   + gjac[1][2] * (2.0 * fy * ty / tz3))
            d_pos[i, 0] = cam_rot[0, 0] * dtx + cam_rot[1, 0] * dty + cam_rot[2, 0] * dtz
            d_pos[i, 1] = cam_rot[0, 1] * dtx + cam_rot[1, 1] * dty + cam_rot[2, 1] * dtz
            d_pos[i, 2] = cam_rot[0, 2] * dtx + cam_rot[1, 2] * dty + cam_rot[2, 2] * dtz

            # gm = (gcov3d + gcov3d^T) @ M
            for r in range(3):
                for k in range(3):
                    gm[r][k] = ((gcov3d[r][0] + gcov3d[0][r]) * mm[0][k]
                                + (gcov3d[r][1] + gcov3d[1][r]) * mm[1][k]
                                + (gcov3d[r][2] + gcov3d[2][r]) * mm[2][k])
            for k in range(3):
                d_ls[i, k] = (gm[0][k] * r3[0][k] + gm[1][k] * r3[1][k] + gm[2][k] * r3[2][k]) * sv[k]
            for r in range(3):
                for k in range(3):
                    grot[r][k] = gm[r][k] * sv[k]

            dnw = 2.0 * (grot[0][1] * (-qz) + grot[0][2] * qy
                         + grot[1][0] * qz + grot[1][2] * (-qx)
                         + grot[2][0] * (-qy) + grot[2][1] * qx)
            dnx = 2.0 * (grot[0][1] * qy + grot[0][2] * qz
                         + grot[1][0] * qy + grot[1][1] * (-2.0 * qx) + grot[1][2] * (-qw)
                         + grot[2][0] * qz + grot[2][1] * qw + grot[2][2] * (-2.0 * qx))
            dny = 2.0 * (grot[0][0] * (-2.0 * qy) + grot[0][1] * qx + grot[0][2] * qw
                         + grot[1][0] * qx + grot[1][2] * qz
                         + grot[2][0] * (-qw) + grot[2][1] * qz + grot[2][2] * (-2.0 * qy))
            dnz = 2.0 * (grot[0][0] * (-2.0 * qz) + grot[0][1] * (-qw) + grot[0][2] * qx
                         + grot[1][0] * qw + grot[1][1] * (-2.0 * qz) + grot[1][2] * qy
                         + grot[2][0] * qx + grot[2][1] * qy)

            dot = qw * dnw + qx * dnx + qy * dny + qz * dnz
            d_rot[i, 0] = (dnw - qw * dot) / qn
            d_rot[i, 1] = (dnx - qx * dot) / qn
            d_rot[i, 2] = (dny - qy * dot) / qn
            d_rot[i, 3] = (dnz - qz * dot) / qn

    return d_pos_arr, d_rot_arr, d_ls_arr, g_alpha_np, g_color_np
