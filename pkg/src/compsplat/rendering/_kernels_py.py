"""Pure-numpy splatting kernels: the fallback backend.

Semantics notes shared with the compiled backend (_kernels.pyx):
    - A splat contributes to a pixel only when its clamped sigma exceeds
      `sigma_min`; both rasterization modes apply the same cutoff so their
      outputs agree to the last bit.
    - Sigma is clamped to SIGMA_MAX because the backward pass divides by
      (1 - sigma).
    - Per-splat pixel bounds are conservative for the cutoff: every pixel
      with sigma > sigma_min lies inside the bounds, so tile binning can
      never drop a contributing pair.
    - Early exit freezes a pixel once its transmittance falls below the
      threshold, before the next splat is composited.
"""

from __future__ import annotations

import numpy as np

COMPILED = False

_QUAT_DR = None  # lazy cache of the dR/dq coefficient builders


def _rotation_matrices(quats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch rotation matrices; returns (R, normalized_quats, raw_norms)."""
    norms = np.linalg.norm(quats, axis=1)
    n = quats / norms[:, None]
    w, x, y, z = n[:, 0], n[:, 1], n[:, 2], n[:, 3]
    rot = np.empty((quats.shape[0], 3, 3), dtype=quats.dtype)
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot, n, norms


def project(
    positions: np.ndarray,
    rotations: np.ndarray,
    log_scales: np.ndarray,
    opacities: np.ndarray,
    cam_rot: np.ndarray,
    cam_t: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    near: float,
    width: int,
    height: int,
    sigma_min: float,
    low_pass: float,
):
    """Project all Gaussians; returns (valid, mean2d, conic, depth, tview, bounds).

    bounds is (N, 4) int32 [x0, x1, y0, y1), clamped to the image; culled rows
    have valid = 0 and undefined geometry.
    """
    dtype = positions.dtype
    n = positions.shape[0]
    tview = positions @ cam_rot.T.astype(dtype) + cam_t.astype(dtype)
    tx, ty, tz = tview[:, 0], tview[:, 1], tview[:, 2]
    valid = tz > near

    safe_tz = np.where(valid, tz, 1.0).astype(dtype)
    jac = np.zeros((n, 2, 3), dtype=dtype)
    jac[:, 0, 0] = fx / safe_tz
    jac[:, 0, 2] = -fx * tx / (safe_tz * safe_tz)
    jac[:, 1, 1] = fy / safe_tz
    jac[:, 1, 2] = -fy * ty / (safe_tz * safe_tz)
    u = jac @ cam_rot.astype(dtype)

    rot, _, _ = _rotation_matrices(rotations)
    m = rot * np.exp(log_scales)[:, None, :]
    cov3d = m @ np.transpose(m, (0, 2, 1))
    cov2d = u @ cov3d @ np.transpose(u, (0, 2, 1))
    cov2d[:, 0, 0] += low_pass
    cov2d[:, 1, 1] += low_pass

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 0, 1]
    conic = np.empty((n, 3), dtype=dtype)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        conic[:, 0] = cov2d[:, 1, 1] / det
        conic[:, 1] = -cov2d[:, 0, 1] / det
        conic[:, 2] = cov2d[:, 0, 0] / det

    mean2d = np.empty((n, 2), dtype=dtype)
    mean2d[:, 0] = fx * tx / safe_tz + cx
    mean2d[:, 1] = fy * ty / safe_tz + cy

    bounds = np.zeros((n, 4), dtype=np.int32)
    if sigma_min > 0.0:
        reachable = opacities > sigma_min
        valid = valid & reachable
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            ln_term = np.log(np.where(reachable, opacities, 1.0) / dtype.type(sigma_min))
            chi2 = 2.0 * ln_term
            half_x = np.sqrt(np.maximum(chi2 * cov2d[:, 0, 0], 0.0))
            half_y = np.sqrt(np.maximum(chi2 * cov2d[:, 1, 1], 0.0))
            x0 = np.where(valid, np.floor(mean2d[:, 0] - half_x) - 1, 0.0)
            x1 = np.where(valid, np.ceil(mean2d[:, 0] + half_x) + 1, 0.0)
            y0 = np.where(valid, np.floor(mean2d[:, 1] - half_y) - 1, 0.0)
            y1 = np.where(valid, np.ceil(mean2d[:, 1] + half_y) + 1, 0.0)
        bounds[:, 0] = np.clip(np.nan_to_num(x0), 0, width)
        bounds[:, 1] = np.clip(np.nan_to_num(x1), 0, width)
        bounds[:, 2] = np.clip(np.nan_to_num(y0), 0, height)
        bounds[:, 3] = np.clip(np.nan_to_num(y1), 0, height)
        nonempty = (bounds[:, 0] < bounds[:, 1]) & (bounds[:, 2] < bounds[:, 3])
        valid = valid & nonempty
    else:
        # no cutoff: every splat may touch every pixel
        bounds[:, 1] = width
        bounds[:, 3] = height

    return valid.astype(np.uint8), mean2d, conic, tz.copy(), tview, bounds


def _pixel_grid(x0: int, x1: int, y0: int, y1: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(x0, x1, dtype=dtype) + dtype.type(0.5))
    ys = (np.arange(y0, y1, dtype=dtype) + dtype.type(0.5))
    return np.meshgrid(xs, ys)


def _splat_sigma(
    k: int,
    mean2d: np.ndarray,
    conic: np.ndarray,
    alpha,
    px: np.ndarray,
    py: np.ndarray,
    sigma_max: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(clamped sigma, raw sigma, (dx, dy)) over a pixel window."""
    dx = px - mean2d[k, 0]
    dy = py - mean2d[k, 1]
    quad = conic[k, 0] * dx * dx + 2 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
    sraw = alpha * np.exp(-0.5 * quad)
    return np.minimum(sraw, px.dtype.type(sigma_max)), sraw, (dx, dy)


def rasterize_reference(
    order: np.ndarray,
    mean2d: np.ndarray,
    conic: np.ndarray,
    alphas: np.ndarray,
    colors: np.ndarray,
    bounds: np.ndarray,
    width: int,
    height: int,
    sigma_min: float,
    sigma_max: float,
    early_exit: float,
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Naive rasterizer: every splat is evaluated against every pixel."""
    dtype = mean2d.dtype
    px, py = _pixel_grid(0, width, 0, height, dtype)
    rgb = np.zeros((height, width, 3), dtype=dtype)
    transmittance = np.ones((height, width), dtype=dtype)
    for k in order:
        sigma, _, _ = _splat_sigma(k, mean2d, conic, alphas[k], px, py, sigma_max)
        use = sigma > sigma_min
        if early_exit > 0.0:
            use &= transmittance >= early_exit
        sig = np.where(use, sigma, dtype.type(0.0))
        rgb += colors[k] * (sig * transmittance)[..., None]
        transmittance = transmittance * (1 - sig)
    rgb += transmittance[..., None] * background
    return rgb, transmittance


def rasterize_tiled(
    order: np.ndarray,
    mean2d: np.ndarray,
    conic: np.ndarray,
    alphas: np.ndarray,
    colors: np.ndarray,
    bounds: np.ndarray,
    width: int,
    height: int,
    sigma_min: float,
    sigma_max: float,
    early_exit: float,
    background: np.ndarray,
    tile: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Tile-binned rasterizer; compositing math identical to the reference."""
    dtype = mean2d.dtype
    rgb = np.zeros((height, width, 3), dtype=dtype)
    transmittance = np.ones((height, width), dtype=dtype)
    x0s, x1s, y0s, y1s = bounds[:, 0], bounds[:, 1], bounds[:, 2], bounds[:, 3]
    for ty in range(0, height, tile):
        y1 = min(ty + tile, height)
        for tx in range(0, width, tile):
            x1 = min(tx + tile, width)
            in_tile = order[
                (x0s[order] < x1) & (x1s[order] > tx) & (y0s[order] < y1) & (y1s[order] > ty)
            ]
            if in_tile.size == 0:
                rgb[ty:y1, tx:x1] += transmittance[ty:y1, tx:x1, None] * background
                continue
            px, py = _pixel_grid(tx, x1, ty, y1, dtype)
            tile_rgb = rgb[ty:y1, tx:x1]
            tile_t = transmittance[ty:y1, tx:x1]
            for k in in_tile:
                sigma, _, _ = _splat_sigma(k, mean2d, conic, alphas[k], px, py, sigma_max)
                use = sigma > sigma_min
                if early_exit > 0.0:
                    use &= tile_t >= early_exit
                sig = np.where(use, sigma, dtype.type(0.0))
                tile_rgb += colors[k] * (sig * tile_t)[..., None]
                tile_t[...] = tile_t * (1 - sig)
            tile_rgb += tile_t[..., None] * background
    return rgb, transmittance


def backward(
    order: np.ndarray,
    rotations: np.ndarray,
    log_scales: np.ndarray,
    alphas: np.ndarray,
    colors: np.ndarray,
    mean2d: np.ndarray,
    conic: np.ndarray,
    tview: np.ndarray,
    bounds: np.ndarray,
    upstream: np.ndarray,
    cam_rot: np.ndarray,
    fx: float,
    fy: float,
    width: int,
    height: int,
    sigma_min: float,
    sigma_max: float,
    early_exit: float,
    background: np.ndarray,
):
    """Adjoint of the rasterizer: upstream (H, W, 3) gradients down to the
    Gaussian parameters. Returns (d_positions, d_rotations, d_log_scales,
    d_opacities, d_colors); culled rows stay zero.
    """
    dtype = mean2d.dtype
    n = mean2d.shape[0]
    transmittance = np.ones((height, width), dtype=dtype)

    # forward replay, keeping per-splat window state for the reverse sweep
    records: list[tuple | None] = []
    for k in order:
        x0, x1, y0, y1 = bounds[k]
        if x0 >= x1 or y0 >= y1:
            records.append(None)
            continue
        px, py = _pixel_grid(x0, x1, y0, y1, dtype)
        sigma, sraw, (dx, dy) = _splat_sigma(k, mean2d, conic, alphas[k], px, py, sigma_max)
        use = sigma > sigma_min
        t_win = transmittance[y0:y1, x0:x1]
        if early_exit > 0.0:
            use &= t_win >= early_exit
        sig = np.where(use, sigma, dtype.type(0.0))
        sraw = np.where(use, sraw, dtype.type(0.0))
        records.append((x0, x1, y0, y1, sig, sraw, t_win.copy(), dx, dy))
        transmittance[y0:y1, x0:x1] = t_win * (1 - sig)

    g_mean2d = np.zeros((n, 2), dtype=np.float64)
    g_conic = np.zeros((n, 3), dtype=np.float64)
    g_alpha = np.zeros(n, dtype=np.float64)
    g_color = np.zeros((n, 3), dtype=np.float64)

    # reverse sweep: suffix holds the color composited after the current splat
    suffix = transmittance[..., None].astype(np.float64) * background.astype(np.float64)
    upstream64 = upstream.astype(np.float64)
    for k, rec in zip(order[::-1], records[::-1]):
        if rec is None:
            continue
        x0, x1, y0, y1, sig, sraw, t_before, dx, dy = rec
        sig = sig.astype(np.float64)
        sraw = sraw.astype(np.float64)
        t_before = t_before.astype(np.float64)
        g_win = upstream64[y0:y1, x0:x1]
        suf_win = suffix[y0:y1, x0:x1]
        contrib = sig * t_before

        g_color[k] += np.einsum("hwc,hw->c", g_win, contrib)

        color_k = colors[k].astype(np.float64)
        d_sig = np.einsum("hwc,hwc->hw", g_win, color_k[None, None, :] * t_before[..., None] - suf_win / (1 - sig)[..., None])
        d_sig = np.where(sig > 0, d_sig, 0.0)
        d_sraw = np.where(sraw <= sigma_max, d_sig, 0.0)

        alpha = float(alphas[k])
        if alpha > 0.0:
            gauss = sraw / alpha
            g_alpha[k] += float(np.sum(d_sraw * gauss))
        d_quad = -0.5 * sraw * d_sraw
        dx64 = dx.astype(np.float64)
        dy64 = dy.astype(np.float64)
        g_conic[k, 0] += float(np.sum(d_quad * dx64 * dx64))
        g_conic[k, 1] += float(np.sum(d_quad * 2.0 * dx64 * dy64))
        g_conic[k, 2] += float(np.sum(d_quad * dy64 * dy64))
        a, b, c = (float(v) for v in conic[k])
        d_dx = d_quad * (2 * a * dx64 + 2 * b * dy64)
        d_dy = d_quad * (2 * b * dx64 + 2 * c * dy64)
        g_mean2d[k, 0] += -float(np.sum(d_dx))
        g_mean2d[k, 1] += -float(np.sum(d_dy))

        suf_win += color_k * contrib[..., None]

    return chain_to_params(
        rotations, log_scales, tview, conic, g_mean2d, g_conic, g_alpha, g_color, cam_rot, fx, fy
    )


def chain_to_params(
    rotations: np.ndarray,
    log_scales: np.ndarray,
    tview: np.ndarray,
    conic: np.ndarray,
    g_mean2d: np.ndarray,
    g_conic: np.ndarray,
    g_alpha: np.ndarray,
    g_color: np.ndarray,
    cam_rot: np.ndarray,
    fx: float,
    fy: float,
):
    """Chain image-plane gradients through the EWA projection and the
    quaternion/scale covariance construction, vectorized over Gaussians."""
    n = rotations.shape[0]
    d_positions = np.zeros((n, 3), dtype=np.float64)
    d_rotations = np.zeros((n, 4), dtype=np.float64)
    d_log_scales = np.zeros((n, 3), dtype=np.float64)

    live = (
        np.any(g_mean2d != 0, axis=1)
        | np.any(g_conic != 0, axis=1)
        | (g_alpha != 0)
        | np.any(g_color != 0, axis=1)
    )
    idx = np.flatnonzero(live)
    if idx.size == 0:
        return d_positions, d_rotations, d_log_scales, g_alpha, g_color

    quats = rotations[idx].astype(np.float64)
    rot_q, n_q, raw_norm = _rotation_matrices(quats)
    scales = np.exp(log_scales[idx].astype(np.float64))
    m = rot_q * scales[:, None, :]
    cov3d = m @ np.transpose(m, (0, 2, 1))

    cam_rot64 = cam_rot.astype(np.float64)
    tv = tview[idx].astype(np.float64)
    tx, ty, tz = tv[:, 0], tv[:, 1], tv[:, 2]
    jac = np.zeros((idx.size, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / (tz * tz)
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / (tz * tz)
    u = jac @ cam_rot64

    # conic -> cov2d through the 2x2 inverse
    con = conic[idx].astype(np.float64)
    a_mat = np.empty((idx.size, 2, 2), dtype=np.float64)
    a_mat[:, 0, 0] = con[:, 0]
    a_mat[:, 0, 1] = con[:, 1]
    a_mat[:, 1, 0] = con[:, 1]
    a_mat[:, 1, 1] = con[:, 2]
    g_a = np.empty_like(a_mat)
    g_a[:, 0, 0] = g_conic[idx, 0]
    g_a[:, 0, 1] = g_conic[idx, 1] / 2.0
    g_a[:, 1, 0] = g_conic[idx, 1] / 2.0
    g_a[:, 1, 1] = g_conic[idx, 2]
    g_cov2d = -a_mat @ g_a @ a_mat

    g_sym = g_cov2d + np.transpose(g_cov2d, (0, 2, 1))
    g_u = g_sym @ u @ cov3d
    g_cov3d = np.transpose(u, (0, 2, 1)) @ g_cov2d @ u
    g_jac = g_u @ cam_rot64.T

    gm = g_mean2d[idx]
    tz2 = tz * tz
    tz3 = tz2 * tz
    d_tview = np.empty((idx.size, 3), dtype=np.float64)
    d_tview[:, 0] = gm[:, 0] * fx / tz + g_jac[:, 0, 2] * (-fx / tz2)
    d_tview[:, 1] = gm[:, 1] * fy / tz + g_jac[:, 1, 2] * (-fy / tz2)
    d_tview[:, 2] = (
        gm[:, 0] * (-fx * tx / tz2)
        + gm[:, 1] * (-fy * ty / tz2)
        + g_jac[:, 0, 0] * (-fx / tz2)
        + g_jac[:, 1, 1] * (-fy / tz2)
        + g_jac[:, 0, 2] * (2.0 * fx * tx / tz3)
        + g_jac[:, 1, 2] * (2.0 * fy * ty / tz3)
    )
    d_positions[idx] = d_tview @ cam_rot64

    g_m = (g_cov3d + np.transpose(g_cov3d, (0, 2, 1))) @ m
    d_log_scales[idx] = np.einsum("nrk,nrk->nk", g_m, rot_q) * scales
    g_rot = g_m * scales[:, None, :]

    w, x, y, z = n_q[:, 0], n_q[:, 1], n_q[:, 2], n_q[:, 3]
    zeros = np.zeros_like(w)
    dr_dw = 2 * np.stack(
        [np.stack([zeros, -z, y], -1), np.stack([z, zeros, -x], -1), np.stack([-y, x, zeros], -1)], -2
    )
    dr_dx = 2 * np.stack(
        [np.stack([zeros, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], -2
    )
    dr_dy = 2 * np.stack(
        [np.stack([-2 * y, x, w], -1), np.stack([x, zeros, z], -1), np.stack([-w, z, -2 * y], -1)], -2
    )
    dr_dz = 2 * np.stack(
        [np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, zeros], -1)], -2
    )
    d_n = np.stack(
        [
            np.einsum("nrk,nrk->n", g_rot, dr_dw),
            np.einsum("nrk,nrk->n", g_rot, dr_dx),
            np.einsum("nrk,nrk->n", g_rot, dr_dy),
            np.einsum("nrk,nrk->n", g_rot, dr_dz),
        ],
        axis=-1,
    )
    # through the normalization q / |q|
    d_rotations[idx] = (d_n - n_q * np.sum(n_q * d_n, axis=1, keepdims=True)) / raw_norm[:, None]

    return d_positions, d_rotations, d_log_scales, g_alpha, g_color
