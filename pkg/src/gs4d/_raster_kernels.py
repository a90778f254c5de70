"""Single-threaded numba kernels for tile compositing.

Pixels composite splats front to back in depth order within their tile's
entry range. Channel layout inside ``colors`` is [rgb(3), depth(1),
seg(C_seg)]; the packed output inserts an alpha channel after depth, so
color channel ch maps to output channel ch for ch < 4 and ch + 1 after.

The backward kernel replays each pixel's contributor list in reverse,
reconstructing transmittance by division; iteration stops at the bound
the forward pass recorded so early-terminated tails stay gradient-free.
"""

import math

from numba import njit

ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-14


@njit(cache=True)
def composite_forward(
    tile_start,
    entries,
    mean2d,
    conic,
    opacity,
    colors,
    tiles_x,
    tile_size,
    height,
    width,
    out,
    t_final,
    n_contrib,
):
    n_tiles = tile_start.shape[0] - 1
    n_ch = colors.shape[1]
    for t in range(n_tiles):
        lo = tile_start[t]
        hi = tile_start[t + 1]
        if lo == hi:
            continue
        ty = t // tiles_x
        tx = t % tiles_x
        y1 = min((ty + 1) * tile_size, height)
        x1 = min((tx + 1) * tile_size, width)
        for py in range(ty * tile_size, y1):
            pfy = py + 0.5
            for px in range(tx * tile_size, x1):
                pfx = px + 0.5
                trans = 1.0
                bound = 0
                for k in range(lo, hi):
                    bound = k - lo + 1
                    g = entries[k]
                    dx = pfx - mean2d[g, 0]
                    dy = pfy - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opacity[g] * math.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_MIN:
                        continue
                    w = alpha * trans
                    for ch in range(n_ch):
                        co = ch if ch < 4 else ch + 1
                        out[py, px, co] += w * colors[g, ch]
                    trans *= 1.0 - alpha
                    if trans < T_STOP:
                        break
                t_final[py, px] = trans
                n_contrib[py, px] = bound


@njit(cache=True)
def composite_backward(
    tile_start,
    entries,
    mean2d,
    conic,
    opacity,
    colors,
    bg,
    tiles_x,
    tile_size,
    height,
    width,
    grad_out,
    t_final,
    n_contrib,
    d_mean2d,
    d_conic,
    d_opacity,
    d_colors,
):
    n_tiles = tile_start.shape[0] - 1
    n_ch = colors.shape[1]
    for t in range(n_tiles):
        lo = tile_start[t]
        hi = tile_start[t + 1]
        if lo == hi:
            continue
        ty = t // tiles_x
        tx = t % tiles_x
        y1 = min((ty + 1) * tile_size, height)
        x1 = min((tx + 1) * tile_size, width)
        for py in range(ty * tile_size, y1):
            pfy = py + 0.5
            for px in range(tx * tile_size, x1):
                bound = n_contrib[py, px]
                if bound == 0:
                    continue
                pfx = px + 0.5
                # suffix accumulator starts with the transmittance-dependent
                # terms: background blending and the alpha channel
                dldT = (
                    grad_out[py, px, 0] * bg[0]
                    + grad_out[py, px, 1] * bg[1]
                    + grad_out[py, px, 2] * bg[2]
                    - grad_out[py, px, 4]
                )
                suffix = dldT * t_final[py, px]
                trans = t_final[py, px]
                for k in range(lo + bound - 1, lo - 1, -1):
                    g = entries[k]
                    dx = pfx - mean2d[g, 0]
                    dy = pfy - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    gauss = math.exp(power)
                    alpha_raw = opacity[g] * gauss
                    clamped = alpha_raw > ALPHA_CLAMP
                    alpha = ALPHA_CLAMP if clamped else alpha_raw
                    if alpha < ALPHA_MIN:
                        continue
                    trans = trans / (1.0 - alpha)
                    w = alpha * trans
                    dldw = 0.0
                    for ch in range(n_ch):
                        co = ch if ch < 4 else ch + 1
                        go = grad_out[py, px, co]
                        dldw += go * colors[g, ch]
                        d_colors[g, ch] += w * go
                    dalpha = dldw * trans - suffix / (1.0 - alpha)
                    suffix += dldw * w
                    if not clamped:
                        d_opacity[g] += dalpha * gauss
                        dpower = dalpha * alpha_raw
                        d_conic[g, 0] += -0.5 * dx * dx * dpower
                        d_conic[g, 1] += -dx * dy * dpower
                        d_conic[g, 2] += -0.5 * dy * dy * dpower
                        ddx = -(conic[g, 0] * dx + conic[g, 1] * dy) * dpower
                        ddy = -(conic[g, 1] * dx + conic[g, 2] * dy) * dpower
                        d_mean2d[g, 0] -= ddx
                        d_mean2d[g, 1] -= ddy
