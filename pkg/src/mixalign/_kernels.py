"""Compiled inner loops for image sampling and orientation histograms.

Everything here works on plain float64 arrays; validation happens in the
calling modules.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _pixel(img, row, col):
    if row < 0 or col < 0 or row >= img.shape[0] or col >= img.shape[1]:
        return 0.0
    return img[row, col]


@njit(cache=True)
def sample_bilinear(img, x, y):
    """Bilinear read at (x, y); pixels outside the image read as zero."""
    h, w = img.shape
    if not (x > -1.0 and y > -1.0 and x < w and y < h):
        return 0.0
    fx0 = math.floor(x)
    fy0 = math.floor(y)
    col = int(fx0)
    row = int(fy0)
    fx = x - fx0
    fy = y - fy0
    v00 = _pixel(img, row, col)
    v01 = _pixel(img, row, col + 1)
    v10 = _pixel(img, row + 1, col)
    v11 = _pixel(img, row + 1, col + 1)
    # lerp form keeps constant regions exactly constant
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


@njit(cache=True)
def sample_points(img, xs, ys):
    out = np.empty(xs.shape[0])
    for i in range(xs.shape[0]):
        out[i] = sample_bilinear(img, xs[i], ys[i])
    return out


@njit(cache=True)
def warp_inverse_map(img, inv_linear, inv_translation, out_h, out_w):
    """out[r, c] = img(inv_linear @ (c, r) + inv_translation)."""
    out = np.empty((out_h, out_w))
    a = inv_linear[0, 0]
    b = inv_linear[0, 1]
    c = inv_linear[1, 0]
    d = inv_linear[1, 1]
    tx = inv_translation[0]
    ty = inv_translation[1]
    for r in range(out_h):
        for col in range(out_w):
            x = a * col + b * r + tx
            y = c * col + d * r + ty
            out[r, col] = sample_bilinear(img, x, y)
    return out


@njit(cache=True)
def orientation_histograms(img, centers, radius, cells, bins):
    """Raw (unnormalized) gradient-orientation histograms, one row per center.

    The patch holds 2*radius x 2*radius gradient samples at half-pixel
    offsets from the center. Votes are split linearly between the two
    nearest orientation bins and the 2x2 nearest spatial cells.
    """
    n = centers.shape[0]
    side = 2 * radius
    grid = side + 2
    cell_size = side / cells
    bin_width = 2.0 * math.pi / bins
    out = np.zeros((n, cells * cells * bins))
    samples = np.empty((grid, grid))
    for k in range(n):
        cx = centers[k, 0]
        cy = centers[k, 1]
        if not (math.isfinite(cx) and math.isfinite(cy)):
            continue
        x0 = cx - radius - 0.5
        y0 = cy - radius - 0.5
        for j in range(grid):
            for i in range(grid):
                samples[j, i] = sample_bilinear(img, x0 + i, y0 + j)
        for j in range(side):
            fy = (j + 0.5) / cell_size - 0.5
            cy0 = int(math.floor(fy))
            dy = fy - cy0
            for i in range(side):
                gx = 0.5 * (samples[j + 1, i + 2] - samples[j + 1, i])
                gy = 0.5 * (samples[j + 2, i + 1] - samples[j, i + 1])
                mag = math.sqrt(gx * gx + gy * gy)
                if mag == 0.0:
                    continue
                theta = math.atan2(gy, gx)
                if theta < 0.0:
                    theta += 2.0 * math.pi
                fo = theta / bin_width - 0.5
                o0 = int(math.floor(fo))
                do = fo - o0
                ob0 = o0 % bins
                ob1 = (o0 + 1) % bins
                fx = (i + 0.5) / cell_size - 0.5
                cx0 = int(math.floor(fx))
                dx = fx - cx0
                for yy in range(2):
                    cyy = cy0 + yy
                    if cyy < 0 or cyy >= cells:
                        continue
                    wy = dy if yy == 1 else 1.0 - dy
                    for xx in range(2):
                        cxx = cx0 + xx
                        if cxx < 0 or cxx >= cells:
                            continue
                        wx = dx if xx == 1 else 1.0 - dx
                        base = (cyy * cells + cxx) * bins
                        w = mag * wy * wx
                        out[k, base + ob0] += w * (1.0 - do)
                        out[k, base + ob1] += w * do
    return out
