"""Numba kernels for volume rendering and photometric fitting.

Grid values are stored at the caller's dtype (float32 in production, float64
in gradient-check tests); per-ray accumulation always runs in float64 so the
weight/transmittance identity holds far below test tolerances.

Gradient accumulation is split over a fixed number of blocks, each with its
own scratch and gradient buffer, reduced in block order afterwards. The
reduction order therefore never depends on the thread count, which makes fit
results reproducible across machines for a given seed.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# Fixed block count for deterministic gradient reduction.
GRAD_BLOCKS = 16

# Scratch columns per sample (see _fit_batch backward pass).
_SC = 14


@njit(inline="always")
def _splitmix64(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


@njit(inline="always")
def _unit_hash(seed, ray, k):
    """Deterministic uniform in [0, 1) keyed by (seed, ray, sample)."""
    h = _splitmix64(np.uint64(seed) ^ (np.uint64(ray + 1) * np.uint64(0x9E3779B97F4A7C15)) + np.uint64(k))
    return (h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, parallel=True, fastmath=True)
def render_batch(raw_d, raw_c, bb_lo, inv_cell, origins, dirs, t0, t1, K, bg,
                 term_eps, w_skip, out_rgb, out_tfin, out_depth, out_wsum):
    """Midpoint-rule volume rendering of a ray batch (no jitter).

    term_eps > 0 stops the march once transmittance drops below it; w_skip > 0
    skips the color fetch for samples whose weight is below it. Both leave the
    weight-sum identity exact.
    """
    nx, ny, nz = raw_d.shape
    n = origins.shape[0]
    dt = (t1 - t0) / K
    for r in prange(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        T = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        wsum = 0.0
        dsum = 0.0
        for k in range(K):
            t = t0 + (k + 0.5) * dt
            delta = dt if k < K - 1 else t1 - t
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            fx = (x - bb_lo[0]) * inv_cell[0]
            fy = (y - bb_lo[1]) * inv_cell[1]
            fz = (z - bb_lo[2]) * inv_cell[2]
            if fx < 0.0 or fy < 0.0 or fz < 0.0 or fx > nx - 1 or fy > ny - 1 or fz > nz - 1:
                continue
            ix = int(fx)
            iy = int(fy)
            iz = int(fz)
            if ix > nx - 2:
                ix = nx - 2
            if iy > ny - 2:
                iy = ny - 2
            if iz > nz - 2:
                iz = nz - 2
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            w000 = (1 - wx) * (1 - wy) * (1 - wz)
            w100 = wx * (1 - wy) * (1 - wz)
            w010 = (1 - wx) * wy * (1 - wz)
            w110 = wx * wy * (1 - wz)
            w001 = (1 - wx) * (1 - wy) * wz
            w101 = wx * (1 - wy) * wz
            w011 = (1 - wx) * wy * wz
            w111 = wx * wy * wz
            rawd = (raw_d[ix, iy, iz] * w000 + raw_d[ix + 1, iy, iz] * w100
                    + raw_d[ix, iy + 1, iz] * w010 + raw_d[ix + 1, iy + 1, iz] * w110
                    + raw_d[ix, iy, iz + 1] * w001 + raw_d[ix + 1, iy, iz + 1] * w101
                    + raw_d[ix, iy + 1, iz + 1] * w011 + raw_d[ix + 1, iy + 1, iz + 1] * w111)
            sigma = rawd if rawd > 30.0 else np.log1p(np.exp(rawd))
            alpha = 1.0 - np.exp(-sigma * delta)
            w = T * alpha
            wsum += w
            dsum += w * t
            if w > w_skip:
                c0 = (raw_c[ix, iy, iz, 0] * w000 + raw_c[ix + 1, iy, iz, 0] * w100
                      + raw_c[ix, iy + 1, iz, 0] * w010 + raw_c[ix + 1, iy + 1, iz, 0] * w110
                      + raw_c[ix, iy, iz + 1, 0] * w001 + raw_c[ix + 1, iy, iz + 1, 0] * w101
                      + raw_c[ix, iy + 1, iz + 1, 0] * w011 + raw_c[ix + 1, iy + 1, iz + 1, 0] * w111)
                c1 = (raw_c[ix, iy, iz, 1] * w000 + raw_c[ix + 1, iy, iz, 1] * w100
                      + raw_c[ix, iy + 1, iz, 1] * w010 + raw_c[ix + 1, iy + 1, iz, 1] * w110
                      + raw_c[ix, iy, iz + 1, 1] * w001 + raw_c[ix + 1, iy, iz + 1, 1] * w101
                      + raw_c[ix, iy + 1, iz + 1, 1] * w011 + raw_c[ix + 1, iy + 1, iz + 1, 1] * w111)
                c2 = (raw_c[ix, iy, iz, 2] * w000 + raw_c[ix + 1, iy, iz, 2] * w100
                      + raw_c[ix, iy + 1, iz, 2] * w010 + raw_c[ix + 1, iy + 1, iz, 2] * w110
                      + raw_c[ix, iy, iz + 1, 2] * w001 + raw_c[ix + 1, iy, iz + 1, 2] * w101
                      + raw_c[ix, iy + 1, iz + 1, 2] * w011 + raw_c[ix + 1, iy + 1, iz + 1, 2] * w111)
                cr += w / (1.0 + np.exp(-c0))
                cg += w / (1.0 + np.exp(-c1))
                cb += w / (1.0 + np.exp(-c2))
            T *= 1.0 - alpha
            if T < term_eps:
                break
        out_rgb[r, 0] = cr + T * bg[0]
        out_rgb[r, 1] = cg + T * bg[1]
        out_rgb[r, 2] = cb + T * bg[2]
        out_tfin[r] = T
        out_wsum[r] = wsum
        if wsum > 1e-8:
            out_depth[r] = dsum / wsum
        else:
            out_depth[r] = dsum / 1e-8


@njit(cache=True, parallel=True, fastmath=True)
def fit_batch(raw_d, raw_c, bb_lo, inv_cell, origins, dirs, targets, t0, t1, K,
              seed, bg, grad_d, grad_c, loss_out, scratch):
    """One stratified-jitter forward/backward pass over a ray batch.

    Accumulates d(loss)/d(raw grids) into per-block buffers (grad_d has shape
    (GRAD_BLOCKS, nx, ny, nz), grad_c likewise with a trailing channel axis)
    and the per-block sum of squared residuals into loss_out. The caller
    reduces blocks in index order. No skip heuristics here: the gradients are
    exact, which the finite-difference check relies on.
    """
    nx, ny, nz = raw_d.shape
    n = origins.shape[0]
    nblocks = grad_d.shape[0]
    per = (n + nblocks - 1) // nblocks
    dt = (t1 - t0) / K
    for b in prange(nblocks):
        gd = grad_d[b]
        gc = grad_c[b]
        sc = scratch[b]
        lo = b * per
        hi = min(n, lo + per)
        acc = 0.0
        for r in range(lo, hi):
            ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
            dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            u_cur = _unit_hash(seed, r, 0)
            for k in range(K):
                t = t0 + (k + u_cur) * dt
                if k < K - 1:
                    u_next = _unit_hash(seed, r, k + 1)
                    delta = (1.0 + u_next - u_cur) * dt
                    u_cur = u_next
                else:
                    delta = t1 - t
                x = ox + t * dx
                y = oy + t * dy
                z = oz + t * dz
                fx = (x - bb_lo[0]) * inv_cell[0]
                fy = (y - bb_lo[1]) * inv_cell[1]
                fz = (z - bb_lo[2]) * inv_cell[2]
                if fx < 0.0 or fy < 0.0 or fz < 0.0 or fx > nx - 1 or fy > ny - 1 or fz > nz - 1:
                    sc[k, 13] = 0.0
                    continue
                ix = int(fx)
                iy = int(fy)
                iz = int(fz)
                if ix > nx - 2:
                    ix = nx - 2
                if iy > ny - 2:
                    iy = ny - 2
                if iz > nz - 2:
                    iz = nz - 2
                wx = fx - ix
                wy = fy - iy
                wz = fz - iz
                w000 = (1 - wx) * (1 - wy) * (1 - wz)
                w100 = wx * (1 - wy) * (1 - wz)
                w010 = (1 - wx) * wy * (1 - wz)
                w110 = wx * wy * (1 - wz)
                w001 = (1 - wx) * (1 - wy) * wz
                w101 = wx * (1 - wy) * wz
                w011 = (1 - wx) * wy * wz
                w111 = wx * wy * wz
                rawd = (raw_d[ix, iy, iz] * w000 + raw_d[ix + 1, iy, iz] * w100
                        + raw_d[ix, iy + 1, iz] * w010 + raw_d[ix + 1, iy + 1, iz] * w110
                        + raw_d[ix, iy, iz + 1] * w001 + raw_d[ix + 1, iy, iz + 1] * w101
                        + raw_d[ix, iy + 1, iz + 1] * w011 + raw_d[ix + 1, iy + 1, iz + 1] * w111)
                sigma = rawd if rawd > 30.0 else np.log1p(np.exp(rawd))
                sprime = 1.0 / (1.0 + np.exp(-rawd))  # d softplus / d raw
                c0 = (raw_c[ix, iy, iz, 0] * w000 + raw_c[ix + 1, iy, iz, 0] * w100
                      + raw_c[ix, iy + 1, iz, 0] * w010 + raw_c[ix + 1, iy + 1, iz, 0] * w110
                      + raw_c[ix, iy, iz + 1, 0] * w001 + raw_c[ix + 1, iy, iz + 1, 0] * w101
                      + raw_c[ix, iy + 1, iz + 1, 0] * w011 + raw_c[ix + 1, iy + 1, iz + 1, 0] * w111)
                c1 = (raw_c[ix, iy, iz, 1] * w000 + raw_c[ix + 1, iy, iz, 1] * w100
                      + raw_c[ix, iy + 1, iz, 1] * w010 + raw_c[ix + 1, iy + 1, iz, 1] * w110
                      + raw_c[ix, iy, iz + 1, 1] * w001 + raw_c[ix + 1, iy, iz + 1, 1] * w101
                      + raw_c[ix, iy + 1, iz + 1, 1] * w011 + raw_c[ix + 1, iy + 1, iz + 1, 1] * w111)
                c2 = (raw_c[ix, iy, iz, 2] * w000 + raw_c[ix + 1, iy, iz, 2] * w100
                      + raw_c[ix, iy + 1, iz, 2] * w010 + raw_c[ix + 1, iy + 1, iz, 2] * w110
                      + raw_c[ix, iy, iz + 1, 2] * w001 + raw_c[ix + 1, iy, iz + 1, 2] * w101
                      + raw_c[ix, iy + 1, iz + 1, 2] * w011 + raw_c[ix + 1, iy + 1, iz + 1, 2] * w111)
                col0 = 1.0 / (1.0 + np.exp(-c0))
                col1 = 1.0 / (1.0 + np.exp(-c1))
                col2 = 1.0 / (1.0 + np.exp(-c2))
                alpha = 1.0 - np.exp(-sigma * delta)
                w = T * alpha
                cr += w * col0
                cg += w * col1
                cb += w * col2
                T *= 1.0 - alpha
                sc[k, 0] = sprime
                sc[k, 1] = col0
                sc[k, 2] = col1
                sc[k, 3] = col2
                sc[k, 4] = w
                sc[k, 5] = T  # transmittance after this sample
                sc[k, 6] = ix
                sc[k, 7] = iy
                sc[k, 8] = iz
                sc[k, 9] = wx
                sc[k, 10] = wy
                sc[k, 11] = wz
                sc[k, 12] = delta
                sc[k, 13] = 1.0
            cr += T * bg[0]
            cg += T * bg[1]
            cb += T * bg[2]
            er = 2.0 * (cr - targets[r, 0])
            eg = 2.0 * (cg - targets[r, 1])
            eb = 2.0 * (cb - targets[r, 2])
            acc += 0.25 * (er * er + eg * eg + eb * eb)
            # Backward: iterate samples in reverse, keeping suffix sums of
            # downstream weighted colors (initialized with the background term).
            sufr = T * bg[0]
            sufg = T * bg[1]
            sufb = T * bg[2]
            for k in range(K - 1, -1, -1):
                if sc[k, 13] == 0.0:
                    continue
                sprime = sc[k, 0]
                col0 = sc[k, 1]
                col1 = sc[k, 2]
                col2 = sc[k, 3]
                w = sc[k, 4]
                Tnext = sc[k, 5]
                delta = sc[k, 12]
                # d color / d (sigma_k * delta_k) = c_k * T_{k+1} - suffix
                da = (er * (col0 * Tnext - sufr)
                      + eg * (col1 * Tnext - sufg)
                      + eb * (col2 * Tnext - sufb))
                gsig = da * delta * sprime
                g0 = er * w * col0 * (1.0 - col0)
                g1 = eg * w * col1 * (1.0 - col1)
                g2 = eb * w * col2 * (1.0 - col2)
                sufr += w * col0
                sufg += w * col1
                sufb += w * col2
                ix = int(sc[k, 6])
                iy = int(sc[k, 7])
                iz = int(sc[k, 8])
                wx = sc[k, 9]
                wy = sc[k, 10]
                wz = sc[k, 11]
                w000 = (1 - wx) * (1 - wy) * (1 - wz)
                w100 = wx * (1 - wy) * (1 - wz)
                w010 = (1 - wx) * wy * (1 - wz)
                w110 = wx * wy * (1 - wz)
                w001 = (1 - wx) * (1 - wy) * wz
                w101 = wx * (1 - wy) * wz
                w011 = (1 - wx) * wy * wz
                w111 = wx * wy * wz
                gd[ix, iy, iz] += gsig * w000
                gd[ix + 1, iy, iz] += gsig * w100
                gd[ix, iy + 1, iz] += gsig * w010
                gd[ix + 1, iy + 1, iz] += gsig * w110
                gd[ix, iy, iz + 1] += gsig * w001
                gd[ix + 1, iy, iz + 1] += gsig * w101
                gd[ix, iy + 1, iz + 1] += gsig * w011
                gd[ix + 1, iy + 1, iz + 1] += gsig * w111
                gc[ix, iy, iz, 0] += g0 * w000
                gc[ix + 1, iy, iz, 0] += g0 * w100
                gc[ix, iy + 1, iz, 0] += g0 * w010
                gc[ix + 1, iy + 1, iz, 0] += g0 * w110
                gc[ix, iy, iz + 1, 0] += g0 * w001
                gc[ix + 1, iy, iz + 1, 0] += g0 * w101
                gc[ix, iy + 1, iz + 1, 0] += g0 * w011
                gc[ix + 1, iy + 1, iz + 1, 0] += g0 * w111
                gc[ix, iy, iz, 1] += g1 * w000
                gc[ix + 1, iy, iz, 1] += g1 * w100
                gc[ix, iy + 1, iz, 1] += g1 * w010
                gc[ix + 1, iy + 1, iz, 1] += g1 * w110
                gc[ix, iy, iz + 1, 1] += g1 * w001
                gc[ix + 1, iy, iz + 1, 1] += g1 * w101
                gc[ix, iy + 1, iz + 1, 1] += g1 * w011
                gc[ix + 1, iy + 1, iz + 1, 1] += g1 * w111
                gc[ix, iy, iz, 2] += g2 * w000
                gc[ix + 1, iy, iz, 2] += g2 * w100
                gc[ix, iy + 1, iz, 2] += g2 * w010
                gc[ix + 1, iy + 1, iz, 2] += g2 * w110
                gc[ix, iy, iz + 1, 2] += g2 * w001
                gc[ix + 1, iy, iz + 1, 2] += g2 * w101
                gc[ix, iy + 1, iz + 1, 2] += g2 * w011
                gc[ix + 1, iy + 1, iz + 1, 2] += g2 * w111
        loss_out[b] = acc
