"""Numba kernels for the discrete collision integral.

All kernels work on fields divided by the Maxwellian (``F / mu``) stored in a
zero-padded cube so that post-collision points never need bounds checks.
Gain products then use ``mu(xi') mu(xi*') = mu(xi) mu(xi*)``, which makes the
Maxwellian an exact discrete equilibrium.
"""
import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _trilinear(fp, base, tx, ty, tz, sx, sy):
    c000 = fp[base]
    c001 = fp[base + 1]
    c010 = fp[base + sy]
    c011 = fp[base + sy + 1]
    c100 = fp[base + sx]
    c101 = fp[base + sx + 1]
    c110 = fp[base + sx + sy]
    c111 = fp[base + sx + sy + 1]
    c00 = c000 + tz * (c001 - c000)
    c01 = c010 + tz * (c011 - c010)
    c10 = c100 + tz * (c101 - c100)
    c11 = c110 + tz * (c111 - c110)
    c0 = c00 + ty * (c01 - c00)
    c1 = c10 + ty * (c11 - c10)
    return c0 + tx * (c1 - c0)


@njit(cache=True, parallel=True)
def gain_kernel(n_axis, pad, f1p, f2p, mu, disp, wts):
    """Return ``sum_j mu_j sum_k W f1~(xi*') f2~(xi')`` for every output node.

    ``disp[m, k]`` is the displacement ``xi' - xi`` in lattice units for the
    relative offset ``m = j - i`` and angular node ``k``; ``xi*' - xi`` is
    then ``m - disp``.
    """
    n = n_axis
    n_nodes = n * n * n
    npad = n + 2 * pad
    sx = npad * npad
    sy = npad
    nm = 2 * n - 1
    nk = wts.shape[1]
    out = np.zeros(n_nodes)
    for i in prange(n_nodes):
        ix = i // (n * n)
        iy = (i // n) % n
        iz = i % n
        acc = 0.0
        for j in range(n_nodes):
            jx = j // (n * n)
            jy = (j // n) % n
            jz = j % n
            mx = jx - ix
            my = jy - iy
            mz = jz - iz
            midx = ((mx + n - 1) * nm + (my + n - 1)) * nm + (mz + n - 1)
            sub = 0.0
            for k in range(nk):
                w = wts[midx, k]
                if w == 0.0:
                    continue
                dx = disp[midx, k, 0]
                dy = disp[midx, k, 1]
                dz = disp[midx, k, 2]
                # xi' = xi + d
                fx = np.floor(dx)
                fy = np.floor(dy)
                fz = np.floor(dz)
                base = ((ix + int(fx) + pad) * npad + (iy + int(fy) + pad)) * npad + (iz + int(fz) + pad)
                v2 = _trilinear(f2p, base, dx - fx, dy - fy, dz - fz, sx, sy)
                # xi*' = xi + m - d
                ex = mx - dx
                ey = my - dy
                ez = mz - dz
                gx = np.floor(ex)
                gy = np.floor(ey)
                gz = np.floor(ez)
                base = ((ix + int(gx) + pad) * npad + (iy + int(gy) + pad)) * npad + (iz + int(gz) + pad)
                v1 = _trilinear(f1p, base, ex - gx, ey - gy, ez - gz, sx, sy)
                sub += w * v1 * v2
            acc += mu[j] * sub
        out[i] = acc
    return out


@njit(cache=True, parallel=True)
def loss_kernel(n_axis, f1, wsum):
    """Return ``sum_j Wsum[j - i] f1_j`` (the loss-term convolution)."""
    n = n_axis
    n_nodes = n * n * n
    nm = 2 * n - 1
    out = np.zeros(n_nodes)
    for i in prange(n_nodes):
        ix = i // (n * n)
        iy = (i // n) % n
        iz = i % n
        acc = 0.0
        for j in range(n_nodes):
            mx = j // (n * n) - ix
            my = (j // n) % n - iy
            mz = j % n - iz
            midx = ((mx + n - 1) * nm + (my + n - 1)) * nm + (mz + n - 1)
            acc += wsum[midx] * f1[j]
        out[i] = acc
    return out


@njit(cache=True, inline="always")
def _scatter(row, node_of, base, tx, ty, tz, sx, sy, scale):
    for a in range(2):
        wa = tx if a == 1 else 1.0 - tx
        for b in range(2):
            wb = ty if b == 1 else 1.0 - ty
            for c in range(2):
                wc = tz if c == 1 else 1.0 - tz
                node = node_of[base + a * sx + b * sy + c]
                if node >= 0:
                    row[node] += scale * wa * wb * wc


@njit(cache=True, parallel=True)
def jacobian_kernel(n_axis, pad, basep, base_nodes, mu, disp, wts, wsum, node_of, out):
    """Fill ``out`` with the matrix ``C`` of ``h -> Q(h, B) + Q(B, h)``.

    In terms of ``h~ = h / mu`` the plain operator is ``mu * (C @ h~)``.
    ``basep`` is ``B / mu`` zero padded and ``base_nodes`` its unpadded copy.
    """
    n = n_axis
    n_nodes = n * n * n
    npad = n + 2 * pad
    sx = npad * npad
    sy = npad
    nm = 2 * n - 1
    nk = wts.shape[1]
    for i in prange(n_nodes):
        ix = i // (n * n)
        iy = (i // n) % n
        iz = i % n
        row = out[i]
        diag = 0.0
        for j in range(n_nodes):
            jx = j // (n * n)
            jy = (j // n) % n
            jz = j % n
            mx = jx - ix
            my = jy - iy
            mz = jz - iz
            midx = ((mx + n - 1) * nm + (my + n - 1)) * nm + (mz + n - 1)
            muj = mu[j]
            for k in range(nk):
                w = wts[midx, k]
                if w == 0.0:
                    continue
                dx = disp[midx, k, 0]
                dy = disp[midx, k, 1]
                dz = disp[midx, k, 2]
                fx = np.floor(dx)
                fy = np.floor(dy)
                fz = np.floor(dz)
                b2 = ((ix + int(fx) + pad) * npad + (iy + int(fy) + pad)) * npad + (iz + int(fz) + pad)
                tx2 = dx - fx
                ty2 = dy - fy
                tz2 = dz - fz
                ex = mx - dx
                ey = my - dy
                ez = mz - dz
                gx = np.floor(ex)
                gy = np.floor(ey)
                gz = np.floor(ez)
                b1 = ((ix + int(gx) + pad) * npad + (iy + int(gy) + pad)) * npad + (iz + int(gz) + pad)
                tx1 = ex - gx
                ty1 = ey - gy
                tz1 = ez - gz
                base_at_p2 = _trilinear(basep, b2, tx2, ty2, tz2, sx, sy)
                base_at_p1 = _trilinear(basep, b1, tx1, ty1, tz1, sx, sy)
                # Q(h, B) gain: h~(xi*') B~(xi')
                _scatter(row, node_of, b1, tx1, ty1, tz1, sx, sy, muj * w * base_at_p2)
                # Q(B, h) gain: B~(xi*') h~(xi')
                _scatter(row, node_of, b2, tx2, ty2, tz2, sx, sy, muj * w * base_at_p1)
            ws = wsum[midx]
            # Q(h, B) loss: -h~_j B~_i ; Q(B, h) loss: -B~_j h~_i
            row[j] -= muj * ws * base_nodes[i]
            diag -= muj * ws * base_nodes[j]
        row[i] += diag
