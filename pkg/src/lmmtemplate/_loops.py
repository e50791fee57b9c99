"""Compiled inner loops.

Everything here works in voxel-index coordinates on C-contiguous float64
arrays. Physical units are handled by the callers.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _corner(c, n):
    # Clamp a continuous index into [0, n-1] and split into cell + fraction.
    if c < 0.0:
        c = 0.0
    elif c > n - 1:
        c = n - 1.0
    i0 = int(np.floor(c))
    if i0 > n - 2:
        i0 = max(n - 2, 0)
    f = c - i0
    i1 = min(i0 + 1, n - 1)
    return i0, i1, f


@njit(cache=True, nogil=True)
def sample_points(data, pts):
    """Trilinear samples of ``data`` (nx, ny, nz, C) at index points (M, 3)."""
    nx, ny, nz, nc = data.shape
    m = pts.shape[0]
    out = np.empty((m, nc))
    for p in range(m):
        x0, x1, fx = _corner(pts[p, 0], nx)
        y0, y1, fy = _corner(pts[p, 1], ny)
        z0, z1, fz = _corner(pts[p, 2], nz)
        for c in range(nc):
            c00 = data[x0, y0, z0, c] * (1 - fx) + data[x1, y0, z0, c] * fx
            c10 = data[x0, y1, z0, c] * (1 - fx) + data[x1, y1, z0, c] * fx
            c01 = data[x0, y0, z1, c] * (1 - fx) + data[x1, y0, z1, c] * fx
            c11 = data[x0, y1, z1, c] * (1 - fx) + data[x1, y1, z1, c] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            out[p, c] = c0 * (1 - fz) + c1 * fz
    return out


@njit(cache=True, nogil=True)
def warp_grid(data, disp):
    """Sample ``data`` (nx, ny, nz, C) at ``index + disp`` for every voxel.

    ``disp`` is (nx, ny, nz, 3) in index units.
    """
    nx, ny, nz, nc = data.shape
    out = np.empty((nx, ny, nz, nc))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, fx = _corner(i + disp[i, j, k, 0], nx)
                y0, y1, fy = _corner(j + disp[i, j, k, 1], ny)
                z0, z1, fz = _corner(k + disp[i, j, k, 2], nz)
                for c in range(nc):
                    c00 = data[x0, y0, z0, c] * (1 - fx) + data[x1, y0, z0, c] * fx
                    c10 = data[x0, y1, z0, c] * (1 - fx) + data[x1, y1, z0, c] * fx
                    c01 = data[x0, y0, z1, c] * (1 - fx) + data[x1, y0, z1, c] * fx
                    c11 = data[x0, y1, z1, c] * (1 - fx) + data[x1, y1, z1, c] * fx
                    c0 = c00 * (1 - fy) + c10 * fy
                    c1 = c01 * (1 - fy) + c11 * fy
                    out[i, j, k, c] = c0 * (1 - fz) + c1 * fz
    return out


@njit(cache=True, nogil=True)
def splat_grid(values, disp):
    """Adjoint of :func:`warp_grid`: spread ``values`` to the corners of ``index + disp``."""
    nx, ny, nz, nc = values.shape
    out = np.zeros((nx, ny, nz, nc))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, fx = _corner(i + disp[i, j, k, 0], nx)
                y0, y1, fy = _corner(j + disp[i, j, k, 1], ny)
                z0, z1, fz = _corner(k + disp[i, j, k, 2], nz)
                for c in range(nc):
                    v = values[i, j, k, c]
                    out[x0, y0, z0, c] += v * (1 - fx) * (1 - fy) * (1 - fz)
                    out[x1, y0, z0, c] += v * fx * (1 - fy) * (1 - fz)
                    out[x0, y1, z0, c] += v * (1 - fx) * fy * (1 - fz)
                    out[x1, y1, z0, c] += v * fx * fy * (1 - fz)
                    out[x0, y0, z1, c] += v * (1 - fx) * (1 - fy) * fz
                    out[x1, y0, z1, c] += v * fx * (1 - fy) * fz
                    out[x0, y1, z1, c] += v * (1 - fx) * fy * fz
                    out[x1, y1, z1, c] += v * fx * fy * fz
    return out


@njit(cache=True, nogil=True, inline="always")
def _sample_vec(vel, px, py, pz, nx, ny, nz):
    x0, x1, fx = _corner(px, nx)
    y0, y1, fy = _corner(py, ny)
    z0, z1, fz = _corner(pz, nz)
    w000 = (1 - fx) * (1 - fy) * (1 - fz)
    w100 = fx * (1 - fy) * (1 - fz)
    w010 = (1 - fx) * fy * (1 - fz)
    w110 = fx * fy * (1 - fz)
    w001 = (1 - fx) * (1 - fy) * fz
    w101 = fx * (1 - fy) * fz
    w011 = (1 - fx) * fy * fz
    w111 = fx * fy * fz
    r0 = 0.0
    r1 = 0.0
    r2 = 0.0
    for c in range(3):
        s = (
            vel[x0, y0, z0, c] * w000
            + vel[x1, y0, z0, c] * w100
            + vel[x0, y1, z0, c] * w010
            + vel[x1, y1, z0, c] * w110
            + vel[x0, y0, z1, c] * w001
            + vel[x1, y0, z1, c] * w101
            + vel[x0, y1, z1, c] * w011
            + vel[x1, y1, z1, c] * w111
        )
        if c == 0:
            r0 = s
        elif c == 1:
            r1 = s
        else:
            r2 = s
    return r0, r1, r2


@njit(cache=True, nogil=True)
def euler_grid(vel, steps):
    """Forward Euler flow of ``vel`` (index units per unit time) from every voxel.

    Returns the displacement ``phi(x, 1) - x`` in index units.
    """
    nx, ny, nz, _ = vel.shape
    out = np.empty((nx, ny, nz, 3))
    h = 1.0 / steps
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = float(i)
                py = float(j)
                pz = float(k)
                for _ in range(steps):
                    a, b, c = _sample_vec(vel, px, py, pz, nx, ny, nz)
                    px += h * a
                    py += h * b
                    pz += h * c
                out[i, j, k, 0] = px - i
                out[i, j, k, 1] = py - j
                out[i, j, k, 2] = pz - k
    return out


@njit(cache=True, nogil=True)
def euler_points(vel, pts, steps):
    """Forward Euler flow of ``vel`` from arbitrary index points (M, 3)."""
    nx, ny, nz, _ = vel.shape
    m = pts.shape[0]
    out = np.empty((m, 3))
    h = 1.0 / steps
    for p in range(m):
        px = pts[p, 0]
        py = pts[p, 1]
        pz = pts[p, 2]
        for _ in range(steps):
            a, b, c = _sample_vec(vel, px, py, pz, nx, ny, nz)
            px += h * a
            py += h * b
            pz += h * c
        out[p, 0] = px
        out[p, 1] = py
        out[p, 2] = pz
    return out


@njit(cache=True, nogil=True)
def _zspan(stencil):
    # Nonzero run of the (radial) stencil along z for every (dx, dy).
    sx, sy, sz = stencil.shape
    lo = np.full((sx, sy), sz, dtype=np.int64)
    hi = np.full((sx, sy), -1, dtype=np.int64)
    for i in range(sx):
        for j in range(sy):
            for k in range(sz):
                if stencil[i, j, k] != 0.0:
                    if k < lo[i, j]:
                        lo[i, j] = k
                    hi[i, j] = k
    return lo, hi


@njit(cache=True, nogil=True, fastmath=True)
def lattice_synthesize(coef, stencil, offset, stride, dims):
    """Evaluate ``sum_i K(x - c_i) coef_i`` on the voxel grid.

    ``coef`` is (Lx, Ly, Lz, C) on a lattice whose node ``i`` sits at voxel
    index ``offset + stride * i``; ``stencil`` holds K at integer voxel
    offsets in ``[-R, R]`` per axis. The result is component-major,
    (C, nx, ny, nz), so the innermost loop runs over contiguous memory.
    """
    lx, ly, lz, nc = coef.shape
    rx = (stencil.shape[0] - 1) // 2
    ry = (stencil.shape[1] - 1) // 2
    rz = (stencil.shape[2] - 1) // 2
    nx, ny, nz = dims[0], dims[1], dims[2]
    zlo, zhi = _zspan(stencil)
    out = np.zeros((nc, nx, ny, nz))
    for a in range(lx):
        cx = offset[0] + stride[0] * a
        i0 = max(cx - rx, 0)
        i1 = min(cx + rx, nx - 1)
        for b in range(ly):
            cy = offset[1] + stride[1] * b
            j0 = max(cy - ry, 0)
            j1 = min(cy + ry, ny - 1)
            for c in range(lz):
                cz = offset[2] + stride[2] * c
                k0 = max(cz - rz, 0)
                k1 = min(cz + rz, nz - 1)
                if nc == 3:
                    w0 = coef[a, b, c, 0]
                    w1 = coef[a, b, c, 1]
                    w2 = coef[a, b, c, 2]
                    if w0 == 0.0 and w1 == 0.0 and w2 == 0.0:
                        continue
                    for i in range(i0, i1 + 1):
                        dx = i - cx + rx
                        for j in range(j0, j1 + 1):
                            dy = j - cy + ry
                            ka = max(k0, cz - rz + zlo[dx, dy])
                            kb = min(k1, cz - rz + zhi[dx, dy])
                            sh = rz - cz
                            for k in range(ka, kb + 1):
                                s = stencil[dx, dy, k + sh]
                                out[0, i, j, k] += w0 * s
                                out[1, i, j, k] += w1 * s
                                out[2, i, j, k] += w2 * s
                    continue
                for q in range(nc):
                    w = coef[a, b, c, q]
                    if w == 0.0:
                        continue
                    for i in range(i0, i1 + 1):
                        dx = i - cx + rx
                        for j in range(j0, j1 + 1):
                            dy = j - cy + ry
                            ka = max(k0, cz - rz + zlo[dx, dy])
                            kb = min(k1, cz - rz + zhi[dx, dy])
                            sh = rz - cz
                            for k in range(ka, kb + 1):
                                out[q, i, j, k] += w * stencil[dx, dy, k + sh]
    return out


@njit(cache=True, nogil=True, fastmath=True)
def lattice_adjoint(field, stencil, offset, stride, lattice_shape):
    """Adjoint of :func:`lattice_synthesize`: ``a_i = sum_x K(x - c_i) field(x)``.

    ``field`` is component-major, (C, nx, ny, nz); the result is (Lx, Ly, Lz, C).
    """
    nc, nx, ny, nz = field.shape
    lx, ly, lz = lattice_shape[0], lattice_shape[1], lattice_shape[2]
    rx = (stencil.shape[0] - 1) // 2
    ry = (stencil.shape[1] - 1) // 2
    rz = (stencil.shape[2] - 1) // 2
    zlo, zhi = _zspan(stencil)
    out = np.zeros((lx, ly, lz, nc))
    for a in range(lx):
        cx = offset[0] + stride[0] * a
        i0 = max(cx - rx, 0)
        i1 = min(cx + rx, nx - 1)
        for b in range(ly):
            cy = offset[1] + stride[1] * b
            j0 = max(cy - ry, 0)
            j1 = min(cy + ry, ny - 1)
            for c in range(lz):
                cz = offset[2] + stride[2] * c
                k0 = max(cz - rz, 0)
                k1 = min(cz + rz, nz - 1)
                if nc == 3:
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    for i in range(i0, i1 + 1):
                        dx = i - cx + rx
                        for j in range(j0, j1 + 1):
                            dy = j - cy + ry
                            ka = max(k0, cz - rz + zlo[dx, dy])
                            kb = min(k1, cz - rz + zhi[dx, dy])
                            sh = rz - cz
                            for k in range(ka, kb + 1):
                                s = stencil[dx, dy, k + sh]
                                a0 += field[0, i, j, k] * s
                                a1 += field[1, i, j, k] * s
                                a2 += field[2, i, j, k] * s
                    out[a, b, c, 0] = a0
                    out[a, b, c, 1] = a1
                    out[a, b, c, 2] = a2
                    continue
                for q in range(nc):
                    acc = 0.0
                    for i in range(i0, i1 + 1):
                        dx = i - cx + rx
                        for j in range(j0, j1 + 1):
                            dy = j - cy + ry
                            ka = max(k0, cz - rz + zlo[dx, dy])
                            kb = min(k1, cz - rz + zhi[dx, dy])
                            sh = rz - cz
                            for k in range(ka, kb + 1):
                                acc += field[q, i, j, k] * stencil[dx, dy, k + sh]
                    out[a, b, c, q] = acc
    return out
