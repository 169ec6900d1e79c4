"""Numba-jitted hot kernels. Must match the numpy fallbacks bit-for-bit on
the per-pair arithmetic so accelerated == brute force holds exactly."""

import numpy as np
from numba import njit

from ..mc_tables import EDGE_ORIGIN, NTRI_TABLE, TRI_TABLE

_EDGE_ORIGIN = EDGE_ORIGIN.astype(np.int64)
_TRI_TABLE = TRI_TABLE.astype(np.int64)
_NTRI_TABLE = NTRI_TABLE.astype(np.int64)


@njit(cache=True)
def capsule_part_distances(points, cap_a, cap_b, cap_r):
    n = points.shape[0]
    B = cap_a.shape[0]
    out = np.empty((n, B))
    for b in range(B):
        bax = cap_b[b, 0] - cap_a[b, 0]
        bay = cap_b[b, 1] - cap_a[b, 1]
        baz = cap_b[b, 2] - cap_a[b, 2]
        denom = bax * bax + bay * bay + baz * baz
        if denom < 1e-300:
            denom = 1e-300
        for i in range(n):
            pax = points[i, 0] - cap_a[b, 0]
            pay = points[i, 1] - cap_a[b, 1]
            paz = points[i, 2] - cap_a[b, 2]
            t = (pax * bax + pay * bay + paz * baz) / denom
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = pax - t * bax
            dy = pay - t * bay
            dz = paz - t * baz
            out[i, b] = np.sqrt(dx * dx + dy * dy + dz * dz) - cap_r[b]
    return out


@njit(cache=True)
def _grid_build(q, lo, h, dims):
    n = q.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    cell_of = np.empty(n, dtype=np.int64)
    counts = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(n):
        cx = int((q[i, 0] - lo[0]) / h)
        cy = int((q[i, 1] - lo[1]) / h)
        cz = int((q[i, 2] - lo[2]) / h)
        if cx < 0:
            cx = 0
        if cy < 0:
            cy = 0
        if cz < 0:
            cz = 0
        if cx >= dims[0]:
            cx = dims[0] - 1
        if cy >= dims[1]:
            cy = dims[1] - 1
        if cz >= dims[2]:
            cz = dims[2] - 1
        c = (cx * dims[1] + cy) * dims[2] + cz
        cell_of[i] = c
        counts[c + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    order = np.empty(n, dtype=np.int64)
    cursor = counts[:-1].copy()
    for i in range(n):
        c = cell_of[i]
        order[cursor[c]] = i
        cursor[c] += 1
    return counts, order


@njit(cache=True)
def _nn_core(p, q, lo, h, dims, counts, order):
    n = p.shape[0]
    out = np.empty(n)
    maxdim = max(dims[0], max(dims[1], dims[2]))
    for i in range(n):
        cx = int((p[i, 0] - lo[0]) / h)
        cy = int((p[i, 1] - lo[1]) / h)
        cz = int((p[i, 2] - lo[2]) / h)
        if cx < 0:
            cx = 0
        if cy < 0:
            cy = 0
        if cz < 0:
            cz = 0
        if cx >= dims[0]:
            cx = dims[0] - 1
        if cy >= dims[1]:
            cy = dims[1] - 1
        if cz >= dims[2]:
            cz = dims[2] - 1
        best = np.inf
        for ring in range(maxdim + 1):
            if best <= (ring - 1.0) * h and ring > 0:
                break
            found_cell = False
            x0, x1 = max(0, cx - ring), min(dims[0] - 1, cx + ring)
            y0, y1 = max(0, cy - ring), min(dims[1] - 1, cy + ring)
            z0, z1 = max(0, cz - ring), min(dims[2] - 1, cz + ring)
            for gx in range(x0, x1 + 1):
                for gy in range(y0, y1 + 1):
                    for gz in range(z0, z1 + 1):
                        # only the shell of the ring
                        if (max(abs(gx - cx), max(abs(gy - cy), abs(gz - cz)))
                                != ring):
                            continue
                        found_cell = True
                        c = (gx * dims[1] + gy) * dims[2] + gz
                        for k in range(counts[c], counts[c + 1]):
                            j = order[k]
                            dx = p[i, 0] - q[j, 0]
                            dy = p[i, 1] - q[j, 1]
                            dz = p[i, 2] - q[j, 2]
                            d = np.sqrt(dx * dx + dy * dy + dz * dz)
                            if d < best:
                                best = d
            if not found_cell and best < np.inf:
                break
        out[i] = best
    return out


def nn_dists(p, q):
    lo = q.min(axis=0) - 1e-12
    hi = q.max(axis=0) + 1e-12
    extent = float(max(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], 1e-9))
    h = max(extent / max(2.0, np.cbrt(q.shape[0])), 1e-9)
    dims = np.maximum(1, np.ceil((hi - lo) / h).astype(np.int64))
    counts, order = _grid_build(q, lo, h, dims)
    return _nn_core(p, q, lo, h, dims, counts, order)


@njit(cache=True)
def _point_tri_dist(px, py, pz, a, b, c):
    abx = b[0] - a[0]
    aby = b[1] - a[1]
    abz = b[2] - a[2]
    acx = c[0] - a[0]
    acy = c[1] - a[1]
    acz = c[2] - a[2]
    apx = px - a[0]
    apy = py - a[1]
    apz = pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return np.sqrt(apx * apx + apy * apy + apz * apz)
    bpx = px - b[0]
    bpy = py - b[1]
    bpz = pz - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return np.sqrt(bpx * bpx + bpy * bpy + bpz * bpz)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        dx = apx - t * abx
        dy = apy - t * aby
        dz = apz - t * abz
        return np.sqrt(dx * dx + dy * dy + dz * dz)
    cpx = px - c[0]
    cpy = py - c[1]
    cpz = pz - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return np.sqrt(cpx * cpx + cpy * cpy + cpz * cpz)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        dx = apx - t * acx
        dy = apy - t * acy
        dz = apz - t * acz
        return np.sqrt(dx * dx + dy * dy + dz * dz)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        dx = bpx - t * (c[0] - b[0])
        dy = bpy - t * (c[1] - b[1])
        dz = bpz - t * (c[2] - b[2])
        return np.sqrt(dx * dx + dy * dy + dz * dz)
    denom = va + vb + vc
    if denom < 1e-300:
        denom = 1e-300
    v = vb / denom
    w = vc / denom
    dx = apx - (v * abx + w * acx)
    dy = apy - (v * aby + w * acy)
    dz = apz - (v * abz + w * acz)
    return np.sqrt(dx * dx + dy * dy + dz * dz)


@njit(cache=True)
def _tri_grid_build(v0, v1, v2, lo, h, dims):
    t = v0.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    counts = np.zeros(ncell + 1, dtype=np.int64)
    spans = np.empty((t, 6), dtype=np.int64)
    for i in range(t):
        for ax in range(3):
            mn = min(v0[i, ax], min(v1[i, ax], v2[i, ax]))
            mx = max(v0[i, ax], max(v1[i, ax], v2[i, ax]))
            c0 = int((mn - lo[ax]) / h)
            c1 = int((mx - lo[ax]) / h)
            if c0 < 0:
                c0 = 0
            if c1 >= dims[ax]:
                c1 = dims[ax] - 1
            if c1 < c0:
                c1 = c0
            spans[i, 2 * ax] = c0
            spans[i, 2 * ax + 1] = c1
        for gx in range(spans[i, 0], spans[i, 1] + 1):
            for gy in range(spans[i, 2], spans[i, 3] + 1):
                for gz in range(spans[i, 4], spans[i, 5] + 1):
                    counts[(gx * dims[1] + gy) * dims[2] + gz + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    entries = np.empty(counts[ncell], dtype=np.int64)
    cursor = counts[:-1].copy()
    for i in range(t):
        for gx in range(spans[i, 0], spans[i, 1] + 1):
            for gy in range(spans[i, 2], spans[i, 3] + 1):
                for gz in range(spans[i, 4], spans[i, 5] + 1):
                    c = (gx * dims[1] + gy) * dims[2] + gz
                    entries[cursor[c]] = i
                    cursor[c] += 1
    return counts, entries


@njit(cache=True)
def _p2t_core(p, v0, v1, v2, lo, h, dims, counts, entries):
    n = p.shape[0]
    out = np.empty(n)
    maxdim = max(dims[0], max(dims[1], dims[2]))
    for i in range(n):
        cx = int((p[i, 0] - lo[0]) / h)
        cy = int((p[i, 1] - lo[1]) / h)
        cz = int((p[i, 2] - lo[2]) / h)
        if cx < 0:
            cx = 0
        if cy < 0:
            cy = 0
        if cz < 0:
            cz = 0
        if cx >= dims[0]:
            cx = dims[0] - 1
        if cy >= dims[1]:
            cy = dims[1] - 1
        if cz >= dims[2]:
            cz = dims[2] - 1
        best = np.inf
        for ring in range(maxdim + 1):
            if ring > 0 and best <= (ring - 1.0) * h:
                break
            any_cell = False
            x0, x1 = max(0, cx - ring), min(dims[0] - 1, cx + ring)
            y0, y1 = max(0, cy - ring), min(dims[1] - 1, cy + ring)
            z0, z1 = max(0, cz - ring), min(dims[2] - 1, cz + ring)
            for gx in range(x0, x1 + 1):
                for gy in range(y0, y1 + 1):
                    for gz in range(z0, z1 + 1):
                        if (max(abs(gx - cx), max(abs(gy - cy), abs(gz - cz)))
                                != ring):
                            continue
                        any_cell = True
                        c = (gx * dims[1] + gy) * dims[2] + gz
                        for k in range(counts[c], counts[c + 1]):
                            t = entries[k]
                            d = _point_tri_dist(p[i, 0], p[i, 1], p[i, 2],
                                                v0[t], v1[t], v2[t])
                            if d < best:
                                best = d
            if not any_cell and best < np.inf:
                break
        out[i] = best
    return out


def points_to_triangles(points, v0, v1, v2):
    lo = np.minimum(np.minimum(v0.min(axis=0), v1.min(axis=0)), v2.min(axis=0)) - 1e-12
    hi = np.maximum(np.maximum(v0.max(axis=0), v1.max(axis=0)), v2.max(axis=0)) + 1e-12
    extent = float(max(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], 1e-9))
    h = max(extent / max(2.0, np.cbrt(v0.shape[0])), 1e-9)
    dims = np.maximum(1, np.ceil((hi - lo) / h).astype(np.int64))
    counts, entries = _tri_grid_build(v0, v1, v2, lo, h, dims)
    return _p2t_core(points, v0, v1, v2, lo, h, dims, counts, entries)


@njit(cache=True)
def _mc_core(values, nx, ny, nz, cell_ids, tri_table, ntri_table, edge_origin):
    k = cell_ids.shape[0]
    cy = ny - 1
    cz = nz - 1
    total = 0
    cases = np.empty(k, dtype=np.int64)
    for idx in range(k):
        cid = cell_ids[idx]
        ix = cid // (cy * cz)
        iy = (cid // cz) % cy
        iz = cid % cz
        case = 0
        for c in range(8):
            px = ix + (c & 1)
            py = iy + ((c >> 1) & 1)
            pz = iz + ((c >> 2) & 1)
            if values[(px * ny + py) * nz + pz] < 0.0:
                case |= 1 << c
        cases[idx] = case
        total += ntri_table[case]
    out = np.empty((total, 3), dtype=np.int64)
    w = 0
    for idx in range(k):
        cid = cell_ids[idx]
        ix = cid // (cy * cz)
        iy = (cid // cz) % cy
        iz = cid % cz
        case = cases[idx]
        for t in range(ntri_table[case]):
            for v in range(3):
                e = tri_table[case, 3 * t + v]
                px = ix + edge_origin[e, 0]
                py = iy + edge_origin[e, 1]
                pz = iz + edge_origin[e, 2]
                out[w, v] = ((px * ny + py) * nz + pz) * 3 + edge_origin[e, 3]
            w += 1
    return out


def mc_cell_triangles(values, dims, cell_ids):
    return _mc_core(values, int(dims[0]), int(dims[1]), int(dims[2]),
                    cell_ids.astype(np.int64), _TRI_TABLE, _NTRI_TABLE, _EDGE_ORIGIN)
