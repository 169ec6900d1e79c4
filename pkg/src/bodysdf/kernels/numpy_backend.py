"""Pure-numpy kernel fallbacks (exact, vectorized, chunked for memory)."""

import numpy as np

from ..mc_tables import EDGE_ORIGIN, NTRI_TABLE, TRI_TABLE

_CHUNK = 4096


def capsule_part_distances(points, cap_a, cap_b, cap_r):
    """Signed distance from each point to each capsule -> (N, B)."""
    p = points[:, None, :]  # (N,1,3)
    a = cap_a[None, :, :]
    ba = (cap_b - cap_a)[None, :, :]
    denom = np.maximum(np.sum(ba * ba, axis=2), 1e-300)
    t = np.clip(np.sum((p - a) * ba, axis=2) / denom, 0.0, 1.0)
    closest = a + t[:, :, None] * ba
    return np.sqrt(np.sum((p - closest) ** 2, axis=2)) - cap_r[None, :]


def nn_dists(p, q):
    """Exact nearest-neighbor distances from each p to the set q."""
    out = np.empty(p.shape[0])
    chunk = max(1, (1 << 22) // max(1, q.shape[0]))
    for lo in range(0, p.shape[0], chunk):
        hi = min(lo + chunk, p.shape[0])
        d2 = np.sum((p[lo:hi, None, :] - q[None, :, :]) ** 2, axis=2)
        out[lo:hi] = np.sqrt(d2.min(axis=1))
    return out


def _closest_on_triangles(p, v0, v1, v2):
    """Min distance from each point to any triangle (chunk x T, exact)."""
    ab = v1 - v0
    ac = v2 - v0
    ap = p[:, None, :] - v0[None, :, :]
    d1 = np.sum(ab[None] * ap, axis=2)
    d2 = np.sum(ac[None] * ap, axis=2)
    bp = p[:, None, :] - v1[None, :, :]
    d3 = np.sum(ab[None] * bp, axis=2)
    d4 = np.sum(ac[None] * bp, axis=2)
    cp = p[:, None, :] - v2[None, :, :]
    d5 = np.sum(ab[None] * cp, axis=2)
    d6 = np.sum(ac[None] * cp, axis=2)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = np.maximum(va + vb + vc, 1e-300)
    v = vb / denom
    w = vc / denom
    closest = v0[None] + v[:, :, None] * ab[None] + w[:, :, None] * ac[None]

    # vertex and edge regions override the interior projection
    reg_a = (d1 <= 0) & (d2 <= 0)
    reg_b = (d3 >= 0) & (d4 <= d3)
    reg_c = (d6 >= 0) & (d5 <= d6)
    t_ab = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    reg_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t_ac = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    reg_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t_bc = np.divide(d4 - d3, (d4 - d3) + (d5 - d6), out=np.zeros_like(d4),
                     where=((d4 - d3) + (d5 - d6)) != 0)
    reg_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    pt_bc = v1[None] + t_bc[:, :, None] * (v2 - v1)[None]
    pt_ac = v0[None] + t_ac[:, :, None] * ac[None]
    pt_ab = v0[None] + t_ab[:, :, None] * ab[None]
    closest = np.where(reg_bc[:, :, None], pt_bc, closest)
    closest = np.where(reg_ac[:, :, None], pt_ac, closest)
    closest = np.where(reg_ab[:, :, None], pt_ab, closest)
    closest = np.where(reg_c[:, :, None], v2[None], closest)
    closest = np.where(reg_b[:, :, None], v1[None], closest)
    closest = np.where(reg_a[:, :, None], v0[None], closest)

    d = np.sqrt(np.sum((p[:, None, :] - closest) ** 2, axis=2))
    return d.min(axis=1)


def points_to_triangles(points, v0, v1, v2):
    out = np.empty(points.shape[0])
    chunk = max(1, _CHUNK * 64 // max(1, v0.shape[0]))
    for lo in range(0, points.shape[0], chunk):
        hi = min(lo + chunk, points.shape[0])
        out[lo:hi] = _closest_on_triangles(points[lo:hi], v0, v1, v2)
    return out


def mc_cell_triangles(values, dims, cell_ids):
    """Emit (T, 3) canonical edge keys for the given active cells.

    values: flat (nx*ny*nz) grid scalars; dims: (nx, ny, nz) point counts;
    cell_ids: flat cell indices (cells are (nx-1, ny-1, nz-1)). An edge key
    is point_flat_index * 3 + axis of the edge's low corner.
    """
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    cy = (ny - 1)
    cz = (nz - 1)
    ix = cell_ids // (cy * cz)
    iy = (cell_ids // cz) % cy
    iz = cell_ids % cz
    base = (ix * ny + iy) * nz + iz
    strides = np.array([ny * nz, nz, 1], dtype=np.int64)
    corner_off = np.array([(c & 1) * strides[0] + ((c >> 1) & 1) * strides[1]
                           + ((c >> 2) & 1) * strides[2] for c in range(8)], dtype=np.int64)
    corner_vals = values[base[:, None] + corner_off[None, :]]  # (K, 8)
    cases = ((corner_vals < 0.0).astype(np.int64)
             << np.arange(8, dtype=np.int64)).sum(axis=1)

    ntri = NTRI_TABLE[cases]
    total = int(ntri.sum())
    if total == 0:
        return np.empty((0, 3), dtype=np.int64)
    cell_rep = np.repeat(np.arange(cases.shape[0]), ntri)
    slot = np.arange(total) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    edges = TRI_TABLE[cases[cell_rep][:, None],
                      slot[:, None] * 3 + np.arange(3)[None, :]].astype(np.int64)
    eo = EDGE_ORIGIN.astype(np.int64)
    off = eo[edges]  # (T, 3, 4)
    pt = ((ix[cell_rep][:, None] + off[:, :, 0]) * ny
          + (iy[cell_rep][:, None] + off[:, :, 1])) * nz + (iz[cell_rep][:, None] + off[:, :, 2])
    return pt * 3 + off[:, :, 3]
