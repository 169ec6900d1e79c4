"""Isosurface extraction and evaluation metrics.

Fields are batched callables f(points (N, 3)) -> (N,) with negative inside.
Above resolution 32 the grid is evaluated sparsely (coarse pass at res/4,
refine cells whose min corner |value| <= 1.5x the coarse cell diagonal,
dilated by one cell) -- identical to dense output for fields with near-unit
gradient; pass sparse=False to force dense evaluation.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels

_EVAL_CHUNK = 65536
_FILL = 1e10


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3)
    triangles: np.ndarray  # (M, 3) int

    @property
    def num_vertices(self):
        return int(self.vertices.shape[0])

    @property
    def num_triangles(self):
        return int(self.triangles.shape[0])

    def triangle_corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def is_empty(self):
        return self.num_triangles == 0


@dataclass
class MetricReport:
    iou_percent: float = float("nan")
    chamfer_l1: float = float("nan")
    f_score_percent: float = float("nan")
    mpjpe: float = float("nan")
    d_s2m: float = float("nan")
    config: dict = dc_field(default_factory=dict)

    def to_text(self):
        lines = []
        for k in ("iou_percent", "chamfer_l1", "f_score_percent", "mpjpe", "d_s2m"):
            lines.append(f"{k}={getattr(self, k):.9g}")
        for k in sorted(self.config):
            lines.append(f"config.{k}={self.config[k]}")
        return "\n".join(lines) + "\n"


def _evaluate_points(fn, pts):
    out = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, pts.shape[0])
        v = np.asarray(fn(pts[lo:hi]), dtype=np.float64).reshape(hi - lo)
        out[lo:hi] = v
    if np.any(np.isnan(out)):
        raise ValueError("field returned NaN at a grid point")
    return out


def _grid_points(lo, h, idx, n):
    iz = idx % n
    iy = (idx // n) % n
    ix = idx // (n * n)
    return lo[None, :] + np.stack([ix, iy, iz], axis=1) * h[None, :]


def _dense_values(fn, lo, h, n):
    idx = np.arange(n * n * n, dtype=np.int64)
    return _evaluate_points(fn, _grid_points(lo, h, idx, n)), None


def _sparse_values(fn, lo, h, n, res):
    factor = 4
    rc = res // factor
    nc = rc + 1
    # coarse pass on every 4th grid point
    ci = np.arange(nc, dtype=np.int64) * factor
    cidx = ((ci[:, None, None] * n + ci[None, :, None]) * n + ci[None, None, :])
    cvals = _evaluate_points(fn, _grid_points(lo, h, cidx.reshape(-1), n)).reshape(nc, nc, nc)

    corner_min = np.full((rc, rc, rc), np.inf)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner_min = np.minimum(
                    corner_min, np.abs(cvals[dx:rc + dx, dy:rc + dy, dz:rc + dz]))
    diag = float(np.linalg.norm(h * factor))
    mark = corner_min <= 1.5 * diag
    # dilate by one coarse cell in all directions
    for ax in range(3):
        shifted = np.zeros_like(mark)
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[ax] = slice(1, None)
        sl1[ax] = slice(None, -1)
        shifted[tuple(sl0)] |= mark[tuple(sl1)]
        shifted[tuple(sl1)] |= mark[tuple(sl0)]
        mark |= shifted

    cell_allow = np.repeat(np.repeat(np.repeat(mark, factor, 0), factor, 1), factor, 2)
    pmask = np.zeros((n, n, n), dtype=bool)
    r = res
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                pmask[dx:r + dx, dy:r + dy, dz:r + dz] |= cell_allow

    values = np.full(n * n * n, _FILL)
    values[cidx.reshape(-1)] = cvals.reshape(-1)
    todo = pmask.reshape(-1).copy()
    todo[cidx.reshape(-1)] = False  # coarse points already evaluated
    ids = np.nonzero(todo)[0]
    if ids.size:
        values[ids] = _evaluate_points(fn, _grid_points(lo, h, ids, n))
    return values, cell_allow.reshape(-1)


def marching_cubes(fn, bbox, resolution, sparse=True):
    """Extract the zero level set as a triangle mesh.

    Standard 256-case lookup with linear interpolation along crossed grid
    edges; vertices on shared edges are emitted once.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    n = resolution + 1
    h = (hi - lo) / resolution

    if sparse and resolution > 32 and resolution % 4 == 0:
        values, cell_allow = _sparse_values(fn, lo, h, n, resolution)
    else:
        values, cell_allow = _dense_values(fn, lo, h, n)

    grid = values.reshape(n, n, n)
    inside = grid < 0.0
    r = resolution
    any_in = np.zeros((r, r, r), dtype=bool)
    all_in = np.ones((r, r, r), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = inside[dx:r + dx, dy:r + dy, dz:r + dz]
                any_in |= c
                all_in &= c
    active = (any_in & ~all_in).reshape(-1)
    if cell_allow is not None:
        active &= cell_allow
    cell_ids = np.nonzero(active)[0]
    if cell_ids.size == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    tri_keys = kernels.mc_cell_triangles(values, (n, n, n), cell_ids)
    uniq, inv = np.unique(tri_keys.reshape(-1), return_inverse=True)
    pt = uniq // 3
    axis = (uniq % 3).astype(np.int64)
    stride = np.array([n * n, n, 1], dtype=np.int64)
    v0 = values[pt]
    v1 = values[pt + stride[axis]]
    t = v0 / (v0 - v1)
    pos = _grid_points(lo, h, pt, n)
    pos[np.arange(uniq.size), axis] += t * h[axis]
    tris = inv.reshape(-1, 3)

    # drop degenerate triangles, then unreferenced vertices
    a, b, c = pos[tris[:, 0]], pos[tris[:, 1]], pos[tris[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    keep = area2 > 2e-14
    tris = tris[keep]
    used = np.unique(tris.reshape(-1))
    remap = np.full(uniq.size, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return Mesh(pos[used], remap[tris])


def edge_use_counts(mesh):
    """Multiset of undirected edge usages; 2 everywhere means closed."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_closed(mesh):
    if mesh.is_empty():
        return False
    return bool(np.all(edge_use_counts(mesh) == 2))


def iou(field_a, field_b, bbox, n_samples, seed):
    """Monte-Carlo intersection-over-union of the negative regions, in %."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    rng = np.random.default_rng(seed)
    inter = 0
    union = 0
    remaining = int(n_samples)
    while remaining > 0:
        m = min(remaining, _EVAL_CHUNK * 4)
        pts = rng.uniform(lo, hi, size=(m, 3))
        sa = _evaluate_points(field_a, pts) < 0.0
        sb = _evaluate_points(field_b, pts) < 0.0
        inter += int(np.sum(sa & sb))
        union += int(np.sum(sa | sb))
        remaining -= m
    if union == 0:
        return 100.0
    return 100.0 * inter / union


def chamfer_l1(p, q):
    """Symmetric mean nearest-neighbor distance between point sets."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("chamfer_l1 needs two non-empty point sets")
    return 0.5 * (kernels.nn_dists(p, q).mean() + kernels.nn_dists(q, p).mean())


def f_score(p, q, tau):
    """Harmonic mean of precision/recall at distance threshold tau, in %."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    precision = float(np.mean(kernels.nn_dists(p, q) <= tau))
    recall = float(np.mean(kernels.nn_dists(q, p) <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def mpjpe(j_pred, j_gt):
    """Mean Euclidean error over joints."""
    j_pred = np.asarray(j_pred, dtype=np.float64)
    j_gt = np.asarray(j_gt, dtype=np.float64)
    if j_pred.shape != j_gt.shape:
        raise ValueError("joint arrays must have equal shapes")
    return float(np.linalg.norm(j_pred - j_gt, axis=1).mean())


def scan_to_mesh(points, mesh):
    """One-sided mean distance from scan points to the mesh surface."""
    if mesh.is_empty():
        raise ValueError("mesh has no triangles")
    v0, v1, v2 = mesh.triangle_corners()
    return float(kernels.points_to_triangles(np.asarray(points, dtype=np.float64),
                                             v0, v1, v2).mean())


# ---------------------------------------------------------------------------
# mesh I/O
# ---------------------------------------------------------------------------


def export_mesh(mesh, path, fmt=None):
    """Write ASCII OBJ or PLY (9 significant digits)."""
    path = str(path)
    if fmt is None:
        fmt = "ply" if path.lower().endswith(".ply") else "obj"
    if fmt not in ("obj", "ply"):
        raise ValueError(f"unknown mesh format {fmt!r}")
    v = mesh.vertices
    t = mesh.triangles
    lines = []
    if fmt == "obj":
        for p in v:
            lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
        for f in t:
            lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    else:
        lines += ["ply", "format ascii 1.0", f"element vertex {len(v)}",
                  "property double x", "property double y", "property double z",
                  f"element face {len(t)}",
                  "property list uchar int vertex_indices", "end_header"]
        for p in v:
            lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
        for f in t:
            lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    path = str(path)
    with open(path) as fh:
        first = fh.readline().strip()
        fh.seek(0)
        if first == "ply":
            return _load_ply(fh)
        return _load_obj(fh)


def _load_obj(fh):
    verts = []
    tris = []
    for line in fh:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(tris, dtype=np.int64).reshape(-1, 3))


def _load_ply(fh):
    nv = nf = 0
    for line in fh:
        s = line.strip()
        if s.startswith("element vertex"):
            nv = int(s.split()[-1])
        elif s.startswith("element face"):
            nf = int(s.split()[-1])
        elif s == "end_header":
            break
    verts = [[float(x) for x in fh.readline().split()[:3]] for _ in range(nv)]
    tris = [[int(x) for x in fh.readline().split()[1:4]] for _ in range(nf)]
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(tris, dtype=np.int64).reshape(-1, 3))
