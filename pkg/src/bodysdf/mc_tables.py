"""Marching-cubes 256-case lookup tables, generated at import.

The table is built constructively instead of transcribed: marching-squares
segments on each cube face (fixed rule for the ambiguous diagonal case:
every maximal run of inside corners gets its own segment) are linked into
closed boundary cycles and fan-triangulated. Because the face rule is
face-local, adjacent cells always agree on the shared face, so the
extracted surface is crack-free and consistently oriented.

Conventions: corner c has offset bits (x, y, z) = (c & 1, c >> 1 & 1,
c >> 2 & 1); inside means value < iso; edge id = index into EDGE_ORIGIN,
whose rows are (dx, dy, dz, axis) of the edge's low corner.
"""

import numpy as np


def _build_edges():
    edges = []
    lookup = {}
    for axis in range(3):
        for c in range(8):
            if not (c >> axis) & 1:
                lookup[(c, axis)] = len(edges)
                edges.append((c & 1, (c >> 1) & 1, (c >> 2) & 1, axis))
    return np.array(edges, dtype=np.int8), lookup


EDGE_ORIGIN, _EDGE_ID = _build_edges()


def _faces():
    faces = []
    for a in range(3):
        for s in (0, 1):
            # (u, v) chosen so u x v points along the outward normal
            if s == 1:
                u, v = (a + 1) % 3, (a + 2) % 3
            else:
                u, v = (a + 2) % 3, (a + 1) % 3
            corners = []
            for uu, vv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                corners.append((s << a) | (uu << u) | (vv << v))
            faces.append(corners)
    return faces


_FACES = _faces()


def _edge_between(c0, c1):
    axis = (c0 ^ c1).bit_length() - 1
    return _EDGE_ID[(min(c0, c1), axis)]


def _face_segments(corners, inside):
    """Directed (enter_edge, exit_edge) per maximal inside run on one face."""
    flags = [inside[c] for c in corners]
    if all(flags) or not any(flags):
        return []
    segs = []
    for i in range(4):
        prev = flags[(i - 1) % 4]
        if flags[i] and not prev:  # run starts at corner i
            j = i
            while flags[(j + 1) % 4]:
                j += 1
            enter = _edge_between(corners[(i - 1) % 4], corners[i % 4])
            exit_ = _edge_between(corners[j % 4], corners[(j + 1) % 4])
            segs.append((enter, exit_))
    return segs


def _case_triangles(mask):
    inside = [(mask >> c) & 1 for c in range(8)]
    nxt = {}
    for corners in _FACES:
        for enter, exit_ in _face_segments(corners, inside):
            nxt[enter] = exit_
    tris = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        cycle = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            cycle.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        for k in range(1, len(cycle) - 1):
            tris.append((cycle[0], cycle[k], cycle[k + 1]))
    return tris


def _build_tables():
    all_tris = [_case_triangles(m) for m in range(256)]
    max_t = max(len(t) for t in all_tris)
    tri = np.full((256, max_t * 3), -1, dtype=np.int8)
    ntri = np.zeros(256, dtype=np.int64)
    for m, ts in enumerate(all_tris):
        ntri[m] = len(ts)
        for k, (a, b, c) in enumerate(ts):
            tri[m, 3 * k:3 * k + 3] = (a, b, c)
    return tri, ntri


TRI_TABLE, NTRI_TABLE = _build_tables()
MAX_TRIS = TRI_TABLE.shape[1] // 3
