"""Hot numeric kernels, dispatched by the BODYSDF_BACKEND flag.

Both backends implement the same four entry points with identical per-pair
arithmetic:

  capsule_part_distances(points, cap_a, cap_b, cap_r) -> (N, B)
  nn_dists(p, q) -> (N,)
  points_to_triangles(points, v0, v1, v2) -> (N,)
  mc_cell_triangles(values, dims, cell_ids) -> (T, 3) edge keys
"""

import numpy as np

from ..backend import active_backend
from . import numpy_backend

if active_backend() == "numba":
    from . import numba_backend as _impl
else:
    _impl = numpy_backend


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def capsule_part_distances(points, cap_a, cap_b, cap_r, impl=None):
    impl = impl or _impl
    return impl.capsule_part_distances(_f64(points), _f64(cap_a), _f64(cap_b), _f64(cap_r))


def nn_dists(p, q, impl=None):
    impl = impl or _impl
    if q.shape[0] == 0:
        raise ValueError("reference point set is empty")
    return impl.nn_dists(_f64(p), _f64(q))


def points_to_triangles(points, v0, v1, v2, impl=None):
    impl = impl or _impl
    if v0.shape[0] == 0:
        raise ValueError("mesh has no triangles")
    return impl.points_to_triangles(_f64(points), _f64(v0), _f64(v1), _f64(v2))


def mc_cell_triangles(values, dims, cell_ids, impl=None):
    impl = impl or _impl
    return impl.mc_cell_triangles(_f64(values), np.asarray(dims, dtype=np.int64),
                                  np.asarray(cell_ids, dtype=np.int64))


def nn_dists_bruteforce(p, q):
    """Reference O(N*M) oracle shared by tests and benchmarks."""
    return numpy_backend.nn_dists(_f64(p), _f64(q))


def points_to_triangles_bruteforce(points, v0, v1, v2):
    return numpy_backend.points_to_triangles(_f64(points), _f64(v0), _f64(v1), _f64(v2))
