"""Procedural articulated capsule bodies with an analytic SDF oracle.

Stands in for mesh datasets at desk scale: a 12-part humanoid (bone count
is configurable) whose per-part capsules are derived from a low-dimensional
shape vector. Provides skinning weights, area-weighted surface sampling,
smooth random-walk pose sequences, and a reproducible on-disk dataset
(manifest.json + per-frame binary point files).

All sampling math runs on the pure-numpy kernel path so dataset bytes do
not depend on the BODYSDF_BACKEND flag.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import numpy_backend as _np_impl
from .kinematics import Pose, Skeleton, forward_kinematics

FRAME_MAGIC = b"BSF1"
FRAME_DTYPE = np.dtype([("pos", "<f8", 3), ("normal", "<f8", 3),
                        ("label", "<i8", 2), ("weight", "<f8", 2)])
MANIFEST_VERSION = 1

SKIN_TAU = 0.05  # softmax temperature; seam bands ~2-3 cm in body units

_PART_NAMES = ["pelvis", "spine", "neck", "head",
               "l_upper_arm", "l_forearm", "r_upper_arm", "r_forearm",
               "l_thigh", "l_shin", "r_thigh", "r_shin"]

_PARENTS = np.array([-1, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10])

_JOINTS = np.array([
    [0.00, 0.00, 0.0],   # pelvis
    [0.00, 0.20, 0.0],   # spine
    [0.00, 0.46, 0.0],   # neck
    [0.00, 0.62, 0.0],   # head
    [0.16, 0.40, 0.0],   # l shoulder
    [0.41, 0.40, 0.0],   # l elbow
    [-0.16, 0.40, 0.0],  # r shoulder
    [-0.41, 0.40, 0.0],  # r elbow
    [0.10, -0.04, 0.0],  # l hip
    [0.10, -0.46, 0.0],  # l knee
    [-0.10, -0.04, 0.0],
    [-0.10, -0.46, 0.0],
])

# leaf bones extend past their joint to a capsule tip
_TIPS = {3: [0.0, 0.70, 0.0], 5: [0.64, 0.40, 0.0], 7: [-0.64, 0.40, 0.0],
         9: [0.10, -0.84, 0.0], 11: [-0.10, -0.84, 0.0]}

# base radii before shape scaling; (torso-aspect, limb-thickness) selectors.
# Proportions keep every capsule partly visible across the whole shape range
# (the neck is the tight one: squeezed between spine cap and head).
_BASE_RADII = np.array([0.135, 0.105, 0.065, 0.080,
                        0.050, 0.042, 0.050, 0.042,
                        0.070, 0.052, 0.070, 0.052])
_TORSO = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], dtype=bool)
_LIMB = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1], dtype=bool)

# per-joint axis-angle std-dev for the synthetic pose distribution (radians)
_POSE_SIGMA = np.array([0.15, 0.10, 0.10, 0.15,
                        0.40, 0.40, 0.40, 0.40,
                        0.35, 0.35, 0.35, 0.35])


@dataclass
class CapsuleBodySpec:
    """Articulated union-of-capsules body in canonical (T-pose) space."""

    skeleton: Skeleton
    cap_a: np.ndarray  # (B, 3) canonical axis start (at the bone's joint)
    cap_b: np.ndarray  # (B, 3) canonical axis end
    radii: np.ndarray  # (B,)
    shape_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cap_a = np.asarray(self.cap_a, dtype=np.float64)
        self.cap_b = np.asarray(self.cap_b, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if np.any(self.radii <= 0):
            raise ValueError("capsule radii must be positive")

    @property
    def num_parts(self):
        return self.skeleton.num_bones

    def to_dict(self):
        return {"skeleton": self.skeleton.to_dict(),
                "cap_a": self.cap_a.tolist(), "cap_b": self.cap_b.tolist(),
                "radii": self.radii.tolist(), "shape_params": self.shape_params}

    @staticmethod
    def from_dict(d):
        return CapsuleBodySpec(Skeleton.from_dict(d["skeleton"]),
                               np.array(d["cap_a"]), np.array(d["cap_b"]),
                               np.array(d["radii"]), dict(d["shape_params"]))


def sample_shape_params(rng):
    return {"global_scale": float(rng.uniform(0.90, 1.06)),
            "limb_thickness": float(rng.uniform(0.80, 1.25)),
            "torso_aspect": float(rng.uniform(0.85, 1.15))}


def default_body(shape_params=None, radius_jitter=None):
    """12-part humanoid; radii/lengths derive from the shape vector."""
    sp = dict(shape_params or {"global_scale": 1.0, "limb_thickness": 1.0,
                               "torso_aspect": 1.0})
    s = sp["global_scale"]
    joints = _JOINTS * s
    cap_a = joints.copy()
    cap_b = np.empty_like(joints)
    for b in range(12):
        children = np.nonzero(_PARENTS == b)[0]
        if b in _TIPS:
            cap_b[b] = np.array(_TIPS[b]) * s
        else:
            cap_b[b] = joints[children[0]]
    radii = _BASE_RADII.copy()
    radii[_TORSO] *= sp["torso_aspect"]
    radii[_LIMB] *= sp["limb_thickness"]
    radii *= s
    if radius_jitter is not None:
        radii = radii * np.asarray(radius_jitter, dtype=np.float64)
        sp["radius_jitter"] = np.asarray(radius_jitter, dtype=np.float64).tolist()
    return CapsuleBodySpec(Skeleton(_PARENTS.copy(), joints), cap_a, cap_b, radii, sp)


def chain_body(num_parts=2, radius=0.2, length=0.35):
    """Vertical capsule chain, handy for small deterministic tests."""
    joints = np.array([[0.0, -0.35 + length * b, 0.0] for b in range(num_parts)])
    parents = np.arange(-1, num_parts - 1)
    cap_a = joints.copy()
    cap_b = joints + np.array([0.0, length, 0.0])
    radii = np.full(num_parts, radius)
    return CapsuleBodySpec(Skeleton(parents, joints), cap_a, cap_b, radii,
                           {"kind": f"chain{num_parts}"})


def pose_sigma(num_bones):
    if num_bones == 12:
        return _POSE_SIGMA.copy()
    return np.full(num_bones, 0.3)


def capsule_sdf(p, a, b, r):
    """Distance from points to one capsule (axis a->b, radius r)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if r <= 0:
        raise ValueError("capsule radius must be positive")
    ba = b - a
    denom = max(float(ba @ ba), 1e-300)
    t = np.clip((p - a) @ ba / denom, 0.0, 1.0)
    d = np.linalg.norm(p - a - t[:, None] * ba, axis=1) - r
    return d if d.shape[0] > 1 else float(d[0])


def posed_capsules(body, pose_or_bt):
    """Capsule endpoints mapped to posed space by the skinning transforms."""
    bt = pose_or_bt
    if isinstance(pose_or_bt, Pose):
        bt = forward_kinematics(body.skeleton, pose_or_bt)
    R = bt.skinning[:, :3, :3]
    t = bt.skinning[:, :3, 3]
    pa = np.einsum("bij,bj->bi", R, body.cap_a) + t
    pb = np.einsum("bij,bj->bi", R, body.cap_b) + t
    return pa, pb, body.radii


def part_distances(body, pose, x, bt=None, fast=False):
    """Signed distance from points to every part -> (N, B)."""
    pa, pb, r = posed_capsules(body, bt if bt is not None else pose)
    impl = None if fast else _np_impl
    return kernels.capsule_part_distances(np.atleast_2d(x), pa, pb, r, impl=impl)


def oracle_sdf(body, pose, x, bt=None, fast=False):
    """Union SDF: exact outside, sign-exact everywhere (hard min over parts)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    d = part_distances(body, pose, np.atleast_2d(x), bt=bt, fast=fast).min(axis=1)
    return float(d[0]) if single else d


def skinning_weights(body, pose, x, tau=SKIN_TAU, bt=None):
    """Softmax part weights over negative capsule distance -> (N, B)."""
    d = part_distances(body, pose, x, bt=bt)
    z = -d / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def top2_labels(weights):
    """Top-2 part labels and their weights renormalized to sum to 1."""
    order = np.argsort(-weights, axis=1, kind="stable")
    labels = order[:, :2]
    w = np.take_along_axis(weights, labels, axis=1)
    w = w / w.sum(axis=1, keepdims=True)
    return labels.astype(np.int64), w


@dataclass
class SurfaceSamples:
    points: np.ndarray   # (N, 3) posed positions
    normals: np.ndarray  # (N, 3) outward unit normals
    labels: np.ndarray   # (N, 2) top-2 part labels
    weights: np.ndarray  # (N, 2) renormalized dual weights

    def __len__(self):
        return int(self.points.shape[0])


def _capsule_areas(body):
    lengths = np.linalg.norm(body.cap_b - body.cap_a, axis=1)
    return 2.0 * np.pi * body.radii * (lengths + 2.0 * body.radii)


def _sample_capsule_surface(rng, a, b, r, n):
    """Area-uniform points + normals on one canonical capsule."""
    ba = b - a
    length = float(np.linalg.norm(ba))
    if length > 0:
        w = ba / length
    else:
        w = np.array([0.0, 0.0, 1.0])
    # orthonormal frame around the axis
    ref = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, ref)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    p_cyl = length / (length + 2.0 * r)
    on_cyl = rng.uniform(size=n) < p_cyl
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(0.0, length, size=n)
    g = rng.standard_normal((n, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    hi_end = rng.uniform(size=n) < 0.5

    radial = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v
    pts_cyl = a + z[:, None] * w + r * radial
    nrm_cyl = radial

    axial = g @ w
    g_hemi = np.where((axial >= 0)[:, None], g, g - 2.0 * axial[:, None] * w[None, :])
    dirs = np.where(hi_end[:, None], g_hemi, -g_hemi)
    centers = np.where(hi_end[:, None], b, a)
    pts_cap = centers + r * dirs
    nrm_cap = dirs

    pts = np.where(on_cyl[:, None], pts_cyl, pts_cap)
    nrm = np.where(on_cyl[:, None], nrm_cyl, nrm_cap)
    return pts, nrm


def sample_surface(body, pose, n, seed=None, rng=None, bt=None, max_tries=60):
    """Posed surface samples of the capsule union with labels and normals.

    Per-part counts follow surface area; samples hidden inside another part
    are rejected and redrawn. Raises if the overall rejection rate tops 95%.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    if bt is None:
        bt = forward_kinematics(body.skeleton, pose)
    areas = _capsule_areas(body)
    if not np.all(areas > 0):
        raise ValueError("degenerate body: zero surface area part")
    counts = rng.multinomial(n, areas / areas.sum())
    R = bt.skinning[:, :3, :3]
    t = bt.skinning[:, :3, 3]
    pa, pb, rr = posed_capsules(body, bt)

    pts_out = []
    nrm_out = []
    part_out = []
    drawn = 0
    kept = 0
    for b in range(body.num_parts):
        need = int(counts[b])
        got_p = []
        got_n = []
        tries = 0
        while need > 0:
            tries += 1
            if tries > max_tries:
                raise RuntimeError("surface sampling rejection rate above 95%")
            m = max(need, 16)
            p_c, n_c = _sample_capsule_surface(rng, body.cap_a[b], body.cap_b[b],
                                               body.radii[b], m)
            p_w = p_c @ R[b].T + t[b]
            n_w = n_c @ R[b].T
            d = kernels.capsule_part_distances(p_w, pa, pb, rr, impl=_np_impl)
            d[:, b] = np.inf  # own part never hides its own surface
            visible = d.min(axis=1) >= 0.0
            drawn += m
            kept += int(visible.sum())
            take = min(need, int(visible.sum()))
            got_p.append(p_w[visible][:take])
            got_n.append(n_w[visible][:take])
            need -= take
        if got_p:
            pts_out.append(np.concatenate(got_p, axis=0))
            nrm_out.append(np.concatenate(got_n, axis=0))
            part_out.append(np.full(int(counts[b]), b, dtype=np.int64))
    pts = np.concatenate(pts_out, axis=0)
    nrm = np.concatenate(nrm_out, axis=0)
    if drawn > 0 and kept / drawn < 0.05:
        raise RuntimeError("surface sampling rejection rate above 95%")
    w = skinning_weights(body, pose, pts, bt=bt)
    labels, dual = top2_labels(w)
    return SurfaceSamples(pts, nrm, labels, dual)


def filter_partial(samples, direction):
    """Keep points whose normal faces the view direction (n . v > 0)."""
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    keep = samples.normals @ v > 0.0
    return SurfaceSamples(samples.points[keep], samples.normals[keep],
                          samples.labels[keep], samples.weights[keep])


# ---------------------------------------------------------------------------
# pose sequences
# ---------------------------------------------------------------------------


def sample_pose(rng, sigma, max_translation=0.0):
    """Draw axis-angle rotations from the truncated per-joint Gaussian."""
    sig = np.repeat(np.asarray(sigma, dtype=np.float64)[:, None], 3, axis=1)
    rot = np.clip(rng.standard_normal(sig.shape) * sig, -2.0 * sig, 2.0 * sig)
    trans = rng.uniform(-max_translation, max_translation, size=3) if max_translation else np.zeros(3)
    return Pose(rot, trans)


def random_walk_poses(rng, num_frames, sigma, rho=0.95, max_translation=0.05):
    """OU random walk whose stationary law is the sampling distribution."""
    sig = np.repeat(np.asarray(sigma, dtype=np.float64)[:, None], 3, axis=1)
    theta = np.clip(rng.standard_normal(sig.shape) * sig, -2 * sig, 2 * sig)
    trans = np.zeros(3)
    noise = np.sqrt(1.0 - rho * rho)
    poses = [Pose(theta.copy(), trans.copy())]
    for _ in range(num_frames - 1):
        eps = np.clip(rng.standard_normal(sig.shape) * sig, -2 * sig, 2 * sig)
        theta = np.clip(rho * theta + noise * eps, -2 * sig, 2 * sig)
        trans = np.clip(rho * trans + noise * rng.uniform(-max_translation,
                                                          max_translation, 3),
                        -max_translation, max_translation)
        poses.append(Pose(theta.copy(), trans.copy()))
    return poses


def walk_step_bound(sigma, rho=0.95):
    """Upper bound on per-channel frame-to-frame pose deltas."""
    smax = float(np.max(sigma))
    return 2.0 * smax * (1.0 - rho) + 2.0 * smax * np.sqrt(1.0 - rho * rho)


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


def write_frame_points(path, samples):
    rec = np.empty(len(samples), dtype=FRAME_DTYPE)
    rec["pos"] = samples.points
    rec["normal"] = samples.normals
    rec["label"] = samples.labels
    rec["weight"] = samples.weights
    header = FRAME_MAGIC + np.array([len(samples), FRAME_DTYPE.itemsize, 0],
                                    dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_frame_points(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:4] != FRAME_MAGIC:
            raise ValueError(f"{path}: not a frame point file")
        count, stride, _ = np.frombuffer(header[4:], dtype="<u4")
        if stride != FRAME_DTYPE.itemsize:
            raise ValueError(f"{path}: unexpected record stride {stride}")
        rec = np.frombuffer(fh.read(int(count) * int(stride)), dtype=FRAME_DTYPE)
    return SurfaceSamples(rec["pos"].astype(np.float64), rec["normal"].astype(np.float64),
                          rec["label"].astype(np.int64), rec["weight"].astype(np.float64))


def _partial_tag(direction):
    name = {"+x": "px", "-x": "nx", "+y": "py", "-y": "ny",
            "+z": "pz", "-z": "nz"}.get(direction)
    if name is None:
        raise ValueError(f"unknown partial-scan direction {direction!r}")
    vec = {"px": [1, 0, 0], "nx": [-1, 0, 0], "py": [0, 1, 0],
           "ny": [0, -1, 0], "pz": [0, 0, 1], "nz": [0, 0, -1]}[name]
    return name, np.array(vec, dtype=np.float64)


def generate_dataset(out_dir, num_subjects=4, frames_per_subject=50, seed=0,
                     points_per_frame=4000, partial_dirs=(), radius_jitter_subjects=()):
    """Write a reproducible dataset; returns the manifest dict.

    Layout: manifest.json, subjects/<id>/skeleton.json,
    sequences/<id>/frame_<k>.bin (+ frame_<k>.partial_<tag>.bin variants).
    """
    if num_subjects < 1 or frames_per_subject < 1:
        raise ValueError("subject and frame counts must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(seed)
    shape_ss, pose_ss, sample_ss = root.spawn(3)
    shape_rngs = [np.random.default_rng(s) for s in shape_ss.spawn(num_subjects)]
    pose_rngs = [np.random.default_rng(s) for s in pose_ss.spawn(num_subjects)]
    sample_rngs = [np.random.default_rng(s) for s in sample_ss.spawn(num_subjects)]

    manifest = {"format_version": MANIFEST_VERSION, "seed": seed,
                "sampling": {"points_per_frame": points_per_frame,
                             "skin_tau": SKIN_TAU,
                             "partial_dirs": list(partial_dirs)},
                "subjects": [], "sequences": []}
    for si in range(num_subjects):
        sid = f"s{si:03d}"
        jitter = None
        if si in radius_jitter_subjects:
            jitter = shape_rngs[si].uniform(0.8, 1.25, size=12)
        body = default_body(sample_shape_params(shape_rngs[si]), radius_jitter=jitter)
        sub_dir = os.path.join(out_dir, "subjects", sid)
        os.makedirs(sub_dir, exist_ok=True)
        with open(os.path.join(sub_dir, "skeleton.json"), "w") as fh:
            json.dump(body.skeleton.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        manifest["subjects"].append({"id": sid, "body": body.to_dict()})

        poses = random_walk_poses(pose_rngs[si], frames_per_subject,
                                  pose_sigma(body.num_parts))
        seq_dir = os.path.join(out_dir, "sequences", sid)
        os.makedirs(seq_dir, exist_ok=True)
        frames = []
        for k, pose in enumerate(poses):
            samples = sample_surface(body, pose, points_per_frame, rng=sample_rngs[si])
            write_frame_points(os.path.join(seq_dir, f"frame_{k:03d}.bin"), samples)
            for d in partial_dirs:
                tag, vec = _partial_tag(d)
                part = filter_partial(samples, vec)
                write_frame_points(os.path.join(seq_dir, f"frame_{k:03d}.partial_{tag}.bin"), part)
            frames.append({"rotations": pose.rotations.tolist(),
                           "root_translation": pose.root_translation.tolist()})
        manifest["sequences"].append({"subject": sid, "frames": frames})

    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_manifest(path_or_dir):
    path = path_or_dir
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError("manifest format version mismatch")
    return manifest


def body_from_subject(subject):
    return CapsuleBodySpec.from_dict(subject["body"])


def pose_from_frame(frame):
    return Pose(np.array(frame["rotations"]), np.array(frame["root_translation"]))
