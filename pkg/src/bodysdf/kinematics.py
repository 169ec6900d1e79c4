"""Kinematic tree, axis-angle rotations, forward kinematics.

Plain-numpy functions serve the data generator and metrics; the *_t
variants record the same math on a diffcore Tape so fitting/tracking can
differentiate through joint positions and rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

_GX = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
_GY = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
_GZ = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass
class Skeleton:
    """Bone hierarchy; root is bone 0 (parent sentinel -1), parents precede children."""

    parent: np.ndarray  # (B,) int
    canonical_joints: np.ndarray  # (B, 3) T-pose joint positions, body in [-1,1]^3

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.canonical_joints = np.asarray(self.canonical_joints, dtype=np.float64)
        b = self.parent.shape[0]
        if self.canonical_joints.shape != (b, 3):
            raise ValueError("canonical_joints must be (B, 3)")
        if b < 1 or self.parent[0] != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        if not np.all(np.isfinite(self.canonical_joints)):
            raise ValueError("canonical joints must be finite")
        for i in range(1, b):
            if not 0 <= self.parent[i] < i:
                raise ValueError("parents must form a tree with parents before children")

    @property
    def num_bones(self):
        return int(self.parent.shape[0])

    def to_dict(self):
        return {"parent": self.parent.tolist(),
                "canonical_joints": self.canonical_joints.tolist()}

    @staticmethod
    def from_dict(d):
        return Skeleton(np.array(d["parent"]), np.array(d["canonical_joints"]))


@dataclass
class Pose:
    """Per-bone axis-angle rotations plus an explicit root translation."""

    rotations: np.ndarray  # (B, 3) axis-angle, radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.rotations.ndim != 2 or self.rotations.shape[1] != 3:
            raise ValueError("rotations must be (B, 3)")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms >= 2.0 * np.pi):
            raise ValueError("axis-angle norms must stay below 2*pi")

    @staticmethod
    def rest(num_bones):
        return Pose(np.zeros((num_bones, 3)))


@dataclass
class BoneTransforms:
    """World transforms G_b, canonical-to-posed maps B_b, and posed joints."""

    world: np.ndarray  # (B, 4, 4)
    skinning: np.ndarray  # (B, 4, 4)
    posed_joints: np.ndarray  # (B, 3)

    @property
    def num_bones(self):
        return int(self.world.shape[0])

    def rotations(self):
        return self.skinning[:, :3, :3]

    def translations(self):
        return self.skinning[:, :3, 3]


def rodrigues(axis_angle):
    """Axis-angle to rotation matrix (exponential map)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(v)
    K = v[0] * _GX + v[1] * _GY + v[2] * _GZ
    if angle < 1e-8:
        return np.eye(3) + K
    c1 = np.sin(angle) / angle
    c2 = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def rodrigues_batch(theta):
    """Vectorized rodrigues for (B, 3) axis-angles -> (B, 3, 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    a2 = np.sum(theta * theta, axis=1)
    angle = np.sqrt(a2)
    K = (theta[:, 0, None, None] * _GX + theta[:, 1, None, None] * _GY
         + theta[:, 2, None, None] * _GZ)
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 1.0, np.sin(angle) / angle)
        c2 = np.where(small, 0.0, (1.0 - np.cos(angle)) / a2)
    return np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * np.matmul(K, K)


def forward_kinematics(skeleton, pose):
    """Compose per-bone world transforms; B_b = G_b * Trans(-j_b).

    At theta = 0 with zero root translation every B_b is the identity.
    """
    B = skeleton.num_bones
    if pose.rotations.shape[0] != B:
        raise ValueError(f"pose has {pose.rotations.shape[0]} bones, skeleton has {B}")
    J = skeleton.canonical_joints
    R = rodrigues_batch(pose.rotations)
    G = np.zeros((B, 4, 4))
    G[:, 3, 3] = 1.0
    G[0, :3, :3] = R[0]
    # root translation is applied as the final add so translating it by v
    # translates every posed joint by exactly v (bitwise)
    rel = np.zeros((B, 3))
    rel[0] = J[0]
    for b in range(1, B):
        p = skeleton.parent[b]
        G[b, :3, :3] = G[p, :3, :3] @ R[b]
        rel[b] = G[p, :3, :3] @ (J[b] - J[p]) + rel[p]
    G[:, :3, 3] = rel + pose.root_translation
    S = G.copy()
    S[:, :3, 3] = (rel - np.einsum("bij,bj->bi", G[:, :3, :3], J)) + pose.root_translation
    return BoneTransforms(world=G, skinning=S, posed_joints=G[:, :3, 3].copy())


def to_canonical(b_mat, x):
    """Apply the closed-form rigid inverse of a 4x4 bone transform to points."""
    b_mat = np.asarray(b_mat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    R = b_mat[:3, :3]
    t = b_mat[:3, 3]
    return (x - t) @ R


def rotation6d_to_matrix(r):
    """Gram-Schmidt two 3-vectors into an orthonormal frame (det +1)."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[:3], r[3:6]
    n1 = np.linalg.norm(a1)
    if n1 <= 1e-8:
        raise ValueError("degenerate 6d rotation: zero first column")
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(a2p)
    if n2 <= 1e-8:
        raise ValueError("degenerate 6d rotation: columns are parallel")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rotation6d(R):
    """First two columns of a rotation matrix, flattened."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


# ---------------------------------------------------------------------------
# tape-recorded variants
# ---------------------------------------------------------------------------


def rodrigues_t(tape, theta):
    """Tape rodrigues for a (B, 3) Tensor -> (B, 3, 3) Tensor.

    Small angles (|theta|^2 < 1e-16) take a Taylor branch in |theta|^2 so
    both the value and its gradient stay finite at theta = 0.
    """
    B = theta.shape[0]
    a2 = (theta * theta).sum(axis=1)  # (B,)
    small = a2.data < 1e-16
    a2_safe = dc.where(small, tape.constant(np.ones(B)), a2)
    angle = dc.sqrt(a2_safe)
    c1_reg = angle.sin() / angle
    c2_reg = (1.0 - angle.cos()) / a2_safe
    c1_tay = 1.0 + a2 * (-1.0 / 6.0) + (a2 * a2) * (1.0 / 120.0)
    c2_tay = 0.5 + a2 * (-1.0 / 24.0) + (a2 * a2) * (1.0 / 720.0)
    c1 = dc.where(small, c1_tay, c1_reg).reshape((B, 1, 1))
    c2 = dc.where(small, c2_tay, c2_reg).reshape((B, 1, 1))
    K = (theta[:, 0].reshape((B, 1, 1)) * tape.constant(_GX)
         + theta[:, 1].reshape((B, 1, 1)) * tape.constant(_GY)
         + theta[:, 2].reshape((B, 1, 1)) * tape.constant(_GZ))
    return tape.constant(np.eye(3)) + c1 * K + c2 * (K @ K)


def rotation6d_to_matrix_t(tape, r6, eps=1e-12):
    """Tape Gram-Schmidt for (B, 6) Tensors -> (B, 3, 3)."""
    B = r6.shape[0]
    a1 = r6[:, 0:3]
    a2 = r6[:, 3:6]
    b1 = a1 / (a1.l2norm(axis=1, keepdims=True) + eps)
    proj = (b1 * a2).sum(axis=1, keepdims=True)
    a2p = a2 - proj * b1
    b2 = a2p / (a2p.l2norm(axis=1, keepdims=True) + eps)
    b3 = _cross_t(b1, b2)
    cols = [t.reshape((B, 3, 1)) for t in (b1, b2, b3)]
    return dc.concat(cols, axis=2)


def _cross_t(u, v):
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    parts = [uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx]
    return dc.stack([p.reshape((-1, 1)) for p in parts], axis=1).reshape((-1, 3))


def fk_t(tape, parents, joints, rot, root_translation):
    """Tape forward kinematics.

    joints: (B, 3) Tensor or array; rot: (B, 3, 3) Tensor; root_translation:
    (3,) Tensor or array. Returns (R_list, t_list) of per-bone skinning
    transform pieces (B_b rotation and translation) plus posed joints list.
    """
    joints = tape.lift(joints)
    root_translation = tape.lift(root_translation)
    B = joints.shape[0]
    G_R = [None] * B
    rel = [None] * B
    G_R[0] = rot[0]
    rel[0] = joints[0]
    for b in range(1, B):
        p = int(parents[b])
        G_R[b] = G_R[p] @ rot[b]
        off = (joints[b] - joints[p]).reshape((3, 1))
        rel[b] = (G_R[p] @ off).reshape((3,)) + rel[p]
    G_t = [rel[b] + root_translation for b in range(B)]
    B_t = [(rel[b] - (G_R[b] @ joints[b].reshape((3, 1))).reshape((3,))) + root_translation
           for b in range(B)]
    return G_R, B_t, G_t
