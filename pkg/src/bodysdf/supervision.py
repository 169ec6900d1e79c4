"""Supervision sampling and the non-rigid geometric losses.

Per batch: surface points with normals and dual part labels, perturbed
near-surface points, and per-part box-random points. Losses are applied to
the blended SDF on the whole batch and to the per-part SDFs (dual-weighted
manifold on top-2 labels, normal/eikonal on own-label samples, one-sided
penalty at foreign surface points); means are used instead of sums so the
weights are batch-size invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bodymodel as bm
from . import diffcore as dc
from . import synthdata as sd

DOMAIN_BOX = 1.2  # all supervision points live in [-DOMAIN_BOX, DOMAIN_BOX]^3


class NanLossError(RuntimeError):
    """A loss term went non-finite; .term names the offender."""

    def __init__(self, term):
        super().__init__(f"loss term {term!r} is not finite")
        self.term = term


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_dual_m: float = 1.0
    lambda_n: float = 1.0
    lambda_e: float = 0.1
    lambda_nm: float = 0.1
    lambda_osnm: float = 0.5
    lambda_zs: float = 1e-4
    alpha: float = 5.0   # non-manifold sharpness
    delta: float = 0.01  # one-sided truncation distance
    beta: float = 10.0   # one-sided softplus scale

    def __post_init__(self):
        if self.alpha <= 0 or self.delta <= 0 or self.beta <= 0:
            raise ValueError("alpha, delta, beta must be positive")
        for k, v in self.__dict__.items():
            if k.startswith("lambda_") and v < 0:
                raise ValueError(f"{k} must be nonnegative")

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return LossWeights(**d)


@dataclass
class SampleBatch:
    surface: np.ndarray       # (M, 3)
    normals: np.ndarray       # (M, 3) unit
    labels: np.ndarray        # (M, 2) top-2 part labels, w0 >= w1
    dual_weights: np.ndarray  # (M, 2) normalized, w0 + w1 = 1
    near: np.ndarray          # (M, 3)
    near_labels: np.ndarray   # (M,) top-1 label inherited from the parent
    box: np.ndarray           # (Q, 3)
    box_labels: np.ndarray    # (Q,) owning part

    @property
    def num_surface(self):
        return int(self.surface.shape[0])

    @property
    def num_box(self):
        return int(self.box.shape[0])

    def all_points(self):
        return np.concatenate([self.surface, self.near, self.box], axis=0)

    def validate(self, num_parts):
        if not np.allclose(np.linalg.norm(self.normals, axis=1), 1.0, atol=1e-6):
            raise ValueError("normals must be unit length")
        w = self.dual_weights
        if np.any(w < 0) or np.any(w > 1) or not np.allclose(w.sum(axis=1), 1.0):
            raise ValueError("dual weights must be normalized to sum to 1")
        if np.any(w[:, 0] < w[:, 1]):
            raise ValueError("dual weights must be sorted (w0 >= w1)")
        for lab in (self.labels.reshape(-1), self.near_labels, self.box_labels):
            if lab.size and (lab.min() < 0 or lab.max() >= num_parts):
                raise ValueError("part labels out of range")
        if np.abs(self.all_points()).max() > DOMAIN_BOX + 1e-12:
            raise ValueError("sample points escape the global domain box")


def part_boxes(body, pose, inflate=0.1):
    """Axis-aligned posed bounds per part, inflated by a fraction."""
    pa, pb, r = sd.posed_capsules(body, pose)
    lo = np.minimum(pa, pb) - r[:, None]
    hi = np.maximum(pa, pb) + r[:, None]
    pad = (hi - lo) * inflate * 0.5
    lo = np.clip(lo - pad, -DOMAIN_BOX, DOMAIN_BOX)
    hi = np.clip(hi + pad, -DOMAIN_BOX, DOMAIN_BOX)
    return lo, hi


def sample_supervision(body, pose, m, q, sigma_near, seed=None, rng=None):
    """Draw a SampleBatch from a posed ground-truth body."""
    if m < 1 or q < 1:
        raise ValueError("m and q must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    surf = sd.sample_surface(body, pose, m, rng=rng)

    eps = rng.normal(0.0, sigma_near, size=m)
    dirs = rng.standard_normal((m, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = np.clip(surf.points + eps[:, None] * dirs, -DOMAIN_BOX, DOMAIN_BOX)

    B = body.num_parts
    lo, hi = part_boxes(body, pose)
    base, extra = divmod(q, B)
    counts = np.full(B, base, dtype=np.int64)
    counts[:extra] += 1
    box_pts = []
    box_lab = []
    for b in range(B):
        if counts[b] == 0:
            continue
        box_pts.append(rng.uniform(lo[b], hi[b], size=(counts[b], 3)))
        box_lab.append(np.full(counts[b], b, dtype=np.int64))
    box = np.concatenate(box_pts, axis=0)
    box_labels = np.concatenate(box_lab)

    return SampleBatch(surface=surf.points, normals=surf.normals,
                       labels=surf.labels, dual_weights=surf.weights,
                       near=near, near_labels=surf.labels[:, 0].copy(),
                       box=box, box_labels=box_labels)


# ---------------------------------------------------------------------------
# loss terms (array forms; closed-form contracts live here)
# ---------------------------------------------------------------------------


def manifold_loss(values):
    return float(np.mean(np.abs(values)))


def normal_loss(gradients, normals):
    """1 - cosine(grad, normal), averaged; stays in [0, 2] for any field."""
    g = np.asarray(gradients, dtype=np.float64)
    n = np.linalg.norm(g, axis=-1)
    dots = np.einsum("ij,ij->i", g, np.asarray(normals, dtype=np.float64))
    return float(np.mean(1.0 - dots / (n + 1e-12)))


def eikonal_loss(gradients):
    return float(np.mean(np.abs(np.linalg.norm(gradients, axis=-1) - 1.0)))


def nonmanifold_loss(values, alpha):
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(np.mean(np.exp(-alpha * np.abs(values))))


def one_sided_loss(part_values, delta, beta):
    z = (-np.asarray(part_values, dtype=np.float64) + delta) / (2.0 * delta)
    zb = beta * z
    sp = np.where(zb > 30.0, z, np.log1p(np.exp(np.minimum(zb, 30.0))) / beta)
    return float(np.mean(sp))


def dual_weighted_manifold_loss(s_top0, s_top1, w0, w1):
    return float(np.mean(w0 * np.abs(s_top0) + w1 * np.abs(s_top1)))


def latent_reg(z):
    z = np.asarray(z, dtype=np.float64)
    return float(z @ z)


# ---------------------------------------------------------------------------
# full training loss on the tape
# ---------------------------------------------------------------------------


def foreign_mask(labels, num_parts):
    """(B, M) 0/1 mask: part b is foreign to point i (not in its top-2)."""
    m = labels.shape[0]
    mask = np.ones((num_parts, m))
    rows = np.arange(m)
    mask[labels[:, 0], rows] = 0.0
    mask[labels[:, 1], rows] = 0.0
    return mask


def total_loss_t(tape, model, batch, z_s, transforms, alpha, weights,
                 t0, trainable=True, dual_weighting=True):
    """Weighted total loss + per-term breakdown (unweighted floats).

    Terms with zero weight are skipped (not computed, reported as 0).
    Raises NanLossError naming the first non-finite term.
    """
    w = weights
    cfg = model.config
    m = batch.num_surface
    q = batch.num_box
    pts = batch.all_points()
    out = bm.evaluate_t(tape, model, pts, transforms, z_s, alpha=alpha,
                        trainable=trainable, t0=t0, want_parts=True)
    blended = out["blended"]
    parts = out["parts"]

    terms = {}
    weighted = []

    def add(name, lam, tensor):
        val = float(np.asarray(tensor.data).reshape(()))
        if not np.isfinite(val):
            raise NanLossError(name)
        terms[name] = val
        weighted.append(tensor * lam)

    if w.lambda_m > 0:
        add("manifold", w.lambda_m, blended.val[:m].abs().mean())
    if w.lambda_n > 0:
        # blended normal term on surface points (cosine form; bounded)
        g_surf = blended.tan[:, :m]
        dot = (g_surf * tape.constant(batch.normals.T)).sum(axis=0)
        add("normal", w.lambda_n,
            (1.0 - dot / (g_surf.l2norm(axis=0) + 1e-12)).mean())
        # part-level normal on own-label (top-1) samples
        g_own = dc.pick(parts.tan, batch.labels[:, 0], np.arange(m))  # (3, M)
        dot_p = (g_own * tape.constant(batch.normals.T)).sum(axis=0)
        add("normal_part", w.lambda_n,
            (1.0 - dot_p / (g_own.l2norm(axis=0) + 1e-12)).mean())
    if w.lambda_e > 0:
        g_off = blended.tan[:, m:]  # near + box
        add("eikonal", w.lambda_e, (g_off.l2norm(axis=0) - 1.0).abs().mean())
        own = np.concatenate([batch.near_labels, batch.box_labels])
        g_own = dc.pick(parts.tan, own, np.arange(m, m + m + q))
        add("eikonal_part", w.lambda_e, (g_own.l2norm(axis=0) - 1.0).abs().mean())
    if w.lambda_nm > 0:
        add("nonmanifold", w.lambda_nm,
            ((blended.val[2 * m:].abs() * (-w.alpha)).exp()).mean())
    if w.lambda_dual_m > 0:
        rows = np.arange(m)
        s0 = dc.pick(parts.val, batch.labels[:, 0], rows)
        s1 = dc.pick(parts.val, batch.labels[:, 1], rows)
        if dual_weighting:
            w0 = tape.constant(batch.dual_weights[:, 0])
            w1 = tape.constant(batch.dual_weights[:, 1])
            add("dual_manifold", w.lambda_dual_m,
                (s0.abs() * w0 + s1.abs() * w1).mean())
        else:
            add("dual_manifold", w.lambda_dual_m, s0.abs().mean())
    if w.lambda_osnm > 0:
        mask = foreign_mask(batch.labels, cfg.num_parts)
        s_surf = parts.val[:, :m]
        sp = ((-s_surf + w.delta) * (1.0 / (2.0 * w.delta))).softplus(w.beta)
        add("one_sided", w.lambda_osnm,
            (sp * tape.constant(mask)).sum() * (1.0 / max(mask.sum(), 1.0)))
    if w.lambda_zs > 0:
        z_t = z_s if isinstance(z_s, dc.Tensor) else tape.lift(z_s)
        add("latent_reg", w.lambda_zs, (z_t * z_t).sum())

    if not weighted:
        total = tape.constant(0.0)
    else:
        total = weighted[0]
        for t in weighted[1:]:
            total = total + t
    total_val = float(np.asarray(total.data).reshape(()))
    if not np.isfinite(total_val):
        raise NanLossError("total")
    terms["total"] = total_val
    return total, terms
