"""Piecewise implicit body model.

Per part: a weight-normalized 4-layer MLP over positionally-encoded
canonical coordinates, conditioned on a pose-dependent deformation feature
(a learned projection of the root joint expressed in every bone's local
frame) and a shared shape code. Part predictions are blended by a
temperature-controlled SoftMin into one signed distance value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Dual, Tape
from .encoding import EncodingConfig, encode, encode_dual

Z_SHAPE_DIM = 64
Z_FEAT_DIM = 32


@dataclass
class LatentCodes:
    """Shape code, canonical-joint code, and pose latent."""

    z_s: np.ndarray = field(default_factory=lambda: np.zeros(Z_SHAPE_DIM))
    z_j: np.ndarray = field(default_factory=lambda: np.zeros(Z_FEAT_DIM))
    z_p_latent: np.ndarray = field(default_factory=lambda: np.zeros(Z_FEAT_DIM))

    def __post_init__(self):
        self.z_s = np.asarray(self.z_s, dtype=np.float64)
        self.z_j = np.asarray(self.z_j, dtype=np.float64)
        self.z_p_latent = np.asarray(self.z_p_latent, dtype=np.float64)
        for name, v, d in (("z_s", self.z_s, Z_SHAPE_DIM), ("z_j", self.z_j, Z_FEAT_DIM),
                           ("z_p_latent", self.z_p_latent, Z_FEAT_DIM)):
            if v.shape != (d,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite {d}-vector")


@dataclass
class ModelConfig:
    num_parts: int = 12
    width: int = 64
    depth: int = 4
    z_shape_dim: int = Z_SHAPE_DIM
    z_feat_dim: int = Z_FEAT_DIM
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    blend_lambda: float = 50.0
    blend_mode: str = "weighted_average"  # or "logsumexp"
    activation_beta: float = 100.0
    init_radius: float = 0.3
    cond_scale: float = 0.01
    init_mid_noise: float = 0.02
    init_style: str = "paired"  # or "gaussian"

    def __post_init__(self):
        if self.num_parts < 1:
            raise ValueError("num_parts must be >= 1")
        if self.blend_lambda <= 0:
            raise ValueError("blend_lambda must be positive")
        if self.blend_mode not in ("weighted_average", "logsumexp"):
            raise ValueError(f"unknown blend_mode {self.blend_mode!r}")

    @property
    def enc_dim(self):
        return self.encoding.output_dim

    @property
    def cond_dim(self):
        return self.z_feat_dim + self.z_shape_dim

    @property
    def in_dim(self):
        return self.enc_dim + self.cond_dim

    def layer_dims(self):
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [1]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self):
        d = self.__dict__.copy()
        d["encoding"] = {"num_frequencies": self.encoding.num_frequencies,
                         "ramp_fraction": self.encoding.ramp_fraction}
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["encoding"] = EncodingConfig(**d["encoding"])
        return ModelConfig(**d)


def _fib_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def _softplus_np(z, beta):
    zb = beta * z
    return np.where(zb > 30.0, z, np.log1p(np.exp(np.minimum(zb, 30.0))) / beta)


def _single_net_forward(weights, x, beta):
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(weights):
        h = h @ w + b
        if i < last:
            h = _softplus_np(h, beta)
    return h[:, 0]


def geometric_init(config, rng):
    """Effective (non-normalized) layer weights for one part network.

    The zero-code network evaluates to roughly ||x|| - init_radius: the
    first layer's coordinate rows hold antithetic direction pairs, middle
    layers pass through, and the head sits on the coordinate-norm (ones)
    direction with an affine calibration fitted on a deterministic probe.
    Positional-encoding rows get plain Gaussian init (the progressive
    window silences them at step 0); conditioning rows are scaled down.
    """
    width = config.width
    scale = np.sqrt(2.0 / width)
    weights = []
    for li, (din, dout) in enumerate(config.layer_dims()):
        last = li == config.depth - 1
        if last:
            w = np.full((din, dout), 1.0) + rng.normal(0.0, 1e-4, (din, dout))
            b = np.zeros(dout)
        elif li == 0:
            w = rng.normal(0.0, scale, size=(din, dout))
            if config.init_style == "paired":
                d = _fib_sphere(dout // 2)
                w[:3, :] = np.concatenate([d, -d], axis=0).T * scale
                if dout % 2:
                    w[:3, -1] = 0.0
            w[config.enc_dim:, :] *= config.cond_scale
            b = np.zeros(dout)
        else:
            if config.init_style == "paired":
                w = np.eye(din, dout) + rng.normal(
                    0.0, config.init_mid_noise * scale, (din, dout))
            else:
                w = rng.normal(0.0, scale, size=(din, dout))
            b = np.zeros(dout)
        weights.append([w, b])

    # affine calibration raw -> ||x|| on a fixed probe (coordinates only)
    dirs = _fib_sphere(48)
    probe = np.concatenate([np.zeros((16, 3)), dirs * 0.12, dirs * 0.35,
                            dirs * 0.6, dirs * 0.9])
    probe_in = np.zeros((probe.shape[0], config.in_dim))
    probe_in[:, :3] = probe  # alpha=0 window: only raw coords pass
    raw = _single_net_forward(weights, probe_in, config.activation_beta)
    tgt = np.linalg.norm(probe, axis=1)
    a_mat = np.stack([raw, np.ones_like(raw)], axis=1)
    (a, b), *_ = np.linalg.lstsq(a_mat, tgt, rcond=None)
    weights[-1][0] *= a
    weights[-1][1] = np.array([b - config.init_radius])
    return weights


def init_params(config, seed=0):
    """Stacked weight-normalized parameters for all parts + projections."""
    root = np.random.SeedSequence(seed)
    part_ss = root.spawn(config.num_parts)
    proj_rng = np.random.default_rng(root.spawn(1)[0])
    per_part = [geometric_init(config, np.random.default_rng(s)) for s in part_ss]
    params = {}
    for li in range(config.depth):
        v = np.stack([pp[li][0] for pp in per_part])  # (B, din, dout)
        params[f"net.l{li}.V"] = v
        params[f"net.l{li}.g"] = np.linalg.norm(v, axis=1)  # per output unit
        params[f"net.l{li}.b"] = np.stack([pp[li][1] for pp in per_part])
    in3b = 3 * config.num_parts
    params["proj.W"] = proj_rng.normal(0.0, 0.01, (config.num_parts, in3b,
                                                   config.z_feat_dim))
    params["proj.b"] = np.zeros((config.num_parts, config.z_feat_dim))
    return params


def param_order(cfg):
    return ([f"net.l{li}.{k}" for li in range(cfg.depth)
             for k in ("V", "g", "b")] + ["proj.W", "proj.b"])


@dataclass
class BodyModel:
    config: ModelConfig
    params: dict

    @staticmethod
    def create(config, seed=0):
        return BodyModel(config, init_params(config, seed))

    @property
    def num_parts(self):
        return self.config.num_parts

    def param_names(self):
        return param_order(self.config)


# ---------------------------------------------------------------------------
# numpy forward (frozen weights; used for meshing/metrics)
# ---------------------------------------------------------------------------


def effective_weights(config, params):
    """Resolve weight normalization: W = V * g / ||V||_col per layer."""
    out = []
    for li in range(config.depth):
        v = params[f"net.l{li}.V"]
        g = params[f"net.l{li}.g"]
        n = np.linalg.norm(v, axis=1, keepdims=True)
        out.append((v * (g[:, None, :] / n), params[f"net.l{li}.b"]))
    return out


def pose_feature_vector(skinning_r, skinning_t, t0):
    """Root joint expressed in every bone's local frame, flattened (3B,)."""
    rel = np.asarray(t0, dtype=np.float64)[None, :] - skinning_t
    blocks = np.einsum("bij,bi->bj", skinning_r, rel)  # R^T (t0 - t) per bone
    return blocks.reshape(-1)


def deformation_features(config, params, skinning_r, skinning_t, t0):
    """Pose-dependent per-part features: z_p^b = Pi_b(pose vector) -> (B, 32)."""
    vec = pose_feature_vector(skinning_r, skinning_t, t0)
    return np.einsum("bi,bij->bj", np.broadcast_to(vec, (config.num_parts, vec.size)),
                     params["proj.W"]) + params["proj.b"]


def part_sdf_numpy(config, params, x, skinning_r, skinning_t, z_feat, z_s, alpha):
    """Per-part SDF values -> (B, N)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    B = config.num_parts
    weights = effective_weights(config, params)
    xc = np.matmul(x[None, :, :] - skinning_t[:, None, :], skinning_r)  # (B,N,3)
    feats = encode(xc, config.encoding, alpha)  # (B,N,enc)
    codes = np.concatenate([z_feat, np.broadcast_to(z_s, (B, z_s.size))], axis=1)
    h = None
    for li, (w, b) in enumerate(weights):
        if li == 0:
            contrib = np.matmul(feats, w[:, :config.enc_dim, :])
            contrib += np.matmul(codes[:, None, :], w[:, config.enc_dim:, :])
            h = contrib + b[:, None, :]
        else:
            h = np.matmul(h, w) + b[:, None, :]
        if li < config.depth - 1:
            h = _softplus_np(h, config.activation_beta)
    return h.reshape(B, n)


def blend_numpy(part_sdfs, lam, mode="weighted_average"):
    """SoftMin blend over the leading part axis."""
    s = np.asarray(part_sdfs, dtype=np.float64)
    single = s.ndim == 1
    s2 = s[:, None] if single else s
    m = s2.min(axis=0, keepdims=True)
    e = np.exp(-lam * (s2 - m))
    if mode == "weighted_average":
        out = (e * s2).sum(axis=0) / e.sum(axis=0)
    elif mode == "logsumexp":
        out = -(np.log(e.sum(axis=0)) / lam) + m[0]
    else:
        raise ValueError(f"unknown blend mode {mode!r}")
    return float(out[0]) if single else out


def sdf_numpy(config, params, x, skinning_r, skinning_t, z_feat, z_s, alpha,
              return_parts=False):
    parts = part_sdf_numpy(config, params, x, skinning_r, skinning_t, z_feat,
                           z_s, alpha)
    blended = blend_numpy(parts, config.blend_lambda, config.blend_mode)
    return (blended, parts) if return_parts else blended


def field_fn(model, skinning_r, skinning_t, z_s, alpha=None, t0=None,
             pose_vec_t0=None):
    """Batched field closure for meshing/metrics on a frozen model."""
    cfg = model.config
    alpha = cfg.encoding.num_frequencies if alpha is None else alpha
    if t0 is None:
        raise ValueError("field_fn needs the canonical root joint t0")
    z_feat = deformation_features(cfg, model.params, skinning_r, skinning_t, t0)

    def fn(pts):
        return sdf_numpy(cfg, model.params, pts, skinning_r, skinning_t,
                         z_feat, z_s, alpha)

    return fn


# ---------------------------------------------------------------------------
# tape forward (training / fitting / tracking)
# ---------------------------------------------------------------------------


def lift_params(tape, params, trainable=True):
    """Register model parameters as tape params or constants."""
    out = {}
    for name, v in params.items():
        out[name] = tape.param(v, name) if trainable else tape.constant(v)
    return out


def effective_weights_t(config, pt):
    out = []
    for li in range(config.depth):
        v = pt[f"net.l{li}.V"]
        g = pt[f"net.l{li}.g"]
        n = v.l2norm(axis=1, keepdims=True)
        gg = g.reshape((config.num_parts, 1, g.shape[-1]))
        out.append((v * (gg / n), pt[f"net.l{li}.b"]))
    return out


def deformation_features_t(tape, config, pt, rot_list, trans_list, t0):
    """Tape version of the pose feature; inputs are per-bone (3,3)/(3,)."""
    B = config.num_parts
    t0 = tape.lift(t0)
    blocks = []
    for b in range(B):
        rel = (t0 - trans_list[b]).reshape((1, 3))
        blocks.append(rel @ rot_list[b])  # row form of R^T (t0 - t)
    vec = dc.concat(blocks, axis=1)  # (1, 3B)
    return _project_features(config, pt, vec)


def _project_features(config, pt, vec):
    B = config.num_parts
    vec_b = vec.reshape((1, 1, 3 * B)).broadcast_to((B, 1, 3 * B))
    return vec_b @ pt["proj.W"] + pt["proj.b"].reshape((B, 1, config.z_feat_dim))


def forward_dual(tape, config, pt, x_dual, rot_stack, trans_stack, z_feat, z_s,
                 alpha):
    """Per-part SDF Dual (B, N) from a point Dual (N, 3).

    rot_stack/trans_stack: (B,3,3)/(B,1,3) Tensors or arrays; z_feat:
    (B,1,feat) Tensor; z_s: (z_shape_dim,) Tensor.
    """
    B = config.num_parts
    n = x_dual.val.shape[0]
    rot_stack = tape.lift(rot_stack)
    trans_stack = tape.lift(trans_stack)
    weights = effective_weights_t(config, pt)

    xv = (x_dual.val.reshape((1, n, 3)) - trans_stack) @ rot_stack      # (B,N,3)
    xt = x_dual.tan.reshape((3, 1, n, 3)) @ rot_stack                   # (3,B,N,3)
    enc = encode_dual(Dual(xv, xt), config.encoding, alpha)             # (B,N,enc)

    codes = dc.concat([z_feat, z_s.reshape((1, 1, -1)).broadcast_to(
        (B, 1, config.z_shape_dim))], axis=2)                           # (B,1,cond)

    h = None
    for li, (w, b) in enumerate(weights):
        bb = b.reshape((B, 1, b.shape[-1]))
        if li == 0:
            w_enc = w[:, :config.enc_dim, :]
            w_code = w[:, config.enc_dim:, :]
            # code tangents are identically zero; only encode() rows carry them
            val = enc.val @ w_enc + (codes @ w_code + bb)
            tan = enc.tan @ w_enc
            h = Dual(val, tan)
        else:
            h = Dual(h.val @ w + bb, h.tan @ w)
        if li < config.depth - 1:
            h = h.softplus(config.activation_beta)
    return Dual(h.val.reshape((B, n)), h.tan.reshape((3, B, n)))


def blend_dual(part, lam, mode="weighted_average"):
    """SoftMin blend of a part Dual (B, N) -> Dual (N,)."""
    tape = part.val.tape
    shift = tape.constant(part.val.data.min(axis=0, keepdims=True))  # detached
    z = (part - shift) * (-lam)
    e = z.exp()
    denom_v = e.val.sum(axis=0)                     # (N,)
    denom_t = e.tan.sum(axis=1)                     # (3,N)
    if mode == "weighted_average":
        num = e * part
        num_v = num.val.sum(axis=0)
        num_t = num.tan.sum(axis=1)
        inv = 1.0 / denom_v
        val = num_v * inv
        tan = (num_t - denom_t * val) * inv
        return Dual(val, tan)
    if mode == "logsumexp":
        # d/dx [-(1/lam) log sum exp(-lam s)] = sum_b softmax_b * ds_b
        val = dc.log(denom_v) * (-1.0 / lam) + shift.reshape((-1,))
        w_v = e.val / denom_v
        tan = (part.tan * w_v).sum(axis=1)
        return Dual(val, tan)
    raise ValueError(f"unknown blend mode {mode!r}")


def forward_val(tape, config, pt, x, rot_stack, trans_stack, z_feat, z_s,
                alpha):
    """Value-only forward (no spatial channels) -> Tensor (B, N)."""
    B = config.num_parts
    n = x.shape[0]
    rot_stack = tape.lift(rot_stack)
    trans_stack = tape.lift(trans_stack)
    weights = effective_weights_t(config, pt)
    xv = (x.reshape((1, n, 3)) - trans_stack) @ rot_stack
    enc = encode_dual(xv, config.encoding, alpha)  # Tensor path
    codes = dc.concat([z_feat, z_s.reshape((1, 1, -1)).broadcast_to(
        (B, 1, config.z_shape_dim))], axis=2)
    h = None
    for li, (w, b) in enumerate(weights):
        bb = b.reshape((B, 1, b.shape[-1]))
        if li == 0:
            h = enc @ w[:, :config.enc_dim, :] + (codes @ w[:, config.enc_dim:, :] + bb)
        else:
            h = h @ w + bb
        if li < config.depth - 1:
            h = h.softplus(config.activation_beta)
    return h.reshape((B, n))


def blend_t(part_vals, lam, mode="weighted_average"):
    """Tensor-only blend (no spatial channels), part_vals (B, N) or (B,)."""
    tape = part_vals.tape
    data = part_vals.data
    axis = 0
    shift = tape.constant(data.min(axis=axis, keepdims=True))
    e = ((part_vals - shift) * (-lam)).exp()
    denom = e.sum(axis=axis)
    if mode == "weighted_average":
        return (e * part_vals).sum(axis=axis) / denom
    if mode == "logsumexp":
        return dc.log(denom) * (-1.0 / lam) + shift.reshape(denom.shape)
    raise ValueError(f"unknown blend mode {mode!r}")


def evaluate_t(tape, model, x, transforms, z_s, alpha=None, trainable=False,
               t0=None, want_parts=False, spatial=True):
    """Full differentiable evaluation at posed points.

    transforms: (rot_list, trans_list) of per-bone Tensors (from fk_t) or a
    pair of stacked arrays. With spatial=True 'blended'/'parts' are Duals
    carrying x-gradient channels; with spatial=False they are plain Tensors
    (cheaper; enough for manifold-only objectives).
    """
    cfg = model.config
    alpha = cfg.encoding.num_frequencies if alpha is None else alpha
    pt = lift_params(tape, model.params, trainable=trainable)
    rot, trans = transforms
    B = cfg.num_parts
    if isinstance(rot, (list, tuple)):
        rot_stack = dc.concat([r.reshape((1, 3, 3)) for r in rot], axis=0)
        trans_stack = dc.concat([t.reshape((1, 1, 3)) for t in trans], axis=0)
        z_feat = deformation_features_t(tape, cfg, pt, rot, trans,
                                        tape.lift(t0))
    else:
        rot_np = np.asarray(rot, dtype=np.float64)
        trans_np = np.asarray(trans, dtype=np.float64).reshape(B, 3)
        rot_stack = tape.constant(rot_np)
        trans_stack = tape.constant(trans_np.reshape(B, 1, 3))
        vec = pose_feature_vector(rot_np, trans_np, t0).reshape(1, -1)
        # constant pose vector, trainable projection
        z_feat = _project_features(cfg, pt, tape.constant(vec))
    z_s_t = z_s if isinstance(z_s, dc.Tensor) else tape.lift(z_s)
    if spatial:
        xd = x if isinstance(x, Dual) else Dual.seed(tape, x)
        parts = forward_dual(tape, cfg, pt, xd, rot_stack, trans_stack,
                             z_feat, z_s_t, alpha)
        blended = blend_dual(parts, cfg.blend_lambda, cfg.blend_mode)
    else:
        xt = x if isinstance(x, dc.Tensor) else tape.lift(np.atleast_2d(x))
        parts = forward_val(tape, cfg, pt, xt, rot_stack, trans_stack,
                            z_feat, z_s_t, alpha)
        blended = blend_t(parts, cfg.blend_lambda, cfg.blend_mode)
    out = {"blended": blended, "params": pt}
    if want_parts:
        out["parts"] = parts
    return out
