"""Variational latent priors: pose VAE (axis-angle rotations) and canonical
joint VAE, each a 2x128 tanh encoder/decoder on standardized inputs with a
32-d latent. Trained on the synthetic pose / skeleton distributions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import synthdata as sd
from .diffcore import Tape

LOGVAR_CLAMP = 10.0


@dataclass
class VaeConfig:
    latent_dim: int = 32
    hidden: int = 128
    kl_weight: float = 1e-3
    epochs: int = 300
    batch: int = 128
    lr: float = 1e-3
    lr_halving_period: int = 300
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class VaeModel:
    config: VaeConfig
    in_dim: int
    params: dict
    input_mean: np.ndarray
    input_std: np.ndarray
    final_losses: dict = field(default_factory=dict)


def _init_vae_params(cfg, in_dim, rng):
    h, z = cfg.hidden, cfg.latent_dim
    dims = {"enc.l0": (in_dim, h), "enc.l1": (h, h), "enc.mu": (h, z),
            "enc.lv": (h, z), "dec.l0": (z, h), "dec.l1": (h, h),
            "dec.out": (h, in_dim)}
    params = {}
    for name, (din, dout) in dims.items():
        params[f"{name}.W"] = rng.normal(0.0, 1.0 / np.sqrt(din), (din, dout))
        params[f"{name}.b"] = np.zeros(dout)
    return params


def _encode_t(tape, pt, x):
    h = (x @ pt["enc.l0.W"] + pt["enc.l0.b"]).tanh()
    h = (h @ pt["enc.l1.W"] + pt["enc.l1.b"]).tanh()
    mu = h @ pt["enc.mu.W"] + pt["enc.mu.b"]
    lv = (h @ pt["enc.lv.W"] + pt["enc.lv.b"]).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, lv


def _decode_t(tape, pt, z):
    h = (z @ pt["dec.l0.W"] + pt["dec.l0.b"]).tanh()
    h = (h @ pt["dec.l1.W"] + pt["dec.l1.b"]).tanh()
    return h @ pt["dec.out.W"] + pt["dec.out.b"]


def kl_divergence(mu, logvar):
    """Channelwise -0.5 (1 + log s^2 - mu^2 - s^2), summed per sample."""
    return -0.5 * np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar), axis=-1)


def train_vae(samples, config):
    """Fit the VAE by Adam on reconstruction MSE + kl_weight * KL."""
    from .optim import AdamState, adam_step_all

    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 100:
        raise ValueError("need at least 100 training samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("training samples must be finite")
    n, in_dim = x.shape
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-3)
    xs = (x - mean) / std

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    params = _init_vae_params(config, in_dim, rng)
    states = {k: AdamState.like(v) for k, v in params.items()}

    for epoch in range(config.epochs):
        lr = config.lr * 0.5 ** (epoch // config.lr_halving_period)
        order = rng.permutation(n)
        for lo in range(0, n, config.batch):
            idx = order[lo:lo + config.batch]
            xb = xs[idx]
            eps = rng.standard_normal((idx.size, config.latent_dim))
            tape = Tape()
            pt = {k: tape.param(v, k) for k, v in params.items()}
            xt = tape.constant(xb)
            mu, lv = _encode_t(tape, pt, xt)
            z = mu + (lv * 0.5).exp() * tape.constant(eps)
            recon = _decode_t(tape, pt, z)
            err = recon - xt
            mse = (err * err).mean()
            kl = ((mu * mu + lv.exp() - lv - 1.0) * 0.5).sum(axis=1).mean()
            loss = mse + kl * config.kl_weight
            if not np.isfinite(float(loss.data)):
                raise RuntimeError("VAE training diverged (loss is not finite)")
            grads = tape.backward(loss)
            adam_step_all(params, grads, states, lr)

    model = VaeModel(config, in_dim, params, mean, std)
    _whiten_latent(model, x)
    mu, sigma = encode(model, x)
    recon = decode(model, mu)
    model.final_losses = {
        "recon_mse": float(np.mean((recon - x) ** 2)),
        "kl": float(np.mean(kl_divergence(mu, 2.0 * np.log(sigma)))),
    }
    return model


def _whiten_latent(model, x, target_std=0.75):
    """Fold an affine latent reparameterization into the weights so the
    aggregate posterior sits slightly inside N(0, I) (target_std < 1 keeps
    encoded training samples within the prior ball); reconstructions are
    unchanged."""
    mu, _ = encode(model, x)
    center = mu.mean(axis=0)
    scale = np.maximum(mu.std(axis=0) / target_std, 1e-2)
    p = model.params
    # encoder: mu' = (mu - center) / scale, logvar' = logvar - 2 log scale
    p["enc.mu.W"] = p["enc.mu.W"] / scale[None, :]
    p["enc.mu.b"] = (p["enc.mu.b"] - center) / scale
    p["enc.lv.b"] = p["enc.lv.b"] - 2.0 * np.log(scale)
    # decoder: consumes z' where z = z' * scale + center
    p["dec.l0.b"] = p["dec.l0.b"] + center @ p["dec.l0.W"]
    p["dec.l0.W"] = scale[:, None] * p["dec.l0.W"]


def _tanh_forward(params, x, names):
    h = x
    for name in names[:-1]:
        h = np.tanh(h @ params[f"{name}.W"] + params[f"{name}.b"])
    last = names[-1]
    return h @ params[f"{last}.W"] + params[f"{last}.b"]


def encode(vae, x):
    """Posterior (mu, sigma) for raw inputs; sigma strictly positive."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != vae.in_dim:
        raise ValueError(f"expected {vae.in_dim} input dims, got {x.shape[1]}")
    xs = (x - vae.input_mean) / vae.input_std
    h = np.tanh(xs @ vae.params["enc.l0.W"] + vae.params["enc.l0.b"])
    h = np.tanh(h @ vae.params["enc.l1.W"] + vae.params["enc.l1.b"])
    mu = h @ vae.params["enc.mu.W"] + vae.params["enc.mu.b"]
    lv = np.clip(h @ vae.params["enc.lv.W"] + vae.params["enc.lv.b"],
                 -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, np.exp(0.5 * lv)


def decode(vae, z):
    """Deterministic decode back to the raw (unstandardized) space."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out = _tanh_forward(vae.params, z, ["dec.l0", "dec.l1", "dec.out"])
    return out * vae.input_std + vae.input_mean


def decode_t(tape, vae, z):
    """Tape decode of a single latent Tensor (latent_dim,) -> (in_dim,)."""
    pt = {k: tape.constant(v) for k, v in vae.params.items()}
    out = _decode_t(tape, pt, z.reshape((1, vae.config.latent_dim)))
    out = out * tape.constant(vae.input_std) + tape.constant(vae.input_mean)
    return out.reshape((vae.in_dim,))


def decode_pose(vae, z):
    """Pose latent -> (B, 3) axis-angle rotations."""
    return decode(vae, z).reshape(-1, 3)


def encode_pose(vae, theta):
    theta = np.asarray(theta, dtype=np.float64)
    return encode(vae, theta.reshape(1, -1))


def decode_joints(vae, z):
    """Joint latent -> (B, 3) canonical T-pose joints."""
    return decode(vae, z).reshape(-1, 3)


def sample_prior(vae, n, seed):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, vae.config.latent_dim))


def decoder_lipschitz(vae, box=3.0, probes=200, eps=1e-4, seed=0):
    """Empirical directional-derivative bound on ||z||_inf <= box."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-box, box, (probes, vae.config.latent_dim))
    d = rng.standard_normal((probes, vae.config.latent_dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    slope = np.linalg.norm(decode(vae, z + eps * d) - decode(vae, z - eps * d),
                           axis=1) / (2 * eps)
    return float(slope.max())


# ---------------------------------------------------------------------------
# synthetic training distributions
# ---------------------------------------------------------------------------


def pose_training_set(rng, n, sigma):
    """Flattened truncated-Gaussian axis-angle poses (n, 3B)."""
    out = np.empty((n, sigma.size * 3))
    for i in range(n):
        out[i] = sd.sample_pose(rng, sigma).rotations.reshape(-1)
    return out


def joint_training_set(rng, n, jitter=0.008):
    """Flattened canonical joints of shape-sampled bodies (n, 36)."""
    out = np.empty((n, 36))
    for i in range(n):
        body = sd.default_body(sd.sample_shape_params(rng))
        joints = body.skeleton.canonical_joints + rng.normal(0, jitter, (12, 3))
        out[i] = joints.reshape(-1)
    return out


def train_default_priors(num_bones, seed, n_pose=20000, n_joint=4000,
                         epochs=None):
    """Pose + joint VAEs for the synthetic distributions.

    The pose set is large because the truncated-Gaussian pose law fills a
    36-dim box; the joint distribution is a thin 3-parameter family plus
    jitter and needs far fewer draws.
    """
    kw = {} if epochs is None else {"epochs": epochs}
    ss = np.random.SeedSequence(seed).spawn(2)
    sigma = sd.pose_sigma(num_bones)
    pose_rng = np.random.default_rng(ss[0])
    pose_vae = train_vae(pose_training_set(pose_rng, n_pose, sigma),
                         VaeConfig(seed=seed * 2 + 1, **kw))
    joint_rng = np.random.default_rng(ss[1])
    if num_bones == 12:
        joint_samples = joint_training_set(joint_rng, n_joint)
    else:
        # generic chains: jittered copies of the canonical chain layout
        base = sd.chain_body(num_bones).skeleton.canonical_joints.reshape(-1)
        joint_samples = base[None, :] * joint_rng.uniform(
            0.85, 1.15, (n_joint, 1)) + joint_rng.normal(0, 0.01, (n_joint, base.size))
    joint_vae = train_vae(joint_samples, VaeConfig(seed=seed * 2 + 2, **kw))
    return pose_vae, joint_vae


def vae_to_blobs(vae, prefix):
    blobs = {f"{prefix}.{k}": v for k, v in vae.params.items()}
    blobs[f"{prefix}.input_mean"] = vae.input_mean
    blobs[f"{prefix}.input_std"] = vae.input_std
    meta = {"config": vae.config.to_dict(), "in_dim": vae.in_dim,
            "final_losses": vae.final_losses}
    return meta, blobs


def vae_from_blobs(meta, blobs, prefix):
    cfg = VaeConfig(**meta["config"])
    params = {}
    for k, v in blobs.items():
        if k.startswith(prefix + ".") and not k.endswith("input_mean") \
                and not k.endswith("input_std"):
            params[k[len(prefix) + 1:]] = v
    return VaeModel(cfg, meta["in_dim"], params,
                    blobs[f"{prefix}.input_mean"], blobs[f"{prefix}.input_std"],
                    dict(meta.get("final_losses", {})))
