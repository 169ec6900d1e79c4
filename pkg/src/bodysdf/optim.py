"""Training (auto-decoder), latent model fitting, pose tracking, ablation
baselines, and shape interpolation.

One "epoch" is one Adam step on a minibatch of batch_frames frames of a
single subject (subjects rotate round-robin); the learning-rate halving
schedule and the progressive encoding window are keyed to the epoch
counter. All loops are bit-reproducible from (seed, config, checkpoint).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import bodymodel as bm
from . import checkpoint as ck
from . import diffcore as dc
from . import kinematics as kin
from . import meshmetrics as mm
from . import supervision as sv
from . import synthdata as sd
from .diffcore import Tape
from .encoding import alpha_schedule
from .kinematics import Pose, forward_kinematics

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(param):
        return AdamState(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param, grad, state, lr):
    """Bias-corrected Adam update; returns the new parameter value."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("NaN/Inf gradient in adam_step")
    if grad.shape != param.shape:
        raise ValueError("gradient shape does not match parameter")
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    mhat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    vhat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    return param - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def adam_step_all(params, grads, states, lr):
    """In-place Adam update over a parameter dict."""
    for name, g in grads.items():
        params[name] = adam_step(params[name], g, states[name], lr)


def lr_schedule(epoch, initial=1e-4, halving_period=500):
    """lr = initial * 0.5 ** floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial * 0.5 ** (epoch // halving_period)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_frames: int = 1
    lr: float = 1e-4
    lr_halving_period: int = 500
    lr_codes: float = 1e-3
    m_surface: int = 512
    q_box: int = 128
    sigma_near: float = 0.03
    seed: int = 0
    checkpoint_interval: int = 500
    log_interval: int = 100
    weights: sv.LossWeights = field(default_factory=sv.LossWeights)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_frames < 1:
            raise ValueError("epochs and batch_frames must be >= 1")
        if self.lr <= 0 or self.lr_codes <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self):
        d = dict(self.__dict__)
        d["weights"] = self.weights.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["weights"] = sv.LossWeights.from_dict(d["weights"])
        return TrainConfig(**d)


VALID_ABLATIONS = ("no-dual-weighting", "no-one-sided", "no-vjoints")


def apose_rotations(num_bones):
    """Casual A-pose: arms ~45 degrees down from the T-pose."""
    rot = np.zeros((num_bones, 3))
    if num_bones == 12:
        rot[4] = [0.0, 0.0, -np.pi / 4]
        rot[6] = [0.0, 0.0, np.pi / 4]
    return rot


@dataclass
class TrainState:
    model: bm.BodyModel
    z_s: dict  # subject id -> (z_shape_dim,)
    adam: dict  # param name -> AdamState
    rng: np.random.Generator
    epoch: int
    pose_vae: object
    joint_vae: object
    config: TrainConfig
    ablate: tuple = ()
    apose_latent: np.ndarray | None = None
    log_lines: list = field(default_factory=list)


def _init_state(manifest, model_cfg, cfg, priors, ablate):
    for a in ablate:
        if a not in VALID_ABLATIONS:
            raise ValueError(f"unknown ablation {a!r}")
    subjects = [s["id"] for s in manifest["subjects"]]
    root = np.random.SeedSequence(cfg.seed)
    init_ss, code_ss, loop_ss, prior_ss = root.spawn(4)
    model = bm.BodyModel(model_cfg, bm.init_params(model_cfg,
                                                   seed=init_ss.entropy % (2 ** 32)))
    code_rng = np.random.default_rng(code_ss)
    z_s = {sid: code_rng.normal(0.0, 0.01, model_cfg.z_shape_dim)
           for sid in subjects}
    adam = {k: AdamState.like(v) for k, v in model.params.items()}
    for sid in subjects:
        adam[f"z_s.{sid}"] = AdamState.like(z_s[sid])
    if priors is None:
        from . import priors as pr

        priors = pr.train_default_priors(model_cfg.num_parts,
                                         prior_ss.entropy % (2 ** 32))
    pose_vae, joint_vae = priors
    from . import priors as pr

    apose = pr.encode_pose(pose_vae,
                           apose_rotations(model_cfg.num_parts).reshape(-1))[0][0]
    return TrainState(model=model, z_s=z_s, adam=adam,
                      rng=np.random.default_rng(loop_ss), epoch=0,
                      pose_vae=pose_vae, joint_vae=joint_vae, config=cfg,
                      ablate=tuple(ablate), apose_latent=apose)


def _train_weights(state):
    w = state.config.weights
    if "no-one-sided" in state.ablate:
        w = sv.LossWeights.from_dict({**w.to_dict(), "lambda_osnm": 0.0})
    return w


def train_epoch(state, manifest, bodies, poses):
    """One optimization step; appends per-term log lines."""
    cfg = state.config
    model_cfg = state.model.config
    subjects = [s["id"] for s in manifest["subjects"]]
    sid = subjects[state.epoch % len(subjects)]
    si = subjects.index(sid)
    body = bodies[si]
    alpha = alpha_schedule(state.epoch, cfg.epochs, model_cfg.encoding)
    lr = lr_schedule(state.epoch, cfg.lr, cfg.lr_halving_period)
    lr_codes = lr_schedule(state.epoch, cfg.lr_codes, cfg.lr_halving_period)
    weights = _train_weights(state)
    dual = "no-dual-weighting" not in state.ablate

    acc = None
    terms_out = {}
    for _ in range(cfg.batch_frames):
        fi = int(state.rng.integers(len(poses[si])))
        pose = poses[si][fi]
        bt = forward_kinematics(body.skeleton, pose)
        batch = sv.sample_supervision(body, pose, cfg.m_surface, cfg.q_box,
                                      cfg.sigma_near, rng=state.rng)
        tape = Tape(check_finite=False)
        z_s_t = tape.param(state.z_s[sid], "z_s")
        total, terms = sv.total_loss_t(
            tape, state.model, batch, z_s_t,
            (bt.skinning[:, :3, :3], bt.skinning[:, :3, 3]), alpha, weights,
            t0=body.skeleton.canonical_joints[0], trainable=True,
            dual_weighting=dual)
        grads = tape.backward(total)
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] = acc[k] + grads[k]
        for k, v in terms.items():
            terms_out[k] = terms_out.get(k, 0.0) + v / cfg.batch_frames

    scale = 1.0 / cfg.batch_frames
    code_grad = acc.pop("z_s") * scale
    model_grads = {k: g * scale for k, g in acc.items()}
    adam_step_all(state.model.params, model_grads, state.adam, lr)
    state.z_s[sid] = adam_step(state.z_s[sid], code_grad,
                               state.adam[f"z_s.{sid}"], lr_codes)
    for name, v in sorted(terms_out.items()):
        state.log_lines.append(f"step={state.epoch} term={name} value={v:.9g}")
    state.epoch += 1
    return terms_out


def train(data_dir, model_cfg, cfg, out_dir, priors=None, ablate=(),
          resume=None, progress=None):
    """Full training run; writes periodic checkpoints and a term log.

    Returns (state, final_checkpoint_path).
    """
    manifest = sd.load_manifest(data_dir)
    bodies = [sd.body_from_subject(s) for s in manifest["subjects"]]
    poses = [[sd.pose_from_frame(f) for f in seq["frames"]]
             for seq in manifest["sequences"]]
    os.makedirs(out_dir, exist_ok=True)

    if resume is not None:
        state = load_train_state(resume)
        if state.config.epochs != cfg.epochs:
            raise ValueError("resume config mismatch: epochs differ")
    else:
        state = _init_state(manifest, model_cfg, cfg, priors, ablate)

    log_path = os.path.join(out_dir, "train_log.txt")
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log:
        while state.epoch < cfg.epochs:
            terms = train_epoch(state, manifest, bodies, poses)
            for line in state.log_lines:
                log.write(line + "\n")
            state.log_lines.clear()
            if progress and (state.epoch % cfg.log_interval == 0
                             or state.epoch == cfg.epochs):
                progress(state.epoch, terms)
            if state.epoch % cfg.checkpoint_interval == 0 \
                    and state.epoch < cfg.epochs:
                save_train_state(state, os.path.join(out_dir, "last.ckpt"),
                                 manifest)
    final = os.path.join(out_dir, "model.ckpt")
    save_train_state(state, final, manifest)
    save_train_state(state, os.path.join(out_dir, "last.ckpt"), manifest)
    return state, final


def save_train_state(state, path, manifest):
    from . import priors as pr

    meta = {
        "model_config": state.model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "epoch": state.epoch,
        "subjects": sorted(state.z_s),
        "ablate": list(state.ablate),
        "rng": ck.rng_state_to_json(state.rng),
        "apose_theta": apose_rotations(state.model.config.num_parts).tolist(),
        "dataset_seed": manifest.get("seed"),
    }
    blobs = {}
    for k, v in state.model.params.items():
        blobs[f"model.{k}"] = v
    for sid, z in state.z_s.items():
        blobs[f"z_s.{sid}"] = z
    for name, st in state.adam.items():
        blobs[f"adam.{name}.m"] = st.m
        blobs[f"adam.{name}.v"] = st.v
        blobs[f"adam.{name}.t"] = np.array([float(st.t)])
    pmeta, pblobs = pr.vae_to_blobs(state.pose_vae, "pvae")
    jmeta, jblobs = pr.vae_to_blobs(state.joint_vae, "jvae")
    meta["pvae"] = pmeta
    meta["jvae"] = jmeta
    blobs.update(pblobs)
    blobs.update(jblobs)
    if state.apose_latent is not None:
        blobs["apose_latent"] = state.apose_latent
    ck.save_checkpoint(path, meta, blobs)


def load_train_state(path):
    from . import priors as pr

    meta, blobs = ck.load_checkpoint(path)
    model_cfg = bm.ModelConfig.from_dict(meta["model_config"])
    cfg = TrainConfig.from_dict(meta["train_config"])
    params = {k[len("model."):]: v for k, v in blobs.items()
              if k.startswith("model.")}
    model = bm.BodyModel(model_cfg, params)
    z_s = {sid: blobs[f"z_s.{sid}"] for sid in meta["subjects"]}
    adam = {}
    for k in list(params) + [f"z_s.{sid}" for sid in meta["subjects"]]:
        adam[k] = AdamState(blobs[f"adam.{k}.m"], blobs[f"adam.{k}.v"],
                            int(blobs[f"adam.{k}.t"][0]))
    pose_vae = pr.vae_from_blobs(meta["pvae"], blobs, "pvae")
    joint_vae = pr.vae_from_blobs(meta["jvae"], blobs, "jvae")
    return TrainState(model=model, z_s=z_s, adam=adam,
                      rng=ck.rng_state_from_json(meta["rng"]),
                      epoch=meta["epoch"], pose_vae=pose_vae,
                      joint_vae=joint_vae, config=cfg,
                      ablate=tuple(meta["ablate"]),
                      apose_latent=blobs.get("apose_latent"))


# ---------------------------------------------------------------------------
# inference-time optimization (network weights frozen)
# ---------------------------------------------------------------------------


def _manifold_at_points(tape, model, pts, transforms, z_s_t, t0):
    out = bm.evaluate_t(tape, model, pts, transforms, z_s_t,
                        trainable=False, t0=t0, spatial=False)
    return out["blended"].abs().mean()


def _const_rot_list(tape, rotations):
    R = kin.rodrigues_batch(rotations)
    return [tape.constant(R[b]) for b in range(R.shape[0])]


@dataclass
class FitResult:
    codes: dict
    loss: float
    trace: list
    diverged: bool = False


def fit_shape(model, joint_vae, observations, steps, seed, lr=1e-2,
              lambda_zs=1e-4, direct_joints=False, parents=None):
    """Recover (z_s, z_j) from observed surface points with known poses.

    observations: list of (points (N,3), Pose). With direct_joints=True the
    raw B x 3 joint array is optimized instead of the joint latent.
    """
    from . import priors as pr

    if not observations or any(p[0].shape[0] == 0 for p in observations):
        raise ValueError("fit_shape needs non-empty observations")
    cfg = model.config
    B = cfg.num_parts
    if parents is None:
        parents = sd.default_body().skeleton.parent if B == 12 else \
            np.arange(-1, B - 1)
    rng = np.random.default_rng(seed)
    opt = {"z_s": rng.normal(0.0, 0.01, cfg.z_shape_dim)}
    if direct_joints:
        opt["joints"] = pr.decode_joints(joint_vae, np.zeros(
            joint_vae.config.latent_dim))
    else:
        opt["z_j"] = np.zeros(joint_vae.config.latent_dim)
    states = {k: AdamState.like(v) for k, v in opt.items()}
    best = (np.inf, {k: v.copy() for k, v in opt.items()})
    trace = []

    def build_loss(values, want_grads):
        tape = Tape(check_finite=False)
        z_s_t = tape.param(values["z_s"], "z_s")
        if direct_joints:
            joints_t = tape.param(values["joints"], "joints")
        else:
            z_j_t = tape.param(values["z_j"], "z_j")
            joints_t = pr.decode_t(tape, joint_vae, z_j_t).reshape((B, 3))
        loss = None
        for pts, pose in observations:
            rot_list = _const_rot_list(tape, pose.rotations)
            g_r, b_t, _ = kin.fk_t(tape, parents, joints_t, rot_list,
                                   pose.root_translation)
            term = _manifold_at_points(tape, model, pts, (g_r, b_t), z_s_t,
                                       t0=joints_t[0])
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(observations))
        if lambda_zs > 0:
            loss = loss + (z_s_t * z_s_t).sum() * lambda_zs
        val = float(loss.data)
        grads = tape.backward(loss) if want_grads else None
        return val, grads

    for step in range(steps):
        val, grads = build_loss(opt, True)
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in opt.items()})
        trace.append(val)
        adam_step_all(opt, grads, states, lr)
    final_val, _ = build_loss(opt, False)
    if final_val < best[0]:
        best = (final_val, {k: v.copy() for k, v in opt.items()})
    if steps == 0:
        best = (np.inf, opt)
    return FitResult(codes=best[1], loss=best[0] if steps else float("nan"),
                     trace=trace)


def fit_joint(model, pose_vae, joint_vae, points, steps, seed, lr=1e-2,
              lambda_zs=1e-4, apose_latent=None, parents=None,
              divergence_patience=50):
    """Jointly recover (z_s, z_j, z_p, root translation) from one point cloud."""
    from . import priors as pr

    if points.shape[0] == 0:
        raise ValueError("fit_joint needs a non-empty observation")
    cfg = model.config
    B = cfg.num_parts
    if parents is None:
        parents = sd.default_body().skeleton.parent if B == 12 else \
            np.arange(-1, B - 1)
    rng = np.random.default_rng(seed)
    opt = {
        "z_s": rng.normal(0.0, 0.01, cfg.z_shape_dim),
        "z_j": np.zeros(joint_vae.config.latent_dim),
        "z_p": (np.zeros(pose_vae.config.latent_dim) if apose_latent is None
                else np.array(apose_latent, dtype=np.float64)),
        "root_t": np.zeros(3),
    }
    states = {k: AdamState.like(v) for k, v in opt.items()}
    best = (np.inf, {k: v.copy() for k, v in opt.items()}, 0)
    trace = []
    diverged = False

    def build_loss(values, want_grads):
        tape = Tape(check_finite=False)
        z_s_t = tape.param(values["z_s"], "z_s")
        z_j_t = tape.param(values["z_j"], "z_j")
        z_p_t = tape.param(values["z_p"], "z_p")
        rt_t = tape.param(values["root_t"], "root_t")
        joints_t = pr.decode_t(tape, joint_vae, z_j_t).reshape((B, 3))
        theta_t = pr.decode_t(tape, pose_vae, z_p_t).reshape((B, 3))
        rot = kin.rodrigues_t(tape, theta_t)
        g_r, b_t, _ = kin.fk_t(tape, parents, joints_t,
                               [rot[b] for b in range(B)], rt_t)
        loss = _manifold_at_points(tape, model, points, (g_r, b_t), z_s_t,
                                   t0=joints_t[0])
        if lambda_zs > 0:
            loss = loss + (z_s_t * z_s_t).sum() * lambda_zs
        val = float(loss.data)
        grads = tape.backward(loss) if want_grads else None
        return val, grads

    for step in range(steps):
        val, grads = build_loss(opt, True)
        trace.append(val)
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in opt.items()}, step)
        elif step - best[2] >= divergence_patience:
            diverged = True
            break
        adam_step_all(opt, grads, states, lr)
    else:
        if steps > 0:
            final_val, _ = build_loss(opt, False)
            if final_val < best[0]:
                best = (final_val, {k: v.copy() for k, v in opt.items()}, steps)
    if steps == 0:
        best = (np.inf, opt, 0)
    return FitResult(codes=best[1], loss=best[0] if steps else float("nan"),
                     trace=trace, diverged=diverged)


@dataclass
class TrackRecord:
    frame: int
    pose_latent: np.ndarray | None
    rotation6d: np.ndarray | None
    theta: np.ndarray
    root_translation: np.ndarray
    loss: float
    mpjpe: float | None = None

    def to_line(self):
        parts = [f"frame={self.frame}", f"loss={self.loss:.9g}"]
        if self.mpjpe is not None:
            parts.append(f"mpjpe={self.mpjpe:.9g}")
        parts.append("theta=" + ",".join(f"{v:.9g}" for v in self.theta.reshape(-1)))
        parts.append("root_t=" + ",".join(f"{v:.9g}"
                                          for v in self.root_translation))
        if self.pose_latent is not None:
            parts.append("z_p=" + ",".join(f"{v:.9g}" for v in self.pose_latent))
        return " ".join(parts)


def _posed_joints(parents, joints, theta, root_t):
    sk = kin.Skeleton(parents, joints)
    bt = forward_kinematics(sk, Pose(theta, root_t))
    return bt.posed_joints


def track(model, pose_vae, frames_points, z_s, joints, steps_per_frame, seed,
          lr=1e-2, parents=None, gt_poses=None, first_frame_steps=None):
    """Latent pose tracking with per-frame warm starts.

    frames_points: list of (N_f, 3) observations. Returns TrackRecords; each
    frame reports its best-so-far solution, so a repeated static frame can
    never get worse.
    """
    from . import priors as pr

    cfg = model.config
    B = cfg.num_parts
    if parents is None:
        parents = sd.default_body().skeleton.parent if B == 12 else \
            np.arange(-1, B - 1)
    joints = np.asarray(joints, dtype=np.float64)
    t0 = joints[0]
    z_p = np.zeros(pose_vae.config.latent_dim)
    root_t = np.zeros(3)
    records = []
    for f, pts in enumerate(frames_points):
        if pts.shape[0] == 0:
            raise ValueError(f"frame {f} has no points")
        steps = first_frame_steps if (f == 0 and first_frame_steps) else steps_per_frame
        opt = {"z_p": z_p.copy(), "root_t": root_t.copy()}
        states = {k: AdamState.like(v) for k, v in opt.items()}
        best = (np.inf, {k: v.copy() for k, v in opt.items()})

        def build_loss(values, want_grads):
            tape = Tape(check_finite=False)
            z_p_t = tape.param(values["z_p"], "z_p")
            rt_t = tape.param(values["root_t"], "root_t")
            theta_t = pr.decode_t(tape, pose_vae, z_p_t).reshape((B, 3))
            rot = kin.rodrigues_t(tape, theta_t)
            g_r, b_t, _ = kin.fk_t(tape, parents, joints,
                                   [rot[b] for b in range(B)], rt_t)
            loss = _manifold_at_points(tape, model, pts, (g_r, b_t),
                                       tape.constant(z_s), t0=t0)
            val = float(loss.data)
            grads = tape.backward(loss) if want_grads else None
            return val, grads

        for _ in range(steps):
            val, grads = build_loss(opt, True)
            if val < best[0]:
                best = (val, {k: v.copy() for k, v in opt.items()})
            adam_step_all(opt, grads, states, lr)
        val, _ = build_loss(opt, False)
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in opt.items()})
        z_p = best[1]["z_p"]
        root_t = best[1]["root_t"]
        theta = pr.decode_pose(pose_vae, z_p)
        rec = TrackRecord(frame=f, pose_latent=z_p.copy(), rotation6d=None,
                          theta=theta, root_translation=root_t.copy(),
                          loss=best[0])
        if gt_poses is not None:
            pj = _posed_joints(parents, joints, theta, root_t)
            gj = _posed_joints(parents, joints, gt_poses[f].rotations,
                               gt_poses[f].root_translation)
            rec.mpjpe = mm.mpjpe(pj, gj)
        records.append(rec)
    return records


def track_direct(model, pose_vae, frames_points, z_s, joints, steps_per_frame,
                 seed, lr=1e-2, parents=None, gt_poses=None,
                 first_frame_steps=None):
    """Ablation: per-joint continuous 6D rotations optimized directly."""
    from . import priors as pr

    cfg = model.config
    B = cfg.num_parts
    if parents is None:
        parents = sd.default_body().skeleton.parent if B == 12 else \
            np.arange(-1, B - 1)
    joints = np.asarray(joints, dtype=np.float64)
    t0 = joints[0]
    theta0 = pr.decode_pose(pose_vae, np.zeros(pose_vae.config.latent_dim))
    r6 = np.stack([kin.matrix_to_rotation6d(kin.rodrigues(theta0[b]))
                   for b in range(B)])
    root_t = np.zeros(3)
    records = []
    for f, pts in enumerate(frames_points):
        if pts.shape[0] == 0:
            raise ValueError(f"frame {f} has no points")
        steps = first_frame_steps if (f == 0 and first_frame_steps) else steps_per_frame
        opt = {"r6": r6.copy(), "root_t": root_t.copy()}
        states = {k: AdamState.like(v) for k, v in opt.items()}
        best = (np.inf, {k: v.copy() for k, v in opt.items()})

        def build_loss(values, want_grads):
            tape = Tape(check_finite=False)
            r6_t = tape.param(values["r6"], "r6")
            rt_t = tape.param(values["root_t"], "root_t")
            rot = kin.rotation6d_to_matrix_t(tape, r6_t)
            g_r, b_t, _ = kin.fk_t(tape, parents, joints,
                                   [rot[b] for b in range(B)], rt_t)
            loss = _manifold_at_points(tape, model, pts, (g_r, b_t),
                                       tape.constant(z_s), t0=t0)
            val = float(loss.data)
            grads = tape.backward(loss) if want_grads else None
            return val, grads

        for _ in range(steps):
            val, grads = build_loss(opt, True)
            if val < best[0]:
                best = (val, {k: v.copy() for k, v in opt.items()})
            adam_step_all(opt, grads, states, lr)
        val, _ = build_loss(opt, False)
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in opt.items()})
        r6 = best[1]["r6"]
        root_t = best[1]["root_t"]
        rmats = np.stack([kin.rotation6d_to_matrix(r6[b]) for b in range(B)])
        rec = TrackRecord(frame=f, pose_latent=None, rotation6d=r6.copy(),
                          theta=np.zeros((B, 3)), root_translation=root_t.copy(),
                          loss=best[0])
        if gt_poses is not None:
            pj = _posed_joints_mats(parents, joints, rmats, root_t)
            gj = _posed_joints(parents, joints, gt_poses[f].rotations,
                               gt_poses[f].root_translation)
            rec.mpjpe = mm.mpjpe(pj, gj)
        records.append(rec)
    return records


def _posed_joints_mats(parents, joints, rmats, root_t):
    B = joints.shape[0]
    G_R = [None] * B
    rel = np.zeros((B, 3))
    G_R[0] = rmats[0]
    rel[0] = joints[0]
    for b in range(1, B):
        p = int(parents[b])
        G_R[b] = G_R[p] @ rmats[b]
        rel[b] = G_R[p] @ (joints[b] - joints[p]) + rel[p]
    return rel + root_t


def fit_shape_direct(model, joint_vae, observations, steps, seed, **kw):
    """Ablation: optimize raw B x 3 joints instead of the joint latent."""
    return fit_shape(model, joint_vae, observations, steps, seed,
                     direct_joints=True, **kw)


def interpolate_shape(codes_a, codes_b, t):
    """Linear interpolation of (z_s, z_j) pairs."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    out = {}
    for k in ("z_s", "z_j"):
        out[k] = (1.0 - t) * np.asarray(codes_a[k]) + t * np.asarray(codes_b[k])
    return out


# ---------------------------------------------------------------------------
# reconstruction helper
# ---------------------------------------------------------------------------


def reconstruct_field(model, z_s, joints, pose, parents=None):
    """Frozen-model field closure at a given pose/skeleton."""
    B = model.config.num_parts
    if parents is None:
        parents = sd.default_body().skeleton.parent if B == 12 else \
            np.arange(-1, B - 1)
    sk = kin.Skeleton(np.asarray(parents), np.asarray(joints))
    bt = forward_kinematics(sk, pose)
    return bm.field_fn(model, bt.skinning[:, :3, :3], bt.skinning[:, :3, 3],
                       np.asarray(z_s), t0=sk.canonical_joints[0])


def reconstruct_mesh(model, z_s, joints, pose, resolution=128,
                     bbox=((-1.2, -1.2, -1.2), (1.2, 1.2, 1.2)), parents=None,
                     sparse=True):
    fn = reconstruct_field(model, z_s, joints, pose, parents=parents)
    return mm.marching_cubes(fn, bbox, resolution, sparse=sparse)
