"""Rotation-factorizing point-cloud autoencoder.

Splits a shape code into a unit quaternion q (rigid orientation) and a
canonical embedding x_c.  Two architectures share the same components:

* STD: x_c = E_x(P @ Rtilde) with a fresh random axis rotation Rtilde applied
  before the shape encoder during training (identity at evaluation time), so
  invariance is learned statistically.
* FTL: the encoder output xtilde = Ex(P) is treated as a latent point cloud
  and derotated explicitly, x_c = fold(unfold(xtilde) @ R(q)).

Decoding is shared: P_c = D(x_c), and the input is reproduced as
P_hat = P_c @ R(q).  Batches are expanded into n_rot randomly rotated copies
per shape; consistency of x_c and of relative rotation predictions across the
copies makes the factorization identifiable without orientation labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import tensor as T
from .autodiff.nn import MLP, PointNet, l2_squared
from .autodiff.optim import AdamState, PlateauScheduler, adam_step, plateau_step
from . import geom

log = logging.getLogger(__name__)

QUAT_EPS = 1e-8


# --------------------------------------------------------- tensor-path kernels

def quat_normalize_t(q):
    """Unit-normalize quaternion rows (B, 4).  The squared norm is floored at
    an epsilon so degenerate outputs cannot divide by zero, while well-formed
    rows are normalized exactly."""
    n2 = T.sum_(q * q, axis=1, keepdims=True)
    return q / T.sqrt(T.clip(n2, QUAT_EPS, np.inf))


def quat_to_rotmat_t(q):
    """Batched quaternion (B, 4, order w,x,y,z) to rotation matrices (B, 3, 3)
    acting on row vectors: P @ R rotates the cloud P."""
    B = q.data.shape[0]
    w, x, y, z = (q[:, i].reshape((B, 1)) for i in range(4))
    two = 2.0
    entries = [
        1.0 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1.0 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1.0 - two * (x * x + y * y),
    ]
    R_std = T.concat(entries, axis=1).reshape((B, 3, 3))
    return T.swapaxes(R_std, 1, 2)


def pairwise_sqdist_t(P, Q):
    """(B, N, 3) x (B, M, 3) -> (B, N, M) squared distances, clamped at 0."""
    p2 = T.sum_(P * P, axis=2, keepdims=True)
    q2 = T.swapaxes(T.sum_(Q * Q, axis=2, keepdims=True), 1, 2)
    cross = P @ T.swapaxes(Q, 1, 2)
    return T.relu(p2 + q2 - 2.0 * cross)


def chamfer_t(P, Q):
    """Per-item Chamfer: sum of the two directed means of nearest squared
    distances.  Returns (B,)."""
    d2 = pairwise_sqdist_t(P, Q)
    a = T.mean(-T.max_(-d2, axis=2), axis=1)
    b = T.mean(-T.max_(-d2, axis=1), axis=1)
    return a + b


def hausdorff_t(P, Q):
    """Per-item approximate Hausdorff: mean of the two directed maxima of
    nearest squared distances.  Returns (B,)."""
    d2 = pairwise_sqdist_t(P, Q)
    a = T.max_(-T.max_(-d2, axis=2), axis=1)
    b = T.max_(-T.max_(-d2, axis=1), axis=1)
    return 0.5 * (a + b)


def cloud_metric_t(P, Q, alpha_c, alpha_h):
    return alpha_c * chamfer_t(P, Q) + alpha_h * hausdorff_t(P, Q)


def rotation_geodesic_t(R1, R2):
    """Geodesic distance on rotations, normalized to [0, 1]; accepts batches.
    Uses tr(R1 R2^T) = sum(R1 * R2)."""
    tr = T.sum_(R1 * R2, axis=(1, 2))
    return T.arccos((tr - 1.0) / 2.0) / np.pi


def ftl_apply_t(R, x):
    """Latent rotation: unfold x (B, 3k) into (B, k, 3) rows, right-multiply
    by R (B, 3, 3), fold back."""
    B, n = x.data.shape
    if n % 3:
        raise ValueError("latent length %d is not a multiple of 3" % n)
    U = x.reshape((B, n // 3, 3))
    return (U @ R).reshape((B, n))


# ------------------------------------------------------------- configuration

@dataclass
class AEConfig:
    variant: str = "STD"             # STD | FTL
    supervision: str = "U"           # S | U
    n_x: int = 96                    # dim(x_c); FTL requires a multiple of 3
    n_points: int = 256
    n_rot: int = 2                   # rotated copies per shape in a batch
    er_point: tuple = (32, 64, 128)
    er_head: tuple = (64,)
    ex_point: tuple = (64, 128, 256)
    ex_head: tuple = (128,)
    dec_hidden: tuple = (128, 256, 512)
    alpha_c: float = 200.0
    alpha_h: float = 1.0
    gamma_p: float = None            # filled per variant when left unset
    gamma_pt: float = 100.0          # FTL only: weight on D_P(P_r, Ptilde)
    gamma_c: float = 1.0
    gamma_r: float = 10.0            # unsupervised rotation consistency
    gamma_R: float = 10.0            # supervised rotation regression
    gamma_w: float = 2e-5
    gamma_d: float = 2e-5
    lr: float = 5e-4
    lr_min: float = 1e-4
    lr_decay: float = 0.95
    plateau_patience: int = 5
    batch_shapes: int = 8
    epochs: int = 60
    pretrain_iters: int = 200        # supervised rotation-head warmup steps
    rotation_axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.variant not in ("STD", "FTL"):
            raise ValueError("variant must be STD or FTL, got %r" % self.variant)
        if self.supervision not in ("S", "U"):
            raise ValueError("supervision must be S or U, got %r" % self.supervision)
        if self.variant == "FTL" and self.n_x % 3:
            raise ValueError("FTL latent dim must be a multiple of 3")
        if self.n_rot < 2 and (self.gamma_c > 0 or self.supervision == "U"):
            raise ValueError("n_rot >= 2 is required for consistency losses")
        if self.gamma_p is None:
            self.gamma_p = 20.0 if self.variant == "FTL" else 250.0


class AEModel:
    def __init__(self, cfg: AEConfig, rng):
        self.cfg = cfg
        self.e_r = PointNet(cfg.er_point, cfg.er_head, 4, rng, "ae.er")
        self.e_x = PointNet(cfg.ex_point, cfg.ex_head, cfg.n_x, rng, "ae.ex")
        self.dec = MLP(cfg.n_x, cfg.dec_hidden, 3 * cfg.n_points, rng, "ae.dec",
                       norm="ln")

    def parameters(self):
        return self.e_r.parameters() + self.e_x.parameters() + self.dec.parameters()

    def buffers(self):
        return self.e_r.buffers() + self.e_x.buffers()

    def state_tensors(self):
        return self.parameters() + self.buffers()


# -------------------------------------------------------------- forward paths

def _encode_t(model: AEModel, P, train=False, derot=None):
    """Tensor-path encoder.  ``derot`` is an optional (B, 3, 3) rotation batch
    applied before the STD shape encoder (training-time randomization)."""
    cfg = model.cfg
    q = quat_normalize_t(model.e_r(P, train=train))
    if cfg.variant == "STD":
        P_x = P @ derot if derot is not None else P
        x_c = model.e_x(P_x, train=train)
    else:
        xt = model.e_x(P, train=train)
        x_c = ftl_apply_t(quat_to_rotmat_t(q), xt)
    return q, x_c


def _decode_t(model: AEModel, q, x_c, train=False):
    B = x_c.data.shape[0]
    P_c = model.dec(x_c, train=train).reshape((B, model.cfg.n_points, 3))
    P_hat = P_c @ quat_to_rotmat_t(q)
    return P_c, P_hat


def encode(model: AEModel, P):
    """Evaluation-mode encoding: numpy (B, N, 3) or (N, 3) in, (q, x_c) out."""
    P = np.asarray(P, dtype=np.float64)
    single = P.ndim == 2
    if single:
        P = P[None]
    if P.shape[1] == 0:
        raise ValueError("cannot encode an empty point cloud")
    q, x_c = _encode_t(model, T.Tensor(P), train=False)
    if single:
        return q.data[0], x_c.data[0]
    return q.data, x_c.data


def decode(model: AEModel, q, x_c):
    """Evaluation-mode decoding: returns (P_c, P_hat) as numpy arrays."""
    q = np.asarray(q, dtype=np.float64)
    x_c = np.asarray(x_c, dtype=np.float64)
    single = x_c.ndim == 1
    if single:
        q, x_c = q[None], x_c[None]
    P_c, P_hat = _decode_t(model, T.Tensor(q), T.Tensor(x_c), train=False)
    if single:
        return P_c.data[0], P_hat.data[0]
    return P_c.data, P_hat.data


# ----------------------------------------------------------------- batch prep

def expand_batch(clouds, n_rot, axis, rng):
    """Expand (B, N, 3) stored clouds into n_rot rotated copies each.

    Returns a dict with the copy-major layout (index = shape * n_rot + copy):
    P_rot are encoder inputs, P the stored clouds tiled alongside, R and q the
    applied rotations.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    B, N, _ = clouds.shape
    axis = np.asarray(axis, dtype=np.float64)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(B, n_rot))
    R = np.empty((B, n_rot, 3, 3))
    q = np.empty((B, n_rot, 4))
    for b in range(B):
        for i in range(n_rot):
            R[b, i] = geom.rot_about_axis(axis, angles[b, i])
            q[b, i] = geom.axis_angle_quat(axis, angles[b, i])
    P_rot = np.einsum("bnj,bijk->bink", clouds, R)
    P = np.broadcast_to(clouds[:, None], (B, n_rot, N, 3))
    return {
        "P": np.ascontiguousarray(P).reshape(B * n_rot, N, 3),
        "P_rot": P_rot.reshape(B * n_rot, N, 3),
        "R": R.reshape(B * n_rot, 3, 3),
        "q": q.reshape(B * n_rot, 4),
        "B": B,
        "n_rot": n_rot,
    }


def random_derotations(n, axis, rng):
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([geom.rot_about_axis(axis, a) for a in angles])


# ----------------------------------------------------------------------- loss

def ae_loss(model, batch, cfg: AEConfig, train=True, derot=None, rotation_only=False):
    """Full training objective.  Returns (total: Tensor, components: dict).

    Components L_P (reconstruction), L_c (cross-rotation consistency of x_c),
    L_R (rotation supervision or relative consistency) and L_x (weight decay
    plus latent radius) always sum to the total exactly.
    """
    B, n_rot = batch["B"], batch["n_rot"]
    M_c = n_rot * (n_rot - 1) // 2
    P_in = T.Tensor(batch["P_rot"])
    P_stored = T.Tensor(batch["P"])
    R_true = T.Tensor(batch["R"])

    q_hat = quat_normalize_t(model.e_r(P_in, train=train))
    R_hat = quat_to_rotmat_t(q_hat)

    # rotation loss
    if cfg.supervision == "S":
        L_R = cfg.gamma_R * T.mean(rotation_geodesic_t(T.Tensor(batch["R"]), R_hat))
    else:
        rel = T.swapaxes(R_true, 1, 2) @ R_hat
        relg = rel.reshape((B, n_rot, 3, 3))
        acc = None
        for i in range(n_rot):
            for j in range(i + 1, n_rot):
                d = T.mean(rotation_geodesic_t(relg[:, i], relg[:, j]))
                acc = d if acc is None else acc + d
        L_R = (cfg.gamma_r / M_c) * acc
    if rotation_only:
        comps = {"L_R": float(L_R.data)}
        return L_R, comps

    # supervised training replaces the predicted rotation by the true one in
    # every downstream operation
    R_use = R_true if (cfg.supervision == "S" and train) else R_hat

    if cfg.variant == "STD":
        P_x = P_in @ T.Tensor(derot) if derot is not None else P_in
        x_c = model.e_x(P_x, train=train)
        P_c = model.dec(x_c, train=train).reshape((B * n_rot, cfg.n_points, 3))
        L_P = cfg.gamma_p * T.mean(cloud_metric_t(P_stored, P_c, cfg.alpha_c, cfg.alpha_h))
    else:
        xt = model.e_x(P_in, train=train)
        x_c = ftl_apply_t(R_use, xt)
        P_t = model.dec(xt, train=train).reshape((B * n_rot, cfg.n_points, 3))
        P_c = model.dec(x_c, train=train).reshape((B * n_rot, cfg.n_points, 3))
        L_P = cfg.gamma_pt * T.mean(cloud_metric_t(P_in, P_t, cfg.alpha_c, cfg.alpha_h)) \
            + cfg.gamma_p * T.mean(cloud_metric_t(P_stored, P_c, cfg.alpha_c, cfg.alpha_h))

    # cross-rotation consistency of the canonical embedding
    xg = x_c.reshape((B, n_rot, cfg.n_x))
    acc = None
    for i in range(n_rot):
        for j in range(i + 1, n_rot):
            diff = xg[:, i] - xg[:, j]
            d = T.mean(T.sum_(diff * diff, axis=1))
            acc = d if acc is None else acc + d
    L_c = (cfg.gamma_c / M_c) * acc

    L_x = cfg.gamma_w * l2_squared(model.parameters()) \
        + cfg.gamma_d * T.mean(T.sum_(x_c * x_c, axis=1))

    total = L_P + L_c + L_R + L_x
    comps = {"L_P": float(L_P.data), "L_c": float(L_c.data),
             "L_R": float(L_R.data), "L_x": float(L_x.data)}
    return total, comps


# ------------------------------------------------------------------- training

def _snapshot(tensors):
    return {t.name: t.data.copy() for t in tensors}


def _restore(tensors, snap):
    for t in tensors:
        t.data = snap[t.name].copy()


def mean_canonical_chamfer(model, clouds, batch=64):
    """Evaluation-mode mean Chamfer between stored clouds and their canonical
    reconstructions."""
    total, n = 0.0, 0
    for lo in range(0, len(clouds), batch):
        chunk = clouds[lo:lo + batch]
        q, x_c = encode(model, chunk)
        P_c, _ = decode(model, q, x_c)
        for P, Pc in zip(chunk, P_c):
            total += geom.chamfer(P, Pc)
            n += 1
    return total / max(n, 1)


def train_ae(train_clouds, val_clouds, cfg: AEConfig, rng, log_every=0, model=None,
             train_state=None):
    """Train an autoencoder; returns (model, history).

    ``history`` holds per-epoch loss components, learning rate and validation
    Chamfer, plus the supervised pretraining step count and a divergence flag.
    Deterministic given (cfg, rng state).  Pass ``model`` to continue training
    an existing one.  ``train_state`` resumes at an epoch boundary: a dict of
    "optimizer", "scheduler" and "epoch" (last completed, pretraining
    included); with the generator state restored alongside, the continuation
    is bit-identical to an uninterrupted run.  The updated dict is returned
    in ``history["final"]``.
    """
    train_clouds = np.asarray(train_clouds, dtype=np.float64)
    val_clouds = np.asarray(val_clouds, dtype=np.float64)
    if model is None:
        model = AEModel(cfg, rng)
    params = model.parameters()
    if train_state is None:
        state = AdamState(lr=cfg.lr)
        sched = PlateauScheduler(lr=cfg.lr, min_lr=cfg.lr_min,
                                 decay_factor=cfg.lr_decay, patience=cfg.plateau_patience)
        start_epoch = 0
    else:
        state = train_state["optimizer"]
        sched = train_state["scheduler"]
        start_epoch = int(train_state["epoch"]) + 1
    axis = np.asarray(cfg.rotation_axis, dtype=np.float64)
    S = len(train_clouds)
    B = min(cfg.batch_shapes, S)
    steps_per_epoch = max(1, S // B)
    history = {"pretrain_steps": 0, "epochs": [], "diverged": False}

    def draw_batch():
        idx = rng.choice(S, size=B, replace=False)
        batch = expand_batch(train_clouds[idx], cfg.n_rot, axis, rng)
        derot = None
        if cfg.variant == "STD":
            derot = random_derotations(B * cfg.n_rot, axis, rng)
        return batch, derot

    def one_step(rotation_only):
        batch, derot = draw_batch()
        with T.Tape() as tape:
            total, comps = ae_loss(model, batch, cfg, train=True, derot=derot,
                                   rotation_only=rotation_only)
        for p in params:
            p.grad = None
        tape.backward(total)
        adam_step(state, params)
        return comps

    done = start_epoch - 1
    good = _snapshot(model.state_tensors())
    try:
        if cfg.supervision == "S" and start_epoch == 0:
            for it in range(cfg.pretrain_iters):
                one_step(rotation_only=True)
                history["pretrain_steps"] += 1
        for epoch in range(start_epoch, cfg.epochs):
            sums = {}
            for _ in range(steps_per_epoch):
                comps = one_step(rotation_only=False)
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v
            row = {k: v / steps_per_epoch for k, v in sums.items()}
            row["epoch"] = epoch
            row["val_dc"] = mean_canonical_chamfer(model, val_clouds)
            state.lr = plateau_step(sched, row["val_dc"])
            row["lr"] = state.lr
            history["epochs"].append(row)
            done = epoch
            good = _snapshot(model.state_tensors())
            if log_every and epoch % log_every == 0:
                log.info("epoch %d: val_dc=%.5f lr=%.2e %s", epoch, row["val_dc"],
                         row["lr"], {k: round(v, 5) for k, v in row.items()
                                     if k.startswith("L_")})
    except T.NonFiniteError as e:
        log.warning("training diverged (%s); restoring last good state", e)
        _restore(model.state_tensors(), good)
        history["diverged"] = True
    history["final"] = {"optimizer": state, "scheduler": sched, "epoch": done}
    return model, history
