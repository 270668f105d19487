"""Latent VAE over autoencoder codes with grouped, disentangled factors.

The latent space is partitioned into three groups: z_R (rigid orientation,
encoded from the quaternion), z_E (extrinsic/articulated pose), and z_I
(intrinsic shape), the latter two encoded from the canonical code x_c.  A
normalizing flow ties z_I to the Laplace-Beltrami spectrum.  Besides the
usual reconstruction terms, training penalizes statistical dependence
between groups with total-correlation estimates, cross-covariance, and
latent-to-latent Jacobians.

Group marginals are estimated with minibatch mixtures: log q(z_i) is
approximated by logsumexp_j log q(z_i | x_j) - log M over the batch.  This
keeps matched posterior and prior at zero for every term; the optional
``dataset_size`` argument subtracts a further log N for the dataset-weighted
variant (a constant offset per term, so gradients are unaffected either way).

Two training regimes share all machinery.  "FO" reconstructs from z_I
inferred from x_c; "PP" reconstructs from a code sampled around the flow
image of the true spectrum, so the decoder never sees intrinsics derived
from x_c, and the x_c-side intrinsic encoder is pulled toward the flow image
only through the consistency loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ae, flows
from .autodiff import tensor as T
from .autodiff.nn import MLP, l2_squared, mlp_jacobian
from .autodiff.optim import AdamState, PlateauScheduler, adam_step, plateau_step
from .autodiff.tensor import NonFiniteError

GROUPS = ("R", "E", "I")
SIGMA_FLOOR = 1e-4
LOG_2PI = np.log(2.0 * np.pi)


# ------------------------------------------------------------- configuration

@dataclass
class VAEConfig:
    n_R: int = 3
    n_E: int = 6
    n_I: int = 10                    # must equal the spectrum length
    beta1: float = 1.0               # intra-group total correlation
    beta2: float = 10.0              # dimension-wise KL
    beta3: float = 1.0               # mutual information with the input
    beta4: float = 50.0              # inter-group total correlation
    omega_R: float = 400.0           # reconstruction
    omega_q: float = 10.0            # quaternion distance inside the recon
    omega_p: float = 1.0             # flow log-likelihood
    omega_I: float = 300.0           # latent-space spectral consistency
    omega_lam: float = 200.0         # spectrum-space consistency
    omega_Sigma: float = 40.0        # cross-covariance penalty
    omega_J: float = 200.0           # cross-Jacobian penalty
    regime: str = "PP"               # PP | FO
    flow_depth: int = 9
    flow_hidden: int = 64
    dataset_size: int = None         # optional -log N mixture correction
    rot_trunk: tuple = (32,)
    rot_mid: int = 16
    mu_hidden: tuple = (128, 64)
    sigma_hidden: tuple = (64,)
    sigma_tilde_hidden: tuple = None  # defaults to (2 n_I, 2 n_I)
    dq_hidden: tuple = (32,)
    dx_hidden: tuple = (64, 128)
    lr: float = 1e-4
    lr_min: float = 1e-5
    lr_decay: float = 0.95
    plateau_patience: int = 10
    weight_decay: float = 1e-4
    batch: int = 256
    iters: int = 2000
    eval_every: int = 100
    rot_copies: int = 4              # rotation augmentations per training shape
    jacobian_cap: int = 64           # sub-batch used for the Jacobian penalty

    def __post_init__(self):
        if self.regime not in ("PP", "FO"):
            raise ValueError("regime must be PP or FO, got %r" % self.regime)
        if self.n_I < 2:
            raise ValueError("n_I must be at least 2 for the coupling flow")
        if self.sigma_tilde_hidden is None:
            self.sigma_tilde_hidden = (2 * self.n_I, 2 * self.n_I)


def default_vae_config(regime="PP", **overrides) -> VAEConfig:
    """Tuned defaults per regime: FO leans on the spectrum-space consistency
    term instead of the latent-space one."""
    base = dict(regime=regime)
    if regime == "FO":
        base.update(omega_lam=800.0, omega_I=0.0)
    base.update(overrides)
    return VAEConfig(**base)


# -------------------------------------------------------------------- model

@dataclass
class GroupedPosterior:
    """Diagonal Gaussians per latent group, with reparameterized samples."""
    mu: dict
    sigma: dict
    z: dict

    def batch_size(self):
        return next(iter(self.mu.values())).data.shape[0]


class VAEModel:
    def __init__(self, cfg: VAEConfig, rng, n_x):
        self.cfg = cfg
        self.n_x = n_x
        self.rot_trunk = MLP(4, cfg.rot_trunk, cfg.rot_mid, rng, "vae.rt")
        self.mu_R = MLP(cfg.rot_mid, (), cfg.n_R, rng, "vae.muR")
        self.sig_R = MLP(cfg.rot_mid, (), cfg.n_R, rng, "vae.sigR")
        self.mu_E = MLP(n_x, cfg.mu_hidden, cfg.n_E, rng, "vae.muE")
        self.sig_E = MLP(n_x, cfg.sigma_hidden, cfg.n_E, rng, "vae.sigE")
        self.mu_I = MLP(n_x, cfg.mu_hidden, cfg.n_I, rng, "vae.muI")
        self.sig_I = MLP(n_x, cfg.sigma_hidden, cfg.n_I, rng, "vae.sigI")
        self.sig_tilde = MLP(cfg.n_I, cfg.sigma_tilde_hidden, cfg.n_I, rng,
                             "vae.sigT")
        self.dec_q = MLP(cfg.n_R, cfg.dq_hidden, 4, rng, "vae.dq")
        self.dec_x = MLP(cfg.n_E + cfg.n_I, cfg.dx_hidden, n_x, rng, "vae.dx")
        self.flow = flows.FlowModel(cfg.n_I, rng, cfg.flow_depth,
                                    cfg.flow_hidden, "vae.flow")
        self.stats = {}              # frozen training statistics (E[|x_c|^2])

    def parameters(self):
        out = []
        for m in (self.rot_trunk, self.mu_R, self.sig_R, self.mu_E, self.sig_E,
                  self.mu_I, self.sig_I, self.sig_tilde, self.dec_q, self.dec_x):
            out += m.parameters()
        return out + self.flow.parameters()

    def state_tensors(self):
        return self.parameters()

    def extra_state(self):
        """JSON-able persistent state beyond the parameters: frozen training
        statistics, the flow's permutation wiring, and the actnorm flag.
        A model rebuilt from a parameter checkpoint is incomplete until this
        is restored."""
        return {"stats": dict(self.stats),
                "flow_perms": self.flow.permutations(),
                "actnorm_initialized": self.flow.actnorm_initialized()}

    def load_extra_state(self, state):
        self.stats.update(state.get("stats", {}))
        if "flow_perms" in state:
            self.flow.set_permutations(state["flow_perms"])
        if state.get("actnorm_initialized"):
            self.flow.mark_initialized()


def _sigma(raw):
    return T.softplus(raw) + SIGMA_FLOOR


def vae_encode(model: VAEModel, q, x_c, rng=None, eps=None, train=False):
    """Grouped posterior for a batch of AE codes.

    ``eps`` maps group names to noise arrays; if absent and ``rng`` is given,
    standard-normal noise is drawn, otherwise eps = 0 (so z = mu;
    deterministic evaluation path).  Accepts numpy arrays or taped tensors.
    """
    q = q if isinstance(q, T.Tensor) else T.Tensor(np.atleast_2d(np.asarray(q, dtype=np.float64)))
    x_c = x_c if isinstance(x_c, T.Tensor) else T.Tensor(np.atleast_2d(np.asarray(x_c, dtype=np.float64)))
    M = q.data.shape[0]
    cfg = model.cfg
    trunk = model.rot_trunk(q, train=train)
    mu = {"R": model.mu_R(trunk, train=train),
          "E": model.mu_E(x_c, train=train),
          "I": model.mu_I(x_c, train=train)}
    sigma = {"R": _sigma(model.sig_R(trunk, train=train)),
             "E": _sigma(model.sig_E(x_c, train=train)),
             "I": _sigma(model.sig_I(x_c, train=train))}
    dims = {"R": cfg.n_R, "E": cfg.n_E, "I": cfg.n_I}
    z = {}
    for g in GROUPS:
        if eps is not None and g in eps:
            e = np.asarray(eps[g], dtype=np.float64)
        elif rng is not None:
            e = rng.standard_normal((M, dims[g]))
        else:
            e = np.zeros((M, dims[g]))
        z[g] = mu[g] + sigma[g] * T.Tensor(e)
    return GroupedPosterior(mu=mu, sigma=sigma, z=z)


def vae_decode_t(model: VAEModel, z_R, z_E, z_I, train=False):
    q_hat = ae.quat_normalize_t(model.dec_q(z_R, train=train))
    x_hat = model.dec_x(T.concat([z_E, z_I], axis=1), train=train)
    return q_hat, x_hat


def vae_decode(model: VAEModel, z_R, z_E, z_I):
    """Numpy evaluation path: latent groups -> (q_hat, x_c_hat)."""
    zs = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in (z_R, z_E, z_I)]
    single = np.asarray(z_R).ndim == 1
    q_hat, x_hat = vae_decode_t(model, *(T.Tensor(z) for z in zs))
    if single:
        return q_hat.data[0], x_hat.data[0]
    return q_hat.data, x_hat.data


# ----------------------------------------------- minibatch mixture estimators

def _as_batch_tensor(v):
    return v if isinstance(v, T.Tensor) else T.Tensor(np.asarray(v, dtype=np.float64))


def _log_gauss_3d(z, mu, sigma):
    """(M, M, d) tensor of log N(z_i[d]; mu_j[d], sigma_j[d])."""
    M, d = z.data.shape
    zi = z.reshape((M, 1, d))
    mj = mu.reshape((1, M, d))
    sj = sigma.reshape((1, M, d))
    u = (zi - mj) / sj
    return -0.5 * (u * u) - T.log(sj) - 0.5 * LOG_2PI


def _log_gauss_diag(z, mu, sigma):
    """(M,) tensor of log q(z_i | x_i) for the matching component."""
    u = (z - mu) / sigma
    return T.sum_(-0.5 * (u * u) - T.log(sigma) - 0.5 * LOG_2PI, axis=1)


def hfvae_terms(post: GroupedPosterior, dataset_size=None, prior=None):
    """Decomposed objective terms from one batch, as scalar tensors.

    Returns {"intra_tc": {group: t}, "dimwise_kl": t, "mi": t, "inter_tc": t}.
    Marginals are minibatch mixtures normalized by log M (plus log N when
    ``dataset_size`` is supplied); the prior defaults to the standard normal.
    """
    mu = {g: _as_batch_tensor(post.mu[g]) for g in GROUPS}
    sigma = {g: _as_batch_tensor(post.sigma[g]) for g in GROUPS}
    z = {g: _as_batch_tensor(post.z[g]) for g in GROUPS}
    M = mu["R"].data.shape[0]
    if M < 2:
        raise ValueError("mixture estimators need a batch of at least 2")
    norm = np.log(M) + (np.log(dataset_size) if dataset_size else 0.0)

    log_mix_g = {}       # (M,) log q(z_g)
    log_mix_gd = {}      # (M, d_g) log q(z_{g,d})
    log_diag = {}        # (M,) log q(z_g | x)
    pair_sums = None     # (M, M) sum over all groups and dims
    for g in GROUPS:
        L3 = _log_gauss_3d(z[g], mu[g], sigma[g])
        S = T.sum_(L3, axis=2)
        pair_sums = S if pair_sums is None else pair_sums + S
        log_mix_g[g] = T.logsumexp(S, axis=1) - norm
        log_mix_gd[g] = T.logsumexp(L3, axis=1) - norm
        log_diag[g] = _log_gauss_diag(z[g], mu[g], sigma[g])
    log_mix_joint = T.logsumexp(pair_sums, axis=1) - norm

    intra = {g: T.mean(log_mix_g[g] - T.sum_(log_mix_gd[g], axis=1))
             for g in GROUPS}
    dim_kl = None
    for g in GROUPS:
        if prior is None:
            logp = -0.5 * (z[g] * z[g]) - 0.5 * LOG_2PI
        else:
            mu_p, sig_p = prior[g]
            u = (z[g] - T.Tensor(np.asarray(mu_p))) / T.Tensor(np.asarray(sig_p))
            logp = -0.5 * (u * u) - T.Tensor(np.log(np.asarray(sig_p))) - 0.5 * LOG_2PI
        kl_g = T.sum_(T.mean(log_mix_gd[g] - logp, axis=0))
        dim_kl = kl_g if dim_kl is None else dim_kl + kl_g
    diag_total = log_diag["R"] + log_diag["E"] + log_diag["I"]
    mi = T.mean(diag_total - log_mix_joint)
    inter = T.mean(log_mix_joint - (log_mix_g["R"] + log_mix_g["E"] + log_mix_g["I"]))
    return {"intra_tc": intra, "dimwise_kl": dim_kl, "mi": mi, "inter_tc": inter}


def tc_estimate(samples, grouping, bandwidth=0.15, block=512):
    """Standalone inter-group total correlation from raw samples.

    Each sample doubles as a mixture component N(sample, bandwidth^2 I) and
    densities are evaluated leave-one-out: with a narrow fixed kernel the
    self term otherwise swamps the joint density once the concatenated
    dimension grows past a handful, which would pin the estimate near
    (d/2) log(1/bandwidth) no matter the data.  ``grouping`` is a sequence
    of column-index collections.

    The shared fixed kernel is what makes independent groups score ~0, but
    it also means the default width only resolves joints of a few
    dimensions at a few thousand samples; widen it for larger joints, or
    better, read the inter-group term from hfvae_terms, whose components
    carry the learned posterior scales.
    """
    x = np.asarray(samples, dtype=np.float64)
    M, d = x.shape
    if M < 2:
        raise ValueError("TC estimation needs at least 2 samples")
    groups = [np.asarray(list(g), dtype=np.intp) for g in grouping]
    cols = np.concatenate(groups)
    tc = 0.0
    for lo in range(0, M, block):
        hi = min(lo + block, M)
        u = (x[lo:hi, None, :] - x[None, :, :]) / bandwidth
        logk = -0.5 * u * u - np.log(bandwidth) - 0.5 * LOG_2PI
        diag = (np.arange(hi - lo), np.arange(lo, hi))

        def loo_mixture(index):
            s = logk[:, :, index].sum(axis=2)
            s[diag] = -np.inf
            return logsumexp_np(s, axis=1)

        joint = loo_mixture(cols)
        parts = sum(loo_mixture(g) for g in groups)
        tc += float(np.sum(joint - parts))
    return tc / M + (len(groups) - 1) * np.log(M - 1)


def logsumexp_np(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True)),
                      axis=axis)


# ------------------------------------------------------------------- losses

def vae_reconstruction_loss(q, x_c, q_hat, x_c_hat, stats, omega_q=10.0):
    """Normalized code reconstruction plus quaternion distance.

    stats must hold "e_xc_sq" = E[|x_c|^2] over the training set; the
    normalization makes the weight transferable across autoencoders.
    """
    if not stats or "e_xc_sq" not in stats:
        raise ValueError('stats missing "e_xc_sq" (precompute it over the '
                         "training codes before VAE training)")
    tensored = any(isinstance(v, T.Tensor) for v in (q, x_c, q_hat, x_c_hat))
    q, x_c = _as_batch_tensor(q), _as_batch_tensor(x_c)
    q_hat, x_c_hat = _as_batch_tensor(q_hat), _as_batch_tensor(x_c_hat)
    n = x_c.data.shape[-1]
    diff = x_c - x_c_hat
    x_term = T.mean(T.sum_(diff * diff, axis=-1)) / (n * stats["e_xc_sq"])
    # unit quaternions keep |<q, q_hat>| <= 1; clip so roundoff cannot push
    # the distance negative
    d_q = 1.0 - T.clip(T.abs_(T.sum_(q * q_hat, axis=-1)), 0.0, 1.0)
    out = x_term + omega_q * T.mean(d_q)
    return out if tensored else float(out.data)


def d_lambda_t(lam, lam_hat):
    """Rank-weighted spectral distance, batched: mean_n |l_n - l_n'| / n."""
    lam, lam_hat = _as_batch_tensor(lam), _as_batch_tensor(lam_hat)
    n = lam.data.shape[-1]
    w = 1.0 / (np.arange(1, n + 1) * float(n))
    return T.sum_(T.abs_(lam - lam_hat) * T.Tensor(w), axis=-1)


def consistency_loss(mu_I, mu_tilde, lam, lam_hat, omega_I=1.0, omega_lam=1.0,
                     stop_tilde_grad=False):
    """Pull the x_c-side intrinsic code toward the flow image of the true
    spectrum, and the predicted spectrum toward the true one.

    ``stop_tilde_grad`` detaches mu_tilde in the first term (used in the PP
    regime so extrinsic leakage in mu_I cannot contaminate the flow).
    """
    tensored = any(isinstance(v, T.Tensor) for v in (mu_I, mu_tilde, lam, lam_hat))
    mu_I, mu_tilde = _as_batch_tensor(mu_I), _as_batch_tensor(mu_tilde)
    if stop_tilde_grad:
        mu_tilde = T.stop_gradient(mu_tilde)
    diff = mu_I - mu_tilde
    out = omega_I * T.mean(T.sum_(diff * diff, axis=-1)) \
        + omega_lam * T.mean(d_lambda_t(lam, lam_hat))
    return out if tensored else float(out.data)


def covariance_penalty(mu_R, mu_E, mu_I):
    """Sum of |cross-covariance| entries over unordered group pairs."""
    mus = [_as_batch_tensor(m) for m in (mu_R, mu_E, mu_I)]
    tensored = any(isinstance(m, T.Tensor) for m in (mu_R, mu_E, mu_I))
    M = mus[0].data.shape[0]
    if M < 2:
        raise ValueError("covariance penalty needs a batch of at least 2")
    centered = [m - T.mean(m, axis=0, keepdims=True) for m in mus]
    out = None
    for i in range(3):
        for j in range(i + 1, 3):
            cov = T.matmul(T.swapaxes(centered[i], 0, 1), centered[j]) * (1.0 / M)
            s = T.sum_(T.abs_(cov))
            out = s if out is None else out + s
    return out if tensored else float(out.data)


def latent_cross_jacobians(model: VAEModel, z_E, z_I):
    """Exact Jacobians of the re-encoded group means w.r.t. the opposite
    decoder inputs: (d mu_E_hat / d z_I, d mu_I_hat / d z_E), taped."""
    z_E, z_I = _as_batch_tensor(z_E), _as_batch_tensor(z_I)
    n_E = z_E.data.shape[1]
    dec_cache, ce, ci = [], [], []
    x_hat = model.dec_x(T.concat([z_E, z_I], axis=1), cache=dec_cache)
    model.mu_E(x_hat, cache=ce)
    model.mu_I(x_hat, cache=ci)
    J_E = mlp_jacobian(dec_cache, upstream=mlp_jacobian(ce))
    J_I = mlp_jacobian(dec_cache, upstream=mlp_jacobian(ci))
    # fully affine chains collapse to one shared (K, n_in) Jacobian
    if J_E.data.ndim == 2:
        J_E = T.reshape(J_E, (1,) + J_E.data.shape)
    if J_I.data.ndim == 2:
        J_I = T.reshape(J_I, (1,) + J_I.data.shape)
    J_EI = T.take(J_E, (slice(None), slice(None), slice(n_E, None)))
    J_IE = T.take(J_I, (slice(None), slice(None), slice(None, n_E)))
    return J_EI, J_IE


def jacobian_penalty(model: VAEModel, z_E, z_I, cap=None):
    """Mean squared Frobenius norm of both cross-group Jacobians.

    ``cap`` limits the sub-batch (leading rows) used; the per-row reverse
    sweeps are exact but cost one pass per output coordinate.
    """
    tensored = isinstance(z_E, T.Tensor) or isinstance(z_I, T.Tensor)
    z_E, z_I = _as_batch_tensor(z_E), _as_batch_tensor(z_I)
    if cap is not None and z_E.data.shape[0] > cap:
        rows = (slice(None, cap), slice(None))
        z_E, z_I = T.take(z_E, rows), T.take(z_I, rows)
    J_EI, J_IE = latent_cross_jacobians(model, z_E, z_I)
    # batch size as seen by the Jacobians (1 when the chain is affine and
    # the Jacobian is shared), so this is always a per-element mean
    M = J_EI.data.shape[0]
    out = (T.sum_(J_EI * J_EI) + T.sum_(J_IE * J_IE)) * (1.0 / M)
    return out if tensored else float(out.data)


# ----------------------------------------------------------------- training

def spectral_posterior(model: VAEModel, lam, rng=None, eps=None):
    """PP-regime intrinsic posterior from the true spectrum: mean is the flow
    image, std is a learned function of the spectrum.  Also returns the flow
    log-likelihood ingredients (z, logdet) to avoid a second forward pass."""
    lam_t = _as_batch_tensor(lam)
    mu_tilde, logdet = flows.flow_forward_t(model.flow, lam_t)
    sig_tilde = _sigma(model.sig_tilde(lam_t))
    if eps is None:
        eps = rng.standard_normal(mu_tilde.data.shape) if rng is not None \
            else np.zeros(mu_tilde.data.shape)
    z_tilde = mu_tilde + sig_tilde * T.Tensor(np.asarray(eps, dtype=np.float64))
    return mu_tilde, sig_tilde, z_tilde, logdet


def vae_loss(model: VAEModel, batch, cfg: VAEConfig, rng=None, eps=None,
             train=True, return_internals=False):
    """Full training objective on one batch dict {"q", "x_c", "lam"}.

    Returns (total tensor, components dict of floats); with
    ``return_internals`` a third dict exposes the tensors that fed the
    decoder (regime instrumentation).
    """
    q, x_c, lam = batch["q"], batch["x_c"], batch["lam"]
    post = vae_encode(model, q, x_c, rng=rng,
                      eps=None if eps is None else {g: eps[g] for g in GROUPS},
                      train=train)
    lam_t = _as_batch_tensor(lam)
    z_flow, flow_logdet = flows.flow_forward_t(model.flow, lam_t)
    mu_tilde = z_flow
    if cfg.regime == "PP":
        sig_tilde = _sigma(model.sig_tilde(lam_t))
        e = eps["tilde"] if eps is not None else (
            rng.standard_normal(mu_tilde.data.shape) if rng is not None
            else np.zeros(mu_tilde.data.shape))
        z_I_recon = mu_tilde + sig_tilde * T.Tensor(np.asarray(e, dtype=np.float64))
        hf_post = GroupedPosterior(
            mu=dict(post.mu, I=mu_tilde),
            sigma=dict(post.sigma, I=sig_tilde),
            z=dict(post.z, I=z_I_recon))
        mu_dis = mu_tilde
    else:
        z_I_recon = post.z["I"]
        hf_post = post
        mu_dis = post.mu["I"]

    q_hat, x_hat = vae_decode_t(model, post.z["R"], post.z["E"], z_I_recon,
                                train=train)
    recon = vae_reconstruction_loss(_as_batch_tensor(q), _as_batch_tensor(x_c),
                                    q_hat, x_hat, model.stats, cfg.omega_q)
    terms = hfvae_terms(hf_post, dataset_size=cfg.dataset_size)
    intra_sum = None
    for g in GROUPS:
        t = terms["intra_tc"][g]
        intra_sum = t if intra_sum is None else intra_sum + t
    L_hf = cfg.omega_R * recon + cfg.beta1 * intra_sum \
        + cfg.beta2 * terms["dimwise_kl"] + cfg.beta3 * terms["mi"] \
        + cfg.beta4 * terms["inter_tc"]

    loglik = -0.5 * T.sum_(z_flow * z_flow, axis=1) \
        - 0.5 * cfg.n_I * LOG_2PI + flow_logdet
    L_lam = -cfg.omega_p * T.mean(loglik)

    lam_hat = flows.flow_inverse_t(model.flow, post.mu["I"])
    L_f = consistency_loss(post.mu["I"], mu_tilde, lam_t, lam_hat,
                           cfg.omega_I, cfg.omega_lam,
                           stop_tilde_grad=cfg.regime == "PP")

    L_d = cfg.omega_Sigma * covariance_penalty(post.mu["R"], post.mu["E"], mu_dis) \
        + cfg.omega_J * jacobian_penalty(model, post.z["E"], z_I_recon,
                                         cap=cfg.jacobian_cap)
    L_wd = cfg.weight_decay * l2_squared(model.parameters())
    total = L_hf + L_lam + L_f + L_d + L_wd
    comps = {"L_hf": float(L_hf.data), "L_lam": float(L_lam.data),
             "L_f": float(L_f.data), "L_d": float(L_d.data),
             "L_wd": float(L_wd.data), "recon": float(recon.data),
             "inter_tc": float(terms["inter_tc"].data),
             "mi": float(terms["mi"].data), "total": float(total.data)}
    if return_internals:
        internals = {"post": post, "mu_tilde": mu_tilde, "z_I_recon": z_I_recon,
                     "mu_dis": mu_dis, "q_hat": q_hat, "x_hat": x_hat}
        return total, comps, internals
    return total, comps


def encode_dataset(ae_model, dataset, split, rot_copies, rng, chunk=512):
    """Frozen-AE encodings of rotation-augmented clouds, paired with spectra.

    Returns {"q": (M, 4), "x_c": (M, n_x), "lam": (M, N_lambda)} with
    M = n_shapes * rot_copies.
    """
    clouds = dataset.clouds(split)
    lam = dataset.spectra(split)
    batch = ae.expand_batch(clouds, rot_copies, dataset.rotation_axis, rng)
    P = batch["P_rot"]
    qs, xcs = [], []
    for lo in range(0, len(P), chunk):
        q, x_c = ae.encode(ae_model, P[lo:lo + chunk])
        qs.append(q)
        xcs.append(x_c)
    lam_rep = None if lam is None else np.repeat(lam, rot_copies, axis=0)
    return {"q": np.concatenate(qs), "x_c": np.concatenate(xcs),
            "lam": lam_rep}


def _eval_loss(model, data, cfg, cap=512):
    """Deterministic (eps = 0) objective over a capped evaluation set."""
    n = len(data["q"])
    take = slice(0, min(n, cap))
    batch = {k: v[take] for k, v in data.items()}
    dims = {"R": cfg.n_R, "E": cfg.n_E, "I": cfg.n_I, "tilde": cfg.n_I}
    eps = {g: np.zeros((batch["q"].shape[0], d)) for g, d in dims.items()}
    _, comps = vae_loss(model, batch, cfg, eps=eps, train=False)
    return comps


def train_vae(ae_model, dataset, cfg: VAEConfig, rng, log_every=0, model=None):
    """Train a latent VAE on frozen-AE encodings of ``dataset``.

    Returns (model, history); history rows are per-evaluation snapshots and
    the final entry records divergence recovery if it happened.
    """
    data = encode_dataset(ae_model, dataset, "train", cfg.rot_copies, rng)
    val = encode_dataset(ae_model, dataset, "val", 1, rng)
    return fit_vae(data, cfg, rng, val_data=val, log_every=log_every,
                   model=model)


def fit_vae(data, cfg: VAEConfig, rng, val_data=None, log_every=0, model=None,
            train_state=None):
    """Core training loop on pre-encoded arrays (see ``encode_dataset``).

    ``train_state`` resumes a run: a dict with "optimizer" (AdamState),
    "scheduler" (PlateauScheduler) and "step" (last completed).  Together
    with the caller restoring the generator state, the continued run is
    bit-identical to one that never stopped.  The returned history carries
    the updated triple under "final".
    """
    if data.get("lam") is None:
        raise ValueError("the %s regime needs spectra alongside the codes"
                         % cfg.regime)
    if model is None:
        model = VAEModel(cfg, rng, n_x=data["x_c"].shape[1])
    if not model.stats:
        model.stats["e_xc_sq"] = float(np.mean(np.sum(data["x_c"] ** 2, axis=1)))
    if not model.flow.actnorm_initialized():
        flows.init_actnorm(model.flow, data["lam"][:1024])
    params = model.parameters()
    if train_state is None:
        state = AdamState(lr=cfg.lr)
        sched = PlateauScheduler(lr=cfg.lr, min_lr=cfg.lr_min,
                                 decay_factor=cfg.lr_decay,
                                 patience=cfg.plateau_patience)
        start = 1
    else:
        state = train_state["optimizer"]
        sched = train_state["scheduler"]
        start = int(train_state["step"]) + 1
    M = len(data["q"])
    history = {"rows": [], "diverged": False}
    done = start - 1
    good = _snapshot(model.state_tensors())
    val = val_data if val_data is not None and len(val_data["q"]) else data
    try:
        for step in range(start, cfg.iters + 1):
            idx = rng.choice(M, size=min(cfg.batch, M), replace=False)
            batch = {k: v[idx] for k, v in data.items()}
            for p in params:
                p.grad = None
            with T.Tape() as tape:
                total, _ = vae_loss(model, batch, cfg, rng=rng, train=True)
                tape.backward(total)
            adam_step(state, params)
            done = step
            if step % cfg.eval_every == 0 or step == cfg.iters:
                row = dict(_eval_loss(model, val, cfg), step=step)
                state.lr = plateau_step(sched, row["total"])
                row["lr"] = state.lr
                history["rows"].append(row)
                good = _snapshot(model.state_tensors())
                if log_every and (step // cfg.eval_every) % log_every == 0:
                    print("step %5d  total %.4f  recon %.4f  inter_tc %.4f"
                          % (step, row["total"], row["recon"], row["inter_tc"]))
    except NonFiniteError:
        _restore(model.state_tensors(), good)
        history["diverged"] = True
    history["final"] = {"optimizer": state, "scheduler": sched, "step": done}
    return model, history


def _snapshot(tensors):
    return [t.data.copy() for t in tensors]


def _restore(tensors, snap):
    for t, s in zip(tensors, snap):
        t.data = s.copy()


# ----------------------------------------------------------- generative ops

def generate(ae_model, vae_model: VAEModel, count, rng):
    """Sample latents from the prior and decode to rotated point clouds."""
    cfg = vae_model.cfg
    z_R = rng.standard_normal((count, cfg.n_R))
    z_E = rng.standard_normal((count, cfg.n_E))
    z_I = rng.standard_normal((count, cfg.n_I))
    q_hat, x_hat = vae_decode(vae_model, z_R, z_E, z_I)
    _, P = ae.decode(ae_model, q_hat, x_hat)
    return P


def _slerp(q0, q1, t):
    if np.dot(q0, q1) < 0:
        q1 = -q1
    c = np.clip(np.dot(q0, q1), -1.0, 1.0)
    if c > 1.0 - 1e-9:
        out = (1.0 - t) * q0 + t * q1
        return out / np.linalg.norm(out)
    ang = np.arccos(c)
    return (np.sin((1.0 - t) * ang) * q0 + np.sin(t * ang) * q1) / np.sin(ang)


def _group_latents(model, shape):
    q, x_c = shape
    post = vae_encode(model, q, x_c)
    return {g: post.mu[g].data[0] for g in GROUPS}


def swap_latent_group(latents_a, latents_b, group):
    """Exchange one group between two latent dicts (an involution)."""
    out_a = dict(latents_a)
    out_b = dict(latents_b)
    out_a[group], out_b[group] = latents_b[group], latents_a[group]
    return out_a, out_b


def interpolate_and_transfer(vae_model: VAEModel, shape_a, shape_b, mode,
                             steps=8, ae_model=None, swap_group="E",
                             slerp_q=False):
    """Latent paths between two encoded shapes (q, x_c), decoded per step.

    "intrinsic" and "extrinsic" linearly interpolate one group while the
    others stay bitwise fixed at shape A's values; "pose_transfer" swaps
    ``swap_group`` wholesale and returns the two swapped results.
    ``slerp_q`` replaces the decoded quaternion path by a geodesic between
    the endpoint quaternions.  Decoded clouds are included when an AE is
    supplied.
    """
    la = _group_latents(vae_model, shape_a)
    lb = _group_latents(vae_model, shape_b)
    if mode == "pose_transfer":
        sa, sb = swap_latent_group(la, lb, swap_group)
        path = [sa, sb]
        t = np.array([0.0, 1.0])
    elif mode in ("intrinsic", "extrinsic"):
        g = "I" if mode == "intrinsic" else "E"
        t = np.linspace(0.0, 1.0, steps)
        path = []
        for ti in t:
            l = dict(la)
            l[g] = (1.0 - ti) * la[g] + ti * lb[g]
            path.append(l)
    else:
        raise ValueError("mode must be intrinsic, extrinsic, or pose_transfer"
                         ", got %r" % mode)
    # decode one step at a time so each frame is bitwise what a standalone
    # decode of its latent would give (batched matmuls round differently)
    decoded = [vae_decode(vae_model, l["R"], l["E"], l["I"]) for l in path]
    q_hat = np.stack([d[0] for d in decoded])
    x_hat = np.stack([d[1] for d in decoded])
    if slerp_q:
        qa, qb = q_hat[0], q_hat[-1]
        q_hat = np.stack([_slerp(qa, qb, ti) for ti in t])
    out = {"mode": mode, "t": t, "latents": path, "q": q_hat, "x_c": x_hat}
    if ae_model is not None:
        out["clouds"] = ae.decode(ae_model, q_hat, x_hat)[1]
    return out
