"""Quantitative evaluation of trained models.

Covers reconstruction quality, rotation invariance of the canonical
representation (in 3D space and in code space), generative coverage and
fidelity against a held-out set, spectral log-likelihood, and the
retrieval-based disentanglement score S.

Rotation-invariance metrics take either a trained autoencoder or a plain
callable; the callable forms exist so oracles and broken baselines can be
scored by the exact same code path the real models go through.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_mutual_info_score

from . import ae, flows, geom, vae

DEFAULT_SIZES = (20, 56, 92, 128, 164, 200)


# ------------------------------------------------------------ encoding hooks

def _canonical(ae_model, P):
    """Canonical decoding of one cloud: D(E(P)), or ae_model(P) directly."""
    if callable(ae_model):
        return np.asarray(ae_model(P), dtype=np.float64)
    q, x_c = ae.encode(ae_model, P)
    return ae.decode(ae_model, q, x_c)[0]


def _codes(ae_model, clouds, chunk=256):
    """Canonical codes x_c for a batch of clouds, chunked."""
    if callable(ae_model):
        return np.stack([np.asarray(ae_model(P), dtype=np.float64)
                         for P in clouds])
    out = []
    for lo in range(0, len(clouds), chunk):
        out.append(ae.encode(ae_model, clouds[lo:lo + chunk])[1])
    return np.concatenate(out)


# ------------------------------------------------------- rotation invariance

def c3d_metric(ae_model, shapes, m_R, rng, axis=(0.0, 0.0, 1.0)):
    """Mean pairwise Chamfer distance between canonical decodings of the
    same shape under m_R random rotations, averaged over shapes."""
    if m_R < 2:
        raise ValueError("need at least 2 rotations to compare")
    shapes = np.asarray(shapes, dtype=np.float64)
    total = 0.0
    for P in shapes:
        cans = []
        for _ in range(m_R):
            R = geom.random_rotation_about_axis(axis, rng)
            cans.append(_canonical(ae_model, P @ R))
        pairs = [geom.chamfer(cans[i], cans[j])
                 for i in range(m_R) for j in range(i + 1, m_R)]
        total += float(np.mean(pairs))
    return total / len(shapes)


def kmeans(points, k, seed):
    """Seeded k-means++ labels (Lloyd iterations capped at 300)."""
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ValueError("k=%d exceeds the %d points" % (k, len(points)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")   # duplicate points starve clusters
        km = KMeans(n_clusters=k, init="k-means++", n_init=10, max_iter=300,
                    random_state=int(seed) % (2 ** 31)).fit(points)
    return km.labels_.astype(np.intp)


def ami(labels_pred, labels_true):
    """Adjusted mutual information, arithmetic normalization."""
    labels_pred = np.asarray(labels_pred)
    labels_true = np.asarray(labels_true)
    if labels_pred.shape != labels_true.shape:
        raise ValueError("label arrays differ in length")
    return float(adjusted_mutual_info_score(labels_true, labels_pred,
                                            average_method="arithmetic"))


def cx_metric(ae_model, shape_pool, sizes=DEFAULT_SIZES, N_rc=5, seed=0,
              axis=(0.0, 0.0, 1.0), reps=2):
    """Code-space rotational consistency.

    For each instance count in ``sizes``: draw that many shapes, make N_rc
    randomly rotated copies of each, encode all copies, cluster the codes
    with k = instance count, and score AMI against instance identity.
    ``reps`` clusterings with fresh draws are averaged per size; the final
    value is the mean over sizes (an area-under-the-curve-style summary).
    """
    pool = np.asarray(shape_pool, dtype=np.float64)
    if len(pool) < max(sizes):
        raise ValueError("pool of %d shapes cannot seed a clustering of %d"
                         % (len(pool), max(sizes)))
    rng = np.random.default_rng(seed)
    scores = []
    for size in sizes:
        for _ in range(reps):
            idx = rng.choice(len(pool), size=size, replace=False)
            clouds, labels = [], []
            for j, i in enumerate(idx):
                for _ in range(N_rc):
                    R = geom.random_rotation_about_axis(axis, rng)
                    clouds.append(pool[i] @ R)
                    labels.append(j)
            codes = _codes(ae_model, np.stack(clouds))
            pred = kmeans(codes, size, seed=rng.integers(2 ** 31))
            scores.append(ami(pred, labels))
    return float(np.mean(scores))


# --------------------------------------------------------- generative quality

def chamfer_matrix(A, B, block=64):
    """(len(A), len(B)) Chamfer distances between two stacks of clouds.

    One GEMM per row against a block of B, instead of len(A)*len(B) small
    pairwise calls.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n, m = A.shape[1], B.shape[1]
    D = np.empty((len(A), len(B)))
    for lo in range(0, len(B), block):
        hi = min(lo + block, len(B))
        flat = B[lo:hi].reshape(-1, 3)
        for i, P in enumerate(A):
            d2 = geom.pairwise_sqdist(P, flat).reshape(n, hi - lo, m)
            fwd = d2.min(axis=2).mean(axis=0)
            bwd = d2.min(axis=0).mean(axis=1)
            D[i, lo:hi] = fwd + bwd
    return D


def coverage_fidelity(generated, real):
    """Mode coverage and minimum-matching fidelity of a generated set.

    coverage: fraction of real clouds that are the Chamfer-nearest real
    neighbor of at least one generated cloud.  fidelity: mean over real
    clouds of the distance to their closest generated cloud (lower is
    better).  Callers conventionally generate five clouds per real one.
    """
    generated = np.asarray(generated, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if len(generated) == 0 or len(real) == 0:
        raise ValueError("coverage/fidelity need non-empty sets")
    D = chamfer_matrix(generated, real)
    matched = np.unique(D.argmin(axis=1))
    coverage = matched.size / len(real)
    fidelity = float(D.min(axis=0).mean())
    return coverage, fidelity


# ------------------------------------------------------------------ retrieval

@dataclass
class RetrievalGroundTruth:
    """Per-shape generative parameters: intrinsic beta, extrinsic theta."""
    beta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=np.float64))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        if len(self.beta) != len(self.theta):
            raise ValueError("beta and theta cover different shape counts")

    @classmethod
    def from_records(cls, records):
        return cls(beta=np.stack([r.beta for r in records]),
                   theta=np.stack([r.theta for r in records]))


def _pairwise_param_error(values, kind):
    v = np.asarray(values, dtype=np.float64)
    diff = v[:, None, :] - v[None, :, :]
    if kind == "beta":
        return (diff ** 2).mean(axis=2)       # mean squared parameter error
    return np.abs(diff).mean(axis=2)          # per-joint hinge-angle distance


def retrieval_disentanglement(encodings, ground_truth, k_ret=3):
    """Retrieval scores per representation plus the disentanglement scalar.

    For each representation, each shape retrieves its k_ret nearest
    neighbors by squared distance; the retrieved shapes' parameter errors
    are averaged and normalized by the mean pairwise error (= the score a
    uniformly random retriever gets), giving s = 1 - E.  Each s is then
    expressed relative to retrieval on x_c itself, and

        S = s_hat_beta(z_I) + s_hat_theta(z_E)
            - s_hat_beta(z_E) - s_hat_theta(z_I).

    ``encodings`` maps representation names to (M, d) arrays and must hold
    "x_c" (the normalizer) plus "z_E" and "z_I"; extra entries such as "z"
    or "z_tilde_I" are scored and reported alongside.
    """
    gt = ground_truth
    if not isinstance(gt, RetrievalGroundTruth):
        gt = RetrievalGroundTruth(*gt)
    M = len(gt.beta)
    if M < k_ret + 1:
        raise ValueError("need at least k_ret+1=%d shapes" % (k_ret + 1))
    for need in ("x_c", "z_E", "z_I"):
        if need not in encodings:
            raise ValueError("encodings missing %r" % need)

    errors = {"beta": _pairwise_param_error(gt.beta, "beta"),
              "theta": _pairwise_param_error(gt.theta, "theta")}
    off = ~np.eye(M, dtype=bool)
    baseline = {psi: float(errors[psi][off].mean()) for psi in errors}

    s = {psi: {} for psi in errors}
    for name, Z in encodings.items():
        Z = np.asarray(Z, dtype=np.float64)
        if len(Z) != M:
            raise ValueError("%r encodes %d shapes, ground truth has %d"
                             % (name, len(Z), M))
        d2 = geom.pairwise_sqdist(Z, Z)
        np.fill_diagonal(d2, np.inf)
        nn = np.argsort(d2, axis=1)[:, :k_ret]
        for psi in errors:
            E = errors[psi][np.arange(M)[:, None], nn].mean()
            s[psi][name] = float(1.0 - E / baseline[psi])

    s_hat = {psi: {name: s[psi][name] / s[psi]["x_c"] for name in encodings}
             for psi in errors}
    S = (s_hat["beta"]["z_I"] + s_hat["theta"]["z_E"]
         - s_hat["beta"]["z_E"] - s_hat["theta"]["z_I"])
    return {"s": s, "s_hat": s_hat, "baseline": baseline, "S": float(S)}


# ---------------------------------------------------------------- full report

@dataclass
class MetricReport:
    """Named scalar metrics plus enough provenance to reproduce them."""
    metrics: dict
    seed: int
    config_hash: str
    model_hash: str
    partial: bool = False
    failures: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "metrics": self.metrics, "seed": self.seed,
            "config_hash": self.config_hash, "model_hash": self.model_hash,
            "partial": self.partial, "failures": self.failures,
            "tables": self.tables,
        }, indent=2, sort_keys=True)


def _hash_config(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _hash_models(models):
    h = hashlib.sha256()
    for key in sorted(models):
        for p in models[key].parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


REPORT_DEFAULTS = dict(
    seed=0, split="test", recon_copies=5, m_R=4, c3d_shapes=24,
    sizes=DEFAULT_SIZES, N_rc=5, cx_reps=2, gen_multiple=5, k_ret=3)


def full_report(models, dataset, config=None):
    """Every held-out-evaluation metric in one deterministic report.

    ``models`` holds "ae" and "vae"; ``dataset`` provides split records
    with clouds, spectra and generative parameters.  Metrics run in a fixed
    order; if one fails, the report is returned flagged partial with the
    failure recorded and later metrics absent.
    """
    cfg = dict(REPORT_DEFAULTS)
    cfg.update(config or {})
    ae_model, vae_model = models["ae"], models["vae"]
    report = MetricReport(metrics={}, seed=cfg["seed"],
                          config_hash=_hash_config(cfg),
                          model_hash=_hash_models(models))
    rng = np.random.default_rng(cfg["seed"])
    records = dataset.split(cfg["split"])
    clouds = np.stack([r.cloud for r in records])
    spectra = np.stack([r.spectrum for r in records])
    axis = dataset.rotation_axis

    def rotated_copy(P):
        return P @ geom.random_rotation_about_axis(axis, rng)

    steps = [
        ("d_C", lambda: _mean_recon_chamfer(
            ae_model, clouds, cfg["recon_copies"], rng, axis)),
        ("C_3D", lambda: c3d_metric(
            ae_model, clouds[:cfg["c3d_shapes"]], cfg["m_R"], rng, axis)),
        ("C_X", lambda: cx_metric(
            ae_model, clouds, cfg["sizes"], cfg["N_rc"],
            seed=rng.integers(2 ** 31), axis=axis, reps=cfg["cx_reps"])),
        ("log_p_lambda", lambda: float(
            np.mean(flows.flow_loglik(vae_model.flow, spectra)))),
    ]

    def coverage_step():
        real = np.stack([rotated_copy(P) for P in clouds])
        gen = vae.generate(ae_model, vae_model,
                           cfg["gen_multiple"] * len(real), rng)
        return coverage_fidelity(gen, real)

    def retrieval_step():
        copies = np.stack([rotated_copy(P) for P in clouds])
        q, x_c = ae.encode(ae_model, copies)
        post = vae.vae_encode(vae_model, q, x_c)
        mu = {g: post.mu[g].data for g in vae.GROUPS}
        z_tilde, _ = flows.flow_forward(vae_model.flow, spectra)
        enc = {"x_c": x_c, "z": np.concatenate(list(mu.values()), axis=1),
               "z_E": mu["E"], "z_I": mu["I"], "z_tilde_I": z_tilde}
        return retrieval_disentanglement(
            enc, RetrievalGroundTruth.from_records(records), cfg["k_ret"])

    for name, step in steps:
        if not _run_step(report, name, step, lambda v, n=name: {n: float(v)}):
            return report
    if not _run_step(report, "coverage/fidelity", coverage_step,
                     lambda v: {"coverage": float(v[0]),
                                "fidelity": float(v[1])}):
        return report
    if not _run_step(report, "S", retrieval_step,
                     lambda v: {"S": float(v["S"])}, table_key="retrieval"):
        return report
    return report


def _run_step(report, name, step, unpack, table_key=None):
    try:
        value = step()
    except Exception as exc:                  # noqa: BLE001 - report and stop
        report.partial = True
        report.failures.append("%s: %s" % (name, exc))
        return False
    report.metrics.update(unpack(value))
    if table_key is not None:
        report.tables[table_key] = {
            "s": value["s"], "s_hat": value["s_hat"],
            "baseline": value["baseline"]}
    return True


def _mean_recon_chamfer(ae_model, clouds, copies, rng, axis):
    total = 0.0
    for _ in range(copies):
        rots = np.stack(
            [P @ geom.random_rotation_about_axis(axis, rng)
             for P in clouds])
        q, x_c = ae.encode(ae_model, rots)
        P_hat = ae.decode(ae_model, q, x_c)[1]
        total += float(np.mean([geom.chamfer(a, b)
                                for a, b in zip(rots, P_hat)]))
    return total / copies
