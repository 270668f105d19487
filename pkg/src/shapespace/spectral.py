"""Laplace-Beltrami spectra for meshes and point clouds.

The mesh backend is the cotangent stiffness with barycentric lumped mass; the
point-cloud backend is a symmetric kNN graph with heat-kernel weights.  Both
yield a sparse generalized eigenproblem  L phi = lambda M phi  whose smallest
eigenvalues are isometry invariants of the surface; the first (constant-mode)
eigenvalue is dropped everywhere, so "the spectrum" always means the first
N nonzero eigenvalues in ascending order.

Uniformly scaling the geometry by s scales every eigenvalue by 1/s^2.  That
holds analytically for the cotangent backend (angles are scale invariant, the
mass scales by s^2) and is arranged exactly for the point-cloud backend by
dividing the graph stiffness by the adaptive bandwidth t, which itself scales
by s^2.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

EIG_RESIDUAL_TOL = 1e-8
SHIFT = -1e-8
DEFAULT_KNN = 14


class EigensolveError(RuntimeError):
    """The eigensolver failed to converge or returned residuals above tolerance."""


# ------------------------------------------------------------------ operators

def cotan_laplacian(verts, faces):
    """Cotangent stiffness L (PSD, zero row sums) and barycentric lumped mass M.

    Returns (L, M) as CSR / diagonal CSR sparse matrices.
    """
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(verts)
    i0, i1, i2 = faces[:, 0], faces[:, 1], faces[:, 2]
    v0, v1, v2 = verts[i0], verts[i1], verts[i2]

    # cot of the angle at each corner = dot / |cross| of the adjacent edges
    def cot(a, b):
        cr = np.cross(a, b)
        return (a * b).sum(axis=1) / np.maximum(np.linalg.norm(cr, axis=1), 1e-300)

    c0 = cot(v1 - v0, v2 - v0)   # angle at vertex 0, opposite edge (1,2)
    c1 = cot(v2 - v1, v0 - v1)
    c2 = cot(v0 - v2, v1 - v2)

    rows = np.concatenate([i1, i2, i2, i0, i0, i1])
    cols = np.concatenate([i2, i1, i0, i2, i1, i0])
    w = 0.5 * np.concatenate([c0, c0, c1, c1, c2, c2])
    W = sp.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W

    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    m = np.zeros(n)
    for idx in (i0, i1, i2):
        np.add.at(m, idx, area / 3.0)
    M = sp.diags(m).tocsr()
    return L.tocsr(), M


def pc_graph_laplacian(points, k=DEFAULT_KNN, t=None):
    """Point-cloud substitute Laplacian from a symmetric kNN heat-kernel graph.

    Edges are the union of k-nearest-neighbor relations, weighted by
    exp(-d^2 / (4t)) with t defaulting to the mean squared kNN distance.
    Stiffness is (D - W) / (4t) and the mass matrix is the degree matrix, so
    generalized eigenvalues obey the same 1/s^2 scale law as the mesh backend.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k >= n:
        raise ValueError("k=%d needs more than %d points" % (k, n))
    from scipy.spatial import cKDTree
    tree = cKDTree(points)
    d, j = tree.query(points, k=k + 1)       # includes self at distance 0
    d, j = d[:, 1:], j[:, 1:]
    if t is None:
        t = float(np.mean(d * d))
    i = np.repeat(np.arange(n), k)
    rows = np.concatenate([i, j.ravel()])
    cols = np.concatenate([j.ravel(), i])
    vals = np.exp(-np.concatenate([d.ravel(), d.ravel()]) ** 2 / (4.0 * t))
    W = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    W.sum_duplicates()
    # symmetrize the union graph: an edge present twice keeps one weight
    W = W.maximum(W.T)
    deg = np.asarray(W.sum(axis=1)).ravel()
    L = (sp.diags(deg) - W) / (4.0 * t)
    M = sp.diags(deg).tocsr()
    return L.tocsr(), M


# ---------------------------------------------------------------- eigensolve

def smallest_eigenvalues(L, M, count, seed=0, return_residuals=False):
    """First ``count`` generalized eigenvalues of L phi = lambda M phi, ascending.

    Shift-invert around a tiny negative shift with a deterministic seeded start
    vector; every returned pair is residual-checked to EIG_RESIDUAL_TOL.
    With ``return_residuals`` the per-pair residual norms come back too.
    """
    n = L.shape[0]
    if count >= n:
        raise ValueError("requested %d eigenvalues from an operator of size %d" % (count, n))
    v0 = np.random.default_rng(seed).normal(size=n)
    try:
        vals, vecs = spla.eigsh(L, k=count, M=M, sigma=SHIFT, which="LM", v0=v0)
    except spla.ArpackNoConvergence as e:
        raise EigensolveError("eigensolver did not converge: %s" % e) from e
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    residuals = np.empty(count)
    for i, (lam, phi) in enumerate(zip(vals, vecs.T)):
        res = np.linalg.norm(L @ phi - lam * (M @ phi)) / np.linalg.norm(phi)
        if res > EIG_RESIDUAL_TOL:
            raise EigensolveError("eigenpair residual %.3e exceeds %.1e" % (res, EIG_RESIDUAL_TOL))
        residuals[i] = res
    if return_residuals:
        return vals, residuals
    return vals


@dataclass
class Spectrum:
    """First n nonzero eigenvalues (ascending) plus provenance metadata."""
    values: np.ndarray
    backend: str
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)


def compute_spectrum(geometry, n_eigs, backend="mesh", k=DEFAULT_KNN, t=None, seed=0):
    """Spectrum of a mesh (verts, faces) or a point cloud, first zero dropped.

    ``geometry`` is a (verts, faces) tuple for the mesh backend or an (N, 3)
    array for the point-cloud backend.
    """
    if backend == "mesh":
        verts, faces = geometry
        L, M = cotan_laplacian(verts, faces)
        params = {}
    elif backend == "pc":
        L, M = pc_graph_laplacian(np.asarray(geometry), k=k, t=t)
        params = {"k": k, "t": t}
    else:
        raise ValueError("unknown backend %r" % backend)
    vals, res = smallest_eigenvalues(L, M, n_eigs + 1, seed=seed,
                                     return_residuals=True)
    params["max_residual"] = float(res.max())
    lam0, rest = vals[0], vals[1:]
    if abs(lam0) > 1e-6 * max(rest[0], 1e-30):
        raise EigensolveError("first eigenvalue %.3e is not numerically zero; "
                              "is the surface connected?" % lam0)
    if rest[0] <= 1e-12:
        raise EigensolveError("repeated zero eigenvalue: surface appears disconnected")
    return Spectrum(values=rest.copy(), backend=backend, params=params)


# ------------------------------------------------------------------ distance

def spectral_distance(lam1, lam2):
    """Weyl-weighted L1 distance: mean over n of |lam1_n - lam2_n| / n (1-based)."""
    lam1 = np.asarray(lam1, dtype=np.float64)
    lam2 = np.asarray(lam2, dtype=np.float64)
    if lam1.shape != lam2.shape:
        raise ValueError("spectra have different lengths: %d vs %d" % (lam1.size, lam2.size))
    n = np.arange(1, lam1.size + 1, dtype=np.float64)
    return float(np.mean(np.abs(lam1 - lam2) / n))


# --------------------------------------------------------------------- cache

class SpectrumCache:
    """Content-addressed spectrum store: one file per key, JSON header + f8 blob.

    Corrupt entries are logged and treated as misses, then recomputed and
    overwritten by ``get_or_compute``.
    """

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(geometry, backend, n_eigs, k=None, t=None):
        if backend == "mesh":
            k = t = None   # graph parameters do not apply
        h = hashlib.sha256()
        h.update(backend.encode())
        h.update(str(n_eigs).encode())
        h.update(repr(k).encode())
        h.update(repr(t).encode())
        if backend == "mesh":
            verts, faces = geometry
            h.update(np.ascontiguousarray(verts, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(faces, dtype="<i8").tobytes())
        else:
            h.update(np.ascontiguousarray(geometry, dtype="<f8").tobytes())
        return h.hexdigest()

    def _path(self, key):
        return os.path.join(self.directory, key + ".spec")

    def store(self, key, spectrum: Spectrum):
        blob = np.ascontiguousarray(spectrum.values, dtype="<f8").tobytes()
        header = json.dumps({
            "key": key,
            "backend": spectrum.backend,
            "params": spectrum.params,
            "count": int(spectrum.values.size),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }, sort_keys=True)
        tmp = self._path(key) + ".tmp"
        with open(tmp, "wb") as f:
            f.write(header.encode() + b"\n" + blob)
        os.replace(tmp, self._path(key))

    def load(self, key):
        path = self._path(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "rb") as f:
                raw = f.read()
            head, blob = raw.split(b"\n", 1)
            meta = json.loads(head.decode())
            if meta["key"] != key or hashlib.sha256(blob).hexdigest() != meta["sha256"]:
                raise ValueError("digest mismatch")
            values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
            if values.size != meta["count"]:
                raise ValueError("value count mismatch")
            return Spectrum(values=values, backend=meta["backend"], params=meta["params"])
        except (ValueError, KeyError, json.JSONDecodeError) as e:
            log.warning("corrupt spectrum cache entry %s (%s); recomputing", key[:12], e)
            return None

    def get_or_compute(self, geometry, n_eigs, backend="mesh", k=DEFAULT_KNN, t=None, seed=0):
        key = self.key(geometry, backend, n_eigs, k=k, t=t)
        hit = self.load(key)
        if hit is not None:
            return hit
        spec = compute_spectrum(geometry, n_eigs, backend=backend, k=k, t=t, seed=seed)
        self.store(key, spec)
        return spec
