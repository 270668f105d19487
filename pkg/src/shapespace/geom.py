"""Rotation algebra, point-cloud distances, and feature-transform operations.

Conventions used throughout the package:
  * quaternions are (w, x, y, z), unit norm, with q and -q the same rotation,
  * point clouds are (N, 3) arrays of row vectors, rotations apply as P @ R,
  * all distances here are plain numpy (the training code re-expresses the
    same formulas with taped tensors and is tested against these kernels).
"""
from __future__ import annotations

import numpy as np


# ----------------------------------------------------------------- rotations

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_multiply(q1, q2):
    """Hamilton product (applies q1's rotation, then q2's, in the row convention)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotmat(q):
    """Unit quaternion -> 3x3 rotation matrix for row-vector application P @ R."""
    w, x, y, z = quat_normalize(q)
    # standard column-vector matrix, transposed for the row convention
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)],
        [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)],
        [2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R):
    """Inverse of quat_to_rotmat (returns the w >= 0 representative)."""
    R = np.asarray(R, dtype=np.float64)
    M = R.T  # back to the column convention for the classic extraction
    t = np.trace(M)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (M[2, 1] - M[1, 2]) / s,
                      (M[0, 2] - M[2, 0]) / s,
                      (M[1, 0] - M[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(M)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(M[i, i] - M[j, j] - M[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (M[k, j] - M[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (M[j, i] + M[i, j]) / s
        q[1 + k] = (M[k, i] + M[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def rot_about_axis(axis, angle):
    """Rotation about ``axis`` by ``angle``, row-vector convention."""
    return quat_to_rotmat(axis_angle_quat(axis, angle))


def random_rotation_about_axis(axis, rng):
    """Rotation about ``axis`` by an angle uniform on [0, 2*pi)."""
    return rot_about_axis(axis, rng.uniform(0.0, 2.0 * np.pi))


def random_quaternion(rng):
    """Uniform rotation (Gaussian-normalized quaternion, w >= 0 representative)."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rotation_geodesic(R1, R2):
    """Geodesic distance in [0, 1]: arccos((tr(R1 R2^T) - 1) / 2) / pi."""
    c = (np.trace(R1 @ R2.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)) / np.pi)


def quat_distance(q1, q2):
    """1 - |<q1, q2>|; zero iff same rotation (double cover folded)."""
    return float(1.0 - abs(float(np.dot(quat_normalize(q1), quat_normalize(q2)))))


def slerp(q1, q2, t):
    """Spherical interpolation along the shorter arc; nlerp below 1e-6 arc."""
    q1 = quat_normalize(q1)
    q2 = quat_normalize(q2)
    d = float(np.dot(q1, q2))
    if d < 0.0:
        q2, d = -q2, -d
    d = min(d, 1.0)
    omega = np.arccos(d)
    if omega < 1e-6:
        return quat_normalize((1.0 - t) * q1 + t * q2)
    so = np.sin(omega)
    return (np.sin((1.0 - t) * omega) / so) * q1 + (np.sin(t * omega) / so) * q2


# ---------------------------------------------------------- cloud distances

def pairwise_sqdist(P1, P2):
    """(N, M) matrix of squared euclidean distances (brute force)."""
    P1 = np.asarray(P1, dtype=np.float64)
    P2 = np.asarray(P2, dtype=np.float64)
    s1 = (P1 * P1).sum(axis=1)[:, None]
    s2 = (P2 * P2).sum(axis=1)[None, :]
    return np.maximum(s1 + s2 - 2.0 * (P1 @ P2.T), 0.0)


def chamfer(P1, P2):
    """Sum of the two directed means of squared nearest-neighbor distances."""
    D = pairwise_sqdist(P1, P2)
    return float(D.min(axis=1).mean() + D.min(axis=0).mean())


def hausdorff_approx(P1, P2):
    """Mean of the two directed max-of-min squared distances."""
    D = pairwise_sqdist(P1, P2)
    return float(0.5 * (D.min(axis=1).max() + D.min(axis=0).max()))


# ------------------------------------------------------- feature transforms

def ftl_unfold(x, n_s=None):
    """Row-major unfold of a length-3*n_s feature vector into n_s rows of 3."""
    x = np.asarray(x, dtype=np.float64)
    if n_s is None:
        n_s, rem = divmod(x.size, 3)
        if rem:
            raise ValueError("feature length %d is not a multiple of 3" % x.size)
    if x.size != 3 * n_s:
        raise ValueError("feature length %d is not 3 * %d" % (x.size, n_s))
    return x.reshape(n_s, 3)


def ftl_fold(u):
    return np.asarray(u, dtype=np.float64).reshape(-1)


def ftl_apply(R, x, n_s=None):
    """Rotate a latent feature: fold(unfold(x) @ R)."""
    x = np.asarray(x, dtype=np.float64)
    if n_s is None:
        if x.size % 3:
            raise ValueError("feature length %d is not divisible by 3" % x.size)
        n_s = x.size // 3
    return ftl_fold(ftl_unfold(x, n_s) @ R)


def ftl_invariants(x, n_s=None):
    """Rotation invariants: pairwise row inner products, i <= j lexicographic.

    Length n_s * (n_s + 1) / 2; unchanged under ftl_apply with any rotation.
    """
    x = np.asarray(x, dtype=np.float64)
    if n_s is None:
        n_s = x.size // 3
    U = ftl_unfold(x, n_s)
    G = U @ U.T
    iu = np.triu_indices(n_s)
    return G[iu]
