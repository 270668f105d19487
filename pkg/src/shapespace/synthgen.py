"""Synthetic articulated creatures and oracle meshes.

A creature is a chain of four capsule-like segments joined by three hinge
joints.  Intrinsic parameters beta = (lengths, radii) in R^8 set what the
creature is; extrinsic parameters theta in R^3 (hinge angles, |theta| <=
2*pi/5) set how it is posed.  Bending happens inside a short blend band
around each joint where the spine follows an exact circular arc, so posing is
near-isometric: the skin stretches only in the band, and the Laplace spectrum
barely moves compared with a change of beta.

Meshes are watertight genus-0 triangle meshes built as a swept tube with
hemispherical end caps.  With theta = 0 the bounding-box long edge equals
sum(lengths) + r_first + r_last exactly.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import spectral
from .geom import rot_about_axis

log = logging.getLogger(__name__)

THETA_MAX = 2.0 * np.pi / 5.0

# fixed per-joint hinge directions, as angles in the local normal plane of the
# preceding segment (drawn once, constant across every creature)
HINGE_PSI = (0.7341, 2.5481, 4.9012)


class InvalidCreatureError(ValueError):
    """Parameters produce a degenerate or self-intersecting creature."""


@dataclass
class ChainTopology:
    n_segments: int = 4
    hinge_psi: tuple = HINGE_PSI


@dataclass
class CreatureSpec:
    lengths: np.ndarray          # (4,)
    radii: np.ndarray            # (4,)
    thetas: np.ndarray           # (3,) hinge angles
    topology: ChainTopology = field(default_factory=ChainTopology)

    @property
    def beta(self):
        return np.concatenate([self.lengths, self.radii])

    @property
    def theta(self):
        return np.asarray(self.thetas, dtype=np.float64)


@dataclass
class Mesh:
    verts: np.ndarray            # (V, 3) float64
    faces: np.ndarray            # (F, 3) int64


# ------------------------------------------------------------------ icosphere

def icosphere(subdivisions=3):
    """Unit sphere by repeated icosahedron subdivision (an analytic-spectrum oracle:
    the Laplace-Beltrami eigenvalues are l (l + 1) with multiplicity 2 l + 1)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        vlist = list(verts)
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(vlist)
                vlist.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return Mesh(verts=verts, faces=faces)


# ------------------------------------------------------------- creature mesh

def _arc_advance(c, frame, axis, omega, ds):
    """Move distance ds along the spine while the frame rotates about ``axis``
    at rate omega (rad per unit length).  Exact circular-arc integration."""
    T = frame[0]
    if omega == 0.0:
        return c + T * ds, frame
    ang = omega * ds
    R = rot_about_axis(axis, ang)  # row convention: v @ R
    t_par = np.dot(T, axis) * axis
    t_perp = T - t_par
    # integral of the rotating tangent over the arc
    c_new = c + t_par * ds + (np.sin(ang) / omega) * t_perp \
        + ((1.0 - np.cos(ang)) / omega) * np.cross(axis, t_perp)
    return c_new, frame @ R


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _validate(spec: CreatureSpec, bands):
    L = spec.lengths
    r = spec.radii
    if np.any(L <= 2.0 * r):
        raise InvalidCreatureError("segment length must exceed twice its radius")
    if np.any(r <= 0) or np.any(L <= 0):
        raise InvalidCreatureError("lengths and radii must be positive")
    if np.any(np.abs(spec.thetas) > THETA_MAX + 1e-12):
        raise InvalidCreatureError("hinge angle exceeds the 2*pi/5 limit")
    for j, (a, e, b) in enumerate(bands):
        r_max = max(r[j], r[j + 1])
        if 2.0 * b < 1.05 * abs(spec.thetas[j]) * r_max:
            raise InvalidCreatureError("joint %d bends too sharply for its blend band" % j)


def generate_creature_mesh(spec: CreatureSpec, ring_verts=14, cap_rings=4, ds_factor=0.4):
    """Watertight genus-0 triangle mesh of a posed creature, centered at its
    area-weighted surface centroid."""
    L = np.asarray(spec.lengths, dtype=np.float64)
    r = np.asarray(spec.radii, dtype=np.float64)
    th = np.asarray(spec.thetas, dtype=np.float64)
    n_seg = len(L)
    total = float(L.sum())
    joints = np.cumsum(L)[:-1]

    # blend band half-widths: wide enough for the inner fiber, short enough to
    # stay inside the adjacent segments
    bands = []
    for j in range(n_seg - 1):
        b = min(max(r[j], r[j + 1]), 0.5 * min(L[j], L[j + 1]) * 0.95)
        bands.append((joints[j] - b, joints[j] + b, b))
    _validate(spec, bands)

    ds_target = ds_factor * float(r.min())
    n_st = max(32, int(np.ceil(total / ds_target)) + 1)
    s_vals = np.linspace(0.0, total, n_st)

    # segment index per station (for the radius profile)
    seg_edges = np.concatenate([[0.0], joints, [total]])

    def radius_at(s):
        i = min(np.searchsorted(seg_edges, s, side="right") - 1, n_seg - 1)
        rho = r[i]
        for j, (a, e, b) in enumerate(bands):
            if a <= s <= e:
                u = (s - a) / (e - a)
                rho = r[j] + (r[j + 1] - r[j]) * _smoothstep(u)
        return rho

    # walk the spine, freezing each hinge axis in world coordinates when the
    # band is entered so every bend is an exact circular arc
    centers = np.zeros((n_st, 3))
    frames = np.zeros((n_st, 3, 3))
    c = np.zeros(3)
    frame = np.eye(3)            # rows: T, N1, N2
    frozen_axes = [None] * len(bands)
    centers[0], frames[0] = c, frame
    for k in range(1, n_st):
        s0, s1 = s_vals[k - 1], s_vals[k]
        # split the step at band boundaries
        cuts = [s0, s1]
        for a, e, b in bands:
            for edge in (a, e):
                if s0 < edge < s1:
                    cuts.append(edge)
        cuts = sorted(set(cuts))
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            mid_s = 0.5 * (lo + hi)
            omega = 0.0
            axis = None
            for j, (a, e, b) in enumerate(bands):
                if a <= mid_s <= e and th[j] != 0.0:
                    if frozen_axes[j] is None:
                        psi = spec.topology.hinge_psi[j]
                        frozen_axes[j] = np.cos(psi) * frame[1] + np.sin(psi) * frame[2]
                    axis = frozen_axes[j]
                    omega = th[j] / (2.0 * b)
                    break
            if omega == 0.0:
                c = c + frame[0] * (hi - lo)
            else:
                c, frame = _arc_advance(c, frame, axis, omega, hi - lo)
        centers[k], frames[k] = c, frame

    rhos = np.array([radius_at(s) for s in s_vals])

    # rings: start-cap (pole first), tube stations, end-cap (pole last)
    m = ring_verts
    ang = 2.0 * np.pi * np.arange(m) / m
    cos_a, sin_a = np.cos(ang), np.sin(ang)

    def ring(center, frame_, rho):
        return center + rho * (np.outer(cos_a, frame_[1]) + np.outer(sin_a, frame_[2]))

    verts = []
    rings = []
    T0, Te = frames[0][0], frames[-1][0]
    pole_start = centers[0] - r[0] * T0
    pole_end = centers[-1] + r[-1] * Te
    verts.append(pole_start)
    for i in range(1, cap_rings):
        g = 0.5 * np.pi * i / cap_rings
        cidx = centers[0] - r[0] * np.cos(g) * T0
        rings.append(len(verts))
        verts.extend(ring(cidx, frames[0], r[0] * np.sin(g)))
    for k in range(n_st):
        rings.append(len(verts))
        verts.extend(ring(centers[k], frames[k], rhos[k]))
    for i in range(cap_rings - 1, 0, -1):
        g = 0.5 * np.pi * i / cap_rings
        cidx = centers[-1] + r[-1] * np.cos(g) * Te
        rings.append(len(verts))
        verts.extend(ring(cidx, frames[-1], r[-1] * np.sin(g)))
    end_pole_idx = len(verts)
    verts.append(pole_end)
    verts = np.asarray(verts)

    faces = []
    first = rings[0]
    for v in range(m):
        faces.append([0, first + (v + 1) % m, first + v])
    for ra, rb in zip(rings[:-1], rings[1:]):
        for v in range(m):
            v2 = (v + 1) % m
            faces.append([ra + v, ra + v2, rb + v])
            faces.append([ra + v2, rb + v2, rb + v])
    last = rings[-1]
    for v in range(m):
        faces.append([end_pole_idx, last + v, last + (v + 1) % m])
    faces = np.asarray(faces, dtype=np.int64)

    _check_watertight(verts, faces)
    _check_no_self_intersection(s_vals, centers, rhos)

    centroid = area_weighted_centroid(verts, faces)
    return Mesh(verts=verts - centroid, faces=faces)


def _check_watertight(verts, faces):
    V, F = len(verts), len(faces)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    if not np.all(counts == 2):
        raise InvalidCreatureError("mesh is not watertight (boundary or nonmanifold edge)")
    E = len(uniq)
    if V - E + F != 2:
        raise InvalidCreatureError("Euler characteristic %d != 2" % (V - E + F))
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    if np.any(areas < 1e-12):
        raise InvalidCreatureError("degenerate face (area < 1e-12)")


def _check_no_self_intersection(s_vals, centers, rhos):
    """Sphere-chain guard: stations far apart along the spine must stay farther
    apart in space than the sum of their radii."""
    ds = s_vals[:, None] - s_vals[None, :]
    rsum = rhos[:, None] + rhos[None, :]
    far = np.abs(ds) > 2.5 * rsum
    if not far.any():
        return
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    bad = far & (d2 < (1.02 * rsum) ** 2)
    if bad.any():
        raise InvalidCreatureError("creature self-intersects")


def area_weighted_centroid(verts, faces):
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    centroids = (v0 + v1 + v2) / 3.0
    return (areas[:, None] * centroids).sum(axis=0) / areas.sum()


def mesh_surface_area(mesh: Mesh):
    v0, v1, v2 = (mesh.verts[mesh.faces[:, i]] for i in range(3))
    return float(0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1).sum())


# ------------------------------------------------------------------ sampling

def sample_pointcloud(mesh: Mesh, n_points, rng):
    """Uniform area-weighted surface samples: triangles by area, then uniform
    barycentric coordinates within each."""
    v0, v1, v2 = (mesh.verts[mesh.faces[:, i]] for i in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    tri = np.searchsorted(cdf, rng.uniform(size=n_points))
    u, v = rng.uniform(size=n_points), rng.uniform(size=n_points)
    su = np.sqrt(u)
    b0, b1, b2 = 1.0 - su, su * (1.0 - v), su * v
    return (b0[:, None] * v0[tri] + b1[:, None] * v1[tri] + b2[:, None] * v2[tri])


def sample_creature_spec(rng, length_range=(0.5, 1.0), radius_range=(0.07, 0.13),
                         theta_max=THETA_MAX, topology=None):
    topology = topology or ChainTopology()
    n = topology.n_segments
    return CreatureSpec(
        lengths=rng.uniform(*length_range, size=n),
        radii=rng.uniform(*radius_range, size=n),
        thetas=rng.uniform(-theta_max, theta_max, size=n - 1),
        topology=topology,
    )


# ---------------------------------------------------------------- PLY format

def write_ply(path, verts, faces=None):
    verts = np.asarray(verts, dtype=np.float64)
    lines = ["ply", "format ascii 1.0",
             "element vertex %d" % len(verts),
             "property double x", "property double y", "property double z"]
    if faces is not None:
        lines += ["element face %d" % len(faces),
                  "property list uchar int vertex_indices"]
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for v in verts:
            f.write("%.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
        if faces is not None:
            for face in faces:
                f.write("3 %d %d %d\n" % (face[0], face[1], face[2]))


def read_ply(path):
    """Returns (verts, faces) with faces None for plain point clouds."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError("%s is not a PLY file" % path)
        n_vert = n_face = 0
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unterminated PLY header in %s" % path)
            tok = line.split()
            if tok[:2] == ["element", "vertex"]:
                n_vert = int(tok[2])
            elif tok[:2] == ["element", "face"]:
                n_face = int(tok[2])
            elif tok[0] == "end_header":
                break
        verts = np.array([[float(x) for x in f.readline().split()[:3]]
                          for _ in range(n_vert)])
        faces = None
        if n_face:
            faces = np.array([[int(x) for x in f.readline().split()[1:4]]
                              for _ in range(n_face)], dtype=np.int64)
    return verts, faces


# ------------------------------------------------------------------- dataset

@dataclass
class DatasetConfig:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 40
    n_test: int = 200
    n_points: int = 256
    n_eigs: int = 10
    length_range: tuple = (0.5, 1.0)
    radius_range: tuple = (0.07, 0.13)
    theta_max: float = THETA_MAX
    ring_verts: int = 14
    cap_rings: int = 4
    ds_factor: float = 0.4
    rotation_axis: tuple = (0.0, 0.0, 1.0)
    spectrum_backend: str = "mesh"
    knn_k: int = spectral.DEFAULT_KNN


@dataclass
class ShapeRecord:
    id: str
    split: str
    beta: np.ndarray
    theta: np.ndarray
    cloud: np.ndarray            # (n_points, 3), after global scaling
    spectrum: np.ndarray         # first n_eigs nonzero eigenvalues
    mesh_path: str = ""
    cloud_path: str = ""


def _build_one(index, split, cfg: DatasetConfig, child_seed):
    rng = np.random.default_rng(child_seed)
    for _ in range(64):
        spec = sample_creature_spec(rng, cfg.length_range, cfg.radius_range, cfg.theta_max)
        try:
            mesh = generate_creature_mesh(spec, cfg.ring_verts, cfg.cap_rings, cfg.ds_factor)
            return spec, mesh, rng
        except InvalidCreatureError:
            continue
    raise InvalidCreatureError("could not sample a valid creature in 64 tries")


def build_dataset(cfg: DatasetConfig, out_dir, jobs=1, force=False, cache_dir=None):
    """Generate the full corpus: meshes, scaled point clouds, spectra, manifest.

    Idempotent: an existing manifest with the same config hash is reused unless
    ``force``.  Returns the output directory.
    """
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    meta_path = os.path.join(out_dir, "meta.json")
    cfg_dict = asdict(cfg)
    if os.path.exists(meta_path) and not force:
        with open(meta_path) as f:
            meta = json.load(f)
        if meta.get("config") == json.loads(json.dumps(cfg_dict)):
            log.info("dataset at %s is up to date", out_dir)
            return out_dir
    os.makedirs(os.path.join(out_dir, "meshes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
    cache = spectral.SpectrumCache(cache_dir or os.path.join(out_dir, "spectra"))

    splits = [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)]
    root_ss = np.random.SeedSequence(cfg.seed)
    split_seeds = dict(zip([s for s, _ in splits], root_ss.spawn(len(splits))))

    jobs_list = []
    for split, count in splits:
        children = split_seeds[split].spawn(count)
        for i in range(count):
            jobs_list.append((split, i, children[i]))

    def gen(job):
        split, i, child = job
        spec, mesh, rng = _build_one(i, split, cfg, child)
        return split, i, spec, mesh, rng

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            built = list(ex.map(gen, jobs_list))
    else:
        built = [gen(j) for j in jobs_list]

    # one global scale: the largest bounding-box edge over the corpus becomes 1
    max_edge = 0.0
    for _, _, _, mesh, _ in built:
        ext = mesh.verts.max(axis=0) - mesh.verts.min(axis=0)
        max_edge = max(max_edge, float(ext.max()))
    scale = 1.0 / max_edge

    records = []
    for split, i, spec, mesh, rng in built:
        mesh.verts = mesh.verts * scale
        cloud = sample_pointcloud(mesh, cfg.n_points, rng)
        rec = {"split": split, "index": i, "spec": spec, "mesh": mesh, "cloud": cloud}
        records.append(rec)

    def spectrum_for(rec):
        mesh = rec["mesh"]
        if cfg.spectrum_backend == "mesh":
            geometry = (mesh.verts, mesh.faces)
        else:
            geometry = rec["cloud"]
        return cache.get_or_compute(geometry, cfg.n_eigs, backend=cfg.spectrum_backend,
                                    k=cfg.knn_k)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            spectra = list(ex.map(spectrum_for, records))
    else:
        spectra = [spectrum_for(r) for r in records]

    with open(manifest_path, "w") as mf:
        for rec, spec_vals in zip(records, spectra):
            sid = "%s_%05d" % (rec["split"], rec["index"])
            mesh_rel = os.path.join("meshes", sid + ".ply")
            cloud_rel = os.path.join("clouds", sid + ".ply")
            write_ply(os.path.join(out_dir, mesh_rel), rec["mesh"].verts, rec["mesh"].faces)
            write_ply(os.path.join(out_dir, cloud_rel), rec["cloud"])
            mf.write(json.dumps({
                "id": sid,
                "split": rec["split"],
                "beta": rec["spec"].beta.tolist(),
                "theta": rec["spec"].theta.tolist(),
                "mesh": mesh_rel,
                "cloud": cloud_rel,
                "spectrum": spec_vals.values.tolist(),
            }, sort_keys=True) + "\n")

    with open(meta_path, "w") as f:
        json.dump({"config": cfg_dict, "scale": scale,
                   "counts": {s: c for s, c in splits}}, f, indent=1, sort_keys=True)
    log.info("built dataset at %s (scale %.6g)", out_dir, scale)
    return out_dir


class Dataset:
    """Loaded corpus: clouds, spectra and labels in memory, meshes lazy."""

    def __init__(self, root):
        self.root = root
        with open(os.path.join(root, "meta.json")) as f:
            self.meta = json.load(f)
        self.records: list[ShapeRecord] = []
        with open(os.path.join(root, "manifest.jsonl")) as f:
            for line in f:
                d = json.loads(line)
                cloud, _ = read_ply(os.path.join(root, d["cloud"]))
                self.records.append(ShapeRecord(
                    id=d["id"], split=d["split"],
                    beta=np.asarray(d["beta"]), theta=np.asarray(d["theta"]),
                    cloud=cloud, spectrum=np.asarray(d["spectrum"]),
                    mesh_path=os.path.join(root, d["mesh"]),
                    cloud_path=os.path.join(root, d["cloud"]),
                ))

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def clouds(self, name):
        return np.stack([r.cloud for r in self.split(name)])

    def spectra(self, name):
        return np.stack([r.spectrum for r in self.split(name)])

    def load_mesh(self, rec: ShapeRecord) -> Mesh:
        verts, faces = read_ply(rec.mesh_path)
        return Mesh(verts=verts, faces=faces)

    @property
    def rotation_axis(self):
        return np.asarray(self.meta["config"]["rotation_axis"], dtype=np.float64)
