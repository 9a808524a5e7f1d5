"""Deterministic synthetic volumes with analytic ground truth.

Shapes are genus-0 solids described by signed distance functions in the
normalized [-1, 1]^3 frame: ellipsoids, smooth unions of chained spheres,
and superellipsoids.  Each sample rasterizes the solid to a voxel grid,
adds optional intensity noise, and carries surface points plus unit
normals taken from the distance gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .ndtensor import Tensor

FOREGROUND = 0.8
VXL_MAGIC = b"VOX2SURF-VOL\x00\x00\x00\x00"

_KINDS = ("ellipsoid", "blob", "superellipsoid")


@dataclass(frozen=True)
class ShapeSpec:
    """Parameters of one analytic solid.

    radii and exponent describe ellipsoids and superellipsoids; centers,
    sphere_radii and blend describe a smooth chain of spheres.  center and
    rotation pose the local shape in the world frame (rotation is a row
    major 3x3 isometry, world = local @ rotation + center).
    """

    kind: str
    radii: tuple = (0.6, 0.6, 0.6)
    exponent: float = 4.0
    centers: tuple = ()
    sphere_radii: tuple = ()
    blend: float = 0.12
    center: tuple = (0.0, 0.0, 0.0)
    rotation: tuple | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if len(self.center) != 3:
            raise ValueError("center must have 3 components")
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=np.float64)
            if rot.size != 9:
                raise ValueError("rotation must hold 9 entries, row major")
            rot = rot.reshape(3, 3)
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
                raise ValueError("rotation must be orthonormal")
        if self.kind in ("ellipsoid", "superellipsoid"):
            radii = np.asarray(self.radii, dtype=np.float64)
            if radii.shape != (3,) or not np.all(radii > 0):
                raise ValueError("radii must be 3 positive numbers")
        if self.kind == "superellipsoid":
            if not 2.0 <= self.exponent <= 8.0:
                raise ValueError("exponent must lie in [2, 8]")
        if self.kind == "blob":
            centers = np.asarray(self.centers, dtype=np.float64)
            radii = np.asarray(self.sphere_radii, dtype=np.float64)
            if centers.ndim != 2 or centers.shape[1] != 3:
                raise ValueError("blob centers must be [n, 3]")
            if not 2 <= centers.shape[0] <= 4:
                raise ValueError("blob needs 2 to 4 spheres")
            if radii.shape != (centers.shape[0],) or not np.all(radii > 0):
                raise ValueError("sphere_radii must match centers and be positive")
            if self.blend <= 0:
                raise ValueError("blend width must be positive")


@dataclass(frozen=True)
class SyntheticSample:
    """One generated volume with its analytic ground truth."""

    volume: Tensor
    labels: Tensor
    gt_points: Tensor
    gt_normals: Tensor
    seed: int


# -- pose -------------------------------------------------------------------


def _rotation_matrix(spec: ShapeSpec) -> np.ndarray | None:
    if spec.rotation is None:
        return None
    return np.asarray(spec.rotation, dtype=np.float64).reshape(3, 3)


def _to_local(spec: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    q = pts - np.asarray(spec.center, dtype=np.float64)
    rot = _rotation_matrix(spec)
    if rot is not None:
        q = q @ rot.T
    return q


def _to_world(spec: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    rot = _rotation_matrix(spec)
    q = pts @ rot if rot is not None else pts
    return q + np.asarray(spec.center, dtype=np.float64)


# -- per-kind distance solvers ----------------------------------------------


def _nudge_zeros(q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Push exactly-axial coordinates off zero so closest-point solves stay
    on the monotone branch.  The induced distance error is below eps."""
    return np.where(np.abs(q) < eps, eps, q)


def _ellipsoid_foot(q: np.ndarray, radii: np.ndarray):
    """Closest surface point on sum((x/a)^2) = 1 via bisection on the
    Lagrange multiplier; returns (foot, signed distance)."""
    a2 = radii ** 2
    qs = _nudge_zeros(q)
    inside = ((qs / radii) ** 2).sum(axis=1) < 1.0
    lo = np.where(inside, -a2.min() * (1.0 - 1e-12), 0.0)
    hi = np.where(inside, 0.0, np.sqrt(((qs * radii) ** 2).sum(axis=1)) + 1.0)
    scaled = qs * radii
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        val = (scaled / (a2 + mid[:, None])) ** 2
        above = val.sum(axis=1) > 1.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    lam = 0.5 * (lo + hi)
    foot = qs * a2 / (a2 + lam[:, None])
    dist = np.sqrt(((qs - foot) ** 2).sum(axis=1))
    return foot, np.where(inside, -dist, dist)


def _super_level(q: np.ndarray, radii: np.ndarray, e: float) -> np.ndarray:
    return (np.abs(q / radii) ** e).sum(axis=1) - 1.0


def _super_grad(q: np.ndarray, radii: np.ndarray, e: float) -> np.ndarray:
    w = radii ** -e
    return e * w * np.abs(q) ** (e - 1.0) * np.sign(q)


def _level_project(x: np.ndarray, radii: np.ndarray, e: float, rounds: int = 4):
    """Push points onto the zero level set along the level gradient."""
    for _ in range(rounds):
        g = _super_grad(x, radii, e)
        lvl = _super_level(x, radii, e)
        x = x - g * (lvl / np.maximum((g * g).sum(axis=1), 1e-300))[:, None]
    return x


def _shrink_coords(p: np.ndarray, mu: np.ndarray, w: np.ndarray, e: float):
    """Solve x + mu*e*w*|x|^(e-1)*sign(x) = p coordinatewise for mu >= 0.

    The left side is increasing and convex in |x|, so Newton from an
    upper-bound start decreases monotonically onto the unique root.
    """
    ap = np.abs(p)
    coef = mu[:, None] * e * w
    x = np.minimum(ap, (ap / np.maximum(coef, 1e-300)) ** (1.0 / (e - 1.0)))
    for _ in range(24):
        f = x + coef * x ** (e - 1.0) - ap
        fp = 1.0 + coef * (e - 1.0) * x ** (e - 2.0)
        x = np.maximum(x - f / fp, 0.0)
    return x * np.sign(p)


def _project_outside(p: np.ndarray, radii: np.ndarray, e: float) -> np.ndarray:
    """Exact projection of outside points onto the convex level-1 set.

    The multiplier equation is monotone: the level of the shrunk point
    decreases as mu grows, so bracket doubling plus bisection finds the
    unique global foot.  No basin ambiguity exists for convex bodies.
    """
    w = radii ** -e
    mu_lo = np.zeros(p.shape[0])
    mu_hi = np.full(p.shape[0], 1.0)
    for _ in range(120):
        lvl = _super_level(_shrink_coords(p, mu_hi, w, e), radii, e)
        open_ = lvl > 0.0
        if not open_.any():
            break
        mu_hi = np.where(open_, 2.0 * mu_hi, mu_hi)
    for _ in range(80):
        mid = 0.5 * (mu_lo + mu_hi)
        lvl = _super_level(_shrink_coords(p, mid, w, e), radii, e)
        above = lvl > 0.0
        mu_lo = np.where(above, mid, mu_lo)
        mu_hi = np.where(above, mu_hi, mid)
    return _shrink_coords(p, 0.5 * (mu_lo + mu_hi), w, e)


def _kkt_newton(p: np.ndarray, x0: np.ndarray, radii: np.ndarray, e: float):
    """Refine a foot candidate by Newton on the stationarity system."""
    n = p.shape[0]
    w = radii ** -e
    idx = np.arange(3)
    x = x0
    g = _super_grad(x, radii, e)
    mu = (((x - p) * g).sum(axis=1)) / np.maximum((g * g).sum(axis=1), 1e-300)
    for _ in range(25):
        g = _super_grad(x, radii, e)
        res = np.concatenate(
            [x - p + mu[:, None] * g, _super_level(x, radii, e)[:, None]], axis=1
        )
        hd = e * (e - 1.0) * w * np.abs(x) ** (e - 2.0)
        jac = np.zeros((n, 4, 4))
        jac[:, idx, idx] = 1.0 + mu[:, None] * hd + 1e-12
        jac[:, :3, 3] = g
        jac[:, 3, :3] = g
        jac[:, 3, 3] = 1e-12
        try:
            step = np.linalg.solve(jac, -res[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(
                jac.reshape(-1, 4), -res.reshape(-1, 1), rcond=None
            )[0].reshape(n, 4)
        norm = np.sqrt((step[:, :3] ** 2).sum(axis=1))
        scale = np.minimum(1.0, 0.25 * radii.min() / np.maximum(norm, 1e-300))
        x = x + step[:, :3] * scale[:, None]
        mu = mu + step[:, 3] * scale
    return _level_project(x, radii, e, rounds=12)


def _foot_inside(p: np.ndarray, radii: np.ndarray, e: float) -> np.ndarray:
    """Nearest boundary point for interior queries.

    Newton runs from two starts, a level-projection of the query and the
    exact ellipsoid foot, which between them cover round and boxy
    geometry anywhere near the surface.  A radial point backs up deep
    interior queries, where any closest point method turns ambiguous at
    the medial axis; every candidate sits on the surface, so the chosen
    distance is at worst a tight upper bound.
    """
    w = radii ** -e
    candidates = [
        _kkt_newton(p, _level_project(p.copy(), radii, e, rounds=8), radii, e),
        _kkt_newton(
            p, _level_project(_ellipsoid_foot(p, radii)[0], radii, e, rounds=8),
            radii, e,
        ),
    ]
    t = ((w * np.abs(p) ** e).sum(axis=1)) ** (-1.0 / e)
    foot = _level_project(p * t[:, None], radii, e, rounds=8)
    best = ((p - foot) ** 2).sum(axis=1)
    for cand in candidates:
        d = ((p - cand) ** 2).sum(axis=1)
        ok = np.isfinite(d) & (np.abs(_super_level(cand, radii, e)) <= 1e-9)
        take = ok & (d < best)
        foot = np.where(take[:, None], cand, foot)
        best = np.where(take, d, best)
    return foot


def _super_foot(q: np.ndarray, radii: np.ndarray, e: float):
    """Closest surface point on sum(|x/a|^e) = 1 and the signed distance."""
    qs = _nudge_zeros(q)
    outside = _super_level(qs, radii, e) > 0.0
    foot = np.empty_like(qs)
    if outside.any():
        foot[outside] = _project_outside(qs[outside], radii, e)
    if (~outside).any():
        foot[~outside] = _foot_inside(qs[~outside], radii, e)
    dist = np.sqrt(((qs - foot) ** 2).sum(axis=1))
    return foot, np.where(outside, dist, -dist)


def _blob_sdf(q: np.ndarray, centers: np.ndarray, radii: np.ndarray, k: float):
    """Chained quadratic smooth-min of exact sphere distances.  Outside the
    blend bands this equals the plain min, so the field is 1-Lipschitz."""
    d = np.sqrt(((q[:, None, :] - centers[None]) ** 2).sum(-1)) - radii[None]
    out = d[:, 0]
    for i in range(1, d.shape[1]):
        b = d[:, i]
        h = np.clip(0.5 + 0.5 * (b - out) / k, 0.0, 1.0)
        out = b + (out - b) * h - k * h * (1.0 - h)
    return out


# -- public field queries ----------------------------------------------------


def signed_distance(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    """Signed distance from each point to the shape surface, negative inside."""
    pts = np.asarray(points, dtype=np.float64)
    q = _to_local(spec, pts)
    if spec.kind == "ellipsoid":
        return _ellipsoid_foot(q, np.asarray(spec.radii, dtype=np.float64))[1]
    if spec.kind == "superellipsoid":
        return _super_foot(
            q, np.asarray(spec.radii, dtype=np.float64), float(spec.exponent)
        )[1]
    return _blob_sdf(
        q,
        np.asarray(spec.centers, dtype=np.float64),
        np.asarray(spec.sphere_radii, dtype=np.float64),
        float(spec.blend),
    )


def sdf_gradient(spec: ShapeSpec, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central difference gradient of the signed distance field."""
    pts = np.asarray(points, dtype=np.float64)
    grad = np.empty_like(pts)
    for ax in range(3):
        off = np.zeros(3)
        off[ax] = h
        grad[:, ax] = (signed_distance(spec, pts + off) - signed_distance(spec, pts - off)) / (2.0 * h)
    return grad


def surface_foot(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    """Project points onto the zero level set of the signed distance."""
    pts = np.asarray(points, dtype=np.float64)
    if spec.kind == "ellipsoid":
        foot = _ellipsoid_foot(
            _to_local(spec, pts), np.asarray(spec.radii, dtype=np.float64)
        )[0]
        return _to_world(spec, foot)
    if spec.kind == "superellipsoid":
        foot = _super_foot(
            _to_local(spec, pts),
            np.asarray(spec.radii, dtype=np.float64),
            float(spec.exponent),
        )[0]
        return _to_world(spec, foot)
    x = pts.copy()
    for _ in range(8):
        sd = signed_distance(spec, x)
        g = sdf_gradient(spec, x)
        g /= np.maximum(np.sqrt((g * g).sum(axis=1, keepdims=True)), 1e-300)
        x = x - g * sd[:, None]
    return x


# -- rasterization and sampling ---------------------------------------------


def voxel_centers(extent_d: int, extent_h: int, extent_w: int) -> np.ndarray:
    """Centers of a [D,H,W] grid in the normalized frame, as [D,H,W,3] xyz."""
    zs = -1.0 + (2.0 * np.arange(extent_d) + 1.0) / extent_d
    ys = -1.0 + (2.0 * np.arange(extent_h) + 1.0) / extent_h
    xs = -1.0 + (2.0 * np.arange(extent_w) + 1.0) / extent_w
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def _sample_surface(spec: ShapeSpec, count: int, rng) -> np.ndarray:
    """Rejection sample a thin shell around the surface, then project."""
    shell = 0.08
    got = []
    have = 0
    for _ in range(200):
        cand = rng.uniform(-1.0, 1.0, size=(4 * count, 3))
        keep = cand[np.abs(signed_distance(spec, cand)) < shell]
        if keep.shape[0]:
            got.append(keep)
            have += keep.shape[0]
        if have >= count:
            break
    else:
        raise RuntimeError("surface sampling failed to fill the point budget")
    pts = np.concatenate(got, axis=0)[:count]
    return surface_foot(spec, pts)


def generate(
    spec: ShapeSpec,
    extent: int,
    noise_sigma: float,
    seed: int,
    n_points: int = 4096,
) -> SyntheticSample:
    """Rasterize a shape to a volume and attach surface ground truth.

    Intensities are FOREGROUND * label plus optional Gaussian noise,
    clipped to [0, 1].  Surface points come from shell rejection plus
    projection; normals are the normalized distance gradient.
    """
    if extent < 2:
        raise ValueError("extent must be at least 2")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    if n_points < 1:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(seed)
    centers = voxel_centers(extent, extent, extent)
    sd = signed_distance(spec, centers.reshape(-1, 3)).reshape(extent, extent, extent)
    labels = (sd <= 0.0).astype(np.float64)
    vol = FOREGROUND * labels
    if noise_sigma > 0:
        vol = vol + rng.normal(0.0, noise_sigma, size=vol.shape)
    vol = np.clip(vol, 0.0, 1.0)
    pts = _sample_surface(spec, n_points, rng)
    grad = sdf_gradient(spec, pts)
    normals = grad / np.sqrt((grad * grad).sum(axis=1, keepdims=True))
    return SyntheticSample(
        volume=Tensor(vol[None]),
        labels=Tensor(labels),
        gt_points=Tensor(pts),
        gt_normals=Tensor(normals),
        seed=int(seed),
    )


# -- randomized specs and datasets ------------------------------------------


def random_rotation(rng) -> tuple:
    mat = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))
    return tuple(q.reshape(-1).tolist())


def random_blob_spec(rng, blend: float = 0.1) -> ShapeSpec:
    """Chain 2 to 4 overlapping spheres whose union stays genus 0.

    Consecutive spheres overlap solidly; non-consecutive spheres keep a
    gap wider than the blend band so no handle can form, and the whole
    chain stays inside the volume with margin.
    """
    for _ in range(200):
        count = int(rng.integers(2, 5))
        radii = [float(rng.uniform(0.22, 0.38))]
        centers = [np.zeros(3)]
        ok = True
        for _ in range(count - 1):
            r = float(rng.uniform(0.18, 0.32))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            gap = float(rng.uniform(0.55, 0.8)) * (radii[-1] + r)
            centers.append(centers[-1] + direction * gap)
            radii.append(r)
        centers = np.asarray(centers) - np.mean(centers, axis=0)
        for i in range(count):
            if np.abs(centers[i]).max() + radii[i] > 0.85:
                ok = False
        for i in range(count):
            for j in range(i + 2, count):
                dist = np.linalg.norm(centers[i] - centers[j])
                if dist < radii[i] + radii[j] + 2.0 * blend + 0.05:
                    ok = False
        if ok:
            return ShapeSpec(
                kind="blob",
                centers=tuple(map(tuple, centers.tolist())),
                sphere_radii=tuple(radii),
                blend=blend,
            )
    raise RuntimeError("could not draw a valid sphere chain")


def random_shape_spec(rng, kind: str) -> ShapeSpec:
    if kind == "ellipsoid":
        return ShapeSpec(
            kind="ellipsoid",
            radii=tuple(rng.uniform(0.35, 0.7, size=3).tolist()),
            center=tuple(rng.uniform(-0.12, 0.12, size=3).tolist()),
            rotation=random_rotation(rng),
        )
    if kind == "superellipsoid":
        return ShapeSpec(
            kind="superellipsoid",
            radii=tuple(rng.uniform(0.35, 0.6, size=3).tolist()),
            exponent=float(rng.uniform(2.5, 5.0)),
            center=tuple(rng.uniform(-0.12, 0.12, size=3).tolist()),
            rotation=random_rotation(rng),
        )
    if kind == "blob":
        return random_blob_spec(rng)
    raise ValueError(f"unknown shape kind {kind!r}")


def make_sample(
    index: int,
    split_seed: int,
    extent: int = 32,
    noise_sigma: float = 0.02,
    n_points: int = 4096,
    kinds: tuple = _KINDS,
) -> tuple[ShapeSpec, SyntheticSample]:
    """Build sample `index` of the dataset keyed by split_seed.

    Every random choice comes from a stream seeded by (split_seed, index),
    so samples can be built independently and in any order.
    """
    rng = np.random.default_rng((split_seed, index))
    spec = random_shape_spec(rng, kinds[index % len(kinds)])
    sample_seed = int(rng.integers(0, 2**31 - 1))
    return spec, generate(spec, extent, noise_sigma, sample_seed, n_points)


def split_indices(count: int, split_seed: int, ratio: float = 0.5):
    """Permute 0..count-1 and cut into (train, test) index lists."""
    if count < 2:
        raise ValueError("need at least 2 samples to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    perm = np.random.default_rng(split_seed).permutation(count)
    n_train = int(round(count * ratio))
    return [int(j) for j in perm[:n_train]], [int(j) for j in perm[n_train:]]


def dataset(
    count: int,
    split_seed: int,
    ratio: float = 0.5,
    extent: int = 32,
    noise_sigma: float = 0.02,
    n_points: int = 4096,
    kinds: tuple = _KINDS,
):
    """Generate count samples and split them into train/test lists."""
    train_idx, test_idx = split_indices(count, split_seed, ratio)
    samples = [
        make_sample(i, split_seed, extent, noise_sigma, n_points, kinds)[1]
        for i in range(count)
    ]
    train = [samples[j] for j in train_idx]
    test = [samples[j] for j in test_idx]
    return train, test


# -- file formats ------------------------------------------------------------


def save_volume(path, array) -> None:
    """Write a [D,H,W] array as magic + JSON header + little-endian f32."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected a 3d array, got shape {arr.shape}")
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": "<f4", "order": "zyx"},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(VXL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:16] != VXL_MAGIC:
        raise ValueError("not a volume file: bad magic")
    (hlen,) = struct.unpack("<I", blob[16:20])
    header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    shape = tuple(header["shape"])
    payload = blob[20 + hlen :]
    expect = int(np.prod(shape)) * 4
    if len(payload) != expect:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {expect}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_points_obj(path, points, normals=None) -> None:
    """Write a point cloud (and optional normals) as OBJ v/vn lines."""
    pts = np.asarray(points, dtype=np.float64)
    lines = ["# point cloud"]
    for p in pts:
        lines.append("v %.9g %.9g %.9g" % (p[0], p[1], p[2]))
    if normals is not None:
        for n in np.asarray(normals, dtype=np.float64):
            lines.append("vn %.9g %.9g %.9g" % (n[0], n[1], n[2]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_points_obj(path):
    pts, nrm = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                pts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "vn":
                nrm.append([float(v) for v in parts[1:4]])
    points = np.asarray(pts, dtype=np.float64)
    normals = np.asarray(nrm, dtype=np.float64) if nrm else None
    return points, normals


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
