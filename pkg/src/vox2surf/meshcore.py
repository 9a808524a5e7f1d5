"""Watertight triangle meshes: icosphere construction, uniform and adaptive
unpooling, spherical convex-hull remeshing, and area-weighted surface sampling.

Every mesh carries two aligned coordinate sets: ``vertices`` (world frame,
differentiable) and ``sphere_coords`` (the vertex's point on the initial unit
sphere, plain numpy). The sphere parameterization is what makes adaptive
unpooling possible: after discarding candidates, connectivity is restored by
a convex hull over the surviving sphere points and transferred to the world
mesh, touching only vertex identity, never vertex values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor


@dataclass
class MeshState:
    """Vertices, faces, adjacency, features, and sphere parameterization."""

    vertices: Tensor                 # [V,3] world coordinates in [-1,1]^3
    sphere_coords: np.ndarray        # [V,3] unit vectors, index-aligned
    faces: np.ndarray                # [F,3] vertex index triples
    adjacency: list[np.ndarray]      # per-vertex sorted neighbor indices
    vertex_features: Tensor          # [V,F], F may be 0
    _edge_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted [E,2] pairs, lexicographic order."""
        key = "undirected"
        if key not in self._edge_cache:
            e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
            e = np.unique(e, axis=0)
            self._edge_cache[key] = e
        return self._edge_cache[key]

    def neighbor_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat (src, dst, counts): one entry per directed edge dst <- src."""
        key = "directed"
        if key not in self._edge_cache:
            dst = np.concatenate([np.full(len(a), v, dtype=np.intp)
                                  for v, a in enumerate(self.adjacency)]) \
                if self.num_vertices else np.zeros(0, dtype=np.intp)
            src = np.concatenate(self.adjacency).astype(np.intp) \
                if self.num_vertices else np.zeros(0, dtype=np.intp)
            counts = np.array([len(a) for a in self.adjacency], dtype=np.intp)
            self._edge_cache[key] = (src, dst, counts)
        return self._edge_cache[key]

    def mean_edge_length(self) -> float:
        e = self.edges()
        v = self.vertices.data
        return float(np.mean(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)))

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.edges()) + self.num_faces


def build_adjacency(faces: np.ndarray, num_vertices: int) -> list[np.ndarray]:
    neighbors = [set() for _ in range(num_vertices)]
    for a, b, c in faces:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    return [np.array(sorted(s), dtype=np.intp) for s in neighbors]


def make_mesh(vertices: Tensor, sphere_coords: np.ndarray, faces: np.ndarray,
              vertex_features: Tensor | None = None) -> MeshState:
    nv = vertices.shape[0]
    if vertex_features is None:
        vertex_features = Tensor(np.zeros((nv, 0)))
    return MeshState(vertices=vertices, sphere_coords=sphere_coords,
                     faces=np.asarray(faces, dtype=np.intp),
                     adjacency=build_adjacency(faces, nv),
                     vertex_features=vertex_features)


def is_watertight(faces: np.ndarray, num_vertices: int) -> bool:
    """Closed orientable 2-manifold test: every directed edge appears exactly
    once and pairs with its reverse."""
    if len(faces) == 0:
        return False
    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    keys = directed[:, 0] * num_vertices + directed[:, 1]
    if len(np.unique(keys)) != len(keys):
        return False
    rev = directed[:, 1] * num_vertices + directed[:, 0]
    return bool(np.all(np.isin(keys, rev)))


# -- icosphere ---------------------------------------------------------------

_PHI = (1.0 + math.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
])

_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.intp)


def icosphere(subdivisions: int) -> MeshState:
    """Unit icosphere: a regular icosahedron subdivided and reprojected.

    Vertex counts follow V' = V + E per level: 12, 42, 162, 642, 2562, 10242.
    """
    if not 0 <= subdivisions <= 5:
        raise ValueError(f"subdivisions must be in 0..5, got {subdivisions}")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        verts, faces = _subdivide_once(verts, faces)
    verts = np.ascontiguousarray(verts, dtype=nd.default_dtype())
    return make_mesh(Tensor(verts), verts.copy(), faces)


def _subdivide_once(verts: np.ndarray, faces: np.ndarray):
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    edges = np.unique(edges, axis=0)
    mid = verts[edges[:, 0]] + verts[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    edge_index = {(int(a), int(b)): len(verts) + i for i, (a, b) in enumerate(edges)}
    new_faces = np.empty((4 * len(faces), 3), dtype=np.intp)
    for fi, (a, b, c) in enumerate(faces):
        mab = edge_index[(min(a, b), max(a, b))]
        mbc = edge_index[(min(b, c), max(b, c))]
        mca = edge_index[(min(c, a), max(c, a))]
        new_faces[4 * fi:4 * fi + 4] = [
            [a, mab, mca], [b, mbc, mab], [c, mca, mbc], [mab, mbc, mca]]
    return np.vstack([verts, mid]), new_faces


# -- unpooling ---------------------------------------------------------------


@dataclass
class UnpoolOutcome:
    """Candidate bookkeeping for one unpool step.

    Candidates occupy vertex indices [parent_count, parent_count + n); each
    carries the undirected parent edge it was spawned on. ``displacement``
    holds the shortest distance from the (possibly deformed) candidate to its
    parent edge; it is zero at creation and recomputed by adaptive unpooling.
    """

    mesh: MeshState
    kept_mask: np.ndarray        # [n] bool
    parent_edges: np.ndarray     # [n,2] parent vertex indices
    displacement: np.ndarray     # [n] lengths in the normalized frame
    parent_count: int


def uniform_unpool(mesh: MeshState) -> UnpoolOutcome:
    """Edge-midpoint subdivision: one candidate per edge, 1-to-4 face split.

    Candidate world coordinates are tape-connected midpoints of their parents;
    sphere coordinates are renormalized midpoints; features average the edge
    endpoints.
    """
    edges = mesh.edges()
    nv = mesh.num_vertices
    cand_world = (nd.gather_rows(mesh.vertices, edges[:, 0]) +
                  nd.gather_rows(mesh.vertices, edges[:, 1])) * 0.5
    vertices = nd.concat([mesh.vertices, cand_world], axis=0)

    s_mid = mesh.sphere_coords[edges[:, 0]] + mesh.sphere_coords[edges[:, 1]]
    s_mid /= np.linalg.norm(s_mid, axis=1, keepdims=True)
    sphere = np.vstack([mesh.sphere_coords, s_mid])

    if mesh.vertex_features.shape[1] > 0:
        f_mid = (nd.gather_rows(mesh.vertex_features, edges[:, 0]) +
                 nd.gather_rows(mesh.vertex_features, edges[:, 1])) * 0.5
        features = nd.concat([mesh.vertex_features, f_mid], axis=0)
    else:
        features = Tensor(np.zeros((nv + len(edges), 0)))

    edge_index = {(int(a), int(b)): nv + i for i, (a, b) in enumerate(edges)}
    faces = np.empty((4 * mesh.num_faces, 3), dtype=np.intp)
    for fi, (a, b, c) in enumerate(mesh.faces):
        mab = edge_index[(min(a, b), max(a, b))]
        mbc = edge_index[(min(b, c), max(b, c))]
        mca = edge_index[(min(c, a), max(c, a))]
        faces[4 * fi:4 * fi + 4] = [
            [a, mab, mca], [b, mbc, mab], [c, mca, mbc], [mab, mbc, mca]]

    out_mesh = MeshState(vertices=vertices, sphere_coords=sphere, faces=faces,
                         adjacency=build_adjacency(faces, nv + len(edges)),
                         vertex_features=features)
    return UnpoolOutcome(mesh=out_mesh,
                         kept_mask=np.ones(len(edges), dtype=bool),
                         parent_edges=edges.copy(),
                         displacement=np.zeros(len(edges)),
                         parent_count=nv)


def point_segment_distances(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shortest Euclidean distance from each point to its segment [a,b]."""
    ab = b - a
    denom = np.sum(ab * ab, axis=1)
    t = np.where(denom > 0.0, np.sum((p - a) * ab, axis=1) / np.maximum(denom, 1e-300), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(p - proj, axis=1)


def candidate_displacements(deformed: MeshState, outcome: UnpoolOutcome) -> np.ndarray:
    v = deformed.vertices.data
    cand = v[outcome.parent_count:]
    a = v[outcome.parent_edges[:, 0]]
    b = v[outcome.parent_edges[:, 1]]
    return point_segment_distances(cand, a, b)


def adaptive_unpool(deformed: MeshState, outcome: UnpoolOutcome,
                    threshold: float) -> MeshState:
    """Discard candidates that stayed within ``threshold`` of their parent edge.

    The keep test is ``displacement >= threshold`` so that threshold 0
    degenerates exactly to uniform unpooling. Selection acts on vertex
    identity only: surviving vertices keep their tape-connected coordinates
    and features, and connectivity is rebuilt by a convex hull over the
    surviving sphere points.
    """
    if threshold < 0.0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    disp = candidate_displacements(deformed, outcome)
    kept = disp >= threshold
    outcome.displacement = disp
    outcome.kept_mask = kept

    keep_idx = np.concatenate([
        np.arange(outcome.parent_count, dtype=np.intp),
        outcome.parent_count + np.flatnonzero(kept).astype(np.intp)])
    assert len(keep_idx) >= outcome.parent_count, "parent vertices must survive"

    vertices = nd.gather_rows(deformed.vertices, keep_idx)
    features = (nd.gather_rows(deformed.vertex_features, keep_idx)
                if deformed.vertex_features.shape[1] > 0
                else Tensor(np.zeros((len(keep_idx), 0))))
    sphere = deformed.sphere_coords[keep_idx]
    faces = spherical_remesh(sphere)
    return MeshState(vertices=vertices, sphere_coords=sphere, faces=faces,
                     adjacency=build_adjacency(faces, len(keep_idx)),
                     vertex_features=features)


# -- spherical convex-hull remesh -------------------------------------------

_HULL_VISIBLE_EPS = 1e-14
_HULL_JITTER = 1e-12


def _index_jitter(n: int) -> np.ndarray:
    # deterministic per-index pseudo-noise in [-0.5, 0.5); breaks co-spherical
    # ties without any RNG state
    i = np.arange(n, dtype=np.float64)[:, None]
    freq = np.array([[12.9898, 78.233, 37.719]])
    return np.modf(np.sin((i + 1.0) * freq) * 43758.5453)[0] - 0.5


def spherical_remesh(points: np.ndarray) -> np.ndarray:
    """Faces of the 3D convex hull of unit vectors, outward oriented.

    Duplicate points within 1e-9 are removed before hulling (an error if
    fewer than 4 distinct points remain); output faces index the original
    array. Co-spherical degeneracies are resolved by a deterministic
    index-keyed jitter, so identical inputs always triangulate identically.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected [N,3] points, got {points.shape}")
    keys = np.round(points / 1e-9).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    if len(first) < 4:
        raise ValueError(f"degenerate input: only {len(first)} distinct points")
    survivors = np.sort(first)
    work = points[survivors] + _HULL_JITTER * _index_jitter(len(survivors))
    faces_local = _incremental_hull(work)
    faces = survivors[faces_local]
    # orient outward on the sphere
    centroid = points[survivors].mean(axis=0)
    tri = points[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1) - centroid) < 0.0
    faces[flip] = faces[flip][:, ::-1]
    return faces.astype(np.intp)


def _initial_tetrahedron(pts: np.ndarray) -> list[int]:
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    i0 = int(order[0])
    d = np.linalg.norm(pts - pts[i0], axis=1)
    i1 = int(np.argmax(d))
    if d[i1] < 1e-12:
        raise ValueError("degenerate input: all points coincide")
    u = pts[i1] - pts[i0]
    cr = np.cross(np.broadcast_to(u, pts.shape), pts - pts[i0])
    a = np.linalg.norm(cr, axis=1)
    i2 = int(np.argmax(a))
    if a[i2] < 1e-12:
        raise ValueError("degenerate input: all points collinear")
    n = np.cross(u, pts[i2] - pts[i0])
    h = np.abs((pts - pts[i0]) @ n) / np.linalg.norm(n)
    i3 = int(np.argmax(h))
    if h[i3] < 1e-12:
        raise ValueError("degenerate input: all points coplanar")
    return [i0, i1, i2, i3]


class _HullState:
    """Growing facet store with flat buffers so visibility tests stay one
    matvec per insertion instead of a per-step list-to-array conversion."""

    __slots__ = ("pts", "pts_l", "faces", "normals", "offsets", "alive",
                 "count", "live", "edge_face")

    def __init__(self, pts):
        self.pts = pts
        self.pts_l = pts.tolist()
        cap = 16
        self.faces: list[tuple[int, int, int]] = []
        self.normals = np.empty((cap, 3))
        self.offsets = np.empty(cap)
        self.alive = np.zeros(cap, dtype=bool)
        self.count = 0
        self.live = 0
        self.edge_face: dict[tuple[int, int], int] = {}

    def _grow(self) -> None:
        cap = 2 * len(self.offsets)
        normals = np.empty((cap, 3))
        offsets = np.empty(cap)
        alive = np.zeros(cap, dtype=bool)
        normals[:self.count] = self.normals[:self.count]
        offsets[:self.count] = self.offsets[:self.count]
        alive[:self.count] = self.alive[:self.count]
        self.normals, self.offsets, self.alive = normals, offsets, alive

    def add_face(self, a: int, b: int, c: int) -> None:
        pa = self.pts_l[a]
        pb = self.pts_l[b]
        pc = self.pts_l[c]
        u0, u1, u2 = pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]
        v0, v1, v2 = pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]
        n0 = u1 * v2 - u2 * v1
        n1 = u2 * v0 - u0 * v2
        n2 = u0 * v1 - u1 * v0
        idx = self.count
        if idx == len(self.offsets):
            self._grow()
        self.faces.append((a, b, c))
        self.normals[idx, 0] = n0
        self.normals[idx, 1] = n1
        self.normals[idx, 2] = n2
        self.offsets[idx] = n0 * pa[0] + n1 * pa[1] + n2 * pa[2]
        self.alive[idx] = True
        self.count = idx + 1
        self.live += 1
        self.edge_face[(a, b)] = idx
        self.edge_face[(b, c)] = idx
        self.edge_face[(c, a)] = idx

    def kill_face(self, idx: int) -> None:
        self.alive[idx] = False
        self.live -= 1
        a, b, c = self.faces[idx]
        for e in ((a, b), (b, c), (c, a)):
            if self.edge_face.get(e) == idx:
                del self.edge_face[e]


def _incremental_hull(pts: np.ndarray) -> np.ndarray:
    """Incremental insertion with visible-facet repair.

    Points are inserted in index order; each insertion removes the facets the
    point can see and rebuilds a cone from the horizon loop. Assumes general
    position (the caller jitters) and points in convex position or interior.
    """
    n = len(pts)
    tet = _initial_tetrahedron(pts)
    interior = pts[tet].mean(axis=0)
    state = _HullState(pts)
    t0, t1, t2, t3 = tet
    for tri in ((t0, t1, t2), (t0, t3, t1), (t0, t2, t3), (t1, t3, t2)):
        a, b, c = tri
        nrm = np.cross(pts[b] - pts[a], pts[c] - pts[a])
        if nrm @ (pts[a] - interior) < 0.0:
            a, b, c = a, c, b
        state.add_face(a, b, c)

    in_tet = set(tet)
    for pi in range(n):
        if pi in in_tet:
            continue
        c = state.count
        dist = state.normals[:c] @ pts[pi] - state.offsets[:c]
        visible = np.flatnonzero(state.alive[:c] & (dist > _HULL_VISIBLE_EPS))
        if len(visible) == 0:
            continue  # interior point; cannot arise for strictly convex inputs
        visible_set = set(int(v) for v in visible)
        horizon: list[tuple[int, int]] = []
        for fi in visible:
            a, b, c = state.faces[fi]
            for e in ((a, b), (b, c), (c, a)):
                nb = state.edge_face.get((e[1], e[0]))
                if nb is None or nb not in visible_set:
                    horizon.append(e)
        for fi in visible:
            state.kill_face(int(fi))
        for a, b in horizon:
            state.add_face(a, b, pi)

    out = np.array([f for f, ok in zip(state.faces, state.alive[:state.count])
                    if ok], dtype=np.intp)
    used = np.unique(out)
    if len(used) != n:
        raise RuntimeError(
            f"hull dropped {n - len(used)} point(s); input not in convex position")
    return out


# -- surface sampling --------------------------------------------------------


def draw_surface_points(mesh: MeshState, count: int, rng: np.random.Generator):
    """Area-weighted face choice plus uniform barycentric weights.

    Returns (face_idx [count], bary [count,3]); the draw is a constant of the
    sample, the differentiable path runs through ``surface_points_at``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if mesh.num_faces < 1:
        raise ValueError("mesh has no faces")
    v = mesh.vertices.data
    tri = v[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = float(areas.sum())
    if total <= 0.0:
        raise ValueError("zero-area mesh cannot be sampled")
    face_idx = rng.choice(mesh.num_faces, size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face_idx, bary


def surface_points_at(mesh: MeshState, face_idx: np.ndarray,
                      bary: np.ndarray) -> Tensor:
    """Differentiable barycentric combination of the chosen face corners."""
    corners = mesh.faces[face_idx]
    out = None
    for k in range(3):
        w = np.repeat(bary[:, k:k + 1], 3, axis=1)
        term = nd.gather_rows(mesh.vertices, corners[:, k]) * Tensor(w)
        out = term if out is None else out + term
    return out


def surface_sample(mesh: MeshState, count: int, rng: np.random.Generator) -> Tensor:
    """Sample points on the mesh, faces weighted by area, differentiable
    w.r.t. vertex positions."""
    face_idx, bary = draw_surface_points(mesh, count, rng)
    return surface_points_at(mesh, face_idx, bary)


# -- OBJ export --------------------------------------------------------------


def save_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Wavefront OBJ: normalized-frame vertices, 1-based CCW faces."""
    with open(path, "w") as f:
        for x, y, z in np.asarray(vertices):
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in np.asarray(faces):
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts), np.array(faces, dtype=np.intp)
