"""Evaluation utilities: mesh voxelization, IoU, and eval-mode Chamfer.

Everything here runs in 64-bit independent of the training precision, and
every random draw is seeded, so reported numbers reproduce bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .meshcore import MeshState, draw_surface_points, is_watertight
from .ndtensor import Tensor

_JITTER = 1e-7


def _column_jitter(index: np.ndarray, channel: float) -> np.ndarray:
    """Deterministic pseudo-random offset in (-.5, .5) keyed on an index."""
    return np.modf(np.sin((index + 1.0) * channel) * 43758.5453123)[0] - 0.5


def voxelize(mesh: MeshState, extent_d: int, extent_h: int, extent_w: int) -> Tensor:
    """Rasterize a watertight mesh to occupancy by +z ray parity.

    Rays start at voxel centers; a center is inside when it sees an odd
    number of triangle crossings above it.  Ray x,y positions carry a
    1e-7 jitter keyed on the column index so edge-grazing hits resolve
    deterministically.
    """
    if not is_watertight(mesh.faces, mesh.num_vertices):
        raise ValueError("voxelize needs a watertight mesh, parity is undefined")
    if min(extent_d, extent_h, extent_w) < 1:
        raise ValueError("grid extents must be positive")
    verts = np.asarray(mesh.vertices.data, dtype=np.float64)
    tri = verts[mesh.faces]

    xs = -1.0 + (2.0 * np.arange(extent_w) + 1.0) / extent_w
    ys = -1.0 + (2.0 * np.arange(extent_h) + 1.0) / extent_h
    col_j, col_k = np.meshgrid(np.arange(extent_h), np.arange(extent_w), indexing="ij")
    col_id = (col_j * extent_w + col_k).astype(np.float64)
    ray_x = xs[col_k] + _JITTER * _column_jitter(col_id, 12.9898)
    ray_y = ys[col_j] + _JITTER * _column_jitter(col_id, 78.233)

    # crossings land in inc[m]: the crossing sits above exactly the voxel
    # centers 0..m-1, so parity at center i sums inc over m >= i+1
    inc = np.zeros((extent_d + 1, extent_h, extent_w), dtype=np.int64)
    pad = 10.0 * _JITTER
    for f in range(tri.shape[0]):
        p0, p1, p2 = tri[f]
        det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(det) < 1e-30:
            continue
        k_lo = int(np.ceil((min(p0[0], p1[0], p2[0]) - pad + 1.0) * extent_w / 2.0 - 0.5))
        k_hi = int(np.floor((max(p0[0], p1[0], p2[0]) + pad + 1.0) * extent_w / 2.0 - 0.5))
        j_lo = int(np.ceil((min(p0[1], p1[1], p2[1]) - pad + 1.0) * extent_h / 2.0 - 0.5))
        j_hi = int(np.floor((max(p0[1], p1[1], p2[1]) + pad + 1.0) * extent_h / 2.0 - 0.5))
        k_lo, k_hi = max(k_lo, 0), min(k_hi, extent_w - 1)
        j_lo, j_hi = max(j_lo, 0), min(j_hi, extent_h - 1)
        if k_lo > k_hi or j_lo > j_hi:
            continue
        rx = ray_x[j_lo : j_hi + 1, k_lo : k_hi + 1]
        ry = ray_y[j_lo : j_hi + 1, k_lo : k_hi + 1]
        u = ((p1[0] - rx) * (p2[1] - ry) - (p2[0] - rx) * (p1[1] - ry)) / det
        v = ((p2[0] - rx) * (p0[1] - ry) - (p0[0] - rx) * (p2[1] - ry)) / det
        w = 1.0 - u - v
        hit = (u > 0.0) & (v > 0.0) & (w > 0.0)
        if not hit.any():
            continue
        z_cross = u * p0[2] + v * p1[2] + w * p2[2]
        m = np.ceil((z_cross[hit] + 1.0) * extent_d / 2.0 - 0.5).astype(np.intp)
        m = np.clip(m, 0, extent_d)
        jj, kk = np.nonzero(hit)
        np.add.at(inc, (m, jj + j_lo, kk + k_lo), 1)
    above = np.flip(np.cumsum(np.flip(inc, axis=0), axis=0), axis=0)
    occupancy = (above[1:] % 2).astype(np.float64)
    return Tensor(occupancy, dtype=np.float64)


def iou(a, b) -> float:
    """Intersection over union of two binary grids; 1 when both are empty."""
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if ad.shape != bd.shape:
        raise ValueError(f"grid shapes differ: {ad.shape} vs {bd.shape}")
    am = ad > 0.5
    bm = bd > 0.5
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(am, bm).sum() / union)


def chamfer_eval(pred_mesh: MeshState, gt_points, samples: int = 10_000,
                 seed: int = 0) -> float:
    """Symmetric mean squared nearest-neighbor distance, evaluation mode.

    Draws `samples` points on the mesh with a fixed seed; the ground
    truth side is capped at the same budget by a seeded subsample.  All
    arithmetic runs in float64.
    """
    rng = np.random.default_rng(seed)
    face_idx, bary = draw_surface_points(pred_mesh, samples, rng)
    verts = np.asarray(pred_mesh.vertices.data, dtype=np.float64)
    corners = verts[pred_mesh.faces[face_idx]]
    pred = (corners * bary[:, :, None]).sum(axis=1)
    gt = np.asarray(gt_points.data if isinstance(gt_points, Tensor) else gt_points,
                    dtype=np.float64)
    if gt.shape[0] > samples:
        keep = rng.choice(gt.shape[0], size=samples, replace=False)
        gt = gt[keep]
    _, i_pg = cKDTree(gt).query(pred, k=1)
    _, i_gp = cKDTree(pred).query(gt, k=1)
    d2_pg = ((pred - gt[i_pg]) ** 2).sum(axis=1)
    d2_gp = ((gt - pred[i_gp]) ** 2).sum(axis=1)
    return float(np.mean(d2_pg) + np.mean(d2_gp))


@dataclass(frozen=True)
class SampleEval:
    """Per-sample evaluation row."""

    sample_id: str
    iou: float
    chamfer: float
    vertices: int


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics plus the per-sample breakdown behind them."""

    iou: float
    chamfer: float
    vertex_count: int
    samples: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou must lie in [0, 1], got {self.iou}")

    @classmethod
    def from_samples(cls, rows) -> "EvalReport":
        rows = tuple(rows)
        if not rows:
            raise ValueError("need at least one sample row")
        return cls(
            iou=float(np.mean([r.iou for r in rows])),
            chamfer=float(np.mean([r.chamfer for r in rows])),
            vertex_count=int(round(np.mean([r.vertices for r in rows]))),
            samples=rows,
        )

    def to_json(self) -> str:
        payload = {
            "iou": self.iou,
            "chamfer": self.chamfer,
            "vertex_count": self.vertex_count,
            "samples": [
                {"sample_id": r.sample_id, "iou": r.iou, "chamfer": r.chamfer,
                 "vertices": r.vertices}
                for r in self.samples
            ],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def to_csv(self) -> str:
        lines = ["sample_id,iou,chamfer,vertices"]
        for r in self.samples:
            lines.append(f"{r.sample_id},{r.iou!r},{r.chamfer!r},{r.vertices}")
        return "\n".join(lines) + "\n"
