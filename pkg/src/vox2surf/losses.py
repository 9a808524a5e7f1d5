"""Training objective: per-stage Chamfer distance on sampled surface points,
voxel cross-entropy, and three mesh regularizers (normal, Laplacian, edge
length), combined with configurable weights.

Nearest-neighbor indices for the Chamfer and normal terms come from a k-d
tree and are treated as constants of the draw; the distances themselves are
recomputed with tape operations so gradients flow into vertex positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import ndtensor as nd
from .ndtensor import Tensor
from .meshcore import MeshState, surface_sample
from .voxelnet import SegmentationOutput


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0    # cross-entropy
    lambda2: float = 0.1    # normal
    lambda3: float = 0.5    # laplacian
    lambda4: float = 0.5    # edge length
    stages: int = 3
    chamfer_samples: int = 3000
    per_stage_regularizers: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.chamfer_samples < 1:
            raise ValueError("chamfer_samples must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")


@dataclass
class LossReport:
    """Raw (unweighted) term values plus the weighted total."""
    stage_chamfer: list[float] = field(default_factory=list)
    ce: float = 0.0
    normal: float = 0.0
    laplacian: float = 0.0
    edge: float = 0.0
    total: float = 0.0

    def recombine(self, w: LossWeights) -> float:
        return (sum(self.stage_chamfer) + w.lambda1 * self.ce
                + w.lambda2 * self.normal + w.lambda3 * self.laplacian
                + w.lambda4 * self.edge)

    def json_line(self, **extra) -> str:
        record = dict(extra)
        record.update(chamfer=self.stage_chamfer, ce=self.ce,
                      normal=self.normal, laplacian=self.laplacian,
                      edge=self.edge, total=self.total)
        return json.dumps(record, separators=(",", ":"))


def chamfer(pred_points: Tensor, gt_points: Tensor) -> Tensor:
    """Symmetric mean of squared nearest-neighbor distances."""
    if pred_points.ndim != 2 or pred_points.shape[1] != 3 \
            or gt_points.ndim != 2 or gt_points.shape[1] != 3:
        raise ValueError(
            f"expected [N,3] point sets, got {pred_points.shape} and {gt_points.shape}")
    if pred_points.shape[0] < 1 or gt_points.shape[0] < 1:
        raise ValueError("chamfer distance of an empty point set")
    _, idx_pg = cKDTree(gt_points.data).query(pred_points.data, k=1)
    _, idx_gp = cKDTree(pred_points.data).query(gt_points.data, k=1)
    d_pg = pred_points - nd.gather_rows(gt_points, idx_pg)
    d_gp = gt_points - nd.gather_rows(pred_points, idx_gp)
    return (nd.mean(nd.sum_(d_pg * d_pg, axis=1))
            + nd.mean(nd.sum_(d_gp * d_gp, axis=1)))


def cross_entropy(seg: SegmentationOutput, labels) -> Tensor:
    """Mean negative log softmax probability of the labeled class.

    Stabilized by subtracting the per-voxel max logit; the shift cancels in
    the loss identically, so holding it constant keeps gradients exact.
    """
    logits = seg.logits
    label_data = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim != 4 or logits.shape[0] != 2:
        raise ValueError(f"expected logits [2,D,H,W], got {logits.shape}")
    if tuple(label_data.shape) != tuple(logits.shape[1:]):
        raise ValueError(
            f"label shape {label_data.shape} != volume shape {logits.shape[1:]}")
    flat_labels = label_data.reshape(-1)
    if not np.isin(flat_labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n = flat_labels.size
    flat = nd.reshape(logits, (2, n))
    shift = np.max(flat.data, axis=0)
    shifted = flat - Tensor(np.broadcast_to(shift, (2, n)).copy())
    lse = nd.log(nd.sum_(nd.exp(shifted), axis=0))
    onehot = np.zeros((2, n), dtype=flat.data.dtype)
    onehot[flat_labels.astype(np.intp), np.arange(n)] = 1.0
    picked = nd.sum_(shifted * Tensor(onehot), axis=0)
    return nd.mean(lse - picked)


def edge_loss(mesh: MeshState) -> Tensor:
    """Mean squared edge length over undirected edges."""
    e = mesh.edges()
    d = nd.gather_rows(mesh.vertices, e[:, 0]) - nd.gather_rows(mesh.vertices, e[:, 1])
    return nd.mean(nd.sum_(d * d, axis=1))


def laplacian_loss(mesh: MeshState) -> Tensor:
    """Mean squared offset of each vertex from its neighbors' centroid."""
    src, dst, counts = mesh.neighbor_arrays()
    summed = nd.segment_sum(nd.gather_rows(mesh.vertices, src), dst, mesh.num_vertices)
    inv = (1.0 / np.maximum(counts, 1)).astype(summed.dtype)
    centroid = nd.scale_rows(summed, Tensor(inv))
    d = mesh.vertices - centroid
    return nd.mean(nd.sum_(d * d, axis=1))


def normal_loss(mesh: MeshState, gt_points: np.ndarray,
                gt_normals: np.ndarray) -> Tensor:
    """Mean squared cosine between each edge and the surface normal at the
    ground-truth point nearest the edge midpoint.

    An edge lying in the local tangent plane scores zero; an edge along the
    normal scores one.
    """
    e = mesh.edges()
    va = nd.gather_rows(mesh.vertices, e[:, 0])
    vb = nd.gather_rows(mesh.vertices, e[:, 1])
    mid = (va.data + vb.data) * 0.5
    _, idx = cKDTree(gt_points).query(mid, k=1)
    normals = gt_normals[idx].astype(va.data.dtype)
    d = va - vb
    dot = nd.sum_(d * Tensor(normals), axis=1)
    length = nd.safe_sqrt(nd.sum_(d * d, axis=1)) + 1e-12
    cos = dot / length
    return nd.mean(cos * cos)


def total_loss(stage_meshes: list[MeshState], seg: SegmentationOutput,
               gt_points: Tensor, gt_normals: np.ndarray, labels,
               weights: LossWeights,
               rng: np.random.Generator) -> tuple[Tensor, LossReport]:
    """Weighted combination of all terms.

    Every stage mesh is sampled (area-weighted, ``chamfer_samples`` points)
    and scored against the same ground-truth boundary set; regularizers run
    on the final mesh unless per-stage regularizers are enabled. Returns the
    scalar loss tensor for backward plus a plain-float report.
    """
    if len(stage_meshes) != weights.stages:
        raise ValueError(
            f"expected {weights.stages} stage meshes, got {len(stage_meshes)}")
    report = LossReport()
    total = None
    for mesh in stage_meshes:
        pts = surface_sample(mesh, weights.chamfer_samples, rng)
        cf = chamfer(pts, gt_points)
        report.stage_chamfer.append(cf.item())
        total = cf if total is None else total + cf

    ce = cross_entropy(seg, labels)
    report.ce = ce.item()
    total = total + ce * weights.lambda1

    reg_meshes = stage_meshes if weights.per_stage_regularizers else stage_meshes[-1:]
    nrm_t = lap_t = edg_t = None
    for mesh in reg_meshes:
        nrm = normal_loss(mesh, gt_points.data, gt_normals)
        lap = laplacian_loss(mesh)
        edg = edge_loss(mesh)
        nrm_t = nrm if nrm_t is None else nrm_t + nrm
        lap_t = lap if lap_t is None else lap_t + lap
        edg_t = edg if edg_t is None else edg_t + edg
    report.normal = nrm_t.item()
    report.laplacian = lap_t.item()
    report.edge = edg_t.item()
    total = total + nrm_t * weights.lambda2 + lap_t * weights.lambda3 \
        + edg_t * weights.lambda4
    report.total = total.item()
    return total, report
