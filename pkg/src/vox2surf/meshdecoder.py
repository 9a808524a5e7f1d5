"""Mesh deformation decoder: graph convolutions over the current mesh, feature
lookup in the voxel pyramid by trilinear point sampling or a learned
neighborhood sampler, and per-stage deform blocks that move vertices and
optionally prune candidates adaptively.

Stage l consumes only the stage-l feature cube. Vertex state z_l (width 32 by
default) rides along in MeshState.vertex_features between stages.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .meshcore import MeshState, adaptive_unpool, icosphere, uniform_unpool
from .voxelnet import (
    SegmentationOutput, VoxelFeaturePyramid, VoxelNetConfig, encode_decode,
)

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class MeshDecoderConfig:
    levels: int = 3
    init_subdiv: int = 2
    sampler: str = "lns"            # "ps" | "lns"
    unpool: str = "amu"             # "umu" | "amu"
    threshold_frac: float = 0.05    # fraction of current mean edge length
    feature_width: int = 32         # sampled feature width x_l (lns mode)
    state_width: int = 32           # vertex state width z_l
    neighborhood_size: int = 8      # sample count P per vertex (lns mode)
    plain_distance: bool = False    # use the Euclidean norm itself as d_i
    lns_passthrough: bool = False   # g returns y unchanged (ablation hook)

    def __post_init__(self):
        if self.sampler not in ("ps", "lns"):
            raise ValueError(f"sampler must be 'ps' or 'lns', got {self.sampler!r}")
        if self.unpool not in ("umu", "amu"):
            raise ValueError(f"unpool must be 'umu' or 'amu', got {self.unpool!r}")
        if self.threshold_frac < 0.0:
            raise ValueError(f"threshold_frac must be >= 0, got {self.threshold_frac}")
        if self.levels < 1 or self.init_subdiv < 0:
            raise ValueError("levels must be >= 1 and init_subdiv >= 0")


@dataclass
class GraphConvParams:
    """One graph-convolution layer; sigma is kept as its logarithm so the
    learned value stays positive."""
    w1: Tensor          # [F_in, F_out] self weight
    w2: Tensor          # [F_in, F_out] neighbor weight
    log_sigma: Tensor   # scalar


@dataclass
class LNSParams:
    """Offset network f (where to sample) and aggregation network g (how to
    combine what was sampled)."""
    f_w1: Tensor
    f_b1: Tensor
    f_w2: Tensor
    f_b2: Tensor
    g_w1: Tensor
    g_b1: Tensor
    g_w2: Tensor
    g_b2: Tensor
    P: int
    passthrough: bool = False


@dataclass
class MeshDecoderBlock:
    h: list[GraphConvParams]       # 4 layers producing z_l
    delta: list[GraphConvParams]   # 4 layers producing the displacement
    lns: LNSParams | None


@dataclass
class SampledFeature:
    """Per-vertex sampling record (diagnostic view, plain arrays)."""
    y: np.ndarray    # [C]
    U: np.ndarray    # [P,3]
    Y: np.ndarray    # [P,C]
    x: np.ndarray    # [F']


@dataclass
class SampledFeatures:
    """Batched sampling result; U and Y stack the P samples vertex-major."""
    x: Tensor        # [V, F']
    y: Tensor        # [V, C]
    U: Tensor        # [V*P, 3]
    Y: Tensor        # [V*P, C]
    P: int

    def vertex(self, i: int) -> SampledFeature:
        lo, hi = i * self.P, (i + 1) * self.P
        return SampledFeature(y=self.y.data[i].copy(), U=self.U.data[lo:hi].copy(),
                              Y=self.Y.data[lo:hi].copy(), x=self.x.data[i].copy())


# -- point sampling ----------------------------------------------------------


def point_sample_many(cube: Tensor, points: Tensor) -> Tensor:
    """Trilinear interpolation of ``cube`` [C,D,H,W] at ``points`` [N,3].

    Points live in the normalized frame [-1,1]^3 with x along W, y along H,
    z along D; voxel (i,j,k) is centered at -1 + (2k+1)/W along x and so on.
    Out-of-range coordinates clamp to the outermost cell, where the location
    gradient is zero. Differentiable in both cube values and point positions.
    """
    c, d, h, w = cube.shape
    n = points.shape[0]
    p = points.data
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite sample location")
    extents = np.array([w, h, d], dtype=p.dtype)
    u = (p + 1.0) * extents / 2.0 - 0.5
    inside = (u > 0.0) & (u < extents - 1.0)
    u = np.clip(u, 0.0, extents - 1.0)
    i0 = np.clip(np.floor(u).astype(np.intp), 0, np.maximum(extents.astype(np.intp) - 2, 0))
    frac = u - i0
    i1 = np.minimum(i0 + 1, extents.astype(np.intp) - 1)

    # corner order: bit 0 -> x, bit 1 -> y, bit 2 -> z
    idx = np.empty((n, 8), dtype=np.intp)
    wgt = np.empty((n, 8), dtype=p.dtype)
    wlo = 1.0 - frac
    for k, (bz, by, bx) in enumerate(product((0, 1), repeat=3)):
        xs = i1[:, 0] if bx else i0[:, 0]
        ys = i1[:, 1] if by else i0[:, 1]
        zs = i1[:, 2] if bz else i0[:, 2]
        idx[:, k] = (zs * h + ys) * w + xs
        wgt[:, k] = ((frac[:, 0] if bx else wlo[:, 0]) *
                     (frac[:, 1] if by else wlo[:, 1]) *
                     (frac[:, 2] if bz else wlo[:, 2]))

    flat = cube.data.reshape(c, -1)
    vals = flat[:, idx]                       # [C, N, 8]
    out_data = np.einsum("cnk,nk->nc", vals, wgt)

    def backward(g):
        contribs = []
        if cube.requires_grad or cube.node is not None:
            buf = nd.scatter_rows(idx.reshape(-1),
                                  (g[:, None, :] * wgt[:, :, None]).reshape(n * 8, c),
                                  d * h * w)
            contribs.append((cube, buf.T.reshape(c, d, h, w)))
        if points.requires_grad or points.node is not None:
            gp = np.zeros_like(p)
            gc = np.einsum("cnk,nc->nk", vals, g)  # d(out)/d(wgt) summed over C
            for axis in range(3):
                bit = 1 << axis
                dfrac = np.zeros(n, dtype=p.dtype)
                for k in range(8):
                    other = 1.0
                    for a2 in range(3):
                        if a2 == axis:
                            continue
                        other = other * (frac[:, a2] if k & (1 << a2) else wlo[:, a2])
                    dfrac += gc[:, k] * other * (1.0 if k & bit else -1.0)
                gp[:, axis] = dfrac * (extents[axis] / 2.0) * inside[:, axis]
            contribs.append((points, gp))
        return tuple(contribs)

    return nd.apply_op(out_data, (cube, points), backward)


def point_sample(cube: Tensor, location: Tensor) -> Tensor:
    """Single-location trilinear sample: [3] -> [C]."""
    out = point_sample_many(cube, nd.reshape(location, (1, 3)))
    return nd.reshape(out, (cube.shape[0],))


# -- graph convolution -------------------------------------------------------


def graph_conv(mesh: MeshState, features: Tensor, params: GraphConvParams,
               activate: bool = True, plain_distance: bool = False) -> Tensor:
    """One spatially weighted graph convolution over the mesh.

    Per vertex: w1-transformed own feature plus the mean over neighbors of
    their w2-transformed features, each weighted by exp(-d_i^2 / sigma^2).
    The default distance is d_i = sqrt of the Euclidean norm of the offset to
    the neighbor (so d_i^2 is the norm itself); ``plain_distance`` switches to
    the ordinary Euclidean distance. Distances are taken from current
    world-space vertex positions and carry gradients. A vertex with no
    neighbors gets a zero neighbor term.
    """
    if features.shape[0] != mesh.num_vertices:
        raise ValueError(
            f"features rows {features.shape[0]} != vertex count {mesh.num_vertices}")
    out = nd.matmul(features, params.w1)
    src, dst, counts = mesh.neighbor_arrays()
    if len(src):
        diff = nd.gather_rows(mesh.vertices, src) - nd.gather_rows(mesh.vertices, dst)
        sq = nd.sum_(diff * diff, axis=1)
        d_squared = sq if plain_distance else nd.safe_sqrt(sq)
        inv_var = nd.exp(params.log_sigma * (-2.0))
        wgt = nd.exp(d_squared * inv_var * (-1.0))
        msgs = nd.scale_rows(nd.gather_rows(nd.matmul(features, params.w2), src), wgt)
        summed = nd.segment_sum(msgs, dst, mesh.num_vertices)
        inv_counts = (1.0 / np.maximum(counts, 1)).astype(summed.dtype)
        out = out + nd.scale_rows(summed, Tensor(inv_counts))
    if activate:
        out = nd.leaky_relu(out, LEAKY_SLOPE)
    return out


def run_graph_stack(mesh: MeshState, features: Tensor,
                    layers: list[GraphConvParams], activate_last: bool,
                    plain_distance: bool = False) -> Tensor:
    out = features
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        out = graph_conv(mesh, out, layer,
                         activate=activate_last or i < last,
                         plain_distance=plain_distance)
    return out


# -- samplers ----------------------------------------------------------------


def ps_sample(cube: Tensor, mesh: MeshState) -> Tensor:
    """Baseline sampler: one trilinear lookup per vertex."""
    return point_sample_many(cube, mesh.vertices)


def lns_sample(cube: Tensor, mesh: MeshState, lns: LNSParams) -> SampledFeatures:
    """Learned neighborhood sampling from the single stage cube.

    f maps (y, v) to P tanh-bounded offsets scaled to one voxel cell, giving
    sample locations U around the vertex; g runs a shared dense layer over
    each (sampled feature, offset) pair, mean-pools across the P samples, and
    maps the pool together with (y, v) to the output feature.
    """
    _, d, h, w = cube.shape
    v = mesh.vertices
    n = v.shape[0]
    P = lns.P
    y = point_sample_many(cube, v)
    rep = np.repeat(np.arange(n, dtype=np.intp), P)

    if lns.passthrough:
        return SampledFeatures(x=y, y=y, U=nd.gather_rows(v, rep),
                               Y=nd.gather_rows(y, rep), P=P)

    fin = nd.concat([y, v], axis=1)
    hid = nd.leaky_relu(nd.add_bias(nd.matmul(fin, lns.f_w1), lns.f_b1), LEAKY_SLOPE)
    raw = nd.tanh(nd.add_bias(nd.matmul(hid, lns.f_w2), lns.f_b2))
    offsets = nd.reshape(raw, (n * P, 3))
    cell = np.array([2.0 / w, 2.0 / h, 2.0 / d], dtype=raw.dtype)
    offsets = offsets * Tensor(np.tile(cell, (n * P, 1)))
    U = nd.gather_rows(v, rep) + offsets
    Y = point_sample_many(cube, U)

    gin = nd.concat([Y, offsets], axis=1)
    gh = nd.leaky_relu(nd.add_bias(nd.matmul(gin, lns.g_w1), lns.g_b1), LEAKY_SLOPE)
    pooled = nd.segment_sum(gh, rep, n) * (1.0 / P)
    cat = nd.concat([pooled, y, v], axis=1)
    x = nd.add_bias(nd.matmul(cat, lns.g_w2), lns.g_b2)
    return SampledFeatures(x=x, y=y, U=U, Y=Y, P=P)


# -- stage blocks ------------------------------------------------------------


def decode_stage(level: int, mesh_prev: MeshState, pyramid: VoxelFeaturePyramid,
                 block: MeshDecoderBlock, config: MeshDecoderConfig) -> MeshState:
    """One deform-and-refine stage.

    Unpools candidates, samples per-vertex features from the stage cube,
    updates vertex state through the h stack, displaces vertices by the delta
    stack, and in adaptive mode prunes candidates that stayed within the
    displacement threshold (a fraction of the current mean edge length).
    """
    if not 1 <= level <= len(pyramid.stages):
        raise ValueError(f"stage {level} outside pyramid of {len(pyramid.stages)}")
    cube = pyramid.stages[level - 1]
    out = uniform_unpool(mesh_prev)
    mesh_u = out.mesh

    if config.sampler == "ps":
        x = ps_sample(cube, mesh_u)
    else:
        x = lns_sample(cube, mesh_u, block.lns).x

    parts = [x]
    if mesh_u.vertex_features.shape[1] > 0:
        parts.append(mesh_u.vertex_features)
    parts.append(mesh_u.vertices)
    hin = nd.concat(parts, axis=1)

    z = run_graph_stack(mesh_u, hin, block.h, activate_last=True,
                        plain_distance=config.plain_distance)
    delta = run_graph_stack(mesh_u, z, block.delta, activate_last=False,
                            plain_distance=config.plain_distance)
    v_new = mesh_u.vertices + delta
    deformed = MeshState(vertices=v_new, sphere_coords=mesh_u.sphere_coords,
                         faces=mesh_u.faces, adjacency=mesh_u.adjacency,
                         vertex_features=z)
    if config.unpool == "amu":
        threshold = config.threshold_frac * deformed.mean_edge_length()
        return adaptive_unpool(deformed, out, threshold)
    return deformed


def forward(volume: Tensor, voxel_params: dict[str, Tensor],
            blocks: list[MeshDecoderBlock], voxel_cfg: VoxelNetConfig,
            mesh_cfg: MeshDecoderConfig) -> tuple[list[MeshState], SegmentationOutput]:
    """Volume in, one mesh per stage out (finest last), plus voxel logits."""
    if voxel_cfg.levels != mesh_cfg.levels:
        raise ValueError(
            f"stage count mismatch: voxel {voxel_cfg.levels} vs mesh {mesh_cfg.levels}")
    if len(blocks) != mesh_cfg.levels:
        raise ValueError(f"expected {mesh_cfg.levels} blocks, got {len(blocks)}")
    pyramid, seg = encode_decode(volume, voxel_params, voxel_cfg)
    mesh = icosphere(mesh_cfg.init_subdiv)
    meshes = []
    for level in range(1, mesh_cfg.levels + 1):
        mesh = decode_stage(level, mesh, pyramid, blocks[level - 1], mesh_cfg)
        meshes.append(mesh)
    return meshes, seg


# -- parameter construction --------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(data.astype(nd.default_dtype()), requires_grad=True)


def _graph_layer(rng: np.random.Generator, fin: int, fout: int) -> GraphConvParams:
    return GraphConvParams(
        w1=_glorot(rng, fin, fout), w2=_glorot(rng, fin, fout),
        log_sigma=Tensor(np.zeros(()), requires_grad=True))


def stage_cube_channels(voxel_cfg: VoxelNetConfig, level: int) -> int:
    """Channels of pyramid stage ``level`` (stage 1 is coarsest)."""
    return voxel_cfg.channels(voxel_cfg.levels - level + 1)


def init_mesh_params(voxel_cfg: VoxelNetConfig, mesh_cfg: MeshDecoderConfig,
                     rng: np.random.Generator) -> list[MeshDecoderBlock]:
    if voxel_cfg.levels != mesh_cfg.levels:
        raise ValueError(
            f"stage count mismatch: voxel {voxel_cfg.levels} vs mesh {mesh_cfg.levels}")
    fw, zw, P = mesh_cfg.feature_width, mesh_cfg.state_width, mesh_cfg.neighborhood_size
    blocks = []
    for level in range(1, mesh_cfg.levels + 1):
        cube_c = stage_cube_channels(voxel_cfg, level)
        bare = mesh_cfg.sampler == "ps" or mesh_cfg.lns_passthrough
        x_width = cube_c if bare else fw
        z_prev = 0 if level == 1 else zw

        h_widths = [x_width + z_prev + 3, zw, zw, zw, zw]
        h = [_graph_layer(rng, a, b) for a, b in zip(h_widths, h_widths[1:])]
        d_widths = [zw, zw, zw, zw, 3]
        delta = [_graph_layer(rng, a, b) for a, b in zip(d_widths, d_widths[1:])]

        lns = None
        if mesh_cfg.sampler == "lns":
            if mesh_cfg.lns_passthrough:
                zeros = Tensor(np.zeros((1, 1)))
                lns = LNSParams(zeros, zeros, zeros, zeros, zeros, zeros,
                                zeros, zeros, P=P, passthrough=True)
            else:
                lns = LNSParams(
                    f_w1=_glorot(rng, cube_c + 3, fw),
                    f_b1=Tensor(np.zeros(fw), requires_grad=True),
                    f_w2=_glorot(rng, fw, 3 * P),
                    f_b2=Tensor(np.zeros(3 * P), requires_grad=True),
                    g_w1=_glorot(rng, cube_c + 3, fw),
                    g_b1=Tensor(np.zeros(fw), requires_grad=True),
                    g_w2=_glorot(rng, fw + cube_c + 3, fw),
                    g_b2=Tensor(np.zeros(fw), requires_grad=True),
                    P=P)
        blocks.append(MeshDecoderBlock(h=h, delta=delta, lns=lns))
    return blocks


def named_mesh_parameters(blocks: list[MeshDecoderBlock]) -> dict[str, Tensor]:
    """Flat name -> tensor view of all trainable block parameters."""
    out: dict[str, Tensor] = {}
    for level, block in enumerate(blocks, start=1):
        for kind, layers in (("h", block.h), ("delta", block.delta)):
            for i, lay in enumerate(layers, start=1):
                base = f"mesh.stage{level}.{kind}{i}"
                out[f"{base}.w1"] = lay.w1
                out[f"{base}.w2"] = lay.w2
                out[f"{base}.log_sigma"] = lay.log_sigma
        if block.lns is not None and not block.lns.passthrough:
            base = f"mesh.stage{level}.lns"
            for field in ("f_w1", "f_b1", "f_w2", "f_b2",
                          "g_w1", "g_b1", "g_w2", "g_b2"):
                out[f"{base}.{field}"] = getattr(block.lns, field)
    return out
