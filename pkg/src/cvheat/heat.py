"""Spectral heat conduction on feature maps and the four-stage backbone built on it.

The 2-D DCT-II diagonalises the Laplacian with Neumann boundaries, so one step
of heat flow over time ``t`` with diffusivity ``k`` is

    y = idct2(dct2(x) * exp(-k * w2 * t)),   w2[i, j] = (pi i / H)^2 + (pi j / W)^2.

The transform is applied as two dense orthonormal matrix products, which is
cheap at the grid sizes used here and differentiable without special handling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from cvheat.graphs import GraphBundle, SpatialGraph, concat_graphs
from cvheat.nn import DepthwiseConv, GcnStack, LayerNorm2d, pointwise

Array = Union[np.ndarray, Tensor]

K_MODES = ("fe", "learnable", "fixed")
GRAPH_MODES = ("none", "global", "subgraph", "contour", "all")
GRAPH_SCALES = ("global", "subgraph", "contour")


# --------------------------------------------------------------------------- DCT


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``X = D @ x``; its transpose inverts it."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


def _matrix_like(n: int, x: Array) -> Array:
    if isinstance(x, Tensor):
        return _torch_dct_matrix(n, x.dtype, x.device)
    return dct_matrix(n)


@lru_cache(maxsize=None)
def _torch_dct_matrix(n: int, dtype: torch.dtype, device: torch.device) -> Tensor:
    return torch.as_tensor(dct_matrix(n), dtype=dtype, device=device)


def dct2(x: Array) -> Array:
    """Orthonormal 2-D DCT-II over the last two axes."""
    dh = _matrix_like(x.shape[-2], x)
    dw = _matrix_like(x.shape[-1], x)
    return dh @ x @ dw.T


def idct2(x: Array) -> Array:
    """Inverse of :func:`dct2` (orthonormal DCT-III)."""
    dh = _matrix_like(x.shape[-2], x)
    dw = _matrix_like(x.shape[-1], x)
    return dh.T @ x @ dw


def frequency_grid(h: int, w: int) -> np.ndarray:
    """Squared angular frequencies ``(pi i / h)^2 + (pi j / w)^2`` of the DCT bins."""
    fi = (np.pi * np.arange(h) / h) ** 2
    fj = (np.pi * np.arange(w) / w) ** 2
    return fi[:, None] + fj[None, :]


def hco_apply(x: Array, k: Union[float, Array], t: float = 1.0, w2: Optional[Array] = None) -> Array:
    """Heat conduction ``idct2(dct2(x) * exp(-k * w2 * t))`` on ``(..., H, W)`` maps.

    ``k`` broadcasts against ``(..., H, W)``: a scalar, an ``(H, W)`` per-frequency
    grid, or ``(C, 1, 1)`` / ``(B, C, 1, 1)`` per-channel values.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if isinstance(k, Tensor):
        if (k.detach() < 0).any():
            raise ValueError("diffusivity k must be non-negative")
    elif np.any(np.asarray(k) < 0):
        raise ValueError("diffusivity k must be non-negative")
    h, w = x.shape[-2:]
    if w2 is None:
        w2 = frequency_grid(h, w)
    if isinstance(x, Tensor):
        w2 = torch.as_tensor(w2, dtype=x.dtype, device=x.device)
        k = torch.as_tensor(k, dtype=x.dtype, device=x.device)
        decay = torch.exp(-k * w2 * t)
    else:
        decay = np.exp(-np.asarray(k) * w2 * t)
    return idct2(dct2(x) * decay)


def predict_k1(fe: Tensor, head: nn.Linear) -> Tensor:
    """Per-frequency diffusivity ``softplus(head(fe))`` from an ``(H, W, d)`` embedding."""
    if fe.shape[-1] != head.in_features:
        raise ValueError(f"embedding width {fe.shape[-1]} != head input {head.in_features}")
    return F.softplus(head(fe)).squeeze(-1)


def predict_k2(contour_feats: Tensor, head: nn.Linear) -> Tensor:
    """Diffusivity per channel group from mean-pooled contour features.

    ``contour_feats`` is ``(n, d)``; with no nodes only the head bias is used,
    which is what a zero pooled vector gives.
    """
    if contour_feats.shape[0] == 0:
        pooled = contour_feats.new_zeros(head.in_features)
    else:
        pooled = contour_feats.mean(dim=0)
    return F.softplus(head(pooled))


# --------------------------------------------------------------------------- CHCO block


class ChcoBlock(nn.Module):
    """Heat conduction block driven by frequency embeddings and contour features.

    ``u = in_proj(dwconv(x_e))``; ``x_f`` is ``u`` after heat flow with the
    per-frequency ``k1``; the graph map ``x_of`` goes through ``dct2`` then
    ``idct2`` and is concatenated with ``x_f``; the fused map gets a second heat
    flow with per-group ``k2`` from pooled graph features; then ``out_proj``, a
    residual with ``u`` and a channel LayerNorm.
    """

    def __init__(
        self,
        dim: int,
        fe_dim: int,
        graph_dim: int,
        k_mode: str = "fe",
        fixed_k: float = 3.0,
        k2_groups: int = 4,
        t: float = 1.0,
        kernel_size: int = 3,
    ):
        super().__init__()
        if k_mode not in K_MODES:
            raise ValueError(f"k_mode must be one of {K_MODES}")
        if dim % k2_groups:
            raise ValueError("k2_groups must divide dim")
        self.dim = dim
        self.k_mode = k_mode
        self.fixed_k = float(fixed_k)
        self.k2_groups = k2_groups
        self.t = t
        self.dwconv = DepthwiseConv(dim, kernel_size)
        self.in_proj = nn.Linear(dim, dim)
        self.fusion_proj = nn.Linear(2 * dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm = LayerNorm2d(dim)
        if k_mode == "fe":
            self.k1_head = nn.Linear(fe_dim, 1)
            self.k2_head = nn.Linear(graph_dim, k2_groups)
        elif k_mode == "learnable":
            self.k1_raw = nn.Parameter(torch.zeros(()))
            self.k2_raw = nn.Parameter(torch.zeros(()))

    def diffusivities(self, fe: Optional[Tensor], graph_ctx: Optional[Tensor], batch: int) -> Tuple[Tensor, Tensor]:
        """``k1`` broadcastable to ``(H, W)`` and ``k2`` shaped ``(B, C, 1, 1)``."""
        ref = self.in_proj.weight
        if self.k_mode == "fixed":
            k = torch.tensor(self.fixed_k, dtype=ref.dtype)
            return k, k
        if self.k_mode == "learnable":
            return F.softplus(self.k1_raw), F.softplus(self.k2_raw)
        k1 = predict_k1(fe, self.k1_head)
        if graph_ctx is None:
            graph_ctx = torch.zeros(batch, self.k2_head.in_features, dtype=ref.dtype)
        # graph_ctx rows are already mean-pooled, zero for empty graphs
        k2 = F.softplus(self.k2_head(graph_ctx))
        k2 = k2.repeat_interleave(self.dim // self.k2_groups, dim=-1)
        return k1, k2.reshape(batch, self.dim, 1, 1)

    def forward(
        self,
        x_e: Tensor,
        x_of: Tensor,
        w2: Tensor,
        fe: Optional[Tensor] = None,
        graph_ctx: Optional[Tensor] = None,
    ) -> Tensor:
        """Args:
        x_e: ``(B, C, H, W)`` event features.
        x_of: ``(B, C, H, W)`` graph features on the same grid.
        w2: ``(H, W)`` frequency grid.
        fe: ``(H, W, d)`` frequency embedding of the stage.
        graph_ctx: ``(B, graph_dim)`` mean-pooled graph node features
            (zeros for frames without graph nodes).
        """
        if x_e.shape != x_of.shape:
            raise ValueError(f"x_e {tuple(x_e.shape)} and x_of {tuple(x_of.shape)} are not aligned")
        k1, k2 = self.diffusivities(fe, graph_ctx, x_e.shape[0])
        u = pointwise(self.in_proj, self.dwconv(x_e))
        x_f = hco_apply(u, k1, self.t, w2)
        x_of = idct2(dct2(x_of))
        fused = pointwise(self.fusion_proj, torch.cat([x_f, x_of], dim=-3))
        y = pointwise(self.out_proj, hco_apply(fused, k2, self.t, w2)) + u
        return self.norm(y)


# --------------------------------------------------------------------------- graph features on stage grids


def scatter_nodes(pos: np.ndarray, h: Tensor, stride: int, grid_h: int, grid_w: int) -> Tensor:
    """Average node features into the grid cells containing ``pos / stride``.

    Returns a ``(d, grid_h, grid_w)`` map, zero where no node lands.
    """
    d = h.shape[1]
    out = torch.zeros(grid_h * grid_w, d, dtype=h.dtype)
    if len(pos) == 0:
        return out.T.reshape(d, grid_h, grid_w)
    col = np.clip(np.floor(pos[:, 0] / stride).astype(np.int64), 0, grid_w - 1)
    row = np.clip(np.floor(pos[:, 1] / stride).astype(np.int64), 0, grid_h - 1)
    idx = torch.as_tensor(row * grid_w + col)
    out = out.index_add(0, idx, h)
    cnt = torch.zeros(grid_h * grid_w, dtype=h.dtype).index_add(0, idx, torch.ones(len(idx), dtype=h.dtype))
    out = out / cnt.clamp(min=1).unsqueeze(1)
    return out.T.reshape(d, grid_h, grid_w)


def stage_graph_sources(graph_mode: str) -> List[Optional[str]]:
    """Which graph scale feeds each of the four stages.

    ``all`` is the multi-scale assignment (global graph to the shallowest stage,
    subgraphs to the second, contour graph to the two deepest); a single scale
    name feeds that graph to every stage.
    """
    if graph_mode not in GRAPH_MODES:
        raise ValueError(f"graph_mode must be one of {GRAPH_MODES}")
    if graph_mode == "none":
        return [None] * 4
    if graph_mode == "all":
        return ["global", "subgraph", "contour", "contour"]
    return [graph_mode] * 4


def bundle_graph(bundle: GraphBundle, scale: str) -> SpatialGraph:
    if scale == "global":
        return bundle.global_graph
    if scale == "subgraph":
        return bundle.subgraph_union()
    if scale == "contour":
        return bundle.contour
    raise ValueError(f"unknown graph scale {scale!r}")


class GraphProjector(nn.Module):
    """Scatter GCN node outputs onto a stage grid, then a bias-free 1x1 projection."""

    def __init__(self, graph_dim: int, channels: int, stride: int):
        super().__init__()
        self.proj = nn.Linear(graph_dim, channels, bias=False)
        self.stride = stride

    def forward(self, pos: np.ndarray, h: Tensor, grid: Tuple[int, int]) -> Tensor:
        return pointwise(self.proj, scatter_nodes(pos, h, self.stride, *grid))


def project_graph_features(
    bundle: GraphBundle,
    gcn: GcnStack,
    projector: GraphProjector,
    stage_shape: Tuple[int, int, int],
    scale: str = "contour",
) -> Tensor:
    """``X_OF`` for one frame and one stage: ``(C, H, W)`` from the chosen graph scale."""
    c, h, w = stage_shape
    g = bundle_graph(bundle, scale)
    if g.num_nodes == 0:
        return torch.zeros(c, h, w, dtype=projector.proj.weight.dtype)
    return projector(g.pos, gcn(g), (h, w))


# --------------------------------------------------------------------------- backbone


@dataclass
class BackboneConfig:
    stage_depths: Tuple[int, int, int, int] = (2, 2, 12, 2)
    stage_widths: Tuple[int, int, int, int] = (64, 128, 256, 512)
    in_chans: int = 2
    img_size: Tuple[int, int] = (640, 640)
    stem_stride: int = 4
    down_stride: int = 2
    fe_dim: int = 16
    k_mode: str = "fe"
    fixed_k: float = 3.0
    k2_groups: int = 4
    t: float = 1.0
    graph_mode: str = "all"
    gcn_width: int = 64
    gcn_depth: int = 2
    patch_size: int = 8

    def __post_init__(self):
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ValueError("exactly four stages are required")
        if self.stem_stride != 4 or self.down_stride != 2:
            raise ValueError("only stem stride 4 and stage stride 2 are supported")
        h, w = self.img_size
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must be divisible by 32")

    def stage_strides(self) -> List[int]:
        return [self.stem_stride * self.down_stride**i for i in range(4)]

    def stage_grids(self) -> List[Tuple[int, int]]:
        h, w = self.img_size
        return [(h // s, w // s) for s in self.stage_strides()]


class Backbone(nn.Module):
    """Stem (two stride-2 convs) and four CHCO stages at strides 4, 8, 16, 32."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_chans, widths[0] // 2, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(widths[0] // 2, widths[0], 3, stride=2, padding=1),
            LayerNorm2d(widths[0]),
        )
        self.downsample = nn.ModuleList(
            [nn.Identity()]
            + [
                nn.Sequential(nn.Conv2d(widths[i - 1], widths[i], 3, stride=2, padding=1), LayerNorm2d(widths[i]))
                for i in range(1, 4)
            ]
        )
        self.sources = stage_graph_sources(cfg.graph_mode)
        graph_in = cfg.in_chans * cfg.patch_size**2
        self.gcns = nn.ModuleDict(
            {s: GcnStack(graph_in, cfg.gcn_width, cfg.gcn_depth) for s in GRAPH_SCALES if s in self.sources}
        )
        strides = cfg.stage_strides()
        self.projectors = nn.ModuleList(GraphProjector(cfg.gcn_width, widths[i], strides[i]) for i in range(4))
        self.freq_embed = nn.ParameterList()
        for (gh, gw) in cfg.stage_grids():
            bound = 1.0 / math.sqrt(cfg.fe_dim)
            self.freq_embed.append(nn.Parameter(torch.empty(gh, gw, cfg.fe_dim).uniform_(-bound, bound)))
        for i, (gh, gw) in enumerate(cfg.stage_grids()):
            self.register_buffer(f"w2_{i}", torch.as_tensor(frequency_grid(gh, gw), dtype=torch.float32))
        self.stages = nn.ModuleList(
            nn.ModuleList(
                ChcoBlock(
                    widths[i], cfg.fe_dim, cfg.gcn_width, cfg.k_mode, cfg.fixed_k, cfg.k2_groups, cfg.t
                )
                for _ in range(cfg.stage_depths[i])
            )
            for i in range(4)
        )

    def graph_features(self, bundles: Sequence[GraphBundle]):
        """Per stage: ``X_OF`` maps ``(B, C, H, W)`` and pooled context ``(B, gcn_width)``."""
        dtype = self.stem[0].weight.dtype
        cache = {}
        for scale in self.gcns:
            # one GCN pass over the disjoint union of the batch's graphs
            graphs = [bundle_graph(bundle, scale) for bundle in bundles]
            h_all = self.gcns[scale](concat_graphs(graphs, self.gcns[scale].layers[0].lin.in_features))
            for b, (g, h) in enumerate(zip(graphs, torch.split(h_all, [g.num_nodes for g in graphs]))):
                cache[b, scale] = (g.pos, h)
        out = []
        for i, (gh, gw) in enumerate(self.cfg.stage_grids()):
            scale = self.sources[i]
            c = self.cfg.stage_widths[i]
            if scale is None:
                out.append((torch.zeros(len(bundles), c, gh, gw, dtype=dtype), None))
                continue
            maps, ctx = [], []
            for b in range(len(bundles)):
                pos, h = cache[b, scale]
                if len(pos):
                    maps.append(self.projectors[i](pos, h, (gh, gw)))
                    ctx.append(h.mean(dim=0))
                else:
                    maps.append(torch.zeros(c, gh, gw, dtype=dtype))
                    ctx.append(torch.zeros(self.cfg.gcn_width, dtype=dtype))
            out.append((torch.stack(maps), torch.stack(ctx)))
        return out

    def forward(self, frames: Tensor, bundles: Sequence[GraphBundle]) -> List[Tensor]:
        """Args:
        frames: ``(B, C_in, H, W)`` raw event counts (``log1p`` is applied here).
        bundles: one graph bundle per frame.
        """
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        if tuple(frames.shape[-2:]) != tuple(self.cfg.img_size):
            raise ValueError(f"expected {self.cfg.img_size} input, got {tuple(frames.shape[-2:])}")
        if len(bundles) != frames.shape[0]:
            raise ValueError("one graph bundle per frame is required")
        graph = self.graph_features(bundles)
        x = self.stem(torch.log1p(frames))
        feats = []
        for i in range(4):
            x = self.downsample[i](x)
            x_of, ctx = graph[i]
            for block in self.stages[i]:
                x = block(x, x_of, getattr(self, f"w2_{i}"), self.freq_embed[i], ctx)
            feats.append(x)
        return feats


def backbone_forward(cfg: BackboneConfig, frame, bundle: GraphBundle, seed: int = 0) -> List[Tensor]:
    """Build a seeded backbone and run one frame through it."""
    torch.manual_seed(seed)
    model = Backbone(cfg)
    data = frame.data if hasattr(frame, "data") and not isinstance(frame, Tensor) else frame
    with torch.no_grad():
        return model(torch.as_tensor(np.asarray(data), dtype=torch.float32), [bundle])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
