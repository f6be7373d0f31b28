"""Small differentiable building blocks and a finite-difference gradient checker.

Autograd is torch's. ``torch.nn.Linear`` and ``torch.nn.Conv2d`` default to
``uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases, which is the
initialisation used throughout, so they are used directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from cvheat.graphs import SpatialGraph


class DepthwiseConv(nn.Module):
    """Per-channel ``k x k`` convolution with zero 'same' padding."""

    def __init__(self, channels: int, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels, bias=bias)

    @property
    def weight(self) -> Tensor:
        return self.conv.weight

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.conv.in_channels:
            raise ValueError(f"expected {self.conv.in_channels} channels, got {x.shape[-3]}")
        if x.dim() == 3:
            return self.conv(x.unsqueeze(0)).squeeze(0)
        return self.conv(x)


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of ``(..., C, H, W)`` maps."""

    def forward(self, x: Tensor) -> Tensor:
        return super().forward(x.movedim(-3, -1)).movedim(-1, -3)


def pointwise(layer: nn.Linear, x: Tensor) -> Tensor:
    """Apply a linear layer across the channel axis of a ``(..., C, H, W)`` map."""
    return layer(x.movedim(-3, -1)).movedim(-1, -3)


def mean_aggregate(feat: Tensor, edges: Tensor, self_loops: bool = True) -> Tensor:
    """Mean of each node's neighbour features (and its own, with self-loops)."""
    n = feat.shape[0]
    if len(edges):
        src = torch.cat([edges[:, 0], edges[:, 1]])
        dst = torch.cat([edges[:, 1], edges[:, 0]])
        agg = torch.zeros_like(feat).index_add(0, dst, feat[src])
        deg = torch.zeros(n, dtype=feat.dtype, device=feat.device).index_add(
            0, dst, torch.ones_like(dst, dtype=feat.dtype)
        )
    else:
        agg = torch.zeros_like(feat)
        deg = torch.zeros(n, dtype=feat.dtype, device=feat.device)
    if self_loops:
        agg = agg + feat
        deg = deg + 1
    return agg / deg.clamp(min=1).unsqueeze(1)


class GcnLayer(nn.Module):
    """``h_i = ReLU(W mean_{j in N(i) + i} x_j)``."""

    def __init__(self, in_dim: int, out_dim: int, self_loops: bool = True):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim, bias=False)
        self.self_loops = self_loops

    @property
    def weight(self) -> Tensor:
        return self.lin.weight

    def forward(self, feat: Tensor, edges: Tensor) -> Tensor:
        if feat.shape[1] != self.lin.in_features:
            raise ValueError(f"expected node features of width {self.lin.in_features}, got {feat.shape[1]}")
        return F.relu(self.lin(mean_aggregate(feat, edges, self.self_loops)))


def graph_tensors(g: SpatialGraph, dtype=torch.float32):
    return torch.as_tensor(g.feat, dtype=dtype), torch.as_tensor(g.edges, dtype=torch.long)


def gcn_forward(layer: GcnLayer, g: SpatialGraph) -> Tensor:
    feat, edges = graph_tensors(g, layer.weight.dtype)
    return layer(feat, edges)


class GcnStack(nn.Module):
    """GCN layers over ``log1p``-compressed node features (raw event counts)."""

    def __init__(self, in_dim: int, width: int = 64, depth: int = 2):
        super().__init__()
        dims = [in_dim] + [width] * depth
        self.layers = nn.ModuleList(GcnLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out_dim = dims[-1]

    def forward(self, g: SpatialGraph) -> Tensor:
        dtype = self.layers[0].weight.dtype
        if g.num_nodes == 0:
            return torch.zeros(0, self.out_dim, dtype=dtype)
        feat, edges = graph_tensors(g, dtype)
        h = torch.log1p(feat)
        for layer in self.layers:
            h = layer(h, edges)
        return h


# --------------------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    ok: bool
    max_abs_err: float
    max_rel_err: float
    worst: tuple = ()
    failures: List[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def grad_check(
    f: Callable[[], Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-3,
    tol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd against central differences ``(f(x+eps) - f(x-eps)) / 2eps``.

    ``f`` takes no arguments and reads the tensors in ``inputs`` (which may be
    module parameters) in place, so parameters and inputs are checked the same
    way. An entry passes when its relative error is below ``tol`` or its absolute
    error is below ``atol``.

    Raises:
        FloatingPointError: if ``f`` returns a non-finite value.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)

    def value() -> float:
        with torch.no_grad():
            v = f()
        if v.numel() != 1:
            raise ValueError("f must return a scalar")
        v = float(v)
        if not np.isfinite(v):
            raise FloatingPointError(f"f returned {v}")
        return v

    value()
    # plain leaf tensors are tracked only for the duration of the check
    untracked = [x for x in inputs if not x.requires_grad]
    for x in untracked:
        x.requires_grad_(True)
    try:
        with torch.enable_grad():
            out = f()
            if not torch.isfinite(out).all():
                raise FloatingPointError("f returned a non-finite value")
            analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    finally:
        for x in untracked:
            x.requires_grad_(False)

    report = GradCheckReport(True, 0.0, 0.0)
    for k, (x, g) in enumerate(zip(inputs, analytic)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.data.view(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = gflat[i].item()
            abs_err = abs(num - ana)
            rel_err = abs_err / max(abs(num), abs(ana), 1e-300)
            if abs_err > report.max_abs_err:
                report.max_abs_err = abs_err
                report.worst = (k, i, ana, num)
            report.max_rel_err = max(report.max_rel_err, rel_err if abs_err >= atol else 0.0)
            if rel_err >= tol and abs_err >= atol:
                report.ok = False
                report.failures.append(f"input {k}[{i}]: analytic {ana:.8g} vs numeric {num:.8g}")
    return report


# --------------------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"CVHT"


def save_checkpoint(state: Dict[str, Tensor]) -> bytes:
    """Serialise named tensors: a name table followed by flat little-endian float32 data.

    Layout: ``b"CVHT"``, int32 count, then per tensor int32 name length, utf-8
    name, int32 ndim, int32 dims; then all tensors' float32 values back to back
    in table order.
    """
    table = [struct.pack("<4si", _CKPT_MAGIC, len(state))]
    payload = []
    for name, t in state.items():
        raw = name.encode("utf-8")
        shape = tuple(t.shape)
        table.append(struct.pack(f"<i{len(raw)}si{len(shape)}i", len(raw), raw, len(shape), *shape))
        payload.append(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return b"".join(table + payload)


def load_checkpoint(buf: bytes) -> Dict[str, Tensor]:
    magic, count = struct.unpack_from("<4si", buf, 0)
    if magic != _CKPT_MAGIC:
        raise ValueError("not a checkpoint")
    off = 8
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<i", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<i", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}i", buf, off)
        off += 4 * ndim
        entries.append((name, shape))
    state = {}
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    return state
