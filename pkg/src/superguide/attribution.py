"""GradCAM-style attribution maps and the small algebra around them.

All map operations work on torch tensors whose last two dimensions are the
spatial grid, so they apply unchanged to a single (h, w) map or to a batch
(B, h, w).  Everything stays differentiable: the alignment loss backprops
through :func:`gradcam`, including through the pooled-gradient weights
unless ``detach_alpha`` is set.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

SOURCES = ("guidance_relevant", "guidance_irrelevant", "head1", "head2")


class AttributionError(ValueError):
    pass


@dataclass
class AttributionMap:
    grid: torch.Tensor
    source: str = "head1"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise AttributionError(f"unknown map source {self.source!r}")

    @property
    def shape(self):
        return tuple(self.grid.shape[-2:])


def minmax_normalize(grid):
    """Rescale each (h, w) grid to [0, 1]; constant grids map to zeros.

    At a constant grid the gradient is zero.
    """
    if torch.isnan(grid).any():
        raise AttributionError("cannot normalize a grid containing NaN")
    flat = grid.flatten(-2)
    lo = flat.min(dim=-1).values[..., None, None]
    hi = flat.max(dim=-1).values[..., None, None]
    span = hi - lo
    ok = span > 0
    safe = torch.where(ok, span, torch.ones_like(span))
    return torch.where(ok, (grid - lo) / safe, torch.zeros_like(grid))


def pooled_gradients(maps, score, create_graph=True):
    """alpha_k = mean over (i, j) of d score / d A_k^{ij}.

    ``maps`` is (..., K, h, w); ``score`` a scalar.  For a batch, pass the
    sum of per-sample scores: samples do not interact, so each sample's
    slice of the gradient is its own.
    """
    (grad,) = torch.autograd.grad(score, maps, create_graph=create_graph, retain_graph=True)
    if not torch.isfinite(grad).all():
        raise AttributionError("non-finite gradient in attribution")
    return grad.mean(dim=(-2, -1))


def weighted_maps(maps, alpha):
    """ReLU(sum_k alpha_k A_k) before normalization."""
    return F.relu((alpha[..., None, None] * maps).sum(dim=-3))


def gradcam(feature_stack, score, detach_alpha=False, source="head1"):
    """Normalized GradCAM map of ``score`` w.r.t. the feature stack.

    With ``detach_alpha`` the importance weights are treated as constants
    by later backward passes; the feature maps themselves stay attached.
    """
    maps = feature_stack.maps if hasattr(feature_stack, "maps") else feature_stack
    alpha = pooled_gradients(maps, score, create_graph=not detach_alpha)
    if detach_alpha:
        alpha = alpha.detach()
    return AttributionMap(minmax_normalize(weighted_maps(maps, alpha)), source)


def complement(amap):
    flipped = {"guidance_relevant": "guidance_irrelevant", "guidance_irrelevant": "guidance_relevant"}
    return AttributionMap(1.0 - amap.grid, flipped.get(amap.source, amap.source))


def average_maps(maps):
    """Pointwise mean of already-normalized maps (no re-normalization)."""
    if not maps:
        raise AttributionError("cannot average an empty list of maps")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise AttributionError(f"map shapes differ: {shape} vs {m.shape}")
    stacked = torch.stack([m.grid for m in maps])
    return AttributionMap(stacked.mean(dim=0), maps[0].source)


def resample(amap, target_h, target_w):
    """Bilinear resize (half-pixel centres); identity when the size matches."""
    if target_h < 1 or target_w < 1:
        raise AttributionError(f"target size must be at least 1x1, got {target_h}x{target_w}")
    grid = amap.grid
    if tuple(grid.shape[-2:]) == (target_h, target_w):
        return AttributionMap(grid, amap.source)
    lead = grid.shape[:-2]
    x = grid.reshape(-1, 1, *grid.shape[-2:])
    y = F.interpolate(x, size=(target_h, target_w), mode="bilinear", align_corners=False)
    y = y.clamp(0.0, 1.0).reshape(*lead, target_h, target_w)
    return AttributionMap(y, amap.source)


# -- map export ---------------------------------------------------------------


def format_sidecar(grid):
    """``h w`` header line then one line per row of ``repr``-exact floats."""
    g = np.asarray(grid.detach().cpu() if torch.is_tensor(grid) else grid, dtype=np.float64)
    if g.ndim != 2:
        raise AttributionError(f"sidecar maps must be 2-D, got shape {g.shape}")
    h, w = g.shape
    lines = [f"{h} {w}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in g]
    return "\n".join(lines) + "\n"


def parse_sidecar(text):
    lines = text.strip().splitlines()
    try:
        h, w = (int(t) for t in lines[0].split())
        values = [float(t) for line in lines[1:] for t in line.split()]
    except (IndexError, ValueError) as e:
        raise AttributionError(f"malformed sidecar map: {e}") from e
    if len(values) != h * w:
        raise AttributionError(f"sidecar declares {h}x{w} but holds {len(values)} values")
    return np.array(values, dtype=np.float64).reshape(h, w)


def write_sidecar(path, grid):
    with open(path, "w", encoding="ascii") as f:
        f.write(format_sidecar(grid))


def read_sidecar(path):
    with open(path, encoding="ascii") as f:
        return parse_sidecar(f.read())


def to_uint8(grid):
    g = np.asarray(grid.detach().cpu() if torch.is_tensor(grid) else grid, dtype=np.float64)
    return np.round(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, grid):
    Image.fromarray(to_uint8(grid), mode="L").save(path)
