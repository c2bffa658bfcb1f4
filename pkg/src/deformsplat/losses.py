"""Training objectives and image metrics, each with an analytic gradient.

Reconstruction terms are masked so occluder pixels never supervise anything;
the deformation regularizers compare K-nearest-neighbor distances between
canonical and observation space (positions by Euclidean distance, covariances
by Frobenius distance); the smoothness term is a total-variation penalty on
rendered color evaluated at pixels that are occluded in every frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import convolve1d
from scipy.spatial import cKDTree

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    """Relative weights of the five auxiliary terms (color term is unweighted)."""

    ssim: float = 0.2
    depth: float = 0.001
    pos: float = 1.0
    cov: float = 200.0
    smooth: float = 0.02


@dataclass
class NeighborGraph:
    """K nearest canonical-space neighbors per Gaussian (no self loops).

    `distances` caches the canonical distances at build time; consistency
    losses recompute distances from live positions so they stay exact.
    """

    indices: np.ndarray    # (N, K) int
    distances: np.ndarray  # (N, K) build-time canonical distances
    k: int

    @classmethod
    def build(cls, positions: np.ndarray, k: int = 5) -> "NeighborGraph":
        n = positions.shape[0]
        k_eff = min(k, n - 1)
        if k_eff <= 0:
            return cls(
                indices=np.zeros((n, 0), dtype=np.int64),
                distances=np.zeros((n, 0), dtype=positions.dtype),
                k=0,
            )
        tree = cKDTree(positions)
        dist, idx = tree.query(positions, k=k_eff + 1)
        # drop self matches (may not be first under exact-duplicate ties)
        dist = np.where(idx == np.arange(n)[:, None], np.inf, dist)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k_eff]
        rows = np.arange(n)[:, None]
        return cls(
            indices=idx[rows, order].astype(np.int64),
            distances=dist[rows, order].astype(positions.dtype),
            k=k_eff,
        )


def masked_l1_color(
    rendered: np.ndarray, target: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean absolute color error over tissue pixels (mask == 0)."""
    tissue = mask == 0
    n = int(tissue.sum())
    if n == 0:
        raise ValueError("frame is fully masked: no tissue pixels to supervise")
    diff = (rendered - target) * tissue[:, :, None]
    denom = n * rendered.shape[2]
    value = float(np.abs(diff).sum() / denom)
    grad = np.sign(diff) / denom
    return value, grad.astype(rendered.dtype, copy=False)


def masked_l1_depth(
    rendered: np.ndarray, target: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean absolute depth error over tissue pixels with valid (>0) depth."""
    if (mask != 0).all():
        raise ValueError("frame is fully masked: no tissue pixels to supervise")
    valid = (mask == 0) & (target > 0)
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(rendered)
    diff = (rendered - target) * valid
    value = float(np.abs(diff).sum() / n)
    grad = np.sign(diff) / n
    return value, grad.astype(rendered.dtype, copy=False)


def _pairwise(values: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return values[:, None, ...] - values[indices]


def _scatter_add(out: np.ndarray, indices: np.ndarray, values: np.ndarray) -> None:
    """out[indices[i, k]] += values[i, k] with repeated targets (bincount)."""
    flat_idx = indices.ravel()
    flat = values.reshape(flat_idx.size, -1)
    n = out.shape[0]
    acc = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        acc[:, c] = np.bincount(flat_idx, weights=flat[:, c], minlength=n)
    out += acc.reshape(out.shape).astype(out.dtype, copy=False)


def pos_consistency_loss(
    graph: NeighborGraph, x_c: np.ndarray, x_o: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """L1 discrepancy between canonical and observed neighbor distances.

    Zero for any deformation that preserves pairwise distances (identity,
    global rigid motion). Normalized by N*K.
    """
    if graph.k == 0:
        return 0.0, np.zeros_like(x_c), np.zeros_like(x_o)
    n, k = graph.indices.shape
    diff_c = _pairwise(x_c, graph.indices)
    diff_o = _pairwise(x_o, graph.indices)
    dist_c = np.linalg.norm(diff_c, axis=-1)
    dist_o = np.linalg.norm(diff_o, axis=-1)
    resid = dist_c - dist_o
    scale = 1.0 / (n * k)
    value = float(np.abs(resid).sum() * scale)

    sgn = np.sign(resid) * scale
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_c = np.where(dist_c[..., None] > 0, diff_c / dist_c[..., None], 0.0)
        unit_o = np.where(dist_o[..., None] > 0, diff_o / dist_o[..., None], 0.0)
    d_x_c = (sgn[..., None] * unit_c).sum(axis=1)
    _scatter_add(d_x_c, graph.indices, -sgn[..., None] * unit_c)
    d_x_o = (-sgn[..., None] * unit_o).sum(axis=1)
    _scatter_add(d_x_o, graph.indices, sgn[..., None] * unit_o)
    return value, d_x_c, d_x_o


def cov_consistency_loss(
    graph: NeighborGraph, cov_c: np.ndarray, cov_o: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Same structure as the position term with Frobenius distance between
    3x3 covariances."""
    if graph.k == 0:
        return 0.0, np.zeros_like(cov_c), np.zeros_like(cov_o)
    n, k = graph.indices.shape
    diff_c = _pairwise(cov_c, graph.indices)
    diff_o = _pairwise(cov_o, graph.indices)
    dist_c = np.sqrt((diff_c**2).sum(axis=(-2, -1)))
    dist_o = np.sqrt((diff_o**2).sum(axis=(-2, -1)))
    resid = dist_c - dist_o
    scale = 1.0 / (n * k)
    value = float(np.abs(resid).sum() * scale)

    sgn = np.sign(resid) * scale
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_c = np.where(
            dist_c[..., None, None] > 0, diff_c / dist_c[..., None, None], 0.0
        )
        unit_o = np.where(
            dist_o[..., None, None] > 0, diff_o / dist_o[..., None, None], 0.0
        )
    d_cov_c = (sgn[..., None, None] * unit_c).sum(axis=1)
    _scatter_add(d_cov_c, graph.indices, -sgn[..., None, None] * unit_c)
    d_cov_o = (-sgn[..., None, None] * unit_o).sum(axis=1)
    _scatter_add(d_cov_o, graph.indices, sgn[..., None, None] * unit_o)
    return value, d_cov_c, d_cov_o


def tv_smooth_loss(
    rendered: np.ndarray, never_mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Total variation of rendered color anchored at never-visible pixels.

    Squared color differences between each never-visible pixel and its up/left
    neighbors (when in bounds), normalized by the never-visible pixel count.
    Neighbors may be visible pixels; that coupling is what drags occluded
    color toward its surroundings.
    """
    grad = np.zeros_like(rendered)
    n = int((never_mask != 0).sum())
    if n == 0:
        return 0.0, grad
    center = never_mask != 0
    value = 0.0

    dv = rendered[1:, :, :] - rendered[:-1, :, :]  # pixel minus up-neighbor
    sel_v = center[1:, :]
    value += float((dv[sel_v] ** 2).sum())
    gv = np.zeros_like(dv)
    gv[sel_v] = 2.0 * dv[sel_v]
    grad[1:, :, :] += gv
    grad[:-1, :, :] -= gv

    dh = rendered[:, 1:, :] - rendered[:, :-1, :]  # pixel minus left-neighbor
    sel_h = center[:, 1:]
    value += float((dh[sel_h] ** 2).sum())
    gh = np.zeros_like(dh)
    gh[sel_h] = 2.0 * dh[sel_h]
    grad[:, 1:, :] += gh
    grad[:, :-1, :] -= gh

    return value / n, grad / n


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = convolve1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, kernel, axis=1, mode="constant", cval=0.0)


@lru_cache(maxsize=8)
def _window_mass(shape: tuple[int, int]) -> np.ndarray:
    """In-bounds kernel mass per pixel (the border renormalizer)."""
    return _window_filter(np.ones(shape, dtype=np.float64), _gaussian_kernel())


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    """Windowed moments with border-renormalized (clipped) Gaussian window."""
    kernel = _gaussian_kernel()
    mass = _window_mass(a.shape[:2])[:, :, None]
    mu_a = _window_filter(a, kernel) / mass
    mu_b = _window_filter(b, kernel) / mass
    s_aa = _window_filter(a * a, kernel) / mass - mu_a**2
    s_bb = _window_filter(b * b, kernel) / mass - mu_b**2
    s_ab = _window_filter(a * b, kernel) / mass - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * s_ab + SSIM_C2
    b1 = mu_a**2 + mu_b**2 + SSIM_C1
    b2 = s_aa + s_bb + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    return kernel, mass, mu_a, mu_b, s_aa, a1, a2, b1, b2, smap


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean structural similarity over window centers with mask == 0.

    11x11 Gaussian window (sigma 1.5) renormalized where it overhangs the
    image border; per-pixel SSIM is averaged over channels, then over the
    selected centers. Values on [0, 1]-range images.
    """
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    smap = _ssim_terms(a64, b64)[-1]
    sel = np.ones(a64.shape[:2], dtype=bool) if mask is None else mask == 0
    if not sel.any():
        raise ValueError("mask selects no window centers")
    return float(smap.mean(axis=2)[sel].mean())


def ssim_loss(
    a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """1 - masked SSIM and its gradient with respect to the first image."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    kernel, mass, mu_a, mu_b, s_aa, a1, a2, b1, b2, smap = _ssim_terms(a64, b64)
    sel = np.ones(a64.shape[:2], dtype=bool) if mask is None else mask == 0
    n_sel = int(sel.sum())
    if n_sel == 0:
        raise ValueError("mask selects no window centers")
    value = 1.0 - float(smap.mean(axis=2)[sel].mean())

    channels = a64.shape[2]
    g_s = np.where(sel[:, :, None], -1.0 / (n_sel * channels), 0.0)
    denom = b1 * b2
    g_mu = g_s * 2.0 * (mu_b * a2 - mu_a * smap * b2) / denom
    g_saa = g_s * (-smap / b2)
    g_sab = g_s * 2.0 * a1 / denom

    # moments are window filters divided by the border mass; the kernel is
    # symmetric so the adjoint of each filter is the filter itself
    g_mu_total = g_mu - 2.0 * mu_a * g_saa - mu_b * g_sab
    d_a = _window_filter(g_mu_total / mass, kernel)
    d_a += 2.0 * a64 * _window_filter(g_saa / mass, kernel)
    d_a += b64 * _window_filter(g_sab / mass, kernel)
    return value, d_a.astype(a.dtype, copy=False)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over mask == 0 pixels, peak 1.0.

    Returns math.inf for identical selections.
    """
    sel = np.ones(a.shape[:2], dtype=bool) if mask is None else mask == 0
    if not sel.any():
        raise ValueError("mask selects no pixels")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float((diff[sel] ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class TotalLossGrads:
    d_color: np.ndarray
    d_depth: np.ndarray
    d_x_c: np.ndarray
    d_x_o: np.ndarray
    d_cov_c: np.ndarray
    d_cov_o: np.ndarray


def combine_components(components: dict[str, float], weights: LossWeights) -> float:
    """Weighted total from component values (color is unweighted)."""
    return (
        components["color"]
        + weights.ssim * components["ssim"]
        + weights.depth * components["depth"]
        + weights.pos * components["pos"]
        + weights.cov * components["cov"]
        + weights.smooth * components["smooth"]
    )


def total_loss(
    rendered_color: np.ndarray,
    rendered_depth: np.ndarray,
    image: np.ndarray,
    depth: np.ndarray,
    mask: np.ndarray,
    never_mask: np.ndarray,
    graph: NeighborGraph,
    x_c: np.ndarray,
    x_o: np.ndarray,
    cov_c: np.ndarray,
    cov_o: np.ndarray,
    weights: LossWeights,
) -> tuple[float, dict[str, float], TotalLossGrads]:
    """Evaluate every term on one frame; gradients are the weighted sums.

    Component values are reported unweighted; a zero weight contributes
    exactly nothing to any gradient buffer.
    """
    c_val, c_grad = masked_l1_color(rendered_color, image, mask)
    s_val, s_grad = ssim_loss(rendered_color, image, mask)
    d_val, d_grad = masked_l1_depth(rendered_depth, depth, mask)
    p_val, p_gc, p_go = pos_consistency_loss(graph, x_c, x_o)
    v_val, v_gc, v_go = cov_consistency_loss(graph, cov_c, cov_o)
    t_val, t_grad = tv_smooth_loss(rendered_color, never_mask)

    components = {
        "color": c_val, "ssim": s_val, "depth": d_val,
        "pos": p_val, "cov": v_val, "smooth": t_val,
    }
    total = combine_components(components, weights)

    d_color = c_grad.copy()
    if weights.ssim != 0.0:
        d_color += weights.ssim * s_grad
    if weights.smooth != 0.0:
        d_color += weights.smooth * t_grad
    d_depth = (
        weights.depth * d_grad if weights.depth != 0.0 else np.zeros_like(d_grad)
    )
    zero3 = np.zeros_like(x_c)
    zero33 = np.zeros_like(cov_c)
    grads = TotalLossGrads(
        d_color=d_color,
        d_depth=d_depth,
        d_x_c=weights.pos * p_gc if weights.pos != 0.0 else zero3,
        d_x_o=weights.pos * p_go if weights.pos != 0.0 else zero3.copy(),
        d_cov_c=weights.cov * v_gc if weights.cov != 0.0 else zero33,
        d_cov_o=weights.cov * v_go if weights.cov != 0.0 else zero33.copy(),
    )
    return total, components, grads
