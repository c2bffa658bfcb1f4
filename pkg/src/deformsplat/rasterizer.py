"""Tile-based differentiable renderer: front-to-back alpha compositing of
color and depth, with an analytic backward pass to Gaussian parameters.

Per pixel r, with contributions sorted by depth:
    C(r) = sum_i w_i c_i,  D(r) = sum_i w_i d_i,
    w_i  = a_i * prod_{j<i} (1 - a_j),  a_i = clamp(alpha_i * G_i(r), 0, 0.99)
Contributions with a_i < 1/255 are skipped (no attenuation either); traversal
stops once transmittance drops below 1e-4. A Gaussian contributes only within
Mahalanobis distance 3 of its center ("3 sigma" footprint); tile binning uses
the bounding disk of that ellipse. Pixels composite over black; accumulated
alpha is reported separately.

The naive oracle applies the identical footprint and clamp but no tiling, no
skip threshold and no early termination, which bounds its disagreement with
the tile path by the terminated transmittance tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    ProjectedGaussians,
    build_covariance,
    build_covariance_vjp,
    project_gaussians,
    project_gaussians_vjp,
)
from .scene import Camera, GaussianSet, RenderOutput

TILE_SIZE = 16
ALPHA_CLAMP = 0.99
SKIP_ALPHA = 1.0 / 255.0
STOP_TRANSMITTANCE = 1e-4
FOOTPRINT_MAHAL_SQ = 9.0  # contribution cutoff at Mahalanobis distance 3
DEPTH_NORM_EPS = 1e-8


@dataclass
class TileBinning:
    """CSR layout: entries[offsets[t]:offsets[t+1]] are the Gaussian indices
    touching tile t, sorted by (depth, index)."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    width: int
    height: int
    offsets: np.ndarray  # (tiles_x * tiles_y + 1,)
    entries: np.ndarray  # (E,) gaussian indices

    def tile_entries(self, ty: int, tx: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.entries[self.offsets[t] : self.offsets[t + 1]]


def bin_and_sort(
    proj: ProjectedGaussians, cam: Camera, tile_size: int = TILE_SIZE
) -> TileBinning:
    """Assign each visible Gaussian to every tile its 3-sigma disk intersects.

    Pixel (row, col) is the unit square centered on (col, row); tile (ty, tx)
    is the hull of its pixels. Intersection is exact disk-vs-rectangle.
    """
    tiles_x = -(-cam.width // tile_size)
    tiles_y = -(-cam.height // tile_size)
    n_tiles = tiles_x * tiles_y

    idx = np.nonzero(proj.visible & (proj.radius > 0))[0]
    if idx.size == 0:
        return TileBinning(
            tile_size, tiles_x, tiles_y, cam.width, cam.height,
            np.zeros(n_tiles + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    u = proj.mean2d[idx, 0].astype(np.float64)
    v = proj.mean2d[idx, 1].astype(np.float64)
    r = proj.radius[idx].astype(np.float64)

    # candidate tile ranges from the disk bounding box
    jx0 = np.clip(np.floor((u - r + 0.5) / tile_size).astype(np.int64), 0, tiles_x - 1)
    jx1 = np.clip(np.floor((u + r + 0.5) / tile_size).astype(np.int64), 0, tiles_x - 1)
    jy0 = np.clip(np.floor((v - r + 0.5) / tile_size).astype(np.int64), 0, tiles_y - 1)
    jy1 = np.clip(np.floor((v + r + 0.5) / tile_size).astype(np.int64), 0, tiles_y - 1)
    span_x = (jx1 - jx0 + 1).max()
    span_y = (jy1 - jy0 + 1).max()

    ox = np.arange(span_x, dtype=np.int64)
    oy = np.arange(span_y, dtype=np.int64)
    tx = jx0[:, None, None] + ox[None, None, :]        # (M, 1, span_x)
    ty = jy0[:, None, None] + oy[None, :, None]        # (M, span_y, 1)
    in_range = (tx <= jx1[:, None, None]) & (ty <= jy1[:, None, None])

    # exact disk-rectangle test: clamp the center into the tile rectangle
    lo_x = tx * tile_size - 0.5
    hi_x = np.minimum(lo_x + tile_size, cam.width - 0.5)
    lo_y = ty * tile_size - 0.5
    hi_y = np.minimum(lo_y + tile_size, cam.height - 0.5)
    dx = u[:, None, None] - np.clip(u[:, None, None], lo_x, hi_x)
    dy = v[:, None, None] - np.clip(v[:, None, None], lo_y, hi_y)
    hit = in_range & (dx * dx + dy * dy <= (r**2)[:, None, None])

    gi, oyi, oxi = np.nonzero(hit)
    gauss = idx[gi]
    tile_id = (jy0[gi] + oyi) * tiles_x + (jx0[gi] + oxi)
    depth = proj.depth[gauss]

    order = np.lexsort((gauss, depth, tile_id))
    tile_id = tile_id[order]
    gauss = gauss[order]
    counts = np.bincount(tile_id, minlength=n_tiles)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TileBinning(
        tile_size, tiles_x, tiles_y, cam.width, cam.height, offsets, gauss
    )


@dataclass
class _CompositeCache:
    binning: TileBinning
    proj: ProjectedGaussians
    alphas: np.ndarray
    colors: np.ndarray
    tiles: list  # per non-empty tile: (tile_index, entries, gauss_values, eff_alpha)
    fingerprint: np.ndarray


def _fingerprint(proj: ProjectedGaussians, alphas, colors) -> np.ndarray:
    parts = [proj.mean2d, proj.conic, proj.depth, alphas, colors]
    return np.array(
        [float(np.sum(p)) for p in parts] + [float(np.sum(np.abs(p))) for p in parts]
    )


def _tile_pixels(binning: TileBinning, t: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    ty, tx = divmod(t, binning.tiles_x)
    y0, x0 = ty * binning.tile_size, tx * binning.tile_size
    h = min(binning.tile_size, binning.height - y0)
    w = min(binning.tile_size, binning.width - x0)
    px = np.tile(x0 + np.arange(w, dtype=dtype), h)
    py = np.repeat(y0 + np.arange(h, dtype=dtype), w)
    return px, py


CHUNK = 64  # gaussians per compositing chunk (early-out once a tile saturates)


def _tile_gaussian_values(proj, sl, px, py, alphas, dtype):
    """(gaussian density, clamped+skip-masked alpha) for one entry chunk."""
    dx = px[:, None] - proj.mean2d[sl, 0][None, :]
    dy = py[:, None] - proj.mean2d[sl, 1][None, :]
    ca = proj.conic[sl, 0, 0][None, :]
    cb = 0.5 * (proj.conic[sl, 0, 1] + proj.conic[sl, 1, 0])[None, :]
    cc = proj.conic[sl, 1, 1][None, :]
    quad = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    gval = np.where(quad <= FOOTPRINT_MAHAL_SQ, np.exp(-0.5 * quad), 0.0)
    gval = gval.astype(dtype, copy=False)
    eff = np.minimum(alphas[sl][None, :] * gval, dtype.type(ALPHA_CLAMP))
    eff[eff < SKIP_ALPHA] = 0.0
    return gval, eff


def composite_forward(
    binning: TileBinning,
    proj: ProjectedGaussians,
    alphas: np.ndarray,
    colors: np.ndarray,
) -> RenderOutput:
    """Front-to-back compositing over tiles; caches per-tile intermediates.

    Entries are walked in depth chunks; once every pixel of a tile is below
    the stop transmittance the remaining (fully occluded, zero-weight)
    entries are never evaluated.
    """
    h, w = binning.height, binning.width
    dtype = proj.mean2d.dtype
    out_c = np.zeros((h, w, 3), dtype=dtype)
    out_d = np.zeros((h, w), dtype=dtype)
    out_a = np.zeros((h, w), dtype=dtype)
    tiles = []

    for t in range(binning.tiles_x * binning.tiles_y):
        entries = binning.entries[binning.offsets[t] : binning.offsets[t + 1]]
        if entries.size == 0:
            continue
        px, py = _tile_pixels(binning, t, dtype)
        carry = np.ones(px.shape[0], dtype=dtype)
        g_chunks, e_chunks, w_chunks = [], [], []
        n_proc = 0
        for start in range(0, entries.size, CHUNK):
            sl = entries[start : start + CHUNK]
            gval, eff = _tile_gaussian_values(proj, sl, px, py, alphas, dtype)
            trans = np.cumprod(1.0 - eff, axis=1) * carry[:, None]
            t_excl = np.empty_like(trans)
            t_excl[:, 0] = carry
            t_excl[:, 1:] = trans[:, :-1]
            w_chunks.append(eff * t_excl * (t_excl >= STOP_TRANSMITTANCE))
            g_chunks.append(gval)
            e_chunks.append(eff)
            n_proc += sl.size
            carry = trans[:, -1]
            if carry.max() < STOP_TRANSMITTANCE:
                break
        sl = entries[:n_proc]
        weight = w_chunks[0] if len(w_chunks) == 1 else np.concatenate(w_chunks, axis=1)
        gval = g_chunks[0] if len(g_chunks) == 1 else np.concatenate(g_chunks, axis=1)
        eff = e_chunks[0] if len(e_chunks) == 1 else np.concatenate(e_chunks, axis=1)

        ty, tx = divmod(t, binning.tiles_x)
        y0, x0 = ty * binning.tile_size, tx * binning.tile_size
        th = min(binning.tile_size, h - y0)
        tw = min(binning.tile_size, w - x0)
        out_c[y0 : y0 + th, x0 : x0 + tw] = (weight @ colors[sl]).reshape(th, tw, 3)
        out_d[y0 : y0 + th, x0 : x0 + tw] = (weight @ proj.depth[sl]).reshape(th, tw)
        out_a[y0 : y0 + th, x0 : x0 + tw] = weight.sum(axis=1).reshape(th, tw)
        tiles.append((t, sl, gval, eff, weight))

    cache = _CompositeCache(
        binning=binning, proj=proj, alphas=alphas, colors=colors,
        tiles=tiles, fingerprint=_fingerprint(proj, alphas, colors),
    )
    return RenderOutput(color=out_c, depth=out_d, alpha=out_a, backward_cache=cache)


@dataclass
class ScreenGrads:
    """Gradients on screen-space quantities, full length N."""

    mean2d: np.ndarray  # (N, 2)
    conic: np.ndarray   # (N, 2, 2)
    depth: np.ndarray   # (N,)
    alpha: np.ndarray   # (N,)
    color: np.ndarray   # (N, 3)


def composite_backward(
    out: RenderOutput,
    d_color: np.ndarray,
    d_depth: np.ndarray,
    d_alpha: np.ndarray | None = None,
) -> ScreenGrads:
    """Pull per-pixel gradients back to per-Gaussian screen-space quantities.

    Raises if the forward inputs were mutated since composite_forward ran.
    Tiles are processed in a fixed order so accumulation is deterministic.
    """
    cache: _CompositeCache = out.backward_cache
    if cache is None:
        raise ValueError("RenderOutput carries no backward cache")
    if not np.array_equal(
        cache.fingerprint, _fingerprint(cache.proj, cache.alphas, cache.colors)
    ):
        raise RuntimeError("stale backward cache: forward inputs were mutated")

    proj, alphas, colors = cache.proj, cache.alphas, cache.colors
    binning = cache.binning
    n = proj.mean2d.shape[0]
    dtype = proj.mean2d.dtype
    g_mean = np.zeros((n, 2), dtype=dtype)
    g_conic = np.zeros((n, 2, 2), dtype=dtype)
    g_depth = np.zeros(n, dtype=dtype)
    g_alpha = np.zeros(n, dtype=dtype)
    g_color = np.zeros((n, 3), dtype=dtype)

    for t, sl, gval, eff, weight in cache.tiles:
        ty, tx = divmod(t, binning.tiles_x)
        y0, x0 = ty * binning.tile_size, tx * binning.tile_size
        th = min(binning.tile_size, binning.height - y0)
        tw = min(binning.tile_size, binning.width - x0)
        gc = d_color[y0 : y0 + th, x0 : x0 + tw].reshape(-1, 3).astype(dtype, copy=False)
        gd = d_depth[y0 : y0 + th, x0 : x0 + tw].reshape(-1).astype(dtype, copy=False)
        if d_alpha is not None:
            ga = d_alpha[y0 : y0 + th, x0 : x0 + tw].reshape(-1).astype(dtype, copy=False)

        # dL/dw_i, then dL/da_i via the suffix of later contributions;
        # weight = eff * T * live, so T*live = weight / eff where eff > 0,
        # and entries past the stop threshold have an all-dead suffix
        grad_w = gc @ colors[sl].T + gd[:, None] * proj.depth[sl][None, :]
        if d_alpha is not None:
            grad_w += ga[:, None]
        q = weight * grad_w
        suffix = q.sum(axis=1, keepdims=True) - np.cumsum(q, axis=1)
        live_t = np.divide(
            weight, eff, out=np.zeros_like(weight), where=eff > 0
        )
        d_eff = live_t * grad_w - suffix / (1.0 - eff)

        active = (eff > 0) & (eff < ALPHA_CLAMP)  # skip-masked and clamped: no grad
        d_ag = np.where(active, d_eff, 0.0)
        d_power = d_ag * alphas[sl][None, :] * gval

        px, py = _tile_pixels(binning, t, dtype)
        dx = px[:, None] - proj.mean2d[sl, 0][None, :]
        dy = py[:, None] - proj.mean2d[sl, 1][None, :]
        ca = proj.conic[sl, 0, 0][None, :]
        cb = 0.5 * (proj.conic[sl, 0, 1] + proj.conic[sl, 1, 0])[None, :]
        cc = proj.conic[sl, 1, 1][None, :]
        d_dx = d_power * (ca * dx + cb * dy)
        d_dy = d_power * (cb * dx + cc * dy)
        # entries are unique within a tile, so plain indexed += accumulates
        g_alpha[sl] += np.einsum("pk,pk->k", d_ag, gval)
        g_mean[sl, 0] += d_dx.sum(axis=0)
        g_mean[sl, 1] += d_dy.sum(axis=0)
        g_conic[sl, 0, 0] += np.einsum("pk,pk->k", d_power, -0.5 * dx * dx)
        off = np.einsum("pk,pk->k", d_power, -0.5 * dx * dy)
        g_conic[sl, 0, 1] += off
        g_conic[sl, 1, 0] += off
        g_conic[sl, 1, 1] += np.einsum("pk,pk->k", d_power, -0.5 * dy * dy)
        g_color[sl] += weight.T @ gc
        g_depth[sl] += weight.T @ gd

    return ScreenGrads(
        mean2d=g_mean, conic=g_conic, depth=g_depth, alpha=g_alpha, color=g_color
    )


@dataclass
class RenderCache:
    """Everything render_gaussians_vjp needs, plus cov3d for covariance losses."""

    gset: GaussianSet
    cam: Camera
    scales: np.ndarray
    cov3d: np.ndarray
    proj: ProjectedGaussians
    composite: RenderOutput
    raw_depth: np.ndarray | None  # pre-normalization depth when normalize_depth


@dataclass
class GaussianGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray  # screen-space center gradient, kept for density control


def render_gaussians(
    gset: GaussianSet,
    cam: Camera,
    tile_size: int = TILE_SIZE,
    normalize_depth: bool = False,
) -> RenderOutput:
    """Full forward pipeline: activations, covariance, projection, binning,
    compositing. The returned backward_cache is a RenderCache."""
    scales = gset.scales
    cov3d = build_covariance(scales, gset.rotations)
    proj = project_gaussians(gset.positions, cov3d, cam)
    binning = bin_and_sort(proj, cam, tile_size)
    alphas = gset.opacities
    comp = composite_forward(binning, proj, alphas, gset.colors)
    depth = comp.depth
    raw_depth = None
    if normalize_depth:
        raw_depth = comp.depth
        depth = raw_depth / np.maximum(comp.alpha, DEPTH_NORM_EPS)
    cache = RenderCache(
        gset=gset, cam=cam, scales=scales, cov3d=cov3d, proj=proj,
        composite=comp, raw_depth=raw_depth,
    )
    return RenderOutput(
        color=comp.color, depth=depth, alpha=comp.alpha, backward_cache=cache
    )


def render_gaussians_vjp(
    out: RenderOutput,
    d_color: np.ndarray,
    d_depth: np.ndarray,
    d_alpha: np.ndarray | None = None,
    d_positions_extra: np.ndarray | None = None,
    d_cov3d_extra: np.ndarray | None = None,
) -> GaussianGrads:
    """Pull image-space gradients all the way back to Gaussian parameters.

    d_positions_extra / d_cov3d_extra let callers merge gradients that hit
    world positions or 3D covariances directly (deformation regularizers)
    before the shared projection/covariance chain runs.
    """
    cache: RenderCache = out.backward_cache
    gset, cam = cache.gset, cache.cam

    if cache.raw_depth is not None:
        denom = np.maximum(out.alpha, DEPTH_NORM_EPS)
        extra_alpha = np.where(
            out.alpha > DEPTH_NORM_EPS, -d_depth * cache.raw_depth / denom**2, 0.0
        )
        d_alpha = extra_alpha if d_alpha is None else d_alpha + extra_alpha
        d_depth = d_depth / denom

    sg = composite_backward(cache.composite, d_color, d_depth, d_alpha)
    d_pos, d_cov = project_gaussians_vjp(
        gset.positions, cache.cov3d, cam, cache.proj,
        sg.mean2d, sg.conic, sg.depth,
    )
    if d_positions_extra is not None:
        d_pos = d_pos + d_positions_extra
    if d_cov3d_extra is not None:
        d_cov = d_cov + d_cov3d_extra
    d_scales, d_rot = build_covariance_vjp(cache.scales, gset.rotations, d_cov)
    d_log_scales = d_scales * cache.scales
    alphas = gset.opacities
    d_logits = sg.alpha * alphas * (1.0 - alphas)
    return GaussianGrads(
        positions=d_pos,
        log_scales=d_log_scales,
        rotations=d_rot,
        opacity_logits=d_logits,
        colors=sg.color,
        mean2d=sg.mean2d,
    )


def render_naive_oracle(
    gset: GaussianSet, cam: Camera, normalize_depth: bool = False
) -> RenderOutput:
    """Reference renderer: global depth sort, per-pixel exact compositing.

    Same footprint rule and alpha clamp as the tile path, but no tiling, no
    skip threshold, no early termination. Intended as a test oracle.
    """
    cov3d = build_covariance(gset.scales, gset.rotations)
    proj = project_gaussians(gset.positions, cov3d, cam)
    alphas = gset.opacities
    dtype = proj.mean2d.dtype
    h, w = cam.height, cam.width
    out_c = np.zeros((h, w, 3), dtype=dtype)
    out_d = np.zeros((h, w), dtype=dtype)
    out_a = np.zeros((h, w), dtype=dtype)
    trans = np.ones((h, w), dtype=dtype)

    idx = proj.visible_indices
    order = np.lexsort((idx, proj.depth[idx]))
    px = np.arange(w, dtype=dtype)[None, :]
    py = np.arange(h, dtype=dtype)[:, None]
    for i in idx[order]:
        dx = px - proj.mean2d[i, 0]
        dy = py - proj.mean2d[i, 1]
        quad = (
            proj.conic[i, 0, 0] * dx * dx
            + (proj.conic[i, 0, 1] + proj.conic[i, 1, 0]) * dx * dy
            + proj.conic[i, 1, 1] * dy * dy
        )
        gval = np.where(quad <= FOOTPRINT_MAHAL_SQ, np.exp(-0.5 * quad), 0.0)
        eff = np.minimum(alphas[i] * gval, dtype.type(ALPHA_CLAMP))
        contrib = eff * trans
        out_c += contrib[:, :, None] * gset.colors[i]
        out_d += contrib * proj.depth[i]
        out_a += contrib
        trans = trans * (1.0 - eff)

    if normalize_depth:
        out_d = out_d / np.maximum(out_a, DEPTH_NORM_EPS)
    return RenderOutput(color=out_c, depth=out_d, alpha=out_a, backward_cache=None)
