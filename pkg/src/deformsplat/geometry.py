"""Differentiable geometry kernels for splatting.

Quaternion -> rotation, covariance assembly, world -> camera -> screen
projection of means and covariances, and 2D Gaussian evaluation. Every
forward op has a matching `*_vjp` that pulls a loss gradient back to the
op's inputs; all are verified against central finite differences in the
test suite.

Conventions: quaternions are (w, x, y, z), Hamilton product. Gradients with
respect to matrix-valued quantities treat every entry as independent, so
chains compose as plain matrix calculus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera

NEAR_PLANE = 0.01       # world units; Gaussians behind this are culled
BLUR_FLOOR = 0.3        # px^2 added to the projected covariance diagonal
FRUSTUM_GUARD = 1.3     # cull centers projecting outside guard * half-extent
DEGENERATE_QUAT_NORM = 1e-6


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions, shape (..., 4) -> (..., 3, 3).

    Assumes unit norm (the stored-parameter invariant); does not renormalize,
    so gradients are taken of this exact formula.
    """
    q = np.asarray(q)
    norms = np.linalg.norm(q, axis=-1)
    if (norms < DEGENERATE_QUAT_NORM).any():
        raise ValueError("degenerate quaternion")
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def quat_to_rotation_vjp(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to dL/dq."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_rot
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=-1)


def build_covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s^2) R^T, assembled as (R diag(s)) (R diag(s))^T.

    The Gram form keeps the result symmetric bit-for-bit and positive
    semi-definite up to rounding.
    """
    rot = quat_to_rotation(q)
    a = rot * s[..., None, :]
    return a @ np.swapaxes(a, -1, -2)


def build_covariance_vjp(
    s: np.ndarray, q: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull dL/dSigma back to (dL/ds, dL/dq)."""
    rot = quat_to_rotation(q)
    a = rot * s[..., None, :]
    da = (d_cov + np.swapaxes(d_cov, -1, -2)) @ a
    d_rot = da * s[..., None, :]
    ds = np.einsum("...ik,...ik->...k", da, rot)
    dq = quat_to_rotation_vjp(q, d_rot)
    return ds, dq


def eval_gaussian_2d(
    conic: np.ndarray, mean2d: np.ndarray, pixel: np.ndarray
) -> np.ndarray:
    """exp(-1/2 d^T conic d) with d = pixel - mean2d; broadcasts."""
    d = np.asarray(pixel) - np.asarray(mean2d)
    quad = (
        conic[..., 0, 0] * d[..., 0] ** 2
        + (conic[..., 0, 1] + conic[..., 1, 0]) * d[..., 0] * d[..., 1]
        + conic[..., 1, 1] * d[..., 1] ** 2
    )
    return np.exp(-0.5 * quad)


def eval_gaussian_2d_vjp(
    conic: np.ndarray, mean2d: np.ndarray, pixel: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dL/dconic, dL/dmean2d, dL/dpixel)."""
    d = np.asarray(pixel) - np.asarray(mean2d)
    val = eval_gaussian_2d(conic, mean2d, pixel)
    g = d_out * val
    # gradient of the quadratic form through the (full-matrix) conic
    dconic = np.empty_like(np.broadcast_to(conic, g.shape + (2, 2))).copy()
    dconic[..., 0, 0] = -0.5 * g * d[..., 0] ** 2
    dconic[..., 0, 1] = -g * d[..., 0] * d[..., 1] * 0.5
    dconic[..., 1, 0] = dconic[..., 0, 1]
    dconic[..., 1, 1] = -0.5 * g * d[..., 1] ** 2
    sym_off = 0.5 * (conic[..., 0, 1] + conic[..., 1, 0])
    cd0 = conic[..., 0, 0] * d[..., 0] + sym_off * d[..., 1]
    cd1 = sym_off * d[..., 0] + conic[..., 1, 1] * d[..., 1]
    dpixel = np.stack([-g * cd0, -g * cd1], axis=-1)
    return dconic, -dpixel, dpixel


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians; full-length arrays, valid where visible."""

    mean2d: np.ndarray   # (N, 2) pixels
    cov2d: np.ndarray    # (N, 2, 2) regularized (blur floor already added)
    conic: np.ndarray    # (N, 2, 2) inverse of cov2d
    depth: np.ndarray    # (N,) camera-space z
    radius: np.ndarray   # (N,) 3 * sqrt(max eigenvalue of cov2d), pixels
    visible: np.ndarray  # (N,) bool; False = culled

    @property
    def visible_indices(self) -> np.ndarray:
        return np.nonzero(self.visible)[0]


def _projection_jacobian(t_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Affine Jacobian of the pinhole projection at camera-space points (M, 3)."""
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    jac = np.zeros((t_cam.shape[0], 2, 3), dtype=t_cam.dtype)
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / tz**2
    return jac


def project_gaussians(
    positions: np.ndarray,
    covariances: np.ndarray,
    cam: Camera,
    near: float = NEAR_PLANE,
    blur: float = BLUR_FLOOR,
    guard: float = FRUSTUM_GUARD,
) -> ProjectedGaussians:
    """Project world-space Gaussians onto the image plane.

    The 2D covariance is M Sigma M^T with M = J W, where W is the rotation
    block of the view transform and J the projection Jacobian at the center.
    Centers behind `near` or outside the guard-band frustum are culled
    (visible=False), never an error.
    """
    dtype = positions.dtype
    n = positions.shape[0]
    rot = cam.rotation.astype(dtype)
    t_cam = positions @ rot.T + cam.translation.astype(dtype)
    tz = t_cam[:, 2]

    visible = tz > near
    mean2d = np.zeros((n, 2), dtype=dtype)
    cov2d = np.zeros((n, 2, 2), dtype=dtype)
    conic = np.zeros((n, 2, 2), dtype=dtype)
    radius = np.zeros(n, dtype=dtype)
    depth = np.where(visible, tz, 0.0).astype(dtype, copy=False)

    idx = np.nonzero(visible)[0]
    if idx.size:
        tc = t_cam[idx]
        u = cam.fx * tc[:, 0] / tc[:, 2] + cam.cx
        v = cam.fy * tc[:, 1] / tc[:, 2] + cam.cy
        half_w, half_h = 0.5 * cam.width, 0.5 * cam.height
        inside = (np.abs(u - half_w) <= guard * half_w) & (
            np.abs(v - half_h) <= guard * half_h
        )
        visible[idx] = inside
        idx = idx[inside]
        tc = tc[inside]
        u, v = u[inside], v[inside]

    if idx.size:
        mean2d[idx, 0] = u
        mean2d[idx, 1] = v
        jac = _projection_jacobian(tc, cam.fx, cam.fy)
        m = jac @ rot
        sig2d = m @ covariances[idx] @ np.swapaxes(m, -1, -2)
        sig2d = 0.5 * (sig2d + np.swapaxes(sig2d, -1, -2))  # symmetric part
        sig2d[:, 0, 0] += blur
        sig2d[:, 1, 1] += blur
        cov2d[idx] = sig2d
        a, b, c = sig2d[:, 0, 0], sig2d[:, 0, 1], sig2d[:, 1, 1]
        det = a * c - b * b
        conic[idx, 0, 0] = c / det
        conic[idx, 0, 1] = -b / det
        conic[idx, 1, 0] = -b / det
        conic[idx, 1, 1] = a / det
        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
        radius[idx] = 3.0 * np.sqrt(lam_max)
        depth[idx] = tc[:, 2]

    depth = np.where(visible, depth, 0.0)
    return ProjectedGaussians(
        mean2d=mean2d, cov2d=cov2d, conic=conic, depth=depth,
        radius=radius, visible=visible,
    )


def project_gaussians_vjp(
    positions: np.ndarray,
    covariances: np.ndarray,
    cam: Camera,
    proj: ProjectedGaussians,
    d_mean2d: np.ndarray,
    d_conic: np.ndarray,
    d_depth: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull (dL/dmean2d, dL/dconic, dL/ddepth) back to (dL/dx, dL/dSigma).

    Intermediates are recomputed from the forward inputs (cheap, N x small
    matrices); culled Gaussians get zero gradients.
    """
    dtype = positions.dtype
    dx_out = np.zeros_like(positions)
    dsig_out = np.zeros_like(covariances)
    idx = proj.visible_indices
    if idx.size == 0:
        return dx_out, dsig_out

    rot = cam.rotation.astype(dtype)
    t_cam = positions[idx] @ rot.T + cam.translation.astype(dtype)
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    jac = _projection_jacobian(t_cam, fx, fy)
    m = jac @ rot
    sigma = covariances[idx]
    con = proj.conic[idx]

    # conic = inv(cov2d): d cov2d = -conic dconic conic
    d_p = -con @ d_conic[idx] @ con
    # cov2d is the symmetric part of M Sigma M^T (plus the blur floor)
    d_s = 0.5 * (d_p + np.swapaxes(d_p, -1, -2))
    d_sigma = np.swapaxes(m, -1, -2) @ d_s @ m
    d_m = d_s @ m @ (sigma + np.swapaxes(sigma, -1, -2))
    d_jac = d_m @ rot.T

    gu = d_mean2d[idx, 0]
    gv = d_mean2d[idx, 1]
    dtx = gu * fx / tz - d_jac[:, 0, 2] * fx / tz**2
    dty = gv * fy / tz - d_jac[:, 1, 2] * fy / tz**2
    dtz = (
        -gu * fx * tx / tz**2
        - gv * fy * ty / tz**2
        - d_jac[:, 0, 0] * fx / tz**2
        - d_jac[:, 1, 1] * fy / tz**2
        + d_jac[:, 0, 2] * 2.0 * fx * tx / tz**3
        + d_jac[:, 1, 2] * 2.0 * fy * ty / tz**3
        + d_depth[idx]
    )
    d_t = np.stack([dtx, dty, dtz], axis=-1)
    dx_out[idx] = d_t @ rot
    dsig_out[idx] = d_sigma
    return dx_out, dsig_out
