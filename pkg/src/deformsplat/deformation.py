"""Forward-mapping deformation network.

Encodes (canonical position, timestamp) with NeRF-style frequency encodings,
runs an MLP to predict per-Gaussian offsets (position delta, log-scale delta,
rotation increment), and applies them to produce the observation-space cloud:

    x_o = x_c + dx
    log_s_o = log_s_c + ds            (multiplicative scale update in log space)
    q_o = normalize(q_c * normalize(dq + identity))   (Hamilton product)

Output heads are zero-initialized, so the deformation is exactly the identity
before training; the all-zero-offset case short-circuits to the canonical
arrays bitwise. Opacity and color are not deformed. Positions enter the
encoder as data only: the backward pass returns gradients to the network
weights and, through the offset application, to the canonical parameters,
but not through the encoding input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class EncodingConfig:
    """Frequency counts for position/time encodings."""

    l_x: int = 10
    l_t: int = 6
    include_input: bool = True

    @property
    def position_dim(self) -> int:
        return 3 * (2 * self.l_x + int(self.include_input))

    @property
    def time_dim(self) -> int:
        return 2 * self.l_t + int(self.include_input)


def encode(p: np.ndarray | float, n_freq: int, include_input: bool = True) -> np.ndarray:
    """Per-component frequency encoding along the last axis.

    Each component c maps to (c,) sin(2^k pi c), cos(2^k pi c) for
    k = 0..n_freq-1, the input itself included first when requested.
    A python scalar is treated as a one-component vector.
    """
    p = np.asarray(p, dtype=np.float64) if np.isscalar(p) else np.asarray(p)
    if p.ndim == 0:
        p = p[None]
    *lead, d = p.shape
    parts = []
    if include_input:
        parts.append(p[..., None])
    if n_freq > 0:
        freqs = (2.0 ** np.arange(n_freq)) * np.pi
        ang = p[..., None] * freqs.astype(p.dtype)  # (..., d, L)
        sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., d, L, 2)
        parts.append(sc.reshape(*lead, d, 2 * n_freq))
    block = np.concatenate(parts, axis=-1) if parts else p[..., :0]
    return block.reshape(*lead, d * block.shape[-1])


@dataclass
class DeformationNet:
    """MLP weights plus layout. params maps tensor name -> array.

    Hidden layer k consumes width activations (plus the encoded input again
    at `skip_layer`); heads are linear. Weight arrays are (in, out).
    """

    encoding: EncodingConfig
    depth: int = 8
    width: int = 256
    skip_layer: int = 4  # -1 disables the skip connection
    params: dict[str, np.ndarray] = field(default_factory=dict)

    HEAD_DIMS = (("pos", 3), ("scale", 3), ("rot", 4))

    @property
    def input_dim(self) -> int:
        return self.encoding.position_dim + self.encoding.time_dim

    def layer_in_dim(self, k: int) -> int:
        if k == 0:
            return self.input_dim
        if k == self.skip_layer:
            return self.width + self.input_dim
        return self.width

    @classmethod
    def create(
        cls,
        encoding: EncodingConfig,
        depth: int = 8,
        width: int = 256,
        skip_layer: int = 4,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "DeformationNet":
        """He-initialized hidden layers, zero output heads."""
        if rng is None:
            rng = np.random.default_rng(0)
        net = cls(encoding=encoding, depth=depth, width=width, skip_layer=skip_layer)
        for k in range(depth):
            fan_in = net.layer_in_dim(k)
            net.params[f"w{k}"] = (
                rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
            ).astype(dtype)
            net.params[f"b{k}"] = np.zeros(width, dtype=dtype)
        for name, dim in cls.HEAD_DIMS:
            net.params[f"head_{name}_w"] = np.zeros((width, dim), dtype=dtype)
            net.params[f"head_{name}_b"] = np.zeros(dim, dtype=dtype)
        return net

    def copy(self) -> "DeformationNet":
        out = DeformationNet(
            encoding=self.encoding, depth=self.depth, width=self.width,
            skip_layer=self.skip_layer,
        )
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out


@dataclass
class OffsetCache:
    """Forward intermediates for the network backward pass."""

    inputs: list          # per hidden layer: input actually fed to it
    pre_acts: list        # per hidden layer: pre-activation z
    feature: np.ndarray   # final hidden activation


def predict_offsets(
    net: DeformationNet, positions: np.ndarray, t: float
) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], OffsetCache]:
    """Per-Gaussian offsets (dx, ds, dq) at normalized time t in [0, 1]."""
    dtype = positions.dtype
    pos_enc = encode(positions, net.encoding.l_x, net.encoding.include_input)
    t_enc = encode(
        np.asarray(t, dtype=dtype), net.encoding.l_t, net.encoding.include_input
    )
    x = np.concatenate(
        [pos_enc, np.broadcast_to(t_enc, (positions.shape[0], t_enc.shape[0]))],
        axis=1,
    ).astype(dtype, copy=False)

    inputs, pre_acts = [], []
    h = x
    for k in range(net.depth):
        inp = np.concatenate([h, x], axis=1) if k == net.skip_layer and k > 0 else h
        z = inp @ net.params[f"w{k}"] + net.params[f"b{k}"]
        inputs.append(inp)
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
    dx = h @ net.params["head_pos_w"] + net.params["head_pos_b"]
    ds = h @ net.params["head_scale_w"] + net.params["head_scale_b"]
    dq = h @ net.params["head_rot_w"] + net.params["head_rot_b"]
    return (dx, ds, dq), OffsetCache(inputs=inputs, pre_acts=pre_acts, feature=h)


def predict_offsets_vjp(
    net: DeformationNet,
    cache: OffsetCache,
    d_dx: np.ndarray,
    d_ds: np.ndarray,
    d_dq: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of the offsets with respect to every network tensor."""
    grads: dict[str, np.ndarray] = {}
    h = cache.feature
    grads["head_pos_w"] = h.T @ d_dx
    grads["head_pos_b"] = d_dx.sum(axis=0)
    grads["head_scale_w"] = h.T @ d_ds
    grads["head_scale_b"] = d_ds.sum(axis=0)
    grads["head_rot_w"] = h.T @ d_dq
    grads["head_rot_b"] = d_dq.sum(axis=0)
    d_h = (
        d_dx @ net.params["head_pos_w"].T
        + d_ds @ net.params["head_scale_w"].T
        + d_dq @ net.params["head_rot_w"].T
    )
    for k in reversed(range(net.depth)):
        dz = d_h * (cache.pre_acts[k] > 0)
        grads[f"w{k}"] = cache.inputs[k].T @ dz
        grads[f"b{k}"] = dz.sum(axis=0)
        d_inp = dz @ net.params[f"w{k}"].T
        if k == net.skip_layer and k > 0:
            d_inp = d_inp[:, : net.width]  # encoded input is data, no gradient
        d_h = d_inp
    return grads


def hamilton(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions; broadcasts."""
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def hamilton_vjp(
    q1: np.ndarray, q2: np.ndarray, d_p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    gw, gx, gy, gz = d_p[..., 0], d_p[..., 1], d_p[..., 2], d_p[..., 3]
    d_q1 = np.stack(
        [
            w2 * gw + x2 * gx + y2 * gy + z2 * gz,
            -x2 * gw + w2 * gx - z2 * gy + y2 * gz,
            -y2 * gw + z2 * gx + w2 * gy - x2 * gz,
            -z2 * gw - y2 * gx + x2 * gy + w2 * gz,
        ],
        axis=-1,
    )
    d_q2 = np.stack(
        [
            w1 * gw + x1 * gx + y1 * gy + z1 * gz,
            -x1 * gw + w1 * gx + z1 * gy - y1 * gz,
            -y1 * gw - z1 * gx + w1 * gy + x1 * gz,
            -z1 * gw + y1 * gx - x1 * gy + w1 * gz,
        ],
        axis=-1,
    )
    return d_q1, d_q2


def _normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norm, norm


def _normalize_vjp(unit: np.ndarray, norm: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return (d_out - unit * np.sum(unit * d_out, axis=-1, keepdims=True)) / norm


def apply_deformation(
    positions: np.ndarray,
    log_scales: np.ndarray,
    rotations: np.ndarray,
    dx: np.ndarray,
    ds: np.ndarray,
    dq: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observation-space (positions, log_scales, rotations).

    dq is an increment around the identity quaternion; all-zero offsets return
    the canonical arrays unchanged (bitwise), which is what makes rendering
    through an untrained network identical to rendering the canonical cloud.
    """
    if not (dx.any() or ds.any() or dq.any()):
        return positions, log_scales, rotations
    x_o = positions + dx
    ell_o = log_scales + ds
    unit_inc, _ = _normalize(dq + IDENTITY_QUAT.astype(dq.dtype))
    q_o, _ = _normalize(hamilton(rotations, unit_inc))
    return x_o, ell_o, q_o


def apply_deformation_vjp(
    rotations: np.ndarray,
    dq: np.ndarray,
    d_x_o: np.ndarray,
    d_ell_o: np.ndarray,
    d_q_o: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_positions, d_log_scales, d_rotations, d_dx, d_ds, d_dq).

    Always evaluates the general formulas (also at zero offsets, where the
    forward short-circuits); the chain is continuous there.
    """
    inc = dq + IDENTITY_QUAT.astype(dq.dtype)
    unit_inc, inc_norm = _normalize(inc)
    prod = hamilton(rotations, unit_inc)
    unit_prod, prod_norm = _normalize(prod)

    d_prod = _normalize_vjp(unit_prod, prod_norm, d_q_o)
    d_rot, d_unit_inc = hamilton_vjp(rotations, unit_inc, d_prod)
    d_dq = _normalize_vjp(unit_inc, inc_norm, d_unit_inc)
    return d_x_o, d_ell_o, d_rot, d_x_o, d_ell_o, d_dq
