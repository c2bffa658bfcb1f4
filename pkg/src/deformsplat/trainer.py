"""Training loop: Adam over Gaussian parameters and the deformation network,
random frame selection, 3DGS-style density control, and exact-resume
checkpointing.

Determinism contract: given the same (config, seed, data), every iteration is
bit-reproducible, and a run resumed from a checkpoint matches the
uninterrupted run exactly. All randomness flows through one seeded generator
whose state is checkpointed.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .deformation import (
    DeformationNet,
    EncodingConfig,
    apply_deformation,
    apply_deformation_vjp,
    predict_offsets,
    predict_offsets_vjp,
)
from .geometry import build_covariance, build_covariance_vjp
from .initialize import build_refined_frame, backproject, seed_gaussians
from .losses import LossWeights, NeighborGraph, total_loss
from .rasterizer import render_gaussians, render_gaussians_vjp
from .scene import Camera, FrameRecord, GaussianSet, RenderOutput

log = logging.getLogger(__name__)

GAUSS_PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "colors")


@dataclass
class TrainConfig:
    """Run configuration; every field is serialized into the run manifest."""

    iterations: int = 40_000
    warmup_iterations: int = 1_000
    seed: int = 0

    # learning rates; the network rate is constant unless a final value is set
    lr_net: float = 1.5e-5
    lr_net_final: float | None = None
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    scale_position_lr_by_extent: bool = True
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    # density control
    densify_from: int = 500
    densify_until: int = 15_000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_scale_fraction: float = 0.01  # of scene extent: clone below, split above
    split_shrink: float = 1.6
    split_count: int = 2
    prune_opacity: float = 0.005
    max_gaussians: int | None = None

    # neighbor graph
    knn_k: int = 5
    graph_rebuild_interval: int = 1_000

    # deformation network
    net_depth: int = 8
    net_width: int = 256
    net_skip: bool = True
    enc_l_x: int = 10
    enc_l_t: int = 6
    enc_include_input: bool = True

    # loss weights
    weight_ssim: float = 0.2
    weight_depth: float = 0.001
    weight_pos: float = 1.0
    weight_cov: float = 200.0
    weight_smooth: float = 0.02

    # rendering / seeding
    tile_size: int = 16
    normalize_depth: bool = False
    dtype: str = "float32"
    seed_voxel_scale: float = 1.0
    seed_opacity: float = 0.1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            ssim=self.weight_ssim, depth=self.weight_depth, pos=self.weight_pos,
            cov=self.weight_cov, smooth=self.weight_smooth,
        )

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(
            l_x=self.enc_l_x, l_t=self.enc_l_t, include_input=self.enc_include_input
        )

    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class AdamState:
    """First/second moment buffers keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lrs: dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + eps)


def _exp_lr(initial: float, final: float, step: int, max_steps: int) -> float:
    if max_steps <= 0 or initial == 0.0:
        return initial
    frac = min(max(step / max_steps, 0.0), 1.0)
    return float(initial * (final / initial) ** frac)


def scene_extent(positions: np.ndarray) -> float:
    center = positions.mean(axis=0)
    radius = float(np.linalg.norm(positions - center, axis=1).max())
    return radius if radius > 0 else 1.0


class Trainer:
    """Owns the full optimization state for one scene."""

    def __init__(
        self,
        gset: GaussianSet,
        net: DeformationNet,
        cam: Camera,
        frames: list[FrameRecord] | None,
        never_mask: np.ndarray,
        config: TrainConfig,
        train_indices: list[int] | None = None,
        extent: float | None = None,
    ):
        self.gset = gset
        self.net = net
        self.cam = cam
        self.frames = frames
        self.never_mask = never_mask.astype(np.uint8)
        self.cfg = config
        if frames is not None:
            self.train_indices = np.asarray(
                range(len(frames)) if train_indices is None else train_indices,
                dtype=np.int64,
            )
        else:
            self.train_indices = np.asarray(train_indices or [], dtype=np.int64)
        self.extent = scene_extent(gset.positions) if extent is None else extent
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.iteration = 0
        self.adam_gauss = AdamState.like(self._gauss_params())
        self.adam_net = AdamState.like(net.params)
        self.graph = NeighborGraph.build(gset.positions, config.knn_k)
        n = len(gset)
        self.densify_accum = np.zeros(n, dtype=np.float64)
        self.densify_count = np.zeros(n, dtype=np.int64)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_frames(
        cls,
        frames: list[FrameRecord],
        cam: Camera,
        config: TrainConfig,
        train_indices: list[int] | None = None,
    ) -> "Trainer":
        """Depth/mask initialization + fresh network."""
        dtype = config.np_dtype()
        init_frames = (
            frames if train_indices is None else [frames[i] for i in train_indices]
        )
        refined = build_refined_frame(init_frames)
        cloud = backproject(refined, cam)
        gset = seed_gaussians(
            cloud,
            voxel_scale=config.seed_voxel_scale,
            opacity=config.seed_opacity,
            dtype=dtype,
        )
        net = DeformationNet.create(
            config.encoding(),
            depth=config.net_depth,
            width=config.net_width,
            skip_layer=config.net_depth // 2 if config.net_skip else -1,
            rng=np.random.Generator(np.random.PCG64(config.seed + 1)),
            dtype=dtype,
        )
        return cls(
            gset, net, cam, frames, refined.mask, config, train_indices=train_indices
        )

    # -- pieces ------------------------------------------------------------

    def _gauss_params(self) -> dict[str, np.ndarray]:
        g = self.gset
        return {
            "positions": g.positions,
            "log_scales": g.log_scales,
            "rotations": g.rotations,
            "opacity_logits": g.opacity_logits,
            "colors": g.colors,
        }

    def _gauss_lrs(self) -> dict[str, float]:
        cfg = self.cfg
        pos_lr = _exp_lr(
            cfg.lr_position, cfg.lr_position_final, self.iteration, cfg.iterations
        )
        if cfg.scale_position_lr_by_extent:
            pos_lr *= self.extent
        return {
            "positions": pos_lr,
            "log_scales": cfg.lr_scale,
            "rotations": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "colors": cfg.lr_color,
        }

    def _net_lr(self) -> float:
        cfg = self.cfg
        if cfg.lr_net_final is None:
            return cfg.lr_net
        return _exp_lr(cfg.lr_net, cfg.lr_net_final, self.iteration, cfg.iterations)

    def in_warmup(self) -> bool:
        return self.iteration < self.cfg.warmup_iterations

    def deform_at(self, t: float, warmup: bool = False):
        """Observation-space (positions, log_scales, rotations) plus caches."""
        g = self.gset
        if warmup:
            return (g.positions, g.log_scales, g.rotations), None, None
        offsets, cache = predict_offsets(self.net, g.positions, t)
        obs = apply_deformation(
            g.positions, g.log_scales, g.rotations, *offsets
        )
        return obs, offsets, cache

    def render_at(self, t: float, warmup: bool | None = None) -> RenderOutput:
        """Render the scene at normalized time t (no gradients kept)."""
        if warmup is None:
            warmup = self.in_warmup()
        (x_o, ell_o, q_o), _, _ = self.deform_at(t, warmup)
        obs = GaussianSet(
            x_o, ell_o, q_o, self.gset.opacity_logits, self.gset.colors
        )
        return render_gaussians(
            obs, self.cam, self.cfg.tile_size, self.cfg.normalize_depth
        )

    # -- the iteration ------------------------------------------------------

    def train_iteration(self, frame: FrameRecord | None = None) -> dict:
        """One optimization step; samples a training frame when none is given."""
        cfg = self.cfg
        it = self.iteration
        if frame is None:
            pick = int(self.rng.integers(len(self.train_indices)))
            frame = self.frames[int(self.train_indices[pick])]
        warmup = self.in_warmup()

        (x_o, ell_o, q_o), offsets, mlp_cache = self.deform_at(frame.time, warmup)
        obs = GaussianSet(
            x_o, ell_o, q_o, self.gset.opacity_logits, self.gset.colors
        )
        out = render_gaussians(obs, self.cam, cfg.tile_size, cfg.normalize_depth)
        cov_o = out.backward_cache.cov3d
        identity_deform = x_o is self.gset.positions
        cov_c = cov_o if identity_deform else build_covariance(
            self.gset.scales, self.gset.rotations
        )
        total, components, lg = total_loss(
            out.color, out.depth, frame.image, frame.depth, frame.mask,
            self.never_mask, self.graph,
            self.gset.positions, x_o, cov_c, cov_o, cfg.loss_weights(),
        )

        ggrads = render_gaussians_vjp(
            out, lg.d_color, lg.d_depth,
            d_positions_extra=lg.d_x_o, d_cov3d_extra=lg.d_cov_o,
        )
        if warmup:
            d_pos, d_ell, d_rot = (
                ggrads.positions, ggrads.log_scales, ggrads.rotations
            )
            d_dx = d_ds = d_dq = None
        else:
            d_pos, d_ell, d_rot, d_dx, d_ds, d_dq = apply_deformation_vjp(
                self.gset.rotations, offsets[2],
                ggrads.positions, ggrads.log_scales, ggrads.rotations,
            )
        d_pos = d_pos + lg.d_x_c
        ds_c, dq_c = build_covariance_vjp(
            self.gset.scales, self.gset.rotations, lg.d_cov_c
        )
        d_ell = d_ell + ds_c * self.gset.scales
        d_rot = d_rot + dq_c

        gauss_grads = {
            "positions": d_pos,
            "log_scales": d_ell,
            "rotations": d_rot,
            "opacity_logits": ggrads.opacity_logits,
            "colors": ggrads.colors,
        }
        net_grads = (
            None if warmup
            else predict_offsets_vjp(self.net, mlp_cache, d_dx, d_ds, d_dq)
        )

        finite = all(np.isfinite(g).all() for g in gauss_grads.values())
        if finite and net_grads is not None:
            finite = all(np.isfinite(g).all() for g in net_grads.values())
        skipped = not finite
        if skipped:
            log.warning("iteration %d: non-finite gradient, update skipped", it)
        else:
            adam_step(
                self._gauss_params(), gauss_grads, self.adam_gauss,
                self._gauss_lrs(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
            self.gset.renormalize_rotations()
            np.clip(self.gset.colors, 0.0, 1.0, out=self.gset.colors)
            if net_grads is not None:
                lr = self._net_lr()
                adam_step(
                    self.net.params, net_grads, self.adam_net,
                    {k: lr for k in self.net.params},
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                )
            visible = out.backward_cache.proj.visible
            self.densify_accum[visible] += np.linalg.norm(
                ggrads.mean2d[visible], axis=1
            )
            self.densify_count[visible] += 1

        self.iteration = it + 1
        if (
            cfg.densify_from <= self.iteration <= cfg.densify_until
            and self.iteration % cfg.densify_interval == 0
        ):
            self.density_control()
        elif (
            cfg.graph_rebuild_interval > 0
            and self.iteration % cfg.graph_rebuild_interval == 0
        ):
            self.rebuild_graph()

        result = {
            "iteration": self.iteration,
            "frame": frame.index,
            "total": total,
            "n_gaussians": len(self.gset),
            "skipped": skipped,
        }
        result.update(components)
        return result

    # -- density control ----------------------------------------------------

    def rebuild_graph(self) -> None:
        self.graph = NeighborGraph.build(self.gset.positions, self.cfg.knn_k)

    def _reset_densify_stats(self, n: int) -> None:
        self.densify_accum = np.zeros(n, dtype=np.float64)
        self.densify_count = np.zeros(n, dtype=np.int64)

    def density_control(self) -> None:
        """Clone small high-gradient Gaussians, split large ones, prune faint
        ones; new Gaussians inherit zeroed optimizer moments."""
        cfg = self.cfg
        g = self.gset
        n = len(g)
        avg = self.densify_accum / np.maximum(self.densify_count, 1)
        over = (avg > cfg.densify_grad_threshold) & (self.densify_count > 0)
        max_scale = g.scales.max(axis=1)
        size_limit = cfg.densify_scale_fraction * self.extent
        clone = over & (max_scale <= size_limit)
        split = over & (max_scale > size_limit)

        growth = int(clone.sum()) + int(split.sum()) * cfg.split_count
        if cfg.max_gaussians is not None and n + growth > cfg.max_gaussians:
            clone = np.zeros(n, dtype=bool)
            split = np.zeros(n, dtype=bool)

        parts: dict[str, list[np.ndarray]] = {k: [] for k in GAUSS_PARAM_NAMES}
        params = self._gauss_params()
        keep = ~split  # split originals are replaced by their samples

        for name, arr in params.items():
            parts[name].append(arr[keep])
        new_counts = [int(keep.sum())]

        if clone.any():
            for name, arr in params.items():
                parts[name].append(arr[clone].copy())
            new_counts.append(int(clone.sum()))

        if split.any():
            idx = np.nonzero(split)[0]
            reps = np.repeat(idx, cfg.split_count)
            cov = build_covariance(g.scales[idx], g.rotations[idx])
            chol = np.linalg.cholesky(
                cov.astype(np.float64)
                + 1e-12 * np.eye(3, dtype=np.float64)
            )
            samples = self.rng.standard_normal((idx.size, cfg.split_count, 3))
            moved = (
                g.positions[idx, None, :].astype(np.float64)
                + np.einsum("nij,nkj->nki", chol, samples)
            ).reshape(-1, 3)
            parts["positions"].append(moved.astype(g.positions.dtype))
            parts["log_scales"].append(
                g.log_scales[reps] - np.log(cfg.split_shrink).astype(g.log_scales.dtype)
            )
            parts["rotations"].append(g.rotations[reps].copy())
            parts["opacity_logits"].append(g.opacity_logits[reps].copy())
            parts["colors"].append(g.colors[reps].copy())
            new_counts.append(reps.size)

        merged = {k: np.concatenate(v, axis=0) for k, v in parts.items()}
        survivors_m = {k: self.adam_gauss.m[k][keep] for k in GAUSS_PARAM_NAMES}
        survivors_v = {k: self.adam_gauss.v[k][keep] for k in GAUSS_PARAM_NAMES}
        added = sum(new_counts[1:])
        for k in GAUSS_PARAM_NAMES:
            pad_shape = (added,) + merged[k].shape[1:]
            self.adam_gauss.m[k] = np.concatenate(
                [survivors_m[k], np.zeros(pad_shape, dtype=merged[k].dtype)]
            )
            self.adam_gauss.v[k] = np.concatenate(
                [survivors_v[k], np.zeros(pad_shape, dtype=merged[k].dtype)]
            )

        # prune faint Gaussians from the merged set
        new_set = GaussianSet(**merged)
        faint = new_set.opacities < cfg.prune_opacity
        if faint.any():
            hold = ~faint
            for k in GAUSS_PARAM_NAMES:
                merged[k] = merged[k][hold]
                self.adam_gauss.m[k] = self.adam_gauss.m[k][hold]
                self.adam_gauss.v[k] = self.adam_gauss.v[k][hold]
            new_set = GaussianSet(**merged)

        self.gset = new_set
        self._reset_densify_stats(len(new_set))
        self.rebuild_graph()

    # -- checkpointing --------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        meta = {
            "kind": "deformsplat-run",
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "camera": self.cam.to_dict(),
            "extent": float(self.extent),
            "rng_state": self.rng.bit_generator.state,
            "adam_gauss_step": self.adam_gauss.step,
            "adam_net_step": self.adam_net.step,
            "graph_k": self.graph.k,
        }
        arrays: dict[str, np.ndarray] = {}
        for k, v in self._gauss_params().items():
            arrays[f"gauss/{k}"] = v
        for k, v in self.net.params.items():
            arrays[f"net/{k}"] = v
        for k in GAUSS_PARAM_NAMES:
            arrays[f"adam_g/m/{k}"] = self.adam_gauss.m[k]
            arrays[f"adam_g/v/{k}"] = self.adam_gauss.v[k]
        for k in self.net.params:
            arrays[f"adam_n/m/{k}"] = self.adam_net.m[k]
            arrays[f"adam_n/v/{k}"] = self.adam_net.v[k]
        arrays["graph/indices"] = self.graph.indices
        arrays["graph/distances"] = self.graph.distances
        arrays["densify/accum"] = self.densify_accum
        arrays["densify/count"] = self.densify_count
        arrays["never_mask"] = self.never_mask
        arrays["train_indices"] = self.train_indices
        ckpt.save_container(path, meta, arrays)

    @classmethod
    def load_checkpoint(
        cls, path: str, frames: list[FrameRecord] | None = None
    ) -> "Trainer":
        meta, arrays = ckpt.load_container(path)
        if meta.get("kind") != "deformsplat-run":
            raise ValueError(f"{path}: not a training checkpoint")
        cfg = TrainConfig.from_dict(meta["config"])
        cam = Camera.from_dict(meta["camera"])
        gset = GaussianSet(
            positions=arrays["gauss/positions"],
            log_scales=arrays["gauss/log_scales"],
            rotations=arrays["gauss/rotations"],
            opacity_logits=arrays["gauss/opacity_logits"],
            colors=arrays["gauss/colors"],
        )
        net = DeformationNet(
            encoding=cfg.encoding(),
            depth=cfg.net_depth,
            width=cfg.net_width,
            skip_layer=cfg.net_depth // 2 if cfg.net_skip else -1,
        )
        net.params = {
            k[len("net/"):]: v for k, v in arrays.items() if k.startswith("net/")
        }
        trainer = cls(
            gset, net, cam, frames, arrays["never_mask"], cfg,
            train_indices=arrays["train_indices"].tolist(),
            extent=float(meta["extent"]),
        )
        trainer.iteration = int(meta["iteration"])
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer.adam_gauss = AdamState(
            m={k: arrays[f"adam_g/m/{k}"] for k in GAUSS_PARAM_NAMES},
            v={k: arrays[f"adam_g/v/{k}"] for k in GAUSS_PARAM_NAMES},
            step=int(meta["adam_gauss_step"]),
        )
        trainer.adam_net = AdamState(
            m={k: arrays[f"adam_n/m/{k}"] for k in net.params},
            v={k: arrays[f"adam_n/v/{k}"] for k in net.params},
            step=int(meta["adam_net_step"]),
        )
        trainer.graph = NeighborGraph(
            indices=arrays["graph/indices"],
            distances=arrays["graph/distances"],
            k=int(meta["graph_k"]),
        )
        trainer.densify_accum = arrays["densify/accum"]
        trainer.densify_count = arrays["densify/count"]
        return trainer
