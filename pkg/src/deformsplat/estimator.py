"""Scikit-learn style front end: fit a deformable Gaussian scene to a video,
then render or score at arbitrary normalized timestamps."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import psnr
from .scene import Camera, FrameRecord, RenderOutput, validate_camera, validate_frame
from .trainer import TrainConfig, Trainer


class DeformableSplatReconstructor(BaseEstimator):
    """Reconstructs a dynamic scene from masked RGB-D video frames.

    fit() seeds a canonical Gaussian cloud from depth/mask, then jointly
    optimizes it with a deformation network. The fitted model renders color
    and depth at any time in [0, 1]; score() is the mean masked PSNR.

    Parameters mirror the underlying TrainConfig; anything not exposed here
    can be set through ``config_overrides``.
    """

    def __init__(
        self,
        iterations: int = 40_000,
        warmup_iterations: int = 1_000,
        seed: int = 0,
        lr_net: float = 1.5e-5,
        net_depth: int = 8,
        net_width: int = 256,
        enc_l_x: int = 10,
        enc_l_t: int = 6,
        weight_ssim: float = 0.2,
        weight_depth: float = 0.001,
        weight_pos: float = 1.0,
        weight_cov: float = 200.0,
        weight_smooth: float = 0.02,
        knn_k: int = 5,
        densify_grad_threshold: float = 2e-4,
        seed_voxel_scale: float = 1.0,
        tile_size: int = 16,
        config_overrides: dict | None = None,
    ):
        self.iterations = iterations
        self.warmup_iterations = warmup_iterations
        self.seed = seed
        self.lr_net = lr_net
        self.net_depth = net_depth
        self.net_width = net_width
        self.enc_l_x = enc_l_x
        self.enc_l_t = enc_l_t
        self.weight_ssim = weight_ssim
        self.weight_depth = weight_depth
        self.weight_pos = weight_pos
        self.weight_cov = weight_cov
        self.weight_smooth = weight_smooth
        self.knn_k = knn_k
        self.densify_grad_threshold = densify_grad_threshold
        self.seed_voxel_scale = seed_voxel_scale
        self.tile_size = tile_size
        self.config_overrides = config_overrides

    def build_config(self) -> TrainConfig:
        cfg = dict(
            iterations=self.iterations,
            warmup_iterations=self.warmup_iterations,
            seed=self.seed,
            lr_net=self.lr_net,
            net_depth=self.net_depth,
            net_width=self.net_width,
            enc_l_x=self.enc_l_x,
            enc_l_t=self.enc_l_t,
            weight_ssim=self.weight_ssim,
            weight_depth=self.weight_depth,
            weight_pos=self.weight_pos,
            weight_cov=self.weight_cov,
            weight_smooth=self.weight_smooth,
            knn_k=self.knn_k,
            densify_grad_threshold=self.densify_grad_threshold,
            seed_voxel_scale=self.seed_voxel_scale,
            tile_size=self.tile_size,
        )
        cfg.update(self.config_overrides or {})
        return TrainConfig(**cfg)

    def fit(
        self,
        frames: list[FrameRecord],
        camera: Camera,
        train_indices: list[int] | None = None,
        callback=None,
    ) -> "DeformableSplatReconstructor":
        problems = validate_camera(camera)
        for i, f in enumerate(frames):
            problems += [f"frame {i}: {v}" for v in validate_frame(f)]
        if problems:
            raise ValueError("invalid inputs:\n  " + "\n  ".join(problems))

        cfg = self.build_config()
        trainer = Trainer.from_frames(frames, camera, cfg, train_indices=train_indices)
        history = []
        for _ in range(cfg.iterations):
            record = trainer.train_iteration()
            history.append(record)
            if callback is not None:
                callback(record)
        self.trainer_ = trainer
        self.scene_ = trainer.gset
        self.net_ = trainer.net
        self.camera_ = camera
        self.never_mask_ = trainer.never_mask
        self.history_ = history
        return self

    def render(self, t: float) -> RenderOutput:
        """Render color/depth/alpha at normalized time t (unseen t included)."""
        check_is_fitted(self, "trainer_")
        return self.trainer_.render_at(float(t))

    def predict(self, times) -> np.ndarray:
        """Rendered color images, stacked (len(times), H, W, 3)."""
        check_is_fitted(self, "trainer_")
        return np.stack([self.render(t).color for t in np.atleast_1d(times)])

    def score(self, frames: list[FrameRecord]) -> float:
        """Mean masked PSNR (dB) of renders against the given frames."""
        check_is_fitted(self, "trainer_")
        values = [
            psnr(self.render(f.time).color, f.image, f.mask) for f in frames
        ]
        return float(np.mean(values))
