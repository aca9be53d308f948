"""Delta module h and Stage-1 editing of a frozen latent diffusion prior.

``h`` reads the denoiser bottleneck together with a timestep embedding and
returns an additive shift of the same shape. It is trained per edit with a
directional text-image loss between the frozen and the shifted one-step
reconstructions, plus an L1 term that keeps the two close.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .diffusion import LatentDiffusion, predict_x0, q_sample, timestep_embedding
from .embedspace import DegenerateDirectionError, EmbeddingSpace, clip_direction_loss
from .numerics import RngStream
from .validation import check_images, images_to_nchw


class DeltaNet(nn.Module):
    """Two 3x3 convolutions with ``channels`` outputs each over [bottleneck, t-embedding]."""

    def __init__(self, channels: int = 64, temb: int = 32):
        super().__init__()
        self.channels = channels
        self.temb = temb
        self.conv1 = nn.Conv2d(channels + temb, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, b: torch.Tensor, t) -> torch.Tensor:
        if b.ndim != 4 or b.shape[1] != self.channels:
            raise nx.ShapeError(f"delta: expected bottleneck with {self.channels} channels, got {tuple(b.shape)}")
        t = np.broadcast_to(np.asarray(t), (b.shape[0],))
        te = timestep_embedding(t, self.temb).to(b.dtype)[:, :, None, None].expand(-1, -1, *b.shape[2:])
        return self.conv2(F.silu(self.conv1(torch.cat([b, te], dim=1))))


def apply_delta(bottleneck: torch.Tensor, t, h: DeltaNet) -> torch.Tensor:
    """bottleneck + h(bottleneck, t)."""
    shift = h(bottleneck, t)
    if shift.shape != bottleneck.shape:
        raise nx.ShapeError(f"apply_delta: shift {tuple(shift.shape)} vs bottleneck {tuple(bottleneck.shape)}")
    return bottleneck + shift


def reg_loss(x0_frozen: torch.Tensor, x0_edited: torch.Tensor, lambda_reg: float) -> torch.Tensor:
    """lambda_reg * mean |x0_frozen - x0_edited|."""
    if x0_frozen.shape != x0_edited.shape:
        raise nx.ShapeError(f"reg_loss: incompatible shapes {tuple(x0_frozen.shape)} and {tuple(x0_edited.shape)}")
    return lambda_reg * (x0_frozen - x0_edited).abs().mean()


@dataclass(frozen=True)
class EditConfig:
    lambda_reg: float = 0.1
    steps_per_view: int = 50
    t_star: int | None = None
    lr: float = 1e-3

    def __post_init__(self):
        if self.steps_per_view < 1:
            raise ValueError("steps_per_view must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")


def one_step_x0(diffusion: LatentDiffusion, z_t, t, cond, tokens, shift=None) -> torch.Tensor:
    """Decoded single-step reconstruction x0 (NCHW, unclipped)."""
    e = diffusion.eps(z_t, t, cond, tokens, shift)
    return diffusion.autoencoder.decode(predict_x0(z_t, t, e, diffusion.schedule_))


def stage1_loss(view, src_tokens: Sequence[int], instruction: Sequence[int], diffusion: LatentDiffusion,
                space: EmbeddingSpace, h: DeltaNet, t: int, noise: torch.Tensor,
                lambda_reg: float = 0.1) -> tuple[torch.Tensor, torch.Tensor]:
    """Directional loss between frozen and shifted x0 plus the L1 regulariser.

    Returns ``(total, reg)``. Raises :class:`DegenerateDirectionError` when the
    shift leaves the image embedding unchanged.
    """
    x = view if torch.is_tensor(view) else images_to_nchw(check_images(view, 32))
    z0 = diffusion.autoencoder.encode(x)
    z_t = q_sample(z0, t, noise, diffusion.schedule_)
    with torch.no_grad():
        x_src = one_step_x0(diffusion, z_t, t, z0, [instruction])
    x_tgt = one_step_x0(diffusion, z_t, t, z0, [instruction], shift=lambda b, tt: apply_delta(b, tt, h))
    reg = reg_loss(x_src, x_tgt, lambda_reg)
    return clip_direction_loss(x_src, src_tokens, x_tgt, instruction, space) + reg, reg


class DeltaEditor(BaseEstimator):
    """Per-edit delta module trained against a frozen prior and embedding space.

    ``init_scale`` multiplies the default initialisation of the second
    convolution; ``init="zero"`` makes h identically zero (a no-op edit).
    ``start_t`` (None means T) bounds the training timesteps and is where the
    edit sampler starts from the noised view.
    """

    def __init__(self, diffusion: LatentDiffusion | None = None, space: EmbeddingSpace | None = None,
                 lambda_reg: float = 0.1, steps_per_view: int = 50, lr: float = 1e-3,
                 t_star: int | None = None, init: str = "random", init_scale: float = 0.1,
                 temb: int = 32, sample_steps: int = 50, start_t: int | None = None, seed: int = 0):
        self.diffusion = diffusion
        self.space = space
        self.lambda_reg = lambda_reg
        self.steps_per_view = steps_per_view
        self.lr = lr
        self.t_star = t_star
        self.init = init
        self.init_scale = init_scale
        self.temb = temb
        self.sample_steps = sample_steps
        self.start_t = start_t
        self.seed = seed

    @property
    def config(self) -> EditConfig:
        return EditConfig(self.lambda_reg, self.steps_per_view, self.t_star, self.lr)

    def initialize(self) -> "DeltaEditor":
        if self.diffusion is None:
            raise ValueError("DeltaEditor needs a fitted diffusion model")
        check_is_fitted(self.diffusion, "net_")
        self.h_ = nx.init_module(DeltaNet(self.diffusion.bottleneck, self.temb),
                                 RngStream(self.seed, nx.stream_id("delta.init")))
        with torch.no_grad():
            if self.init == "zero":
                self.h_.conv2.weight.zero_()
                self.h_.conv2.bias.zero_()
            elif self.init == "random":
                self.h_.conv2.weight.mul_(self.init_scale)
                self.h_.conv2.bias.mul_(self.init_scale)
            else:
                raise ValueError(f"unknown init {self.init!r}")
        self.loss_history_ = []
        self.n_degenerate_ = 0
        nx.freeze(self.h_)
        return self

    def shift(self, b: torch.Tensor, t) -> torch.Tensor:
        return apply_delta(b, t, self.h_)

    def fit(self, views, src_tokens: Sequence[int], instruction: Sequence[int], total_steps: int | None = None):
        """Round-robin over views, ``steps_per_view`` optimiser steps each.

        ``total_steps`` overrides the step count (0 leaves h at initialisation).
        """
        images = check_images([getattr(v, "image", v) for v in views], 32)
        self.config  # validates
        if self.space is None:
            raise ValueError("DeltaEditor needs a fitted embedding space")
        self.initialize()
        for p in self.h_.parameters():
            p.requires_grad_(True)
        opt = nx.Adam(dict(self.h_.named_parameters()), lr=self.lr)
        cur = RngStream(self.seed, nx.stream_id("delta.train")).cursor()
        x = images_to_nchw(images)
        n = len(images)
        steps = n * self.steps_per_view if total_steps is None else total_steps
        T = self.start_t or self.diffusion.T
        shape = (1,) + self.diffusion.latent_shape
        for step in range(steps):
            i = step % n
            t = int(cur.integers(T, 1)[0]) + 1
            noise = torch.from_numpy(cur.normal(shape))
            try:
                loss, _ = stage1_loss(x[i:i + 1], src_tokens, instruction, self.diffusion, self.space,
                                      self.h_, t, noise, self.lambda_reg)
            except DegenerateDirectionError:
                self.n_degenerate_ += 1
                continue
            nx.check_finite(loss, "stage-1 loss", step)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            self.loss_history_.append(loss.item())
        nx.freeze(self.h_)
        return self

    def edit(self, views, instruction: Sequence[int], seed: int = 0, stream_offset: int = 0,
             use_delta: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Edited image per view (ancestral sampler conditioned on the view) and its embedding z_i."""
        check_is_fitted(self, "h_")
        images = check_images([getattr(v, "image", v) for v in views], 32)
        shift = self.shift if use_delta else None
        edited = self.diffusion.sample(len(images), cond_images=images, tokens=[instruction],
                                       steps=self.sample_steps, seed=seed, shift=shift,
                                       stream_offset=stream_offset, start_t=self.start_t)
        with torch.no_grad():
            z = self.diffusion.encode_semantic(edited, [instruction], shift=shift).numpy()
        return edited, z

    def checksum(self) -> str:
        return nx.module_checksum(self.h_)

    def save(self, path) -> None:
        nx.save_module(path, self.h_)

    def load(self, path) -> "DeltaEditor":
        self.initialize()
        nx.load_module(path, self.h_)
        nx.freeze(self.h_)
        return self


def edit_views(views, instruction: Sequence[int], editor: DeltaEditor, seed: int = 0):
    return editor.edit(views, instruction, seed=seed)
