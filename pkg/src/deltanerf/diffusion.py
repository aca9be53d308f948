"""Frozen toy latent diffusion prior.

A small convolutional autoencoder maps 32x32 RGB images to 8x8x4 latents; a
conditional U-Net predicts noise from ``(z_t, t, encoded conditioning image,
caption)``. The U-Net exposes its 2x2 bottleneck so an additive shift can be
injected there (see :mod:`deltanerf.delta`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .numerics import RngStream
from .validation import check_images, check_timestep, images_to_nchw, nchw_to_images
from .vocab import PAD, TOKENS

# ---------------------------------------------------------------------------
# schedule and closed-form process


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def at(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        check_timestep(t, self.T)
        i = np.asarray(t) - 1
        return self.beta[i], self.alpha[i], self.alpha_bar[i]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": float(self.beta[0]), "beta_T": float(self.beta[-1])}


def make_schedule(T: int = 1000, beta_1: float = 0.00085, beta_T: float = 0.012) -> NoiseSchedule:
    """Linearly increasing variances from ``beta_1`` to ``beta_T``."""
    if T < 1 or not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"invalid schedule T={T}, beta range [{beta_1}, {beta_T}]")
    beta = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def _bcast(v, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(v, dtype=np.float64)).to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def q_sample(z0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) noise; ``t`` scalar or per-batch."""
    if tuple(noise.shape) != tuple(z0.shape):
        raise nx.ShapeError(f"q_sample: noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    _, _, ab = schedule.at(t)
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * noise


def posterior_mean(z_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """(z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)."""
    if tuple(eps_hat.shape) != tuple(z_t.shape):
        raise nx.ShapeError(f"posterior_mean: eps shape {tuple(eps_hat.shape)} != z_t shape {tuple(z_t.shape)}")
    b, a, ab = schedule.at(t)
    return (z_t - _bcast(b / np.sqrt(1.0 - ab), z_t) * eps_hat) / _bcast(np.sqrt(a), z_t)


def predict_x0(z_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise estimate."""
    _, _, ab = schedule.at(t)
    if np.any(np.asarray(ab) <= 0):
        raise ValueError("alpha_bar must be positive to predict x0")
    return (z_t - _bcast(np.sqrt(1.0 - ab), z_t) * eps_hat) / _bcast(np.sqrt(ab), z_t)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared noise-prediction error."""
    return ((eps - eps_hat) ** 2).mean()


def respaced(schedule: NoiseSchedule, steps: int) -> tuple[np.ndarray, NoiseSchedule]:
    """Evenly strided timesteps (ending at T) and the matching DDPM sub-schedule."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps >= schedule.T:
        return np.arange(1, schedule.T + 1), schedule
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(int))
    ab = schedule.alpha_bar[ts - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    alpha = ab / prev
    return ts, NoiseSchedule(1.0 - alpha, alpha, ab)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    t = torch.as_tensor(np.atleast_1d(np.asarray(t, dtype=np.float64)))
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=nx.DTYPE) / half)
    ang = t[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


# ---------------------------------------------------------------------------
# autoencoder


def _train_dtype(name: str) -> torch.dtype:
    # float64 convolutions have no vectorised CPU kernel; the frozen priors may
    # be fitted in float32 and are cast back to float64 once trained
    if name not in ("float32", "float64"):
        raise ValueError(f"train_dtype must be 'float32' or 'float64', got {name!r}")
    return getattr(torch, name)


class ConvAutoEncoder(nn.Module):
    """32x32x3 <-> 8x8xC; full-resolution layers are kept narrow."""

    def __init__(self, latent_channels: int = 4, width: int = 32):
        super().__init__()
        w = width
        self.enc = nn.ModuleList([
            nn.Conv2d(3, w // 2, 3, stride=2, padding=1),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1),
            nn.Conv2d(w, w, 3, padding=1),
        ])
        self.to_latent = nn.Conv2d(w, latent_channels, 1)
        self.from_latent = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.dec = nn.ModuleList([
            nn.Conv2d(w, w, 3, padding=1),
            nn.Conv2d(w, w, 3, padding=1),
            nn.Conv2d(w, w // 2, 3, padding=1),
        ])
        self.to_rgb = nn.Conv2d(w // 2, 3, 3, padding=1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = x * 2.0 - 1.0
        for conv in self.enc:
            h = F.silu(conv(h))
        return self.to_latent(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.from_latent(z))
        h = F.silu(self.dec[0](h))
        h = F.silu(self.dec[1](F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.silu(self.dec[2](F.interpolate(h, scale_factor=2, mode="nearest")))
        return (self.to_rgb(h) + 1.0) * 0.5


class PixelCodec(nn.Module):
    """Identity "autoencoder" for pixel-space debugging."""

    def encode(self, x):
        return x * 2.0 - 1.0

    def decode(self, z):
        return (z + 1.0) * 0.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


class AutoEncoder(BaseEstimator, TransformerMixin):
    """Image <-> latent codec; ``transform`` gives scaled latents (N, C, 8, 8).

    ``mode="pixel"`` swaps in an identity codec (latents are the rescaled
    pixels) and makes ``fit`` a no-op.
    """

    def __init__(self, latent_channels: int = 4, width: int = 32, steps: int = 6000,
                 batch_size: int = 32, lr: float = 2e-3, seed: int = 0, mode: str = "latent",
                 train_dtype: str = "float32"):
        self.train_dtype = train_dtype
        self.latent_channels = latent_channels
        self.width = width
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.mode = mode

    def _build(self):
        if self.mode == "pixel":
            self.net_ = PixelCodec()
        elif self.mode == "latent":
            self.net_ = nx.init_module(ConvAutoEncoder(self.latent_channels, self.width),
                                       RngStream(self.seed, nx.stream_id("autoencoder.init")))
        else:
            raise ValueError(f"unknown autoencoder mode {self.mode!r}")
        self.scale_ = 1.0
        return self

    @property
    def channels(self) -> int:
        return 3 if self.mode == "pixel" else self.latent_channels

    def fit(self, images, y=None):
        x = images_to_nchw(check_images(images, 32))
        self._build()
        self.loss_history_ = []
        if self.mode == "pixel":
            return self
        dt = _train_dtype(self.train_dtype)
        self.net_.to(dt)
        xt = x.to(dt)
        params = dict(self.net_.named_parameters())
        opt = nx.Adam(params, lr=self.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, self.steps))
        cur = RngStream(self.seed, nx.stream_id("autoencoder.batches")).cursor()
        n = x.shape[0]
        for step in range(self.steps):
            idx = torch.as_tensor(cur.integers(n, min(self.batch_size, n)))
            xb = xt[idx]
            loss = ((self.net_.decode(self.net_.encode(xb)) - xb) ** 2).mean()
            nx.check_finite(loss, "autoencoder loss", step)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            sched.step()
            self.loss_history_.append(loss.item())
        self.net_.to(nx.DTYPE)
        with torch.no_grad():
            z = torch.cat([self.net_.encode(x[i:i + 256]) for i in range(0, n, 256)])
            self.scale_ = float(1.0 / z.std())
        nx.freeze(self.net_)
        return self

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable NCHW image -> scaled latent."""
        check_is_fitted(self, "net_")
        return self.net_.encode(x) * self.scale_

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Differentiable scaled latent -> NCHW image (not clipped)."""
        check_is_fitted(self, "net_")
        return self.net_.decode(z / self.scale_)

    def transform(self, images) -> torch.Tensor:
        with torch.no_grad():
            return self.encode(images_to_nchw(check_images(images)))

    def inverse_transform(self, z: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return np.clip(nchw_to_images(self.decode(torch.as_tensor(z))), 0.0, 1.0)

    def reconstruction_psnr(self, images) -> float:
        imgs = check_images(images)
        return psnr(self.inverse_transform(self.transform(imgs)), imgs)

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        nx.save_module(path, self.net_, {"latent_scale": np.array(self.scale_)})

    def load(self, path) -> "AutoEncoder":
        self._build()
        extra = nx.load_module(path, self.net_) if self.mode == "latent" else nx.load_archive(path)
        self.scale_ = float(extra["latent_scale"])
        self.loss_history_ = []
        nx.freeze(self.net_)
        return self


# ---------------------------------------------------------------------------
# denoiser


class TimeBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.t = nn.Linear(temb, cout)

    def forward(self, x, te):
        return F.silu(self.conv(x) + self.t(te)[:, :, None, None])


class UNetDenoiser(nn.Module):
    """Conv down-path -> bottleneck (``bottleneck`` channels at 2x2) -> up-path with skips."""

    def __init__(self, latent_channels: int = 4, cond_channels: int = 4, size: int = 8,
                 base: int = 32, bottleneck: int = 64, temb: int = 64, vocab_size: int = len(TOKENS)):
        super().__init__()
        levels = int(round(math.log2(size // 2)))
        if 2 ** levels * 2 != size:
            raise ValueError(f"latent size {size} must be 2 * a power of two")
        self.temb_dim = temb
        ch = [min(bottleneck, base * 2 ** k) for k in range(levels)] + [bottleneck]
        self.channels = ch
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = TimeBlock(latent_channels + cond_channels, ch[0], temb)
        self.down = nn.ModuleList([TimeBlock(ch[k], ch[k + 1], temb, stride=2) for k in range(levels)])
        self.token_table = nn.Parameter(torch.zeros(vocab_size, temb))
        self.text_proj = nn.Linear(temb, bottleneck)
        self.mid = TimeBlock(bottleneck, bottleneck, temb)
        self.up = nn.ModuleList([TimeBlock(ch[k + 1] + ch[k], ch[k], temb) for k in reversed(range(levels))])
        self.out = nn.Conv2d(ch[0], latent_channels, 3, padding=1)

    def embed_time(self, t) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.temb_dim).to(self.out.weight.dtype))

    def embed_text(self, tokens: torch.Tensor) -> torch.Tensor:
        mask = (tokens != PAD).to(self.token_table.dtype)
        return (self.token_table[tokens] * mask[..., None]).sum(1) / mask.sum(1, keepdim=True).clamp(min=1.0)

    def down_path(self, z_t, te, cond, tokens):
        """Returns (bottleneck activation with caption added, skip list)."""
        h = self.inp(torch.cat([z_t, cond], dim=1), te)
        skips = [h]
        for blk in self.down:
            h = blk(h, te)
            skips.append(h)
        skips.pop()
        return h + self.text_proj(self.embed_text(tokens))[:, :, None, None], skips

    def up_path(self, b, te, skips):
        h = self.mid(b, te)
        for blk in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(torch.cat([h, skips.pop()], dim=1), te)
        return self.out(h)

    def forward(self, z_t, t, cond, tokens, shift: Callable | None = None):
        dt = self.out.weight.dtype
        z_t, cond = z_t.to(dt), cond.to(dt)
        te = self.embed_time(t)
        b, skips = self.down_path(z_t, te, cond, tokens)
        if shift is not None:
            b = shift(b, t)
        return self.up_path(b, te, skips)


def _pad(token_seqs: Sequence[Sequence[int]], n: int) -> torch.Tensor:
    seqs = [list(s) for s in token_seqs]
    if len(seqs) == 1 and n > 1:
        seqs = seqs * n
    width = max(1, max((len(s) for s in seqs), default=1))
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


class LatentDiffusion(BaseEstimator):
    """Conditional latent denoiser with ancestral sampler and semantic encoder.

    ``fit(images, captions)`` trains on images encoded by a fitted, frozen
    :class:`AutoEncoder`; the conditioning image of each training example is
    the example itself, dropped (zeroed) with probability ``p_drop_image``.
    """

    def __init__(self, autoencoder: AutoEncoder | None = None, T: int = 1000, beta_1: float = 0.00085,
                 beta_T: float = 0.012, base: int = 32, bottleneck: int = 64, steps: int = 3000,
                 batch_size: int = 32, lr: float = 2e-3, p_drop_image: float = 0.3,
                 p_drop_text: float = 0.2, init: str = "random", seed: int = 0,
                 train_dtype: str = "float32"):
        self.train_dtype = train_dtype
        self.autoencoder = autoencoder
        self.T = T
        self.beta_1 = beta_1
        self.beta_T = beta_T
        self.base = base
        self.bottleneck = bottleneck
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.p_drop_image = p_drop_image
        self.p_drop_text = p_drop_text
        self.init = init
        self.seed = seed

    # -- construction -------------------------------------------------------
    def initialize(self) -> "LatentDiffusion":
        """Untrained denoiser (``init="zero"`` zeroes the output layer), frozen."""
        self._build()
        self.loss_history_ = []
        nx.freeze(self.net_)
        return self

    def _build(self):
        if self.autoencoder is None:
            raise ValueError("LatentDiffusion needs a fitted autoencoder")
        check_is_fitted(self.autoencoder, "net_")
        self.schedule_ = make_schedule(self.T, self.beta_1, self.beta_T)
        c = self.autoencoder.channels
        self.latent_size_ = 32 if self.autoencoder.mode == "pixel" else 8
        self.net_ = nx.init_module(
            UNetDenoiser(c, c, self.latent_size_, self.base, self.bottleneck),
            RngStream(self.seed, nx.stream_id("denoiser.init")))
        if self.init == "zero":
            with torch.no_grad():
                self.net_.out.weight.zero_()
                self.net_.out.bias.zero_()
        elif self.init != "random":
            raise ValueError(f"unknown init {self.init!r}")
        return self

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.autoencoder.channels, self.latent_size_, self.latent_size_)

    def fit(self, images, captions, cond_images=None):
        """Fit on targets ``images``; ``cond_images`` (default: the targets) are the
        conditioning views, so (view, edited view, target caption) pairs teach the
        prior to follow the caption where it disagrees with the view."""
        z0 = self.autoencoder.transform(check_images(images, 32))
        zc = z0 if cond_images is None else self.autoencoder.transform(check_images(cond_images, 32))
        if zc.shape != z0.shape:
            raise ValueError(f"{len(zc)} conditioning images for {len(z0)} targets")
        tokens = _pad(captions, len(z0))
        self._build()
        dt = _train_dtype(self.train_dtype)
        self.net_.to(dt)
        z0, zc = z0.to(dt), zc.to(dt)
        params = dict(self.net_.named_parameters())
        opt = nx.Adam(params, lr=self.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, self.steps))
        cur = RngStream(self.seed, nx.stream_id("denoiser.train")).cursor()
        n = z0.shape[0]
        bs = min(self.batch_size, n)
        self.loss_history_ = []
        for step in range(self.steps):
            idx = torch.as_tensor(cur.integers(n, bs))
            t = cur.integers(self.T, bs) + 1
            noise = torch.from_numpy(cur.normal((bs,) + tuple(z0.shape[1:]))).to(dt)
            keep_img = torch.from_numpy(cur.uniform(bs) >= self.p_drop_image).to(dt)
            keep_txt = torch.from_numpy(cur.uniform(bs) >= self.p_drop_text)
            zb = z0[idx]
            z_t = q_sample(zb, t, noise, self.schedule_)
            cond = zc[idx] * keep_img[:, None, None, None]
            tok = torch.where(keep_txt[:, None], tokens[idx], torch.full_like(tokens[idx], PAD))
            loss = diffusion_loss(noise, self.net_(z_t, t, cond, tok))
            nx.check_finite(loss, "denoiser loss", step)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            sched.step()
            self.loss_history_.append(loss.item())
        self.net_.to(nx.DTYPE)
        nx.freeze(self.net_)
        return self

    # -- model evaluation -----------------------------------------------------
    def eps(self, z_t, t, cond, tokens, shift: Callable | None = None) -> torch.Tensor:
        """Predicted noise; ``cond`` is a latent batch or None (null image)."""
        check_is_fitted(self, "net_")
        n = z_t.shape[0]
        if cond is None:
            cond = torch.zeros_like(z_t)
        t = np.broadcast_to(np.asarray(t), (n,))
        return self.net_(z_t, t, cond, _pad(tokens, n), shift)

    def eval_loss(self, images, captions, seed: int = 1, n_draws: int = 4) -> float:
        """Mean noise-prediction loss on held-out data (full conditioning)."""
        z0 = self.autoencoder.transform(check_images(images))
        cur = RngStream(seed, nx.stream_id("denoiser.eval")).cursor()
        losses = []
        with torch.no_grad():
            for _ in range(n_draws):
                t = cur.integers(self.T, len(z0)) + 1
                noise = torch.from_numpy(cur.normal(tuple(z0.shape)))
                z_t = q_sample(z0, t, noise, self.schedule_)
                losses.append(float(diffusion_loss(noise, self.eps(z_t, t, z0, captions))))
        return float(np.mean(losses))

    def sample(self, n: int = 1, cond_images=None, tokens: Sequence[Sequence[int]] = ((),),
               steps: int | None = None, seed: int = 0, shift: Callable | None = None,
               stream_offset: int = 0, return_latents: bool = False, start_t: int | None = None):
        """Ancestral sampling from z_T ~ N(0, I) with variance beta_t.

        With ``start_t`` and conditioning images, sampling starts instead from
        the conditioning latent noised to the largest respaced step <= start_t.
        Sample ``k`` draws its noise from stream ``stream_offset + k`` so results
        do not depend on how samples are batched.
        """
        check_is_fitted(self, "net_")
        if cond_images is not None:
            cond = self.autoencoder.transform(check_images(cond_images))
            n = cond.shape[0]
        else:
            cond = None
        ts, sub = respaced(self.schedule_, steps or self.T)
        shape = self.latent_shape
        streams = [RngStream(seed, nx.stream_id("sample", stream_offset + k)) for k in range(n)]
        per = int(np.prod(shape))
        z = torch.from_numpy(np.stack([s.normal(per, 0).reshape(shape) for s in streams]))
        top = len(ts) - 1
        if start_t is not None:
            if cond is None:
                raise ValueError("start_t needs conditioning images")
            if not 1 <= start_t <= self.T:
                raise ValueError(f"start_t must lie in [1, {self.T}], got {start_t}")
            top = int(np.searchsorted(ts, start_t, side="right")) - 1
            if top >= 0:
                ab = sub.alpha_bar[top]
                z = math.sqrt(ab) * cond + math.sqrt(1.0 - ab) * z
            else:
                z = cond.clone()
        with torch.no_grad():
            for i in range(top, -1, -1):
                t = int(ts[i])
                e = self.eps(z, t, cond, tokens, shift)
                z = posterior_mean(z, i + 1, e, sub)
                if i > 0:
                    sigma = math.sqrt(sub.beta[i])
                    draws = np.stack([s.normal(per, per * (len(ts) - i)).reshape(shape) for s in streams])
                    z = z + sigma * torch.from_numpy(draws)
            img = np.clip(nchw_to_images(self.autoencoder.decode(z)), 0.0, 1.0)
        return (img, z) if return_latents else img

    def encode_semantic(self, images, tokens: Sequence[Sequence[int]], t_star: int | None = None,
                        shift: Callable | None = None) -> torch.Tensor:
        """Deterministic pooled bottleneck embedding (N, bottleneck).

        Accepts HWC arrays or an NCHW tensor; differentiable for tensors.
        """
        check_is_fitted(self, "net_")
        x = images if torch.is_tensor(images) and images.ndim == 4 else images_to_nchw(check_images(images))
        t_star = t_star or max(1, self.T // 10)
        z0 = self.autoencoder.encode(x)
        z_t = q_sample(z0, t_star, torch.zeros_like(z0), self.schedule_)
        n = x.shape[0]
        te = self.net_.embed_time(np.full(n, t_star))
        b, _ = self.net_.down_path(z_t, te, z0, _pad(tokens, n))
        if shift is not None:
            b = shift(b, np.full(n, t_star))
        return b.mean(dim=(2, 3))

    def checksum(self) -> str:
        return nx.module_checksum(self.net_)

    def save(self, path) -> None:
        nx.save_module(path, self.net_)

    def load(self, path) -> "LatentDiffusion":
        self._build()
        nx.load_module(path, self.net_)
        self.loss_history_ = []
        nx.freeze(self.net_)
        return self
