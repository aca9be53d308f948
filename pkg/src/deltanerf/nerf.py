"""Latent-conditioned radiance field, volume rendering and Stage-2 training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .numerics import RngStream
from .scenes import Camera, CaptionedView
from .validation import check_images

BOUND_RADIUS = 1.0


def positional_encoding(v: torch.Tensor, L: int) -> torch.Tensor:
    """[v, sin(2^k pi v), cos(2^k pi v) for k < L] along the last axis."""
    if L < 0:
        raise ValueError("encoding order must be >= 0")
    v = torch.as_tensor(v, dtype=nx.DTYPE)
    if L == 0:
        return v
    freqs = (2.0 ** torch.arange(L, dtype=nx.DTYPE)) * math.pi
    ang = v[..., None, :] * freqs[:, None]  # (..., L, D)
    enc = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-2)  # (..., L, 2, D)
    return torch.cat([v, enc.reshape(*v.shape[:-1], -1)], dim=-1)


class RadianceField(nn.Module):
    """(x, d, z) -> (sigma >= 0, rgb in [0, 1]); density never sees d or z.

    The first colour layer is split into a per-sample part (density features)
    and a per-ray part (encoded direction and z); summing the two equals one
    linear layer over their concatenation.
    """

    def __init__(self, z_dim: int = 64, L_x: int = 6, L_d: int = 4, width: int = 64, depth: int = 3):
        super().__init__()
        self.z_dim, self.L_x, self.L_d = z_dim, L_x, L_d
        dx = 3 * (2 * L_x + 1)
        dd = 3 * (2 * L_d + 1)
        layers = [nn.Linear(dx, width)] + [nn.Linear(width, width) for _ in range(depth - 1)]
        self.density = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(width, 1)
        self.feature_head = nn.Linear(width, width)
        self.color_feat = nn.Linear(width, width)
        self.color_ray = nn.Linear(dd + z_dim, width)
        self.rgb_head = nn.Linear(width, 3)
        self.background = nn.Parameter(torch.zeros(3))

    def ray_code(self, d: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.z_dim:
            raise nx.ShapeError(f"field_eval: z has dimension {z.shape[-1]}, expected {self.z_dim}")
        return self.color_ray(torch.cat([positional_encoding(d, self.L_d), z], dim=-1))

    def sigma_and_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = positional_encoding(x, self.L_x)
        for lin in self.density:
            h = torch.relu(lin(h))
        return F.softplus(self.sigma_head(h)[..., 0]), self.feature_head(h)

    def forward(self, x: torch.Tensor, d: torch.Tensor, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Point-wise evaluation; ``x``, ``d`` (N, 3) and ``z`` (N, z_dim)."""
        sigma, feat = self.sigma_and_features(x)
        rgb = torch.sigmoid(self.rgb_head(torch.relu(self.color_feat(feat) + self.ray_code(d, z))))
        return sigma, rgb

    def background_rgb(self) -> torch.Tensor:
        return torch.sigmoid(self.background)


def field_eval(x, d, z, field: RadianceField):
    return field(torch.as_tensor(x), torch.as_tensor(d), torch.as_tensor(z))


# ---------------------------------------------------------------------------
# quadrature


@dataclass
class RaySample:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    n_samples: int = 64

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ValueError(f"t_near {self.t_near} must be < t_far {self.t_far}")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must have unit norm")


def composite(sigma: torch.Tensor, rgb: torch.Tensor, t_vals: torch.Tensor, t_far: torch.Tensor,
              background: torch.Tensor):
    """Emission-absorption quadrature over (R, N) samples.

    Returns (colour (R, 3), weights (R, N), final transmittance (R,)).
    """
    deltas = torch.cat([t_vals[:, 1:] - t_vals[:, :-1], t_far[:, None] - t_vals[:, -1:]], dim=1)
    tau = sigma * deltas
    acc = torch.cumsum(tau, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=1))
    weights = trans * (1.0 - torch.exp(-tau))
    t_final = torch.exp(-acc[:, -1])
    color = (weights[..., None] * rgb).sum(1) + t_final[:, None] * background
    return color, weights, t_final


def ray_bounds(o: np.ndarray, d: np.ndarray, radius: float = BOUND_RADIUS):
    """Entry/exit distances of rays through the bounding ball; ``hit`` mask."""
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - sq, 0.0)
    far = -b + sq
    hit = (disc > 0) & (far > near + 1e-9)
    return near, far, hit


def sample_depths(near: torch.Tensor, far: torch.Tensor, n: int, jitter: np.ndarray | None) -> torch.Tensor:
    """Stratified depths; ``jitter`` (R, n) in [0, 1) or None for bin midpoints."""
    u = torch.full((near.shape[0], n), 0.5) if jitter is None else torch.from_numpy(jitter)
    k = torch.arange(n, dtype=nx.DTYPE)[None]
    return near[:, None] + (k + u) / n * (far - near)[:, None]


def render_rays(field: RadianceField, o: np.ndarray, d: np.ndarray, z: torch.Tensor, n_samples: int,
                jitter: np.ndarray | None = None, background: torch.Tensor | None = None):
    """Render R rays; ``z`` is (R, z_dim) or (z_dim,). Returns (colour, final transmittance)."""
    R = o.shape[0]
    bg = field.background_rgb() if background is None else torch.as_tensor(background)
    z = torch.as_tensor(z)
    if z.ndim == 1:
        z = z.expand(R, -1)
    near, far, hit = ray_bounds(o, d)
    color = bg.expand(R, 3)
    t_final = torch.ones(R)
    if not hit.any():
        return color, t_final
    idx = np.nonzero(hit)[0]
    ti = torch.from_numpy(idx)
    oh = torch.from_numpy(o[idx])
    dh = torch.from_numpy(d[idx])
    tv = sample_depths(torch.from_numpy(near[idx]), torch.from_numpy(far[idx]), n_samples,
                       None if jitter is None else jitter[idx])
    pts = oh[:, None] + tv[..., None] * dh[:, None]
    sigma, feat = field.sigma_and_features(pts.reshape(-1, 3))
    ray = field.ray_code(dh, z[ti])
    pre = field.color_feat(feat).reshape(len(idx), n_samples, -1) + ray[:, None]
    rgb = torch.sigmoid(field.rgb_head(torch.relu(pre)))
    c_hit, _, tf_hit = composite(sigma.reshape(len(idx), n_samples), rgb, tv, torch.from_numpy(far[idx]), bg)
    color = color.index_put((ti,), c_hit)
    t_final = t_final.index_put((ti,), tf_hit)
    return color, t_final


def render_ray(ray: RaySample, z, field: RadianceField, jitter: np.ndarray | None = None,
               background=None):
    """Single ray between its own near/far bounds; returns (rgb, final transmittance)."""
    tv = sample_depths(torch.tensor([ray.t_near]), torch.tensor([ray.t_far]), ray.n_samples,
                       None if jitter is None else np.asarray(jitter)[None])
    o = torch.tensor(np.asarray(ray.origin, dtype=np.float64))
    d = torch.tensor(np.asarray(ray.direction, dtype=np.float64))
    pts = o + tv[0, :, None] * d
    z = torch.as_tensor(z).reshape(1, -1).expand(ray.n_samples, -1)
    sigma, rgb = field(pts, d.expand(ray.n_samples, 3), z)
    bg = field.background_rgb() if background is None else torch.as_tensor(background)
    c, _, tf = composite(sigma[None], rgb[None], tv, torch.tensor([ray.t_far]), bg)
    return c[0], tf[0]


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    o, d = camera.rays(1)
    return np.ascontiguousarray(o[:, :, 0].reshape(-1, 3)), np.ascontiguousarray(d[:, :, 0].reshape(-1, 3))


def render_view(camera: Camera, z, field: RadianceField, n_samples: int = 64, seed: int | None = None,
                chunk: int = 2048, differentiable: bool = False):
    """Image (H, W, 3). With ``seed`` the depths are jittered from a per-pixel stream."""
    o, d = camera_rays(camera)
    jitter = None
    if seed is not None:
        jitter = RngStream(seed, nx.stream_id("render_view")).uniform(len(o) * n_samples).reshape(len(o), n_samples)
    z = torch.as_tensor(z)
    outs = []
    ctx = torch.enable_grad() if differentiable else torch.no_grad()
    with ctx:
        for s in range(0, len(o), chunk):
            c, _ = render_rays(field, o[s:s + chunk], d[s:s + chunk], z, n_samples,
                               None if jitter is None else jitter[s:s + chunk])
            outs.append(c)
        img = torch.cat(outs).reshape(camera.height, camera.width, 3)
    return img if differentiable else img.numpy()


# ---------------------------------------------------------------------------
# losses


def consistency_loss(z_i: torch.Tensor, reencoded: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between a re-encoded render and its conditioning z."""
    if reencoded.shape != z_i.shape:
        raise nx.ShapeError(f"consistency_loss: shapes {tuple(reencoded.shape)} and {tuple(z_i.shape)}")
    return (reencoded - z_i).abs().mean()


def photometric_loss(pred: torch.Tensor, target: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    if kind == "mse":
        return ((pred - target) ** 2).mean()
    if kind == "l1":
        return (pred - target).abs().mean()
    raise ValueError(f"unknown photometric loss {kind!r}")


def total_loss(l_photo: torch.Tensor, l_c, lambda_c: float) -> torch.Tensor:
    if lambda_c < 0:
        raise ValueError("lambda_c must be non-negative")
    return l_photo if lambda_c == 0 else l_photo + lambda_c * l_c


# ---------------------------------------------------------------------------
# estimator


class NeRF(BaseEstimator):
    """Per-scene conditional radiance field fitted to posed images.

    ``fit(views, z, semantic_encoder)``: ``z`` holds one conditioning vector per
    view (omit for an unconditioned field). With ``lambda_c > 0`` each step also
    renders view ``j`` at ``consistency_res`` conditioned on ``z_i`` and
    penalises ``|semantic_encoder(render) - z_i|``.

    ``background`` is ``"auto"`` (fixed to the median border colour of the
    training views), ``"learned"`` or an RGB triple.
    """

    def __init__(self, z_dim: int = 64, L_x: int = 6, L_d: int = 4, width: int = 64, depth: int = 3,
                 n_samples: int = 64, steps: int = 2000, batch_rays: int = 256, lr: float = 5e-3,
                 lr_final: float = 5e-4, lambda_c: float = 0.05, consistency_res: int = 16,
                 encoder_res: int = 32, photometric: str = "mse", background="auto", seed: int = 0):
        self.z_dim = z_dim
        self.L_x = L_x
        self.L_d = L_d
        self.width = width
        self.depth = depth
        self.n_samples = n_samples
        self.steps = steps
        self.batch_rays = batch_rays
        self.lr = lr
        self.lr_final = lr_final
        self.lambda_c = lambda_c
        self.consistency_res = consistency_res
        self.encoder_res = encoder_res
        self.photometric = photometric
        self.background = background
        self.seed = seed

    def initialize(self) -> "NeRF":
        self.field_ = nx.init_module(RadianceField(self.z_dim, self.L_x, self.L_d, self.width, self.depth),
                                     RngStream(self.seed, nx.stream_id("nerf.init")))
        self.z_mean_ = torch.zeros(self.z_dim)
        self.loss_history_ = []
        return self

    def fit(self, views: Sequence[CaptionedView], z=None,
            semantic_encoder: Callable[[torch.Tensor], torch.Tensor] | None = None):
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be non-negative")
        images = check_images([v.image for v in views])
        n_views = len(views)
        z_all = torch.zeros(n_views, self.z_dim) if z is None else torch.tensor(np.asarray(z, dtype=np.float64))
        if z_all.shape != (n_views, self.z_dim):
            raise nx.ShapeError(f"NeRF.fit: z shape {tuple(z_all.shape)}, expected {(n_views, self.z_dim)}")
        use_c = self.lambda_c > 0 and semantic_encoder is not None and n_views > 1
        self.initialize()
        self.z_mean_ = z_all.mean(0)
        bg = self._fixed_background(images)
        if bg is not None:
            with torch.no_grad():
                self.field_.background.copy_(torch.logit(torch.as_tensor(bg).clamp(1e-4, 1 - 1e-4)))
        rays = [camera_rays(v.camera) for v in views]
        o_all = np.concatenate([r[0] for r in rays])
        d_all = np.concatenate([r[1] for r in rays])
        target = torch.from_numpy(images.reshape(-1, 3))
        view_of = np.concatenate([np.full(len(r[0]), k) for k, r in enumerate(rays)])
        total = len(o_all)
        params = {n: p for n, p in self.field_.named_parameters() if bg is None or n != "background"}
        opt = nx.Adam(params, lr=self.lr)
        gamma = (self.lr_final / self.lr) ** (1.0 / max(1, self.steps))
        sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
        photo_rng = RngStream(self.seed, nx.stream_id("nerf.photo")).cursor()
        cons_rng = RngStream(self.seed, nx.stream_id("nerf.consistency")).cursor()
        self.loss_history_ = []
        for step in range(self.steps):
            idx = photo_rng.integers(total, self.batch_rays)
            jit = photo_rng.uniform((self.batch_rays, self.n_samples))
            pred, _ = render_rays(self.field_, o_all[idx], d_all[idx], z_all[torch.from_numpy(view_of[idx])],
                                  self.n_samples, jit)
            l_photo = photometric_loss(pred, target[torch.from_numpy(idx)], self.photometric)
            l_c = torch.zeros(())
            if use_c:
                i = int(cons_rng.integers(n_views, 1)[0])
                j = int((i + 1 + cons_rng.integers(n_views - 1, 1)[0]) % n_views)
                l_c = self._consistency_term(views[j].camera, z_all[i], semantic_encoder, cons_rng)
            loss = total_loss(l_photo, l_c, self.lambda_c if use_c else 0.0)
            nx.check_finite(loss, "nerf loss", step)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            sched.step()
            self.loss_history_.append((loss.item(), l_photo.item(), l_c.item()))
        nx.freeze(self.field_)
        return self

    def _fixed_background(self, images: np.ndarray) -> np.ndarray | None:
        if isinstance(self.background, str):
            if self.background == "learned":
                return None
            if self.background == "auto":
                border = np.concatenate([images[:, 0], images[:, -1], images[:, :, 0], images[:, :, -1]], axis=1)
                return np.median(border.reshape(-1, 3), axis=0)
            raise ValueError(f"background must be 'auto', 'learned' or an RGB triple, got {self.background!r}")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or np.any(bg < 0) or np.any(bg > 1):
            raise ValueError(f"background RGB must be 3 values in [0, 1], got {self.background!r}")
        return bg

    def _consistency_term(self, camera: Camera, z_i: torch.Tensor, encoder, rng) -> torch.Tensor:
        cam = camera.resized(self.consistency_res)
        o, d = camera_rays(cam)
        jit = rng.uniform((len(o), self.n_samples))
        rgb, _ = render_rays(self.field_, o, d, z_i, self.n_samples, jit)
        img = rgb.reshape(1, cam.height, cam.width, 3).permute(0, 3, 1, 2)
        if cam.width != self.encoder_res:
            img = F.interpolate(img, size=(self.encoder_res, self.encoder_res), mode="bilinear", align_corners=False)
        return consistency_loss(z_i[None], encoder(img))

    def predict(self, cameras: Sequence[Camera], z=None, n_samples: int | None = None) -> np.ndarray:
        """Render (N, H, W, 3) images; ``z`` defaults to the mean training conditioning."""
        check_is_fitted(self, "field_")
        zz = self.z_mean_ if z is None else torch.tensor(np.asarray(z, dtype=np.float64))
        ns = n_samples or self.n_samples
        return np.stack([render_view(c, zz if zz.ndim == 1 else zz[k], self.field_, ns)
                         for k, c in enumerate(cameras)])

    def checksum(self) -> str:
        return nx.module_checksum(self.field_)

    def save(self, path) -> None:
        nx.save_module(path, self.field_, {"z_mean": self.z_mean_})

    def load(self, path) -> "NeRF":
        self.initialize()
        extra = nx.load_module(path, self.field_)
        self.z_mean_ = torch.from_numpy(extra["z_mean"])
        nx.freeze(self.field_)
        return self
