"""Toy joint text-image embedding, directional losses and evaluation metrics."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .numerics import RngStream
from .validation import check_images, check_token_batch, images_to_nchw
from .vocab import PAD, TOKENS


class DegenerateDirectionError(ValueError):
    """An edit direction has (numerically) zero length."""


DEGENERATE_TOL = 1e-10


class ImageEncoder(nn.Module):
    def __init__(self, dim: int = 64, width: int = 32):
        super().__init__()
        self.c1 = nn.Conv2d(3, width // 2, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(width // 2, width, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.head = nn.Linear(2 * width, dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-normalisation activations; ``x`` is NCHW in [0, 1]."""
        h = F.silu(self.c1(x * 2.0 - 1.0))
        h = F.silu(self.c2(h))
        h = F.silu(self.c3(h))
        return self.head(h.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(x), dim=-1)


class TextEncoder(nn.Module):
    """Bag-of-tokens embedding followed by a two-layer perceptron."""

    def __init__(self, dim: int = 64, vocab_size: int = len(TOKENS), width: int = 64):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(vocab_size, width))
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens`` is a (N, L) PAD-padded id tensor."""
        mask = (tokens != PAD).to(nx.DTYPE)
        bag = (self.table[tokens] * mask[..., None]).sum(1) / mask.sum(1, keepdim=True).clamp(min=1.0)
        return F.normalize(self.fc2(F.silu(self.fc1(bag))), dim=-1)


def pad_tokens(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    seqs = check_token_batch(seqs)
    width = max(1, max(len(s) for s in seqs))
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def info_nce(img: torch.Tensor, txt: torch.Tensor, groups: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric contrastive loss; items sharing a caption group are all positives."""
    logits = img @ txt.T / temperature
    pos = (groups[:, None] == groups[None, :]).to(nx.DTYPE)
    target = pos / pos.sum(1, keepdim=True)
    li = -(target * F.log_softmax(logits, dim=1)).sum(1).mean()
    lt = -(target * F.log_softmax(logits.T, dim=1)).sum(1).mean()
    return 0.5 * (li + lt)


class EmbeddingSpace(BaseEstimator):
    """CLIP stand-in: frozen image/text encoders into a shared unit sphere.

    Parameters
    ----------
    dim : embedding dimension.
    epochs, batch_size, lr : contrastive training schedule.
    temperature : softmax temperature of the InfoNCE logits.
    seed : initialisation and batching seed.
    """

    def __init__(self, dim: int = 64, epochs: int = 20, batch_size: int = 64, lr: float = 2e-3,
                 temperature: float = 0.1, seed: int = 0):
        self.dim = dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.temperature = temperature
        self.seed = seed

    def _build(self):
        rng = RngStream(self.seed, nx.stream_id("embedspace.init"))
        self.image_encoder_ = nx.init_module(ImageEncoder(self.dim), rng.child("image"))
        self.text_encoder_ = nx.init_module(TextEncoder(self.dim), rng.child("text"))
        with torch.no_grad():
            self.text_encoder_.table.mul_(np.sqrt(self.text_encoder_.table.shape[1]))
        return self

    def initialize(self) -> "EmbeddingSpace":
        """Untrained (random) encoders, frozen."""
        self._build()
        self.loss_history_ = []
        return self._freeze()

    def _freeze(self):
        nx.freeze(self.image_encoder_)
        nx.freeze(self.text_encoder_)
        return self

    def fit(self, images, captions=None):
        """Train on images with caption token sequences (or on a list of CaptionedView)."""
        if captions is None:
            images, captions = [v.image for v in images], [v.caption_tokens for v in images]
        x = images_to_nchw(check_images(images))
        captions = [tuple(c) for c in check_token_batch(captions)]
        distinct = sorted(set(captions))
        if len(distinct) < 2:
            raise ValueError("contrastive training needs at least two distinct captions")
        group_of = {c: i for i, c in enumerate(distinct)}
        groups = torch.as_tensor([group_of[c] for c in captions])
        tokens = pad_tokens(captions)
        self._build()
        params = {f"image.{k}": p for k, p in self.image_encoder_.named_parameters()}
        params.update({f"text.{k}": p for k, p in self.text_encoder_.named_parameters()})
        opt = nx.Adam(params, lr=self.lr)
        n = x.shape[0]
        bs = min(self.batch_size, n)
        cur = RngStream(self.seed, nx.stream_id("embedspace.batches")).cursor()
        self.loss_history_ = []
        step = 0
        for _ in range(self.epochs):
            order = np.argsort(cur.uniform(n), kind="stable")
            for s in range(0, n - bs + 1, bs):
                idx = torch.as_tensor(order[s:s + bs])
                loss = info_nce(self.image_encoder_(x[idx]), self.text_encoder_(tokens[idx]),
                                groups[idx], self.temperature)
                nx.check_finite(loss, "embedding loss", step)
                opt.zero_grad()
                nx.backward(loss)
                opt.step()
                self.loss_history_.append(loss.item())
                step += 1
        return self._freeze()

    # -- encoders ---------------------------------------------------------
    def encode_images(self, images) -> torch.Tensor:
        """Unit embeddings; accepts HWC arrays or an NCHW tensor (differentiable)."""
        check_is_fitted(self, "image_encoder_")
        x = images if torch.is_tensor(images) and images.ndim == 4 else images_to_nchw(check_images(images))
        return self.image_encoder_(x)

    def image_features(self, images) -> np.ndarray:
        check_is_fitted(self, "image_encoder_")
        x = images if torch.is_tensor(images) and images.ndim == 4 else images_to_nchw(check_images(images))
        with torch.no_grad():
            return self.image_encoder_.features(x).numpy()

    def encode_text(self, token_seqs) -> torch.Tensor:
        check_is_fitted(self, "text_encoder_")
        if token_seqs and isinstance(token_seqs[0], (int, np.integer)):
            token_seqs = [token_seqs]
        return self.text_encoder_(pad_tokens(token_seqs))

    def transform(self, images) -> np.ndarray:
        with torch.no_grad():
            return self.encode_images(images).numpy()

    def contrastive_loss(self, images, captions) -> float:
        captions = [tuple(c) for c in captions]
        distinct = {c: i for i, c in enumerate(sorted(set(captions)))}
        groups = torch.as_tensor([distinct[c] for c in captions])
        with torch.no_grad():
            return float(info_nce(self.encode_images(images), self.encode_text(captions), groups, self.temperature))

    # -- persistence --------------------------------------------------------
    def state_tensors(self) -> dict:
        out = {f"image.{k}": v for k, v in self.image_encoder_.state_dict().items()}
        out.update({f"text.{k}": v for k, v in self.text_encoder_.state_dict().items()})
        return out

    def save(self, path) -> None:
        nx.save_archive(path, self.state_tensors())

    def load(self, path) -> "EmbeddingSpace":
        self._build()
        arrays = nx.load_archive(path)
        for prefix, mod in (("image.", self.image_encoder_), ("text.", self.text_encoder_)):
            mod.load_state_dict({k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)})
        self.loss_history_ = []
        return self._freeze()


# ---------------------------------------------------------------------------
# directional losses and metrics

def _unit(v: torch.Tensor, what: str) -> torch.Tensor:
    n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if (n < DEGENERATE_TOL).any():
        raise DegenerateDirectionError(f"{what} direction has zero length (degenerate edit)")
    return v / n


def direction_loss_from_embeddings(t_src, t_tgt, x_src, x_tgt) -> torch.Tensor:
    """1 - cos(text direction, image direction), directions normalised first."""
    dt = _unit(t_tgt - t_src, "text")
    di = _unit(x_tgt - x_src, "image")
    return 1.0 - (dt * di).sum(-1)


def clip_direction_loss(x_src, t_src, x_tgt, t_tgt, space: EmbeddingSpace) -> torch.Tensor:
    """Directional text-image loss in [0, 2]; differentiable w.r.t. the images.

    Images may be HWC arrays or NCHW tensors; for a batch the mean is returned.
    """
    es = space.encode_text([t_src])[0]
    et = space.encode_text([t_tgt])[0]
    xs = space.encode_images(x_src)
    xt = space.encode_images(x_tgt)
    return direction_loss_from_embeddings(es, et, xs, xt).mean()


class DirectionScore(NamedTuple):
    value: float
    n_degenerate: int
    n_views: int


def _image_deltas(orig_views, edited_views, space) -> np.ndarray:
    if len(orig_views) != len(edited_views):
        raise ValueError(f"view lists differ in length: {len(orig_views)} vs {len(edited_views)}")
    if len(orig_views) == 0:
        raise ValueError("empty view list")
    return space.transform(edited_views) - space.transform(orig_views)


def direction_similarity(orig_views, edited_views, t_src, t_tgt, space: EmbeddingSpace) -> DirectionScore:
    """Mean cosine between text edit direction and per-view image edit directions.

    Views whose image direction is degenerate are excluded and counted.
    """
    deltas = _image_deltas(orig_views, edited_views, space)
    with torch.no_grad():
        dt = (space.encode_text([t_tgt])[0] - space.encode_text([t_src])[0]).numpy()
    return similarity_of_directions(deltas, dt)


def similarity_of_directions(deltas: np.ndarray, text_direction: np.ndarray) -> DirectionScore:
    """Mean cosine of each non-degenerate row of ``deltas`` with ``text_direction``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    dt = np.asarray(text_direction, dtype=np.float64)
    if np.linalg.norm(dt) < DEGENERATE_TOL:
        raise DegenerateDirectionError("text direction has zero length (degenerate edit)")
    dt = dt / np.linalg.norm(dt)
    norms = np.linalg.norm(deltas, axis=1)
    ok = norms >= DEGENERATE_TOL
    n_bad = int((~ok).sum())
    if not ok.any():
        return DirectionScore(0.0, n_bad, len(deltas))
    cos = (deltas[ok] / norms[ok, None]) @ dt
    return DirectionScore(float(cos.mean()), n_bad, len(deltas))


def direction_consistency(orig_views, edited_views, space: EmbeddingSpace) -> DirectionScore:
    """Mean cosine between edit directions of consecutive views along a path."""
    deltas = _image_deltas(orig_views, edited_views, space)
    return consistency_of_directions(deltas)


def consistency_of_directions(deltas: np.ndarray) -> DirectionScore:
    norms = np.linalg.norm(deltas, axis=1)
    ok = norms >= DEGENERATE_TOL
    cos = []
    for i in range(len(deltas) - 1):
        if ok[i] and ok[i + 1]:
            cos.append(float(deltas[i] @ deltas[i + 1] / (norms[i] * norms[i + 1])))
    if len(cos) < 1 or len(deltas) < 2:
        raise ValueError("direction consistency needs at least two valid consecutive views")
    return DirectionScore(float(np.mean(cos)), int((~ok).sum()), len(deltas))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) via symmetric square roots."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set, got {a.shape[0]} and {b.shape[0]}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    sa = np.cov(a, rowvar=False)
    sb = np.cov(b, rowvar=False)
    # Tr((Sa Sb)^1/2) == Tr((Sa^1/2 Sb Sa^1/2)^1/2), and the inner matrix is symmetric PSD
    ra = _sqrt_psd(sa)
    inner = ra @ sb @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)
