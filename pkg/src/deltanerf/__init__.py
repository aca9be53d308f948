"""Text-guided editing of radiance fields through a shifted diffusion bottleneck.

Modules: ``numerics`` (tensor substrate, RNG, archives), ``scenes`` (toy scenes,
reference renderer, edit oracle), ``embedspace`` (toy text-image space and
metrics), ``diffusion`` (frozen latent prior), ``delta`` (Stage 1), ``nerf``
(Stage 2) and ``pipeline`` (runs, evaluation, ablations, CLI).
"""

from . import numerics  # noqa: F401  (sets the float64 default dtype first)
from .delta import DeltaEditor
from .diffusion import AutoEncoder, LatentDiffusion
from .embedspace import EmbeddingSpace
from .nerf import NeRF
from .pipeline import RunConfig

__all__ = ["AutoEncoder", "DeltaEditor", "EmbeddingSpace", "LatentDiffusion", "NeRF", "RunConfig"]
__version__ = "0.1.0"
