"""Run configuration, stage runners, evaluation and ablations.

A run directory has a fixed layout::

    config.json
    checkpoints/   autoencoder, diffusion, embedding, delta, nerf archives + losses.json
    datasets/      prior/{sources,targets}, scene, eval_original, eval_edited, edited
    renders/       original/, edited/  (held-out orbit, PPM)
    metrics.csv

Per-view work (data generation, editing, rendering) is split into fixed
one-view tasks with their own RNG streams, so results do not depend on the
number of worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics as nx
from . import scenes as S
from .delta import DeltaEditor
from .diffusion import AutoEncoder, LatentDiffusion, psnr
from .embedspace import EmbeddingSpace, direction_similarity, direction_consistency, frechet_distance
from .nerf import NeRF, render_view
from .sceneio import read_dataset, write_dataset, write_ppm, read_ppm
from .vocab import OBJECT_COLORS, decode_tokens

log = logging.getLogger("deltanerf")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the field."""


class MissingArtifactError(FileNotFoundError):
    """A stage input (checkpoint, dataset, render) does not exist."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # scene and edit; scene is "recolor" (fixture) or "generated"
    scene: str = "recolor"
    scene_seed: int = 0
    edit: list = field(default_factory=lambda: ["recolor", 0, "red"])
    n_views: int = 24
    n_eval_views: int = 72
    eval_elevation: float = 30.0
    image_size: int = 32
    # frozen prior
    prior_pairs: int = 4000
    latent_channels: int = 4
    ae_steps: int = 6000
    T: int = 1000
    beta_1: float = 0.00085
    beta_T: float = 0.012
    bottleneck: int = 64
    denoiser_base: int = 32
    diffusion_steps: int = 30000
    embed_dim: int = 64
    embed_epochs: int = 20
    # stage 1
    lambda_reg: float = 2.0
    steps_per_view: int = 50
    delta_lr: float = 1e-3
    delta_init: str = "random"
    t_star: int | None = None
    sample_steps: int = 50
    # stage 2
    nerf_steps: int = 2000
    lambda_c: float = 0.05
    n_samples: int = 64
    batch_rays: int = 256
    nerf_width: int = 64
    consistency_res: int = 16
    workers: int = 1

    @classmethod
    def published(cls, **overrides) -> "RunConfig":
        """Step counts as published (30000 NeRF steps); everything else desk-scale."""
        return cls(**{"nerf_steps": 30000, **overrides}).validate()

    @property
    def t_star_value(self) -> int:
        return self.t_star if self.t_star is not None else max(1, self.T // 10)

    @property
    def d_z(self) -> int:
        return self.bottleneck

    def validate(self) -> "RunConfig":
        def need(ok: bool, name: str, why: str):
            if not ok:
                raise ConfigError(f"config field {name!r}: {why} (got {getattr(self, name)!r})")

        for name in ("n_views", "n_eval_views", "prior_pairs", "T", "latent_channels", "bottleneck",
                     "denoiser_base", "embed_dim", "steps_per_view", "sample_steps", "n_samples",
                     "batch_rays", "nerf_width", "consistency_res", "workers"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1, name, "must be an integer >= 1")
        for name in ("ae_steps", "diffusion_steps", "embed_epochs", "nerf_steps"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 0, name, "must be an integer >= 0")
        need(self.scene in ("recolor", "generated"), "scene", "must be 'recolor' or 'generated'")
        need(self.image_size == 32, "image_size", "the toy prior works on 32x32 images")
        need(0 < self.beta_1 <= self.beta_T < 1, "beta_1", "need 0 < beta_1 <= beta_T < 1")
        need(self.lambda_reg >= 0, "lambda_reg", "must be non-negative")
        need(self.lambda_c >= 0, "lambda_c", "must be non-negative")
        need(self.delta_lr > 0, "delta_lr", "must be positive")
        need(self.delta_init in ("random", "zero"), "delta_init", "must be 'random' or 'zero'")
        need(self.n_eval_views > self.embed_dim, "n_eval_views",
             f"Frechet distance needs more than embed_dim={self.embed_dim} views")
        need(self.t_star is None or (isinstance(self.t_star, int) and 1 <= self.t_star <= self.T),
             "t_star", f"must lie in [1, T={self.T}]")
        need(isinstance(self.edit, (list, tuple)) and len(self.edit) >= 1
             and self.edit[0] in ("identity", "recolor", "remove", "enlarge"), "edit",
             "must be [op, object index, ...] with op identity/recolor/remove/enlarge")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"config field {k!r}: unknown field")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config file {p}: top level must be an object")
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})


# ---------------------------------------------------------------------------
# run directory


class RunDir:
    """Paths of one run. ``stage_root`` holds per-variant stage outputs (ablations)."""

    CHECKPOINTS = ("autoencoder", "diffusion", "embedding")

    def __init__(self, root, stage_root=None):
        self.root = Path(root)
        self.stage_root = Path(stage_root) if stage_root is not None else self.root

    def ckpt(self, name: str) -> Path:
        base = self.root if name in self.CHECKPOINTS else self.stage_root
        return base / "checkpoints" / f"{name}.dnar"

    def dataset(self, name: str) -> Path:
        base = self.stage_root if name == "edited" else self.root
        return base / "datasets" / name

    def renders(self, name: str) -> Path:
        base = self.root if name == "original" else self.stage_root
        return base / "renders" / name

    @property
    def metrics(self) -> Path:
        return self.stage_root / "metrics.csv"

    @property
    def losses(self) -> Path:
        return self.stage_root / "checkpoints" / "losses.json"

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing artifact: {path}")
        return path

    def record_losses(self, **entries) -> None:
        self.losses.parent.mkdir(parents=True, exist_ok=True)
        data = json.loads(self.losses.read_text()) if self.losses.exists() else {}
        data.update(entries)
        self.losses.write_text(json.dumps(data, indent=1, sort_keys=True))

    def read_losses(self) -> dict:
        return json.loads(self.losses.read_text()) if self.losses.exists() else {}


def write_config(cfg: RunConfig, run: RunDir) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    (run.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# deterministic parallel map


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map; each item is an independent task so results never depend on ``workers``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# scene and edit


def scene_and_instruction(cfg: RunConfig) -> tuple[S.Scene, S.EditInstruction]:
    if cfg.scene == "recolor":
        return S.recolor_fixture(cfg.image_size)
    scene = S.gen_scene(cfg.scene_seed)
    try:
        return scene, S.make_instruction(scene, *cfg.edit)
    except (IndexError, KeyError) as exc:
        raise ConfigError(f"config field 'edit': {exc}") from exc


def _prior_example(args):
    """One (source view, oracle-edited view, camera, source caption, target caption) pair."""
    seed, k = args
    scene_seed = nx.stream_id("prior.scene", seed, k) >> 1
    scene = S.gen_scene(scene_seed)
    cur = nx.RngStream(seed, nx.stream_id("prior.edit", k)).cursor()
    cam = S.sample_cameras(1, scene_seed, azimuth_offset=2.0 * math.pi * float(cur.uniform(1)[0]))[0]
    u = cur.uniform(1)[0]
    target = int(cur.integers(len(scene.objects), 1)[0])
    if u < 0.4:
        op: tuple = ("identity",)
    elif u < 0.8:
        colors = [c for c, rgb in OBJECT_COLORS.items() if not np.allclose(rgb, scene.objects[target].albedo)]
        op = ("recolor", target, colors[int(cur.integers(len(colors), 1)[0])])
    elif u < 0.9:
        op = ("remove", target)
    else:
        op = ("enlarge", target)
    instr = S.make_instruction(scene, *op)
    edited = S.apply_edit_oracle(scene, instr)
    return (S.render_reference(scene, cam), S.render_reference(edited, cam), cam,
            S.caption(scene), list(instr.tokens))


def _render_task(args) -> np.ndarray:
    scene_dict, cam_dict = args
    return S.render_reference(S.Scene.from_dict(scene_dict), S.Camera.from_dict(cam_dict))


def train_cameras(cfg: RunConfig) -> list[S.Camera]:
    return S.sample_cameras(cfg.n_views, cfg.seed, width=cfg.image_size)


def eval_cameras(cfg: RunConfig) -> list[S.Camera]:
    # offset by half a step so no evaluation camera coincides with a training azimuth
    return S.orbit_cameras(cfg.n_eval_views, cfg.eval_elevation, width=cfg.image_size,
                           azimuth_offset=math.pi / cfg.n_eval_views)


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: RunConfig) -> RunDir:
    """Prior training pairs, the scene's training views and held-out references."""
    run = RunDir(cfg.out_dir)
    write_config(cfg, run)
    pairs = parallel_map(_prior_example, [(cfg.seed, k) for k in range(cfg.prior_pairs)], cfg.workers)
    write_dataset(run.dataset("prior") / "sources", [S.CaptionedView(p[0], p[2], p[3]) for p in pairs],
                  provenance={"kind": "prior sources", "seed": cfg.seed})
    write_dataset(run.dataset("prior") / "targets", [S.CaptionedView(p[1], p[2], p[4]) for p in pairs],
                  provenance={"kind": "prior targets (oracle edits of sources)", "seed": cfg.seed})

    scene, instr = scene_and_instruction(cfg)
    edited = S.apply_edit_oracle(scene, instr)
    prov = {"instruction": decode_tokens(instr.tokens), "op": [instr.op, *instr.args], "seed": cfg.seed}
    for name, sc, cams_ in (("scene", scene, train_cameras(cfg)),
                            ("eval_original", scene, eval_cameras(cfg)),
                            ("eval_edited", edited, eval_cameras(cfg))):
        imgs = parallel_map(_render_task, [(sc.to_dict(), c.to_dict()) for c in cams_], cfg.workers)
        cap = S.caption(sc)
        write_dataset(run.dataset(name), [S.CaptionedView(im, c, cap) for im, c in zip(imgs, cams_)],
                      scene=sc, provenance=prov, extra={"instruction": list(instr.tokens)})
    return run


def _prior_data(run: RunDir):
    src, _ = read_dataset(run.require(run.dataset("prior") / "sources"))
    tgt, _ = read_dataset(run.require(run.dataset("prior") / "targets"))
    return src, tgt


def train_ae(cfg: RunConfig) -> AutoEncoder:
    run = RunDir(cfg.out_dir)
    src, tgt = _prior_data(run)
    images = np.array([v.image for v in src] + [v.image for v in tgt])
    ae = AutoEncoder(cfg.latent_channels, steps=cfg.ae_steps, seed=cfg.seed).fit(images)
    run.ckpt("autoencoder").parent.mkdir(parents=True, exist_ok=True)
    ae.save(run.ckpt("autoencoder"))
    run.record_losses(autoencoder_final=ae.loss_history_[-1] if ae.loss_history_ else None)
    return ae


def train_embed(cfg: RunConfig) -> EmbeddingSpace:
    run = RunDir(cfg.out_dir)
    src, tgt = _prior_data(run)
    views = src + tgt
    space = EmbeddingSpace(cfg.embed_dim, epochs=cfg.embed_epochs, seed=cfg.seed)
    space.fit(np.array([v.image for v in views]), [v.caption_tokens for v in views])
    run.ckpt("embedding").parent.mkdir(parents=True, exist_ok=True)
    space.save(run.ckpt("embedding"))
    run.record_losses(embedding_final=space.loss_history_[-1] if space.loss_history_ else None)
    return space


def _diffusion(cfg: RunConfig, ae: AutoEncoder) -> LatentDiffusion:
    return LatentDiffusion(ae, cfg.T, cfg.beta_1, cfg.beta_T, base=cfg.denoiser_base, bottleneck=cfg.bottleneck,
                           steps=cfg.diffusion_steps, seed=cfg.seed)


def train_diffusion(cfg: RunConfig) -> LatentDiffusion:
    run = RunDir(cfg.out_dir)
    src, tgt = _prior_data(run)
    ae = load_autoencoder(cfg, run)
    dm = _diffusion(cfg, ae).fit(np.array([v.image for v in tgt]), [v.caption_tokens for v in tgt],
                                 cond_images=np.array([v.image for v in src]))
    dm.save(run.ckpt("diffusion"))
    run.record_losses(diffusion_final=dm.loss_history_[-1] if dm.loss_history_ else None)
    return dm


def load_autoencoder(cfg: RunConfig, run: RunDir) -> AutoEncoder:
    return AutoEncoder(cfg.latent_channels, seed=cfg.seed).load(run.require(run.ckpt("autoencoder")))


def load_models(cfg: RunConfig, run: RunDir) -> tuple[AutoEncoder, LatentDiffusion, EmbeddingSpace]:
    ae = load_autoencoder(cfg, run)
    dm = _diffusion(cfg, ae).load(run.require(run.ckpt("diffusion")))
    space = EmbeddingSpace(cfg.embed_dim, seed=cfg.seed).load(run.require(run.ckpt("embedding")))
    return ae, dm, space


def _editor(cfg: RunConfig, dm, space, zero: bool = False) -> DeltaEditor:
    return DeltaEditor(dm, space, lambda_reg=cfg.lambda_reg, steps_per_view=cfg.steps_per_view, lr=cfg.delta_lr,
                       t_star=cfg.t_star_value, init="zero" if zero else cfg.delta_init,
                       sample_steps=cfg.sample_steps, seed=cfg.seed)


def upstream_checksums(run: RunDir) -> dict[str, str]:
    return {n: nx.file_checksum(run.ckpt(n)) for n in RunDir.CHECKPOINTS}


@dataclass
class Stage1Result:
    editor: DeltaEditor
    edited: np.ndarray
    z: np.ndarray
    checksums_before: dict
    checksums_after: dict


# worker-side model cache, keyed by run paths; filled lazily in each process
_WORKER_MODELS: dict = {}


def _worker_editor(cfg_dict: dict, root: str, stage_root: str, zero: bool) -> DeltaEditor:
    key = (root, stage_root, zero, json.dumps(cfg_dict, sort_keys=True))
    if key not in _WORKER_MODELS:
        cfg = RunConfig.from_dict(cfg_dict)
        run = RunDir(root, stage_root)
        _, dm, space = load_models(cfg, run)
        _WORKER_MODELS[key] = _editor(cfg, dm, space, zero).load(run.require(run.ckpt("delta")))
    return _WORKER_MODELS[key]


def _edit_task(args) -> tuple[np.ndarray, np.ndarray]:
    cfg_dict, root, stage_root, zero, k, image, instruction = args
    editor = _worker_editor(cfg_dict, root, stage_root, zero)
    edited, z = editor.edit([image], instruction, seed=cfg_dict["seed"], stream_offset=k)
    return edited[0], z[0]


def run_stage1(cfg: RunConfig, run: RunDir | None = None, zero_delta: bool = False) -> Stage1Result:
    """Train the delta module on the scene views, then edit every view."""
    run = run or RunDir(cfg.out_dir)
    views, manifest = read_dataset(run.require(run.dataset("scene")))
    instruction = manifest["instruction"]
    _, dm, space = load_models(cfg, run)
    before = upstream_checksums(run)
    editor = _editor(cfg, dm, space, zero_delta)
    editor.fit(views, views[0].caption_tokens, instruction, total_steps=0 if zero_delta else None)
    run.ckpt("delta").parent.mkdir(parents=True, exist_ok=True)
    editor.save(run.ckpt("delta"))
    hist = editor.loss_history_
    run.record_losses(stage1=hist, stage1_degenerate=editor.n_degenerate_)

    tasks = [(cfg.to_dict(), str(run.root), str(run.stage_root), zero_delta, k, v.image, instruction)
             for k, v in enumerate(views)]
    _WORKER_MODELS.clear()
    out = parallel_map(_edit_task, tasks, cfg.workers)
    edited = np.array([o[0] for o in out])
    z = np.array([o[1] for o in out])
    cap = views[0].caption_tokens
    prov = {**manifest.get("provenance", {}), "stage": "edited by delta module",
            "delta": "zero" if zero_delta else "trained", "delta_checksum": editor.checksum()}
    write_dataset(run.dataset("edited"), [S.CaptionedView(e, v.camera, cap) for e, v in zip(edited, views)],
                  provenance=prov, extra={"instruction": instruction})
    nx.save_archive(run.dataset("edited") / "embeddings.dnar", {"z": z})
    return Stage1Result(editor, edited, z, before, upstream_checksums(run))


@dataclass
class Stage2Result:
    nerf: NeRF
    renders: np.ndarray
    delta_checksum_before: str
    delta_checksum_after: str


def _nerf(cfg: RunConfig, lambda_c: float, steps: int | None = None) -> NeRF:
    return NeRF(z_dim=cfg.d_z, width=cfg.nerf_width, n_samples=cfg.n_samples,
                steps=cfg.nerf_steps if steps is None else steps, batch_rays=cfg.batch_rays,
                lambda_c=lambda_c, consistency_res=cfg.consistency_res, encoder_res=cfg.image_size,
                seed=cfg.seed)


def run_stage2(cfg: RunConfig, run: RunDir | None = None, zero_delta: bool = False) -> Stage2Result:
    """Train the conditioned NeRF on the edited views (and, once per run, an unedited one); render."""
    run = run or RunDir(cfg.out_dir)
    views, manifest = read_dataset(run.require(run.dataset("edited")))
    z = nx.load_archive(run.require(run.dataset("edited") / "embeddings.dnar"))["z"]
    instruction = manifest["instruction"]
    _, dm, space = load_models(cfg, run)
    editor = _editor(cfg, dm, space, zero_delta).load(run.require(run.ckpt("delta")))
    delta_before = nx.file_checksum(run.ckpt("delta"))

    def encoder(img: torch.Tensor) -> torch.Tensor:
        return dm.encode_semantic(img, [instruction], t_star=cfg.t_star_value, shift=editor.shift)

    nerf = _nerf(cfg, cfg.lambda_c).fit(views, z, encoder)
    nerf.save(run.ckpt("nerf_edited"))
    run.record_losses(nerf_edited=nerf.loss_history_[-1] if nerf.loss_history_ else None)

    if not run.ckpt("nerf_original").exists() and not (run.root / "checkpoints" / "nerf_original.dnar").exists():
        orig, _ = read_dataset(run.require(run.dataset("scene")))
        base = _nerf(cfg, 0.0).fit(orig)
        (run.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        base.save(run.root / "checkpoints" / "nerf_original.dnar")
    renders = render(cfg, run)
    return Stage2Result(nerf, renders, delta_before, nx.file_checksum(run.ckpt("delta")))


def _render_view_task(args) -> np.ndarray:
    path, cfg_dict, cam_dict, z = args
    key = ("nerf", path)
    if key not in _WORKER_MODELS:
        cfg = RunConfig.from_dict(cfg_dict)
        _WORKER_MODELS[key] = _nerf(cfg, 0.0).load(path)
    field_ = _WORKER_MODELS[key].field_
    return render_view(S.Camera.from_dict(cam_dict), torch.as_tensor(z), field_, cfg_dict["n_samples"])


def _render_orbit(cfg: RunConfig, ckpt: Path, out: Path) -> np.ndarray:
    nerf = _nerf(cfg, 0.0).load(ckpt)
    cams = eval_cameras(cfg)
    z = nerf.z_mean_.numpy()
    _WORKER_MODELS.pop(("nerf", str(ckpt)), None)
    imgs = np.array(parallel_map(_render_view_task, [(str(ckpt), cfg.to_dict(), c.to_dict(), z) for c in cams],
                                 cfg.workers))
    out.mkdir(parents=True, exist_ok=True)
    for k, im in enumerate(imgs):
        write_ppm(out / f"view_{k:04d}.ppm", np.clip(im, 0.0, 1.0))
    return imgs


def render(cfg: RunConfig, run: RunDir | None = None) -> np.ndarray:
    """Render the held-out orbit from the edited (and original) NeRF checkpoints."""
    run = run or RunDir(cfg.out_dir)
    orig_ckpt = run.root / "checkpoints" / "nerf_original.dnar"
    if orig_ckpt.exists():
        _render_orbit(cfg, orig_ckpt, run.renders("original"))
    return _render_orbit(cfg, run.require(run.ckpt("nerf_edited")), run.renders("edited"))


# ---------------------------------------------------------------------------
# evaluation

METRIC_FIELDS = (
    "run_id", "seed", "variant",
    "direction_similarity", "direction_similarity_unedited", "direction_consistency",
    "n_degenerate", "frechet_before", "frechet_after", "psnr_vs_oracle",
    "l1_vs_oracle", "l1_unedited_vs_oracle", "embedding_std",
    "stage1_loss_start", "stage1_loss_end", "nerf_loss_final",
)
"""Header of metrics.csv. ``*_unedited`` columns score renders of the NeRF fitted to
the original views; ``embedding_std`` is the cross-view standard deviation of the
semantic embeddings of the edited renders (mean over dimensions)."""


@dataclass
class MetricsReport:
    run_id: str
    seed: int
    variant: str
    direction_similarity: float
    direction_similarity_unedited: float
    direction_consistency: float
    n_degenerate: int
    frechet_before: float
    frechet_after: float
    psnr_vs_oracle: float
    l1_vs_oracle: float
    l1_unedited_vs_oracle: float
    embedding_std: float
    stage1_loss_start: float
    stage1_loss_end: float
    nerf_loss_final: float

    def row(self) -> list:
        return [getattr(self, f) for f in METRIC_FIELDS]

    def check_finite(self) -> "MetricsReport":
        for f in METRIC_FIELDS[3:]:
            v = getattr(self, f)
            if not math.isfinite(v):
                raise ValueError(f"metric {f} is not finite ({v})")
        return self


def write_metrics(path, reports: Sequence[MetricsReport]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in reports:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def _read_renders(d: Path, n: int) -> np.ndarray:
    files = [d / f"view_{k:04d}.ppm" for k in range(n)]
    for f in files:
        if not f.exists():
            raise MissingArtifactError(f"missing render: {f}")
    return np.array([read_ppm(f) for f in files])


def _smoothed(hist: list, end: bool) -> float:
    if not hist:
        return 0.0
    w = hist[-10:] if end else hist[:10]
    return float(np.mean(w))


def evaluate(cfg: RunConfig, run: RunDir | None = None, variant: str = "full") -> MetricsReport:
    run = run or RunDir(cfg.out_dir)
    _, dm, space = load_models(cfg, run)
    orig_refs, manifest = read_dataset(run.require(run.dataset("eval_original")))
    oracle, _ = read_dataset(run.require(run.dataset("eval_edited")))
    instruction = manifest["instruction"]
    src = orig_refs[0].caption_tokens
    n = len(orig_refs)
    ref = np.array([v.image for v in orig_refs])
    orc = np.array([v.image for v in oracle])
    edited = _read_renders(run.renders("edited"), n)
    unedited = _read_renders(run.renders("original"), n)
    editor = _editor(cfg, dm, space).load(run.require(run.ckpt("delta")))

    ds = direction_similarity(ref, edited, src, instruction, space)
    ds_u = direction_similarity(ref, unedited, src, instruction, space)
    dc = direction_consistency(ref, edited, space)
    f_ref = space.image_features(ref)
    fd_before = frechet_distance(f_ref, space.image_features(unedited))
    fd_after = frechet_distance(f_ref, space.image_features(edited))
    with torch.no_grad():
        emb = dm.encode_semantic(edited, [instruction], t_star=cfg.t_star_value, shift=editor.shift).numpy()
    losses = run.read_losses()
    hist = losses.get("stage1", [])
    nerf_final = losses.get("nerf_edited") or [0.0]
    report = MetricsReport(
        run_id=f"{variant}-seed{cfg.seed}", seed=cfg.seed, variant=variant,
        direction_similarity=ds.value, direction_similarity_unedited=ds_u.value,
        direction_consistency=dc.value, n_degenerate=ds.n_degenerate,
        frechet_before=fd_before, frechet_after=fd_after, psnr_vs_oracle=psnr(edited, orc),
        l1_vs_oracle=float(np.abs(edited - orc).mean()), l1_unedited_vs_oracle=float(np.abs(unedited - orc).mean()),
        embedding_std=float(emb.std(0).mean()),
        stage1_loss_start=_smoothed(hist, False), stage1_loss_end=_smoothed(hist, True),
        nerf_loss_final=float(nerf_final[0]),
    ).check_finite()
    write_metrics(run.metrics, [report])
    return report


# ---------------------------------------------------------------------------
# composite runners

UPSTREAM_STAGES = ("gen-data", "train-ae", "train-embed", "train-diffusion")


def _staged(name: str, fn: Callable, *args, **kw):
    log.info("%s ...", name)
    out = fn(*args, **kw)
    log.info("%s done", name)
    return out


def run_upstream(cfg: RunConfig) -> RunDir:
    for name, fn in zip(UPSTREAM_STAGES, (gen_data, train_ae, train_embed, train_diffusion)):
        _staged(name, fn, cfg)
    return RunDir(cfg.out_dir)


def run_all(cfg: RunConfig) -> MetricsReport:
    run_upstream(cfg)
    _staged("train-delta", run_stage1, cfg)
    _staged("train-nerf", run_stage2, cfg)
    return _staged("eval", evaluate, cfg)


ABLATION_VARIANTS = ("full", "no_lc", "zero_delta")


def ablate(cfg: RunConfig, reuse_upstream: bool = True) -> list[MetricsReport]:
    """Full pipeline, lambda_c = 0 and zero-delta on shared upstream models and seed.

    ``full`` and ``no_lc`` share the Stage-1 delta and edited views; only the
    NeRF objective differs.
    """
    root = Path(cfg.out_dir)
    if not (reuse_upstream and all(RunDir(root).ckpt(n).exists() for n in RunDir.CHECKPOINTS)
            and RunDir(root).dataset("scene").exists()):
        run_upstream(cfg)
    reports = []
    for variant in ABLATION_VARIANTS:
        run = RunDir(root, root / "ablation" / variant)
        vcfg = cfg.with_overrides(lambda_c=0.0) if variant == "no_lc" else cfg
        if variant == "no_lc":
            _share_stage1(RunDir(root, root / "ablation" / "full"), run)
        else:
            _staged(f"{variant}: train-delta", run_stage1, vcfg, run, zero_delta=variant == "zero_delta")
        _staged(f"{variant}: train-nerf", run_stage2, vcfg, run, zero_delta=variant == "zero_delta")
        reports.append(_staged(f"{variant}: eval", evaluate, vcfg, run, variant))
    write_metrics(root / "ablation.csv", reports)
    return reports


def _share_stage1(src: RunDir, dst: RunDir) -> None:
    import shutil

    for path in (src.ckpt("delta"), src.losses):
        target = dst.stage_root / path.relative_to(src.stage_root)
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src.require(path), target)
    shutil.copytree(src.require(src.dataset("edited")), dst.dataset("edited"), dirs_exist_ok=True)
