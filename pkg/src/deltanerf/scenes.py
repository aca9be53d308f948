"""Procedural scenes, an analytic reference renderer and ground-truth edits.

World frame is z-up. Objects live inside the unit ball; cameras sit on an
upper hemisphere of radius 3 looking at the origin. Shading is albedo times
``ambient + (1 - ambient) * max(0, n . light)`` for one fixed directional
light, with no shadows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RngStream
from .vocab import BACKGROUND_COLORS, OBJECT_COLORS, encode_tokens

LIGHT_DIR = np.array([0.4, 0.3, 1.0]) / np.linalg.norm([0.4, 0.3, 1.0])
AMBIENT = 0.25
CAMERA_RADIUS = 3.0
ELEVATION_RANGE = (math.radians(10.0), math.radians(60.0))
DEFAULT_FOV = math.radians(40.0)


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: float  # sphere radius or box half-extent
    albedo: tuple[float, float, float]

    @property
    def bounding_radius(self) -> float:
        return self.size if self.kind == "sphere" else self.size * math.sqrt(3.0)


@dataclass(frozen=True)
class Scene:
    objects: tuple[Primitive, ...] = ()
    background: tuple[float, float, float] = BACKGROUND_COLORS["white"]

    def validate(self) -> "Scene":
        for o in self.objects:
            if o.kind not in ("sphere", "box"):
                raise ValueError(f"unknown primitive {o.kind!r}")
            if not o.size > 0:
                raise ValueError(f"primitive size must be positive, got {o.size}")
            if not all(0.0 <= c <= 1.0 for c in o.albedo):
                raise ValueError(f"albedo outside [0, 1]: {o.albedo}")
        if not all(0.0 <= c <= 1.0 for c in self.background):
            raise ValueError(f"background outside [0, 1]: {self.background}")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if np.linalg.norm(np.subtract(a.center, b.center)) <= a.bounding_radius + b.bounding_radius:
                    raise ValueError("objects overlap")
        return self

    def to_dict(self) -> dict:
        return {
            "background": list(self.background),
            "objects": [
                {"kind": o.kind, "center": list(o.center), "size": o.size, "albedo": list(o.albedo)}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = tuple(
            Primitive(o["kind"], tuple(o["center"]), float(o["size"]), tuple(o["albedo"]))
            for o in d["objects"]
        )
        return cls(objs, tuple(d["background"])).validate()


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_y: float = DEFAULT_FOV
    width: int = 32
    height: int = 32

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = np.subtract(self.look_at, self.position).astype(np.float64)
        n = np.linalg.norm(fwd)
        if n == 0:
            raise ValueError("degenerate camera: position equals look_at")
        fwd /= n
        right = np.cross(fwd, self.up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise ValueError("degenerate camera: up is parallel to the view direction")
        right /= rn
        return fwd, right, np.cross(right, fwd)

    def rays(self, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions of shape (H, W, s*s, 3) through a regular sub-pixel grid."""
        if self.width < 1 or self.height < 1 or not 0 < self.fov_y < math.pi:
            raise ValueError("degenerate camera: bad resolution or field of view")
        fwd, right, up = self.basis()
        s = supersample
        half_h = math.tan(self.fov_y / 2.0)
        half_w = half_h * self.width / self.height
        sub = (np.arange(s) + 0.5) / s
        cols = (np.arange(self.width)[:, None] + sub[None, :]).reshape(-1)
        rows = (np.arange(self.height)[:, None] + sub[None, :]).reshape(-1)
        x = (cols / self.width * 2.0 - 1.0) * half_w
        y = (1.0 - rows / self.height * 2.0) * half_h
        d = fwd[None, None] + x[None, :, None] * right[None, None] + y[:, None, None] * up[None, None]
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        # (H*s, W*s, 3) -> (H, W, s*s, 3)
        d = d.reshape(self.height, s, self.width, s, 3).transpose(0, 2, 1, 3, 4).reshape(self.height, self.width, s * s, 3)
        o = np.broadcast_to(np.asarray(self.position, dtype=np.float64), d.shape)
        return o, d

    def to_dict(self) -> dict:
        return {
            "position": list(self.position), "look_at": list(self.look_at), "up": list(self.up),
            "fov_y": self.fov_y, "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(tuple(d["position"]), tuple(d["look_at"]), tuple(d["up"]),
                   float(d["fov_y"]), int(d["width"]), int(d["height"]))

    def resized(self, width: int, height: int | None = None) -> "Camera":
        return replace(self, width=width, height=height if height is not None else width)


@dataclass(frozen=True)
class EditInstruction:
    """Edit as target-description tokens plus the oracle transform that realises it."""

    tokens: tuple[int, ...]
    op: str  # identity | recolor | remove | enlarge
    args: tuple = ()


@dataclass
class CaptionedView:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    caption_tokens: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# intersection

def intersect_sphere(o: np.ndarray, d: np.ndarray, center, radius: float) -> np.ndarray:
    """Nearest positive hit distance for unit directions ``d``; inf on miss."""
    oc = o - np.asarray(center)
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(disc >= 0.0, t, np.inf)


def intersect_box(o: np.ndarray, d: np.ndarray, center, half: float) -> np.ndarray:
    lo = np.asarray(center) - half
    hi = np.asarray(center) + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where((tmax >= tmin) & (tmax > 1e-9), t, np.inf)


def _normal(obj: Primitive, p: np.ndarray) -> np.ndarray:
    rel = p - np.asarray(obj.center)
    if obj.kind == "sphere":
        return rel / obj.size
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(rel)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
    return n


def trace(scene: Scene, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shade rays; returns (rgb, hit distance, object index or -1)."""
    t_best = np.full(d.shape[:-1], np.inf)
    idx = np.full(d.shape[:-1], -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        fn = intersect_sphere if obj.kind == "sphere" else intersect_box
        t = fn(o, d, obj.center, obj.size)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        idx = np.where(closer, k, idx)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), d.shape).copy()
    for k, obj in enumerate(scene.objects):
        m = idx == k
        if not m.any():
            continue
        p = o[m] + t_best[m][:, None] * d[m]
        lam = np.maximum(_normal(obj, p) @ LIGHT_DIR, 0.0)
        rgb[m] = np.asarray(obj.albedo) * (AMBIENT + (1.0 - AMBIENT) * lam)[:, None]
    return rgb, t_best, idx


def render_reference(scene: Scene, camera: Camera, supersample: int = 2,
                     return_ids: bool = False):
    """Analytic render averaged over an ``supersample``x``supersample`` sub-pixel grid.

    With ``return_ids`` also returns the per-subray object index (H, W, s*s).
    """
    o, d = camera.rays(supersample)
    rgb, _, idx = trace(scene, o, d)
    img = rgb.mean(axis=2)
    return (img, idx) if return_ids else img


# ---------------------------------------------------------------------------
# generation

def gen_scene(spec_seed: int) -> Scene:
    """Deterministic scene with 1-3 non-overlapping primitives inside the unit ball."""
    cur = RngStream(spec_seed, 0x5CE7E).cursor()
    n = 1 + int(cur.integers(3, 1)[0])
    colors = list(OBJECT_COLORS)
    bg = list(BACKGROUND_COLORS)[int(cur.integers(len(BACKGROUND_COLORS), 1)[0])]
    objs: list[Primitive] = []
    attempts = 0
    while len(objs) < n and attempts < 200:
        attempts += 1
        kind = "sphere" if cur.uniform(1)[0] < 0.6 else "box"
        size = 0.2 + 0.4 * cur.uniform(1)[0] if kind == "sphere" else 0.14 + 0.12 * cur.uniform(1)[0]
        r_bound = size if kind == "sphere" else size * math.sqrt(3.0)
        # isotropic direction, radius so the whole object stays inside the ball
        v = cur.normal(3)
        v /= np.linalg.norm(v)
        radial = (1.0 - r_bound) * cur.uniform(1)[0] ** (1 / 3)
        c = tuple(float(x) for x in v * radial)
        color = OBJECT_COLORS[colors[int(cur.integers(len(colors), 1)[0])]]
        cand = Primitive(kind, c, float(size), color)
        if all(np.linalg.norm(np.subtract(c, b.center)) > r_bound + b.bounding_radius for b in objs):
            objs.append(cand)
    return Scene(tuple(objs), BACKGROUND_COLORS[bg]).validate()


def sample_cameras(n: int, seed: int, radius: float = CAMERA_RADIUS, width: int = 32,
                   height: int | None = None, fov_y: float = DEFAULT_FOV,
                   azimuth_offset: float = 0.0) -> list[Camera]:
    """``n`` cameras at uniformly spaced azimuths, elevations jittered in [10, 60] degrees."""
    if n < 1:
        raise ValueError(f"need at least one camera, got n={n}")
    lo, hi = ELEVATION_RANGE
    elev = lo + (hi - lo) * RngStream(seed, 0xCA3E7A).uniform(n)
    cams = []
    for k in range(n):
        az = azimuth_offset + 2.0 * math.pi * k / n
        e = float(elev[k])
        pos = (radius * math.cos(e) * math.cos(az), radius * math.cos(e) * math.sin(az), radius * math.sin(e))
        cams.append(Camera(pos, fov_y=fov_y, width=width, height=height or width))
    return cams


def orbit_cameras(n: int, elevation_deg: float = 30.0, radius: float = CAMERA_RADIUS,
                  width: int = 32, fov_y: float = DEFAULT_FOV, azimuth_offset: float = 0.0) -> list[Camera]:
    """Ordered camera path at fixed elevation (used for held-out evaluation)."""
    e = math.radians(elevation_deg)
    out = []
    for k in range(n):
        az = azimuth_offset + 2.0 * math.pi * k / n
        pos = (radius * math.cos(e) * math.cos(az), radius * math.cos(e) * math.sin(az), radius * math.sin(e))
        out.append(Camera(pos, fov_y=fov_y, width=width, height=width))
    return out


# ---------------------------------------------------------------------------
# captions and edits

def color_name(rgb) -> str:
    for name, c in OBJECT_COLORS.items():
        if np.allclose(c, rgb):
            return name
    for name, c in BACKGROUND_COLORS.items():
        if np.allclose(c, rgb):
            return name
    return "<unk>"


def caption_words(scene: Scene) -> list[str]:
    words: list[str] = []
    for k, o in enumerate(scene.objects):
        if k:
            words.append("and")
        words += ["large" if o.size >= (0.33 if o.kind == "sphere" else 0.2) else "small",
                  color_name(o.albedo), o.kind]
    return words + ["on", color_name(scene.background), "background"]


def caption(scene: Scene) -> list[int]:
    return encode_tokens(caption_words(scene))


def apply_edit_oracle(scene: Scene, instr: EditInstruction) -> Scene:
    """Ground-truth edit; only the targeted attribute changes."""
    if instr.op == "identity":
        return scene
    k = instr.args[0] if instr.args else None
    if k is None or not 0 <= k < len(scene.objects):
        raise IndexError(f"edit target {k} out of range for scene with {len(scene.objects)} objects")
    objs = list(scene.objects)
    if instr.op == "recolor":
        rgb = instr.args[1]
        objs[k] = replace(objs[k], albedo=tuple(OBJECT_COLORS[rgb] if isinstance(rgb, str) else rgb))
    elif instr.op == "remove":
        del objs[k]
    elif instr.op == "enlarge":
        factor = instr.args[1] if len(instr.args) > 1 else 1.5
        o = objs[k]
        # largest feasible growth: stay in the ball and clear of the other objects
        limit = 1.0 - float(np.linalg.norm(o.center))
        for j, b in enumerate(objs):
            if j != k:
                limit = min(limit, float(np.linalg.norm(np.subtract(o.center, b.center))) - b.bounding_radius)
        ratio = o.size / o.bounding_radius
        new_bound = min(o.bounding_radius * factor, limit * 0.999)
        objs[k] = replace(o, size=max(o.size, new_bound * ratio))
    else:
        raise ValueError(f"unknown edit op {instr.op!r}")
    return Scene(tuple(objs), scene.background)


def make_instruction(scene: Scene, op: str, *args) -> EditInstruction:
    """Build an instruction whose tokens describe the edited scene."""
    probe = EditInstruction((), op, tuple(args))
    target = apply_edit_oracle(scene, probe)
    return EditInstruction(tuple(caption(target)), op, tuple(args))


def recolor_fixture(width: int = 32) -> tuple[Scene, EditInstruction]:
    """Single large blue sphere on white, to be recoloured red."""
    scene = Scene((Primitive("sphere", (0.0, 0.0, 0.0), 0.6, OBJECT_COLORS["blue"]),),
                  BACKGROUND_COLORS["white"]).validate()
    return scene, make_instruction(scene, "recolor", 0, "red")


def render_views(scene: Scene, cameras: list[Camera], supersample: int = 2) -> list[CaptionedView]:
    cap = caption(scene)
    return [CaptionedView(render_reference(scene, c, supersample), c, list(cap)) for c in cameras]
