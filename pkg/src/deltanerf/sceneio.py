"""Dataset serialisation: binary PPM images plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scenes import Camera, CaptionedView, Scene

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset file; message carries the path and byte offset."""


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    fields: list[int] = []
    off = 0
    if buf[:2] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (byte offset 0)")
    off = 2
    while len(fields) < 3:
        while off < len(buf) and buf[off:off + 1].isspace():
            off += 1
        if off < len(buf) and buf[off:off + 1] == b"#":
            while off < len(buf) and buf[off:off + 1] != b"\n":
                off += 1
            continue
        start = off
        while off < len(buf) and buf[off:off + 1].isdigit():
            off += 1
        if start == off:
            raise DatasetError(f"{path}: malformed header at byte offset {start}")
        fields.append(int(buf[start:off]))
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval} at byte offset {off}")
    off += 1  # single whitespace before raster
    need = w * h * 3
    if len(buf) - off < need:
        raise DatasetError(f"{path}: raster truncated at byte offset {len(buf)} (expected {off + need})")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return raster.reshape(h, w, 3).astype(np.float64) / 255.0


def write_dataset(directory: str | Path, views: list[CaptionedView], scene: Scene | None = None,
                  provenance: dict | None = None, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(views):
        name = f"view_{i:04d}.ppm"
        write_ppm(d / name, v.image)
        entries.append({"image": name, "camera": v.camera.to_dict(), "caption": list(map(int, v.caption_tokens))})
    manifest = {"version": MANIFEST_VERSION, "views": entries}
    if scene is not None:
        manifest["scene"] = scene.to_dict()
    if provenance is not None:
        manifest["provenance"] = provenance
    if extra:
        manifest.update(extra)
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return d / MANIFEST


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    text = path.read_bytes()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at byte offset {len(text[:exc.pos].decode(errors='replace').encode())}: {exc.msg}") from exc
    if not isinstance(manifest, dict) or "views" not in manifest:
        raise DatasetError(f"{path}: missing 'views' list at byte offset 0")
    return manifest


def read_dataset(directory: str | Path) -> tuple[list[CaptionedView], dict]:
    d = Path(directory)
    manifest = read_manifest(d)
    views = []
    for entry in manifest["views"]:
        img_path = d / entry["image"]
        if not img_path.exists():
            raise DatasetError(f"{img_path}: image listed in manifest is missing")
        views.append(CaptionedView(read_ppm(img_path), Camera.from_dict(entry["camera"]), list(entry.get("caption", []))))
    return views, manifest
