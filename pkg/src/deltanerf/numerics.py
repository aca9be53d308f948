"""Differentiable tensor substrate, seeded randomness and checkpoint archives.

Tensors are ``torch.Tensor`` in float64. The functions registered in
:data:`OPS` are shape-checked wrappers whose failures name the op and the
offending shapes; the gradient tests sweep this registry.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)
# Reductions are only bit-stable across machines when the intra-op pool is fixed.
torch.set_num_threads(1)


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient becomes NaN/inf during training."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def _shapes(*ts) -> str:
    return " and ".join(str(tuple(t.shape)) for t in ts)


def _fail(op: str, *ts, why: str = "incompatible shapes"):
    raise ShapeError(f"{op}: {why} {_shapes(*ts)}")


# ---------------------------------------------------------------------------
# registered ops

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        _fail("matmul", a, b)
    return a @ b


def conv2d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """NCHW convolution; ``w`` is (out, in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        _fail("conv2d", x, w)
    if b is not None and b.shape != (w.shape[0],):
        _fail("conv2d", w, b, why="bias does not match out channels")
    h = x.shape[2] + 2 * padding - w.shape[2]
    if h < 0 or x.shape[3] + 2 * padding - w.shape[3] < 0:
        _fail("conv2d", x, w, why="kernel larger than padded input")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def _same(op: str, a, b):
    if tuple(a.shape) != tuple(b.shape):
        _fail(op, a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same("mul", a, b)
    return a * b


def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def sum_(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def concat(ts: Iterable[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ts = list(ts)
    ref = ts[0]
    d = dim % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(t.shape[k] != ref.shape[k] for k in range(ref.ndim) if k != d):
            _fail("concat", ref, t)
    return torch.cat(ts, dim=d)


def l1_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x.abs().sum(dim=dim)


def l2_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.sqrt((x * x).sum(dim=dim))


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    _same("cosine_similarity", a, b)
    return (a * b).sum(dim=dim) / (l2_norm(a, dim) * l2_norm(b, dim))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


OPS: dict[str, Callable[..., torch.Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "mean": mean,
    "sum": sum_,
    "relu": relu,
    "silu": silu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "concat": concat,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "cosine_similarity": cosine_similarity,
    "softmax": softmax,
}


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Accumulate d(loss)/d(param) into ``.grad`` and return the named gradients.

    Repeated calls without zeroing accumulate, as with ``Tensor.backward``.
    """
    if loss.numel() != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()
    if params is None:
        return {}
    return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}


# ---------------------------------------------------------------------------
# optimisation

class Adam(torch.optim.Adam):
    """``torch.optim.Adam`` that refuses to step on a non-finite gradient.

    ``named_params`` is a mapping so the failure can name the parameter.
    """

    def __init__(self, named_params: Mapping[str, torch.nn.Parameter], lr: float = 1e-3, **kw):
        self._names = {id(p): n for n, p in named_params.items()}
        super().__init__(list(named_params.values()), lr=lr, **kw)

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteError(f"non-finite gradient in parameter {self._names.get(id(p), '?')!r}")
        return super().step(closure)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: dict,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, dict]:
    """One functional Adam update; ``state`` starts as ``{}`` (zero moments)."""
    step = state.get("step", 0) + 1
    m, v = dict(state.get("m", {})), dict(state.get("v", {}))
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not torch.isfinite(torch.as_tensor(g)).all():
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        m[name] = betas[0] * m.get(name, torch.zeros_like(p)) + (1 - betas[0]) * g
        v[name] = betas[1] * v.get(name, torch.zeros_like(p)) + (1 - betas[1]) * g * g
        mhat = m[name] / (1 - betas[0] ** step)
        vhat = v[name] / (1 - betas[1] ** step)
        out[name] = p - lr * mhat / (torch.sqrt(vhat) + eps)
    return out, {"step": step, "m": m, "v": v}


def check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteError(f"{what} became non-finite at step {step}")


# ---------------------------------------------------------------------------
# randomness

def stream_id(*parts) -> int:
    """Stable 64-bit id from arbitrary labels (e.g. ``stream_id("nerf.rays", 3)``)."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream: draw ``i`` depends only on (seed, stream_id, i).

    Backed by Philox; each counter step yields four doubles, so arbitrary
    start offsets are addressable without generating the prefix.
    """

    seed: int
    stream_id: int = 0

    def _gen(self, start: int) -> tuple[np.random.Generator, int]:
        key = (self.seed % 2**64) | ((self.stream_id % 2**64) << 64)
        bg = np.random.Philox(key=key)
        bg.advance(start // 4)
        return np.random.Generator(bg), start % 4

    def uniform(self, count: int, start: int = 0) -> np.ndarray:
        gen, skip = self._gen(start)
        return gen.random(count + skip)[skip:]

    def normal(self, count: int, start: int = 0) -> np.ndarray:
        """Standard normals via Box-Muller; normal ``i`` uses uniforms ``2i, 2i+1``."""
        u = self.uniform(2 * count, 2 * start)
        u1 = 1.0 - u[0::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u[1::2])

    def integers(self, high: int, count: int, start: int = 0) -> np.ndarray:
        return np.minimum((self.uniform(count, start) * high).astype(np.int64), high - 1)

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, stream_id(self.stream_id, *labels))

    def cursor(self) -> "RngCursor":
        return RngCursor(self)


class RngCursor:
    """Sequential reader over an :class:`RngStream`."""

    def __init__(self, stream: RngStream):
        self.stream = stream
        self.position = 0

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = self.stream.uniform(n, self.position).reshape(shape)
        self.position += n
        return out

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = self.stream.normal(n, self.position).reshape(shape)
        self.position += n
        return out

    def integers(self, high: int, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = self.stream.integers(high, n, self.position).reshape(shape)
        self.position += n
        return out


def init_module(module: torch.nn.Module, rng: RngStream) -> torch.nn.Module:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every parameter, from ``rng``."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
            else:
                fan_in = _bias_fan_in(module, name) or p.numel()
            bound = 1.0 / math.sqrt(fan_in)
            vals = rng.child(name).uniform(p.numel()) * 2.0 - 1.0
            p.copy_(torch.from_numpy(vals * bound).reshape(p.shape))
    return module


def _bias_fan_in(module: torch.nn.Module, name: str) -> int | None:
    owner_name, _, leaf = name.rpartition(".")
    owner = module.get_submodule(owner_name) if owner_name else module
    w = getattr(owner, "weight", None)
    if leaf == "bias" and w is not None and w.ndim >= 2:
        return int(np.prod(w.shape[1:]))
    return None


# ---------------------------------------------------------------------------
# checkpoint archives

ARCHIVE_MAGIC = b"DNAR"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


def save_archive(path: str | Path, tensors: Mapping[str, object]) -> None:
    """Write named float64 tensors: header, then (name, shape, little-endian data) records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic at byte 0")
    if len(buf) < 12:
        raise ArchiveError(f"{path}: truncated header at byte {len(buf)}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version} at byte 4")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(buf):
                raise ArchiveError(f"{path}: truncated tensor {name!r} at byte {off}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
            off += size
    except struct.error as exc:
        raise ArchiveError(f"{path}: truncated record at byte {off}") from exc
    return out


def save_module(path: str | Path, module: torch.nn.Module, extra: Mapping[str, object] | None = None) -> None:
    tensors = {k: v for k, v in module.state_dict().items()}
    tensors.update(extra or {})
    save_archive(path, tensors)


def load_module(path: str | Path, module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Load matching entries into ``module``; returns entries that are not module state."""
    arrays = load_archive(path)
    state = module.state_dict()
    missing = [k for k in state if k not in arrays]
    if missing:
        raise ArchiveError(f"{path}: missing tensors {missing[:3]}")
    module.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    return {k: v for k, v in arrays.items() if k not in state}


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f8").tobytes())
    return h.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
        p.grad = None
    module.eval()
    return module
