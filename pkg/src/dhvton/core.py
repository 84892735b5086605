"""Differentiable compute layer shared by every other module.

Tensors are plain ``torch.Tensor`` objects (row-major, f32 for training and
f64 for gradient checks).  This module adds the pieces torch does not give us
in the form we need: shape-checked functional ops, a counter-based seeded RNG,
a central-difference gradient checker, and the ``DHVT`` checkpoint format.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "DimensionError",
    "ConfigError",
    "PreconditionError",
    "DataError",
    "SeededRng",
    "matmul",
    "softmax_rows",
    "add",
    "mul",
    "scale",
    "conv2d",
    "upsample_nearest",
    "downsample_nearest",
    "group_norm",
    "silu",
    "concat_channels",
    "mse",
    "sinusoidal_embedding",
    "gaussian",
    "GradCheckReport",
    "grad_check",
    "trainable_parameters",
    "set_trainable",
    "make_optimizer",
    "save_checkpoint",
    "load_checkpoint",
    "state_snapshot",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class PreconditionError(ValueError):
    """An operation was called outside its domain."""


class DataError(ValueError):
    """Input data is unusable (non-finite statistics, empty dataset, ...)."""


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _mix64(*parts: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(int(p & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Counter-based generator (Philox 4x64).

    The output depends only on ``(seed, stream_id, counter)``, so independent
    streams can be drawn in any order without changing each other's values.
    Every draw starts a fresh Philox block at ``counter`` and advances it past
    the blocks consumed; partially used blocks are discarded.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream_id, self.counter)

    def child(self, index: int) -> "SeededRng":
        """Independent stream keyed by this stream and ``index``."""
        return SeededRng(self.seed, _mix64(self.stream_id, index, 0x5EED), 0)

    def _draw(self, fn: Callable[[np.random.Generator], np.ndarray]) -> np.ndarray:
        bg = np.random.Philox(key=self.seed | (self.stream_id << 64), counter=self.counter)
        out = fn(np.random.Generator(bg))
        words = bg.state["state"]["counter"]
        # +1 skips the block held in Philox's output buffer
        self.counter = sum(int(w) << (64 * i) for i, w in enumerate(words)) + 1
        return out

    def normal(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        arr = self._draw(lambda g: g.standard_normal(tuple(shape)))
        return torch.from_numpy(arr).to(dtype)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._draw(lambda g: g.uniform(low, high, tuple(shape)))

    def integers(self, low: int, high: int, size: Sequence[int] | int | None = None) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._draw(lambda g: g.integers(low, high, size=size))

    def permutation(self, n: int) -> np.ndarray:
        return self._draw(lambda g: g.permutation(n))

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._draw(lambda g: g.choice(n, size=k, replace=False))


# ---------------------------------------------------------------------------
# Functional ops.  Each is differentiable through torch autograd and is
# covered by the gradient suite in ``dhvton.gradsuite``.
# ---------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def _broadcastable(a: torch.Tensor, b: torch.Tensor) -> bool:
    if a.shape == b.shape or a.dim() == 0 or b.dim() == 0:
        return True
    # per-channel bias: b is (C,) against a (N, C, ...) or (C, ...)
    if b.dim() == 1 and a.dim() >= 2 and b.shape[0] == a.shape[1]:
        return True
    return False


def _bias_view(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if b.dim() == 1 and a.dim() >= 2 and a.shape != b.shape:
        return b.view(1, -1, *([1] * (a.dim() - 2)))
    return b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if not _broadcastable(a, b):
        raise DimensionError(f"add shape mismatch: {tuple(a.shape)} + {tuple(b.shape)}")
    return a + _bias_view(a, b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if not _broadcastable(a, b):
        raise DimensionError(f"mul shape mismatch: {tuple(a.shape)} * {tuple(b.shape)}")
    return a * _bias_view(a, b)


def scale(x: torch.Tensor, s: float) -> torch.Tensor:
    return x * s


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d shape mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def upsample_nearest(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def downsample_nearest(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return x[..., ::factor, ::factor]


def group_norm(
    x: torch.Tensor,
    groups: int,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    if x.shape[1] % groups:
        raise DimensionError(f"group_norm: {x.shape[1]} channels not divisible by {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def concat_channels(*xs: torch.Tensor) -> torch.Tensor:
    ref = xs[0]
    for x in xs[1:]:
        if x.dim() != ref.dim() or x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise DimensionError(
                f"concat_channels shape mismatch: {[tuple(t.shape) for t in xs]}"
            )
    return torch.cat(xs, dim=1)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style timestep embedding, shape ``(len(t), dim)``."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    t = t.reshape(-1)
    dtype = t.dtype if t.is_floating_point() else torch.float32
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=dtype, device=t.device) / half
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def gaussian(
    rng: SeededRng,
    shape: Sequence[int],
    mean: torch.Tensor | float = 0.0,
    std: torch.Tensor | float = 1.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Reparameterised draw ``mean + std * z``; differentiable in mean and std."""
    z = rng.normal(shape, dtype=dtype)
    return mean + std * z


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    n_coords: int
    worst: tuple[int, int] | None = None
    nondifferentiable: list[tuple[int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol and not self.nondifferentiable

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" nondifferentiable at {self.nondifferentiable[:3]}" if self.nondifferentiable else ""
        return (
            f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tol:.0e}, {self.n_coords} coords){extra}"
        )


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    name: str | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``op`` with central differences.

    The output is reduced to a scalar with a fixed random projection so every
    output coordinate contributes.  A coordinate that fails and whose numeric
    estimate does not settle when ``eps`` is halved (sign flip, or no error
    reduction) is reported as a non-differentiable point.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    xs = [x.detach().clone().to(torch.float64) for x in inputs]
    for x in xs:
        if not torch.isfinite(x).all():
            raise PreconditionError("grad_check inputs must be finite")

    with torch.no_grad():
        out0 = op(*xs)
    proj = SeededRng(seed, 0xC0FFEE).normal(tuple(out0.shape), dtype=torch.float64)

    def objective(args: Sequence[torch.Tensor]) -> torch.Tensor:
        return (op(*args) * proj).sum()

    leaves = [x.clone().requires_grad_(True) for x in xs]
    value = objective(leaves)
    if value.requires_grad:
        grads = torch.autograd.grad(value, leaves, allow_unused=True)
    else:
        grads = (None,) * len(leaves)
    analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(xs, grads)]

    def numeric(i: int, j: int, h: float) -> float:
        flat = xs[i].view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            fp = objective(xs).item()
            flat[j] = orig - h
            fm = objective(xs).item()
            flat[j] = orig
        return (fp - fm) / (2 * h)

    worst_err, worst, bad = 0.0, None, []
    n_coords = 0
    for i, x in enumerate(xs):
        a_flat = analytic[i].reshape(-1)
        for j in range(x.numel()):
            n_coords += 1
            a = a_flat[j].item()
            n = numeric(i, j, eps)
            err = _rel_err(a, n)
            if err > tol:
                n_half = numeric(i, j, eps / 2)
                err_half = _rel_err(a, n_half)
                if (n > 0) != (n_half > 0) or err_half > 0.5 * err:
                    bad.append((i, j))
            if worst is None or err > worst_err:
                worst_err, worst = err, (i, j)
    return GradCheckReport(
        name=name or getattr(op, "__name__", "op"),
        max_rel_error=worst_err,
        tol=tol,
        n_coords=n_coords,
        worst=worst,
        nondifferentiable=bad,
    )


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


def trainable_parameters(module: torch.nn.Module) -> list[torch.nn.Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def set_trainable(module: torch.nn.Module, trainable: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(trainable)


def make_optimizer(
    params: Iterable[torch.nn.Parameter],
    lr: float = 3e-5,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.AdamW:
    """AdamW over the trainable subset of ``params``.

    Frozen parameters are never handed to the optimizer, so weight decay can
    not touch them either.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ConfigError("no trainable parameters")
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


# ---------------------------------------------------------------------------
# Checkpoint format
#   "DHVT" | version u32 | count u32 | per entry:
#   name_len u16 | utf-8 name | rank u8 | dims u32 * rank | f32 LE payload
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DHVT"
CHECKPOINT_VERSION = 1


def state_snapshot(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Detached copies of a module's parameters and buffers."""
    return {prefix + k: v.detach().clone() for k, v in module.state_dict().items()}


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigError(f"parameter name too long: {name[:40]}...")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a DHVT checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
