"""Registered gradient checks: every differentiable op on three seeded shapes."""
from __future__ import annotations

from typing import Callable, Iterator

import torch
from torch.func import functional_call

from . import core
from .attention import SpatialTransformer, cross_attention, hybrid_attention, self_attention
from .core import GradCheckReport, SeededRng, grad_check

Case = tuple[Callable[..., torch.Tensor], list[torch.Tensor]]


def _n(rng: SeededRng, *shape: int) -> torch.Tensor:
    return rng.normal(shape, dtype=torch.float64)


def _matmul(rng):
    for m, k, n in [(3, 4, 2), (2, 5, 3), (4, 3, 4)]:
        yield core.matmul, [_n(rng, m, k), _n(rng, k, n)]


def _softmax(rng):
    for shape in [(2, 3), (4, 5), (1, 7)]:
        yield core.softmax_rows, [_n(rng, *shape)]


def _add(rng):
    yield core.add, [_n(rng, 3, 4), _n(rng, 3, 4)]
    yield core.add, [_n(rng, 2, 3, 2, 2), _n(rng, 3)]
    yield core.add, [_n(rng, 2, 5), _n(rng)]


def _mul(rng):
    yield core.mul, [_n(rng, 3, 4), _n(rng, 3, 4)]
    yield core.mul, [_n(rng, 2, 3, 2, 2), _n(rng, 3)]
    yield core.mul, [_n(rng, 4), _n(rng)]


def _scale(rng):
    for shape in [(3,), (2, 3), (2, 2, 2)]:
        yield (lambda x: core.scale(x, 0.7)), [_n(rng, *shape)]


def _conv(rng):
    cases = [((1, 2, 5, 5), (3, 2, 3, 3), 1, 1), ((2, 1, 6, 4), (2, 1, 3, 3), 2, 1), ((1, 3, 4, 4), (2, 3, 1, 1), 1, 0)]
    for xs, ws, stride, pad in cases:
        yield (
            lambda x, w, b, s=stride, p=pad: core.conv2d(x, w, b, stride=s, padding=p)
        ), [_n(rng, *xs), _n(rng, *ws), _n(rng, ws[0])]


def _up(rng):
    for shape in [(1, 1, 2, 2), (2, 3, 3, 2), (1, 2, 1, 4)]:
        yield core.upsample_nearest, [_n(rng, *shape)]


def _down(rng):
    for shape in [(1, 1, 4, 4), (2, 3, 4, 2), (1, 2, 6, 6)]:
        yield core.downsample_nearest, [_n(rng, *shape)]


def _gn(rng):
    for shape, g in [((2, 4, 3, 3), 2), ((1, 6, 2, 2), 3), ((2, 2, 4, 1), 1)]:
        c = shape[1]
        yield (lambda x, w, b, g=g: core.group_norm(x, g, w, b)), [_n(rng, *shape), _n(rng, c), _n(rng, c)]


def _silu(rng):
    for shape in [(5,), (2, 3), (2, 2, 2)]:
        yield core.silu, [_n(rng, *shape)]


def _concat(rng):
    yield core.concat_channels, [_n(rng, 1, 2, 3, 3), _n(rng, 1, 1, 3, 3)]
    yield core.concat_channels, [_n(rng, 2, 1, 2, 2), _n(rng, 2, 2, 2, 2), _n(rng, 2, 1, 2, 2)]
    yield core.concat_channels, [_n(rng, 1, 3, 1, 4), _n(rng, 1, 3, 1, 4)]


def _mse(rng):
    for shape in [(4,), (2, 3), (2, 2, 3)]:
        yield core.mse, [_n(rng, *shape), _n(rng, *shape)]


def _sinusoid(rng):
    for n, d in [(3, 4), (2, 8), (5, 6)]:
        t = torch.from_numpy(rng.uniform((n,), 0.0, 5.0))
        yield (lambda t, d=d: core.sinusoidal_embedding(t, d)), [t]


def _gaussian(rng):
    for i, shape in enumerate([(3,), (2, 2), (4, 1)]):
        yield (
            lambda mu, sd, i=i, shape=shape: core.gaussian(SeededRng(77, i), shape, mu, sd, dtype=torch.float64)
        ), [_n(rng, *shape), _n(rng, *shape).abs() + 0.1]


def _self_attn(rng):
    for n, c, d, heads in [(3, 4, 4, 1), (5, 3, 2, 1), (4, 4, 4, 2)]:
        yield (lambda x, q, k, v, h=heads: self_attention(x, q, k, v, h)), [
            _n(rng, n, c), _n(rng, c, d), _n(rng, c, d), _n(rng, c, d)
        ]


def _cross_attn(rng):
    for n, m, c, cg, d in [(3, 2, 4, 3, 4), (2, 5, 3, 3, 2), (4, 1, 2, 5, 3)]:
        yield (lambda x, g, q, k, v: cross_attention(x, g, q, k, v)), [
            _n(rng, n, c), _n(rng, m, cg), _n(rng, c, d), _n(rng, cg, d), _n(rng, cg, d)
        ]


def _hybrid(rng):
    for n, m, c, cg, d, lam in [(4, 3, 4, 3, 4, 1.0), (3, 5, 3, 4, 2, 0.5), (2, 2, 5, 5, 3, 1.5)]:
        yield (lambda o, g, q, k, v, k2, v2, lam=lam: hybrid_attention(o, g, q, k, v, k2, v2, lam)), [
            _n(rng, n, c), _n(rng, m, cg), _n(rng, c, d), _n(rng, c, d), _n(rng, c, d), _n(rng, cg, d), _n(rng, cg, d)
        ]


def _hybrid_block(rng):
    """The full hybrid transformer block, parameters included as inputs."""
    for b, c, h, w, m, cg in [(1, 8, 2, 2, 3, 4), (2, 8, 1, 3, 2, 3), (1, 8, 2, 1, 4, 2)]:
        with torch.random.fork_rng():
            torch.manual_seed(int(rng.integers(0, 2**31)))
            block = SpatialTransformer(c, cg, kind="hybrid", lam=1.0, groups=4).double()
        names = [k for k, _ in block.named_parameters()]
        params = [p.detach().clone() + 0.05 * _n(rng, *p.shape) for _, p in block.named_parameters()]

        def op(x, g, *ps, block=block, names=names):
            return functional_call(block, dict(zip(names, ps)), (x, g))

        yield op, [_n(rng, b, c, h, w), _n(rng, b, m, cg), *params]


REGISTRY: dict[str, Callable[[SeededRng], Iterator[Case]]] = {
    "matmul": _matmul,
    "softmax_rows": _softmax,
    "add": _add,
    "mul": _mul,
    "scale": _scale,
    "conv2d": _conv,
    "upsample_nearest": _up,
    "downsample_nearest": _down,
    "group_norm": _gn,
    "silu": _silu,
    "concat_channels": _concat,
    "mse": _mse,
    "sinusoidal_embedding": _sinusoid,
    "gaussian": _gaussian,
    "self_attention": _self_attn,
    "cross_attention": _cross_attn,
    "hybrid_attention": _hybrid,
    "hybrid_block": _hybrid_block,
}


def run_suite(
    names: list[str] | None = None, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0
) -> list[GradCheckReport]:
    names = names or list(REGISTRY)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise core.ConfigError(f"unknown gradient-check ops {unknown}; known: {sorted(REGISTRY)}")
    reports = []
    for name in names:
        rng = SeededRng(seed, stream_id=hash_name(name))
        for k, (op, inputs) in enumerate(REGISTRY[name](rng)):
            reports.append(grad_check(op, inputs, eps=eps, tol=tol, seed=seed + k, name=f"{name}[{k}]"))
    return reports


def hash_name(name: str) -> int:
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
