"""Non-local attention layers: full (NLB), pyramid (PNB) and pooled (APNB).

All three share the same residual shape: a query embedding at full
resolution attends over a set of reference tokens, the attended values are
mapped back to ``d`` channels by a 1x1 output conv, and the input is added.
They differ only in how the reference tokens are built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import ConvLayer, Module
from .tensor import Tensor


@dataclass(frozen=True)
class NlbConfig:
    d: int
    m: int = 64
    n: int = 32

    def __post_init__(self):
        if min(self.d, self.m, self.n) < 1:
            raise ConfigError(f"d, m, n must be >= 1 (got {self.d}, {self.m}, {self.n})")


@dataclass(frozen=True)
class PnbConfig(NlbConfig):
    scales: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.scales:
            raise ConfigError("PNB needs at least one scale")
        if any(s < 0 for s in self.scales) or any(a >= b for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be non-negative and strictly increasing, got {self.scales}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2**s for s in self.scales)


@dataclass(frozen=True)
class ApnbConfig(NlbConfig):
    pool_sizes: tuple[int, ...] = (1, 3, 6, 8)

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "pool_sizes", tuple(int(p) for p in self.pool_sizes))
        if not self.pool_sizes or min(self.pool_sizes) < 1:
            raise ConfigError(f"pool sizes must be positive, got {self.pool_sizes}")


@dataclass
class AttentionDump:
    scale: int
    pixel: tuple[int, int]
    weights: np.ndarray = field(repr=False)


def _check_channels(F: Tensor, d: int) -> None:
    if F.ndim != 4 or F.shape[1] != d:
        raise ConfigError(f"expected (n, {d}, h, w) input, got {F.shape}")


def _queries(F: Tensor, theta: ConvLayer) -> Tensor:
    # (n, hw, m)
    q = theta(F)
    n, m, h, w = q.shape
    return ops.transpose(ops.reshape(q, (n, m, h * w)), (0, 2, 1))


def _attend(queries: Tensor, keys: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
    """queries (n, hw, m), keys (n, m, r), values (n, r, k) -> ((n, hw, k), weights)."""
    weights = ops.softmax_rows(ops.matmul(queries, keys))
    return ops.matmul(weights, values), weights


def _to_map(rows: Tensor, h: int, w: int) -> Tensor:
    # (n, hw, k) -> (n, k, h, w)
    n, _, k = rows.shape
    return ops.reshape(ops.transpose(rows, (0, 2, 1)), (n, k, h, w))


class NonLocalBlock(Module):
    """Embedded-Gaussian non-local block with 1x1 embeddings."""

    def __init__(self, cfg: NlbConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d, m, n = cfg.d, cfg.m, cfg.n
        self.theta = ConvLayer(d, m, 1, rng=rng, dtype=dtype)
        self.phi = ConvLayer(d, m, 1, rng=rng, dtype=dtype)
        self.g = ConvLayer(d, n, 1, rng=rng, dtype=dtype)
        self.psi = ConvLayer(n, d, 1, init="zeros", dtype=dtype)

    def residual(self, F: Tensor, keep_attention: bool = False):
        _check_channels(F, self.cfg.d)
        nb, _, h, w = F.shape
        q = _queries(F, self.theta)
        k = ops.reshape(self.phi(F), (nb, self.cfg.m, h * w))
        v = ops.transpose(ops.reshape(self.g(F), (nb, self.cfg.n, h * w)), (0, 2, 1))
        attended, weights = _attend(q, k, v)
        out = self.psi(_to_map(attended, h, w))
        return (out, [weights]) if keep_attention else out

    def __call__(self, F: Tensor) -> Tensor:
        return ops.add(self.residual(F), F)


class PyramidNonLocalBlock(Module):
    """Full-resolution queries against references embedded at strides 2**s.

    Scale ``s`` embeds keys and values with a conv whose kernel and stride
    are both ``2**s``; maps that are not a multiple of the stride are zero
    padded symmetrically so the blocks tile the whole map.
    """

    def __init__(self, cfg: PnbConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d, m, n = cfg.d, cfg.m, cfg.n
        self.theta = ConvLayer(d, m, 1, rng=rng, dtype=dtype)
        self.phi, self.g = [], []
        for k in cfg.strides:
            # drawn per scale so a scale's weights do not depend on which others exist
            self.phi.append(ConvLayer(d, m, k, stride=k, rng=rng, dtype=dtype))
            self.g.append(ConvLayer(d, n, k, stride=k, rng=rng, dtype=dtype))
        self.psi = ConvLayer(n * len(cfg.scales), d, 1, init="zeros", dtype=dtype)

    @staticmethod
    def tiling_padding(h: int, w: int, k: int) -> tuple[int, int]:
        if k > h and k > w:
            raise ConfigError(f"pyramid stride {k} exceeds both spatial dims {h}x{w}")

        def pad(size):
            cover = -(-size // k) * k
            return -(-(cover - size) // 2)

        return pad(h), pad(w)

    def reference_grid(self, h: int, w: int, k: int) -> tuple[int, int]:
        ph, pw = self.tiling_padding(h, w, k)
        return (h + 2 * ph - k) // k + 1, (w + 2 * pw - k) // k + 1

    def residual(self, F: Tensor, keep_attention: bool = False):
        _check_channels(F, self.cfg.d)
        nb, _, h, w = F.shape
        m, n = self.cfg.m, self.cfg.n
        q = _queries(F, self.theta)
        per_scale, maps = [], []
        for k, phi, g in zip(self.cfg.strides, self.phi, self.g):
            pad = self.tiling_padding(h, w, k)
            keys = phi(F, padding=pad)
            r = keys.shape[2] * keys.shape[3]
            keys = ops.reshape(keys, (nb, m, r))
            vals = ops.transpose(ops.reshape(g(F, padding=pad), (nb, n, r)), (0, 2, 1))
            attended, weights = _attend(q, keys, vals)
            per_scale.append(attended)
            maps.append(weights)
        fused = per_scale[0] if len(per_scale) == 1 else ops.concat(per_scale, axis=2)
        out = self.psi(_to_map(fused, h, w))
        return (out, maps) if keep_attention else out

    def __call__(self, F: Tensor) -> Tensor:
        return ops.add(self.residual(F), F)


class AsymmetricPyramidBlock(Module):
    """Keys and values pooled to a few fixed grids and attended jointly.

    1x1 embeddings are adaptive-average-pooled to each ``pool_size`` grid and
    the resulting tokens (sum of p*p) share one softmax.
    """

    def __init__(self, cfg: ApnbConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d, m, n = cfg.d, cfg.m, cfg.n
        self.theta = ConvLayer(d, m, 1, rng=rng, dtype=dtype)
        self.phi = ConvLayer(d, m, 1, rng=rng, dtype=dtype)
        self.g = ConvLayer(d, n, 1, rng=rng, dtype=dtype)
        self.psi = ConvLayer(n, d, 1, init="zeros", dtype=dtype)

    @property
    def num_tokens(self) -> int:
        return sum(p * p for p in self.cfg.pool_sizes)

    def _tokens(self, emb: Tensor) -> Tensor:
        nb, k = emb.shape[:2]
        pooled = [ops.reshape(ops.adaptive_avg_pool(emb, p), (nb, k, p * p)) for p in self.cfg.pool_sizes]
        return pooled[0] if len(pooled) == 1 else ops.concat(pooled, axis=2)

    def residual(self, F: Tensor, keep_attention: bool = False):
        _check_channels(F, self.cfg.d)
        _, _, h, w = F.shape
        if max(self.cfg.pool_sizes) > min(h, w):
            raise ConfigError(f"pool size {max(self.cfg.pool_sizes)} exceeds input {h}x{w}")
        q = _queries(F, self.theta)
        keys = self._tokens(self.phi(F))
        vals = ops.transpose(self._tokens(self.g(F)), (0, 2, 1))
        attended, weights = _attend(q, keys, vals)
        out = self.psi(_to_map(attended, h, w))
        return (out, [weights]) if keep_attention else out

    def __call__(self, F: Tensor) -> Tensor:
        return ops.add(self.residual(F), F)


def nlb_forward(F: Tensor, block: NonLocalBlock) -> Tensor:
    return block(F)


def pnb_forward(F: Tensor, block: PyramidNonLocalBlock) -> Tensor:
    return block(F)


def apnb_forward(F: Tensor, block: AsymmetricPyramidBlock) -> Tensor:
    return block(F)


def dump_attention(F: Tensor, block: PyramidNonLocalBlock, pixel: tuple[int, int], batch: int = 0) -> list[AttentionDump]:
    """Per-scale correlation maps of one query pixel, shaped like each reference grid."""
    _, _, h, w = F.shape
    y, x = pixel
    if not (0 <= y < h and 0 <= x < w):
        raise ConfigError(f"pixel {pixel} outside {h}x{w} map")
    _, maps = block.residual(F, keep_attention=True)
    dumps = []
    for s, k, weights in zip(block.cfg.scales, block.cfg.strides, maps):
        gh, gw = block.reference_grid(h, w, k)
        row = weights.data[batch, y * w + x].reshape(gh, gw).copy()
        dumps.append(AttentionDump(scale=s, pixel=(y, x), weights=row))
    return dumps


def make_nonlocal(kind: str, d: int, m: int, n: int, scales=(1, 2, 3), pool_sizes=(1, 3, 6, 8), rng=None, dtype=np.float64):
    """Build a non-local layer by name; ``"none"`` returns None."""
    if kind == "none":
        return None
    if kind == "nlb":
        return NonLocalBlock(NlbConfig(d, m, n), rng=rng, dtype=dtype)
    if kind == "pnb":
        return PyramidNonLocalBlock(PnbConfig(d, m, n, scales=tuple(scales)), rng=rng, dtype=dtype)
    if kind == "apnb":
        return AsymmetricPyramidBlock(ApnbConfig(d, m, n, pool_sizes=tuple(pool_sizes)), rng=rng, dtype=dtype)
    raise ConfigError(f"unknown non-local kind {kind!r}")
