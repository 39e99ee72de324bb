"""PNEN: entry conv, interleaved DRB/non-local groups, exit nets and fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import BatchNormLayer, ConvLayer, Module
from .nonlocal_blocks import PyramidNonLocalBlock, make_nonlocal
from .tensor import Tensor

DRB_DILATIONS = (1, 2, 4, 2, 1)


class DrbGroup(Module):
    """conv(dil) -> BN -> ReLU -> conv(dil), wrapped in a residual add."""

    def __init__(self, d: int, dilation: int, rng, dtype=np.float64):
        self.dilation = dilation
        self.conv1 = ConvLayer(d, d, 3, dilation=dilation, padding=dilation, rng=rng, dtype=dtype)
        self.bn = BatchNormLayer(d, dtype=dtype)
        self.conv2 = ConvLayer(d, d, 3, dilation=dilation, padding=dilation, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv2(ops.relu(self.bn(self.conv1(x)))))


class DrbBlock(Module):
    def __init__(self, d: int, rng=None, dtype=np.float64, dilations=DRB_DILATIONS):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.groups = [DrbGroup(d, dl, rng, dtype) for dl in dilations]

    def conv_layers(self) -> list[ConvLayer]:
        return [m for m in self.modules() if isinstance(m, ConvLayer)]

    def depth(self) -> int:
        return 2 * len(self.groups)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d:
            raise ConfigError(f"DRB expects {self.d} channels, got {x.shape[1]}")
        for grp in self.groups:
            x = grp(x)
        return x


def drb_forward(F: Tensor, block: DrbBlock) -> Tensor:
    return block(F)


class ExitNet(Module):
    """Three 3x3 convs d -> d -> d -> c; ReLU after the first two only."""

    def __init__(self, d: int, c: int, rng, dtype=np.float64):
        self.convs = [
            ConvLayer(d, d, 3, padding=1, rng=rng, dtype=dtype),
            ConvLayer(d, d, 3, padding=1, rng=rng, dtype=dtype),
            ConvLayer(d, c, 3, padding=1, rng=rng, dtype=dtype),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        a, b, c = self.convs
        return c(ops.relu(b(ops.relu(a(x)))))


@dataclass
class ModelConfig:
    c: int = 3
    d: int = 64
    m: int = 64
    n: int = 32
    S: int = 3
    M: int = 3
    nonlocal_kind: str = "pnb"
    scales: tuple[int, ...] | None = None
    pool_sizes: tuple[int, ...] = (1, 3, 6, 8)
    dtype: str = "f64"
    seed: int = 0

    def __post_init__(self):
        if self.scales is None:
            self.scales = tuple(range(1, self.S + 1))
        self.scales = tuple(int(s) for s in self.scales)
        self.pool_sizes = tuple(int(p) for p in self.pool_sizes)
        if self.c < 1 or self.d < 1 or self.M < 1:
            raise ConfigError("c, d and M must be positive")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


class PnenModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = cfg.np_dtype
        # one stream per module, so variants that differ only in their
        # non-local blocks share the entry, DRB and exit weights
        root = np.random.SeedSequence(cfg.seed)
        entry_ss, drb_ss, nl_ss, exit_ss = root.spawn(4)

        def streams(ss):
            return [np.random.default_rng(s) for s in ss.spawn(cfg.M)]

        self.entry = ConvLayer(cfg.c, cfg.d, 3, padding=1, rng=np.random.default_rng(entry_ss), dtype=dtype)
        self.drbs = [DrbBlock(cfg.d, r, dtype) for r in streams(drb_ss)]
        self.nonlocals = [
            make_nonlocal(cfg.nonlocal_kind, cfg.d, cfg.m, cfg.n, cfg.scales, cfg.pool_sizes, rng=r, dtype=dtype)
            for r in streams(nl_ss)
        ]
        self.exits = [ExitNet(cfg.d, cfg.c, r, dtype) for r in streams(exit_ss)]
        self.fusion_weights = Tensor(np.full(cfg.M, 1.0 / cfg.M, dtype=dtype), requires_grad=True)

    def _own_params(self):
        yield "fusion_weights", self.fusion_weights

    def max_conv_depth(self) -> int:
        """Convs on the longest trunk path.

        A non-local block adds one layer (its output conv); its embeddings
        feed the attention weights and are not counted as trunk depth.
        """
        depth = 1
        for drb, nl in zip(self.drbs, self.nonlocals):
            depth += drb.depth() + (0 if nl is None else 1)
        return depth + len(self.exits[0].convs)

    def check_input(self, X: Tensor) -> None:
        if X.ndim != 4 or X.shape[1] != self.cfg.c:
            raise ConfigError(f"model expects (n, {self.cfg.c}, h, w) input, got {X.shape}")
        h, w = X.shape[2:]
        if self.cfg.nonlocal_kind == "pnb":
            PyramidNonLocalBlock.tiling_padding(h, w, 2 ** max(self.cfg.scales))
        if self.cfg.nonlocal_kind == "apnb" and max(self.cfg.pool_sizes) > min(h, w):
            raise ConfigError(f"input {h}x{w} smaller than pool size {max(self.cfg.pool_sizes)}")

    def features(self, X: Tensor, capture: list | None = None) -> list[Tensor]:
        """F_1..F_M; ``capture`` receives each non-local block's input."""
        self.check_input(X)
        F = self.entry(X)
        feats = []
        for drb, nl in zip(self.drbs, self.nonlocals):
            F = drb(F)
            if capture is not None:
                capture.append(F)
            if nl is not None:
                F = nl(F)
            feats.append(F)
        return feats

    def __call__(self, X: Tensor) -> tuple[Tensor, list[Tensor]]:
        Ys = [ops.add(X, ex(F)) for ex, F in zip(self.exits, self.features(X))]
        Y = ops.scale(Ys[0], self.fusion_weights, 0)
        for i in range(1, len(Ys)):
            Y = ops.add(Y, ops.scale(Ys[i], self.fusion_weights, i))
        return Y, Ys


def pnen_forward(X: Tensor, model: PnenModel) -> tuple[Tensor, list[Tensor]]:
    return model(X)


def pnen_loss(Y: Tensor, Ys: list[Tensor], G: Tensor) -> Tensor:
    """Deep-supervised MSE: (|G-Y|^2 + sum_m |G-Y_m|^2) / (h w c), averaged over the batch."""
    for t in [Y, *Ys]:
        if t.shape != G.shape:
            raise ConfigError(f"loss shape mismatch {t.shape} vs {G.shape}")
    total = ops.sum_squares(ops.sub(G, Y))
    for Ym in Ys:
        total = ops.add(total, ops.sum_squares(ops.sub(G, Ym)))
    n, c, h, w = G.shape
    return ops.mul_const(total, 1.0 / (n * c * h * w))


def zero_residual_branches(model: PnenModel) -> None:
    """Zero every exit net and non-local output conv; the model becomes the identity."""
    for ex in model.exits:
        for conv in ex.convs:
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0
    for nl in model.nonlocals:
        if nl is not None:
            nl.psi.weight.data[...] = 0
            nl.psi.bias.data[...] = 0


def full_size_config(**overrides) -> ModelConfig:
    base = dict(c=3, d=64, m=64, n=32, S=3, M=3, nonlocal_kind="pnb")
    base.update(overrides)
    return ModelConfig(**base)
