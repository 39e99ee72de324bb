"""Central finite-difference checks of the tape gradients.

Each case builds a scalar ``sum(out * R)`` for a fixed random ``R`` and
compares the tape gradient of every input with a central difference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .backbone import DrbBlock, ExitNet, ModelConfig, PnenModel, pnen_loss
from .layers import BatchNormLayer, ConvLayer, Module
from .nonlocal_blocks import make_nonlocal
from .tensor import Tape, Tensor

STEP = 1e-5
OP_TOL = 1e-4
END_TO_END_TOL = 1e-3
# entries whose true gradient is structurally zero (a bias ahead of a
# softmax or train-mode BN) only carry difference roundoff, a few ulps of
# the objective over the step (~1e-10 here)
ABS_FLOOR = 1e-5
# probe points must keep every ReLU input this far from the kink
KINK_MARGIN = 1e-4


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_rel_err={self.max_rel_error:.3e} entries={self.checked}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    name: str,
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    rng: np.random.Generator,
    tol: float = OP_TOL,
    samples: int | None = None,
    step: float = STEP,
) -> GradcheckResult:
    """Compare tape gradients of ``sum(fn() * R)`` w.r.t. ``leaves`` with central differences.

    ``fn`` must rebuild its output from the current contents of the leaves.
    ``samples`` limits the number of entries probed per leaf.
    """
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    probe = fn()
    R = rng.standard_normal(probe.shape)

    with Tape() as tape:
        loss = ops.weighted_sum(fn(), R)
        tape.backward(loss)

    def objective() -> float:
        return float((fn().data * R).sum())

    worst, count = 0.0, 0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            idx = rng.choice(flat.size, samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = objective()
            flat[i] = orig - step
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = float(relative_error(np.asarray(analytic.reshape(-1)[i]), np.asarray(numeric)))
            worst = max(worst, err)
            count += 1
    return GradcheckResult(name, worst, count, tol)


def kink_margin(fn: Callable[[], Tensor], leaves: Sequence[Tensor]) -> float:
    """Smallest |input| over all ReLUs evaluated by ``fn``."""
    for t in leaves:
        t.requires_grad = True
    with Tape() as tape:
        fn()
        margins = [np.abs(r.inputs[0].data).min() for r in tape.records if r.name == "relu"]
    return float(min(margins, default=np.inf))


def _params(module: Module) -> list[Tensor]:
    return module.parameters()


def _randomize(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    # zero-initialised output convs would hide the upstream gradients
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, forward, leaves) for every differentiable layer class at 64-bit."""
    cases = []
    shape = (2, 3, 7, 7)

    for label, kw in [
        ("conv3x3", dict(kernel=3, padding=1)),
        ("conv_strided", dict(kernel=2, stride=2)),
        ("conv_dilated", dict(kernel=3, dilation=2, padding=2)),
        ("conv1x1", dict(kernel=1)),
    ]:
        layer = ConvLayer(3, 4, rng=rng, **kw)
        x = Tensor(rng.standard_normal(shape))
        cases.append((label, lambda layer=layer, x=x: layer(x), [x, layer.weight, layer.bias]))

    for mode in ("train", "eval"):
        bn = BatchNormLayer(3)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[...] = rng.standard_normal(3)
        bn.running_mean[...] = rng.standard_normal(3) * 0.1
        bn.running_var[...] = rng.uniform(0.5, 2.0, 3)
        bn.train(mode == "train")
        x = Tensor(rng.standard_normal(shape))
        cases.append((f"batchnorm_{mode}", lambda bn=bn, x=x: bn(x), [x, bn.gamma, bn.beta]))

    x = Tensor(_away_from_zero(rng, shape))
    cases.append(("relu", lambda x=x: ops.relu(x), [x]))

    a = Tensor(rng.standard_normal((2, 4, 5)))
    b = Tensor(rng.standard_normal((2, 5, 3)))
    cases.append(("matmul", lambda a=a, b=b: ops.matmul(a, b), [a, b]))

    x = Tensor(rng.standard_normal((2, 4, 6)))
    cases.append(("softmax", lambda x=x: ops.softmax_rows(x), [x]))

    x = Tensor(rng.standard_normal(shape))
    cases.append(("adaptive_pool", lambda x=x: ops.adaptive_avg_pool(x, 3), [x]))

    for kind in ("nlb", "pnb", "apnb"):
        block = make_nonlocal(kind, 4, 3, 2, scales=(1, 2), pool_sizes=(1, 2, 3), rng=rng)
        _randomize(block, rng)
        x = Tensor(rng.standard_normal((2, 4, 7, 6)))
        cases.append((kind, lambda block=block, x=x: block(x), [x, *_params(block)]))

    drb = DrbBlock(3, rng=rng, dilations=(1, 2))
    x = Tensor(rng.standard_normal(shape))
    cases.append(("drb", lambda drb=drb, x=x: drb(x), [x, *_params(drb)]))

    ex = ExitNet(3, 2, rng)
    x = Tensor(rng.standard_normal(shape))
    cases.append(("exit_net", lambda ex=ex, x=x: ex(x), [x, *_params(ex)]))
    return cases


def end_to_end_case(rng: np.random.Generator, kind: str = "pnb"):
    """Full deep-supervised loss on a 1x3x16x16 input; returns (fn, leaves).

    Draws are rejected until no ReLU input lies within the kink margin.
    """
    while True:
        model = PnenModel(ModelConfig(c=3, d=4, m=3, n=2, S=2, M=2, nonlocal_kind=kind, pool_sizes=(1, 2, 4), dtype="f64", seed=int(rng.integers(1 << 30))))
        for nl in model.nonlocals:
            nl.psi.weight.data[...] = rng.standard_normal(nl.psi.weight.shape) * 0.3
        X = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        G = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))

        def fn(model=model, X=X, G=G):
            Y, Ys = model(X)
            return pnen_loss(Y, Ys, G)

        leaves = [X, *model.parameters()]
        if kink_margin(fn, leaves) > KINK_MARGIN:
            return fn, leaves


def run_all(seed: int = 0, samples: int | None = 24) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_gradients(name, fn, leaves, rng, samples=samples) for name, fn, leaves in op_cases(rng)]
    fn, leaves = end_to_end_case(rng)
    results.append(check_gradients("pnen_loss_end_to_end", fn, leaves, rng, tol=END_TO_END_TOL, samples=4))
    return results
