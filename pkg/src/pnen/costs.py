"""Analytic MAC / parameter / activation accounting.

Costs are derived from layer shapes alone, without running the model.
Conventions:

* conv: ``out_elements * in_channels * kh * kw`` MACs;
* attention: ``hw * refs * m`` for the logits plus ``hw * refs * n`` for the
  aggregation, and softmax at 5 ops per element (booked as MACs);
* FLOPs are printed as 2 * MACs;
* peak memory simulates sequential execution: a tensor stays live until its
  last consumer ran, and residual inputs stay live until the add.
  Training mode doubles every stored activation for its gradient buffer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import singledispatch

from .backbone import DrbBlock, ExitNet, PnenModel
from .layers import BatchNormLayer, ConvLayer
from .nonlocal_blocks import AsymmetricPyramidBlock, NonLocalBlock, PyramidNonLocalBlock

SOFTMAX_OPS = 5


@dataclass
class CostRow:
    name: str
    kind: str
    macs: int
    params: int
    activations: int


@dataclass
class AttentionRow:
    name: str
    queries: int
    refs: int
    elements: int


@dataclass
class CostReport:
    input_shape: tuple[int, int, int, int]
    rows: list[CostRow] = field(default_factory=list)
    attention: list[AttentionRow] = field(default_factory=list)
    peak_elements: int = 0
    dtype_bytes: int = 4
    label: str = ""

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_activations(self) -> int:
        return sum(r.activations for r in self.rows)

    @property
    def attention_elements(self) -> int:
        return sum(a.elements for a in self.attention)

    @property
    def attention_macs(self) -> int:
        return sum(r.macs for r in self.rows if r.kind.startswith("attn"))

    @property
    def nonlocal_activations(self) -> int:
        """Activation elements allocated inside non-local blocks."""
        return sum(r.activations for r in self.rows if ".nl." in "." + r.name and r.kind != "add")

    def peak_bytes(self, training: bool = False) -> int:
        if training:
            return 2 * self.total_activations * self.dtype_bytes
        return self.peak_elements * self.dtype_bytes

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "macs", "flops", "params", "activations"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, r.macs, 2 * r.macs, r.params, r.activations])
        writer.writerow(["TOTAL", "", self.total_macs, self.total_flops, self.total_params, self.total_activations])
        return buf.getvalue()

    def render(self, max_rows: int | None = None) -> str:
        n, c, h, w = self.input_shape
        lines = [
            f"# cost report {self.label} input {n}x{c}x{h}x{w}",
            f"# peak memory (inference, sequential): {self.peak_bytes() / 2**20:.1f} MiB at {self.dtype_bytes} B/elem",
            f"# stored activations (training, +1:1 grads): {self.peak_bytes(True) / 2**20:.1f} MiB",
            f"{'layer':<40} {'kind':<14} {'MACs':>14} {'params':>10} {'acts':>12}",
        ]
        rows = self.rows if max_rows is None else self.rows[:max_rows]
        for r in rows:
            lines.append(f"{r.name:<40} {r.kind:<14} {r.macs:>14,d} {r.params:>10,d} {r.activations:>12,d}")
        if max_rows is not None and len(self.rows) > max_rows:
            lines.append(f"... {len(self.rows) - max_rows} more rows")
        lines.append(f"{'TOTAL':<40} {'':<14} {self.total_macs:>14,d} {self.total_params:>10,d} {self.total_activations:>12,d}")
        if self.attention:
            lines.append("attention matrices:")
            for a in self.attention:
                lines.append(f"  {a.name:<38} {a.queries} x {a.refs} = {a.elements:,d}")
            lines.append(f"  total attention elements: {self.attention_elements:,d}")
        return "\n".join(lines)


class _Tracer:
    def __init__(self, report: CostReport):
        self.report = report
        self.live: dict[str, int] = {}

    def emit(self, name, kind, out_elems, macs=0, params=0, frees=()):
        self.live[name] = out_elems
        self.report.peak_elements = max(self.report.peak_elements, sum(self.live.values()))
        self.report.rows.append(CostRow(name, kind, int(macs), int(params), int(out_elems)))
        for f in frees:
            self.live.pop(f, None)
        return name

    def hold(self, name, elems):
        self.live[name] = elems
        self.report.peak_elements = max(self.report.peak_elements, sum(self.live.values()))

    def free(self, *names):
        for f in names:
            self.live.pop(f, None)


def _conv(tr, name, layer: ConvLayer, shape, src, padding=None, free_src=False):
    n, c, h, w = shape
    oh, ow = layer.output_size(h, w, padding)
    kh, kw = layer.kernel
    out = n * layer.out_channels * oh * ow
    params = layer.weight.size + (0 if layer.bias is None else layer.bias.size)
    tr.emit(name, "conv", out, out * c * kh * kw, params, frees=(src,) if free_src else ())
    return (n, layer.out_channels, oh, ow)


def _attention(tr, name, n, hw, refs, m, nv, q, k, v):
    logits = n * hw * refs
    tr.emit(f"{name}.logits", "attn_logits", logits, logits * m, frees=(k,))
    tr.emit(f"{name}.softmax", "attn_softmax", logits, SOFTMAX_OPS * logits, frees=(f"{name}.logits",))
    tr.emit(f"{name}.aggregate", "attn_aggregate", n * hw * nv, logits * nv, frees=(f"{name}.softmax", v))
    tr.report.attention.append(AttentionRow(name, hw, refs, logits))
    return f"{name}.aggregate"


def _trace_nonlocal(block, tr, prefix, shape, src):
    n, d, h, w = shape
    hw = h * w
    cfg = block.cfg
    _conv(tr, f"{prefix}.theta", block.theta, shape, src)
    q = f"{prefix}.theta"
    outs = []
    if isinstance(block, PyramidNonLocalBlock):
        for s, k, phi, g in zip(cfg.scales, cfg.strides, block.phi, block.g):
            pad = block.tiling_padding(h, w, k)
            _, _, rh, rw = _conv(tr, f"{prefix}.phi{s}", phi, shape, src, padding=pad)
            _conv(tr, f"{prefix}.g{s}", g, shape, src, padding=pad)
            outs.append(_attention(tr, f"{prefix}.scale{s}", n, hw, rh * rw, cfg.m, cfg.n, q, f"{prefix}.phi{s}", f"{prefix}.g{s}"))
        tr.free(q)
        if len(outs) > 1:
            tr.emit(f"{prefix}.concat", "concat", n * hw * cfg.n * len(outs), frees=outs)
            outs = [f"{prefix}.concat"]
        psi_in = (n, cfg.n * len(cfg.scales), h, w)
    else:
        _conv(tr, f"{prefix}.phi", block.phi, shape, src)
        _conv(tr, f"{prefix}.g", block.g, shape, src)
        refs = hw
        kname, vname = f"{prefix}.phi", f"{prefix}.g"
        if isinstance(block, AsymmetricPyramidBlock):
            refs = block.num_tokens
            tr.emit(f"{prefix}.pool_k", "pool", n * cfg.m * refs, n * cfg.m * hw * len(cfg.pool_sizes), frees=(kname,))
            tr.emit(f"{prefix}.pool_v", "pool", n * cfg.n * refs, n * cfg.n * hw * len(cfg.pool_sizes), frees=(vname,))
            kname, vname = f"{prefix}.pool_k", f"{prefix}.pool_v"
        outs.append(_attention(tr, f"{prefix}.attn", n, hw, refs, cfg.m, cfg.n, q, kname, vname))
        tr.free(q)
        psi_in = (n, cfg.n, h, w)
    _conv(tr, f"{prefix}.psi", block.psi, psi_in, outs[0], free_src=True)
    tr.emit(f"{prefix}.add", "add", n * d * hw, frees=(f"{prefix}.psi", src))
    return f"{prefix}.add"


def _trace_drb(block: DrbBlock, tr, prefix, shape, src):
    n, d, h, w = shape
    elems = n * d * h * w
    for i, grp in enumerate(block.groups):
        p = f"{prefix}.g{i}"
        _conv(tr, f"{p}.conv1", grp.conv1, shape, src)
        tr.emit(f"{p}.bn", "bn", elems, 2 * elems, 2 * d, frees=(f"{p}.conv1",))
        tr.emit(f"{p}.relu", "relu", elems, frees=(f"{p}.bn",))
        _conv(tr, f"{p}.conv2", grp.conv2, shape, f"{p}.relu", free_src=True)
        src = tr.emit(f"{p}.add", "add", elems, frees=(f"{p}.conv2", src))
    return src


def _trace_exit(ex: ExitNet, tr, prefix, shape, src):
    n, d, h, w = shape
    a, b, c = ex.convs
    s1 = _conv(tr, f"{prefix}.conv1", a, shape, src)
    tr.emit(f"{prefix}.relu1", "relu", n * d * h * w, frees=(f"{prefix}.conv1",))
    _conv(tr, f"{prefix}.conv2", b, s1, f"{prefix}.relu1", free_src=True)
    tr.emit(f"{prefix}.relu2", "relu", n * d * h * w, frees=(f"{prefix}.conv2",))
    s3 = _conv(tr, f"{prefix}.conv3", c, s1, f"{prefix}.relu2", free_src=True)
    return f"{prefix}.conv3", s3


@singledispatch
def count_costs(obj, input_shape, dtype_bytes: int = 4) -> CostReport:
    raise TypeError(f"no cost model for {type(obj).__name__}")


@count_costs.register
def _(obj: ConvLayer, input_shape, dtype_bytes: int = 4) -> CostReport:
    rep = CostReport(tuple(input_shape), dtype_bytes=dtype_bytes, label="conv")
    tr = _Tracer(rep)
    tr.hold("input", _prod(input_shape))
    _conv(tr, "conv", obj, input_shape, "input")
    return rep


@count_costs.register
def _(obj: BatchNormLayer, input_shape, dtype_bytes: int = 4) -> CostReport:
    rep = CostReport(tuple(input_shape), dtype_bytes=dtype_bytes, label="bn")
    tr = _Tracer(rep)
    tr.hold("input", _prod(input_shape))
    e = _prod(input_shape)
    tr.emit("bn", "bn", e, 2 * e, 2 * obj.channels)
    return rep


@count_costs.register(NonLocalBlock)
@count_costs.register(PyramidNonLocalBlock)
@count_costs.register(AsymmetricPyramidBlock)
def _(obj, input_shape, dtype_bytes: int = 4) -> CostReport:
    rep = CostReport(tuple(input_shape), dtype_bytes=dtype_bytes, label=type(obj).__name__)
    tr = _Tracer(rep)
    tr.hold("input", _prod(input_shape))
    _trace_nonlocal(obj, tr, "nl", tuple(input_shape), "input")
    return rep


@count_costs.register
def _(obj: DrbBlock, input_shape, dtype_bytes: int = 4) -> CostReport:
    rep = CostReport(tuple(input_shape), dtype_bytes=dtype_bytes, label="drb")
    tr = _Tracer(rep)
    tr.hold("input", _prod(input_shape))
    _trace_drb(obj, tr, "drb", tuple(input_shape), "input")
    return rep


@count_costs.register
def _(obj: PnenModel, input_shape, dtype_bytes: int = 4) -> CostReport:
    cfg = obj.cfg
    rep = CostReport(tuple(input_shape), dtype_bytes=dtype_bytes, label=f"pnen[{cfg.nonlocal_kind}]")
    tr = _Tracer(rep)
    n, c, h, w = input_shape
    tr.hold("X", _prod(input_shape))
    feat_shape = _conv(tr, "entry", obj.entry, input_shape, "X")
    src = "entry"
    ys = []
    for i, (drb, nl, ex) in enumerate(zip(obj.drbs, obj.nonlocals, obj.exits)):
        src = _trace_drb(drb, tr, f"group{i}.drb", feat_shape, src)
        if nl is not None:
            src = _trace_nonlocal(nl, tr, f"group{i}.nl", feat_shape, src)
        r, _ = _trace_exit(ex, tr, f"group{i}.exit", feat_shape, src)
        ys.append(tr.emit(f"group{i}.y", "add", n * c * h * w, frees=(r,)))
    tr.free(src)
    rep.rows.append(CostRow("fusion", "fusion", len(ys) * n * c * h * w, obj.fusion_weights.size, n * c * h * w))
    return rep


def _prod(shape) -> int:
    out = 1
    for s in shape:
        out *= int(s)
    return out


def attention_memory_ratio(a: CostReport, b: CostReport) -> float:
    """Non-local activation memory of ``a`` relative to ``b``."""
    return a.nonlocal_activations / b.nonlocal_activations
