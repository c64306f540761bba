"""Analytic MAC/parameter accounting and a wall-clock latency harness.

One MAC is one multiply plus one add. Normalization, activation, pooling and
residual additions are counted separately as elementwise operations. Counts
are per image.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .backbone import Model
from .blocks import AttentionBlock, Bottleneck, CNLBlock, NonLocalBlock, SEBlock, HACBlock
from .engine import Tensor, no_grad, ops

SCHEMA_VERSION = 1
CSV_COLUMNS = ("schema", "config_id", "macs", "params", "batches_per_sec", "ms_per_batch", "machine")

# default desk latency protocol; the published protocol averaged 10000 batches
DEFAULT_WARMUP = 50
DEFAULT_ITERS = 500
DEFAULT_BATCH = 16

# throughput assumed when turning MAC counts into a modeled speed
NOMINAL_OPS_PER_SECOND = 1e10


@dataclass
class LayerCost:
    name: str
    macs: int = 0
    params: int = 0
    elementwise: int = 0


@dataclass
class CostReport:
    per_layer: list = field(default_factory=list)
    batches_per_second: Optional[float] = None
    ms_per_batch: Optional[float] = None
    ms_std: Optional[float] = None
    batch_size: int = DEFAULT_BATCH
    machine: str = ""
    threads: int = 1
    config_id: str = ""

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.per_layer)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.per_layer)

    @property
    def total_elementwise(self) -> int:
        return sum(layer.elementwise for layer in self.per_layer)

    def layers_matching(self, prefix: str) -> list:
        return [layer for layer in self.per_layer if layer.name.startswith(prefix)]

    def macs_of(self, prefix: str) -> int:
        return sum(layer.macs for layer in self.layers_matching(prefix))

    def set_timing(self, ms_per_batch: float, ms_std: float | None = None) -> "CostReport":
        if not ms_per_batch > 0:
            raise ValueError("ms_per_batch must be positive")
        self.ms_per_batch = float(ms_per_batch)
        self.batches_per_second = 1000.0 / self.ms_per_batch
        self.ms_std = ms_std
        return self

    @property
    def speed(self) -> Optional[float]:
        return self.batches_per_second

    def to_dict(self, per_layer: bool = True) -> dict:
        d = {
            "schema": SCHEMA_VERSION,
            "config_id": self.config_id,
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "total_elementwise": self.total_elementwise,
            "batches_per_second": self.batches_per_second,
            "ms_per_batch": self.ms_per_batch,
            "ms_std": self.ms_std,
            "batch_size": self.batch_size,
            "machine": self.machine,
            "threads": self.threads,
        }
        if per_layer:
            d["per_layer"] = [[l.name, l.macs, l.params, l.elementwise] for l in self.per_layer]
        return d

    def to_json(self, per_layer: bool = True) -> str:
        return json.dumps(self.to_dict(per_layer), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported cost report schema {d.get('schema')!r}")
        layers = [LayerCost(n, int(m), int(p), int(e)) for n, m, p, e in d.get("per_layer", [])]
        rep = cls(per_layer=layers, batch_size=int(d.get("batch_size", DEFAULT_BATCH)),
                  machine=d.get("machine", ""), threads=int(d.get("threads", 1)),
                  config_id=d.get("config_id", ""))
        rep.batches_per_second = d.get("batches_per_second")
        rep.ms_per_batch = d.get("ms_per_batch")
        rep.ms_std = d.get("ms_std")
        return rep

    def csv_row(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "config_id": self.config_id,
            "macs": self.total_macs,
            "params": self.total_params,
            "batches_per_sec": _fmt(self.batches_per_second),
            "ms_per_batch": _fmt(self.ms_per_batch),
            "machine": self.machine,
        }


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_cost_csv(reports: Sequence[CostReport], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.csv_row())


def read_cost_csv(fh) -> list:
    rows = list(csv.DictReader(fh))
    for row in rows:
        if row.get("schema") != str(SCHEMA_VERSION):
            raise ValueError(f"unsupported cost CSV schema {row.get('schema')!r}")
    return rows


# ---------------------------------------------------------------------------
# analytic counting
# ---------------------------------------------------------------------------

def _conv(name, conv, shape):
    c, h, w = shape
    co, ho, wo = conv.out_shape(shape)
    macs = co * c * conv.k * conv.k * ho * wo
    params = co * c * conv.k * conv.k + (co if conv.bias is not None else 0)
    return LayerCost(name, macs, params), (co, ho, wo)


def _ew(name, count, params=0):
    return LayerCost(name, 0, params, int(count))


def attention_costs(name: str, block: AttentionBlock, shape) -> list:
    """Per-op costs of one attention block applied to a C x H x W tensor."""
    c, h, w = shape
    n = h * w
    out = []
    if isinstance(block, (SEBlock, HACBlock)):
        d = block.spec.reduced(c)
        out += [
            _ew(f"{name}.pool", c * n),
            LayerCost(f"{name}.fc1", c * d, c * d + d),
            _ew(f"{name}.relu", d),
            LayerCost(f"{name}.fc2", d * c, d * c + c),
            _ew(f"{name}.sigmoid", c),
            _ew(f"{name}.scale", c * n),
        ]
    elif isinstance(block, CNLBlock):
        d = block.spec.reduced(c)
        out += [
            _ew(f"{name}.pool", c * n),
            LayerCost(f"{name}.query", c * d, c * d),
            LayerCost(f"{name}.key", c * d, c * d),
            LayerCost(f"{name}.value", c * d, c * d),
            LayerCost(f"{name}.similarity", d * d),
            _ew(f"{name}.softmax", d * d),
            LayerCost(f"{name}.aggregate", d * d),
            LayerCost(f"{name}.out", d * c, d * c + c),
            _ew(f"{name}.sigmoid", c),
            _ew(f"{name}.scale", c * n),
        ]
    elif isinstance(block, NonLocalBlock):
        ci = block.spec.reduced(c)
        for branch in ("theta", "phi", "g"):
            out.append(LayerCost(f"{name}.{branch}", c * ci * n, c * ci + ci))
        out += [
            LayerCost(f"{name}.similarity", n * n * ci),
            _ew(f"{name}.softmax", n * n),
            LayerCost(f"{name}.aggregate", n * n * ci),
            LayerCost(f"{name}.z", ci * c * n, ci * c + c),
            _ew(f"{name}.residual", c * n),
        ]
    else:
        raise TypeError(f"no cost rule for {type(block).__name__}")
    return out


def bottleneck_costs(name: str, block: Bottleneck, shape):
    out = []
    entry, s1 = _conv(f"{name}.conv1", block.conv1, shape)
    out += [entry, _ew(f"{name}.bn1", np.prod(s1), 2 * s1[0]), _ew(f"{name}.relu1", np.prod(s1))]
    entry, s2 = _conv(f"{name}.conv2", block.conv2, s1)
    out += [entry, _ew(f"{name}.bn2", np.prod(s2), 2 * s2[0]), _ew(f"{name}.relu2", np.prod(s2))]
    entry, s3 = _conv(f"{name}.conv3", block.conv3, s2)
    out += [entry, _ew(f"{name}.bn3", np.prod(s3), 2 * s3[0])]
    if block.se is not None:
        out += attention_costs(f"{name}.se", block.se, s3)
    if block.down_conv is not None:
        entry, sd = _conv(f"{name}.down", block.down_conv, shape)
        out += [entry, _ew(f"{name}.down_bn", np.prod(sd), 2 * sd[0])]
    out += [_ew(f"{name}.add", np.prod(s3)), _ew(f"{name}.relu3", np.prod(s3))]
    return out, s3


def count_macs(target, input_shape: Sequence[int] | None = None, config_id: str = "") -> CostReport:
    """Analytic per-layer cost of a whole model or of a single block.

    ``input_shape`` is C x H x W without the batch axis; for a model it
    defaults to 3 x configured input size.
    """
    layers = []
    if isinstance(target, Model):
        cfg = target.cfg
        shape = tuple(input_shape) if input_shape is not None else (3, *cfg.input_hw)
        entry, shape = _conv("stem.conv", target.conv1, shape)
        layers += [entry, _ew("stem.bn", np.prod(shape), 2 * shape[0]), _ew("stem.relu", np.prod(shape))]
        c, h, w = shape
        h = ops.conv_output_size(h, 3, 2, 1)
        w = ops.conv_output_size(w, 3, 2, 1)
        shape = (c, h, w)
        layers.append(_ew("stem.maxpool", 9 * c * h * w))
        if 1 in target.sites:
            layers += attention_costs("att1", target.sites[1], shape)
        name_of = {id(m): n for n, m in target.named_children()}
        for i, block in enumerate(target.blocks):
            entries, shape = bottleneck_costs(name_of[id(block)], block, shape)
            layers += entries
            site = target.sites.get(i + 2)
            if site is not None:
                layers += attention_costs(f"att{i + 2}", site, shape)
        c, h, w = shape
        layers.append(_ew("head.pool", c * h * w))
        layers.append(_ew("head.bnneck", c, 2 * c))
        nc = target.cfg.num_classes
        layers.append(LayerCost("head.classifier", c * nc, c * nc))
    elif isinstance(target, Bottleneck):
        if input_shape is None:
            raise ValueError("input_shape required for a block")
        layers, _ = bottleneck_costs("block", target, tuple(input_shape))
    elif isinstance(target, AttentionBlock):
        if input_shape is None:
            raise ValueError("input_shape required for a block")
        layers = attention_costs(target.kind, target, tuple(input_shape))
    else:
        raise TypeError(f"cannot count MACs of {type(target).__name__}")
    for layer in layers:
        layer.macs, layer.params, layer.elementwise = int(layer.macs), int(layer.params), int(layer.elementwise)
    return CostReport(per_layer=layers, config_id=config_id)


def modeled_speed(report: CostReport, batch_size: int = DEFAULT_BATCH,
                  ops_per_second: float = NOMINAL_OPS_PER_SECOND) -> CostReport:
    """Fill timing fields from the analytic count at a fixed nominal throughput."""
    work = (report.total_macs + report.total_elementwise) * batch_size
    report.batch_size = batch_size
    report.machine = f"modeled@{ops_per_second:.3g}ops/s"
    return report.set_timing(1000.0 * work / ops_per_second, 0.0)


# ---------------------------------------------------------------------------
# measured latency
# ---------------------------------------------------------------------------

def machine_descriptor(threads: int) -> str:
    proc = platform.processor() or platform.machine() or "unknown"
    return f"{platform.system()}-{platform.machine()}|{proc}|cpus={os.cpu_count()}|numpy={np.__version__}|threads={threads}"


def benchmark_latency(model: Model, batch_size: int = DEFAULT_BATCH, warmup: int = DEFAULT_WARMUP,
                      iters: int = DEFAULT_ITERS, seed: int = 0, threads: int = 1,
                      input_hw: Sequence[int] | None = None, config_id: str = "") -> CostReport:
    """Mean inference time per batch of random images, after unmeasured warmup batches.

    BLAS is pinned to ``threads`` threads for the duration of the run.
    """
    return benchmark_interleaved({config_id: model}, batch_size, warmup, iters, seed, threads, input_hw)[config_id]


def benchmark_interleaved(models: Mapping[str, Model], batch_size: int = DEFAULT_BATCH,
                          warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS, seed: int = 0,
                          threads: int = 1, input_hw: Sequence[int] | None = None) -> dict:
    """Time several models batch by batch in round-robin order.

    Interleaving spreads slow phases of a shared machine evenly over the
    models, so their ratios are far steadier than back-to-back runs.
    Returns one report per key of ``models``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    inputs = {}
    for key, model in models.items():
        h, w = input_hw or model.cfg.input_hw
        dtype = model.conv1.weight.dtype
        shape = (batch_size, 3, h, w)
        if (shape, dtype) not in inputs:
            inputs[shape, dtype] = [Tensor(rng.standard_normal(shape).astype(dtype), dtype=dtype) for _ in range(2)]
        inputs[key] = inputs[shape, dtype]
    modes = {key: model.training for key, model in models.items()}
    times = {key: [] for key in models}
    try:
        for model in models.values():
            model.eval()
        with threadpool_limits(limits=threads), no_grad():
            for i in range(warmup + iters):
                for key, model in models.items():
                    t0 = time.perf_counter()
                    model.forward_features(inputs[key][i % 2])
                    if i >= warmup:
                        times[key].append((time.perf_counter() - t0) * 1000.0)
    finally:
        for key, model in models.items():
            model.train(modes[key])
    reports = {}
    for key, model in models.items():
        h, w = inputs[key][0].shape[2:]
        report = count_macs(model, (3, h, w), config_id=key)
        report.batch_size = batch_size
        report.threads = threads
        report.machine = machine_descriptor(threads)
        std = statistics.pstdev(times[key]) if len(times[key]) > 1 else 0.0
        reports[key] = report.set_timing(statistics.fmean(times[key]), std)
    return reports


# ---------------------------------------------------------------------------
# Pareto exclusion
# ---------------------------------------------------------------------------

def _metrics(trial):
    m, s = getattr(trial, "map_mean", None), getattr(trial, "speed", None)
    if m is None or s is None or not math.isfinite(m) or not math.isfinite(s):
        raise ValueError(f"trial {getattr(trial, 'key', trial)!r} lacks mAP or speed")
    return m, s


def is_excluded(trial, ref_fast, ref_deep) -> bool:
    """Slower than the deep reference without matching it, or below the baseline."""
    m, s = _metrics(trial)
    m_fast, _ = _metrics(ref_fast)
    m_deep, s_deep = _metrics(ref_deep)
    return (s < s_deep and m < m_deep) or m < m_fast


def pareto_filter(trials: Iterable, ref_fast, ref_deep) -> tuple:
    """Split ``trials`` into (kept, rejected), preserving input order."""
    kept, rejected = [], []
    for t in trials:
        (rejected if is_excluded(t, ref_fast, ref_deep) else kept).append(t)
    return kept, rejected
