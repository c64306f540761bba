"""Attention blocks and the bottleneck residual block.

Each attention block is available twice: as a pure function over a parameter
dict (``se_forward``, ``hac_forward``, ``nl_forward``, ``cnl_forward``) and as
a :class:`~attnreid.nn.Module` that owns those parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Optional

import numpy as np

from .engine import DimensionError, Tensor, ops
from .nn import BatchNorm, Conv2d, Linear, Module

KINDS = ("se", "hac", "nl", "cnl")
CHANNEL_WISE = ("se", "hac", "cnl")

# sigmoid(40) rounds to exactly 1.0 in float32 and float64
UNIT_GATE_BIAS = 40.0


@dataclass(frozen=True)
class AttentionSpec:
    kind: str
    r: int = 16
    inner_ratio: Fraction = field(default=Fraction(1, 2))
    scaled: bool = False

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.r < 1:
            raise ValueError("reduction ratio r must be a positive integer")
        ratio = Fraction(self.inner_ratio)
        if ratio <= 0:
            raise ValueError("inner_ratio must be positive")
        object.__setattr__(self, "inner_ratio", ratio)

    def reduced(self, channels: int) -> int:
        """Width of the bottleneck (channel-wise kinds) or inner branches (NL)."""
        if self.kind == "nl":
            inner = channels * self.inner_ratio
            if inner.denominator != 1:
                raise DimensionError(f"NL inner width {channels}*{self.inner_ratio} is not integral")
            return int(inner)
        if channels % self.r:
            raise DimensionError(f"{self.kind.upper()}: channels {channels} not divisible by r={self.r}")
        return channels // self.r

    def fit(self, channels: int) -> "AttentionSpec":
        """Copy whose r is the largest divisor of ``channels`` not above this r."""
        if self.kind == "nl":
            return self
        r = min(self.r, channels)
        while channels % r:
            r -= 1
        return replace(self, r=r)


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------

def _pool_vector(x: Tensor) -> Tensor:
    b, c = x.shape[:2]
    return ops.global_avg_pool(x).reshape(b, c)


def channel_gate(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """sigmoid(W2 relu(W1 GAP(x))), shared by SE and HAC; returns B x C."""
    c = x.shape[1]
    if p["w1"].shape[0] != c or p["w2"].shape[1] != c:
        raise DimensionError(f"gate weights {p['w1'].shape}/{p['w2'].shape} do not fit {c} channels")
    s = _pool_vector(x)
    h = ops.relu(ops.linear(s, p["w1"], p["b1"]))
    return ops.sigmoid(ops.linear(h, p["w2"], p["b2"]))


def _apply_gate(x: Tensor, gate: Tensor) -> Tensor:
    b, c = gate.shape
    return ops.mul(x, gate.reshape(b, c, 1, 1))


def se_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Squeeze-and-excitation gate applied to ``x``.

    Inside a bottleneck ``x`` is the residual branch before the skip addition.
    """
    return _apply_gate(x, channel_gate(x, p))


def hac_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Channel gate on the full tensor between two residual blocks."""
    return _apply_gate(x, channel_gate(x, p))


def nl_forward(x: Tensor, p: Mapping[str, Tensor], scaled: bool = False) -> Tensor:
    """Embedded-Gaussian non-local block with residual connection.

    q/k/v are 1x1 projections to the inner width; every spatial position
    attends to every other one through a row-softmax over q k^T.
    """
    b, c, h, w = x.shape
    n = h * w
    ci = p["theta_w"].shape[0]
    q = ops.conv2d(x, p["theta_w"], p["theta_b"]).reshape(b, ci, n)
    k = ops.conv2d(x, p["phi_w"], p["phi_b"]).reshape(b, ci, n)
    v = ops.conv2d(x, p["g_w"], p["g_b"]).reshape(b, ci, n)
    scores = ops.matmul(ops.transpose(q, (0, 2, 1)), k)
    if scaled:
        scores = scores * (1.0 / np.sqrt(ci))
    f = ops.softmax(scores, axis=-1)
    y = ops.matmul(f, ops.transpose(v, (0, 2, 1)))
    y = ops.transpose(y, (0, 2, 1)).reshape(b, ci, h, w)
    return ops.add(x, ops.conv2d(y, p["z_w"], p["z_b"]))


def cnl_forward(x: Tensor, p: Mapping[str, Tensor], scaled: bool = False) -> Tensor:
    """Channel-wise non-local gate.

    The tensor is pooled to one value per channel first. Query, key and value
    embeddings of width C/r are taken from that vector; each of the C/r
    entries attends over the others through a (C/r) x (C/r) softmax, and the
    aggregated vector is mapped back to a sigmoid gate per channel.
    """
    b, c = x.shape[:2]
    if p["wq"].shape[0] != c or p["wo"].shape[1] != c:
        raise DimensionError(f"C-NL weights {p['wq'].shape}/{p['wo'].shape} do not fit {c} channels")
    d = p["wq"].shape[1]
    g = _pool_vector(x)
    q = ops.linear(g, p["wq"]).reshape(b, d, 1)
    k = ops.linear(g, p["wk"]).reshape(b, 1, d)
    v = ops.linear(g, p["wv"]).reshape(b, d, 1)
    scores = ops.matmul(q, k)
    if scaled:
        scores = scores * (1.0 / np.sqrt(d))
    f = ops.softmax(scores, axis=-1)
    y = ops.matmul(f, v).reshape(b, d)
    gate = ops.sigmoid(ops.linear(y, p["wo"], p["bo"]))
    return _apply_gate(x, gate)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class AttentionBlock(Module):
    kind = ""

    def params(self) -> dict:
        return dict(self._params)

    def out_shape(self, shape):
        return shape


class _GateBlock(AttentionBlock):
    def __init__(self, channels: int, spec: AttentionSpec, *, seed: int = 0, name: str = "att"):
        super().__init__()
        self.channels = channels
        self.spec = spec
        hidden = spec.reduced(channels)
        fc1 = Linear(channels, hidden, seed=seed, name=name + ".w1")
        fc2 = Linear(hidden, channels, seed=seed, name=name + ".w2")
        self.w1, self.b1 = fc1.weight, fc1.bias
        self.w2, self.b2 = fc2.weight, fc2.bias

    def gate(self, x: Tensor) -> Tensor:
        return channel_gate(x, self.params())

    def force_unit_gate(self) -> None:
        self.w2.data[...] = 0.0
        self.b2.data[...] = UNIT_GATE_BIAS


class SEBlock(_GateBlock):
    kind = "se"

    def forward(self, x: Tensor) -> Tensor:
        return se_forward(x, self.params())


class HACBlock(_GateBlock):
    kind = "hac"

    def forward(self, x: Tensor) -> Tensor:
        return hac_forward(x, self.params())


class NonLocalBlock(AttentionBlock):
    kind = "nl"

    def __init__(self, channels: int, spec: AttentionSpec, *, seed: int = 0, name: str = "att"):
        super().__init__()
        self.channels = channels
        self.spec = spec
        ci = spec.reduced(channels)
        for branch in ("theta", "phi", "g"):
            conv = Conv2d(channels, ci, 1, seed=seed, name=f"{name}.{branch}", bias=True)
            setattr(self, branch + "_w", conv.weight)
            setattr(self, branch + "_b", conv.bias)
        # zero output projection: the block starts as the identity
        self.z_w = Tensor(np.zeros((channels, ci, 1, 1)), requires_grad=True)
        self.z_b = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return nl_forward(x, self.params(), self.spec.scaled)


class CNLBlock(AttentionBlock):
    kind = "cnl"

    def __init__(self, channels: int, spec: AttentionSpec, *, seed: int = 0, name: str = "att"):
        super().__init__()
        self.channels = channels
        self.spec = spec
        d = spec.reduced(channels)
        for branch in ("wq", "wk", "wv"):
            self.__setattr__(branch, Linear(channels, d, bias=False, seed=seed, name=f"{name}.{branch}").weight)
        out = Linear(d, channels, seed=seed, name=f"{name}.wo")
        self.wo, self.bo = out.weight, out.bias

    def force_unit_gate(self) -> None:
        self.wo.data[...] = 0.0
        self.bo.data[...] = UNIT_GATE_BIAS

    def forward(self, x: Tensor) -> Tensor:
        return cnl_forward(x, self.params(), self.spec.scaled)


_BLOCKS = {"se": SEBlock, "hac": HACBlock, "nl": NonLocalBlock, "cnl": CNLBlock}


def make_attention(spec: AttentionSpec, channels: int, *, seed: int = 0, name: str = "att") -> AttentionBlock:
    return _BLOCKS[spec.kind](channels, spec, seed=seed, name=name)


def force_unit_gate(block: AttentionBlock) -> None:
    """Make a channel-wise block pass its input through unchanged."""
    if not hasattr(block, "force_unit_gate"):
        raise TypeError(f"{type(block).__name__} has no gate")
    block.force_unit_gate()


class Bottleneck(Module):
    """1x1 reduce, 3x3 (strided), 1x1 expand; BN after each conv, ReLU between.

    ``se`` optionally gates the branch output before the skip addition.
    """

    expansion = 4

    def __init__(self, cin: int, mid: int, stride: int = 1, *, downsample: Optional[bool] = None,
                 seed: int = 0, name: str = "block"):
        super().__init__()
        cout = mid * self.expansion
        self.cin, self.mid, self.cout, self.stride = cin, mid, cout, stride
        self.conv1 = Conv2d(cin, mid, 1, seed=seed, name=name + ".conv1")
        self.bn1 = BatchNorm(mid)
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, pad=1, seed=seed, name=name + ".conv2")
        self.bn2 = BatchNorm(mid)
        self.conv3 = Conv2d(mid, cout, 1, seed=seed, name=name + ".conv3")
        self.bn3 = BatchNorm(cout)
        if downsample is None:
            downsample = stride != 1 or cin != cout
        if downsample:
            self.down_conv = Conv2d(cin, cout, 1, stride=stride, seed=seed, name=name + ".down")
            self.down_bn = BatchNorm(cout)
        else:
            object.__setattr__(self, "down_conv", None)
        object.__setattr__(self, "se", None)

    @property
    def has_downsample(self) -> bool:
        return self.down_conv is not None

    def attach_se(self, block: SEBlock) -> None:
        if block.channels != self.cout:
            raise DimensionError(f"SE width {block.channels} does not match block output {self.cout}")
        self.add_module("se", block)

    def branch(self, x: Tensor) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x)))
        out = ops.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def forward(self, x: Tensor) -> Tensor:
        out = self.branch(x)
        if self.se is not None:
            out = self.se(out)
        skip = self.down_bn(self.down_conv(x)) if self.down_conv is not None else x
        if skip.shape != out.shape:
            raise DimensionError(f"skip {skip.shape} and branch {out.shape} shapes differ")
        return ops.relu(ops.add(skip, out))

    def out_shape(self, shape):
        c, h, w = shape
        return self.conv3.out_shape(self.conv2.out_shape(self.conv1.out_shape(shape)))


def bottleneck_forward(x: Tensor, block: Bottleneck) -> Tensor:
    return block(x)
