"""ResNet-style re-id backbone with enumerable attention insertion sites.

Site numbering: position 1 is the stem output (after max pooling); position
``j + 1`` is the output of the j-th residual block, counted over all stages.
The raw input is not a site.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .blocks import KINDS, AttentionSpec, Bottleneck, make_attention
from .engine import DimensionError, Tensor, ops
from .nn import BatchNorm, Conv2d, Linear, Module

RESNET50_DEPTHS = (3, 4, 6, 3)
RESNET101_DEPTHS = (3, 4, 23, 3)
STAGE_WIDTHS = (64, 128, 256, 512)

CHECKPOINT_FORMAT = "attnreid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    stage_depths: tuple = RESNET50_DEPTHS
    base_width: int = 64
    width_divisor: int = 1
    last_stride: int = 1
    input_hw: tuple = (256, 128)
    num_classes: int = 751

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if len(self.stage_depths) != 4 or min(self.stage_depths) < 1:
            raise ValueError(f"stage_depths must be 4 positive integers, got {self.stage_depths}")
        if self.width_divisor < 1 or self.base_width % self.width_divisor:
            raise ValueError(f"base_width {self.base_width} not divisible by width_divisor {self.width_divisor}")
        if self.last_stride not in (1, 2):
            raise ValueError("last_stride must be 1 or 2")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def num_positions(self) -> int:
        return 1 + sum(self.stage_depths)

    @property
    def stem_width(self) -> int:
        return self.base_width // self.width_divisor

    def stage_mid_widths(self) -> list:
        scale = self.base_width / 64
        return [int(w * scale) // self.width_divisor for w in STAGE_WIDTHS]

    @property
    def feature_dim(self) -> int:
        return self.stage_mid_widths()[-1] * Bottleneck.expansion

    def with_(self, **changes) -> "BackboneConfig":
        data = asdict(self)
        data.update(changes)
        return BackboneConfig(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["input_hw"] = list(self.input_hw)
        return d


def desk_config(num_classes: int = 50, **changes) -> BackboneConfig:
    """Width / 8 and 64x32 inputs; all 17 sites preserved."""
    return BackboneConfig(width_divisor=8, input_hw=(64, 32), num_classes=num_classes).with_(**changes)


# ---------------------------------------------------------------------------
# insertion plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InsertionPlan:
    entries: tuple = ()

    def __init__(self, entries: Mapping[int, AttentionSpec] | Iterable = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        seen = {}
        for pos, spec in items:
            pos = int(pos)
            if pos in seen:
                raise ValueError(f"position {pos} appears twice in plan")
            seen[pos] = spec
        object.__setattr__(self, "entries", tuple(sorted(seen.items())))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def as_dict(self) -> dict:
        return dict(self.entries)

    @property
    def positions(self) -> tuple:
        return tuple(p for p, _ in self.entries)

    @property
    def kinds(self) -> tuple:
        return tuple(sorted({s.kind for _, s in self.entries}))

    def validate(self, cfg: BackboneConfig) -> None:
        for pos, _ in self.entries:
            if pos == 0:
                raise ValueError("position 0 (the raw input) is not an insertion site")
            if not 1 <= pos <= cfg.num_positions:
                raise ValueError(f"position {pos} outside 1..{cfg.num_positions}")

    def __str__(self) -> str:
        return format_plan(self)

    @classmethod
    def uniform(cls, kind: str, positions: Iterable[int], **spec_kw) -> "InsertionPlan":
        spec = AttentionSpec(kind, **spec_kw)
        return cls({p: spec for p in positions})


_PLAN_PART = re.compile(r"^([a-z]+)@(\d+(?:,\d+)*)$")


def parse_plan(text: str, r: int = 16) -> InsertionPlan:
    """Parse ``kind@p1,p2`` terms joined by ``+``; ``none`` or empty is the empty plan."""
    text = text.strip().lower().replace(" ", "")
    if text in ("", "none", "baseline"):
        return InsertionPlan()
    entries = []
    for part in text.split("+"):
        m = _PLAN_PART.match(part)
        if not m:
            raise ValueError(f"malformed plan term {part!r}; expected kind@p1,p2,...")
        kind = m.group(1)
        if kind not in KINDS:
            raise ValueError(f"unknown attention kind {kind!r} in plan; expected one of {KINDS}")
        spec = AttentionSpec(kind, r=r)
        entries.extend((int(p), spec) for p in m.group(2).split(","))
    return InsertionPlan(entries)


def format_plan(plan: InsertionPlan) -> str:
    if not plan.entries:
        return "none"
    by_kind: dict = {}
    for pos, spec in plan.entries:
        by_kind.setdefault(spec.kind, []).append(pos)
    order = sorted(by_kind, key=lambda k: (min(by_kind[k]), k))
    return "+".join(f"{k}@{','.join(str(p) for p in by_kind[k])}" for k in order)


# ---------------------------------------------------------------------------
# site geometry
# ---------------------------------------------------------------------------

def _stem_shape(cfg: BackboneConfig) -> tuple:
    h, w = cfg.input_hw
    h = ops.conv_output_size(h, 7, 2, 3)
    w = ops.conv_output_size(w, 7, 2, 3)
    h = ops.conv_output_size(h, 3, 2, 1)
    w = ops.conv_output_size(w, 3, 2, 1)
    return (cfg.stem_width, h, w)


def stage_strides(cfg: BackboneConfig) -> tuple:
    return (1, 2, 2, cfg.last_stride)


def enumerate_positions(cfg: BackboneConfig) -> list:
    """(position, channels, height, width) of the tensor at every insertion site."""
    c, h, w = _stem_shape(cfg)
    sites = [(1, c, h, w)]
    pos = 1
    for mid, depth, stride in zip(cfg.stage_mid_widths(), cfg.stage_depths, stage_strides(cfg)):
        for i in range(depth):
            s = stride if i == 0 else 1
            h = ops.conv_output_size(h, 3, s, 1)
            w = ops.conv_output_size(w, 3, s, 1)
            c = mid * Bottleneck.expansion
            pos += 1
            sites.append((pos, c, h, w))
    return sites


def position_stage(cfg: BackboneConfig, position: int) -> int:
    """0 for the stem site, 1..4 for sites following blocks of that stage."""
    if position == 1:
        return 0
    idx = position - 1
    for stage, depth in enumerate(cfg.stage_depths, start=1):
        if idx <= depth:
            return stage
        idx -= depth
    raise ValueError(f"position {position} outside 1..{cfg.num_positions}")


def stage_end_positions(cfg: BackboneConfig) -> tuple:
    ends, pos = [], 1
    for depth in cfg.stage_depths:
        pos += depth
        ends.append(pos)
    return tuple(ends)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model(Module):
    """Stem, four bottleneck stages with optional attention, GAP, BNNeck, classifier."""

    def __init__(self, cfg: BackboneConfig, plan: InsertionPlan, seed: int = 0):
        super().__init__()
        plan.validate(cfg)
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "plan", plan)
        object.__setattr__(self, "seed", int(seed))

        self.conv1 = Conv2d(3, cfg.stem_width, 7, stride=2, pad=3, seed=seed, name="stem.conv")
        self.bn1 = BatchNorm(cfg.stem_width)

        blocks = []
        cin = cfg.stem_width
        for s, (mid, depth, stride) in enumerate(zip(cfg.stage_mid_widths(), cfg.stage_depths, stage_strides(cfg)), 1):
            for i in range(depth):
                name = f"layer{s}.{i}"
                block = Bottleneck(cin, mid, stride if i == 0 else 1, downsample=(i == 0), seed=seed, name=name)
                self.add_module(name, block)
                blocks.append(block)
                cin = block.cout
        object.__setattr__(self, "blocks", blocks)

        shapes = {p: (c, h, w) for p, c, h, w in enumerate_positions(cfg)}
        sites = {}
        for pos, spec in plan.entries:
            c = shapes[pos][0]
            name = f"att{pos}"
            block = make_attention(spec, c, seed=seed, name=name)
            if spec.kind == "se" and pos > 1:
                blocks[pos - 2].attach_se(block)
            else:
                self.add_module(name, block)
                sites[pos] = block
        object.__setattr__(self, "sites", sites)

        d = cfg.feature_dim
        self.bnneck = BatchNorm(d, affine_bias=False)
        self.classifier = Linear(d, cfg.num_classes, bias=False, seed=seed, name="classifier", std=0.001)

        traced = self.trace_shapes()
        expected = [shapes[p] for p in sorted(shapes)]
        if traced != expected:
            raise DimensionError(f"layer shapes do not chain: traced {traced}, expected {expected}")

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def attention_blocks(self) -> dict:
        """position -> attention module, including SE blocks nested in residual blocks."""
        out = dict(self.sites)
        for i, block in enumerate(self.blocks):
            if block.se is not None:
                out[i + 2] = block.se
        return dict(sorted(out.items()))

    def trace_shapes(self) -> list:
        h, w = self.cfg.input_hw
        c, h, w = self.conv1.out_shape((3, h, w))
        h = ops.conv_output_size(h, 3, 2, 1)
        w = ops.conv_output_size(w, 3, 2, 1)
        shapes = [(c, h, w)]
        for block in self.blocks:
            if block.cin != shapes[-1][0]:
                raise DimensionError(f"block expects {block.cin} channels, receives {shapes[-1][0]}")
            shapes.append(block.out_shape(shapes[-1]))
        return shapes

    def stem(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(ops.relu(self.bn1(self.conv1(x))), 3, 2, 1)

    def backbone(self, x: Tensor, record: list | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected a B x 3 x H x W batch, got {x.shape}")
        x = self.stem(x)
        if record is not None:
            record.append(x.shape[1:])
        if 1 in self.sites:
            x = self.sites[1](x)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if record is not None:
                record.append(x.shape[1:])
            site = self.sites.get(i + 2)
            if site is not None:
                x = site(x)
        return x

    def pooled(self, x: Tensor) -> Tensor:
        out = self.backbone(x)
        b, c = out.shape[:2]
        return ops.global_avg_pool(out).reshape(b, c)

    def forward_features(self, x: Tensor) -> Tensor:
        return self.bnneck(self.pooled(x))

    def forward_logits(self, x: Tensor) -> Tensor:
        return self.classifier(self.forward_features(x))

    def forward_train(self, x: Tensor):
        """(pooled feature, BNNeck feature, logits) for one batch."""
        pooled = self.pooled(x)
        feat = self.bnneck(pooled)
        return pooled, feat, self.classifier(feat)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_features(x)

    def head_parameter_names(self) -> list:
        return [n for n, _ in self.named_parameters() if n.startswith("classifier.")]

    def reset_classifier(self, num_classes: int, seed: int) -> None:
        cfg = self.cfg.with_(num_classes=num_classes)
        object.__setattr__(self, "cfg", cfg)
        self.classifier = Linear(cfg.feature_dim, num_classes, bias=False, seed=seed,
                                 name="classifier", std=0.001)


def build_model(cfg: BackboneConfig, plan: InsertionPlan | None = None, seed: int = 0) -> Model:
    return Model(cfg, plan or InsertionPlan(), seed)


def build_resnet101_reference(cfg: BackboneConfig, seed: int = 0) -> Model:
    """Attention-free network with (3, 4, 23, 3) stages, otherwise as ``cfg``."""
    return Model(cfg.with_(stage_depths=RESNET101_DEPTHS), InsertionPlan(), seed)


def block_count(model: Model) -> int:
    return len(model.blocks)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _spec_to_dict(spec: AttentionSpec) -> dict:
    return {"kind": spec.kind, "r": spec.r, "inner_ratio": str(spec.inner_ratio), "scaled": spec.scaled}


def _spec_from_dict(d: dict) -> AttentionSpec:
    return AttentionSpec(d["kind"], r=int(d["r"]), inner_ratio=Fraction(d["inner_ratio"]), scaled=bool(d["scaled"]))


def save_checkpoint(model: Model, path) -> Path:
    """Write config, plan and every named array into an uncompressed ``.npz``."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "plan": [[pos, _spec_to_dict(spec)] for pos, spec in model.plan.entries],
        "seed": model.seed,
        "dtype": str(model.conv1.weight.dtype),
    }
    arrays = {f"state/{k}": v for k, v in model.state_dict().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
    cfg_d = meta["config"]
    cfg = BackboneConfig(**{**cfg_d, "stage_depths": tuple(cfg_d["stage_depths"]), "input_hw": tuple(cfg_d["input_hw"])})
    plan = InsertionPlan([(int(p), _spec_from_dict(s)) for p, s in meta["plan"]])
    from .engine import precision

    with precision(meta.get("dtype", "float32")):
        model = Model(cfg, plan, seed=int(meta["seed"]))
    model.load_state_dict(state)
    return model
