"""Published reference figures used to annotate reports and plots.

These come from full-size training on Market-1501 and a private robotic
dataset, with latency measured on an embedded GPU in 16-bit precision. They
are never compared against host measurements.
"""

from __future__ import annotations

from dataclasses import dataclass

# ms per batch of 16 on a Jetson AGX Xavier
XAVIER_MS_BASELINE = 36.917
XAVIER_MS_CNL_6_8_14 = 38.623
XAVIER_MS_RESNET101 = 53.454

RESNET101_MAP = 0.8707
RESNET101_MAP_STD = 0.0006


@dataclass(frozen=True)
class PublishedRow:
    plan: str
    loss: str
    map_mean: float
    map_std: float
    batches_per_sec: float

    @property
    def label(self) -> str:
        return f"{self.plan} ({self.loss})"


# multi-position results on Market-1501; "agw" is a non-local block
MARKET_COMBINATIONS = (
    PublishedRow("hac@8", "ce", 0.8733, 0.0006, 25.17),
    PublishedRow("agw@7", "ce", 0.8733, 0.0012, 22.59),
    PublishedRow("cnl@8", "ce", 0.8755, 0.0007, 26.70),
    PublishedRow("hac@8,14", "ce", 0.8773, 0.0006, 25.06),
    PublishedRow("agw@8,14", "ce", 0.8805, 0.0014, 21.09),
    PublishedRow("cnl@8,14", "ce", 0.8788, 0.0007, 25.91),
    PublishedRow("hac@6,8,14", "ce", 0.8780, 0.0010, 24.93),
    PublishedRow("agw@6,8,14", "ce", 0.8815, 0.0008, 19.88),
    PublishedRow("cnl@6,8,14", "ce", 0.8806, 0.0007, 25.89),
    PublishedRow("hac@6,8,14", "circle", 0.8897, 0.0012, 24.93),
    PublishedRow("agw@6,8,14", "circle", 0.8916, 0.0006, 19.88),
    PublishedRow("cnl@6,8,14", "circle", 0.8916, 0.0005, 25.89),
)

# robotic-dataset transfer: (pretraining, fine-tuned, attention plan, mAP)
TRANSFER_ROWS = (
    ("market1501", False, "none", 0.6630),
    ("market1501", False, "cnl@6,8,14", 0.6684),
    ("market1501", True, "none", 0.7551),
    ("market1501", True, "cnl@6,8,14", 0.7658),
)


def published_row(plan: str, loss: str) -> PublishedRow:
    for row in MARKET_COMBINATIONS:
        if row.plan == plan and row.loss == loss:
            return row
    raise KeyError(f"no published row for {plan} with {loss}")
