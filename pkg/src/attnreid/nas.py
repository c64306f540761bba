"""Progressive reduction of the attention design space.

The search runs in three passes. First every (kind, position) pair is scored
on its own next to two anchors: the attention-free baseline and a deeper
attention-free network. Then pairs that are slower than the deep anchor
without beating it, or worse than the baseline, are dropped. Finally
multi-block plans over the survivors are enumerated in a fixed priority order
and scored under an optional budget.

Scoring is delegated to a context object with two methods::

    score(plan, seed, deep=False, lr=None) -> mAP
    cost(plan, deep=False) -> CostReport

so the same pipeline drives real desk-scale training and synthetic
objectives.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backbone import (
    BackboneConfig,
    InsertionPlan,
    build_model,
    build_resnet101_reference,
    enumerate_positions,
    format_plan,
    parse_plan,
    position_stage,
    stage_end_positions,
)
from .blocks import KINDS, AttentionSpec, make_attention
from .cost import CostReport, LayerCost, count_macs, modeled_speed, pareto_filter
from .engine import precision

TRIALS_SCHEMA = 1
TRIAL_COLUMNS = ("schema", "key", "anchor", "plan", "loss", "lr", "seeds", "map_values", "map_mean",
                 "map_std", "macs", "params", "batches_per_sec", "ms_per_batch")
ANCHORS = ("baseline", "deep")


@dataclass
class TrialResult:
    plan: InsertionPlan
    loss: str
    seeds: list
    map_values: list
    cost: CostReport
    anchor: str = ""
    lr: Optional[float] = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("a trial needs at least one seed")
        if len(self.seeds) != len(self.map_values):
            raise ValueError("one mAP value per seed expected")

    @property
    def map_mean(self) -> float:
        return statistics.fmean(self.map_values)

    @property
    def map_std(self) -> float:
        """Sample standard deviation across seeds; 0 for a single run."""
        return statistics.stdev(self.map_values) if len(self.map_values) > 1 else 0.0

    @property
    def speed(self) -> Optional[float]:
        return self.cost.batches_per_second

    @property
    def key(self) -> str:
        return trial_key(self.plan, self.loss, self.anchor)

    @property
    def positions(self) -> tuple:
        return self.plan.positions

    @property
    def kinds(self) -> tuple:
        return self.plan.kinds


def trial_key(plan: InsertionPlan | None, loss: str, anchor: str = "") -> str:
    return f"{anchor or format_plan(plan)}|{loss}"


@dataclass(frozen=True)
class SearchSpace:
    kinds: tuple = KINDS
    positions: tuple = ()
    max_blocks: int = 3
    seeds: tuple = (0, 1, 2)
    r: int = 16
    # surviving (kind, position) pairs; None means the full product
    candidates: Optional[frozenset] = None
    excluded: tuple = ()

    def __post_init__(self):
        if self.max_blocks < 1:
            raise ValueError("max_blocks must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed per trial is required")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown attention kind {k!r}")

    @classmethod
    def full(cls, cfg: BackboneConfig, **kw) -> "SearchSpace":
        return cls(positions=tuple(range(1, cfg.num_positions + 1)), **kw)

    def pairs(self) -> list:
        if self.candidates is not None:
            return sorted(self.candidates, key=lambda kp: (KINDS.index(kp[0]), kp[1]))
        return [(k, p) for k in self.kinds for p in self.positions]

    @property
    def empty(self) -> bool:
        return not self.pairs()


# ---------------------------------------------------------------------------
# contexts
# ---------------------------------------------------------------------------

class CostModelMixin:
    """Analytic cost with a modeled speed, cached per plan."""

    cfg: BackboneConfig
    batch_size: int = 16

    def _cost_cache(self) -> dict:
        if not hasattr(self, "_costs"):
            self._costs = {}
        return self._costs

    def cost(self, plan: InsertionPlan | None, deep: bool = False) -> CostReport:
        key = "deep" if deep else format_plan(plan)
        cache = self._cost_cache()
        if key not in cache:
            with precision("float32"):
                model = build_resnet101_reference(self.cfg) if deep else build_model(self.cfg, plan)
            cache[key] = modeled_speed(count_macs(model, config_id=key), self.batch_size)
        rep = cache[key]
        return CostReport(per_layer=list(rep.per_layer), batches_per_second=rep.batches_per_second,
                          ms_per_batch=rep.ms_per_batch, ms_std=rep.ms_std, batch_size=rep.batch_size,
                          machine=rep.machine, threads=rep.threads, config_id=rep.config_id)


class FunctionContext(CostModelMixin):
    """Scores plans with ``fn(plan, seed)``; ``plan`` is None for the deep anchor."""

    def __init__(self, cfg: BackboneConfig, fn: Callable, loss: str = "ce", batch_size: int = 16):
        self.cfg = cfg
        self.fn = fn
        self.loss = loss
        self.batch_size = batch_size
        self.lr_grid = (None,)
        self.calls = []

    def score(self, plan, seed: int, deep: bool = False, lr=None) -> float:
        self.calls.append(("deep" if deep else format_plan(plan), seed))
        return float(self.fn(None if deep else plan, seed))


class TrainEvalContext(CostModelMixin):
    """Trains a desk model per (plan, seed) and reports query/gallery mAP."""

    def __init__(self, dataset, cfg: BackboneConfig, train_cfg, lr_grid: Sequence[float] = (),
                 batch_size: int = 16, dtype: str = "float32"):
        self.dataset = dataset
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.loss = train_cfg.loss
        self.lr_grid = tuple(lr_grid) or (None,)
        self.batch_size = batch_size
        self.dtype = dtype

    def score(self, plan, seed: int, deep: bool = False, lr=None) -> float:
        from .retrieval import evaluate_model
        from .training import train

        tcfg = self.train_cfg.with_(seed=seed)
        if lr is not None:
            tcfg = tcfg.with_(base_lr=lr)
        with precision(self.dtype):
            model = build_resnet101_reference(self.cfg, seed) if deep else build_model(self.cfg, plan, seed)
            train(model, self.dataset, tcfg)
            return evaluate_model(model, self.dataset).mAP


def run_trial(ctx, plan: InsertionPlan | None, seeds: Sequence[int], anchor: str = "") -> TrialResult:
    """Score one plan over ``seeds``, keeping the learning rate with the best mean."""
    deep = anchor == "deep"
    best = None
    for lr in getattr(ctx, "lr_grid", (None,)):
        values = [ctx.score(plan, s, deep=deep, lr=lr) for s in seeds]
        if best is None or statistics.fmean(values) > statistics.fmean(best[1]):
            best = (lr, values)
    cost = ctx.cost(plan, deep=deep)
    if plan is None:
        plan = InsertionPlan()
    cost.config_id = trial_key(plan, ctx.loss, anchor)
    return TrialResult(plan, ctx.loss, list(seeds), best[1], cost, anchor, best[0])


def _run_all(ctx, jobs: list, workers: int, done: dict, on_result: Callable | None) -> list:
    """Run (plan, anchor) jobs, reusing ``done`` by key; output follows job order."""
    out: dict = {}
    todo = []
    for plan, anchor, seeds in jobs:
        key = trial_key(plan, ctx.loss, anchor)
        if key in done:
            out[key] = done[key]
        else:
            todo.append((key, plan, anchor, seeds))
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(key, pool.submit(run_trial, ctx, plan, seeds, anchor)) for key, plan, anchor, seeds in todo]
            for key, fut in futures:
                out[key] = fut.result()
                if on_result:
                    on_result(out[key])
    else:
        for key, plan, anchor, seeds in todo:
            out[key] = run_trial(ctx, plan, seeds, anchor)
            if on_result:
                on_result(out[key])
    return [out[trial_key(plan, ctx.loss, anchor)] for plan, anchor, _ in jobs]


# ---------------------------------------------------------------------------
# pass 1: single positions
# ---------------------------------------------------------------------------

def single_plan(cfg: BackboneConfig, kind: str, position: int, r: int = 16) -> InsertionPlan:
    """One block at ``position``; r is lowered to a divisor of narrow widths."""
    channels = {p: c for p, c, _, _ in enumerate_positions(cfg)}
    if position not in channels:
        raise ValueError(f"position {position} outside 1..{cfg.num_positions}")
    return InsertionPlan({position: AttentionSpec(kind, r=r).fit(channels[position])})


def attention_macs(trial: TrialResult, baseline: TrialResult) -> int:
    return trial.cost.total_macs - baseline.cost.total_macs


def check_position_invariance(trials: Sequence[TrialResult], baseline: TrialResult, cfg: BackboneConfig) -> None:
    """Added MACs of a single block must depend only on kind and tensor shape.

    Each trial's model-level difference is also cross-checked against the
    block counted on its own.
    """
    shapes = {p: (c, h, w) for p, c, h, w in enumerate_positions(cfg)}
    by_shape: dict = {}
    for t in trials:
        if t.anchor or len(t.plan) != 1:
            continue
        (pos, spec), = t.plan.entries
        added = attention_macs(t, baseline)
        alone = count_macs(make_attention(spec, shapes[pos][0]), shapes[pos]).total_macs
        if added != alone:
            raise RuntimeError(f"{t.key}: model adds {added} MACs but the block alone costs {alone}")
        ref = by_shape.setdefault((spec, shapes[pos]), added)
        if ref != added:
            raise RuntimeError(f"{t.key}: MACs differ from another site with shape {shapes[pos]}")


def sweep_single_positions(space: SearchSpace, ctx, workers: int = 1, done: dict | None = None,
                           on_result: Callable | None = None) -> list:
    """Anchors first (baseline, deep), then one trial per (kind, position)."""
    seeds = list(space.seeds)
    jobs = [(InsertionPlan(), "baseline", seeds), (None, "deep", seeds)]
    jobs += [(single_plan(ctx.cfg, k, p, space.r), "", seeds) for k, p in space.pairs()]
    trials = _run_all(ctx, jobs, workers, done or {}, on_result)
    check_position_invariance(trials[2:], trials[0], ctx.cfg)
    return trials


def split_anchors(trials: Iterable[TrialResult]) -> tuple:
    """(baseline anchor, deep anchor, the remaining trials)."""
    base = deep = None
    rest = []
    for t in trials:
        if t.anchor == "baseline":
            base = t
        elif t.anchor == "deep":
            deep = t
        else:
            rest.append(t)
    if base is None or deep is None:
        raise ValueError("both the baseline and the deep anchor trials are required")
    return base, deep, rest


# ---------------------------------------------------------------------------
# pass 2: pruning
# ---------------------------------------------------------------------------

def _dominates(a: TrialResult, b: TrialResult) -> bool:
    return (a.map_mean >= b.map_mean and a.speed >= b.speed
            and (a.map_mean > b.map_mean or a.speed > b.speed))


def prune_design_space(trials: Sequence[TrialResult], anchors: tuple | None = None,
                       space: SearchSpace | None = None) -> SearchSpace:
    """Surviving single-block (kind, position) pairs.

    A trial is dropped when it is slower than the deep anchor and not more
    accurate, or less accurate than the baseline. A kind is dropped outright
    when, at every position where it survives, another surviving kind is at
    least as fast and as accurate (and better in one of the two).
    """
    if anchors is None:
        base, deep, singles = split_anchors(trials)
    else:
        base, deep = anchors
        singles = [t for t in trials if not t.anchor]
    singles = [t for t in singles if len(t.plan) == 1]
    kept, rejected = pareto_filter(singles, base, deep)
    at: dict = {}
    for t in kept:
        at.setdefault(t.positions[0], {})[t.kinds[0]] = t
    dominated = set()
    for kind in {t.kinds[0] for t in kept}:
        mine = [(p, by_kind[kind]) for p, by_kind in at.items() if kind in by_kind]
        if all(any(_dominates(other, t) for k, other in at[p].items() if k != kind) for p, t in mine):
            dominated.add(kind)
    survivors = frozenset((t.kinds[0], t.positions[0]) for t in kept if t.kinds[0] not in dominated)
    excluded = tuple(t.key for t in rejected) + tuple(t.key for t in kept if t.kinds[0] in dominated)
    base_space = space or SearchSpace()
    return SearchSpace(
        kinds=tuple(k for k in KINDS if any(k == kk for kk, _ in survivors)),
        positions=tuple(sorted({p for _, p in survivors})),
        max_blocks=base_space.max_blocks,
        seeds=base_space.seeds,
        r=base_space.r,
        candidates=survivors,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# pass 3: combinations
# ---------------------------------------------------------------------------

def min_pairwise_distance(positions: Sequence[int]) -> int:
    ps = sorted(positions)
    return min(b - a for a, b in zip(ps, ps[1:])) if len(ps) > 1 else 0


def mean_pairwise_distance(positions: Sequence[int]) -> float:
    pairs = list(itertools.combinations(sorted(positions), 2))
    return statistics.fmean(b - a for a, b in pairs) if pairs else 0.0


def combination_priority(assignment: Sequence[tuple], cfg: BackboneConfig, single_map: dict) -> tuple:
    """Sort key for a plan given as (kind, position) pairs; smaller runs first.

    Fewer blocks first, then more stage-end positions, more distinct stages,
    larger minimum gap, higher summed single-position mAP.
    """
    positions = sorted(p for _, p in assignment)
    ends = set(stage_end_positions(cfg))
    stages = {position_stage(cfg, p) for p in positions}
    kinds = sorted({k for k, _ in assignment})
    gain = math.fsum(single_map.get((k, p), 0.0) for k, p in assignment)
    return (len(positions), len(kinds) > 1, -sum(p in ends for p in positions), -len(stages),
            -min_pairwise_distance(positions), -gain, tuple(positions),
            tuple(KINDS.index(k) for k, _ in sorted(assignment, key=lambda kp: kp[1])))


def enumerate_combinations(space: SearchSpace, cfg: BackboneConfig, single_map: dict | None = None,
                           mixed: bool = False) -> list:
    """Plans of 2..max_blocks blocks over surviving pairs, in priority order.

    Without ``mixed`` every plan uses a single kind; with it, plans mixing
    kinds across positions are added.
    """
    single_map = single_map or {}
    by_pos: dict = {}
    for k, p in space.pairs():
        by_pos.setdefault(p, []).append(k)
    positions = sorted(by_pos)
    seen, plans = set(), []
    for size in range(2, space.max_blocks + 1):
        for combo in itertools.combinations(positions, size):
            for kinds in itertools.product(*(by_pos[p] for p in combo)):
                if not mixed and len(set(kinds)) > 1:
                    continue
                assignment = tuple(zip(kinds, combo))
                if assignment not in seen:
                    seen.add(assignment)
                    plans.append(assignment)
    plans.sort(key=lambda a: combination_priority(a, cfg, single_map))
    return plans


def assignment_plan(assignment: Sequence[tuple], cfg: BackboneConfig, r: int = 16) -> InsertionPlan:
    channels = {p: c for p, c, _, _ in enumerate_positions(cfg)}
    return InsertionPlan({p: AttentionSpec(k, r=r).fit(channels[p]) for k, p in assignment})


def rank_trials(trials: Iterable[TrialResult]) -> list:
    """Best first: higher mean mAP, then higher speed, then key."""
    return sorted(trials, key=lambda t: (-t.map_mean, -(t.speed or 0.0), t.key))


def search_combinations(space: SearchSpace, ctx, singles: Sequence[TrialResult] = (), budget: int | None = None,
                        mixed: bool = False, workers: int = 1, done: dict | None = None,
                        on_result: Callable | None = None, include_singles: bool = True) -> list:
    """Score combination plans in priority order and rank them.

    At most ``budget`` combinations are trained. Surviving single-block trials
    from ``singles`` join the ranking unless ``include_singles`` is false.
    """
    if budget is not None and budget < 0:
        raise ValueError("budget must be non-negative")
    survivors = set(space.pairs())
    single_map = {(t.kinds[0], t.positions[0]): t.map_mean for t in singles
                  if not t.anchor and len(t.plan) == 1}
    plans = enumerate_combinations(space, ctx.cfg, single_map, mixed)
    if budget is not None:
        plans = plans[:budget]
    jobs = [(assignment_plan(a, ctx.cfg, space.r), "", list(space.seeds)) for a in plans]
    combos = _run_all(ctx, jobs, workers, done or {}, on_result)
    pool = list(combos)
    if include_singles:
        pool += [t for t in singles if not t.anchor and len(t.plan) == 1
                 and (t.kinds[0], t.positions[0]) in survivors]
    return rank_trials(pool)


# ---------------------------------------------------------------------------
# rules report
# ---------------------------------------------------------------------------

def pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    if len(xs) != len(ys) or len(xs) < 3:
        return None
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0.0:
        return None
    return float(dx @ dy) / den


@dataclass
class RulesReport:
    stage_end: dict = field(default_factory=dict)
    distance: dict = field(default_factory=dict)
    mixing: dict = field(default_factory=dict)
    points: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.missing)

    def to_dict(self) -> dict:
        return {"schema": TRIALS_SCHEMA, "partial": self.partial, "missing": self.missing,
                "rule1_stage_end": self.stage_end, "rule2_distance": self.distance,
                "rule3_mixing": self.mixing, "points": self.points}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [f"rules report{' (partial: ' + ', '.join(self.missing) + ')' if self.partial else ''}"]
        s = self.stage_end
        if s:
            lines.append("rule 1: stage-end positions")
            for kind, row in sorted(s.get("per_kind", {}).items()):
                lines.append(f"  {kind}: stage-end mean {_f(row['end_mean'])}, interior mean "
                             f"{_f(row['interior_mean'])}, gap {_f(row['gap'])}")
            lines.append(f"  overall gap {_f(s.get('gap'))}")
            for stage, best in sorted(s.get("best_per_stage", {}).items()):
                lines.append(f"  stage {stage}: best {best['key']} mAP {_f(best['mAP'])}")
        d = self.distance
        if d:
            lines.append(f"rule 2: pearson(mean pairwise distance, mAP) = {_f(d.get('pearson'))} over {d.get('n', 0)} plans")
        m = self.mixing
        if m:
            lines.append("rule 3: mixed vs single-kind combinations")
            for label in ("single", "mixed"):
                row = m.get(label)
                if row:
                    lines.append(f"  {label}: n={row['n']} best mAP {_f(row['best_map'])} mean mAP {_f(row['mean_map'])} "
                                 f"mean MACs {row['mean_macs']:.0f} mean speed {_f(row['mean_speed'])}")
        return "\n".join(lines) + "\n"


def _f(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _mean(values) -> Optional[float]:
    values = list(values)
    return statistics.fmean(values) if values else None


def derive_rules_report(trials: Sequence[TrialResult], cfg: BackboneConfig) -> RulesReport:
    """Quantitative evidence for the three placement rules.

    1. stage-end versus interior single-position mAP, and the best position
       within each stage;
    2. Pearson correlation between mean pairwise position distance and mAP
       over multi-block plans;
    3. mixed-kind versus single-kind combinations with their cost.
    """
    rep = RulesReport()
    rep.points = [{"key": t.key, "mAP": t.map_mean, "mAP_std": t.map_std, "speed": t.speed,
                   "anchor": t.anchor} for t in trials]
    singles = [t for t in trials if not t.anchor and len(t.plan) == 1]
    combos = [t for t in trials if not t.anchor and len(t.plan) > 1]
    ends = set(stage_end_positions(cfg))

    if singles:
        per_kind = {}
        for kind in sorted({t.kinds[0] for t in singles}):
            mine = [t for t in singles if t.kinds[0] == kind]
            em = _mean(t.map_mean for t in mine if t.positions[0] in ends)
            im = _mean(t.map_mean for t in mine if t.positions[0] not in ends)
            per_kind[kind] = {"end_mean": em, "interior_mean": im,
                              "gap": None if em is None or im is None else em - im}
        em = _mean(t.map_mean for t in singles if t.positions[0] in ends)
        im = _mean(t.map_mean for t in singles if t.positions[0] not in ends)
        best = {}
        for t in rank_trials(singles):
            stage = position_stage(cfg, t.positions[0])
            best.setdefault(stage, {"key": t.key, "position": t.positions[0], "mAP": t.map_mean})
        rep.stage_end = {"stage_end_positions": sorted(ends), "per_kind": per_kind,
                         "end_mean": em, "interior_mean": im,
                         "gap": None if em is None or im is None else em - im,
                         "best_per_stage": {str(k): v for k, v in sorted(best.items())}}
        if em is None or im is None:
            rep.missing.append("rule1")
    else:
        rep.missing.append("rule1")

    xs = [mean_pairwise_distance(t.positions) for t in combos]
    ys = [t.map_mean for t in combos]
    r = pearson(xs, ys)
    rep.distance = {"n": len(combos), "pearson": r,
                    "pairs": [[t.key, x, y] for t, x, y in zip(combos, xs, ys)]}
    if r is None:
        rep.missing.append("rule2")

    groups = {"single": [t for t in combos if len(t.kinds) == 1], "mixed": [t for t in combos if len(t.kinds) > 1]}
    for label, group in groups.items():
        if group:
            rep.mixing[label] = {
                "n": len(group),
                "best_map": max(t.map_mean for t in group),
                "mean_map": statistics.fmean(t.map_mean for t in group),
                "mean_macs": statistics.fmean(t.cost.total_macs for t in group),
                "mean_speed": _mean(t.speed for t in group if t.speed is not None),
            }
    if not groups["single"] or not groups["mixed"]:
        rep.missing.append("rule3")
    return rep


# ---------------------------------------------------------------------------
# trials.csv
# ---------------------------------------------------------------------------

def _num(v) -> str:
    return "" if v is None else repr(float(v))


def trial_row(t: TrialResult) -> dict:
    return {
        "schema": TRIALS_SCHEMA,
        "key": t.key,
        "anchor": t.anchor,
        "plan": format_plan(t.plan),
        "loss": t.loss,
        "lr": _num(t.lr),
        "seeds": ";".join(str(s) for s in t.seeds),
        "map_values": ";".join(repr(float(v)) for v in t.map_values),
        "map_mean": repr(t.map_mean),
        "map_std": repr(t.map_std),
        "macs": t.cost.total_macs,
        "params": t.cost.total_params,
        "batches_per_sec": _num(t.cost.batches_per_second),
        "ms_per_batch": _num(t.cost.ms_per_batch),
    }


def write_trials_csv(trials: Iterable[TrialResult], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=TRIAL_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for t in trials:
        writer.writerow(trial_row(t))


def read_trials_csv(fh, r: int = 16) -> list:
    """Trials from CSV; costs come back as a single aggregate layer."""
    out = []
    for i, row in enumerate(csv.DictReader(fh), start=2):
        if row.get("schema") != str(TRIALS_SCHEMA):
            raise ValueError(f"line {i}: unsupported trials schema {row.get('schema')!r}")
        anchor = row["anchor"]
        plan = InsertionPlan() if anchor else parse_plan(row["plan"], r=r)
        cost = CostReport(per_layer=[LayerCost("total", int(row["macs"]), int(row["params"]))],
                          config_id=row["key"])
        if row["ms_per_batch"]:
            cost.set_timing(float(row["ms_per_batch"]))
            cost.batches_per_second = float(row["batches_per_sec"])
        t = TrialResult(plan, row["loss"], [int(s) for s in row["seeds"].split(";")],
                        [float(v) for v in row["map_values"].split(";")], cost, anchor,
                        float(row["lr"]) if row["lr"] else None)
        out.append(t)
    return out


def fit_plan(plan: InsertionPlan, cfg: BackboneConfig) -> InsertionPlan:
    """Lower each block's r to a divisor of the width at its site."""
    channels = {p: c for p, c, _, _ in enumerate_positions(cfg)}
    plan.validate(cfg)
    return InsertionPlan((p, s.fit(channels[p])) for p, s in plan.entries)
