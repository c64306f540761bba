"""Feature extraction, distance matrices and single-shot mAP / CMC."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ReidDataset
from .engine import Tensor, no_grad

RESULT_SCHEMA = 1
CSV_COLUMNS = ("schema", "config_id", "mAP", "rank1", "rank5")
JUNK_ID = -1


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray
    per_query_ap: list
    valid_queries: list = field(default_factory=list)
    config_id: str = ""

    def rank(self, k: int) -> float:
        if k < 1:
            raise ValueError("ranks start at 1")
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        return {
            "schema": RESULT_SCHEMA,
            "config_id": self.config_id,
            "mAP": self.mAP,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "num_valid_queries": len(self.valid_queries),
            "cmc": [float(v) for v in self.cmc[:50]],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_row(self) -> dict:
        return {"schema": RESULT_SCHEMA, "config_id": self.config_id, "mAP": repr(float(self.mAP)),
                "rank1": repr(self.rank(1)), "rank5": repr(self.rank(5))}


def write_results_csv(results: Sequence[RetrievalResult], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.csv_row())


def read_results_csv(fh) -> list:
    rows = list(csv.DictReader(fh))
    for row in rows:
        if row.get("schema") != str(RESULT_SCHEMA):
            raise ValueError(f"unsupported result CSV schema {row.get('schema')!r}")
        for key in ("mAP", "rank1", "rank5"):
            row[key] = float(row[key])
    return rows


def extract_features(model, images, batch_size: int = 64) -> Tensor:
    """L2-normalized eval-mode features, one row per image.

    ``images`` is a normalized N x 3 x H x W array or a :class:`ReidDataset`.
    """
    if isinstance(images, ReidDataset):
        images = images.tensor(dtype=model.conv1.weight.dtype)
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    was_training = model.training
    model.eval()
    rows = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                rows.append(model.forward_features(Tensor(images[start:start + batch_size])).data)
    finally:
        model.train(was_training)
    if not rows:
        return Tensor(np.zeros((0, model.feature_dim), dtype=model.conv1.weight.dtype))
    feats = np.concatenate(rows)
    norms = np.sqrt(np.sum(feats * feats, axis=1, keepdims=True))
    return Tensor(feats / np.maximum(norms, np.finfo(feats.dtype).tiny))


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def distance_matrix(q, g, metric: str = "cosine") -> np.ndarray:
    """Q x G distances: ``1 - q g^T`` for unit rows, or Euclidean."""
    q, g = _arr(q), _arr(g)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature shapes {q.shape} and {g.shape} are incompatible")
    sim = q @ g.T
    if metric == "cosine":
        return 1.0 - sim
    if metric == "euclidean":
        sq = np.sum(q * q, axis=1)[:, None] + np.sum(g * g, axis=1)[None, :] - 2.0 * sim
        return np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def _average_precision(matches: np.ndarray) -> float:
    hits = np.flatnonzero(matches)
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return math.fsum(precision.tolist()) / len(hits)


def evaluate(dist, q_ids, q_cams, g_ids, g_cams, max_rank: int | None = None) -> RetrievalResult:
    """mAP and CMC with same-identity same-camera gallery entries removed.

    Ranking is by ascending distance with ties going to the lower gallery
    index. Junk gallery entries (id -1) are dropped. Queries without a
    remaining positive are skipped.
    """
    dist = _arr(dist)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq, ng = dist.shape
    if len(q_ids) != nq or len(q_cams) != nq or len(g_ids) != ng or len(g_cams) != ng:
        raise ValueError("id/camera labels do not match the distance matrix")
    depth = ng if max_rank is None else max_rank
    aps, valid, cmc = [], [], np.zeros(depth)
    for i in range(nq):
        order = np.argsort(dist[i], kind="stable")
        keep = ~(((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i])) | (g_ids[order] == JUNK_ID))
        matches = g_ids[order][keep] == q_ids[i]
        if not matches.any():
            continue
        aps.append(_average_precision(matches))
        valid.append(i)
        first = int(np.argmax(matches))
        if first < depth:
            cmc[first:] += 1
    if not valid:
        raise ValueError("no query has a valid positive in the gallery")
    return RetrievalResult(math.fsum(aps) / len(aps), cmc / len(valid), aps, valid)


def brute_force_ap_oracle(dist_row, flags) -> float:
    """Average precision by direct enumeration.

    ``flags[j]`` is 1 for a positive, 0 for a negative, -1 for an entry that
    must be ignored. Ties in distance go to the lower index.
    """
    row = [float(v) for v in dist_row]
    ranked = sorted(range(len(row)), key=lambda j: (row[j], j))
    precisions, hits, seen = [], 0, 0
    for j in ranked:
        if flags[j] == -1:
            continue
        seen += 1
        if flags[j] == 1:
            hits += 1
            precisions.append(hits / seen)
    if not precisions:
        raise ValueError("no positive entries")
    return math.fsum(precisions) / len(precisions)


def evaluate_model(model, dataset: ReidDataset, metric: str = "cosine", config_id: str = "",
                   batch_size: int = 64) -> RetrievalResult:
    q = dataset.split("query")
    g = dataset.split("gallery")
    if not set(q.pids.tolist()) & set(g.pids.tolist()):
        raise ValueError("query and gallery share no identity")
    qf = extract_features(model, q, batch_size)
    gf = extract_features(model, g, batch_size)
    res = evaluate(distance_matrix(qf, gf, metric), q.pids, q.cams, g.pids, g.cams)
    res.config_id = config_id
    return res
