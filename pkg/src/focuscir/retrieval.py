"""Gallery indexing, ranking and Recall@k evaluation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, QueryTriplet
from .model import Retriever


@dataclass
class GalleryIndex:
    image_ids: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.image_ids):
            raise ValueError("one embedding row per gallery id is required")
        if len(self.image_ids):
            norms = np.linalg.norm(self.embeddings, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("gallery rows must be L2-normalised")
        self._position = {iid: i for i, iid in enumerate(self.image_ids)}
        # Precomputed lexicographic rank of each id, used as the tie-break key.
        order = sorted(range(len(self.image_ids)), key=self.image_ids.__getitem__)
        self._id_rank = np.empty(len(self.image_ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.image_ids))

    def __len__(self) -> int:
        return len(self.image_ids)

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self._position[i] for i in ids], dtype=np.int64)


@dataclass
class EmbeddingCache:
    """Target-side embeddings keyed by (model fingerprint, image id), optionally persisted."""

    directory: Path | None = None
    model_calls: int = 0
    _rows: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def _path(self, fingerprint: str) -> Path | None:
        return None if self.directory is None else Path(self.directory) / f"{fingerprint[:32]}.npz"

    def _load(self, fingerprint: str) -> None:
        path = self._path(fingerprint)
        if path is None or not path.exists() or any(k[0] == fingerprint for k in self._rows):
            return
        with np.load(path, allow_pickle=False) as data:
            for iid, row in zip(data["ids"].tolist(), data["rows"]):
                self._rows[(fingerprint, iid)] = row

    def _save(self, fingerprint: str) -> None:
        path = self._path(fingerprint)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        items = sorted((k[1], v) for k, v in self._rows.items() if k[0] == fingerprint)
        tmp = path.with_name(f".{path.stem}.{os.getpid()}.tmp.npz")
        np.savez(tmp, ids=np.array([i for i, _ in items]), rows=np.stack([v for _, v in items]))
        os.replace(tmp, path)

    def get_many(self, fingerprint: str, ids: Sequence[str], compute) -> np.ndarray:
        self._load(fingerprint)
        todo = [i for i in dict.fromkeys(ids) if (fingerprint, i) not in self._rows]
        if todo:
            self.model_calls += 1
            for iid, row in zip(todo, compute(todo)):
                self._rows[(fingerprint, iid)] = row
            self._save(fingerprint)
        if not ids:
            return np.zeros((0, 0))
        return np.stack([self._rows[(fingerprint, i)] for i in ids])


def embed_gallery(manifest: DatasetManifest, split: str, retriever: Retriever,
                  cache: EmbeddingCache | None = None, category: str | None = None) -> GalleryIndex:
    ids = list(manifest.gallery(split, category))
    if not ids:
        return GalleryIndex([], np.zeros((0, retriever.cfg.D)))
    if cache is None:
        rows = retriever.target_embeddings(ids)
    else:
        rows = cache.get_many(retriever.model.fingerprint(), ids, retriever.target_embeddings)
    return GalleryIndex(ids, rows)


def order_by_score(scores: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ties broken by ascending id."""
    return np.lexsort((id_rank, -scores))


def rank_embedding(query: np.ndarray, index: GalleryIndex, candidates: Sequence[str] | None = None) -> list[str]:
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    if candidates is None:
        rows = np.arange(len(index))
    else:
        rows = index.rows(list(dict.fromkeys(candidates)))
    scores = index.embeddings[rows] @ q
    order = order_by_score(scores, index._id_rank[rows])
    return [index.image_ids[rows[i]] for i in order]


def rank(query: QueryTriplet, retriever: Retriever, index: GalleryIndex, subset_only: bool = False,
         embedding: np.ndarray | None = None) -> list[str]:
    if subset_only and query.subset_ids is None:
        raise ValueError(f"{query.query_id}: subset ranking needs subset_ids")
    if embedding is None:
        embedding = retriever.query_embeddings([query.ref_image_id], [query.mod_text])[0]
    return rank_embedding(embedding, index, query.subset_ids if subset_only else None)


def recall_at_k(rankings: Sequence[Sequence[str]], truths: Sequence[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be ≥ 1")
    if len(rankings) != len(truths) or not truths:
        raise ValueError("need one ranking per truth and at least one query")
    hits = sum(truth in list(ranking[:k]) for ranking, truth in zip(rankings, truths))
    return 100.0 * hits / len(truths)


KS = {"fashioniq": (10, 50), "shoes": (1, 10, 50), "cirr": (1, 5, 10, 50), "synthetic": (1, 5, 10, 50)}


@dataclass
class Evaluation:
    metrics: list[dict]
    rankings: dict[str, list[str]]


def evaluate(manifest: DatasetManifest, split: str, retriever: Retriever,
             cache: EmbeddingCache | None = None, keep_top: int = 50) -> Evaluation:
    """Recall metrics for one split, following the dataset's usual protocol."""
    kind = manifest.kind if manifest.kind in KS else "synthetic"
    queries = manifest.split(split)
    metrics: list[dict] = []
    rankings: dict[str, list[str]] = {}
    if not queries:
        return Evaluation(metrics, rankings)
    groups: dict[str | None, list[QueryTriplet]] = {}
    for q in queries:
        groups.setdefault(q.category if kind == "fashioniq" else None, []).append(q)
    embeddings = retriever.query_embeddings([q.ref_image_id for q in queries], [q.mod_text for q in queries])
    by_query = {q.query_id: e for q, e in zip(queries, embeddings)}
    for category, group in sorted(groups.items(), key=lambda kv: kv[0] or ""):
        index = embed_gallery(manifest, split, retriever, cache, category)
        full = [rank_embedding(by_query[q.query_id], index) for q in group]
        truths = [q.target_image_id for q in group]
        prefix = f"{category}/" if category else ""
        for k in KS[kind]:
            metrics.append({"metric": prefix + "R", "k": k, "value": recall_at_k(full, truths, k)})
        for q, r in zip(group, full):
            rankings[q.query_id] = r[:keep_top]
        if kind == "cirr" and all(q.subset_ids for q in group):
            subset = [rank_embedding(by_query[q.query_id], index, q.subset_ids) for q in group]
            for k in (1, 2, 3):
                metrics.append({"metric": "R_subset", "k": k, "value": recall_at_k(subset, truths, k)})
    metrics.extend(aggregate(metrics, kind))
    return Evaluation(metrics, rankings)


def composite_average(r_at_5: float, r_subset_at_1: float) -> float:
    return (r_at_5 + r_subset_at_1) / 2


def aggregate(metrics: list[dict], kind: str) -> list[dict]:
    """Dataset-level averages derived from per-k recalls."""
    value = {(m["metric"], m["k"]): m["value"] for m in metrics}
    out = []
    if kind == "fashioniq":
        cats = sorted({m["metric"].split("/")[0] for m in metrics if "/" in m["metric"]})
        for k in (10, 50):
            vals = [value[(f"{c}/R", k)] for c in cats if (f"{c}/R", k) in value]
            if vals:
                out.append({"metric": "avg/R", "k": k, "value": float(np.mean(vals))})
        both = [m["value"] for m in out]
        if len(both) == 2:
            out.append({"metric": "Avg", "k": None, "value": float(np.mean(both))})
    elif kind == "cirr":
        if ("R", 5) in value and ("R_subset", 1) in value:
            out.append({"metric": "Avg", "k": None,
                        "value": composite_average(value[("R", 5)], value[("R_subset", 1)])})
    else:
        vals = [value[("R", k)] for k in KS[kind] if ("R", k) in value]
        if vals:
            out.append({"metric": "Avg", "k": None, "value": float(np.mean(vals))})
    return out


def write_rankings(rankings: dict[str, list[str]], path: str | os.PathLike, top_k: int = 10) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(rankings):
            fh.write(json.dumps({"query_id": qid, "top_k": rankings[qid][:top_k]}) + "\n")
    return path
