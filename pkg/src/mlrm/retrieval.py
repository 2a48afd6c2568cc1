"""Embedding tables, exact top-k retrieval, recall slicing and BM25.

Search is exact by design: pools at this scale fit in memory and exact
rankings keep every comparison reproducible. Scores are computed in
float64 from the stored float32 vectors, ties always break toward the
smaller note id, and the query note never ranks in its own list.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .data import Pair
from .errors import ConfigError, DataError, FormatError, NumericError
from .model import ModelConfig, embed_notes
from .notes import Note
from .prompting import Vocab, join_topics, length_class, tokenize

MAGIC = b"MLRMEMB1"

SLICES = ("all", "short_query", "short_target", "long_query", "long_target")

BM25_K1 = 1.2
BM25_B = 0.75


@dataclass
class EmbeddingTable:
    ids: np.ndarray        # [n] int64, unique
    vectors: np.ndarray    # [n, dim] float32, unit rows
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.ids.shape != (self.vectors.shape[0],):
            raise DataError(f"table shape mismatch: {self.ids.shape} ids for "
                            f"{self.vectors.shape} vectors")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("embedding table has duplicate note ids")
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, note_id: int) -> bool:
        return int(note_id) in self._row

    def vector(self, note_id: int) -> np.ndarray:
        try:
            return self.vectors[self._row[int(note_id)]]
        except KeyError:
            raise DataError(f"note id {note_id} is not in the embedding table") from None


def build_table(params, cfg: ModelConfig, vocab: Vocab, notes: list[Note],
                modality: str = "multimodal", *, batch_size: int = 32,
                threads: int = 1, image_cache: dict | None = None,
                provenance: dict | None = None) -> EmbeddingTable:
    """Embed every note and L2-normalize; row order follows ``notes``.

    Chunks are fixed up front so the result is identical whether they
    are embedded serially or on a thread pool.
    """
    if not notes:
        raise DataError("cannot build an embedding table from zero notes")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    chunks = [notes[i:i + batch_size] for i in range(0, len(notes), batch_size)]

    def embed_chunk(chunk):
        with no_grad():
            reps = embed_notes(params, cfg, vocab, chunk, modality=modality,
                               image_cache=image_cache)
        return reps.out_multimodal.data

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(embed_chunk, chunks))
    else:
        blocks = [embed_chunk(c) for c in chunks]
    raw = np.concatenate(blocks, axis=0)

    norms = np.linalg.norm(raw, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NumericError(f"note {notes[zero[0]].id} embeds to the zero vector")
    unit = (raw / norms[:, None]).astype(np.float32)
    prov = {"mode": cfg.mode, "modality": modality}
    prov.update(provenance or {})
    return EmbeddingTable(ids=np.asarray([n.id for n in notes], dtype=np.int64),
                          vectors=unit, provenance=prov)


def save_table(path, table: EmbeddingTable) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(table), table.dim))
        for row in range(len(table)):
            fh.write(struct.pack("<Q", int(table.ids[row])))
            fh.write(np.ascontiguousarray(table.vectors[row], dtype="<f4").tobytes())


def load_table(path, provenance: dict | None = None) -> EmbeddingTable:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise FormatError(f"{path}: not an embedding table (bad magic)")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated header")
        count, dim = struct.unpack("<II", header)
        row_bytes = 8 + 4 * dim
        blob = fh.read(count * row_bytes)
        if len(blob) != count * row_bytes:
            raise FormatError(f"{path}: truncated table body")
    ids = np.empty(count, dtype=np.int64)
    vectors = np.empty((count, dim), dtype=np.float32)
    for row in range(count):
        base = row * row_bytes
        (ids[row],) = struct.unpack_from("<Q", blob, base)
        vectors[row] = np.frombuffer(blob, dtype="<f4", count=dim, offset=base + 8)
    return EmbeddingTable(ids=ids, vectors=vectors, provenance=provenance or {})


# ---------------------------------------------------------------------------
# Ranking


def _ranked_ids(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # lexsort's last key is primary: descending score, then ascending id
    return ids[np.lexsort((ids, -scores))]


def topk(query_vec: np.ndarray, table: EmbeddingTable, k: int,
         exclude: int | None = None) -> np.ndarray:
    """Exact cosine top-k over the pool, the query's own id excluded."""
    pool = len(table) - (1 if exclude is not None and exclude in table else 0)
    if not 1 <= k <= pool:
        raise ConfigError(f"k={k} out of range for a pool of {pool} candidates")
    q = np.asarray(query_vec, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise NumericError("zero-norm query vector")
    scores = table.vectors.astype(np.float64) @ (q / qn)
    keep = np.ones(len(table), dtype=bool)
    if exclude is not None and exclude in table:
        keep[table._row[int(exclude)]] = False
    return _ranked_ids(scores[keep], table.ids[keep])[:k]


def target_rank(table: EmbeddingTable, query_id: int, target_id: int) -> int:
    """1-based rank of the target in the query's ranking of the pool."""
    if query_id == target_id:
        raise DataError("a note cannot be its own retrieval target")
    q = table.vector(query_id).astype(np.float64)
    t_row = table._row.get(int(target_id))
    if t_row is None:
        raise DataError(f"note id {target_id} is not in the embedding table")
    scores = table.vectors.astype(np.float64) @ q
    s_t = scores[t_row]
    better = (scores > s_t) | ((scores == s_t) & (table.ids < target_id))
    better[t_row] = False
    better[table._row[int(query_id)]] = False
    return int(np.count_nonzero(better)) + 1


def recall_at_k(table: EmbeddingTable, pairs: list[Pair], k: int) -> float:
    """Fraction of pairs whose target ranks within the top k."""
    if not pairs:
        raise DataError("recall over an empty pair list is undefined")
    hits = sum(1 for p in pairs if target_rank(table, p.query, p.related) <= k)
    return hits / len(pairs)


def random_baseline(k: int, pool_size: int) -> float:
    """Chance-level recall: k uniform guesses out of pool-1 candidates."""
    if pool_size < 2:
        raise ConfigError("pool must contain at least two notes")
    return k / (pool_size - 1)


# ---------------------------------------------------------------------------
# Pair slices


def slice_pairs(pairs: list[Pair], notes_by_id: dict[int, Note], kind: str) -> list[Pair]:
    if kind == "all":
        return list(pairs)
    try:
        side, _ = kind.split("_")
    except ValueError:
        raise ConfigError(f"unknown slice {kind!r}") from None
    if kind not in SLICES:
        raise ConfigError(f"unknown slice {kind!r}, expected one of {SLICES}")

    def wanted(p: Pair) -> bool:
        note = notes_by_id[p.query if kind.endswith("query") else p.related]
        return length_class(note) == side

    return [p for p in pairs if wanted(p)]


# ---------------------------------------------------------------------------
# BM25 baseline


class BM25Index:
    """Okapi BM25 over the concatenated text fields of a note pool."""

    def __init__(self, notes: list[Note], k1: float = BM25_K1, b: float = BM25_B):
        if not notes:
            raise DataError("cannot index an empty pool")
        self.k1 = k1
        self.b = b
        self.ids = np.asarray(sorted(n.id for n in notes), dtype=np.int64)
        by_id = {n.id: n for n in notes}
        self._docs = {}
        for nid in self.ids.tolist():
            tokens = _note_tokens(by_id[nid])
            counts = {}
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
            self._docs[nid] = (counts, len(tokens))
        n_docs = len(self.ids)
        df = {}
        for counts, _ in self._docs.values():
            for tok in counts:
                df[tok] = df.get(tok, 0) + 1
        self.idf = {tok: math.log(1.0 + (n_docs - d + 0.5) / (d + 0.5))
                    for tok, d in df.items()}
        self.avgdl = math.fsum(sorted(float(dl) for _, dl in self._docs.values())) / n_docs

    def score(self, query_terms, doc_id: int) -> float:
        counts, dl = self._docs[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        parts = []
        for term in sorted(set(query_terms)):
            tf = counts.get(term, 0)
            if tf == 0 or term not in self.idf:
                continue
            parts.append(self.idf[term] * (tf * (self.k1 + 1.0)) / (tf + norm))
        return math.fsum(sorted(parts))

    def rank(self, query: Note) -> np.ndarray:
        """All pool ids except the query's, best first, ties by id."""
        terms = _note_tokens(query)
        ids = self.ids[self.ids != query.id]
        if ids.size == 0:
            raise DataError("pool contains no candidates besides the query")
        scores = np.asarray([self.score(terms, int(i)) for i in ids])
        return _ranked_ids(scores, ids)

    def target_rank(self, query: Note, target_id: int) -> int:
        if int(target_id) not in self._docs:
            raise DataError(f"note id {target_id} is not in the BM25 pool")
        ranking = self.rank(query)
        return int(np.flatnonzero(ranking == target_id)[0]) + 1


def _note_tokens(note: Note) -> list[str]:
    return (tokenize(note.title) + tokenize(join_topics(note.topics))
            + tokenize(note.content))


# ---------------------------------------------------------------------------
# Evaluation report


def _subsample(pairs: list[Pair], max_pairs: int | None, seed: int) -> list[Pair]:
    if max_pairs is None or max_pairs >= len(pairs):
        return list(pairs)
    picked = np.random.default_rng([seed, 104729]).choice(
        len(pairs), size=max_pairs, replace=False)
    return [pairs[i] for i in sorted(picked.tolist())]


def _source_report(rank_of, pairs, notes_by_id, ks, seeds, max_pairs):
    rank_cache: dict[tuple[int, int], int] = {}

    def rank(p: Pair) -> int:
        key = (p.query, p.related)
        if key not in rank_cache:
            rank_cache[key] = rank_of(p)
        return rank_cache[key]

    slices = {}
    for kind in SLICES:
        per_seed_n = []
        per_seed = {k: [] for k in ks}
        for seed in seeds:
            subset = slice_pairs(_subsample(pairs, max_pairs, seed), notes_by_id, kind)
            per_seed_n.append(len(subset))
            if not subset:
                for k in ks:
                    per_seed[k].append(None)
                continue
            ranks = [rank(p) for p in subset]
            for k in ks:
                per_seed[k].append(sum(1 for r in ranks if r <= k) / len(ranks))
        recall = {}
        for k in ks:
            values = [v for v in per_seed[k] if v is not None]
            recall[k] = math.fsum(sorted(values)) / len(values) if values else None
        slices[kind] = {"n_pairs": per_seed_n, "recall": recall,
                        "per_seed": per_seed}
    return slices


def evaluate(tables: dict[str, EmbeddingTable], pairs: list[Pair],
             notes_by_id: dict[int, Note], ks, *, bm25_pool: list[Note] | None = None,
             seeds=(42,), max_pairs: int | None = None) -> dict:
    """Recall@K per modality table (and optional BM25) per pair slice.

    Retrieval is deterministic, so distinct seeds only matter when
    ``max_pairs`` subsamples the evaluation pairs; reported recalls are
    means across seeds with per-seed values retained.
    """
    if not pairs:
        raise DataError("no evaluation pairs")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError("recall cutoffs must be positive")
    sizes = {len(t) for t in tables.values()}
    if len(sizes) > 1:
        raise ConfigError(f"tables disagree on pool size: {sorted(sizes)}")
    pool_size = sizes.pop() if sizes else len(bm25_pool or ())
    for p in pairs:
        if p.query not in notes_by_id or p.related not in notes_by_id:
            raise DataError(f"pair ({p.query}, {p.related}) references an unknown note")

    report = {
        "pool_size": pool_size,
        "ks": ks,
        "seeds": list(seeds),
        "max_pairs": max_pairs,
        "random_baseline": {k: random_baseline(k, pool_size) for k in ks},
        "sources": {},
    }
    for modality in sorted(tables):
        table = tables[modality]
        slices = _source_report(
            lambda p, t=table: target_rank(t, p.query, p.related),
            pairs, notes_by_id, ks, seeds, max_pairs)
        report["sources"][modality] = {"provenance": dict(table.provenance),
                                       "slices": slices}
    if bm25_pool is not None:
        index = BM25Index(bm25_pool)
        slices = _source_report(
            lambda p: index.target_rank(notes_by_id[p.query], p.related),
            pairs, notes_by_id, ks, seeds, max_pairs)
        report["sources"]["bm25"] = {"provenance": {"kind": "bm25",
                                                    "k1": BM25_K1, "b": BM25_B},
                                     "slices": slices}
    return report


def write_eval_report(report: dict, json_path, csv_path) -> None:
    import csv as csv_mod
    import json

    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=_json_key)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["source", "slice", "k", "recall", "random_baseline", "n_pairs"])
        for source in sorted(report["sources"]):
            slices = report["sources"][source]["slices"]
            for kind in SLICES:
                entry = slices[kind]
                for k in report["ks"]:
                    recall = entry["recall"][k]
                    writer.writerow([
                        source, kind, k,
                        "" if recall is None else repr(recall),
                        repr(report["random_baseline"][k]),
                        min(entry["n_pairs"]),
                    ])


def _json_key(obj):
    raise TypeError(f"not JSON serializable: {obj!r}")


# ---------------------------------------------------------------------------
# Pool selection


def select_pool(notes: list[Note], pairs: list[Pair], size: int, seed: int):
    """Pick an evaluation pool that keeps whole pairs together.

    Pairs are admitted in a seeded random order while their endpoints
    fit in the budget; leftover capacity is filled with unpaired notes.
    Returns (pool notes, pairs fully inside the pool).
    """
    if size < 2 or size > len(notes):
        raise ConfigError(f"pool size {size} out of range for {len(notes)} notes")
    rng = np.random.default_rng([seed, 7907])
    chosen: set[int] = set()
    order = rng.permutation(len(pairs))
    for idx in order:
        p = pairs[idx]
        new = {p.query, p.related} - chosen
        if len(chosen) + len(new) <= size:
            chosen.update(new)
    remaining = [n.id for n in notes if n.id not in chosen]
    filler = rng.permutation(len(remaining))
    for i in filler:
        if len(chosen) >= size:
            break
        chosen.add(remaining[i])
    pool_notes = [n for n in notes if n.id in chosen]
    pool_pairs = [p for p in pairs if p.query in chosen and p.related in chosen]
    return pool_notes, pool_pairs
