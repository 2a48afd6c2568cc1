import json
import math

import numpy as np
import pytest

from mlrm.autodiff import Tensor
from mlrm.data import Pair, SyntheticConfig, build_vocab, generate_synthetic
from mlrm.errors import ConfigError, DataError, FormatError
from mlrm.model import ModelConfig, init_params
from mlrm.notes import Note
from mlrm.prompting import join_topics, length_class, tokenize
from mlrm.retrieval import (
    BM25Index,
    EmbeddingTable,
    SLICES,
    build_table,
    evaluate,
    load_table,
    random_baseline,
    recall_at_k,
    save_table,
    select_pool,
    slice_pairs,
    target_rank,
    topk,
    write_eval_report,
)
from mlrm.training import TAU_NAME


def random_table(n=40, dim=8, seed=0, ids=None):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    if ids is None:
        ids = np.arange(n)
    return EmbeddingTable(ids=np.asarray(ids), vectors=vecs.astype(np.float32))


def brute_rank(table, query_vec, exclude=None):
    q = np.asarray(query_vec, np.float64)
    q = q / np.linalg.norm(q)
    rows = []
    for r in range(len(table)):
        nid = int(table.ids[r])
        if exclude is not None and nid == exclude:
            continue
        s = float(table.vectors[r].astype(np.float64) @ q)
        rows.append((-s, nid))
    rows.sort()
    return [nid for _, nid in rows]


# ---------------------------------------------------------------------------
# Table construction


def model_world(n=10):
    data_cfg = SyntheticConfig(seed=11, n_notes=30, n_clusters=2, rho=1.0,
                               patches=4, patch_dim=6)
    notes, _, _ = generate_synthetic(data_cfg)
    notes = notes[:n]
    vocab = build_vocab(notes)
    cfg = ModelConfig(vocab_size=len(vocab), hidden_text=16, hidden_vision=12,
                      patches=4, patch_dim=6, visual_tokens=3, lm_layers=1,
                      lm_heads=2, vision_layers=1, vision_heads=2,
                      connector_layers=1, connector_heads=2, out_dim=8,
                      mode="notellm2")
    params = init_params(cfg, seed=4)
    params[TAU_NAME] = Tensor(np.asarray(3.0), requires_grad=True)
    return params, cfg, vocab, notes


def test_build_table_rows_norms_and_determinism():
    params, cfg, vocab, notes = model_world()
    t1 = build_table(params, cfg, vocab, notes, batch_size=4)
    t2 = build_table(params, cfg, vocab, notes, batch_size=4)
    assert len(t1) == len(notes) and t1.dim == cfg.out_dim
    assert np.array_equal(t1.vectors, t2.vectors)
    norms = np.linalg.norm(t1.vectors.astype(np.float64), axis=1)
    assert np.max(np.abs(norms - 1.0)) <= 1e-6
    assert t1.provenance["modality"] == "multimodal"
    assert t1.provenance["mode"] == "notellm2"


def test_build_table_threads_match_serial():
    params, cfg, vocab, notes = model_world()
    serial = build_table(params, cfg, vocab, notes, batch_size=3, threads=1)
    threaded = build_table(params, cfg, vocab, notes, batch_size=3, threads=4)
    assert np.array_equal(serial.vectors, threaded.vectors)
    assert np.array_equal(serial.ids, threaded.ids)


def test_identical_notes_embed_identically():
    params, cfg, vocab, notes = model_world(n=4)
    clone = Note(id=999, title=notes[0].title, topics=list(notes[0].topics),
                 content=notes[0].content, image=notes[0].image.copy())
    table = build_table(params, cfg, vocab, notes + [clone], batch_size=5)
    assert np.array_equal(table.vector(notes[0].id), table.vector(999))


def test_modality_ablation_changes_vectors():
    # separation threshold is calibrated on the full-size configuration
    data_cfg = SyntheticConfig(seed=11, n_notes=30, n_clusters=2, rho=1.0)
    notes, _, _ = generate_synthetic(data_cfg)
    notes = notes[:10]
    vocab = build_vocab(notes)
    cfg = ModelConfig(vocab_size=len(vocab), mode="notellm2")
    params = init_params(cfg, seed=4)
    params[TAU_NAME] = Tensor(np.asarray(3.0), requires_grad=True)
    multi = build_table(params, cfg, vocab, notes, modality="multimodal")
    text = build_table(params, cfg, vocab, notes, modality="text_only")
    image = build_table(params, cfg, vocab, notes, modality="image_only")
    for n in notes:
        cos_tm = float(multi.vector(n.id).astype(np.float64)
                       @ text.vector(n.id).astype(np.float64))
        assert cos_tm < 1.0 - 1e-3
    assert not np.array_equal(multi.vectors, image.vectors)
    with pytest.raises(ConfigError):
        build_table(params, cfg, vocab, notes, modality="audio_only")


def test_table_round_trip_bit_exact(tmp_path):
    table = random_table(n=17, dim=5, ids=np.asarray([3, 1, 4, 15, 9, 2, 6, 5,
                                                      35, 8, 97, 93, 23, 84, 62, 64, 33]))
    path = tmp_path / "emb.mlrm"
    save_table(path, table)
    back = load_table(path)
    assert np.array_equal(back.ids, table.ids)
    assert back.vectors.tobytes() == table.vectors.tobytes()
    save_table(tmp_path / "emb2.mlrm", back)
    assert (tmp_path / "emb.mlrm").read_bytes() == (tmp_path / "emb2.mlrm").read_bytes()


def test_table_file_corruption(tmp_path):
    table = random_table(n=3, dim=4)
    path = tmp_path / "emb.mlrm"
    save_table(path, table)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 1
    bad = tmp_path / "bad.mlrm"
    bad.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_table(bad)
    trunc = tmp_path / "trunc.mlrm"
    trunc.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_table(trunc)


def test_table_rejects_duplicate_ids():
    with pytest.raises(DataError, match="duplicate"):
        EmbeddingTable(ids=np.asarray([1, 1]), vectors=np.ones((2, 3), np.float32))


# ---------------------------------------------------------------------------
# Ranking


def test_topk_agrees_with_brute_force():
    table = random_table(n=60, dim=6, seed=3)
    rng = np.random.default_rng(9)
    for _ in range(10):
        qid = int(rng.integers(60))
        q = table.vector(qid)
        want = brute_rank(table, q, exclude=qid)
        for k in (1, 5, 59):
            got = topk(q, table, k, exclude=qid)
            assert got.tolist() == want[:k]


def test_topk_tie_break_ascending_id():
    vecs = np.ones((4, 3), dtype=np.float32)
    vecs[3] = [1.0, 0.0, 0.0]
    table = EmbeddingTable(ids=np.asarray([7, 3, 9, 1]), vectors=vecs)
    got = topk(np.ones(3), table, 3)
    assert got.tolist() == [3, 7, 9]


def test_topk_excludes_query_and_validates_k():
    table = random_table(n=10)
    q = table.vector(4)
    for k in range(1, 10):
        assert 4 not in topk(q, table, k, exclude=4).tolist()
    assert sorted(topk(q, table, 9, exclude=4).tolist()) == [i for i in range(10) if i != 4]
    with pytest.raises(ConfigError):
        topk(q, table, 10, exclude=4)
    with pytest.raises(ConfigError):
        topk(q, table, 0)


def test_identical_vector_ranks_first():
    table = random_table(n=20, seed=1)
    twin = table.vectors.copy()
    twin[11] = twin[5]
    table = EmbeddingTable(ids=table.ids, vectors=twin)
    assert topk(table.vector(5), table, 1, exclude=5).tolist() == [11]


def test_target_rank_consistent_with_topk():
    table = random_table(n=30, seed=5)
    rng = np.random.default_rng(2)
    for _ in range(20):
        q, t = rng.choice(30, size=2, replace=False)
        r = target_rank(table, int(q), int(t))
        for k in (1, 3, 10, 29):
            inside = int(t) in topk(table.vector(int(q)), table, k, exclude=int(q)).tolist()
            assert inside == (r <= k)


def test_recall_hand_count_and_monotonicity():
    table = random_table(n=25, seed=8)
    rng = np.random.default_rng(4)
    pairs = []
    while len(pairs) < 20:
        q, t = rng.integers(25, size=2)
        if q != t:
            pairs.append(Pair(int(q), int(t), 1.0))
    by_hand = {}
    for k in (1, 5, 10, 24):
        hits = 0
        for p in pairs:
            ranking = brute_rank(table, table.vector(p.query), exclude=p.query)
            if p.related in ranking[:k]:
                hits += 1
        by_hand[k] = hits / len(pairs)
        assert recall_at_k(table, pairs, k) == by_hand[k]
    values = [recall_at_k(table, pairs, k) for k in (1, 5, 10, 24)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0  # k = pool - 1 always contains the target
    with pytest.raises(DataError):
        recall_at_k(table, [], 5)


def test_random_vectors_hit_chance_level():
    table = random_table(n=101, dim=16, seed=13)
    rng = np.random.default_rng(3)
    pairs = []
    while len(pairs) < 300:
        q, t = rng.integers(101, size=2)
        if q != t:
            pairs.append(Pair(int(q), int(t), 1.0))
    k = 10
    p = random_baseline(k, 101)
    sigma = math.sqrt(p * (1 - p) / len(pairs))
    assert abs(recall_at_k(table, pairs, k) - p) <= 3 * sigma


# ---------------------------------------------------------------------------
# Slices


def note_of_length(nid, words):
    return Note(id=nid, title="t", topics=["x"],
                content=" ".join(f"w{i}" for i in range(words)),
                image=np.zeros((2, 2)))


def test_slice_partition_and_rules():
    notes = {}
    for nid, words in ((0, 10), (1, 100), (2, 300), (3, 40), (4, 200)):
        notes[nid] = note_of_length(nid, words)
    pairs = [Pair(0, 1, 1.0), Pair(1, 2, 1.0), Pair(2, 3, 1.0), Pair(3, 4, 1.0)]
    short_q = slice_pairs(pairs, notes, "short_query")
    long_q = slice_pairs(pairs, notes, "long_query")
    assert all(length_class(notes[p.query]) == "short" for p in short_q)
    assert all(length_class(notes[p.query]) == "long" for p in long_q)
    medium_q = [p for p in pairs if length_class(notes[p.query]) == "medium"]
    assert {id(p) for p in short_q} | {id(p) for p in long_q} | \
        {id(p) for p in medium_q} == {id(p) for p in pairs}
    short_t = slice_pairs(pairs, notes, "short_target")
    assert all(length_class(notes[p.related]) == "short" for p in short_t)
    assert slice_pairs(pairs, notes, "all") == pairs
    with pytest.raises(ConfigError):
        slice_pairs(pairs, notes, "medium_query")


# ---------------------------------------------------------------------------
# BM25


def simple_note(nid, text):
    return Note(id=nid, title=text, topics=[], content="", image=np.zeros((2, 2)))


def brute_bm25_scores(notes, query_tokens, k1=1.2, b=0.75):
    docs = {n.id: tokenize(n.title) + tokenize(join_topics(n.topics))
            + tokenize(n.content) for n in notes}
    n_docs = len(docs)
    avgdl = sum(len(d) for d in docs.values()) / n_docs
    scores = {}
    for nid, doc in docs.items():
        total = 0.0
        for term in set(query_tokens):
            df = sum(1 for d in docs.values() if term in d)
            if df == 0:
                continue
            idf = math.log(1 + (n_docs - df + 0.5) / (df + 0.5))
            tf = doc.count(term)
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(doc) / avgdl))
        scores[nid] = total
    return scores


def test_bm25_matches_brute_force():
    texts = ["red fox jumps", "red red wine", "blue sky", "fox hole",
             "wine and sky", "green fox red", "nothing here", "sky sky sky",
             "red", "fox fox"]
    notes = [simple_note(i, t) for i, t in enumerate(texts)]
    index = BM25Index(notes)
    query = simple_note(0, texts[0])
    want = brute_bm25_scores(notes, tokenize(texts[0]))
    for nid in range(10):
        assert index.score(tokenize(texts[0]), nid) == pytest.approx(want[nid], rel=1e-12)
    ranked = index.rank(query).tolist()
    order = sorted((nid for nid in range(1, 10)), key=lambda i: (-want[i], i))
    assert ranked == order


def test_bm25_duplicate_document_ranks_first():
    texts = ["alpha beta gamma delta", "alpha beta", "gamma", "delta beta",
             "epsilon", "alpha gamma", "beta beta", "zeta", "alpha", "theta"]
    notes = [simple_note(i, t) for i, t in enumerate(texts)]
    twin = simple_note(99, texts[0])
    index = BM25Index(notes + [twin])
    assert index.rank(simple_note(500, texts[0])).tolist()[0] in (0, 99)
    # as a query from inside the pool, its duplicate wins
    assert index.rank(notes[0]).tolist()[0] == 99


def test_bm25_zero_overlap_ranks_by_id():
    notes = [simple_note(i, f"word{i}") for i in (4, 2, 7, 1)]
    index = BM25Index(notes)
    ranked = index.rank(simple_note(9, "unrelated text")).tolist()
    assert ranked == [1, 2, 4, 7]


def test_bm25_idf_monotone_in_rarity():
    notes = [simple_note(i, "common " + ("rare" if i == 0 else "filler"))
             for i in range(6)]
    index = BM25Index(notes)
    assert index.idf["common"] <= index.idf["rare"]


def test_bm25_errors():
    with pytest.raises(DataError):
        BM25Index([])
    index = BM25Index([simple_note(0, "a"), simple_note(1, "b")])
    with pytest.raises(DataError):
        index.target_rank(simple_note(0, "a"), 17)


# ---------------------------------------------------------------------------
# Evaluation report


def eval_world():
    rng = np.random.default_rng(0)
    notes = {}
    for nid in range(30):
        words = int(rng.choice([10, 80, 200]))
        notes[nid] = note_of_length(nid, words)
    table_a = random_table(n=30, dim=8, seed=1)
    table_b = random_table(n=30, dim=8, seed=2)
    pairs = []
    while len(pairs) < 25:
        q, t = rng.integers(30, size=2)
        if q != t:
            pairs.append(Pair(int(q), int(t), 1.0))
    return notes, {"multimodal": table_a, "text_only": table_b}, pairs


def test_evaluate_report_structure():
    notes, tables, pairs = eval_world()
    report = evaluate(tables, pairs, notes, ks=[1, 10],
                      bm25_pool=list(notes.values()))
    assert report["pool_size"] == 30
    assert report["random_baseline"][10] == 10 / 29
    assert sorted(report["sources"]) == ["bm25", "multimodal", "text_only"]
    for source in report["sources"].values():
        assert set(source["slices"]) == set(SLICES)
        entry = source["slices"]["all"]
        assert entry["n_pairs"] == [25]
        assert entry["recall"][10] is not None
        assert 0.0 <= entry["recall"][10] <= 1.0
    # recall nondecreasing in k on the unsliced pairs
    for source in report["sources"].values():
        r = source["slices"]["all"]["recall"]
        assert r[1] <= r[10]


def test_evaluate_seed_subsampling():
    notes, tables, pairs = eval_world()
    full = evaluate(tables, pairs, notes, ks=[5], seeds=(42, 43, 44))
    entry = full["sources"]["multimodal"]["slices"]["all"]
    assert entry["per_seed"][5][0] == entry["per_seed"][5][1] == entry["per_seed"][5][2]
    sub = evaluate(tables, pairs, notes, ks=[5], seeds=(42, 43, 44), max_pairs=10)
    sub_entry = sub["sources"]["multimodal"]["slices"]["all"]
    assert sub_entry["n_pairs"] == [10, 10, 10]
    again = evaluate(tables, pairs, notes, ks=[5], seeds=(42, 43, 44), max_pairs=10)
    assert sub_entry == again["sources"]["multimodal"]["slices"]["all"]


def test_evaluate_errors():
    notes, tables, pairs = eval_world()
    with pytest.raises(DataError):
        evaluate(tables, [], notes, ks=[1])
    with pytest.raises(DataError):
        evaluate(tables, [Pair(0, 999, 1.0)], notes, ks=[1])
    with pytest.raises(ConfigError):
        evaluate(tables, pairs, notes, ks=[0])
    small = {"multimodal": random_table(n=30), "other": random_table(n=10)}
    with pytest.raises(ConfigError):
        evaluate(small, pairs, notes, ks=[1])


def test_write_eval_report(tmp_path):
    notes, tables, pairs = eval_world()
    report = evaluate(tables, pairs, notes, ks=[1, 10])
    write_eval_report(report, tmp_path / "eval.json", tmp_path / "eval.csv")
    blob = json.loads((tmp_path / "eval.json").read_text())
    assert blob["pool_size"] == 30
    assert blob["sources"]["multimodal"]["slices"]["all"]["recall"]["10"] == \
        report["sources"]["multimodal"]["slices"]["all"]["recall"][10]
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0] == "source,slice,k,recall,random_baseline,n_pairs"
    assert len(lines) == 1 + len(tables) * len(SLICES) * 2


def test_select_pool_keeps_pairs_whole():
    rng = np.random.default_rng(1)
    notes = [note_of_length(i, 60) for i in range(50)]
    pairs = []
    while len(pairs) < 30:
        q, t = rng.integers(50, size=2)
        if q != t:
            pairs.append(Pair(int(q), int(t), 1.0))
    pool_notes, pool_pairs = select_pool(notes, pairs, size=20, seed=0)
    assert len(pool_notes) == 20
    ids = {n.id for n in pool_notes}
    assert all(p.query in ids and p.related in ids for p in pool_pairs)
    assert pool_pairs  # budget admits at least a few whole pairs
    again_notes, again_pairs = select_pool(notes, pairs, size=20, seed=0)
    assert [n.id for n in again_notes] == [n.id for n in pool_notes]
    assert again_pairs == pool_pairs
    with pytest.raises(ConfigError):
        select_pool(notes, pairs, size=51, seed=0)
