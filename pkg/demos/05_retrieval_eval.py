"""
Measuring what the embeddings retrieve
======================================

Embed every note in a pool, rank the pool by cosine similarity for each
query of a mined pair, and score recall@K against where the clicked
partner landed. Running the same pool through the image-only ablation
shows how much of the ranking survives on pixels alone; BM25 on the raw
text gives a classical baseline to beat.

Uses a briefly trained model so the numbers move away from chance
without taking minutes.
"""

from mlrm.data import PairConfig, SyntheticConfig, build_pairs, build_vocab, generate_synthetic
from mlrm.model import ModelConfig
from mlrm.retrieval import build_table, evaluate, random_baseline, select_pool
from mlrm.training import LossConfig, OptimConfig, RunSettings, init_state, train

corpus = SyntheticConfig(seed=11, n_notes=300, n_clusters=3, rho=1.0)
notes, events, _ = generate_synthetic(corpus)
vocab = build_vocab(notes)
pairs = build_pairs(events, PairConfig())

cfg = ModelConfig(vocab_size=len(vocab), hidden_text=32, visual_tokens=8,
                  out_dim=32, mode="notellm2")
state = init_state(cfg, LossConfig(), OptimConfig(peak_lr=1e-3, steps=120),
                   RunSettings(seed=11, batch_pairs=8), vocab)
state = train(state, notes, pairs)
print(f"trained to step {state.step}, "
      f"final loss {state.metrics[-1]['loss']:.4f}")

pool_notes, pool_pairs = select_pool(notes, pairs, 200, seed=1)
by_id = {n.id: n for n in pool_notes}
cache: dict = {}
tables = {
    "multimodal": build_table(state.params, cfg, vocab, pool_notes,
                              modality="multimodal", image_cache=cache),
    "image_only": build_table(state.params, cfg, vocab, pool_notes,
                              modality="image_only", image_cache=cache),
}

report = evaluate(tables, pool_pairs, by_id, ks=[1, 10],
                  bm25_pool=pool_notes)

print(f"\npool {report['pool_size']} notes, {len(pool_pairs)} pairs, "
      f"chance R@10 = {random_baseline(10, report['pool_size']):.4f}\n")
print(f"{'source':>12} {'R@1':>8} {'R@10':>8}")
for name in sorted(report["sources"]):
    recall = report["sources"][name]["slices"]["all"]["recall"]
    print(f"{name:>12} {recall[1]:>8.4f} {recall[10]:>8.4f}")

print("\nper-slice R@10 for the multimodal table:")
for kind, entry in report["sources"]["multimodal"]["slices"].items():
    r = entry["recall"][10]
    shown = "n/a (no pairs)" if r is None else f"{r:.4f}"
    print(f"  {kind:>13}: {shown}  ({min(entry['n_pairs'])} pairs)")
