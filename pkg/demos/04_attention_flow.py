"""
Where does the compressed word look?
====================================

The note embedding is read off the final prompt position, so the
attention flowing into that position tells us which inputs actually
shape the embedding. Weighting each attention edge by its gradient and
splitting the edges into image -> embedding, text -> embedding, and
everything else gives a per-layer share for each source.

An untrained model attends by habit, not by content, but the mechanics
are identical at full scale: run, decompose, compare shares.
"""

from mlrm.data import PairConfig, SyntheticConfig, build_pairs, build_vocab, generate_synthetic
from mlrm.model import ModelConfig
from mlrm.saliency import saliency_report
from mlrm.training import LossConfig, OptimConfig, RunSettings, init_state

corpus = SyntheticConfig(seed=3, n_notes=120, n_clusters=3)
notes, events, _ = generate_synthetic(corpus)
vocab = build_vocab(notes)
pairs = build_pairs(events, PairConfig())

cfg = ModelConfig(vocab_size=len(vocab), hidden_text=32, visual_tokens=8,
                  out_dim=32, mode="notellm2")
state = init_state(cfg, LossConfig(), OptimConfig(), RunSettings(seed=3), vocab)

report = saliency_report(state.params, cfg, vocab, {n.id: n for n in notes},
                         pairs, state.loss_cfg, batch_pairs=8, seed=0,
                         max_notes=64)

print(f"mode {report.mode}, {report.n_notes} notes, "
      f"visual column folded in: {report.folded_visual_word}")
print(f"\n{'layer':>5} {'S_v':>12} {'S_t':>12} {'S_o':>12} "
      f"{'share_v':>9} {'share_t':>9}")
for row in report.layers:
    print(f"{row['layer']:>5} {row['S_v']:>12.3e} {row['S_t']:>12.3e} "
          f"{row['S_o']:>12.3e} {row['share_v']:>9.4f} {row['share_t']:>9.4f}")

total = report.layers[-1]
print(f"\nshares sum to {total['share_v'] + total['share_t'] + total['share_o']:.6f}"
      f" per layer by construction")
