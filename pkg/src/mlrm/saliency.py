"""Attention saliency and modality-flow decomposition.

For each LM layer the saliency matrix is the head-sum of |A * dL/dA|,
where L is the same contrastive objective used in training. Entries in
the final row (the compressed-word query position) are split between
the visual columns and the textual columns; everything else in the
lower triangle counts as word-to-word flow. Scores are averaged per
note, then across the sampled batches with order-independent sums.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import backward
from .data import Pair, make_batches
from .errors import ContractError, NumericError
from .model import MICL_PROMPT_MODES, AssembledInfo, ModelConfig
from .notes import Note
from .prompting import Vocab
from .training import LossConfig, batch_loss, zero_gradients


def position_sets(info: AssembledInfo, mode: str):
    """Disjoint index sets (visual, textual, other) partitioning {j < i}.

    Visual columns are the spliced rows (or the kept image placeholder
    when nothing is spliced); prompts with an in-context visual
    compressed word fold its carrier position into the visual set. The
    textual set is the rest of the compressed row; the remainder of the
    lower triangle is word-to-word flow.
    """
    c = info.compressed_pos
    visual = set(info.visual_positions)
    if mode in MICL_PROMPT_MODES:
        visual.add(info.spliced_pos(info.layout.img_emb_pos) - 1)
    p_v = frozenset((c, j) for j in visual)
    p_t = frozenset((c, j) for j in range(c) if j not in visual)
    p_o = frozenset((i, j) for i in range(info.length) for j in range(i) if i != c)
    return p_v, p_t, p_o


def saliency_matrices(attentions, infos) -> list[list[np.ndarray]]:
    """Per-note, per-layer saliency from retained attention tensors.

    ``attentions`` is the per-layer list of [batch, heads, T, T] probs
    recorded during the forward pass; each must carry the gradient of
    the loss. Returns matrices[b][l], each [T_b, T_b].
    """
    if not attentions:
        raise ContractError("no attention tensors were recorded")
    for layer in attentions:
        if layer.grad is None:
            raise ContractError("attention was not retained before backward; "
                                "run the forward pass with retain_attention=True")
    out = []
    for b, info in enumerate(infos):
        t = info.length
        per_layer = []
        for layer in attentions:
            a = layer.data[b, :, :t, :t]
            g = layer.grad[b, :, :t, :t]
            per_layer.append(np.abs(a * g).sum(axis=0))
        out.append(per_layer)
    return out


def _set_mean(matrix: np.ndarray, pairs) -> float:
    if not pairs:
        raise NumericError("saliency mean over an empty position set is undefined")
    return math.fsum(sorted(float(matrix[i, j]) for i, j in pairs)) / len(pairs)


def decompose(matrix: np.ndarray, info: AssembledInfo, mode: str) -> tuple[float, float, float]:
    """Mean saliency over the visual, textual and word-to-word sets."""
    p_v, p_t, p_o = position_sets(info, mode)
    return _set_mean(matrix, p_v), _set_mean(matrix, p_t), _set_mean(matrix, p_o)


def _sorted_mean(values: list[float]) -> float:
    return math.fsum(sorted(values)) / len(values)


@dataclass
class SaliencyReport:
    mode: str
    folded_visual_word: bool
    n_notes: int
    layers: list[dict]  # layer, S_v, S_t, S_o, share_v, share_t, share_o

    def to_dict(self) -> dict:
        return {"mode": self.mode, "folded_visual_word": self.folded_visual_word,
                "n_notes": self.n_notes, "layers": self.layers}


def batch_saliency(params, cfg: ModelConfig, vocab: Vocab, notes: list[Note],
                   partner, loss_cfg: LossConfig, image_cache=None):
    """Loss -> backward -> per-note per-layer (S_v, S_t, S_o) triples."""
    loss, reps = batch_loss(params, cfg, vocab, notes, partner, loss_cfg,
                            image_cache=image_cache, retain_attention=True)
    backward(loss)
    matrices = saliency_matrices(reps.attentions, reps.infos)
    zero_gradients(params)
    return [
        [decompose(note_layers[l], info, cfg.mode)
         for l in range(len(note_layers))]
        for note_layers, info in zip(matrices, reps.infos)
    ]


def saliency_report(params, cfg: ModelConfig, vocab: Vocab,
                    notes_by_id: dict[int, Note], pairs: list[Pair],
                    loss_cfg: LossConfig, *, batch_pairs: int = 16, seed: int = 0,
                    max_notes: int = 1000, image_cache=None) -> SaliencyReport:
    """Average the decomposition over sampled batches of paired notes."""
    batches = make_batches(pairs, batch_pairs, seed, 0)
    per_layer_v: list[list[float]] = [[] for _ in range(cfg.lm_layers)]
    per_layer_t: list[list[float]] = [[] for _ in range(cfg.lm_layers)]
    per_layer_o: list[list[float]] = [[] for _ in range(cfg.lm_layers)]
    n_notes = 0
    for batch in batches:
        if n_notes >= max_notes:
            break
        notes = [notes_by_id[i] for i in batch.note_ids]
        triples = batch_saliency(params, cfg, vocab, notes, batch.partner,
                                 loss_cfg, image_cache=image_cache)
        for note_triples in triples:
            for layer, (s_v, s_t, s_o) in enumerate(note_triples):
                per_layer_v[layer].append(s_v)
                per_layer_t[layer].append(s_t)
                per_layer_o[layer].append(s_o)
        n_notes += len(notes)
    if n_notes == 0:
        raise NumericError("no notes sampled; not enough pairs for one batch")

    layers = []
    for layer in range(cfg.lm_layers):
        s_v = _sorted_mean(per_layer_v[layer])
        s_t = _sorted_mean(per_layer_t[layer])
        s_o = _sorted_mean(per_layer_o[layer])
        total = s_v + s_t + s_o
        if total == 0.0:
            share_v = share_t = share_o = 0.0
        else:
            share_v, share_t, share_o = s_v / total, s_t / total, s_o / total
        layers.append({"layer": layer, "S_v": s_v, "S_t": s_t, "S_o": s_o,
                       "share_v": share_v, "share_t": share_t, "share_o": share_o})
    folded = cfg.mode in MICL_PROMPT_MODES
    return SaliencyReport(mode=cfg.mode, folded_visual_word=folded,
                          n_notes=n_notes, layers=layers)


CSV_FIELDS = ("layer", "S_v", "S_t", "S_o", "share_v", "share_t", "share_o")


def write_report(report: SaliencyReport, csv_path, json_path) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in report.layers:
            writer.writerow({k: row[k] for k in CSV_FIELDS})
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
