"""The representation model: frozen patch encoder, query connector,
causal LM, gated late fusion and the shared output projector.

Forward passes are batched: sequences are padded with zero rows to the
longest prompt in the batch, which is safe because causal attention
never lets a real position look at a later (padded) column and the
extraction positions index only real rows.

Variants wire the same blocks differently:

  basic            single-segment prompt, visual rows spliced in, the
                   final hidden state is the note embedding
  micl             two-segment prompt; the hidden state before the
                   in-context visual compressed word is a visual
                   embedding, the final hidden state the multimodal one
  late_fusion      basic forward plus a gate that mixes the raw visual
                   summary into the multimodal embedding
  notellm2         micl forward plus gates on both paths
  only_late_fusion single-segment prompt with no visual rows spliced
                   (the image placeholder stays an ordinary token);
                   fusion happens only through the gate
  omni             micl forward; extra image-only/text-only passes are
                   orchestrated by the training loss
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ModeError, ShapeError
from .notes import Note
from .prompting import MAX_PROMPT_TOKENS, PromptLayout, Vocab, build_prompt

MODES = ("basic", "micl", "late_fusion", "notellm2", "only_late_fusion", "omni")
MICL_PROMPT_MODES = frozenset({"micl", "notellm2", "omni"})
SPLICE_MODES = frozenset(MODES) - {"only_late_fusion"}
VISUAL_PATH_MODES = frozenset({"micl", "notellm2", "omni"})
GATE_MULTIMODAL_MODES = frozenset({"late_fusion", "notellm2", "only_late_fusion"})
MODALITIES = ("multimodal", "image_only", "text_only")

NULL_IMAGE_KEY = "__null_image__"


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_text: int = 64
    hidden_vision: int = 64
    patches: int = 16
    patch_dim: int = 32
    visual_tokens: int = 16
    lm_layers: int = 2
    lm_heads: int = 4
    vision_layers: int = 2
    vision_heads: int = 4
    connector_layers: int = 2
    connector_heads: int = 4
    ff_mult: int = 4
    out_dim: int = 64
    max_positions: int = MAX_PROMPT_TOKENS + 48
    freeze_vision: bool = True
    mode: str = "notellm2"
    eps: float = 1e-5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown variant {self.mode!r}, expected one of {MODES}")
        for dim, heads, what in ((self.hidden_text, self.lm_heads, "lm"),
                                 (self.hidden_vision, self.vision_heads, "vision"),
                                 (self.hidden_text, self.connector_heads, "connector")):
            if dim % heads:
                raise ConfigError(f"{what}: hidden dim {dim} not divisible by {heads} heads")
        for name in ("vocab_size", "hidden_text", "hidden_vision", "patches", "patch_dim",
                     "visual_tokens", "lm_layers", "lm_heads", "vision_layers",
                     "connector_layers", "out_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def vision_len(self) -> int:
        return self.patches + 1  # learned [CLS] row plus one row per patch

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameters


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Create all weights; vision.* tensors are frozen when configured."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add(name, shape, kind="normal"):
        if kind == "normal":
            data = rng.normal(0.0, 0.02, shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:
            data = np.ones(shape)
        params[name] = Tensor(data, requires_grad=True)

    def add_attention(prefix, d_q, d_kv, d):
        add(f"{prefix}.wq", (d_q, d))
        add(f"{prefix}.bq", (d,), "zeros")
        add(f"{prefix}.wk", (d_kv, d))
        add(f"{prefix}.bk", (d,), "zeros")
        add(f"{prefix}.wv", (d_kv, d))
        add(f"{prefix}.bv", (d,), "zeros")
        add(f"{prefix}.wo", (d, d))
        add(f"{prefix}.bo", (d,), "zeros")

    def add_ln(prefix, d):
        add(f"{prefix}.g", (d,), "ones")
        add(f"{prefix}.b", (d,), "zeros")

    def add_ff(prefix, d):
        add(f"{prefix}.w1", (d, cfg.ff_mult * d))
        add(f"{prefix}.b1", (cfg.ff_mult * d,), "zeros")
        add(f"{prefix}.w2", (cfg.ff_mult * d, d))
        add(f"{prefix}.b2", (d,), "zeros")

    hv, ht = cfg.hidden_vision, cfg.hidden_text
    add("vision.patch_proj.w", (cfg.patch_dim, hv))
    add("vision.patch_proj.b", (hv,), "zeros")
    add("vision.cls", (1, hv))
    add("vision.pos", (cfg.vision_len, hv))
    for i in range(cfg.vision_layers):
        add_ln(f"vision.blocks.{i}.ln1", hv)
        add_attention(f"vision.blocks.{i}.attn", hv, hv, hv)
        add_ln(f"vision.blocks.{i}.ln2", hv)
        add_ff(f"vision.blocks.{i}.ff", hv)
    add_ln("vision.ln_f", hv)

    add("connector.queries", (cfg.visual_tokens, ht))
    for i in range(cfg.connector_layers):
        add_ln(f"connector.blocks.{i}.ln_self", ht)
        add_attention(f"connector.blocks.{i}.self_attn", ht, ht, ht)
        add_ln(f"connector.blocks.{i}.ln_cross", ht)
        add_attention(f"connector.blocks.{i}.cross_attn", ht, hv, ht)
        add_ln(f"connector.blocks.{i}.ln_ff", ht)
        add_ff(f"connector.blocks.{i}.ff", ht)
    add("connector.out.w", (ht, ht))
    add("connector.out.b", (ht,), "zeros")

    add("lm.tok_emb", (cfg.vocab_size, ht))
    add("lm.pos", (cfg.max_positions, ht))
    for i in range(cfg.lm_layers):
        add_ln(f"lm.blocks.{i}.ln1", ht)
        add_attention(f"lm.blocks.{i}.attn", ht, ht, ht)
        add_ln(f"lm.blocks.{i}.ln2", ht)
        add_ff(f"lm.blocks.{i}.ff", ht)
    add_ln("lm.ln_f", ht)

    add("fusion.vision_proj.w", (hv, ht))
    add("fusion.vision_proj.b", (ht,), "zeros")
    add("fusion.gate_visual.w", (ht, 2 * ht))
    add("fusion.gate_visual.b", (ht,), "zeros")
    add("fusion.gate_multimodal.w", (ht, 2 * ht))
    add("fusion.gate_multimodal.b", (ht,), "zeros")
    add("fusion.null_image", (ht,))
    add("project.w", (ht, cfg.out_dim))

    if cfg.freeze_vision:
        for name, tensor in params.items():
            if name.startswith("vision."):
                tensor.requires_grad = False
    return params


def trainable_names(params: dict[str, Tensor]) -> list[str]:
    return [name for name, t in params.items() if t.requires_grad]


# ---------------------------------------------------------------------------
# Shared blocks (all operate on [batch, positions, features])


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., d_in] @ w [d_in, d_out] (+ bias)."""
    d_in, d_out = w.shape
    lead = x.shape[:-1]
    flat = ad.reshape(x, (int(np.prod(lead)), d_in)) if x.ndim != 2 else x
    out = ad.matmul(flat, w)
    if b is not None:
        out = ad.add(out, b)
    return ad.reshape(out, lead + (d_out,)) if x.ndim != 2 else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(params: dict, prefix: str, x_q: Tensor, x_kv: Tensor, heads: int,
               mask: np.ndarray | None, retain: bool = False) -> tuple[Tensor, Tensor]:
    """Multi-head attention of x_q over x_kv; returns (output, probs).

    mask is a boolean [Tq, Tk] pattern shared across batch and heads, or
    None for full attention. No positional information is injected here,
    so attention over x_kv is permutation-equivariant in its rows.
    """
    p = params
    q = _split_heads(_linear(x_q, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(x_kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(x_kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    dh = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is None:
        full = np.ones(scores.shape, dtype=bool)
    else:
        full = np.broadcast_to(mask, scores.shape)
    probs = ad.masked_softmax(scores, full)
    if retain:
        probs.retain_grad()
    out = _merge_heads(ad.matmul(probs, v))
    return _linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), probs


def _ln(params: dict, prefix: str, x: Tensor, eps: float) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def _ff(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _encoder_block(params, cfg, prefix, x, heads, mask, retain=False):
    normed = _ln(params, f"{prefix}.ln1", x, cfg.eps)
    a, probs = _attention(params, f"{prefix}.attn", normed, normed, heads, mask, retain)
    x = ad.add(x, a)
    x = ad.add(x, _ff(params, f"{prefix}.ff", _ln(params, f"{prefix}.ln2", x, cfg.eps)))
    return x, probs


# ---------------------------------------------------------------------------
# Vision encoder and connector


def encode_images(params: dict, cfg: ModelConfig, images: np.ndarray) -> Tensor:
    """Bidirectional encoding of patch grids -> [B, patches+1, h_v]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1:] != (cfg.patches, cfg.patch_dim):
        raise DataError(f"images must be [batch, {cfg.patches}, {cfg.patch_dim}], "
                        f"got {images.shape}")
    b = images.shape[0]
    x = _linear(Tensor(images), params["vision.patch_proj.w"], params["vision.patch_proj.b"])
    cls = ad.reshape(params["vision.cls"], (1, 1, cfg.hidden_vision))
    x = ad.concat([ad.concat([cls] * b, axis=0), x], axis=1)
    x = ad.add(x, params["vision.pos"])
    for i in range(cfg.vision_layers):
        x, _ = _encoder_block(params, cfg, f"vision.blocks.{i}", x, cfg.vision_heads, None)
    return _ln(params, "vision.ln_f", x, cfg.eps)


def connect(params: dict, cfg: ModelConfig, vision_feats: Tensor) -> Tensor:
    """Cross-attend learned queries to vision features -> [B, L_c, h_t].

    Vision rows carry no positional encoding here, so the result is
    invariant to permuting them.
    """
    if vision_feats.ndim != 3 or vision_feats.shape[2] != cfg.hidden_vision:
        raise ShapeError(f"connect expects [B, L, {cfg.hidden_vision}], got {vision_feats.shape}")
    b = vision_feats.shape[0]
    q = ad.reshape(params["connector.queries"], (1, cfg.visual_tokens, cfg.hidden_text))
    x = ad.concat([q] * b, axis=0)
    for i in range(cfg.connector_layers):
        prefix = f"connector.blocks.{i}"
        normed = _ln(params, f"{prefix}.ln_self", x, cfg.eps)
        a, _ = _attention(params, f"{prefix}.self_attn", normed, normed,
                          cfg.connector_heads, None)
        x = ad.add(x, a)
        a, _ = _attention(params, f"{prefix}.cross_attn",
                          _ln(params, f"{prefix}.ln_cross", x, cfg.eps), vision_feats,
                          cfg.connector_heads, None)
        x = ad.add(x, a)
        x = ad.add(x, _ff(params, f"{prefix}.ff", _ln(params, f"{prefix}.ln_ff", x, cfg.eps)))
    return _linear(x, params["connector.out.w"], params["connector.out.b"])


def visual_summaries(params: dict, cfg: ModelConfig, vision_feats: Tensor) -> Tensor:
    """Trained linear read-out of the [CLS] row -> [B, h_t]."""
    cls = ad.reshape(ad.narrow(vision_feats, 1, 0, 1), (vision_feats.shape[0], cfg.hidden_vision))
    return _linear(cls, params["fusion.vision_proj.w"], params["fusion.vision_proj.b"])


# ---------------------------------------------------------------------------
# Assembly and the causal LM


@dataclass
class AssembledInfo:
    """Position bookkeeping for one spliced (or plain) sequence."""

    layout: PromptLayout
    spliced: bool
    visual_len: int  # spliced visual rows, or 1 for the kept placeholder token
    length: int      # sequence length after splicing

    def spliced_pos(self, token_pos: int) -> int:
        """Map a raw token index to its post-splice position."""
        if token_pos < self.layout.img_slot:
            return token_pos
        if token_pos == self.layout.img_slot and self.spliced:
            raise ShapeError("the image placeholder itself has no post-splice position")
        return token_pos + self.visual_len - 1

    @property
    def visual_positions(self) -> range:
        return range(self.layout.img_slot, self.layout.img_slot + self.visual_len)

    @property
    def compressed_pos(self) -> int:
        return self.length - 1


def assemble_one(params: dict, cfg: ModelConfig, layout: PromptLayout,
                 visual_rows: Tensor | None) -> tuple[Tensor, AssembledInfo]:
    """Replace the image placeholder with visual rows (or keep it).

    Returns the [T', h_t] sequence without positions; positions are
    added after splicing, over the final sequence.
    """
    ids = np.asarray(layout.token_ids, dtype=np.int64)
    tok = ad.embedding_lookup(params["lm.tok_emb"], ids)
    if visual_rows is None:
        info = AssembledInfo(layout, spliced=False, visual_len=1, length=len(ids))
        return tok, info
    if visual_rows.ndim != 2 or visual_rows.shape[1] != cfg.hidden_text:
        raise ShapeError(f"visual rows must be [*, {cfg.hidden_text}], got {visual_rows.shape}")
    slot = layout.img_slot
    pieces = []
    if slot:
        pieces.append(ad.narrow(tok, 0, 0, slot))
    pieces.append(visual_rows)
    pieces.append(ad.narrow(tok, 0, slot + 1, len(ids) - slot - 1))
    seq = ad.concat(pieces, axis=0)
    info = AssembledInfo(layout, spliced=True, visual_len=visual_rows.shape[0],
                         length=len(ids) + visual_rows.shape[0] - 1)
    return seq, info


def forward_llm(params: dict, cfg: ModelConfig, x: Tensor,
                retain_attention: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Causal transformer over [B, T, h_t]; returns hidden states and the
    per-layer attention probability tensors."""
    b, t, d = x.shape
    if t > cfg.max_positions:
        raise ConfigError(f"sequence of {t} positions exceeds the position table "
                          f"({cfg.max_positions})")
    x = ad.add(x, ad.narrow(params["lm.pos"], 0, 0, t))
    causal = np.tril(np.ones((t, t), dtype=bool))
    attentions = []
    for i in range(cfg.lm_layers):
        x, probs = _encoder_block(params, cfg, f"lm.blocks.{i}", x, cfg.lm_heads,
                                  causal, retain=retain_attention)
        attentions.append(probs)
    return _ln(params, "lm.ln_f", x, cfg.eps), attentions


# ---------------------------------------------------------------------------
# Fusion and projection


def gate_fuse(v: Tensor, n: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """z = sigmoid(W [v; n] + b); return z * v + (1 - z) * n.

    Accepts single vectors [h] or row batches [B, h].
    """
    if v.shape != n.shape:
        raise ShapeError(f"gate_fuse: shapes {v.shape} and {n.shape} differ")
    single = v.ndim == 1
    h = v.shape[-1]
    if w.shape != (h, 2 * h) or b.shape != (h,):
        raise ShapeError(f"gate_fuse: weights {w.shape}/{b.shape} do not fit dim {h}")
    vv = ad.reshape(v, (1, h)) if single else v
    nn = ad.reshape(n, (1, h)) if single else n
    x = ad.concat([vv, nn], axis=1)
    z = ad.sigmoid(ad.add(ad.matmul(x, ad.transpose(w)), b))
    one_minus = ad.addc(ad.scale(z, -1.0), 1.0)
    fused = ad.add(ad.mul(z, vv), ad.mul(one_minus, nn))
    return ad.reshape(fused, (h,)) if single else fused


def project(params: dict, x: Tensor) -> Tensor:
    """Shared linear projector to the output dimension (no bias, so it
    is exactly linear)."""
    single = x.ndim == 1
    xx = ad.reshape(x, (1, x.shape[0])) if single else x
    out = ad.matmul(xx, params["project.w"])
    return ad.reshape(out, (out.shape[1],)) if single else out


# ---------------------------------------------------------------------------
# Whole-note embedding


@dataclass
class BatchRepresentations:
    """Everything one batched forward produced, batch-major."""

    mode: str
    modality: str
    infos: list[AssembledInfo]
    visual_summary: Tensor            # [B, h_t]
    raw_visual: Tensor | None         # [B, h_t] (micl-family)
    raw_multimodal: Tensor            # [B, h_t]
    fused_visual: Tensor | None       # [B, h_t]
    fused_multimodal: Tensor | None   # [B, h_t]
    out_visual: Tensor | None         # [B, out_dim], projected
    out_multimodal: Tensor            # [B, out_dim], projected; the eval embedding
    attentions: list[Tensor] | None   # per layer, [B, heads, Tmax, Tmax], retained

    def __len__(self) -> int:
        return len(self.infos)


@dataclass
class Representations:
    """Single-note view of a forward pass (vectors, not rows)."""

    mode: str
    modality: str
    info: AssembledInfo
    visual_summary: Tensor
    raw_visual: Tensor | None
    raw_multimodal: Tensor
    fused_visual: Tensor | None
    fused_multimodal: Tensor | None
    out_visual: Tensor | None
    out_multimodal: Tensor
    attentions: list[Tensor] | None = field(default=None, repr=False)


def _row(batch: Tensor, index: int, pos: int, dim: int) -> Tensor:
    return ad.reshape(ad.narrow(ad.narrow(batch, 0, index, 1), 1, pos, 1), (dim,))


def _vision_features(params, cfg, notes, text_only, image_cache):
    """Encode images (or the fixed zero image for text-only ablations),
    reusing cached rows when the encoder is frozen."""
    if text_only:
        images = np.zeros((len(notes), cfg.patches, cfg.patch_dim))
        keys = [NULL_IMAGE_KEY] * len(notes)
    else:
        for n in notes:
            if n.image.shape != (cfg.patches, cfg.patch_dim):
                raise DataError(f"note {n.id}: image shape {n.image.shape} != "
                                f"({cfg.patches}, {cfg.patch_dim})")
        images = np.stack([n.image for n in notes])
        keys = [n.id for n in notes]
    cache = image_cache if (image_cache is not None and cfg.freeze_vision) else None
    if cache is None:
        return encode_images(params, cfg, images)
    missing = sorted({k for k in keys if k not in cache})
    if missing:
        index = {k: i for i, k in enumerate(keys)}
        feats = encode_images(params, cfg, images[[index[k] for k in missing]])
        for j, k in enumerate(missing):
            cache[k] = feats.data[j]
    return Tensor(np.stack([cache[k] for k in keys]))


def embed_notes(params: dict, cfg: ModelConfig, vocab: Vocab, notes: list[Note],
                mode: str | None = None, modality: str = "multimodal",
                retain_attention: bool = False,
                image_cache: dict | None = None) -> BatchRepresentations:
    """Batched note embedding along the configured variant's wiring."""
    mode = cfg.mode if mode is None else mode
    if mode not in MODES:
        raise ModeError(f"unknown variant {mode!r}")
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}, expected one of {MODALITIES}")
    if not notes:
        raise DataError("embed_notes: empty batch")
    if modality == "image_only":
        notes = [n.replace_text(title="", topics=[], content="") for n in notes]
    layouts = [build_prompt(n, vocab, use_micl=mode in MICL_PROMPT_MODES) for n in notes]
    return embed_layouts(params, cfg, layouts, notes, mode, modality,
                         retain_attention=retain_attention, image_cache=image_cache)


def embed_layouts(params: dict, cfg: ModelConfig, layouts: list[PromptLayout],
                  notes: list[Note], mode: str, modality: str = "multimodal",
                  retain_attention: bool = False,
                  image_cache: dict | None = None) -> BatchRepresentations:
    """Lower-level entry point taking pre-built prompt layouts."""
    b = len(layouts)
    ht = cfg.hidden_text
    text_only = modality == "text_only"
    vision_feats = _vision_features(params, cfg, notes, text_only, image_cache)
    v = visual_summaries(params, cfg, vision_feats)

    if mode in SPLICE_MODES:
        if text_only:
            null_row = ad.reshape(params["fusion.null_image"], (1, ht))
            visual_rows_all = None
            null_tile = ad.concat([null_row] * cfg.visual_tokens, axis=0)
        else:
            visual_rows_all = connect(params, cfg, vision_feats)

    sequences, infos = [], []
    for i, layout in enumerate(layouts):
        if mode not in SPLICE_MODES:
            rows = None
        elif text_only:
            rows = null_tile
        else:
            rows = ad.reshape(ad.narrow(visual_rows_all, 0, i, 1),
                              (cfg.visual_tokens, ht))
        seq, info = assemble_one(params, cfg, layout, rows)
        sequences.append(seq)
        infos.append(info)

    t_max = max(info.length for info in infos)
    padded = []
    for seq, info in zip(sequences, infos):
        if info.length < t_max:
            seq = ad.concat([seq, Tensor(np.zeros((t_max - info.length, ht)))], axis=0)
        padded.append(ad.reshape(seq, (1, t_max, ht)))
    stacked = padded[0] if b == 1 else ad.concat(padded, axis=0)

    hidden, attentions = forward_llm(params, cfg, stacked, retain_attention)

    n_m = ad.stack_rows([_row(hidden, i, infos[i].compressed_pos, ht) for i in range(b)])
    n_v = None
    if mode in VISUAL_PATH_MODES:
        n_v = ad.stack_rows([
            _row(hidden, i, infos[i].spliced_pos(infos[i].layout.img_emb_pos) - 1, ht)
            for i in range(b)
        ])

    fused_v = fused_m = None
    if mode == "notellm2":
        fused_v = gate_fuse(v, n_v, params["fusion.gate_visual.w"],
                            params["fusion.gate_visual.b"])
    if mode in GATE_MULTIMODAL_MODES:
        fused_m = gate_fuse(v, n_m, params["fusion.gate_multimodal.w"],
                            params["fusion.gate_multimodal.b"])

    visual_path = fused_v if fused_v is not None else n_v
    out_v = project(params, visual_path) if visual_path is not None else None
    out_m = project(params, fused_m if fused_m is not None else n_m)

    return BatchRepresentations(
        mode=mode, modality=modality, infos=infos,
        visual_summary=v, raw_visual=n_v, raw_multimodal=n_m,
        fused_visual=fused_v, fused_multimodal=fused_m,
        out_visual=out_v, out_multimodal=out_m,
        attentions=attentions if retain_attention else None,
    )


def _single(batch: BatchRepresentations, cfg: ModelConfig) -> Representations:
    def vec(t: Tensor | None, dim: int) -> Tensor | None:
        if t is None:
            return None
        return ad.reshape(t, (dim,))
    return Representations(
        mode=batch.mode, modality=batch.modality, info=batch.infos[0],
        visual_summary=vec(batch.visual_summary, cfg.hidden_text),
        raw_visual=vec(batch.raw_visual, cfg.hidden_text),
        raw_multimodal=vec(batch.raw_multimodal, cfg.hidden_text),
        fused_visual=vec(batch.fused_visual, cfg.hidden_text),
        fused_multimodal=vec(batch.fused_multimodal, cfg.hidden_text),
        out_visual=vec(batch.out_visual, cfg.out_dim),
        out_multimodal=vec(batch.out_multimodal, cfg.out_dim),
        attentions=batch.attentions,
    )


def embed_note(params: dict, cfg: ModelConfig, vocab: Vocab, note: Note,
               mode: str | None = None, modality: str = "multimodal",
               retain_attention: bool = False,
               image_cache: dict | None = None) -> Representations:
    batch = embed_notes(params, cfg, vocab, [note], mode=mode, modality=modality,
                        retain_attention=retain_attention, image_cache=image_cache)
    return _single(batch, cfg)


def embed_layout(params: dict, cfg: ModelConfig, layout: PromptLayout, note: Note,
                 mode: str, modality: str = "multimodal",
                 retain_attention: bool = False) -> Representations:
    batch = embed_layouts(params, cfg, [layout], [note], mode, modality,
                          retain_attention=retain_attention)
    return _single(batch, cfg)
