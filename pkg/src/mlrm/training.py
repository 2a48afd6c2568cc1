"""Contrastive objectives, optimizer, schedule and the training loop.

The in-batch loss is computed in a factored form: for each row the
positive logit is subtracted from every candidate logit before
exponentiation, which turns the per-row term into log1p(sum of
exponentials of non-positive-shifted logits). This is algebraically the
usual -log(softmax) but stays fully accurate when the positive dominates
and the true loss is tiny; the naive logsumexp-minus-numerator form
loses all significant digits there.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_rows,
    backward,
    divs,
    exp,
    first_nonfinite,
    log1p,
    matmul,
    mul,
    no_grad,
    power,
    scale,
    scale_rows,
    smul,
    tmean,
    transpose,
    tsum,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, Pair, make_batches, split_pairs
from .errors import ConfigError, ContractError, NumericError
from .model import (
    MODES,
    ModelConfig,
    embed_notes,
    init_params,
)
from .notes import Note
from .prompting import Vocab

TAU_NAME = "loss.tau"


@dataclass
class LossConfig:
    """Objective settings; the single temperature is shared by every term."""

    alpha: float = 9.0
    tau_init: float = 3.0
    mode: str | None = None  # must agree with the model's mode when set

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not math.isfinite(self.tau_init):
            raise ConfigError("tau_init must be finite")
        if self.mode is not None and self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "tau_init": self.tau_init, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass
class OptimConfig:
    peak_lr: float = 3e-4
    steps: int = 500
    warmup_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if not (0 <= self.warmup_ratio < 1):
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.peak_lr <= 0 or self.eps <= 0:
            raise ConfigError("peak_lr and eps must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_ratio * self.steps)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("peak_lr", "steps", "warmup_ratio", "beta1", "beta2",
                 "eps", "weight_decay", "max_grad_norm")}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


# Reference profiles: "desk" is sized for CPU runs, "production" records the
# original full-scale fine-tuning recipe and is not expected to run here.
PROFILES = {
    "desk": {"peak_lr": 3e-4, "steps": 500, "batch_pairs": 16},
    "production": {"peak_lr": 3e-6, "steps": 7956, "batch_pairs": 128},
}


# ---------------------------------------------------------------------------
# Losses


def _check_partner(partner: np.ndarray, n: int) -> np.ndarray:
    partner = np.asarray(partner)
    if partner.shape != (n,):
        raise ContractError(f"partner map must have shape ({n},), got {partner.shape}")
    idx = np.arange(n)
    if np.any(partner == idx):
        raise ContractError("partner map has a fixed point")
    if not np.array_equal(partner[partner], idx):
        raise ContractError("partner map is not an involution")
    return partner


def _normalize_rows(emb: Tensor) -> Tensor:
    if emb.ndim != 2:
        raise ContractError(f"expected an embedding matrix, got shape {emb.shape}")
    sq = tsum(mul(emb, emb), axis=1)
    bad = np.flatnonzero(sq.data == 0.0)
    if bad.size:
        raise NumericError(f"zero-norm embedding at row {bad[0]}")
    return scale_rows(emb, power(sq, -0.5))


def _paired_loss(queries: Tensor, candidates: Tensor, partner: np.ndarray,
                 tau: Tensor) -> Tensor:
    """Mean over rows of -log softmax(positive | all candidates but self).

    Inputs must be row-normalized. The positive for row i is candidate
    partner(i); candidate i itself is excluded from the denominator.
    """
    n = queries.shape[0]
    sims = matmul(queries, transpose(candidates))
    pos = tsum(mul(sims, _indicator(partner)), axis=1)
    shifted = add_rows(sims, scale(pos, -1.0))
    logits = smul(exp(tau), shifted)
    keep = np.ones((n, n))
    idx = np.arange(n)
    keep[idx, idx] = 0.0
    keep[idx, partner] = 0.0
    masked = mul(exp(logits), Tensor(keep))
    return tmean(log1p(tsum(masked, axis=1)))


def _indicator(partner: np.ndarray) -> Tensor:
    n = partner.shape[0]
    m = np.zeros((n, n))
    m[np.arange(n), partner] = 1.0
    return Tensor(m)


def contrastive_loss(emb: Tensor, partner, tau: Tensor) -> Tensor:
    """In-batch contrastive loss over one embedding table.

    Row i is pulled toward row partner(i) against every other row; the
    similarity is cosine and the logit scale is exp(tau). A batch of one
    pair has no negatives, so the loss is exactly zero.
    """
    partner = _check_partner(partner, emb.shape[0])
    normed = _normalize_rows(emb)
    return _paired_loss(normed, normed, partner, tau)


def cross_contrastive_loss(queries: Tensor, candidates: Tensor, partner,
                           tau: Tensor) -> Tensor:
    """Contrastive loss with queries and candidates from different tables.

    Row i of ``queries`` is matched against the whole ``candidates``
    table; its positive is candidates[partner(i)] and candidates[i] is
    excluded. With identical tables this reduces to contrastive_loss.
    """
    if queries.shape != candidates.shape:
        raise ContractError(f"query/candidate shape mismatch: "
                            f"{queries.shape} vs {candidates.shape}")
    partner = _check_partner(partner, queries.shape[0])
    return _paired_loss(_normalize_rows(queries), _normalize_rows(candidates),
                        partner, tau)


def final_loss(loss_visual: Tensor, loss_multimodal: Tensor, alpha: float) -> Tensor:
    """Blend the two objectives: (L_v + alpha * L_m) / (1 + alpha)."""
    return divs(add(loss_visual, scale(loss_multimodal, float(alpha))), 1.0 + float(alpha))


def batch_loss(params: dict[str, Tensor], cfg: ModelConfig, vocab: Vocab,
               notes: list[Note], partner, loss_cfg: LossConfig,
               image_cache: dict | None = None, retain_attention: bool = False):
    """Variant-dispatching objective; returns (loss, representations).

    The returned representations come from the multimodal pass so
    callers can inspect attention or embeddings regardless of mode.
    """
    tau = params[TAU_NAME]
    mode = cfg.mode
    reps = embed_notes(params, cfg, vocab, notes, image_cache=image_cache,
                       retain_attention=retain_attention)
    if mode in ("basic", "late_fusion", "only_late_fusion"):
        return contrastive_loss(reps.out_multimodal, partner, tau), reps
    if mode in ("micl", "notellm2"):
        loss_v = contrastive_loss(reps.out_visual, partner, tau)
        loss_m = contrastive_loss(reps.out_multimodal, partner, tau)
        return final_loss(loss_v, loss_m, loss_cfg.alpha), reps
    if mode == "omni":
        image_reps = embed_notes(params, cfg, vocab, notes, modality="image_only",
                                 image_cache=image_cache)
        text_reps = embed_notes(params, cfg, vocab, notes, modality="text_only",
                                image_cache=image_cache)
        e_m = reps.out_multimodal
        e_i = image_reps.out_multimodal
        e_t = text_reps.out_multimodal
        terms = [
            contrastive_loss(e_i, partner, tau),
            contrastive_loss(e_t, partner, tau),
            contrastive_loss(e_m, partner, tau),
            cross_contrastive_loss(e_i, e_t, partner, tau),
            cross_contrastive_loss(e_i, e_m, partner, tau),
            cross_contrastive_loss(e_t, e_m, partner, tau),
        ]
        total = terms[0]
        for term in terms[1:]:
            total = add(total, term)
        return divs(total, 6.0), reps
    raise ConfigError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Optimizer and schedule


def lr_at(step: int, optim: OptimConfig) -> float:
    """Warmup-linear schedule on 1-based steps; exact at both ends."""
    if not 1 <= step <= optim.steps:
        raise ConfigError(f"step {step} outside schedule 1..{optim.steps}")
    warm = optim.warmup_steps
    if warm > 0 and step <= warm:
        return optim.peak_lr * step / warm
    return optim.peak_lr * (optim.steps - step) / (optim.steps - warm)


def trainable_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(name for name, p in params.items() if p.requires_grad)


def grad_norm(params: dict[str, Tensor]) -> float:
    """Global L2 norm over all trainable gradients, order-independent."""
    squares = [float((params[n].grad ** 2).sum())
               for n in trainable_names(params) if params[n].grad is not None]
    return math.sqrt(math.fsum(sorted(squares)))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients to the max global norm; returns the pre-clip norm."""
    norm = grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for name in trainable_names(params):
            if params[name].grad is not None:
                params[name].grad *= factor
    return norm


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Decay applies only to rank >= 2 parameters, which leaves the
    temperature, biases and layer-norm parameters unregularized.
    """

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in trainable_names(params)}
        self.v = {n: np.zeros_like(params[n].data) for n in trainable_names(params)}

    def load_moments(self, moments: dict) -> None:
        for name in self.m:
            if name not in moments["m"] or name not in moments["v"]:
                raise ConfigError(f"checkpoint is missing optimizer state for {name!r}")
            if moments["m"][name].shape != self.m[name].shape:
                raise ConfigError(f"optimizer state shape mismatch for {name!r}")
            self.m[name] = moments["m"][name].copy()
            self.v[name] = moments["v"][name].copy()
        self.t = moments["t"]

    def moments(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name in trainable_names(params):
            p = params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if p.ndim >= 2:
                update = update + cfg.weight_decay * p.data
            p.data -= lr * update


def zero_gradients(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class RunSettings:
    seed: int = 42
    batch_pairs: int = 16
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_pairs < 1:
            raise ConfigError("batch_pairs must be positive")
        if not (0 <= self.val_fraction < 1):
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "batch_pairs": self.batch_pairs,
                "val_fraction": self.val_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "RunSettings":
        return cls(**d)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: AdamW
    step: int
    model_cfg: ModelConfig
    loss_cfg: LossConfig
    optim_cfg: OptimConfig
    run: RunSettings
    vocab: Vocab
    metrics: list[dict] = field(default_factory=list)

    def configs(self) -> dict:
        return {
            "model": self.model_cfg.to_dict(),
            "loss": self.loss_cfg.to_dict(),
            "optim": self.optim_cfg.to_dict(),
            "run": self.run.to_dict(),
        }


def init_state(model_cfg: ModelConfig, loss_cfg: LossConfig, optim_cfg: OptimConfig,
               run: RunSettings, vocab: Vocab) -> TrainState:
    if loss_cfg.mode is not None and loss_cfg.mode != model_cfg.mode:
        raise ConfigError(f"loss mode {loss_cfg.mode!r} contradicts model mode "
                          f"{model_cfg.mode!r}")
    params = init_params(model_cfg, run.seed)
    params[TAU_NAME] = Tensor(np.asarray(loss_cfg.tau_init), requires_grad=True)
    return TrainState(params=params, optimizer=AdamW(params, optim_cfg), step=0,
                      model_cfg=model_cfg, loss_cfg=loss_cfg, optim_cfg=optim_cfg,
                      run=run, vocab=vocab)


def restore_params(arrays: dict[str, np.ndarray], model_cfg: ModelConfig) -> dict[str, Tensor]:
    params = {}
    for name, data in arrays.items():
        frozen = model_cfg.freeze_vision and name.startswith("vision.")
        params[name] = Tensor(data.copy(), requires_grad=not frozen)
    return params


def load_state(path) -> TrainState:
    arrays, moments, step, configs, vocab_tokens = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(configs["model"])
    loss_cfg = LossConfig.from_dict(configs["loss"])
    optim_cfg = OptimConfig.from_dict(configs["optim"])
    run = RunSettings.from_dict(configs["run"])
    params = restore_params(arrays, model_cfg)
    if TAU_NAME not in params:
        raise ConfigError(f"{path}: checkpoint has no temperature parameter")
    optimizer = AdamW(params, optim_cfg)
    if moments is not None:
        optimizer.load_moments(moments)
    return TrainState(params=params, optimizer=optimizer, step=step,
                      model_cfg=model_cfg, loss_cfg=loss_cfg, optim_cfg=optim_cfg,
                      run=run, vocab=Vocab(vocab_tokens))


def save_state(state: TrainState, path) -> None:
    save_checkpoint(path, state.params, state.optimizer.moments(), state.step,
                    state.configs(), state.vocab.tokens)


def batch_stream(pairs: list[Pair], batch_pairs: int, seed: int):
    """Deterministic endless sequence of training batches.

    Epoch e is exactly make_batches(pairs, batch_pairs, seed, e), so any
    position in the stream can be recomputed from scratch; resuming at
    step k means skipping the first k batches.
    """
    epoch = 0
    while True:
        for batch in make_batches(pairs, batch_pairs, seed, epoch):
            yield batch
        epoch += 1


def validation_loss(params, model_cfg, vocab, notes_by_id, val_pairs,
                    loss_cfg, batch_pairs, seed, image_cache=None,
                    max_batches: int = 4) -> float | None:
    """Mean loss over a few deterministic validation batches, no gradients."""
    if len(val_pairs) < batch_pairs:
        return None
    batches = make_batches(val_pairs, batch_pairs, seed, 0)[:max_batches]
    values = []
    with no_grad():
        for batch in batches:
            notes = [notes_by_id[i] for i in batch.note_ids]
            loss, _ = batch_loss(params, model_cfg, vocab, notes, batch.partner,
                                 loss_cfg, image_cache=image_cache)
            values.append(loss.item())
    return math.fsum(sorted(values)) / len(values)


def train(state: TrainState, notes: list[Note], pairs: list[Pair],
          out_dir=None, steps: int | None = None,
          on_step=None) -> TrainState:
    """Run the loop from state.step up to the schedule end (or ``steps``).

    Appends one metrics record per step to out_dir/metrics.jsonl when
    out_dir is given and checkpoints there at the end. A non-finite loss
    aborts with the oldest offending graph node named.
    """
    notes_by_id = {n.id: n for n in notes}
    if len(notes_by_id) != len(notes):
        raise ConfigError("duplicate note ids in training corpus")
    train_pairs, _ = split_pairs(pairs, state.run.val_fraction, state.run.seed)
    stop = state.optim_cfg.steps if steps is None else min(steps, state.optim_cfg.steps)
    if state.step >= stop:
        return state

    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        if state.step == 0 and os.path.exists(metrics_path):
            os.remove(metrics_path)

    image_cache: dict = {}
    stream = batch_stream(train_pairs, state.run.batch_pairs, state.run.seed)
    for _ in range(state.step):
        next(stream)

    for step in range(state.step + 1, stop + 1):
        batch = next(stream)
        batch_notes = [notes_by_id[i] for i in batch.note_ids]
        loss, _ = batch_loss(state.params, state.model_cfg, state.vocab,
                             batch_notes, batch.partner, state.loss_cfg,
                             image_cache=image_cache)
        value = loss.item()
        if not math.isfinite(value):
            origin = first_nonfinite(loss)
            where = f"op={origin.op!r}, shape={origin.shape}" if origin else "unknown node"
            raise NumericError(f"non-finite loss at step {step}; first bad value: {where}")
        backward(loss)
        norm = clip_gradients(state.params, state.optim_cfg.max_grad_norm)
        lr = lr_at(step, state.optim_cfg)
        state.optimizer.step(state.params, lr)
        zero_gradients(state.params)
        state.step = step
        record = {"step": step, "loss": value, "lr": lr,
                  "tau": state.params[TAU_NAME].item(), "grad_norm": norm}
        state.metrics.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, separators=(",", ":")))
                fh.write("\n")
        if on_step is not None:
            on_step(state, record)

    if out_dir is not None:
        save_state(state, os.path.join(out_dir, "checkpoint.mlrm"))
    return state
