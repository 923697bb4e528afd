"""Supervised fine-tuning, preference optimization and raw-text adaptation.

All three stages share one loop: shuffle, split into mini-batches, accumulate
gradients record by record, clip, then take one AdamW step on whatever the
model reports as trainable (adapter pairs for an adapted model, every array
for a dense model that was explicitly unfrozen).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, LengthError, NumericError
from .model import forward, sequence_logprob
from .numerics import RngState, Tensor
from .templating import (
    ChatMessage,
    RawDoc,
    SftRecord,
    alpaca_prompt,
    format_chat,
    normalize_record,
)
from .tokenizer import BEGIN_OF_TEXT, EOT, Vocabulary

log = logging.getLogger(__name__)

LOSS_MASK_MODES = ("response_only", "full_sequence")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 3
    grad_clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    max_seq_len: int = 256
    loss_mask_mode: str = "response_only"
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.loss_mask_mode not in LOSS_MASK_MODES:
            raise ConfigError(f"loss_mask_mode must be one of {LOSS_MASK_MODES}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be positive when set")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def from_dict(cls, obj: Mapping, base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return replace(base or cls(), **obj)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


SFT_DEFAULTS = TrainConfig(learning_rate=2e-4, batch_size=4, epochs=3, loss_mask_mode="response_only")
DPO_DEFAULTS = TrainConfig(learning_rate=5e-5, batch_size=4, epochs=1, loss_mask_mode="response_only")
ADAPT_DEFAULTS = TrainConfig(learning_rate=2e-4, batch_size=4, epochs=3, loss_mask_mode="full_sequence")


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> float:
    """One in-place AdamW update. Returns the pre-clipping global gradient norm."""
    for name, g in grads.items():
        if name not in params:
            raise DataError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise nx.DimensionError(f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    norm = global_norm(grads)
    clip = 1.0
    if cfg.grad_clip_norm is not None and norm > cfg.grad_clip_norm:
        clip = cfg.grad_clip_norm / norm
    state.step += 1
    b1, b2 = cfg.betas
    lr = cfg.learning_rate
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif clip != 1.0:
            g = g * clip
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data = p.data
        if cfg.weight_decay:
            data = data * (1.0 - lr * cfg.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data = (data - lr * update).astype(p.data.dtype)
    return norm


# --------------------------------------------------------------------------- #
# Example encoding
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Example:
    """Token ids plus a mask over next-token targets (``mask[t]`` supervises ``ids[t + 1]``)."""

    ids: tuple[int, ...]
    mask: tuple[bool, ...]


def _join(prompt: list[int], response: list[int], max_len: int, mode: str) -> Example:
    if len(prompt) + len(response) > max_len:
        # keep the leading BOS, drop the oldest prompt tokens
        room = max_len - len(response) - 1
        if room < 0 or len(response) >= max_len:
            raise LengthError(f"response of {len(response)} tokens does not fit max_seq_len {max_len}")
        prompt = prompt[:1] + (prompt[1:][-room:] if room else [])
    ids = prompt + response
    if mode == "full_sequence":
        mask = [True] * (len(ids) - 1)
    else:
        mask = [t + 1 >= len(prompt) for t in range(len(ids) - 1)]
    return Example(tuple(ids), tuple(mask))


def sft_token_parts(vocab: Vocabulary, record: SftRecord) -> tuple[list[int], list[int]]:
    """Prompt ids through the response header, and response ids ending in EOT."""
    prompt_text = alpaca_prompt(record)[len(BEGIN_OF_TEXT) :]
    prompt = [vocab.id_of(BEGIN_OF_TEXT)] + vocab.encode(prompt_text, parse_special=False)
    response = vocab.encode(record.output, parse_special=False) + [vocab.id_of(EOT)]
    return prompt, response


def encode_sft(vocab: Vocabulary, record: SftRecord | RawDoc, mode: str, max_seq_len: int) -> Example:
    if mode not in LOSS_MASK_MODES:
        raise ConfigError(f"unknown loss mask mode {mode!r}")
    if isinstance(record, RawDoc):
        return encode_raw(vocab, record, max_seq_len)
    prompt, response = sft_token_parts(vocab, record)
    return _join(prompt, response, max_seq_len, mode)


def encode_raw(vocab: Vocabulary, doc: RawDoc, max_seq_len: int) -> Example:
    """Raw documents supervise every token after BOS; long ones keep their first ``max_seq_len`` tokens."""
    if not doc.text.strip():
        raise DataError("raw document is empty")
    ids = [vocab.id_of(BEGIN_OF_TEXT)] + vocab.encode(" " + doc.text + " ", parse_special=False) + [vocab.id_of(EOT)]
    ids = ids[:max_seq_len]
    return Example(tuple(ids), tuple([True] * (len(ids) - 1)))


def example_loss(model, ex: Example) -> Tensor:
    ids = list(ex.ids)
    return nx.cross_entropy_next_token(forward(model, ids[:-1]), ids[1:], ex.mask)


def sft_loss(model, vocab: Vocabulary, record: SftRecord | RawDoc, mode: str = "response_only", max_seq_len: int | None = None) -> Tensor:
    limit = max_seq_len or model.config.max_seq_len
    return example_loss(model, encode_sft(vocab, record, mode, min(limit, model.config.max_seq_len)))


# --------------------------------------------------------------------------- #
# Shared loop
# --------------------------------------------------------------------------- #


@dataclass
class TrainResult:
    model: object
    log: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    extra: dict = field(default_factory=dict)


def _batches(n: int, cfg: TrainConfig, rng: RngState) -> Iterable[tuple[int, list[int]]]:
    for epoch in range(cfg.epochs):
        order = rng.generator("shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            yield epoch, [int(i) for i in order[start : start + cfg.batch_size]]


def _train_loop(
    model,
    n_items: int,
    batch_loss: Callable[[list[int]], tuple[float, dict]],
    cfg: TrainConfig,
    stage: str,
    rng: RngState,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    params = model.trainable()
    if not params:
        raise ConfigError("model has no trainable parameters")
    state = OptimizerState()
    result = TrainResult(model=model)
    epoch_sum: dict[int, list[float]] = {}
    if hasattr(model, "training"):
        model.training = True
        model.dropout_rng = rng.generator("dropout")
    try:
        for epoch, batch in _batches(n_items, cfg, rng):
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
            for p in params.values():
                p.grad = None
            loss, extra = batch_loss(batch)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, cfg)
            result.steps += 1
            entry = {"stage": stage, "step": result.steps, "loss": loss, "lr": cfg.learning_rate, **extra}
            result.log.append(entry)
            epoch_sum.setdefault(epoch, []).append(loss)
            if on_step is not None:
                on_step(entry)
    finally:
        if hasattr(model, "training"):
            model.training = False
    result.epoch_losses = [float(np.mean(v)) for _, v in sorted(epoch_sum.items())]
    return result


def _supervised_loop(model, examples: Sequence[Example], cfg: TrainConfig, stage: str, rng: RngState, on_step) -> TrainResult:
    def batch_loss(batch: list[int]) -> tuple[float, dict]:
        total = 0.0
        for i in batch:
            loss = example_loss(model, examples[i]) / len(batch)
            loss.backward()
            total += float(loss.data)
        return total, {}

    return _train_loop(model, len(examples), batch_loss, cfg, stage, rng, on_step)


def run_sft(
    model,
    vocab: Vocabulary,
    dataset: Sequence[SftRecord],
    cfg: TrainConfig = SFT_DEFAULTS,
    rng: RngState | None = None,
    on_step=None,
) -> TrainResult:
    if not dataset:
        raise DataError("SFT dataset is empty")
    limit = min(cfg.max_seq_len, model.config.max_seq_len)
    examples = [encode_sft(vocab, r if isinstance(r, RawDoc) else normalize_record(r), cfg.loss_mask_mode, limit) for r in dataset]
    return _supervised_loop(model, examples, cfg, "sft", rng or RngState(cfg.seed), on_step)


# --------------------------------------------------------------------------- #
# Preference optimization
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PreferenceRecord:
    prompt: str | tuple[ChatMessage, ...]
    chosen: str
    rejected: str
    source: str = ""
    score: float | None = None

    def __post_init__(self) -> None:
        if not self.prompt or (isinstance(self.prompt, str) and not self.prompt.strip()):
            raise DataError("preference prompt is empty")
        if self.chosen == self.rejected:
            raise DataError("chosen and rejected completions are identical")
        if not isinstance(self.prompt, str):
            object.__setattr__(self, "prompt", tuple(self.prompt))


@dataclass(frozen=True)
class PreferenceLogps:
    policy_chosen: float
    policy_rejected: float
    ref_chosen: float
    ref_rejected: float

    def __post_init__(self) -> None:
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise NumericError(f"{f.name} is not finite")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def dpo_loss(lp: PreferenceLogps, beta: float) -> tuple[float, float]:
    """``-log sigmoid(beta * margin)`` and the implicit reward margin."""
    margin = (lp.policy_chosen - lp.ref_chosen) - (lp.policy_rejected - lp.ref_rejected)
    return _softplus(-beta * margin), margin


def preference_prompt_ids(vocab: Vocabulary, prompt: str | Sequence[ChatMessage]) -> list[int]:
    messages = [ChatMessage("user", prompt)] if isinstance(prompt, str) else list(prompt)
    return vocab.encode(format_chat(messages, add_generation_prompt=True), parse_special=True)


@dataclass(frozen=True)
class PreferenceExample:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]


def encode_preference(vocab: Vocabulary, rec: PreferenceRecord, max_seq_len: int) -> PreferenceExample:
    eot = vocab.id_of(EOT)
    prompt = preference_prompt_ids(vocab, rec.prompt)
    chosen = vocab.encode(rec.chosen, parse_special=False) + [eot]
    rejected = vocab.encode(rec.rejected, parse_special=False) + [eot]
    longest = max(len(chosen), len(rejected))
    trimmed = _join(prompt, [0] * longest, max_seq_len, "response_only").ids[: -longest]
    return PreferenceExample(tuple(trimmed), tuple(chosen), tuple(rejected))


def _pair_logps(model, ex: PreferenceExample) -> tuple[Tensor, Tensor]:
    chosen, _ = sequence_logprob(model, ex.prompt, ex.chosen)
    rejected, _ = sequence_logprob(model, ex.prompt, ex.rejected)
    return chosen, rejected


def preference_logps(policy, reference, ex: PreferenceExample) -> PreferenceLogps:
    with nx.no_grad():
        pc, pr = _pair_logps(policy, ex)
        rc, rr = _pair_logps(reference, ex)
    return PreferenceLogps(float(pc.data), float(pr.data), float(rc.data), float(rr.data))


def margins(policy, reference, examples: Sequence[PreferenceExample]) -> list[float]:
    return [dpo_loss(preference_logps(policy, reference, ex), 0.0)[1] for ex in examples]


def _check_structure(model, ref_model) -> None:
    if model.config != ref_model.config:
        raise ConfigError("reference model config differs from the policy model")
    names = set(getattr(model, "base", model).params)
    ref_names = set(getattr(ref_model, "base", ref_model).params)
    if names != ref_names:
        raise ConfigError("reference model parameters differ from the policy model")


def run_dpo(
    model,
    ref_model,
    vocab: Vocabulary,
    dataset: Sequence[PreferenceRecord],
    cfg: TrainConfig = DPO_DEFAULTS,
    dpo: DpoConfig = DpoConfig(),
    on_step=None,
) -> TrainResult:
    """Preference optimization against a frozen reference snapshot.

    Reference log-probabilities are computed once up front; the reference is
    never touched again.
    """
    _check_structure(model, ref_model)
    if not dataset:
        raise DataError("preference dataset is empty")
    limit = min(cfg.max_seq_len, model.config.max_seq_len)
    examples = [encode_preference(vocab, r, limit) for r in dataset]
    with nx.no_grad():
        ref = [tuple(float(t.data) for t in _pair_logps(ref_model, ex)) for ex in examples]
    before = margins(model, ref_model, examples)
    seen_margins: list[float] = []
    seen_correct: list[bool] = []

    def batch_loss(batch: list[int]) -> tuple[float, dict]:
        total = 0.0
        batch_margins = []
        for i in batch:
            pc, pr = _pair_logps(model, examples[i])
            rc, rr = ref[i]
            margin = (pc - rc) - (pr - rr)
            loss = nx.neg(nx.log_sigmoid(margin * dpo.beta)) / len(batch)
            loss.backward()
            total += float(loss.data)
            batch_margins.append(float(margin.data))
        seen_margins.extend(batch_margins)
        seen_correct.extend(m > 0 for m in batch_margins)
        return total, {
            "margin": float(np.mean(batch_margins)),
            "running_margin": float(np.mean(seen_margins)),
            "reward_accuracy": float(np.mean(seen_correct)),
        }

    result = _train_loop(model, len(examples), batch_loss, cfg, "dpo", RngState(cfg.seed), on_step)
    after = margins(model, ref_model, examples)
    result.extra.update(margin_before=float(np.mean(before)), margin_after=float(np.mean(after)))
    return result


def filter_preferences(
    records: Iterable[PreferenceRecord],
    min_score: float = -math.inf,
    excluded_sources: Iterable[str] = (),
) -> list[PreferenceRecord]:
    """Drop records scored below ``min_score`` (unscored records pass) or from an excluded source."""
    excluded = set(excluded_sources)
    return [
        r
        for r in records
        if r.source not in excluded and (r.score is None or r.score >= min_score)
    ]


# --------------------------------------------------------------------------- #
# Language adaptation
# --------------------------------------------------------------------------- #


def perplexity(model, vocab: Vocabulary, docs: Sequence[RawDoc], max_seq_len: int | None = None) -> float:
    """``exp`` of the mean next-token NLL over every supervised token of ``docs``."""
    if not docs:
        raise DataError("perplexity needs at least one document")
    limit = min(max_seq_len or model.config.max_seq_len, model.config.max_seq_len)
    total, count = 0.0, 0
    with nx.no_grad():
        for d in docs:
            ex = encode_raw(vocab, d, limit)
            n = sum(ex.mask)
            total += float(example_loss(model, ex).data) * n
            count += n
    return math.exp(total / count)


def run_adaptation(
    model,
    vocab: Vocabulary,
    corpus: Sequence[RawDoc],
    cfg: TrainConfig = ADAPT_DEFAULTS,
    heldout: Sequence[RawDoc] = (),
    source_heldout: Sequence[RawDoc] = (),
    on_step=None,
    stage: str = "adapt",
) -> TrainResult:
    if not corpus:
        raise DataError("adaptation corpus is empty")
    limit = min(cfg.max_seq_len, model.config.max_seq_len)
    examples = [encode_raw(vocab, d, limit) for d in corpus]
    extra = {}
    if heldout:
        extra["perplexity_before"] = perplexity(model, vocab, heldout, limit)
    if source_heldout:
        extra["source_perplexity_before"] = perplexity(model, vocab, source_heldout, limit)
    result = _supervised_loop(model, examples, cfg, stage, RngState(cfg.seed), on_step)
    if heldout:
        extra["perplexity_after"] = perplexity(model, vocab, heldout, limit)
    if source_heldout:
        extra["source_perplexity_after"] = perplexity(model, vocab, source_heldout, limit)
    result.extra.update(extra)
    for key, value in extra.items():
        log.info("%s %s = %.4f", stage, key, value)
    return result
