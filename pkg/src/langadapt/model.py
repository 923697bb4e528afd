"""A small LLaMA-flavoured causal transformer.

Pre-norm residual blocks with RMSNorm, rotary positions, multi-head causal
attention and a SiLU-gated feed-forward. The output head is untied from the
token embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, LengthError
from .numerics import RngState, Tensor

LINEAR_KINDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
ATTENTION_KINDS = ("wq", "wk", "wv", "wo")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 256
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary pairing")
        if self.max_seq_len < 16:
            raise ConfigError("max_seq_len must be at least 16")
        if not self.rope_theta > 0 or not self.norm_eps > 0:
            raise ConfigError("rope_theta and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        for kind in ATTENTION_KINDS:
            shapes[p + kind] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (ff, d)
        shapes[p + "w_up"] = (ff, d)
        shapes[p + "w_down"] = (d, ff)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


def linear_names(cfg: ModelConfig, kinds: Iterable[str] = LINEAR_KINDS) -> list[str]:
    kinds = tuple(kinds)
    return [f"layers.{i}.{k}" for i in range(cfg.n_layers) for k in kinds]


class LanguageModel(Protocol):
    config: ModelConfig

    def weight(self, name: str) -> Tensor: ...

    def linear(self, name: str, x: Tensor) -> Tensor: ...


@dataclass
class ModelWeights:
    """Dense weights. Linear layers are stored ``[out, in]``; ``lm_head`` is ``[d_model, vocab]``."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"weights do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], trainable: bool = False) -> "ModelWeights":
        return cls(config, {k: Tensor(np.array(v, dtype=np.float32), requires_grad=trainable) for k, v in arrays.items()})

    def weight(self, name: str) -> Tensor:
        return self.params[name]

    def linear(self, name: str, x: Tensor) -> Tensor:
        return nx.matmul(x, nx.transpose(self.params[name]))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def set_trainable(self, flag: bool) -> "ModelWeights":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def copy(self) -> "ModelWeights":
        return ModelWeights.from_arrays(self.config, {k: v.copy() for k, v in self.arrays().items()})

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def count_parameters(cfg: ModelConfig) -> int:
    d, ff, v, n = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_layers
    return 2 * v * d + d + n * (4 * d * d + 3 * d * ff + 2 * d)


def init_model(cfg: ModelConfig, rng: RngState) -> ModelWeights:
    """Scaled-normal init (std 0.02); norm gains start at exactly one."""
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            arrays[name] = (rng.generator("init", name).standard_normal(shape) * INIT_STD).astype(np.float32)
    return ModelWeights.from_arrays(cfg, arrays)


@lru_cache(maxsize=64)
def _rope_tables(t: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _heads(x: Tensor, t: int, h: int, hd: int) -> Tensor:
    return nx.transpose(nx.reshape(x, (t, h, hd)), (1, 0, 2))


def forward(w: LanguageModel, tokens: Sequence[int]) -> Tensor:
    """Logits ``[T, vocab]`` for every position of ``tokens``."""
    cfg = w.config
    t = len(tokens)
    if t < 1:
        raise LengthError("forward needs at least one token")
    if t > cfg.max_seq_len:
        raise LengthError(f"sequence of {t} tokens exceeds max_seq_len {cfg.max_seq_len}")
    h, hd = cfg.n_heads, cfg.head_dim
    cos, sin = _rope_tables(t, hd, float(cfg.rope_theta))
    scale = 1.0 / math.sqrt(hd)

    x = nx.embedding(w.weight("tok_emb"), tokens)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = nx.rms_norm(x, w.weight(p + "attn_norm"), cfg.norm_eps)
        q = nx.rotary(_heads(w.linear(p + "wq", a), t, h, hd), cos, sin)
        k = nx.rotary(_heads(w.linear(p + "wk", a), t, h, hd), cos, sin)
        v = _heads(w.linear(p + "wv", a), t, h, hd)
        probs = nx.causal_softmax(nx.matmul(q, nx.transpose(k, (0, 2, 1))) * scale)
        o = nx.reshape(nx.transpose(nx.matmul(probs, v), (1, 0, 2)), (t, cfg.d_model))
        x = x + w.linear(p + "wo", o)
        f = nx.rms_norm(x, w.weight(p + "ffn_norm"), cfg.norm_eps)
        gated = nx.silu(w.linear(p + "w_gate", f)) * w.linear(p + "w_up", f)
        x = x + w.linear(p + "w_down", gated)
    x = nx.rms_norm(x, w.weight("final_norm"), cfg.norm_eps)
    return nx.matmul(x, w.weight("lm_head"))


def sequence_logprob(w: LanguageModel, prompt_ids: Sequence[int], continuation_ids: Sequence[int]) -> tuple[Tensor, np.ndarray]:
    """Differentiable sum of continuation log-probabilities, plus the per-position log-softmax values."""
    if not prompt_ids:
        raise DataError("prompt must contain at least one token")
    if not continuation_ids:
        raise DataError("continuation must be non-empty")
    ids = list(prompt_ids) + list(continuation_ids)
    if len(ids) > w.config.max_seq_len:
        raise LengthError(f"prompt + continuation of {len(ids)} tokens exceeds max_seq_len {w.config.max_seq_len}")
    logp = nx.log_softmax_rows(forward(w, ids[:-1]))
    n = len(prompt_ids)
    rows = list(range(n - 1, len(ids) - 1))
    picked = nx.pick(logp, rows, ids[n:])
    return nx.sum_all(picked), logp.data[rows]


def loglikelihood(w: LanguageModel, prompt_ids: Sequence[int], continuation_ids: Sequence[int]) -> tuple[float, bool]:
    with nx.no_grad():
        total, rows = sequence_logprob(w, prompt_ids, continuation_ids)
    greedy = bool(np.all(rows.argmax(axis=-1) == np.asarray(continuation_ids)))
    return float(total.data), greedy


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    top_p: float = 1.0
    max_new_tokens: int = 64
    stop_ids: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Indices of the smallest highest-probability set whose mass reaches ``top_p``."""
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    keep = int(np.searchsorted(cumulative, top_p * cumulative[-1], side="left")) + 1
    return order[: min(keep, len(order))]


def sample_next(logits: np.ndarray, p: SamplingParams, rng: np.random.Generator) -> int:
    if p.temperature == 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / p.temperature
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    kept = nucleus(probs, p.top_p)
    mass = probs[kept]
    u = rng.random() * mass.sum()
    pick = int(np.searchsorted(np.cumsum(mass), u, side="right"))
    return int(kept[min(pick, len(kept) - 1)])


def generate(w: LanguageModel, prompt_ids: Sequence[int], p: SamplingParams) -> list[int]:
    """New token ids; a sampled stop token ends generation and is not returned."""
    ids = list(prompt_ids)
    if not ids:
        raise DataError("prompt must contain at least one token")
    if len(ids) > w.config.max_seq_len:
        raise LengthError(f"prompt of {len(ids)} tokens exceeds max_seq_len {w.config.max_seq_len}")
    rng = RngState(p.seed).generator("generate")
    out: list[int] = []
    with nx.no_grad():
        while len(out) < p.max_new_tokens and len(ids) < w.config.max_seq_len:
            logits = forward(w, ids).data[-1]
            token = sample_next(logits, p, rng)
            if token in p.stop_ids:
                break
            out.append(token)
            ids.append(token)
    return out
