"""Low-rank adapters over a frozen, optionally 4-bit quantized base.

Quantization is blockwise absmax: each block of ``block_size`` flattened
values is divided by its largest magnitude and every normalised value is
replaced by the index of the nearest codebook level. The NF4 codebook places
its levels at normal-distribution quantiles, which suits weights that are
roughly Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, FormatError
from .model import ATTENTION_KINDS, LINEAR_KINDS, ModelConfig, ModelWeights, linear_names, param_shapes
from .numerics import RngState, Tensor

# Regenerated in tests from the inverse normal CDF: 8 quantiles on the
# positive half and 7 on the negative half of linspace(0.9677, 0.5), joined
# at zero and divided by the largest magnitude.
NF4_CODEBOOK = np.array(
    [
        -1.0,
        -0.69621404577398545,
        -0.52509276953607121,
        -0.39493361921257271,
        -0.28445348206749502,
        -0.18478150019347434,
        -0.091054015259703669,
        0.0,
        0.079583848591969126,
        0.16093722491958503,
        0.24612289600943402,
        0.33792933751945522,
        0.44072736736128608,
        0.56263741204003527,
        0.72297757474787389,
        1.0,
    ]
)
NF4_OFFSET = 0.9677
UNIFORM4_CODEBOOK = np.linspace(-1.0, 1.0, 16)
CODEBOOKS = {"nf4": NF4_CODEBOOK, "uniform4": UNIFORM4_CODEBOOK}
DEFAULT_BLOCK_SIZE = 64
# N(0, 0.02) read as variance 0.02
LORA_A_STD = 0.02**0.5


def build_nf4_codebook() -> np.ndarray:
    return NF4_CODEBOOK.copy()


def max_codebook_gap(codebook: np.ndarray = NF4_CODEBOOK) -> float:
    return float(np.diff(codebook).max())


@dataclass(frozen=True)
class QuantizedMatrix:
    """4-bit codes packed two per byte (even index in the low nibble).

    The flattened matrix is zero-padded up to a whole number of blocks; padded
    positions carry the code of 0.0 and are dropped on dequantization.
    """

    shape: tuple[int, ...]
    block_size: int
    scales: np.ndarray
    codes: np.ndarray
    codebook: str = "nf4"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return len(self.scales)

    def unpacked_codes(self) -> np.ndarray:
        n = self.n_blocks * self.block_size
        out = np.empty(2 * len(self.codes), dtype=np.uint8)
        out[0::2] = self.codes & 0x0F
        out[1::2] = self.codes >> 4
        return out[:n]

    def nbytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes


def _pack(codes: np.ndarray) -> np.ndarray:
    if len(codes) % 2:
        codes = np.append(codes, 0).astype(np.uint8)
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def quantize_blockwise(m: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE, codebook: str = "nf4") -> QuantizedMatrix:
    if block_size < 2:
        raise ConfigError(f"block_size must be >= 2, got {block_size}")
    if codebook not in CODEBOOKS:
        raise ConfigError(f"unknown codebook {codebook!r}")
    levels = CODEBOOKS[codebook]
    arr = np.asarray(m, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise nx.NumericError("cannot quantize non-finite values")
    flat = arr.reshape(-1)
    n_blocks = max(1, -(-flat.size // block_size))
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    scales = np.abs(blocks).max(axis=1).astype(np.float32)
    safe = np.where(scales > 0, scales, 1.0).astype(np.float64)
    normalised = blocks.astype(np.float64) / safe[:, None]
    # argmin keeps the first minimum, so exact ties go to the lower index
    codes = np.abs(normalised[..., None] - levels).argmin(axis=-1).astype(np.uint8).reshape(-1)
    return QuantizedMatrix(tuple(arr.shape), block_size, scales, _pack(codes), codebook)


def quantize_nf4(m: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedMatrix:
    return quantize_blockwise(m, block_size, "nf4")


def dequantize_nf4(q: QuantizedMatrix) -> np.ndarray:
    """Reconstruct ``codebook[code] * scale`` in float32 with the original shape."""
    if q.codebook not in CODEBOOKS:
        raise FormatError(f"unknown codebook {q.codebook!r}")
    levels = CODEBOOKS[q.codebook].astype(np.float32)
    if len(q.codes) != -(-q.n_blocks * q.block_size // 2) or q.n_blocks * q.block_size < q.size:
        raise FormatError("quantized matrix has inconsistent code/scale counts")
    codes = q.unpacked_codes()
    if codes.max(initial=0) >= len(levels):
        raise FormatError("code index outside codebook")
    values = levels[codes].reshape(q.n_blocks, q.block_size) * q.scales[:, None]
    return values.reshape(-1)[: q.size].reshape(q.shape).astype(np.float32)


dequantize = dequantize_nf4


# --------------------------------------------------------------------------- #
# LoRA
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ATTENTION_KINDS
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigError(f"LoRA rank must be a positive integer, got {self.rank!r}")
        if not self.alpha > 0:
            raise ConfigError("LoRA alpha must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("LoRA dropout must lie in [0, 1)")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def resolve(self, cfg: ModelConfig) -> list[str]:
        """Expand kind names ("wq") to every layer; full names pass through."""
        full = set(linear_names(cfg))
        names: list[str] = []
        for t in self.targets:
            if t in LINEAR_KINDS:
                names.extend(n for n in linear_names(cfg, (t,)) if n not in names)
            elif t in full:
                if t not in names:
                    names.append(t)
            else:
                raise ConfigError(f"unknown LoRA target {t!r}")
        shapes = param_shapes(cfg)
        for n in names:
            if self.rank > min(shapes[n]):
                raise ConfigError(f"rank {self.rank} exceeds dimensions of {n} {shapes[n]}")
        return sorted(names, key=list(shapes).index)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets), "dropout": self.dropout}


def effective_weight(base: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, r: int) -> np.ndarray:
    """``base + (alpha / r) * (B @ A)``."""
    base, a, b = np.asarray(base), np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or b.shape[1] != a.shape[0] or (b.shape[0], a.shape[1]) != base.shape:
        raise DimensionError(f"LoRA shapes do not conform: base {base.shape}, A {a.shape}, B {b.shape}")
    return base + (alpha / r) * (b @ a)


@dataclass
class AdaptedModel:
    """A frozen base plus trainable ``A [r, in]`` / ``B [out, r]`` pairs on the target linears.

    ``base`` holds the dense float32 weights the forward pass uses; when the
    base is quantized those are the dequantized values of ``quantized``, which
    is the authoritative stored form.
    """

    config: ModelConfig
    lora: LoraConfig
    base: ModelWeights
    lora_a: dict[str, Tensor]
    lora_b: dict[str, Tensor]
    quantized: dict[str, QuantizedMatrix] = field(default_factory=dict)
    training: bool = False
    dropout_rng: np.random.Generator | None = None

    @property
    def targets(self) -> list[str]:
        return list(self.lora_a)

    def weight(self, name: str) -> Tensor:
        return self.base.params[name]

    def linear(self, name: str, x: Tensor) -> Tensor:
        y = nx.matmul(x, nx.transpose(self.base.params[name]))
        if name not in self.lora_a:
            return y
        h = x
        if self.training and self.lora.dropout > 0:
            if self.dropout_rng is None:
                self.dropout_rng = RngState(0).generator("lora-dropout")
            h = nx.dropout(h, self.lora.dropout, self.dropout_rng)
        delta = nx.matmul(nx.matmul(h, nx.transpose(self.lora_a[name])), nx.transpose(self.lora_b[name]))
        return y + delta * self.lora.scaling

    def trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in self.lora_a:
            out[name + ".lora_a"] = self.lora_a[name]
            out[name + ".lora_b"] = self.lora_b[name]
        return out

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable().values())

    def num_parameters(self) -> int:
        return self.base.num_parameters() + self.num_trainable()

    def frozen_state(self) -> dict[str, np.ndarray]:
        """The stored frozen arrays: dense non-targets plus codes/scales of quantized targets."""
        out: dict[str, np.ndarray] = {}
        for name, p in self.base.params.items():
            if name in self.quantized:
                q = self.quantized[name]
                out[name + ".codes"] = q.codes
                out[name + ".scales"] = q.scales
            else:
                out[name] = p.data
        return out

    def copy(self) -> "AdaptedModel":
        return AdaptedModel(
            config=self.config,
            lora=self.lora,
            base=self.base.copy(),
            lora_a={k: Tensor(v.data.copy()) for k, v in self.lora_a.items()},
            lora_b={k: Tensor(v.data.copy()) for k, v in self.lora_b.items()},
            quantized=dict(self.quantized),
        )


def quantize_weights(w: ModelWeights, names: list[str], block_size: int = DEFAULT_BLOCK_SIZE) -> tuple[ModelWeights, dict[str, QuantizedMatrix]]:
    """Dense weights with ``names`` replaced by their quantize/dequantize round trip."""
    arrays = {k: v.copy() for k, v in w.arrays().items()}
    quantized = {}
    for n in names:
        quantized[n] = quantize_nf4(arrays[n], block_size)
        arrays[n] = dequantize_nf4(quantized[n])
    return ModelWeights.from_arrays(w.config, arrays), quantized


def attach_lora(
    w: ModelWeights,
    cfg: LoraConfig,
    quantize_base: bool,
    rng: RngState,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> AdaptedModel:
    names = cfg.resolve(w.config)
    if quantize_base:
        base, quantized = quantize_weights(w, names, block_size)
    else:
        base, quantized = w.copy(), {}
    base.set_trainable(False)
    shapes = param_shapes(w.config)
    lora_a, lora_b = {}, {}
    for n in names:
        out_dim, in_dim = shapes[n]
        a = rng.generator("lora_a", n).standard_normal((cfg.rank, in_dim)) * LORA_A_STD
        lora_a[n] = Tensor(a.astype(np.float32), requires_grad=True)
        lora_b[n] = Tensor(np.zeros((out_dim, cfg.rank), dtype=np.float32), requires_grad=True)
    return AdaptedModel(w.config, cfg, base, lora_a, lora_b, quantized)


def merge_lora(adapted: AdaptedModel) -> ModelWeights:
    """Dense weights with every adapter delta folded into its (dequantized) base."""
    arrays = {k: v.copy() for k, v in adapted.base.arrays().items()}
    for n in adapted.lora_a:
        merged = effective_weight(arrays[n], adapted.lora_a[n].data, adapted.lora_b[n].data, adapted.lora.alpha, adapted.lora.rank)
        arrays[n] = merged.astype(np.float32)
    return ModelWeights.from_arrays(adapted.config, arrays)


def trainable_fraction(adapted: AdaptedModel) -> float:
    return adapted.num_trainable() / adapted.num_parameters()


def lora_parameter_count(shapes: Mapping[str, tuple[int, int]], rank: int) -> int:
    return sum(rank * (out_dim + in_dim) for out_dim, in_dim in shapes.values())
