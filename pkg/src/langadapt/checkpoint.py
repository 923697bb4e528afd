"""Single-file checkpoint container.

Layout::

    u64 little-endian header length N
    N bytes of UTF-8 JSON header
    tensor payload, little-endian, packed back to back in index order

The header carries the model config, a tensor index (dtype, shape, offset and
length into the payload), the ordered list of completed pipeline stages and a
SHA-256 of the payload. The tokenizer vocabulary rides along in the header
so that evaluation and chat need nothing but the checkpoint. Quantized
adapter bases are stored as packed 4-bit codes plus their float32 block
scales, so a QLoRA checkpoint never holds the dense target weights.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdaptedModel, LoraConfig, QuantizedMatrix, dequantize_nf4
from .errors import FormatError, IntegrityError, OrderingError
from .model import ModelConfig, ModelWeights, param_shapes
from .numerics import Tensor
from .tokenizer import Vocabulary

FORMAT_VERSION = 1
DTYPES = ("f32", "packed-u4")
_PREFIX = struct.Struct("<Q")


@dataclass
class Checkpoint:
    model: ModelWeights | AdaptedModel
    provenance: list[dict] = field(default_factory=list)
    vocab: Vocabulary | None = None

    @property
    def stages(self) -> list[str]:
        return [p["stage"] for p in self.provenance]

    def require(self, stage: str, command: str) -> None:
        if stage not in self.stages:
            done = ", ".join(self.stages) or "none"
            raise OrderingError(f"{command} needs a checkpoint that has completed {stage!r} (completed: {done})")

    def appended(self, model, entry: dict) -> "Checkpoint":
        """A new checkpoint for ``model`` whose provenance is this one's plus ``entry``."""
        if "stage" not in entry:
            raise FormatError("provenance entries need a 'stage'")
        return Checkpoint(model, [dict(p) for p in self.provenance] + [dict(entry)], self.vocab)


def digest_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _tensors(model) -> tuple[dict, list[tuple[str, dict, bytes]]]:
    """Header fields describing the model, and (name, index entry, bytes) triples."""
    out: list[tuple[str, dict, bytes]] = []
    if isinstance(model, ModelWeights):
        for name, p in model.params.items():
            out.append((name, {"dtype": "f32", "shape": list(p.data.shape)}, _f32(p.data)))
        return {"kind": "dense"}, out
    if not isinstance(model, AdaptedModel):
        raise FormatError(f"cannot checkpoint a {type(model).__name__}")
    for name, p in model.base.params.items():
        q = model.quantized.get(name)
        if q is None:
            out.append((name, {"dtype": "f32", "shape": list(p.data.shape)}, _f32(p.data)))
            continue
        out.append((name + ".scales", {"dtype": "f32", "shape": [q.n_blocks]}, _f32(q.scales)))
        entry = {"dtype": "packed-u4", "shape": list(q.shape), "block_size": q.block_size, "codebook": q.codebook, "scales": name + ".scales"}
        out.append((name, entry, np.ascontiguousarray(q.codes, dtype=np.uint8).tobytes()))
    for name in model.lora_a:
        for suffix, t in (("lora_a", model.lora_a[name]), ("lora_b", model.lora_b[name])):
            out.append((f"{name}.{suffix}", {"dtype": "f32", "shape": list(t.data.shape)}, _f32(t.data)))
    return {"kind": "adapted", "lora": model.lora.to_dict()}, out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta, tensors = _tensors(ckpt.model)
    index = {}
    offset = 0
    for name, entry, blob in tensors:
        index[name] = {**entry, "offset": offset, "length": len(blob)}
        offset += len(blob)
    payload = b"".join(blob for _, _, blob in tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.model.config.to_dict(),
        **meta,
        "tensors": index,
        "provenance": ckpt.provenance,
        "vocab": ckpt.vocab.to_json() if ckpt.vocab is not None else None,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _PREFIX.pack(len(raw)) + raw + payload


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically: the target either keeps its old content or gets the whole new file."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_header(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < _PREFIX.size:
        raise IntegrityError("checkpoint is truncated (no header length)")
    (n,) = _PREFIX.unpack_from(data)
    if _PREFIX.size + n > len(data):
        raise IntegrityError(f"checkpoint is truncated (header of {n} bytes, file of {len(data)})")
    try:
        header = json.loads(data[_PREFIX.size : _PREFIX.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("checkpoint header is not a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})")
    return header, memoryview(data)[_PREFIX.size + n :]


def _check_index(index: dict, payload_len: int) -> None:
    spans = []
    for name, e in index.items():
        if e.get("dtype") not in DTYPES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {e.get('dtype')!r}")
        count = int(np.prod(e["shape"]))
        if e["dtype"] == "f32":
            expected = 4 * count
        else:
            blocks = -(-count // e["block_size"])
            expected = -(-blocks * e["block_size"] // 2)
        if e["length"] != expected:
            raise FormatError(f"tensor {name!r}: length {e['length']} does not match shape {e['shape']}")
        spans.append((e["offset"], e["offset"] + e["length"], name))
    spans.sort()
    end = 0
    for start, stop, name in spans:
        if start < end:
            raise FormatError(f"tensor {name!r} overlaps the previous tensor")
        end = stop
    if end > payload_len:
        raise IntegrityError(f"checkpoint is truncated (payload needs {end} bytes, has {payload_len})")
    if end != payload_len:
        raise IntegrityError(f"checkpoint has {payload_len - end} trailing payload bytes")


def decode_checkpoint(data: bytes) -> Checkpoint:
    header, payload = _read_header(data)
    try:
        index = header["tensors"]
        config = ModelConfig.from_dict(header["config"])
        kind = header["kind"]
        provenance = list(header["provenance"])
        vocab = Vocabulary.from_json(header["vocab"]) if header.get("vocab") is not None else None
        _check_index(index, len(payload))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header is missing or has malformed field {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError("checkpoint payload does not match its recorded digest")

    def f32(name: str) -> np.ndarray:
        e = index[name]
        raw = payload[e["offset"] : e["offset"] + e["length"]]
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])

    shapes = param_shapes(config)
    if kind == "dense":
        missing = set(shapes) - set(index)
        if missing or set(index) - set(shapes):
            raise FormatError(f"dense checkpoint tensors do not match the config (missing {sorted(missing)})")
        return Checkpoint(ModelWeights.from_arrays(config, {n: f32(n) for n in shapes}), provenance, vocab)
    if kind != "adapted":
        raise FormatError(f"unknown checkpoint kind {kind!r}")

    lora = LoraConfig(**{**header["lora"], "targets": tuple(header["lora"]["targets"])})
    arrays, quantized = {}, {}
    for name, shape in shapes.items():
        e = index.get(name)
        if e is None:
            raise FormatError(f"checkpoint lacks tensor {name!r}")
        if tuple(e["shape"]) != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {e['shape']}, config implies {list(shape)}")
        if e["dtype"] == "packed-u4":
            codes = np.frombuffer(payload[e["offset"] : e["offset"] + e["length"]], dtype=np.uint8).copy()
            q = QuantizedMatrix(tuple(shape), e["block_size"], f32(e["scales"]).reshape(-1), codes, e["codebook"])
            quantized[name] = q
            arrays[name] = dequantize_nf4(q)
        else:
            arrays[name] = f32(name)
    base = ModelWeights.from_arrays(config, arrays)
    lora_a, lora_b = {}, {}
    for name in lora.resolve(config):
        lora_a[name] = Tensor(f32(name + ".lora_a"), requires_grad=True)
        lora_b[name] = Tensor(f32(name + ".lora_b"), requires_grad=True)
    return Checkpoint(AdaptedModel(config, lora, base, lora_a, lora_b, quantized), provenance, vocab)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: checkpoint not found")
    return decode_checkpoint(path.read_bytes())


def tensor_index(path: str | Path) -> dict:
    """The header's tensor index, without decoding any tensor data."""
    header, _ = _read_header(Path(path).read_bytes())
    return header["tensors"]


def stage_entry(stage: str, datasets: Sequence[str | Path] = (), **extra) -> dict:
    return {"stage": stage, "dataset_digests": [digest_file(p) for p in datasets], **extra}
