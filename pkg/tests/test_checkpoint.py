import json
import struct

import numpy as np
import pytest

from langadapt.adapters import LoraConfig, attach_lora
from langadapt.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    stage_entry,
    tensor_index,
)
from langadapt.errors import FormatError, IntegrityError, OrderingError
from langadapt.model import forward, param_shapes
from langadapt.numerics import RngState


def split(data: bytes) -> tuple[dict, bytes]:
    (n,) = struct.unpack_from("<Q", data)
    return json.loads(data[8 : 8 + n]), data[8 + n :]


def join(header: dict, payload: bytes) -> bytes:
    raw = json.dumps(header).encode()
    return struct.pack("<Q", len(raw)) + raw + payload


@pytest.fixture
def dense_ckpt(tiny_model, small_vocab):
    return Checkpoint(tiny_model, [{"stage": "pretrain", "dataset_digests": []}], small_vocab)


@pytest.fixture
def adapted_ckpt(tiny_model, small_vocab):
    model = attach_lora(tiny_model, LoraConfig(rank=2), True, RngState(1), block_size=16)
    for t in model.lora_b.values():
        t.data[...] = 0.01
    return Checkpoint(model, [{"stage": "pretrain"}, {"stage": "sft"}], small_vocab)


class TestRoundTrip:
    @pytest.mark.parametrize("which", ["dense_ckpt", "adapted_ckpt"])
    def test_save_load_save_is_byte_identical(self, which, request, tmp_path):
        ckpt = request.getfixturevalue(which)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.provenance == ckpt.provenance
        assert loaded.vocab.to_json() == ckpt.vocab.to_json()

    def test_adapted_forward_survives(self, adapted_ckpt):
        loaded = decode_checkpoint(encode_checkpoint(adapted_ckpt))
        tokens = [1, 2, 3, 4]
        np.testing.assert_array_equal(forward(loaded.model, tokens).data, forward(adapted_ckpt.model, tokens).data)

    def test_quantized_targets_are_not_stored_dense(self, adapted_ckpt):
        header, _ = split(encode_checkpoint(adapted_ckpt))
        for name in adapted_ckpt.model.quantized:
            assert header["tensors"][name]["dtype"] == "packed-u4"
            assert header["tensors"][name]["codebook"] == "nf4"
        assert header["kind"] == "adapted"

    def test_offsets_reconstruct_shapes(self, dense_ckpt, tmp_path):
        save_checkpoint(dense_ckpt, tmp_path / "m.ckpt")
        index = tensor_index(tmp_path / "m.ckpt")
        offset = 0
        for name, shape in param_shapes(dense_ckpt.model.config).items():
            entry = index[name]
            assert tuple(entry["shape"]) == shape
            assert entry["offset"] == offset
            assert entry["length"] == 4 * int(np.prod(shape))
            offset += entry["length"]

    def test_header_fields(self, dense_ckpt):
        header, payload = split(encode_checkpoint(dense_ckpt))
        assert header["format_version"] == FORMAT_VERSION
        assert header["config"] == dense_ckpt.model.config.to_dict()
        assert header["provenance"][0]["stage"] == "pretrain"
        assert len(payload) == sum(e["length"] for e in header["tensors"].values())


class TestCorruption:
    def test_truncated(self, dense_ckpt):
        data = encode_checkpoint(dense_ckpt)
        for cut in (4, 20, len(data) - 1):
            with pytest.raises(IntegrityError):
                decode_checkpoint(data[:cut])

    def test_trailing_bytes(self, dense_ckpt):
        with pytest.raises(IntegrityError):
            decode_checkpoint(encode_checkpoint(dense_ckpt) + b"\0\0\0\0")

    def test_flipped_payload_byte(self, dense_ckpt):
        data = bytearray(encode_checkpoint(dense_ckpt))
        data[-3] ^= 0xFF
        with pytest.raises(IntegrityError):
            decode_checkpoint(bytes(data))

    def test_version_mismatch(self, dense_ckpt):
        header, payload = split(encode_checkpoint(dense_ckpt))
        header["format_version"] = FORMAT_VERSION + 1
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(join(header, payload))

    def test_unknown_dtype(self, dense_ckpt):
        header, payload = split(encode_checkpoint(dense_ckpt))
        header["tensors"]["tok_emb"]["dtype"] = "bf16"
        with pytest.raises(FormatError):
            decode_checkpoint(join(header, payload))

    def test_overlapping_offsets(self, dense_ckpt):
        header, payload = split(encode_checkpoint(dense_ckpt))
        header["tensors"]["final_norm"]["offset"] = 0
        with pytest.raises(FormatError):
            decode_checkpoint(join(header, payload))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_not_json(self):
        with pytest.raises(FormatError):
            decode_checkpoint(struct.pack("<Q", 3) + b"abc")


class TestProvenance:
    def test_appended_never_rewrites(self, dense_ckpt, tiny_model):
        nxt = dense_ckpt.appended(tiny_model, {"stage": "sft", "dataset_digests": ["x"]})
        assert nxt.stages == ["pretrain", "sft"]
        assert dense_ckpt.stages == ["pretrain"]
        assert nxt.vocab is dense_ckpt.vocab

    def test_require(self, dense_ckpt):
        dense_ckpt.require("pretrain", "train-sft")
        with pytest.raises(OrderingError, match="sft"):
            dense_ckpt.require("sft", "train-dpo")

    def test_entry_needs_stage(self, dense_ckpt, tiny_model):
        with pytest.raises(FormatError):
            dense_ckpt.appended(tiny_model, {"dataset_digests": []})

    def test_stage_entry_digests(self, tmp_path):
        (tmp_path / "d.jsonl").write_bytes(b"abc")
        entry = stage_entry("sft", [tmp_path / "d.jsonl"], steps=3)
        assert entry == {
            "stage": "sft",
            "dataset_digests": ["ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"],
            "steps": 3,
        }


class TestAtomicWrite:
    def test_failed_write_keeps_old_file(self, dense_ckpt, tmp_path, monkeypatch):
        target = tmp_path / "m.ckpt"
        save_checkpoint(dense_ckpt, target)
        before = target.read_bytes()

        def boom(*args, **kwargs):
            raise OSError("disk full")

        monkeypatch.setattr("langadapt.checkpoint.os.replace", boom)
        with pytest.raises(OSError):
            save_checkpoint(dense_ckpt, target)
        assert target.read_bytes() == before
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
