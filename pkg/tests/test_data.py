import json
import logging

import pytest

from langadapt.data import ToySizes, load_jsonl, make_toy_data, write_jsonl
from langadapt.errors import DataError, SchemaError
from langadapt.evaluation import GenItem, McItem
from langadapt.templating import ChatMessage, RawDoc, SftRecord
from langadapt.training import PreferenceRecord


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


class TestLoadJsonl:
    def test_sft_fields(self, tmp_path):
        p = write(tmp_path / "a.jsonl", ['{"system":"s","instruction":"i","input":"","output":"o"}'])
        assert load_jsonl(p, "sft") == [SftRecord("s", "i", "", "o")]

    def test_sft_strips_role_markers(self, tmp_path):
        p = write(tmp_path / "a.jsonl", [json.dumps({"instruction": "<< human >>: ciao", "output": "<< assistant >>: salve"})])
        (rec,) = load_jsonl(p, "sft")
        assert (rec.instruction, rec.output) == ("ciao", "salve")

    def test_missing_field_names_field_and_line(self, tmp_path):
        p = write(tmp_path / "p.jsonl", ['{"prompt":"p","chosen":"a","rejected":"b"}', '{"prompt":"p","chosen":"a"}'])
        with pytest.raises(SchemaError, match=r"p\.jsonl:2.*'rejected'"):
            load_jsonl(p, "preference")

    def test_malformed_line(self, tmp_path):
        p = write(tmp_path / "r.jsonl", ['{"text":"ok"}', "", "{not json"])
        with pytest.raises(SchemaError, match=r":3"):
            load_jsonl(p, "raw")

    def test_wrong_type(self, tmp_path):
        p = write(tmp_path / "m.jsonl", ['{"context":"c","choices":["a","b"],"gold":"0"}'])
        with pytest.raises(SchemaError, match="gold"):
            load_jsonl(p, "mc_task")

    def test_bool_is_not_int(self, tmp_path):
        p = write(tmp_path / "m.jsonl", ['{"context":"c","choices":["a","b"],"gold":true}'])
        with pytest.raises(SchemaError):
            load_jsonl(p, "mc_task")

    def test_empty_file_warns(self, tmp_path, caplog):
        p = write(tmp_path / "e.jsonl", [])
        with caplog.at_level(logging.WARNING):
            assert load_jsonl(p, "raw") == []
        assert "no records" in caplog.text

    def test_preference_variants(self, tmp_path):
        rows = [
            {"prompt": "p", "chosen": "a", "rejected": "b", "source": "orca", "score": 9},
            {"prompt": [{"role": "user", "content": "hi"}], "chosen": "a", "rejected": "b"},
        ]
        p = write(tmp_path / "p.jsonl", [json.dumps(r) for r in rows])
        a, b = load_jsonl(p, "preference")
        assert a == PreferenceRecord("p", "a", "b", "orca", 9.0)
        assert b.prompt == (ChatMessage("user", "hi"),) and b.score is None

    def test_preference_identical_completions(self, tmp_path):
        p = write(tmp_path / "p.jsonl", ['{"prompt":"p","chosen":"a","rejected":"a"}'])
        with pytest.raises(SchemaError, match=":1"):
            load_jsonl(p, "preference")

    def test_task_schemas(self, tmp_path):
        mc = write(tmp_path / "mc.jsonl", ['{"context":"c","choices":["a","b"],"gold":1}'])
        gen = write(tmp_path / "gen.jsonl", ['{"prompt":"p","answer":"4"}'])
        assert load_jsonl(mc, "mc_task") == [McItem("c", ("a", "b"), 1)]
        assert load_jsonl(gen, "gen_task") == [GenItem("p", "4")]

    def test_unknown_schema_and_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_jsonl(tmp_path / "x.jsonl", "sft")
        with pytest.raises(DataError):
            load_jsonl(write(tmp_path / "x.jsonl", []), "dpo")

    def test_round_trip(self, tmp_path):
        write_jsonl(tmp_path / "r.jsonl", [{"text": "città", "lang": "it"}])
        assert "città" in (tmp_path / "r.jsonl").read_text(encoding="utf-8")
        assert load_jsonl(tmp_path / "r.jsonl", "raw") == [RawDoc("città", "it")]


class TestToyData:
    SIZES = ToySizes(sft=8, warmup_sft=4, preference=10, raw_target=6, raw_source=6, heldout=3, mc=5, gen=4)

    def test_files_load_under_their_schemas(self, tmp_path):
        paths = make_toy_data(tmp_path, 3, self.SIZES)
        assert len(load_jsonl(paths["sft"], "sft")) == 8
        assert len(load_jsonl(paths["warmup_sft"], "sft")) == 4
        assert len(load_jsonl(paths["preference"], "preference")) == 10
        target = load_jsonl(paths["raw_target"], "raw")
        assert len(target) == 6 and {d.lang for d in target} == {"it"}
        assert len(load_jsonl(paths["heldout_source"], "raw")) == 3
        assert len(load_jsonl(paths["tasks"] / "toy_completion_it.jsonl", "mc_task")) == 5
        assert len(load_jsonl(paths["tasks"] / "toy_arith_it.jsonl", "gen_task")) == 4

    def test_deterministic(self, tmp_path):
        a = make_toy_data(tmp_path / "a", 3, self.SIZES)
        b = make_toy_data(tmp_path / "b", 3, self.SIZES)
        for key in ("sft", "preference", "raw_target"):
            assert a[key].read_bytes() == b[key].read_bytes()
        c = make_toy_data(tmp_path / "c", 4, self.SIZES)
        assert a["raw_target"].read_bytes() != c["raw_target"].read_bytes()

    def test_heldout_differs_from_training(self, tmp_path):
        paths = make_toy_data(tmp_path, 0, ToySizes(raw_target=50, heldout=20))
        train = {d.text for d in load_jsonl(paths["raw_target"], "raw")}
        held = [d.text for d in load_jsonl(paths["heldout_target"], "raw")]
        assert sum(t in train for t in held) < len(held) / 2

    def test_arithmetic_answers_are_correct(self, tmp_path):
        paths = make_toy_data(tmp_path, 1, self.SIZES)
        for item in load_jsonl(paths["tasks"] / "toy_arith_it.jsonl", "gen_task"):
            a, b = (int(w) for w in item.prompt.removeprefix("Quanto fa ").rstrip("?").split(" più "))
            assert int(item.answer) == a + b
