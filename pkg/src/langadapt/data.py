"""JSONL ingestion and the synthetic desk-scale corpora.

The toy world has a tiny English-like source language and an Italian-like
target language over one shared lexicon, so that adaptation has a real
distribution shift to learn at a scale that trains in minutes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import DataError, SchemaError
from .evaluation import GenItem, McItem
from .numerics import RngState
from .templating import ChatMessage, RawDoc, SftRecord, strip_role_markers
from .training import PreferenceRecord

log = logging.getLogger(__name__)

SCHEMAS = ("sft", "preference", "raw", "mc_task", "gen_task")


def _need(obj: dict, key: str, kind: type | tuple[type, ...], where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing required field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise SchemaError(f"{where}: field {key!r} has type {type(value).__name__}")
    return value


def _opt(obj: dict, key: str, kind, default, where: str):
    if key not in obj or obj[key] is None:
        return default
    return _need(obj, key, kind, where)


def _parse(obj: Any, schema: str, where: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    if schema == "sft":
        return SftRecord(
            system=strip_role_markers(_opt(obj, "system", str, "", where)),
            instruction=strip_role_markers(_need(obj, "instruction", str, where)),
            input=strip_role_markers(_opt(obj, "input", str, "", where)),
            output=strip_role_markers(_need(obj, "output", str, where)),
        )
    if schema == "preference":
        prompt = _need(obj, "prompt", (str, list), where)
        if isinstance(prompt, list):
            try:
                prompt = tuple(ChatMessage(m["role"], m["content"]) for m in prompt)
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"{where}: malformed chat prompt ({exc})") from exc
        score = _opt(obj, "score", (int, float), None, where)
        try:
            return PreferenceRecord(
                prompt=prompt,
                chosen=_need(obj, "chosen", str, where),
                rejected=_need(obj, "rejected", str, where),
                source=_opt(obj, "source", str, "", where),
                score=None if score is None else float(score),
            )
        except DataError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    if schema == "raw":
        text = _need(obj, "text", str, where)
        if not text.strip():
            raise SchemaError(f"{where}: empty text")
        return RawDoc(text=text, lang=_opt(obj, "lang", str, "", where))
    if schema == "mc_task":
        choices = _need(obj, "choices", list, where)
        try:
            return McItem(_need(obj, "context", str, where), tuple(choices), _need(obj, "gold", int, where))
        except DataError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    if schema == "gen_task":
        try:
            return GenItem(_need(obj, "prompt", str, where), _need(obj, "answer", str, where))
        except DataError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    raise DataError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")


def load_jsonl(path: str | Path, schema: str) -> list:
    """Parse and validate one record per non-blank line; errors carry the line number."""
    if schema not in SCHEMAS:
        raise DataError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{where}: malformed JSON ({exc.msg})") from exc
            records.append(_parse(obj, schema, where))
    if not records:
        log.warning("%s: no records", path)
    return records


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- #
# Toy world
# --------------------------------------------------------------------------- #

# (english, italian, gender); gender picks the Italian article
NOUNS = [
    ("cat", "gatto", "m"), ("dog", "cane", "m"), ("bird", "uccello", "m"), ("child", "bambino", "m"),
    ("farmer", "contadino", "m"), ("teacher", "maestra", "f"), ("king", "re", "m"), ("queen", "regina", "f"),
    ("girl", "ragazza", "f"), ("boy", "ragazzo", "m"), ("horse", "cavallo", "m"), ("cow", "mucca", "f"),
    ("friend", "amica", "f"), ("baker", "fornaio", "m"), ("doctor", "dottoressa", "f"), ("fox", "volpe", "f"),
]
OBJECTS = [
    ("bread", "pane", "m"), ("fish", "pesce", "m"), ("apple", "mela", "f"), ("book", "libro", "m"),
    ("letter", "lettera", "f"), ("cake", "torta", "f"), ("milk", "latte", "m"), ("song", "canzone", "f"),
    ("house", "casa", "f"), ("ball", "palla", "f"), ("hat", "cappello", "m"), ("wine", "vino", "m"),
]
VERBS = [
    ("eats", "mangia"), ("sees", "vede"), ("wants", "vuole"), ("finds", "trova"), ("brings", "porta"),
    ("loves", "ama"), ("buys", "compra"), ("writes", "scrive"), ("takes", "prende"), ("makes", "fa"),
]
ADJECTIVES = [
    ("black", "nero", "nera"), ("white", "bianco", "bianca"), ("small", "piccolo", "piccola"),
    ("big", "grande", "grande"), ("red", "rosso", "rossa"), ("old", "vecchio", "vecchia"),
    ("new", "nuovo", "nuova"), ("happy", "felice", "felice"),
]
PLACES = [
    ("in the garden", "nel giardino"), ("at home", "a casa"), ("in the city", "in città"),
    ("by the river", "vicino al fiume"), ("in the morning", "di mattina"), ("at night", "di notte"),
    ("in the kitchen", "in cucina"), ("at school", "a scuola"),
]
NUMBER_WORDS_IT = ["zero", "uno", "due", "tre", "quattro", "cinque", "sei", "sette", "otto", "nove", "dieci"]
OPPOSITES = [
    ("hot", "cold"), ("big", "small"), ("old", "new"), ("happy", "sad"), ("day", "night"), ("up", "down"),
    ("black", "white"), ("fast", "slow"), ("open", "closed"), ("early", "late"), ("light", "dark"), ("full", "empty"),
]
SOUNDS = [("cat", "meow"), ("dog", "woof"), ("cow", "moo"), ("bird", "tweet"), ("horse", "neigh"), ("fox", "yip")]

ADD_RANGE = 5  # operands 0..4 keep the addition table small enough to memorize
SFT_SYSTEM = "You are a helpful assistant."


def _article(gender: str) -> str:
    return "il" if gender == "m" else "la"


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def english_sentence(rng) -> str:
    subj, obj, verb, place = _pick(rng, NOUNS), _pick(rng, OBJECTS), _pick(rng, VERBS), _pick(rng, PLACES)
    words = ["the"]
    if rng.random() < 0.5:
        words.append(_pick(rng, ADJECTIVES)[0])
    words += [subj[0], verb[0], "the", obj[0]]
    if rng.random() < 0.6:
        words.append(place[0])
    return " ".join(words) + "."


def fact_sentence(rng) -> str:
    """World knowledge the instruction tasks later ask about."""
    kind = int(rng.integers(4))
    if kind == 0:
        a, b = int(rng.integers(ADD_RANGE)), int(rng.integers(ADD_RANGE))
        return f"{a} and {b} add up to {a + b}."
    if kind == 1:
        word, opposite = _pick(rng, OPPOSITES)
        return f"the opposite of {word} is {opposite}."
    if kind == 2:
        animal, sound = _pick(rng, SOUNDS)
        return f"the {animal} says {sound}."
    noun = _pick(rng, NOUNS)
    return f"the Italian word for {noun[0]} is {noun[1]}."


def italian_sentence(rng) -> str:
    subj, obj, verb, place = _pick(rng, NOUNS), _pick(rng, OBJECTS), _pick(rng, VERBS), _pick(rng, PLACES)
    words = [_article(subj[2]), subj[1]]
    if rng.random() < 0.5:
        adj = _pick(rng, ADJECTIVES)
        words.append(adj[1] if subj[2] == "m" else adj[2])
    words += [verb[1], _article(obj[2]), obj[1]]
    if rng.random() < 0.6:
        words.append(place[1])
    text = " ".join(words) + "."
    return text[0].upper() + text[1:]


def _document(rng, sentence) -> str:
    n = 1 + int(rng.integers(3))
    out = [sentence(rng) for _ in range(n)]
    return " ".join(s[0].upper() + s[1:] for s in out)


def toy_raw_corpus(rng: RngState, n: int, lang: str, stream: str = "corpus") -> list[RawDoc]:
    g = rng.generator("raw", lang, stream)
    if lang == "en":
        def sentence(r):
            return fact_sentence(r) if r.random() < 0.5 else english_sentence(r)
    else:
        sentence = italian_sentence
    return [RawDoc(_document(g, sentence), lang) for _ in range(n)]


def toy_sft_records(rng: RngState, n: int) -> list[SftRecord]:
    g = rng.generator("sft")
    out: list[SftRecord] = []
    while len(out) < n:
        kind = int(g.integers(4))
        if kind == 0:
            a, b = int(g.integers(ADD_RANGE)), int(g.integers(ADD_RANGE))
            out.append(SftRecord(SFT_SYSTEM, "Add the two numbers.", f"{a} and {b}", str(a + b)))
        elif kind == 1:
            word, opposite = _pick(g, OPPOSITES)
            out.append(SftRecord(SFT_SYSTEM, f"Give the opposite of {word}.", "", opposite))
        elif kind == 2:
            animal, sound = _pick(g, SOUNDS)
            out.append(SftRecord(SFT_SYSTEM, f"What sound does the {animal} make?", "", sound))
        else:
            noun = _pick(g, NOUNS)
            out.append(SftRecord(SFT_SYSTEM, "Give the Italian word.", noun[0], noun[1]))
    return out


PREFERENCE_SOURCES = {
    "capybara-toy": 5.0,
    "orca-dpo-toy": 9.0,
    "ultrafeedback-toy": 5.0,
    "math-preference-toy": 9.0,
    "toxic-dpo-v0.2": None,
}


def toy_preference_records(rng: RngState, n: int) -> list[PreferenceRecord]:
    g = rng.generator("preference")
    sources = list(PREFERENCE_SOURCES)
    out: list[PreferenceRecord] = []
    while len(out) < n:
        source = _pick(g, sources)
        score = None if source == "toxic-dpo-v0.2" else float(int(g.integers(1, 11)))
        kind = int(g.integers(3))
        if kind == 0:
            a, b = int(g.integers(6)), int(g.integers(5))
            prompt = f"Quanto fa {a} più {b}?"
            chosen = f"{a} più {b} fa {a + b}."
            wrong = (a + b + 1 + int(g.integers(3))) % 11
            rejected = f"{a} più {b} fa {wrong}."
        elif kind == 1:
            noun = _pick(g, NOUNS)
            prompt = f"Come si dice {noun[0]} in italiano?"
            chosen = f"Si dice {noun[1]}."
            rejected = f"Si dice {_pick(g, [m for m in NOUNS if m != noun])[1]}."
        else:
            animal, sound = _pick(g, SOUNDS)
            prompt = f"Che verso fa il {animal}?"
            chosen = f"Il verso è {sound}."
            rejected = "Non lo so e non mi interessa."
        out.append(PreferenceRecord(prompt, chosen, rejected, source, score))
    return out


def toy_mc_items(rng: RngState, n: int) -> list[McItem]:
    g = rng.generator("mc")
    items = []
    for _ in range(n):
        subj, obj, verb = _pick(g, NOUNS), _pick(g, OBJECTS), _pick(g, VERBS)
        context = f"{_article(subj[2]).capitalize()} {subj[1]} {verb[1]}"
        good = f" {_article(obj[2])} {obj[1]}."
        wrong_gender = "f" if obj[2] == "m" else "m"
        bad = [f" {_article(wrong_gender)} {obj[1]}.", f" the {obj[0]}.", f" {verb[1]} {verb[1]}."]
        gold = int(g.integers(4))
        choices = bad[:gold] + [good] + bad[gold:]
        items.append(McItem(context, tuple(choices), gold))
    return items


def toy_gen_items(rng: RngState, n: int) -> list[GenItem]:
    g = rng.generator("gen")
    items = []
    for _ in range(n):
        a, b = int(g.integers(6)), int(g.integers(5))
        items.append(GenItem(f"Quanto fa {a} più {b}?", str(a + b)))
    return items


@dataclass(frozen=True)
class ToySizes:
    sft: int = 32
    warmup_sft: int = 480
    preference: int = 256
    raw_target: int = 1024
    raw_source: int = 1024
    heldout: int = 64
    mc: int = 50
    gen: int = 20


def _sft_row(r: SftRecord) -> dict:
    return {"system": r.system, "instruction": r.instruction, "input": r.input, "output": r.output}


def _pref_row(r: PreferenceRecord) -> dict:
    prompt = r.prompt if isinstance(r.prompt, str) else [{"role": m.role, "content": m.content} for m in r.prompt]
    row = {"prompt": prompt, "chosen": r.chosen, "rejected": r.rejected, "source": r.source}
    if r.score is not None:
        row["score"] = r.score
    return row


def make_toy_data(out_dir: str | Path, seed: int = 0, sizes: ToySizes = ToySizes()) -> dict[str, Path]:
    """Write every toy dataset as JSONL under ``out_dir`` and return the paths."""
    out = Path(out_dir)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    rng = RngState(seed)
    paths = {
        "sft": out / "sft.jsonl",
        "warmup_sft": out / "warmup_sft.jsonl",
        "preference": out / "preference.jsonl",
        "raw_source": out / "raw_source.jsonl",
        "raw_target": out / "raw_target.jsonl",
        "heldout_source": out / "heldout_source.jsonl",
        "heldout_target": out / "heldout_target.jsonl",
        "tasks": out / "tasks",
    }
    instructions = [_sft_row(r) for r in toy_sft_records(rng, sizes.sft + sizes.warmup_sft)]
    write_jsonl(paths["sft"], instructions[: sizes.sft])
    write_jsonl(paths["warmup_sft"], instructions[sizes.sft :])
    write_jsonl(paths["preference"], [_pref_row(r) for r in toy_preference_records(rng, sizes.preference)])
    for lang, key, stream, n in (
        ("en", "raw_source", "corpus", sizes.raw_source),
        ("it", "raw_target", "corpus", sizes.raw_target),
        ("en", "heldout_source", "heldout", sizes.heldout),
        ("it", "heldout_target", "heldout", sizes.heldout),
    ):
        write_jsonl(paths[key], [{"text": d.text, "lang": d.lang} for d in toy_raw_corpus(rng, n, lang, stream)])
    write_jsonl(
        out / "tasks" / "toy_completion_it.jsonl",
        [{"context": i.context, "choices": list(i.choices), "gold": i.gold} for i in toy_mc_items(rng, sizes.mc)],
    )
    write_jsonl(out / "tasks" / "toy_arith_it.jsonl", [{"prompt": i.prompt, "answer": i.answer} for i in toy_gen_items(rng, sizes.gen)])
    return paths
