"""Benchmark scoring in the style of the common LM evaluation harness.

Multiple-choice tasks score every candidate continuation by summed
log-likelihood (``acc``) and by log-likelihood per UTF-8 byte of the
candidate (``acc_norm``). Generative tasks pull an answer out of free text,
either from a ``#### `` final-answer line (strict) or as the last number in
the output (flexible).
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .errors import DataError, LangAdaptError, LengthError
from .model import SamplingParams, generate, loglikelihood
from .templating import ChatMessage, format_chat
from .tokenizer import BEGIN_OF_TEXT, EOT, Vocabulary

log = logging.getLogger(__name__)

STRICT_MARKER = "#### "
_STRICT_RE = re.compile(r"^#### (.*)$", re.MULTILINE)
_NUMBER_RE = re.compile(r"[-+]?\d(?:[\d,]*\d)?(?:\.\d+)?")


@dataclass(frozen=True)
class McItem:
    context: str
    choices: tuple[str, ...]
    gold: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(self.choices) < 2:
            raise DataError("a multiple-choice item needs at least two choices")
        if not all(isinstance(c, str) and c for c in self.choices):
            raise DataError("choices must be non-empty strings")
        if not 0 <= self.gold < len(self.choices):
            raise DataError(f"gold index {self.gold} out of range for {len(self.choices)} choices")


@dataclass(frozen=True)
class McTask:
    name: str
    items: tuple[McItem, ...]


@dataclass(frozen=True)
class GenItem:
    prompt: str
    answer: str

    def __post_init__(self) -> None:
        if not self.answer.strip():
            raise DataError("gold answer is empty")


@dataclass(frozen=True)
class GenTask:
    name: str
    items: tuple[GenItem, ...]
    mode: str = "strict"

    def __post_init__(self) -> None:
        if self.mode not in ("strict", "flexible"):
            raise DataError(f"extraction mode must be 'strict' or 'flexible', got {self.mode!r}")


class HarnessModel(Protocol):
    def loglikelihood(self, context: str, continuation: str) -> tuple[float, bool]: ...

    def generate(self, prompt: str, params: SamplingParams) -> str: ...


# --------------------------------------------------------------------------- #
# Model backends
# --------------------------------------------------------------------------- #


@dataclass
class RiggedModel:
    """Fixture-driven backend: every answer is looked up, nothing is computed."""

    logprobs: Mapping[tuple[str, str], float] = field(default_factory=dict)
    generations: Mapping[str, str] = field(default_factory=dict)

    def loglikelihood(self, context: str, continuation: str) -> tuple[float, bool]:
        try:
            return float(self.logprobs[(context, continuation)]), False
        except KeyError:
            raise DataError(f"no rigged log-probability for {(context, continuation)!r}") from None

    def generate(self, prompt: str, params: SamplingParams) -> str:
        try:
            return self.generations[prompt]
        except KeyError:
            raise DataError(f"no rigged generation for {prompt!r}") from None


@dataclass
class TransformerHarness:
    """Adapts a token-level model and vocabulary to the string interface.

    Contexts get a leading BOS when they lack one. Generation prompts are
    wrapped as a single user chat turn when ``chat`` is set, and decoding
    stops at EOT.
    """

    model: object
    vocab: Vocabulary
    chat: bool = True

    def _context_ids(self, context: str) -> list[int]:
        ids = self.vocab.encode(context, parse_special=True)
        bos = self.vocab.id_of(BEGIN_OF_TEXT)
        return ids if ids[:1] == [bos] else [bos] + ids

    def loglikelihood(self, context: str, continuation: str) -> tuple[float, bool]:
        return loglikelihood(self.model, self._context_ids(context), self.vocab.encode(continuation, parse_special=False))

    def generate(self, prompt: str, params: SamplingParams) -> str:
        text = format_chat([ChatMessage("user", prompt)]) if self.chat else prompt
        eot = self.vocab.id_of(EOT)
        params = SamplingParams(
            temperature=params.temperature,
            top_p=params.top_p,
            max_new_tokens=params.max_new_tokens,
            stop_ids=params.stop_ids | {eot},
            seed=params.seed,
        )
        return self.vocab.decode(generate(self.model, self._context_ids(text), params))


# --------------------------------------------------------------------------- #
# Multiple choice
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class McScores:
    acc: float
    acc_norm: float
    n_items: int
    errors: int = 0

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.acc, "acc_norm": self.acc_norm}


def _argmax(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def eval_multiple_choice(model: HarnessModel, task: McTask) -> McScores:
    if not task.items:
        raise DataError(f"task {task.name!r} has no items")
    correct = correct_norm = errors = 0
    for n, item in enumerate(task.items):
        try:
            raw = [model.loglikelihood(item.context, c)[0] for c in item.choices]
        except LengthError as exc:
            errors += 1
            log.warning("%s item %d skipped: %s", task.name, n, exc)
            continue
        norm = [s / len(c.encode("utf-8")) for s, c in zip(raw, item.choices)]
        correct += _argmax(raw) == item.gold
        correct_norm += _argmax(norm) == item.gold
    total = len(task.items)
    return McScores(correct / total, correct_norm / total, total, errors)


# --------------------------------------------------------------------------- #
# Generative
# --------------------------------------------------------------------------- #


def extract_strict(text: str) -> str | None:
    matches = _STRICT_RE.findall(text)
    if not matches:
        return None
    answer = matches[-1].strip()
    return answer or None


def extract_flexible(text: str) -> str | None:
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    return matches[-1].replace(",", "")


def normalize_answer(s: str) -> str:
    s = s.strip().replace(",", "")
    if s.startswith("+"):
        s = s[1:]
    if re.fullmatch(r"-?\d+\.0+", s):
        s = s.split(".")[0]
    return s


def score_generations(texts: Sequence[str | None], task: GenTask, mode: str | None = None) -> float:
    mode = mode or task.mode
    extract = extract_strict if mode == "strict" else extract_flexible
    hits = 0
    for text, item in zip(texts, task.items, strict=True):
        if text is None:
            continue
        got = extract(text)
        hits += got is not None and normalize_answer(got) == normalize_answer(item.answer)
    return hits / len(task.items)


def generate_all(model: HarnessModel, task: GenTask, p: SamplingParams) -> tuple[list[str | None], int]:
    """Generations per item; ``None`` marks an item whose generation failed."""
    out: list[str | None] = []
    failures = 0
    for n, item in enumerate(task.items):
        try:
            out.append(model.generate(item.prompt, p))
        except LangAdaptError as exc:
            failures += 1
            log.warning("%s item %d failed: %s", task.name, n, exc)
            out.append(None)
    return out, failures


def eval_generative(model: HarnessModel, task: GenTask, p: SamplingParams = SamplingParams()) -> dict[str, float]:
    if not task.items:
        raise DataError(f"task {task.name!r} has no items")
    texts, _ = generate_all(model, task, p)
    return {"score": score_generations(texts, task)}


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


def table_average(rows: Iterable[float]) -> float:
    values = [float(r) for r in rows]
    if not values:
        raise DataError("cannot average an empty table")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class ReportRow:
    task: str
    metric: str
    score: float


@dataclass
class EvalReport:
    model: str
    rows: list[ReportRow] = field(default_factory=list)
    errors: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for r in self.rows:
            if not 0.0 <= r.score <= 1.0:
                raise DataError(f"score {r.score} for {r.task}/{r.metric} is outside [0, 1]")

    @property
    def average(self) -> float:
        return table_average(r.score for r in self.rows)

    def keys(self) -> list[tuple[str, str]]:
        return [(r.task, r.metric) for r in self.rows]

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "rows": [{"task": r.task, "metric": r.metric, "score": r.score} for r in self.rows],
            "average": self.average,
            "errors": dict(self.errors),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        try:
            rows = [ReportRow(r["task"], r["metric"], float(r["score"])) for r in obj["rows"]]
            return cls(obj["model"], rows, {k: int(v) for k, v in obj.get("errors", {}).items()})
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed report: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def render_report(reports: Sequence[EvalReport]) -> str:
    """One column per model, rows in input order, closed by an ``Average:`` row."""
    if not reports:
        raise DataError("no reports to render")
    keys = reports[0].keys()
    for rep in reports[1:]:
        if rep.keys() != keys:
            missing = sorted(set(keys) - set(rep.keys()))
            extra = sorted(set(rep.keys()) - set(keys))
            raise DataError(f"report {rep.model!r} row set differs (missing {missing}, extra {extra}, order may differ)")

    header = ["Tasks", "Metric"] + [r.model for r in reports]
    body: list[list[str]] = []
    previous = None
    for i, (task, metric) in enumerate(keys):
        body.append([task if task != previous else "", metric] + [f"{r.rows[i].score:.4f}" for r in reports])
        previous = task
    body.append(["Average:", ""] + [f"{r.average:.4f}" for r in reports])

    widths = [max(len(row[c]) for row in [header] + body) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + body]
    errored = {r.model: sum(r.errors.values()) for r in reports if sum(r.errors.values())}
    if errored:
        lines.append("items scored incorrect after errors: " + ", ".join(f"{m}={n}" for m, n in errored.items()))
    return "\n".join(lines)
