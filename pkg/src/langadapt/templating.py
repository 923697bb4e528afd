"""Prompt strings for instruction tuning, chat inference and raw-text adaptation."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .errors import DataError
from .tokenizer import BEGIN_OF_TEXT, END_HEADER, EOT, START_HEADER

ROLE_MARKERS = ("<< human >>:", "<< assistant >>:")

ALPACA_WITH_INPUT = "{system}\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n{output}"
ALPACA_NO_INPUT = "{system}\n\n### Instruction:\n{instruction}\n\n### Response:\n{output}"
RESPONSE_HEADER = "### Response:\n"
CHAT_TURN = START_HEADER + "{role}" + END_HEADER + "\n{content}" + EOT
CHAT_GENERATION_PROMPT = START_HEADER + "assistant" + END_HEADER + "\n"
RAW_TEMPLATE = BEGIN_OF_TEXT + " {text} " + EOT

DEFAULT_SYSTEM_PROMPT = (
    "Sei un an assistente AI per la lingua Italiana di nome LLaMAntino-3 ANITA "
    "(Advanced Natural-based interaction for the ITALian language). "
    "Rispondi nella lingua usata per la domanda in modo chiaro, semplice ed esaustivo."
)

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class SftRecord:
    system: str
    instruction: str
    input: str
    output: str


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class RawDoc:
    text: str
    lang: str = ""


def strip_role_markers(text: str) -> str:
    # collapsing whitespace can assemble a new marker, so iterate to a fixed point
    while True:
        out = text
        for marker in ROLE_MARKERS:
            out = out.replace(marker, " ")
        out = _WS.sub(" ", out).strip()
        if out == text:
            return out
        text = out


def normalize_record(r: SftRecord) -> SftRecord:
    return SftRecord(
        system=strip_role_markers(r.system),
        instruction=strip_role_markers(r.instruction),
        input=strip_role_markers(r.input),
        output=strip_role_markers(r.output),
    )


def _check_sft(r: SftRecord) -> None:
    if not r.instruction.strip():
        raise DataError("SFT record has an empty instruction")
    if not r.output.strip():
        raise DataError("SFT record has an empty output")
    for name in ("system", "instruction", "input", "output"):
        value = getattr(r, name)
        for marker in ROLE_MARKERS:
            if marker in value:
                raise DataError(f"SFT field {name!r} still contains role marker {marker!r}; normalize first")


def alpaca_prompt(r: SftRecord) -> str:
    """The formatted record up to and including the response header."""
    _check_sft(r)
    template = ALPACA_WITH_INPUT if r.input else ALPACA_NO_INPUT
    return BEGIN_OF_TEXT + template.format(system=r.system, instruction=r.instruction, input=r.input, output="")


def format_alpaca(r: SftRecord) -> str:
    return alpaca_prompt(r) + r.output + EOT


def _check_roles(messages: Sequence[ChatMessage]) -> None:
    body = list(messages)
    if body and body[0].role == "system":
        body = body[1:]
    for i, m in enumerate(body):
        expected = "user" if i % 2 == 0 else "assistant"
        if m.role != expected:
            raise DataError(f"message {i} has role {m.role!r}, expected {expected!r}")


def format_chat(messages: Sequence[ChatMessage], add_generation_prompt: bool = True) -> str:
    _check_roles(messages)
    parts = [BEGIN_OF_TEXT]
    parts.extend(CHAT_TURN.format(role=m.role, content=m.content) for m in messages)
    if add_generation_prompt:
        parts.append(CHAT_GENERATION_PROMPT)
    return "".join(parts)


def format_raw(d: RawDoc) -> str:
    if not d.text.strip():
        raise DataError("raw document is empty")
    return RAW_TEMPLATE.format(text=d.text)


def raw_prompt() -> str:
    """The fixed prefix that precedes every raw document."""
    return BEGIN_OF_TEXT + " "
