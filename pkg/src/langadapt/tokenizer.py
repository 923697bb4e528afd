"""Byte-level BPE with atomic LLaMA-3 style special tokens.

Ids ``0..255`` are raw bytes, ``256..256+M-1`` are merge products in rank
order, and the special tokens occupy the top of the id space. Any string can
be encoded because every byte has its own id.
"""

from __future__ import annotations

import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, FormatError

BEGIN_OF_TEXT = "<|begin_of_text|>"
EOT = "<|eot_id|>"
START_HEADER = "<|start_header_id|>"
END_HEADER = "<|end_header_id|>"

VOCAB_FORMAT_VERSION = 1

# letters, digits and punctuation runs keep one optional leading space
_CHUNK_RE = re.compile(r" ?[^\W\d_]+| ?\d+| ?(?:[^\s\w]|_)+|\s+(?!\S)|\s+|[\s\S]")


@dataclass(frozen=True)
class SpecialTokens:
    begin_of_text: str = BEGIN_OF_TEXT
    eot: str = EOT
    start_header: str = START_HEADER
    end_header: str = END_HEADER

    def as_tuple(self) -> tuple[str, ...]:
        return (self.begin_of_text, self.eot, self.start_header, self.end_header)


def _chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


@dataclass
class Vocabulary:
    merges: list[tuple[int, int]]
    specials: tuple[str, ...] = SpecialTokens().as_tuple()
    token_bytes: list[bytes] = field(init=False, repr=False)
    special_ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(set(self.specials)) != len(self.specials):
            raise DataError("special tokens must be distinct")
        table = [bytes([b]) for b in range(256)]
        for left, right in self.merges:
            if not (0 <= left < len(table) and 0 <= right < len(table)):
                raise FormatError(f"merge ({left}, {right}) refers to an unknown token")
            table.append(table[left] + table[right])
        self.token_bytes = table
        base = len(table)
        self.special_ids = {s: base + i for i, s in enumerate(self.specials)}
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._special_re = (
            re.compile("|".join(re.escape(s) for s in sorted(self.specials, key=len, reverse=True)))
            if self.specials
            else None
        )
        self._encode_chunk = lru_cache(maxsize=65536)(self._bpe)

    def __len__(self) -> int:
        return len(self.token_bytes) + len(self.specials)

    @property
    def size(self) -> int:
        return len(self)

    def id_of(self, special: str) -> int:
        return self.special_ids[special]

    def is_special(self, token_id: int) -> bool:
        return token_id >= len(self.token_bytes)

    # encoding ------------------------------------------------------------

    def _bpe(self, chunk: str) -> tuple[int, ...]:
        ids = list(chunk.encode("utf-8"))
        ranks = self._ranks
        while len(ids) >= 2:
            best = None
            best_rank = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            new_id = 256 + best_rank
            merged: list[int] = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == best[0] and ids[i + 1] == best[1]:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        return tuple(ids)

    def _encode_plain(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in _chunks(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def encode(self, text: str, parse_special: bool = True) -> list[int]:
        if not parse_special or self._special_re is None:
            return self._encode_plain(text)
        out: list[int] = []
        pos = 0
        for m in self._special_re.finditer(text):
            out.extend(self._encode_plain(text[pos : m.start()]))
            out.append(self.special_ids[m.group()])
            pos = m.end()
        out.extend(self._encode_plain(text[pos:]))
        return out

    # decoding ------------------------------------------------------------

    def token_to_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < len(self):
            raise IndexError(f"token id {token_id} outside vocabulary of size {len(self)}")
        if token_id < len(self.token_bytes):
            return self.token_bytes[token_id]
        return self.specials[token_id - len(self.token_bytes)].encode("utf-8")

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.token_to_bytes(int(i)) for i in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def byte_length(self, ids: Iterable[int]) -> int:
        return len(self.decode_bytes(ids))

    # persistence ---------------------------------------------------------

    def to_json(self) -> dict:
        def s(i: int) -> str:
            return self.token_bytes[i].decode("latin-1")

        return {
            "version": VOCAB_FORMAT_VERSION,
            "merges": [[s(a), s(b)] for a, b in self.merges],
            "specials": list(self.specials),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        try:
            version = obj["version"]
            pairs = obj["merges"]
            specials = obj["specials"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"vocabulary file missing key: {exc}") from exc
        if version != VOCAB_FORMAT_VERSION:
            raise FormatError(f"unsupported vocabulary version {version}")
        lookup = {bytes([b]): b for b in range(256)}
        merges: list[tuple[int, int]] = []
        for pair in pairs:
            if not (isinstance(pair, list) and len(pair) == 2):
                raise FormatError(f"malformed merge entry {pair!r}")
            left, right = (p.encode("latin-1") for p in pair)
            if left not in lookup or right not in lookup:
                raise FormatError(f"merge {pair!r} refers to an unknown token")
            merges.append((lookup[left], lookup[right]))
            lookup[left + right] = 256 + len(merges) - 1
        return cls(merges=merges, specials=tuple(specials))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_json(obj)


def train_bpe(corpus: Sequence[str], vocab_size: int, special: SpecialTokens = SpecialTokens()) -> Vocabulary:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Equal counts resolve to the lexicographically smallest ``(left, right)``.
    A pair whose bytes already exist as a token is never merged, which keeps
    token byte strings unique. Stops at ``vocab_size`` or when no pair occurs
    at least twice.
    """
    specials = special.as_tuple()
    if vocab_size < 256 + len(specials):
        raise DataError(f"vocab_size must be at least {256 + len(specials)}, got {vocab_size}")
    if not corpus or not any(corpus):
        raise DataError("cannot train a tokenizer on an empty corpus")

    word_freq: Counter[str] = Counter()
    for text in corpus:
        word_freq.update(_chunks(text))
    words = [list(w.encode("utf-8")) for w in word_freq]
    freqs = list(word_freq.values())

    pair_counts: Counter[tuple[int, int]] = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, (ids, f) in enumerate(zip(words, freqs)):
        for pair in zip(ids, ids[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)

    token_bytes = [bytes([b]) for b in range(256)]
    known = set(token_bytes)
    merges: list[tuple[int, int]] = []
    budget = vocab_size - 256 - len(specials)
    while len(merges) < budget:
        best = None
        for pair, count in pair_counts.items():
            if count < 2 or token_bytes[pair[0]] + token_bytes[pair[1]] in known:
                continue
            if best is None or count > best[1] or (count == best[1] and pair < best[0]):
                best = (pair, count)
        if best is None:
            break
        pair = best[0]
        new_id = len(token_bytes)
        merges.append(pair)
        token_bytes.append(token_bytes[pair[0]] + token_bytes[pair[1]])
        known.add(token_bytes[-1])
        for wi in list(where.pop(pair, ())):
            ids, f = words[wi], freqs[wi]
            for old in zip(ids, ids[1:]):
                pair_counts[old] -= f
                if pair_counts[old] <= 0:
                    del pair_counts[old]
            merged: list[int] = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            words[wi] = merged
            for new in zip(merged, merged[1:]):
                pair_counts[new] += f
                where[new].add(wi)
    return Vocabulary(merges=merges, specials=specials)


def encode(v: Vocabulary, text: str, parse_special: bool = True) -> list[int]:
    return v.encode(text, parse_special=parse_special)


def decode(v: Vocabulary, ids: Iterable[int]) -> str:
    return v.decode(ids)
