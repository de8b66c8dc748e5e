"""Canonical phone inventory and annotation-symbol normalization.

The target set is the 39 ARPAbet phones of American English plus a
silence marker. Everything entering the pipeline (corpus annotations,
aligner output, lexicon symbols) is normalized into this set through a
scheme mapping; stress digits are stripped first because scoring is at
the phone-identity level only.

Mappings ship as editable data files (one ``source<TAB>target`` entry per
line, ``#`` comments) so corpus-specific quirks do not require a rebuild.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from mdprobe.errors import DuplicateSymbol, UnmappableSymbol, WrongCount

SILENCE = "SIL"
INVENTORY_SIZE = 40

_STRESS_DIGITS = "012"


@dataclass(frozen=True)
class Phone:
    """One normalized phone symbol (uppercase ARPAbet, no stress digits)."""

    symbol: str
    is_silence: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "is_silence", self.symbol == SILENCE)

    def __str__(self) -> str:
        return self.symbol


class PhoneInventory:
    """Ordered canonical phone set; order defines probe output-node index."""

    def __init__(self, phones: Iterable[Phone]):
        self.phones: tuple[Phone, ...] = tuple(phones)
        if len(self.phones) != INVENTORY_SIZE:
            raise WrongCount(
                f"inventory must have {INVENTORY_SIZE} entries, got {len(self.phones)}"
            )
        self._index: dict[str, int] = {}
        for i, phone in enumerate(self.phones):
            if phone.symbol in self._index:
                raise DuplicateSymbol(f"duplicate inventory symbol {phone.symbol!r}")
            self._index[phone.symbol] = i
        if SILENCE not in self._index:
            raise WrongCount(f"inventory is missing the silence marker {SILENCE!r}")

    def __len__(self) -> int:
        return len(self.phones)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def __iter__(self):
        return iter(self.phones)

    def index_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnmappableSymbol(f"{symbol!r} is not in the canonical inventory") from None

    def phone(self, symbol: str) -> Phone:
        return self.phones[self.index_of(symbol)]

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(p.symbol for p in self.phones)

    @property
    def silence_index(self) -> int:
        return self._index[SILENCE]

    def scorable(self) -> tuple[Phone, ...]:
        """The 39 non-silence phones, in inventory order."""
        return tuple(p for p in self.phones if not p.is_silence)


@dataclass(frozen=True)
class SchemeMapping:
    """Source annotation scheme -> canonical symbol map."""

    scheme: str
    entries: dict[str, str] = field(default_factory=dict)

    def lookup(self, symbol: str) -> str | None:
        return self.entries.get(symbol)


def _data_lines(text: str) -> list[str]:
    lines = []
    for raw in text.splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines


def _read_source(source: Union[str, Path]) -> str:
    return Path(source).read_text(encoding="utf-8")


def load_inventory(source: Union[str, Path]) -> PhoneInventory:
    """Load the canonical inventory from a one-symbol-per-line file.

    Ordering is taken verbatim from the file; duplicate symbols and any
    count other than 40 are rejected.
    """
    lines = _data_lines(_read_source(source))
    if len(lines) != INVENTORY_SIZE:
        raise WrongCount(
            f"inventory file lists {len(lines)} symbols, expected {INVENTORY_SIZE}"
        )
    seen: set[str] = set()
    for symbol in lines:
        if symbol in seen:
            raise DuplicateSymbol(f"duplicate inventory symbol {symbol!r}")
        seen.add(symbol)
    return PhoneInventory(Phone(symbol) for symbol in lines)


def _packaged(name: str) -> Path:
    return Path(str(importlib.resources.files("mdprobe").joinpath("data", name)))


def load_default_inventory() -> PhoneInventory:
    return load_inventory(_packaged("arpabet39.txt"))


_SCHEME_FILES = {
    "timit": "timit48.tsv",
    "arpabet-ext": "arpabet_ext.tsv",
    "ipa": "ipa_arpabet.tsv",
}


def load_scheme(scheme: str, source: Union[str, Path, None] = None) -> SchemeMapping:
    """Load a scheme mapping, from ``source`` or the packaged default.

    Known scheme names: ``timit``, ``arpabet-ext``, ``ipa``.
    """
    key = scheme.lower()
    if source is None:
        if key not in _SCHEME_FILES:
            raise UnmappableSymbol(f"no packaged mapping for scheme {scheme!r}")
        source = _packaged(_SCHEME_FILES[key])
    entries: dict[str, str] = {}
    for line in _data_lines(_read_source(source)):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DuplicateSymbol(
                f"malformed mapping line {line!r} in {source} (want source<TAB>target)"
            )
        src, dst = parts[0].strip(), parts[1].strip()
        if src in entries:
            raise DuplicateSymbol(f"duplicate mapping source symbol {src!r} in {source}")
        entries[src] = dst
    return SchemeMapping(scheme=key, entries=entries)


def strip_stress(symbol: str) -> str:
    """Drop a trailing ARPAbet stress digit (0/1/2), if any."""
    if len(symbol) > 1 and symbol[-1] in _STRESS_DIGITS:
        return symbol[:-1]
    return symbol


def normalize_phone(
    symbol: str,
    scheme: SchemeMapping | None,
    inventory: PhoneInventory,
) -> Phone:
    """Normalize one raw annotation token into a canonical Phone.

    Stress digits are stripped first. Tokens already in the canonical
    inventory pass through unchanged (this makes normalization idempotent
    for every scheme); anything else goes through the scheme mapping.
    ``scheme=None`` accepts canonical tokens only. Raises UnmappableSymbol
    when the token has no image, leaving the skip-vs-abort decision to
    the caller.
    """
    if not symbol:
        raise UnmappableSymbol("empty annotation token")
    token = strip_stress(symbol.strip())
    # ARPAbet-style schemes are case-insensitive; IPA is case-sensitive.
    is_ipa = scheme is not None and scheme.scheme == "ipa"
    candidate = token if is_ipa else token.upper()
    if candidate.upper() in inventory:
        return inventory.phone(candidate.upper())
    if scheme is None:
        raise UnmappableSymbol(f"{symbol!r} is not a canonical inventory symbol")
    target = scheme.lookup(candidate)
    if target is None and is_ipa:
        target = scheme.lookup(token)
    if target is None:
        raise UnmappableSymbol(
            f"{symbol!r} has no image under scheme {scheme.scheme!r}"
        )
    return inventory.phone(target)


def normalize_sequence(
    symbols: Iterable[str],
    scheme: SchemeMapping | None,
    inventory: PhoneInventory,
    *,
    skip_unmappable: bool = False,
) -> list[Phone]:
    """Normalize a token sequence; optionally skip unmappable tokens.

    Skipping is opt-in: silently dropping symbols biases instance counts,
    so the default is to abort ingestion.
    """
    out: list[Phone] = []
    for symbol in symbols:
        try:
            out.append(normalize_phone(symbol, scheme, inventory))
        except UnmappableSymbol:
            if not skip_unmappable:
                raise
    return out
