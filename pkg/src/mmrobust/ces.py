"""Character embedding space (CES): visual nearest neighbours per symbol.

File format, one symbol per line (UTF-8)::

    symbol<TAB>neighbour1,score1;neighbour2,score2;...

Neighbour lists are capped at 20 and kept in descending score order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ValidationError

MAX_NEIGHBOURS = 20


@dataclass(frozen=True)
class CharEmbeddingSpace:
    neighbours: dict[str, tuple[tuple[str, float], ...]] = field(default_factory=dict)

    def __post_init__(self):
        for sym, nbrs in self.neighbours.items():
            if len(nbrs) > MAX_NEIGHBOURS:
                raise ValidationError(f"{sym!r}: {len(nbrs)} neighbours exceeds {MAX_NEIGHBOURS}")
            if any(n == sym for n, _ in nbrs):
                raise ValidationError(f"{sym!r} lists itself as a neighbour")
            scores = [s for _, s in nbrs]
            if scores != sorted(scores, reverse=True):
                raise ValidationError(f"{sym!r}: neighbours not sorted by descending similarity")

    def of(self, symbol: str) -> tuple[str, ...]:
        return tuple(n for n, _ in self.neighbours.get(symbol, ()))

    def symbols(self) -> set[str]:
        out = set(self.neighbours)
        for nbrs in self.neighbours.values():
            out.update(n for n, _ in nbrs)
        return out


def parse_ces(text: str) -> CharEmbeddingSpace:
    table: dict[str, tuple[tuple[str, float], ...]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        sym, sep, rest = line.partition("\t")
        if not sep or len(sym) != 1:
            raise ValidationError(f"CES line {lineno}: expected '<symbol>\\t<neighbours>'")
        nbrs = []
        for entry in filter(None, rest.split(";")):
            n, comma, score = entry.rpartition(",")
            if not comma or len(n) != 1:
                raise ValidationError(f"CES line {lineno}: bad neighbour entry {entry!r}")
            nbrs.append((n, float(score)))
        if len(nbrs) > MAX_NEIGHBOURS:
            raise ValidationError(f"CES line {lineno}: more than {MAX_NEIGHBOURS} neighbours")
        table[sym] = tuple(nbrs)
    return CharEmbeddingSpace(table)


def format_ces(ces: CharEmbeddingSpace) -> str:
    return "".join(
        sym + "\t" + ";".join(f"{n},{s:g}" for n, s in nbrs) + "\n"
        for sym, nbrs in sorted(ces.neighbours.items())
    )


def load_ces(path: str | Path) -> CharEmbeddingSpace:
    return parse_ces(Path(path).read_text(encoding="utf-8"))


def save_ces(ces: CharEmbeddingSpace, path: str | Path) -> None:
    Path(path).write_text(format_ces(ces), encoding="utf-8")


_DEFAULT: CharEmbeddingSpace | None = None


def default_ces() -> CharEmbeddingSpace:
    """The shipped homoglyph table."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("mmrobust").joinpath("data/ces_default.tsv").read_text(encoding="utf-8")
        _DEFAULT = parse_ces(text)
    return _DEFAULT


def default_alphabet() -> tuple[str, ...]:
    """Printable ASCII followed by the default CES extension symbols, sorted by codepoint."""
    ascii_part = [chr(c) for c in range(32, 127)]
    extra = sorted(s for s in default_ces().symbols() if s not in ascii_part)
    return tuple(ascii_part + extra)
