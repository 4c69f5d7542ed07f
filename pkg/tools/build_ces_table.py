"""Regenerate src/mmrobust/data/ces_default.tsv.

Neighbours come from two sources: Latin letters whose canonical decomposition
starts with the ASCII base letter (accented variants), and a hand-written list
of Greek/Cyrillic/ASCII look-alikes. Scores: look-alike 0.95, accented 0.85,
ASCII substitute 0.7, sibling accented variant 0.6.
"""
import sys
import unicodedata
from collections import defaultdict
from pathlib import Path

LOOKALIKE = {
    "a": "аα", "b": "Ьḃ", "c": "сϲ", "d": "ԁ", "e": "еε", "g": "ɡ", "h": "һ", "i": "іι",
    "j": "ј", "k": "κ", "l": "ӏ", "m": "м", "n": "п", "o": "оοσ", "p": "рρ", "q": "ԛ",
    "r": "г", "s": "ѕ", "t": "т", "u": "υ", "v": "ν", "w": "ѡ", "x": "хχ", "y": "уγ",
    "z": "ᴢ", "A": "АΑ", "B": "ВΒ", "C": "СϹ", "E": "ЕΕ", "H": "НΗ", "I": "ІΙ", "J": "Ј",
    "K": "КΚ", "M": "МΜ", "N": "Ν", "O": "ОΟ", "P": "РΡ", "S": "Ѕ", "T": "ТΤ", "X": "ХΧ",
    "Y": "ҮΥ", "Z": "Ζ", "!": "¡ǃ", "#": "♯", "$": "＄", "?": "¿",
}
ASCII_SUB = {
    "a": "@4", "b": "6", "e": "3", "g": "9", "i": "1l!", "l": "1I|", "o": "0", "s": "5$",
    "t": "7+", "z": "2", "O": "0Q", "I": "1l|", "S": "5$", "B": "8", "0": "Oo", "1": "lI",
    "5": "S", "8": "B", "!": "i|", "$": "S5", "#": "H", "?": "7",
}


def build():
    table = defaultdict(dict)
    accented = defaultdict(list)
    for cp in range(0x00C0, 0x0250):
        ch = chr(cp)
        base = unicodedata.normalize("NFD", ch)[0]
        if base != ch and base.isascii() and base.isalpha() and unicodedata.category(ch).startswith("L"):
            accented[base].append(ch)
    for base, variants in accented.items():
        variants = variants[:8]
        for v in variants:
            table[base][v] = 0.85
            table[v][base] = 0.85
            for w in variants:
                if w != v:
                    table[v].setdefault(w, 0.6)
    for base, alts in LOOKALIKE.items():
        for a in alts:
            table[base][a] = 0.95
            table[a][base] = 0.95
    for base, alts in ASCII_SUB.items():
        for a in alts:
            if a != base:
                table[base].setdefault(a, 0.7)
    lines = []
    for sym in sorted(table):
        nbrs = sorted(((s, n) for n, s in table[sym].items() if n != sym), key=lambda t: (-t[0], t[1]))[:20]
        lines.append(sym + "\t" + ";".join(f"{n},{s:.2f}" for s, n in nbrs))
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "src/mmrobust/data/ces_default.tsv"
    out.write_text(build(), encoding="utf-8")
    print(f"wrote {out}")
