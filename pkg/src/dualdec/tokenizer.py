"""Character and byte-pair vocabularies with left-to-right and right-to-left
target encodings.

Character targets reverse to the same length (a permutation), so the twin
decoders see equal-length sequences.  BPE targets are learned separately for
the reversed text, so the two encodings of one transcript generally segment
differently and differ in length ("c a t_" forward vs "ta c_" reversed).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

L2R = "L2R"
R2L = "R2L"

SOS = "<sos>"
EOS = "<eos>"
UNK = "<unk>"
SPACE = "<sp>"

WORD_END = "_"


@dataclass
class Vocab:
    kind: str  # "char" | "bpe"
    units: list[str]  # id -> unit string; specials first
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("char", "bpe"):
            raise ValueError(f"unknown vocab kind {self.kind!r}")
        self._index = {u: i for i, u in enumerate(self.units)}
        if len(self._index) != len(self.units):
            raise ValueError("duplicate units in vocabulary")

    def __len__(self):
        return len(self.units)

    @property
    def sos(self) -> int:
        return self._index[SOS]

    @property
    def eos(self) -> int:
        return self._index[EOS]

    @property
    def unk(self) -> int:
        return self._index[UNK]

    def id_of(self, unit: str) -> int:
        return self._index.get(unit, self._index[UNK])

    def unit_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.units):
            raise ValueError(f"token id {idx} out of range for vocab of size {len(self.units)}")
        return self.units[idx]


@dataclass
class TokenSeq:
    ids: list[int]
    direction: str
    vocab: Vocab

    def __post_init__(self):
        if self.direction not in (L2R, R2L):
            raise ValueError(f"direction must be {L2R} or {R2L}, got {self.direction!r}")
        v = len(self.vocab)
        for i in self.ids:
            if not 0 <= i < v:
                raise ValueError(f"token id {i} out of range for vocab of size {v}")

    def __len__(self):
        return len(self.ids)


def _word_symbols(word: str) -> list[str]:
    """Split a word into symbols, word-end marker attached to the last char."""
    if not word:
        return []
    syms = list(word)
    syms[-1] = syms[-1] + WORD_END
    return syms


def build_char_vocab(corpus: list[str]) -> Vocab:
    """Character vocabulary over the corpus alphabet plus a space unit."""
    if not corpus:
        raise ValueError("empty corpus")
    chars = sorted({c for line in corpus for c in line if c != " "})
    return Vocab("char", [SOS, EOS, UNK, SPACE] + chars)


def learn_bpe(corpus: list[str], merges: int) -> Vocab:
    """Greedy byte-pair learning over whitespace-split words.

    Each round merges the most frequent adjacent symbol pair; frequency ties
    go to the lexicographically greatest pair.  Stops early once no pair
    repeats anywhere (every word is a single unit).
    """
    if not corpus:
        raise ValueError("empty corpus")
    if merges < 0:
        raise ValueError(f"merge count must be >= 0, got {merges}")
    word_freq = Counter()
    for line in corpus:
        for word in line.split():
            word_freq[tuple(_word_symbols(word))] += 1
    base = sorted({s for word in word_freq for s in word})

    merge_list: list[tuple[str, str]] = []
    merged_units: list[str] = []
    for _ in range(merges):
        pairs = Counter()
        for word, freq in word_freq.items():
            for a, b in zip(word, word[1:]):
                pairs[(a, b)] += freq
        if not pairs:
            break
        best = max(pairs.items(), key=lambda kv: (kv[1], kv[0]))[0]
        merge_list.append(best)
        new_unit = best[0] + best[1]
        if new_unit not in merged_units and new_unit not in base:
            merged_units.append(new_unit)
        word_freq = Counter(
            {tuple(_apply_merge(list(w), best)): f for w, f in word_freq.items()}
        )
    return Vocab("bpe", [SOS, EOS, UNK] + base + merged_units, merge_list)


def _apply_merge(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _segment_word(word: str, vocab: Vocab) -> list[str]:
    symbols = _word_symbols(word)
    for pair in vocab.merges:
        symbols = _apply_merge(symbols, pair)
    return symbols


def encode(transcript: str, vocab: Vocab, direction: str = L2R) -> TokenSeq:
    """Tokenize a transcript; R2L reverses the character string first, so
    word-boundary markers land on the reversed word ends."""
    if direction not in (L2R, R2L):
        raise ValueError(f"direction must be {L2R} or {R2L}, got {direction!r}")
    text = transcript[::-1] if direction == R2L else transcript
    if vocab.kind == "char":
        ids = [vocab.id_of(SPACE) if c == " " else vocab.id_of(c) for c in text]
    else:
        ids = []
        for word in text.split():
            ids.extend(vocab.id_of(s) for s in _segment_word(word, vocab))
    return TokenSeq(ids, direction, vocab)


def decode(seq: TokenSeq) -> str:
    """Inverse of encode up to unknown units; R2L output is un-reversed so
    the transcript reads forward."""
    vocab = seq.vocab
    if vocab.kind == "char":
        parts = []
        for i in seq.ids:
            unit = vocab.unit_of(i)
            parts.append(" " if unit == SPACE else unit)
        text = "".join(parts)
    else:
        words, current = [], []
        for i in seq.ids:
            unit = vocab.unit_of(i)
            if unit.endswith(WORD_END):
                current.append(unit[: -len(WORD_END)])
                words.append("".join(current))
                current = []
            else:
                current.append(unit)
        if current:
            words.append("".join(current))
        text = " ".join(words)
    return text[::-1] if seq.direction == R2L else text


# ---------------------------------------------------------------------------
# L2R/R2L vocabulary pairs


@dataclass
class VocabPair:
    """The two vocabularies a dual-decoder model trains against."""

    fwd: Vocab
    bwd: Vocab
    kind: str

    def encode_both(self, transcript: str) -> tuple[TokenSeq, TokenSeq]:
        return encode(transcript, self.fwd, L2R), encode(transcript, self.bwd, R2L)


def build_vocab_pair(
    corpus: list[str], kind: str, merges: int = 100, r2l_mode: str = "separate"
) -> VocabPair:
    """Char targets share one vocabulary; BPE targets learn the R2L side on
    the character-reversed corpus (r2l_mode="shared" reuses the L2R merges)."""
    if kind == "char":
        v = build_char_vocab(corpus)
        return VocabPair(v, v, kind)
    if kind != "bpe":
        raise ValueError(f"unknown target kind {kind!r}")
    fwd = learn_bpe(corpus, merges)
    if r2l_mode == "separate":
        bwd = learn_bpe([line[::-1] for line in corpus], merges)
    elif r2l_mode == "shared":
        bwd = fwd
    else:
        raise ValueError(f"unknown r2l_mode {r2l_mode!r}")
    return VocabPair(fwd, bwd, kind)


# ---------------------------------------------------------------------------
# Vocab files


def save_vocab(vocab: Vocab, path: str | Path):
    lines = [f"kind={vocab.kind}"]
    lines.append(f"specials={vocab.sos},{vocab.eos},{vocab.unk}")
    for i, unit in enumerate(vocab.units):
        lines.append(f"{i}\t{unit}")
    if vocab.kind == "bpe":
        lines.append("#MERGES")
        for a, b in vocab.merges:
            lines.append(f"{a}\t{b}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if len(lines) < 2 or not lines[0].startswith("kind="):
        raise ValueError(f"{path}: not a vocab file")
    kind = lines[0].split("=", 1)[1]
    units: list[str] = []
    merges: list[tuple[str, str]] = []
    in_merges = False
    for ln, line in enumerate(lines[2:], start=3):
        if line == "#MERGES":
            in_merges = True
            continue
        if not line:
            continue
        left, _, right = line.partition("\t")
        if not _:
            raise ValueError(f"{path}:{ln}: malformed line {line!r}")
        if in_merges:
            merges.append((left, right))
        else:
            idx = int(left)
            if idx != len(units):
                raise ValueError(f"{path}:{ln}: non-dense unit id {idx}")
            units.append(right)
    return Vocab(kind, units, merges)
