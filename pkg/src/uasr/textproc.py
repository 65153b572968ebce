"""Unit inventories, table-based phonemization, and the add-alpha n-gram LM."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

NGLM_MAGIC = b"UASRNGLM"
NGLM_VERSION = 1

SIL = "sil"
BOS = "<s>"
EOS = "</s>"


class UnitInventory:
    """Ordered unit inventory with a silence token at a stable index."""

    def __init__(self, units: list[str]):
        if len(set(units)) != len(units):
            raise ContractError("unit inventory contains duplicates")
        if SIL not in units:
            raise ContractError(f"unit inventory must contain the silence token {SIL!r}")
        self.units = list(units)
        self.index = {u: i for i, u in enumerate(self.units)}
        self.sil_id = self.index[SIL]

    def __len__(self):
        return len(self.units)

    def __contains__(self, unit):
        return unit in self.index

    def id(self, unit: str) -> int:
        if unit not in self.index:
            raise ContractError(f"unknown unit {unit!r}")
        return self.index[unit]

    def to_ids(self, units) -> np.ndarray:
        return np.array([self.id(u) for u in units], dtype=np.int64)

    def to_units(self, ids) -> list[str]:
        return [self.units[int(i)] for i in ids]

    @classmethod
    def from_lexicon(cls, lexicon: dict[str, list[str]]) -> "UnitInventory":
        units = sorted({u for pron in lexicon.values() for u in pron} - {SIL})
        return cls([SIL] + units)


def letter_lexicon(words) -> dict[str, list[str]]:
    """Lexicon-free fallback: spell each word out as letter units."""
    return {w: list(w) for w in words}


def load_lexicon(path) -> dict[str, list[str]]:
    """Plain data file: word TAB space-separated units."""
    lex = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{ln}: expected 'word<TAB>units'")
            word, units = line.split("\t", 1)
            lex[word] = units.split()
    return lex


def phonemize(words: list[str], lexicon: dict[str, list[str]],
              inventory: UnitInventory, p_sil: float,
              rng: np.random.Generator) -> np.ndarray:
    """Map words to unit ids with silence padding at both sentence edges and
    an independent silence draw at every interior word boundary."""
    missing = [w for w in words if w not in lexicon]
    if missing:
        raise ContractError(f"words missing from lexicon: {missing}")
    out = [inventory.sil_id]
    for i, w in enumerate(words):
        out.extend(inventory.id(u) for u in lexicon[w])
        if i < len(words) - 1 and rng.uniform() < p_sil:
            out.append(inventory.sil_id)
    out.append(inventory.sil_id)
    return np.array(out, dtype=np.int64)


@dataclass
class NgramLm:
    """Add-alpha smoothed n-gram model over unit ids.

    Contexts are BOS-padded; EOS is part of the predictive vocabulary so
    conditional distributions normalize over vocab_size + 1 outcomes.
    """

    order: int
    alpha: float
    vocab_size: int
    counts: dict = field(default_factory=dict)          # context tuple -> {unit: count}
    context_totals: dict = field(default_factory=dict)  # context tuple -> total

    BOS_ID = -1
    EOS_ID = -2

    @property
    def _outcomes(self) -> int:
        # units plus EOS; a unigram model has no sequence structure, so the
        # end marker only exists for order >= 2
        return self.vocab_size + (1 if self.order > 1 else 0)

    def prob(self, unit: int, context: tuple) -> float:
        total = self.context_totals.get(context, 0)
        count = self.counts.get(context, {}).get(unit, 0)
        return (count + self.alpha) / (total + self.alpha * self._outcomes)

    def logprob_sequence(self, seq, include_eos: bool = False) -> float:
        seq = [int(u) for u in seq]
        for u in seq:
            if not 0 <= u < self.vocab_size:
                raise ContractError(f"unit id {u} outside vocabulary of {self.vocab_size}")
        padded = [self.BOS_ID] * (self.order - 1) + seq
        logp = 0.0
        for i, u in enumerate(seq):
            ctx = tuple(padded[i : i + self.order - 1])
            logp += math.log(self.prob(u, ctx))
        if include_eos:
            ctx = tuple(padded[len(seq) : len(seq) + self.order - 1])
            logp += math.log(self.prob(self.EOS_ID, ctx))
        return logp


def train_ngram(corpus, order: int, alpha: float, vocab_size: int) -> NgramLm:
    """Counts with add-alpha smoothing; start/end markers added per sequence."""
    if not corpus:
        raise ContractError("ngram corpus must be nonempty")
    if order < 1:
        raise ContractError("ngram order must be >= 1")
    if alpha <= 0:
        raise ContractError("smoothing alpha must be > 0")
    lm = NgramLm(order=order, alpha=alpha, vocab_size=vocab_size)
    for seq in corpus:
        toks = [int(u) for u in seq] + ([NgramLm.EOS_ID] if order > 1 else [])
        padded = [NgramLm.BOS_ID] * (order - 1) + toks
        for i, u in enumerate(toks):
            ctx = tuple(padded[i : i + order - 1])
            lm.counts.setdefault(ctx, {})
            lm.counts[ctx][u] = lm.counts[ctx].get(u, 0) + 1
            lm.context_totals[ctx] = lm.context_totals.get(ctx, 0) + 1
    return lm


def lm_nll(lm: NgramLm, seq) -> float:
    """Mean per-token negative log-likelihood in nats."""
    seq = list(seq)
    if not seq:
        raise ContractError("cannot score an empty sequence")
    return -lm.logprob_sequence(seq) / len(seq)


# --- LM file I/O ----------------------------------------------------------


def save_ngram(path, lm: NgramLm, inventory: UnitInventory | None = None) -> None:
    vocab = inventory.units if inventory is not None else [str(i) for i in range(lm.vocab_size)]
    with open(path, "wb") as f:
        f.write(NGLM_MAGIC)
        f.write(struct.pack("<IIdI", NGLM_VERSION, lm.order, lm.alpha, lm.vocab_size))
        f.write(struct.pack("<I", len(vocab)))
        for u in vocab:
            raw = u.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(struct.pack("<Q", len(lm.counts)))
        for ctx in sorted(lm.counts):
            f.write(struct.pack(f"<{lm.order - 1}i", *ctx) if lm.order > 1 else b"")
            items = sorted(lm.counts[ctx].items())
            f.write(struct.pack("<I", len(items)))
            for u, c in items:
                f.write(struct.pack("<iQ", u, c))


def load_ngram(path) -> tuple[NgramLm, list[str]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != NGLM_MAGIC:
            raise FormatError(f"bad LM magic {magic!r}")
        version, order, alpha, vocab_size = struct.unpack("<IIdI", f.read(20))
        if version != NGLM_VERSION:
            raise FormatError(f"unsupported LM version {version}")
        (n_vocab,) = struct.unpack("<I", f.read(4))
        vocab = []
        for _ in range(n_vocab):
            (ln,) = struct.unpack("<H", f.read(2))
            vocab.append(f.read(ln).decode("utf-8"))
        lm = NgramLm(order=order, alpha=alpha, vocab_size=vocab_size)
        (n_ctx,) = struct.unpack("<Q", f.read(8))
        for _ in range(n_ctx):
            ctx = struct.unpack(f"<{order - 1}i", f.read(4 * (order - 1))) if order > 1 else ()
            (n_items,) = struct.unpack("<I", f.read(4))
            table = {}
            total = 0
            for _ in range(n_items):
                u, c = struct.unpack("<iQ", f.read(12))
                table[u] = c
                total += c
            lm.counts[ctx] = table
            lm.context_totals[ctx] = total
    return lm, vocab


def read_sentences(path) -> list[list[str]]:
    """UTF-8 text corpus, one whitespace-tokenized sentence per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            toks = line.split()
            if toks:
                out.append(toks)
    return out


def write_transcripts(path, sequences, inventory: UnitInventory) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(" ".join(inventory.to_units(seq)) + "\n")


def read_transcripts(path, inventory: UnitInventory) -> list[np.ndarray]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            toks = line.split()
            out.append(inventory.to_ids(toks))
    return out
