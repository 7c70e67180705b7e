"""Corpus ingestion, character tokenizer and deterministic batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)
MAX_CHARS = 512


@dataclass
class Corpus:
    samples: list[str]
    path: str = ""
    kept: int = 0
    dropped: int = 0

    def __len__(self):
        return len(self.samples)


def ingest(path, max_chars: int = MAX_CHARS) -> Corpus:
    """Read one sample per line, keeping lines strictly shorter than ``max_chars``.

    Blank lines are skipped and not counted.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None
    samples, dropped = [], 0
    for lineno, line in enumerate(raw.split(b"\n"), 1):
        try:
            text = line.decode("utf-8").rstrip("\r")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid UTF-8 ({exc.reason})") from None
        if not text:
            continue
        if len(text) < max_chars:
            samples.append(text)
        else:
            dropped += 1
    return Corpus(samples, str(path), kept=len(samples), dropped=dropped)


@dataclass
class Tokenizer:
    chars: list[str]
    stoi: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {c: i + len(SPECIALS) for i, c in enumerate(self.chars)}

    @property
    def vocab(self) -> list[str]:
        return list(SPECIALS) + self.chars

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.chars)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(c, UNK) for c in text]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == UNK:
                out.append("�")
            elif i >= len(SPECIALS):
                out.append(self.chars[i - len(SPECIALS)])
        return "".join(out)

    def to_json(self) -> str:
        return json.dumps({"specials": list(SPECIALS), "chars": self.chars}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        try:
            blob = json.loads(text)
            chars = blob["chars"]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed vocabulary file: {exc}") from None
        return cls(list(chars))

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        try:
            return cls.from_json(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from None


def build_vocab(corpus: Corpus) -> Tokenizer:
    if not corpus.samples:
        raise UsageError("cannot build a vocabulary from an empty corpus")
    return Tokenizer(sorted(set("".join(corpus.samples))))


class BatchStream:
    """Random-access batches: ``batch(k)`` depends only on (seed, k).

    Rows walk through seeded per-epoch permutations of the samples. Each
    sample is framed as BOS + text + EOS; long ones are cut at a seeded
    window, short ones padded with PAD. Targets are the inputs shifted by one;
    ``mask`` is False where the target is PAD.
    """

    def __init__(self, corpus: Corpus, tokenizer: Tokenizer, batch_size: int, seq_len: int, seed: int = 0):
        if not corpus.samples:
            raise UsageError("corpus is empty")
        if batch_size < 1 or seq_len < 1:
            raise UsageError("batch size and sequence length must be positive")
        if batch_size > len(corpus.samples):
            raise UsageError(
                f"batch size {batch_size} exceeds the {len(corpus.samples)} corpus samples"
            )
        self.seqs = [np.array([BOS] + tokenizer.encode(s) + [EOS], dtype=np.int64) for s in corpus.samples]
        longest = max(len(s) for s in self.seqs)
        if seq_len + 1 > longest:
            raise UsageError(
                f"sequence length {seq_len} exceeds the longest framed sample ({longest - 1} positions)"
            )
        self.B, self.L, self.seed = batch_size, seq_len, seed
        self._perms = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self.seqs))}
        return self._perms[epoch]

    def batch(self, k: int):
        n = len(self.seqs)
        window = np.full((self.B, self.L + 1), PAD, dtype=np.int64)
        for r in range(self.B):
            g = k * self.B + r
            seq = self.seqs[self._perm(g // n)[g % n]]
            if len(seq) > self.L + 1:
                start = int(np.random.default_rng([self.seed, k, r]).integers(0, len(seq) - self.L))
                window[r] = seq[start:start + self.L + 1]
            else:
                window[r, :len(seq)] = seq
        tokens, targets = window[:, :-1], window[:, 1:]
        return tokens.copy(), targets.copy(), targets != PAD

    def __iter__(self):
        k = 0
        while True:
            yield self.batch(k)
            k += 1


def batch_iter(corpus: Corpus, tokenizer: Tokenizer, B: int, L: int, seed: int = 0):
    return iter(BatchStream(corpus, tokenizer, B, L, seed))


_PHRASES = (
    "the cat sat on the mat.",
    "a bird sang in the tree.",
    "we like to read good books.",
    "the sun is warm today.",
    "she ran to the old red barn.",
    "he drinks tea every morning.",
)


def repetitive_corpus(n_bytes: int = 50_000, seed: int = 0) -> str:
    """Synthetic line corpus built from a few recurring phrases."""
    rng = np.random.default_rng(seed)
    lines, size = [], 0
    while size < n_bytes:
        k = int(rng.integers(3, 6))
        line = " ".join(_PHRASES[int(i)] for i in rng.integers(0, len(_PHRASES), k))
        lines.append(line)
        size += len(line) + 1
    return "\n".join(lines) + "\n"
