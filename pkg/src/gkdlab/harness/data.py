"""Synthetic text-classification tasks, a word-level vocabulary, and batching.

Each class owns a small group of indicator words. A sentence carries more
indicators of its class than of any other class, so counting indicators
recovers the clean label; ``noise_rate`` then flips labels at random.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..model import CLS_ID, PAD_ID, UNK_ID, Batch

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[UNK]")
SPLITS = ("train", "val", "test")


@dataclass
class SyntheticSpec:
    n_classes: int = 2
    vocab_size: int = 1000
    n_train: int = 4000
    n_val: int = 500
    n_test: int = 500
    max_len: int = 32
    noise_rate: float = 0.0
    group_size: int = 5
    min_words: int = 4

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        n_words = self.vocab_size - len(SPECIAL_TOKENS)
        if n_words < self.n_classes * self.group_size + 1:
            raise ValueError(
                f"vocab_size={self.vocab_size} too small for {self.n_classes} indicator "
                f"groups of {self.group_size} plus filler words"
            )
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if not 2 <= self.min_words + 1 <= self.max_len:
            raise ValueError("min_words must fit within max_len (which counts [CLS])")


class Vocab:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, words: list[str], max_len: int) -> list[int]:
        ids = [CLS_ID] + [self.index.get(w, UNK_ID) for w in words]
        return ids[:max_len]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def _sentence(rng, label, groups, fillers, spec: SyntheticSpec) -> list[str]:
    n_words = int(rng.integers(spec.min_words, spec.max_len))
    main = int(rng.integers(1, 4))
    words = list(rng.choice(groups[label], size=main))
    if main > 1 and rng.random() < 0.5:
        other = int(rng.choice([c for c in range(spec.n_classes) if c != label]))
        words += list(rng.choice(groups[other], size=int(rng.integers(1, main))))
    n_words = max(n_words, len(words))
    words += list(rng.choice(fillers, size=n_words - len(words)))
    rng.shuffle(words)
    return [str(w) for w in words]


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int, out_dir) -> Path:
    """Write train/val/test TSVs, vocab.txt and dataset.json under ``out_dir``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    words = [f"w{i:04d}" for i in range(spec.vocab_size - len(SPECIAL_TOKENS))]
    perm = rng.permutation(len(words))
    n_ind = spec.n_classes * spec.group_size
    groups = [
        [words[j] for j in perm[c * spec.group_size : (c + 1) * spec.group_size]]
        for c in range(spec.n_classes)
    ]
    fillers = [words[j] for j in np.sort(perm[n_ind:])]

    seen: set[tuple] = set()
    splits: dict[str, list[tuple[int, list[str]]]] = {}
    for split in SPLITS:
        n = getattr(spec, f"n_{split}")
        rows = []
        while len(rows) < n:
            clean = int(rng.integers(spec.n_classes))
            sent = _sentence(rng, clean, groups, fillers, spec)
            label = clean
            if rng.random() < spec.noise_rate:
                label = int(rng.choice([c for c in range(spec.n_classes) if c != clean]))
            key = tuple(sent)
            if key in seen:
                continue
            seen.add(key)
            rows.append((label, sent))
        splits[split] = rows

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, rows in splits.items():
        write_tsv(out / f"{split}.tsv", rows)
    Vocab(list(SPECIAL_TOKENS) + words).save(out / "vocab.txt")
    meta = {"spec": asdict(spec), "seed": seed, "indicator_groups": groups}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def write_tsv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, words in rows:
            fh.write(f"{label}\t{' '.join(words)}\n")


def read_tsv(path) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                label, text = line.split("\t", 1)
                rows.append((int(label), text.split()))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>tokens'") from None
    return rows


@dataclass
class EncodedSplit:
    ids: list[list[int]]
    labels: np.ndarray
    words: list[list[str]]

    def __len__(self):
        return len(self.ids)

    def batch(self, indices) -> Batch:
        seqs = [self.ids[i] for i in indices]
        t = max(len(s) for s in seqs)
        tok = np.full((len(seqs), t), PAD_ID, dtype=np.int64)
        for r, s in enumerate(seqs):
            tok[r, : len(s)] = s
        return Batch(tok, np.array([len(s) for s in seqs]), self.labels[list(indices)])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])


def encode_rows(rows, vocab: Vocab, max_len: int) -> EncodedSplit:
    ids = [vocab.encode(words, max_len) for _, words in rows]
    if any(len(s) < 2 for s in ids):
        raise ValueError("sentence with no tokens")
    return EncodedSplit(ids, np.array([lab for lab, _ in rows], dtype=np.int64), [w for _, w in rows])


def load_dataset(data_dir, max_len: int) -> tuple[Vocab, dict[str, EncodedSplit]]:
    data_dir = Path(data_dir)
    vocab = Vocab.load(data_dir / "vocab.txt")
    splits = {}
    for split in SPLITS:
        path = data_dir / f"{split}.tsv"
        if path.exists():
            splits[split] = encode_rows(read_tsv(path), vocab, max_len)
    return vocab, splits


def indicator_counts(words: list[str], groups: list[list[str]]) -> np.ndarray:
    sets = [set(g) for g in groups]
    return np.array([sum(w in s for w in words) for s in sets])
