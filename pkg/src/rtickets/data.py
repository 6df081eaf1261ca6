"""Synthetic task generation, TSV ingestion, vocabulary handling, batching.

The synthetic task is a bag-of-tokens classification problem with two kinds
of predictive features:

* signal tokens: one per example, drawn from a large per-class pool, and
  always consistent with the label (unless noise_rate drops them).  A model
  that reads the signal generalizes and cannot be attacked.
* shortcut tokens: a few copies per example drawn from a small per-class
  pool, consistent with the label only with probability ``correlation``.
  They are frequent and easy to latch onto, and the emitted substitution
  table makes exactly these tokens attackable, so a shortcut-reliant model
  is accurate but fragile.

Token layout: 4 specials, then fillers, then signal tokens (class-major),
then shortcut tokens (class-major).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .seeds import np_rng

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<mask>", "<cls>"]


@dataclass
class Batch:
    """One minibatch of padded token ids with labels and a padding mask."""

    token_ids: np.ndarray  # int64 [batch, seq]
    labels: np.ndarray  # int64 [batch]
    pad_mask: np.ndarray  # bool [batch, seq], True where a real token sits


@dataclass
class Corpus:
    examples: list[list[int]]
    labels: list[int]
    vocab: dict[str, int]
    split: str
    seq_len: int

    def __len__(self) -> int:
        return len(self.examples)

    def subset(self, n: int) -> "Corpus":
        return Corpus(self.examples[:n], self.labels[:n], self.vocab, self.split, self.seq_len)


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    seq_len: int = 16
    min_len: int = 10
    filler_tokens: int = 24
    signal_per_class: int = 20
    shortcut_per_class: int = 3
    shortcut_copies: int = 3
    noise_rate: float = 0.0
    train_correlation: float = 0.95
    dev_correlation: float = 0.95
    test_correlation: float = 0.95
    pretrain_correlation: float = 0.5
    # repeated signal tokens make them predictable for the masked-token
    # pretraining objective, which builds usable signal features into theta0
    pretrain_signal_copies: int = 3
    # also offer shortcut tokens as substitutions at filler positions, so the
    # attacker can stack more misleading evidence than natural examples carry;
    # any residual shortcut sensitivity then becomes a liability
    substitute_fillers: bool = True
    pretrain_size: int = 3000
    train_size: int = 2000
    dev_size: int = 400
    test_size: int = 600
    substitution_fillers: int = 2

    @property
    def vocab_size(self) -> int:
        return (
            len(SPECIALS)
            + self.filler_tokens
            + self.num_classes * (self.signal_per_class + self.shortcut_per_class)
        )

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not (0 <= self.noise_rate <= 1):
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.min_len < self.shortcut_copies + max(1, self.pretrain_signal_copies):
            raise ValueError("min_len must fit the signal tokens plus all shortcut copies")
        if self.min_len > self.seq_len:
            raise ValueError("min_len exceeds seq_len")
        if min(self.filler_tokens, self.signal_per_class, self.shortcut_per_class) < 1:
            raise ValueError("token pools must be non-empty")
        if min(self.pretrain_size, self.train_size, self.dev_size, self.test_size) < 1:
            raise ValueError("split sizes must be >= 1")


@dataclass
class SyntheticTask:
    spec: SyntheticSpec
    vocab: dict[str, int]
    splits: dict[str, Corpus]
    substitutions: dict[int, list[int]]
    filler_ids: list[int] = field(default_factory=list)
    signal_ids: list[list[int]] = field(default_factory=list)  # per class
    shortcut_ids: list[list[int]] = field(default_factory=list)  # per class


def _build_synthetic_vocab(spec: SyntheticSpec):
    tokens = list(SPECIALS)
    tokens += [f"fill{i}" for i in range(spec.filler_tokens)]
    for c in range(spec.num_classes):
        tokens += [f"sig{c}_{i}" for i in range(spec.signal_per_class)]
    for c in range(spec.num_classes):
        tokens += [f"cue{c}_{i}" for i in range(spec.shortcut_per_class)]
    vocab = {t: i for i, t in enumerate(tokens)}

    base = len(SPECIALS)
    filler_ids = list(range(base, base + spec.filler_tokens))
    base += spec.filler_tokens
    signal_ids = []
    for _ in range(spec.num_classes):
        signal_ids.append(list(range(base, base + spec.signal_per_class)))
        base += spec.signal_per_class
    shortcut_ids = []
    for _ in range(spec.num_classes):
        shortcut_ids.append(list(range(base, base + spec.shortcut_per_class)))
        base += spec.shortcut_per_class
    return vocab, filler_ids, signal_ids, shortcut_ids


def _gen_split(spec, rng, size, correlation, filler_ids, signal_ids, shortcut_ids,
               signal_copies=1):
    examples, labels = [], []
    fillers = np.array(filler_ids)
    for _ in range(size):
        label = int(rng.integers(spec.num_classes))
        length = int(rng.integers(spec.min_len, spec.seq_len + 1))
        ids = fillers[rng.integers(len(fillers), size=length)].tolist()

        slots = rng.permutation(length)[: spec.shortcut_copies + signal_copies]
        if rng.uniform() >= spec.noise_rate:
            sig = int(rng.choice(signal_ids[label]))
            for pos in slots[:signal_copies]:
                ids[pos] = sig
        cue_class = label
        if rng.uniform() >= correlation:
            others = [c for c in range(spec.num_classes) if c != label]
            cue_class = int(others[rng.integers(len(others))])
        for pos in slots[signal_copies:]:
            ids[pos] = int(rng.choice(shortcut_ids[cue_class]))

        examples.append(ids)
        labels.append(label)
    return examples, labels


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticTask:
    """Generate all splits plus the substitution table, deterministically per seed."""
    spec.validate()
    vocab, filler_ids, signal_ids, shortcut_ids = _build_synthetic_vocab(spec)

    split_plan = {
        "pretrain": (spec.pretrain_size, spec.pretrain_correlation),
        "train": (spec.train_size, spec.train_correlation),
        "dev": (spec.dev_size, spec.dev_correlation),
        "test": (spec.test_size, spec.test_correlation),
    }
    splits = {}
    for name, (size, corr) in split_plan.items():
        rng = np_rng(seed, "synthetic", name)
        copies = spec.pretrain_signal_copies if name == "pretrain" else 1
        ex, lab = _gen_split(spec, rng, size, corr, filler_ids, signal_ids,
                             shortcut_ids, signal_copies=max(1, copies))
        splits[name] = Corpus(ex, lab, vocab, name, spec.seq_len)

    # Shortcut tokens are substitutable by the other classes' shortcut tokens
    # and a couple of neutral fillers; fillers (when enabled) by shortcut
    # tokens of any class.  The causal signal tokens are never in the table,
    # so every substitution preserves the true label.
    table: dict[int, list[int]] = {}
    neutral = filler_ids[: spec.substitution_fillers]
    all_cues = sorted(t for toks in shortcut_ids for t in toks)
    for c in range(spec.num_classes):
        cross = sorted(t for o in range(spec.num_classes) if o != c for t in shortcut_ids[o])
        for tok in shortcut_ids[c]:
            table[tok] = cross + list(neutral)
    if spec.substitute_fillers:
        for tok in filler_ids:
            table[tok] = [t for t in all_cues if t != tok][:8]

    return SyntheticTask(
        spec=spec,
        vocab=vocab,
        splits=splits,
        substitutions=table,
        filler_ids=filler_ids,
        signal_ids=signal_ids,
        shortcut_ids=shortcut_ids,
    )


def batches(corpus: Corpus, batch_size: int, seed: int = 0, shuffle: bool = False):
    """Yield Batch objects covering every example exactly once.

    Shuffle order is deterministic per seed; pass a per-epoch derived seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(corpus)
    order = np.arange(n)
    if shuffle:
        order = np_rng(seed, "shuffle").permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        token_ids = np.full((len(idx), corpus.seq_len), PAD, dtype=np.int64)
        labels = np.empty(len(idx), dtype=np.int64)
        for row, i in enumerate(idx):
            ids = corpus.examples[i][: corpus.seq_len]
            token_ids[row, : len(ids)] = ids
            labels[row] = corpus.labels[i]
        yield Batch(token_ids=token_ids, labels=labels, pad_mask=token_ids != PAD)


def single_batch(ids: list[int], label: int, seq_len: int) -> Batch:
    token_ids = np.full((1, seq_len), PAD, dtype=np.int64)
    token_ids[0, : len(ids)] = ids[:seq_len]
    return Batch(
        token_ids=token_ids,
        labels=np.array([label], dtype=np.int64),
        pad_mask=token_ids != PAD,
    )


# --- text corpora -----------------------------------------------------------


def load_tsv(path, max_seq_len: int, vocab: dict[str, int] | None = None, split: str = "train"):
    """Load a ``label<TAB>text`` file.

    Tokenization is whitespace + lowercase.  With vocab=None a fresh
    vocabulary is built (specials first, then first-seen order); otherwise
    unknown tokens map to <unk>.  Sequences are truncated to max_seq_len.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or not parts[0].strip():
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
            try:
                label = int(parts[0])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: label is not an integer") from exc
            rows.append((label, parts[1].lower().split()))

    if not rows:
        warnings.warn(f"{path}: empty corpus")

    build = vocab is None
    if build:
        vocab = {t: i for i, t in enumerate(SPECIALS)}
        for _, toks in rows:
            for t in toks:
                if t not in vocab:
                    vocab[t] = len(vocab)

    examples, labels = [], []
    for label, toks in rows:
        ids = [vocab.get(t, UNK) for t in toks][:max_seq_len]
        examples.append(ids)
        labels.append(label)
    return Corpus(examples, labels, vocab, split, max_seq_len)


def save_vocab(vocab: dict[str, int], path):
    """One token per line; the id is the 0-based line index."""
    ordered = sorted(vocab.items(), key=lambda kv: kv[1])
    if [i for _, i in ordered] != list(range(len(ordered))):
        raise ValueError("vocab ids must be contiguous from 0")
    with open(path, "w", encoding="utf-8") as fh:
        for tok, _ in ordered:
            fh.write(tok + "\n")


def load_vocab(path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    while tokens and tokens[-1] == "":
        tokens.pop()
    vocab = {t: i for i, t in enumerate(tokens)}
    if len(vocab) != len(tokens):
        raise ValueError(f"{path}: duplicate tokens in vocabulary")
    for i, special in enumerate(SPECIALS):
        if vocab.get(special) != i:
            raise ValueError(f"{path}: line {i} must be {special!r}")
    return vocab


def save_substitutions(table: dict[int, list[int]], vocab: dict[str, int], path):
    inv = {i: t for t, i in vocab.items()}
    with open(path, "w", encoding="utf-8") as fh:
        for tok_id in sorted(table):
            cands = ",".join(inv[c] for c in table[tok_id])
            fh.write(f"{inv[tok_id]}\t{cands}\n")


def load_substitutions(path, vocab: dict[str, int], max_candidates: int = 8):
    """Parse ``token<TAB>cand1,cand2,...`` lines into an id-level table."""
    table: dict[int, list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'token<TAB>candidates'")
            tok, cand_str = parts
            if tok not in vocab:
                warnings.warn(f"{path}:{lineno}: token {tok!r} not in vocab, skipped")
                continue
            tok_id = vocab[tok]
            cands = []
            for c in cand_str.split(","):
                c = c.strip()
                if not c:
                    continue
                if c not in vocab:
                    warnings.warn(f"{path}:{lineno}: candidate {c!r} not in vocab, skipped")
                    continue
                cid = vocab[c]
                if cid != tok_id and cid not in cands:
                    cands.append(cid)
            table[tok_id] = cands[:max_candidates]
    return table
