"""Synthetic instruction datasets, byte-level tokenization, and batching.

All four task families share the same response formatting markers (the
"style" a model picks up quickly) while transforming the instruction content
differently, so two datasets can differ in content yet exercise the same
output conventions. Generation is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError

PAD, BOS, SEP, EOS = 256, 257, 258, 259
VOCAB_SIZE = 260

STYLE_PREFIX = "=> "
STYLE_SUFFIX = " <="

# The four styled families share response markers but transform content
# differently. "plain" is unformatted word continuation; "pretrain" mixes
# continuation, bare verb-conditioned transformations, and a small slice of
# fully styled examples. A base model trained on that mixture already
# carries the task and style circuits, so styled fine-tuning afterwards
# amplifies them rather than building them from scratch, the regime the
# layer-ranking experiments assume.
FAMILIES = ("reverse", "sort-tokens", "uppercase-style", "delimiter-wrap", "plain", "pretrain")

_FAMILY_VERBS = {
    "reverse": "reverse",
    "sort-tokens": "sort",
    "uppercase-style": "shout",
    "delimiter-wrap": "wrap",
}


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    response: str

    def __post_init__(self):
        if not self.instruction or not self.response:
            raise ConfigError("instruction and response must be non-empty")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    family: str
    size: int
    vocab_seed: int = 7

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown task family {self.family!r}; choose from {FAMILIES}")
        if self.size <= 0:
            raise ConfigError("dataset size must be positive")


def _word_bank(vocab_seed: int, count: int = 64) -> list[str]:
    rng = np.random.default_rng(vocab_seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    words = set()
    while len(words) < count:
        n = int(rng.integers(2, 5))
        words.add("".join(letters[i] for i in rng.integers(0, 26, size=n)))
    return sorted(words)


def _transform(family: str, words: list[str]) -> str:
    if family == "reverse":
        return " ".join(reversed(words))
    if family == "sort-tokens":
        return " ".join(sorted(words))
    if family == "uppercase-style":
        return " ".join(words).upper()
    return " ".join(f"[{w}]" for w in words)  # delimiter-wrap


def generate_dataset(spec: SyntheticTaskSpec, seed: int) -> list[InstructionExample]:
    bank = _word_bank(spec.vocab_seed)
    rng = np.random.default_rng([spec.vocab_seed, seed])
    out = []
    styled = [f for f in FAMILIES if f in _FAMILY_VERBS]
    for _ in range(spec.size):
        k = int(rng.integers(3, 6))
        words = [bank[i] for i in rng.integers(0, len(bank), size=k)]
        if spec.family == "plain":
            more = [bank[i] for i in rng.integers(0, len(bank), size=int(rng.integers(3, 6)))]
            out.append(InstructionExample(" ".join(words), " ".join(more)))
            continue
        if spec.family == "pretrain":
            u = rng.random()
            family = styled[int(rng.integers(0, len(styled)))]
            if u < 0.4:
                more = [bank[i] for i in rng.integers(0, len(bank), size=int(rng.integers(3, 6)))]
                out.append(InstructionExample(" ".join(words), " ".join(more)))
            elif u < 0.8:
                out.append(InstructionExample(
                    f"{_FAMILY_VERBS[family]}: {' '.join(words)}", _transform(family, words)))
            else:
                out.append(InstructionExample(
                    f"{_FAMILY_VERBS[family]}: {' '.join(words)}",
                    f"{STYLE_PREFIX}{_transform(family, words)}{STYLE_SUFFIX}"))
            continue
        verb = _FAMILY_VERBS[spec.family]
        instruction = f"{verb}: {' '.join(words)}"
        response = f"{STYLE_PREFIX}{_transform(spec.family, words)}{STYLE_SUFFIX}"
        out.append(InstructionExample(instruction, response))
    return out


def tokenize(text: str) -> list[int]:
    """Byte-level ids: utf-8 bytes map to 0..255."""
    return list(text.encode("utf-8"))


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of tokenize; special ids are dropped, ids >= 260 rejected."""
    data = []
    for i in ids:
        i = int(i)
        if i >= VOCAB_SIZE:
            raise IndexError(f"token id {i} out of range for vocabulary {VOCAB_SIZE}")
        if i < 256:
            data.append(i)
    return bytes(data).decode("utf-8")


def load_jsonl(path) -> list[InstructionExample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(InstructionExample(obj["instruction"], obj["response"]))
    if not out:
        raise ConfigError(f"no examples found in {path}")
    return out


def save_jsonl(examples: Iterable[InstructionExample], path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps({"instruction": ex.instruction, "response": ex.response}) + "\n")
    tmp.replace(path)


@dataclass
class Batch:
    inputs: np.ndarray   # [b, L] int64, positions 0..L-1
    targets: np.ndarray  # [b, L] int64, next-token targets
    mask: np.ndarray     # [b, L] bool, True where the target is a response token
    batch_id: str


def _encode(example: InstructionExample, seq_len: int) -> Optional[tuple[list[int], int]]:
    """Sequence [BOS] instruction [SEP] response [EOS], response truncated to fit.

    Returns (ids, sep_position) or None when even the instruction alone
    does not fit. The end-of-sequence token counts as part of the response
    span for loss purposes.
    """
    instr = tokenize(example.instruction)
    resp = tokenize(example.response)
    head = [BOS] + instr + [SEP]
    if len(head) + 1 > seq_len:  # no room for any response token + EOS
        return None
    room = seq_len - len(head) - 1
    resp = resp[:room]
    return head + resp + [EOS], len(head) - 1


class Batches:
    """Fixed probe batches plus a deterministic training stream.

    Probe batches are drawn first from a seeded shuffle and never overlap
    the training pool; they estimate the expected loss for the stability
    monitor and double as the held-out evaluation set.
    """

    def __init__(
        self,
        examples: list[InstructionExample],
        batch_size: int,
        seq_len: int,
        seed: int,
        probe_batches: int = 8,
    ):
        if batch_size <= 0 or probe_batches <= 0:
            raise ConfigError("batch_size and probe_batches must be positive")
        encoded = []
        for ex in examples:
            enc = _encode(ex, seq_len)
            if enc is not None:
                encoded.append(enc)
        if not encoded:
            raise ConfigError("every example exceeds seq_len; nothing to batch")
        if len(encoded) < (probe_batches + 1) * batch_size:
            raise ConfigError(
                f"{len(encoded)} usable examples cannot fill {probe_batches} probe batches "
                f"plus at least one training batch of size {batch_size}"
            )
        self.batch_size = batch_size
        self.seed = seed
        self._length = max(len(ids) for ids, _ in encoded)

        rng = np.random.default_rng(seed)
        order = rng.permutation(len(encoded))
        probe_count = probe_batches * batch_size
        probe_idx = order[:probe_count]
        self._train_encoded = [encoded[i] for i in order[probe_count:]]
        self.probe = [
            self._build([encoded[i] for i in probe_idx[j: j + batch_size]], f"probe{j // batch_size}")
            for j in range(0, probe_count, batch_size)
        ]
        self._epoch_cache: dict[int, np.ndarray] = {}

    @property
    def train_batches_per_epoch(self) -> int:
        return len(self._train_encoded) // self.batch_size

    def _build(self, group: list[tuple[list[int], int]], batch_id: str) -> Batch:
        b = len(group)
        length = max(len(ids) for ids, _ in group)  # pad each batch to its own max
        seqs = np.full((b, length), PAD, dtype=np.int64)
        masks = np.zeros((b, length), dtype=bool)
        for i, (ids, sep_pos) in enumerate(group):
            seqs[i, : len(ids)] = ids
            masks[i, sep_pos + 1: len(ids)] = True  # response tokens + EOS
        inputs = seqs[:, :-1]
        targets = seqs[:, 1:]
        mask = masks[:, 1:]
        return Batch(inputs, targets, mask, batch_id)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._epoch_cache:
            rng = np.random.default_rng([self.seed, 1 + epoch])
            self._epoch_cache[epoch] = rng.permutation(len(self._train_encoded))
        return self._epoch_cache[epoch]

    def train_batch(self, step: int) -> Batch:
        """Deterministic batch for a zero-based global step index."""
        per_epoch = self.train_batches_per_epoch
        epoch, slot = divmod(step, per_epoch)
        order = self._epoch_order(epoch)
        idx = order[slot * self.batch_size: (slot + 1) * self.batch_size]
        return self._build([self._train_encoded[i] for i in idx], f"train{step}")

    def sample_batches(self, count: int, seed: int) -> list[Batch]:
        """Deterministic stream of training-pool batches for gate learning.

        Batches are drawn epoch-style (each pass covers every example once,
        reshuffled between passes) so the stream weights all examples evenly.
        """
        n = len(self._train_encoded)
        per_epoch = n // self.batch_size
        out = []
        epoch = -1
        order = None
        for j in range(count):
            e, slot = divmod(j, per_epoch)
            if e != epoch:
                epoch = e
                order = np.random.default_rng([self.seed, 2, seed, e]).permutation(n)
            idx = order[slot * self.batch_size: (slot + 1) * self.batch_size]
            out.append(self._build([self._train_encoded[i] for i in idx], f"sample{j}"))
        return out
