"""Synthetic reasoning tasks with controllable depth, plus a plain-text corpus loader.

Everything is character level over a 128-symbol ASCII vocabulary. Each
instance is rendered as a prompt string followed by a one-symbol answer; only
the answer position is supervised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VOCAB_SIZE = 128
PAD = 0
FALLBACK = 26  # ASCII SUB, stands in for bytes outside the vocabulary
SYMBOLS = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
OPS = "+-*"


def encode_text(text: str) -> list[int]:
    return [c if c < VOCAB_SIZE else FALLBACK for c in text.encode("utf-8")]


def decode_ids(ids: Iterable[int]) -> str:
    return bytes(int(i) for i in ids if int(i) != PAD).decode("utf-8", errors="replace")


def symbol(value: int) -> str:
    return SYMBOLS[value]


def symbol_value(ch: str) -> int:
    return SYMBOLS.index(ch)


@dataclass
class Instance:
    prompt: str
    answer: str

    @property
    def text(self) -> str:
        return self.prompt + self.answer


@dataclass
class ExampleBatch:
    """Next-token grids: ``inputs[:, t]`` predicts ``targets[:, t]`` where ``mask`` is set."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, idx) -> "ExampleBatch":
        return ExampleBatch(self.inputs[idx], self.targets[idx], self.mask[idx], self.meta)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                n = int(np.nonzero(self.mask[i])[0].max()) + 1 if self.mask[i].any() else self.inputs.shape[1]
                row = {
                    "input": self.inputs[i, :n].tolist(),
                    "target": self.targets[i, :n].tolist(),
                    "mask": self.mask[i, :n].astype(int).tolist(),
                }
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ExampleBatch":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        width = max(len(r["input"]) for r in rows)
        inputs = np.full((len(rows), width), PAD, dtype=np.int64)
        targets = np.full((len(rows), width), PAD, dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            n = len(r["input"])
            inputs[i, :n] = r["input"]
            targets[i, :n] = r["target"]
            mask[i, :n] = np.asarray(r["mask"], dtype=bool)
        return cls(inputs, targets, mask)


def to_batch(instances: Sequence[Instance], width: int | None = None) -> ExampleBatch:
    texts = [encode_text(inst.text) for inst in instances]
    n_prompt = [len(encode_text(inst.prompt)) for inst in instances]
    longest = max(len(t) for t in texts) - 1
    width = longest if width is None else width
    if width < longest:
        raise ValueError(f"width {width} shorter than the longest instance ({longest})")
    inputs = np.full((len(texts), width), PAD, dtype=np.int64)
    targets = np.full((len(texts), width), PAD, dtype=np.int64)
    mask = np.zeros((len(texts), width), dtype=bool)
    for i, (ids, p) in enumerate(zip(texts, n_prompt)):
        inputs[i, : len(ids) - 1] = ids[:-1]
        targets[i, : len(ids) - 1] = ids[1:]
        mask[i, p - 1 : len(ids) - 1] = True
    return ExampleBatch(inputs, targets, mask)


# ---------------------------------------------------------------------------
# modular arithmetic chains


def eval_chain(operands: Sequence[int], ops: str, modulus: int) -> int:
    """Left-to-right evaluation of ``a0 op a1 op ... `` modulo ``modulus``."""
    acc = operands[0] % modulus
    for op, b in zip(ops, operands[1:]):
        if op == "+":
            acc = (acc + b) % modulus
        elif op == "-":
            acc = (acc - b) % modulus
        elif op == "*":
            acc = (acc * b) % modulus
        else:
            raise ValueError(f"unknown op {op!r}")
    return acc


def mod_chain_instance(rng: np.random.Generator, depth: int, modulus: int) -> Instance:
    operands = rng.integers(0, modulus, size=depth + 1).tolist()
    ops = "".join(OPS[i] for i in rng.integers(0, len(OPS), size=depth))
    prompt = symbol(operands[0]) + "".join(op + symbol(b) for op, b in zip(ops, operands[1:])) + "="
    return Instance(prompt, symbol(eval_chain(operands, ops, modulus)))


def gen_mod_chain(seed: int, depth: int | tuple[int, int], modulus: int, count: int, exclude: set[str] | None = None) -> list[Instance]:
    """``count`` chains of ``depth`` operations (or a uniform draw from an inclusive depth range).

    Instances whose text is in ``exclude`` are skipped, which is how train
    splits are kept disjoint from test splits.
    """
    if modulus < 2 or modulus > len(SYMBOLS):
        raise ValueError(f"modulus must be in [2, {len(SYMBOLS)}]")
    lo, hi = (depth, depth) if isinstance(depth, int) else depth
    if lo < 1 or hi < lo:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    out: list[Instance] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise ValueError("could not draw enough distinct instances; space exhausted")
        d = int(rng.integers(lo, hi + 1))
        inst = mod_chain_instance(rng, d, modulus)
        if exclude is not None and inst.text in exclude:
            continue
        out.append(inst)
    return out


def solve_mod_chain(prompt: str, modulus: int) -> int:
    body = prompt.rstrip("=")
    operands = [symbol_value(c) for c in body[0::2]]
    return eval_chain(operands, body[1::2], modulus)


# ---------------------------------------------------------------------------
# k-hop function composition


def k_hop_instance(rng: np.random.Generator, hops: int, domain: int, table: np.ndarray | None = None) -> Instance:
    names = "abcdefghijklmnopqrstuvwxyz"[:domain]
    if table is None:
        table = rng.integers(0, domain, size=domain)
    order = rng.permutation(domain)
    x = int(rng.integers(0, domain))
    y = x
    for _ in range(hops):
        y = int(table[y])
    pairs = ",".join(names[i] + names[table[i]] for i in order)
    prompt = f"{pairs}|{names[x]}^{hops}="
    return Instance(prompt, names[y])


def gen_k_hop(seed: int, hops: int, domain: int, count: int, exclude: set[str] | None = None) -> list[Instance]:
    """Random function table over ``domain`` letters, query ``f^hops(x)``."""
    if hops < 1 or hops > 9:
        raise ValueError("hops must be in [1, 9]")
    if domain < 2 or domain > 26:
        raise ValueError("domain must be in [2, 26]")
    rng = np.random.default_rng(seed)
    out: list[Instance] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise ValueError("could not draw enough distinct instances; space exhausted")
        inst = k_hop_instance(rng, hops, domain)
        if exclude is not None and inst.text in exclude:
            continue
        out.append(inst)
    return out


def solve_k_hop(prompt: str) -> str:
    pairs, query = prompt.rstrip("=").split("|")
    table = {p[0]: p[1] for p in pairs.split(",")}
    x, hops = query.split("^")
    for _ in range(int(hops)):
        x = table[x]
    return x


# ---------------------------------------------------------------------------
# task specs and splits


@dataclass(frozen=True)
class TaskSpec:
    """A task family with its difficulty knobs and split sizes.

    ``train_depth`` lets the training split draw from a depth range while the
    test split uses ``depth`` exactly.
    """

    kind: str = "mod_chain"
    depth: int = 4
    modulus: int = 5
    train_depth: tuple[int, int] | None = None
    domain: int = 6
    seq_len: int = 32
    seed: int = 0
    n_train: int = 4096
    n_test: int = 512
    corpus: str | None = None

    KINDS = ("mod_chain", "k_hop", "copy_reverse", "lm_corpus")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.train_depth is not None:
            object.__setattr__(self, "train_depth", tuple(self.train_depth))

    @property
    def name(self) -> str:
        if self.kind == "mod_chain":
            return f"mod_chain(d={self.depth},p={self.modulus})"
        if self.kind == "k_hop":
            return f"k_hop(h={self.depth},n={self.domain})"
        if self.kind == "copy_reverse":
            return f"copy_reverse(n={self.depth})"
        return "lm_corpus"

    @property
    def n_answers(self) -> int:
        if self.kind == "mod_chain":
            return self.modulus
        if self.kind in ("k_hop", "copy_reverse"):
            return self.domain
        return VOCAB_SIZE

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["train_depth"] is not None:
            d["train_depth"] = list(d["train_depth"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def _generate(self, seed: int, depth, count: int, exclude: set[str] | None) -> list[Instance]:
        if self.kind == "mod_chain":
            return gen_mod_chain(seed, depth, self.modulus, count, exclude)
        if self.kind == "k_hop":
            return gen_k_hop(seed, depth, self.domain, count, exclude)
        if self.kind == "copy_reverse":
            return gen_copy_reverse(seed, depth, self.domain, count, exclude)
        raise ValueError("lm_corpus has no generated splits; use load_corpus")

    def test_instances(self) -> list[Instance]:
        # distinct instance seed streams: test uses 2*seed+1, train uses 2*seed
        return self._generate(2 * self.seed + 1, self.depth, self.n_test, None)

    def train_instances(self) -> list[Instance]:
        held_out = {inst.text for inst in self.test_instances()}
        depth = self.train_depth if self.train_depth is not None else self.depth
        return self._generate(2 * self.seed, depth, self.n_train, held_out)

    def splits(self) -> tuple[ExampleBatch, ExampleBatch]:
        train, test = self.train_instances(), self.test_instances()
        width = max(len(encode_text(i.text)) for i in train + test) - 1
        if width > self.seq_len:
            raise ValueError(f"instances need {width} positions, seq_len is {self.seq_len}")
        tr, te = to_batch(train, width), to_batch(test, width)
        tr.meta = te.meta = {"task": self.name}
        return tr, te


def gen_copy_reverse(seed: int, length: int, domain: int, count: int, exclude: set[str] | None = None) -> list[Instance]:
    """Reverse a string; the answer is the first symbol of the reversal (single-token answers)."""
    names = "abcdefghijklmnopqrstuvwxyz"[:domain]
    rng = np.random.default_rng(seed)
    out: list[Instance] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise ValueError("could not draw enough distinct instances; space exhausted")
        s = "".join(names[i] for i in rng.integers(0, domain, size=length))
        inst = Instance(s + ">", s[-1])
        if exclude is not None and inst.text in exclude:
            continue
        out.append(inst)
    return out


# ---------------------------------------------------------------------------
# corpus


def load_corpus(path: str | Path, seq_len: int, vocab: int = VOCAB_SIZE) -> np.ndarray:
    """Byte-level tokenization in fixed, non-overlapping windows of ``seq_len``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    raw = path.read_bytes()
    if not raw:
        raise OSError(f"corpus file is empty: {path}")
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    ids = np.where(ids < vocab, ids, FALLBACK)
    n = len(ids) // seq_len
    if n == 0:
        raise ValueError(f"corpus shorter than one window of {seq_len}")
    return ids[: n * seq_len].reshape(n, seq_len)


def bundled_corpus_path() -> Path:
    return Path(__file__).parent / "data" / "corpus.txt"
