"""Corpus handling: documents, word-level vocabulary, calibration pools,
evaluation windows and perplexity.

Corpus files are UTF-8 plain text, one document per blank-line-separated
block. The vocabulary is word-level, built from the training split by
frequency (ties lexicographic), capped at vocab_size, id 0 reserved for
the unknown token.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import TransformerLM, _as_batch, _per_sample_nll, _validate_tokens

UNK = "<unk>"


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if not tokens or tokens[0] != UNK:
            raise ConfigurationError("vocabulary must start with the unknown token")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(cls, documents, vocab_size: int) -> "Vocabulary":
        counts = Counter()
        for doc in documents:
            counts.update(doc.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked[: vocab_size - 1]]
        return cls([UNK] + words)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, 0) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.id_to_token:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f])


@dataclass
class Corpus:
    documents: list[str]
    source: str
    vocab: Vocabulary

    def doc_tokens(self, index: int) -> list[int]:
        return self.vocab.encode(self.documents[index])


def load_documents(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigurationError(f"corpus file not found: {path}") from None
    docs = [block.strip() for block in text.split("\n\n")]
    docs = [" ".join(d.split()) for d in docs if d.strip()]
    if not docs:
        raise ConfigurationError(f"corpus file has no documents: {path}")
    return docs


def split_documents(documents, eval_fraction: float = 0.1):
    """Deterministic contiguous split: train, then two disjoint eval tails."""
    n = len(documents)
    n_eval = max(1, int(n * eval_fraction))
    if n - 2 * n_eval < 1:
        raise ConfigurationError(
            f"corpus of {n} documents is too small for two eval splits of {n_eval}"
        )
    train = documents[: n - 2 * n_eval]
    eval1 = documents[n - 2 * n_eval : n - n_eval]
    eval2 = documents[n - n_eval :]
    return train, eval1, eval2


def build_pool(corpus: Corpus, min_tokens: int, min_size: int = 1, need: str = "") -> list[int]:
    """Ids of documents with at least ``min_tokens`` tokens, order stable.
    ``min_size``/``need`` shape the error when the pool comes up short."""
    pool = [i for i, d in enumerate(corpus.documents) if len(d.split()) >= min_tokens]
    if len(pool) < min_size:
        what = need or f"at least {min_size} documents"
        raise ConfigurationError(
            f"calibration pool has {len(pool)} documents with >= {min_tokens} tokens "
            f"but {what} required"
        )
    return pool


@dataclass
class CalibrationSet:
    sample_ids: tuple[int, ...]
    sequences: list[np.ndarray]

    @property
    def n(self) -> int:
        return len(self.sequences)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.sample_ids).encode())
        for s in self.sequences:
            h.update(np.asarray(s, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def make_calibration_set(corpus: Corpus, sample_ids, calib_len: int) -> CalibrationSet:
    """Tokenize the chosen documents, truncated (never padded) to
    ``calib_len``; the pool filter must guarantee enough tokens."""
    seqs = []
    for i in sample_ids:
        toks = corpus.doc_tokens(i)
        if len(toks) < calib_len:
            raise ConfigurationError(
                f"document {i} has {len(toks)} tokens, below the calibration length "
                f"{calib_len}; raise min_tokens"
            )
        seqs.append(np.asarray(toks[:calib_len], dtype=np.int64))
    return CalibrationSet(tuple(sample_ids), seqs)


@dataclass
class EvalSet:
    name: str
    windows: list[np.ndarray]


def make_eval_set(name, documents, vocab: Vocabulary, window: int, max_windows: int | None = None) -> EvalSet:
    """Chunk the concatenated token stream of the documents into fixed
    windows (trailing partial kept when it still has >= 2 tokens)."""
    stream: list[int] = []
    for d in documents:
        stream.extend(vocab.encode(d))
    windows = []
    for start in range(0, len(stream), window):
        chunk = stream[start : start + window]
        if len(chunk) >= 2:
            windows.append(np.asarray(chunk, dtype=np.int64))
        if max_windows is not None and len(windows) >= max_windows:
            break
    if not windows:
        raise ConfigurationError(f"eval set {name!r} is empty (stream of {len(stream)} tokens)")
    return EvalSet(name, windows)


def perplexity(model: TransformerLM, eval_set: EvalSet) -> float:
    """exp of the token-weighted mean next-token NLL over all windows."""
    if not eval_set.windows:
        raise ValueError(f"eval set {eval_set.name!r} has no windows")
    total_nll = 0.0
    total_tokens = 0
    by_len: dict[int, list] = {}
    for w in eval_set.windows:
        by_len.setdefault(len(w), []).append(w)
    for length in sorted(by_len):
        tokens = _as_batch(by_len[length])
        _validate_tokens(model, tokens)
        losses, _ = _per_sample_nll(model, tokens)
        total_nll += float(losses.sum()) * (length - 1)
        total_tokens += tokens.shape[0] * (length - 1)
    return math.exp(total_nll / total_tokens)


def objective_h(model: TransformerLM, eval_sets) -> float:
    """Arithmetic mean of per-set perplexities."""
    sets = list(eval_sets)
    if not sets:
        raise ValueError("need at least one eval set")
    return sum(perplexity(model, e) for e in sets) / len(sets)


# ---------------------------------------------------------------------------
# deterministic synthetic corpus (fixture/demo support)
# ---------------------------------------------------------------------------

_SUBJECTS = [
    "the miller", "the weaver", "the ferryman", "the gardener", "the mason",
    "the shepherd", "the tinker", "the scribe", "the potter", "the fisher",
    "the smith", "the carter", "the baker", "the glazier", "the cooper",
    "the chandler",
]
_VERBS = [
    "carried", "mended", "counted", "traded", "gathered", "followed",
    "measured", "promised", "remembered", "forgot", "guarded", "painted",
]
_OBJECTS = [
    "a sack of barley", "the copper kettle", "three river stones", "a bundle of reeds",
    "the old map", "a crate of apples", "the broken wheel", "a coil of rope",
    "the silver bell", "a jar of honey", "the oak ledger", "a basket of wool",
]
_PLACES = [
    "by the north bridge", "near the tide pools", "behind the granary",
    "along the cart road", "under the elm", "at the low ford",
    "beside the kiln", "inside the long barn",
]
_TAILS = [
    "before the rain began", "while the bells rang", "as the market closed",
    "until the lamps were lit", "after the frost lifted", "when the boats returned",
]


def _sentence_bank(seed: int, size: int) -> list[str]:
    rng = np.random.default_rng([seed, 911])
    bank = []
    for _ in range(size):
        s = " ".join([
            _SUBJECTS[rng.integers(len(_SUBJECTS))],
            _VERBS[rng.integers(len(_VERBS))],
            _OBJECTS[rng.integers(len(_OBJECTS))],
            _PLACES[rng.integers(len(_PLACES))],
            _TAILS[rng.integers(len(_TAILS))],
        ])
        bank.append(s + " .")
    return bank


def synthetic_corpus(n_docs: int = 400, seed: int = 0, bank_size: int = 64,
                     min_sentences: int = 3, max_sentences: int = 14) -> str:
    """Deterministic low-entropy text: documents are runs of sentences from
    a fixed bank, so a small model can learn the distribution quickly.
    Document lengths vary enough to exercise short-text filtering."""
    bank = _sentence_bank(seed, bank_size)
    rng = np.random.default_rng([seed, 13])
    docs = []
    for _ in range(n_docs):
        n_sent = int(rng.integers(min_sentences, max_sentences + 1))
        docs.append(" ".join(bank[rng.integers(len(bank))] for _ in range(n_sent)))
    return "\n\n".join(docs) + "\n"
