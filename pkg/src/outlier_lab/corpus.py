"""Synthetic Zipfian corpora, tokenization schemes, frequency tables and MLM masking.

Token ids are laid out as five reserved specials followed by a contiguous
block of content ids.  Corpora are stored flat (one int32 token array plus
sentence/document offsets) so packing and counting stay vectorised.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
N_SPECIAL = 5
IGNORE = -100

MIN_VOCAB = 16


class Scheme(str, enum.Enum):
    SPLIT = "SPLIT"
    ONE_SEP = "ONE_SEP"
    RANDOMIZE = "RANDOMIZE"


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < MIN_VOCAB:
            raise ValueError(f"vocab_size must be >= {MIN_VOCAB}, got {self.size}")

    @property
    def special_ids(self) -> dict[str, int]:
        return {"PAD": PAD, "UNK": UNK, "CLS": CLS, "SEP": SEP, "MASK": MASK}

    @property
    def content_ids(self) -> range:
        return range(N_SPECIAL, self.size)

    @property
    def n_content(self) -> int:
        return self.size - N_SPECIAL


@dataclass(frozen=True)
class ZipfTable:
    """Target unigram distribution: ``probs[r-1]`` is the mass of the rank-r token ``token_ids[r-1]``."""

    probs: np.ndarray
    token_ids: np.ndarray

    def by_id(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[self.token_ids] = self.probs
        return out


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    """Normalised ``r**-s`` for ranks 1..n."""
    if n < 1:
        raise ValueError("need at least one rank")
    if not exponent > 0:
        raise ValueError(f"zipf exponent must be > 0, got {exponent}")
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(exponent)
    return w / w.sum()


def build_zipf_vocabulary(vocab_size: int, zipf_exponent: float, seed: int) -> tuple[Vocabulary, ZipfTable]:
    vocab = Vocabulary(vocab_size)
    probs = zipf_probabilities(vocab.n_content, zipf_exponent)
    # ranks are assigned to content ids in a seeded order so id and frequency are unrelated
    rng = np.random.default_rng(seed)
    ids = rng.permutation(vocab.n_content) + N_SPECIAL
    return vocab, ZipfTable(probs=probs, token_ids=ids.astype(np.int64))


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 2005
    zipf_exponent: float = 1.1
    n_documents: int = 20000
    min_sentence_len: int = 6
    max_sentence_len: int = 24
    min_sentences_per_doc: int = 2
    max_sentences_per_doc: int = 12
    context_weight: float = 0.6
    markov_order: int = 1
    seed: int = 0

    def validate(self) -> None:
        Vocabulary(self.vocab_size)
        if not self.zipf_exponent > 0:
            raise ValueError("zipf_exponent must be > 0")
        if self.n_documents < 0:
            raise ValueError("n_documents must be >= 0")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ValueError("need 1 <= min_sentence_len <= max_sentence_len")
        if not 1 <= self.min_sentences_per_doc <= self.max_sentences_per_doc:
            raise ValueError("need 1 <= min_sentences_per_doc <= max_sentences_per_doc")
        if not 0.0 <= self.context_weight <= 1.0:
            raise ValueError("context_weight must lie in [0, 1]")
        if self.markov_order != 1:
            raise ValueError("only markov_order=1 is supported")


@dataclass
class Corpus:
    """Flat corpus storage.

    ``tokens[sentence_offsets[i]:sentence_offsets[i+1]]`` is sentence ``i``;
    document ``k`` spans sentences ``document_offsets[k]:document_offsets[k+1]``.
    """

    tokens: np.ndarray
    sentence_offsets: np.ndarray
    document_offsets: np.ndarray
    vocab_size: int

    @property
    def n_documents(self) -> int:
        return len(self.document_offsets) - 1

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_offsets) - 1

    def sentence(self, i: int) -> np.ndarray:
        return self.tokens[self.sentence_offsets[i]:self.sentence_offsets[i + 1]]

    def sentences(self) -> Iterator[np.ndarray]:
        for i in range(self.n_sentences):
            yield self.sentence(i)

    def documents(self) -> list[list[list[int]]]:
        docs = []
        for k in range(self.n_documents):
            lo, hi = self.document_offsets[k], self.document_offsets[k + 1]
            docs.append([self.sentence(i).tolist() for i in range(lo, hi)])
        return docs

    @classmethod
    def from_documents(cls, documents: Sequence[Sequence[Sequence[int]]], vocab_size: int) -> "Corpus":
        sent_off, doc_off, toks = [0], [0], []
        for doc in documents:
            for sent in doc:
                toks.extend(int(t) for t in sent)
                sent_off.append(len(toks))
            doc_off.append(len(sent_off) - 1)
        return cls(
            tokens=np.asarray(toks, dtype=np.int32),
            sentence_offsets=np.asarray(sent_off, dtype=np.int64),
            document_offsets=np.asarray(doc_off, dtype=np.int64),
            vocab_size=vocab_size,
        )


class _CouplingChain:
    """Reversible order-1 chain whose stationary law is exactly ``pi``.

    The joint distribution of consecutive tokens is
    ``(1 - a) * pi pi^T + a * (D + D^T) / 2`` where ``D`` couples ``pi`` with
    itself by laying the masses on [0, 1) in two seeded orders and matching
    overlapping intervals.  Rare tokens therefore get a nearly deterministic
    successor while the marginal stays Zipfian.
    """

    def __init__(self, pi: np.ndarray, context_weight: float, rng: np.random.Generator):
        self.pi = pi
        self.a = context_weight
        self.cdf = np.cumsum(pi)
        self.cdf[-1] = 1.0
        n = len(pi)
        self.order = [rng.permutation(n), rng.permutation(n)]
        self.lo, self.edges = [], []
        for order in self.order:
            cum = np.concatenate([[0.0], np.cumsum(pi[order])])
            cum[-1] = 1.0
            lo = np.empty(n)
            lo[order] = cum[:-1]
            self.lo.append(lo)
            self.edges.append(cum[1:])

    def _locate(self, which: int, u: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.edges[which], u, side="right")
        return self.order[which][np.minimum(pos, len(self.pi) - 1)]

    def initial(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), len(self.pi) - 1)

    def step(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        size = state.shape[0]
        use_ctx = rng.random(size) < self.a
        direction = rng.random(size) < 0.5
        u = rng.random(size)
        out = self.initial(rng, size)
        src = np.where(direction, 0, 1)
        for s in (0, 1):
            sel = use_ctx & (src == s)
            if sel.any():
                st = state[sel]
                point = self.lo[s][st] + u[sel] * self.pi[st]
                out[sel] = self._locate(1 - s, point)
        return out


def generate_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate()
    vocab, table = build_zipf_vocabulary(spec.vocab_size, spec.zipf_exponent, spec.seed)
    rng = np.random.default_rng([spec.seed, 1])
    if spec.n_documents == 0:
        return Corpus(np.zeros(0, np.int32), np.zeros(1, np.int64), np.zeros(1, np.int64), vocab.size)

    n_sent = rng.integers(spec.min_sentences_per_doc, spec.max_sentences_per_doc + 1, spec.n_documents)
    total = int(n_sent.sum())
    lengths = rng.integers(spec.min_sentence_len, spec.max_sentence_len + 1, total)
    chain = _CouplingChain(table.probs, spec.context_weight, rng)

    grid = np.empty((total, spec.max_sentence_len), dtype=np.int64)
    state = chain.initial(rng, total)
    grid[:, 0] = state
    for t in range(1, spec.max_sentence_len):
        state = chain.step(state, rng)
        grid[:, t] = state
    keep = np.arange(spec.max_sentence_len)[None, :] < lengths[:, None]
    tokens = table.token_ids[grid[keep]].astype(np.int32)

    sent_off = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    doc_off = np.concatenate([[0], np.cumsum(n_sent)]).astype(np.int64)
    return Corpus(tokens=tokens, sentence_offsets=sent_off, document_offsets=doc_off, vocab_size=vocab.size)


@dataclass
class TrainingStream:
    rows: np.ndarray
    scheme: Scheme
    vocab_size: int
    truncated: int = 0

    @property
    def valid(self) -> np.ndarray:
        return self.rows != PAD

    @property
    def max_seq_len(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


def _pack_sentences(sentences: Iterable[np.ndarray], max_seq_len: int) -> tuple[np.ndarray, int]:
    if max_seq_len < 3:
        raise ValueError("max_seq_len must be >= 3")
    limit = max_seq_len - 2
    rows: list[list[int]] = []
    cur: list[int] = [CLS]
    truncated = 0
    for sent in sentences:
        if len(sent) > limit:
            truncated += 1
            sent = sent[:limit]
        if len(cur) + len(sent) + 1 > max_seq_len:
            rows.append(cur)
            cur = [CLS]
        cur.extend(int(t) for t in sent)
        cur.append(SEP)
    if len(cur) > 1:
        rows.append(cur)
    out = np.full((len(rows), max_seq_len), PAD, dtype=np.int32)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, truncated


def _pack_one_sep(tokens: np.ndarray, max_seq_len: int) -> np.ndarray:
    if max_seq_len < 3:
        raise ValueError("max_seq_len must be >= 3")
    body = max_seq_len - 2
    n_rows = -(-len(tokens) // body)
    out = np.full((n_rows, max_seq_len), PAD, dtype=np.int32)
    out[:, 0] = CLS
    for i in range(n_rows):
        chunk = tokens[i * body:(i + 1) * body]
        out[i, 1:1 + len(chunk)] = chunk
        out[i, 1 + len(chunk)] = SEP
    return out


def randomize_tokens(
    corpus: Corpus, freq_threshold: float, replace_prob: float, seed: int
) -> Corpus:
    """Replace frequent-token occurrences by uniformly drawn rare tokens."""
    if not 0.0 < freq_threshold < 1.0:
        raise ValueError("freq_threshold must lie in (0, 1)")
    if not 0.0 <= replace_prob <= 1.0:
        raise ValueError("replace_prob must lie in [0, 1]")
    counts = np.bincount(corpus.tokens, minlength=corpus.vocab_size).astype(np.float64)
    rel = counts / counts.sum()
    content = np.arange(corpus.vocab_size) >= N_SPECIAL
    above = content & (rel > freq_threshold)
    below = np.flatnonzero(content & (rel < freq_threshold))
    tokens = corpus.tokens.copy()
    if replace_prob > 0 and above.any():
        if below.size == 0:
            raise ValueError(
                f"no content token has relative frequency below {freq_threshold}; "
                "lower the threshold or enlarge the vocabulary"
            )
        rng = np.random.default_rng(seed)
        hit = above[tokens] & (rng.random(tokens.shape) < replace_prob)
        tokens[hit] = below[rng.integers(0, below.size, int(hit.sum()))]
    return Corpus(tokens, corpus.sentence_offsets, corpus.document_offsets, corpus.vocab_size)


def apply_tokenization_scheme(
    corpus: Corpus,
    scheme: Scheme | str,
    max_seq_len: int = 64,
    freq_threshold: float = 1e-5,
    replace_prob: float = 0.5,
    seed: int = 0,
) -> TrainingStream:
    scheme = Scheme(scheme)
    if corpus.tokens.size == 0:
        raise ValueError("cannot tokenize an empty corpus")
    truncated = 0
    if scheme is Scheme.ONE_SEP:
        rows = _pack_one_sep(corpus.tokens, max_seq_len)
    else:
        if scheme is Scheme.RANDOMIZE:
            corpus = randomize_tokens(corpus, freq_threshold, replace_prob, seed)
        rows, truncated = _pack_sentences(corpus.sentences(), max_seq_len)
        if truncated:
            log.warning("%d sentences truncated to %d tokens", truncated, max_seq_len - 2)
    return TrainingStream(rows=rows, scheme=scheme, vocab_size=corpus.vocab_size, truncated=truncated)


@dataclass
class FrequencyTable:
    counts: dict[int, int]
    total: int

    def relative(self, token_id: int) -> float:
        return self.counts.get(int(token_id), 0) / self.total

    def relative_array(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        for k, v in self.counts.items():
            if k < size:
                out[k] = v
        return out / self.total

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token_id", "count"])
            for k in sorted(self.counts):
                w.writerow([k, self.counts[k]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "FrequencyTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            counts = {int(r["token_id"]): int(r["count"]) for r in reader}
        total = sum(counts.values())
        if total <= 0:
            raise ValueError(f"{path}: empty frequency table")
        return cls(counts, total)


def _flat_ids(data) -> np.ndarray:
    if isinstance(data, TrainingStream):
        return data.rows.ravel()
    if isinstance(data, Corpus):
        return data.tokens
    arr = np.asarray(data, dtype=object) if not isinstance(data, np.ndarray) else data
    if arr.dtype != object:
        return arr.ravel()
    flat: list[int] = []

    def walk(x):
        if isinstance(x, (list, tuple, np.ndarray)):
            for y in x:
                walk(y)
        else:
            flat.append(int(x))

    walk(data)
    return np.asarray(flat, dtype=np.int64)


def estimate_frequency(data, include_special: bool = False) -> FrequencyTable:
    """Exact token counts.  PAD is never counted; CLS/SEP only with ``include_special``."""
    ids = _flat_ids(data).astype(np.int64, copy=False)
    if ids.size == 0:
        raise ValueError("cannot estimate frequencies from empty input")
    counts = np.bincount(ids)
    counts[PAD] = 0
    if not include_special:
        counts[CLS:SEP + 1] = 0
    nz = np.flatnonzero(counts)
    if nz.size == 0:
        raise ValueError("input holds no countable tokens")
    table = {int(k): int(counts[k]) for k in nz}
    return FrequencyTable(table, int(counts.sum()))


@dataclass
class MaskedBatch:
    inputs: np.ndarray
    labels: np.ndarray
    mask_rate: float
    seed: object
    branch_counts: dict[str, int] = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        return self.inputs != PAD

    @property
    def n_targets(self) -> int:
        return int((self.labels != IGNORE).sum())


def mask_batch(rows: np.ndarray, mask_rate: float, seed, vocab_size: int) -> MaskedBatch:
    """BERT masking: select each content position w.p. ``mask_rate``, then 80% MASK / 10% random / 10% keep."""
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError("mask_rate must lie in [0, 1)")
    rows = np.asarray(rows)
    rng = np.random.default_rng(seed)
    eligible = rows >= N_SPECIAL
    chosen = eligible & (rng.random(rows.shape) < mask_rate)
    branch = rng.random(rows.shape)
    random_ids = rng.integers(N_SPECIAL, vocab_size, rows.shape)

    to_mask = chosen & (branch < 0.8)
    to_rand = chosen & (branch >= 0.8) & (branch < 0.9)
    inputs = rows.copy()
    inputs[to_mask] = MASK
    inputs[to_rand] = random_ids[to_rand]
    labels = np.where(chosen, rows, IGNORE).astype(np.int64)
    counts = {
        "mask": int(to_mask.sum()),
        "random": int(to_rand.sum()),
        "keep": int((chosen & (branch >= 0.9)).sum()),
    }
    return MaskedBatch(inputs=inputs, labels=labels, mask_rate=mask_rate, seed=seed, branch_counts=counts)


# -- line-oriented text files -------------------------------------------------

def write_rows(path: str | Path, rows: Iterable[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(" ".join(str(int(t)) for t in r))
            fh.write("\n")


def read_rows(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        rows = [[int(t) for t in line.split()] for line in fh if line.strip()]
    if not rows:
        return np.zeros((0, 0), dtype=np.int32)
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ValueError(f"{path}: rows have unequal lengths {sorted(width)}")
    return np.asarray(rows, dtype=np.int32)


def write_corpus(path: str | Path, corpus: Corpus) -> None:
    """One sentence per line, documents separated by an empty line."""
    with open(path, "w") as fh:
        for k in range(corpus.n_documents):
            if k:
                fh.write("\n")
            for i in range(corpus.document_offsets[k], corpus.document_offsets[k + 1]):
                fh.write(" ".join(map(str, corpus.sentence(i).tolist())))
                fh.write("\n")


def read_corpus(path: str | Path, vocab_size: int) -> Corpus:
    docs: list[list[list[int]]] = [[]]
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                docs.append([])
            else:
                docs[-1].append([int(t) for t in line.split()])
    return Corpus.from_documents([d for d in docs if d], vocab_size)
