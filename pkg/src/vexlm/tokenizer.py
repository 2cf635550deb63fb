"""Byte-fallback BPE tokenizer with frequency-driven vocabulary expansion.

The base vocabulary always starts with the 256 single-byte tokens, so any
byte sequence is encodable. Expansion never touches base entries: new tokens
are appended after ``base_size`` and applied as a single left-to-right
longest-match pass over the base segmentation, which keeps encoding of
unexpanded text bit-identical and makes compression monotone.
"""

from __future__ import annotations

import base64
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

FORMAT_VERSION = 1

# Words carry their leading whitespace, so a space-prefixed token marks a
# word start; trailing whitespace runs match on their own. findall over this
# pattern is a partition of the input, which is what round-trip needs.
_CHUNK_RE = re.compile(rb"\s*\S+|\s+")


def _chunks(text: bytes) -> list[bytes]:
    return _CHUNK_RE.findall(text)


@dataclass
class TokenStats:
    """Token-economy totals for one tokenizer over one corpus."""

    total_tokens: int
    docs: int
    avg_tokens_per_doc: float
    per_doc: list[tuple[str, int]] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class TokenizerModel:
    """Immutable byte-fallback BPE model plus ordered added tokens.

    ``vocab`` holds the base entries only (ids ``0..base_size``); added
    tokens occupy ids ``base_size..``. Instances are safe to share across
    threads; the encode cache is a benign memo keyed by chunk bytes.
    """

    vocab: tuple[bytes, ...]
    merges: tuple[tuple[int, int], ...]
    added_tokens: tuple[bytes, ...] = ()

    def __post_init__(self):
        if len(self.vocab) < 256:
            raise ValueError("base vocab must contain the 256 byte tokens")
        for i in range(256):
            if self.vocab[i] != bytes([i]):
                raise ValueError("vocab[0..255] must be the single bytes")
        all_tokens = list(self.vocab) + list(self.added_tokens)
        if len(set(all_tokens)) != len(all_tokens):
            raise ValueError("duplicate byte-strings in vocabulary")
        object.__setattr__(self, "_merge_rank", {p: r for r, p in enumerate(self.merges)})
        object.__setattr__(self, "_added_index", {t: self.base_size + i for i, t in enumerate(self.added_tokens)})
        object.__setattr__(self, "_max_added_len", max((len(t) for t in self.added_tokens), default=0))
        object.__setattr__(self, "_chunk_cache", {})

    @property
    def base_size(self) -> int:
        return len(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + len(self.added_tokens)

    def token_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < self.vocab_size:
            raise ValueError(f"token id {token_id} out of range (vocab size {self.vocab_size})")
        if token_id < self.base_size:
            return self.vocab[token_id]
        return self.added_tokens[token_id - self.base_size]

    # -- encoding ----------------------------------------------------------

    def _encode_chunk(self, chunk: bytes) -> list[int]:
        cached = self._chunk_cache.get(chunk)
        if cached is not None:
            return cached
        ids = list(chunk)
        while len(ids) > 1:
            best_rank = None
            best_pos = -1
            for i in range(len(ids) - 1):
                rank = self._merge_rank.get((ids[i], ids[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pos = i
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            merged_id = 256 + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i < len(ids) - 1 and ids[i] == a and ids[i + 1] == b:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        self._chunk_cache[chunk] = ids
        return ids

    def encode_base(self, text: bytes | str) -> list[int]:
        """Encode with base merges only, ignoring added tokens."""
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids: list[int] = []
        for chunk in _chunks(text):
            ids.extend(self._encode_chunk(chunk))
        return ids

    def encode(self, text: bytes | str) -> list[int]:
        """Encode bytes to token ids.

        Base merges are applied first; a single left-to-right longest-match
        pass then replaces runs of base tokens whose concatenated bytes form
        an added token. Runs are never split, so the output is never longer
        than the base encoding.
        """
        base_ids = self.encode_base(text)
        if not self.added_tokens:
            return base_ids
        out: list[int] = []
        i = 0
        n = len(base_ids)
        token_bytes = [self.vocab[t] if t < self.base_size else None for t in base_ids]
        while i < n:
            match_id = None
            match_end = i
            run = b""
            j = i
            while j < n:
                run += token_bytes[j]
                if len(run) > self._max_added_len:
                    break
                hit = self._added_index.get(run)
                if hit is not None and j > i:
                    match_id = hit
                    match_end = j
                j += 1
            if match_id is not None:
                out.append(match_id)
                i = match_end + 1
            else:
                out.append(base_ids[i])
                i += 1
        return out

    def decode(self, ids: Sequence[int]) -> bytes:
        return b"".join(self.token_bytes(i) for i in ids)

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "vocab": [base64.b64encode(t).decode("ascii") for t in self.vocab],
            "merges": [list(p) for p in self.merges],
            "base_size": self.base_size,
            "added_tokens": [base64.b64encode(t).decode("ascii") for t in self.added_tokens],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TokenizerModel":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported tokenizer format_version {doc.get('format_version')}")
        vocab = tuple(base64.b64decode(t) for t in doc["vocab"])
        if len(vocab) != doc["base_size"]:
            raise ValueError("base_size does not match vocab length")
        return cls(
            vocab=vocab,
            merges=tuple((int(a), int(b)) for a, b in doc["merges"]),
            added_tokens=tuple(base64.b64decode(t) for t in doc["added_tokens"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        with open(path, "r", encoding="ascii") as f:
            return cls.from_json(f.read())


def _as_bytes_docs(corpus: Iterable) -> list[bytes]:
    docs = []
    for doc in corpus:
        text = getattr(doc, "text", doc)
        docs.append(text.encode("utf-8") if isinstance(text, str) else bytes(text))
    return docs


def _pair_counts(words: Counter) -> Counter:
    pairs: Counter = Counter()
    for word, cnt in words.items():
        for i in range(len(word) - 1):
            pairs[(word[i], word[i + 1])] += cnt
    return pairs


def _merge_word(word: tuple, pair: tuple[int, int], new_id: int) -> tuple:
    out = []
    i = 0
    a, b = pair
    while i < len(word):
        if i < len(word) - 1 and word[i] == a and word[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_base(corpus: Iterable, vocab_size: int) -> TokenizerModel:
    """Train a byte-fallback BPE model with greedy highest-frequency merges.

    Stops early (smaller vocab than requested) when no adjacent pair occurs
    at least twice. Ties on frequency break deterministically by the merged
    token's bytes: shorter first, then lexicographic.
    """
    if vocab_size < 257:
        raise ValueError("vocab_size must be >= 257 (256 bytes + at least one merge)")
    docs = _as_bytes_docs(corpus)
    if not docs:
        raise ValueError("corpus is empty")

    words: Counter = Counter()
    for doc in docs:
        for chunk in _chunks(doc):
            words[tuple(chunk)] += 1

    vocab: list[bytes] = [bytes([i]) for i in range(256)]
    merges: list[tuple[int, int]] = []
    while len(vocab) < vocab_size:
        pairs = _pair_counts(words)
        if not pairs:
            break
        best_pair, best_count = min(
            pairs.items(),
            key=lambda kv: (-kv[1], len(vocab[kv[0][0]] + vocab[kv[0][1]]), vocab[kv[0][0]] + vocab[kv[0][1]]),
        )
        if best_count < 2:
            break
        new_id = len(vocab)
        vocab.append(vocab[best_pair[0]] + vocab[best_pair[1]])
        merges.append(best_pair)
        words = Counter({_merge_word(w, best_pair, new_id): c for w, c in words.items()})

    return TokenizerModel(vocab=tuple(vocab), merges=tuple(merges))


def expand(
    model: TokenizerModel,
    target_corpus: Iterable,
    min_freq: int,
    max_new: int,
    candidate_budget: int | None = None,
    allowlist: Iterable[bytes] | None = None,
    blocklist: Iterable[bytes] | None = None,
) -> TokenizerModel:
    """Append up to ``max_new`` frequent target-corpus tokens to ``model``.

    Candidates come from a scratch BPE trained on the target corpus
    (``candidate_budget`` merge tokens, default ``4 * max_new``). A candidate
    survives if its byte-string is absent from the base vocab and its
    whole-token occurrence count under the scratch segmentation is at least
    ``min_freq``. Survivors are sorted by descending frequency, ties broken
    by longer byte-length then lexicographic. ``allowlist`` entries bypass
    the frequency threshold; ``blocklist`` entries are never added.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    if max_new == 0:
        return model
    docs = _as_bytes_docs(target_corpus)
    if not docs:
        raise ValueError("target corpus is empty")

    budget = candidate_budget if candidate_budget is not None else 4 * max_new
    scratch = train_base(docs, 256 + budget)

    counts: Counter = Counter()
    for doc in docs:
        for tid in scratch.encode_base(doc):
            if tid >= 256:
                counts[scratch.vocab[tid]] += 1

    allow = set(allowlist or ())
    block = set(blocklist or ())
    base_set = set(model.vocab)
    existing = set(model.added_tokens)

    survivors = []
    for tok, cnt in counts.items():
        if tok in base_set or tok in existing or tok in block:
            continue
        if cnt >= min_freq or tok in allow:
            survivors.append((tok, cnt))
    survivors.sort(key=lambda tc: (-tc[1], -len(tc[0]), tc[0]))
    new_tokens = [tok for tok, _ in survivors[:max_new]]

    return TokenizerModel(
        vocab=model.vocab,
        merges=model.merges,
        added_tokens=model.added_tokens + tuple(new_tokens),
    )


def compute_stats(model: TokenizerModel, corpus: Iterable) -> TokenStats:
    """Encode every document and total the token spend."""
    total = 0
    per_doc = []
    n = 0
    for doc in corpus:
        text = getattr(doc, "text", doc)
        doc_id = getattr(doc, "id", str(n))
        length = len(model.encode(text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")))
        per_doc.append((doc_id, length))
        total += length
        n += 1
    if n == 0:
        raise ValueError("corpus is empty")
    return TokenStats(total_tokens=total, docs=n, avg_tokens_per_doc=total / n, per_doc=per_doc)
