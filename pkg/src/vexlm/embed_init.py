"""Embedding-matrix expansion for new vocabulary, initialized from subwords.

New input rows get the arithmetic mean of the constituent base-token input
rows; new output rows get an exact copy of the first constituent's output
row. The copy makes the new token's logits identical to its first subword's
at initialization, so the model can be trained to emit the new token before
its output row has been differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .tokenizer import TokenizerModel


@dataclass(frozen=True)
class SubwordDecomposition:
    """Base-tokenizer segmentation of one added token's byte-string."""

    new_token: int
    parts: tuple[int, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("decomposition has no parts")


def decompose(tok_base: TokenizerModel, new_token_bytes: bytes, new_token_id: int) -> SubwordDecomposition:
    """Segment an added token's bytes with base merges only."""
    if not new_token_bytes:
        raise ValueError("empty token byte-string")
    parts = tuple(tok_base.encode_base(new_token_bytes))
    return SubwordDecomposition(new_token=new_token_id, parts=parts)


def decompose_added_tokens(tok: TokenizerModel) -> list[SubwordDecomposition]:
    return [
        decompose(tok, tok_bytes, tok.base_size + i)
        for i, tok_bytes in enumerate(tok.added_tokens)
    ]


def expand_params(params: ModelParams, base_size: int, decomps: list[SubwordDecomposition], rng: np.random.Generator | None = None, random_init_std: float | None = None) -> ModelParams:
    """Grow both embedding matrices and initialize the new rows.

    ``decomps`` must cover ids ``base_size .. base_size + len(decomps) - 1``
    exactly. Old rows are carried over bit-identical. When
    ``random_init_std`` is set (comparison baseline), new rows are drawn
    from a normal instead of the subword scheme.
    """
    if params.tensors["in_embed"].shape[0] != base_size:
        raise ValueError("params vocab size does not match base_size")
    new_vocab = base_size + len(decomps)
    covered = sorted(d.new_token for d in decomps)
    if covered != list(range(base_size, new_vocab)):
        raise ValueError("decompositions must cover the new ids exactly, without gaps")
    for d in decomps:
        if any(not (0 <= p < base_size) for p in d.parts):
            raise ValueError(f"decomposition for token {d.new_token} references a non-base id")

    out = params.copy()
    in_old = params.tensors["in_embed"]
    out_old = params.tensors["out_embed"]
    d_model = in_old.shape[1]
    dtype = in_old.dtype

    in_new = np.empty((new_vocab, d_model), dtype=dtype)
    out_new = np.empty((new_vocab, d_model), dtype=dtype)
    in_new[:base_size] = in_old
    out_new[:base_size] = out_old
    if random_init_std is not None:
        if rng is None:
            raise ValueError("random init requires an rng")
        in_new[base_size:] = (rng.standard_normal((len(decomps), d_model)) * random_init_std).astype(dtype)
        out_new[base_size:] = (rng.standard_normal((len(decomps), d_model)) * random_init_std).astype(dtype)
    else:
        for d in sorted(decomps, key=lambda d: d.new_token):
            in_new[d.new_token] = in_old[list(d.parts)].mean(axis=0)
            out_new[d.new_token] = out_old[d.parts[0]]

    out.tensors["in_embed"] = in_new
    out.tensors["out_embed"] = out_new
    out.base_size = base_size
    return out
