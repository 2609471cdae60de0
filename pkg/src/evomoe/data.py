"""Synthetic two-modality batches.

A sequence is a visual prefix followed by a text suffix. Segment ids live in
disjoint ranges: visual ids in [0, vocab_a), text ids in [vocab_a,
vocab_a + vocab_b). Within a segment the next token is an affine function of
the current one, so every non-boundary target is exactly predictable from the
current token alone. The prefix-to-suffix boundary target is -1 (excluded
from the loss) because no rule connects the segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SyntheticTaskSpec
from .rng import Rng

MODALITY_V = 0
MODALITY_T = 1

# Raw draws consumed per sequence (one start token per segment). Part of the
# determinism contract: batch k occupies counters [k*2*B, (k+1)*2*B).
DRAWS_PER_SEQUENCE = 2


@dataclass
class TokenBatch:
    """Token ids, per-token modality tags, and next-token targets."""

    tokens: np.ndarray  # (B, S) int64
    modality: np.ndarray  # (B, S) int64, MODALITY_V or MODALITY_T
    targets: np.ndarray  # (B, S) int64, -1 marks excluded positions

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


def batch_rng(spec: SyntheticTaskSpec, stream_id: int, batch_index: int, batch_size: int) -> Rng:
    """Stream positioned at batch `batch_index` for random-access generation."""
    return Rng(spec.seed, stream_id, counter=batch_index * DRAWS_PER_SEQUENCE * batch_size)


def _segment(starts: np.ndarray, length: int, mult: int, add: int, vocab: int) -> np.ndarray:
    out = np.empty((starts.shape[0], length), dtype=np.int64)
    out[:, 0] = starts
    for i in range(1, length):
        out[:, i] = (mult * out[:, i - 1] + add) % vocab
    return out


def generate_batch(spec: SyntheticTaskSpec, rng: Rng, batch_size: int) -> TokenBatch:
    """Build one batch from the stream's current position.

    Determinism: the batch is a pure function of the rng position, which the
    trainer derives from (seed, stream, batch index) via batch_rng.
    """
    p, m = spec.prefix_len, spec.suffix_len
    ma, aa = int(spec.rule_a[0]), int(spec.rule_a[1])
    mb, ab = int(spec.rule_b[0]), int(spec.rule_b[1])

    starts_a = rng.integers(0, spec.vocab_a, size=(batch_size,))
    starts_b = rng.integers(0, spec.vocab_b, size=(batch_size,))

    prefix = _segment(starts_a, p, ma, aa, spec.vocab_a)
    suffix_local = _segment(starts_b, m, mb, ab, spec.vocab_b)
    suffix = suffix_local + spec.vocab_a

    tokens = np.concatenate([prefix, suffix], axis=1)
    modality = np.concatenate(
        [
            np.full((batch_size, p), MODALITY_V, dtype=np.int64),
            np.full((batch_size, m), MODALITY_T, dtype=np.int64),
        ],
        axis=1,
    )

    targets = np.empty_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    targets[:, p - 1] = -1  # boundary: no rule links prefix to suffix
    # the last text token still has a well-defined successor under rule_b
    targets[:, -1] = (mb * suffix_local[:, -1] + ab) % spec.vocab_b + spec.vocab_a

    return TokenBatch(tokens=tokens, modality=modality, targets=targets)
