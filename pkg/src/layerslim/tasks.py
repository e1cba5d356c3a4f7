"""Synthetic bimodal classification task used to train and score toy models.

Majority membership: a sample is a visual prefix of content tokens followed
by a two-token text suffix (query token, readout marker).  The label is 1
when strictly more than half of the visual tokens equal the query token.
Labels are balanced by construction and invariant under permutation of the
visual prefix.

Vocabulary layout (shared convention, see model.ANSWER_TOKENS):
    0, 1        answer tokens; id == class label
    2           readout marker, always the final text token
    3           reserved
    4..vocab-1  content tokens (visual tokens and queries)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .model import TokenStream

READOUT_TOKEN = 2
CONTENT_START = 4


@dataclass(frozen=True)
class MajorityTask:
    vocab_size: int = 32
    visual_len: int = 9
    # sampling margin: match counts stay `margin` away from the half-way
    # boundary, so margin=2 with visual_len=9 draws counts from {0..2, 7..9}.
    # The labeling rule is unchanged; only the sampled difficulty moves.
    margin: int = 2

    def __post_init__(self):
        if self.vocab_size < CONTENT_START + 2:
            raise ParameterError("vocab too small for two content tokens")
        if self.visual_len < 1 or self.visual_len % 2 == 0:
            raise ParameterError("visual_len must be odd and positive")
        if not (0 <= self.margin <= self.visual_len // 2):
            raise ParameterError("margin must fit inside the half range")

    @property
    def content_tokens(self) -> np.ndarray:
        return np.arange(CONTENT_START, self.vocab_size)

    @property
    def stream_len(self) -> int:
        return self.visual_len + 2

    def sample(self, rng: np.random.Generator, index: int = 0) -> TokenStream:
        content = self.content_tokens
        query = int(rng.choice(content))
        label = int(rng.integers(0, 2))
        half = self.visual_len // 2
        if label == 1:
            count = int(rng.integers(half + 1 + self.margin, self.visual_len + 1))
        else:
            count = int(rng.integers(0, half + 1 - self.margin))
        others = content[content != query]
        visual = np.empty(self.visual_len, dtype=np.int64)
        pos = rng.permutation(self.visual_len)
        visual[pos[:count]] = query
        visual[pos[count:]] = rng.choice(others, size=self.visual_len - count)
        return TokenStream(
            visual=tuple(int(t) for t in visual),
            text=(query, READOUT_TOKEN),
            label=label,
            sample_id=f"maj-{index:06d}",
        )

    def generate(self, n: int, seed: int) -> list[TokenStream]:
        """Deterministic list of `n` labeled samples."""
        if n < 1:
            raise ParameterError("need at least one sample")
        rng = np.random.default_rng(seed)
        return [self.sample(rng, i) for i in range(n)]
