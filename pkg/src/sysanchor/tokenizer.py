"""Fixed 128-symbol toy tokenizer.

Chat-template delimiters are single tokens, which is what the span
detector assumes. The rest of the vocabulary is 16 rule tokens plus
generic content words. encode/decode round-trip exactly.
"""

import numpy as np

SPECIALS = (
    "<pad>",
    "<|im_start|>",
    "<|im_end|>",
    "<|start_header_id|>",
    "<|end_header_id|>",
    "<|eot_id|>",
)
ROLES = ("system", "user", "assistant")
N_RULES = 16
VOCAB_SIZE = 128


class ToyTokenizer:
    def __init__(self):
        rules = tuple(f"R{i}" for i in range(N_RULES))
        n_content = VOCAB_SIZE - len(SPECIALS) - len(ROLES) - N_RULES
        content = tuple(f"w{i}" for i in range(n_content))
        self.vocab = SPECIALS + ROLES + rules + content
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        self.pad_id = self._index["<pad>"]
        self.rule_ids = tuple(self._index[r] for r in rules)
        self.content_ids = tuple(self._index[c] for c in content)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def token_id(self, token):
        try:
            return self._index[token]
        except KeyError:
            raise ValueError(f"unknown token {token!r}") from None

    def encode(self, tokens):
        return np.array([self.token_id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids):
        ids = np.asarray(ids).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError("token id out of range")
        return [self.vocab[int(i)] for i in ids]

    def rule_token_id(self, k):
        return self.rule_ids[k]
