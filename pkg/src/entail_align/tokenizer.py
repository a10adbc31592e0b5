"""Whitespace tokenizer with character fallback and reserved prompt-token ids.

The vocabulary is built from the corpus itself: every whitespace-separated
word plus every individual character. Words missing from the vocabulary fall
back to their characters, so cross-KG name variants still share most tokens
through the character level when the word level misses.
"""

from __future__ import annotations

import hashlib

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

# words every vocabulary carries: verbalizer labels plus connective words used
# by the built-in templates
ALWAYS_WORDS = ("Yes", "No", "?", ".", ",", "I", "know", "that", "think")


class Tokenizer:
    def __init__(self, vocab, n_soft_tokens=8):
        self.base_vocab = tuple(vocab)
        self.n_soft_tokens = int(n_soft_tokens)
        self._word_to_id = {w: i + len(SPECIAL_TOKENS) for i, w in enumerate(self.base_vocab)}
        self.soft_base = len(SPECIAL_TOKENS) + len(self.base_vocab)
        self.vocab_size = self.soft_base + self.n_soft_tokens

    @classmethod
    def build(cls, texts, extra_words=(), vocab_cap=30000, n_soft_tokens=8):
        """Count words and characters over ``texts`` and keep the most frequent.

        ``extra_words`` and all single characters are always retained.
        """
        counts = {}
        chars = set()
        for text in texts:
            for word in text.split():
                counts[word] = counts.get(word, 0) + 1
                chars.update(word)
        for word in list(ALWAYS_WORDS) + list(extra_words):
            counts.setdefault(word, 0)
            chars.update(word.replace(" ", ""))
        forced = sorted(chars | set(ALWAYS_WORDS) | set(extra_words))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        vocab = list(dict.fromkeys(forced + ranked))[: max(vocab_cap, len(forced))]
        return cls(sorted(vocab), n_soft_tokens=n_soft_tokens)

    def word_id(self, word):
        """Id of ``word`` if it is a single vocabulary token, else None."""
        return self._word_to_id.get(word)

    def encode_word(self, word):
        wid = self._word_to_id.get(word)
        if wid is not None:
            return [wid]
        return [self._word_to_id.get(c, UNK) for c in word]

    def encode_text(self, text):
        """Token ids of a raw string (whitespace words, character fallback)."""
        ids = []
        for word in text.split():
            ids.extend(self.encode_word(word))
        return ids

    def soft_token_id(self, index):
        if not 0 <= index < self.n_soft_tokens:
            raise ValueError(f"soft token index {index} out of range (reserved {self.n_soft_tokens})")
        return self.soft_base + index

    def decode(self, ids):
        """Best-effort inverse used for debugging and demos."""
        out = []
        for i in ids:
            if i < len(SPECIAL_TOKENS):
                out.append(SPECIAL_TOKENS[i])
            elif i < self.soft_base:
                out.append(self.base_vocab[i - len(SPECIAL_TOKENS)])
            else:
                out.append(f"[P_{i - self.soft_base}]")
        return " ".join(out)

    def vocab_hash(self):
        payload = "\x00".join(self.base_vocab) + f"|soft={self.n_soft_tokens}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
