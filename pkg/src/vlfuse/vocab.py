"""Word-level vocabulary with the special tokens used by the text stack."""

from __future__ import annotations

import re

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(len(SPECIALS))

DEFAULT_QUESTIONS = (
    "What does this video describe?",
    "What does this picture describe?",
    "What is shown in this video?",
    "Which description matches this video?",
)

_TOKEN = re.compile(r"\[[A-Z]+\]|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split into bracketed specials, word runs and single punctuation marks."""
    return _TOKEN.findall(text)


def template_words() -> list[str]:
    words = ["Option", "1", "2", "3", "4", ":", ".", "?"]
    for q in DEFAULT_QUESTIONS:
        words.extend(tokenize(q))
    return list(dict.fromkeys(words))


class Vocabulary:
    def __init__(self, words, size: int | None = None):
        self.itos = list(SPECIALS) + [w for w in dict.fromkeys(words) if w not in SPECIALS]
        if size is not None:
            if size < len(self.itos):
                raise ValueError(f"vocabulary needs {len(self.itos)} entries, size {size} is too small")
            self.size = size
        else:
            self.size = len(self.itos)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return self.size

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] if i < len(self.itos) else UNK for i in ids)
