"""Word-level tokenizer with pseudo-token markers.

Prompts are lowercased and split into words and punctuation; the markers
``<v*>`` (subject) and ``<A*>`` (attractor) pass through verbatim and their
positions are recorded so the conditioning code can inject learned vectors.
"""
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from app.core.errors import ConditioningError
from app.schemas.dataset import DatasetManifest
from app.services.toy_data import BACKGROUND_COLORS, BACKGROUND_KINDS, SHAPES, SUBJECT_COLORS

logger = logging.getLogger(__name__)

SUBJECT_TOKEN = "<v*>"
ATTRACTOR_TOKEN = "<A*>"
PSEUDO_TOKENS = (SUBJECT_TOKEN, ATTRACTOR_TOKEN)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)

_BASE_WORDS = (
    # training templates
    "a", "photo", "of", "the", "rendering", "clean", "dirty", "dark", "cool", "close-up", "bright",
    "cropped", "good", "rendition", "nice", "in", "my", "one", ".", ",",
    # caption vocabulary
    "on", "background", "backdrop", "picture", "against", "and", "with", "near", "scene", "frame",
    "small", "large", "top", "middle", "bottom", "left", "center", "right",
    # common subject classes
    "dog", "cat", "mug", "toy", "bear", "backpack", "vase", "shoe", "bottle", "can", "clock",
    "sunglasses", "sneaker", "candle", "boot", "bowl", "robot", "plant", "teapot", "cup",
)

DEFAULT_VOCABULARY: tuple[str, ...] = tuple(
    sorted({*_BASE_WORDS, *SHAPES, *SUBJECT_COLORS, *BACKGROUND_COLORS, *BACKGROUND_KINDS})
)

_TOKEN_RE = re.compile(r"<v\*>|<A\*>|[A-Za-z0-9]+(?:[-_'][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")


def split_words(prompt: str) -> list[str]:
    return [tok if tok in PSEUDO_TOKENS else tok.lower() for tok in _TOKEN_RE.findall(prompt)]


def build_vocabulary(manifest: DatasetManifest | None = None, extra: Iterable[str] = ()) -> list[str]:
    """Default prompt vocabulary plus every word the manifest's captions use."""
    words = set(DEFAULT_VOCABULARY) | {w for w in extra}
    if manifest is not None:
        for subject in manifest.subjects:
            words.add(subject.supercategory.lower())
            for record in [*subject.train, *subject.test]:
                for caption in record.captions:
                    words.update(split_words(caption.replace("{}", " ")))
                phrase = record.meta.get("subject_phrase")
                if isinstance(phrase, str):
                    words.update(split_words(phrase))
    return sorted(words - set(SPECIAL_TOKENS) - set(PSEUDO_TOKENS))


@dataclass(frozen=True)
class TokenizedPrompt:
    tokens: tuple[str, ...]           # padded to the context length
    ids: tuple[int, ...]
    pseudo_positions: dict[str, int]  # marker -> index in ``tokens``
    length: int                       # tokens before padding, bos/eos included


class Tokenizer:
    def __init__(self, vocabulary: Sequence[str], context_length: int) -> None:
        if context_length < 3:
            raise ValueError("context_length must leave room for <bos>, one word and <eos>")
        words = sorted(set(vocabulary) - set(SPECIAL_TOKENS) - set(PSEUDO_TOKENS))
        self.vocabulary: list[str] = [*SPECIAL_TOKENS, *words]
        self.context_length = context_length
        self._index = {word: i for i, word in enumerate(self.vocabulary)}
        self._missed: set[str] = set()

    def __len__(self) -> int:
        return len(self.vocabulary)

    def token_id(self, word: str) -> int | None:
        return self._index.get(word.lower() if word not in PSEUDO_TOKENS else word)

    def __call__(self, prompt: str) -> TokenizedPrompt:
        words = split_words(prompt)
        limit = self.context_length - 2
        if len(words) > limit:
            dropped = [w for w in words[limit:] if w in PSEUDO_TOKENS]
            if dropped:
                raise ConditioningError(f"pseudo-token {dropped[0]} truncated from prompt {prompt!r}")
            words = words[:limit]

        tokens = [BOS, *words, EOS]
        positions: dict[str, int] = {}
        ids: list[int] = []
        for pos, tok in enumerate(tokens):
            if tok in PSEUDO_TOKENS:
                if tok in positions:
                    raise ConditioningError(f"pseudo-token {tok} appears more than once in {prompt!r}")
                positions[tok] = pos
                ids.append(self._index[UNK])
                continue
            idx = self._index.get(tok)
            if idx is None:
                if tok not in self._missed:
                    self._missed.add(tok)
                    logger.warning("Tokenizer: %r not in vocabulary, using %s", tok, UNK)
                idx = self._index[UNK]
            ids.append(idx)

        length = len(tokens)
        pad = self.context_length - length
        return TokenizedPrompt(
            tokens=(*tokens, *([PAD] * pad)),
            ids=(*ids, *([self._index[PAD]] * pad)),
            pseudo_positions=positions,
            length=length,
        )
