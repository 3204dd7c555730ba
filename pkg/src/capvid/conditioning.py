"""Tokenization, text/subject embeddings, condition fusion, prompt alignment.

The vocabulary is closed over the synthetic caption domain. Conditions are
sequences of embedding vectors; a reference-image subject embedding can be
spliced in next to its subject word so that attention columns stay aligned
with the words they describe.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError, VocabularyError
from .nn import COMPUTE_DTYPE, ParamStore, init_conv, init_linear, sinusoidal_embedding

BOS, EOS, PAD, SUBJECT_SLOT = 0, 1, 2, 3
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<subject>")

# Closed word list: articles, shapes, colors, textures, motions, backgrounds,
# template glue, and the jeep/vintage demo domain used in the docs.
DEFAULT_WORDS = (
    "a", "the",
    "square", "circle", "triangle",
    "red", "blue", "green", "yellow",
    "solid", "striped",
    "left", "right", "up", "down", "diagonal",
    "plain", "gradient", "checker",
    "moving", "on",
    "jeep", "vintage", "car", "road",
)

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token list; line number in the serialized file = token id."""

    words: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.words[:4]) != SPECIAL_TOKENS:
            raise ParameterError("special tokens must occupy ids 0-3")
        if len(set(self.words)) != len(self.words):
            raise ParameterError("vocabulary words must be unique")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(words=SPECIAL_TOKENS + DEFAULT_WORDS)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def id(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            raise VocabularyError(word) from None

    def word(self, token_id: int) -> str:
        return self.words[token_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(words=tuple(lines))


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    """Lowercase, whitespace-split, wrap in BOS/EOS; OOV words raise."""
    ids = [BOS]
    for word in text.lower().split():
        if word not in vocab:
            raise VocabularyError(word)
        ids.append(vocab.id(word))
    ids.append(EOS)
    return tuple(ids)


def detokenize(tokens: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.word(t) for t in tokens if t not in (BOS, EOS, PAD))


@dataclass(frozen=True)
class PromptSpec:
    """Source/edit token sequences plus the edit prompt's subject word slot."""

    source_tokens: TokenSeq
    edit_tokens: TokenSeq
    subject_word_position: int | None = None
    max_tokens: int = 16

    def __post_init__(self):
        for name, seq in (("source", self.source_tokens), ("edit", self.edit_tokens)):
            if len(seq) < 2 or seq[0] != BOS or seq[-1] != EOS:
                raise ParameterError(f"{name} tokens must be BOS-prefixed and EOS-terminated")
            if len(seq) > self.max_tokens:
                raise ParameterError(f"{name} prompt exceeds max_tokens={self.max_tokens}")
        if self.subject_word_position is not None:
            if not 0 <= self.subject_word_position < len(self.edit_tokens):
                raise ParameterError("subject_word_position out of range")


@dataclass(frozen=True)
class TokenAlignment:
    """Correspondence between edit-token and source-token positions.

    ``mapper`` holds LCS-matched positions (edit -> source, injective);
    every other edit position is in ``edited_positions``. Equal-length
    substituted spans additionally record their source column in
    ``swapped_counterparts`` for blend-mask union.
    """

    mapper: dict[int, int]
    edited_positions: frozenset[int]
    swapped_counterparts: dict[int, int]

    def invert(self) -> dict[int, int]:
        return {v: k for k, v in self.mapper.items()}


def _lcs_lengths(a: TokenSeq, b: TokenSeq) -> np.ndarray:
    """Suffix LCS table: L[i, j] = LCS length of a[i:] vs b[j:]."""
    n, m = len(a), len(b)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            else:
                table[i, j] = max(table[i + 1, j], table[i, j + 1])
    return table


def _lcs_pairs(a: TokenSeq, b: TokenSeq) -> list[tuple[int, int]]:
    """Canonical maximum matching: greedy earliest match, with a
    content-based tie-break on skips so the result is symmetric in (a, b)."""
    table = _lcs_lengths(a, b)
    pairs = []
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif table[i + 1, j] > table[i, j + 1]:
            i += 1
        elif table[i + 1, j] < table[i, j + 1]:
            j += 1
        elif a[i] > b[j]:
            i += 1
        else:
            j += 1
    return pairs


def align_prompts(source: TokenSeq, edit: TokenSeq) -> TokenAlignment:
    """LCS alignment plus substitution-span detection for word swap."""
    pairs = _lcs_pairs(source, edit)
    mapper = {j: i for i, j in pairs}
    edited = frozenset(p for p in range(len(edit)) if p not in mapper)
    swapped: dict[int, int] = {}
    anchors = [(-1, -1)] + pairs + [(len(source), len(edit))]
    for (i0, j0), (i1, j1) in zip(anchors[:-1], anchors[1:]):
        src_span = range(i0 + 1, i1)
        edit_span = range(j0 + 1, j1)
        if len(src_span) == len(edit_span):
            for si, ej in zip(src_span, edit_span):
                swapped[ej] = si
    return TokenAlignment(mapper=mapper, edited_positions=edited, swapped_counterparts=swapped)


@dataclass(frozen=True)
class SubjectEmbedding:
    """k token-space vectors describing a reference image's subject."""

    tokens: np.ndarray  # (k, d_tau)
    source_subject_word: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.tokens)):
            raise ShapeError("subject embedding contains non-finite entries")


@dataclass(frozen=True)
class Condition:
    """Fused conditioning sequence with per-position provenance labels.

    ``token_positions[p]`` is the index into the originating token sequence
    for text rows and -1 for subject rows.
    """

    vectors: np.ndarray  # (L, d_tau)
    labels: tuple[str, ...]
    token_positions: tuple[int, ...]

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.labels) or len(self.labels) != len(
            self.token_positions
        ):
            raise ShapeError("condition labels must cover every position")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    def subject_columns(self) -> list[int]:
        return [p for p, lab in enumerate(self.labels) if lab == "subject"]


def embed_text(tokens: TokenSeq, params: ParamStore, positional: bool = True) -> np.ndarray:
    """Embedding lookup (+ fixed sinusoidal positional code)."""
    table = params.arrays["text.token_table"].astype(COMPUTE_DTYPE)
    ids = np.asarray(tokens, dtype=np.int64)
    out = table[ids]
    if positional:
        out = out + sinusoidal_embedding(np.arange(len(tokens)), table.shape[1])
    return out


def embed_text_graph(tokens: TokenSeq, table: Tensor, positional: bool = True) -> Tensor:
    """Graph-mode embed_text, used by the joint training loop."""
    ids = np.asarray(tokens, dtype=np.int64)
    out = ad.getitem(table, ids)
    if positional:
        pos = sinusoidal_embedding(np.arange(len(tokens)), table.data.shape[1])
        out = ad.add(out, Tensor(pos.astype(table.data.dtype)))
    return out


def text_condition(tokens: TokenSeq, params: ParamStore) -> Condition:
    vec = embed_text(tokens, params)
    n = len(tokens)
    return Condition(vectors=vec, labels=("text",) * n, token_positions=tuple(range(n)))


def fuse(
    c1: SubjectEmbedding | None,
    c2: Condition,
    subject_position: int | None = None,
    mode: str = "adjacent",
) -> Condition:
    """Splice subject tokens into a text condition.

    ``adjacent`` inserts the k subject rows immediately after the subject
    word's position (keeps word<->pixel correspondence); ``append`` places
    them at the end. Without a subject embedding the condition is returned
    unchanged.
    """
    if c1 is None:
        return c2
    k, d = c1.tokens.shape
    if d != c2.vectors.shape[1]:
        raise ShapeError(f"subject width {d} != text width {c2.vectors.shape[1]}")
    if mode == "append":
        insert_at = len(c2)
    elif mode == "adjacent":
        if subject_position is None:
            raise ParameterError("adjacent fusion needs the subject word position")
        if not 0 <= subject_position < len(c2):
            raise ParameterError("subject_position out of range")
        insert_at = subject_position + 1
    else:
        raise ParameterError(f"unknown fusion mode {mode!r}")
    vectors = np.concatenate(
        [c2.vectors[:insert_at], c1.tokens.astype(c2.vectors.dtype), c2.vectors[insert_at:]]
    )
    labels = c2.labels[:insert_at] + ("subject",) * k + c2.labels[insert_at:]
    positions = (
        c2.token_positions[:insert_at] + (-1,) * k + c2.token_positions[insert_at:]
    )
    return Condition(vectors=vectors, labels=labels, token_positions=positions)


def null_condition(params: ParamStore) -> Condition:
    """Empty-prompt condition used for dropout and classifier-free guidance."""
    return text_condition((BOS, EOS), params)


# --- toy subject encoder -------------------------------------------------

def init_conditioning_params(
    store: ParamStore,
    rng: np.random.Generator,
    vocab_size: int,
    cond_dim: int,
    k_subject: int,
) -> None:
    """Register text-embedding and subject-encoder parameters."""
    store.register("text.token_table", rng.normal(0.0, 0.5, size=(vocab_size, cond_dim)))
    store.register("subject.conv1.w", init_conv(rng, 16, 3, 3))
    store.register("subject.conv1.b", np.zeros(16))
    store.register("subject.conv2.w", init_conv(rng, 32, 16, 3))
    store.register("subject.conv2.b", np.zeros(32))
    store.register("subject.conv3.w", init_conv(rng, 32, 32, 3))
    store.register("subject.conv3.b", np.zeros(32))
    store.register("subject.head.w", init_linear(rng, 32 * 4 * 4, k_subject * cond_dim))
    store.register("subject.head.b", np.zeros(k_subject * cond_dim))
    store.meta.setdefault("k_subject", k_subject)
    store.meta.setdefault("cond_dim", cond_dim)


def subject_forward(
    tensors: dict[str, Tensor], image: Tensor, word_vec: Tensor, k_subject: int, cond_dim: int
) -> Tensor:
    """Encode a (1, 3, H, W) reference image into (k, d_tau) subject tokens.

    H must be a multiple of 32; activations are pooled to a fixed 4x4 map
    before the head so the encoder is resolution-agnostic.
    """
    x = ad.silu(ad.conv2d(image, tensors["subject.conv1.w"], tensors["subject.conv1.b"], stride=2))
    x = ad.silu(ad.conv2d(x, tensors["subject.conv2.w"], tensors["subject.conv2.b"], stride=2))
    x = ad.silu(ad.conv2d(x, tensors["subject.conv3.w"], tensors["subject.conv3.b"], stride=2))
    side = x.data.shape[-1]
    if side != 4:
        if side % 4:
            raise ShapeError(f"reference resolution unsupported: conv map side {side}")
        x = ad.avg_pool2d(x, side // 4)
    feat = ad.reshape(x, (1, 32 * 4 * 4))
    tok = ad.linear(feat, tensors["subject.head.w"], tensors["subject.head.b"])
    tok = ad.reshape(tok, (k_subject, cond_dim))
    return ad.add(tok, ad.reshape(word_vec, (1, cond_dim)))


def encode_subject(
    reference_image: np.ndarray, subject_word: int, params: ParamStore
) -> SubjectEmbedding:
    """Inference-mode subject encoding from a (3, H, W) image in [0, 1]."""
    img = np.asarray(reference_image, dtype=COMPUTE_DTYPE)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"reference image must be (3, H, W), got {img.shape}")
    if img.shape[1] % 32 or img.shape[2] % 32:
        raise ShapeError(f"reference resolution must be a multiple of 32, got {img.shape[1:]}")
    k = int(params.meta["k_subject"])
    d = int(params.meta["cond_dim"])
    tensors = params.tensors(prefix="subject.")
    word_vec = Tensor(params.arrays["text.token_table"][subject_word].astype(COMPUTE_DTYPE))
    tok = subject_forward(tensors, Tensor(img[None]), word_vec, k, d)
    return SubjectEmbedding(tokens=tok.data, source_subject_word=subject_word)


def subject_features(reference_image: np.ndarray, params: ParamStore) -> np.ndarray:
    """Mid-depth activations of the subject encoder (perceptual features)."""
    img = np.asarray(reference_image, dtype=COMPUTE_DTYPE)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {img.shape}")
    tensors = params.tensors(prefix="subject.")
    x = ad.silu(ad.conv2d(Tensor(img[None]), tensors["subject.conv1.w"],
                          tensors["subject.conv1.b"], stride=2))
    x = ad.silu(ad.conv2d(x, tensors["subject.conv2.w"], tensors["subject.conv2.b"], stride=2))
    return x.data[0]
