"""Prompt tokenization, embedding, and learned per-token weighting.

Text conditioning works on a small closed vocabulary shipped with the
package.  Each prompt is lowercased, split into alphanumeric tokens, and
embedded through a fixed table in which design vocabulary (furniture
nouns, dimension words, numerals, styles) is offset along a common
direction.  A small trained scorer turns those embeddings into per-token
weights that sum to one; downstream attention consumes the weights as a
logit prior.
"""

from __future__ import annotations

import dataclasses
import json
import re
import warnings
from importlib import resources

import numpy as np

from .designhelper_mini import KINDS
from .errors import ConfigError, DomainError, ShapeError
from .tensor_core import Rng, require_finite

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_UNK = "<unk>"

# words that form dimension clauses; numerals are recognized by isdigit
_CLAUSE_WORDS = frozenset(KINDS) | {"width", "height"}


def tokenize(text: str) -> list:
    """Lowercased alphanumeric tokens; punctuation acts as a separator."""
    if not text or not text.strip():
        raise DomainError("empty prompt")
    return _TOKEN_RE.findall(text.lower())


@dataclasses.dataclass(frozen=True)
class Vocabulary:
    """Closed token table with a design-term flag per token.

    Ids are dense in [0, size); id 0 is the unknown token.
    """

    tokens: tuple
    design_term: tuple

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != _UNK:
            raise ConfigError("vocabulary must reserve id 0 for the unknown token")
        if len(self.tokens) != len(set(self.tokens)):
            raise ConfigError("duplicate vocabulary tokens")
        if len(self.design_term) != len(self.tokens):
            raise ConfigError("one design flag required per token")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, 0)

    @classmethod
    def from_entries(cls, entries) -> "Vocabulary":
        return cls(
            tokens=tuple(e["token"] for e in entries),
            design_term=tuple(bool(e["design_term"]) for e in entries),
        )

    @classmethod
    def load(cls, path=None) -> "Vocabulary":
        if path is None:
            text = resources.files("roomdiff").joinpath("data/vocabulary.json").read_text()
        else:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_entries(json.loads(text))


@dataclasses.dataclass(frozen=True)
class PromptFeatures:
    """Token ids with their embedding rows and optional normalized weights."""

    token_ids: tuple
    embeddings: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        n = len(self.token_ids)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ShapeError("one embedding row required per token")
        if self.weights is not None:
            if self.weights.shape != (n,):
                raise ShapeError("one weight required per token")
            if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
                raise DomainError("weights must be nonnegative and sum to one")


def make_embedding_table(vocab: Vocabulary, d_text: int = 32, seed: int = 0,
                         design_shift: float = 1.5) -> np.ndarray:
    """Fixed Gaussian embedding table with design terms offset along one axis.

    Rows have unit-order norm; flagged rows gain design_shift along a fixed
    unit direction so a linear probe can separate them.
    """
    if d_text < 1:
        raise ConfigError("d_text must be positive")
    rng = Rng(seed)
    table = rng.spawn("embed-table").normal((vocab.size, d_text)) / np.sqrt(d_text)
    axis = rng.spawn("embed-axis").normal((d_text,))
    axis /= np.linalg.norm(axis)
    flags = np.array(vocab.design_term, dtype=float)
    return table + design_shift * flags[:, None] * axis[None, :]


def tokenize_and_embed(text: str, vocab: Vocabulary, table: np.ndarray) -> PromptFeatures:
    """PromptFeatures for a prompt; unknown tokens map to id 0. No weights yet."""
    if table.ndim != 2 or table.shape[0] != vocab.size:
        raise ShapeError("embedding table must have one row per vocabulary id")
    ids = tuple(vocab.id_of(t) for t in tokenize(text))
    return PromptFeatures(token_ids=ids, embeddings=table[list(ids)].copy())


def design_token_mask(token_ids, vocab: Vocabulary) -> np.ndarray:
    """Mask of dimension-clause tokens (kind nouns, width/height, numerals).

    Prompts without any numeral carry no dimension constraint, so the mask
    is all False for them.
    """
    words = [vocab.tokens[i] for i in token_ids]
    if not any(w.isdigit() for w in words):
        return np.zeros(len(words), dtype=bool)
    return np.array([w.isdigit() or w in _CLAUSE_WORDS for w in words], dtype=bool)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclasses.dataclass
class PatchScorer:
    """Two-layer MLP mapping an embedding row to a scalar keyword score."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for arr in (self.w1, self.b1, self.w2, self.b2):
            require_finite("scorer parameter", arr)
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, 1) or self.b2.shape != (1,):
            raise ShapeError("inconsistent scorer parameter shapes")

    @classmethod
    def create(cls, d_text: int, d_hidden: int = 16, seed: int = 0) -> "PatchScorer":
        rng = Rng(seed).spawn("patch-scorer")
        return cls(
            w1=rng.normal((d_text, d_hidden)) / np.sqrt(d_text),
            b1=np.zeros(d_hidden),
            w2=rng.normal((d_hidden, 1)) / np.sqrt(d_hidden),
            b2=np.zeros(1),
        )

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        z1 = embeddings @ self.w1 + self.b1
        hidden = z1 * _sigmoid(z1)
        return (hidden @ self.w2 + self.b2)[:, 0]

    def score(self, embeddings: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(embeddings))

    def copy(self) -> "PatchScorer":
        return PatchScorer(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def scorer_loss_and_grads(scorer: PatchScorer, x: np.ndarray, y: np.ndarray):
    """Mean logistic loss of scorer on (x, y) and its parameter gradients."""
    n = x.shape[0]
    z1 = x @ scorer.w1 + scorer.b1
    s1 = _sigmoid(z1)
    hidden = z1 * s1
    z2 = (hidden @ scorer.w2 + scorer.b2)[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, z2) - y * z2))
    dz2 = ((_sigmoid(z2) - y) / n)[:, None]
    dw2 = hidden.T @ dz2
    db2 = dz2.sum(axis=0)
    dhidden = dz2 @ scorer.w2.T
    dz1 = dhidden * s1 * (1.0 + z1 * (1.0 - s1))
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    return loss, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def train_patch_scorer(corpus, scorer: PatchScorer, vocab: Vocabulary,
                       table: np.ndarray, epochs: int = 200, lr: float = 1.0):
    """Full-batch logistic training on per-token design labels.

    corpus: list of (text, per-token flag list).  Returns (trained copy,
    final loss); zero epochs leaves parameters unchanged.
    """
    if not corpus:
        raise ConfigError("empty scorer corpus")
    if epochs < 0:
        raise ConfigError("epochs must be nonnegative")
    rows = []
    labels = []
    for text, flags in corpus:
        feats = tokenize_and_embed(text, vocab, table)
        if len(flags) != len(feats.token_ids):
            raise ShapeError("one design flag required per token")
        rows.append(feats.embeddings)
        labels.extend(float(bool(f)) for f in flags)
    x = np.concatenate(rows, axis=0)
    y = np.array(labels)
    if y.min() == y.max():
        warnings.warn("degenerate scorer corpus: a single label class", RuntimeWarning)
    out = scorer.copy()
    loss, _ = scorer_loss_and_grads(out, x, y)
    for _ in range(epochs):
        loss, grads = scorer_loss_and_grads(out, x, y)
        out.w1 -= lr * grads["w1"]
        out.b1 -= lr * grads["b1"]
        out.w2 -= lr * grads["w2"]
        out.b2 -= lr * grads["b2"]
    if epochs > 0:
        loss, _ = scorer_loss_and_grads(out, x, y)
    return out, loss


def weight_prompt(features: PromptFeatures, scorer: PatchScorer) -> PromptFeatures:
    """Attach normalized per-token weights: sigmoid scores over their sum."""
    scores = scorer.score(features.embeddings)
    weights = scores / scores.sum()
    # renormalize exactly so the sum-to-one invariant holds at validation
    weights = weights / weights.sum()
    return dataclasses.replace(features, weights=weights)
