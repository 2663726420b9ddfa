"""Sparse term-frequency featurization over a fixed phrase vocabulary.

Documents are tokenized by lowercasing and splitting on non-alphanumeric
characters.  Vocabulary phrases (1 to 5 tokens) are matched greedily,
longest match first, scanning left to right; matched tokens are consumed so
nested phrases are not double counted ("anterior cingulate" does not also
count "cingulate").  A document's feature is the per-phrase match count
divided by its total token count.

The resulting matrix is kept sparse.  Column means and scales are stored
alongside it so that the centered, scaled design

    Z = (X - mean) / scale

is only ever applied implicitly through matrix products; ``scale`` defaults
to n times the per-column variance, with a standard-deviation alternative
behind ``scale_mode="std"``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._container import sha256_hex
from ._validation import as_points

MAX_PHRASE_TOKENS = 5

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Columns whose variance falls below this (relative to the mean square) are
# treated as constant: scale 1, centered contribution identically zero.
_ZERO_VARIANCE_RTOL = 1e-12


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def normalize_phrase(phrase: str) -> str:
    """Canonical form used for vocabulary entries and atlas labels."""
    return " ".join(tokenize(phrase))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Ordered, deduplicated phrase list with an index for matching."""

    phrases: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    def __post_init__(self):
        if len(self.phrases) < 1:
            raise ValueError("vocabulary is empty")

    @classmethod
    def from_phrases(cls, phrases) -> "Vocabulary":
        seen: dict[str, int] = {}
        kept: list[str] = []
        for raw in phrases:
            phrase = normalize_phrase(raw)
            if not phrase:
                continue
            n_tokens = phrase.count(" ") + 1
            if n_tokens > MAX_PHRASE_TOKENS:
                raise ValueError(
                    f"phrase {raw!r} has {n_tokens} tokens; at most {MAX_PHRASE_TOKENS} allowed"
                )
            if phrase not in seen:
                seen[phrase] = len(kept)
                kept.append(phrase)
        if not kept:
            raise ValueError("vocabulary is empty")
        return cls(phrases=tuple(kept), index=seen)

    def __len__(self) -> int:
        return len(self.phrases)

    def __contains__(self, phrase: str) -> bool:
        return normalize_phrase(phrase) in self.index

    def index_of(self, phrase: str) -> int:
        key = normalize_phrase(phrase)
        if key not in self.index:
            raise KeyError(f"phrase {phrase!r} is not in the vocabulary")
        return self.index[key]

    @property
    def fingerprint(self) -> str:
        return sha256_hex("\n".join(self.phrases).encode("utf-8"))


def load_vocabulary(path: str | Path) -> Vocabulary:
    """Read one phrase per line; normalized, deduplicated keeping first occurrence."""
    text = Path(path).read_text(encoding="utf-8")
    return Vocabulary.from_phrases(text.splitlines())


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.phrases) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Vectorization
# ---------------------------------------------------------------------------


def _match_counts(tokens: list[str], vocab: Vocabulary) -> dict[int, int]:
    """Greedy longest-match phrase counting with consumed tokens."""
    counts: dict[int, int] = {}
    n = len(tokens)
    i = 0
    while i < n:
        matched = False
        for length in range(min(MAX_PHRASE_TOKENS, n - i), 0, -1):
            phrase = " ".join(tokens[i : i + length])
            hit = vocab.index.get(phrase)
            if hit is not None:
                counts[hit] = counts.get(hit, 0) + 1
                i += length
                matched = True
                break
        if not matched:
            i += 1
    return counts


def vectorize(text: str, vocab: Vocabulary) -> sp.csr_matrix:
    """Term-frequency row (1, d): phrase match count / document token count."""
    tokens = tokenize(text)
    if not tokens:
        return sp.csr_matrix((1, len(vocab)), dtype=np.float64)
    counts = _match_counts(tokens, vocab)
    if not counts:
        return sp.csr_matrix((1, len(vocab)), dtype=np.float64)
    cols = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
    vals = np.fromiter(counts.values(), dtype=np.float64, count=len(counts)) / len(tokens)
    rows = np.zeros(len(counts), dtype=np.int64)
    return sp.csr_matrix((vals, (rows, cols)), shape=(1, len(vocab)))


# ---------------------------------------------------------------------------
# Feature matrix with implicit standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMatrix:
    """Sparse n x d term frequencies plus the column statistics of the design.

    ``matrix`` is never densified; the centered/scaled design is applied
    through :meth:`design_matmul` / :meth:`design_rmatmul`.
    """

    matrix: sp.csr_matrix
    means: np.ndarray
    scales: np.ndarray
    zero_variance: np.ndarray
    scale_mode: str = "n_variance"
    doc_ids: tuple[str, ...] | None = None

    @classmethod
    def from_matrix(
        cls,
        matrix,
        doc_ids: tuple[str, ...] | None = None,
        scale_mode: str = "n_variance",
        require_nonnegative: bool = True,
    ) -> "FeatureMatrix":
        if scale_mode not in ("n_variance", "std"):
            raise ValueError(f"unknown scale_mode {scale_mode!r}")
        X = sp.csr_matrix(matrix, dtype=np.float64)
        if X.shape[0] < 1:
            raise ValueError("feature matrix has zero rows")
        if require_nonnegative and X.nnz and X.data.min() < 0:
            raise ValueError("term frequencies must be nonnegative")
        n = X.shape[0]
        means = np.asarray(X.mean(axis=0)).ravel()
        mean_sq = np.asarray(X.multiply(X).mean(axis=0)).ravel()
        variance = np.maximum(mean_sq - means**2, 0.0)
        zero_variance = variance <= _ZERO_VARIANCE_RTOL * np.maximum(mean_sq, 1e-300)
        if scale_mode == "n_variance":
            scales = n * variance
        else:
            scales = np.sqrt(variance)
        scales = np.where(zero_variance, 1.0, scales)
        for arr in (means, scales, zero_variance):
            arr.setflags(write=False)
        return cls(
            matrix=X,
            means=means,
            scales=scales,
            zero_variance=zero_variance,
            scale_mode=scale_mode,
            doc_ids=doc_ids,
        )

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def scaled_matrix(self) -> sp.csr_matrix:
        """X with columns divided by their scale (still sparse)."""
        cached = self.__dict__.get("_scaled")
        if cached is None:
            cached = self.matrix.multiply(1.0 / self.scales[None, :]).tocsr()
            self.__dict__["_scaled"] = cached
        return cached

    @property
    def scaled_means(self) -> np.ndarray:
        """Column means divided by the column scales."""
        cached = self.__dict__.get("_scaled_means")
        if cached is None:
            cached = self.means / self.scales
            self.__dict__["_scaled_means"] = cached
        return cached

    def design_matmul(self, coef: np.ndarray) -> np.ndarray:
        """Z @ coef for the implicit centered, scaled design Z = (X - mean)/scale."""
        coef = np.atleast_2d(np.asarray(coef, dtype=np.float64))
        return self.scaled_matrix @ coef - self.scaled_means @ coef

    def design_rmatmul(self, values: np.ndarray) -> np.ndarray:
        """Z.T @ values, i.e. the scaled sparse product with the rank-one mean correction."""
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        return self.scaled_matrix.T @ values - np.outer(self.scaled_means, values.sum(axis=0))

    def subset(self, rows) -> "FeatureMatrix":
        """Row subset with statistics recomputed on those rows only."""
        rows = np.asarray(rows, dtype=np.int64)
        ids = tuple(self.doc_ids[i] for i in rows) if self.doc_ids is not None else None
        return FeatureMatrix.from_matrix(self.matrix[rows], doc_ids=ids, scale_mode=self.scale_mode)


def assemble_features(
    texts,
    vocab: Vocabulary,
    doc_ids: tuple[str, ...] | None = None,
    scale_mode: str = "n_variance",
) -> FeatureMatrix:
    """Vectorize ``texts`` in order and attach standardization statistics."""
    texts = list(texts)
    if not texts:
        raise ValueError("corpus contains zero documents")
    rows = [vectorize(t, vocab) for t in texts]
    X = sp.vstack(rows, format="csr")
    return FeatureMatrix.from_matrix(X, doc_ids=doc_ids, scale_mode=scale_mode)


# ---------------------------------------------------------------------------
# Corpus records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Document:
    """One corpus record: an id, free text, and observed mm coordinates."""

    doc_id: str
    text: str
    coordinates: np.ndarray  # (c, 3) float64, possibly empty

    def __post_init__(self):
        coords = as_points(self.coordinates, allow_empty=True)
        coords.setflags(write=False)
        object.__setattr__(self, "coordinates", coords)

    @property
    def n_coordinates(self) -> int:
        return self.coordinates.shape[0]


def load_corpus(path: str | Path) -> list[Document]:
    """Read JSON Lines records {"id", "text", "coordinates"}."""
    docs: list[Document] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            for key in ("id", "text", "coordinates"):
                if key not in rec:
                    raise ValueError(f"{path}:{line_no}: record lacks {key!r}")
            docs.append(
                Document(
                    doc_id=str(rec["id"]),
                    text=str(rec["text"]),
                    coordinates=np.asarray(rec["coordinates"], dtype=np.float64).reshape(-1, 3),
                )
            )
    if not docs:
        raise ValueError(f"{path}: corpus contains zero documents")
    return docs


def save_corpus(docs, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            rec = {
                "id": doc.doc_id,
                "text": doc.text,
                "coordinates": [[float(v) for v in row] for row in doc.coordinates],
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def corpus_fingerprint(docs) -> str:
    """Content hash of a corpus, independent of on-disk formatting."""
    payload = [
        [doc.doc_id, doc.text, [[float(v) for v in row] for row in doc.coordinates]]
        for doc in docs
    ]
    return sha256_hex(json.dumps(payload, separators=(",", ":")).encode("utf-8"))


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

_FEATURES_KIND = "FEATURES"


def save_features(
    features: FeatureMatrix,
    path: str | Path,
    corpus_fingerprint: str,
    vocabulary_fingerprint: str,
) -> None:
    """Cache the sparse matrix and its statistics, keyed by corpus and vocabulary."""
    from ._container import write_container

    X = features.matrix.tocsr()
    meta = {
        "corpus": corpus_fingerprint,
        "vocabulary": vocabulary_fingerprint,
        "shape": list(X.shape),
        "scale_mode": features.scale_mode,
        "doc_ids": list(features.doc_ids) if features.doc_ids else None,
    }
    write_container(
        path,
        _FEATURES_KIND,
        meta,
        [
            ("indptr", X.indptr, "<i8"),
            ("indices", X.indices, "<i8"),
            ("data", X.data, "<f8"),
        ],
    )


def load_features(
    path: str | Path,
    corpus_fingerprint: str,
    vocabulary_fingerprint: str,
) -> FeatureMatrix:
    from ._container import ContainerError, read_container

    meta, arrays = read_container(path, _FEATURES_KIND)
    if meta["corpus"] != corpus_fingerprint:
        raise ContainerError(f"{path}: feature cache was built from a different corpus")
    if meta["vocabulary"] != vocabulary_fingerprint:
        raise ContainerError(f"{path}: feature cache was built with a different vocabulary")
    shape = tuple(int(s) for s in meta["shape"])
    X = sp.csr_matrix(
        (arrays["data"], arrays["indices"], arrays["indptr"]), shape=shape
    )
    doc_ids = tuple(meta["doc_ids"]) if meta.get("doc_ids") else None
    return FeatureMatrix.from_matrix(X, doc_ids=doc_ids, scale_mode=meta["scale_mode"])
