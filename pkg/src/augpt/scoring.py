"""Frozen toy encoders, cosine-similarity logits and temperature softmax."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateFeatureError, ParameterError, SchemaError
from .imageops import Raster

ENCODER_KINDS = ("patch-mean", "random-projection", "external")


def _patch_grid(out_dim: int) -> Tuple[int, int]:
    if out_dim % 3:
        raise ParameterError("patch-mean encoders need out_dim divisible by 3")
    cells = out_dim // 3
    rows = int(math.isqrt(cells))
    while cells % rows:
        rows -= 1
    return rows, cells // rows


@dataclass(frozen=True, eq=False)
class Encoder:
    """A frozen image encoder producing ``out_dim`` features.

    ``patch-mean`` averages each channel over a fixed grid of patches.
    ``random-projection`` applies a seeded Gaussian matrix to the
    flattened pixels rescaled to [-0.5, 0.5]; its input size is fixed at
    construction.  ``external`` encoders exist only to carry a width for
    logits that were computed elsewhere.
    """

    kind: str
    out_dim: int
    seed: int = 0
    image_size: Optional[Tuple[int, int]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ParameterError(f"unknown encoder kind {self.kind!r}")
        if self.out_dim < 1:
            raise ParameterError("out_dim must be positive")
        params = dict(self.params)
        if self.kind == "patch-mean":
            _patch_grid(self.out_dim)
        elif self.kind == "random-projection" and "matrix" not in params:
            if self.image_size is None:
                raise ParameterError("random-projection encoders need image_size")
            w, h = self.image_size
            fan_in = w * h * 3
            rng = np.random.default_rng(self.seed)
            params["matrix"] = rng.standard_normal((self.out_dim, fan_in)) / math.sqrt(fan_in)
        for arr in params.values():
            arr.setflags(write=False)
        object.__setattr__(self, "params", params)

    def encode(self, img: Raster) -> np.ndarray:
        if self.kind == "external":
            raise ParameterError("external encoders cannot encode images; ingest logits instead")
        if self.kind == "patch-mean":
            rows, cols = _patch_grid(self.out_dim)
            if img.height < rows or img.width < cols:
                raise ParameterError("image smaller than the patch grid")
            arr = img.pixels.astype(np.float64) / 255.0
            ys = np.linspace(0, img.height, rows + 1).round().astype(int)
            xs = np.linspace(0, img.width, cols + 1).round().astype(int)
            feats = [
                arr[ys[r] : ys[r + 1], xs[c] : xs[c + 1]].mean(axis=(0, 1))
                for r in range(rows)
                for c in range(cols)
            ]
            return np.concatenate(feats)
        matrix = self.params["matrix"]
        if (img.width, img.height) != tuple(self.image_size):
            raise ParameterError(
                f"encoder built for {self.image_size}, got {(img.width, img.height)}"
            )
        x = img.pixels.astype(np.float64).ravel() / 255.0 - 0.5
        return matrix @ x

    def encode_many(self, images: Iterable[Raster]) -> np.ndarray:
        images = list(images)
        if self.kind == "random-projection" and images:
            x = np.stack([im.pixels.astype(np.float64).ravel() for im in images]) / 255.0 - 0.5
            # Row-by-row matvec keeps results bit-identical to ``encode``.
            return np.stack([self.params["matrix"] @ row for row in x])
        return np.stack([self.encode(im) for im in images])


@dataclass(frozen=True, eq=False)
class ClassEmbeddings:
    matrix: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ParameterError("class embeddings must be a 2-D matrix")
        if m.shape[0] < 2:
            raise ParameterError("need at least two classes")
        if len(self.class_names) != m.shape[0]:
            raise ParameterError("one class name per embedding row required")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ParameterError("class embedding rows must be unit-normalised")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @classmethod
    def from_rows(cls, rows, class_names=None) -> "ClassEmbeddings":
        m = np.asarray(rows, dtype=np.float64)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateFeatureError("zero-norm class embedding row")
        names = class_names or [f"class{i}" for i in range(m.shape[0])]
        return cls(m / norms, tuple(names))

    @property
    def c(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class LogitVector:
    values: np.ndarray
    view_index: int = 0
    image_key: Optional[str] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def as_logit_matrix(logits) -> np.ndarray:
    """Stack LogitVectors (or plain sequences) into an ``(n, c)`` array."""
    rows = [l.values if isinstance(l, LogitVector) else np.asarray(l, dtype=np.float64) for l in logits]
    if not rows:
        return np.zeros((0, 0))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise SchemaError(f"logit vectors of mixed lengths {sorted(widths)}")
    return np.stack(rows).astype(np.float64)


def cosine_matrix(feats: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Cosine similarity between each feature row and each embedding row."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    emb = np.asarray(emb, dtype=np.float64)
    fn = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(fn == 0):
        raise DegenerateFeatureError("zero-norm feature vector")
    en = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(en == 0):
        raise DegenerateFeatureError("zero-norm embedding row")
    # einsum (not BLAS) so each entry is independent of how many rows share the call.
    return np.einsum("nd,cd->nc", feats / fn, emb / en)


def cosine_logits(feat, emb: ClassEmbeddings, view_index: int = 0) -> LogitVector:
    feat = np.asarray(feat, dtype=np.float64).reshape(-1)
    matrix = emb.matrix if isinstance(emb, ClassEmbeddings) else np.asarray(emb)
    if feat.shape[0] != matrix.shape[1]:
        raise ParameterError(f"feature width {feat.shape[0]} != embedding width {matrix.shape[1]}")
    return LogitVector(cosine_matrix(feat, matrix)[0], view_index)


def softmax_rows(x: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(x, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(x, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_prob(logits, tau: float = 1.0) -> np.ndarray:
    values = logits.values if isinstance(logits, LogitVector) else logits
    return softmax_rows(np.asarray(values, dtype=np.float64), tau)


# ---------------------------------------------------------------------------
# Logits CSV: image_key,view_index,c0,...,c{c-1}


def write_logits_csv(path, records: Iterable[LogitVector]) -> None:
    records = list(records)
    c = len(records[0]) if records else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_key", "view_index", *[f"c{i}" for i in range(c)]])
        for rec in records:
            if len(rec) != c:
                raise SchemaError("all logit vectors in a file must share c")
            writer.writerow(
                [rec.image_key or "", rec.view_index, *[format(float(v), ".17g") for v in rec.values]]
            )


def ingest_logits(path) -> List[LogitVector]:
    """Parse a logits CSV into LogitVectors carrying ``image_key``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty logits file") from None
        if header[:2] != ["image_key", "view_index"] or len(header) < 4:
            raise SchemaError(f"{path}: bad header {header!r}")
        c = len(header) - 2
        if header[2:] != [f"c{i}" for i in range(c)]:
            raise SchemaError(f"{path}: class columns must be c0..c{c - 1}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != c + 2:
                raise SchemaError(f"{path}:{lineno}: expected {c + 2} columns, got {len(row)}")
            try:
                view_index = int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            out.append(LogitVector(np.array(values), view_index, row[0]))
    return out


def group_by_image(records: Sequence[LogitVector]):
    """Group ingested logits by image key, sorted by view index."""
    groups = {}
    for rec in records:
        groups.setdefault(rec.image_key, []).append(rec)
    for key, recs in groups.items():
        recs.sort(key=lambda r: r.view_index)
        idx = [r.view_index for r in recs]
        if idx != list(range(len(recs))):
            raise SchemaError(f"image {key!r}: view indices must be 0..N, got {idx}")
    return groups
