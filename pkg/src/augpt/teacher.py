"""Desk-scale teacher: learnable class embeddings plus a visual bias.

The teacher scores an image by the cosine similarity between
``encoder(img) + visual_bias`` and each class-embedding row.  It is fit with
temperature-scaled cross-entropy on few-shot labelled pairs and then frozen;
a frozen teacher is an immutable object whose logits depend only on image
bytes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import serialization
from .errors import DataError, DegenerateFeatureError, ParameterError
from .imageops import Raster
from .scoring import (
    ClassEmbeddings,
    Encoder,
    LogitVector,
    cosine_matrix,
    log_softmax_rows,
    softmax_rows,
)

INIT_SIGMA = 0.02


@dataclass
class TeacherConfig:
    epochs: int = 20
    lr: float = 0.002
    batch: int = 16
    tau: float = 1.0
    seed: int = 0
    # Labelled examples per base class handed to the teacher.
    shots: int = 16

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.shots < 1:
            raise ParameterError("epochs >= 0, batch >= 1 and shots >= 1 required")
        if self.lr < 0:
            raise ParameterError("lr must be non-negative")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TeacherModel:
    encoder: Encoder
    class_emb: ClassEmbeddings
    visual_bias: np.ndarray
    tau: float = 1.0
    seed: int = 0
    loss_trace: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        bias = np.array(self.visual_bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != self.class_emb.dim:
            raise ParameterError("visual_bias width must match the class embeddings")
        if self.encoder.out_dim != self.class_emb.dim:
            raise ParameterError("encoder width must match the class embeddings")
        bias.setflags(write=False)
        object.__setattr__(self, "visual_bias", bias)
        object.__setattr__(self, "loss_trace", tuple(float(x) for x in self.loss_trace))

    @property
    def c(self) -> int:
        return self.class_emb.c

    @property
    def d_t(self) -> int:
        return self.class_emb.dim

    def shifted_features(self, images: Sequence[Raster]) -> np.ndarray:
        return self.encoder.encode_many(images) + self.visual_bias

    def logits_matrix(self, images: Sequence[Raster]) -> np.ndarray:
        return cosine_matrix(self.shifted_features(images), self.class_emb.matrix)

    def logits(self, img: Raster, view_index: int = 0) -> LogitVector:
        return LogitVector(self.logits_matrix([img])[0], view_index)

    def prototype_rows(self, images: Sequence[Raster]) -> np.ndarray:
        """Unit-normalised shifted features, usable as extra class rows."""
        feats = self.shifted_features(images)
        return feats / np.linalg.norm(feats, axis=1, keepdims=True)

    def with_classes(self, rows, class_names) -> "TeacherModel":
        """A new frozen teacher whose candidate set is exactly ``rows``."""
        return self._replace_emb(ClassEmbeddings.from_rows(rows, list(class_names)))

    def extend_classes(self, rows, class_names) -> "TeacherModel":
        """Append candidate rows; existing rows are kept bit-for-bit."""
        new = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        norms = np.linalg.norm(new, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateFeatureError("zero-norm class embedding row")
        new = new / norms
        return self._replace_emb(
            ClassEmbeddings(
                np.vstack([self.class_emb.matrix, new]),
                tuple(self.class_emb.class_names) + tuple(class_names),
            )
        )

    def _replace_emb(self, emb: ClassEmbeddings) -> "TeacherModel":
        return TeacherModel(self.encoder, emb, self.visual_bias, self.tau, self.seed, self.loss_trace)

    def fingerprint(self) -> bytes:
        return self.class_emb.matrix.tobytes() + self.visual_bias.tobytes()

    # Checkpoint -------------------------------------------------------

    def to_checkpoint(self) -> dict:
        enc = self.encoder
        return {
            "arrays": {
                "class_emb": self.class_emb.matrix,
                "visual_bias": self.visual_bias,
            },
            "metadata": {
                "c": self.c,
                "d_t": self.d_t,
                "tau": self.tau,
                "seed": self.seed,
                "class_names": list(self.class_emb.class_names),
                "encoder": {
                    "kind": enc.kind,
                    "out_dim": enc.out_dim,
                    "seed": enc.seed,
                    "image_size": list(enc.image_size) if enc.image_size else None,
                },
                "loss_trace": list(self.loss_trace),
            },
        }

    def save(self, path) -> None:
        serialization.write_json(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "TeacherModel":
        try:
            meta, arrays = doc["metadata"], doc["arrays"]
            enc_meta = meta["encoder"]
            encoder = Encoder(
                enc_meta["kind"],
                int(enc_meta["out_dim"]),
                int(enc_meta["seed"]),
                tuple(enc_meta["image_size"]) if enc_meta.get("image_size") else None,
            )
            emb = ClassEmbeddings(np.asarray(arrays["class_emb"], dtype=np.float64), tuple(meta["class_names"]))
            return cls(
                encoder,
                emb,
                np.asarray(arrays["visual_bias"], dtype=np.float64),
                float(meta["tau"]),
                int(meta["seed"]),
                tuple(meta.get("loss_trace", ())),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed teacher checkpoint: {exc}") from None

    @classmethod
    def load(cls, path) -> "TeacherModel":
        return cls.from_checkpoint(serialization.read_json(path))


def teacher_logits(t: TeacherModel, img: Raster) -> LogitVector:
    return t.logits(img)


def teacher_logits_batch(t: TeacherModel, members: Sequence[Raster]) -> List[LogitVector]:
    """Logits for every member of a view set, in member order."""
    m = t.logits_matrix(list(members))
    return [LogitVector(row, j) for j, row in enumerate(m)]


# ---------------------------------------------------------------------------
# Fitting


def ce_loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray, tau: float):
    """Mean cross-entropy of cosine logits and its gradients.

    ``W`` (c, d) holds class rows (normalised inside the cosine), ``b`` (d,)
    the visual bias and ``X`` (n, d) the frozen encoder features.
    Returns ``(loss, dW, db)``.
    """
    n = X.shape[0]
    z = X + b
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    wn = np.linalg.norm(W, axis=1, keepdims=True)
    zh, wh = z / zn, W / wn
    logits = zh @ wh.T
    logp = log_softmax_rows(logits, tau)
    loss = -float(np.mean(logp[np.arange(n), y]))

    g = softmax_rows(logits, tau)
    g[np.arange(n), y] -= 1.0
    g /= tau * n
    d_wh = g.T @ zh
    d_zh = g @ wh
    dW = (d_wh - wh * np.sum(wh * d_wh, axis=1, keepdims=True)) / wn
    dz = (d_zh - zh * np.sum(zh * d_zh, axis=1, keepdims=True)) / zn
    return loss, dW, dz.sum(axis=0)


def init_teacher_params(X: np.ndarray, y: np.ndarray, c: int, rng: np.random.Generator):
    d = X.shape[1]
    means = np.stack([X[y == k].mean(axis=0) for k in range(c)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    W = means + rng.normal(0.0, INIT_SIGMA, size=(c, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    b = rng.normal(0.0, INIT_SIGMA, size=d)
    return W, b


def fit_teacher(
    train: Sequence[Tuple[Raster, int]],
    cfg: TeacherConfig,
    encoder: Encoder,
    class_names: Optional[Sequence[str]] = None,
    n_classes: Optional[int] = None,
) -> TeacherModel:
    """Fit class rows and visual bias by mini-batch gradient descent.

    ``loss_trace`` on the returned model holds the full-data loss at
    initialisation and after each epoch.
    """
    if not train:
        raise DataError("empty teacher training set")
    labels = np.array([int(lbl) for _, lbl in train])
    c = n_classes if n_classes is not None else int(labels.max()) + 1
    if class_names is not None:
        c = len(class_names)
    if c < 2:
        raise ParameterError("a teacher needs at least two classes")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c})")
    missing = sorted(set(range(c)) - set(labels.tolist()))
    if missing:
        raise DataError(f"no training example for classes {missing}")

    X = encoder.encode_many([img for img, _ in train])
    rng = np.random.default_rng(cfg.seed)
    W, b = init_teacher_params(X, labels, c, rng)
    trace = [ce_loss_and_grad(W, b, X, labels, cfg.tau)[0]]
    n = len(train)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        if cfg.lr > 0:
            for start in range(0, n, cfg.batch):
                idx = order[start : start + cfg.batch]
                _, dW, db = ce_loss_and_grad(W, b, X[idx], labels[idx], cfg.tau)
                W = W - cfg.lr * dW
                W /= np.linalg.norm(W, axis=1, keepdims=True)
                b = b - cfg.lr * db
        trace.append(ce_loss_and_grad(W, b, X, labels, cfg.tau)[0])

    names = list(class_names) if class_names is not None else [f"class{k}" for k in range(c)]
    return TeacherModel(encoder, ClassEmbeddings(W, tuple(names)), b, cfg.tau, cfg.seed, tuple(trace))
