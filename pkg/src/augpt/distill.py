"""Prompt distillation of a frozen teacher into a student scorer.

The student modulates its frozen encoder features with a learnable
per-dimension scale and bias (the feature-space stand-in for visual prompt
tokens), maps them into the teacher's embedding width with a small ReLU MLP,
and scores them by cosine similarity against the teacher's class rows.
Training minimises KL(teacher || student) averaged over every gate-accepted
view in a batch, with hand-derived gradients and plain SGD.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import gate as gating
from . import serialization
from .augment import AugmentConfig, build_view_set
from .errors import AlignmentError, DataError, NumericalFailure, ParameterError
from .imageops import Raster
from .scoring import (
    Encoder,
    LogitVector,
    as_logit_matrix,
    cosine_matrix,
    log_softmax_rows,
    softmax_rows,
)
from .teacher import TeacherModel

INIT_SIGMA = 0.02


@dataclass
class DistillConfig:
    epochs: int = 20
    lr: float = 0.005
    batch: int = 16
    tau: float = 1.0
    seed: int = 0
    gate_enabled: bool = True
    gate_topk: int = 1
    proj_layers: int = 2
    student_dim: int = 16
    student_encoder: str = "random-projection"
    student_encoder_seed: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 0 or self.batch < 1:
            raise ParameterError("epochs >= 0 and batch >= 1 required")
        if self.lr < 0:
            raise ParameterError("lr must be non-negative")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if self.proj_layers not in (1, 2, 3):
            raise ParameterError("proj_layers must be 1, 2 or 3")
        if self.gate_topk < 1:
            raise ParameterError("gate_topk must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


@dataclass(frozen=True, eq=False)
class StudentModel:
    encoder: Encoder
    prompt_bias: np.ndarray
    prompt_scale: np.ndarray
    proj_weights: Tuple[np.ndarray, ...]
    proj_biases: Tuple[np.ndarray, ...]
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        def frozen(a):
            a = np.array(a, dtype=np.float64)
            a.setflags(write=False)
            return a

        object.__setattr__(self, "prompt_bias", frozen(self.prompt_bias).reshape(-1))
        object.__setattr__(self, "prompt_scale", frozen(self.prompt_scale).reshape(-1))
        object.__setattr__(self, "proj_weights", tuple(frozen(w) for w in self.proj_weights))
        object.__setattr__(self, "proj_biases", tuple(frozen(b).reshape(-1) for b in self.proj_biases))
        d_s = self.encoder.out_dim
        if self.prompt_bias.shape != (d_s,) or self.prompt_scale.shape != (d_s,):
            raise ParameterError("prompt parameters must match the encoder width")
        if not self.proj_weights or len(self.proj_weights) != len(self.proj_biases):
            raise ParameterError("projection needs matching weight and bias lists")
        width = d_s
        for w, b in zip(self.proj_weights, self.proj_biases):
            if w.ndim != 2 or w.shape[1] != width or b.shape != (w.shape[0],):
                raise ParameterError("projection layer shapes do not chain")
            width = w.shape[0]

    @property
    def d_s(self) -> int:
        return self.encoder.out_dim

    @property
    def d_t(self) -> int:
        return self.proj_weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.proj_weights)

    def params(self) -> List[np.ndarray]:
        """Flat parameter list in a fixed order: bias, scale, W1, b1, ..."""
        out = [self.prompt_bias, self.prompt_scale]
        for w, b in zip(self.proj_weights, self.proj_biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "StudentModel":
        pb, ps, *layers = params
        return StudentModel(self.encoder, pb, ps, tuple(layers[0::2]), tuple(layers[1::2]), self.tau, self.seed)

    def project(self, feats: np.ndarray) -> np.ndarray:
        return forward(self.params(), feats)[0]

    def logits_matrix(self, images: Sequence[Raster], t: TeacherModel) -> np.ndarray:
        return cosine_matrix(self.project(self.encoder.encode_many(images)), t.class_emb.matrix)

    def fingerprint(self) -> bytes:
        return b"".join(p.tobytes() for p in self.params())

    def to_checkpoint(self) -> dict:
        enc = self.encoder
        return {
            "arrays": {
                "prompt_bias": self.prompt_bias,
                "prompt_scale": self.prompt_scale,
                "proj_weights": list(self.proj_weights),
                "proj_biases": list(self.proj_biases),
            },
            "metadata": {
                "d_s": self.d_s,
                "d_t": self.d_t,
                "L": self.n_layers,
                "tau": self.tau,
                "seed": self.seed,
                "encoder": {
                    "kind": enc.kind,
                    "out_dim": enc.out_dim,
                    "seed": enc.seed,
                    "image_size": list(enc.image_size) if enc.image_size else None,
                },
            },
        }

    def save(self, path) -> None:
        serialization.write_json(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "StudentModel":
        try:
            meta, arrays = doc["metadata"], doc["arrays"]
            e = meta["encoder"]
            enc = Encoder(e["kind"], int(e["out_dim"]), int(e["seed"]), tuple(e["image_size"]) if e.get("image_size") else None)
            return cls(
                enc,
                arrays["prompt_bias"],
                arrays["prompt_scale"],
                tuple(np.asarray(w, dtype=np.float64) for w in arrays["proj_weights"]),
                tuple(np.asarray(b, dtype=np.float64) for b in arrays["proj_biases"]),
                float(meta["tau"]),
                int(meta["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed student checkpoint: {exc}") from None

    @classmethod
    def load(cls, path) -> "StudentModel":
        return cls.from_checkpoint(serialization.read_json(path))


def make_student_encoder(cfg: DistillConfig, image_size) -> Encoder:
    return Encoder(cfg.student_encoder, cfg.student_dim, cfg.student_encoder_seed, tuple(image_size))


def init_student(encoder: Encoder, d_t: int, n_layers: int = 2, tau: float = 1.0, seed: int = 0) -> StudentModel:
    """Gaussian N(0, 0.02^2) weights, zero layer biases, unit prompt scale."""
    rng = np.random.default_rng([seed, 0])
    d_s = encoder.out_dim
    widths = [d_s] + [d_t] * n_layers
    weights = tuple(rng.normal(0.0, INIT_SIGMA, size=(widths[i + 1], widths[i])) for i in range(n_layers))
    biases = tuple(np.zeros(widths[i + 1]) for i in range(n_layers))
    prompt_bias = rng.normal(0.0, INIT_SIGMA, size=d_s)
    return StudentModel(encoder, prompt_bias, np.ones(d_s), weights, biases, tau, seed)


# ---------------------------------------------------------------------------
# Forward / backward


def forward(params: Sequence[np.ndarray], X: np.ndarray):
    """Prompt modulation followed by the MLP; returns output and a cache."""
    pb, ps, *layers = params
    a = X * ps + pb
    acts, pre = [a], []
    n_layers = len(layers) // 2
    for i in range(n_layers):
        h = a @ layers[2 * i].T + layers[2 * i + 1]
        pre.append(h)
        a = np.maximum(h, 0.0) if i < n_layers - 1 else h
        acts.append(a)
    return a, (acts, pre)


def kl_rows(teacher: np.ndarray, student: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise KL(softmax(teacher/tau) || softmax(student/tau))."""
    logp = log_softmax_rows(teacher, tau)
    logq = log_softmax_rows(student, tau)
    p = np.exp(logp)
    terms = np.where(p > 0, p * (logp - logq), 0.0)
    return terms.sum(axis=-1)


def kl_loss(teacher_logits, student_logits, tau: float = 1.0) -> float:
    """Mean KL divergence between aligned teacher and student logit lists."""
    T = as_logit_matrix(teacher_logits)
    S = as_logit_matrix(student_logits)
    if T.shape[0] == 0:
        raise AlignmentError("need at least one logit pair")
    if T.shape != S.shape:
        raise AlignmentError(f"teacher logits {T.shape} and student logits {S.shape} differ")
    return float(np.mean(kl_rows(T, S, tau)))


def loss_and_grads(params: Sequence[np.ndarray], X: np.ndarray, T: np.ndarray, E: np.ndarray, tau: float):
    """Averaged KL loss over rows of ``X`` and gradients for every parameter.

    ``X`` (m, d_s) are frozen student features, ``T`` (m, c) the aligned
    teacher logits and ``E`` (c, d_t) the teacher's unit class rows.
    """
    m = X.shape[0]
    out, (acts, pre) = forward(params, X)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalFailure("projected student feature has zero norm")
    oh = out / norms
    logits = oh @ E.T
    loss = float(np.mean(kl_rows(T, logits, tau)))

    g = (softmax_rows(logits, tau) - softmax_rows(T, tau)) / (tau * m)
    d_oh = g @ E
    d_h = (d_oh - oh * np.sum(oh * d_oh, axis=1, keepdims=True)) / norms

    pb, ps, *layers = params
    n_layers = len(layers) // 2
    grads_layers = [None] * (2 * n_layers)
    for i in reversed(range(n_layers)):
        grads_layers[2 * i] = d_h.T @ acts[i]
        grads_layers[2 * i + 1] = d_h.sum(axis=0)
        d_a = d_h @ layers[2 * i]
        if i > 0:
            d_h = d_a * (pre[i - 1] > 0)
    d_f = d_a
    return loss, [d_f.sum(axis=0), (d_f * X).sum(axis=0), *grads_layers], logits


def _sgd(params, grads, lr):
    return [p - lr * g for p, g in zip(params, grads)]


def _check_finite(loss, grads, context):
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        diag = dict(context)
        diag["loss"] = loss
        diag["grad_norms"] = [float(np.linalg.norm(g)) for g in grads]
        raise NumericalFailure("non-finite loss or gradient during distillation", diag)


def student_logits(s: StudentModel, t: TeacherModel, img: Raster, view_index: int = 0) -> LogitVector:
    return LogitVector(s.logits_matrix([img], t)[0], view_index)


def step_arrays(s: StudentModel, X: np.ndarray, T: np.ndarray, t: TeacherModel, lr: float, tau: float):
    """One SGD step on precomputed features/teacher logits."""
    params = s.params()
    loss, grads, _ = loss_and_grads(params, X, T, t.class_emb.matrix, tau)
    _check_finite(loss, grads, {"rows": int(X.shape[0])})
    if lr == 0:
        return s, loss
    return s.with_params(_sgd(params, grads, lr)), loss


def distill_step(s: StudentModel, batch, t: TeacherModel, cfg: DistillConfig):
    """One gradient step over all accepted views of a batch of view sets.

    ``batch`` is a sequence of ``(GateResult, ViewSet)`` pairs.  Returns the
    updated student and the loss measured before the update.
    """
    feats, targets = [], []
    for result, vs in batch:
        if not result.accepted_indices:
            raise DataError("gate result with no accepted views")
        members = vs.members
        if len(members) != result.n_members:
            raise AlignmentError("gate result and view set disagree on member count")
        feats.append(s.encoder.encode_many([members[j] for j in result.accepted_indices]))
        targets.append(as_logit_matrix(result.accepted_logits))
    if not feats:
        raise DataError("empty batch")
    return step_arrays(s, np.vstack(feats), np.vstack(targets), t, cfg.lr, cfg.tau)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    mean_kl: float
    acceptance_rate: float
    raw_discard_rate: float
    corrupted_acceptance_rate: Optional[float] = None

    def to_dict(self):
        d = asdict(self)
        if d["corrupted_acceptance_rate"] is None:
            del d["corrupted_acceptance_rate"]
        return d


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    # Flat batching: every accepted view in the batch weighs equally.
    averaging: str = "flat-per-view"

    def header(self) -> dict:
        return {"averaging": self.averaging}

    def records(self) -> List[dict]:
        return [e.to_dict() for e in self.epochs]

    def save(self, path) -> None:
        serialization.write_jsonl(path, [{"header": self.header()}] + self.records())


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Image visiting order for one epoch."""
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def _unlabeled(dataset) -> List[Tuple[str, Raster]]:
    out = []
    for item in dataset:
        if isinstance(item, dict):
            if "label" in item:
                raise DataError("distillation data must not carry labels")
            item = (item["image_key"], item["raster"])
        if len(item) != 2:
            raise DataError("distillation data items must be (image_key, raster) pairs")
        key, img = item
        out.append((str(key), img))
    return out


@dataclass
class _Prepared:
    gate: gating.GateResult
    feats: np.ndarray
    targets: np.ndarray
    corrupted: List[bool]


def _prepare(key, img, s, t, cfg, epoch) -> _Prepared:
    vs = build_view_set(img, cfg.augment, key, epoch, cfg.seed)
    members = vs.members
    logits = t.logits_matrix(members)
    vectors = [LogitVector(row, j) for j, row in enumerate(logits)]
    if not cfg.gate_enabled:
        result = gating.pass_through(vs, vectors)
    elif cfg.gate_topk > 1:
        result = gating.filter_views_topk(vs, vectors, cfg.gate_topk)
    else:
        result = gating.filter_views(vs, vectors)
    acc = result.accepted_indices
    feats = s.encoder.encode_many([members[j] for j in acc])
    corrupted = [False] + list(vs.corrupted)
    return _Prepared(result, feats, logits[acc], corrupted)


def run_distillation(
    dataset,
    t: TeacherModel,
    cfg: DistillConfig,
    student: Optional[StudentModel] = None,
    threads: int = 1,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
):
    """Train a student on unlabeled images; returns ``(student, log)``.

    Per epoch and batch: fresh view sets, teacher scoring, gating (or pass
    through when the gate is off), then one SGD step.  Work inside a batch
    may be spread over ``threads`` workers; results are gathered in image
    order so the outcome does not depend on the worker count.
    """
    items = _unlabeled(dataset)
    if not items:
        raise DataError("empty distillation dataset")
    if student is None:
        image_size = (items[0][1].width, items[0][1].height)
        student = init_student(make_student_encoder(cfg, image_size), t.d_t, cfg.proj_layers, cfg.tau, cfg.seed)
    if student.d_t != t.d_t:
        raise ParameterError("student projection width must equal the teacher embedding width")

    log = TrainingLog()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = epoch_order(len(items), cfg.seed, epoch)
            losses, n_acc, n_members, n_raw_drop = [], 0, 0, 0
            n_bad, n_bad_acc = 0, 0
            for start in range(0, len(items), cfg.batch):
                chunk = [items[i] for i in order[start : start + cfg.batch]]
                s_now = student
                job = lambda kv: _prepare(kv[0], kv[1], s_now, t, cfg, epoch)
                prepared = list(pool.map(job, chunk)) if pool else [job(kv) for kv in chunk]
                X = np.vstack([p.feats for p in prepared])
                T = np.vstack([p.targets for p in prepared])
                student, loss = step_arrays(student, X, T, t, cfg.lr, cfg.tau)
                losses.append(loss)
                log.step_losses.append(loss)
                for p in prepared:
                    n_acc += len(p.gate.accepted_indices)
                    n_members += p.gate.n_members
                    n_raw_drop += int(p.gate.raw_discarded)
                    n_bad += sum(p.corrupted)
                    n_bad_acc += sum(p.corrupted[j] for j in p.gate.accepted_indices)
            rec = EpochRecord(
                epoch=epoch,
                mean_kl=float(np.mean(losses)),
                acceptance_rate=n_acc / n_members,
                raw_discard_rate=n_raw_drop / len(items),
                corrupted_acceptance_rate=(n_bad_acc / n_bad) if n_bad else None,
            )
            log.epochs.append(rec)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return student, log
