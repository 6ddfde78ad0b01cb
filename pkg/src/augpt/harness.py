"""Desk-scale experiments: synthetic data, splits, evaluation and sweeps."""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import serialization
from .augment import AugmentConfig
from .distill import DistillConfig, StudentModel, TrainingLog, run_distillation
from .errors import DataError, ParameterError
from .imageops import Raster, save_ppm
from .scoring import Encoder
from .teacher import TeacherConfig, TeacherModel, fit_teacher


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticDatasetSpec:
    c: int = 10
    per_class: int = 20
    image_size: Tuple[int, int] = (32, 32)
    class_generator_seed: int = 0
    noise_level: float = 24.0
    corruption_rate: float = 0.0
    # Max integer shift (pixels) of the class motif inside each image.
    jitter: int = 3
    # Side of the colour grid each motif is upsampled from.
    motif_cells: int = 4
    train_fraction: float = 0.5

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.c < 4:
            raise ParameterError("need c >= 4 so both halves of the split hold two classes")
        if self.per_class < 2:
            raise ParameterError("need at least two images per class")
        w, h = self.image_size
        if w < 8 or h < 8:
            raise ParameterError("images must be at least 8x8")
        if self.noise_level < 0 or self.jitter < 0:
            raise ParameterError("noise_level and jitter must be non-negative")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ParameterError("corruption_rate must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ParameterError("train_fraction must lie in (0, 1)")
        if not 1 <= self.motif_cells <= min(w, h):
            raise ParameterError("motif_cells out of range")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass(frozen=True)
class Sample:
    image_key: str
    raster: Raster
    label: int
    split: str


def motif_images(spec: SyntheticDatasetSpec) -> List[Raster]:
    """One clean, noise-free prototype image per class."""
    rng = np.random.default_rng([spec.class_generator_seed, 0])
    w, h = spec.image_size
    k = spec.motif_cells
    motifs = []
    for _ in range(spec.c):
        grid = Raster(rng.integers(0, 256, size=(k, k, 3)))
        motifs.append(_resize(grid, w, h))
    return motifs


def _resize(img: Raster, width: int, height: int) -> Raster:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sx = np.clip((xs + 0.5) * (img.width / width) - 0.5, 0, img.width - 1)
    sy = np.clip((ys + 0.5) * (img.height / height) - 0.5, 0, img.height - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    x1, y1 = np.minimum(x0 + 1, img.width - 1), np.minimum(y0 + 1, img.height - 1)
    wx, wy = (sx - x0)[..., None], (sy - y0)[..., None]
    p = img.pixels.astype(np.float64)
    top = p[y0, x0] * (1 - wx) + p[y0, x1] * wx
    bot = p[y1, x0] * (1 - wx) + p[y1, x1] * wx
    return Raster(np.clip(np.rint(top * (1 - wy) + bot * wy), 0, 255).astype(np.uint8))


def _shift(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return arr[ys][:, xs]


def synthesize(spec: SyntheticDatasetSpec) -> List[Sample]:
    """Deterministic labelled samples: shifted class motif plus Gaussian noise."""
    motifs = motif_images(spec)
    n_train = max(1, min(spec.per_class - 1, int(round(spec.per_class * spec.train_fraction))))
    samples = []
    for label, motif in enumerate(motifs):
        rng = np.random.default_rng([spec.class_generator_seed, 1, label])
        for i in range(spec.per_class):
            dx, dy = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            arr = _shift(motif.pixels.astype(np.float64), int(dx), int(dy))
            arr = arr + rng.normal(0.0, spec.noise_level, size=arr.shape)
            img = Raster(np.clip(np.rint(arr), 0, 255).astype(np.uint8))
            split = "train" if i < n_train else "test"
            samples.append(Sample(f"c{label:03d}_{i:04d}", img, label, split))
    return samples


def nearest_motif(img: Raster, motifs: Sequence[Raster]) -> int:
    x = img.pixels.astype(np.float64)
    dists = [np.sum((x - m.pixels.astype(np.float64)) ** 2) for m in motifs]
    return int(np.argmin(dists))


def generate_dataset(spec: SyntheticDatasetSpec, out_dir) -> List[dict]:
    """Write PPM files plus ``manifest.jsonl``; returns the manifest rows."""
    out_dir = os.fspath(out_dir)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    for s in synthesize(spec):
        rel = os.path.join("images", s.image_key + ".ppm")
        save_ppm(s.raster, os.path.join(out_dir, rel))
        rows.append({"image_key": s.image_key, "path": rel, "label": s.label, "split": s.split})
    serialization.write_jsonl(os.path.join(out_dir, "manifest.jsonl"), rows)
    return rows


# ---------------------------------------------------------------------------
# Splits and metrics


@dataclass
class SplitPlan:
    base_classes: List[int]
    new_classes: List[int]
    shots: Union[str, int] = "full"

    def __post_init__(self):
        self.base_classes = sorted(int(c) for c in self.base_classes)
        self.new_classes = sorted(int(c) for c in self.new_classes)
        if set(self.base_classes) & set(self.new_classes):
            raise ParameterError("base and new classes overlap")
        if not self.base_classes or not self.new_classes:
            raise ParameterError("both base and new class lists must be non-empty")
        if self.shots != "full":
            try:
                self.shots = int(self.shots)
            except (TypeError, ValueError):
                raise ParameterError(f"shots must be 'full' or an integer, got {self.shots!r}") from None
            if self.shots < 1:
                raise ParameterError("shots must be positive")

    @classmethod
    def even(cls, c: int, shots: Union[str, int] = "full") -> "SplitPlan":
        half = c // 2
        return cls(list(range(half)), list(range(half, c)), shots)

    @property
    def all_classes(self) -> List[int]:
        return sorted(self.base_classes + self.new_classes)

    def to_dict(self):
        return asdict(self)


def harmonic_mean(base: float, new: float) -> float:
    if base + new <= 0:
        return 0.0
    return 2.0 * base * new / (base + new)


@dataclass
class EvalReport:
    base_acc: float
    new_acc: float
    hm: float
    per_class: Dict[int, float]
    config_digest: str
    extras: dict = field(default_factory=dict)

    @classmethod
    def build(cls, base_acc, new_acc, per_class, config_digest, extras=None):
        return cls(base_acc, new_acc, harmonic_mean(base_acc, new_acc), dict(per_class), config_digest, extras or {})

    def to_dict(self):
        return {
            "base_acc": self.base_acc,
            "new_acc": self.new_acc,
            "hm": self.hm,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "config_digest": self.config_digest,
            "extras": self.extras,
        }


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(serialization.dump_line(cfg).encode("utf-8")).hexdigest()[:16]


def _accuracy(logits: np.ndarray, labels: Sequence[int], rows: Sequence[int], label_to_row: Dict[int, int]):
    """Top-1 accuracy restricted to the candidate ``rows``."""
    rows = list(rows)
    pred = np.asarray(rows)[np.argmax(logits[:, rows], axis=1)]
    truth = np.array([label_to_row[l] for l in labels])
    return pred == truth


def evaluate(
    s: Optional[StudentModel],
    t: TeacherModel,
    test: Sequence[Sample],
    split: SplitPlan,
    label_to_row: Optional[Dict[int, int]] = None,
    digest: str = "",
) -> EvalReport:
    """Base and new accuracy (percent) plus their harmonic mean.

    Base-class test images compete only among base candidates and new-class
    images only among new candidates.  With ``s=None`` the teacher itself is
    scored.
    """
    if label_to_row is None:
        label_to_row = {k: k for k in split.all_classes}
    known = set(split.all_classes)
    for smp in test:
        if smp.label not in known:
            raise DataError(f"test image {smp.image_key} has label {smp.label} outside the split")
    per_class, parts = {}, {}
    for name, classes in (("base", split.base_classes), ("new", split.new_classes)):
        subset = [smp for smp in test if smp.label in set(classes)]
        if not subset:
            parts[name] = 0.0
            continue
        images = [smp.raster for smp in subset]
        logits = t.logits_matrix(images) if s is None else s.logits_matrix(images, t)
        labels = [smp.label for smp in subset]
        hits = _accuracy(logits, labels, [label_to_row[k] for k in classes], label_to_row)
        parts[name] = 100.0 * float(hits.mean())
        for k in classes:
            mask = np.array([l == k for l in labels])
            if mask.any():
                per_class[k] = 100.0 * float(hits[mask].mean())
    return EvalReport.build(parts["base"], parts["new"], per_class, digest)


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class ExperimentConfig:
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    target: Optional[SyntheticDatasetSpec] = None
    shots: Union[str, int] = "full"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_dim: int = 32
    teacher_encoder: str = "random-projection"
    teacher_encoder_seed: int = 0
    seed: int = 0
    # Explicit base/new classes; empty means an even halving of data.c.
    base_classes: List[int] = field(default_factory=list)
    new_classes: List[int] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        data = SyntheticDatasetSpec(**d.pop("data", {}))
        target = d.pop("target", None)
        teacher = TeacherConfig(**d.pop("teacher", {}))
        distill = dict(d.pop("distill", {}))
        distill["augment"] = AugmentConfig(**distill.get("augment", {}))
        return cls(
            data=data,
            target=SyntheticDatasetSpec(**target) if target else None,
            teacher=teacher,
            distill=DistillConfig(**distill),
            **d,
        )

    def split_plan(self, c: Optional[int] = None) -> SplitPlan:
        if self.base_classes or self.new_classes:
            return SplitPlan(self.base_classes, self.new_classes, self.shots)
        return SplitPlan.even(self.data.c if c is None else c, self.shots)

    def resolved(self) -> "ExperimentConfig":
        """Copy with the global seed pushed into every seeded component."""
        cfg = copy.deepcopy(self)
        cfg.teacher.seed = cfg.seed
        cfg.distill.seed = cfg.seed
        # Stress-mode corruption is a property of the data recipe.
        cfg.distill.augment.corruption_rate = cfg.data.corruption_rate
        return cfg

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "target": self.target.to_dict() if self.target else None,
            "shots": self.shots,
            "teacher": self.teacher.to_dict(),
            "distill": self.distill.to_dict(),
            "teacher_dim": self.teacher_dim,
            "teacher_encoder": self.teacher_encoder,
            "teacher_encoder_seed": self.teacher_encoder_seed,
            "seed": self.seed,
            "base_classes": list(self.base_classes),
            "new_classes": list(self.new_classes),
        }

    def digest(self) -> str:
        return config_digest(self.resolved().to_dict())


@dataclass
class RunResult:
    report: EvalReport
    teacher: TeacherModel
    student: StudentModel
    log: TrainingLog
    teacher_report: EvalReport
    config: ExperimentConfig


def _teacher_encoder(cfg: ExperimentConfig, image_size) -> Encoder:
    return Encoder(cfg.teacher_encoder, cfg.teacher_dim, cfg.teacher_encoder_seed, tuple(image_size))


def _few_shot(samples: Sequence[Sample], classes: Sequence[int], k, seed: int, salt: int) -> List[Sample]:
    """Up to ``k`` samples per class (all when ``k == 'full'``), seeded."""
    out = []
    for cls_ in classes:
        pool = [s for s in samples if s.label == cls_]
        if k != "full" and k < len(pool):
            idx = np.sort(np.random.default_rng([seed, salt, cls_]).choice(len(pool), size=k, replace=False))
            pool = [pool[i] for i in idx]
        out.extend(pool)
    return out


def fit_split_teacher(
    samples: Sequence[Sample],
    classes: Sequence[int],
    cfg: ExperimentConfig,
    image_size,
) -> TeacherModel:
    train = [s for s in samples if s.split == "train"]
    chosen = _few_shot(train, classes, cfg.teacher.shots, cfg.seed, 2)
    position = {k: i for i, k in enumerate(classes)}
    pairs = [(s.raster, position[s.label]) for s in chosen]
    return fit_teacher(pairs, cfg.teacher, _teacher_encoder(cfg, image_size), [f"class{k}" for k in classes])


def _distill_and_eval(teacher, label_to_row, samples, split, cfg, threads, digest, on_epoch=None):
    train = [s for s in samples if s.split == "train"]
    in_split = set(split.all_classes)
    test = [s for s in samples if s.split == "test" and s.label in in_split]
    # The sampler may look at labels; the trainer only sees (key, raster).
    chosen = _few_shot(train, split.all_classes, split.shots, cfg.seed, 3)
    unlabeled = [(s.image_key, s.raster) for s in chosen]
    student, log = run_distillation(unlabeled, teacher, cfg.distill, threads=threads, on_epoch=on_epoch)
    report = evaluate(student, teacher, test, split, label_to_row, digest)
    teacher_report = evaluate(None, teacher, test, split, label_to_row, digest)
    report.extras = {
        "teacher_base_acc": teacher_report.base_acc,
        "teacher_new_acc": teacher_report.new_acc,
        "teacher_hm": teacher_report.hm,
        "final_acceptance_rate": log.epochs[-1].acceptance_rate if log.epochs else None,
        "final_mean_kl": log.epochs[-1].mean_kl if log.epochs else None,
    }
    return student, log, report, teacher_report


def build_split_teacher(cfg: ExperimentConfig, split: Optional[SplitPlan] = None):
    """Teacher fit on the base classes, extended with motif rows for the new ones.

    Returns ``(teacher, samples, split, label_to_row)``; ``cfg`` must be resolved.
    """
    spec = cfg.data
    split = split or cfg.split_plan()
    samples = synthesize(spec)
    teacher = fit_split_teacher(samples, split.base_classes, cfg, spec.image_size)
    motifs = motif_images(spec)
    # New-class rows stand in for zero-shot text embeddings.
    teacher = teacher.extend_classes(
        teacher.prototype_rows([motifs[k] for k in split.new_classes]),
        [f"class{k}" for k in split.new_classes],
    )
    label_to_row = {k: i for i, k in enumerate(split.base_classes + split.new_classes)}
    return teacher, samples, split, label_to_row


def base_to_new_pipeline(cfg: ExperimentConfig, split: Optional[SplitPlan] = None, threads: int = 1, on_epoch=None) -> RunResult:
    cfg = cfg.resolved()
    teacher, samples, split, label_to_row = build_split_teacher(cfg, split)
    digest = config_digest(cfg.to_dict())
    student, log, report, teacher_report = _distill_and_eval(
        teacher, label_to_row, samples, split, cfg, threads, digest, on_epoch
    )
    return RunResult(report, teacher, student, log, teacher_report, cfg)


def run_base_to_new(spec=None, split=None, teacher_cfg=None, distill_cfg=None, seed: int = 0, threads: int = 1) -> EvalReport:
    cfg = ExperimentConfig(
        data=spec or SyntheticDatasetSpec(),
        teacher=teacher_cfg or TeacherConfig(),
        distill=distill_cfg or DistillConfig(),
        shots=split.shots if split else "full",
        seed=seed,
    )
    return base_to_new_pipeline(cfg, split, threads).report


def cross_dataset_pipeline(cfg: ExperimentConfig, threads: int = 1, on_epoch=None) -> RunResult:
    """Teacher fit on every source class, student distilled on the target.

    The teacher's candidate set is rebuilt from the target's class motifs;
    evaluation uses an even base/new split of the target classes.
    """
    cfg = cfg.resolved()
    source = cfg.data
    target = cfg.target or cfg.data
    if tuple(source.image_size) != tuple(target.image_size):
        raise ParameterError("source and target must share an image size")
    src_samples = synthesize(source)
    teacher = fit_split_teacher(src_samples, list(range(source.c)), cfg, source.image_size)
    tgt_motifs = motif_images(target)
    teacher = teacher.with_classes(teacher.prototype_rows(tgt_motifs), [f"target{k}" for k in range(target.c)])
    split = cfg.split_plan(target.c)
    label_to_row = {k: k for k in range(target.c)}
    digest = config_digest(cfg.to_dict())
    tgt_samples = synthesize(target)
    student, log, report, teacher_report = _distill_and_eval(
        teacher, label_to_row, tgt_samples, split, cfg, threads, digest, on_epoch
    )
    return RunResult(report, teacher, student, log, teacher_report, cfg)


def run_cross_dataset(source_spec, target_spec, teacher_cfg=None, distill_cfg=None, seed: int = 0, threads: int = 1) -> EvalReport:
    cfg = ExperimentConfig(
        data=source_spec,
        target=target_spec,
        teacher=teacher_cfg or TeacherConfig(),
        distill=distill_cfg or DistillConfig(),
        seed=seed,
    )
    return cross_dataset_pipeline(cfg, threads).report


SWEEPS = ("n_views", "steps", "topk", "proj_layers", "strategy")


def apply_sweep(cfg: ExperimentConfig, sweep: str, value) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    aug = cfg.distill.augment
    if sweep == "n_views":
        aug.n_views = int(value)
    elif sweep == "steps":
        aug.steps = int(value)
    elif sweep == "topk":
        cfg.distill.gate_topk = int(value)
    elif sweep == "proj_layers":
        cfg.distill.proj_layers = int(value)
    elif sweep == "strategy":
        aug.strategy = str(value)
        if value == "randaugment-fixed":
            aug.amplitude_mode = "fixed"
            aug.fixed_a = 9.0 if aug.fixed_a is None else aug.fixed_a
        else:
            aug.amplitude_mode, aug.fixed_a = "dynamic", None
    else:
        raise ParameterError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")
    # Re-run validation on the modified configs.
    cfg.distill.augment = type(aug)(**aug.to_dict())
    cfg.distill = type(cfg.distill)(**{**cfg.distill.to_dict(), "augment": cfg.distill.augment})
    return cfg


def run_ablation(sweep: str, grid: Sequence, base_cfg: ExperimentConfig, threads: int = 1):
    """One report per grid value, all other settings held fixed."""
    if sweep not in SWEEPS:
        raise ParameterError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")
    if not grid:
        raise ParameterError("ablation grid is empty")
    rows = []
    for value in grid:
        result = base_to_new_pipeline(apply_sweep(base_cfg, sweep, value), threads=threads)
        rows.append((value, result.report))
    return rows


def ablation_csv(rows) -> str:
    lines = ["sweep_value,base,new,hm"]
    for value, rep in rows:
        lines.append(f"{value},{rep.base_acc:.17g},{rep.new_acc:.17g},{rep.hm:.17g}")
    return "\n".join(lines) + "\n"
