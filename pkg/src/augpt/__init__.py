"""Stochastic view augmentation, consensus gating over frozen-teacher logits,
and KL prompt distillation into a student scorer, at desk scale."""

from .augment import AugmentConfig, ViewSet, build_view_set
from .distill import DistillConfig, StudentModel, kl_loss, run_distillation, student_logits
from .gate import GateResult, filter_views, filter_views_topk
from .harness import (
    EvalReport,
    ExperimentConfig,
    SplitPlan,
    SyntheticDatasetSpec,
    base_to_new_pipeline,
    cross_dataset_pipeline,
    harmonic_mean,
    run_ablation,
)
from .imageops import POLICIES, Raster, apply_policy
from .scoring import ClassEmbeddings, Encoder, LogitVector, cosine_logits, softmax_prob
from .teacher import TeacherConfig, TeacherModel, fit_teacher, teacher_logits

__version__ = "0.1.0"
