"""tkgd: teacher-student distillation for temporal knowledge graph link prediction.

The package trains a large scoring model (the teacher) on timestamped facts,
then compresses it into a much smaller student via soft-target distillation,
optionally sharpened by an external language-model judge that rescores the
teacher's top candidates.  Everything runs on plain numpy with hand-written
gradients, so training is deterministic given a seed and a thread cap of one.
"""

__version__ = "0.1.0"

from .graph import (
    CandidateSet,
    Dataset,
    DataError,
    LoadSchema,
    Quadruple,
    Vocabulary,
    build_candidates,
    filter_candidates,
    generate_synthetic,
    load_quadruples,
    sample_negatives,
    save_dataset,
)
from .numerics import ParamTensor, adagrad_step, finite_diff_check, softmax_with_temperature
from .models import init_params, score_candidates, score_quadruple, ta_tokenize
from .evaluate import RankingReport, brute_force_oracle, evaluate, rank_of
from .distill import (
    DistillConfig,
    StudentState,
    bkd_loss,
    distill_run,
    fitnet_hint_loss,
    huber_alignment_loss,
    kd_soft_loss,
    rkd_loss,
    supervised_loss,
    total_loss,
)

__all__ = [
    "CandidateSet",
    "Dataset",
    "DataError",
    "DistillConfig",
    "LoadSchema",
    "ParamTensor",
    "Quadruple",
    "RankingReport",
    "StudentState",
    "Vocabulary",
    "adagrad_step",
    "bkd_loss",
    "brute_force_oracle",
    "build_candidates",
    "distill_run",
    "evaluate",
    "filter_candidates",
    "finite_diff_check",
    "fitnet_hint_loss",
    "generate_synthetic",
    "huber_alignment_loss",
    "init_params",
    "kd_soft_loss",
    "load_quadruples",
    "rank_of",
    "rkd_loss",
    "sample_negatives",
    "save_dataset",
    "score_candidates",
    "score_quadruple",
    "softmax_with_temperature",
    "supervised_loss",
    "ta_tokenize",
    "total_loss",
]
