"""Distillation losses and the two-phase teacher-to-student training loop.

The student trains against three signals: the teacher's tempered score
distribution over all candidate entities (blended with a hard cross-entropy
term), an optional Huber alignment toward language-model rescoring of the
teacher's top candidates, and a small mean-squared supervised term.  Baseline
methods swap the objective: pure soft-target transfer, an embedding hint with
a learned regressor, or relational structure matching on pairwise distances
and triplet angles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import llm as llm_mod
from .evaluate import evaluate
from .graph import Dataset
from .models import GradAccum, Params, batch_candidate_backprop, batch_candidate_scores, init_params
from .numerics import ParamTensor, adagrad_step, log_softmax_with_temperature, softmax_with_temperature

logger = logging.getLogger(__name__)

__all__ = [
    "DistillConfig",
    "StudentState",
    "make_student",
    "kd_soft_loss",
    "bkd_loss",
    "huber_alignment_loss",
    "supervised_loss",
    "total_loss",
    "fitnet_hint_loss",
    "rkd_loss",
    "minmax_normalize",
    "distill_run",
]

METHODS = ("ours", "bkd", "fitnet", "rkd")

# Relational matching is cubic in the number of embeddings compared, so the
# per-batch entity sample is capped.
RKD_MAX_BATCH = 32


@dataclass
class DistillConfig:
    """Hyperparameters of a distillation run.

    phase1_epochs trains on teacher signal and the supervised term only;
    phase2_epochs adds the language-model alignment on the teacher's top
    llm_topk candidates.  Baseline methods run phase 1 only.
    """

    phase1_epochs: int
    phase2_epochs: int
    tau: float = 7.0
    alpha_kd: float = 0.9
    lambda_llm: float = 0.5
    beta: float = 0.1
    delta: float = 1.0
    llm_topk: int = 10
    method: str = "ours"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown distillation method {self.method!r}; expected one of {METHODS}")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (0.0 <= self.alpha_kd <= 1.0):
            raise ValueError(f"alpha_kd must lie in [0, 1], got {self.alpha_kd}")
        if self.lambda_llm < 0 or self.beta < 0:
            raise ValueError("loss weights lambda_llm and beta must be nonnegative")
        if not (self.delta > 0):
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not (1 <= self.llm_topk <= 50):
            raise ValueError(f"llm_topk must lie in [1, 50], got {self.llm_topk}")


@dataclass
class StudentState:
    """Student parameters plus per-method auxiliaries."""

    params: Params
    fitnet_regressor: ParamTensor | None = None

    def copy(self) -> "StudentState":
        reg = self.fitnet_regressor.copy() if self.fitnet_regressor is not None else None
        return StudentState(params=self.params.copy(), fitnet_regressor=reg)


def make_student(
    backbone: str,
    dim: int,
    n_entities: int,
    n_relations: int,
    n_buckets: int,
    seed: int,
    method: str = "ours",
    teacher_dim: int | None = None,
    dtype=np.float32,
) -> StudentState:
    """Fresh student; fitnet additionally gets its dim-by-teacher-dim regressor."""
    params = init_params(backbone, dim, n_entities, n_relations, n_buckets, seed, dtype=dtype)
    regressor = None
    if method == "fitnet":
        if teacher_dim is None:
            raise ValueError("fitnet needs the teacher dimension for its regressor")
        rng = np.random.default_rng([seed, 1])
        bound = 1.0 / np.sqrt(dim)
        regressor = ParamTensor(rng.uniform(-bound, bound, size=(dim, teacher_dim)).astype(dtype))
    return StudentState(params=params, fitnet_regressor=regressor)


# ---------------------------------------------------------------------------
# per-query losses
# ---------------------------------------------------------------------------


def _check_pair(teacher_scores: np.ndarray, student_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(teacher_scores)
    s = np.asarray(student_scores)
    if t.shape != s.shape or t.ndim != 1:
        raise ValueError(f"score vectors must be 1-D and aligned, got {t.shape} and {s.shape}")
    if t.size == 0:
        raise ValueError("score vectors are empty")
    return t, s


def _soft_kd_rows(teacher: np.ndarray, student: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Tempered soft-target transfer, rows independent.

    loss = tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)), gradient
    with respect to the student scores is tau * (q - p).  The tau^2 factor
    keeps gradient magnitudes comparable across temperatures.
    """
    logp = log_softmax_with_temperature(teacher, tau)
    logq = log_softmax_with_temperature(student, tau)
    p = np.exp(logp)
    q = np.exp(logq)
    loss = (tau * tau) * np.sum(p * (logp - logq), axis=-1)
    grad = tau * (q - p)
    return loss, grad


def _hard_ce_rows(student: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy against the one-hot truth at temperature 1."""
    logq = log_softmax_with_temperature(student, 1.0)
    q = softmax_with_temperature(student, 1.0)
    rows = np.arange(len(np.atleast_2d(student)))
    if student.ndim == 1:
        loss = -logq[gt]
        grad = q.copy()
        grad[gt] -= 1.0
        return loss, grad
    loss = -logq[rows, gt]
    grad = q.copy()
    grad[rows, gt] -= 1.0
    return loss, grad


def _mse_softmax_rows(student: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared error between softmax(student) and the one-hot truth."""
    q = softmax_with_temperature(student, 1.0)
    resid = q.copy()
    if student.ndim == 1:
        resid[gt] -= 1.0
        n = student.size
        loss = np.mean(resid * resid)
        g = (2.0 / n) * resid
        grad = q * (g - np.sum(g * q))
        return loss, grad
    rows = np.arange(student.shape[0])
    resid[rows, gt] -= 1.0
    n = student.shape[1]
    loss = np.mean(resid * resid, axis=1)
    g = (2.0 / n) * resid
    grad = q * (g - np.sum(g * q, axis=1, keepdims=True))
    return loss, grad


def kd_soft_loss(
    teacher_scores: np.ndarray,
    student_scores: np.ndarray,
    gt_index: int,
    tau: float = 7.0,
    alpha_kd: float = 0.9,
) -> tuple[float, np.ndarray]:
    """Blend of tempered teacher transfer and hard cross-entropy.

    alpha_kd weights the tau-scaled KL term; 1 - alpha_kd weights plain
    cross-entropy against the ground truth.  Zero-weight branches are skipped
    outright, so alpha_kd = 1 reproduces pure soft transfer bit for bit.
    Returns the loss and its gradient with respect to student_scores.
    """
    t, s = _check_pair(teacher_scores, student_scores)
    if not (0.0 <= alpha_kd <= 1.0):
        raise ValueError(f"alpha_kd must lie in [0, 1], got {alpha_kd}")
    if not (0 <= gt_index < s.size):
        raise ValueError("gt_index out of range")
    loss = 0.0
    grad = np.zeros_like(s, dtype=s.dtype if np.issubdtype(s.dtype, np.floating) else np.float64)
    if alpha_kd > 0.0:
        l_soft, g_soft = _soft_kd_rows(t, s, tau)
        loss += alpha_kd * float(l_soft)
        grad += alpha_kd * g_soft
    if alpha_kd < 1.0:
        l_hard, g_hard = _hard_ce_rows(s, gt_index)
        loss += (1.0 - alpha_kd) * float(l_hard)
        grad += (1.0 - alpha_kd) * g_hard
    return loss, grad


def bkd_loss(teacher_scores: np.ndarray, student_scores: np.ndarray, tau: float = 7.0) -> tuple[float, np.ndarray]:
    """Pure tempered soft-target transfer; kd_soft_loss with alpha_kd = 1."""
    t, s = _check_pair(teacher_scores, student_scores)
    loss, grad = _soft_kd_rows(t, s, tau)
    return float(loss), grad


def _huber_value(resid: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(resid)
    return np.where(a <= delta, 0.5 * resid * resid, delta * a - 0.5 * delta * delta)


def huber_alignment_loss(
    llm_scores: np.ndarray, student_scores: np.ndarray, delta: float = 1.0
) -> tuple[float, np.ndarray]:
    """Mean Huber penalty between aligned score vectors.

    The residual is llm - student per candidate; inside |r| <= delta the
    penalty is quadratic, outside it grows linearly, so each element's
    gradient is clipped at delta in magnitude.  Callers align and normalize
    the two vectors first (see minmax_normalize); this function treats its
    inputs as given.  Returns loss and gradient with respect to
    student_scores.
    """
    t, s = _check_pair(llm_scores, student_scores)
    if not (delta > 0):
        raise ValueError(f"delta must be positive, got {delta}")
    resid = t - s
    loss = float(np.mean(_huber_value(resid, delta)))
    grad = -np.clip(resid, -delta, delta) / s.size
    return loss, grad


def supervised_loss(student_scores: np.ndarray, gt_index: int) -> tuple[float, np.ndarray]:
    """Mean squared error between softmax(student) and the one-hot truth.

    With two candidates scored identically and truth at index 0 the loss is
    ((0.5 - 1)^2 + (0.5 - 0)^2) / 2 = 0.25.
    """
    s = np.asarray(student_scores)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("student_scores must be a non-empty 1-D vector")
    if not (0 <= gt_index < s.size):
        raise ValueError("gt_index out of range")
    loss, grad = _mse_softmax_rows(s, gt_index)
    return float(loss), grad


def total_loss(l1: float, l2: float, l3: float, cfg: DistillConfig) -> float:
    """Weighted sum l1 + lambda_llm * l2 + beta * l3."""
    out = float(l1) + cfg.lambda_llm * float(l2) + cfg.beta * float(l3)
    if not np.isfinite(out):
        raise ValueError("total loss is non-finite")
    return out


def minmax_normalize(scores: np.ndarray) -> tuple[np.ndarray, float]:
    """Map scores to [0, 1] by min and max; returns (normalized, slope).

    slope is d(normalized)/d(score) with the extrema treated as constants,
    which is what the alignment gradient chain uses.  A constant vector maps
    to all 0.5 with slope 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    span = float(s.max() - s.min())
    if span == 0.0:
        return np.full_like(s, 0.5), 0.0
    return (s - s.min()) / span, 1.0 / span


def fitnet_hint_loss(
    student_embs: np.ndarray, teacher_embs: np.ndarray, regressor: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Embedding hint: mean squared distance after mapping student to teacher space.

    loss = mean over the batch of |student @ regressor - teacher|^2.  Returns
    (loss, gradient for student_embs, gradient for regressor).
    """
    s = np.asarray(student_embs)
    t = np.asarray(teacher_embs)
    r = np.asarray(regressor)
    if s.ndim != 2 or t.ndim != 2 or s.shape[0] != t.shape[0]:
        raise ValueError("student and teacher batches must be 2-D with equal row counts")
    if r.shape != (s.shape[1], t.shape[1]):
        raise ValueError(f"regressor shape {r.shape} does not map {s.shape[1]} to {t.shape[1]}")
    b = s.shape[0]
    resid = s @ r - t
    loss = float(np.sum(resid * resid) / b)
    dpred = (2.0 / b) * resid
    return loss, dpred @ r.T, s.T @ dpred


def _pairwise(embs: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    diff = embs[:, None, :] - embs[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    b = embs.shape[0]
    off = ~np.eye(b, dtype=bool)
    mu = float(dist[off].mean())
    return diff, dist, mu


def rkd_loss(student_embs: np.ndarray, teacher_embs: np.ndarray) -> tuple[float, np.ndarray]:
    """Relational matching on pairwise distances and triplet angles.

    Distance term: Huber(delta = 1) between the two pairwise distance
    matrices, each divided by its own mean off-diagonal distance, averaged
    over ordered pairs.  Angle term: Huber between cosines at every ordered
    triplet of distinct points (the middle point is the vertex), averaged
    over triplets.  The total is distance + 2 * angle.  Both normalizations
    make the loss invariant to rotation, translation and uniform scaling of
    either embedding set.  Returns loss and the exact gradient with respect
    to student_embs, including the dependence through the student's own
    normalizer.
    """
    x = np.asarray(student_embs, dtype=np.float64)
    y = np.asarray(teacher_embs, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("embedding batches must be 2-D with equal row counts")
    b = x.shape[0]
    if b < 3:
        raise ValueError(f"relational loss needs at least 3 embeddings, got {b}")

    diff_s, dist_s, mu_s = _pairwise(x)
    _diff_t, dist_t, mu_t = _pairwise(y)
    if mu_s == 0.0 or mu_t == 0.0:
        raise ValueError("all embeddings coincide; relational structure is undefined")
    off = ~np.eye(b, dtype=bool)

    # distance term over ordered pairs
    n_pairs = b * (b - 1)
    e_d = np.where(off, dist_s / mu_s - dist_t / mu_t, 0.0)
    loss_d = float(np.sum(_huber_value(e_d, 1.0)[off]) / n_pairs)
    hp = np.where(off, np.clip(e_d, -1.0, 1.0), 0.0)
    coupled = float(np.sum(hp * dist_s))  # from the mean normalizer
    g_dist = np.where(off, hp / (n_pairs * mu_s) - coupled / (n_pairs * n_pairs * mu_s * mu_s), 0.0)
    safe = np.where(dist_s > 0, dist_s, 1.0)
    unit = diff_s / safe[:, :, None]
    contrib = g_dist[:, :, None] * unit
    grad = contrib.sum(axis=1) - contrib.sum(axis=0)

    # angle term over ordered triplets of distinct points, middle is vertex
    n_tri = b * (b - 1) * (b - 2)
    nrm_s = unit  # unit[a, v] = (x_a - x_v) / |x_a - x_v|
    cos_s = np.einsum("avd,cvd->avc", nrm_s, nrm_s)
    diff_t_unit = _diff_t / np.where(dist_t > 0, dist_t, 1.0)[:, :, None]
    cos_t = np.einsum("avd,cvd->avc", diff_t_unit, diff_t_unit)

    idx = np.arange(b)
    mask = (idx[:, None, None] != idx[None, :, None]) & (idx[None, None, :] != idx[None, :, None])
    mask &= idx[:, None, None] != idx[None, None, :]

    e_a = np.where(mask, cos_s - cos_t, 0.0)
    loss_a = float(np.sum(_huber_value(e_a, 1.0)[mask]) / n_tri)
    g3 = np.where(mask, np.clip(e_a, -1.0, 1.0), 0.0) / n_tri

    d_nrm = np.einsum("avc,cvd->avd", g3 + g3.transpose(2, 1, 0), nrm_s)
    dots = np.sum(d_nrm * nrm_s, axis=2, keepdims=True)
    w = (d_nrm - dots * nrm_s) / safe[:, :, None]
    w[~off] = 0.0
    grad_angle = w.sum(axis=1) - w.sum(axis=0)

    return loss_d + 2.0 * loss_a, grad + 2.0 * grad_angle


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batch_iter(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def distill_run(
    teacher: Params,
    student: StudentState,
    dataset: Dataset,
    llm_handle,
    cfg: DistillConfig,
    rng: np.random.Generator,
    *,
    llm_cache=None,
    lr: float = 0.1,
    eps: float = 1e-8,
    batch_size: int = 1024,
    eval_every: int = 10,
    eval_mode: str = "raw",
    tie_policy: str = "pessimistic",
) -> tuple[StudentState, list[dict]]:
    """Train the student against the teacher; returns (best student, log).

    Phase 1 covers cfg.phase1_epochs with the teacher and supervised terms;
    phase 2 adds the language-model alignment.  Baseline methods run their
    own objective for phase 1 and skip phase 2.  The student snapshot with
    the best validation MRR is returned (the final state when the validation
    split is empty or never evaluated).  One log record per epoch:
    epoch, phase, method, train_loss, llm_calls, and valid_mrr on evaluation
    epochs.
    """
    if teacher.backbone != student.params.backbone:
        raise ValueError(
            f"teacher backbone {teacher.backbone!r} does not match student {student.params.backbone!r}"
        )
    if cfg.method == "ours" and cfg.lambda_llm > 0 and cfg.phase2_epochs > 0 and llm_handle is None:
        raise ValueError("method 'ours' with lambda_llm > 0 needs an LLM handle; pass one or set lambda_llm = 0")
    if cfg.method == "fitnet" and student.fitnet_regressor is None:
        raise ValueError("fitnet needs a student with a regressor; build it with make_student(method='fitnet')")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")

    vocab = dataset.vocab
    train = dataset.train
    total_epochs = cfg.phase1_epochs + (cfg.phase2_epochs if cfg.method == "ours" else 0)
    has_valid = len(dataset.valid) > 0

    best = student.copy()
    best_mrr = -np.inf
    log: list[dict] = []

    for epoch in range(total_epochs):
        phase = 1 if epoch < cfg.phase1_epochs else 2
        lam = cfg.lambda_llm if (cfg.method == "ours" and phase == 2) else 0.0
        epoch_loss = 0.0
        n_queries = 0

        for batch in _batch_iter(len(train), batch_size, rng):
            quads = train[batch]
            m = len(quads)
            grads = GradAccum(student.params)
            batch_loss = 0.0

            for slot in ("subject", "object"):
                t_scores = batch_candidate_scores(teacher, vocab, quads, slot)
                s_scores = batch_candidate_scores(student.params, vocab, quads, slot)
                gts = quads[:, 0] if slot == "subject" else quads[:, 2]
                d_scores = np.zeros_like(s_scores)

                if cfg.method in ("ours", "bkd"):
                    l_soft, g_soft = _soft_kd_rows(t_scores, s_scores, cfg.tau)
                    if cfg.method == "ours" and cfg.alpha_kd < 1.0:
                        l_hard, g_hard = _hard_ce_rows(s_scores, gts)
                        batch_loss += float(np.sum(cfg.alpha_kd * l_soft + (1.0 - cfg.alpha_kd) * l_hard))
                        d_scores += cfg.alpha_kd * g_soft + (1.0 - cfg.alpha_kd) * g_hard
                    else:
                        batch_loss += float(np.sum(l_soft))
                        d_scores += g_soft

                if cfg.beta > 0.0:
                    l_sup, g_sup = _mse_softmax_rows(s_scores, gts)
                    batch_loss += cfg.beta * float(np.sum(l_sup))
                    d_scores += cfg.beta * g_sup

                if lam > 0.0:
                    for row in range(m):
                        top = np.argsort(-t_scores[row], kind="stable")[: cfg.llm_topk]
                        result = llm_mod.score_query(
                            llm_handle,
                            tuple(int(v) for v in quads[row]),
                            slot,
                            top,
                            vocab,
                            cache=llm_cache,
                        )
                        if not result.usable:
                            continue
                        llm_norm, _ = minmax_normalize(result.scores)
                        stu_norm, slope = minmax_normalize(s_scores[row, top])
                        l2, g2 = huber_alignment_loss(llm_norm, stu_norm, cfg.delta)
                        batch_loss += lam * l2
                        d_scores[row, top] += (lam * slope) * g2.astype(d_scores.dtype)

                d_scores /= 2.0 * m  # queries per batch: both slots
                batch_candidate_backprop(student.params, vocab, quads, slot, d_scores, grads)

            batch_loss /= 2.0 * m
            n_queries += 2 * m

            if cfg.method == "fitnet":
                ids = np.unique(quads[:, [0, 2]])
                l_hint, g_emb, g_reg = fitnet_hint_loss(
                    student.params.entity_emb.values[ids],
                    teacher.entity_emb.values[ids],
                    student.fitnet_regressor.values,
                )
                batch_loss += l_hint
                grads.add_rows("entity_emb", ids, g_emb)
                adagrad_step(student.fitnet_regressor, g_reg, lr=lr, eps=eps)
            elif cfg.method == "rkd":
                ids = np.unique(quads[:, [0, 2]])
                if len(ids) > RKD_MAX_BATCH:
                    ids = np.sort(rng.choice(ids, size=RKD_MAX_BATCH, replace=False))
                if len(ids) >= 3:
                    l_rel, g_emb = rkd_loss(
                        student.params.entity_emb.values[ids],
                        teacher.entity_emb.values[ids],
                    )
                    batch_loss += l_rel
                    grads.add_rows("entity_emb", ids, g_emb.astype(student.params.entity_emb.dtype))

            if not np.isfinite(batch_loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}, batch size {m}")
            grads.apply(lr, eps)
            epoch_loss += batch_loss

        record = {
            "epoch": epoch,
            "phase": phase,
            "method": cfg.method,
            "train_loss": epoch_loss,
            "llm_calls": int(getattr(llm_handle, "calls", 0)) if llm_handle is not None else 0,
        }
        if has_valid and eval_every > 0 and ((epoch + 1) % eval_every == 0 or epoch == total_epochs - 1):
            report = evaluate(student.params, dataset, split="valid", mode=eval_mode, tie_policy=tie_policy)
            record["valid_mrr"] = report.mrr
            if report.mrr > best_mrr:
                best_mrr = report.mrr
                best = student.copy()
        log.append(record)

    if best_mrr == -np.inf:
        best = student.copy()
    return best, log
