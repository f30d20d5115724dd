"""Ranking evaluation for link prediction: MR, MRR, Hits@k, raw and filtered.

Every fact in a split yields two queries, one per corrupted slot, so a report
covers 2 * |split| ranks.  Raw mode ranks against every entity; filtered mode
first removes candidates that complete a different known fact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Dataset, DataError, Quadruple, build_candidates, filter_candidates
from .models import Params, score_candidates, score_quadruple

__all__ = ["RankingReport", "rank_of", "evaluate", "brute_force_oracle"]

HITS_KS = (1, 3, 10)
TIE_POLICIES = ("pessimistic", "optimistic", "mean")
MODES = ("raw", "filtered")


@dataclass
class RankingReport:
    """Aggregated ranking metrics over a query set."""

    n_queries: int
    mr: float
    mrr: float
    hits: dict[int, float]
    mode: str
    tie_policy: str = "pessimistic"

    def as_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "mr": self.mr,
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in self.hits.items()},
            "mode": self.mode,
            "tie_policy": self.tie_policy,
        }


def rank_of(scores: np.ndarray, gt_index: int, tie_policy: str = "pessimistic") -> int:
    """1-indexed rank of the ground-truth candidate under higher-is-better scores.

    The base rank counts strictly better candidates.  Ties with the ground
    truth resolve by policy: pessimistic places it after every tied
    candidate, optimistic before, and mean adds floor(ties / 2).
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"unknown tie policy {tie_policy!r}; expected one of {TIE_POLICIES}")
    scores = np.asarray(scores)
    if not (0 <= gt_index < scores.size):
        raise ValueError("ground-truth index out of range")
    gt = scores[gt_index]
    greater = int(np.sum(scores > gt))
    ties = int(np.sum(scores == gt)) - 1
    if tie_policy == "pessimistic":
        return 1 + greater + ties
    if tie_policy == "optimistic":
        return 1 + greater
    return 1 + greater + ties // 2


def metrics_from_ranks(ranks: np.ndarray, ks: tuple[int, ...] = HITS_KS) -> tuple[float, float, dict[int, float]]:
    """MR, MRR and Hits@k for a vector of 1-indexed ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("cannot aggregate metrics over zero queries")
    mr = float(ranks.mean())
    mrr = float((1.0 / ranks).mean())
    hits = {k: float((ranks <= k).mean()) for k in ks}
    return mr, mrr, hits


def _query_ranks(
    params: Params,
    dataset: Dataset,
    split: str,
    mode: str,
    tie_policy: str,
) -> list[int]:
    facts = dataset.split(split)
    if len(facts) == 0:
        raise DataError(f"cannot evaluate on empty split {split!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    vocab = dataset.vocab
    ranks: list[int] = []
    for row in facts:
        quad = Quadruple(*(int(v) for v in row))
        for slot in ("subject", "object"):
            cs = build_candidates(quad, slot, vocab)
            if mode == "filtered":
                cs = filter_candidates(cs, dataset.known)
            scores = score_candidates(params, cs, vocab)
            ranks.append(rank_of(scores, cs.ground_truth_index, tie_policy))
    return ranks


def evaluate(
    params: Params,
    dataset: Dataset,
    split: str = "test",
    mode: str = "raw",
    tie_policy: str = "pessimistic",
) -> RankingReport:
    """Rank every query in the split with both corruption directions pooled."""
    ranks = _query_ranks(params, dataset, split, mode, tie_policy)
    mr, mrr, hits = metrics_from_ranks(np.asarray(ranks))
    return RankingReport(
        n_queries=len(ranks), mr=mr, mrr=mrr, hits=hits, mode=mode, tie_policy=tie_policy
    )


def brute_force_oracle(
    params: Params,
    dataset: Dataset,
    split: str = "test",
    mode: str = "raw",
) -> RankingReport:
    """Reference evaluation used to cross-check evaluate() on small fixtures.

    Deliberately slow and independent: 64-bit parameters, one unbatched score
    call per candidate, candidate filtering done by direct set membership,
    ranks read off a full descending sort with pessimistic tie placement, and
    metric arithmetic written out long-hand.  Guard rails reject inputs
    beyond 64 entities or 256 facts.
    """
    vocab = dataset.vocab
    facts = dataset.split(split)
    if vocab.n_entities > 64:
        raise DataError(f"oracle guard: {vocab.n_entities} entities exceeds 64")
    if len(facts) > 256:
        raise DataError(f"oracle guard: {len(facts)} facts exceeds 256")
    if len(facts) == 0:
        raise DataError(f"cannot evaluate on empty split {split!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")

    wide = params.astype(np.float64)
    ranks: list[int] = []
    for row in facts:
        s, p, o, t = (int(v) for v in row)
        for slot in ("subject", "object"):
            truth = s if slot == "subject" else o
            candidates = []
            for e in range(vocab.n_entities):
                if e == truth:
                    candidates.append(e)
                    continue
                if mode == "filtered":
                    trial = (e, p, o, t) if slot == "subject" else (s, p, e, t)
                    if trial in dataset.known:
                        continue
                candidates.append(e)
            scores = []
            for e in candidates:
                trial = (e, p, o, t) if slot == "subject" else (s, p, e, t)
                scores.append(score_quadruple(wide, trial, vocab))
            gt_score = scores[candidates.index(truth)]
            ordered = sorted(scores, reverse=True)
            rank = 0
            for pos, val in enumerate(ordered, start=1):
                if val == gt_score:
                    rank = pos
            ranks.append(rank)

    total = 0.0
    recip = 0.0
    hits_counts = {k: 0 for k in HITS_KS}
    for r in ranks:
        total += r
        recip += 1.0 / r
        for k in HITS_KS:
            if r <= k:
                hits_counts[k] += 1
    n = len(ranks)
    return RankingReport(
        n_queries=n,
        mr=total / n,
        mrr=recip / n,
        hits={k: hits_counts[k] / n for k in HITS_KS},
        mode=mode,
        tie_policy="pessimistic",
    )
