"""Scoring backbones for temporal link prediction.

Two models share one interface.  The translation backbone scores a fact by
how short the vector s + p - o + t is (negated, so higher means more
plausible).  The recurrent-factorization backbone encodes the relation
together with the year digits through a single-layer LSTM and scores with the
trilinear product sum_k s_k * o_k * pseq_k.

All gradients in this file are written out by hand; there is no autodiff
anywhere.  Every backward path is validated against central finite
differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .graph import CandidateSet, Quadruple, Vocabulary
from .numerics import ParamTensor, adagrad_step

__all__ = [
    "TTransEParams",
    "TADistMultParams",
    "GradAccum",
    "init_params",
    "ta_tokenize",
    "lstm_forward",
    "lstm_backward",
    "score_quadruple",
    "score_candidates",
    "batch_candidate_scores",
    "batch_candidate_backprop",
    "supervised_gradients",
    "trilinear_score",
]

BACKBONES = ("ttranse", "tadistmult")
GATES = ("input", "forget", "cell", "output")
N_DIGIT_TOKENS = 10
YEAR_DIGITS = 4

# Cap on the size of the (queries x candidates x dim) intermediate used by the
# batched translation scorer, in elements.  Keeps peak memory near 10 MB.
_CHUNK_ELEMENTS = 2_500_000


@dataclass
class TTransEParams:
    """Embedding tables for the translation backbone."""

    entity_emb: ParamTensor
    relation_emb: ParamTensor
    time_emb: ParamTensor

    backbone = "ttranse"

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def tables(self) -> dict[str, ParamTensor]:
        return {
            "entity_emb": self.entity_emb,
            "relation_emb": self.relation_emb,
            "time_emb": self.time_emb,
        }

    def copy(self) -> "TTransEParams":
        return TTransEParams(*(t.copy() for t in self.tables().values()))

    def astype(self, dtype) -> "TTransEParams":
        return TTransEParams(*(t.astype(dtype) for t in self.tables().values()))


@dataclass
class TADistMultParams:
    """Embeddings plus LSTM weights for the recurrent-factorization backbone.

    token_emb stacks the relation tokens (rows 0..n_relations-1) followed by
    the ten year-digit tokens.  The LSTM is single layer with hidden size
    equal to the embedding dimension.
    """

    entity_emb: ParamTensor
    token_emb: ParamTensor
    w_input: ParamTensor
    w_forget: ParamTensor
    w_cell: ParamTensor
    w_output: ParamTensor
    u_input: ParamTensor
    u_forget: ParamTensor
    u_cell: ParamTensor
    u_output: ParamTensor
    b_input: ParamTensor
    b_forget: ParamTensor
    b_cell: ParamTensor
    b_output: ParamTensor
    n_relations: int = 0

    backbone = "tadistmult"

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def tables(self) -> dict[str, ParamTensor]:
        out = {"entity_emb": self.entity_emb, "token_emb": self.token_emb}
        for prefix in ("w", "u", "b"):
            for gate in GATES:
                name = f"{prefix}_{gate}"
                out[name] = getattr(self, name)
        return out

    def copy(self) -> "TADistMultParams":
        return TADistMultParams(*(t.copy() for t in self.tables().values()), n_relations=self.n_relations)

    def astype(self, dtype) -> "TADistMultParams":
        return TADistMultParams(
            *(t.astype(dtype) for t in self.tables().values()), n_relations=self.n_relations
        )

    def gate_weights(self, prefix: str) -> list[np.ndarray]:
        return [getattr(self, f"{prefix}_{gate}").values for gate in GATES]


Params = TTransEParams | TADistMultParams


def _normalized_rows(rng: np.random.Generator, rows: int, dim: int, bound: float) -> np.ndarray:
    vals = rng.uniform(-bound, bound, size=(rows, dim))
    norms = np.linalg.norm(vals, axis=1, keepdims=True)
    return vals / np.maximum(norms, 1e-12)


def init_params(
    backbone: str,
    dim: int,
    n_entities: int,
    n_relations: int,
    n_buckets: int,
    seed: int,
    dtype=np.float32,
) -> Params:
    """Seeded parameter initialization.

    Embedding tables draw uniform entries in [-6/sqrt(d), +6/sqrt(d)] and each
    row is L2-normalized once.  LSTM gate matrices use the tighter
    [-1/sqrt(d), +1/sqrt(d)] range, biases start at zero except the forget
    gate, which starts at one so early training does not erase cell state.
    Draws happen in a fixed order, so the same seed reproduces the same model
    at either dtype.
    """
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}")
    if dim < 1:
        raise ValueError(f"embedding dimension must be positive, got {dim}")
    if min(n_entities, n_relations, n_buckets) < 1:
        raise ValueError("entity, relation and bucket counts must all be positive")

    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)

    if backbone == "ttranse":
        return TTransEParams(
            entity_emb=ParamTensor(_normalized_rows(rng, n_entities, dim, bound).astype(dtype)),
            relation_emb=ParamTensor(_normalized_rows(rng, n_relations, dim, bound).astype(dtype)),
            time_emb=ParamTensor(_normalized_rows(rng, n_buckets, dim, bound).astype(dtype)),
        )

    entity = _normalized_rows(rng, n_entities, dim, bound).astype(dtype)
    token = _normalized_rows(rng, n_relations + N_DIGIT_TOKENS, dim, bound).astype(dtype)
    wb = 1.0 / np.sqrt(dim)
    mats = {}
    for prefix in ("w", "u"):
        for gate in GATES:
            mats[f"{prefix}_{gate}"] = ParamTensor(rng.uniform(-wb, wb, size=(dim, dim)).astype(dtype))
    biases = {}
    for gate in GATES:
        init = np.ones(dim, dtype=dtype) if gate == "forget" else np.zeros(dim, dtype=dtype)
        biases[f"b_{gate}"] = ParamTensor(init)
    return TADistMultParams(
        entity_emb=ParamTensor(entity),
        token_emb=ParamTensor(token),
        **mats,
        **biases,
        n_relations=n_relations,
    )


def ta_tokenize(p: int, t: int, vocab: Vocabulary) -> np.ndarray:
    """Token sequence [relation, y1, y2, y3, y4] for relation p at bucket t.

    The year is the bucket's label, rendered as four zero-padded digits of its
    absolute value (only the last four digits survive for years beyond 9999).
    Month and day never appear; buckets are year-grained.
    """
    year = abs(int(vocab.time_buckets[t]))
    digits = str(year).zfill(YEAR_DIGITS)[-YEAR_DIGITS:]
    n_rel = vocab.n_relations
    return np.asarray([int(p)] + [n_rel + int(ch) for ch in digits], dtype=np.int64)


@dataclass
class LstmCache:
    """Per-step activations kept from a forward pass for backpropagation."""

    tokens: np.ndarray
    x: np.ndarray  # (L, d) input rows
    i: np.ndarray  # input gate, sigmoid
    f: np.ndarray  # forget gate, sigmoid
    g: np.ndarray  # cell candidate, tanh
    o: np.ndarray  # output gate, sigmoid
    c: np.ndarray  # cell state after each step
    h: np.ndarray  # hidden state after each step


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_forward(tokens: np.ndarray, params: TADistMultParams) -> tuple[np.ndarray, LstmCache]:
    """Run the relation-time token sequence through the LSTM.

    Hidden and cell state start at zero.  Returns the final hidden state (the
    sequence representation) plus the cache needed by lstm_backward.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D array")
    d = params.dim
    L = tokens.size
    x = params.token_emb.values[tokens]
    dtype = x.dtype
    wi, wf, wg, wo = params.gate_weights("w")
    ui, uf, ug, uo = params.gate_weights("u")
    bi, bf, bg, bo = (params.b_input.values, params.b_forget.values, params.b_cell.values, params.b_output.values)

    gates = {k: np.zeros((L, d), dtype=dtype) for k in ("i", "f", "g", "o", "c", "h")}
    h = np.zeros(d, dtype=dtype)
    c = np.zeros(d, dtype=dtype)
    for step in range(L):
        xt = x[step]
        it = _sigmoid(wi @ xt + ui @ h + bi)
        ft = _sigmoid(wf @ xt + uf @ h + bf)
        gt = np.tanh(wg @ xt + ug @ h + bg)
        ot = _sigmoid(wo @ xt + uo @ h + bo)
        c = ft * c + it * gt
        h = ot * np.tanh(c)
        gates["i"][step] = it
        gates["f"][step] = ft
        gates["g"][step] = gt
        gates["o"][step] = ot
        gates["c"][step] = c
        gates["h"][step] = h
    cache = LstmCache(tokens=tokens, x=x, **{k: gates[k] for k in ("i", "f", "g", "o", "c", "h")})
    return h, cache


def lstm_backward(
    params: TADistMultParams, cache: LstmCache, dh_last: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagation through time for one cached sequence.

    Takes the gradient of the loss with respect to the final hidden state and
    returns (gradient per input row, gradients for every LSTM matrix and
    bias).  Input-row gradients line up with cache.tokens.
    """
    L, d = cache.x.shape
    dtype = cache.x.dtype
    wi, wf, wg, wo = params.gate_weights("w")
    ui, uf, ug, uo = params.gate_weights("u")

    dW = {gate: np.zeros((d, d), dtype=dtype) for gate in GATES}
    dU = {gate: np.zeros((d, d), dtype=dtype) for gate in GATES}
    db = {gate: np.zeros(d, dtype=dtype) for gate in GATES}
    dx = np.zeros((L, d), dtype=dtype)

    dh = np.asarray(dh_last, dtype=dtype).copy()
    dc_next = np.zeros(d, dtype=dtype)
    for step in range(L - 1, -1, -1):
        it, ft, gt, ot = cache.i[step], cache.f[step], cache.g[step], cache.o[step]
        ct = cache.c[step]
        h_prev = cache.h[step - 1] if step > 0 else np.zeros(d, dtype=dtype)
        c_prev = cache.c[step - 1] if step > 0 else np.zeros(d, dtype=dtype)
        tc = np.tanh(ct)

        da_o = dh * tc * ot * (1.0 - ot)
        dc = dc_next + dh * ot * (1.0 - tc * tc)
        da_i = dc * gt * it * (1.0 - it)
        da_g = dc * it * (1.0 - gt * gt)
        da_f = dc * c_prev * ft * (1.0 - ft)

        xt = cache.x[step]
        for gate, da in zip(GATES, (da_i, da_f, da_g, da_o)):
            dW[gate] += np.outer(da, xt)
            dU[gate] += np.outer(da, h_prev)
            db[gate] += da
        dx[step] = wi.T @ da_i + wf.T @ da_f + wg.T @ da_g + wo.T @ da_o
        dh = ui.T @ da_i + uf.T @ da_f + ug.T @ da_g + uo.T @ da_o
        dc_next = dc * ft

    dense = {}
    for prefix, store in (("w", dW), ("u", dU), ("b", db)):
        for gate in GATES:
            dense[f"{prefix}_{gate}"] = store[gate]
    return dx, dense


def trilinear_score(s_vec: np.ndarray, o_vec: np.ndarray, pseq: np.ndarray) -> float:
    """sum_k s_k * o_k * pseq_k, the decoder of the recurrent backbone."""
    return float(np.sum(s_vec * o_vec * pseq))


def _sequence_state(params: TADistMultParams, vocab: Vocabulary, p: int, t: int):
    tokens = ta_tokenize(p, t, vocab)
    return lstm_forward(tokens, params)


def score_quadruple(params: Params, quad, vocab: Vocabulary) -> float:
    """Plausibility of a single fact; higher is better for both backbones."""
    s, p, o, t = (int(v) for v in quad)
    if params.backbone == "ttranse":
        ent = params.entity_emb.values
        v = ent[s] + params.relation_emb.values[p] - ent[o] + params.time_emb.values[t]
        return float(-np.linalg.norm(v))
    pseq, _cache = _sequence_state(params, vocab, p, t)
    ent = params.entity_emb.values
    return trilinear_score(ent[s], ent[o], pseq)


def _ttranse_fixed_part(params: TTransEParams, quads: np.ndarray, slot: str) -> np.ndarray:
    """The query-constant vector: scores are -|fixed - candidate| for both slots."""
    ent = params.entity_emb.values
    rel = params.relation_emb.values
    tim = params.time_emb.values
    if slot == "object":
        return ent[quads[:, 0]] + rel[quads[:, 1]] + tim[quads[:, 3]]
    return ent[quads[:, 2]] - rel[quads[:, 1]] - tim[quads[:, 3]]


def score_candidates(params: Params, cs: CandidateSet, vocab: Vocabulary) -> np.ndarray:
    """Scores for one query over its candidate list, vectorized."""
    quad = np.asarray(cs.query, dtype=np.int64).reshape(1, 4)
    cand_emb = params.entity_emb.values[cs.candidates]
    if params.backbone == "ttranse":
        fixed = _ttranse_fixed_part(params, quad, cs.slot)[0]
        return -np.linalg.norm(fixed[None, :] - cand_emb, axis=1)
    s, p, o, t = cs.query
    pseq, _ = _sequence_state(params, vocab, p, t)
    fixed_vec = params.entity_emb.values[s if cs.slot == "object" else o]
    return cand_emb @ (fixed_vec * pseq)


class GradAccum:
    """Gradient accumulator over a model's parameter tables.

    Embedding-row gradients accumulate sparsely (buffers are dense for speed,
    but untouched rows are tracked and never updated); LSTM matrices and
    biases accumulate densely.  apply() performs one Adagrad step per touched
    parameter in the fixed table order, which keeps training deterministic.
    """

    def __init__(self, params: Params):
        self._params = params
        self._tables = params.tables()
        self._buf: dict[str, np.ndarray] = {}
        self._touched: dict[str, np.ndarray] = {}
        self._dense: set[str] = set()

    def _ensure(self, name: str) -> np.ndarray:
        if name not in self._buf:
            vals = self._tables[name].values
            self._buf[name] = np.zeros_like(vals)
            if vals.ndim == 2:
                self._touched[name] = np.zeros(vals.shape[0], dtype=bool)
        return self._buf[name]

    def add_rows(self, name: str, rows: np.ndarray, grads: np.ndarray) -> None:
        buf = self._ensure(name)
        rows = np.asarray(rows, dtype=np.int64)
        np.add.at(buf, rows, grads)
        self._touched[name][rows] = True

    def add_dense(self, name: str, grad: np.ndarray) -> None:
        buf = self._ensure(name)
        buf += grad
        self._dense.add(name)
        if name in self._touched:
            self._touched[name][:] = True

    def sparse(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Touched row ids (ascending) and their gradient rows."""
        if name not in self._buf or name in self._dense:
            raise KeyError(f"no sparse gradient for {name!r}")
        rows = np.nonzero(self._touched[name])[0]
        return rows, self._buf[name][rows]

    def tables_touched(self) -> list[str]:
        return [name for name in self._tables if name in self._buf]

    def scale(self, factor: float) -> None:
        for buf in self._buf.values():
            buf *= factor

    def apply(self, lr: float, eps: float) -> None:
        for name in self._tables:
            if name not in self._buf:
                continue
            param = self._tables[name]
            if name in self._dense or param.values.ndim == 1:
                adagrad_step(param, self._buf[name], lr=lr, eps=eps)
            else:
                rows = np.nonzero(self._touched[name])[0]
                if rows.size:
                    adagrad_step(param, self._buf[name][rows], lr=lr, eps=eps, rows=rows)

    def dense_dict(self) -> dict[str, np.ndarray]:
        """Full-shape gradient arrays (zeros where untouched), for checking."""
        out = {}
        for name, param in self._tables.items():
            out[name] = self._buf.get(name, np.zeros_like(param.values)).copy()
        return out


def _candidate_chunks(n_queries: int, dim: int, n_candidates: int) -> Iterable[tuple[int, int]]:
    step = max(1, _CHUNK_ELEMENTS // max(1, n_queries * dim))
    for start in range(0, n_candidates, step):
        yield start, min(start + step, n_candidates)


def batch_candidate_scores(
    params: Params, vocab: Vocabulary, quads: np.ndarray, slot: str
) -> np.ndarray:
    """Scores of every entity as a candidate for each query, shape (m, |E|).

    Matches per-candidate scoring through score_quadruple up to floating
    point roundoff; the batched path only reorders the same arithmetic.
    """
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    ent = params.entity_emb.values
    m, n_e = len(quads), ent.shape[0]
    if params.backbone == "ttranse":
        fixed = _ttranse_fixed_part(params, quads, slot)
        scores = np.empty((m, n_e), dtype=ent.dtype)
        for lo, hi in _candidate_chunks(m, params.dim, n_e):
            diff = fixed[:, None, :] - ent[None, lo:hi, :]
            scores[:, lo:hi] = -np.sqrt(np.sum(diff * diff, axis=2))
        return scores
    pseqs = _batch_sequences(params, vocab, quads)
    fixed_idx = quads[:, 0] if slot == "object" else quads[:, 2]
    w = ent[fixed_idx] * pseqs
    return w @ ent.T


def _batch_sequences(params: TADistMultParams, vocab: Vocabulary, quads: np.ndarray):
    """Hidden states for each query's (relation, bucket) pair, forward once per unique pair."""
    states: dict[tuple[int, int], np.ndarray] = {}
    out = np.empty((len(quads), params.dim), dtype=params.entity_emb.values.dtype)
    for row, (p, t) in enumerate(zip(quads[:, 1], quads[:, 3])):
        key = (int(p), int(t))
        if key not in states:
            states[key], _ = _sequence_state(params, vocab, key[0], key[1])
        out[row] = states[key]
    return out


def batch_candidate_backprop(
    params: Params,
    vocab: Vocabulary,
    quads: np.ndarray,
    slot: str,
    dscores: np.ndarray,
    grads: GradAccum,
) -> None:
    """Chain dL/dscores (m, |E|) into parameter gradients.

    The scores are the ones produced by batch_candidate_scores for the same
    (quads, slot); gradients accumulate into grads.
    """
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    dscores = np.asarray(dscores)
    ent = params.entity_emb.values
    m, n_e = dscores.shape
    all_rows = np.arange(n_e, dtype=np.int64)

    if params.backbone == "ttranse":
        fixed = _ttranse_fixed_part(params, quads, slot)
        grad_fixed = np.zeros_like(fixed)
        grad_ent = np.zeros_like(ent)
        for lo, hi in _candidate_chunks(m, params.dim, n_e):
            diff = fixed[:, None, :] - ent[None, lo:hi, :]
            dist = np.sqrt(np.sum(diff * diff, axis=2))
            w = dscores[:, lo:hi] / np.where(dist > 0, dist, 1.0)
            weighted = w[:, :, None] * diff
            grad_fixed -= weighted.sum(axis=1)
            grad_ent[lo:hi] += np.einsum("qjd->jd", weighted)
        grads.add_rows("entity_emb", all_rows, grad_ent)
        if slot == "object":
            grads.add_rows("entity_emb", quads[:, 0], grad_fixed)
            grads.add_rows("relation_emb", quads[:, 1], grad_fixed)
            grads.add_rows("time_emb", quads[:, 3], grad_fixed)
        else:
            grads.add_rows("entity_emb", quads[:, 2], grad_fixed)
            grads.add_rows("relation_emb", quads[:, 1], -grad_fixed)
            grads.add_rows("time_emb", quads[:, 3], -grad_fixed)
        return

    # recurrent backbone: score[q, j] = sum_k ent[fixed_q] * ent[j] * pseq_q
    caches: dict[tuple[int, int], tuple[np.ndarray, LstmCache]] = {}
    for p, t in zip(quads[:, 1], quads[:, 3]):
        key = (int(p), int(t))
        if key not in caches:
            tokens = ta_tokenize(key[0], key[1], vocab)
            caches[key] = lstm_forward(tokens, params)
    pseqs = np.stack([caches[(int(p), int(t))][0] for p, t in zip(quads[:, 1], quads[:, 3])])

    fixed_idx = quads[:, 0] if slot == "object" else quads[:, 2]
    fixed_emb = ent[fixed_idx]
    w = fixed_emb * pseqs  # (m, d)

    grad_ent_cand = dscores.T @ w  # candidate-side gradient, (|E|, d)
    grads.add_rows("entity_emb", all_rows, grad_ent_cand)

    ga = dscores @ ent  # (m, d), gradient with respect to w per query
    grads.add_rows("entity_emb", fixed_idx, ga * pseqs)

    dpseq_acc: dict[tuple[int, int], np.ndarray] = {}
    dpseq_rows = ga * fixed_emb
    for row, (p, t) in enumerate(zip(quads[:, 1], quads[:, 3])):
        key = (int(p), int(t))
        if key in dpseq_acc:
            dpseq_acc[key] += dpseq_rows[row]
        else:
            dpseq_acc[key] = dpseq_rows[row].copy()

    for key, dh in dpseq_acc.items():
        _h, cache = caches[key]
        dx, dense = lstm_backward(params, cache, dh)
        grads.add_rows("token_emb", cache.tokens, dx)
        for name, grad in dense.items():
            grads.add_dense(name, grad)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def supervised_gradients(
    params: Params,
    vocab: Vocabulary,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float = 1.0,
) -> tuple[float, GradAccum]:
    """Loss and gradients for one supervised batch with sampled negatives.

    positives is (n, 4); negatives is (n, k, 4), k corrupted copies per
    positive.  The translation backbone trains with margin ranking on
    distances (margin 1 by default); at zero distance the distance gradient
    is the zero vector.  The recurrent backbone trains with the logistic
    softplus loss over positive and negative labels.  Losses are averaged so
    batch size does not rescale the learning rate.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 4)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 3 or negatives.shape[0] != len(positives) or negatives.shape[2] != 4:
        raise ValueError("negatives must have shape (n_positives, k, 4)")
    n, k = negatives.shape[:2]
    grads = GradAccum(params)

    if params.backbone == "ttranse":
        ent = params.entity_emb.values
        rel = params.relation_emb.values
        tim = params.time_emb.values

        def diffs(quads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            v = ent[quads[:, 0]] + rel[quads[:, 1]] - ent[quads[:, 2]] + tim[quads[:, 3]]
            d = np.linalg.norm(v, axis=1)
            return v, d

        v_pos, d_pos = diffs(positives)
        flat_neg = negatives.reshape(-1, 4)
        v_neg, d_neg = diffs(flat_neg)
        d_neg = d_neg.reshape(n, k)

        slack = margin + d_pos[:, None] - d_neg
        active = slack > 0
        total = float(np.sum(np.where(active, slack, 0.0)))
        loss = total / (n * k)

        u_pos = v_pos / np.where(d_pos > 0, d_pos, 1.0)[:, None]
        u_neg = (v_neg / np.where(d_neg.reshape(-1) > 0, d_neg.reshape(-1), 1.0)[:, None]).reshape(n, k, -1)

        w_pos = active.sum(axis=1).astype(u_pos.dtype) / (n * k)
        g_pos = u_pos * w_pos[:, None]
        grads.add_rows("entity_emb", positives[:, 0], g_pos)
        grads.add_rows("relation_emb", positives[:, 1], g_pos)
        grads.add_rows("time_emb", positives[:, 3], g_pos)
        grads.add_rows("entity_emb", positives[:, 2], -g_pos)

        w_neg = active.astype(u_pos.dtype) / (n * k)
        g_neg = (u_neg * w_neg[:, :, None]).reshape(n * k, -1)
        grads.add_rows("entity_emb", flat_neg[:, 0], -g_neg)
        grads.add_rows("relation_emb", flat_neg[:, 1], -g_neg)
        grads.add_rows("time_emb", flat_neg[:, 3], -g_neg)
        grads.add_rows("entity_emb", flat_neg[:, 2], g_neg)
        return loss, grads

    all_quads = np.concatenate([positives, negatives.reshape(-1, 4)], axis=0)
    ent = params.entity_emb.values
    labels = np.concatenate([np.ones(n, dtype=ent.dtype), -np.ones(n * k, dtype=ent.dtype)])

    caches: dict[tuple[int, int], tuple[np.ndarray, LstmCache]] = {}
    for p, t in zip(all_quads[:, 1], all_quads[:, 3]):
        key = (int(p), int(t))
        if key not in caches:
            caches[key] = lstm_forward(ta_tokenize(key[0], key[1], vocab), params)
    pseqs = np.stack([caches[(int(p), int(t))][0] for p, t in zip(all_quads[:, 1], all_quads[:, 3])])

    s_emb = ent[all_quads[:, 0]]
    o_emb = ent[all_quads[:, 2]]
    scores = np.sum(s_emb * o_emb * pseqs, axis=1)
    z = -labels * scores
    loss = float(np.mean(_softplus(z)))
    dscore = (-labels * _sigmoid(z)) / len(all_quads)

    grads.add_rows("entity_emb", all_quads[:, 0], dscore[:, None] * o_emb * pseqs)
    grads.add_rows("entity_emb", all_quads[:, 2], dscore[:, None] * s_emb * pseqs)

    dpseq_rows = dscore[:, None] * s_emb * o_emb
    dpseq_acc: dict[tuple[int, int], np.ndarray] = {}
    for row, (p, t) in enumerate(zip(all_quads[:, 1], all_quads[:, 3])):
        key = (int(p), int(t))
        if key in dpseq_acc:
            dpseq_acc[key] += dpseq_rows[row]
        else:
            dpseq_acc[key] = dpseq_rows[row].copy()
    for key, dh in dpseq_acc.items():
        _h, cache = caches[key]
        dx, dense = lstm_backward(params, cache, dh)
        grads.add_rows("token_emb", cache.tokens, dx)
        for name, grad in dense.items():
            grads.add_dense(name, grad)
    return loss, grads
