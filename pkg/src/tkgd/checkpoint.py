"""Binary model checkpoints: versioned header, fixed tensor order, content digest.

Layout: 4-byte magic, 4-byte little-endian header length, UTF-8 JSON header,
parameter tensors flattened as little-endian 32-bit floats in the order the
header declares, then a 32-byte SHA-256 of header plus payload.  The header
carries the backbone tag, dimensions, vocabulary sizes, and the digests of the
dataset and config that produced the parameters, so a checkpoint can refuse to
load into the wrong model and can flag a vocabulary mismatch before it turns
into silently shuffled entities.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .graph import Vocabulary
from .models import BACKBONES, Params, TADistMultParams, TTransEParams
from .numerics import ParamTensor

logger = logging.getLogger(__name__)

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "export_embeddings"]

MAGIC = b"TKGD"
FORMAT_VERSION = 1
_DIGEST_BYTES = 32


class CheckpointError(Exception):
    """A checkpoint file is unreadable, corrupt, or incompatible."""


def save_checkpoint(
    params: Params,
    path: str | Path,
    *,
    dataset_digest: str = "",
    config_digest: str = "",
    n_buckets: int | None = None,
) -> None:
    """Serialize params to path; see the module docstring for the layout."""
    path = Path(path)
    tables = params.tables()
    if params.backbone == "ttranse":
        n_entities = tables["entity_emb"].shape[0]
        n_relations = tables["relation_emb"].shape[0]
        if n_buckets is None:
            n_buckets = tables["time_emb"].shape[0]
    else:
        n_entities = tables["entity_emb"].shape[0]
        n_relations = params.n_relations
        if n_buckets is None:
            n_buckets = 0
    header = {
        "format_version": FORMAT_VERSION,
        "backbone": params.backbone,
        "dim": params.dim,
        "n_entities": int(n_entities),
        "n_relations": int(n_relations),
        "n_buckets": int(n_buckets),
        "tensors": [[name, list(t.shape)] for name, t in tables.items()],
        "dataset_digest": dataset_digest,
        "config_digest": config_digest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.values, dtype="<f4").tobytes() for t in tables.values())
    digest = hashlib.sha256(header_bytes + payload).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(digest)


def load_checkpoint(
    path: str | Path,
    *,
    expect_backbone: str | None = None,
    expect_dim: int | None = None,
    dataset_digest: str | None = None,
) -> tuple[Params, dict]:
    """Read a checkpoint back into parameters; returns (params, header).

    The content digest and the header's declared shapes are verified against
    the actual bytes before anything is built.  expect_backbone and
    expect_dim reject incompatible checkpoints outright; a dataset_digest
    that disagrees with the header only warns, since evaluating on a
    different split of the same vocabulary is legitimate.
    Accumulators come back zeroed: a loaded model starts a fresh
    optimizer state.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint (only {len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    header_len = int.from_bytes(blob[4:8], "little")
    if len(blob) < 8 + header_len + _DIGEST_BYTES:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    header_bytes = blob[8 : 8 + header_len]
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version!r} (this build reads {FORMAT_VERSION})")
    backbone = header.get("backbone")
    if backbone not in BACKBONES:
        raise CheckpointError(f"{path}: unknown backbone {backbone!r}")

    tensors = header.get("tensors", [])
    counts = [int(np.prod(shape, dtype=np.int64)) for _name, shape in tensors]
    payload_len = 4 * int(sum(counts))
    expected_total = 8 + header_len + payload_len + _DIGEST_BYTES
    if len(blob) != expected_total:
        raise CheckpointError(
            f"{path}: payload size mismatch (file has {len(blob)} bytes, header implies {expected_total})"
        )
    payload = blob[8 + header_len : 8 + header_len + payload_len]
    digest = blob[8 + header_len + payload_len :]
    if hashlib.sha256(header_bytes + payload).digest() != digest:
        raise CheckpointError(f"{path}: content digest mismatch; the file is corrupt")

    if expect_backbone is not None and backbone != expect_backbone:
        raise CheckpointError(f"{path}: checkpoint backbone is {backbone!r}, expected {expect_backbone!r}")
    if expect_dim is not None and header.get("dim") != expect_dim:
        raise CheckpointError(f"{path}: checkpoint dimension is {header.get('dim')}, expected {expect_dim}")
    if dataset_digest is not None and header.get("dataset_digest") and header["dataset_digest"] != dataset_digest:
        logger.warning(
            "%s: checkpoint was trained on a different dataset (digest %s... vs %s...)",
            path,
            header["dataset_digest"][:12],
            dataset_digest[:12],
        )

    arrays = []
    offset = 0
    for (_name, shape), count in zip(tensors, counts):
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays.append(ParamTensor(flat.reshape([int(s) for s in shape]).astype(np.float32, copy=True)))
        offset += 4 * count
    names = [name for name, _shape in tensors]
    if backbone == "ttranse":
        if names != ["entity_emb", "relation_emb", "time_emb"]:
            raise CheckpointError(f"{path}: unexpected tensor list {names} for backbone {backbone!r}")
        params: Params = TTransEParams(*arrays)
    else:
        expected_names = ["entity_emb", "token_emb"] + [
            f"{p}_{g}" for p in ("w", "u", "b") for g in ("input", "forget", "cell", "output")
        ]
        if names != expected_names:
            raise CheckpointError(f"{path}: unexpected tensor list {names} for backbone {backbone!r}")
        params = TADistMultParams(*arrays, n_relations=int(header.get("n_relations", 0)))
    return params, header


def export_embeddings(params: Params, vocab: Vocabulary, path: str | Path) -> None:
    """Dump embeddings as plain text, one named row per line.

    Format: comment lines '# <table> <rows> <dim>' introduce each block;
    data lines are '<name>\\t<v1> <v2> ...' with full float precision.
    Entities come first, then relations, then time buckets (translation
    backbone) or relation and digit tokens (recurrent backbone).  LSTM
    matrices are internal weights, not embeddings, and are not exported.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def block(fh, title: str, names: list[str], matrix: np.ndarray) -> None:
        fh.write(f"# {title} {matrix.shape[0]} {matrix.shape[1]}\n")
        for name, row in zip(names, matrix):
            fh.write(name + "\t" + " ".join(repr(float(v)) for v in row) + "\n")

    with path.open("w", encoding="utf-8") as fh:
        block(fh, "entities", vocab.entity_names, params.entity_emb.values)
        if params.backbone == "ttranse":
            block(fh, "relations", vocab.relation_names, params.relation_emb.values)
            block(fh, "time-buckets", [str(y) for y in vocab.time_buckets], params.time_emb.values)
        else:
            tokens = params.token_emb.values
            block(fh, "relation-tokens", vocab.relation_names, tokens[: params.n_relations])
            block(
                fh,
                "digit-tokens",
                [f"digit:{d}" for d in range(10)],
                tokens[params.n_relations : params.n_relations + 10],
            )
