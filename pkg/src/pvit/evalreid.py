"""Retrieval evaluation: embedding extraction, AP/mAP, CMC under the
cross-camera protocol, and a cosine kNN probe for pre-trained backbones.

Protocol: Euclidean distances, and for each query every gallery item with the
same person AND same camera is excluded as junk before scoring. Queries left
without any correct match are excluded from both mAP and CMC but counted in
the report. Distance ties break by gallery index (stable sort), so results
are deterministic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractViolation
from .finetune import NeckState, bnneck_forward
from .imageio import decode_ppm
from .augment import resize_keep_aspect
from .manifest import load_manifest, split_entries
from .tensor import Tensor
from .vit import ViTConfig, encode_images

MODES = ("finetuned-neck", "pretrain-cls")


@dataclass
class EmbeddingSet:
    person_ids: np.ndarray
    camera_ids: np.ndarray
    features: np.ndarray
    role: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ContractViolation("features must be a non-empty (N, d) matrix")
        if not len(self.person_ids) == len(self.camera_ids) == len(self.features):
            raise ContractViolation("ids and features must have equal row counts")

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class RankedResult:
    per_query_order: list[np.ndarray]  # kept gallery indices, best first
    per_query_ap: list[float | None]  # None for excluded queries
    mean_ap: float
    cmc: np.ndarray  # cmc[r-1] = fraction of first correct match at rank <= r
    excluded_queries: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def cmc_at(self, r: int) -> float:
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def report(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "rank1": self.rank1,
            "rank5": self.cmc_at(5),
            "rank10": self.cmc_at(10),
            "excluded_queries": self.excluded_queries,
        }


def average_precision(relevance: np.ndarray, number_relevant: int) -> float:
    """AP = (1/R) * sum over relevant ranks k of precision@k."""
    if number_relevant < 1:
        raise ContractViolation("number_relevant must be >= 1")
    rel = np.asarray(relevance, dtype=np.float64)
    cum = np.cumsum(rel)
    prec_at_k = cum / np.arange(1, len(rel) + 1)
    return float((prec_at_k * rel).sum() / number_relevant)


def evaluate_reid(query: EmbeddingSet, gallery: EmbeddingSet) -> RankedResult:
    if query.features.shape[1] != gallery.features.shape[1]:
        raise ContractViolation("query/gallery feature dims differ")
    qf = query.features.astype(np.float64)
    gf = gallery.features.astype(np.float64)
    d2 = (qf * qf).sum(1)[:, None] + (gf * gf).sum(1)[None, :] - 2.0 * qf @ gf.T
    dist = np.sqrt(np.maximum(d2, 0.0))

    orders, aps, first_ranks = [], [], []
    excluded = 0
    for qi in range(len(query)):
        order = np.argsort(dist[qi], kind="stable")
        junk = (gallery.person_ids[order] == query.person_ids[qi]) & (
            gallery.camera_ids[order] == query.camera_ids[qi]
        )
        kept = order[~junk]
        flags = gallery.person_ids[kept] == query.person_ids[qi]
        n_rel = int(flags.sum())
        if n_rel == 0:
            excluded += 1
            orders.append(kept)
            aps.append(None)
            continue
        orders.append(kept)
        aps.append(average_precision(flags, n_rel))
        first_ranks.append(int(np.flatnonzero(flags)[0]) + 1)

    valid = [a for a in aps if a is not None]
    if not valid:
        raise ContractViolation("every query was excluded; nothing to evaluate")
    max_len = max(len(o) for o, a in zip(orders, aps) if a is not None)
    ranks = np.asarray(first_ranks)
    cmc = np.array([(ranks <= r).mean() for r in range(1, max_len + 1)])
    return RankedResult(
        per_query_order=orders,
        per_query_ap=aps,
        mean_ap=float(np.mean(valid)),
        cmc=cmc,
        excluded_queries=excluded,
    )


# -- embedding extraction ---------------------------------------------------------


def _backbone_from_checkpoint(ckpt: Checkpoint, dtype=np.float32):
    """(params, vit_cfg, input_size, neck|None) from either checkpoint flavor."""
    from .config import dict_to_dataclass  # deferred: config imports nothing from here

    cfg_dict = ckpt.config or {}
    if any(k.startswith("backbone/") for k in ckpt.tensors):
        prefix = "backbone/"
        vit_cfg = dict_to_dataclass(ViTConfig, cfg_dict.get("vit", {}), "vit")
        input_size = tuple(cfg_dict.get("input_size", (64, 32)))
        neck = NeckState.create(vit_cfg.dim, dtype=dtype)
        neck.scale = Tensor(ckpt.tensors["neck/scale"].astype(dtype))
        neck.running_mean = ckpt.tensors["neck/running_mean"].astype(dtype)
        neck.running_var = ckpt.tensors["neck/running_var"].astype(dtype)
    elif any(k.startswith("teacher/") for k in ckpt.tensors):
        prefix = "teacher/"
        vit_cfg = dict_to_dataclass(ViTConfig, cfg_dict.get("vit", {}), "vit")
        input_size = tuple(cfg_dict.get("crops", {}).get("global_size", (64, 32)))
        neck = None
    else:
        raise ConfigError("checkpoint holds neither fine-tuned nor pre-training parameters")
    params = {
        k[len(prefix) :]: Tensor(v.astype(dtype))
        for k, v in ckpt.tensors.items()
        if k.startswith(prefix) and not k[len(prefix) :].startswith("head_")
    }
    return params, vit_cfg, input_size, neck


def extract_embeddings(
    ckpt_path,
    manifest_path,
    split: str,
    mode: str = "finetuned-neck",
    batch_size: int = 32,
) -> EmbeddingSet:
    """Deterministic, batch-size-independent features for one manifest split."""
    if mode not in MODES:
        raise ConfigError(f"unknown embedding mode {mode!r}, expected one of {MODES}")
    ckpt = load_checkpoint(ckpt_path)
    params, vit_cfg, input_size, neck = _backbone_from_checkpoint(ckpt)
    if mode == "finetuned-neck" and neck is None:
        raise ConfigError("finetuned-neck mode needs a fine-tuned checkpoint (neck missing)")

    manifest_path = Path(manifest_path)
    entries = split_entries(load_manifest(manifest_path), split)
    if not entries:
        raise ContractViolation(f"manifest split {split!r} is empty")
    root = manifest_path.parent

    feats = []
    for lo in range(0, len(entries), batch_size):
        chunk = entries[lo : lo + batch_size]
        imgs = []
        for e in chunk:
            try:
                imgs.append(resize_keep_aspect(decode_ppm((root / e.path).read_bytes()), *input_size))
            except Exception as err:
                raise type(err)(f"{e.path}: {err}") from err
        z = encode_images(np.stack(imgs), params, vit_cfg).z_cls
        f = bnneck_forward(z, neck, training=False) if mode == "finetuned-neck" else z
        feats.append(f.data.copy())
    return EmbeddingSet(
        person_ids=np.array([e.person_id for e in entries], dtype=np.int64),
        camera_ids=np.array([e.camera_id for e in entries], dtype=np.int64),
        features=np.concatenate(feats, axis=0),
        role=split,
    )


def save_embeddings(path, emb: EmbeddingSet) -> None:
    save_checkpoint(
        path,
        {"features": emb.features, "person_ids": emb.person_ids, "camera_ids": emb.camera_ids},
        extra={"role": emb.role},
    )


def load_embeddings(path) -> EmbeddingSet:
    ckpt = load_checkpoint(path)
    return EmbeddingSet(
        person_ids=ckpt.tensors["person_ids"],
        camera_ids=ckpt.tensors["camera_ids"],
        features=ckpt.tensors["features"],
        role=ckpt.extra.get("role", ""),
    )


# -- kNN probe --------------------------------------------------------------------


def knn_classify(
    db_features: np.ndarray,
    db_labels: np.ndarray,
    test_features: np.ndarray,
    k: int,
    exclude_self: bool = False,
) -> np.ndarray:
    """Cosine-similarity kNN labels; majority vote, smallest label on ties."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    limit = len(db_features) - (1 if exclude_self else 0)
    if k > limit:
        raise ConfigError(f"k={k} exceeds usable database size {limit}")
    dbn = db_features / np.linalg.norm(db_features, axis=1, keepdims=True).clip(min=1e-12)
    tn = test_features / np.linalg.norm(test_features, axis=1, keepdims=True).clip(min=1e-12)
    sim = tn @ dbn.T
    preds = np.empty(len(test_features), dtype=db_labels.dtype)
    for i in range(len(test_features)):
        row = sim[i]
        if exclude_self:
            row = row.copy()
            row[i] = -np.inf
        top = np.argsort(-row, kind="stable")[:k]
        preds[i] = np.bincount(db_labels[top]).argmax()
    return preds


@dataclass
class KnnReport:
    accuracy: float
    k: int
    degenerate_self_match: bool = False
    extra: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {"accuracy": self.accuracy, "k": self.k, "degenerate_self_match": self.degenerate_self_match}


def knn_probe(
    ckpt_path,
    manifest_path,
    k: int,
    db_split: str = "gallery",
    test_split: str = "query",
    mode: str = "pretrain-cls",
    batch_size: int = 32,
) -> KnnReport:
    """Identity-classification accuracy of raw cls embeddings under cosine kNN."""
    db = extract_embeddings(ckpt_path, manifest_path, db_split, mode=mode, batch_size=batch_size)
    degenerate = db_split == test_split
    if degenerate:
        warnings.warn("kNN probe with db split == test split: self-matches allowed (diagnostic mode)", stacklevel=2)
        test = db
    else:
        test = extract_embeddings(ckpt_path, manifest_path, test_split, mode=mode, batch_size=batch_size)
    preds = knn_classify(db.features, db.person_ids, test.features, k)
    return KnnReport(
        accuracy=float((preds == test.person_ids).mean()),
        k=k,
        degenerate_self_match=degenerate,
    )
