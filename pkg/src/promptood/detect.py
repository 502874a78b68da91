"""End-to-end scoring and the OOD evaluation metrics.

Inference is two-staged: predict a category from the adapter-transformed
image representation against the optimized positives, then assemble that
category's full prompt block into the sample's graph and read the energy of
the trained head's logits. Higher confidence (-energy) means more ID.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import (
    AdapterState,
    PromptReps,
    positive_probabilities,
    transform,
    transform_images,
)
from .errors import DimensionMismatch, EmptySet, FormatError, LengthMismatch, MissingCategory
from .graph import TopKConfig, build_graph
from .store import EmbeddingTable, Modality, l2_normalize
from .vig import EnergyConfig, ViGModel, energy, head_logits


@dataclass(frozen=True)
class ScoreRecord:
    name: str
    predicted: int
    score: float  # higher = more in-distribution
    is_id: bool

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise FormatError(f"score for {self.name!r} is not finite")


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    aupr: float
    fpr95: float
    id_acc: float | None  # None when ID ground-truth labels were not supplied

    def __post_init__(self):
        for name in ("auroc", "aupr", "fpr95", "id_acc"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise FormatError(f"{name}={value} outside [0, 1]")

    def to_json(self) -> str:
        def fmt(v: float | None):
            return None if v is None else float(f"{v:.6f}")

        return json.dumps(
            {
                "auroc": fmt(self.auroc),
                "aupr": fmt(self.aupr),
                "fpr95": fmt(self.fpr95),
                "id_acc": fmt(self.id_acc),
            },
            indent=2,
        ) + "\n"


# --- category prediction -------------------------------------------------------


def predict_category(
    image_rep: np.ndarray, reps: PromptReps, state: AdapterState, tau: float
) -> tuple[int, np.ndarray]:
    """Argmax of the positive matching probabilities; ties go to the lowest index.

    ``image_rep`` is a raw (pre-adapter) vector; it is transformed and
    re-normalized before matching.
    """
    rep = transform(state, np.asarray(image_rep, dtype=np.float64), side="image")
    probs = positive_probabilities(rep, reps, tau)
    return int(np.argmax(probs)), probs


def mcm_score(image_rep: np.ndarray, reps: PromptReps, tau: float) -> float:
    """Maximum scaled-softmax matching probability (ablation baseline).

    ``image_rep`` must already be a transformed unit vector.
    """
    return float(positive_probabilities(image_rep, reps, tau).max())


def stage1_image_rep(
    state: AdapterState,
    patch_vectors: np.ndarray,
    mode: str = "patch-mean",
    global_vector: np.ndarray | None = None,
) -> np.ndarray:
    """Unit image representation used for stage-1 category prediction."""
    if mode == "patch-mean":
        transformed = transform_images(state, np.asarray(patch_vectors, dtype=np.float64))
        return l2_normalize(transformed.mean(axis=0))
    if mode == "global":
        if global_vector is None:
            raise FormatError("stage-1 'global' mode needs the global image vector")
        return transform(state, np.asarray(global_vector, dtype=np.float64), side="image")
    raise FormatError(f"unknown stage-1 mode {mode!r}")


def ood_score(
    name: str,
    patch_vectors: np.ndarray,
    reps: PromptReps,
    state: AdapterState,
    model: ViGModel,
    topk: TopKConfig,
    energy_cfg: EnergyConfig,
    tau: float,
    is_id: bool,
    pooling: str = "mean",
    stage1_mode: str = "patch-mean",
    global_vector: np.ndarray | None = None,
    score_mode: str = "energy",
) -> ScoreRecord:
    """Score one sample: predict, assemble its graph, read the confidence.

    ``patch_vectors`` are raw (pre-adapter) patch embeddings. With the default
    score mode the confidence is the negated energy of the head logits; the
    "mcm" mode falls back to the maximum matching probability.
    """
    patches = np.asarray(patch_vectors, dtype=np.float64)
    if patches.ndim != 2:
        raise DimensionMismatch("patch_vectors must be a (M, d) matrix")

    rep = stage1_image_rep(state, patches, stage1_mode, global_vector)
    probs = positive_probabilities(rep, reps, tau)
    predicted = int(np.argmax(probs))

    if score_mode == "mcm":
        return ScoreRecord(name=name, predicted=predicted, score=float(probs.max()), is_id=is_id)
    if score_mode != "energy":
        raise FormatError(f"unknown score mode {score_mode!r}")

    category = reps.categories[predicted]
    transformed_patches = transform_images(state, patches)
    graph = build_graph(transformed_patches, reps.block(category), topk)
    logits = head_logits(graph, model, pooling)
    return ScoreRecord(
        name=name,
        predicted=predicted,
        score=-energy(logits, energy_cfg.temperature),
        is_id=is_id,
    )


def score_table(
    patch_table: EmbeddingTable,
    reps: PromptReps,
    state: AdapterState,
    model: ViGModel,
    topk: TopKConfig,
    energy_cfg: EnergyConfig,
    tau: float,
    is_id: bool,
    pooling: str = "mean",
    stage1_mode: str = "patch-mean",
    image_table: EmbeddingTable | None = None,
    score_mode: str = "energy",
) -> list[ScoreRecord]:
    """Score every patch-set record of a table, in record order."""
    globals_by_name = image_table.by_name() if image_table is not None else {}
    records = []
    for rec in patch_table.select(Modality.IMAGE_PATCH_SET):
        global_vec = None
        if stage1_mode == "global":
            g = globals_by_name.get(rec.name)
            if g is None:
                raise MissingCategory(f"no ImageGlobal record named {rec.name!r}")
            global_vec = g.vectors[0].astype(np.float64)
        records.append(
            ood_score(
                name=rec.name,
                patch_vectors=rec.vectors.astype(np.float64),
                reps=reps,
                state=state,
                model=model,
                topk=topk,
                energy_cfg=energy_cfg,
                tau=tau,
                is_id=is_id,
                pooling=pooling,
                stage1_mode=stage1_mode,
                global_vector=global_vec,
                score_mode=score_mode,
            )
        )
    return records


# --- rank metrics ----------------------------------------------------------------


def _check_sets(id_scores: Sequence[float], ood_scores: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    id_arr = np.asarray(id_scores, dtype=np.float64)
    ood_arr = np.asarray(ood_scores, dtype=np.float64)
    if id_arr.size == 0 or ood_arr.size == 0:
        raise EmptySet("both score sets must be non-empty")
    return id_arr, ood_arr


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """P(id > ood) + 0.5 P(id = ood) over all pairs, via average ranks."""
    id_arr, ood_arr = _check_sets(id_scores, ood_scores)
    n_id, n_ood = id_arr.size, ood_arr.size
    combined = np.concatenate([id_arr, ood_arr])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum_id = float(ranks[:n_id].sum())
    u_stat = rank_sum_id - n_id * (n_id + 1) / 2.0
    return u_stat / (n_id * n_ood)


def aupr(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Area under precision-recall with ID as the positive class.

    Step-wise interpolation: sum (R_k - R_{k-1}) * P_k over the descending
    unique score thresholds.
    """
    id_arr, ood_arr = _check_sets(id_scores, ood_scores)
    n_id = id_arr.size
    scores = np.concatenate([id_arr, ood_arr])
    is_positive = np.concatenate([np.ones(n_id, dtype=bool), np.zeros(ood_arr.size, dtype=bool)])
    order = np.argsort(-scores, kind="mergesort")
    scores = scores[order]
    is_positive = is_positive[order]

    area = 0.0
    prev_recall = 0.0
    tp = 0
    fp = 0
    i = 0
    total = scores.size
    while i < total:
        j = i
        while j + 1 < total and scores[j + 1] == scores[i]:
            j += 1
        tp += int(is_positive[i : j + 1].sum())
        fp += (j - i + 1) - int(is_positive[i : j + 1].sum())
        recall = tp / n_id
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def fpr95(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """OOD false-positive rate at the largest threshold keeping ID TPR >= 95%."""
    id_arr, ood_arr = _check_sets(id_scores, ood_scores)
    n_id = id_arr.size
    k = -((-19 * n_id) // 20)  # smallest k with k/n_id >= 0.95, in exact integers
    threshold = np.sort(id_arr)[::-1][k - 1]
    return float(np.mean(ood_arr >= threshold))


def id_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches between predictions and ground-truth labels."""
    preds = list(predictions)
    truth = list(labels)
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truth)} labels")
    if not preds:
        raise EmptySet("id_accuracy needs at least one prediction")
    return sum(int(p) == int(t) for p, t in zip(preds, truth)) / len(preds)


# --- score CSV -----------------------------------------------------------------

SCORE_HEADER = "name,predicted,score,is_id"


def export_scores(records: Sequence[ScoreRecord]) -> str:
    """Score CSV with full float precision (repr round-trips exactly)."""
    lines = [SCORE_HEADER]
    for rec in records:
        if "," in rec.name or "\n" in rec.name:
            raise FormatError(f"record name {rec.name!r} cannot be written to a score CSV")
        lines.append(f"{rec.name},{rec.predicted},{repr(rec.score)},{int(rec.is_id)}")
    return "\n".join(lines) + "\n"


def parse_scores(text: str) -> list[ScoreRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != SCORE_HEADER:
        raise FormatError("score CSV must start with the standard header")
    records = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"malformed score row: {line!r}")
        records.append(
            ScoreRecord(
                name=parts[0],
                predicted=int(parts[1]),
                score=float(parts[2]),
                is_id=bool(int(parts[3])),
            )
        )
    return records


def compute_report(
    id_records: Sequence[ScoreRecord],
    ood_records: Sequence[ScoreRecord],
    id_labels: dict[str, int] | None = None,
) -> MetricReport:
    """All four metrics from score records; ID accuracy needs truth labels."""
    id_scores = [r.score for r in id_records]
    ood_scores = [r.score for r in ood_records]
    acc = None
    if id_labels is not None:
        pairs = [(r.predicted, id_labels[r.name]) for r in id_records if r.name in id_labels]
        if len(pairs) != len(id_records):
            missing = [r.name for r in id_records if r.name not in id_labels]
            raise MissingCategory(f"no truth label for records: {missing[:3]}...")
        acc = id_accuracy([p for p, _ in pairs], [t for _, t in pairs])
    return MetricReport(
        auroc=auroc(id_scores, ood_scores),
        aupr=aupr(id_scores, ood_scores),
        fpr95=fpr95(id_scores, ood_scores),
        id_acc=acc,
    )
