"""Learnable text/image adapter matrices and the five alignment losses.

The adapters are plain square matrices applied after the frozen encoders,
followed by re-normalization, so every similarity below is a cosine. The
objective combines:

  * pir  - category-level softmax alignment of images with their positives
  * ppd  - pairwise |cos| penalty among each category's N positives
  * nir  - binary discrimination between mirrored negative pairs
  * nnd  - pairwise |cos| penalty among each sibling's N negatives
  * npd  - |cos| penalty between each positive and its paired negative

weighted as (pir + lambda_pos * ppd) + (nir + lambda_neg * nnd) + npd.
Gradients are exact reverse-mode derivatives of this objective, including
the normalization Jacobian; |x| uses subgradient 0 at 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import (
    BadMagic,
    BadVersion,
    DimensionMismatch,
    EmptyNegativeSet,
    FormatError,
    MissingCategory,
    Truncated,
    ZeroVector,
)
from .prompts import NEGATIVE, PromptBank
from .store import EmbeddingTable, Modality, l2_normalize

ALL_TERMS = ("pir", "ppd", "nir", "nnd", "npd")


@dataclass
class AdapterState:
    """The learnable d x d matrices for the text and image sides."""

    w_text: np.ndarray
    w_image: np.ndarray

    def __post_init__(self):
        self.w_text = np.asarray(self.w_text, dtype=np.float64)
        self.w_image = np.asarray(self.w_image, dtype=np.float64)
        for name, w in (("w_text", self.w_text), ("w_image", self.w_image)):
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise DimensionMismatch(f"{name} must be square, got shape {w.shape}")
            if not np.all(np.isfinite(w)):
                raise FormatError(f"{name} contains non-finite entries")
        if self.w_text.shape != self.w_image.shape:
            raise DimensionMismatch("text and image adapters disagree on dimension")

    @property
    def dim(self) -> int:
        return int(self.w_text.shape[0])


def init_adapter_state(dim: int, seed: int = 0, noise: float = 1e-3) -> AdapterState:
    """Identity plus small Gaussian noise: start at the frozen representation."""
    rng = np.random.default_rng(seed)
    eye = np.eye(dim)
    return AdapterState(
        w_text=eye + noise * rng.standard_normal((dim, dim)),
        w_image=eye + noise * rng.standard_normal((dim, dim)),
    )


@dataclass(frozen=True)
class LossWeights:
    lambda_pos: float = 1e-5
    lambda_neg: float = 1e-3
    tau: float = 0.01

    def __post_init__(self):
        if self.tau <= 0:
            raise FormatError("tau must be positive")
        if self.lambda_pos < 0 or self.lambda_neg < 0:
            raise FormatError("loss weights must be non-negative")


@dataclass(frozen=True)
class PromptReps:
    """Transformed unit prompt representations, one block per category.

    Row j of a block is the prompt with flat index j+1, so positives occupy
    rows 0..N-1 and the negatives borrowed from the rank-r sibling occupy
    rows r*N..(r+1)*N-1.
    """

    bank: PromptBank
    blocks: dict[str, np.ndarray]

    @property
    def categories(self) -> tuple[str, ...]:
        return self.bank.categories

    @property
    def n_features(self) -> int:
        return self.bank.n_features

    @property
    def dim(self) -> int:
        first = next(iter(self.blocks.values()))
        return int(first.shape[1])

    def block(self, category: str) -> np.ndarray:
        return self.blocks[category]

    def positives(self, category: str) -> np.ndarray:
        return self.blocks[category][: self.n_features]

    def negative(self, category: str, source: str, position: int) -> np.ndarray:
        row = self.bank.flat_index(category, NEGATIVE, source, position) - 1
        return self.blocks[category][row]


def transform(state: AdapterState, raw: np.ndarray, side: str) -> np.ndarray:
    """Apply the chosen adapter and re-normalize to unit length."""
    if side == "text":
        w = state.w_text
    elif side == "image":
        w = state.w_image
    else:
        raise FormatError(f"side must be 'text' or 'image', got {side!r}")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != state.dim:
        raise DimensionMismatch(f"vector dim {raw.shape[-1]} != adapter dim {state.dim}")
    return l2_normalize(w @ raw)


def raw_prompt_blocks(table: EmbeddingTable, bank: PromptBank) -> dict[str, np.ndarray]:
    """Collect raw prompt embeddings into per-category flat-index-ordered blocks.

    Record names must follow the extractor convention "{category}#{flat_index}"
    and cover every flat index of every category.
    """
    by_name = table.by_name()
    blocks: dict[str, np.ndarray] = {}
    for category in bank.categories:
        rows = []
        for entry in bank.block(category):
            name = f"{category}#{entry.flat_index}"
            rec = by_name.get(name)
            if rec is None:
                raise MissingCategory(f"prompt table lacks record {name!r}")
            rows.append(rec.vectors[0].astype(np.float64))
        blocks[category] = np.stack(rows)
    return blocks


def transform_prompt_reps(
    state: AdapterState, raw_blocks: dict[str, np.ndarray], bank: PromptBank
) -> PromptReps:
    blocks = {}
    for category, raw in raw_blocks.items():
        if raw.shape[1] != state.dim:
            raise DimensionMismatch(
                f"prompt block {category!r} dim {raw.shape[1]} != adapter dim {state.dim}"
            )
        transformed = raw @ state.w_text.T
        norms = np.linalg.norm(transformed, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ZeroVector(f"adapter collapsed a prompt of {category!r} to zero")
        blocks[category] = transformed / norms
    return PromptReps(bank=bank, blocks=blocks)


def transform_images(state: AdapterState, images: np.ndarray) -> np.ndarray:
    """Unit rows of W_image applied to a (B, d) matrix of raw image vectors."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1] != state.dim:
        raise DimensionMismatch(f"image dim {images.shape[1]} != adapter dim {state.dim}")
    transformed = images @ state.w_image.T
    norms = np.linalg.norm(transformed, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVector("adapter collapsed an image representation to zero")
    return transformed / norms


# --- matching probabilities --------------------------------------------------


def positive_probabilities(image_rep: np.ndarray, reps: PromptReps, tau: float) -> np.ndarray:
    """Category-level softmax over all positives, grouped N per category."""
    sims = np.stack(
        [reps.positives(c) @ np.asarray(image_rep, dtype=np.float64) for c in reps.categories]
    )  # (|C|, N)
    logits = sims / tau
    shift = logits.max()
    weights = np.exp(logits - shift).sum(axis=1)
    return weights / weights.sum()


def match_prob_positive(
    image_rep: np.ndarray, reps: PromptReps, target: str | int, tau: float
) -> float:
    """Probability that the image matches the target category's positives."""
    probs = positive_probabilities(image_rep, reps, tau)
    idx = target if isinstance(target, int) else reps.categories.index(target)
    return float(probs[idx])


def s_minus(image_rep: np.ndarray, reps: PromptReps, i: str, c: str, n: int) -> float:
    """Binary softmax between the mirrored negatives t^{i-c}_n and t^{c-i}_n."""
    img = np.asarray(image_rep, dtype=np.float64)
    sim_a = float(reps.negative(i, c, n) @ img)
    sim_b = float(reps.negative(c, i, n) @ img)
    diff = sim_a - sim_b
    if diff >= 0:
        return float(1.0 / (1.0 + np.exp(-diff)))
    return float(np.exp(diff) / (1.0 + np.exp(diff)))


def p_minus(image_rep: np.ndarray, reps: PromptReps, i: str) -> float:
    """Sum of s_minus over the (s-1)*N sibling/feature pairs of category i.

    Raises:
        EmptyNegativeSet: category i sits alone in its super-class.
    """
    siblings = reps.bank.partition.siblings(i)
    if not siblings:
        raise EmptyNegativeSet(f"category {i!r} has no super-class siblings")
    total = 0.0
    for c in siblings:
        for n in range(1, reps.n_features + 1):
            total += s_minus(image_rep, reps, i, c, n)
    return total


# --- loss terms on the tape --------------------------------------------------


def _upper_triangle_abs_sum(gram: Var, n: int) -> Var:
    mask = np.triu(np.ones((n, n)), k=1)
    return (gram.abs() * ad.constant(mask)).sum()


def _build_terms(
    img_hat: Var | None,
    labels: np.ndarray | None,
    blocks: dict[str, Var],
    bank: PromptBank,
    tau: float,
    terms: Iterable[str],
) -> dict[str, Var]:
    """Assemble the requested loss terms over already-transformed unit reps."""
    requested = set(terms)
    unknown = requested.difference(ALL_TERMS)
    if unknown:
        raise FormatError(f"unknown loss terms: {sorted(unknown)}")
    categories = bank.categories
    n = bank.n_features
    out: dict[str, Var] = {}

    if "pir" in requested:
        assert img_hat is not None and labels is not None
        positives = ad.concat([blocks[c][:n] for c in categories], axis=0)  # (|C|*N, d)
        sims = (img_hat @ positives.T) * (1.0 / tau)  # (B, |C|*N)
        batch = img_hat.shape[0]
        lse_all = ad.logsumexp(sims, axis=1)  # (B,)
        grouped = sims.reshape(batch, len(categories), n)
        label_rows = grouped[np.arange(batch), labels]  # (B, N)
        lse_label = ad.logsumexp(label_rows, axis=1)
        out["pir"] = (lse_all - lse_label).mean()

    if "ppd" in requested:
        total = ad.constant(0.0)
        for c in categories:
            pos = blocks[c][:n]
            total = total + _upper_triangle_abs_sum(pos @ pos.T, n)
        out["ppd"] = total

    if "nir" in requested:
        assert img_hat is not None and labels is not None
        batch = img_hat.shape[0]
        total = ad.constant(0.0)
        for idx, cat in enumerate(categories):
            rows = np.flatnonzero(labels == idx)
            siblings = bank.partition.siblings(cat)
            if rows.size == 0 or not siblings:
                continue  # singleton super-classes contribute 0
            own = blocks[cat][n:]  # t^{cat-c}_n ordered by (sibling rank, n)
            mirrored = ad.concat(
                [
                    blocks[c][
                        bank.flat_index(c, NEGATIVE, cat, 1)
                        - 1 : bank.flat_index(c, NEGATIVE, cat, n)
                    ]
                    for c in siblings
                ],
                axis=0,
            )
            imgs = img_hat.take_rows(rows)
            scores = ((imgs @ own.T) - (imgs @ mirrored.T)).sigmoid()
            p_neg = scores.sum(axis=1)
            scale = 1.0 / (len(siblings) * n)
            total = total + (p_neg.log() * -scale).sum()
        out["nir"] = total * (1.0 / batch)

    if "nnd" in requested:
        total = ad.constant(0.0)
        for c in categories:
            for rank in range(1, len(bank.partition.siblings(c)) + 1):
                neg = blocks[c][rank * n : (rank + 1) * n]
                total = total + _upper_triangle_abs_sum(neg @ neg.T, n)
        out["nnd"] = total

    if "npd" in requested:
        total = ad.constant(0.0)
        for c in categories:
            pos = blocks[c][:n]
            for d in bank.partition.siblings(c):
                lo = bank.flat_index(d, NEGATIVE, c, 1) - 1
                paired = blocks[d][lo : lo + n]  # t^{d-c}, positions 1..N
                total = total + (pos * paired).sum(axis=1).abs().sum()
        out["npd"] = total

    return out


def _weighted_total(term_vars: dict[str, Var], weights: LossWeights) -> Var:
    total = ad.constant(0.0)
    if "pir" in term_vars:
        total = total + term_vars["pir"]
    if "ppd" in term_vars:
        total = total + term_vars["ppd"] * weights.lambda_pos
    if "nir" in term_vars:
        total = total + term_vars["nir"]
    if "nnd" in term_vars:
        total = total + term_vars["nnd"] * weights.lambda_neg
    if "npd" in term_vars:
        total = total + term_vars["npd"]
    return total


@dataclass(frozen=True)
class AdapterBatch:
    """Raw inputs of one optimization step, in encoder (pre-adapter) space."""

    images: np.ndarray  # (B, d) raw image vectors
    labels: np.ndarray  # (B,) indices into bank.categories
    prompt_blocks: dict[str, np.ndarray]  # category -> (s*N, d) raw prompt vectors
    bank: PromptBank

    def __post_init__(self):
        object.__setattr__(self, "images", np.asarray(self.images, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch("images and labels disagree on batch size")
        n_cat = len(self.bank.categories)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_cat):
            raise FormatError("labels must index into the bank's categories")


def _evaluate(
    batch: AdapterBatch,
    state: AdapterState,
    weights: LossWeights,
    terms: Sequence[str],
    with_grads: bool,
) -> tuple[float, dict[str, float], np.ndarray | None, np.ndarray | None]:
    make = ad.param if with_grads else ad.constant
    w_text = make(state.w_text)
    w_image = make(state.w_image)

    img_hat = ad.row_normalize(ad.constant(batch.images) @ w_image.T)
    blocks = {
        c: ad.row_normalize(ad.constant(batch.prompt_blocks[c]) @ w_text.T)
        for c in batch.bank.categories
    }
    term_vars = _build_terms(img_hat, batch.labels, blocks, batch.bank, weights.tau, terms)
    total = _weighted_total(term_vars, weights)

    breakdown = {f"l_{name}": float(term_vars[name].item()) if name in term_vars else 0.0
                 for name in ALL_TERMS}
    breakdown["total"] = float(total.item())

    if not with_grads:
        return breakdown["total"], breakdown, None, None
    ad.backward(total)
    g_text = w_text.grad if w_text.grad is not None else np.zeros_like(state.w_text)
    g_image = w_image.grad if w_image.grad is not None else np.zeros_like(state.w_image)
    return breakdown["total"], breakdown, g_text, g_image


def total_adapter_loss(
    batch: AdapterBatch,
    state: AdapterState,
    weights: LossWeights,
    terms: Sequence[str] = ALL_TERMS,
) -> tuple[float, dict[str, float]]:
    """Weighted objective value plus the per-term breakdown (raw term values)."""
    total, breakdown, _, _ = _evaluate(batch, state, weights, terms, with_grads=False)
    return total, breakdown


def adapter_gradients(
    batch: AdapterBatch,
    state: AdapterState,
    weights: LossWeights,
    terms: Sequence[str] = ALL_TERMS,
) -> tuple[np.ndarray, np.ndarray, float, dict[str, float]]:
    """Exact gradients of the weighted objective w.r.t. W_text and W_image."""
    total, breakdown, g_text, g_image = _evaluate(batch, state, weights, terms, with_grads=True)
    return g_text, g_image, total, breakdown


# --- per-term public views (values over already-transformed reps) -------------


def _terms_from_reps(
    reps: PromptReps,
    terms: Sequence[str],
    image_reps: np.ndarray | None = None,
    labels: Sequence[int] | None = None,
    tau: float = 1.0,
) -> dict[str, float]:
    blocks = {c: ad.constant(reps.block(c)) for c in reps.categories}
    img_hat = None if image_reps is None else ad.constant(np.asarray(image_reps, dtype=np.float64))
    labels_arr = None if labels is None else np.asarray(labels, dtype=np.int64)
    term_vars = _build_terms(img_hat, labels_arr, blocks, reps.bank, tau, terms)
    return {name: float(v.item()) for name, v in term_vars.items()}


def loss_pir(
    image_reps: np.ndarray, labels: Sequence[int], reps: PromptReps, weights: LossWeights
) -> float:
    """Mean -log p+ over the batch, p+ being the category-level softmax."""
    return _terms_from_reps(reps, ("pir",), image_reps, labels, weights.tau)["pir"]


def loss_ppd(reps: PromptReps) -> float:
    return _terms_from_reps(reps, ("ppd",))["ppd"]


def loss_nir(image_reps: np.ndarray, labels: Sequence[int], reps: PromptReps) -> float:
    return _terms_from_reps(reps, ("nir",), image_reps, labels)["nir"]


def loss_nnd(reps: PromptReps) -> float:
    return _terms_from_reps(reps, ("nnd",))["nnd"]


def loss_npd(reps: PromptReps) -> float:
    return _terms_from_reps(reps, ("npd",))["npd"]


# --- optimization loop --------------------------------------------------------


@dataclass
class AdapterTrainSettings:
    learning_rate: float = 1e-2
    epochs: int = 200
    seed: int = 0
    init_noise: float = 1e-3
    terms: tuple[str, ...] = ALL_TERMS


def batch_from_tables(
    images: EmbeddingTable, prompt_table: EmbeddingTable, bank: PromptBank
) -> AdapterBatch:
    """Assemble the full-dataset batch from PEMB tables."""
    if images.dim != prompt_table.dim:
        raise DimensionMismatch(
            f"image table dim {images.dim} != prompt table dim {prompt_table.dim}"
        )
    recs = images.select(Modality.IMAGE_GLOBAL)
    if not recs:
        raise FormatError("image table has no ImageGlobal records")
    vecs = np.stack([rec.vectors[0].astype(np.float64) for rec in recs])
    labels = np.array([rec.label for rec in recs], dtype=np.int64)
    return AdapterBatch(
        images=vecs,
        labels=labels,
        prompt_blocks=raw_prompt_blocks(prompt_table, bank),
        bank=bank,
    )


def optimize_adapters(
    images: EmbeddingTable,
    prompt_table: EmbeddingTable,
    bank: PromptBank,
    weights: LossWeights,
    settings: AdapterTrainSettings,
) -> tuple[AdapterState, list[dict[str, float]]]:
    """Plain full-batch gradient descent on the weighted adapter objective.

    Returns the final state and one breakdown row per epoch (the loss measured
    before that epoch's update), deterministic for a fixed seed.
    """
    batch = batch_from_tables(images, prompt_table, bank)
    state = init_adapter_state(images.dim, seed=settings.seed, noise=settings.init_noise)
    trace: list[dict[str, float]] = []
    for epoch in range(settings.epochs):
        g_text, g_image, _, breakdown = adapter_gradients(batch, state, weights, settings.terms)
        breakdown["epoch"] = epoch
        trace.append(breakdown)
        state = AdapterState(
            w_text=state.w_text - settings.learning_rate * g_text,
            w_image=state.w_image - settings.learning_rate * g_image,
        )
    return state, trace


TRACE_COLUMNS = ("epoch", "l_pir", "l_ppd", "l_nir", "l_nnd", "l_npd", "total")


def format_loss_trace(trace: list[dict[str, float]]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        lines.append(
            ",".join(
                str(int(row[col])) if col == "epoch" else repr(float(row[col]))
                for col in TRACE_COLUMNS
            )
        )
    return "\n".join(lines) + "\n"


# --- checkpoint format ---------------------------------------------------------

ADAPTER_MAGIC = b"PADP"
_ADP_HEADER = struct.Struct("<4sII")


def save_adapter_state(state: AdapterState, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_ADP_HEADER.pack(ADAPTER_MAGIC, 1, state.dim))
        fh.write(state.w_text.astype("<f4").tobytes())
        fh.write(state.w_image.astype("<f4").tobytes())


def load_adapter_state(path: str | Path) -> AdapterState:
    with open(path, "rb") as fh:
        header = fh.read(_ADP_HEADER.size)
        if len(header) != _ADP_HEADER.size:
            raise Truncated("adapter checkpoint shorter than its header")
        magic, version, dim = _ADP_HEADER.unpack(header)
        if magic != ADAPTER_MAGIC:
            raise BadMagic(f"expected {ADAPTER_MAGIC!r}, found {magic!r}")
        if version != 1:
            raise BadVersion(f"unsupported adapter checkpoint version {version}")
        need = dim * dim * 4
        raw_t = fh.read(need)
        raw_i = fh.read(need)
        if len(raw_t) != need or len(raw_i) != need:
            raise Truncated("adapter checkpoint ends mid-matrix")
        if fh.read(1):
            raise FormatError("trailing bytes after adapter matrices")
    w_text = np.frombuffer(raw_t, dtype="<f4").reshape(dim, dim).astype(np.float64)
    w_image = np.frombuffer(raw_i, dtype="<f4").reshape(dim, dim).astype(np.float64)
    return AdapterState(w_text=w_text, w_image=w_image)
