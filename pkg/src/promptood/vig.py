"""Isotropic graph network over the multi-modal graph, plus the energy head.

Each grapher block aggregates with max-relative messages (elementwise max of
neighbor-minus-self differences, zero for isolated nodes), applies a residual
two-layer update, then a residual feed-forward sub-block. The classification
head reads the mean of the patch-slice outputs; the training objective is
cross-entropy plus a squared hinge on the energy of the logits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import (
    BadMagic,
    BadVersion,
    DimensionMismatch,
    FormatError,
    Truncated,
)
from .graph import MultiModalGraph

_MASKED = -1e30  # additive sentinel excluded by the max over neighbors


@dataclass
class GrapherLayerParams:
    w1: np.ndarray  # (d, 2d)
    b1: np.ndarray  # (d,)
    w2: np.ndarray  # (d, d)
    b2: np.ndarray  # (d,)
    f1: np.ndarray  # (d_h, d)
    c1: np.ndarray  # (d_h,)
    f2: np.ndarray  # (d, d_h)
    c2: np.ndarray  # (d,)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.f1, self.c1, self.f2, self.c2)


@dataclass
class ViGModel:
    layers: list[GrapherLayerParams]
    head_w: np.ndarray  # (|C|, d)
    head_b: np.ndarray  # (|C|,)

    def __post_init__(self):
        if not self.layers:
            raise FormatError("a ViG model needs at least one grapher layer")
        d = self.dim
        d_h = self.hidden_dim
        if d_h < d:
            raise FormatError(f"hidden dim {d_h} must be at least the node dim {d}")
        for i, layer in enumerate(self.layers):
            shapes = {
                "w1": (d, 2 * d), "b1": (d,), "w2": (d, d), "b2": (d,),
                "f1": (d_h, d), "c1": (d_h,), "f2": (d, d_h), "c2": (d,),
            }
            for name, expected in shapes.items():
                arr = getattr(layer, name)
                if arr.shape != expected:
                    raise DimensionMismatch(
                        f"layer {i} {name} has shape {arr.shape}, expected {expected}"
                    )
                if not np.all(np.isfinite(arr)):
                    raise FormatError(f"layer {i} {name} has non-finite entries")
        if self.head_w.shape[1] != d or self.head_b.shape != (self.head_w.shape[0],):
            raise DimensionMismatch("classification head does not match the node dim")

    @property
    def dim(self) -> int:
        return int(self.layers[0].w2.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.layers[0].f1.shape[0])

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return int(self.head_w.shape[0])


def init_vig(
    dim: int, hidden_dim: int, num_layers: int, num_classes: int, seed: int = 0
) -> ViGModel:
    """Gaussian fan-in initialization, biases zero; deterministic per seed."""
    rng = np.random.default_rng(seed)

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    layers = [
        GrapherLayerParams(
            w1=mat(dim, 2 * dim),
            b1=np.zeros(dim),
            w2=mat(dim, dim),
            b2=np.zeros(dim),
            f1=mat(hidden_dim, dim),
            c1=np.zeros(hidden_dim),
            f2=mat(dim, hidden_dim),
            c2=np.zeros(dim),
        )
        for _ in range(num_layers)
    ]
    return ViGModel(layers=layers, head_w=mat(num_classes, dim), head_b=np.zeros(num_classes))


@dataclass(frozen=True)
class EnergyConfig:
    temperature: float = 1.0
    margin_in: float = 10.0
    lambda_energy: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise FormatError("energy temperature must be positive")
        if self.lambda_energy < 0:
            raise FormatError("lambda_energy must be non-negative")


def energy(logits: np.ndarray, temperature: float = 1.0) -> float:
    """-T * log sum_i exp(logit_i / T), computed with a max shift."""
    if temperature <= 0:
        raise FormatError("energy temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    m = float(logits.max())
    return -m - temperature * float(
        np.log(np.exp((logits - m) / temperature).sum())
    )


# --- tape forward -------------------------------------------------------------


@dataclass(frozen=True)
class _NeighborData:
    """Padded in-neighbor indices with masks, precomputed once per graph."""

    indices: np.ndarray  # (n, kmax) int
    gate: np.ndarray  # (n, kmax, 1) 1.0 where a real neighbor sits
    offset: np.ndarray  # (n, kmax, 1) 0 where real, _MASKED where padding
    has_any: np.ndarray  # (n, 1) 1.0 for nodes with at least one in-neighbor


def _neighbor_data(neighbors: list[list[int]]) -> _NeighborData:
    n = len(neighbors)
    kmax = max((len(lst) for lst in neighbors), default=0)
    kmax = max(kmax, 1)
    indices = np.zeros((n, kmax), dtype=np.int64)
    gate = np.zeros((n, kmax, 1))
    for i, lst in enumerate(neighbors):
        for slot, j in enumerate(lst):
            indices[i, slot] = j
            gate[i, slot, 0] = 1.0
    offset = (1.0 - gate) * _MASKED  # 0 where real, _MASKED where padding
    has_any = (gate.sum(axis=1) > 0).astype(np.float64)
    return _NeighborData(indices=indices, gate=gate, offset=offset, has_any=has_any)


def neighbor_data_for(graph: MultiModalGraph) -> _NeighborData:
    return _neighbor_data(graph.in_neighbors())


def _grapher_step(h: Var, nd: _NeighborData, layer: dict[str, Var]) -> Var:
    n, d = h.shape
    gathered = h.take_rows(nd.indices)  # (n, kmax, d)
    diffs = gathered - h.reshape(n, 1, d)
    masked = diffs * ad.constant(nd.gate) + ad.constant(nd.offset)
    messages = masked.max(axis=1) * ad.constant(nd.has_any)  # zero for isolated nodes

    cat = ad.concat([h, messages], axis=1)  # (n, 2d)
    u = (cat @ layer["w1"].T + layer["b1"]).relu() @ layer["w2"].T + layer["b2"] + h
    ffn = (u @ layer["f1"].T + layer["c1"]).relu() @ layer["f2"].T + layer["c2"] + u
    return ffn


def _layer_vars(model: ViGModel, make) -> list[dict[str, Var]]:
    names = ("w1", "b1", "w2", "b2", "f1", "c1", "f2", "c2")
    return [
        {name: make(getattr(layer, name)) for name in names} for layer in model.layers
    ]


def grapher_forward(
    node_features: np.ndarray,
    neighbors: MultiModalGraph | list[list[int]],
    layer: GrapherLayerParams,
) -> np.ndarray:
    """One grapher block applied to raw node features (value only)."""
    if isinstance(neighbors, MultiModalGraph):
        neighbors = neighbors.in_neighbors()
    nd = _neighbor_data(neighbors)
    h = ad.constant(np.asarray(node_features, dtype=np.float64))
    layer_vars = {name: ad.constant(getattr(layer, name)) for name in
                  ("w1", "b1", "w2", "b2", "f1", "c1", "f2", "c2")}
    return _grapher_step(h, nd, layer_vars).value


def vig_forward(graph: MultiModalGraph, model: ViGModel) -> np.ndarray:
    """Node representations after all grapher blocks over the fixed graph."""
    feats = graph.node_features()
    if feats.shape[1] != model.dim:
        raise DimensionMismatch(f"graph dim {feats.shape[1]} != model dim {model.dim}")
    nd = neighbor_data_for(graph)
    h = ad.constant(feats)
    for layer_vars in _layer_vars(model, ad.constant):
        h = _grapher_step(h, nd, layer_vars)
    return h.value


def pool_patches(node_reps: np.ndarray, num_patches: int, mode: str = "mean") -> np.ndarray:
    """Graph-level vector from the first num_patches node outputs only."""
    node_reps = np.asarray(node_reps, dtype=np.float64)
    if num_patches < 1 or num_patches > node_reps.shape[0]:
        raise DimensionMismatch(f"invalid patch count {num_patches}")
    block = node_reps[:num_patches]
    if mode == "mean":
        return block.mean(axis=0)
    if mode == "max":
        return block.max(axis=0)
    raise FormatError(f"unknown pooling mode {mode!r}")


def _pool_var(h: Var, num_patches: int, mode: str) -> Var:
    block = h[:num_patches]
    if mode == "mean":
        return block.mean(axis=0)
    if mode == "max":
        return block.max(axis=0)
    raise FormatError(f"unknown pooling mode {mode!r}")


def _objective(
    feats: Var,
    nd: _NeighborData,
    num_patches: int,
    label: int,
    layer_vars: list[dict[str, Var]],
    head_w: Var,
    head_b: Var,
    config: EnergyConfig,
    pooling: str,
) -> tuple[Var, Var, Var, Var, Var]:
    """Returns (total, cross_entropy, energy, energy_term, logits) tape nodes."""
    h = feats
    for layer in layer_vars:
        h = _grapher_step(h, nd, layer)
    pooled = _pool_var(h, num_patches, pooling)
    logits = (pooled.reshape(1, -1) @ head_w.T + head_b).reshape(-1)

    ce = ad.logsumexp(logits) - logits[label]
    e_var = ad.logsumexp(logits * (1.0 / config.temperature)) * (-config.temperature)
    energy_term = ((e_var - config.margin_in).relu() ** 2.0) * config.lambda_energy
    total = ce + energy_term
    return total, ce, e_var, energy_term, logits


def vig_loss(
    graph: MultiModalGraph,
    label: int,
    model: ViGModel,
    config: EnergyConfig,
    pooling: str = "mean",
) -> tuple[float, dict[str, float]]:
    """Cross-entropy at the label plus the energy regularizer, with breakdown."""
    if not 0 <= label < model.num_classes:
        raise FormatError(f"label {label} outside 0..{model.num_classes - 1}")
    feats = ad.constant(graph.node_features())
    nd = neighbor_data_for(graph)
    total, ce, e_var, energy_term, _ = _objective(
        feats, nd, graph.num_patches, label,
        _layer_vars(model, ad.constant), ad.constant(model.head_w), ad.constant(model.head_b),
        config, pooling,
    )
    breakdown = {
        "ce": float(ce.item()),
        "energy": float(e_var.item()),
        "energy_term": float(energy_term.item()),
        "total": float(total.item()),
    }
    return breakdown["total"], breakdown


@dataclass
class ViGGradients:
    layers: list[dict[str, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray


def _collect_grads(layer_vars, head_w: Var, head_b: Var, model: ViGModel) -> ViGGradients:
    layers = []
    for lv, layer in zip(layer_vars, model.layers):
        layers.append(
            {
                name: (lv[name].grad if lv[name].grad is not None
                       else np.zeros_like(getattr(layer, name)))
                for name in lv
            }
        )
    return ViGGradients(
        layers=layers,
        head_w=head_w.grad if head_w.grad is not None else np.zeros_like(model.head_w),
        head_b=head_b.grad if head_b.grad is not None else np.zeros_like(model.head_b),
    )


def vig_gradients(
    graph: MultiModalGraph,
    label: int,
    model: ViGModel,
    config: EnergyConfig,
    pooling: str = "mean",
) -> tuple[ViGGradients, float, dict[str, float]]:
    """Exact reverse-mode gradients of vig_loss for every model parameter."""
    feats = ad.constant(graph.node_features())
    nd = neighbor_data_for(graph)
    layer_vars = _layer_vars(model, ad.param)
    head_w = ad.param(model.head_w)
    head_b = ad.param(model.head_b)
    total, ce, e_var, energy_term, _ = _objective(
        feats, nd, graph.num_patches, label, layer_vars, head_w, head_b, config, pooling
    )
    ad.backward(total)
    breakdown = {
        "ce": float(ce.item()),
        "energy": float(e_var.item()),
        "energy_term": float(energy_term.item()),
        "total": float(total.item()),
    }
    return _collect_grads(layer_vars, head_w, head_b, model), breakdown["total"], breakdown


def input_feature_gradients(
    graph: MultiModalGraph,
    label: int,
    model: ViGModel,
    config: EnergyConfig,
    pooling: str = "mean",
) -> np.ndarray:
    """Gradient of the objective w.r.t. the input node features (diagnostic)."""
    feats = ad.param(graph.node_features())
    nd = neighbor_data_for(graph)
    total, _, _, _, _ = _objective(
        feats, nd, graph.num_patches, label,
        _layer_vars(model, ad.constant), ad.constant(model.head_w), ad.constant(model.head_b),
        config, pooling,
    )
    ad.backward(total)
    return feats.grad if feats.grad is not None else np.zeros_like(feats.value)


def head_logits(graph: MultiModalGraph, model: ViGModel, pooling: str = "mean") -> np.ndarray:
    """Classification logits of one graph (forward only)."""
    reps = vig_forward(graph, model)
    pooled = pool_patches(reps, graph.num_patches, pooling)
    return model.head_w @ pooled + model.head_b


# --- training loop --------------------------------------------------------------


@dataclass
class ViGTrainSettings:
    learning_rate: float = 0.05
    epochs: int = 100
    seed: int = 0
    pooling: str = "mean"


def _apply_update(model: ViGModel, grads: ViGGradients, lr: float) -> ViGModel:
    layers = []
    for layer, g in zip(model.layers, grads.layers):
        layers.append(
            GrapherLayerParams(
                **{name: getattr(layer, name) - lr * g[name] for name in g}
            )
        )
    return ViGModel(
        layers=layers,
        head_w=model.head_w - lr * grads.head_w,
        head_b=model.head_b - lr * grads.head_b,
    )


def train_vig(
    graphs: Sequence[MultiModalGraph],
    labels: Sequence[int],
    model: ViGModel,
    config: EnergyConfig,
    settings: ViGTrainSettings,
) -> tuple[ViGModel, list[dict[str, float]]]:
    """Full-batch gradient descent over the training graphs.

    One update per epoch from the mean per-sample gradient; the trace records
    the mean loss terms and ID accuracy measured before each update.
    """
    if len(graphs) != len(labels):
        raise DimensionMismatch("graphs and labels disagree on length")
    if not graphs:
        raise FormatError("train_vig needs at least one graph")
    for g in graphs:
        if g.dim != model.dim:
            raise DimensionMismatch(f"graph dim {g.dim} != model dim {model.dim}")

    cached = [
        (ad.constant(g.node_features()), neighbor_data_for(g), g.num_patches)
        for g in graphs
    ]
    trace: list[dict[str, float]] = []
    count = len(graphs)
    for epoch in range(settings.epochs):
        layer_vars = _layer_vars(model, ad.param)
        head_w = ad.param(model.head_w)
        head_b = ad.param(model.head_b)

        sample_totals: list[Var] = []
        ce_sum = 0.0
        eterm_sum = 0.0
        correct = 0
        for (feats, nd, m), label in zip(cached, labels):
            total, ce, _, energy_term, logits = _objective(
                feats, nd, m, int(label), layer_vars, head_w, head_b,
                config, settings.pooling,
            )
            sample_totals.append(total)
            ce_sum += float(ce.item())
            eterm_sum += float(energy_term.item())
            if int(np.argmax(logits.value)) == int(label):
                correct += 1
        mean_total = sum(sample_totals[1:], start=sample_totals[0]) * (1.0 / count)
        ad.backward(mean_total)

        trace.append(
            {
                "epoch": epoch,
                "loss": float(mean_total.item()),
                "ce": ce_sum / count,
                "energy_term": eterm_sum / count,
                "id_acc": correct / count,
            }
        )
        grads = _collect_grads(layer_vars, head_w, head_b, model)
        model = _apply_update(model, grads, settings.learning_rate)
    return model, trace


VIG_TRACE_COLUMNS = ("epoch", "loss", "ce", "energy_term", "id_acc")


def format_vig_trace(trace: list[dict[str, float]]) -> str:
    lines = [",".join(VIG_TRACE_COLUMNS)]
    for row in trace:
        lines.append(
            ",".join(
                str(int(row[col])) if col == "epoch" else repr(float(row[col]))
                for col in VIG_TRACE_COLUMNS
            )
        )
    return "\n".join(lines) + "\n"


# --- checkpoint format -----------------------------------------------------------
#
# PVIG v1: magic "PVIG", version u32, then (d, d_h, L, |C|) as u32 LE, then
# float32 LE parameters in order: per layer w1, b1, w2, b2, f1, c1, f2, c2
# (row-major), then head_w, head_b.

VIG_MAGIC = b"PVIG"
_VIG_HEADER = struct.Struct("<4sIIIII")


def save_vig_model(model: ViGModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _VIG_HEADER.pack(
                VIG_MAGIC, 1, model.dim, model.hidden_dim, model.num_layers, model.num_classes
            )
        )
        for layer in model.layers:
            for arr in layer.arrays():
                fh.write(arr.astype("<f4").tobytes())
        fh.write(model.head_w.astype("<f4").tobytes())
        fh.write(model.head_b.astype("<f4").tobytes())


def load_vig_model(path: str | Path) -> ViGModel:
    with open(path, "rb") as fh:
        header = fh.read(_VIG_HEADER.size)
        if len(header) != _VIG_HEADER.size:
            raise Truncated("ViG checkpoint shorter than its header")
        magic, version, d, d_h, n_layers, n_classes = _VIG_HEADER.unpack(header)
        if magic != VIG_MAGIC:
            raise BadMagic(f"expected {VIG_MAGIC!r}, found {magic!r}")
        if version != 1:
            raise BadVersion(f"unsupported ViG checkpoint version {version}")

        def read_mat(rows: int, cols: int) -> np.ndarray:
            raw = fh.read(rows * cols * 4)
            if len(raw) != rows * cols * 4:
                raise Truncated("ViG checkpoint ends mid-parameter")
            return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)

        def read_vec(size: int) -> np.ndarray:
            return read_mat(1, size).reshape(size)

        layers = []
        for _ in range(n_layers):
            layers.append(
                GrapherLayerParams(
                    w1=read_mat(d, 2 * d), b1=read_vec(d),
                    w2=read_mat(d, d), b2=read_vec(d),
                    f1=read_mat(d_h, d), c1=read_vec(d_h),
                    f2=read_mat(d, d_h), c2=read_vec(d),
                )
            )
        head_w = read_mat(n_classes, d)
        head_b = read_vec(n_classes)
        if fh.read(1):
            raise FormatError("trailing bytes after ViG parameters")
    return ViGModel(layers=layers, head_w=head_w, head_b=head_b)
