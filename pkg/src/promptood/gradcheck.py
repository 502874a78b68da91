"""Central finite-difference verification of every analytic gradient.

Each suite draws randomized small instances, perturbs every parameter entry
by +/- step, and compares the resulting difference quotients against the
reverse-mode gradients. The comparison is the norm of the difference over
the larger of the two norms, so a locally constant objective (both sides
zero) passes with error 0.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapter import (
    ALL_TERMS,
    AdapterBatch,
    AdapterState,
    LossWeights,
    adapter_gradients,
    total_adapter_loss,
)
from .graph import TopKConfig, build_graph
from .prompts import PromptBank, SuperClassPartition, build_prompts, ingest_features
from .store import l2_normalize
from .vig import EnergyConfig, ViGModel, init_vig, vig_gradients, vig_loss

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    max_relative_error: float
    tolerance: float
    elapsed_seconds: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max rel err {self.max_relative_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.trials} trials)"
        )


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Elementwise central finite differences of a scalar function."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    base = x.astype(np.float64).copy()
    it = base.reshape(-1)
    for i in range(it.size):
        original = it[i]
        it[i] = original + step
        up = fn(base)
        it[i] = original - step
        down = fn(base)
        it[i] = original
        flat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return diff / denom


def _random_bank(rng: np.random.Generator) -> PromptBank:
    """A small random partition with at least one multi-member super-class."""
    n_features = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 4))]
    while rng.random() < 0.5 and len(sizes) < 3:
        sizes.append(int(rng.integers(1, 4)))  # occasionally a singleton group
    names = iter(f"cat{i}" for i in range(sum(sizes)))
    groups = {f"group{g}": tuple(next(names) for _ in range(s)) for g, s in enumerate(sizes)}
    partition = SuperClassPartition(groups=groups)
    features = {
        c: [f"trait {c} {n}" for n in range(n_features)] for c in partition.categories()
    }
    return build_prompts(ingest_features(features, n_features), partition)


def _random_adapter_instance(
    rng: np.random.Generator,
) -> tuple[AdapterBatch, AdapterState, LossWeights]:
    bank = _random_bank(rng)
    dim = int(rng.integers(4, 17))
    batch_size = int(rng.integers(2, 5))
    categories = bank.categories
    images = rng.standard_normal((batch_size, dim))
    labels = rng.integers(0, len(categories), size=batch_size)
    blocks = {
        c: rng.standard_normal((len(bank.block(c)), dim)) for c in categories
    }
    batch = AdapterBatch(images=images, labels=labels, prompt_blocks=blocks, bank=bank)
    state = AdapterState(
        w_text=np.eye(dim) + 0.2 * rng.standard_normal((dim, dim)),
        w_image=np.eye(dim) + 0.2 * rng.standard_normal((dim, dim)),
    )
    weights = LossWeights(lambda_pos=0.3, lambda_neg=0.7, tau=0.5)
    return batch, state, weights


def check_adapter_term(
    term: str, seed: int, trials: int = 20, step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> CheckResult:
    """Compare analytic vs finite-difference gradients of one loss term."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        batch, state, weights = _random_adapter_instance(rng)
        g_text, g_image, _, _ = adapter_gradients(batch, state, weights, terms=(term,))

        def value_text(w: np.ndarray) -> float:
            st = AdapterState(w_text=w, w_image=state.w_image)
            return total_adapter_loss(batch, st, weights, terms=(term,))[0]

        def value_image(w: np.ndarray) -> float:
            st = AdapterState(w_text=state.w_text, w_image=w)
            return total_adapter_loss(batch, st, weights, terms=(term,))[0]

        fd_text = central_difference(value_text, state.w_text, step)
        fd_image = central_difference(value_image, state.w_image, step)
        worst = max(worst, relative_error(g_text, fd_text))
        worst = max(worst, relative_error(g_image, fd_image))
    return CheckResult(
        name=f"adapter loss {term}",
        trials=trials,
        max_relative_error=worst,
        tolerance=tolerance,
        elapsed_seconds=time.perf_counter() - start,
    )


def _random_vig_instance(
    rng: np.random.Generator,
) -> tuple:
    dim = int(rng.integers(3, 7))
    num_patches = int(rng.integers(2, 5))
    num_prompts = int(rng.integers(2, 5))
    num_classes = int(rng.integers(2, 5))
    layers = int(rng.integers(1, 3))
    patches = np.stack([l2_normalize(v) for v in rng.standard_normal((num_patches, dim))])
    prompts = np.stack([l2_normalize(v) for v in rng.standard_normal((num_prompts, dim))])
    graph = build_graph(patches, prompts, TopKConfig(k_text=2, k_patch=2, k_cross=2))
    model = init_vig(dim, dim + 2, layers, num_classes, seed=int(rng.integers(0, 2**31)))
    label = int(rng.integers(0, num_classes))
    # mix of active and inactive energy hinges
    margin = float(rng.choice([-10.0, 0.0, 10.0]))
    config = EnergyConfig(temperature=1.0, margin_in=margin, lambda_energy=0.3)
    return graph, label, model, config


def _model_param_arrays(model: ViGModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(model.layers):
        for name in ("w1", "b1", "w2", "b2", "f1", "c1", "f2", "c2"):
            out.append((f"layer{i}.{name}", getattr(layer, name)))
    out.append(("head_w", model.head_w))
    out.append(("head_b", model.head_b))
    return out


def check_vig_objective(
    seed: int, trials: int = 20, step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> CheckResult:
    """Compare analytic vs finite-difference gradients of the full objective."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        graph, label, model, config = _random_vig_instance(rng)
        grads, _, _ = vig_gradients(graph, label, model, config)

        for i, layer in enumerate(model.layers):
            for name in ("w1", "b1", "w2", "b2", "f1", "c1", "f2", "c2"):
                arr = getattr(layer, name)

                def value(candidate: np.ndarray, i=i, name=name) -> float:
                    saved = getattr(model.layers[i], name)
                    setattr(model.layers[i], name, candidate)
                    try:
                        return vig_loss(graph, label, model, config)[0]
                    finally:
                        setattr(model.layers[i], name, saved)

                fd = central_difference(value, arr, step)
                worst = max(worst, relative_error(grads.layers[i][name], fd))

        def value_head_w(candidate: np.ndarray) -> float:
            saved = model.head_w
            model.head_w = candidate
            try:
                return vig_loss(graph, label, model, config)[0]
            finally:
                model.head_w = saved

        def value_head_b(candidate: np.ndarray) -> float:
            saved = model.head_b
            model.head_b = candidate
            try:
                return vig_loss(graph, label, model, config)[0]
            finally:
                model.head_b = saved

        worst = max(worst, relative_error(grads.head_w, central_difference(value_head_w, model.head_w, step)))
        worst = max(worst, relative_error(grads.head_b, central_difference(value_head_b, model.head_b, step)))
    return CheckResult(
        name="vig objective",
        trials=trials,
        max_relative_error=worst,
        tolerance=tolerance,
        elapsed_seconds=time.perf_counter() - start,
    )


def run_all(seed: int = 1, trials: int = 20) -> list[CheckResult]:
    """All six suites: the five adapter loss terms plus the ViG objective."""
    results = [
        check_adapter_term(term, seed=seed + k, trials=trials)
        for k, term in enumerate(ALL_TERMS)
    ]
    results.append(check_vig_objective(seed=seed + len(ALL_TERMS), trials=trials))
    return results
