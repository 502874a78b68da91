"""Super-class partitions, LLM query emission, and prompt construction.

Categories are grouped into super-classes by an upstream (human) decision;
this module validates those groupings, emits the feature-elicitation query
text for each category, and turns ingested feature strings into the indexed
positive/negative prompt bank handed to the embedding extractor.

Flat indexing per category: positions 1..N are the category's own (positive)
prompts; the negatives borrowed from its r-th super-class sibling occupy
positions r*N+1 .. (r+1)*N, with sibling rank r following partition order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateFeature,
    EmptyFeature,
    FormatError,
    MissingCategory,
    OutOfRange,
    UnknownCategory,
    WrongCount,
)
from .store import EmbeddingRecord, EmbeddingTable, Modality, l2_normalize

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class SuperClassPartition:
    """Mapping from super-class name to its ordered member categories."""

    groups: dict[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "groups", {name: tuple(members) for name, members in self.groups.items()}
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "SuperClassPartition":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise FormatError("super-class file must be a JSON object")
        return cls(groups={str(k): tuple(str(c) for c in v) for k, v in data.items()})

    def categories(self) -> tuple[str, ...]:
        """All categories flattened in partition order (the canonical label order)."""
        out: list[str] = []
        for members in self.groups.values():
            out.extend(members)
        return tuple(out)

    def group_of(self, category: str) -> str:
        for name, members in self.groups.items():
            if category in members:
                return name
        raise UnknownCategory(f"category {category!r} is not in the partition")

    def siblings(self, category: str) -> tuple[str, ...]:
        """The other members of the category's super-class, in partition order."""
        members = self.groups[self.group_of(category)]
        return tuple(c for c in members if c != category)


@dataclass(frozen=True)
class Violation:
    kind: str  # "missing" | "duplicate" | "empty_group" | "unknown"
    subject: str


def validate_partition(
    partition: SuperClassPartition, categories: Sequence[str]
) -> list[Violation]:
    """Check that the groups exactly partition the given categories.

    Returns an empty list when the partition is exact; otherwise one
    Violation per problem instead of raising.
    """
    violations: list[Violation] = []
    expected = set(categories)
    seen: set[str] = set()
    for group, members in partition.groups.items():
        if not members:
            violations.append(Violation("empty_group", group))
        for cat in members:
            if cat in seen:
                violations.append(Violation("duplicate", cat))
            seen.add(cat)
            if cat not in expected:
                violations.append(Violation("unknown", cat))
    for cat in categories:
        if cat not in seen:
            violations.append(Violation("missing", cat))
    return violations


def emit_query(category: str, partition: SuperClassPartition) -> str:
    """Build the feature-elicitation query for a category.

    Categories with super-class siblings get the contrastive form; a
    singleton super-class falls back to the plain form, since there is
    nothing to distinguish from.
    """
    siblings = partition.siblings(category)  # raises UnknownCategory
    if not siblings:
        return f"What are useful features for distinguishing a {category} in a photo?"
    joined = ", ".join(siblings)
    return f"What are useful features for distinguishing a {category} from {joined} in a photo?"


@dataclass(frozen=True)
class FeatureBank:
    """Exactly N non-empty, distinct feature strings per category."""

    n_features: int
    features: dict[str, tuple[str, ...]]


def ingest_features(document: Mapping[str, Sequence[str]], expected_n: int) -> FeatureBank:
    """Validate a parsed feature document into a FeatureBank.

    Raises:
        WrongCount: a category has a number of features other than N.
        EmptyFeature: a feature string is empty or not a string.
        DuplicateFeature: a category repeats a feature verbatim.
    """
    if expected_n < 1:
        raise WrongCount("expected_n must be at least 1")
    validated: dict[str, tuple[str, ...]] = {}
    for category, feats in document.items():
        feats = list(feats)
        if len(feats) != expected_n:
            raise WrongCount(
                f"category {category!r} has {len(feats)} features, expected {expected_n}"
            )
        for f in feats:
            if not isinstance(f, str) or not f:
                raise EmptyFeature(f"category {category!r} has an empty feature")
        if len(set(feats)) != len(feats):
            raise DuplicateFeature(f"category {category!r} repeats a feature")
        validated[str(category)] = tuple(feats)
    return FeatureBank(n_features=expected_n, features=validated)


def load_features(path: str | Path, expected_n: int) -> FeatureBank:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise FormatError("feature file must be a JSON object")
    return ingest_features(data, expected_n)


def prompt_index(
    partition: SuperClassPartition,
    n_features: int,
    category: str,
    kind: str,
    source_category: str | None,
    feature_position: int,
) -> int:
    """Flat index of a prompt within its category block.

    Positives occupy 1..N; the negative borrowed from the r-th sibling at
    feature position n sits at r*N + n.

    Raises:
        OutOfRange: feature position outside 1..N, or a negative whose
            source is not a distinct super-class sibling.
    """
    if not 1 <= feature_position <= n_features:
        raise OutOfRange(f"feature position {feature_position} outside 1..{n_features}")
    if kind == POSITIVE:
        return feature_position
    if kind != NEGATIVE:
        raise OutOfRange(f"unknown prompt kind {kind!r}")
    siblings = partition.siblings(category)
    if source_category == category or source_category not in siblings:
        raise OutOfRange(
            f"negative source {source_category!r} is not a super-class sibling of {category!r}"
        )
    rank = siblings.index(source_category) + 1
    return rank * n_features + feature_position


@dataclass(frozen=True)
class PromptEntry:
    category: str
    kind: str
    source_category: str
    feature_position: int
    flat_index: int
    text: str

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "kind": self.kind,
            "source_category": self.source_category,
            "feature_position": self.feature_position,
            "flat_index": self.flat_index,
            "text": self.text,
        }


@dataclass(frozen=True)
class PromptBank:
    """Per-category positive/negative prompt texts with their flat index."""

    n_features: int
    partition: SuperClassPartition
    blocks: dict[str, tuple[PromptEntry, ...]]

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(self.blocks.keys())

    def block(self, category: str) -> tuple[PromptEntry, ...]:
        if category not in self.blocks:
            raise UnknownCategory(f"no prompts for category {category!r}")
        return self.blocks[category]

    def block_size(self, category: str) -> int:
        return len(self.block(category))

    def flat_index(
        self, category: str, kind: str, source_category: str | None, feature_position: int
    ) -> int:
        return prompt_index(
            self.partition, self.n_features, category, kind, source_category, feature_position
        )

    def entries(self) -> tuple[PromptEntry, ...]:
        out: list[PromptEntry] = []
        for block in self.blocks.values():
            out.extend(block)
        return tuple(out)


def build_prompts(bank: FeatureBank, partition: SuperClassPartition) -> PromptBank:
    """Construct positive and negative prompt texts for every category.

    The positive for category c and feature f reads "a photo of a {c}, which
    has {f}"; the negative owned by c and borrowing a sibling's feature reads
    "a photo of a {c}, which has no {f}". Each category in a super-class of
    size s ends up with N positives and (s-1)*N negatives.

    Raises:
        MissingCategory: the feature bank lacks a partition category.
    """
    n = bank.n_features
    for category in partition.categories():
        if category not in bank.features:
            raise MissingCategory(f"feature bank lacks category {category!r}")

    blocks: dict[str, tuple[PromptEntry, ...]] = {}
    for category in partition.categories():
        entries: list[PromptEntry] = []
        for pos in range(1, n + 1):
            feature = bank.features[category][pos - 1]
            entries.append(
                PromptEntry(
                    category=category,
                    kind=POSITIVE,
                    source_category=category,
                    feature_position=pos,
                    flat_index=pos,
                    text=f"a photo of a {category}, which has {feature}",
                )
            )
        for rank, sibling in enumerate(partition.siblings(category), start=1):
            for pos in range(1, n + 1):
                feature = bank.features[sibling][pos - 1]
                entries.append(
                    PromptEntry(
                        category=category,
                        kind=NEGATIVE,
                        source_category=sibling,
                        feature_position=pos,
                        flat_index=rank * n + pos,
                        text=f"a photo of a {category}, which has no {feature}",
                    )
                )
        blocks[category] = tuple(entries)
    return PromptBank(n_features=n, partition=partition, blocks=blocks)


def export_prompt_bank(bank: PromptBank) -> list[dict]:
    return [entry.to_dict() for entry in bank.entries()]


def write_prompt_bank(bank: PromptBank, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(export_prompt_bank(bank), fh, indent=2)
        fh.write("\n")


def load_prompt_bank(path: str | Path, partition: SuperClassPartition) -> PromptBank:
    """Rebuild a PromptBank from its JSON export, cross-checking flat indices."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise FormatError("prompt bank file must be a JSON array")

    by_category: dict[str, list[PromptEntry]] = {}
    n_features = 0
    for item in data:
        try:
            entry = PromptEntry(
                category=str(item["category"]),
                kind=str(item["kind"]),
                source_category=str(item["source_category"]),
                feature_position=int(item["feature_position"]),
                flat_index=int(item["flat_index"]),
                text=str(item["text"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed prompt bank entry {item!r}: {exc}") from exc
        n_features = max(n_features, entry.feature_position)
        by_category.setdefault(entry.category, []).append(entry)

    blocks: dict[str, tuple[PromptEntry, ...]] = {}
    for category in partition.categories():
        if category not in by_category:
            raise MissingCategory(f"prompt bank lacks category {category!r}")
        entries = sorted(by_category[category], key=lambda e: e.flat_index)
        for entry in entries:
            source = None if entry.kind == POSITIVE else entry.source_category
            expected = prompt_index(
                partition, n_features, category, entry.kind, source, entry.feature_position
            )
            if expected != entry.flat_index:
                raise FormatError(
                    f"prompt {category!r}#{entry.flat_index} disagrees with the "
                    f"partition-derived index {expected}"
                )
        blocks[category] = tuple(entries)
    return PromptBank(n_features=n_features, partition=partition, blocks=blocks)


def emit_query_file(partition: SuperClassPartition) -> str:
    """One query per line, each prefixed by its category and a tab."""
    lines = [f"{cat}\t{emit_query(cat, partition)}" for cat in partition.categories()]
    return "\n".join(lines) + "\n"


def synth_prompt_table(
    bank: PromptBank,
    means: EmbeddingTable,
    spread: float = 0.05,
    seed: int = 0,
) -> EmbeddingTable:
    """Synthesize raw prompt embeddings around class means for desk-scale runs.

    Positives scatter around their category's mean; the negative t^{c-d}
    scatters around the normalized midpoint of the c and d means, standing in
    for a boundary-flavored text representation. Record names follow the
    extractor convention "{category}#{flat_index}".
    """
    order = bank.categories
    by_label = {rec.label: rec.vectors[0].astype(np.float64) for rec in means.records}
    for idx, category in enumerate(order):
        if idx not in by_label:
            raise MissingCategory(f"means table lacks label {idx} for category {category!r}")

    rng = np.random.default_rng(seed)
    records = []
    for idx, category in enumerate(order):
        mu = by_label[idx]
        for entry in bank.block(category):
            if entry.kind == POSITIVE:
                center = mu
            else:
                source_idx = order.index(entry.source_category)
                center = mu + by_label[source_idx]
            vec = l2_normalize(center + spread * rng.standard_normal(means.dim))
            records.append(
                EmbeddingRecord(
                    name=f"{category}#{entry.flat_index}",
                    label=idx,
                    modality=Modality.TEXT_PROMPT,
                    vectors=vec,
                )
            )
    return EmbeddingTable(dim=means.dim, records=tuple(records))
