"""Extraction jobs: image folders and prompt banks to PEMB files."""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .pemb import IMAGE_GLOBAL, IMAGE_PATCH_SET, TEXT_PROMPT, Record, make_record, write_pemb


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractionJob:
    source: Path  # image folder with per-class subfolders, or prompt-bank JSON
    encoder: object  # HashEncoder / ClipEncoder
    out_path: Path
    patches: bool = True  # dump per-patch token embeddings alongside the global one


def extract_images(job: ExtractionJob) -> dict:
    """Encode every readable image under per-class subfolders.

    Subfolders in sorted order define labels 0..C-1; files are visited in
    sorted order, so the record layout is reproducible. Each image yields an
    ImagePatchSet record named "{class}/{file}" (in patch mode) plus an
    ImageGlobal record named "{class}/{file}@global". Unreadable images are
    skipped with a warning and listed in "<out>.skipped.json".
    """
    root = Path(job.source)
    if not root.is_dir():
        raise ExtractionError(f"image source {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())

    records: list[Record] = []
    skipped: list[dict] = []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(p for p in class_dir.iterdir() if p.is_file()):
            try:
                with Image.open(path) as img:
                    pooled, patch_vecs = job.encoder.encode_image(img)
            except (UnidentifiedImageError, OSError) as exc:
                print(f"warning: skipping unreadable image {path}: {exc}", file=sys.stderr)
                skipped.append({"path": str(path), "reason": str(exc)})
                continue
            stem = f"{class_dir.name}/{path.name}"
            if job.patches:
                records.append(make_record(stem, label, IMAGE_PATCH_SET, patch_vecs))
            records.append(make_record(f"{stem}@global", label, IMAGE_GLOBAL, pooled))

    write_pemb(job.out_path, job.encoder.dim, records)
    if skipped:
        sidecar = Path(str(job.out_path) + ".skipped.json")
        sidecar.write_text(json.dumps(skipped, indent=2) + "\n", encoding="utf-8")
    return {
        "records": len(records),
        "classes": len(class_dirs),
        "skipped": len(skipped),
        "dim": job.encoder.dim,
    }


def _load_bank_entries(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise ExtractionError("prompt bank must be a non-empty JSON array")
    for item in data:
        if not isinstance(item, dict):
            raise ExtractionError("prompt bank entries must be objects")
        missing = {"category", "flat_index", "text"} - set(item)
        if missing:
            raise ExtractionError(f"prompt bank entry missing fields: {sorted(missing)}")
    return data


def extract_prompts(job: ExtractionJob) -> dict:
    """Encode every prompt of a bank export, one TextPrompt record each.

    Records are named "{category}#{flat_index}" and written per category (in
    first-appearance order, which is the bank's partition order) with flat
    indices ascending. The category's position doubles as its label.
    """
    entries = _load_bank_entries(Path(job.source))
    by_category: dict[str, list[dict]] = {}
    for item in entries:
        by_category.setdefault(str(item["category"]), []).append(item)

    records: list[Record] = []
    for label, (category, items) in enumerate(by_category.items()):
        for item in sorted(items, key=lambda e: int(e["flat_index"])):
            vec = job.encoder.encode_text(str(item["text"]))
            records.append(
                make_record(f"{category}#{int(item['flat_index'])}", label, TEXT_PROMPT, vec)
            )
    write_pemb(job.out_path, job.encoder.dim, records)
    return {"records": len(records), "categories": len(by_category), "dim": job.encoder.dim}
