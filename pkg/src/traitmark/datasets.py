"""Loading labeled corpora and essay batches from CSV/JSONL files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import domain
from .training import LabeledEssay


class DatasetError(ValueError):
    pass


def load_labeled(path: str | Path, schema: domain.TraitSchema = domain.DEFAULT_SCHEMA) -> list[LabeledEssay]:
    """Read a labeled corpus: columns essay_id, text, prompt_id, plus one
    column per labeled trait (CSV) or the same keys in JSONL objects."""
    path = Path(path)
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8-sig").splitlines() if line.strip()]
    else:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{path}: no rows")
    essays = []
    trait_names = set(schema.trait_names)
    for i, row in enumerate(rows):
        essay_id = str(row.get("essay_id", "") or "")
        text = str(row.get("text", "") or "")
        if not essay_id or not text.strip():
            raise DatasetError(f"{path} row {i + 1}: essay_id and text are required")
        labels = {}
        for key, value in row.items():
            if key in trait_names and value not in (None, ""):
                labels[key] = int(value)
        essays.append(
            LabeledEssay(
                essay_id=essay_id,
                text=text,
                prompt_id=str(row.get("prompt_id", "") or "p0"),
                labels=labels,
            )
        )
    return essays


def load_essays(path: str | Path) -> list[domain.Essay]:
    """Read a plain essay batch: essay_id,text columns."""
    path = Path(path)
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8-sig").splitlines() if line.strip()]
    else:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            rows = list(csv.DictReader(fh))
    essays = []
    for i, row in enumerate(rows):
        essay_id = str(row.get("essay_id", "") or "")
        text = str(row.get("text", "") or "")
        if not essay_id or not text.strip():
            raise DatasetError(f"{path} row {i + 1}: essay_id and text are required")
        essays.append(domain.Essay(id=essay_id, text=text))
    return essays
