"""Dataset manifests (JSON array of {"id", "path", "label"}) and in-memory datasets."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ..exceptions import FormatError
from .images import degrade, load_image


class ManifestError(FormatError):
    pass


@dataclass(frozen=True)
class Record:
    id: str
    path: str
    label: int


@dataclass
class Manifest:
    records: List[Record]
    root: str = "."

    @property
    def num_classes(self) -> int:
        return (max(r.label for r in self.records) + 1) if self.records else 0

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def resolve(self, record: Record) -> str:
        return record.path if os.path.isabs(record.path) else os.path.join(self.root, record.path)

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> str:
        rows = [{"id": r.id, "path": r.path, "label": r.label} for r in self.records]
        return json.dumps(rows, indent=1) + "\n"

    def subset(self, ids: Sequence[str]) -> "Manifest":
        table = {r.id: r for r in self.records}
        return Manifest([table[i] for i in ids], self.root)


def validate_records(records: List[Record]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise ManifestError(f"duplicate id {r.id!r}")
        seen.add(r.id)
    labels = sorted({r.label for r in records})
    if labels and labels != list(range(len(labels))):
        raise ManifestError(f"non-contiguous labels: {labels[:10]}")


def parse_manifest(text: str, root: str = ".", check_files: bool = True) -> Manifest:
    try:
        rows = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(rows, list):
        raise ManifestError("manifest must be a JSON array")
    records = []
    for k, row in enumerate(rows):
        if not isinstance(row, dict) or set(row) != {"id", "path", "label"}:
            raise ManifestError(f"record {k} must have exactly the keys id, path, label")
        if not isinstance(row["id"], str) or not isinstance(row["path"], str):
            raise ManifestError(f"record {k}: id and path must be strings")
        if not isinstance(row["label"], int) or isinstance(row["label"], bool) or row["label"] < 0:
            raise ManifestError(f"record {k}: label must be a non-negative integer")
        records.append(Record(row["id"], row["path"], row["label"]))
    validate_records(records)
    manifest = Manifest(records, root)
    if check_files:
        for r in records:
            if not os.path.isfile(manifest.resolve(r)):
                raise ManifestError(f"missing image file for {r.id!r}: {manifest.resolve(r)}")
    return manifest


def load_manifest(path, check_files: bool = True) -> Manifest:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ManifestError(f"{path}: manifest is not UTF-8") from None
    return parse_manifest(text, root=os.path.dirname(os.path.abspath(path)), check_files=check_files)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())


@dataclass
class ImageSet:
    """Low-resolution images of a manifest, stacked as (N, channels, side, side) float32."""

    ids: List[str]
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.ids)


def load_images(manifest: Manifest, side: int = 16, num_classes: int = None) -> ImageSet:
    """Read every image and box-degrade it to ``side`` x ``side`` when larger."""
    out = []
    for r in manifest.records:
        img = load_image(manifest.resolve(r))
        if img.shape[1:] != (side, side):
            img = degrade(img, side)
        out.append(img)
    images = np.stack(out).astype(np.float32) if out else np.zeros((0, 1, side, side), np.float32)
    return ImageSet(manifest.ids, images, manifest.labels, num_classes or manifest.num_classes)
