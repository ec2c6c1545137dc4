"""Dataset manifests: one text record per subject visit.

Record layout (comma separated, no header):
    id, age (years, 1 decimal), sex (F|M), ed_path, es_path, split (train|test)

Paths are stored relative to the manifest file so datasets are relocatable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .voxelgrid import AnatomyPair, read_vxl


@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    age: float
    sex: str
    ed_path: str
    es_path: str
    split: str

    def to_line(self) -> str:
        return (
            f"{self.subject_id},{self.age:.1f},{self.sex},"
            f"{self.ed_path},{self.es_path},{self.split}"
        )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    root: str  # directory paths are relative to

    def __post_init__(self):
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject ids in manifest")

    def split(self, name: str) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split == name)

    def load_pair(self, record: ManifestRecord) -> AnatomyPair:
        ed = read_vxl(os.path.join(self.root, record.ed_path))
        es = read_vxl(os.path.join(self.root, record.es_path))
        return AnatomyPair(ed=ed, es=es)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in manifest.records:
            fh.write(record.to_line() + "\n")


def load_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            sid, age, sex, ed_path, es_path, split = fields
            records.append(
                ManifestRecord(
                    subject_id=sid,
                    age=float(age),
                    sex=sex,
                    ed_path=ed_path,
                    es_path=es_path,
                    split=split,
                )
            )
    return DatasetManifest(records=tuple(records), root=root)
