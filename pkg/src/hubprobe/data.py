"""Embedding banks, dataset records and dataset preparation.

Bank files hold a fixed-width float32 matrix; a sibling manifest maps row
indices to string ids. Datasets are JSON Lines, one record per line.
"""
from __future__ import annotations

import json
import math
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core_math import rng_for
from .errors import (
    BadFraction,
    BadFractions,
    BadMagic,
    CorruptIndex,
    DataError,
    EmptyIntersection,
    IoError,
    MissingEmbedding,
    VersionUnsupported,
)

BANK_MAGIC = b"HUBE"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sIIQ")

TASKS = ("VQA", "ReferIt", "GuessWhat", "FOIL")
RETRIEVAL_TASKS = ("VQA", "ReferIt", "GuessWhat")
LABELS = ("original", "foiled", "n/a")


# ---------------------------------------------------------------------------
# embedding banks
# ---------------------------------------------------------------------------

class EmbeddingBank:
    """Dense float32 table keyed by string id."""

    def __init__(self, ids: Sequence[str], data):
        data = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if data.ndim != 2 or data.shape[1] < 1:
            raise DataError(f"bank data must be a 2-D array with dim >= 1, got shape {data.shape}")
        ids = [str(i) for i in ids]
        if len(ids) != data.shape[0]:
            raise CorruptIndex(f"{len(ids)} ids for {data.shape[0]} rows")
        index = {}
        for row, key in enumerate(ids):
            if key in index:
                raise CorruptIndex(f"duplicate id {key!r} in bank")
            index[key] = row
        if not np.all(np.isfinite(data)):
            raise DataError("bank contains non-finite values")
        self.ids = ids
        self.data = data
        self.id_index = index

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.rows

    def __contains__(self, key: str) -> bool:
        return key in self.id_index

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingBank)
            and self.ids == other.ids
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def vector(self, key: str) -> np.ndarray:
        return self.gather([key])[0]

    def gather(self, keys: Iterable[str]) -> np.ndarray:
        """Rows for ``keys`` as a float64 array."""
        try:
            rows = [self.id_index[k] for k in keys]
        except KeyError as exc:
            raise MissingEmbedding(f"id {exc.args[0]!r} not in bank") from None
        return self.data[rows].astype(np.float64)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_bank(bank: EmbeddingBank, path) -> None:
    path = Path(path)
    header = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.dim, bank.rows)
    payload = bank.data.astype("<f4", copy=False).tobytes()
    lines = "".join(f"{row}\t{key}\n" for row, key in enumerate(bank.ids))
    try:
        atomic_write_bytes(path, header + payload)
        atomic_write_bytes(manifest_path(path), lines.encode("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot write bank {path}: {exc}") from exc


def load_bank(path) -> EmbeddingBank:
    path = Path(path)
    try:
        raw = path.read_bytes()
        manifest = manifest_path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read bank {exc.filename or path}: {exc.strerror}") from exc
    if len(raw) < _BANK_HEADER.size:
        raise BadMagic(f"{path}: file too short for a bank header")
    magic, version, dim, rows = _BANK_HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise VersionUnsupported(f"{path}: bank version {version} not supported")
    expected = _BANK_HEADER.size + rows * dim * 4
    if len(raw) != expected:
        raise IoError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_BANK_HEADER.size).reshape(rows, dim)

    ids: list[str | None] = [None] * rows
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t", 1)
        if len(parts) != 2 or not parts[0].isdigit():
            raise CorruptIndex(f"{manifest_path(path)}:{lineno}: malformed manifest line")
        row = int(parts[0])
        if row >= rows or ids[row] is not None:
            raise CorruptIndex(f"{manifest_path(path)}:{lineno}: bad or repeated row index {row}")
        ids[row] = parts[1]
    if any(i is None for i in ids):
        raise CorruptIndex(f"{manifest_path(path)}: manifest does not cover every row")
    return EmbeddingBank(ids, data.astype(np.float32))


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatapointRecord:
    task: str
    image_id: str
    language_id: str
    candidate_ids: tuple[str, ...] = ()
    gt_index: int = 0
    label: str = "n/a"
    target_object: str | None = None
    meta: Mapping[str, float | str] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        object.__setattr__(self, "candidate_ids", tuple(self.candidate_ids))
        if self.task == "FOIL":
            if self.label == "n/a":
                raise DataError("FOIL records need an original/foiled label")
            if self.candidate_ids:
                raise DataError("FOIL records carry no candidates")
        else:
            if not self.candidate_ids:
                raise DataError(f"{self.task} record without candidates")
            if len(set(self.candidate_ids)) != len(self.candidate_ids):
                raise DataError(f"duplicate candidates in record for {self.language_id}")
            if not 0 <= self.gt_index < len(self.candidate_ids):
                raise DataError(f"gt_index {self.gt_index} out of range")

    @property
    def label_index(self) -> int:
        return 1 if self.label == "foiled" else 0

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "image_id": self.image_id,
            "language_id": self.language_id,
            "candidate_ids": list(self.candidate_ids),
            "gt_index": self.gt_index,
            "label": self.label,
            "target_object": self.target_object,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatapointRecord":
        return cls(
            task=obj["task"],
            image_id=str(obj["image_id"]),
            language_id=str(obj["language_id"]),
            candidate_ids=tuple(obj.get("candidate_ids", ())),
            gt_index=int(obj.get("gt_index", 0)),
            label=obj.get("label", "n/a"),
            target_object=obj.get("target_object"),
            meta=dict(obj.get("meta", {})),
        )


def save_dataset(records: Iterable[DatapointRecord], path) -> None:
    text = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)
    try:
        atomic_write_bytes(path, text.encode("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path) -> list[DatapointRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc.strerror}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(DatapointRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def group_by_image(records: Iterable[DatapointRecord]) -> dict[str, list[DatapointRecord]]:
    groups: dict[str, list[DatapointRecord]] = defaultdict(list)
    for r in records:
        groups[r.image_id].append(r)
    return dict(groups)


def image_ids(records: Iterable[DatapointRecord]) -> list[str]:
    """Distinct image ids in first-appearance order."""
    return list(dict.fromkeys(r.image_id for r in records))


# ---------------------------------------------------------------------------
# common-image datasets
# ---------------------------------------------------------------------------

def build_common_dataset(
    raw: Mapping[str, Sequence[DatapointRecord]],
    seed: int = 0,
    tasks: Sequence[str] = RETRIEVAL_TASKS,
) -> dict[str, list[DatapointRecord]]:
    """Balance the retrieval datasets over their shared images.

    1. keep only images present in every task;
    2. k(image) = fewest linguistic items any task has for that image;
    3. prefer ReferIt/GuessWhat items about the same target object, then
       VQA items whose target tag matches one of those objects;
    4. top up every task with seeded random picks until each image has
       exactly k items per task.
    """
    by_task = {t: group_by_image(raw.get(t, ())) for t in tasks}
    shared = set.intersection(*(set(g) for g in by_task.values())) if by_task else set()
    if not shared:
        raise EmptyIntersection("no image is present in every task")

    out: dict[str, list[DatapointRecord]] = {t: [] for t in tasks}
    for image in sorted(shared):
        items = {t: by_task[t][image] for t in tasks}
        k = min(len(v) for v in items.values())
        rng = rng_for(seed, "common", image)
        chosen: dict[str, list[int]] = {t: [] for t in tasks}

        anchored = [t for t in ("ReferIt", "GuessWhat") if t in items]
        if len(anchored) == 2:
            ref, gw = items["ReferIt"], items["GuessWhat"]
            pairs = []
            used_gw: set[int] = set()
            for i, r in enumerate(ref):
                if r.target_object is None:
                    continue
                for j, g in enumerate(gw):
                    if j not in used_gw and g.target_object == r.target_object:
                        pairs.append((i, j))
                        used_gw.add(j)
                        break
            if len(pairs) > k:
                keep = np.sort(rng.choice(len(pairs), size=k, replace=False))
                pairs = [pairs[i] for i in keep]
            chosen["ReferIt"] = [i for i, _ in pairs]
            chosen["GuessWhat"] = [j for _, j in pairs]

            if "VQA" in items:
                wanted = [ref[i].target_object for i in chosen["ReferIt"]]
                for tag in wanted:
                    for q, rec in enumerate(items["VQA"]):
                        if q not in chosen["VQA"] and rec.target_object == tag:
                            chosen["VQA"].append(q)
                            break

        for t in tasks:
            rest = [i for i in range(len(items[t])) if i not in set(chosen[t])]
            need = k - len(chosen[t])
            if need > 0:
                extra = rng.choice(len(rest), size=need, replace=False)
                chosen[t].extend(rest[i] for i in extra)
            out[t].extend(items[t][i] for i in chosen[t])
    return out


# ---------------------------------------------------------------------------
# splits and subsets
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[DatapointRecord]
    validation: list[DatapointRecord]
    test: list[DatapointRecord]
    split_seed: int


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Per-part image counts; every part but the last is rounded, the last takes the rest."""
    counts = [int(round(n * f)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def split_by_image(records: Sequence[DatapointRecord], fractions: Sequence[float], seed: int) -> DatasetSplit:
    fractions = [float(f) for f in fractions]
    if not 1 <= len(fractions) <= 3:
        raise BadFractions("between one and three fractions are required")
    if any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-6):
        raise BadFractions(f"fractions must be positive and sum to 1, got {fractions}")
    images = image_ids(records)
    order = rng_for(seed, "split").permutation(len(images))
    counts = split_counts(len(images), fractions)
    if any(c < 0 for c in counts):
        raise BadFractions(f"fractions {fractions} do not partition {len(images)} images")
    part_of: dict[str, int] = {}
    start = 0
    for part, c in enumerate(counts):
        for pos in order[start:start + c]:
            part_of[images[pos]] = part
        start += c
    parts: list[list[DatapointRecord]] = [[], [], []]
    for r in records:
        parts[part_of[r.image_id]].append(r)
    return DatasetSplit(parts[0], parts[1], parts[2], seed)


def subset_fraction(records: Sequence[DatapointRecord], fraction: float, seed: int) -> list[DatapointRecord]:
    """Keep all records of ``ceil(fraction * images)`` seeded-random images.

    Subsets drawn with the same seed are nested, and both members of a FOIL
    pair survive or vanish together since they share an image.
    """
    if not 0 < fraction <= 1:
        raise BadFraction(f"fraction must lie in (0, 1], got {fraction}")
    images = image_ids(records)
    n_keep = math.ceil(fraction * len(images) - 1e-9)
    order = rng_for(seed, "subset").permutation(len(images))
    keep = {images[i] for i in order[:n_keep]}
    return [r for r in records if r.image_id in keep]
