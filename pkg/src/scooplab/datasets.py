"""Demonstration persistence, dataset views and length statistics.

On disk a demonstration is one line-delimited JSON file: a header line with
id/kind/metadata, then one step per line of the form

    {"t": 0, "obs": {"image": "<base64 u8 row-major>", "pose": [x, y, tilt, load]},
     "action": [vx, vy, tilt_rate], "source": "expert"}

Images are stored as row-major uint8 bytes (intensities scaled to 0-255),
which round-trips exactly because the renderer only emits k/255 values.
A store directory holds one file per demonstration plus a manifest that
fixes creation order, which "first N" subsets rely on.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .env import EnvAction, EnvObservation
from .errors import DuplicateIdError, EmptyDatasetError, ParseError
from .takeover import Demonstration, DemoStep, StepSource

__all__ = [
    "DemoStore",
    "DatasetView",
    "LengthStats",
    "union",
    "length_stats",
    "reduction_percent",
    "encode_demo",
    "decode_demo",
]

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


# -- wire format -------------------------------------------------------------

def _encode_image(image: np.ndarray) -> str:
    u8 = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return base64.b64encode(u8.tobytes(order="C")).decode("ascii")


def _decode_image(data: str, shape: tuple[int, int]) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    if raw.size != shape[0] * shape[1]:
        raise ValueError(f"image payload has {raw.size} bytes, expected {shape}")
    return (raw.reshape(shape).astype(np.float32)) / 255.0


def encode_demo(demo: Demonstration) -> str:
    """Serializes a demonstration to its line-delimited text form."""
    if not demo.steps:
        raise EmptyDatasetError(f"demo {demo.id} has no steps")
    meta = dict(demo.metadata)
    meta.setdefault("image_size", list(demo.steps[0].observation.image.shape))
    header = {
        "format": FORMAT_VERSION,
        "id": demo.id,
        "kind": demo.kind,
        "metadata": meta,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for step in demo.steps:
        lines.append(json.dumps({
            "t": step.tick,
            "obs": {
                "image": _encode_image(step.observation.image),
                "pose": [float(v) for v in step.observation.pose],
            },
            "action": [step.action.vx, step.action.vy, step.action.tilt_rate],
            "source": step.source.value,
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def decode_demo(text: str, path: Optional[str] = None) -> Demonstration:
    """Parses the line-delimited form; raises ParseError with line/offset."""
    offset = 0
    lines = text.split("\n")
    if not text or not lines[0].strip():
        raise ParseError("empty demonstration file", path=path, line=1, offset=0)

    def fail(msg, lineno):
        raise ParseError(msg, path=path, line=lineno, offset=offset)

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(f"bad header: {exc}", 1)
    if not isinstance(header, dict) or "id" not in header or "kind" not in header:
        fail("header missing id/kind", 1)
    meta = header.get("metadata", {})
    image_size = meta.get("image_size")
    if not image_size or len(image_size) != 2:
        fail("header metadata missing image_size", 1)
    shape = (int(image_size[0]), int(image_size[1]))

    steps = []
    offset = len(lines[0]) + 1
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            offset += len(line) + 1
            continue
        try:
            rec = json.loads(line)
            obs = EnvObservation(
                image=_decode_image(rec["obs"]["image"], shape),
                pose=np.asarray(rec["obs"]["pose"], dtype=np.float32),
            )
            if obs.pose.shape != (4,):
                raise ValueError(f"pose has shape {obs.pose.shape}")
            action = rec["action"]
            if len(action) != 3:
                raise ValueError("action must have 3 components")
            steps.append(DemoStep(
                tick=int(rec["t"]),
                observation=obs,
                action=EnvAction(float(action[0]), float(action[1]), float(action[2])),
                source=StepSource(rec["source"]),
            ))
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            fail(f"bad step record: {exc}", lineno)
        offset += len(line) + 1
    if not steps:
        raise ParseError("demonstration has no steps", path=path, line=2, offset=offset)

    return Demonstration(
        id=str(header["id"]),
        kind=str(header["kind"]),
        steps=tuple(steps),
        metadata=dict(meta),
    )


# -- store -------------------------------------------------------------------

class DemoStore:
    """Directory of demonstration files plus a creation-order manifest."""

    def __init__(self, root, dataset_id: Optional[str] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.root / MANIFEST_NAME
        if self._manifest_path.exists():
            try:
                manifest = json.loads(self._manifest_path.read_text())
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad manifest: {exc}", path=str(self._manifest_path))
            self.dataset_id = manifest["dataset_id"]
            self._entries = [(e["id"], e["kind"]) for e in manifest["demos"]]
            if dataset_id is not None and dataset_id != self.dataset_id:
                raise DuplicateIdError(
                    f"store at {root} already has id {self.dataset_id!r}")
        else:
            self.dataset_id = dataset_id or self.root.name
            self._entries = []
            self._write_manifest()

    def _write_manifest(self) -> None:
        payload = {
            "format": FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "demos": [{"id": i, "kind": k} for i, k in self._entries],
            "kind_counts": self.kind_counts(),
        }
        tmp = self._manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self._manifest_path)

    def _demo_path(self, demo_id: str) -> Path:
        return self.root / f"{demo_id}.jsonl"

    def save(self, demo: Demonstration) -> str:
        """Atomic write (temp file + rename), then manifest update."""
        if any(demo.id == i for i, _ in self._entries):
            raise DuplicateIdError(f"demo id {demo.id!r} already in store")
        text = encode_demo(demo)
        path = self._demo_path(demo.id)
        tmp = path.with_suffix(".jsonl.tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
        self._entries.append((demo.id, demo.kind))
        self._write_manifest()
        return demo.id

    def load(self, demo_id: str) -> Demonstration:
        path = self._demo_path(demo_id)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ParseError(f"cannot read demo: {exc}", path=str(path))
        return decode_demo(text, path=str(path))

    def ids(self) -> list[str]:
        return [i for i, _ in self._entries]

    def kind_counts(self) -> dict:
        counts: dict = {}
        for _, kind in self._entries:
            counts[kind] = counts.get(kind, 0) + 1
        return counts

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Demonstration]:
        for demo_id in self.ids():
            yield self.load(demo_id)

    def view(self, label: Optional[str] = None) -> "DatasetView":
        return DatasetView(
            label=label or self.dataset_id,
            members=tuple((self, i) for i in self.ids()),
        )


@dataclass(frozen=True)
class DatasetView:
    """Ordered, possibly cross-store selection of demonstrations."""

    label: str
    members: tuple  # of (store, demo_id)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[Demonstration]:
        for store, demo_id in self.members:
            yield store.load(demo_id)

    def ids(self) -> list[str]:
        return [demo_id for _, demo_id in self.members]

    def subset_first_n(self, n: int, label: Optional[str] = None) -> "DatasetView":
        if n > len(self.members):
            raise EmptyDatasetError(
                f"requested first {n} of {len(self.members)} demonstrations")
        return DatasetView(
            label=label or f"{self.label}[:{n}]",
            members=self.members[:n],
        )


def union(*views: DatasetView, label: Optional[str] = None) -> DatasetView:
    """Concatenates views in argument order; demo ids must be disjoint."""
    seen = set()
    members = []
    for v in views:
        for store, demo_id in v.members:
            if demo_id in seen:
                raise DuplicateIdError(f"demo id {demo_id!r} occurs twice in union")
            seen.add(demo_id)
            members.append((store, demo_id))
    return DatasetView(
        label=label or "(" + " u ".join(v.label for v in views) + ")",
        members=tuple(members),
    )


# -- statistics ----------------------------------------------------------------

@dataclass(frozen=True)
class LengthStats:
    """Per-demonstration durations in seconds plus their mean and total."""

    durations: tuple
    count: int
    total: float
    mean: float

    @classmethod
    def from_durations(cls, durations: Sequence[float]) -> "LengthStats":
        durations = tuple(float(d) for d in durations)
        if not durations:
            raise EmptyDatasetError("no durations")
        total = sum(durations)
        return cls(durations=durations, count=len(durations), total=total,
                   mean=total / len(durations))


def length_stats(dataset: Iterable[Demonstration] | DatasetView) -> LengthStats:
    """Durations are steps / tick_hz, read from each demo's metadata."""
    durations = []
    for demo in dataset:
        tick_hz = demo.metadata.get("tick_hz")
        if not tick_hz:
            raise EmptyDatasetError(f"demo {demo.id} metadata lacks tick_hz")
        durations.append(len(demo.steps) / float(tick_hz))
    return LengthStats.from_durations(durations)


def reduction_percent(a: LengthStats, b: LengthStats) -> float:
    """How much shorter a is than b, as a percentage of b's total time."""
    if b.total <= 0:
        raise ZeroDivisionError("reference stats have zero total duration")
    return 100.0 * (1.0 - a.total / b.total)
