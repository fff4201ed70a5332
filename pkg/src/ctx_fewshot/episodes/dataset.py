"""Class-structured image datasets and their on-disk layout.

Layout::

    root/manifest.json
    root/<class dir>/<image>.pgm|.ppm

The manifest lists every class record (id, name, hierarchy path, split,
directory, image filenames). Images are 8-bit; in memory they are float32 in
[0, 1] with shape (H, W, C).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..netpbm import read_pnm, write_pnm

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"
FORMAT = "ctx-fewshot-dataset"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClassRecord:
    id: int
    name: str
    split: str
    path: tuple = ()  # ancestor node names, root first

    def to_json(self) -> dict:
        return {"id": self.id, "name": self.name, "split": self.split, "path": list(self.path)}


@dataclass
class Dataset:
    classes: list
    images: dict  # class id -> (n, H, W, C) float32
    name: str = "dataset"
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DatasetError("class ids must be unique")
        self._by_id = {c.id: c for c in self.classes}
        shape = None
        for c in self.classes:
            if c.split not in SPLITS:
                raise DatasetError(f"class {c.id}: unknown split {c.split!r}")
            if c.id not in self.images:
                raise DatasetError(f"class {c.id} has no image array")
            arr = self.images[c.id]
            if arr.ndim != 4:
                raise DatasetError(f"class {c.id}: images must be (n, H, W, C), got {arr.shape}")
            if shape is None:
                shape = arr.shape[1:]
            elif arr.shape[1:] != shape:
                raise DatasetError(f"class {c.id}: image shape {arr.shape[1:]} != {shape}")
        self._shape = shape

    @property
    def image_shape(self) -> tuple:
        return self._shape

    def record(self, class_id: int) -> ClassRecord:
        return self._by_id[class_id]

    def class_ids(self, split: str | None = None) -> list:
        return [c.id for c in self.classes if split is None or c.split == split]

    def split(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        keep = [c for c in self.classes if c.split == split]
        return Dataset(keep, {c.id: self.images[c.id] for c in keep}, name=f"{self.name}:{split}")

    def count(self, class_id: int) -> int:
        return self.images[class_id].shape[0]

    def hierarchy(self) -> dict:
        """Internal node path -> sorted class ids below it (root excluded)."""
        nodes: dict = {}
        for c in self.classes:
            for depth in range(1, len(c.path) + 1):
                nodes.setdefault(tuple(c.path[:depth]), []).append(c.id)
        return {k: sorted(v) for k, v in sorted(nodes.items())}

    def check_disjoint(self):
        seen = {}
        for c in self.classes:
            if seen.setdefault(c.id, c.split) != c.split:
                raise DatasetError(f"class {c.id} appears in two splits")

    def manifest(self) -> dict:
        h, w, ch = self.image_shape
        ext = "pgm" if ch == 1 else "ppm"
        classes = []
        for c in self.classes:
            entry = c.to_json()
            entry["dir"] = f"c{c.id:05d}"
            arr = self.images[c.id]
            entry["images"] = [f"{i:05d}.{ext}" for i in range(arr.shape[0])]
            entry["sha256"] = hashlib.sha256(to_uint8(arr).tobytes()).hexdigest()
            classes.append(entry)
        return {"format": FORMAT, "version": 1, "name": self.name,
                "image_size": [h, w], "channels": ch, "classes": classes}

    def manifest_bytes(self) -> bytes:
        return json.dumps(self.manifest(), indent=1, sort_keys=True).encode()


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(dataset: Dataset, root, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists; pass force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest()
    for entry in manifest["classes"]:
        cdir = root / entry["dir"]
        cdir.mkdir(exist_ok=True)
        pixels = to_uint8(dataset.images[entry["id"]])
        for fname, img in zip(entry["images"], pixels):
            write_pnm(cdir / fname, img)
    (root / MANIFEST).write_bytes(dataset.manifest_bytes())
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DatasetError(f"{root}: missing {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{mpath}: unrecognized format {manifest.get('format')!r}")
    h, w = manifest["image_size"]
    ch = manifest["channels"]
    classes, images = [], {}
    for entry in manifest["classes"]:
        cdir = root / entry["dir"]
        if not cdir.is_dir():
            raise DatasetError(f"{root}: class directory {entry['dir']} missing")
        pixels = []
        for fname in entry["images"]:
            fpath = cdir / fname
            if not fpath.is_file():
                raise DatasetError(f"{root}: image {entry['dir']}/{fname} missing")
            img = read_pnm(fpath)
            if img.shape != (h, w, ch):
                raise DatasetError(f"{fpath}: shape {img.shape} != manifest {(h, w, ch)}")
            pixels.append(img)
        stacked = np.stack(pixels) if pixels else np.zeros((0, h, w, ch), np.uint8)
        digest = entry.get("sha256")
        if digest is not None and hashlib.sha256(stacked.tobytes()).hexdigest() != digest:
            raise DatasetError(f"{root}: pixel checksum mismatch for class {entry['id']}")
        classes.append(ClassRecord(int(entry["id"]), entry["name"], entry["split"], tuple(entry["path"])))
        images[int(entry["id"])] = stacked.astype(np.float32) / 255.0
    return Dataset(classes, images, name=manifest.get("name", root.name))
