"""Procedural glyph datasets with a balanced class hierarchy.

Each class is a set of antialiased primitives (strokes, arcs, blobs) in a
canonical [-1, 1]^2 frame. Primitives are inherited down the hierarchy: all
classes under one node share that node's parts and differ in their own, so
siblings make fine-grained episodes. An image is the class glyph rendered
under a random pose (rotation, scale, translation) plus optional noise
(per-part jitter, pixel noise and optional distractor clutter).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import ClassRecord, Dataset


@dataclass(frozen=True)
class GlyphStyle:
    max_rotation_deg: float = 20.0
    scale_range: tuple = (0.8, 1.1)
    max_shift: float = 0.15
    part_jitter: float = 0.05
    pixel_noise: float = 0.05
    parts_per_node: int = 1
    parts_per_class: int = 2
    clutter_parts: int = 0  # random distractor primitives drawn fresh for every image
    clutter_intensity: float = 0.6


@dataclass(frozen=True)
class Pose:
    rotation: float = 0.0  # radians
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)


def _random_part(rng) -> dict:
    kind = rng.choice(["stroke", "stroke", "arc", "blob"])
    if kind == "stroke":
        p0 = rng.uniform(-0.75, 0.75, 2)
        angle = rng.uniform(0, math.pi)
        length = rng.uniform(0.5, 1.2)
        p1 = np.clip(p0 + length * np.array([math.cos(angle), math.sin(angle)]), -0.85, 0.85)
        return {"kind": "stroke", "a": p0, "b": p1, "width": rng.uniform(0.12, 0.22)}
    if kind == "arc":
        return {"kind": "arc", "center": rng.uniform(-0.4, 0.4, 2), "radius": rng.uniform(0.25, 0.55),
                "start": rng.uniform(0, 2 * math.pi), "sweep": rng.uniform(0.6 * math.pi, 1.6 * math.pi),
                "width": rng.uniform(0.12, 0.2)}
    return {"kind": "blob", "center": rng.uniform(-0.6, 0.6, 2), "radius": rng.uniform(0.12, 0.24)}


def _jitter(part: dict, rng, amount: float) -> dict:
    out = dict(part)
    for key in ("a", "b", "center"):
        if key in out:
            out[key] = out[key] + rng.normal(0, amount, 2)
    if "radius" in out:
        out["radius"] = max(0.05, out["radius"] * (1 + rng.normal(0, amount)))
    return out


def _segment_distance(px, py, a, b):
    dx, dy = b[0] - a[0], b[1] - a[1]
    denom = dx * dx + dy * dy
    t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / max(denom, 1e-12), 0.0, 1.0)
    return np.hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))


def _signed_distance(part: dict, px, py):
    kind = part["kind"]
    if kind == "stroke":
        return _segment_distance(px, py, part["a"], part["b"]) - part["width"] / 2
    if kind == "blob":
        return np.hypot(px - part["center"][0], py - part["center"][1]) - part["radius"]
    cx, cy = part["center"]
    r = part["radius"]
    ang = np.mod(np.arctan2(py - cy, px - cx) - part["start"], 2 * math.pi)
    on_arc = ang <= part["sweep"]
    ring = np.abs(np.hypot(px - cx, py - cy) - r)
    ends = []
    for theta in (part["start"], part["start"] + part["sweep"]):
        ex, ey = cx + r * math.cos(theta), cy + r * math.sin(theta)
        ends.append(np.hypot(px - ex, py - ey))
    return np.where(on_arc, ring, np.minimum(*ends)) - part["width"] / 2


def render_glyph(parts, pose: Pose, size: int) -> np.ndarray:
    """Rasterize parts under ``pose`` into a (size, size) float image in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    gx, gy = np.meshgrid(coords, coords)  # gy grows downward
    # invert the pose: canonical = R^-1 (pixel - shift) / scale
    c, s = math.cos(pose.rotation), math.sin(pose.rotation)
    ux, uy = gx - pose.shift[0], gy - pose.shift[1]
    px = (c * ux + s * uy) / pose.scale
    py = (-s * ux + c * uy) / pose.scale
    aa = 2.0 / size / pose.scale
    img = np.zeros((size, size))
    for part in parts:
        d = _signed_distance(part, px, py)
        img = np.maximum(img, np.clip(0.5 - d / aa, 0.0, 1.0))
    return img


def random_pose(rng, style: GlyphStyle) -> Pose:
    return Pose(rotation=math.radians(rng.uniform(-style.max_rotation_deg, style.max_rotation_deg)),
                scale=rng.uniform(*style.scale_range),
                shift=tuple(rng.uniform(-style.max_shift, style.max_shift, 2)))


def render_image(parts, pose: Pose, size: int, rng=None, style: GlyphStyle | None = None) -> np.ndarray:
    """Render one sample; noise is applied only when ``rng`` and ``style`` are given."""
    if rng is not None and style is not None and style.part_jitter > 0:
        parts = [_jitter(p, rng, style.part_jitter) for p in parts]
    img = render_glyph(parts, pose, size)
    if rng is not None and style is not None and style.clutter_parts > 0:
        clutter = [_random_part(rng) for _ in range(style.clutter_parts)]
        img = np.maximum(img, style.clutter_intensity * render_glyph(clutter, Pose(), size))
    if rng is not None and style is not None and style.pixel_noise > 0:
        img = img + rng.normal(0, style.pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _branching(num_classes: int, depth: int) -> int:
    return max(2, math.ceil(num_classes ** (1.0 / (depth + 1)) - 1e-9))


def class_paths(num_classes: int, hierarchy_depth: int) -> list:
    """Ancestor node names for each leaf in a balanced tree, root excluded."""
    if hierarchy_depth <= 0:
        return [() for _ in range(num_classes)]
    b = _branching(num_classes, hierarchy_depth)
    return [tuple(f"n{level}_{leaf // b ** (hierarchy_depth - level + 1)}"
                  for level in range(1, hierarchy_depth + 1))
            for leaf in range(num_classes)]


def default_split_counts(num_classes: int) -> tuple:
    n_val = max(1, round(0.1 * num_classes))
    n_test = max(1, round(0.2 * num_classes))
    return num_classes - n_val - n_test, n_val, n_test


def class_parts(paths, rng, style: GlyphStyle) -> list:
    node_parts: dict = {}
    out = []
    for path in paths:
        parts = []
        for node in path:
            if node not in node_parts:
                node_parts[node] = [_random_part(rng) for _ in range(style.parts_per_node)]
            parts.extend(node_parts[node])
        parts.extend(_random_part(rng) for _ in range(style.parts_per_class))
        out.append(parts)
    return out


def make_synthetic_dataset(num_classes: int, images_per_class: int, image_size: int = 32,
                           hierarchy_depth: int = 1, rng=0, split_counts=None,
                           style: GlyphStyle | None = None, noise: bool = True,
                           name: str = "glyphs") -> Dataset:
    """Build a deterministic glyph dataset.

    ``rng`` is a seed or a ``numpy.random.Generator``. Classes are assigned to
    splits in leaf order, so hierarchy subtrees stay within a split where the
    counts allow.
    """
    if num_classes < 10:
        raise ValueError(f"num_classes must be at least 10, got {num_classes}")
    if images_per_class < 1:
        raise ValueError("images_per_class must be positive")
    style = GlyphStyle() if style is None else style
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    root = np.random.SeedSequence(seed)
    structure_seq, image_seq = root.spawn(2)
    counts = default_split_counts(num_classes) if split_counts is None else tuple(split_counts)
    if len(counts) != 3 or sum(counts) != num_classes or min(counts) < 0:
        raise ValueError(f"split_counts {counts} must be three counts summing to {num_classes}")
    splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]

    paths = class_paths(num_classes, hierarchy_depth)
    parts = class_parts(paths, np.random.default_rng(structure_seq), style)
    classes, images = [], {}
    for cid, (path, class_seq) in enumerate(zip(paths, image_seq.spawn(num_classes))):
        crng = np.random.default_rng(class_seq)
        samples = []
        for _ in range(images_per_class):
            pose = random_pose(crng, style)
            img = render_image(parts[cid], pose, image_size, crng if noise else None, style)
            samples.append(img)
        pixels = np.rint(np.stack(samples)[..., None] * 255.0) / 255.0
        images[cid] = pixels.astype(np.float32)
        classes.append(ClassRecord(cid, f"glyph{cid:04d}", splits[cid], path))
    return Dataset(classes, images, name=name)
