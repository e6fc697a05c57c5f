"""Corpus format, loading/validation, and deterministic train/test splits.

A corpus lives in a directory with a ``manifest.json`` at its root describing
tablet surfaces (one entry per imaged side, with one image file per
visualization kind) and polygon annotations (one entry per sign occurrence).
Images are 8-bit RGB JPEG or PNG and all visualizations of one surface share
identical pixel dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

# The 12 recognized visualization tags: even lighting (Color00), eight
# directional lighting angles (ColorA..ColorH), a normal map and two
# curvature-derived sketch renderings.
VISUALIZATION_KINDS = (
    "Color00",
    "ColorA",
    "ColorB",
    "ColorC",
    "ColorD",
    "ColorE",
    "ColorF",
    "ColorG",
    "ColorH",
    "NormalMap",
    "SketchA",
    "SketchB",
)

SIDES = ("front", "back", "top", "bottom", "left", "right")

DEFAULT_MIN_INSTANCES = 20


class CorpusError(Exception):
    """Raised when a manifest or annotation fails validation.

    The message always names the offending record or file so problems can be
    fixed in the corpus rather than traced through the loader.
    """


@dataclass(frozen=True)
class SignClass:
    name: str
    index: int
    unicode_codepoint: str | None = None


@dataclass(frozen=True)
class SurfaceRecord:
    tablet_id: str
    side: str
    provenience: str
    width_px: int
    height_px: int
    image_paths: Mapping[str, Path]  # visualization tag -> absolute file path

    @property
    def surface_id(self) -> str:
        return f"{self.tablet_id}:{self.side}"


@dataclass(frozen=True)
class AnnotationRecord:
    id: str
    tablet_id: str
    side: str
    sign_class: str
    polygon: tuple[tuple[float, float], ...]

    @property
    def surface_id(self) -> str:
        return f"{self.tablet_id}:{self.side}"


@dataclass
class CorpusManifest:
    """Validated corpus: surfaces, annotations and the class vocabulary.

    Instances are immutable in practice (nothing mutates them after
    construction) and safe for concurrent reads. ``filter`` returns views that
    share the global vocabulary so class indices never shift.
    """

    root: Path
    surfaces: dict[str, SurfaceRecord]  # keyed by surface_id
    annotations: list[AnnotationRecord]
    vocabulary: dict[str, SignClass]  # class name -> SignClass
    proveniences: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.proveniences:
            self.proveniences = frozenset(s.provenience for s in self.surfaces.values())

    @property
    def classes(self) -> tuple[str, ...]:
        """Class names in index order."""
        return tuple(sorted(self.vocabulary, key=lambda n: self.vocabulary[n].index))

    def annotation(self, annotation_id: str) -> AnnotationRecord:
        try:
            return self._by_id[annotation_id]
        except AttributeError:
            self._by_id = {a.id: a for a in self.annotations}
            return self._by_id[annotation_id]

    def surface_for(self, record: AnnotationRecord) -> SurfaceRecord:
        return self.surfaces[record.surface_id]


@dataclass(frozen=True)
class DatasetSplit:
    seed: int
    min_instances: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    included_classes: tuple[str, ...]
    excluded_classes: tuple[str, ...]


def build_vocabulary(class_names: Iterable[str], unicode_map: Mapping[str, str] | None = None) -> dict[str, SignClass]:
    """Assign contiguous indices by lexicographic class-name sort."""
    unicode_map = unicode_map or {}
    names = sorted(set(class_names))
    return {name: SignClass(name=name, index=i, unicode_codepoint=unicode_map.get(name)) for i, name in enumerate(names)}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CorpusError(message)


def load_manifest(root_path: str | Path) -> CorpusManifest:
    """Load and validate ``root_path/manifest.json``.

    Validation covers: recognized visualization tags, existing image files
    whose pixel dimensions match the declared surface dimensions (and hence
    each other), polygon bounds and extent, and annotation id uniqueness.
    Every error names the offending record.
    """
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    _require(manifest_path.is_file(), f"no manifest.json under {root}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{manifest_path}: invalid JSON ({exc})") from exc

    unicode_map = {}
    for entry in raw.get("classes", []):
        unicode_map[entry["name"]] = entry.get("unicode")

    surfaces: dict[str, SurfaceRecord] = {}
    for i, s in enumerate(raw.get("surfaces", [])):
        locus = f"surfaces[{i}]"
        for key in ("tablet_id", "side", "provenience", "width_px", "height_px", "images"):
            _require(key in s, f"{locus}: missing key '{key}'")
        _require(s["side"] in SIDES, f"{locus}: unknown side '{s['side']}'")
        width, height = int(s["width_px"]), int(s["height_px"])
        _require(width > 0 and height > 0, f"{locus}: non-positive dimensions {width}x{height}")

        image_paths: dict[str, Path] = {}
        for tag, rel in s["images"].items():
            _require(
                tag in VISUALIZATION_KINDS,
                f"{locus}: unknown visualization tag '{tag}' (recognized: {', '.join(VISUALIZATION_KINDS)})",
            )
            path = root / rel
            _require(path.is_file(), f"{locus}: missing image file {path} for tag {tag}")
            with Image.open(path) as img:
                _require(
                    img.size == (width, height),
                    f"{locus}: image {path} is {img.size[0]}x{img.size[1]}, expected {width}x{height}",
                )
            image_paths[tag] = path

        record = SurfaceRecord(
            tablet_id=str(s["tablet_id"]),
            side=s["side"],
            provenience=str(s["provenience"]),
            width_px=width,
            height_px=height,
            image_paths=image_paths,
        )
        _require(record.surface_id not in surfaces, f"{locus}: duplicate surface {record.surface_id}")
        surfaces[record.surface_id] = record

    annotations: list[AnnotationRecord] = []
    seen_ids: set[str] = set()
    for i, a in enumerate(raw.get("annotations", [])):
        locus = f"annotations[{i}]"
        for key in ("id", "tablet_id", "side", "class", "polygon"):
            _require(key in a, f"{locus}: missing key '{key}'")
        ann_id = str(a["id"])
        locus = f"annotation '{ann_id}'"
        _require(ann_id not in seen_ids, f"duplicate annotation id '{ann_id}'")
        seen_ids.add(ann_id)

        surface_id = f"{a['tablet_id']}:{a['side']}"
        _require(surface_id in surfaces, f"{locus}: references unknown surface {surface_id}")
        surface = surfaces[surface_id]

        polygon = tuple((float(x), float(y)) for x, y in a["polygon"])
        _require(len(polygon) >= 3, f"{locus}: polygon has {len(polygon)} vertices, need at least 3")
        for x, y in polygon:
            _require(
                0 <= x <= surface.width_px and 0 <= y <= surface.height_px,
                f"{locus}: vertex ({x}, {y}) outside surface bounds "
                f"{surface.width_px}x{surface.height_px}",
            )
        xs = [p[0] for p in polygon]
        ys = [p[1] for p in polygon]
        _require(
            max(xs) > min(xs) or max(ys) > min(ys),
            f"{locus}: polygon has zero extent in both axes",
        )
        annotations.append(
            AnnotationRecord(
                id=ann_id,
                tablet_id=str(a["tablet_id"]),
                side=a["side"],
                sign_class=str(a["class"]),
                polygon=polygon,
            )
        )

    vocabulary = build_vocabulary((a.sign_class for a in annotations), unicode_map)
    return CorpusManifest(root=root, surfaces=surfaces, annotations=annotations, vocabulary=vocabulary)


def frequency_histogram(manifest: CorpusManifest) -> dict[str, int]:
    """Count annotations per class over the whole manifest."""
    counts: dict[str, int] = {}
    for a in manifest.annotations:
        counts[a.sign_class] = counts.get(a.sign_class, 0) + 1
    return counts


def threshold_coverage(histogram: Mapping[str, int], min_instances: int = DEFAULT_MIN_INSTANCES) -> float:
    """Fraction of all annotations belonging to classes with >= min_instances."""
    total = sum(histogram.values())
    if total == 0:
        return 0.0
    covered = sum(c for c in histogram.values() if c >= min_instances)
    return covered / total


def _test_count(n: int) -> int:
    # round(n / 5) in exact integer arithmetic (n/5 never lands on .5, so all
    # round-to-nearest conventions agree), floored at 1 so every included
    # class is testable.
    return max(1, (2 * n + 5) // 10)


def build_split(
    manifest: CorpusManifest,
    seed: int,
    min_instances: int = DEFAULT_MIN_INSTANCES,
) -> DatasetSplit:
    """Deterministic per-class 80/20 split.

    Per included class, |test| = max(1, round(0.2 * count)) drawn uniformly
    without replacement; classes with fewer than ``min_instances`` annotations
    are excluded from both sides and reported in ``excluded_classes``.
    """
    by_class: dict[str, list[str]] = {}
    for a in manifest.annotations:
        by_class.setdefault(a.sign_class, []).append(a.id)

    rng = np.random.default_rng(seed)
    train: list[str] = []
    test: list[str] = []
    included: list[str] = []
    excluded: list[str] = []
    for name in sorted(by_class):
        ids = sorted(by_class[name])
        if len(ids) < min_instances:
            excluded.append(name)
            continue
        included.append(name)
        order = rng.permutation(len(ids))
        n_test = _test_count(len(ids))
        test.extend(ids[i] for i in order[:n_test])
        train.extend(ids[i] for i in order[n_test:])

    return DatasetSplit(
        seed=seed,
        min_instances=min_instances,
        train_ids=tuple(sorted(train)),
        test_ids=tuple(sorted(test)),
        included_classes=tuple(included),
        excluded_classes=tuple(excluded),
    )


def save_split(split: DatasetSplit, path: str | Path) -> None:
    payload = {
        "seed": split.seed,
        "min_instances": split.min_instances,
        "train": list(split.train_ids),
        "test": list(split.test_ids),
        "excluded_classes": list(split.excluded_classes),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_split(path: str | Path, manifest: CorpusManifest | None = None) -> DatasetSplit:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    train_ids = tuple(raw["train"])
    test_ids = tuple(raw["test"])
    included: tuple[str, ...] = ()
    if manifest is not None:
        names = {manifest.annotation(i).sign_class for i in train_ids + test_ids}
        included = tuple(sorted(names))
    return DatasetSplit(
        seed=int(raw["seed"]),
        min_instances=int(raw["min_instances"]),
        train_ids=train_ids,
        test_ids=test_ids,
        included_classes=included,
        excluded_classes=tuple(raw.get("excluded_classes", [])),
    )


def filter_manifest(
    manifest: CorpusManifest,
    proveniences: Iterable[str] | None = None,
    visualization: str | None = None,
) -> CorpusManifest:
    """Restrict a manifest to proveniences and/or a visualization kind.

    The returned view keeps the global vocabulary (class indices unchanged).
    Requesting a visualization that any retained surface lacks is an error
    listing the offending surfaces.
    """
    if visualization is not None and visualization not in VISUALIZATION_KINDS:
        raise CorpusError(f"unknown visualization tag '{visualization}'")

    wanted = set(proveniences) if proveniences is not None else None
    if wanted is not None:
        unknown = wanted - set(manifest.proveniences)
        if unknown:
            raise CorpusError(f"unknown proveniences: {sorted(unknown)} (manifest has {sorted(manifest.proveniences)})")

    surfaces = {
        sid: s
        for sid, s in manifest.surfaces.items()
        if wanted is None or s.provenience in wanted
    }
    if visualization is not None:
        missing = [sid for sid, s in surfaces.items() if visualization not in s.image_paths]
        if missing:
            raise CorpusError(
                f"visualization {visualization} missing for surfaces: {', '.join(sorted(missing))}"
            )
    annotations = [a for a in manifest.annotations if a.surface_id in surfaces]
    return CorpusManifest(
        root=manifest.root,
        surfaces=surfaces,
        annotations=annotations,
        vocabulary=manifest.vocabulary,
    )
