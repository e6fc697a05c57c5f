"""Materializes annotation polygons into 224x224 crop samples for training
and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import geometry
from .corpus import CorpusManifest, CorpusError


@dataclass
class CropSample:
    """One prepared sign occurrence: raw crop pixels plus label and metadata."""

    pixels: np.ndarray  # 224x224x3 uint8
    label: int  # class index in the manifest vocabulary
    annotation_id: str
    sign_class: str
    provenience: str
    side: str
    visualization: str
    centroid: tuple[float, float]  # normalized (u, v) on the surface


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


class SurfaceImageCache:
    """Keeps decoded surface images in memory; corpora here are small enough
    that a plain dict beats an eviction policy."""

    def __init__(self) -> None:
        self._images: dict[tuple[str, str], np.ndarray] = {}

    def get(self, manifest: CorpusManifest, surface_id: str, visualization: str) -> np.ndarray:
        key = (surface_id, visualization)
        if key not in self._images:
            surface = manifest.surfaces[surface_id]
            if visualization not in surface.image_paths:
                raise CorpusError(
                    f"surface {surface_id} has no {visualization} image "
                    f"(available: {', '.join(sorted(surface.image_paths))})"
                )
            self._images[key] = load_image(surface.image_paths[visualization])
        return self._images[key]


def load_crops(
    manifest: CorpusManifest,
    ids: Sequence[str],
    visualization: str,
    cache: SurfaceImageCache | None = None,
    size: int = geometry.CROP_SIZE,
) -> list[CropSample]:
    """Extract the square crop for every annotation id, in the given order."""
    cache = cache or SurfaceImageCache()
    samples: list[CropSample] = []
    for ann_id in ids:
        record = manifest.annotation(ann_id)
        surface = manifest.surface_for(record)
        image = cache.get(manifest, record.surface_id, visualization)
        box = geometry.squarify(record.polygon)
        pixels = geometry.extract_crop(image, box, size=size)
        samples.append(
            CropSample(
                pixels=pixels,
                label=manifest.vocabulary[record.sign_class].index,
                annotation_id=ann_id,
                sign_class=record.sign_class,
                provenience=surface.provenience,
                side=record.side,
                visualization=visualization,
                centroid=geometry.normalized_centroid(
                    record.polygon, surface.width_px, surface.height_px
                ),
            )
        )
    return samples
