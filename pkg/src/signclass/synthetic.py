"""Synthetic fixture corpus: procedurally drawn wedge-mark glyphs.

The real corpus is restricted, so tests and examples run on generated
tablets: each sign class is a fixed arrangement of wedge strokes, drawn with
per-instance jitter onto clay-toned surfaces in several visualization kinds.
Proveniences map to rendering styles (slant, stroke width, ink contrast),
which gives the provenience-transfer and fine-tuning analyses something real
to measure. One style may be declared a blend of the others, useful as a
held-out target whose variety no single style covers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import geometry

GLYPH_CELL = 110  # pixel pitch between sign anchors on a surface
SURFACE_MARGIN = 42


@dataclass(frozen=True)
class StyleParams:
    """Rendering style of one provenience ('scribal hand')."""

    shear: float = 0.0  # horizontal slant of glyphs
    width_scale: float = 1.0  # stroke thickness multiplier
    size_scale: float = 1.0  # glyph size multiplier
    ink: float = 0.7  # stroke darkness, 0..1
    bg: float = 0.9  # background brightness, 0..1
    noise: float = 5.0  # additive pixel noise sigma


BASE_STYLES = (
    StyleParams(shear=-0.28, width_scale=0.75, size_scale=0.95, ink=0.9, bg=0.86, noise=4.0),
    StyleParams(shear=0.0, width_scale=1.05, size_scale=1.05, ink=0.7, bg=0.92, noise=5.0),
    StyleParams(shear=0.30, width_scale=1.45, size_scale=1.0, ink=0.5, bg=0.80, noise=6.0),
)

BLEND = "blend"  # style drawn per instance as a convex mix of the base styles


@dataclass(frozen=True)
class _Stroke:
    # unit-glyph-box coordinates; rendered as a wedge (triangular head, tail)
    x: float
    y: float
    angle: float  # degrees
    length: float
    head: float  # head width as a fraction of length


def _class_strokes(class_index: int, master_seed: int) -> list[_Stroke]:
    """Fixed stroke arrangement for one sign class."""
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 7001, class_index]))
    n = int(rng.integers(4, 7))
    strokes = []
    for _ in range(n):
        strokes.append(
            _Stroke(
                x=float(rng.uniform(0.18, 0.82)),
                y=float(rng.uniform(0.18, 0.82)),
                angle=float(rng.choice([0, 30, 60, 90, 120, 150, 210, 270]) + rng.uniform(-8, 8)),
                length=float(rng.uniform(0.35, 0.62)),
                head=float(rng.uniform(0.16, 0.26)),
            )
        )
    return strokes


def _wedge_polygon(stroke: _Stroke, cx: float, cy: float, size: float, style: StyleParams, rng) -> np.ndarray:
    """Wedge outline in surface coordinates: a kite with a triangular head
    tapering into a tail."""
    jitter = lambda s: rng.uniform(-s, s)
    angle = math.radians(stroke.angle + jitter(6.0))
    length = stroke.length * size * (1.0 + jitter(0.08))
    head_w = stroke.head * size * style.width_scale * (1.0 + jitter(0.15))
    x0 = cx + (stroke.x - 0.5 + jitter(0.02)) * size
    y0 = cy + (stroke.y - 0.5 + jitter(0.02)) * size
    dx, dy = math.cos(angle), math.sin(angle)
    px, py = -dy, dx  # perpendicular
    head_len = 0.38 * length
    tip = (x0, y0)
    left = (x0 + head_len * dx + head_w * px, y0 + head_len * dy + head_w * py)
    right = (x0 + head_len * dx - head_w * px, y0 + head_len * dy - head_w * py)
    tail = (x0 + length * dx, y0 + length * dy)
    pts = np.array([tip, left, tail, right], dtype=np.float64)
    # slant the whole wedge: shear x by y relative to the glyph center
    pts[:, 0] += style.shear * (pts[:, 1] - cy)
    return pts


@dataclass
class _PlacedSign:
    class_index: int
    class_name: str
    wedges: list[np.ndarray]  # surface-coordinate wedge outlines
    bbox: tuple[float, float, float, float]


def _blend_style(rng) -> StyleParams:
    w = rng.dirichlet(np.ones(len(BASE_STYLES)))
    mix = lambda attr: float(sum(wi * getattr(s, attr) for wi, s in zip(w, BASE_STYLES)))
    return StyleParams(
        shear=mix("shear"),
        width_scale=mix("width_scale"),
        size_scale=mix("size_scale"),
        ink=mix("ink"),
        bg=mix("bg"),
        noise=mix("noise"),
    )


def _render_surface(
    placed: list[_PlacedSign],
    width: int,
    height: int,
    kind: str,
    style: StyleParams,
    rng,
) -> Image.Image:
    if kind == "NormalMap":
        return _render_normal_map(placed, width, height, rng)

    if kind.startswith("Sketch"):
        bg = 248 - int(18 * (1.0 - style.bg))
        ink = int(30 + 50 * (1.0 - style.ink))
        outline_only = kind == "SketchA"
    else:
        bg = int(120 + 110 * style.bg)
        # even lighting (Color00) has the weakest stroke contrast
        contrast = 30 if kind == "Color00" else 80
        ink = max(15, bg - int(contrast * style.ink) - 20)
        outline_only = False

    img = Image.new("L", (width, height), color=bg)
    draw = ImageDraw.Draw(img)
    light = None
    if kind.startswith("Color") and kind != "Color00":
        # directional-light kinds get a highlight offset by the light angle
        angle = math.radians({"A": 90, "B": 45, "C": 0, "D": 315, "E": 270, "F": 225, "G": 180, "H": 135}[kind[-1]])
        light = (2.2 * math.cos(angle), -2.2 * math.sin(angle))

    for sign in placed:
        for wedge in sign.wedges:
            pts = [tuple(p) for p in wedge]
            if light is not None:
                hi = [(x + light[0], y + light[1]) for x, y in pts]
                draw.polygon(hi, fill=min(255, bg + 45))
            if outline_only:
                draw.polygon(pts, outline=ink, width=2)
            else:
                draw.polygon(pts, fill=ink)

    arr = np.asarray(img, dtype=np.float64)
    arr = arr + rng.normal(0.0, style.noise, size=arr.shape)
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="L").convert("RGB")


def _render_normal_map(placed: list[_PlacedSign], width: int, height: int, rng) -> Image.Image:
    # curved-tablet base field: normals tip outward toward the left/right
    # edges and slightly toward top/bottom, like a bulgy clay surface
    us = (np.arange(width) + 0.5) / width
    vs = (np.arange(height) + 0.5) / height
    nx = 0.55 * np.sin(math.pi * (us - 0.5))[None, :] * np.ones((height, 1))
    ny = 0.30 * np.sin(math.pi * (vs - 0.5))[:, None] * np.ones((1, width))
    nz = np.sqrt(np.clip(1.0 - nx**2 - ny**2, 1e-6, None))
    field = np.stack([nx, ny, nz], axis=-1)

    mask_img = Image.new("L", (width, height), color=0)
    draw = ImageDraw.Draw(mask_img)
    for sign in placed:
        for wedge in sign.wedges:
            draw.polygon([tuple(p) for p in wedge], fill=255)
    mask = np.asarray(mask_img) > 0
    # impressed strokes tilt normals toward the wedge interior
    field[mask] = field[mask] * 0.4 + np.array([0.25, -0.35, 0.6]) * 1.0
    field = field + rng.normal(0.0, 0.015, size=field.shape)
    field /= np.linalg.norm(field, axis=-1, keepdims=True)
    return Image.fromarray(geometry.encode_normals(field), mode="RGB")


def _annotation_polygon(bbox, width: int, height: int, rng) -> list[list[float]]:
    x0, y0, x1, y1 = bbox
    pad = lambda: float(rng.uniform(2.0, 7.0))
    xm, ym = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    pts = [
        [x0 - pad(), ym],
        [x0 - pad() * 0.5, y0 - pad()],
        [x1 + pad() * 0.5, y0 - pad()],
        [x1 + pad(), ym],
        [x1 + pad() * 0.5, y1 + pad()],
        [x0 - pad() * 0.5, y1 + pad()],
    ]
    return [[min(max(x, 0.0), float(width)), min(max(y, 0.0), float(height))] for x, y in pts]


def generate_corpus(
    root: str | Path,
    n_classes: int = 10,
    instances_per_class: int = 40,
    proveniences: dict[str, StyleParams | str] | None = None,
    visualizations: tuple[str, ...] = ("Color00", "SketchB", "NormalMap"),
    signs_per_surface: int = 24,
    seed: int = 0,
) -> Path:
    """Write a synthetic corpus under ``root`` and return its path.

    ``proveniences`` maps names to StyleParams (or the string "blend" for a
    per-instance mixture of the base styles); instances of every class are
    spread round-robin over the proveniences.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if proveniences is None:
        proveniences = {"siteA": BASE_STYLES[0], "siteB": BASE_STYLES[2]}

    master = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    class_names = [f"G{i:02d}" for i in range(n_classes)]
    strokes = {name: _class_strokes(i, seed) for i, name in enumerate(class_names)}

    prov_names = list(proveniences)
    jobs: dict[str, list[str]] = {p: [] for p in prov_names}
    for ci, name in enumerate(class_names):
        for j in range(instances_per_class):
            jobs[prov_names[(ci + j) % len(prov_names)]].append(name)

    cols = max(2, int(math.ceil(math.sqrt(signs_per_surface * 1.5))))
    rows = max(2, int(math.ceil(signs_per_surface / cols)))
    width = cols * GLYPH_CELL + 2 * SURFACE_MARGIN
    height = rows * GLYPH_CELL + 2 * SURFACE_MARGIN

    surfaces = []
    annotations = []
    ann_counter = 0
    for prov in prov_names:
        style_spec = proveniences[prov]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17, prov_names.index(prov)]))
        queue = list(jobs[prov])
        rng.shuffle(queue)
        n_surfaces = int(math.ceil(len(queue) / (rows * cols)))
        for s_idx in range(n_surfaces):
            tablet_id = f"{prov}-T{s_idx:03d}"
            side = "front" if s_idx % 2 == 0 else "back"
            batch = queue[s_idx * rows * cols : (s_idx + 1) * rows * cols]
            placed: list[_PlacedSign] = []
            for slot, cname in enumerate(batch):
                style = _blend_style(rng) if style_spec == BLEND else style_spec
                r, c = divmod(slot, cols)
                cx = SURFACE_MARGIN + c * GLYPH_CELL + GLYPH_CELL / 2 + rng.uniform(-6, 6)
                cy = SURFACE_MARGIN + r * GLYPH_CELL + GLYPH_CELL / 2 + rng.uniform(-6, 6)
                size = 78.0 * style.size_scale * (1.0 + rng.uniform(-0.07, 0.07))
                wedges = [
                    _wedge_polygon(st, cx, cy, size, style, rng) for st in strokes[cname]
                ]
                allpts = np.concatenate(wedges, axis=0)
                bbox = (
                    float(allpts[:, 0].min()),
                    float(allpts[:, 1].min()),
                    float(allpts[:, 0].max()),
                    float(allpts[:, 1].max()),
                )
                placed.append(
                    _PlacedSign(
                        class_index=class_names.index(cname),
                        class_name=cname,
                        wedges=wedges,
                        bbox=bbox,
                    )
                )

            render_style = _blend_style(rng) if style_spec == BLEND else style_spec
            image_entries = {}
            for kind in visualizations:
                render_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, 91, prov_names.index(prov), s_idx, visualizations.index(kind)])
                )
                img = _render_surface(placed, width, height, kind, render_style, render_rng)
                rel = f"images/{tablet_id}_{side}_{kind}.png"
                img.save(root / rel)
                image_entries[kind] = rel
            surfaces.append(
                {
                    "tablet_id": tablet_id,
                    "side": side,
                    "provenience": prov,
                    "width_px": width,
                    "height_px": height,
                    "images": image_entries,
                }
            )
            for sign in placed:
                annotations.append(
                    {
                        "id": f"ann{ann_counter:05d}",
                        "tablet_id": tablet_id,
                        "side": side,
                        "class": sign.class_name,
                        "polygon": _annotation_polygon(sign.bbox, width, height, master),
                    }
                )
                ann_counter += 1

    manifest = {"surfaces": surfaces, "annotations": annotations}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return root


def transfer_styles() -> dict[str, StyleParams | str]:
    """Three distinct base styles plus a blended held-out style."""
    return {
        "styleA": BASE_STYLES[0],
        "styleB": BASE_STYLES[1],
        "styleC": BASE_STYLES[2],
        "styleD": BLEND,
    }
