"""Accuracy analyses: top-k with repeat statistics, provenience transfer,
frequency-bin breakdowns, and tablet-grid reports.

Ties in the logit ranking are broken by ascending class index everywhere, so
results never depend on float ordering accidents. Aggregation runs in a fixed
order for bit-reproducible reports.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from . import geometry
from .corpus import CorpusManifest, DatasetSplit, filter_manifest
from .dataset import SurfaceImageCache, load_crops

DEFAULT_BIN_EDGES = (20, 40, 100, 250)


class EvaluatorError(Exception):
    pass


def top_k_hits(logits: np.ndarray, true_index: int, k: int) -> bool:
    """True iff the true class is among the k highest logits.

    A class with an equal logit and a lower index outranks the true class;
    with a higher index it does not.
    """
    logits = np.asarray(logits)
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    true_logit = logits[true_index]
    rank = int(np.sum(logits > true_logit))
    rank += int(np.sum(logits[:true_index] == true_logit))
    return rank < k


def ranked_indices(logits: np.ndarray, k: int) -> list[int]:
    """Indices of the k highest logits, ties broken by ascending index."""
    logits = np.asarray(logits, dtype=np.float64)
    order = np.lexsort((np.arange(len(logits)), -logits))
    return [int(i) for i in order[:k]]


@dataclass
class ExampleOutcome:
    annotation_id: str
    sign_class: str
    true_index: int
    hits: dict[int, bool]  # k -> hit
    provenience: str = ""
    side: str = ""
    centroid: tuple[float, float] = (0.5, 0.5)


@dataclass
class GroupStats:
    support: int
    top_k: dict[int, float]


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    n: int
    top_k: dict[int, float]
    per_class: dict[str, GroupStats]
    per_provenience: dict[str, GroupStats]
    examples: list[ExampleOutcome]

    @property
    def top1(self) -> float:
        return self.top_k[1]

    @property
    def top5(self) -> float:
        return self.top_k.get(5, float("nan"))

    def to_dict(self, include_examples: bool = False) -> dict:
        out = {
            "n": self.n,
            "top_k": {str(k): v for k, v in self.top_k.items()},
            "per_class": {
                name: {"support": s.support, **{f"top{k}": v for k, v in s.top_k.items()}}
                for name, s in self.per_class.items()
            },
            "per_provenience": {
                name: {"support": s.support, **{f"top{k}": v for k, v in s.top_k.items()}}
                for name, s in self.per_provenience.items()
            },
        }
        if include_examples:
            out["examples"] = [
                {
                    "id": e.annotation_id,
                    "class": e.sign_class,
                    "provenience": e.provenience,
                    "side": e.side,
                    "centroid": list(e.centroid),
                    **{f"top{k}": bool(v) for k, v in e.hits.items()},
                }
                for e in self.examples
            ]
        return out


def _group_stats(outcomes: Sequence[ExampleOutcome], key: Callable[[ExampleOutcome], str], ks) -> dict[str, GroupStats]:
    groups: dict[str, list[ExampleOutcome]] = {}
    for o in outcomes:
        groups.setdefault(key(o), []).append(o)
    return {
        name: GroupStats(
            support=len(members),
            top_k={k: sum(m.hits[k] for m in members) / len(members) for k in ks},
        )
        for name, members in sorted(groups.items())
    }


def summarize(outcomes: Sequence[ExampleOutcome], ks: Sequence[int] = (1, 5)) -> EvalReport:
    """Aggregate per-example outcomes into an EvalReport."""
    if not outcomes:
        raise EvaluatorError("cannot summarize an empty outcome list")
    ks = tuple(ks)
    top_k = {k: sum(o.hits[k] for o in outcomes) / len(outcomes) for k in ks}
    return EvalReport(
        ks=ks,
        n=len(outcomes),
        top_k=top_k,
        per_class=_group_stats(outcomes, lambda o: o.sign_class, ks),
        per_provenience=_group_stats(outcomes, lambda o: o.provenience, ks),
        examples=list(outcomes),
    )


def outcomes_from_logits(
    logits: np.ndarray,
    true_indices: Sequence[int],
    ks: Sequence[int] = (1, 5),
    ids: Sequence[str] | None = None,
    class_names: Sequence[str] | None = None,
    proveniences: Sequence[str] | None = None,
    sides: Sequence[str] | None = None,
    centroids: Sequence[tuple[float, float]] | None = None,
) -> list[ExampleOutcome]:
    logits = np.asarray(logits)
    n = logits.shape[0]
    outcomes = []
    for i in range(n):
        true = int(true_indices[i])
        outcomes.append(
            ExampleOutcome(
                annotation_id=ids[i] if ids is not None else str(i),
                sign_class=class_names[i] if class_names is not None else str(true),
                true_index=true,
                hits={k: top_k_hits(logits[i], true, k) for k in ks},
                provenience=proveniences[i] if proveniences is not None else "",
                side=sides[i] if sides is not None else "",
                centroid=tuple(centroids[i]) if centroids is not None else (0.5, 0.5),
            )
        )
    return outcomes


def evaluate(
    model,
    manifest: CorpusManifest,
    ids: Sequence[str],
    visualization: str,
    ks: Sequence[int] = (1, 5),
    batch_size: int = 64,
) -> EvalReport:
    """Run the model over the given annotation ids and aggregate top-k stats.

    ``model`` needs ``predict_logits`` and ``prepare`` (ModelHandle or any
    stand-in); evaluation is deterministic given model and view.
    """
    ids = list(ids)
    if not ids:
        raise EvaluatorError("empty evaluation view")
    ks = tuple(min(k, len(manifest.classes)) for k in ks)
    crops = load_crops(manifest, ids, visualization)
    outcomes: list[ExampleOutcome] = []
    for start in range(0, len(crops), batch_size):
        chunk = crops[start : start + batch_size]
        inputs = torch.stack([model.prepare(c.pixels) for c in chunk])
        logits = model.predict_logits(inputs)
        for row, crop in zip(logits, chunk):
            outcomes.append(
                ExampleOutcome(
                    annotation_id=crop.annotation_id,
                    sign_class=crop.sign_class,
                    true_index=crop.label,
                    hits={k: top_k_hits(row, crop.label, k) for k in ks},
                    provenience=crop.provenience,
                    side=crop.side,
                    centroid=crop.centroid,
                )
            )
    return summarize(outcomes, ks)


# --- repeat statistics ---------------------------------------------------


@dataclass
class RepeatSummary:
    seeds: tuple[int, ...]
    runs: list[EvalReport]
    mean: dict[int, float]
    std: dict[int, float | None]  # sample std (n-1); None for a single run

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "runs": [{str(k): r.top_k[k] for k in r.ks} for r in self.runs],
            "mean": {str(k): v for k, v in self.mean.items()},
            "std": {str(k): v for k, v in self.std.items()},
        }


class RepeatRunError(Exception):
    """A constituent repeat failed; carries the completed runs."""

    def __init__(self, message: str, partial: list[EvalReport]):
        super().__init__(message)
        self.partial = partial


def aggregate_repeats(runs: Sequence[EvalReport], seeds: Sequence[int]) -> RepeatSummary:
    if not runs:
        raise EvaluatorError("no runs to aggregate")
    ks = runs[0].ks
    mean = {k: float(np.mean([r.top_k[k] for r in runs])) for k in ks}
    if len(runs) > 1:
        std = {k: float(np.std([r.top_k[k] for r in runs], ddof=1)) for k in ks}
    else:
        std = {k: None for k in ks}
    return RepeatSummary(seeds=tuple(seeds), runs=list(runs), mean=mean, std=std)


def run_repeats(run_one: Callable[[int], EvalReport], seeds: Sequence[int]) -> RepeatSummary:
    """Run the experiment once per seed and report mean +/- sample std."""
    runs: list[EvalReport] = []
    for seed in seeds:
        try:
            runs.append(run_one(seed))
        except Exception as exc:
            raise RepeatRunError(
                f"repeat with seed {seed} failed after {len(runs)} completed runs: {exc}",
                partial=runs,
            ) from exc
    return aggregate_repeats(runs, seeds)


# --- provenience transfer -------------------------------------------------


@dataclass
class TransferCell:
    top1: float
    in_distribution: bool
    ood_ratio: float | None


@dataclass
class TransferRow:
    trained_on: tuple[str, ...]
    cells: dict[str, TransferCell]


@dataclass
class TransferMatrix:
    rows: list[TransferRow]
    held_out: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "held_out": list(self.held_out),
            "rows": [
                {
                    "trained_on": list(r.trained_on),
                    "cells": {
                        prov: {
                            "top1": c.top1,
                            "in_distribution": c.in_distribution,
                            "ood_ratio": c.ood_ratio,
                        }
                        for prov, c in r.cells.items()
                    },
                }
                for r in self.rows
            ],
        }


def build_transfer_matrix(
    results: Mapping[tuple[str, ...], Mapping[str, float]],
    held_out: Iterable[str] = (),
) -> TransferMatrix:
    """Assemble a TransferMatrix from per-(combination, provenience) top-1.

    ``ood_ratio`` for every cell is its top-1 divided by the row's mean
    in-distribution top-1 (None when the row has no in-distribution cell).
    """
    held = tuple(sorted(held_out))
    rows = []
    for combo in results:
        overlap = set(combo) & set(held)
        if overlap:
            raise EvaluatorError(f"training combination {combo} includes held-out proveniences {sorted(overlap)}")
        per_prov = results[combo]
        in_dist_scores = [v for p, v in per_prov.items() if p in combo]
        mean_in = float(np.mean(in_dist_scores)) if in_dist_scores else None
        cells = {}
        for prov in sorted(per_prov):
            top1 = float(per_prov[prov])
            cells[prov] = TransferCell(
                top1=top1,
                in_distribution=prov in combo,
                ood_ratio=(top1 / mean_in) if mean_in else None,
            )
        rows.append(TransferRow(trained_on=tuple(combo), cells=cells))
    return TransferMatrix(rows=rows, held_out=held)


def transfer_matrix(
    manifest: CorpusManifest,
    combinations: Sequence[Iterable[str]],
    held_out: Iterable[str],
    split: DatasetSplit,
    visualization: str,
    config,
) -> TransferMatrix:
    """Train one model per provenience combination and evaluate per test
    provenience, flagging out-of-distribution cells.

    Held-out proveniences never appear in any training combination; their
    columns are always OOD.
    """
    from .trainer import train  # deferred; keeps a one-way import

    held = set(held_out)
    combos = [tuple(sorted(set(c))) for c in combinations]
    for combo in combos:
        if set(combo) & held:
            raise EvaluatorError(
                f"training combination {combo} includes held-out proveniences {sorted(set(combo) & held)}"
            )

    test_by_prov: dict[str, list[str]] = {}
    known = {a.id: a for a in manifest.annotations}
    for ann_id in split.test_ids:
        if ann_id not in known:
            continue
        prov = manifest.surface_for(known[ann_id]).provenience
        test_by_prov.setdefault(prov, []).append(ann_id)

    results: dict[tuple[str, ...], dict[str, float]] = {}
    for combo in combos:
        view = filter_manifest(manifest, proveniences=combo, visualization=visualization)
        model, _ = train(view, split, visualization, config)
        per_prov: dict[str, float] = {}
        for prov, ids in sorted(test_by_prov.items()):
            report = evaluate(model, manifest, ids, visualization, ks=(1,))
            per_prov[prov] = report.top1
        results[combo] = per_prov
    return build_transfer_matrix(results, held_out=held)


# --- frequency bins --------------------------------------------------------


@dataclass
class FrequencyBin:
    lo: int
    hi: int | None  # None = unbounded
    classes: list[dict]
    mean_top_k: dict[int, float]

    @property
    def label(self) -> str:
        return f"[{self.lo}, {self.hi})" if self.hi is not None else f"[{self.lo}, inf)"


@dataclass
class FrequencyBinReport:
    edges: tuple[int, ...]
    bins: list[FrequencyBin]

    def to_dict(self) -> dict:
        return {
            "edges": list(self.edges),
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "mean": {f"top{k}": v for k, v in b.mean_top_k.items()},
                    "classes": b.classes,
                }
                for b in self.bins
            ],
        }


def frequency_bin_report(
    report: EvalReport,
    histogram: Mapping[str, int],
    edges: Sequence[int] = DEFAULT_BIN_EDGES,
) -> FrequencyBinReport:
    """Group per-class accuracies by full-corpus instance count.

    Bins are half-open [edges[i], edges[i+1]) with the last unbounded. Every
    evaluated class must appear in the histogram with a count at or above the
    first edge; per-bin means are unweighted over classes (one dot per class).
    """
    edges = tuple(edges)
    if len(edges) < 1 or any(edges[i] >= edges[i + 1] for i in range(len(edges) - 1)):
        raise EvaluatorError(f"bin edges must be strictly increasing, got {edges}")
    bounds = [(edges[i], edges[i + 1] if i + 1 < len(edges) else None) for i in range(len(edges))]
    members: list[list[dict]] = [[] for _ in bounds]
    for name in sorted(report.per_class):
        stats = report.per_class[name]
        if name not in histogram:
            raise EvaluatorError(f"class '{name}' missing from the frequency histogram")
        count = histogram[name]
        if count < edges[0]:
            raise EvaluatorError(
                f"class '{name}' has count {count}, below the first bin edge {edges[0]}"
            )
        slot = 0
        for j, (lo, hi) in enumerate(bounds):
            if count >= lo and (hi is None or count < hi):
                slot = j
                break
        members[slot].append(
            {"name": name, "count": count, "support": stats.support, **{f"top{k}": v for k, v in stats.top_k.items()}}
        )
    bins = []
    for (lo, hi), classes in zip(bounds, members):
        mean = {
            k: (float(np.mean([c[f"top{k}"] for c in classes])) if classes else float("nan"))
            for k in report.ks
        }
        bins.append(FrequencyBin(lo=lo, hi=hi, classes=classes, mean_top_k=mean))
    return FrequencyBinReport(edges=edges, bins=bins)


# --- tablet grid -----------------------------------------------------------


@dataclass
class GridCellStats:
    row: int
    col: int
    support: int
    top1: float | None  # baseline absolute accuracy; None for empty cells
    delta_pp: float | None  # compared minus baseline, percentage points
    avg_normal: tuple[float, float, float] | None


@dataclass
class GridReport:
    grid: int
    cells: list[GridCellStats]

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "cells": [
                {
                    "row": c.row,
                    "col": c.col,
                    "support": c.support,
                    "top1": c.top1,
                    "delta_pp": c.delta_pp,
                    "avg_normal": list(c.avg_normal) if c.avg_normal else None,
                }
                for c in self.cells
            ],
        }


def sign_average_normals(
    manifest: CorpusManifest,
    ids: Sequence[str],
    visualization: str = "NormalMap",
) -> dict[str, tuple[float, float, float]]:
    """Per-sign unit average normal from the surface's normal-map image.

    Signs whose surface carries no normal map are skipped.
    """
    cache = SurfaceImageCache()
    normals: dict[str, tuple[float, float, float]] = {}
    for ann_id in ids:
        record = manifest.annotation(ann_id)
        surface = manifest.surface_for(record)
        if visualization not in surface.image_paths:
            continue
        image = cache.get(manifest, record.surface_id, visualization)
        vec = geometry.average_normal(image, record.polygon)
        normals[ann_id] = (float(vec[0]), float(vec[1]), float(vec[2]))
    return normals


def grid_report(
    baseline: EvalReport,
    compared: EvalReport | None = None,
    grid: int = 3,
    sign_normals: Mapping[str, tuple[float, float, float]] | None = None,
) -> GridReport:
    """Per-grid-cell accuracy of the baseline, plus the compared run's delta
    in percentage points and the cell's average sign normal when available.

    Both evaluations must cover the same annotation ids.
    """
    compared_by_id: dict[str, ExampleOutcome] | None = None
    if compared is not None:
        base_ids = {e.annotation_id for e in baseline.examples}
        cmp_ids = {e.annotation_id for e in compared.examples}
        if base_ids != cmp_ids:
            missing = base_ids.symmetric_difference(cmp_ids)
            raise EvaluatorError(
                f"baseline and compared evaluations cover different ids ({len(missing)} differ)"
            )
        compared_by_id = {e.annotation_id: e for e in compared.examples}

    by_cell: dict[tuple[int, int], list[ExampleOutcome]] = {}
    for outcome in baseline.examples:
        by_cell.setdefault(geometry.grid_cell(outcome.centroid, grid), []).append(outcome)

    cells = []
    for row in range(grid):
        for col in range(grid):
            members = by_cell.get((row, col), [])
            support = len(members)
            top1 = sum(m.hits[1] for m in members) / support if support else None
            delta = None
            if compared_by_id is not None and support:
                cmp_top1 = sum(compared_by_id[m.annotation_id].hits[1] for m in members) / support
                delta = (cmp_top1 - top1) * 100.0
            avg = None
            if sign_normals:
                vecs = [sign_normals[m.annotation_id] for m in members if m.annotation_id in sign_normals]
                if vecs:
                    mean = np.mean(np.asarray(vecs, dtype=np.float64), axis=0)
                    norm = float(np.linalg.norm(mean))
                    if norm > 1e-12:
                        unit = mean / norm
                        avg = (float(unit[0]), float(unit[1]), float(unit[2]))
            cells.append(
                GridCellStats(row=row, col=col, support=support, top1=top1, delta_pp=delta, avg_normal=avg)
            )
    return GridReport(grid=grid, cells=cells)


# --- serialization ---------------------------------------------------------


def save_json(payload: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def save_eval_csv(report: EvalReport, path: str | Path) -> None:
    """One row per class: name, support, top-k columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "support"] + [f"top{k}" for k in report.ks])
        for name in sorted(report.per_class):
            stats = report.per_class[name]
            writer.writerow([name, stats.support] + [f"{stats.top_k[k]:.6f}" for k in report.ks])


def save_transfer_csv(matrix: TransferMatrix, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trained_on", "test_provenience", "top1", "in_distribution", "ood_ratio"])
        for row in matrix.rows:
            for prov, cell in row.cells.items():
                writer.writerow(
                    [
                        "+".join(row.trained_on),
                        prov,
                        f"{cell.top1:.6f}",
                        int(cell.in_distribution),
                        "" if cell.ood_ratio is None else f"{cell.ood_ratio:.6f}",
                    ]
                )


def save_frequency_csv(report: FrequencyBinReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "class", "count", "support", "top1", "top5"])
        for b in report.bins:
            for c in b.classes:
                writer.writerow(
                    [b.label, c["name"], c["count"], c["support"],
                     f"{c.get('top1', float('nan')):.6f}", f"{c.get('top5', float('nan')):.6f}"]
                )


def save_grid_csv(report: GridReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid", "row", "col", "support", "top1", "delta_pp", "nx", "ny", "nz"])
        for c in report.cells:
            writer.writerow(
                [
                    report.grid,
                    c.row,
                    c.col,
                    c.support,
                    "" if c.top1 is None else f"{c.top1:.6f}",
                    "" if c.delta_pp is None else f"{c.delta_pp:.4f}",
                    *(tuple(f"{v:.6f}" for v in c.avg_normal) if c.avg_normal else ("", "", "")),
                ]
            )
