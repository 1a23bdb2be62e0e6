"""Experiment orchestration: alignment, homography-learning, augmentation and backbone studies.

A study is a grid of cells (scorer x condition x class x seed). Each cell
fits a scorer on ``train/good`` and reports image and pixel AUROC on the test
split. Cells run serially by default; the parallel profile fans them out to a
process pool and reduces in submission order, so results do not depend on
the profile.
"""
from __future__ import annotations

import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..backbones import Backbone, build_backbone
from ..errors import SingleClass
from ..scorers import FeatureExtractor, ScorerConfig, fit_scorer, score_images
from ..shl import CheckpointSeries, ShlConfig, finetune_backbone, select_checkpoint
from ..synthesis.manifest import DatasetManifest
from ..synthesis.toy import inject_defect
from .heatmap import render_heatmap
from .metrics import auroc, pixel_auroc

log = logging.getLogger(__name__)

RESULT_SCHEMA_VERSION = 1
STUDIES = ("alignment", "hl", "augmentation", "backbone")
VARIANT_ORDER = ("misaligned", "original", "aligned")

_AUROC = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_SCORES = {
    "type": "object",
    "required": ["image", "pixel"],
    "properties": {"image": _AUROC, "pixel": _AUROC},
    "additionalProperties": False,
}
RESULT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "study", "config", "results"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": RESULT_SCHEMA_VERSION},
        "study": {"enum": list(STUDIES)},
        "config": {"type": "object"},
        "results": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["condition", "seeds", "per_class", "average", "splits", "per_seed", "wall_clock", "errors"],
                "additionalProperties": False,
                "properties": {
                    "condition": {
                        "type": "object",
                        "required": ["variant", "scorer", "backbone", "hl", "augmentation"],
                        "properties": {
                            "variant": {"type": "string"},
                            "scorer": {"type": "string"},
                            "backbone": {"type": "string"},
                            "hl": {"type": "boolean"},
                            "augmentation": {"type": ["string", "null"]},
                        },
                    },
                    "seeds": {"type": "array", "items": {"type": "integer"}},
                    "per_class": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": ["kind", "image", "pixel"],
                            "properties": {"kind": {"enum": ["object", "texture"]}, "image": _AUROC, "pixel": _AUROC},
                        },
                    },
                    "average": _SCORES,
                    "splits": {"type": "object", "additionalProperties": _SCORES},
                    "per_seed": {"type": "object"},
                    "selected": {"type": "object"},
                    "wall_clock": {"type": "number", "minimum": 0},
                    "errors": {"type": "object", "additionalProperties": {"type": "string"}},
                },
            },
        },
        "deltas": {"type": "array"},
    },
}


def _nanmean(values) -> float | None:
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return float(np.mean(vals)) if vals else None


@dataclass
class ExperimentResult:
    """AUROC of one (variant, scorer, backbone, HL, augmentation) condition.

    ``per_seed[cls]`` holds the raw per-seed ``(image, pixel)`` pairs;
    ``per_class`` their seed means; ``average`` and ``splits`` the means of
    ``per_class`` entries. Pixel AUROC is ``None`` for image-only scorers.
    """

    condition: dict
    seeds: list[int]
    per_class: dict[str, dict] = field(default_factory=dict)
    per_seed: dict[str, list] = field(default_factory=dict)
    average: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)
    selected: dict = field(default_factory=dict)  # class -> per-seed selected SHL iteration
    wall_clock: float = 0.0
    errors: dict[str, str] = field(default_factory=dict)

    def finalize(self, kinds: Mapping[str, str]) -> "ExperimentResult":
        for cls, pairs in self.per_seed.items():
            self.per_class[cls] = {
                "kind": kinds[cls],
                "image": _nanmean([p[0] for p in pairs]),
                "pixel": _nanmean([p[1] for p in pairs]),
            }
        self.average = self._mean(self.per_class.values())
        self.splits = {
            kind: self._mean([v for v in self.per_class.values() if v["kind"] == kind])
            for kind in ("object", "texture")
            if any(v["kind"] == kind for v in self.per_class.values())
        }
        self.splits["total"] = dict(self.average)
        return self

    @staticmethod
    def _mean(entries) -> dict:
        entries = list(entries)
        return {
            "image": _nanmean([e["image"] for e in entries]),
            "pixel": _nanmean([e["pixel"] for e in entries]),
        }

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(**d)


def condition(variant="original", scorer="padim", backbone="compact_cnn", hl=False, augmentation=None) -> dict:
    return {"variant": variant, "scorer": scorer, "backbone": backbone, "hl": hl, "augmentation": augmentation}


# --------------------------------------------------------------------------- cells


@dataclass(frozen=True)
class CellSpec:
    """Everything needed to evaluate one scorer on one class with one backbone."""

    root: str
    cls: str
    scorer: str
    backbone: str
    seed: int
    scorer_cfg: ScorerConfig
    weights: dict | None = None  # backbone state dict; None -> freshly built backbone
    heatmap_dir: str | None = None
    pretrained: bool = True


def make_backbone(name: str, seed: int, pretrained: bool = True) -> Backbone:
    return build_backbone(name, seed=seed, pretrained=pretrained).eval()


def run_cell(spec: CellSpec) -> tuple[float, float | None]:
    """Fit on train/good, score the test split; returns ``(image_auroc, pixel_auroc)``."""
    manifest = DatasetManifest.load(spec.root)
    bb = make_backbone(spec.backbone, spec.seed, spec.pretrained)
    if spec.weights is not None:
        bb.load_state_dict(spec.weights)
    cfg = replace(spec.scorer_cfg, seed=spec.seed)
    ex = FeatureExtractor(bb, cfg.layers)
    train, _, _ = manifest.load_split(spec.cls, "train")
    test, labels, masks = manifest.load_split(spec.cls, "test")
    model = fit_scorer(spec.scorer, ex, train, cfg)
    results = score_images(model, ex, test)
    image = auroc([r.image_score for r in results], labels)
    pixel = None
    if results[0].score_map is not None:
        try:
            pixel = pixel_auroc([r.score_map for r in results], masks)
        except SingleClass:
            pixel = None
        if spec.heatmap_dir:
            _heatmaps(spec, manifest, test, masks, results)
    return image, pixel


def _heatmaps(spec: CellSpec, manifest, test, masks, results, limit: int = 4):
    recs = manifest.records(spec.cls, "test")
    picked = [i for i, r in enumerate(recs) if r.is_anomalous][:limit]
    for i in picked:
        name = Path(recs[i].path).with_suffix("").as_posix().replace("/", "_")
        render_heatmap(
            results[i].score_map, test[i], Path(spec.heatmap_dir) / f"{spec.scorer}_s{spec.seed}_{name}.png", masks[i]
        )


def _guarded_cell(spec: CellSpec):
    try:
        return run_cell(spec)
    except Exception as exc:  # per-cell failure marker
        log.error("cell %s/%s/%s seed %d failed: %s", spec.cls, spec.scorer, spec.backbone, spec.seed, exc)
        return f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def _run_cells(cells: Sequence[CellSpec], profile: str = "serial", workers: int = 2) -> list:
    """Returns, per cell, either ``(image, pixel)`` or an error string, in cell order."""
    if profile == "parallel" and len(cells) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_guarded_cell, cells))
    return [_guarded_cell(c) for c in cells]


def _collect(result: ExperimentResult, keys, outcomes, kinds) -> ExperimentResult:
    for (cls, seed), out in zip(keys, outcomes):
        if isinstance(out, str):
            result.errors[f"{cls}/seed{seed}"] = out
            continue
        result.per_seed.setdefault(cls, []).append([out[0], out[1]])
    return result.finalize(kinds)


def _kinds(manifest: DatasetManifest) -> dict[str, str]:
    return {c.name: c.kind for c in manifest.classes}


def evaluate_condition(
    manifests: Mapping[int, DatasetManifest] | DatasetManifest,
    classes: Sequence[str],
    cond: dict,
    seeds: Sequence[int],
    scorer_cfg: ScorerConfig = ScorerConfig(),
    weights: Mapping[tuple[str, int], dict] | None = None,
    profile: str = "serial",
    heatmap_dir=None,
    pretrained: bool = True,
) -> ExperimentResult:
    """Evaluate one condition over classes x seeds.

    ``manifests`` is either one dataset for all seeds or a per-seed mapping
    (variants such as misaligned data are regenerated per seed). ``weights``
    maps ``(class, seed)`` to backbone weights for fine-tuned conditions.
    """
    t0 = time.perf_counter()
    per_seed = manifests if isinstance(manifests, Mapping) else {s: manifests for s in seeds}
    cells, keys = [], []
    for cls in classes:
        for seed in seeds:
            w = weights.get((cls, seed)) if weights else None
            hm = str(Path(heatmap_dir) / cond["variant"] / cls) if heatmap_dir and seed == seeds[0] else None
            cells.append(CellSpec(str(per_seed[seed].root), cls, cond["scorer"], cond["backbone"], seed, scorer_cfg, w, hm, pretrained))
            keys.append((cls, seed))
    result = ExperimentResult(dict(cond), list(seeds))
    _collect(result, keys, _run_cells(cells, profile), _kinds(per_seed[seeds[0]]))
    result.wall_clock = time.perf_counter() - t0
    return result


def deltas(results: Sequence[ExperimentResult], reference: Callable[[dict], bool], key: Callable[[dict], tuple]) -> list[dict]:
    """Per-condition differences to the matching reference condition (same ``key``)."""
    refs = {key(r.condition): r for r in results if reference(r.condition)}
    out = []
    for r in results:
        ref = refs.get(key(r.condition))
        if ref is None or ref is r:
            continue
        row = {"condition": r.condition, "reference": ref.condition, "splits": {}}
        for split, vals in r.splits.items():
            base = ref.splits.get(split, {})
            row["splits"][split] = {
                m: (None if vals.get(m) is None or base.get(m) is None else vals[m] - base[m]) for m in ("image", "pixel")
            }
        out.append(row)
    return out


# --------------------------------------------------------------------------- alignment study


def run_alignment_study(
    variants: Mapping[str, DatasetManifest | Mapping[int, DatasetManifest]],
    classes: Sequence[str],
    scorers: Sequence[str] = ("padim",),
    backbone: str = "compact_cnn",
    seeds: Sequence[int] = (0, 1, 2),
    scorer_cfg: ScorerConfig = ScorerConfig(),
    profile: str = "serial",
    heatmap_dir=None,
    pretrained: bool = True,
) -> tuple[list[ExperimentResult], list[dict]]:
    """Each scorer on the misaligned / original / aligned variants.

    Deltas are reported relative to the ``original`` variant.
    """
    results = []
    for scorer in scorers:
        for variant in VARIANT_ORDER:
            if variant not in variants:
                continue
            cond = condition(variant, scorer, backbone)
            results.append(
                evaluate_condition(variants[variant], classes, cond, seeds, scorer_cfg, None, profile, heatmap_dir, pretrained)
            )
    d = deltas(results, lambda c: c["variant"] == "original", lambda c: (c["scorer"], c["backbone"]))
    return results, d


# --------------------------------------------------------------------------- homography learning


@dataclass(frozen=True)
class SelectionConfig:
    """How the SHL checkpoint is chosen.

    ``protocol="validation"`` (default) holds out ``val_fraction`` of the
    training normals from the scorer fit and scores them together with copies
    carrying injected synthetic defects. ``protocol="paper"`` selects by test
    AUROC, which leaks test labels and exists for comparison only.
    """

    protocol: str = "validation"
    scorer: str = "padim"
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.protocol not in ("validation", "paper"):
            raise ValueError("protocol must be 'validation' or 'paper'")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


def validation_split(train: np.ndarray, seed: int, fraction: float):
    """Seeded split of normals into (fit set, validation images, validation labels)."""
    rng = np.random.default_rng([seed, 11])
    perm = rng.permutation(len(train))
    n_val = max(1, int(round(len(train) * fraction)))
    if len(train) - n_val < 2:
        raise ValueError("too few normals for a validation split")
    val = train[np.sort(perm[:n_val])]
    fit = train[np.sort(perm[n_val:])]
    bad = np.stack([inject_defect(v, rng)[0] for v in val])
    return fit, np.concatenate([val, bad]), np.r_[np.zeros(n_val), np.ones(n_val)]


def make_evaluator(
    backbone: Backbone,
    series: CheckpointSeries,
    manifest: DatasetManifest,
    cls: str,
    seed: int,
    selection: SelectionConfig,
    scorer_cfg: ScorerConfig,
) -> Callable:
    train, _, _ = manifest.load_split(cls, "train")
    if selection.protocol == "paper":
        fit = train
        probe, labels, _ = manifest.load_split(cls, "test")
    else:
        fit, probe, labels = validation_split(train, seed, selection.val_fraction)
    cfg = replace(scorer_cfg, seed=seed)

    def evaluate(ckpt) -> float:
        ex = FeatureExtractor(series.load_backbone(backbone, ckpt), cfg.layers)
        model = fit_scorer(selection.scorer, ex, fit, cfg)
        return auroc([r.image_score for r in score_images(model, ex, probe)], labels)

    return evaluate


def finetune_and_select(
    manifest: DatasetManifest,
    cls: str,
    seed: int,
    shl_cfg: ShlConfig,
    selection: SelectionConfig = SelectionConfig(),
    scorer_cfg: ScorerConfig = ScorerConfig(),
    out_dir=None,
    pretrained: bool = True,
    resume: bool = False,
):
    """SHL fine-tuning on the class's training normals plus checkpoint selection.

    Returns ``(weights, selected_iteration, evaluator_values, series)``.
    """
    backbone = make_backbone(shl_cfg.backbone, seed, pretrained)
    train, _, _ = manifest.load_split(cls, "train")
    cfg = replace(shl_cfg, seed=seed)
    series = finetune_backbone(backbone, list(train), cfg, out_dir=out_dir, resume=resume)
    evaluator = make_evaluator(backbone, series, manifest, cls, seed, selection, scorer_cfg)
    best, values = select_checkpoint(series, evaluator)
    return series.weights(best), best.iteration, values, series


def run_hl_study(
    manifest: DatasetManifest,
    classes: Sequence[str],
    scorers: Sequence[str] = ("padim",),
    shl_cfg: ShlConfig = ShlConfig(),
    seeds: Sequence[int] = (0, 1, 2),
    selection: SelectionConfig = SelectionConfig(),
    scorer_cfg: ScorerConfig = ScorerConfig(),
    profile: str = "serial",
    checkpoint_dir=None,
    heatmap_dir=None,
    pretrained: bool = True,
    weights: Mapping[tuple[str, int], dict] | None = None,
    resume: bool = False,
) -> tuple[list[ExperimentResult], list[dict]]:
    """Baseline backbone vs the selected SHL checkpoint, per scorer.

    ``weights`` may supply precomputed fine-tuned weights per ``(class,
    seed)``; otherwise fine-tuning runs in-study.
    """
    selected: dict[str, list] = {}
    if weights is None:
        weights = {}
        for cls in classes:
            for seed in seeds:
                ckpt_dir = Path(checkpoint_dir) / cls / f"seed{seed}" if checkpoint_dir else None
                w, it, _, _ = finetune_and_select(
                    manifest, cls, seed, shl_cfg, selection, scorer_cfg, ckpt_dir, pretrained, resume
                )
                weights[(cls, seed)] = w
                selected.setdefault(cls, []).append(it)
    aug = shl_cfg.augmentation.category
    results = []
    for scorer in scorers:
        for hl in (False, True):
            cond = condition(manifest.variant, scorer, shl_cfg.backbone, hl, aug if hl else None)
            r = evaluate_condition(
                manifest, classes, cond, seeds, scorer_cfg, weights if hl else None, profile,
                Path(heatmap_dir) / ("hl" if hl else "baseline") if heatmap_dir else None, pretrained,
            )
            if hl:
                r.selected = dict(selected)
            results.append(r)
    d = deltas(results, lambda c: not c["hl"], lambda c: (c["scorer"], c["backbone"], c["variant"]))
    return results, d


def run_augmentation_study(
    manifest: DatasetManifest,
    classes: Sequence[str],
    categories: Sequence[str] = ("shape+color", "shape", "color"),
    scorers: Sequence[str] = ("padim",),
    shl_cfg: ShlConfig = ShlConfig(),
    **kw,
) -> tuple[list[ExperimentResult], list[dict]]:
    """HL study repeated per augmentation category; baselines are shared."""
    results, all_deltas = [], []
    for i, cat in enumerate(categories):
        policy = replace(shl_cfg.augmentation, category=cat)
        res, d = run_hl_study(manifest, classes, scorers, replace(shl_cfg, augmentation=policy), **kw)
        results.extend(r for r in res if r.condition["hl"] or i == 0)
        all_deltas.extend(d)
    return results, all_deltas


def run_backbone_study(
    manifest: DatasetManifest,
    classes: Sequence[str],
    backbones: Sequence[str] = ("compact_cnn",),
    scorers: Sequence[str] = ("padim",),
    shl_cfg: ShlConfig = ShlConfig(),
    **kw,
) -> tuple[list[ExperimentResult], list[dict]]:
    results, all_deltas = [], []
    for name in backbones:
        res, d = run_hl_study(manifest, classes, scorers, replace(shl_cfg, backbone=name), **kw)
        results.extend(res)
        all_deltas.extend(d)
    return results, all_deltas


# --------------------------------------------------------------------------- reporting


def results_document(study: str, config: dict, results: Sequence[ExperimentResult], deltas_: Sequence[dict] = ()) -> dict:
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")
    return {
        "schema_version": RESULT_SCHEMA_VERSION,
        "study": study,
        "config": config,
        "results": [r.to_dict() for r in results],
        "deltas": list(deltas_),
    }


def validate_results(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, RESULT_SCHEMA)


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def _label(cond: dict) -> str:
    parts = [cond["scorer"], cond["variant"], cond["backbone"]]
    if cond["hl"]:
        parts.append("HL" + (f"[{cond['augmentation']}]" if cond.get("augmentation") else ""))
    return " / ".join(parts)


def markdown_table(results: Sequence[ExperimentResult]) -> str:
    """One row per condition: per-class and object/texture/total (image / pixel) AUROC in percent."""
    if not results:
        return ""
    classes = list(dict.fromkeys(c for r in results for c in r.per_class))
    splits = [s for s in ("object", "texture", "total") if any(s in r.splits for r in results)]
    header = ["condition"] + [f"{c} (img / pix)" for c in classes] + [f"{s} (img / pix)" for s in splits]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in results:
        row = [_label(r.condition)]
        for c in classes:
            e = r.per_class.get(c, {})
            row.append(f"{_fmt(e.get('image'))} / {_fmt(e.get('pixel'))}")
        for s in splits:
            e = r.splits.get(s, {})
            row.append(f"{_fmt(e.get('image'))} / {_fmt(e.get('pixel'))}")
        if r.errors:
            row[0] += " (FAILED: " + ", ".join(sorted(r.errors)) + ")"
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def grid_table(results: Sequence[ExperimentResult]) -> str:
    """Classes as rows, conditions as columns, plus the row-wise maximum image AUROC."""
    if not results:
        return ""
    classes = list(dict.fromkeys(c for r in results for c in r.per_class))
    header = ["class"] + [_label(r.condition) for r in results] + ["max img"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for c in classes + ["total"]:
        cells, images = [c], []
        for r in results:
            e = r.per_class.get(c) if c != "total" else r.splits.get("total")
            e = e or {}
            cells.append(f"{_fmt(e.get('image'))} / {_fmt(e.get('pixel'))}")
            if e.get("image") is not None:
                images.append(e["image"])
        cells.append(_fmt(max(images)) if images else "-")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def markdown_deltas(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    lines = ["| condition | reference | split | image delta | pixel delta |", "|---|---|---|---|---|"]
    for row in rows:
        for split, v in row["splits"].items():
            lines.append(
                f"| {_label(row['condition'])} | {_label(row['reference'])} | {split} | {_fmt(v['image'])} | {_fmt(v['pixel'])} |"
            )
    return "\n".join(lines) + "\n"
