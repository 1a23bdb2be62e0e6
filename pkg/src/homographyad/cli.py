"""Command line: ``homographyad {synthesize,align,finetune,evaluate}``.

Every command validates its configuration first, writes
``config.snapshot.yaml`` into the output directory and records its numeric
outputs in ``outputs.json`` (wall-clock times go to ``timing.json`` so that a
rerun from the snapshot can be compared byte for byte).

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from .backbones import REGISTRY, state_digest
from .checkpoints import load_container
from .config import RunConfig, load_config, write_snapshot
from .errors import InvalidSpec
from .synthesis.manifest import DatasetManifest

log = logging.getLogger("homographyad")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class RunFailed(RuntimeError):
    """A command finished but some of its cells failed."""


# --------------------------------------------------------------------------- helpers


def apply_profile(cfg: RunConfig) -> None:
    if cfg.profile == "serial":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(max(1, min(cfg.workers, os.cpu_count() or 1)))


def tree_digest(root) -> dict[str, str]:
    """SHA-256 of every file under ``root`` keyed by relative path."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True, default=str) + "\n")


def _classes(cfg: RunConfig, manifest: DatasetManifest, kinds=("object", "texture")) -> list[str]:
    names = [c.name for c in manifest.classes if c.kind in kinds]
    if cfg.dataset.classes is None:
        return names
    unknown = set(cfg.dataset.classes) - {c.name for c in manifest.classes}
    if unknown:
        raise InvalidSpec(f"classes not in the dataset: {sorted(unknown)}")
    return list(cfg.dataset.classes)


def _dataset_dir(out: Path, seeds, seed) -> Path:
    return out / "dataset" if len(seeds) == 1 else out / f"dataset_seed{seed}"


# --------------------------------------------------------------------------- commands


def cmd_synthesize(cfg: RunConfig) -> dict:
    from .synthesis.toy import generate_toy_dataset
    from .synthesis.variants import build_misaligned_dataset

    out = cfg.output_dir
    outputs: dict = {}
    if cfg.synthesize.mode == "toy":
        spec = cfg.synthesize.toy.build()
        m = generate_toy_dataset(spec, out / "dataset", seed=cfg.seeds[0])
        outputs["dataset"] = {"counts": m.counts(), "files": tree_digest(m.root)}
        return outputs
    if cfg.synthesize.mode == "mvtec":
        from .synthesis.mvtec import import_mvtec

        mv = cfg.synthesize.mvtec
        m = import_mvtec(mv.source, out / "dataset", cfg.dataset.classes, mv.size)
        outputs["dataset"] = {"counts": m.counts(), "files": tree_digest(m.root)}
        return outputs
    src = DatasetManifest.load(cfg.dataset.root)
    params = cfg.synthesize.misalignment.build()
    workers = cfg.workers if cfg.profile == "parallel" else 1
    for seed in cfg.seeds:
        m = build_misaligned_dataset(src, params, _dataset_dir(out, cfg.seeds, seed), seed=seed, workers=workers)
        outputs[f"seed{seed}"] = {"counts": m.counts(), "files": tree_digest(m.root)}
    return outputs


def cmd_align(cfg: RunConfig) -> dict:
    from .alignment import AlignerModel, train_pairwise_aligner, train_template_aligner
    from .synthesis.manifest import load_image
    from .synthesis.variants import build_aligned_dataset

    src = DatasetManifest.load(cfg.dataset.root)
    out = cfg.output_dir
    seed = cfg.seeds[0]
    aligners: dict[str, AlignerModel] = {}
    templates: dict[str, str] = {}
    outputs: dict = {"aligners": {}}
    if "train" in cfg.align.action:
        acfg = cfg.align.aligner.build(seed)
        for cls, tid in cfg.align.template_id.items():
            recs = src.records(cls, "train")
            if not recs:
                raise InvalidSpec(f"class {cls!r} has no training images")
            if isinstance(tid, int):
                if not 0 <= tid < len(recs):
                    raise InvalidSpec(f"template index {tid} out of range for {cls!r} ({len(recs)} images)")
                rel = recs[tid].path
            else:
                rel = tid
            template = load_image(src.root / rel)
            normals, _, _ = src.load_split(cls, "train")
            if acfg.mode == "template":
                model = train_template_aligner(list(normals), template, acfg, rel)
            else:
                model = train_pairwise_aligner(list(normals), acfg, rel)
            path = model.save(out / "aligners" / cls)
            aligners[cls], templates[cls] = model, rel
            outputs["aligners"][cls] = {
                "template": rel,
                "final_loss": model.loss_curve[-1],
                "loss_curve_sha256": hashlib.sha256(np.asarray(model.loss_curve, np.float64).tobytes()).hexdigest(),
                "weights": state_digest(model),
                "file": path.name,
            }
    else:
        for p in sorted(Path(cfg.align.checkpoint_dir).glob("*.pt")):
            model = AlignerModel.load(p)
            if model.template_id is None:
                raise InvalidSpec(f"{p} records no template image")
            aligners[p.stem], templates[p.stem] = model, model.template_id
        if not aligners:
            raise InvalidSpec(f"no aligner checkpoints in {cfg.align.checkpoint_dir}")
    if "apply" in cfg.align.action:
        m = build_aligned_dataset(src, aligners, templates, out / "dataset")
        outputs["dataset"] = {
            "counts": m.counts(),
            "files": tree_digest(m.root),
            "failures": [r.path for r in m.images if "alignment_failure" in r.flags],
        }
    return outputs


def cmd_finetune(cfg: RunConfig) -> dict:
    from .eval.studies import finetune_and_select

    manifest = DatasetManifest.load(cfg.dataset.root)
    classes = _classes(cfg, manifest)
    scorer_cfg = cfg.scorer.build(REGISTRY[cfg.backbone].default_taps)
    selection = cfg.finetune.selection.build()
    out = cfg.output_dir
    record: dict = {}
    outputs: dict = {}
    for cls in classes:
        for seed in cfg.seeds:
            shl_cfg = cfg.finetune.shl.build(cfg.backbone, seed)
            ckpt_dir = out / "checkpoints" / cls / f"seed{seed}"
            weights, it, values, series = finetune_and_select(
                manifest, cls, seed, shl_cfg, selection, scorer_cfg, ckpt_dir, cfg.pretrained, cfg.finetune.resume
            )
            best = series.checkpoints[series.iterations.index(it)]
            record.setdefault(cls, {})[str(seed)] = {
                "iteration": it,
                "file": Path(best.path).relative_to(out).as_posix(),
                "values": values,
            }
            outputs.setdefault(cls, {})[str(seed)] = {
                "selected_iteration": it,
                "evaluator_values": values,
                "losses": series.losses,
                "checkpoint_losses": [c.loss for c in series.checkpoints],
                "selected_weights": hashlib.sha256(
                    b"".join(v.detach().contiguous().numpy().tobytes() for _, v in sorted(weights.items()))
                ).hexdigest(),
            }
    _write_json(out / "selection.json", {"protocol": selection.protocol, "backbone": cfg.backbone, "classes": record})
    return outputs


def load_selected_weights(finetune_dir) -> dict[tuple[str, int], dict]:
    finetune_dir = Path(finetune_dir)
    sel = json.loads((finetune_dir / "selection.json").read_text())
    weights = {}
    for cls, seeds in sel["classes"].items():
        for seed, entry in seeds.items():
            state, _ = load_container(finetune_dir / entry["file"])
            weights[(cls, int(seed))] = state
    return weights


def cmd_evaluate(cfg: RunConfig) -> dict:
    from .eval import studies

    ev = cfg.evaluate
    out = cfg.output_dir
    scorer_cfg = cfg.scorer.build(REGISTRY[cfg.backbone].default_taps)
    heatmaps = out / "heatmaps" if ev.heatmaps else None
    common = dict(scorer_cfg=scorer_cfg, profile=cfg.profile, pretrained=cfg.pretrained)
    shl_cfg = cfg.finetune.shl.build(cfg.backbone, cfg.seeds[0])
    selection = cfg.finetune.selection.build()
    weights = load_selected_weights(ev.finetune_dir) if ev.finetune_dir else None
    study = ev.study or "none"

    if study == "alignment":
        variants = {}
        for name, root in ev.variants.items():
            root = Path(root)
            if (root / "manifest.json").exists():
                variants[name] = DatasetManifest.load(root)
            else:  # per-seed variant directories
                variants[name] = {s: DatasetManifest.load(root / f"dataset_seed{s}") for s in cfg.seeds}
        first = variants["original"]
        first = first if isinstance(first, DatasetManifest) else first[cfg.seeds[0]]
        classes = _classes(cfg, first)
        results, deltas = studies.run_alignment_study(
            variants, classes, ev.scorers, cfg.backbone, cfg.seeds, heatmap_dir=heatmaps, **common
        )
    else:
        manifest = DatasetManifest.load(cfg.dataset.root)
        classes = _classes(cfg, manifest)
        hl_kw = dict(seeds=cfg.seeds, selection=selection, checkpoint_dir=out / "checkpoints", heatmap_dir=heatmaps, **common)
        if study == "none":
            cond = studies.condition(manifest.variant, backbone=cfg.backbone, hl=weights is not None)
            results = [
                studies.evaluate_condition(
                    manifest, classes, {**cond, "scorer": s}, cfg.seeds, scorer_cfg, weights, cfg.profile, heatmaps, cfg.pretrained
                )
                for s in ev.scorers
            ]
            deltas = []
        elif study == "hl":
            results, deltas = studies.run_hl_study(manifest, classes, ev.scorers, shl_cfg, weights=weights, **hl_kw)
        elif study == "augmentation":
            results, deltas = studies.run_augmentation_study(manifest, classes, ev.categories, ev.scorers, shl_cfg, **hl_kw)
        else:
            results, deltas = studies.run_backbone_study(manifest, classes, ev.backbones, ev.scorers, shl_cfg, **hl_kw)

    doc = studies.results_document(study if study != "none" else "hl", cfg.snapshot(), results, deltas)
    doc["study"] = study if study != "none" else doc["study"]
    if study != "none":
        studies.validate_results(doc)
    _write_json(out / "results.json", doc)
    table = studies.grid_table(results) if study in ("augmentation", "backbone") else studies.markdown_table(results)
    (out / "results.md").write_text(table + ("\n" + studies.markdown_deltas(deltas) if deltas else ""))
    outputs = {
        "results": [{k: v for k, v in r.to_dict().items() if k != "wall_clock"} for r in results],
        "deltas": deltas,
    }
    if heatmaps is not None and heatmaps.exists():
        outputs["heatmaps"] = tree_digest(heatmaps)
    failed = [r for r in results if r.failed]
    if failed:
        raise RunFailed(f"{len(failed)} condition(s) had failing cells; see results.json")
    return outputs


COMMANDS = {
    "synthesize": cmd_synthesize,
    "align": cmd_align,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
}


def run(cfg: RunConfig) -> dict:
    """Execute a validated config: snapshot, run, write outputs."""
    apply_profile(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out)
    t0 = time.perf_counter()
    try:
        outputs = COMMANDS[cfg.command](cfg)
    except RunFailed:
        _write_json(out / "timing.json", {"wall_clock": time.perf_counter() - t0})
        raise
    _write_json(out / "outputs.json", outputs)
    _write_json(out / "timing.json", {"wall_clock": time.perf_counter() - t0})
    return outputs


# --------------------------------------------------------------------------- argument parsing


def _parse_set(items) -> dict:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = yaml.safe_load(v)
    return overrides


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="homographyad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML run config (flags override it)")
        p.add_argument("--output-dir", type=Path)
        p.add_argument("--dataset", type=Path, help="dataset root holding manifest.json")
        p.add_argument("--classes", nargs="+")
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--backbone", choices=sorted(REGISTRY))
        p.add_argument("--profile", choices=["serial", "parallel"])
        p.add_argument("--workers", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, e.g. finetune.shl.iterations=300")

    p = sub.add_parser("synthesize", help="generate the toy dataset or a misaligned variant")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--toy", action="store_true")
    g.add_argument("--misaligned", action="store_true")
    g.add_argument("--mvtec", type=Path, metavar="ROOT", help="import an MVTec AD tree")

    p = sub.add_parser("align", help="train and/or apply aligners")
    common(p)
    p.add_argument("--template-id", action="append", metavar="CLASS=INDEX|PATH")
    p.add_argument("--apply-only", action="store_true")
    p.add_argument("--train-only", action="store_true")
    p.add_argument("--checkpoint-dir", type=Path)

    p = sub.add_parser("finetune", help="self-homography fine-tuning and checkpoint selection")
    common(p)
    p.add_argument("--paper-protocol", action="store_true", help="select checkpoints by test AUROC")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("evaluate", help="fit/score/AUROC/heatmaps or a study")
    common(p)
    p.add_argument("--study", choices=["alignment", "hl", "augmentation", "backbone"])
    p.add_argument("--scorers", nargs="+")
    p.add_argument("--variant", action="append", metavar="NAME=PATH", help="alignment study dataset variant")
    p.add_argument("--finetune-dir", type=Path)
    p.add_argument("--paper-protocol", action="store_true")
    p.add_argument("--no-heatmaps", action="store_true")
    return parser


def overrides_from_args(args) -> dict:
    o: dict = {"command": args.command}
    simple = {
        "output_dir": "output_dir",
        "dataset": "dataset.root",
        "classes": "dataset.classes",
        "seeds": "seeds",
        "backbone": "backbone",
        "profile": "profile",
        "workers": "workers",
    }
    for attr, key in simple.items():
        v = getattr(args, attr, None)
        if v is not None:
            o[key] = str(v) if isinstance(v, Path) else v
    if args.command == "synthesize":
        if args.toy:
            o["synthesize.mode"] = "toy"
        if args.misaligned:
            o["synthesize.mode"] = "misaligned"
        if args.mvtec:
            o["synthesize.mode"] = "mvtec"
            o["synthesize.mvtec.source"] = str(args.mvtec)
    elif args.command == "align":
        if args.template_id:
            ids = {}
            for item in args.template_id:
                cls, _, v = item.partition("=")
                ids[cls] = int(v) if v.lstrip("-").isdigit() else v
            o["align.template_id"] = ids
        if args.apply_only:
            o["align.action"] = "apply"
        if args.train_only:
            o["align.action"] = "train"
        if args.checkpoint_dir:
            o["align.checkpoint_dir"] = str(args.checkpoint_dir)
    elif args.command in ("finetune", "evaluate"):
        if args.paper_protocol:
            o["finetune.selection.protocol"] = "paper"
        if args.command == "finetune" and args.resume:
            o["finetune.resume"] = True
        if args.command == "evaluate":
            if args.study:
                o["evaluate.study"] = args.study
            if args.scorers:
                o["evaluate.scorers"] = args.scorers
            if args.variant:
                o["evaluate.variants"] = dict(item.split("=", 1) for item in args.variant)
            if args.finetune_dir:
                o["evaluate.finetune_dir"] = str(args.finetune_dir)
            if args.no_heatmaps:
                o["evaluate.heatmaps"] = False
    o.update(_parse_set(args.set))
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from_args(args))
        if cfg.command != args.command:
            raise ValueError(f"config is for {cfg.command!r}, invoked {args.command!r}")
    except (ValidationError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        run(cfg)
    except (ValidationError, InvalidSpec) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"{cfg.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
