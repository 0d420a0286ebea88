"""Command-line entry points.

Commands: zoo-train, attack, transfer, ablate, report. Outputs land under a
timestamped run directory below the output root (or DYNVLA_OUTPUT_ROOT),
each with a manifest of file hashes. Exit codes: 0 success, 1 usage or
config error, 2 numerical or training failure.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import reporting
from .arrayio import save_named_arrays
from .attacks import AttackConfig, attack_batch
from .config import OUTPUT_ROOT_ENV, load_run_config
from .corpus import TASKS, assign_prompts, generate_corpus, load_prompt_fixtures
from .errors import DynvlaError, NumericalFailureError, TrainingQualityError, UsageError
from .harness import (
    MatchMode,
    MethodComparison,
    RunRecord,
    ablation_sweep,
    compare_methods,
    record_comparison,
    replay_run,
)
from .zoo import ZooManifest, default_manifest, load_zoo, train_zoo

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


def _timestamp() -> str:
    return time.strftime("%Y%m%d-%H%M%S")


def _run_dir(cfg, command: str, run_name: str | None) -> Path:
    root = cfg.resolved_output_root()
    name = run_name or f"{_timestamp()}_{command}"
    path = root / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(cfg) -> ZooManifest:
    if cfg.zoo_manifest:
        return ZooManifest.load(cfg.zoo_manifest)
    return default_manifest()


def _prepare(cfg):
    corpus = generate_corpus(cfg.corpus.size, cfg.corpus.seed)
    manifest = _manifest(cfg)
    return corpus, manifest


def _attack_inputs(cfg, corpus):
    """Held-out images, their per-task prompt assignment, and ids."""
    count = cfg.harness.images
    ids = list(corpus.held_ids[:count])
    if len(ids) < count:
        raise UsageError(
            f"harness.images={count} exceeds held-out pool of {len(corpus.held_ids)}"
        )
    prompt_sets = {task: load_prompt_fixtures(task, source="toy") for task in TASKS}
    assignment = assign_prompts(corpus, prompt_sets, cfg.harness.prompt_seed)
    prompt_sources = {
        task: {i: assignment[i][task] for i in ids} for task in TASKS
    }
    images = np.stack([corpus.image(i) for i in ids])
    return images, ids, prompt_sources


def cmd_zoo_train(args) -> int:
    cfg = _load_cfg(args)
    corpus, manifest = _prepare(cfg)
    t0 = time.time()

    def progress(name, accuracy, reused):
        how = "reused" if reused else "trained"
        print(f"{name}: held-out caption accuracy {accuracy:.3f} ({how}, {time.time()-t0:.0f}s)")

    bundles = train_zoo(
        manifest, corpus, Path(cfg.zoo_dir), epochs=cfg.epochs, force=args.force,
        progress=progress,
    )
    print(f"zoo ready: {len(bundles)} variants in {cfg.zoo_dir} "
          f"(manifest hash {manifest.content_hash()[:12]})")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    corpus, manifest = _prepare(cfg)
    bundles = load_zoo(Path(cfg.zoo_dir))
    if args.surrogate not in bundles:
        raise UsageError(
            f"unknown surrogate {args.surrogate!r}; zoo has {sorted(bundles)}"
        )
    images, ids, prompt_sources = _attack_inputs(cfg, corpus)
    prompts = [prompt_sources[cfg.harness.task][i] for i in ids]
    attack_cfg = dataclasses.replace(cfg.attack, trace_every=50)
    run_dir = _run_dir(cfg, f"attack_{args.surrogate}", args.run_name)

    torch.set_num_threads(cfg.harness.compute_threads)
    t0 = time.time()

    def progress(step, mean_loss):
        print(f"iteration {step}/{attack_cfg.steps}: mean loss {mean_loss:.4f}")

    examples = attack_batch(
        bundles[args.surrogate], images, ids, prompts,
        cfg.harness.target_text, attack_cfg, progress=progress,
    )

    from PIL import Image

    img_dir = run_dir / "adversarial_images"
    img_dir.mkdir(exist_ok=True)
    deltas = {}
    metadata = []
    for ex in examples:
        arr = np.round(ex.adversarial_image * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / f"{ex.image_id}.png")
        deltas[ex.image_id] = ex.delta
        metadata.append(
            {
                "image_id": ex.image_id,
                "surrogate_id": ex.surrogate_id,
                "prompt": ex.prompt,
                "target_text": ex.target_text,
                "method": ex.method,
                "seed": ex.seed,
                "final_loss": float(ex.loss_trace[-1]),
            }
        )
    save_named_arrays(run_dir / "deltas.npz", deltas)
    (run_dir / "examples.json").write_text(
        json.dumps(
            {
                "attack_config": dataclasses.asdict(attack_cfg),
                "zoo_manifest_hash": manifest.content_hash(),
                "corpus": {"size": cfg.corpus.size, "seed": cfg.corpus.seed},
                "task": cfg.harness.task,
                "examples": metadata,
            },
            indent=1,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    reporting.write_output_manifest(run_dir)
    print(f"wrote {len(examples)} adversarial examples to {run_dir} "
          f"({time.time()-t0:.0f}s)")
    return EXIT_OK


def _comparison_artifacts(run_dir: Path, comparison: MethodComparison) -> None:
    for method, matrix in comparison.matrices.items():
        stem = f"asr_{method.replace('+', '_')}"
        reporting.save_matrix(matrix, run_dir, stem)
        reporting.heatmap(matrix, run_dir / f"{stem}.svg")
        if method != comparison.baseline:
            (run_dir / f"delta_{method.replace('+', '_')}.csv").write_text(
                reporting.delta_csv(comparison, method), encoding="utf-8"
            )
    (run_dir / "report.txt").write_text(
        reporting.comparison_report(comparison), encoding="utf-8"
    )


def cmd_transfer(args) -> int:
    cfg = _load_cfg(args)
    corpus, manifest = _prepare(cfg)
    bundles = load_zoo(Path(cfg.zoo_dir))
    images, ids, prompt_sources = _attack_inputs(cfg, corpus)
    mode = MatchMode(cfg.harness.match_mode)
    run_dir = _run_dir(cfg, "transfer", args.run_name)

    t0 = time.time()
    collect_bits: dict = {}
    comparison = compare_methods(
        bundles,
        cfg.harness.methods,
        cfg.attack,
        images,
        ids,
        prompt_sources[cfg.harness.task],
        cfg.harness.target_text,
        runs=cfg.harness.runs,
        run_seeds=cfg.harness.run_seeds,
        mode=mode,
        jobs=args.jobs if args.jobs is not None else cfg.harness.jobs,
        compute_threads=cfg.harness.compute_threads,
        collect_bits=collect_bits,
    )
    elapsed = time.time() - t0
    run_seeds = comparison.matrices[comparison.baseline].run_seeds
    record = record_comparison(
        comparison, collect_bits, cfg.attack, manifest.content_hash(), corpus,
        cfg.harness.task, mode, cfg.harness.target_text, ids,
        prompt_sources[cfg.harness.task], run_seeds,
        cfg.harness.compute_threads, elapsed,
    )
    record.save(run_dir / "run_record.json")
    _comparison_artifacts(run_dir, comparison)
    reporting.write_output_manifest(run_dir)
    print((run_dir / "report.txt").read_text(encoding="utf-8"))
    print(f"transfer artifacts in {run_dir} ({elapsed:.0f}s)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    corpus, _ = _prepare(cfg)
    bundles = load_zoo(Path(cfg.zoo_dir))
    surrogate = args.surrogate or sorted(bundles)[0]
    if surrogate not in bundles:
        raise UsageError(f"unknown surrogate {surrogate!r}; zoo has {sorted(bundles)}")
    images, ids, prompt_sources = _attack_inputs(cfg, corpus)
    values = _parse_values(args.parameter, args.values)
    run_dir = _run_dir(cfg, f"ablate_{args.parameter}", args.run_name)

    t0 = time.time()
    curves = {}
    for method in cfg.harness.methods:
        method_cfg = dataclasses.replace(cfg.attack, method=method)
        curves[method] = ablation_sweep(
            args.parameter, values, method_cfg, bundles, surrogate, images, ids,
            prompt_sources, target_text=cfg.harness.target_text,
            task=cfg.harness.task, mode=MatchMode(cfg.harness.match_mode),
            jobs=args.jobs if args.jobs is not None else cfg.harness.jobs,
            compute_threads=cfg.harness.compute_threads,
        )
        reporting.save_sweep(curves[method], run_dir, f"sweep_{method.replace('+', '_')}")
    reporting.curve_plot(
        curves, run_dir / "curves.svg", args.parameter, f"ablation: {args.parameter}"
    )
    reporting.write_output_manifest(run_dir)
    print(f"ablation artifacts in {run_dir} ({time.time()-t0:.0f}s)")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.run_dir)
    record_path = run_dir / "run_record.json"
    if not record_path.exists():
        raise UsageError(f"no run_record.json under {run_dir}")
    record = RunRecord.load(record_path)
    corpus = generate_corpus(record.corpus_size, record.corpus_seed)
    bundles = load_zoo(Path(cfg.zoo_dir))

    if args.replay:
        jobs = args.jobs if args.jobs is not None else cfg.harness.jobs
        fresh = replay_run(record, bundles, corpus, jobs=jobs)
        if fresh != record.success_bits:
            print("replay MISMATCH: success bits differ from the run record")
            return EXIT_FAILURE
        print("replay OK: success bits reproduced exactly")

    comparison = _comparison_from_record(record)
    out_dir = Path(args.out_dir) if args.out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _comparison_artifacts(out_dir, comparison)
    reporting.write_output_manifest(out_dir)
    print(f"report regenerated in {out_dir}")
    return EXIT_OK


def _comparison_from_record(record: RunRecord) -> MethodComparison:
    from .harness import ASRMatrix

    matrices = {}
    for method, per_surrogate in record.success_bits.items():
        names = tuple(sorted(per_surrogate))
        runs = len(record.run_seeds)
        per_run = np.zeros((len(names), len(names), runs))
        for i, s in enumerate(names):
            for r, seed in enumerate(record.run_seeds):
                per_seed = per_surrogate[s][str(seed)]
                for j, t in enumerate(names):
                    per_run[i, j, r] = float(np.mean(per_seed[t]))
        matrices[method] = ASRMatrix(
            surrogate_ids=names,
            target_ids=names,
            per_run_rates=per_run,
            sample_count=len(record.image_ids),
            run_seeds=tuple(record.run_seeds),
            method=method,
            task=record.task,
            target_text=record.target_text,
        )
    return MethodComparison(matrices=matrices, baseline=record.methods[0])


def _parse_values(parameter: str, raw: str):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise UsageError("--values must list at least one value")
    if parameter in ("kernel_size", "steps"):
        return [int(p) for p in parts]
    if parameter in ("kernel_sigma", "epsilon"):
        return [float(p) for p in parts]
    return parts


def _load_cfg(args):
    overrides = {
        "harness.jobs": getattr(args, "jobs", None),
        "attack.steps": getattr(args, "steps", None),
        "attack.method": getattr(args, "method", None),
        "attack.epsilon": getattr(args, "epsilon", None),
        "attack.alpha": getattr(args, "alpha", None),
        "attack.seed": getattr(args, "seed", None),
        "output_root": getattr(args, "output_root", None),
        "zoo_dir": getattr(args, "zoo_dir", None),
        "harness.target_text": getattr(args, "target", None),
        "harness.images": getattr(args, "images", None),
        "harness.runs": getattr(args, "runs", None),
    }
    methods = getattr(args, "methods", None)
    cfg = load_run_config(args.config, overrides)
    if methods:
        cfg.harness.methods = [m.strip() for m in methods.split(",") if m.strip()]
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynvla",
        description="Desk-scale lab for attention-perturbation transfer attacks "
        "on toy vision-language models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_jobs=True):
        p.add_argument("--config", help="run-config JSON file")
        p.add_argument("--output-root", dest="output_root",
                       help=f"output root (or ${OUTPUT_ROOT_ENV})")
        p.add_argument("--zoo-dir", dest="zoo_dir", help="trained-zoo directory")
        p.add_argument("--run-name", dest="run_name", help="fixed run directory name")
        if with_jobs:
            p.add_argument("--jobs", type=int, help="parallel attack jobs")

    p = sub.add_parser("zoo-train", help="train every zoo manifest variant")
    common(p, with_jobs=False)
    p.add_argument("--force", action="store_true", help="retrain even if checkpoints exist")
    p.set_defaults(func=cmd_zoo_train)

    p = sub.add_parser("attack", help="craft adversarial examples on one surrogate")
    common(p)
    p.add_argument("--surrogate", required=True, help="zoo variant name")
    p.add_argument("--method", help="attack method, e.g. pgd, dynvla, dynvla+di")
    p.add_argument("--steps", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--target", help="target output text")
    p.add_argument("--images", type=int, help="number of held-out images")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", help="full surrogate x target ASR matrix per method")
    common(p)
    p.add_argument("--methods", help="comma list; first is the baseline")
    p.add_argument("--steps", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--target", help="target output text")
    p.add_argument("--images", type=int)
    p.add_argument("--runs", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", help="sweep one parameter and plot ASR curves")
    common(p)
    p.add_argument("--parameter", required=True,
                   choices=["kernel_size", "kernel_sigma", "epsilon", "steps",
                            "target_text", "task"])
    p.add_argument("--values", required=True, help="comma-separated swept values")
    p.add_argument("--surrogate", help="surrogate name (default: first zoo variant)")
    p.add_argument("--methods", help="comma list of methods to sweep")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="regenerate reports from a run record")
    common(p)
    p.add_argument("run_dir", help="existing run directory with run_record.json")
    p.add_argument("--replay", action="store_true",
                   help="re-execute the run and verify success bits")
    p.add_argument("--out-dir", dest="out_dir", help="write regenerated files here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailureError, TrainingQualityError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except DynvlaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
