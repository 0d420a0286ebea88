"""Experimental protocol: surrogate/target transfer grids, method
comparisons, ablation sweeps, and replayable run records.

Attack success uses exact string matching (or, optionally, first-sentence
matching for chatty decoders) between the target model's greedy output and
the target text, with the same prompt the example was generated with.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from scipy.stats import binomtest

from .attacks import AttackConfig, attack_batch
from .errors import ValidationError
from .models import generate_batch

SENTENCE_TERMINATORS = ".!?"


class MatchMode(Enum):
    EXACT = "exact"
    FIRST_SENTENCE = "first_sentence"


def normalize_text(s: str) -> str:
    """Trim surrounding whitespace and collapse internal runs; case kept."""
    return " ".join(s.split())


def first_sentence(s: str) -> str:
    for i, ch in enumerate(s):
        if ch in SENTENCE_TERMINATORS:
            return s[:i].rstrip()
    return s


def match_output(output: str, target: str, mode: MatchMode) -> bool:
    out = normalize_text(output)
    want = normalize_text(target)
    if mode is MatchMode.FIRST_SENTENCE:
        out = first_sentence(out)
    return out == want


def _eval_images(adv_examples, quantize: bool) -> np.ndarray:
    images = np.stack([ex.adversarial_image for ex in adv_examples])
    if quantize:
        images = np.round(images * 255.0) / 255.0
    return images.astype(np.float32)


def evaluate_bits(
    target_bundle,
    adv_examples,
    prompt_source: dict,
    target_text: str,
    mode: MatchMode = MatchMode.EXACT,
    quantize: bool = False,
    batch_size: int = 128,
) -> np.ndarray:
    """Per-example success bits on one target model.

    ``prompt_source`` must yield the prompt each example was generated with;
    a mismatch is an error rather than a silent protocol violation.
    """
    if not adv_examples:
        raise ValidationError("empty adversarial example set")
    for ex in adv_examples:
        expected = prompt_source[ex.image_id]
        if expected != ex.prompt:
            raise ValidationError(
                f"prompt mismatch for {ex.image_id}: generation used {ex.prompt!r}, "
                f"evaluation would use {expected!r}"
            )
    tokenizer = target_bundle.tokenizer
    max_len = len(tokenizer.encode(target_text)) + 8
    images = _eval_images(adv_examples, quantize)
    bits = np.zeros(len(adv_examples), dtype=bool)
    for lo in range(0, len(adv_examples), batch_size):
        chunk = adv_examples[lo : lo + batch_size]
        prompts = [tokenizer.encode(ex.prompt) for ex in chunk]
        outs = generate_batch(
            target_bundle, torch.from_numpy(images[lo : lo + batch_size]), prompts, max_len
        )
        for j, out in enumerate(outs):
            bits[lo + j] = match_output(out.text, target_text, mode)
    return bits


def evaluate_asr(
    target_bundle,
    adv_examples,
    prompt_source: dict,
    target_text: str,
    mode: MatchMode = MatchMode.EXACT,
    quantize: bool = False,
) -> float:
    bits = evaluate_bits(target_bundle, adv_examples, prompt_source, target_text, mode, quantize)
    return float(bits.mean())


@dataclass
class ASRMatrix:
    """Surrogate x target success-rate grid, averaged over runs."""

    surrogate_ids: tuple[str, ...]
    target_ids: tuple[str, ...]
    per_run_rates: np.ndarray  # (S, T, R)
    sample_count: int
    run_seeds: tuple[int, ...]
    method: str
    task: str
    target_text: str

    @property
    def rates(self) -> np.ndarray:
        return self.per_run_rates.mean(axis=2)

    @property
    def white_box_mask(self) -> np.ndarray:
        mask = np.zeros((len(self.surrogate_ids), len(self.target_ids)), dtype=bool)
        for i, s in enumerate(self.surrogate_ids):
            for j, t in enumerate(self.target_ids):
                mask[i, j] = s == t
        return mask

    def off_diagonal_rates(self) -> np.ndarray:
        return self.rates[~self.white_box_mask]

    def cell(self, surrogate: str, target: str) -> float:
        i = self.surrogate_ids.index(surrogate)
        j = self.target_ids.index(target)
        return float(self.rates[i, j])


def _run_transfer_cell(payload):
    """One (surrogate, run-seed) attack plus evaluation on every target.

    Module-level so process pools can pickle it; pins its own torch thread
    count so results do not depend on --jobs.
    """
    (surrogate_name, bundles, images, image_ids, prompt_source, target_text, cfg, mode,
     quantize, compute_threads, checkpoint_every) = payload
    old_threads = torch.get_num_threads()
    torch.set_num_threads(compute_threads)
    try:
        prompts = [prompt_source[i] for i in image_ids]
        surrogate = bundles[surrogate_name]
        if checkpoint_every:
            advs, checkpoints = attack_batch(
                surrogate, images, image_ids, prompts, target_text, cfg,
                checkpoint_every=checkpoint_every,
            )
        else:
            advs = attack_batch(surrogate, images, image_ids, prompts, target_text, cfg)
            checkpoints = None
        bits = {}
        for target_name, target_bundle in bundles.items():
            bits[target_name] = evaluate_bits(
                target_bundle, advs, prompt_source, target_text, mode, quantize
            )
        result = {"bits": bits, "loss_traces": np.stack([a.loss_trace for a in advs])}
        if checkpoints is not None:
            # evaluate every checkpointed delta on every target
            base = images.astype(np.float32)
            ck_bits = {}
            for step, deltas in checkpoints.items():
                advs_ck = [
                    replace_adv(a, deltas[i], base[i]) for i, a in enumerate(advs)
                ]
                ck_bits[step] = {
                    t: evaluate_bits(b, advs_ck, prompt_source, target_text, mode, quantize)
                    for t, b in bundles.items()
                }
            result["checkpoint_bits"] = ck_bits
        return result
    finally:
        torch.set_num_threads(old_threads)


def replace_adv(example, delta, base_image):
    from dataclasses import replace as dc_replace

    return dc_replace(
        example,
        delta=delta,
        adversarial_image=np.clip(base_image + delta, 0.0, 1.0),
    )


def _execute_cells(payloads: dict, jobs: int) -> dict:
    """Run cells inline or on a process pool; aggregation is keyed, so the
    result is independent of scheduling order."""
    if jobs <= 1:
        return {key: _run_transfer_cell(p) for key, p in payloads.items()}
    keys = list(payloads)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_run_transfer_cell, [payloads[k] for k in keys]))
    return dict(zip(keys, results))


def transfer_matrix(
    bundles: dict,
    images: np.ndarray,
    image_ids,
    prompt_source: dict,
    target_text: str,
    cfg: AttackConfig,
    runs: int = 3,
    run_seeds=None,
    mode: MatchMode = MatchMode.EXACT,
    jobs: int = 1,
    compute_threads: int = 1,
    collect_bits: dict | None = None,
) -> ASRMatrix:
    """Attack on every surrogate (once per run seed) and evaluate everywhere.

    Diagonal cells are white-box. ``collect_bits``, when given, is filled
    with the raw per-image success bits for the run record.
    """
    if len(bundles) < 2:
        raise ValidationError("transfer needs at least 2 models in the zoo")
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    if run_seeds is None:
        run_seeds = [cfg.seed + 1000 * r for r in range(runs)]
    if len(run_seeds) != runs:
        raise ValidationError(f"expected {runs} run seeds, got {len(run_seeds)}")

    names = tuple(sorted(bundles))
    payloads = {}
    for s_name in names:
        for seed in run_seeds:
            cell_cfg = replace_cfg_seed(cfg, seed)
            payloads[(s_name, seed)] = (
                s_name, bundles, images, list(image_ids), prompt_source, target_text,
                cell_cfg, mode, False, compute_threads, 0,
            )
    results = _execute_cells(payloads, jobs)

    per_run = np.zeros((len(names), len(names), runs))
    for i, s_name in enumerate(names):
        for r, seed in enumerate(run_seeds):
            bits = results[(s_name, seed)]["bits"]
            for j, t_name in enumerate(names):
                per_run[i, j, r] = bits[t_name].mean()
            if collect_bits is not None:
                collect_bits.setdefault(s_name, {})[str(seed)] = {
                    t: [int(v) for v in bits[t]] for t in names
                }
    return ASRMatrix(
        surrogate_ids=names,
        target_ids=names,
        per_run_rates=per_run,
        sample_count=len(image_ids),
        run_seeds=tuple(run_seeds),
        method=cfg.method,
        task="",
        target_text=target_text,
    )


def replace_cfg_seed(cfg: AttackConfig, seed: int) -> AttackConfig:
    from dataclasses import replace as dc_replace

    return dc_replace(cfg, seed=seed)


@dataclass
class MethodComparison:
    matrices: dict  # method -> ASRMatrix
    baseline: str

    def delta(self, method: str) -> np.ndarray:
        return self.matrices[method].rates - self.matrices[self.baseline].rates

    def off_diagonal_delta(self, method: str) -> np.ndarray:
        mask = self.matrices[method].white_box_mask
        return self.delta(method)[~mask]

    def sign_test(self, method: str) -> dict:
        """One-sided sign test over seed-averaged off-diagonal cells: is the
        method better than the baseline in more cells than chance?"""
        deltas = self.off_diagonal_delta(method)
        positives = int((deltas > 0).sum())
        negatives = int((deltas < 0).sum())
        ties = int((deltas == 0).sum())
        n = positives + negatives
        p = float(binomtest(positives, n, 0.5, alternative="greater").pvalue) if n else 1.0
        return {
            "mean_delta": float(deltas.mean()),
            "positives": positives,
            "negatives": negatives,
            "ties": ties,
            "p_value": p,
        }


def compare_methods(
    bundles: dict,
    methods,
    shared_cfg: AttackConfig,
    images: np.ndarray,
    image_ids,
    prompt_source: dict,
    target_text: str,
    runs: int = 3,
    run_seeds=None,
    mode: MatchMode = MatchMode.EXACT,
    jobs: int = 1,
    compute_threads: int = 1,
    collect_bits: dict | None = None,
) -> MethodComparison:
    """Per-method transfer matrices over identical images and seeds, plus
    (method - baseline) deltas. The first method is the baseline."""
    if len(set(methods)) != len(methods):
        raise ValidationError("duplicate methods in comparison")
    matrices = {}
    for method in methods:
        from dataclasses import replace as dc_replace

        cfg = dc_replace(shared_cfg, method=method)
        bits_sink = None
        if collect_bits is not None:
            bits_sink = collect_bits.setdefault(method, {})
        matrices[method] = transfer_matrix(
            bundles, images, image_ids, prompt_source, target_text, cfg,
            runs=runs, run_seeds=run_seeds, mode=mode, jobs=jobs,
            compute_threads=compute_threads, collect_bits=bits_sink,
        )
    return MethodComparison(matrices=matrices, baseline=methods[0])


SWEEPABLE = ("kernel_size", "kernel_sigma", "epsilon", "steps", "target_text", "task")


@dataclass
class SweepCurve:
    parameter: str
    points: dict  # swept value -> mean ASR over non-surrogate targets
    per_target: dict  # swept value -> {target: asr}
    surrogate: str
    method: str
    note: str = ""


# qualitative context recorded with budget sweeps, not asserted: at full
# scale, baseline transfer tends to plateau once the budget exceeds 8/255
# while attention-perturbed attacks keep improving with larger budgets
EPSILON_SWEEP_NOTE = (
    "qualitative: baseline transfer often plateaus for budgets above 8/255, "
    "while kernel-perturbed attacks keep improving; curves here are "
    "desk-scale measurements, not assertions"
)


def ablation_sweep(
    parameter: str,
    values,
    fixed_cfg: AttackConfig,
    bundles: dict,
    surrogate: str,
    images: np.ndarray,
    image_ids,
    prompt_sources: dict,
    target_text: str = "unknown",
    task: str = "classification",
    mode: MatchMode = MatchMode.EXACT,
    jobs: int = 1,
    compute_threads: int = 1,
) -> SweepCurve:
    """One averaged-ASR curve over all

    non-surrogate targets per swept value. The steps sweep runs one attack
    at the largest budget and reads ASR off checkpoints every 200 steps.
    ``prompt_sources`` maps task -> {image_id: prompt}.
    """
    from dataclasses import replace as dc_replace

    if parameter not in SWEEPABLE:
        raise ValidationError(f"unknown sweep parameter {parameter!r}; known: {SWEEPABLE}")
    if not values:
        raise ValidationError("sweep values must be non-empty")

    others = [n for n in sorted(bundles) if n != surrogate]
    points: dict = {}
    per_target: dict = {}

    if parameter == "steps":
        budget = int(max(values))
        cadence = 200
        cfg = dc_replace(fixed_cfg, steps=budget)
        payload = (
            surrogate, bundles, images, list(image_ids), prompt_sources[task],
            target_text, cfg, mode, False, compute_threads, cadence,
        )
        result = _run_transfer_cell(payload)
        for step, bits in sorted(result["checkpoint_bits"].items()):
            per_target[step] = {t: float(bits[t].mean()) for t in others}
            points[step] = float(np.mean([per_target[step][t] for t in others]))
        return SweepCurve(parameter, points, per_target, surrogate, cfg.method)

    payloads = {}
    for value in values:
        cfg, use_task, use_target = fixed_cfg, task, target_text
        if parameter == "kernel_size":
            cfg = dc_replace(fixed_cfg, kernel_size_range=(int(value), int(value)))
        elif parameter == "kernel_sigma":
            cfg = dc_replace(fixed_cfg, kernel_sigma_range=(float(value), float(value)))
        elif parameter == "epsilon":
            cfg = dc_replace(fixed_cfg, epsilon=float(value))
        elif parameter == "target_text":
            use_target = str(value)
        elif parameter == "task":
            use_task = str(value)
        payloads[value] = (
            surrogate, bundles, images, list(image_ids), prompt_sources[use_task],
            use_target, cfg, mode, False, compute_threads, 0,
        )
    results = _execute_cells(payloads, jobs)
    for value in values:
        bits = results[value]["bits"]
        per_target[value] = {t: float(bits[t].mean()) for t in others}
        points[value] = float(np.mean([per_target[value][t] for t in others]))
    note = EPSILON_SWEEP_NOTE if parameter == "epsilon" else ""
    return SweepCurve(parameter, points, per_target, surrogate, fixed_cfg.method, note=note)


def white_box_anomaly_fraction(matrix: ASRMatrix) -> float:
    """Fraction of rows where some transfer cell beats the white-box cell."""
    rates = matrix.rates
    mask = matrix.white_box_mask
    bad = 0
    for i in range(rates.shape[0]):
        diag = rates[i][mask[i]][0]
        if (rates[i][~mask[i]] > diag).any():
            bad += 1
    return bad / rates.shape[0]


@dataclass
class RunRecord:
    """Everything needed to replay a run and reproduce its success bits."""

    kind: str
    attack_config: dict
    methods: tuple[str, ...]
    zoo_manifest_hash: str
    corpus_size: int
    corpus_seed: int
    task: str
    match_mode: str
    target_text: str
    image_ids: tuple[str, ...]
    prompt_assignment: dict  # image_id -> prompt (for the run task)
    run_seeds: tuple[int, ...]
    compute_threads: int
    success_bits: dict  # method -> surrogate -> run_seed(str) -> target -> [0/1...]
    timing_s: float = 0.0
    schema_version: int = 1

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @staticmethod
    def load(path) -> "RunRecord":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        payload.pop("schema_version", None)
        known = {f for f in RunRecord.__dataclass_fields__ if f != "schema_version"}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown run record keys: {sorted(unknown)}")
        for key in ("methods", "image_ids", "run_seeds"):
            payload[key] = tuple(payload[key])
        return RunRecord(**payload)


def record_comparison(
    comparison: MethodComparison,
    collect_bits: dict,
    cfg: AttackConfig,
    manifest_hash: str,
    corpus,
    task: str,
    mode: MatchMode,
    target_text: str,
    image_ids,
    prompt_assignment: dict,
    run_seeds,
    compute_threads: int,
    timing_s: float,
) -> RunRecord:
    bits_clean = {
        method: {
            s: {seed: {t: v for t, v in targets.items()} for seed, targets in per_seed.items()}
            for s, per_seed in per_surrogate.items()
        }
        for method, per_surrogate in collect_bits.items()
    }
    return RunRecord(
        kind="transfer",
        attack_config=asdict(cfg),
        methods=tuple(comparison.matrices),
        zoo_manifest_hash=manifest_hash,
        corpus_size=corpus_size_of(corpus),
        corpus_seed=corpus.seed,
        task=task,
        match_mode=mode.value,
        target_text=target_text,
        image_ids=tuple(image_ids),
        prompt_assignment=dict(prompt_assignment),
        run_seeds=tuple(run_seeds),
        compute_threads=compute_threads,
        success_bits=bits_clean,
        timing_s=timing_s,
    )


def corpus_size_of(corpus) -> int:
    return len(corpus.records)


def replay_run(record: RunRecord, bundles: dict, corpus, jobs: int = 1) -> dict:
    """Re-execute a recorded run; returns fresh success bits in the record's
    layout. Bit equality with ``record.success_bits`` is the replay check."""
    images = np.stack([corpus.image(i) for i in record.image_ids])
    prompt_source = dict(record.prompt_assignment)
    cfg = AttackConfig(**record.attack_config)
    mode = MatchMode(record.match_mode)
    fresh: dict = {}
    for method in record.methods:
        from dataclasses import replace as dc_replace

        collect: dict = {}
        transfer_matrix(
            bundles,
            images,
            record.image_ids,
            prompt_source,
            record.target_text,
            dc_replace(cfg, method=method),
            runs=len(record.run_seeds),
            run_seeds=list(record.run_seeds),
            mode=mode,
            jobs=jobs,
            compute_threads=record.compute_threads,
            collect_bits=collect,
        )
        fresh[method] = collect
    return fresh
