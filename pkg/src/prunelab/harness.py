"""Experiment orchestration: matrices over strategy x ratio x recovery,
retention tables, figure emission, and the upper-bound recipe.

Every artifact embeds a content hash of its inputs; re-running a finished
cell with unchanged inputs is a no-op, and a full matrix under fixed seeds
reproduces byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics, pruning, recovery
from .corpora import (MixtureConfig, Tokenizer, TrainRecord, build_mixture,
                      default_tokenizer, gen_arithmetic, gen_mcq, gen_minilang_tasks,
                      split_records)
from .model import (GenerationParams, LayerMask, ModelConfig, TransformerWeights,
                    load_checkpoint, save_checkpoint, weights_hash)
from .recovery import TrainHyper

WORKERS_ENV = "PRUNELAB_WORKERS"

RETENTION_CSV_HEADER = "task,strategy,ratio,recovery,raw,baseline,retention"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    model: ModelConfig
    strategies: list[str] = field(default_factory=lambda: ["reverse", "bi"])
    prune_counts: list[int] = field(default_factory=lambda: [1, 2])
    recoveries: list[str] = field(default_factory=lambda: ["none", "sft_sgr"])
    tasks: list[str] = field(default_factory=lambda: ["arith_gen", "mcq", "minilang_gen"])
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs/matrix"
    # corpus
    corpus_counts: dict = field(default_factory=lambda: {"arith": 3000, "minilang": 1600})
    corpus_weights: dict | None = None
    corpus_seed: int = 1234
    heldout: int = 256
    # baseline training
    train_steps: int = 700
    train_lr: float = 1e-3
    train_batch: int = 32
    train_warmup: int = 50
    train_seed: int = 0
    # recovery
    recover_steps: int = 300
    recover_lr: float = 3e-4
    recover_batch: int = 32
    recover_warmup: int = 50
    recover_records: int = 1500
    sgr_temperature: float = 0.7
    sgr_k: int = 1
    sgr_max_new_tokens: int = 64
    lowrank_rank: int = 8
    # evaluation
    n_probe: int = 200
    n_eval_arith: int = 100
    n_eval_mcq: int = 100
    n_eval_minilang: int = 60
    protect_last: bool = False

    def to_json(self) -> dict:
        obj = dict(self.__dict__)
        obj["model"] = self.model.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        obj["model"] = ModelConfig.from_json(obj["model"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)

    def counts_for_ratios(self, ratios: list[float]) -> list[int]:
        return [int(np.floor(self.model.n_layers * r)) for r in ratios]


def default_model_config(vocab_size: int, seed: int = 0) -> ModelConfig:
    return ModelConfig(n_layers=8, d_model=128, n_heads=4, d_ff=512,
                       vocab_size=vocab_size, max_seq=256, pos_scheme="learned",
                       tie_embeddings=True, seed=seed)


def default_experiment_config(out_dir: str = "runs/matrix", seed: int = 0) -> ExperimentConfig:
    tok = default_tokenizer()
    return ExperimentConfig(model=default_model_config(tok.vocab_size, seed=seed),
                            out_dir=out_dir)


# ---------------------------------------------------------------------------
# shared pieces


@dataclass
class EvalSets:
    probe: list
    arith: list
    mcq: list
    minilang: list


def build_eval_sets(config: ExperimentConfig, seed: int) -> EvalSets:
    """Held-out evaluation items; seed-offset so they never collide with the
    training corpus seeds."""
    return EvalSets(
        probe=gen_arithmetic(seed * 7 + 1_000_003, config.n_probe),
        arith=gen_arithmetic(seed * 7 + 2_000_003, config.n_eval_arith),
        mcq=gen_mcq(seed * 7 + 3_000_003, config.n_eval_mcq),
        minilang=gen_minilang_tasks(seed * 7 + 4_000_003, config.n_eval_minilang),
    )


def build_training_corpus(config: ExperimentConfig) -> tuple[list[TrainRecord], list[TrainRecord]]:
    records = build_mixture(MixtureConfig(counts=config.corpus_counts,
                                          weights=config.corpus_weights,
                                          seed=config.corpus_seed))
    return split_records(records, config.heldout)


def train_baseline(config: ExperimentConfig, tokenizer: Tokenizer,
                   log=None, step_callback=None,
                   ) -> tuple[TransformerWeights, recovery.TrainingRun]:
    """Pretrain the unpruned toy model on the packed ground-truth mixture.

    Baseline training is ordinary LM pretraining (full-token loss over packed
    rows); the response-only SFT convention is reserved for recovery runs.
    """
    from .model import init_weights

    train, heldout = build_training_corpus(config)
    weights = init_weights(config.model)
    hyper = TrainHyper(steps=config.train_steps, lr=config.train_lr,
                       batch_size=config.train_batch, warmup_steps=config.train_warmup,
                       eval_every=max(1, config.train_steps // 6),
                       lr_decay="linear", clip_norm=1.0)
    run = recovery.pretrain_lm(weights, train, hyper, tokenizer,
                               seed=config.train_seed, heldout=heldout,
                               step_callback=step_callback)
    if log:
        log(f"baseline trained: final train loss {run.train_loss[-1]:.4f}, "
            f"heldout ppl {run.eval_ppl[-1]:.4f}")
    return weights, run


def task_scores(weights: TransformerWeights, mask: LayerMask, sets: EvalSets,
                tokenizer: Tokenizer, tasks: list[str]) -> dict[str, float]:
    scores = {}
    if "arith_gen" in tasks:
        scores["arith_gen"] = diagnostics.arith_generative_accuracy(
            weights, mask, sets.arith, tokenizer).accuracy
    if "mcq" in tasks:
        scores["mcq"] = diagnostics.mcq_accuracy(weights, mask, sets.mcq,
                                                 tokenizer).accuracy
    if "minilang_gen" in tasks:
        scores["minilang_gen"] = diagnostics.minilang_pass_rate(
            weights, mask, sets.minilang, tokenizer).accuracy
    return scores


def arith_benchmark(eval_examples, tokenizer: Tokenizer) -> pruning.BenchmarkFn:
    """Benchmark closure for sweeps and greedy pruning: generative arithmetic
    accuracy of the masked model on a fixed calibration split."""

    def bench(weights: TransformerWeights, mask: LayerMask) -> float:
        return diagnostics.arith_generative_accuracy(weights, mask, eval_examples,
                                                     tokenizer).accuracy

    return bench


def make_plan(strategy: str, weights: TransformerWeights, n_remove: int,
              config: ExperimentConfig, tokenizer: Tokenizer,
              calib_records: list[TrainRecord] | None = None,
              benchmark: pruning.BenchmarkFn | None = None) -> pruning.PrunePlan:
    if n_remove == 0:
        return pruning.PrunePlan(strategy=strategy, removed=LayerMask.empty(),
                                 provenance={"note": "ratio 0"})
    if strategy == "reverse":
        return pruning.plan_reverse(weights.config.n_layers, n_remove,
                                    protect_last=config.protect_last)
    if strategy == "bi":
        if calib_records is None:
            raise ValueError("bi strategy needs calibration records")
        from .corpora import encode_record

        batches = [encode_record(r, tokenizer)[0] for r in calib_records[:16]]
        scores = pruning.bi_scores(weights, batches)
        return pruning.plan_bi(scores, n_remove)
    if strategy == "iterative":
        if benchmark is None:
            calib = gen_arithmetic(config.corpus_seed + 77, 48)
            benchmark = arith_benchmark(calib, tokenizer)
        return pruning.greedy_iterative(weights, benchmark, n_remove)
    raise ValueError(f"unknown strategy {strategy!r}")


def recovery_dataset(kind: str, teacher: TransformerWeights,
                     config: ExperimentConfig, tokenizer: Tokenizer, seed: int,
                     ) -> tuple[list[TrainRecord], list[TrainRecord], dict]:
    """(train, heldout, provenance) for one recovery method.

    Ground-truth recovery reuses the mixture records; SGR regenerates the
    responses from the unpruned teacher on the same prompts.
    """
    train, heldout = build_training_corpus(config)
    pool = train[:config.recover_records + config.heldout]
    if kind == "gt":
        records = pool
        provenance = {"source": "ground_truth"}
    elif kind == "sgr":
        params = GenerationParams(max_new_tokens=config.sgr_max_new_tokens,
                                  temperature=config.sgr_temperature,
                                  seed=seed * 31 + 5, stop_token=2)
        dataset = recovery.generate_sgr(teacher, [r.prompt for r in pool], params,
                                        k=config.sgr_k, tokenizer=tokenizer)
        records = dataset.records
        provenance = dict(dataset.provenance)
        provenance["source"] = "sgr"
        provenance["dropped_empty"] = dataset.dropped_empty
    else:
        raise ValueError(f"unknown recovery dataset kind {kind!r}")
    if len(records) <= config.heldout:
        raise ValueError("recovery corpus smaller than its held-out split")
    return records[:-config.heldout], records[-config.heldout:], provenance


def run_recovery(method: str, pruned: TransformerWeights, mask: LayerMask,
                 teacher: TransformerWeights, config: ExperimentConfig,
                 tokenizer: Tokenizer, seed: int,
                 ) -> tuple[TransformerWeights, recovery.TrainingRun | None, dict]:
    """Dispatch one recovery method; returns (weights, run, provenance)."""
    if method == "none":
        return pruned, None, {"source": "none"}
    hyper = TrainHyper(steps=config.recover_steps, lr=config.recover_lr,
                       batch_size=config.recover_batch,
                       warmup_steps=config.recover_warmup,
                       eval_every=max(1, config.recover_steps // 4))
    if method == "sft_gt":
        train, heldout, prov = recovery_dataset("gt", teacher, config, tokenizer, seed)
        run = recovery.sft(pruned, mask, train, hyper, heldout, tokenizer, seed=seed)
    elif method == "sft_sgr":
        train, heldout, prov = recovery_dataset("sgr", teacher, config, tokenizer, seed)
        run = recovery.sft(pruned, mask, train, hyper, heldout, tokenizer, seed=seed)
    elif method == "lowrank_sgr":
        train, heldout, prov = recovery_dataset("sgr", teacher, config, tokenizer, seed)
        run = recovery.lowrank_finetune(pruned, mask, train, config.lowrank_rank,
                                        hyper, heldout, tokenizer, seed=seed)
    else:
        raise ValueError(f"unknown recovery method {method!r}")
    return run.final_weights, run, prov


# ---------------------------------------------------------------------------
# retention table


@dataclass
class RetentionRow:
    task: str
    strategy: str
    ratio: float
    recovery: str
    raw: float
    baseline: float

    @property
    def retention(self) -> float:
        return self.raw / self.baseline

    def to_csv(self) -> str:
        return (f"{self.task},{self.strategy},{self.ratio!r},{self.recovery},"
                f"{self.raw!r},{self.baseline!r},{self.retention!r}")

    def to_json(self) -> dict:
        return {"task": self.task, "strategy": self.strategy, "ratio": self.ratio,
                "recovery": self.recovery, "raw": self.raw,
                "baseline": self.baseline, "retention": self.retention}


@dataclass
class RetentionTable:
    rows: list[RetentionRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [RETENTION_CSV_HEADER]
        ordered = sorted(self.rows, key=lambda r: (r.strategy, r.ratio, r.recovery, r.task))
        lines.extend(row.to_csv() for row in ordered)
        return "\n".join(lines) + "\n"

    def to_json(self) -> list[dict]:
        ordered = sorted(self.rows, key=lambda r: (r.strategy, r.ratio, r.recovery, r.task))
        return [row.to_json() for row in ordered]

    def mean_retention(self, strategy: str, ratio: float, recovery: str) -> float:
        vals = [r.retention for r in self.rows
                if r.strategy == strategy and r.ratio == ratio and r.recovery == recovery]
        if not vals:
            raise ValueError("no rows match")
        return float(np.mean(vals))


# ---------------------------------------------------------------------------
# the matrix


def _cell_key(strategy: str, n_remove: int, recovery_method: str, seed: int) -> str:
    return f"{strategy}_n{n_remove}_{recovery_method}_s{seed}"


def run_cell(config: ExperimentConfig, baseline: TransformerWeights,
             strategy: str, n_remove: int, recovery_method: str, seed: int,
             tokenizer: Tokenizer, baseline_scores: dict[str, float],
             calib_records: list[TrainRecord], cell_dir: Path | None = None) -> dict:
    """Plan, recover, and measure one matrix cell; returns the cell record."""
    plan = make_plan(strategy, baseline, n_remove, config, tokenizer,
                     calib_records=calib_records)
    mask = plan.removed
    recovered, run, prov = run_recovery(recovery_method, baseline, mask,
                                        baseline, config, tokenizer, seed)
    sets = build_eval_sets(config, seed)
    scores = task_scores(recovered, mask, sets, tokenizer, config.tasks)
    probe = diagnostics.arithmetic_probe(baseline, recovered, mask, sets.probe,
                                         tokenizer)
    cell = {
        "strategy": strategy, "n_remove": n_remove, "recovery": recovery_method,
        "seed": seed, "plan": plan.to_json(), "scores": scores,
        "baseline_scores": baseline_scores, "probe": probe.to_json(),
        "provenance": prov,
    }
    if run is not None:
        cell["training"] = run.to_json()
        if cell_dir is not None:
            save_checkpoint(recovered, cell_dir / "recovered.ckpt")
    return cell


def run_matrix(config: ExperimentConfig, baseline: TransformerWeights | None = None,
               log=None) -> tuple[RetentionTable, list[dict], list[dict]]:
    """Full strategy x count x recovery x seed sweep.

    Returns (table, cells, failures). Completed cells found on disk with a
    matching input hash are skipped; failures are recorded and the rest of
    the matrix still runs.
    """
    log = log or (lambda msg: None)
    tokenizer = default_tokenizer()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cells").mkdir(exist_ok=True)

    baseline_path = out / "baseline.ckpt"
    if baseline is None:
        if baseline_path.exists():
            baseline = load_checkpoint(baseline_path)
            log(f"loaded baseline from {baseline_path}")
        else:
            log("training baseline model")
            baseline, _ = train_baseline(config, tokenizer, log=log)
            save_checkpoint(baseline, baseline_path)
    base_hash = weights_hash(baseline)

    calib_records, _ = build_training_corpus(config)
    calib_records = calib_records[:16]

    baseline_scores_by_seed: dict[int, dict[str, float]] = {}
    for seed in config.seeds:
        sets = build_eval_sets(config, seed)
        baseline_scores_by_seed[seed] = task_scores(baseline, LayerMask.empty(),
                                                    sets, tokenizer, config.tasks)
        log(f"baseline scores (seed {seed}): {baseline_scores_by_seed[seed]}")

    jobs = []
    for strategy in config.strategies:
        for n_remove in config.prune_counts:
            for method in config.recoveries:
                for seed in config.seeds:
                    jobs.append((strategy, n_remove, method, seed))

    cells: list[dict] = []
    failures: list[dict] = []

    def one(job):
        strategy, n_remove, method, seed = job
        key = _cell_key(strategy, n_remove, method, seed)
        cell_dir = out / "cells" / key
        cell_dir.mkdir(parents=True, exist_ok=True)
        cell_file = cell_dir / "cell.json"
        inputs_hash = content_hash({
            "config": config.to_json(), "baseline": base_hash,
            "strategy": strategy, "n_remove": n_remove, "recovery": method,
            "seed": seed,
        })
        if cell_file.exists():
            with open(cell_file, encoding="utf-8") as fh:
                cached = json.load(fh)
            if cached.get("inputs_hash") == inputs_hash:
                log(f"cell {key}: cached")
                return cached
        log(f"cell {key}: running")
        cell = run_cell(config, baseline, strategy, n_remove, method, seed,
                        tokenizer, baseline_scores_by_seed[seed], calib_records,
                        cell_dir=cell_dir)
        cell["inputs_hash"] = inputs_hash
        cell["key"] = key
        with open(cell_file, "w", encoding="utf-8") as fh:
            json.dump(cell, fh, sort_keys=True, indent=2)
        return cell

    n_workers = worker_count()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda j: _guard(one, j, failures), jobs))
    else:
        results = [_guard(one, j, failures) for j in jobs]
    cells = [c for c in results if c is not None]

    table = RetentionTable()
    ratio_of = {n: n / config.model.n_layers for n in config.prune_counts}
    for cell in cells:
        for task, raw in sorted(cell["scores"].items()):
            base = cell["baseline_scores"].get(task, 0.0)
            if base > 0:
                table.rows.append(RetentionRow(
                    task=task, strategy=cell["strategy"],
                    ratio=ratio_of[cell["n_remove"]], recovery=cell["recovery"],
                    raw=raw, baseline=base))

    with open(out / "retention.csv", "w", encoding="utf-8") as fh:
        fh.write(table.to_csv())
    with open(out / "retention.json", "w", encoding="utf-8") as fh:
        json.dump({"rows": table.to_json(), "baseline_hash": base_hash,
                   "failures": failures}, fh, sort_keys=True, indent=2)
    log(f"matrix done: {len(cells)} cells, {len(failures)} failures")
    return table, cells, failures


def _guard(fn, job, failures: list):
    try:
        return fn(job)
    except Exception as exc:  # cell isolation: record and continue
        failures.append({"job": list(job), "error": f"{type(exc).__name__}: {exc}"})
        return None


# ---------------------------------------------------------------------------
# SVG emission (hand-rolled, deterministic)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_SYNTAX_COLORS = {
    "pass": "#2ca02c", "assertion_fail": "#1f77b4", "unbalanced_paren": "#d62728",
    "undefined_variable": "#ff7f0e", "other_syntax": "#7f7f7f",
}


def _svg_header(width: int, height: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def sweep_figure_svg(results: dict[str, pruning.SweepResult]) -> str:
    """Line chart of per-layer sweep scores, one polyline per task.

    The raw numbers are embedded verbatim in a <desc> block so reports can be
    cross-checked against the JSON artifact byte-for-byte.
    """
    width, height = 640, 400
    ml, mr, mt, mb = 60, 20, 40, 50
    layers = sorted({layer for res in results.values() for layer in res.scores})
    hi = max([res.baseline for res in results.values()]
             + [s for res in results.values() for s in res.scores.values()] + [1e-9])
    lines = _svg_header(width, height)
    payload = canonical_json({task: res.to_json() for task, res in sorted(results.items())})
    lines.append(f'<desc id="sweep-data">{payload}</desc>')
    plot_w, plot_h = width - ml - mr, height - mt - mb

    def xpos(layer):
        if len(layers) == 1:
            return ml + plot_w / 2
        return ml + plot_w * (layers.index(layer) / (len(layers) - 1))

    def ypos(score):
        return mt + plot_h * (1.0 - score / hi)

    lines.append(f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" '
                 f'y2="{mt + plot_h}" stroke="black"/>')
    lines.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>')
    for layer in layers:
        lines.append(f'<text x="{_fmt(xpos(layer))}" y="{height - mb + 20}" '
                     f'font-size="11" text-anchor="middle">{layer}</text>')
    lines.append(f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" '
                 f'text-anchor="middle">removed layer</text>')
    for i, (task, res) in enumerate(sorted(results.items())):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{_fmt(xpos(layer))},{_fmt(ypos(res.scores[layer]))}"
                       for layer in layers if layer in res.scores)
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                     f'points="{pts}"/>')
        lines.append(f'<line x1="{ml}" y1="{_fmt(ypos(res.baseline))}" '
                     f'x2="{ml + plot_w}" y2="{_fmt(ypos(res.baseline))}" '
                     f'stroke="{color}" stroke-dasharray="4 3" stroke-width="1"/>')
        lines.append(f'<text x="{ml + 8 + 130 * i}" y="{mt - 12}" font-size="12" '
                     f'fill="{color}">{task}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def bars_svg(groups: list[tuple[str, dict[str, float]]], series: list[str],
             title: str) -> str:
    """Grouped bar chart (e.g. base/pruned/recovered accuracy per cell)."""
    width, height = 640, 400
    ml, mt, mb = 60, 50, 60
    plot_w, plot_h = width - ml - 20, height - mt - mb
    lines = _svg_header(width, height)
    payload = canonical_json([{name: vals} for name, vals in groups])
    lines.append(f'<desc id="bar-data">{payload}</desc>')
    lines.append(f'<text x="{width / 2:.0f}" y="24" font-size="14" '
                 f'text-anchor="middle">{title}</text>')
    n_groups = max(1, len(groups))
    group_w = plot_w / n_groups
    bar_w = group_w / (len(series) + 1)
    for gi, (name, vals) in enumerate(groups):
        for si, key in enumerate(series):
            val = max(0.0, min(1.0, vals.get(key, 0.0)))
            x = ml + gi * group_w + si * bar_w + bar_w / 2
            h = plot_h * val
            color = _PALETTE[si % len(_PALETTE)]
            lines.append(f'<rect x="{_fmt(x)}" y="{_fmt(mt + plot_h - h)}" '
                         f'width="{_fmt(bar_w * 0.9)}" height="{_fmt(h)}" fill="{color}"/>')
        lines.append(f'<text x="{_fmt(ml + gi * group_w + group_w / 2)}" '
                     f'y="{height - mb + 20}" font-size="11" '
                     f'text-anchor="middle">{name}</text>')
    for si, key in enumerate(series):
        lines.append(f'<text x="{ml + 8 + 130 * si}" y="{mt - 8}" font-size="12" '
                     f'fill="{_PALETTE[si % len(_PALETTE)]}">{key}</text>')
    lines.append(f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" '
                 f'y2="{mt + plot_h}" stroke="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def stacked_svg(groups: list[tuple[str, dict[str, float]]], title: str) -> str:
    """100%-stacked outcome distribution per group (syntax categories)."""
    width, height = 640, 400
    ml, mt, mb = 60, 50, 60
    plot_w, plot_h = width - ml - 20, height - mt - mb
    lines = _svg_header(width, height)
    payload = canonical_json([{name: vals} for name, vals in groups])
    lines.append(f'<desc id="stack-data">{payload}</desc>')
    lines.append(f'<text x="{width / 2:.0f}" y="24" font-size="14" '
                 f'text-anchor="middle">{title}</text>')
    n_groups = max(1, len(groups))
    group_w = plot_w / n_groups
    for gi, (name, vals) in enumerate(groups):
        total = sum(vals.values()) or 1.0
        y = mt + plot_h
        x = ml + gi * group_w + group_w * 0.15
        for key in ("pass", "assertion_fail", "unbalanced_paren",
                    "undefined_variable", "other_syntax"):
            frac = vals.get(key, 0.0) / total
            h = plot_h * frac
            y -= h
            lines.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" '
                         f'width="{_fmt(group_w * 0.7)}" height="{_fmt(h)}" '
                         f'fill="{_SYNTAX_COLORS[key]}"/>')
        lines.append(f'<text x="{_fmt(ml + gi * group_w + group_w / 2)}" '
                     f'y="{height - mb + 20}" font-size="11" '
                     f'text-anchor="middle">{name}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figure-level recipes


def run_sweep_figure(weights: TransformerWeights, config: ExperimentConfig,
                     out_path, tokenizer: Tokenizer | None = None,
                     candidates: list[int] | None = None,
                     log=None) -> dict[str, pruning.SweepResult]:
    """Single-layer ablation sweep across tasks; writes JSON + SVG."""
    log = log or (lambda msg: None)
    tokenizer = tokenizer or default_tokenizer()
    sets = build_eval_sets(config, config.seeds[0] if config.seeds else 0)
    benches = {}
    if "arith_gen" in config.tasks:
        benches["arith_gen"] = arith_benchmark(sets.arith, tokenizer)
    if "mcq" in config.tasks:
        benches["mcq"] = lambda w, m: diagnostics.mcq_accuracy(
            w, m, sets.mcq, tokenizer).accuracy
    if "minilang_gen" in config.tasks:
        benches["minilang_gen"] = lambda w, m: diagnostics.minilang_pass_rate(
            w, m, sets.minilang, tokenizer).accuracy
    results = {}
    for task, bench in benches.items():
        log(f"sweep: {task}")
        results[task] = pruning.single_layer_sweep(weights, bench, candidates)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json({task: res.to_json() for task, res in sorted(results.items())}))
    with open(out_path.with_suffix(".svg"), "w", encoding="utf-8") as fh:
        fh.write(sweep_figure_svg(results))
    return results


def run_post_recovery_analysis(config: ExperimentConfig, out_path=None,
                               log=None) -> dict:
    """Fig. 7/8-style report from finished matrix artifacts.

    Per cell: three-bar arithmetic probe accuracy (base / pruned / recovered)
    and the stacked syntax-outcome distribution. Requires the matrix to have
    run already; missing artifacts raise.
    """
    log = log or (lambda msg: None)
    tokenizer = default_tokenizer()
    out = Path(config.out_dir)
    cells_dir = out / "cells"
    baseline_path = out / "baseline.ckpt"
    if not baseline_path.exists() or not cells_dir.exists():
        raise FileNotFoundError(
            f"matrix artifacts missing under {out}; run the matrix first")
    baseline = load_checkpoint(baseline_path)
    cell_files = sorted(cells_dir.glob("*/cell.json"))
    if not cell_files:
        raise FileNotFoundError(f"no completed cells under {cells_dir}")

    bars = []
    stacks = []
    report_cells = []
    for cf in cell_files:
        with open(cf, encoding="utf-8") as fh:
            cell = json.load(fh)
        if cell["recovery"] == "none":
            continue
        key = cell["key"]
        seed = cell["seed"]
        mask = LayerMask(tuple(cell["plan"]["removed"]))
        sets = build_eval_sets(config, seed)
        pruned_probe = diagnostics.arithmetic_probe(baseline, baseline, mask,
                                                    sets.probe, tokenizer)
        recovered_ckpt = cf.parent / "recovered.ckpt"
        if recovered_ckpt.exists():
            recovered = load_checkpoint(recovered_ckpt)
            rec_probe = diagnostics.arithmetic_probe(baseline, recovered, mask,
                                                     sets.probe, tokenizer)
            rec_top1 = rec_probe.top1_accuracy
            syntax_w = recovered
        else:
            rec_top1 = None
            syntax_w = None
        entry = {
            "cell": key,
            "base_top1": pruned_probe.baseline_top1_accuracy,
            "pruned_top1": pruned_probe.top1_accuracy,
            "recovered_top1": rec_top1,
        }
        bars.append((key, {"base": entry["base_top1"], "pruned": entry["pruned_top1"],
                           "recovered": rec_top1 if rec_top1 is not None else 0.0}))
        if syntax_w is not None:
            dist = diagnostics.syntax_distribution(syntax_w, mask, sets.minilang,
                                                   tokenizer)
            fractions = {k.value: v / len(sets.minilang) for k, v in dist.items()}
            entry["syntax"] = fractions
            stacks.append((key, fractions))
        report_cells.append(entry)
        log(f"analyzed {key}")

    report = {"cells": report_cells}
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
        with open(out_path.with_suffix(".svg"), "w", encoding="utf-8") as fh:
            fh.write(bars_svg(bars, ["base", "pruned", "recovered"],
                              "arithmetic probe top-1"))
        if stacks:
            with open(str(out_path) + "_syntax.svg", "w", encoding="utf-8") as fh:
                fh.write(stacked_svg(stacks, "syntax outcomes after recovery"))
    return report


def run_upper_bound(config: ExperimentConfig, baseline: TransformerWeights,
                    n_remove: int, seed: int = 0, k: int = 8,
                    log=None) -> dict:
    """Most-favorable recovery: iterative pruning calibrated on the target
    task, k=8 teacher samples per training prompt, finetune and test on the
    same task."""
    log = log or (lambda msg: None)
    tokenizer = default_tokenizer()
    train_examples = gen_arithmetic(seed * 13 + 101, config.recover_records)
    test_examples = gen_arithmetic(seed * 13 + 202, config.n_eval_arith)
    calib = gen_arithmetic(seed * 13 + 303, 48)
    bench = arith_benchmark(calib, tokenizer)

    baseline_score = diagnostics.arith_generative_accuracy(
        baseline, LayerMask.empty(), test_examples, tokenizer).accuracy
    if n_remove == 0:
        return {"baseline": baseline_score, "pruned": baseline_score,
                "recovered": baseline_score, "plan": None, "k": k}

    log("upper-bound: iterative pruning on task calibration")
    plan = pruning.greedy_iterative(baseline, bench, n_remove)
    mask = plan.removed
    pruned_score = diagnostics.arith_generative_accuracy(
        baseline, mask, test_examples, tokenizer).accuracy

    params = GenerationParams(max_new_tokens=16, temperature=config.sgr_temperature,
                              seed=seed * 17 + 7, stop_token=2)
    sgr = recovery.generate_sgr(baseline, [ex.prompt for ex in train_examples],
                                params, k=k, tokenizer=tokenizer)
    records = sgr.records
    train, heldout = records[:-config.heldout], records[-config.heldout:]
    hyper = TrainHyper(steps=config.recover_steps, lr=config.recover_lr,
                       batch_size=config.recover_batch,
                       warmup_steps=config.recover_warmup,
                       eval_every=max(1, config.recover_steps // 4))
    log("upper-bound: finetuning on self-generated task data")
    run = recovery.sft(baseline, mask, train, hyper, heldout, tokenizer, seed=seed)
    recovered_score = diagnostics.arith_generative_accuracy(
        run.final_weights, mask, test_examples, tokenizer).accuracy
    return {"baseline": baseline_score, "pruned": pruned_score,
            "recovered": recovered_score, "plan": plan.to_json(), "k": k,
            "training": run.to_json()}
