"""Command-line entry points for the pruning lab.

    prunelab gen --task arith --n 100 --seed 0 --out arith.jsonl
    prunelab train --out runs/base --steps 700
    prunelab prune --strategy bi --n 2 --ckpt runs/base/baseline.ckpt --out plan.json
    prunelab sweep --ckpt ... --out figs/sweep
    prunelab probe --metric arith --ckpt ... --mask plan.json
    prunelab recover --ckpt ... --mask plan.json --method sft_sgr --out runs/rec
    prunelab matrix --config experiment.json
    prunelab report --config experiment.json --out figs/post
    prunelab upper-bound --ckpt ... --n 2
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import diagnostics, harness, pruning
from .corpora import (MixtureConfig, TrainRecord, build_mixture, default_tokenizer,
                      gen_arithmetic, gen_mcq, gen_minilang_tasks, save_corpus)
from .model import GenerationParams, LayerMask, load_checkpoint, save_checkpoint


def _log(msg: str) -> None:
    print(msg, flush=True)


def _load_config(args) -> harness.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = harness.ExperimentConfig.load(args.config)
    else:
        cfg = harness.default_experiment_config(seed=args.seed)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _load_mask(path: str | None) -> LayerMask:
    if not path:
        return LayerMask.empty()
    return pruning.PrunePlan.load(path).removed


def cmd_gen(args) -> int:
    if args.task == "arith":
        examples = gen_arithmetic(args.seed, args.n)
        records = [TrainRecord(e.prompt, e.response, {"task": "arith"}) for e in examples]
    elif args.task == "minilang":
        tasks = gen_minilang_tasks(args.seed, args.n)
        records = [TrainRecord(t.prompt, t.reference,
                               {"task": "minilang", "cases": [[b, v] for b, v in t.test_cases]})
                   for t in tasks]
    elif args.task == "mcq":
        items = gen_mcq(args.seed, args.n)
        records = [TrainRecord(m.question, m.candidates[m.correct_index],
                               {"task": "mcq", "candidates": list(m.candidates),
                                "correct_index": m.correct_index})
                   for m in items]
    elif args.task == "mixture":
        records = build_mixture(MixtureConfig(
            counts={"arith": args.n, "minilang": args.n // 2}, seed=args.seed))
    else:
        raise SystemExit(f"unknown task {args.task!r}")
    save_corpus(records, args.out)
    _log(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.steps:
        config.train_steps = args.steps
    tokenizer = default_tokenizer()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights, run = harness.train_baseline(config, tokenizer, log=_log)
    save_checkpoint(weights, out / "baseline.ckpt")
    with open(out / "training.json", "w", encoding="utf-8") as fh:
        json.dump(run.to_json(), fh, indent=2, sort_keys=True)
    _log(f"saved baseline to {out / 'baseline.ckpt'}")
    return 0


def cmd_prune(args) -> int:
    config = _load_config(args)
    weights = load_checkpoint(args.ckpt)
    tokenizer = default_tokenizer()
    calib, _ = harness.build_training_corpus(config)
    plan = harness.make_plan(args.strategy, weights, args.n, config, tokenizer,
                             calib_records=calib[:16])
    plan.save(args.out)
    _log(f"plan ({args.strategy}, n={args.n}): removed {list(plan.removed.removed)} "
         f"-> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    weights = load_checkpoint(args.ckpt)
    out = args.out or "figs/sweep"
    results = harness.run_sweep_figure(weights, config, out, log=_log)
    for task, res in sorted(results.items()):
        _log(f"{task}: baseline {res.baseline:.3f}, "
             f"worst layer {min(res.scores, key=res.scores.get)}")
    return 0


def cmd_probe(args) -> int:
    config = _load_config(args)
    weights = load_checkpoint(args.ckpt)
    mask = _load_mask(args.mask)
    tokenizer = default_tokenizer()
    sets = harness.build_eval_sets(config, args.seed)
    out: dict = {"mask": list(mask.removed), "metric": args.metric}
    if args.metric == "arith":
        res = diagnostics.arithmetic_probe(weights, weights, mask, sets.probe, tokenizer)
        out["result"] = res.to_json()
    elif args.metric == "mcq":
        out["result"] = diagnostics.mcq_accuracy(weights, mask, sets.mcq, tokenizer).to_json()
    elif args.metric == "gen":
        out["result"] = {
            "arith": diagnostics.arith_generative_accuracy(
                weights, mask, sets.arith, tokenizer).to_json(),
            "minilang": diagnostics.minilang_pass_rate(
                weights, mask, sets.minilang, tokenizer).to_json(),
        }
    elif args.metric == "syntax":
        dist = diagnostics.syntax_distribution(weights, mask, sets.minilang, tokenizer)
        out["result"] = {k.value: v for k, v in dist.items()}
    elif args.metric == "degen":
        params = GenerationParams(max_new_tokens=48, temperature=0.8, seed=args.seed,
                                  stop_token=2)
        prompts = [e.prompt for e in sets.arith] + [t.prompt for t in sets.minilang]
        pruned_resp = diagnostics.generate_responses(weights, mask, prompts,
                                                     tokenizer, params)
        base_resp = diagnostics.generate_responses(weights, LayerMask.empty(),
                                                   prompts, tokenizer, params)
        out["result"] = diagnostics.degeneration_report(pruned_resp, base_resp).to_json()
    else:
        raise SystemExit(f"unknown metric {args.metric!r}")
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    _log(text)
    return 0


def cmd_recover(args) -> int:
    config = _load_config(args)
    baseline = load_checkpoint(args.ckpt)
    mask = _load_mask(args.mask)
    tokenizer = default_tokenizer()
    if args.steps:
        config.recover_steps = args.steps
    recovered, run, prov = harness.run_recovery(args.method, baseline, mask,
                                                baseline, config, tokenizer,
                                                args.seed)
    out = Path(args.out or "runs/recover")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(recovered, out / "recovered.ckpt")
    payload = {"provenance": prov, "mask": list(mask.removed)}
    if run is not None:
        payload["training"] = run.to_json()
    with open(out / "recovery.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    _log(f"recovered checkpoint -> {out / 'recovered.ckpt'}")
    return 0


def cmd_matrix(args) -> int:
    config = _load_config(args)
    table, cells, failures = harness.run_matrix(config, log=_log)
    _log(f"retention table -> {Path(config.out_dir) / 'retention.csv'}")
    if failures:
        for f in failures:
            _log(f"FAILED {f['job']}: {f['error']}")
        return 1
    return 0


def cmd_report(args) -> int:
    config = _load_config(args)
    out = args.out or str(Path(config.out_dir) / "post_recovery")
    report = harness.run_post_recovery_analysis(config, out, log=_log)
    _log(f"analyzed {len(report['cells'])} recovered cells -> {out}.json")
    return 0


def cmd_upper_bound(args) -> int:
    config = _load_config(args)
    baseline = load_checkpoint(args.ckpt)
    result = harness.run_upper_bound(config, baseline, args.n, seed=args.seed,
                                     k=args.k, log=_log)
    text = json.dumps({k: v for k, v in result.items() if k != "training"},
                      indent=2, sort_keys=True)
    _log(text)
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunelab",
                                     description="toy-scale layer pruning laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=str, default=None)
    common.add_argument("--config", type=str, default=None,
                        help="experiment config JSON (see README)")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: argparse.ArgumentParser(
                                    parents=[common], **kw))

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--task", choices=["arith", "minilang", "mcq", "mixture"],
                   required=True)
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the baseline model")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="produce a prune plan")
    p.add_argument("--strategy", choices=["reverse", "bi", "iterative"], required=True)
    p.add_argument("--n", type=int, required=True, help="layers to remove")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("sweep", help="single-layer ablation sweep + figure")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("probe", help="run one diagnostic")
    p.add_argument("--metric", choices=["arith", "mcq", "gen", "syntax", "degen"],
                   required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mask", default=None, help="prune plan JSON")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("recover", help="finetune a pruned model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--method", choices=["sft_gt", "sft_sgr", "lowrank_sgr"],
                   required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_recover)

    p = sub.add_parser("matrix", help="run the experiment matrix")
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("report", help="post-recovery analysis from matrix artifacts")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("upper-bound", help="task-aligned recovery upper bound")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--k", type=int, default=8)
    p.set_defaults(fn=cmd_upper_bound)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
