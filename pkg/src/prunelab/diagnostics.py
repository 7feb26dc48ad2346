"""Measurement suite: degeneration metrics, probes, and task evaluators.

With an empty mask every diagnostic reproduces its baseline value exactly,
so deltas are zero and ratios are one by construction.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import minilang
from .corpora import (ArithmeticExample, BOS_ID, EOS_ID, MCQExample, MiniLangTask,
                      Tokenizer)
from .model import (GenerationParams, LayerMask, TransformerWeights, generate,
                    generate_batch, next_token_distribution, sequence_logprob)


@dataclass
class DegenerationReport:
    rep4: float
    self_bleu4: float
    avg_tokens: float
    baseline_rep4: float | None = None
    baseline_self_bleu4: float | None = None
    baseline_avg_tokens: float | None = None
    rep4_ratio: float | None = None
    self_bleu4_ratio: float | None = None
    avg_tokens_ratio: float | None = None
    rep4_delta: float | None = None
    self_bleu4_delta: float | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class ArithmeticProbeResult:
    mean_delta_logprob: float
    top1_accuracy: float
    baseline_top1_accuracy: float
    n_items: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalScore:
    task: str
    accuracy: float
    n_items: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# degeneration metrics


def _ngrams(tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def rep4(responses: list) -> float:
    """Mean per-response 4-gram repetition: 1 - unique/total 4-grams.

    Responses shorter than 4 tokens are excluded; raises when nothing is
    eligible.
    """
    fractions = []
    for resp in responses:
        grams = _ngrams(list(resp), 4)
        if not grams:
            continue
        fractions.append(1.0 - len(set(grams)) / len(grams))
    if not fractions:
        raise ValueError("no response has >= 4 tokens")
    return float(np.mean(fractions))


def _bleu4_against(hyp: list, refs: list[list]) -> float:
    """Sentence BLEU of hyp against refs: clipped n-gram precision up to 4,
    add-one smoothing on zero matches, brevity penalty vs the closest
    reference length (ties to the shorter)."""
    if not hyp:
        return 0.0
    log_parts = []
    for n in range(1, 5):
        hyp_grams = Counter(_ngrams(hyp, n))
        total = sum(hyp_grams.values())
        if total == 0:
            continue
        max_ref = Counter()
        for ref in refs:
            for gram, cnt in Counter(_ngrams(ref, n)).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        matched = sum(min(cnt, max_ref[gram]) for gram, cnt in hyp_grams.items())
        if matched == 0:
            log_parts.append(np.log(1.0 / (total + 1.0)))
        else:
            log_parts.append(np.log(matched / total))
    if not log_parts:
        return 0.0
    precision = float(np.exp(np.mean(log_parts)))
    c = len(hyp)
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else float(np.exp(1.0 - r / c))
    return bp * precision


def self_bleu4(responses: list) -> float:
    """Mean BLEU4 of each response against all the others as references."""
    if len(responses) < 2:
        raise ValueError("self-BLEU needs at least 2 responses")
    seqs = [list(r) for r in responses]
    scores = []
    for i, hyp in enumerate(seqs):
        refs = seqs[:i] + seqs[i + 1:]
        scores.append(_bleu4_against(hyp, refs))
    return float(np.mean(scores))


def degeneration_report(responses: list, baseline_responses: list | None = None,
                        ) -> DegenerationReport:
    """rep4 / self-BLEU4 / mean length, with ratios and deltas vs a baseline.

    Ratios are omitted (None) when the baseline value is ~0; the deltas stay
    meaningful either way.
    """
    report = DegenerationReport(
        rep4=rep4(responses),
        self_bleu4=self_bleu4(responses),
        avg_tokens=float(np.mean([len(r) for r in responses])),
    )
    if baseline_responses is not None:
        report.baseline_rep4 = rep4(baseline_responses)
        report.baseline_self_bleu4 = self_bleu4(baseline_responses)
        report.baseline_avg_tokens = float(np.mean([len(r) for r in baseline_responses]))
        report.rep4_delta = report.rep4 - report.baseline_rep4
        report.self_bleu4_delta = report.self_bleu4 - report.baseline_self_bleu4

        def ratio(value, base):
            return value / base if abs(base) > 1e-12 else None

        report.rep4_ratio = ratio(report.rep4, report.baseline_rep4)
        report.self_bleu4_ratio = ratio(report.self_bleu4, report.baseline_self_bleu4)
        report.avg_tokens_ratio = ratio(report.avg_tokens, report.baseline_avg_tokens)
    return report


# ---------------------------------------------------------------------------
# arithmetic first-token probe


def arithmetic_probe(baseline: TransformerWeights, pruned: TransformerWeights,
                     mask: LayerMask, examples: list[ArithmeticExample],
                     tokenizer: Tokenizer) -> ArithmeticProbeResult:
    """Digit-restricted next-token probe on both models.

    For every prompt we renormalize the next-token distribution over the ten
    digit tokens, record the pruned-minus-baseline logprob change on the
    correct digit, and score top-1 for both models.
    """
    digits = tokenizer.digit_ids()
    deltas = []
    hits = 0
    base_hits = 0
    for ex in examples:
        prompt = [BOS_ID] + tokenizer.encode(ex.prompt)
        correct = tokenizer.encode(str(ex.answer))[0]
        base_dist = next_token_distribution(baseline, prompt, LayerMask.empty(), digits)
        pruned_dist = next_token_distribution(pruned, prompt, mask, digits)
        deltas.append(pruned_dist[correct] - base_dist[correct])
        if max(pruned_dist, key=pruned_dist.get) == correct:
            hits += 1
        if max(base_dist, key=base_dist.get) == correct:
            base_hits += 1
    n = len(examples)
    return ArithmeticProbeResult(
        mean_delta_logprob=float(np.mean(deltas)),
        top1_accuracy=hits / n,
        baseline_top1_accuracy=base_hits / n,
        n_items=n,
    )


# ---------------------------------------------------------------------------
# task evaluators


def mcq_accuracy(weights: TransformerWeights, mask: LayerMask,
                 items: list[MCQExample], tokenizer: Tokenizer) -> EvalScore:
    """Pick the candidate completion with the highest sequence log-probability."""
    correct = 0
    for item in items:
        question_ids = [BOS_ID] + tokenizer.encode(item.question)
        best_idx, best_lp = 0, -np.inf
        for idx, cand in enumerate(item.candidates):
            ids = question_ids + tokenizer.encode(cand)
            lp = sequence_logprob(weights, ids, mask, (len(question_ids), len(ids)))
            if lp > best_lp:
                best_idx, best_lp = idx, lp
        if best_idx == item.correct_index:
            correct += 1
    return EvalScore("mcq", correct / len(items), len(items))


def _generate_text(weights, mask, prompt: str, tokenizer, params: GenerationParams) -> str:
    ids = [BOS_ID] + tokenizer.encode(prompt)
    new = generate(weights, ids, mask, params)
    return tokenizer.decode(new)


def _generate_texts(weights, mask, prompts: list[str], tokenizer,
                    params: GenerationParams) -> list[str]:
    ids = [[BOS_ID] + tokenizer.encode(p) for p in prompts]
    return [tokenizer.decode(new)
            for new in generate_batch(weights, ids, mask, params)]


def default_generation_params(task: str, seed: int = 0) -> GenerationParams:
    if task == "arith":
        return GenerationParams(max_new_tokens=8, temperature=0.0, seed=seed,
                                stop_token=EOS_ID)
    return GenerationParams(max_new_tokens=64, temperature=0.0, seed=seed,
                            stop_token=EOS_ID)


def arith_generative_accuracy(weights: TransformerWeights, mask: LayerMask,
                              examples: list[ArithmeticExample], tokenizer: Tokenizer,
                              params: GenerationParams | None = None) -> EvalScore:
    """Exact match of the generated text against the expected answer."""
    params = params or default_generation_params("arith")
    texts = _generate_texts(weights, mask, [ex.prompt for ex in examples],
                            tokenizer, params)
    correct = sum(text == ex.response for text, ex in zip(texts, examples))
    return EvalScore("arith_gen", correct / len(examples), len(examples))


def minilang_pass_rate(weights: TransformerWeights, mask: LayerMask,
                       tasks: list[MiniLangTask], tokenizer: Tokenizer,
                       params: GenerationParams | None = None) -> EvalScore:
    params = params or default_generation_params("minilang")
    texts = _generate_texts(weights, mask, [t.prompt for t in tasks], tokenizer, params)
    passed = sum(
        minilang.classify(text, task.test_cases) is minilang.SyntaxOutcome.PASS
        for text, task in zip(texts, tasks))
    return EvalScore("minilang_gen", passed / len(tasks), len(tasks))


def generative_accuracy(weights: TransformerWeights, mask: LayerMask, task: str,
                        items: list, tokenizer: Tokenizer,
                        params: GenerationParams | None = None) -> EvalScore:
    if task == "arith":
        return arith_generative_accuracy(weights, mask, items, tokenizer, params)
    if task == "minilang":
        return minilang_pass_rate(weights, mask, items, tokenizer, params)
    raise ValueError(f"unknown generative task {task!r}")


def syntax_distribution(weights: TransformerWeights, mask: LayerMask,
                        tasks: list[MiniLangTask], tokenizer: Tokenizer,
                        params: GenerationParams | None = None,
                        ) -> dict[minilang.SyntaxOutcome, int]:
    """Classify every generated program; counts always sum to len(tasks)."""
    params = params or default_generation_params("minilang")
    texts = _generate_texts(weights, mask, [t.prompt for t in tasks], tokenizer, params)
    counts = {outcome: 0 for outcome in minilang.SyntaxOutcome}
    for text, task in zip(texts, tasks):
        counts[minilang.classify(text, task.test_cases)] += 1
    return counts


def generate_responses(weights: TransformerWeights, mask: LayerMask,
                       prompts: list[str], tokenizer: Tokenizer,
                       params: GenerationParams) -> list[list[int]]:
    """Token-level responses for a prompt list (per-prompt derived seeds)."""
    ids = [[BOS_ID] + tokenizer.encode(p) for p in prompts]
    return generate_batch(weights, ids, mask, params)
