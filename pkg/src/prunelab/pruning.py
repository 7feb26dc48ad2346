"""Layer-selection strategies: reverse order, block influence, sweeps, greedy.

Block influence scores a layer by how much its block actually transforms the
residual stream on calibration data (1 - mean cosine between block input and
output); low scores mark removal candidates. The greedy planner repeatedly
removes whichever remaining layer hurts a benchmark least. All tie-breaks go
to the shallower index so plans are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import LayerMask, TransformerWeights, forward


@dataclass
class BIScores:
    scores: np.ndarray  # length L, each in [0, 2]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("BI scores must be finite")

    def to_json(self) -> list[float]:
        return [float(s) for s in self.scores]


@dataclass
class PrunePlan:
    strategy: str  # reverse | bi | iterative | manual
    removed: LayerMask
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"strategy": self.strategy,
                "removed": list(self.removed.removed),
                "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj: dict) -> "PrunePlan":
        return cls(strategy=obj["strategy"], removed=LayerMask(tuple(obj["removed"])),
                   provenance=obj.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "PrunePlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class SweepResult:
    baseline: float
    scores: dict[int, float]  # layer -> benchmark score with that layer removed

    def to_json(self) -> dict:
        return {"baseline": self.baseline,
                "scores": {str(k): v for k, v in sorted(self.scores.items())}}


# benchmark functions score a masked model; they must be pure in (weights, mask)
BenchmarkFn = Callable[[TransformerWeights, LayerMask], float]


def bi_from_boundaries(boundary_states: list[list[np.ndarray]]) -> BIScores:
    """Scores from per-sequence boundary states (L+1 arrays of (T, d) each).

    score_l = 1 - mean cosine(h_in_l, h_out_l) over all sequences/positions.
    Zero-norm positions are excluded; a layer with no usable position is an
    error.
    """
    if not boundary_states:
        raise ValueError("need at least one calibration sequence")
    n_layers = len(boundary_states[0]) - 1
    sums = np.zeros(n_layers)
    counts = np.zeros(n_layers, dtype=np.int64)
    for bounds in boundary_states:
        if len(bounds) != n_layers + 1:
            raise ValueError("inconsistent boundary counts across sequences")
        for li in range(n_layers):
            h_in, h_out = bounds[li], bounds[li + 1]
            nin = np.linalg.norm(h_in, axis=-1)
            nout = np.linalg.norm(h_out, axis=-1)
            usable = (nin > 0) & (nout > 0)
            if not usable.any():
                continue
            cos = (h_in[usable] * h_out[usable]).sum(axis=-1) / (nin[usable] * nout[usable])
            sums[li] += cos.sum()
            counts[li] += int(usable.sum())
    if (counts == 0).any():
        bad = int(np.argmin(counts))
        raise ValueError(f"layer {bad}: every calibration position had a zero-norm state")
    return BIScores(1.0 - sums / counts)


def bi_scores(weights: TransformerWeights, calibration_batches: list) -> BIScores:
    """Block-influence scores over calibration token sequences (unpruned run)."""
    if not calibration_batches:
        raise ValueError("need at least one calibration sequence")
    states = []
    for tokens in calibration_batches:
        _, bounds = forward(weights, tokens, LayerMask.empty())
        states.append(bounds)
    return bi_from_boundaries(states)


def plan_reverse(n_layers: int, n_remove: int, protect_last: bool = False) -> PrunePlan:
    """Remove the deepest n_remove layers (optionally sparing the last one)."""
    if n_remove < 0:
        raise ValueError("n_remove must be >= 0")
    limit = n_layers - 1 if protect_last else n_layers
    if n_remove >= limit:
        raise ValueError(f"cannot remove {n_remove} of {n_layers} layers"
                         f"{' with the last protected' if protect_last else ''}")
    top = n_layers - 1 if protect_last else n_layers
    removed = tuple(range(top - n_remove, top))
    return PrunePlan(strategy="reverse", removed=LayerMask(removed),
                     provenance={"protect_last": protect_last})


def plan_bi(scores: BIScores, n_remove: int) -> PrunePlan:
    """Remove the n_remove lowest-scoring layers; ties go to the shallower index."""
    n_layers = len(scores.scores)
    if not 0 <= n_remove < n_layers:
        raise ValueError(f"cannot remove {n_remove} of {n_layers} layers")
    order = sorted(range(n_layers), key=lambda i: (scores.scores[i], i))
    removed = tuple(sorted(order[:n_remove]))
    return PrunePlan(strategy="bi", removed=LayerMask(removed),
                     provenance={"scores": scores.to_json()})


def single_layer_sweep(weights: TransformerWeights, benchmark: BenchmarkFn,
                       candidates: list[int] | None = None) -> SweepResult:
    """Benchmark the model with each candidate layer removed on its own.

    Layer 0 is skipped by default; early-layer removal wrecks everything and
    only clutters the sweep.
    """
    n_layers = weights.config.n_layers
    if candidates is None:
        candidates = list(range(1, n_layers))
    baseline = float(benchmark(weights, LayerMask.empty()))
    scores = {}
    for layer in candidates:
        scores[int(layer)] = float(benchmark(weights, LayerMask((layer,))))
    return SweepResult(baseline=baseline, scores=scores)


def greedy_iterative(weights: TransformerWeights, benchmark: BenchmarkFn,
                     n_remove: int, candidates: list[int] | None = None) -> PrunePlan:
    """Greedy benchmark-driven pruning.

    Each round scores every remaining candidate added to the current removal
    set and keeps the argmax (ties to the shallower index). The full
    per-round trace is recorded in the plan provenance.
    """
    n_layers = weights.config.n_layers
    if not 0 <= n_remove < n_layers:
        raise ValueError(f"cannot remove {n_remove} of {n_layers} layers")
    if candidates is None:
        candidates = list(range(n_layers))
    candidates = sorted(int(c) for c in candidates)  # tie rule needs ascending scan
    removed = LayerMask.empty()
    trace = []
    for round_idx in range(n_remove):
        best_layer, best_score = None, None
        round_scores = {}
        for layer in candidates:
            if layer in removed:
                continue
            score = float(benchmark(weights, removed.union(layer)))
            round_scores[int(layer)] = score
            if best_score is None or score > best_score:
                best_layer, best_score = layer, score
        if best_layer is None:
            raise ValueError("ran out of candidate layers")
        removed = removed.union(best_layer)
        trace.append({"round": round_idx, "scores": round_scores,
                      "chosen": int(best_layer), "score": best_score})
    return PrunePlan(strategy="iterative", removed=removed, provenance={"trace": trace})
