"""Post-pruning recovery: supervised finetuning, SGR data, low-rank adapters.

The same loop trains the baseline from scratch and finetunes pruned models;
loss is taken over response tokens only. Self-generated-response (SGR) data
comes from sampling the unpruned teacher on corpus prompts, so the pruned
student is supervised by its own parent distribution instead of ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .corpora import BOS_ID, PAD_ID, Tokenizer, TrainRecord, encode_record
from .model import (GenerationParams, LayerMask, LayerWeights, TransformerWeights,
                    active_parameters, forward_batch, generate_batch, weights_hash)
from .numcore import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass
class TrainHyper:
    steps: int
    lr: float = 3e-4
    batch_size: int = 32
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 50
    lr_decay: str = "none"  # "none" (constant after warmup) | "linear" (to 10%)
    clip_norm: float | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)

    def lr_at(self, step: int) -> float:
        warm = min(1.0, step / max(1, self.warmup_steps))
        if self.lr_decay == "linear" and self.steps > self.warmup_steps:
            frac = max(0.0, (step - self.warmup_steps) / (self.steps - self.warmup_steps))
            return self.lr * warm * (1.0 - 0.9 * frac)
        return self.lr * warm


@dataclass
class TrainingRun:
    steps: list[int]
    train_loss: list[float]
    eval_steps: list[int]
    eval_ppl: list[float]
    hyper: dict
    seed: int
    final_weights: TransformerWeights = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        obj = {"steps": self.steps, "train_loss": self.train_loss,
               "eval_steps": self.eval_steps, "eval_ppl": self.eval_ppl,
               "hyper": self.hyper, "seed": self.seed, "meta": self.meta}
        if self.final_weights is not None:
            obj["final_weights_hash"] = weights_hash(self.final_weights)
        return obj


def _encode_batch(records: list[TrainRecord], tokenizer: Tokenizer,
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad a record batch; the target mask marks response tokens (incl. EOS)."""
    encoded = [encode_record(r, tokenizer) for r in records]
    width = max(len(ids) for ids, _ in encoded)
    ids = np.full((len(encoded), width), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((len(encoded), width), dtype=np.float64)
    for row, (seq, resp_start) in enumerate(encoded):
        ids[row, :len(seq)] = seq
        loss_mask[row, resp_start:len(seq)] = 1.0
    # shift: position t predicts token t+1
    targets = ids[:, 1:]
    target_mask = loss_mask[:, 1:]
    return ids, targets, target_mask


def _batch_loss_from_arrays(weights, mask, ids, targets, target_mask) -> Tensor:
    logits, _ = forward_batch(weights, ids, mask)
    b, t, v = logits.shape
    pred = nc.reshape(logits, (b * t, v))
    full_targets = np.zeros((b, t), dtype=np.int64)
    full_targets[:, :-1] = targets
    full_mask = np.zeros((b, t), dtype=np.float64)
    full_mask[:, :-1] = target_mask
    return nc.cross_entropy(pred, full_targets.reshape(-1), full_mask.reshape(-1))


def eval_perplexity(weights: TransformerWeights, mask: LayerMask,
                    heldout: list[TrainRecord], tokenizer: Tokenizer,
                    batch_size: int = 32) -> float:
    """exp(mean response-token cross-entropy) over a held-out record set."""
    if not heldout:
        raise ValueError("held-out set is empty")
    total_nll = 0.0
    total_weight = 0.0
    with nc.no_grad():
        for lo in range(0, len(heldout), batch_size):
            chunk = heldout[lo:lo + batch_size]
            ids, targets, target_mask = _encode_batch(chunk, tokenizer)
            logits, _ = forward_batch(weights, ids, mask)
            logp = nc.log_softmax_rows(logits.data[:, :-1])
            b, tm1 = targets.shape
            picked = logp[np.arange(b)[:, None], np.arange(tm1)[None, :], targets]
            total_nll += float(-(picked * target_mask).sum())
            total_weight += float(target_mask.sum())
    if total_weight == 0:
        raise ValueError("held-out records have no response tokens")
    return float(np.exp(total_nll / total_weight))


def pack_records(records: list[TrainRecord], tokenizer: Tokenizer, row_len: int,
                 seed: int) -> np.ndarray:
    """Concatenate whole records (BOS prompt response EOS) into fixed-width
    rows for pretraining throughput; the tail of the last row is PAD.

    Records too long for a row are skipped. Order is shuffled by seed.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    rows = []
    current: list[int] = []
    for i in order:
        ids, _ = encode_record(records[i], tokenizer)
        if len(ids) > row_len:
            continue
        if len(current) + len(ids) > row_len:
            rows.append(current + [PAD_ID] * (row_len - len(current)))
            current = []
        current.extend(ids)
    if current:
        rows.append(current + [PAD_ID] * (row_len - len(current)))
    if not rows:
        raise ValueError("no record fits in the requested row length")
    return np.asarray(rows, dtype=np.int64)


def pretrain_lm(weights: TransformerWeights, records: list[TrainRecord],
                hyper: TrainHyper, tokenizer: Tokenizer, seed: int,
                row_len: int | None = None, heldout: list[TrainRecord] | None = None,
                step_callback=None) -> TrainingRun:
    """Language-model pretraining on packed rows with loss on every token.

    This is how the baseline gets trained: the SFT convention (response-only
    loss, record-level batches) stays reserved for recovery, where it
    mirrors instruction finetuning. Packing multiplies the tokens seen per
    step by an order of magnitude, which is what a from-scratch char model
    actually needs.
    """
    row_len = row_len or weights.config.max_seq
    rows = pack_records(records, tokenizer, row_len, seed)
    params = weights.parameters()
    state = nc.adam_init(params, lr=hyper.lr, beta1=hyper.beta1,
                         beta2=hyper.beta2, eps=hyper.eps)
    run = TrainingRun(steps=[], train_loss=[], eval_steps=[], eval_ppl=[],
                      hyper=hyper.to_json(), seed=seed,
                      meta={"mode": "packed_lm", "rows": int(rows.shape[0])})
    rng = np.random.default_rng(seed + 1)
    n_rows = rows.shape[0]
    order = rng.permutation(n_rows)
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        take = []
        while len(take) < hyper.batch_size:
            if cursor >= n_rows:
                order = rng.permutation(n_rows)
                cursor = 0
            take.append(order[cursor])
            cursor += 1
        return rows[np.asarray(take)]

    def record_eval(step):
        if heldout:
            run.eval_steps.append(step)
            run.eval_ppl.append(eval_perplexity(weights, LayerMask.empty(), heldout,
                                                tokenizer, hyper.batch_size))
        if step_callback is not None:
            step_callback(step, weights)

    record_eval(0)
    for step in range(1, hyper.steps + 1):
        ids = next_batch()
        targets = ids[:, 1:]
        target_mask = (targets != PAD_ID).astype(np.float64)
        try:
            loss = _batch_loss_from_arrays(weights, LayerMask.empty(), ids,
                                           targets, target_mask)
            nc.zero_grads(params)
            loss.backward()
            if hyper.clip_norm:
                clip_global_norm(params, hyper.clip_norm)
            nc.adam_step(params, state, lr=hyper.lr_at(step))
        except nc.NonFiniteError as exc:
            raise TrainingDiverged(step, {
                "error": str(exc), "hyper": hyper.to_json(), "seed": seed,
                "recent_losses": run.train_loss[-5:],
            }) from exc
        run.steps.append(step)
        run.train_loss.append(loss.item())
        if hyper.eval_every and step % hyper.eval_every == 0:
            record_eval(step)
    if hyper.steps and (not run.eval_steps or run.eval_steps[-1] != hyper.steps):
        record_eval(hyper.steps)
    run.final_weights = weights
    return run


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _batch_schedule(n_records: int, batch_size: int, steps: int, seed: int,
                    lengths: list[int]) -> list[np.ndarray]:
    """Deterministic batch index stream: shuffle per epoch, sort small chunks
    by length to limit padding waste, cycle epochs until `steps` batches."""
    rng = np.random.default_rng(seed)
    batches: list[np.ndarray] = []
    epoch = 0
    lengths_arr = np.asarray(lengths)
    while len(batches) < steps:
        perm = rng.permutation(n_records)
        chunk = batch_size * 8
        for lo in range(0, n_records, chunk):
            block = perm[lo:lo + chunk]
            block = block[np.argsort(lengths_arr[block], kind="stable")]
            for blo in range(0, len(block), batch_size):
                batch = block[blo:blo + batch_size]
                if len(batch):
                    batches.append(batch)
        epoch += 1
        if epoch > steps + 1:
            break
    return batches[:steps]


def run_training(weights: TransformerWeights, mask: LayerMask,
                 dataset: list[TrainRecord], hyper: TrainHyper,
                 heldout: list[TrainRecord], tokenizer: Tokenizer, seed: int,
                 params: list[Tensor] | None = None,
                 weights_for_step=None, step_callback=None) -> TrainingRun:
    """Adam training of `params` against response-token cross-entropy.

    `weights_for_step` lets adapters rebuild effective weights every step;
    plain finetuning just reuses `weights`. Held-out perplexity is recorded
    every eval_every steps (step_callback, when given, fires on the same
    cadence). Deterministic given (dataset, hyper, seed).
    """
    if params is None:
        params = active_parameters(weights, mask)
    if weights_for_step is None:
        weights_for_step = lambda: weights
    if not dataset:
        raise ValueError("training dataset is empty")
    state = nc.adam_init(params, lr=hyper.lr, beta1=hyper.beta1,
                         beta2=hyper.beta2, eps=hyper.eps)
    run = TrainingRun(steps=[], train_loss=[], eval_steps=[], eval_ppl=[],
                      hyper=hyper.to_json(), seed=seed)
    lengths = [len(encode_record(r, tokenizer)[0]) for r in dataset]
    schedule = _batch_schedule(len(dataset), hyper.batch_size, hyper.steps, seed, lengths)

    def record_eval(step):
        if heldout:
            run.eval_steps.append(step)
            run.eval_ppl.append(eval_perplexity(weights_for_step(), mask, heldout,
                                                tokenizer, hyper.batch_size))
        if step_callback is not None:
            step_callback(step, weights_for_step())

    record_eval(0)
    for step, batch_idx in enumerate(schedule, start=1):
        batch = [dataset[i] for i in batch_idx]
        ids, targets, target_mask = _encode_batch(batch, tokenizer)
        try:
            loss = _batch_loss_from_arrays(weights_for_step(), mask, ids, targets,
                                           target_mask)
            nc.zero_grads(params)
            loss.backward()
            if hyper.clip_norm:
                clip_global_norm(params, hyper.clip_norm)
            nc.adam_step(params, state, lr=hyper.lr_at(step))
        except nc.NonFiniteError as exc:
            raise TrainingDiverged(step, {
                "error": str(exc), "hyper": hyper.to_json(), "seed": seed,
                "recent_losses": run.train_loss[-5:],
            }) from exc
        run.steps.append(step)
        run.train_loss.append(loss.item())
        if hyper.eval_every and step % hyper.eval_every == 0:
            record_eval(step)
    if hyper.steps and (not run.eval_steps or run.eval_steps[-1] != hyper.steps):
        record_eval(hyper.steps)
    run.final_weights = weights
    return run


def sft(pruned: TransformerWeights, mask: LayerMask, dataset: list[TrainRecord],
        hyper: TrainHyper, heldout: list[TrainRecord], tokenizer: Tokenizer,
        seed: int = 0) -> TrainingRun:
    """Full supervised finetuning of a pruned model (input weights untouched)."""
    work = pruned.copy()
    run = run_training(work, mask, dataset, hyper, heldout, tokenizer, seed)
    run.final_weights = work
    run.meta["method"] = "sft"
    return run


# ---------------------------------------------------------------------------
# low-rank adapters


@dataclass
class LowRankAdapter:
    """base + (alpha/r) * A @ B applied to one target matrix."""

    name: str
    a: Tensor  # d x r
    b: Tensor  # r x d'
    rank: int
    alpha: float


_ADAPTER_TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass
class AdapterSet:
    base: TransformerWeights
    adapters: dict[str, LowRankAdapter]
    rank: int
    alpha: float

    def params(self) -> list[Tensor]:
        out = []
        for key in sorted(self.adapters):
            out.extend([self.adapters[key].a, self.adapters[key].b])
        return out

    def effective(self) -> TransformerWeights:
        """Adapted weights as graph nodes; grads flow only into A/B."""
        scale = self.alpha / self.rank
        layers = []
        for li, layer in enumerate(self.base.layers):
            fields = {}
            for name in ("attn_norm", "ffn_norm"):
                fields[name] = getattr(layer, name)
            for name in _ADAPTER_TARGETS:
                base_t = getattr(layer, name)
                ad = self.adapters[f"layer{li}.{name}"]
                fields[name] = nc.add(base_t.detach(),
                                      nc.mul(nc.matmul(ad.a, ad.b), scale))
            layers.append(LayerWeights(**fields))
        return TransformerWeights(
            config=self.base.config,
            embedding=self.base.embedding.detach(),
            pos_embedding=None if self.base.pos_embedding is None
            else self.base.pos_embedding.detach(),
            layers=layers,
            final_norm=self.base.final_norm.detach(),
            head=None if self.base.head is None else self.base.head.detach(),
        )

    def merge(self) -> TransformerWeights:
        """Fold adapters into plain weights (no graph)."""
        scale = self.alpha / self.rank
        merged = self.base.copy()
        for li, layer in enumerate(merged.layers):
            for name in _ADAPTER_TARGETS:
                ad = self.adapters[f"layer{li}.{name}"]
                getattr(layer, name).data += scale * (ad.a.data @ ad.b.data)
        return merged


def init_adapters(base: TransformerWeights, rank: int, alpha: float = 16.0,
                  seed: int = 0) -> AdapterSet:
    """A ~ N(0, 1/r), B = 0 so the adapted model starts exactly at the base."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    adapters = {}
    for li, layer in enumerate(base.layers):
        for name in _ADAPTER_TARGETS:
            rows, cols = getattr(layer, name).shape
            adapters[f"layer{li}.{name}"] = LowRankAdapter(
                name=f"layer{li}.{name}",
                a=Tensor(rng.normal(0.0, 1.0 / rank, size=(rows, rank)), requires_grad=True),
                b=Tensor(np.zeros((rank, cols)), requires_grad=True),
                rank=rank, alpha=alpha)
    return AdapterSet(base=base, adapters=adapters, rank=rank, alpha=alpha)


def lowrank_finetune(pruned: TransformerWeights, mask: LayerMask,
                     dataset: list[TrainRecord], rank: int, hyper: TrainHyper,
                     heldout: list[TrainRecord], tokenizer: Tokenizer,
                     seed: int = 0, alpha: float = 16.0) -> TrainingRun:
    """Adapter-only finetuning; the base stays frozen and the returned
    checkpoint has the adapters merged in."""
    adapters = init_adapters(pruned, rank=rank, alpha=alpha, seed=seed)
    run = run_training(pruned, mask, dataset, hyper, heldout, tokenizer, seed,
                       params=adapters.params(), weights_for_step=adapters.effective)
    run.final_weights = adapters.merge()
    run.meta["method"] = "lowrank"
    run.meta["rank"] = rank
    run.meta["alpha"] = alpha
    return run


# ---------------------------------------------------------------------------
# self-generated responses


@dataclass
class SGRDataset:
    records: list[TrainRecord]
    provenance: dict
    dropped_empty: int = 0

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"provenance": self.provenance,
                                 "dropped_empty": self.dropped_empty},
                                sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SGRDataset":
        records = []
        provenance = {}
        dropped = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if "provenance" in obj:
                    provenance = obj["provenance"]
                    dropped = obj.get("dropped_empty", 0)
                else:
                    records.append(TrainRecord(obj["prompt"], obj["response"],
                                               obj.get("meta", {})))
        return cls(records=records, provenance=provenance, dropped_empty=dropped)


def generate_sgr(teacher: TransformerWeights, prompts: list[str],
                 params: GenerationParams, k: int, tokenizer: Tokenizer,
                 teacher_mask: LayerMask = LayerMask.empty()) -> SGRDataset:
    """k teacher samples per prompt, stripped of empties, with provenance.

    The teacher must be the unpruned model; passing a non-empty mask is a
    misuse error.
    """
    if len(teacher_mask):
        raise ValueError("SGR teacher must be unpruned (got a non-empty mask)")
    if k < 1:
        raise ValueError("k must be >= 1")
    flat_prompts = []
    for prompt in prompts:
        ids = [BOS_ID] + tokenizer.encode(prompt)
        flat_prompts.extend([ids] * k)
    generations = generate_batch(teacher, flat_prompts, teacher_mask, params)
    records = []
    dropped = 0
    for idx, new_tokens in enumerate(generations):
        text = tokenizer.decode(new_tokens)
        if not text:
            dropped += 1
            continue
        records.append(TrainRecord(prompts[idx // k], text,
                                   {"task": "sgr", "k": idx % k}))
    return SGRDataset(
        records=records,
        provenance={"teacher_ckpt": weights_hash(teacher), "params": params.to_json(),
                    "k": k},
        dropped_empty=dropped,
    )
