"""Decoder-only transformer with per-layer removability.

A layer is removed by *skipping* its whole block (attention + FFN) so the
residual stream passes through untouched; the weights are never edited.
All probing, scoring and generation goes through the same forward pass so
masked and physically rebuilt models agree bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class VocabError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int = 256
    pos_scheme: str = "learned"  # "learned" | "rotary"
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers")
        if self.vocab_size < 16:
            raise ValueError("vocab_size must be >= 16")
        if self.max_seq < 64:
            raise ValueError("max_seq must be >= 64")
        if self.pos_scheme not in ("learned", "rotary"):
            raise ValueError(f"unknown pos_scheme {self.pos_scheme!r}")

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_seq": self.max_seq,
            "pos_scheme": self.pos_scheme, "tie_embeddings": self.tie_embeddings,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass(frozen=True)
class LayerMask:
    """Ordered set of removed layer indices."""

    removed: tuple[int, ...] = ()

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.removed)))
        if len(idx) != len(self.removed):
            raise ValueError(f"duplicate layer indices in mask: {self.removed}")
        if idx and idx[0] < 0:
            raise ValueError("negative layer index")
        object.__setattr__(self, "removed", idx)

    @classmethod
    def empty(cls) -> "LayerMask":
        return cls(())

    def __contains__(self, layer: int) -> bool:
        return layer in self.removed

    def __len__(self) -> int:
        return len(self.removed)

    def union(self, layer: int) -> "LayerMask":
        return LayerMask(self.removed + (layer,))

    def validate(self, n_layers: int) -> None:
        if self.removed and self.removed[-1] >= n_layers:
            raise ValueError(f"mask {self.removed} out of range for {n_layers} layers")


@dataclass
class GenerationParams:
    max_new_tokens: int
    temperature: float = 0.0
    seed: int = 0
    stop_token: int | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def to_json(self) -> dict:
        return {"max_new_tokens": self.max_new_tokens, "temperature": self.temperature,
                "seed": self.seed, "stop_token": self.stop_token}


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w1: Tensor
    w2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.attn_norm, self.wq, self.wk, self.wv, self.wo,
                self.ffn_norm, self.w1, self.w2]


@dataclass
class TransformerWeights:
    config: ModelConfig
    embedding: Tensor                 # V x d
    pos_embedding: Tensor | None      # max_seq x d when pos_scheme == learned
    layers: list[LayerWeights]
    final_norm: Tensor
    head: Tensor | None               # d x V when untied

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in checkpoint declaration order."""
        out = [self.embedding]
        if self.pos_embedding is not None:
            out.append(self.pos_embedding)
        for layer in self.layers:
            out.extend(layer.tensors())
        out.append(self.final_norm)
        if self.head is not None:
            out.append(self.head)
        return out

    def copy(self) -> "TransformerWeights":
        def dup(t):
            return None if t is None else Tensor(t.data.copy(), requires_grad=True)

        return TransformerWeights(
            config=self.config,
            embedding=dup(self.embedding),
            pos_embedding=dup(self.pos_embedding),
            layers=[LayerWeights(*[dup(t) for t in layer.tensors()]) for layer in self.layers],
            final_norm=dup(self.final_norm),
            head=dup(self.head),
        )


def init_weights(config: ModelConfig) -> TransformerWeights:
    """Seeded GPT-style init: N(0, 0.02), residual-out projections scaled down."""
    rng = np.random.default_rng(config.seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    res_scale = 0.02 / np.sqrt(2.0 * config.n_layers)

    def wm(rows, cols, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=(rows, cols)), requires_grad=True)

    def gain(n):
        return Tensor(np.ones(n), requires_grad=True)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            attn_norm=gain(d),
            wq=wm(d, d), wk=wm(d, d), wv=wm(d, d), wo=wm(d, d, res_scale),
            ffn_norm=gain(d),
            w1=wm(d, dff), w2=wm(dff, d, res_scale),
        ))
    return TransformerWeights(
        config=config,
        embedding=wm(v, d),
        pos_embedding=wm(config.max_seq, d) if config.pos_scheme == "learned" else None,
        layers=layers,
        final_norm=gain(d),
        head=None if config.tie_embeddings else wm(d, v),
    )


def param_count(config: ModelConfig) -> int:
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    n = v * d
    if config.pos_scheme == "learned":
        n += config.max_seq * d
    n += config.n_layers * (2 * d + 4 * d * d + d * dff + dff * d)
    n += d
    if not config.tie_embeddings:
        n += d * v
    return n


def _rotary_tables(max_seq: int, dh: int) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = 10000.0 ** (-np.arange(0, dh, 2) / dh)
    angles = np.arange(max_seq)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


_CAUSAL_NEG = -1e30


def _check_tokens(config: ModelConfig, ids: np.ndarray) -> None:
    if ids.shape[-1] > config.max_seq:
        raise SequenceLengthError(f"sequence length {ids.shape[-1]} > max_seq {config.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise VocabError(f"token id out of range for vocab {config.vocab_size}")


def forward_batch(weights: TransformerWeights, token_ids: np.ndarray,
                  mask: LayerMask = LayerMask(),
                  ) -> tuple[Tensor, list[Tensor]]:
    """Run a (B, T) batch through the masked layer stack.

    Returns (logits (B,T,V), boundaries) where boundaries[i] is the residual
    stream entering layer i, plus the final stream after the last layer
    (L+1 entries). Skipped layers copy their boundary through unchanged.
    """
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise nc.ShapeError("forward_batch expects a (B, T) id array")
    _check_tokens(cfg, ids)
    mask.validate(cfg.n_layers)
    b, t = ids.shape
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h

    x = nc.embedding(weights.embedding, ids)
    if cfg.pos_scheme == "learned":
        pos = np.broadcast_to(np.arange(t, dtype=np.int64), (b, t))
        x = nc.add(x, nc.embedding(weights.pos_embedding, pos))
        cos = sin = None
    else:
        cos_full, sin_full = _rotary_tables(cfg.max_seq, dh)
        cos, sin = cos_full[:t], sin_full[:t]

    causal = np.triu(np.full((t, t), _CAUSAL_NEG), k=1)
    scale = 1.0 / np.sqrt(dh)

    boundaries = [x]
    for li, layer in enumerate(weights.layers):
        if li in mask:
            boundaries.append(x)
            continue
        a = nc.rms_norm(x, layer.attn_norm)
        flat = nc.reshape(a, (b * t, d))

        def heads(m):
            # (b*t, d) -> (b, h, t, dh); the transpose stays a view
            y = nc.reshape(nc.matmul(flat, m), (b, t, h, dh))
            return nc.transpose(y, (0, 2, 1, 3))

        q, k, v = heads(layer.wq), heads(layer.wk), heads(layer.wv)
        if cfg.pos_scheme == "rotary":
            q = nc.rotary(q, cos, sin)
            k = nc.rotary(k, cos, sin)
        q = nc.mul(q, scale)  # scale before the (t x t) blowup
        attn = nc.softmax(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), axis=-1,
                          bias=causal)
        ctx = nc.matmul(attn, v)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b * t, d))
        x = nc.add(x, nc.reshape(nc.matmul(ctx, layer.wo), (b, t, d)))

        f = nc.rms_norm(x, layer.ffn_norm)
        f = nc.matmul(nc.reshape(f, (b * t, d)), layer.w1)
        f = nc.matmul(nc.gelu(f), layer.w2)
        x = nc.add(x, nc.reshape(f, (b, t, d)))
        boundaries.append(x)

    final = nc.rms_norm(x, weights.final_norm)
    flat = nc.reshape(final, (b * t, d))
    if weights.head is not None:
        logits = nc.matmul(flat, weights.head)
    else:
        logits = nc.matmul(flat, nc.transpose(weights.embedding, (1, 0)))
    return nc.reshape(logits, (b, t, cfg.vocab_size)), boundaries


def forward(weights: TransformerWeights, tokens, mask: LayerMask = LayerMask(),
            ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Single-sequence forward without autograd: (T,V) logits + boundary states."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    with nc.no_grad():
        logits, bounds = forward_batch(weights, ids, mask)
    return logits.data[0], [bd.data[0] for bd in bounds]


def sequence_logprob(weights: TransformerWeights, tokens, mask: LayerMask,
                     span: tuple[int, int]) -> float:
    """Sum of log P(tokens[p] | tokens[:p]) for p in [span_start, span_end)."""
    ids = np.asarray(tokens, dtype=np.int64)
    start, end = span
    if not (0 < start < end <= len(ids)):
        raise ValueError(f"scored span {span} invalid for sequence of length {len(ids)} "
                         "(must be non-empty, start >= 1)")
    logits, _ = forward(weights, ids, mask)
    logp = nc.log_softmax_rows(logits[start - 1:end - 1])
    return float(logp[np.arange(end - start), ids[start:end]].sum())


def next_token_distribution(weights: TransformerWeights, prompt_tokens,
                            mask: LayerMask = LayerMask(),
                            restrict: list[int] | None = None) -> dict[int, float]:
    """Log-probabilities for the next token, optionally renormalized over a subset."""
    ids = np.asarray(prompt_tokens, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("prompt must be non-empty")
    logits, _ = forward(weights, ids, mask)
    logp = nc.log_softmax_rows(logits[-1])
    if restrict is None:
        return {int(i): float(logp[i]) for i in range(len(logp))}
    keep = sorted(set(int(i) for i in restrict))
    if not keep:
        raise ValueError("restrict set is empty")
    sub = logp[keep]
    norm = sub.max() + np.log(np.exp(sub - sub.max()).sum())
    return {i: float(logp[i] - norm) for i in keep}


def generate(weights: TransformerWeights, prompt_tokens, mask: LayerMask,
             params: GenerationParams) -> list[int]:
    """Autoregressive decode; returns only the newly generated ids.

    Greedy when temperature == 0, otherwise seeded categorical sampling.
    Stops after emitting stop_token, at max_new_tokens, or when the context
    window fills up.
    """
    cfg = weights.config
    ids = list(int(i) for i in prompt_tokens)
    if not ids:
        raise ValueError("prompt must be non-empty")
    rng = np.random.default_rng(params.seed)
    new: list[int] = []
    for _ in range(params.max_new_tokens):
        if len(ids) >= cfg.max_seq:
            break
        logits, _ = forward(weights, np.asarray(ids), mask)
        last = logits[-1]
        if params.temperature == 0.0:
            tok = int(np.argmax(last))
        else:
            probs = np.exp(nc.log_softmax_rows(last / params.temperature))
            probs = probs / probs.sum()
            tok = int(rng.choice(cfg.vocab_size, p=probs))
        new.append(tok)
        ids.append(tok)
        if params.stop_token is not None and tok == params.stop_token:
            break
    return new


def active_parameters(weights: TransformerWeights, mask: LayerMask) -> list[Tensor]:
    """Trainable tensors excluding masked-out blocks (they get no gradient)."""
    out = [weights.embedding]
    if weights.pos_embedding is not None:
        out.append(weights.pos_embedding)
    for i, layer in enumerate(weights.layers):
        if i not in mask:
            out.extend(layer.tensors())
    out.append(weights.final_norm)
    if weights.head is not None:
        out.append(weights.head)
    return out


def generate_batch(weights: TransformerWeights, prompts: list, mask: LayerMask,
                   params: GenerationParams) -> list[list[int]]:
    """Decode many independent prompts, batching same-length groups.

    Equivalent to calling generate() per prompt with seed derived as
    SeedSequence(params.seed, spawn_key=(prompt_index,)); prompts of equal
    length share forward passes, and finished rows drop out of the batch.
    """
    cfg = weights.config
    outputs: list[list[int]] = [[] for _ in prompts]
    by_len: dict[int, list[int]] = {}
    for i, prompt in enumerate(prompts):
        if not len(prompt):
            raise ValueError("prompt must be non-empty")
        by_len.setdefault(len(prompt), []).append(i)

    def rng_for(i):
        seq = np.random.SeedSequence(entropy=params.seed, spawn_key=(i,))
        return np.random.default_rng(int(seq.generate_state(1)[0]))

    for plen, members in sorted(by_len.items()):
        live = list(members)
        seqs = {i: list(int(t) for t in prompts[i]) for i in live}
        rngs = {i: rng_for(i) for i in live} if params.temperature > 0 else {}
        for _ in range(params.max_new_tokens):
            live = [i for i in live
                    if len(seqs[i]) < cfg.max_seq]
            if not live:
                break
            ids = np.asarray([seqs[i] for i in live], dtype=np.int64)
            with nc.no_grad():
                logits, _ = forward_batch(weights, ids, mask)
            last = logits.data[:, -1, :]
            next_live = []
            for row, i in enumerate(live):
                if params.temperature == 0.0:
                    tok = int(np.argmax(last[row]))
                else:
                    probs = np.exp(nc.log_softmax_rows(last[row] / params.temperature))
                    probs = probs / probs.sum()
                    tok = int(rngs[i].choice(cfg.vocab_size, p=probs))
                outputs[i].append(tok)
                seqs[i].append(tok)
                if params.stop_token is None or tok != params.stop_token:
                    next_live.append(i)
            live = next_live
    return outputs


def rebuild_without(weights: TransformerWeights, layers_to_remove) -> TransformerWeights:
    """Physically delete blocks, producing an (L-k)-layer model."""
    drop = set(int(i) for i in layers_to_remove)
    for i in drop:
        if not 0 <= i < weights.config.n_layers:
            raise ValueError(f"layer {i} out of range")
    kept = [layer for i, layer in enumerate(weights.layers) if i not in drop]
    cfg = replace(weights.config, n_layers=len(kept))
    return TransformerWeights(
        config=cfg,
        embedding=weights.embedding,
        pos_embedding=weights.pos_embedding,
        layers=kept,
        final_norm=weights.final_norm,
        head=weights.head,
    )


# ---------------------------------------------------------------------------
# checkpoint format: magic "PLAB", u32 version, u64 config length, JSON config,
# tensors in declaration order as little-endian f64, u64 FNV-1a over the
# tensor payload. All integers little-endian.

_MAGIC = b"PLAB"
_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(weights: TransformerWeights, path) -> None:
    cfg_bytes = json.dumps(weights.config.to_json(), sort_keys=True,
                           separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in weights.parameters()
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(payload)
        fh.write(struct.pack("<Q", fnv1a64(payload)))


def checkpoint_size(config: ModelConfig) -> int:
    """Exact on-disk size in bytes for a checkpoint of this config."""
    cfg_bytes = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return 4 + 4 + 8 + len(cfg_bytes) + 8 * param_count(config) + 8


def load_checkpoint(path) -> TransformerWeights:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a model checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<Q", raw, 8)
    cfg_end = 16 + cfg_len
    if len(raw) < cfg_end + 8:
        raise IOError("truncated checkpoint (config)")
    try:
        config = ModelConfig.from_json(json.loads(raw[16:cfg_end].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from exc
    n_params = param_count(config)
    payload_end = cfg_end + 8 * n_params
    if len(raw) < payload_end + 8:
        raise IOError("truncated checkpoint (payload)")
    payload = raw[cfg_end:payload_end]
    (stored,) = struct.unpack_from("<Q", raw, payload_end)
    if fnv1a64(payload) != stored:
        raise CheckpointFormatError("checksum mismatch; checkpoint is corrupted")

    flat = np.frombuffer(payload, dtype="<f8")
    weights = init_weights(config)
    offset = 0
    for p in weights.parameters():
        n = p.data.size
        p.data = flat[offset:offset + n].reshape(p.data.shape).copy()
        offset += n
    return weights


def weights_hash(weights: TransformerWeights) -> str:
    """Content hash of config + all tensor bytes (hex)."""
    import hashlib

    digest = hashlib.sha256()
    digest.update(json.dumps(weights.config.to_json(), sort_keys=True,
                             separators=(",", ":")).encode("utf-8"))
    for p in weights.parameters():
        digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return digest.hexdigest()
