"""Deterministic synthetic tasks and the character-level tokenizer.

Character tokenization guarantees every digit is exactly one token, which
the arithmetic first-token probe depends on. All generators are pure
functions of (seed, n).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_DIGITS = "0123456789"
_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
_PUNCT = " \n()+-*=:;?.,_$#!'\""
ALPHABET = _DIGITS + _LETTERS + _PUNCT

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
_N_SPECIALS = 3


class Tokenizer:
    """Fixed char-to-id map over ALPHABET with PAD/BOS/EOS specials."""

    def __init__(self):
        self._char_to_id = {ch: i + _N_SPECIALS for i, ch in enumerate(ALPHABET)}
        self._id_to_char = {i: ch for ch, i in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return _N_SPECIALS + len(ALPHABET)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._char_to_id[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is outside the alphabet") from exc

    def decode(self, ids) -> str:
        # specials decode to the empty string
        return "".join(self._id_to_char.get(int(i), "") for i in ids)

    def digit_ids(self) -> list[int]:
        return [self._char_to_id[ch] for ch in _DIGITS]


_DEFAULT_TOKENIZER = Tokenizer()


def default_tokenizer() -> Tokenizer:
    return _DEFAULT_TOKENIZER


# ---------------------------------------------------------------------------
# arithmetic: single-digit operands, two ops, one parenthesized group


ARITH_OPS = "+-*"

ARITH_PROMPT = "Question: What is {expr}? Answer: "


def _eval_binop(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    return a * b


@dataclass(frozen=True)
class ArithmeticExample:
    expr: str
    answer: int

    @property
    def prompt(self) -> str:
        return ARITH_PROMPT.format(expr=self.expr)

    @property
    def response(self) -> str:
        return str(self.answer)


def gen_arithmetic(seed: int, n: int, balanced: bool = True) -> list[ArithmeticExample]:
    """n examples whose answers are single digits (reject-resampled).

    With balanced=True the answer distribution is flattened by per-digit
    quotas; raw rejection sampling would make a quarter of all answers 0,
    which lets a lazy model sit at 25% top-1 without doing any arithmetic.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    quota = -(-n // 10)  # ceil
    counts = [0] * 10
    out: list[ArithmeticExample] = []
    while len(out) < n:
        a, b, c = (int(rng.integers(0, 10)) for _ in range(3))
        o1, o2 = (ARITH_OPS[rng.integers(0, 3)] for _ in range(2))
        if rng.integers(0, 2) == 0:
            expr = f"({a} {o1} {b}) {o2} {c}"
            value = _eval_binop(o2, _eval_binop(o1, a, b), c)
        else:
            expr = f"{a} {o1} ({b} {o2} {c})"
            value = _eval_binop(o1, a, _eval_binop(o2, b, c))
        if not 0 <= value <= 9:
            continue
        if balanced and counts[value] >= quota:
            continue
        counts[value] += 1
        out.append(ArithmeticExample(expr=expr, answer=value))
    return out


DRILL_PROMPT = "{x} {op} {y} = "


def gen_drills(seed: int, n: int) -> list["TrainRecord"]:
    """Atomic one-op facts covering every value the two-op task composes.

    First operands range over -9..81 against digit second operands (and the
    mirrored digit-first pairs), i.e. exactly the intermediate results a
    parenthesized group can produce. Enumerated exhaustively, shuffled by
    seed, cycled when n exceeds the fact count: cheap tokens that teach the
    tables so the mixture's arithmetic task only has to learn composition.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    facts = []
    pairs = set()
    for y in range(0, 10):
        for x in range(-9, 82):
            pairs.add((x, y))
            pairs.add((y, x))
    for x, y in sorted(pairs):
        for op in ARITH_OPS:
            facts.append((x, op, y, _eval_binop(op, x, y)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(facts))
    out = []
    for i in range(n):
        x, op, y, val = facts[order[i % len(facts)]]
        out.append(TrainRecord(DRILL_PROMPT.format(x=x, op=op, y=y), str(val),
                               {"task": "drill"}))
    return out


# ---------------------------------------------------------------------------
# minilang tasks: describe an expression, expect a program computing it


MINILANG_PROMPT = "Task: return {expr}\nProgram:\n"

_VAR_NAMES = ("a", "b", "c")


@dataclass(frozen=True)
class _ExprNode:
    op: str | None              # None for leaves
    left: "object" = None       # _ExprNode | None
    right: "object" = None
    leaf: "object" = None       # int literal or variable name str

    def render(self) -> str:
        if self.op is None:
            return str(self.leaf)
        lt = self.left.render()
        rt = self.right.render()
        if self.left.op is not None:
            lt = f"({lt})"
        if self.right.op is not None:
            rt = f"({rt})"
        return f"{lt} {self.op} {rt}"

    def evaluate(self, bindings: dict) -> int:
        if self.op is None:
            if isinstance(self.leaf, str):
                return int(bindings[self.leaf])
            return int(self.leaf)
        return _eval_binop(self.op, self.left.evaluate(bindings), self.right.evaluate(bindings))

    def variables(self) -> set:
        if self.op is None:
            return {self.leaf} if isinstance(self.leaf, str) else set()
        return self.left.variables() | self.right.variables()


@dataclass(frozen=True)
class MiniLangTask:
    prompt: str
    reference: str
    test_cases: tuple  # of (bindings dict, expected int)
    expr: str
    style: str


def _random_expr(rng, variables: tuple[str, ...], depth: int) -> _ExprNode:
    if depth == 0 or rng.random() < 0.25:
        if variables and rng.random() < 0.7:
            return _ExprNode(op=None, leaf=variables[rng.integers(0, len(variables))])
        return _ExprNode(op=None, leaf=int(rng.integers(0, 10)))
    op = ARITH_OPS[rng.integers(0, 3)]
    return _ExprNode(op=op,
                     left=_random_expr(rng, variables, depth - 1),
                     right=_random_expr(rng, variables, depth - 1))


def _render_reference(expr: _ExprNode, style: str) -> str:
    text = expr.render()
    if style == "plain":
        return f"return {text}"
    if style == "let":
        return f"let r = {text}\nreturn r"
    if style == "wrapped":
        return f"return ({text})"
    if style == "commuted" and expr.op in ("+", "*"):
        flipped = _ExprNode(op=expr.op, left=expr.right, right=expr.left)
        return f"return {flipped.render()}"
    return f"return {text}"


_STYLES = ("plain", "let", "wrapped", "commuted")
_STYLE_P = (0.45, 0.25, 0.15, 0.15)


def gen_minilang_tasks(seed: int, n: int) -> list[MiniLangTask]:
    """Tasks whose reference programs are stylistic variants of one expression.

    Equivalent renderings (direct return, let-binding, extra parens, commuted
    operands) all pass the same tests, so the ground-truth corpus carries
    real style entropy while staying value-deterministic.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out: list[MiniLangTask] = []
    while len(out) < n:
        n_vars = int(rng.integers(0, 4))
        variables = _VAR_NAMES[:n_vars]
        expr = _random_expr(rng, variables, depth=2)
        if expr.op is None:  # bare literal/variable tasks are degenerate; keep rare
            if rng.random() < 0.8:
                continue
        used = sorted(expr.variables())
        cases = []
        for _ in range(2):
            bindings = {v: int(rng.integers(0, 10)) for v in used}
            cases.append((bindings, expr.evaluate(bindings)))
        style = str(rng.choice(_STYLES, p=_STYLE_P))
        out.append(MiniLangTask(
            prompt=MINILANG_PROMPT.format(expr=expr.render()),
            reference=_render_reference(expr, style),
            test_cases=tuple(cases),
            expr=expr.render(),
            style=style,
        ))
    return out


# ---------------------------------------------------------------------------
# MCQ: arithmetic question, near-miss distractors, log-likelihood scored


@dataclass(frozen=True)
class MCQExample:
    question: str
    candidates: tuple[str, ...]
    correct_index: int


def gen_mcq(seed: int, n: int, k: int = 4) -> list[MCQExample]:
    """Arithmetic MCQs with off-by-one / sign-flip / off-by-two distractors."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    base = gen_arithmetic(int(rng.integers(0, 2 ** 31)), n)
    out: list[MCQExample] = []
    for ex in base:
        pool = [ex.answer + 1, ex.answer - 1, -ex.answer, ex.answer + 2, ex.answer - 2,
                ex.answer + 3]
        distractors: list[int] = []
        for cand in pool:
            if cand != ex.answer and cand not in distractors:
                distractors.append(cand)
            if len(distractors) == k - 1:
                break
        values = [ex.answer] + distractors
        order = rng.permutation(len(values))
        candidates = tuple(str(values[i]) for i in order)
        correct = int(np.where(order == 0)[0][0])
        out.append(MCQExample(question=ex.prompt, candidates=candidates,
                              correct_index=correct))
    return out


# ---------------------------------------------------------------------------
# training mixture


@dataclass(frozen=True)
class TrainRecord:
    prompt: str
    response: str
    meta: dict = field(default_factory=dict, hash=False, compare=False)

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "response": self.response, "meta": self.meta}


@dataclass
class MixtureConfig:
    counts: dict[str, int]
    weights: dict[str, float] | None = None
    seed: int = 0

    def effective_counts(self) -> dict[str, int]:
        weights = self.weights or {}
        out = {}
        for task, count in self.counts.items():
            if count < 0:
                raise ValueError(f"negative count for task {task!r}")
            w = float(weights.get(task, 1.0))
            if w < 0:
                raise ValueError(f"negative weight for task {task!r}")
            out[task] = int(round(count * w))
        return out


_TASKS = ("arith", "minilang", "mcq", "drill")


def build_mixture(config: MixtureConfig) -> list[TrainRecord]:
    """Weighted per-task records, deterministically shuffled by seed."""
    eff = config.effective_counts()
    unknown = set(eff) - set(_TASKS)
    if unknown:
        raise ValueError(f"unknown tasks in mixture: {sorted(unknown)}")
    records: list[TrainRecord] = []
    if eff.get("arith", 0):
        for ex in gen_arithmetic(config.seed * 3 + 11, eff["arith"]):
            records.append(TrainRecord(ex.prompt, ex.response, {"task": "arith"}))
    if eff.get("minilang", 0):
        for task in gen_minilang_tasks(config.seed * 3 + 12, eff["minilang"]):
            records.append(TrainRecord(task.prompt, task.reference,
                                       {"task": "minilang", "style": task.style}))
    if eff.get("mcq", 0):
        for item in gen_mcq(config.seed * 3 + 13, eff["mcq"]):
            records.append(TrainRecord(item.question, item.candidates[item.correct_index],
                                       {"task": "mcq"}))
    if eff.get("drill", 0):
        records.extend(gen_drills(config.seed * 3 + 14, eff["drill"]))
    if not records:
        raise ValueError("mixture is empty")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def encode_record(record: TrainRecord, tokenizer: Tokenizer) -> tuple[list[int], int]:
    """Full token sequence (BOS prompt response EOS) and the index where the
    loss-bearing response span starts."""
    prompt_ids = tokenizer.encode(record.prompt)
    response_ids = tokenizer.encode(record.response)
    full = [BOS_ID] + prompt_ids + response_ids + [EOS_ID]
    return full, 1 + len(prompt_ids)


def save_corpus(records: list[TrainRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_corpus(path) -> list[TrainRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "prompt" not in obj:
                continue  # provenance / header lines
            out.append(TrainRecord(obj["prompt"], obj["response"], obj.get("meta", {})))
    return out


def split_records(records: list[TrainRecord], heldout: int) -> tuple[list[TrainRecord], list[TrainRecord]]:
    if heldout >= len(records):
        raise ValueError("heldout split larger than corpus")
    return records[:-heldout], records[-heldout:]
