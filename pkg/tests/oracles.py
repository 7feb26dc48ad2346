"""Independent brute-force oracles used across the test suite.

Everything here is deliberately implemented with a different mechanism than
the library code it checks: explicit loops instead of BLAS, a flat state
machine instead of recursive descent, central differences instead of
autograd.
"""

from __future__ import annotations

import re
from collections import Counter

import numpy as np

from prunelab.minilang import MAX_NESTING


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def softmax_direct(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_direct(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def finite_difference_grads(fn, tensors: list[np.ndarray], eps: float = 1e-5,
                            ) -> list[np.ndarray]:
    """Central differences of a scalar function w.r.t. each input array."""
    grads = []
    for arr in tensors:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn()
            flat[i] = orig - eps
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def rep4_direct(responses) -> float:
    vals = []
    for resp in responses:
        resp = list(resp)
        grams = []
        for i in range(len(resp) - 3):
            grams.append(tuple(resp[i:i + 4]))
        if not grams:
            continue
        uniq = []
        for g in grams:
            if g not in uniq:
                uniq.append(g)
        vals.append(1.0 - len(uniq) / len(grams))
    assert vals, "no eligible responses"
    return sum(vals) / len(vals)


def bleu4_step_by_step(hyp, refs) -> float:
    """Reference BLEU: clipped modified precision, add-one smoothing on zero
    matches, geometric mean, brevity penalty vs closest reference length."""
    hyp = list(hyp)
    refs = [list(r) for r in refs]
    if not hyp:
        return 0.0
    logs = []
    for n in range(1, 5):
        hgrams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        if not hgrams:
            continue
        matched = 0
        counted = Counter(hgrams)
        for gram, cnt in counted.items():
            best_ref = 0
            for ref in refs:
                rcount = 0
                for i in range(len(ref) - n + 1):
                    if tuple(ref[i:i + n]) == gram:
                        rcount += 1
                best_ref = max(best_ref, rcount)
            matched += min(cnt, best_ref)
        total = len(hgrams)
        if matched == 0:
            logs.append(np.log(1.0 / (total + 1.0)))
        else:
            logs.append(np.log(matched / total))
    if not logs:
        return 0.0
    gm = np.exp(np.mean(logs))
    c = len(hyp)
    best = None
    for ref in refs:
        cand = (abs(len(ref) - c), len(ref))
        if best is None or cand < best:
            best = cand
    r = best[1]
    bp = 1.0 if c > r else np.exp(1.0 - r / c)
    return float(bp * gm)


def self_bleu4_direct(responses) -> float:
    scores = []
    for i in range(len(responses)):
        refs = [responses[j] for j in range(len(responses)) if j != i]
        scores.append(bleu4_step_by_step(responses[i], refs))
    return sum(scores) / len(scores)


def cosine_bi_direct(boundary_states) -> np.ndarray:
    """Per-position cosine BI from (seq, layer+1, T, d) boundary lists."""
    n_layers = len(boundary_states[0]) - 1
    scores = []
    for li in range(n_layers):
        coss = []
        for bounds in boundary_states:
            h_in, h_out = bounds[li], bounds[li + 1]
            for t in range(h_in.shape[0]):
                a, b = h_in[t], h_out[t]
                na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
                if na == 0 or nb == 0:
                    continue
                coss.append(float((a * b).sum() / (na * nb)))
        assert coss
        scores.append(1.0 - sum(coss) / len(coss))
    return np.array(scores)


# ---------------------------------------------------------------------------
# minilang: flat state-machine checker (not a recursive-descent parser)

_TOKEN_RE = re.compile(r"[ \t\r]+|(?P<int>[0-9]+)|(?P<word>[A-Za-z_][A-Za-z0-9_]*)"
                       r"|(?P<op>[-+*=();\n])")


def scan_for_oracle(text: str):
    """(kind, text, pos) triples; stops at the first unknown character."""
    tokens = []
    i = 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if m is None:
            tokens.append(("bad", text[i], i))
            return tokens
        if m.lastgroup == "int":
            tokens.append(("int", m.group(), i))
        elif m.lastgroup == "word":
            word = m.group()
            kind = word if word in ("let", "return") else "ident"
            tokens.append((kind, word, i))
        elif m.lastgroup == "op":
            ch = m.group()
            kind = {"\n": "sep", ";": "sep"}.get(ch, ch)
            tokens.append((kind, ch, i))
        i = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


def first_error_kind(text: str) -> str | None:
    """First error of a minilang program per a flat scanner: 'paren', 'lex',
    'other', or None when the program is well-formed.

    States track the statement grammar linearly; a depth counter plus an
    operand-expected flag decides paren-class errors exactly per the stated
    precedence (first failure in token order wins).
    """
    toks = scan_for_oracle(text)
    depth = 0
    state = "stmt"  # stmt | after_let | after_name | after_eq_operand | operand | operator
    value_ctx = None  # 'let' or 'return' while inside an expression
    saw_return_value = False
    i = 0
    while True:
        kind, _txt, _pos = toks[i]
        if kind == "bad":
            return "lex"
        if state == "stmt":
            if kind == "sep":
                i += 1
                continue
            if kind == "eof":
                return None if saw_return_value else "other"
            if saw_return_value:
                return "paren" if kind == ")" else "other"
            if kind == "let":
                state = "after_let"
            elif kind == "return":
                state = "operand"
                value_ctx = "return"
            elif kind == ")":
                return "paren"
            else:
                return "other"
        elif state == "after_let":
            if kind != "ident":
                return "paren" if kind == ")" else "other"
            state = "after_name"
        elif state == "after_name":
            if kind != "=":
                return "paren" if kind == ")" else "other"
            state = "operand"
            value_ctx = "let"
        elif state == "operand":
            if kind in ("int", "ident"):
                state = "operator"
            elif kind == "(":
                if depth >= MAX_NESTING:
                    return "other"
                depth += 1
            elif kind == ")":
                return "paren"  # operand required, or nothing to close
            elif kind in ("sep", "eof"):
                return "paren" if depth > 0 else "other"
            else:
                return "other"
        elif state == "operator":
            if kind in ("+", "-", "*"):
                state = "operand"
            elif kind == ")":
                if depth == 0:
                    return "paren"
                depth -= 1
            elif kind in ("sep", "eof"):
                if depth > 0:
                    return "paren"
                if value_ctx == "return":
                    saw_return_value = True
                    state = "stmt"
                    continue  # reprocess sep/eof in stmt state
                state = "stmt"
                if kind == "eof":
                    return "other"  # let-statement at EOF without return
            else:
                return "other"
        i += 1


def strip_fences_for_oracle(text: str):
    lines = text.split("\n")
    first = None
    for i, ln in enumerate(lines):
        if ln.strip():
            first = i
            break
    if first is None or not lines[first].lstrip().startswith("```"):
        return text, True
    last = max(i for i, ln in enumerate(lines) if ln.strip())
    if last == first:
        return None, False
    if not re.match(r"^```[A-Za-z0-9_+-]*\s*$", lines[first].strip()):
        return None, False
    if lines[last].strip() != "```":
        return None, False
    return "\n".join(lines[first + 1:last]), True


def oracle_says_unbalanced(text: str) -> bool:
    inner, ok = strip_fences_for_oracle(text)
    if not ok:
        return False
    return first_error_kind(inner) == "paren"
