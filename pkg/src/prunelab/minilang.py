"""A tiny let/return expression language with execution-feedback classification.

Grammar (one statement per line; ';' also separates):

    program := (LET IDENT '=' expr SEP)* RETURN expr
    expr    := term (('+'|'-') term)*
    term    := factor ('*' factor)*
    factor  := INT | IDENT | '(' expr ')'

Every generated program maps to exactly one SyntaxOutcome. Error precedence
is positional: the first failure in token order decides the class. A failure
is paren-class when the offending token is a ')' with nothing to close (or in
operand position), or when a statement/file ends while a group is still open.
Lex errors (unknown characters) and all other grammar failures are
OtherSyntax. Runtime classes are only reachable after a clean parse.

Values are integers confined to the signed 64-bit range; overflow falls into
the OtherSyntax catch-all. Paren nesting is capped at MAX_NESTING so the
classifier stays total on adversarial inputs.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class SyntaxOutcome(enum.Enum):
    PASS = "pass"
    ASSERTION_FAIL = "assertion_fail"
    UNBALANCED_PAREN = "unbalanced_paren"
    UNDEFINED_VARIABLE = "undefined_variable"
    OTHER_SYNTAX = "other_syntax"


INT64_MAX = 2 ** 63 - 1
INT64_MIN = -(2 ** 63)
MAX_NESTING = 256


class MiniLangError(Exception):
    def __init__(self, outcome: SyntaxOutcome, pos: int, message: str):
        super().__init__(f"{message} (at {pos})")
        self.outcome = outcome
        self.pos = pos


class MiniLangLexError(MiniLangError):
    pass


class MiniLangParseError(MiniLangError):
    pass


class MiniLangRuntimeError(MiniLangError):
    pass


# ---------------------------------------------------------------------------
# lexer

INT, IDENT, LET, RETURN = "INT", "IDENT", "LET", "RETURN"
PLUS, MINUS, STAR, EQ, LP, RP = "PLUS", "MINUS", "STAR", "EQ", "LP", "RP"
SEP, EOF, BADCHAR = "SEP", "EOF", "BADCHAR"

_SINGLE = {"+": PLUS, "-": MINUS, "*": STAR, "=": EQ, "(": LP, ")": RP, ";": SEP, "\n": SEP}
_KEYWORDS = {"let": LET, "return": RETURN}
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_INT_RE = re.compile(r"[0-9]+")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def _scan(text: str) -> list[Token]:
    """Tokenize as far as possible; an unknown character becomes a BADCHAR
    terminal so the parser can order lex errors against grammar errors."""
    toks: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r":
            i += 1
            continue
        if ch in _SINGLE:
            toks.append(Token(_SINGLE[ch], ch, i))
            i += 1
            continue
        m = _INT_RE.match(text, i)
        if m:
            toks.append(Token(INT, m.group(), i))
            i = m.end()
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            word = m.group()
            toks.append(Token(_KEYWORDS.get(word, IDENT), word, i))
            i = m.end()
            continue
        toks.append(Token(BADCHAR, ch, i))
        return toks
    toks.append(Token(EOF, "", n))
    return toks


def lex(text: str) -> list[Token]:
    """Token stream (EOF-terminated). Unknown characters raise with position."""
    toks = _scan(text)
    if toks and toks[-1].kind == BADCHAR:
        bad = toks[-1]
        raise MiniLangLexError(SyntaxOutcome.OTHER_SYNTAX, bad.pos,
                               f"unknown character {bad.text!r}")
    return toks


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Program:
    lets: tuple  # of (name, expr)
    ret: object


_PREC = {"+": 1, "-": 1, "*": 2}


def _render_expr(node, parent_prec: int = 0) -> str:
    if isinstance(node, Lit):
        return str(node.value)
    if isinstance(node, Var):
        return node.name
    text = f"{_render_expr(node.left, _PREC[node.op])} {node.op} " \
           f"{_render_expr(node.right, _PREC[node.op] + 1)}"
    if _PREC[node.op] < parent_prec:
        return f"({text})"
    return text


def render(program: Program) -> str:
    lines = [f"let {name} = {_render_expr(expr)}" for name, expr in program.lets]
    lines.append(f"return {_render_expr(program.ret)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0
        self.depth = 0

    def peek(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        tok = self.toks[self.i]
        if tok.kind not in (EOF, BADCHAR):
            self.i += 1
        return tok

    def fail(self, message: str, operand_expected: bool = False):
        tok = self.peek()
        if tok.kind == BADCHAR:
            raise MiniLangParseError(SyntaxOutcome.OTHER_SYNTAX, tok.pos,
                                     f"unknown character {tok.text!r}")
        if tok.kind == RP:
            raise MiniLangParseError(SyntaxOutcome.UNBALANCED_PAREN, tok.pos,
                                     "')' without matching '('" if not operand_expected
                                     else "')' where an operand was required")
        if tok.kind in (SEP, EOF) and self.depth > 0:
            raise MiniLangParseError(SyntaxOutcome.UNBALANCED_PAREN, tok.pos,
                                     "group never closed")
        raise MiniLangParseError(SyntaxOutcome.OTHER_SYNTAX, tok.pos, message)

    def skip_seps(self):
        while self.peek().kind == SEP:
            self.advance()

    def expect(self, kind: str, message: str) -> Token:
        if self.peek().kind != kind:
            self.fail(message)
        return self.advance()

    def factor(self):
        tok = self.peek()
        if tok.kind == INT:
            self.advance()
            return Lit(int(tok.text))
        if tok.kind == IDENT:
            self.advance()
            return Var(tok.text)
        if tok.kind == LP:
            if self.depth >= MAX_NESTING:
                raise MiniLangParseError(SyntaxOutcome.OTHER_SYNTAX, tok.pos,
                                         "paren nesting too deep")
            self.advance()
            self.depth += 1
            inner = self.expr()
            self.expect(RP, "expected ')'")
            self.depth -= 1
            return inner
        self.fail("expected a number, name, or '('", operand_expected=True)

    def term(self):
        node = self.factor()
        while self.peek().kind == STAR:
            self.advance()
            node = BinOp("*", node, self.factor())
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind in (PLUS, MINUS):
            op = "+" if self.advance().kind == PLUS else "-"
            node = BinOp(op, node, self.term())
        return node

    def program(self) -> Program:
        lets = []
        self.skip_seps()
        while self.peek().kind == LET:
            self.advance()
            name = self.expect(IDENT, "expected a name after 'let'").text
            self.expect(EQ, "expected '=' in let statement")
            value = self.expr()
            if self.peek().kind == EOF:
                self.fail("expected 'return' before end of program")
            self.expect(SEP, "expected end of statement")
            self.skip_seps()
            lets.append((name, value))
        if self.peek().kind != RETURN:
            self.fail("expected 'let' or 'return'")
        self.advance()
        ret = self.expr()
        self.skip_seps()
        if self.peek().kind != EOF:
            self.fail("unexpected trailing input after return")
        return Program(tuple(lets), ret)


def parse(tokens: list[Token]) -> Program:
    """Parse a token stream (from lex or _scan) into a Program."""
    return _Parser(tokens).program()


def parse_text(text: str) -> Program:
    return parse(_scan(text))


# ---------------------------------------------------------------------------
# interpreter


def _checked(op: str, a: int, b: int, pos: int = 0) -> int:
    if op == "+":
        v = a + b
    elif op == "-":
        v = a - b
    else:
        v = a * b
    if not INT64_MIN <= v <= INT64_MAX:
        raise MiniLangRuntimeError(SyntaxOutcome.OTHER_SYNTAX, pos,
                                   "integer overflow past 64-bit range")
    return v


def _eval(node, env: dict) -> int:
    if isinstance(node, Lit):
        if not INT64_MIN <= node.value <= INT64_MAX:
            raise MiniLangRuntimeError(SyntaxOutcome.OTHER_SYNTAX, 0,
                                       "integer literal past 64-bit range")
        return node.value
    if isinstance(node, Var):
        if node.name not in env:
            raise MiniLangRuntimeError(SyntaxOutcome.UNDEFINED_VARIABLE, 0,
                                       f"undefined variable {node.name!r}")
        return env[node.name]
    return _checked(node.op, _eval(node.left, env), _eval(node.right, env))


def execute(program: Program, bindings: dict) -> int:
    """Evaluate statements in order under the given input bindings."""
    env = dict(bindings)
    for name, expr in program.lets:
        env[name] = _eval(expr, env)
    return _eval(program.ret, env)


# ---------------------------------------------------------------------------
# classification


_FENCE_OPEN_RE = re.compile(r"^```[A-Za-z0-9_+-]*\s*$")


def strip_code_fences(text: str) -> tuple[str | None, bool]:
    """Remove a leading/trailing markdown fence pair.

    Returns (inner_text, True), (text, True) when unfenced, or (None, False)
    for a malformed fence (unclosed, or content crammed onto the fence line).
    """
    lines = text.split("\n")
    first = next((i for i, ln in enumerate(lines) if ln.strip()), None)
    if first is None or not lines[first].lstrip().startswith("```"):
        return text, True
    last = max(i for i, ln in enumerate(lines) if ln.strip())
    if last == first:
        return None, False
    if not _FENCE_OPEN_RE.match(lines[first].strip()):
        return None, False
    if lines[last].strip() != "```":
        return None, False
    return "\n".join(lines[first + 1:last]), True


def classify(text: str, test_cases) -> SyntaxOutcome:
    """Bucket a generated program by execution feedback.

    Pass iff the program parses, runs, and matches every expected value;
    AssertionFail when it runs but some value differs; otherwise the lex,
    parse, or runtime error class. Total: every string maps to one outcome.
    """
    stripped, ok = strip_code_fences(text)
    if not ok:
        return SyntaxOutcome.OTHER_SYNTAX
    try:
        program = parse_text(stripped)
    except MiniLangError as exc:
        return exc.outcome
    mismatch = False
    for bindings, expected in test_cases:
        try:
            value = execute(program, bindings)
        except MiniLangError as exc:
            return exc.outcome
        if value != int(expected):
            mismatch = True
    return SyntaxOutcome.ASSERTION_FAIL if mismatch else SyntaxOutcome.PASS
