import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab import minilang as ml
from prunelab.minilang import SyntaxOutcome as O

import oracles


class TestLexer:
    def test_paren_expression(self):
        kinds = [t.kind for t in ml.lex("(1+2)")]
        assert kinds == [ml.LP, ml.INT, ml.PLUS, ml.INT, ml.RP, ml.EOF]

    def test_empty_stream(self):
        assert [t.kind for t in ml.lex("")] == [ml.EOF]

    def test_unknown_char_position(self):
        with pytest.raises(ml.MiniLangLexError) as err:
            ml.lex("1 $ 2")
        assert err.value.pos == 2
        assert err.value.outcome is O.OTHER_SYNTAX

    def test_keywords_and_idents(self):
        kinds = [t.kind for t in ml.lex("let lettuce = 1")]
        assert kinds == [ml.LET, ml.IDENT, ml.EQ, ml.INT, ml.EOF]


class TestParser:
    def test_valid_program(self):
        program = ml.parse_text("return (1+2)*3")
        assert ml.execute(program, {}) == 9

    def test_trailing_paren_is_unbalanced(self):
        with pytest.raises(ml.MiniLangParseError) as err:
            ml.parse_text("return (1 + 2))")
        assert err.value.outcome is O.UNBALANCED_PAREN

    def test_let_without_name_is_other(self):
        with pytest.raises(ml.MiniLangParseError) as err:
            ml.parse_text("let = 5")
        assert err.value.outcome is O.OTHER_SYNTAX

    def test_unclosed_group(self):
        with pytest.raises(ml.MiniLangParseError) as err:
            ml.parse_text("return (1 + 2")
        assert err.value.outcome is O.UNBALANCED_PAREN

    def test_empty_group(self):
        with pytest.raises(ml.MiniLangParseError) as err:
            ml.parse_text("return ()")
        assert err.value.outcome is O.UNBALANCED_PAREN

    def test_precedence(self):
        assert ml.execute(ml.parse_text("return 2 + 3 * 4"), {}) == 14
        assert ml.execute(ml.parse_text("return (2 + 3) * 4"), {}) == 20

    def test_multiline_and_semicolons(self):
        program = ml.parse_text("let x = 2; let y = x * 3\nreturn y - 1")
        assert ml.execute(program, {}) == 5

    def test_render_round_trip(self):
        sources = [
            "return (1 + 2) * 3",
            "let x = 2\nreturn x * x",
            "let a = 1 + 2 + 3\nlet b = a * (4 - 2)\nreturn b - a",
            "return 1 - (2 - 3)",
        ]
        for src in sources:
            program = ml.parse_text(src)
            assert ml.parse_text(ml.render(program)) == program


class TestExecute:
    def test_let_and_square(self):
        assert ml.execute(ml.parse_text("let x = 2\nreturn x*x"), {}) == 4

    def test_undefined_variable(self):
        with pytest.raises(ml.MiniLangRuntimeError) as err:
            ml.execute(ml.parse_text("return y"), {})
        assert err.value.outcome is O.UNDEFINED_VARIABLE

    def test_constant_return(self):
        assert ml.execute(ml.parse_text("return 0"), {}) == 0

    def test_bindings_feed_execution(self):
        program = ml.parse_text("return a * b - c")
        assert ml.execute(program, {"a": 3, "b": 4, "c": 5}) == 7

    def test_let_shadows_binding(self):
        program = ml.parse_text("let a = 9\nreturn a")
        assert ml.execute(program, {"a": 1}) == 9

    def test_overflow_is_other_syntax_class(self):
        src = "let x = 9999999999 * 9999999999\nreturn x * x"
        with pytest.raises(ml.MiniLangRuntimeError) as err:
            ml.execute(ml.parse_text(src), {})
        assert err.value.outcome is O.OTHER_SYNTAX

    def test_pure(self):
        program = ml.parse_text("let q = a + 1\nreturn q * 2")
        r1 = ml.execute(program, {"a": 5})
        r2 = ml.execute(program, {"a": 5})
        assert r1 == r2 == 12


class TestClassify:
    CASES = [({}, 4)]

    def test_reference_passes(self):
        assert ml.classify("return 2 * 2", self.CASES) is O.PASS

    def test_wrong_constant_is_assertion_fail(self):
        assert ml.classify("return 5", self.CASES) is O.ASSERTION_FAIL

    def test_paren_mismatch(self):
        assert ml.classify("return (2 * 2))", self.CASES) is O.UNBALANCED_PAREN

    def test_undefined(self):
        assert ml.classify("return q", self.CASES) is O.UNDEFINED_VARIABLE

    def test_lex_garbage(self):
        assert ml.classify("return 2 @ 2", self.CASES) is O.OTHER_SYNTAX

    def test_fenced_code_accepted(self):
        assert ml.classify("```\nreturn 4\n```", self.CASES) is O.PASS
        assert ml.classify("```minilang\nreturn 4\n```", self.CASES) is O.PASS

    def test_malformed_fence_is_other(self):
        assert ml.classify("```python (code)```", self.CASES) is O.OTHER_SYNTAX
        assert ml.classify("```\nreturn 4", self.CASES) is O.OTHER_SYNTAX

    def test_execution_error_beats_assertion(self):
        cases = [({"a": 1}, 4), ({}, 4)]
        # first case runs and mismatches; second raises -> error class wins
        assert ml.classify("return a", cases) is O.UNDEFINED_VARIABLE

    def test_empty_text(self):
        assert ml.classify("", self.CASES) is O.OTHER_SYNTAX

    def test_multi_case_pass(self):
        cases = [({"a": 1}, 2), ({"a": 5}, 6)]
        assert ml.classify("return a + 1", cases) is O.PASS


def _mutate(rng, text: str) -> str:
    ops = rng.integers(0, 6)
    chars = list(text)
    if not chars:
        return "$"
    pos = int(rng.integers(0, len(chars)))
    if ops == 0:
        del chars[pos]
    elif ops == 1:
        chars.insert(pos, rng.choice(list("()+-*=;$xy0123456789 ")))
    elif ops == 2:
        chars[pos] = rng.choice(list("()+-*=$z"))
    elif ops == 3:
        chars = [c for c in chars if c != ")"]
    elif ops == 4:
        chars.append(")")
    else:
        chars.insert(pos, ")")
    return "".join(chars)


class TestFuzzAgainstOracle:
    def test_mutated_programs_match_depth_oracle(self):
        from prunelab.corpora import gen_minilang_tasks

        rng = np.random.default_rng(99)
        tasks = gen_minilang_tasks(17, 100)
        agree = 0
        total = 0
        for task in tasks:
            for _ in range(5):
                text = _mutate(rng, task.reference)
                got = ml.classify(text, task.test_cases)
                want_unbalanced = oracles.oracle_says_unbalanced(text)
                assert (got is O.UNBALANCED_PAREN) == want_unbalanced, repr(text)
                total += 1
        assert total == 500

    def test_drop_all_closing_parens(self):
        srcs = ["return (1 + 2)", "let t = (a * 3)\nreturn t",
                "return ((1 - 2) * 3)"]
        for src in srcs:
            broken = src.replace(")", "")
            assert ml.classify(broken, [({}, 0), ({"a": 1}, 0)]) is O.UNBALANCED_PAREN

    @given(st.text(alphabet="()+-*=;$ab01 \n`", max_size=40))
    @settings(max_examples=300, deadline=None)
    def test_total_and_oracle_consistent(self, text):
        got = ml.classify(text, [({}, 1)])
        assert got in O
        assert (got is O.UNBALANCED_PAREN) == oracles.oracle_says_unbalanced(text)
