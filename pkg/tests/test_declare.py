import io
from itertools import permutations, product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_log
from oracles import fol_activated, fol_holds
from nspad.declare import (DeclareError, KnowledgeBase, MinedConstraint, SelectionError, Template, constraint,
                           evaluate_crisp, filter_constraints, mine, parse_whitelist, read_constraints,
                           read_knowledge_base, write_constraints)
from nspad.eventlog import EventLog

ALPHABET = "ABC"


def all_traces(max_len=5):
    for n in range(1, max_len + 1):
        yield from product(ALPHABET, repeat=n)


def arg_tuples(template):
    return [(x,) for x in ALPHABET] if template.arity == 1 else list(permutations(ALPHABET, 2))


class TestEvaluateCrisp:
    def test_examples(self):
        c = constraint("Response(A,B)")
        assert evaluate_crisp(c, "ACB") == (True, True)
        assert evaluate_crisp(c, "C") == (True, False)
        assert evaluate_crisp(c, "CCA") == (False, True)

    def test_chain_response_boundary(self):
        c = constraint("ChainResponse(A,B)")
        assert evaluate_crisp(c, "AB").holds
        assert not evaluate_crisp(c, "ACB").holds
        assert not evaluate_crisp(c, "BA").holds

    @pytest.mark.parametrize("template", list(Template))
    def test_exhaustive_against_first_order_forms(self, template):
        traces = list(all_traces())
        assert len(traces) == 3 + 9 + 27 + 81 + 243
        for args in arg_tuples(template):
            c = MinedConstraint(template, args)
            b = args[1] if len(args) > 1 else None
            for t in traces:
                v = evaluate_crisp(c, t)
                assert v.holds == fol_holds(template, args[0], b, t), (str(c), t)
                assert v.activated == fol_activated(template, args[0], b, t), (str(c), t)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from(ALPHABET), min_size=1, max_size=8), st.sampled_from(list(permutations(ALPHABET, 2))))
    def test_template_relations(self, t, args):
        def holds(name):
            return evaluate_crisp(MinedConstraint(Template(name), args), t).holds
        assert holds("Succession") == (holds("Response") and holds("Precedence"))
        assert not holds("ExclusiveChoice") or holds("Choice")
        assert not holds("ChainResponse") or holds("Response")


def _fixture_log(rng, n=50):
    traces = []
    for _ in range(n):
        k = int(rng.integers(1, 7))
        traces.append("".join(rng.choice(list("ABCD"), k)))
    return make_log(*traces)


class TestMine:
    def test_support_and_confidence_example(self):
        log = make_log("AB", "ACB", "BA", *["C"] * 7)
        got = {str(c): c for c in mine(log, ["Response"])}["Response(A,B)"]
        assert got.support == pytest.approx(0.3, abs=1e-9)
        assert got.confidence == pytest.approx(2 / 3, abs=1e-9)

    def test_brute_force_counts_on_fixture(self):
        log = _fixture_log(np.random.default_rng(0))
        seqs = [t.activities for t in log]
        for c in mine(log):
            b = c.args[1] if len(c.args) > 1 else None
            act = [fol_activated(c.template, c.args[0], b, s) for s in seqs]
            hold = [fol_holds(c.template, c.args[0], b, s) for s in seqs]
            if c.template.has_activation:
                assert c.support == pytest.approx(sum(act) / 50)
                both = sum(x and y for x, y in zip(act, hold))
                if sum(act):
                    assert c.confidence == pytest.approx(both / sum(act))
                else:
                    assert c.confidence is None
            else:
                assert c.support == pytest.approx(sum(hold) / 50)
                assert c.confidence is None

    def test_absent_activity_has_no_confidence(self, abc_vocab):
        log = make_log("AB", "BA")
        got = {str(c): c for c in mine(log, ["Response"], abc_vocab)}["Response(C,A)"]
        assert got.support == 0.0
        assert got.confidence is None

    def test_sorted_and_deterministic(self):
        log = _fixture_log(np.random.default_rng(1), 20)
        first = mine(log)
        assert first == mine(log)
        keys = [(c.template.value, c.args) for c in first]
        assert keys == sorted(keys)
        assert len(first) == 4 + 7 * 12

    def test_empty_log(self):
        with pytest.raises(DeclareError):
            mine(EventLog(()))


class TestFilter:
    def _mined(self):
        return [
            MinedConstraint(Template.RESPONSE, ("A", "B"), 0.02, 0.98),
            MinedConstraint(Template.RESPONSE, ("B", "C"), 0.4, 0.99),
            MinedConstraint(Template.RESPONSE, ("C", "A"), 0.01, 0.5),
            MinedConstraint(Template.CHOICE, ("A", "C"), 0.7, None),
        ]

    def test_thresholds(self):
        kb = filter_constraints(self._mined(), 0.05, 0.9)
        assert [str(c) for c in kb] == ["Response(A,B)"]

    def test_whitelist_narrows(self):
        with pytest.raises(SelectionError):
            filter_constraints(self._mined(), 0.05, 0.9, "Response(B,C)")
        kb = filter_constraints(self._mined(), 0.05, 0.9, "Response(A,B)")
        assert len(kb) == 1

    def test_whitelist_admits_confidence_free(self):
        kb = filter_constraints(self._mined(), 0.05, 0.9, "Choice(A,C), Response(A,*)")
        assert sorted(str(c) for c in kb) == ["Choice(A,C)", "Response(A,B)"]

    def test_empty_result_lists_near_misses(self):
        with pytest.raises(SelectionError, match="Response"):
            filter_constraints(self._mined(), 0.001, 0.999)

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            filter_constraints(self._mined(), 1.5, 0.9)

    def test_parse_whitelist(self):
        pats = parse_whitelist("Response(A,B),ExclusiveChoice(X, Y)")
        assert [str(p) for p in pats] == ["Response(A,B)", "ExclusiveChoice(X,Y)"]
        assert parse_whitelist(None) is None


class TestSerialization:
    def test_jsonl_round_trip(self):
        mined = [MinedConstraint(Template.RESPONSE, ("A", "B"), 0.1, 0.95),
                 MinedConstraint(Template.CHOICE, ("A", "B"), 0.5, None)]
        buf = io.StringIO()
        write_constraints(mined, buf)
        buf.seek(0)
        assert read_constraints(buf) == mined

    def test_knowledge_base_provenance(self):
        kb = KnowledgeBase((MinedConstraint(Template.RESPONSE, ("A", "B"), 0.1, 0.95),), {"source": "x"})
        buf = io.StringIO()
        write_constraints(kb, buf, kb.provenance)
        buf.seek(0)
        again = read_knowledge_base(buf)
        assert again == kb
        assert again.provenance == {"source": "x"}

    def test_constraint_parsing(self):
        assert str(constraint(" Succession ( A , B ) ")) == "Succession(A,B)"
        with pytest.raises(ValueError):
            constraint("Response A B")
        with pytest.raises(ValueError):
            constraint("Existence(A,B)")
