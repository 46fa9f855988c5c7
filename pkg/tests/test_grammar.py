import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lenctl import grammar as g
from lenctl.grammar import (
    BOUNDED_KINDS,
    AmbiguousConstraintError,
    AugmentedUtterance,
    ControlKind,
    InvalidPromptError,
    ParserStats,
    StandardControlPrompt,
    TemplateArityError,
    default_templates,
    expand_template,
    parse_standard_prompt,
    parse_utterance,
    render_standard_prompt,
    sample_control_prompt,
)

DOC = [f"w{i:02d}" for i in np.random.default_rng(0).integers(0, 40, size=25)]


def expansion_bounds(kind: ControlKind, length: int) -> list[int]:
    if kind is ControlKind.NONE:
        return []
    if kind is ControlKind.BETWEEN:
        return [length, min(length + 31, 150)]
    return [length]


class TestStandardPrompt:
    def test_render_examples(self):
        assert render_standard_prompt(StandardControlPrompt.equal_to(100)) == "equal to 100 tokens"
        assert (
            render_standard_prompt(StandardControlPrompt.between(50, 150))
            == "between 50 and 150 tokens"
        )
        assert render_standard_prompt(StandardControlPrompt.none()) == "none"

    def test_invalid_bound_shapes_rejected(self):
        with pytest.raises(InvalidPromptError):
            StandardControlPrompt(ControlKind.MORE_THAN, l_min=None, l_max=80)
        with pytest.raises(InvalidPromptError):
            StandardControlPrompt(ControlKind.EQUAL_TO, l_min=80, l_max=90)
        with pytest.raises(InvalidPromptError):
            StandardControlPrompt.between(150, 50)
        with pytest.raises(InvalidPromptError):
            StandardControlPrompt.more_than(0)
        with pytest.raises(InvalidPromptError):
            StandardControlPrompt.less_than(-3)

    def test_render_parse_roundtrip_all_kinds(self):
        prompts = [
            StandardControlPrompt.more_than(80),
            StandardControlPrompt.less_than(60),
            StandardControlPrompt.equal_to(117),
            StandardControlPrompt.between(51, 149),
            StandardControlPrompt.none(),
        ]
        for p in prompts:
            assert parse_standard_prompt(render_standard_prompt(p)) == p

    def test_canonical_parse_rejects_noise(self):
        with pytest.raises(InvalidPromptError):
            parse_standard_prompt("roughly 100 tokens")


class TestTemplates:
    def test_shipped_set_covers_every_kind_with_10_to_20(self):
        tpls = default_templates()
        by_kind = {k: [t for t in tpls if t.kind is k] for k in ControlKind}
        for k, ts in by_kind.items():
            assert 10 <= len(ts) <= 20, (k, len(ts))

    def test_placeholder_arity_matches_kind(self):
        for t in default_templates():
            assert t.pattern.count("?") == t.kind.arity
            assert t.pattern.count("*") == 1

    def test_expand_examples(self):
        tpls = default_templates()
        equal = next(t for t in tpls if t.pattern == "summarize with length ?: *")
        u = expand_template(equal, [80], DOC)
        assert u.truth == StandardControlPrompt.equal_to(80)
        assert list(u.document_words) == DOC

        none_t = next(t for t in tpls if t.kind is ControlKind.NONE)
        u2 = expand_template(none_t, [], DOC)
        assert u2.truth == StandardControlPrompt.none()

    def test_arity_mismatch_raises(self):
        t = default_templates()[0]
        assert t.kind is not ControlKind.NONE
        with pytest.raises(TemplateArityError):
            expand_template(t, [], DOC)

    def test_rerendering_reproduces_text_exactly(self):
        tpls = default_templates()
        for t in tpls[::7]:
            u = expand_template(t, expansion_bounds(t.kind, 93), DOC)
            again = expand_template(tpls[u.template_id], list(u.truth.bounds()), list(u.document_words))
            assert again.text == u.text


class TestParseUtterance:
    def test_spec_examples(self):
        assert parse_utterance("Summarize with length 80: the cat sat on the mat") == (
            StandardControlPrompt.equal_to(80)
        )
        assert parse_utterance("Please summarize this article.") == StandardControlPrompt.none()

    def test_exhaustive_roundtrip_all_templates_all_lengths(self):
        # every template x every control length parses back to its truth
        for t in default_templates():
            for length in range(50, 151):
                u = expand_template(t, expansion_bounds(t.kind, length), DOC)
                assert parse_utterance(u.as_text()) == u.truth
                if t.kind is ControlKind.NONE:
                    break

    def test_out_of_grammar_length_phrase_returns_none_and_counts(self):
        stats = ParserStats()
        p = parse_utterance("craft me something spanning 80 tokens of prose", stats)
        assert p == StandardControlPrompt.none()
        assert stats.unmatched_length_phrases == 1

    def test_conflicting_phrases_raise(self):
        with pytest.raises(AmbiguousConstraintError):
            parse_utterance("write more than 100 tokens but also less than 50 tokens")

    def test_parse_is_pure(self):
        u = "summarize w01 w02 with length 77"
        assert parse_utterance(u) == parse_utterance(u)


class TestSampleControlPrompt:
    def test_equal_to_within_band(self):
        for seed in range(20):
            p = sample_control_prompt(seed, {ControlKind.EQUAL_TO})
            assert p.kind is ControlKind.EQUAL_TO
            assert 50 <= p.l_min <= 150

    def test_between_sorted(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = sample_control_prompt(rng, {ControlKind.BETWEEN})
            assert p.l_min <= p.l_max

    def test_empty_kinds_rejected(self):
        with pytest.raises(g.GrammarError):
            sample_control_prompt(0, set())

    def test_kind_frequencies_uniform(self):
        # chi-square style bound: each frequency within 5 sigma of 1/4
        rng = np.random.default_rng(7)
        n = 10_000
        counts = {k: 0 for k in BOUNDED_KINDS}
        for _ in range(n):
            counts[sample_control_prompt(rng, BOUNDED_KINDS).kind] += 1
        sigma = np.sqrt(0.25 * 0.75 / n)
        for k, c in counts.items():
            assert abs(c / n - 0.25) < 5 * sigma, (k, c / n)


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(list(ControlKind)),
    length=st.integers(min_value=50, max_value=150),
    tpl_choice=st.integers(min_value=0, max_value=10_000),
    doc_len=st.integers(min_value=1, max_value=60),
    doc_seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_roundtrip_property_random_docs(kind, length, tpl_choice, doc_len, doc_seed):
    tpls = [t for t in default_templates() if t.kind is kind]
    t = tpls[tpl_choice % len(tpls)]
    doc = [f"w{i:02d}" for i in np.random.default_rng(doc_seed).integers(0, 40, size=doc_len)]
    u = expand_template(t, expansion_bounds(kind, length), doc)
    assert parse_utterance(u.as_text()) == u.truth
