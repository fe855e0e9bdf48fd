import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowres_nlu.parse_repr import (FlatLabels, FertilityOverflow, IntentNode, InvariantViolation, MalformedBIO,
                                   NestedIntentConflict, ParseTree, SlotNode, TokenMismatch, UnbalancedBrackets,
                                   UnnestableSpans, decode_flat, decode_flat_verbose, encode_flat, is_nested,
                                   labels_equal, parse_hierarchical, serialize, validate)
from lowres_nlu.synthetic import ToyGrammar, random_tree

GRANDMA = "[IN:CREATE_CALL call [IN:GET_CONTACT Grandma ] ]"
REMINDER = ("[IN:CREATE_REMINDER remind [SL:PERSON_REMINDED me ] to [SL:TODO [IN:SEND_MESSAGE "
            "[SL:METHOD_MESSAGE message ] [SL:RECIPIENT Ann ] ] ] ]")


def test_parse_call_grandma():
    t = parse_hierarchical(GRANDMA, ["call", "Grandma"])
    assert t.root.label == "CREATE_CALL" and t.root.span == (1, 2)
    (child,) = t.root.children
    assert isinstance(child, IntentNode)
    assert child.label == "GET_CONTACT" and child.span == (2, 2)


def test_parse_leaf():
    t = parse_hierarchical("[IN:FOO a ]", ["a"])
    assert t.root.label == "FOO" and t.root.span == (1, 1) and t.root.children == ()


def test_parse_errors():
    with pytest.raises(UnbalancedBrackets):
        parse_hierarchical("[IN:FOO a", ["a"])
    with pytest.raises(UnbalancedBrackets):
        parse_hierarchical("[IN:FOO a ] ]", ["a"])
    with pytest.raises(TokenMismatch):
        parse_hierarchical("[IN:FOO a b ]", ["a", "c"])


def test_serialize_is_canonical_and_bit_exact():
    for text in (GRANDMA, REMINDER, "[IN:FOO a ]"):
        assert serialize(parse_hierarchical(text)) == text
    # extra whitespace and lower-case labels normalize to the canonical form
    t = parse_hierarchical("[IN:foo   a  [SL:bar b ]  ]")
    assert serialize(t) == "[IN:FOO a [SL:BAR b ] ]"


def test_random_trees_reparse():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = random_tree(rng)
        assert parse_hierarchical(serialize(t), list(t.tokens)) == t


def test_encode_grandma_under_irrelevant_root():
    t = parse_hierarchical("[IN:OTHER " + GRANDMA + " ]")
    flat = encode_flat(t)
    assert list(flat.fine_intents) == ["B-CREATE-CALL", "B-GET-CONTACT-NESTED"]
    assert flat.slot_stacks == ((), ())
    assert decode_flat(flat, t.tokens) == t


def test_encode_message_stack():
    t = parse_hierarchical(REMINDER)
    flat = encode_flat(t)
    i = t.tokens.index("message")
    assert list(flat.slot_stacks[i]) == ["B-TODO", "B-METHOD-MESSAGE"]
    assert flat.fertility[i] == 2
    assert flat.fine_intents[i] == "B-SEND-MESSAGE"


def test_encode_flat_utterance():
    t = parse_hierarchical("[IN:GET_WEATHER what is the weather ]")
    flat = encode_flat(t)
    assert flat.coarse_intent == "GET_WEATHER"
    assert set(flat.fine_intents) == {"O"}
    assert all(s == () for s in flat.slot_stacks)
    assert not is_nested(t)


def test_encode_errors():
    deep = parse_hierarchical("[IN:A [SL:X [IN:B x [SL:Y [IN:C y [SL:Z w ] ] ] ] ] ]")
    with pytest.raises(FertilityOverflow):
        encode_flat(deep, max_fertility=2)
    assert list(encode_flat(deep).slot_stacks[2]) == ["I-X", "I-Y", "B-Z"]
    # an intent and its nested intent both start at token 1
    clash = ParseTree(("a", "b"), IntentNode("R", (1, 2), (
        IntentNode("A", (1, 2), (IntentNode("B", (1, 1)),)),)))
    with pytest.raises(NestedIntentConflict):
        encode_flat(clash)


def test_decode_trivial():
    flat = FlatLabels("C", ["O"] * 3, [[], [], []])
    t = decode_flat(flat, ["a", "b", "c"])
    assert t.root == IntentNode("C", (1, 3))


def test_decode_errors_and_repair():
    flat = FlatLabels("C", ["O", "O"], [["B-A"], ["I-B"]])
    with pytest.raises(MalformedBIO):
        decode_flat(flat, ["a", "b"])
    t, repairs = decode_flat_verbose(flat, ["a", "b"], repair=True)
    assert [d.code for d in repairs] == ["MalformedBIO"]
    assert [c.label for c in t.root.children] == ["A", "B"]
    # fine intent I- with no B- is an orphan too
    with pytest.raises(MalformedBIO):
        decode_flat(FlatLabels("C", ["I-X"], [[]]), ["a"])
    # a depth-2 slot directly inside a depth-1 slot has no intent between them
    with pytest.raises(UnnestableSpans):
        decode_flat(FlatLabels("C", ["O"], [["B-A", "B-B"]]), ["a"])


def test_validate():
    t = parse_hierarchical(GRANDMA)
    assert validate(t) == []
    bad = ParseTree(tuple("abcd"), IntentNode("R", (1, 4), (SlotNode("A", (1, 3)), SlotNode("B", (2, 4)))))
    assert [str(d) for d in validate(bad)] == ["SiblingOverlap@2"]
    with pytest.raises(InvariantViolation):
        encode_flat(bad)
    flat = FlatLabels("R", ["O", "O"], [["B-A"], ["I-B"]])
    assert [d.code for d in validate(flat)] == ["MalformedBIO"]


def test_case_insensitive_label_comparison():
    a = FlatLabels("X", ["B-Y"], [["B-Z"]])
    b = FlatLabels("x", ["b-y"], [["b-z"]])
    assert labels_equal(a, b)
    assert not labels_equal(a, FlatLabels("X", ["O"], [["B-Z"]]))


def _slot_counts(t):
    counts = [0] * len(t.tokens)
    for node, _ in t.nodes():
        if isinstance(node, SlotNode):
            for i in range(node.span[0], node.span[1] + 1):
                counts[i - 1] += 1
    return counts


def _nested_flags_ok(t, flat):
    # NESTED marks exactly those intents with a non-root intent ancestor
    def walk(node, inside):
        for child in node.children:
            if isinstance(child, IntentNode):
                assert flat.fine_intents[child.span[0] - 1].endswith("-NESTED") == inside
                walk(child, True)
            else:
                walk(child, inside)
    walk(t.root, False)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_codec_properties(seed):
    t = random_tree(np.random.default_rng(seed))
    flat = encode_flat(t)
    assert validate(flat) == []
    assert [len(s) for s in flat.slot_stacks] == _slot_counts(t)
    _nested_flags_ok(t, flat)
    assert decode_flat(flat, t.tokens) == t
    assert FlatLabels.from_record(flat.to_record(t.tokens)) == flat


def test_toy_grammar_round_trip():
    for t in ToyGrammar().dataset(200, seed=1):
        assert decode_flat(encode_flat(t), t.tokens) == t
