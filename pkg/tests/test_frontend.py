import json

import pytest
from hypothesis import given, settings, strategies as st

import gradflow.examples as examples
from gradflow import (
    FORMAT_VERSION,
    ProgramBuilder,
    build_backward,
    parse_program,
    program_to_dict,
    serialize_program,
    validate,
)
from gradflow.errors import GradflowError, ProgramSyntaxError, ValidationFailed


@pytest.mark.parametrize("name", sorted(examples.EXAMPLES))
def test_round_trip_is_byte_stable(name):
    """serialize -> parse -> serialize must reproduce the exact bytes, for
    the forward program and for its generated reverse program."""
    program = examples.build(name)
    for p in (program, build_backward(program).backward):
        text = serialize_program(p)
        again = serialize_program(parse_program(text))
        assert again == text
        assert validate(parse_program(text)) == []


def test_parse_accepts_explicit_null_for_optional_keys():
    doc = program_to_dict(examples.build("scaled_product_chain"))
    node = doc["region"][0]["nodes"][2]
    assert "group" not in node  # canonical form drops empty optionals
    node["group"] = None
    reparsed = parse_program(json.dumps(doc))
    assert validate(reparsed) == []


def test_canonical_form_has_no_nulls():
    for name in sorted(examples.EXAMPLES):
        assert "null" not in serialize_program(examples.build(name))


def test_format_version_checked():
    doc = program_to_dict(examples.build("exp_sin_chain"))
    doc["format_version"] = FORMAT_VERSION + 1
    with pytest.raises(ProgramSyntaxError):
        parse_program(json.dumps(doc))


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d.pop("descriptors"), "descriptors"),
    (lambda d: d["region"].__setitem__(0, 42), "region"),
    (lambda d: d.__setitem__("dependent", 7), "dependent"),
])
def test_parse_reports_bad_shapes(mutate, msg):
    doc = program_to_dict(examples.build("exp_sin_chain"))
    mutate(doc)
    with pytest.raises(ProgramSyntaxError):
        parse_program(json.dumps(doc))


def test_unknown_keys_rejected():
    doc = program_to_dict(examples.build("exp_sin_chain"))
    doc["extra"] = 1
    with pytest.raises(ProgramSyntaxError):
        parse_program(json.dumps(doc))


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet='{}[]",:0-9a-z \n', max_size=200))
def test_fuzzed_text_never_escapes_the_error_family(text):
    try:
        parse_program(text)
    except GradflowError:
        pass  # ProgramSyntaxError or a validation error, both fine


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200))
def test_fuzzed_bytes_never_escape_the_error_family(blob):
    try:
        parse_program(blob)
    except GradflowError:
        pass


def test_mutated_documents_fail_loud_not_weird():
    # flip individual values inside a real document to junk; the parser must
    # either accept the result or raise its own error type
    base = program_to_dict(examples.build("branchy_scale"))
    text = json.dumps(base)
    for needle, repl in [('"sin"', '"sine"'), ('"real64"', '"real63"'),
                         ('"lt', '"lessthan'), ("[", "["), ('"X"', '""')]:
        mutated = text.replace(needle, repl, 1)
        try:
            p = parse_program(mutated)
            validate(p)
        except GradflowError:
            pass


def test_builder_requires_open_state():
    b = ProgramBuilder(("n",))
    b.array("X", ("n",), role="input")
    with pytest.raises(RuntimeError):
        b.read("X")


def test_builder_rejects_invalid_program():
    b = ProgramBuilder(("n",))
    b.array("X", ("n",), role="input")
    b.scalar("O", role="output")
    with b.state("s") as s:
        s.library("reduce_sum", {"x": "X"}, {"y": "O"})
    with pytest.raises(ValidationFailed):
        b.finish("O", ["X", "missing"])
