import pytest
from hypothesis import given, strategies as st

from dacforge.corpus import Problem
from dacforge.parse import SubproblemGroup
from dacforge.prompts import (
    PromptError,
    PromptTemplate,
    identify_prompt,
    render_conquering_prompt,
    render_cot_prompt,
    render_division_prompt,
)


def test_slot_text_inside_statement_survives():
    statement = "Literal {REPLACE} and {SUBPROBLEMS} in a problem."
    prompt = render_conquering_prompt(statement, SubproblemGroup.of(["a {REPLACE}"]))
    assert statement in prompt and "a {REPLACE}" in prompt
    info = identify_prompt(prompt)
    assert info.kind == "conquering" and info.statement == statement


def test_identify_each_kind(reciprocal_system):
    statement, subs = reciprocal_system
    p = Problem("x", statement, "55")
    assert identify_prompt(render_division_prompt(p)).kind == "division"
    assert identify_prompt(render_cot_prompt(p)).statement == statement
    info = identify_prompt(render_conquering_prompt(p, SubproblemGroup.of(subs)))
    assert list(info.group.subproblems) == subs
    assert identify_prompt("hello") is None


def test_cot_prompt_asks_for_box():
    assert "\\boxed{}" in render_cot_prompt("What is 1+1?")


def test_errors():
    with pytest.raises(PromptError):
        render_division_prompt("   ")
    with pytest.raises(PromptError):
        render_conquering_prompt("p", SubproblemGroup((), False))
    with pytest.raises(PromptError):
        PromptTemplate("division", "no slot here")
    with pytest.raises(PromptError):
        PromptTemplate("conquering", "{REPLACE} only")


@given(st.text(min_size=1, max_size=200).filter(str.strip))
def test_division_identify_roundtrip(statement):
    assert identify_prompt(render_division_prompt(statement)).statement == statement
