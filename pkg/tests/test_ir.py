"""Parser, printer, and verifier behavior, including the corruption
kit used by the acceptance suite: every single-edit fault must draw at
least one diagnostic."""

import copy
import random

import pytest

from ssagrad import ParseError, parse_ir, print_ir, verify
from ssagrad.ir import Br, Jmp


def test_round_trip_identity(analytic):
    text = print_ir(analytic)
    assert print_ir(parse_ir(text)) == text


def test_print_is_canonical():
    # odd whitespace and blank lines normalize away on the first print
    src = """
func   @f( %x: f64 ) -> f64 {
^entry:

  %y = add %x , %x
  ret %y
}
"""
    text = print_ir(parse_ir(src))
    assert print_ir(parse_ir(text)) == text
    assert "  %y = add %x, %x\n" in text


def test_verify_clean(analytic):
    assert verify(analytic) == []


def test_function_order_preserved(analytic):
    names = list(analytic.functions)
    reparsed = parse_ir(print_ir(analytic))
    assert list(reparsed.functions) == names


def test_parse_undefined_value():
    with pytest.raises(ParseError, match="undefined value"):
        parse_ir("func @f(%x: f64) -> f64 {\n^entry:\n  ret %y\n}\n")


def test_parse_duplicate_name():
    src = ("func @f(%x: f64) -> f64 {\n^entry:\n"
           "  %a = add %x, %x\n  %a = mul %x, %x\n  ret %a\n}\n")
    with pytest.raises(ParseError):
        parse_ir(src)


def test_parse_garbage():
    with pytest.raises(ParseError):
        parse_ir("funk @f() -> f64 {}")
    with pytest.raises(ParseError):
        parse_ir("func @f(%x: f32) -> f64 {\n^entry:\n  ret %x\n}\n")


def test_parse_forward_reference_ok():
    # textual forward references within a function resolve in phase 2
    src = """
func @f(%x: f64) -> f64 {
^entry:
  jmp ^b()
^b:
  %y = add %x, %x
  ret %y
}
"""
    m = parse_ir(src)
    assert verify(m) == []


def test_value_name(analytic):
    fn = analytic.get("prod")
    pv, _ = fn.params[0]
    assert fn.value_name(pv) == "x"


def test_module_get_missing(analytic):
    with pytest.raises(KeyError):
        analytic.get("ghost")


# ------------------------------------------------- corruption helpers

def corrupt_swap_operand(fn, rng):
    """Point one operand at the instruction's own result."""
    cands = [i for b in fn.blocks for i in b.body if i.operands]
    if not cands:
        return False
    ins = rng.choice(cands)
    k = rng.randrange(len(ins.operands))
    ins.operands = ins.operands[:k] + (ins.result,) + ins.operands[k + 1:]
    return True


def corrupt_delete_terminator(fn, rng):
    b = rng.choice(fn.blocks)
    b.term = None
    return True


def corrupt_retarget_branch(fn, rng):
    cands = [b for b in fn.blocks if isinstance(b.term, (Jmp, Br))]
    if not cands:
        return False
    b = rng.choice(cands)
    if isinstance(b.term, Jmp):
        b.term.target = "__nowhere"
    else:
        b.term.then_target = "__nowhere"
    return True


CORRUPTIONS = (corrupt_swap_operand, corrupt_delete_terminator,
               corrupt_retarget_branch)


@pytest.mark.parametrize("corrupt", CORRUPTIONS,
                         ids=lambda c: c.__name__.removeprefix("corrupt_"))
def test_single_edit_corruption_caught(analytic, corrupt):
    rng = random.Random(5)
    for name in ("prod", "cube", "absval", "net"):
        m = copy.deepcopy(analytic)
        if corrupt(m.get(name), rng):
            assert verify(m), f"{corrupt.__name__} on @{name} slipped through"


def test_diagnostic_format():
    src = """
func @f(%x: f64) -> f64 {
^entry:
  %z = const f64 0.0
  %c = lt %x, %z
  br %c, ^a(), ^b()
^a:
  %t = add %x, %x
  jmp ^join()
^b:
  jmp ^join()
^join:
  ret %t
}
"""
    m = parse_ir(src)
    diags = verify(m)
    assert len(diags) == 1
    d = diags[0]
    assert d.function == "f" and d.block == "join"
    assert str(d) == "@f ^join: %t does not dominate its use"
