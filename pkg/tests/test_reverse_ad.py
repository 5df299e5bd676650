"""Source-to-source adjoints.

The transform is judged three ways everywhere else (tape and finite
differences via the acceptance suite); here the analytic fixtures pin
exact values and the structural properties pin what augment emits.
"""

import math

import pytest

from ssagrad import (ADError, DenseTensor, Machine, augment,
                     build_grad_function, eval_function, finite_diff, grad,
                     grad_of_grad, parse_ir, print_ir, trace_grad, verify)

from conftest import max_rel, rel


def test_product_rule(analytic):
    g = grad(analytic, "prod", (2.0, 3.0))
    assert g == {0: 3.0, 1: 2.0}


def test_loop_cube(analytic):
    for x in (2.0, -1.5, 0.3):
        g = grad(analytic, "cube", (x,))
        assert rel(g[0], 3 * x * x) < 1e-12


def test_branch_sign(analytic):
    assert grad(analytic, "absval", (2.5,))[0] == 1.0
    assert grad(analytic, "absval", (-2.5,))[0] == -1.0


def test_data_dependent_trips(analytic):
    for n in (0, 1, 5, 8):
        g = grad(analytic, "powloop", (1.3, n))
        assert rel(g[0], n * 1.3 ** (n - 1) if n else 0.0) < 1e-12


def test_call_inlined(analytic):
    g = grad(analytic, "callin", (1.3,))
    assert rel(g[0], 4 * 1.3 ** 3) < 1e-12


def test_tensor_adjoints_match_tape(analytic):
    w = DenseTensor.from_flat((2, 3), [0.3, -0.5, 0.8, 1.1, 0.2, -0.4])
    v = DenseTensor.from_flat((3, 1), [0.5, -1.2, 0.9])
    g = grad(analytic, "net", (w, v))
    o = trace_grad(analytic, "net", (w, v), (1.0,))
    for vid in g:
        assert max_rel(g[vid], o[vid]) < 1e-14


def test_augment_names_and_caching(analytic):
    aug, pb = augment(analytic, "prod")
    assert aug.name == "prod__aug" and pb.name == "prod__pb"
    aug2, pb2 = augment(analytic, "prod")
    assert aug2 is aug and pb2 is pb


def test_augmented_primal_bit_identical(analytic):
    augment(analytic, "cube")
    for x in (0.7, -2.0, 1.9):
        base = eval_function(analytic, "cube", (x,))
        out = eval_function(analytic, "cube__aug", (x,))
        assert out[0] == base[0]


def test_augmented_module_verifies_and_round_trips(analytic):
    for name in ("prod", "cube", "absval", "net", "callin", "mapped"):
        augment(analytic, name)
    assert verify(analytic) == []
    text = print_ir(analytic)
    m2 = parse_ir(text)
    assert print_ir(m2) == text
    # the reparsed adjoint still computes
    g = grad(m2, "cube", (2.0,))
    assert g[0] == 12.0


def test_pullback_is_pure(analytic):
    aug, pb = augment(analytic, "cube")
    machine = Machine(analytic, 100_000)
    out = machine.call(aug.name, (1.5,))
    blog, vstack = out[1], out[2]
    a = machine.call(pb.name, (blog, vstack, 1.0))
    b = machine.call(pb.name, (blog, vstack, 1.0))
    assert a == b


def test_seed_scaling(analytic):
    g = grad(analytic, "prod", (2.0, 3.0), (7.0,))
    assert g == {0: 21.0, 1: 14.0}


def test_multi_result_seeds():
    m = parse_ir("""
func @pair(%x: f64) -> (f64, f64) {
^entry:
  %d = add %x, %x
  %s = mul %x, %x
  ret %d, %s
}
""")
    assert grad(m, "pair", (3.0,), (1.0, 0.0)) == {0: 2.0}
    assert grad(m, "pair", (3.0,), (0.0, 1.0)) == {0: 6.0}
    with pytest.raises(ValueError):
        grad(m, "pair", (3.0,))


def test_int_params_absent(analytic):
    g = grad(analytic, "powloop", (2.0, 3))
    assert list(g) == [0]


def test_build_grad_function(analytic):
    wrapper = build_grad_function(analytic, "cube")
    assert wrapper.name == "cube__grad"
    assert eval_function(analytic, "cube__grad", (2.0,)) == (12.0,)
    assert verify(analytic) == []


def test_grad_of_grad_cube(analytic):
    for x in (1.1, -0.4, 2.0):
        assert rel(grad_of_grad(analytic, "cube", x), 6 * x) < 1e-9


def test_grad_of_grad_transcendentals():
    m = parse_ir("""
func @t(%x: f64) -> f64 {
^entry:
  %y = tanh %x
  ret %y
}

func @e(%x: f64) -> f64 {
^entry:
  %y = exp %x
  ret %y
}
""")
    for x in (0.3, -1.0, 0.9):
        want = -2 * math.tanh(x) / math.cosh(x) ** 2
        assert rel(grad_of_grad(m, "t", x), want) < 1e-9
        assert rel(grad_of_grad(m, "e", x), math.exp(x)) < 1e-9


def test_relu_kink_sides():
    m = parse_ir("""
func @r(%x: f64) -> f64 {
^entry:
  %y = relu %x
  ret %y
}
""")
    assert grad(m, "r", (2.0,))[0] == 1.0
    assert grad(m, "r", (-2.0,))[0] == 0.0


def test_recursion_rejected():
    m = parse_ir("""
func @loopy(%x: f64) -> f64 {
^entry:
  %y = call %x {fn = @loopy}
  ret %y
}
""")
    with pytest.raises(ADError, match="recursive"):
        augment(m, "loopy")


def test_op_without_rule_named():
    m = parse_ir("""
func @halfsig(%a: f64) -> f64 {
^entry:
  %s = sigmoid %a
  ret %s
}

func @packs(%x: tensor<3xf64>) -> tensor<2x3xf64> {
^entry:
  %p = fused_pack %x {fn = @halfsig}
  ret %p
}
""")
    with pytest.raises(ADError, match="fused_pack"):
        augment(m, "packs")


def test_grad_matches_fd_on_mapped(analytic):
    x = DenseTensor.from_flat((4,), [0.2, -0.9, 1.4, 0.05])
    g = grad(analytic, "mapped", (x, 0.7))
    fd = finite_diff(analytic, "mapped", (x, 0.7), (1.0,))
    assert max_rel(g[0], fd[0]) < 1e-6
    assert rel(g[1], fd[1]) < 1e-6
