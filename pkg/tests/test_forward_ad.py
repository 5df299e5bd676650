import math
import random

import pytest

from ssagrad import (DenseTensor, Dual, Machine, dual_eval, eval_function,
                     finite_diff, fused_map_pullback, fused_map_with_partials,
                     grad, parse_ir)
from ssagrad.forward_ad import pack_rows
from ssagrad.ir import F64, tensor_type

from conftest import rel

SRC = """
func @poly(%x: f64) -> f64 {
^entry:
  %x2 = mul %x, %x
  %x3 = mul %x2, %x
  %t = tanh %x3
  ret %t
}

func @two(%a: f64, %b: f64) -> f64 {
^entry:
  %s = add %a, %b
  %t = tanh %s
  ret %t
}

func @branchy(%x: f64) -> f64 {
^entry:
  %z = const f64 0.0
  %pos = gt %x, %z
  br %pos, ^a(), ^b()
^a:
  %one = const f64 1.0
  %u = add %x, %one
  %l = log %u
  jmp ^join(%l)
^b:
  %n = neg %x
  %e = exp %n
  jmp ^join(%e)
^join(%v: f64):
  ret %v
}
"""


@pytest.fixture
def m():
    return parse_ir(SRC)


def dpoly(x):
    return 3 * x * x / math.cosh(x * x * x) ** 2


def test_dual_eval_derivative(m):
    for x in (0.3, -0.8, 1.1):
        out = dual_eval(m, "poly", (Dual(x, (1.0,)),))
        assert out.p == math.tanh(x * x * x)
        assert rel(out.t[0], dpoly(x)) < 1e-12


def test_dual_eval_plain_floats_get_zero_rows(m):
    out = dual_eval(m, "two", (Dual(0.5, (1.0,)), 0.25))
    assert rel(out.t[0], 1 / math.cosh(0.75) ** 2) < 1e-12


def test_dual_eval_multi_row(m):
    # one pass carries both partials
    out = dual_eval(m, "two", (Dual(0.5, (1.0, 0.0)), Dual(0.25, (0.0, 1.0))))
    d = 1 / math.cosh(0.75) ** 2
    assert rel(out.t[0], d) < 1e-12
    assert rel(out.t[1], d) < 1e-12


def test_dual_eval_mixed_widths_rejected(m):
    with pytest.raises(ValueError):
        dual_eval(m, "two", (Dual(0.5, (1.0,)), Dual(0.25, (0.0, 1.0))))


def test_dual_eval_through_branch(m):
    out = dual_eval(m, "branchy", (Dual(2.0, (1.0,)),))
    assert rel(out.t[0], 1 / 3.0) < 1e-12
    out = dual_eval(m, "branchy", (Dual(-1.5, (1.0,)),))
    assert rel(out.t[0], -math.exp(1.5)) < 1e-12


def test_pack_rows(m):
    rows = pack_rows(Machine(m, 10_000), m.get("two"), (0.5, 0.25))
    assert rows[0] == math.tanh(0.75)
    d = 1 / math.cosh(0.75) ** 2
    assert rel(rows[1], d) < 1e-12 and rel(rows[2], d) < 1e-12


def test_fused_primal_bit_identical_to_interp(m):
    # same scalar code, same rounding: equality is exact by construction
    rng = random.Random(11)
    for _ in range(50):
        vals = [rng.uniform(-2, 2) for _ in range(4)]
        x = DenseTensor.from_flat((4,), vals)
        b = rng.uniform(-1, 1)
        primal, _ = fused_map_with_partials(m, "two", (x, b))
        unfused = [eval_function(m, "two", (v, b))[0] for v in vals]
        assert primal.flat() == unfused


def test_fused_partials_match_fd(m):
    x = DenseTensor.from_flat((4,), [0.2, -0.9, 1.4, 0.05])
    b = 0.7
    _, parts = fused_map_with_partials(m, "two", (x, b))
    h = 1e-6
    for i, v in enumerate(x.flat()):
        fd = (eval_function(m, "two", (v + h, b))[0]
              - eval_function(m, "two", (v - h, b))[0]) / (2 * h)
        assert rel(parts[0].flat()[i], fd) < 1e-6
        fd_b = (eval_function(m, "two", (v, b + h))[0]
                - eval_function(m, "two", (v, b - h))[0]) / (2 * h)
        assert rel(parts[1].flat()[i], fd_b) < 1e-6


def test_fused_all_scalar_args(m):
    primal, parts = fused_map_with_partials(m, "two", (0.5, 0.25))
    assert primal == math.tanh(0.75)
    assert len(parts) == 2 and not isinstance(parts[0], DenseTensor)


def test_fused_broadcast_shapes(m):
    x = DenseTensor.from_flat((2, 1), [0.1, 0.2])
    y = DenseTensor.from_flat((3,), [1.0, 2.0, 3.0])
    primal, parts = fused_map_with_partials(m, "two", (x, y))
    assert primal.shape == (2, 3)
    assert parts[0].shape == (2, 3) and parts[1].shape == (2, 3)


def test_fused_pullback_folds_broadcast(m):
    x = DenseTensor.from_flat((2, 1), [0.1, 0.2])
    y = DenseTensor.from_flat((3,), [1.0, 2.0, 3.0])
    _, parts = fused_map_with_partials(m, "two", (x, y))
    ybar = DenseTensor.full((2, 3), 1.0)
    cx, cy = fused_map_pullback(parts, (tensor_type(2, 1), tensor_type(3)), ybar)
    assert cx.shape == (2, 1)
    assert cy.shape == (3,)
    # row/column sums of the dense partials
    px, py = parts
    assert cx.flat() == pytest.approx(
        [sum(px.data[i]) for i in range(2)], abs=1e-15)
    assert cy.flat() == pytest.approx(
        [px.data[0][j] * 0 + py.data[0][j] + py.data[1][j] for j in range(3)],
        abs=1e-15)


def test_fused_pullback_scalar_operand(m):
    x = DenseTensor.from_flat((4,), [0.2, -0.9, 1.4, 0.05])
    _, parts = fused_map_with_partials(m, "two", (x, 0.7))
    ybar = DenseTensor.full((4,), 1.0)
    cx, cb = fused_map_pullback(parts, (tensor_type(4), F64), ybar)
    assert cx.shape == (4,)
    assert not isinstance(cb, DenseTensor)


def test_reverse_over_fused_matches_fd(analytic):
    # the composed route the acceptance suite leans on: reverse AD
    # through a fused_map call site
    x = DenseTensor.from_flat((4,), [0.2, -0.9, 1.4, 0.05])
    g = grad(analytic, "mapped", (x, 0.7))
    fd = finite_diff(analytic, "mapped", (x, 0.7), (1.0,))
    for a, b in zip(g[0].flat(), fd[0].flat()):
        assert rel(a, b) < 1e-6
    assert rel(g[1], fd[1]) < 1e-6


def test_rejects_non_scalar_callee(analytic):
    with pytest.raises(ValueError):
        dual_eval(analytic, "net", (Dual(1.0, (1.0,)),))
